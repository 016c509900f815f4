use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use vacp::eval::{
    predict_records, temperature_sweep, verify_partial_coverage, PartialCoverageConfig,
    DEFAULT_RESAMPLES, DEFAULT_SWEEP_TOLERANCE,
};
use vacp::io::{
    self, check_disjoint, CalibrationFile, FormatError, PredictionRow, Split, SplitFractions,
    SplitManifest,
};
use vacp::mask::{build_mask, validate_mask, DEFAULT_EMPIRICAL_THRESHOLD};
use vacp::{
    calibrate_pipeline, distribution_stats, masked_temperature_softmax, ConformalConfig, ErrorKind,
    EvalOptions, ExclusionReason, LogitRecord, Predictor, ScoreMode, StatsParams, SynthConfig,
    VocabMask,
};

const EXIT_CONTRACT: u8 = 2;
const EXIT_FORMAT: u8 = 3;
const EXIT_GUARANTEE: u8 = 4;

#[derive(Parser)]
#[command(
    name = "vacp",
    version,
    about = "Conformal next-token prediction sets over an effective vocabulary"
)]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset, token metadata, true mask and split manifest.
    Gen(GenArgs),
    /// Per-sample and aggregate distribution statistics.
    Stats(StatsArgs),
    /// Build or validate an effective-vocabulary mask.
    #[command(subcommand)]
    Mask(MaskCommand),
    /// Compute the conformal threshold on calibration records.
    Calibrate(CalibrateArgs),
    /// Write the prediction set of every record.
    Predict(PredictArgs),
    /// Coverage, set-size and efficiency report.
    Evaluate(EvaluateArgs),
    /// Recalibrate and evaluate across a temperature grid.
    Sweep(SweepArgs),
    /// Monte Carlo check of coverage >= (1 - alpha) * p under an imperfect mask.
    #[command(name = "verify-partial-coverage")]
    VerifyPartialCoverage(PartialCoverageArgs),
}

#[derive(Subcommand)]
enum MaskCommand {
    /// Structural then empirical filtering.
    Build(MaskBuildArgs),
    /// Fraction of targets inside the mask; exits 4 if below 1.
    Validate(MaskValidateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Validation,
    Calibration,
    Evaluation,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Validation => Split::Validation,
            SplitArg::Calibration => Split::Calibration,
            SplitArg::Evaluation => Split::Evaluation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    #[value(alias = "deterministic")]
    Det,
    #[value(alias = "randomized")]
    Rand,
}

impl From<ModeArg> for ScoreMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Det => ScoreMode::Deterministic,
            ModeArg::Rand => ScoreMode::Randomized,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Binary logit dataset.
    #[arg(long)]
    data: PathBuf,
    /// Split manifest; restricts the data to one split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Split to select from the manifest (each command has a default).
    #[arg(long, value_enum, requires = "manifest")]
    split: Option<SplitArg>,
}

#[derive(Args)]
struct GenArgs {
    /// JSON synthetic-data config; an optional "split" object sets fractions.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, default_value_t = 1e-5)]
    eff_threshold: f64,
    /// Capped at the vocabulary size.
    #[arg(long, default_value_t = 1000)]
    tail_cutoff: usize,
    #[arg(long, default_value_t = 10)]
    k1: usize,
    /// Capped at the vocabulary size.
    #[arg(long, default_value_t = 1000)]
    k2: usize,
    /// Per-sample CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MaskBuildArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    metadata: PathBuf,
    #[arg(long, default_value_t = DEFAULT_EMPIRICAL_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MaskValidateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    mask: PathBuf,
    /// JSON validation report.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
    #[arg(long, value_enum, default_value = "det")]
    mode: ModeArg,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    calibration: PathBuf,
    /// Required when the calibration used a mask.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// JSONL, one prediction set per line.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    calibration: PathBuf,
    /// Required when the calibration used a mask.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    /// JSON report.
    #[arg(long)]
    out: PathBuf,
    /// CSV row (defaults to the report path with a .csv extension).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: PathBuf,
    /// Calibrates on the calibration split, evaluates on the evaluation split.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.2,0.5,1.0")]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "det")]
    mode: ModeArg,
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_SWEEP_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PartialCoverageArgs {
    /// JSON synthetic-data config with target_outside_prob set.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    alpha: f64,
    #[arg(long, default_value_t = 2000)]
    n_cal: usize,
    #[arg(long, default_value_t = 5000)]
    n_test: usize,
    #[arg(long, value_enum, default_value = "det")]
    mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_RESAMPLES)]
    resamples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// A statistical guarantee check failed; exits with code 4.
#[derive(Debug)]
struct GuaranteeFailure(String);

impl fmt::Display for GuaranteeFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for GuaranteeFailure {}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<GuaranteeFailure>() {
            return EXIT_GUARANTEE;
        }
        if let Some(e) = cause.downcast_ref::<vacp::Error>() {
            return match e.kind() {
                ErrorKind::Contract => EXIT_CONTRACT,
                ErrorKind::Format => EXIT_FORMAT,
            };
        }
        if cause.is::<FormatError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
        {
            return EXIT_FORMAT;
        }
    }
    EXIT_CONTRACT
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Gen(a) => gen(a, seed),
        Command::Stats(a) => stats(a),
        Command::Mask(MaskCommand::Build(a)) => mask_build(a),
        Command::Mask(MaskCommand::Validate(a)) => mask_validate(a),
        Command::Calibrate(a) => calibrate(a, seed),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a, seed),
        Command::Sweep(a) => sweep(a, seed),
        Command::VerifyPartialCoverage(a) => partial_coverage(a, seed),
    }
}

// ------------------------------------------------------------------ loading

#[derive(Serialize, Deserialize)]
struct GenConfig {
    synth: SynthConfig,
    split: SplitFractions,
}

fn read_gen_config(path: &Path) -> Result<GenConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| FormatError::Io {
            path: path.to_owned(),
            source,
        })
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let split = match value.as_object_mut().and_then(|o| o.remove("split")) {
        Some(v) => serde_json::from_value(v).context("parsing \"split\"")?,
        None => SplitFractions::default(),
    };
    let synth =
        serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
    Ok(GenConfig { synth, split })
}

struct Selection {
    records: Vec<LogitRecord>,
    vocab_size: usize,
}

fn load_data(args: &DataArgs, default_split: Split) -> Result<Selection> {
    let ds = io::read_logits(&args.data)
        .with_context(|| format!("reading logits {}", args.data.display()))?;
    let records = match &args.manifest {
        Some(path) => {
            let manifest = read_manifest(path)?;
            let split = args.split.map_or(default_split, Split::from);
            manifest.select(&ds.records, split)?
        }
        None => ds.records,
    };
    Ok(Selection {
        records,
        vocab_size: ds.vocab_size,
    })
}

fn read_manifest(path: &Path) -> Result<SplitManifest> {
    io::read_split_manifest(path)
        .with_context(|| format!("reading split manifest {}", path.display()))
}

fn load_mask(path: Option<&PathBuf>) -> Result<Option<VocabMask>> {
    path.map(|p| io::read_mask(p).with_context(|| format!("reading mask {}", p.display())))
        .transpose()
}

fn ids(records: &[LogitRecord]) -> Vec<String> {
    records.iter().map(|r| r.sample_id().to_owned()).collect()
}

/// Refuses to use records the mask's empirical filter has seen.
fn check_mask_disjoint(
    mask: Option<&VocabMask>,
    split_name: &str,
    records: &[LogitRecord],
) -> Result<()> {
    if let Some(mask) = mask {
        check_disjoint(
            "mask validation",
            &mask.build_config().validation_sample_ids,
            split_name,
            &ids(records),
        )?;
    }
    Ok(())
}

fn require_mask(calibration: &CalibrationFile, mask: Option<&VocabMask>) -> Result<()> {
    if let (Some(id), None) = (&calibration.result.config.mask_id, mask) {
        return Err(vacp::Error::InvalidArgument(format!(
            "calibration was computed under mask {id}; pass it with --mask"
        ))
        .into());
    }
    Ok(())
}

fn eval_options(seed: Option<u64>, calibration: &CalibrationFile, resamples: usize) -> EvalOptions {
    EvalOptions {
        n_resamples: resamples,
        bootstrap_seed: seed.unwrap_or(calibration.result.config.seed),
    }
}

// ----------------------------------------------------------------- commands

fn gen(args: GenArgs, seed: Option<u64>) -> Result<()> {
    let mut config = read_gen_config(&args.config)?;
    if let Some(seed) = seed {
        config.synth.seed = seed;
    }
    let data = vacp::generate(&config.synth)?;
    std::fs::create_dir_all(&args.out)
        .map_err(|source| FormatError::Io {
            path: args.out.clone(),
            source,
        })
        .context("creating output directory")?;

    let dataset_id = format!(
        "synth-v{}-n{}-s{}",
        config.synth.vocab_size, config.synth.n_samples, config.synth.seed
    );
    let manifest = SplitManifest::random(
        dataset_id,
        &ids(&data.records),
        config.split,
        config.synth.seed,
    )?;

    let out = &args.out;
    io::write_logits(
        &out.join("data.vacp"),
        config.synth.vocab_size,
        &data.records,
    )?;
    io::write_metadata(&out.join("metadata.jsonl"), &data.metadata)?;
    io::write_mask(&out.join("true_mask.json"), &data.true_v_star)?;
    io::write_split_manifest(&out.join("split.json"), &manifest)?;
    io::write_versioned(&out.join("gen_config.json"), "vacp.gen_config", &config)?;

    println!("samples          {}", data.records.len());
    println!("vocab_size       {}", config.synth.vocab_size);
    println!("live tokens      {}", data.true_v_star.included_count());
    println!(
        "splits           validation {} / calibration {} / evaluation {}",
        manifest.validation_ids.len(),
        manifest.calibration_ids.len(),
        manifest.evaluation_ids.len()
    );
    println!("wrote            {}", out.display());
    Ok(())
}

fn stats(args: StatsArgs) -> Result<()> {
    let sel = load_data(&args.data, Split::Evaluation)?;
    let mask = load_mask(args.mask.as_ref())?;
    if sel.records.is_empty() {
        bail!(vacp::Error::NoTestData);
    }
    let params = StatsParams {
        eff_threshold: args.eff_threshold,
        tail_rank_cutoff: args.tail_cutoff.min(sel.vocab_size),
        conc_k1: args.k1.min(sel.vocab_size),
        conc_k2: args.k2.min(sel.vocab_size),
    };
    let mut csv = String::from("sample_id,effective_vocab_size,tail_mass,concentration,p_target\n");
    let (mut eff, mut tail, mut conc) = (0.0, 0.0, 0.0);
    for rec in &sel.records {
        let p = masked_temperature_softmax(rec.logits(), args.tau, mask.as_ref())?;
        let s = distribution_stats(&p, params)?;
        eff += s.effective_vocab_size as f64;
        tail += s.tail_mass;
        conc += s.concentration;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            rec.sample_id(),
            s.effective_vocab_size,
            s.tail_mass,
            s.concentration,
            p.prob(rec.target_id())
        ));
    }
    let n = sel.records.len() as f64;
    println!("samples                  {}", sel.records.len());
    println!("vocab_size               {}", sel.vocab_size);
    println!("mean effective size      {}", eff / n);
    println!(
        "{:<25}{}",
        format!("mean tail mass (>{})", params.tail_rank_cutoff),
        tail / n
    );
    println!("mean concentration       {}", conc / n);
    if let Some(out) = &args.out {
        io::write_atomic(out, csv.as_bytes())?;
    }
    Ok(())
}

fn mask_build(args: MaskBuildArgs) -> Result<()> {
    let sel = load_data(&args.data, Split::Validation)?;
    let metadata = io::read_metadata(&args.metadata)
        .with_context(|| format!("reading metadata {}", args.metadata.display()))?;
    if metadata.len() != sel.vocab_size {
        bail!(vacp::Error::LengthMismatch {
            expected: sel.vocab_size,
            found: metadata.len(),
        });
    }
    let mask = build_mask(&metadata, &sel.records, args.threshold, args.tau)?;
    io::write_mask(&args.out, &mask)?;
    println!("vocab_size           {}", mask.vocab_size());
    println!(
        "structural excluded  {}",
        mask.excluded_count(ExclusionReason::Structural)
    );
    println!(
        "empirical excluded   {}",
        mask.excluded_count(ExclusionReason::Empirical)
    );
    println!("included             {}", mask.included_count());
    println!("mask_id              {}", mask.id());
    Ok(())
}

fn mask_validate(args: MaskValidateArgs) -> Result<()> {
    let sel = load_data(&args.data, Split::Evaluation)?;
    let mask = io::read_mask(&args.mask)
        .with_context(|| format!("reading mask {}", args.mask.display()))?;
    let report = validate_mask(&mask, &sel.records)?;
    println!("samples      {}", report.n_samples);
    println!("hits         {}", report.n_hits);
    println!("hit_rate     {}", report.hit_rate);
    println!("missing ids  {:?}", report.missing_token_ids);
    println!(
        "guarantee    {}",
        if report.full_guarantee() {
            "full"
        } else {
            "partial"
        }
    );
    if let Some(out) = &args.out {
        io::write_versioned(out, "vacp.mask_validation", &report)?;
    }
    if !report.full_guarantee() {
        return Err(GuaranteeFailure(format!(
            "{} of {} targets fall outside the mask (hit_rate {})",
            report.n_samples - report.n_hits,
            report.n_samples,
            report.hit_rate
        ))
        .into());
    }
    Ok(())
}

fn calibrate(args: CalibrateArgs, seed: Option<u64>) -> Result<()> {
    let sel = load_data(&args.data, Split::Calibration)?;
    let mask = load_mask(args.mask.as_ref())?;
    check_mask_disjoint(mask.as_ref(), "calibration", &sel.records)?;
    let config = ConformalConfig::new(args.alpha, args.tau, args.mode.into(), seed.unwrap_or(0))?;
    let result = calibrate_pipeline(&sel.records, mask.as_ref(), &config)?;
    let file = CalibrationFile {
        calibration_ids: ids(&sel.records),
        result,
    };
    io::write_calibration(&args.out, &file)?;
    println!("n_calibration   {}", file.result.n_calibration);
    println!("threshold       {}", file.result.threshold);
    println!("threshold_tail  {:e}", file.result.threshold_tail);
    Ok(())
}

/// Loads test records, the calibration and the mask, enforcing that the
/// test records were seen by neither the calibration nor the mask filter.
fn load_test_setup(
    data: &DataArgs,
    calibration: &Path,
    mask: Option<&PathBuf>,
) -> Result<(Selection, CalibrationFile, Option<VocabMask>)> {
    let sel = load_data(data, Split::Evaluation)?;
    let cal = io::read_calibration(calibration)
        .with_context(|| format!("reading calibration {}", calibration.display()))?;
    let mask = load_mask(mask)?;
    require_mask(&cal, mask.as_ref())?;
    check_disjoint(
        "calibration",
        &cal.calibration_ids,
        "evaluation",
        &ids(&sel.records),
    )?;
    check_mask_disjoint(mask.as_ref(), "evaluation", &sel.records)?;
    Ok((sel, cal, mask))
}

fn predict(args: PredictArgs) -> Result<()> {
    let (sel, cal, mask) = load_test_setup(&args.data, &args.calibration, args.mask.as_ref())?;
    let predictor = Predictor::new(&cal.result, mask.as_ref())?;
    let outcomes = predict_records(&sel.records, &predictor)?;
    let rows: Vec<PredictionRow> = outcomes
        .into_iter()
        .map(|o| PredictionRow {
            sample_id: o.sample_id,
            target_id: o.target_id,
            covered: o.covered,
            set: o.set,
        })
        .collect();
    io::write_predictions(&args.out, &rows)?;
    let total: usize = rows.iter().map(|r| r.set.size).sum();
    println!("samples        {}", rows.len());
    if !rows.is_empty() {
        println!("mean set size  {}", total as f64 / rows.len() as f64);
    }
    Ok(())
}

fn evaluate(args: EvaluateArgs, seed: Option<u64>) -> Result<()> {
    let (sel, cal, mask) = load_test_setup(&args.data, &args.calibration, args.mask.as_ref())?;
    let options = eval_options(seed, &cal, args.resamples);
    let report = vacp::evaluate(&sel.records, &cal.result, mask.as_ref(), &options)?;
    io::write_eval_report(&args.out, &report)?;
    let csv = args.csv.unwrap_or_else(|| args.out.with_extension("csv"));
    io::write_eval_csv(&csv, &report)?;
    println!("n_test           {}", report.n_test);
    println!(
        "coverage         {} [{}, {}]",
        report.coverage, report.coverage_ci.0, report.coverage_ci.1
    );
    println!("mean set size    {}", report.mean_set_size);
    println!("median set size  {}", report.median_set_size);
    println!("efficiency eta   {}", report.efficiency_eta);
    for s in &report.strata {
        println!(
            "stratum {:<8} n {:<6} coverage {}",
            format!("{:?}", s.label).to_lowercase(),
            s.n,
            s.coverage.map_or("-".into(), |c| c.to_string())
        );
    }
    Ok(())
}

fn sweep(args: SweepArgs, seed: Option<u64>) -> Result<()> {
    let ds = io::read_logits(&args.data)
        .with_context(|| format!("reading logits {}", args.data.display()))?;
    let manifest = read_manifest(&args.manifest)?;
    let cal = manifest.select(&ds.records, Split::Calibration)?;
    let test = manifest.select(&ds.records, Split::Evaluation)?;
    let mask = load_mask(args.mask.as_ref())?;
    check_mask_disjoint(mask.as_ref(), "calibration", &cal)?;
    check_mask_disjoint(mask.as_ref(), "evaluation", &test)?;

    let seed = seed.unwrap_or(0);
    let config = ConformalConfig::new(args.alpha, 1.0, args.mode.into(), seed)?;
    let options = EvalOptions {
        n_resamples: args.resamples,
        bootstrap_seed: seed,
    };
    let report = temperature_sweep(
        &cal,
        &test,
        mask.as_ref(),
        &args.grid,
        &config,
        args.tolerance,
        &options,
    )?;
    println!(
        "{:>8} {:>10} {:>14} {:>8}",
        "tau", "coverage", "mean_set_size", "median"
    );
    for r in &report.rows {
        println!(
            "{:>8} {:>10.4} {:>14.3} {:>8}",
            r.temperature, r.coverage, r.mean_set_size, r.median_set_size
        );
    }
    match report.selected_temperature {
        Some(t) => println!("selected tau {t}"),
        None => println!("selected tau none (no temperature reaches the coverage floor)"),
    }
    if let Some(out) = &args.out {
        io::write_versioned(out, "vacp.sweep", &report)?;
    }
    Ok(())
}

fn partial_coverage(args: PartialCoverageArgs, seed: Option<u64>) -> Result<()> {
    let mut gen = read_gen_config(&args.config)?;
    if let Some(seed) = seed {
        gen.synth.seed = seed;
    }
    let bootstrap_seed = gen.synth.seed;
    let config = PartialCoverageConfig {
        synth: gen.synth,
        alpha: args.alpha,
        n_calibration: args.n_cal,
        n_test: args.n_test,
        score_mode: args.mode.into(),
        temperature: 1.0,
    };
    let options = EvalOptions {
        n_resamples: args.resamples,
        bootstrap_seed,
    };
    let report = verify_partial_coverage(&config, &options)?;
    println!("p                  {}", report.p);
    println!("bound (1-alpha)p   {}", report.bound);
    println!("measured coverage  {}", report.measured_coverage);
    println!("margin (3 sigma)   {}", report.margin);
    println!(
        "calibration used   {} (dropped {})",
        report.n_calibration_used, report.n_calibration_dropped
    );
    if let Some(out) = &args.out {
        io::write_versioned(out, "vacp.partial_coverage", &report)?;
    }
    if !report.holds {
        return Err(GuaranteeFailure(format!(
            "coverage {} is below the bound {} minus margin {}",
            report.measured_coverage, report.bound, report.margin
        ))
        .into());
    }
    Ok(())
}
