//! Versioned JSON artifacts and the token-metadata JSONL file.
//!
//! Every JSON artifact is an object carrying `kind` and `format_version`
//! next to its payload fields. Readers check both before decoding anything
//! else.

use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{read_file, write_atomic, FormatError};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::types::{
    derive_sample_rng, CalibrationResult, ExclusionReason, LogitRecord, MaskBuildConfig,
    PredictionSet, TokenMetadata, VocabMask,
};

pub const FORMAT_VERSION: u64 = 1;
pub const MASK_KIND: &str = "vacp.mask";
pub const CALIBRATION_KIND: &str = "vacp.calibration";
pub const SPLIT_KIND: &str = "vacp.split";
pub const EVAL_REPORT_KIND: &str = "vacp.eval_report";

#[derive(Serialize)]
struct Envelope<'a, T> {
    kind: &'a str,
    format_version: u64,
    #[serde(flatten)]
    body: &'a T,
}

/// Serializes `body` with its envelope as pretty JSON plus a trailing newline.
pub(crate) fn to_versioned_json<T: Serialize>(
    kind: &str,
    body: &T,
) -> std::result::Result<Vec<u8>, FormatError> {
    let mut bytes = serde_json::to_vec_pretty(&Envelope {
        kind,
        format_version: FORMAT_VERSION,
        body,
    })?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub(crate) fn from_versioned_json<T: DeserializeOwned>(
    kind: &str,
    bytes: &[u8],
) -> std::result::Result<T, FormatError> {
    let mut value: serde_json::Value = serde_json::from_slice(bytes)?;
    let obj = value
        .as_object_mut()
        .ok_or_else(|| FormatError::Inconsistent("top-level JSON value is not an object".into()))?;
    let found_kind = match obj.remove("kind") {
        Some(serde_json::Value::String(s)) => s,
        _ => String::new(),
    };
    if found_kind != kind {
        return Err(FormatError::WrongKind {
            expected: kind.to_owned(),
            found: found_kind,
        });
    }
    let version = obj.remove("format_version").and_then(|v| v.as_u64());
    if version != Some(FORMAT_VERSION) {
        return Err(FormatError::VersionMismatch {
            found: version.unwrap_or(0),
            expected: FORMAT_VERSION,
        });
    }
    Ok(serde_json::from_value(value)?)
}

/// Writes `body` as a versioned JSON artifact of the given kind.
pub fn write_versioned<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<()> {
    Ok(write_atomic(path, &to_versioned_json(kind, body)?)?)
}

/// Reads a versioned JSON artifact, checking kind and version first.
pub fn read_versioned<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    Ok(from_versioned_json(kind, &read_file(path)?)?)
}

// ---------------------------------------------------------------- metadata

pub fn write_metadata(path: &Path, metadata: &[TokenMetadata]) -> Result<()> {
    let mut out = Vec::new();
    for m in metadata {
        serde_json::to_writer(&mut out, m).map_err(FormatError::from)?;
        out.push(b'\n');
    }
    Ok(write_atomic(path, &out)?)
}

/// Reads one metadata object per line. Ids must cover `0..n` exactly once;
/// the result is sorted by id.
pub fn read_metadata(path: &Path) -> Result<Vec<TokenMetadata>> {
    Ok(parse_metadata(&read_file(path)?)?)
}

pub(crate) fn parse_metadata(bytes: &[u8]) -> std::result::Result<Vec<TokenMetadata>, FormatError> {
    let mut entries: Vec<(usize, TokenMetadata)> = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        let m: TokenMetadata =
            serde_json::from_slice(line).map_err(|source| FormatError::JsonLine {
                line: i + 1,
                source,
            })?;
        entries.push((i + 1, m));
    }
    entries.sort_by_key(|(_, m)| m.token_id);
    match entries.first() {
        Some((_, m)) if m.token_id != 0 => return Err(FormatError::MissingTokenId(0)),
        None => {
            return Err(FormatError::Inconsistent(
                "token metadata file is empty".into(),
            ))
        }
        _ => {}
    }
    for (expected, pair) in entries
        .windows(2)
        .enumerate()
        .map(|(i, w)| (i as u32 + 1, w))
    {
        let (line, m) = &pair[1];
        if m.token_id == pair[0].1.token_id {
            return Err(FormatError::DuplicateTokenId {
                line: *line,
                token_id: m.token_id,
            });
        }
        if m.token_id != expected {
            return Err(FormatError::MissingTokenId(expected));
        }
    }
    Ok(entries.into_iter().map(|(_, m)| m).collect())
}

// -------------------------------------------------------------------- mask

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskCounts {
    pub included: usize,
    pub structural: usize,
    pub empirical: usize,
}

#[derive(Serialize, Deserialize)]
struct MaskFile {
    mask_id: String,
    vocab_size: usize,
    /// `[start, length]` runs of included ids, ascending.
    included_runs: Vec<(u32, u32)>,
    /// Runs of structurally excluded ids; every other excluded id is empirical.
    structural_runs: Vec<(u32, u32)>,
    counts: MaskCounts,
    build_config: MaskBuildConfig,
}

fn runs(flags: impl Iterator<Item = bool>) -> Vec<(u32, u32)> {
    let mut out: Vec<(u32, u32)> = Vec::new();
    for (i, on) in flags.enumerate() {
        if !on {
            continue;
        }
        match out.last_mut() {
            Some((start, len)) if *start + *len == i as u32 => *len += 1,
            _ => out.push((i as u32, 1)),
        }
    }
    out
}

fn mask_to_file(mask: &VocabMask) -> MaskFile {
    MaskFile {
        mask_id: mask.id(),
        vocab_size: mask.vocab_size(),
        included_runs: runs(mask.included()),
        structural_runs: runs(
            mask.exclusions()
                .iter()
                .map(|r| *r == Some(ExclusionReason::Structural)),
        ),
        counts: MaskCounts {
            included: mask.included_count(),
            structural: mask.excluded_count(ExclusionReason::Structural),
            empirical: mask.excluded_count(ExclusionReason::Empirical),
        },
        build_config: mask.build_config().clone(),
    }
}

fn mask_from_file(file: MaskFile) -> Result<VocabMask> {
    let bad = |msg: String| Error::from(FormatError::Inconsistent(msg));
    let mut exclusions = vec![Some(ExclusionReason::Empirical); file.vocab_size];
    let mut apply = |runs: &[(u32, u32)], value: Option<ExclusionReason>, what: &str| {
        for &(start, len) in runs {
            let end = start as usize + len as usize;
            if len == 0 || end > file.vocab_size {
                return Err(bad(format!(
                    "{what} run ({start}, {len}) is empty or exceeds vocab_size {}",
                    file.vocab_size
                )));
            }
            for slot in &mut exclusions[start as usize..end] {
                if *slot != Some(ExclusionReason::Empirical) {
                    return Err(bad(format!(
                        "{what} run ({start}, {len}) overlaps another run"
                    )));
                }
                *slot = value;
            }
        }
        Ok(())
    };
    apply(&file.included_runs, None, "included")?;
    apply(
        &file.structural_runs,
        Some(ExclusionReason::Structural),
        "structural",
    )?;
    let mask = VocabMask::from_exclusions(exclusions, file.build_config)?;
    let counts = MaskCounts {
        included: mask.included_count(),
        structural: mask.excluded_count(ExclusionReason::Structural),
        empirical: mask.excluded_count(ExclusionReason::Empirical),
    };
    if counts != file.counts {
        return Err(bad(format!(
            "stored counts {:?} disagree with the runs {counts:?}",
            file.counts
        )));
    }
    if mask.id() != file.mask_id {
        return Err(bad(format!(
            "stored mask_id {} disagrees with the runs ({})",
            file.mask_id,
            mask.id()
        )));
    }
    Ok(mask)
}

pub fn write_mask(path: &Path, mask: &VocabMask) -> Result<()> {
    write_versioned(path, MASK_KIND, &mask_to_file(mask))
}

pub fn read_mask(path: &Path) -> Result<VocabMask> {
    mask_from_file(read_versioned(path, MASK_KIND)?)
}

// ------------------------------------------------------------- calibration

/// A calibration result plus the ids it was computed from, so that later
/// stages can refuse to evaluate on them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationFile {
    pub result: CalibrationResult,
    pub calibration_ids: Vec<String>,
}

pub fn write_calibration(path: &Path, file: &CalibrationFile) -> Result<()> {
    write_versioned(path, CALIBRATION_KIND, file)
}

pub fn read_calibration(path: &Path) -> Result<CalibrationFile> {
    let file: CalibrationFile = read_versioned(path, CALIBRATION_KIND)?;
    file.result.config.validate()?;
    Ok(file)
}

// ------------------------------------------------------------------ splits

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub validation: f64,
    pub calibration: f64,
    pub evaluation: f64,
}

impl Default for SplitFractions {
    /// A fifth held out for mask construction; the rest split 60/40 between
    /// calibration and evaluation.
    fn default() -> Self {
        Self {
            validation: 0.2,
            calibration: 0.48,
            evaluation: 0.32,
        }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.validation, self.calibration, self.evaluation];
        if parts.iter().any(|f| !(f.is_finite() && *f >= 0.0))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::InvalidConfig(format!(
                "split fractions {parts:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Validation,
    Calibration,
    Evaluation,
}

/// Disjoint validation / calibration / evaluation id lists for one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub dataset_id: String,
    pub seed: u64,
    pub fractions: SplitFractions,
    pub validation_ids: Vec<String>,
    pub calibration_ids: Vec<String>,
    pub evaluation_ids: Vec<String>,
}

impl SplitManifest {
    /// Random partition of `ids`, shuffled with the stream derived from
    /// `(seed, "split")`. Each list keeps the input order.
    pub fn random(
        dataset_id: impl Into<String>,
        ids: &[String],
        fractions: SplitFractions,
        seed: u64,
    ) -> Result<Self> {
        fractions.validate()?;
        let n = ids.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_sample_rng(seed, "split"));
        let n_val = (fractions.validation * n as f64).round() as usize;
        let n_cal = ((fractions.calibration * n as f64).round() as usize).min(n - n_val);
        let mut which = vec![Split::Evaluation; n];
        for &i in &order[..n_val] {
            which[i] = Split::Validation;
        }
        for &i in &order[n_val..n_val + n_cal] {
            which[i] = Split::Calibration;
        }
        let pick = |s: Split| {
            ids.iter()
                .zip(&which)
                .filter(|(_, w)| **w == s)
                .map(|(id, _)| id.clone())
                .collect()
        };
        let manifest = Self {
            dataset_id: dataset_id.into(),
            seed,
            fractions,
            validation_ids: pick(Split::Validation),
            calibration_ids: pick(Split::Calibration),
            evaluation_ids: pick(Split::Evaluation),
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Validation => &self.validation_ids,
            Split::Calibration => &self.calibration_ids,
            Split::Evaluation => &self.evaluation_ids,
        }
    }

    /// Fails with [`Error::OverlappingSplits`] if any id is listed twice.
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("validation", &self.validation_ids),
            ("calibration", &self.calibration_ids),
            ("evaluation", &self.evaluation_ids),
        ];
        for (name, ids) in named {
            check_disjoint(name, ids, name, ids)?;
        }
        for i in 0..named.len() {
            for j in i + 1..named.len() {
                check_disjoint(named[i].0, named[i].1, named[j].0, named[j].1)?;
            }
        }
        Ok(())
    }

    /// Records listed under `split`, in dataset order. Every listed id must
    /// be present in `records`.
    pub fn select(&self, records: &[LogitRecord], split: Split) -> Result<Vec<LogitRecord>> {
        let wanted: HashSet<&str> = self.ids(split).iter().map(String::as_str).collect();
        let selected: Vec<LogitRecord> = records
            .iter()
            .filter(|r| wanted.contains(r.sample_id()))
            .cloned()
            .collect();
        if selected.len() != wanted.len() {
            let present: HashSet<&str> = records.iter().map(LogitRecord::sample_id).collect();
            let missing = self
                .ids(split)
                .iter()
                .find(|id| !present.contains(id.as_str()))
                .cloned()
                .unwrap_or_default();
            return Err(Error::InvalidArgument(format!(
                "split manifest lists sample {missing:?}, which is not in the dataset"
            )));
        }
        Ok(selected)
    }
}

/// Errors if `a` and `b` share an id. When `a` and `b` are the same list,
/// checks for duplicates within it instead.
pub fn check_disjoint(a_name: &str, a: &[String], b_name: &str, b: &[String]) -> Result<()> {
    let same = std::ptr::eq(a, b);
    let mut seen: HashSet<&str> = HashSet::new();
    let mut shared: Vec<&str> = Vec::new();
    if same {
        for id in a {
            if !seen.insert(id) {
                shared.push(id);
            }
        }
    } else {
        seen.extend(a.iter().map(String::as_str));
        shared.extend(b.iter().map(String::as_str).filter(|id| seen.contains(id)));
    }
    match shared.first() {
        None => Ok(()),
        Some(example) => Err(Error::OverlappingSplits {
            first: a_name.to_owned(),
            second: b_name.to_owned(),
            count: shared.len(),
            example: (*example).to_owned(),
        }),
    }
}

pub fn write_split_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    manifest.validate()?;
    write_versioned(path, SPLIT_KIND, manifest)
}

pub fn read_split_manifest(path: &Path) -> Result<SplitManifest> {
    let manifest: SplitManifest = read_versioned(path, SPLIT_KIND)?;
    manifest.validate()?;
    Ok(manifest)
}

// ------------------------------------------------------- reports and sets

pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    write_versioned(path, EVAL_REPORT_KIND, report)
}

pub fn read_eval_report(path: &Path) -> Result<EvalReport> {
    read_versioned(path, EVAL_REPORT_KIND)
}

/// Header line plus one data row.
pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let text = format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row());
    Ok(write_atomic(path, text.as_bytes())?)
}

/// One line of a predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub target_id: u32,
    pub covered: bool,
    pub set: PredictionSet,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).map_err(FormatError::from)?;
        out.push(b'\n');
    }
    Ok(write_atomic(path, &out)?)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let bytes = read_file(path)?;
    let mut rows = Vec::new();
    for (i, line) in bytes.split(|&b| b == b'\n').enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        rows.push(
            serde_json::from_slice(line).map_err(|source| FormatError::JsonLine {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(rows)
}
