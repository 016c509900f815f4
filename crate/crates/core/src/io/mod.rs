//! On-disk formats: the binary logit dataset plus versioned JSON artifacts.

mod files;
mod logits;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub use files::{
    check_disjoint, read_calibration, read_eval_report, read_mask, read_metadata, read_predictions,
    read_split_manifest, read_versioned, write_calibration, write_eval_csv, write_eval_report,
    write_mask, write_metadata, write_predictions, write_split_manifest, write_versioned,
    CalibrationFile, MaskCounts, PredictionRow, Split, SplitFractions, SplitManifest,
    CALIBRATION_KIND, EVAL_REPORT_KIND, FORMAT_VERSION, MASK_KIND, SPLIT_KIND,
};
pub use logits::{
    decode_logits, encode_logits, read_logits, write_logits, LogitDataset, LogitReader, MAGIC,
};

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O error on {}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("bad magic at byte offset {offset}: expected \"VACPLGT1\", found {found:?}")]
    BadMagic { offset: u64, found: Vec<u8> },

    #[error("truncated file at byte offset {offset}: {needed} more byte(s) needed for {field}")]
    Truncated {
        offset: u64,
        needed: usize,
        field: &'static str,
    },

    #[error("target out of range at byte offset {offset}: target_id {target_id} >= vocab_size {vocab_size}")]
    TargetOutOfRange {
        offset: u64,
        target_id: u32,
        vocab_size: u32,
    },

    #[error("NaN logit at byte offset {offset} (token {index})")]
    NanLogit { offset: u64, index: usize },

    #[error("+inf logit at byte offset {offset} (token {index})")]
    InfiniteLogit { offset: u64, index: usize },

    #[error("sample id at byte offset {offset} is not valid UTF-8")]
    InvalidUtf8 { offset: u64 },

    #[error("trailing bytes after the last record at byte offset {offset}")]
    TrailingBytes { offset: u64 },

    #[error("cannot encode: {0}")]
    Unencodable(String),

    #[error("line {line}: {source}")]
    JsonLine {
        line: usize,
        source: serde_json::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("expected a {expected:?} file, found kind {found:?}")]
    WrongKind { expected: String, found: String },

    #[error("format version {found} is not supported (expected {expected}); regenerate the file with this version of vacp")]
    VersionMismatch { found: u64, expected: u64 },

    #[error("token metadata is missing token_id {0}")]
    MissingTokenId(u32),

    #[error("token metadata line {line}: duplicate token_id {token_id}")]
    DuplicateTokenId { line: usize, token_id: u32 },

    #[error("inconsistent file: {0}")]
    Inconsistent(String),
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_owned(),
        source,
    }
}

/// Writes `bytes` to a sibling temp file, syncs, then renames over `path`,
/// so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), FormatError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| FormatError::Io {
            path: path.to_owned(),
            source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "not a file path"),
        })?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result.map_err(io_err(path))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, FormatError> {
    fs::read(path).map_err(io_err(path))
}
