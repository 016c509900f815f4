//! Binary logit dataset.
//!
//! Little-endian layout:
//!
//! ```text
//! header:  b"VACPLGT1" | vocab_size: u32 | record_count: u32
//! record:  id_len: u16 | id: [u8; id_len] (UTF-8) | target_id: u32 | logits: [f32; vocab_size]
//! ```
//!
//! Logits are promoted to `f64` on read. `-inf` is accepted as the masked-out
//! sentinel; NaN and `+inf` are rejected.

use std::fs::File;
use std::io::{BufReader, ErrorKind, Read};
use std::path::Path;

use super::{io_err, write_atomic, FormatError};
use crate::error::Result;
use crate::types::LogitRecord;

pub const MAGIC: &[u8; 8] = b"VACPLGT1";

#[derive(Debug, Clone, PartialEq)]
pub struct LogitDataset {
    pub vocab_size: usize,
    pub records: Vec<LogitRecord>,
}

impl LogitDataset {
    pub fn new(vocab_size: usize, records: Vec<LogitRecord>) -> Result<Self> {
        if let Some(bad) = records.iter().find(|r| r.vocab_size() != vocab_size) {
            return Err(crate::Error::LengthMismatch {
                expected: vocab_size,
                found: bad.vocab_size(),
            });
        }
        Ok(Self {
            vocab_size,
            records,
        })
    }
}

/// Streaming reader that tracks the byte offset for error reporting.
pub struct LogitReader<R: Read> {
    inner: R,
    offset: u64,
    vocab_size: u32,
    remaining: u32,
    checked_trailing: bool,
}

impl<R: Read> LogitReader<R> {
    /// Reads and validates the header.
    pub fn new(inner: R) -> std::result::Result<Self, FormatError> {
        let mut reader = Self {
            inner,
            offset: 0,
            vocab_size: 0,
            remaining: 0,
            checked_trailing: false,
        };
        let mut magic = [0u8; 8];
        let got = reader.fill(&mut magic)?;
        if got < magic.len() || &magic != MAGIC {
            return Err(FormatError::BadMagic {
                offset: 0,
                found: magic[..got].to_vec(),
            });
        }
        reader.offset = 8;
        reader.vocab_size = reader.read_u32("vocab_size")?;
        reader.remaining = reader.read_u32("record_count")?;
        Ok(reader)
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size as usize
    }

    /// Records not yet read.
    pub fn remaining(&self) -> usize {
        self.remaining as usize
    }

    /// Reads as many bytes as available up to `buf.len()`.
    fn fill(&mut self, buf: &mut [u8]) -> std::result::Result<usize, FormatError> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(source) => {
                    return Err(FormatError::Io {
                        path: "<logit stream>".into(),
                        source,
                    })
                }
            }
        }
        Ok(got)
    }

    fn read_exact(
        &mut self,
        buf: &mut [u8],
        field: &'static str,
    ) -> std::result::Result<(), FormatError> {
        let got = self.fill(buf)?;
        if got < buf.len() {
            return Err(FormatError::Truncated {
                offset: self.offset + got as u64,
                needed: buf.len() - got,
                field,
            });
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, field: &'static str) -> std::result::Result<u32, FormatError> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, field)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_record(&mut self) -> std::result::Result<LogitRecord, FormatError> {
        let mut len = [0u8; 2];
        self.read_exact(&mut len, "sample id length")?;
        let id_offset = self.offset;
        let mut id = vec![0u8; u16::from_le_bytes(len) as usize];
        self.read_exact(&mut id, "sample id")?;
        let id =
            String::from_utf8(id).map_err(|_| FormatError::InvalidUtf8 { offset: id_offset })?;

        let target_offset = self.offset;
        let target_id = self.read_u32("target_id")?;
        if target_id >= self.vocab_size {
            return Err(FormatError::TargetOutOfRange {
                offset: target_offset,
                target_id,
                vocab_size: self.vocab_size,
            });
        }

        let logits_offset = self.offset;
        let mut raw = vec![0u8; self.vocab_size as usize * 4];
        self.read_exact(&mut raw, "logits")?;
        let mut logits = Vec::with_capacity(self.vocab_size as usize);
        for (index, chunk) in raw.chunks_exact(4).enumerate() {
            let x = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            let offset = logits_offset + 4 * index as u64;
            if x.is_nan() {
                return Err(FormatError::NanLogit { offset, index });
            }
            if x == f32::INFINITY {
                return Err(FormatError::InfiniteLogit { offset, index });
            }
            logits.push(x as f64);
        }
        Ok(LogitRecord::new(id, logits, target_id).expect("validated above"))
    }

    fn check_trailing(&mut self) -> std::result::Result<(), FormatError> {
        self.checked_trailing = true;
        let mut probe = [0u8; 1];
        if self.fill(&mut probe)? > 0 {
            return Err(FormatError::TrailingBytes {
                offset: self.offset,
            });
        }
        Ok(())
    }
}

impl<R: Read> Iterator for LogitReader<R> {
    type Item = std::result::Result<LogitRecord, FormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.remaining == 0 {
            if self.checked_trailing {
                return None;
            }
            return self.check_trailing().err().map(Err);
        }
        self.remaining -= 1;
        let rec = self.read_record();
        if rec.is_err() {
            self.remaining = 0;
            self.checked_trailing = true;
        }
        Some(rec)
    }
}

pub fn decode_logits(bytes: &[u8]) -> std::result::Result<LogitDataset, FormatError> {
    let reader = LogitReader::new(bytes)?;
    let vocab_size = reader.vocab_size();
    let records = reader.collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(LogitDataset {
        vocab_size,
        records,
    })
}

pub fn read_logits(path: &Path) -> std::result::Result<LogitDataset, FormatError> {
    let file = File::open(path).map_err(io_err(path))?;
    let reader = LogitReader::new(BufReader::new(file))?;
    let vocab_size = reader.vocab_size();
    let records = reader.collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(LogitDataset {
        vocab_size,
        records,
    })
}

/// Serializes records, narrowing logits to `f32`.
pub fn encode_logits(
    vocab_size: usize,
    records: &[LogitRecord],
) -> std::result::Result<Vec<u8>, FormatError> {
    let vocab = u32::try_from(vocab_size)
        .map_err(|_| FormatError::Unencodable(format!("vocab_size {vocab_size} exceeds u32")))?;
    let count = u32::try_from(records.len())
        .map_err(|_| FormatError::Unencodable(format!("{} records exceed u32", records.len())))?;
    let mut out = Vec::with_capacity(16 + records.len() * (16 + 4 * vocab_size));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&vocab.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for rec in records {
        if rec.vocab_size() != vocab_size {
            return Err(FormatError::Unencodable(format!(
                "record {:?} has {} logits, expected {vocab_size}",
                rec.sample_id(),
                rec.vocab_size()
            )));
        }
        let id = rec.sample_id().as_bytes();
        let id_len = u16::try_from(id.len()).map_err(|_| {
            FormatError::Unencodable(format!("sample id of {} bytes exceeds u16", id.len()))
        })?;
        out.extend_from_slice(&id_len.to_le_bytes());
        out.extend_from_slice(id);
        out.extend_from_slice(&rec.target_id().to_le_bytes());
        for (index, &x) in rec.logits().iter().enumerate() {
            let narrow = x as f32;
            if narrow == f32::INFINITY {
                return Err(FormatError::Unencodable(format!(
                    "record {:?} logit {index} = {x} overflows f32",
                    rec.sample_id()
                )));
            }
            out.extend_from_slice(&narrow.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_logits(
    path: &Path,
    vocab_size: usize,
    records: &[LogitRecord],
) -> std::result::Result<(), FormatError> {
    write_atomic(path, &encode_logits(vocab_size, records)?)
}
