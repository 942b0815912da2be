//! `ETPF` matrix files: a 20-byte little-endian header followed by a
//! frame-major `f32` payload.
//!
//! ```text
//! magic "ETPF" | version u32 = 1 | kind u32 | T u32 | D u32 | T*D f32
//! ```

use std::path::Path;

use crate::error::{EtpError, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"ETPF";
pub const FEATURE_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Features = 0,
    Scores = 1,
}

impl FeatureKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(Self::Features),
            1 => Some(Self::Scores),
            _ => None,
        }
    }
}

fn check_scores(data: impl Iterator<Item = f64>, cols: usize) -> std::result::Result<(), String> {
    for (i, v) in data.enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(format!(
                "score {v} at frame {} class {} outside [0,1]",
                i / cols.max(1),
                i % cols.max(1)
            ));
        }
    }
    Ok(())
}

/// Serializes a `T x D` matrix, narrowing every value to `f32`.
pub fn encode_feature_file(matrix: &Tensor, kind: FeatureKind) -> Result<Vec<u8>> {
    let (rows, cols) = (matrix.rows(), matrix.cols());
    let to_u32 = |n: usize, what: &str| {
        u32::try_from(n).map_err(|_| EtpError::invalid(format!("{what} {n} does not fit in 32 bits")))
    };
    let (t, d) = (to_u32(rows, "frame count")?, to_u32(cols, "feature width")?);
    if kind == FeatureKind::Scores {
        check_scores(matrix.data().iter().copied(), cols).map_err(EtpError::Invalid)?;
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * matrix.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for v in [FEATURE_VERSION, kind as u32, t, d] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &v in matrix.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses an `ETPF` buffer. `path` only labels diagnostics.
pub fn decode_feature_file(bytes: &[u8], path: &Path) -> Result<(FeatureKind, Tensor)> {
    let fail = |msg: String| EtpError::format(path, msg);
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(fail("bad magic: not an ETPF feature file".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fail(format!(
            "size mismatch: header needs {HEADER_LEN} bytes, file has {}",
            bytes.len()
        )));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != FEATURE_VERSION {
        return Err(fail(format!(
            "unsupported version {version} (expected {FEATURE_VERSION})"
        )));
    }
    let kind = FeatureKind::from_u32(word(1)).ok_or_else(|| fail(format!("unknown kind {}", word(1))))?;
    let (t, d) = (word(2) as usize, word(3) as usize);
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| fail("size mismatch: header dimensions overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(fail(format!(
            "size mismatch: {t}x{d} needs {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    if kind == FeatureKind::Scores {
        check_scores(data.iter().copied(), d).map_err(fail)?;
    }
    Ok((kind, Tensor::matrix(t, d, data)?))
}

pub fn write_feature_file(path: &Path, matrix: &Tensor, kind: FeatureKind) -> Result<()> {
    let bytes = encode_feature_file(matrix, kind)?;
    std::fs::write(path, bytes).map_err(|e| EtpError::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<(FeatureKind, Tensor)> {
    let bytes = std::fs::read(path).map_err(|e| EtpError::io(path, e))?;
    decode_feature_file(&bytes, path)
}

/// Reads a file and insists on the given kind.
pub fn read_matrix(path: &Path, want: FeatureKind) -> Result<Tensor> {
    let (kind, m) = read_feature_file(path)?;
    if kind != want {
        return Err(EtpError::format(
            path,
            format!("expected a {want:?} file, found {kind:?}"),
        ));
    }
    Ok(m)
}
