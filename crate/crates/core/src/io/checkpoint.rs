//! `ETPM` checkpoints: a named parameter table followed by a CRC-32 of
//! every preceding byte.
//!
//! ```text
//! magic "ETPM" | version u32 = 1 | kind u32 | count u32
//! count x ( name_len u32 | name | rank u32 | rank x dim u32 | f64 payload )
//! crc32 u32
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{EtpError, Result};
use crate::localization::{LnConfig, LnModel};
use crate::refinement::{RnConfig, RnModel};
use crate::tensor::{Module, Param, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ETPM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Refinement = 0,
    Localization = 1,
}

impl ModelKind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            0 => Some(Self::Refinement),
            1 => Some(Self::Localization),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub params: Vec<Param>,
}

fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| EtpError::invalid(format!("{what} {v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(kind: ModelKind, params: &[&Param]) -> Result<Vec<u8>> {
    let mut names = HashSet::new();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(kind as u32).to_le_bytes());
    put_u32(&mut out, params.len(), "parameter count")?;
    for p in params {
        if !names.insert(p.name.as_str()) {
            return Err(EtpError::invalid(format!("duplicate parameter name `{}`", p.name)));
        }
        if !p.value.is_finite() {
            return Err(EtpError::invalid(format!("parameter `{}` is not finite", p.name)));
        }
        put_u32(&mut out, p.name.len(), "name length")?;
        out.extend_from_slice(p.name.as_bytes());
        put_u32(&mut out, p.value.shape().len(), "rank")?;
        for &d in p.value.shape() {
            put_u32(&mut out, d, "dimension")?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| format!("truncated: needed {n} bytes at offset {}", self.pos))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let fail = |msg: String| EtpError::format(path, msg);
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fail("bad magic: not an ETPM checkpoint".into()));
    }
    if bytes.len() < 20 {
        return Err(fail(format!(
            "truncated: {} bytes is shorter than the minimal checkpoint",
            bytes.len()
        )));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(fail(format!(
            "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32().map_err(fail)?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(fail(format!(
            "unsupported version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let raw_kind = r.u32().map_err(fail)?;
    let kind = ModelKind::from_u32(raw_kind as u32).ok_or_else(|| fail(format!("unknown model kind {raw_kind}")))?;
    let count = r.u32().map_err(fail)?;
    let mut params = Vec::with_capacity(count.min(1 << 16));
    let mut names = HashSet::new();
    for _ in 0..count {
        let name_len = r.u32().map_err(fail)?;
        let name = std::str::from_utf8(r.take(name_len).map_err(fail)?)
            .map_err(|_| fail("parameter name is not UTF-8".into()))?
            .to_string();
        if !names.insert(name.clone()) {
            return Err(fail(format!("duplicate parameter name `{name}`")));
        }
        let rank = r.u32().map_err(fail)?;
        let shape = (0..rank)
            .map(|_| r.u32())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(fail)?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| fail(format!("parameter `{name}` shape overflows")))?;
        let data = r
            .take(n)
            .map_err(fail)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Param::new(name, Tensor::new(shape, data)?));
    }
    if r.pos != body.len() {
        return Err(fail(format!(
            "{} trailing bytes after the parameter table",
            body.len() - r.pos
        )));
    }
    Ok(Checkpoint { kind, params })
}

pub fn save_checkpoint<M: Module + ?Sized>(path: &Path, kind: ModelKind, model: &M) -> Result<()> {
    let bytes = encode_checkpoint(kind, &model.params())?;
    std::fs::write(path, bytes).map_err(|e| EtpError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| EtpError::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

fn find<'a>(params: &'a [Param], name: &str) -> Result<&'a Param> {
    params
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| EtpError::invalid(format!("checkpoint lacks parameter `{name}`")))
}

fn expect_kind(ck: &Checkpoint, kind: ModelKind) -> Result<()> {
    if ck.kind != kind {
        return Err(EtpError::invalid(format!(
            "checkpoint holds a {:?} model, expected {kind:?}",
            ck.kind
        )));
    }
    Ok(())
}

fn load_exact<M: Module>(mut model: M, params: &[Param]) -> Result<M> {
    let expected = model.params().len();
    if params.len() != expected {
        return Err(EtpError::invalid(format!(
            "checkpoint has {} parameters, model expects {expected}",
            params.len()
        )));
    }
    model.load_params(params)?;
    Ok(model)
}

/// Rebuilds a refinement network, inferring its dimensions from the table.
pub fn rn_from_checkpoint(ck: &Checkpoint) -> Result<RnModel> {
    expect_kind(ck, ModelKind::Refinement)?;
    let w = find(&ck.params, "rn.fwd.0.w_r")?.value.shape().to_vec();
    if w.len() != 2 {
        return Err(EtpError::invalid("`rn.fwd.0.w_r` must be a matrix"));
    }
    let depth = (0..)
        .take_while(|l| ck.params.iter().any(|p| p.name == format!("rn.fwd.{l}.w_r")))
        .count();
    let cfg = RnConfig {
        input_dim: w[0],
        hidden: w[1],
        depth,
    };
    load_exact(RnModel::zeros(&cfg), &ck.params)
}

/// Rebuilds a localization network, inferring its dimensions from the table.
pub fn ln_from_checkpoint(ck: &Checkpoint) -> Result<LnModel> {
    expect_kind(ck, ModelKind::Localization)?;
    let theta = find(&ck.params, "ln.nonlocal.theta.weight")?.value.shape().to_vec();
    let cls = find(&ck.params, "ln.cls.weight")?.value.shape().to_vec();
    if theta.len() != 2 || cls.len() != 2 || cls[1] < 2 {
        return Err(EtpError::invalid("localization checkpoint has malformed head shapes"));
    }
    let cfg = LnConfig {
        input_dim: theta[0],
        num_classes: cls[1] - 1,
    };
    load_exact(LnModel::zeros(&cfg), &ck.params)
}
