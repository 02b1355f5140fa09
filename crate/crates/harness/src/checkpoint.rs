//! Binary checkpoints.
//!
//! Layout (little-endian): `BATC`, u32 version, u64 epoch, the canonical
//! config text as a u64 length plus UTF-8 bytes, then u64 parameter count and
//! for each parameter: name (u64 length + bytes), u64 rank, u64 dims, f64
//! values. The optimizer follows: u64 step, f64 beta1/beta2/eps, u64 entry
//! count and per entry a name, u64 length, then the first and second moments.
//! Floats are stored as raw bits, so a reload is bit-identical.

use std::path::Path;

use bat_core::nn::ParamStore;
use bat_core::objective::{AdamConfig, OptimizerState};
use bat_core::Tensor;
use indexmap::IndexMap;

use crate::config::{RunConfig, ARCHITECTURE_KEYS};
use crate::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"BATC";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub config: RunConfig,
    pub epoch: usize,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(HarnessError::Checkpoint(format!(
                "truncated checkpoint: needed {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem.max(1)) > self.data.len() - self.pos {
            return Err(HarnessError::Checkpoint(format!(
                "truncated checkpoint: length {n} at offset {}",
                self.pos
            )));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n * 8)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
    fn string(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| HarnessError::Checkpoint("invalid UTF-8 in checkpoint".into()))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_u64(&mut out, self.epoch as u64);
        put_str(&mut out, &self.config.to_text());
        put_u64(&mut out, self.params.len() as u64);
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            put_u64(&mut out, t.shape().len() as u64);
            for &d in t.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f64s(&mut out, t.data());
        }
        let o = &self.optimizer;
        put_u64(&mut out, o.step);
        put_f64s(&mut out, &[o.config.beta1, o.config.beta2, o.config.eps]);
        put_u64(&mut out, o.m.len() as u64);
        for (name, m) in &o.m {
            put_str(&mut out, name);
            let v = o.v.get(name).cloned().unwrap_or_else(|| vec![0.0; m.len()]);
            put_u64(&mut out, m.len() as u64);
            put_f64s(&mut out, m);
            put_f64s(&mut out, &v);
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader { data, pos: 0 };
        let magic = r
            .take(4)
            .map_err(|_| HarnessError::Checkpoint("not a checkpoint: file shorter than the magic".into()))?;
        if magic != MAGIC {
            return Err(HarnessError::Checkpoint(format!(
                "bad checkpoint magic {magic:?}, expected {MAGIC:?} (unsupported format or version)"
            )));
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(HarnessError::Checkpoint(format!(
                "checkpoint version {version} unsupported, expected {VERSION}"
            )));
        }
        let epoch = r.u64()? as usize;
        let config = RunConfig::from_text(&r.string()?)?;
        let n = r.len(8)?;
        let mut params = ParamStore::new();
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.len(8)?;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().product::<usize>();
            if count.saturating_mul(8) > data.len() - r.pos {
                return Err(HarnessError::Checkpoint(format!("truncated checkpoint in parameter {name}")));
            }
            let values = r.f64s(count)?;
            params.insert(&name, Tensor::new(shape, values).map_err(bat_core::CoreError::from)?);
        }
        let step = r.u64()?;
        let (beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?);
        let entries = r.len(8)?;
        let mut m = IndexMap::new();
        let mut v = IndexMap::new();
        for _ in 0..entries {
            let name = r.string()?;
            let len = r.len(16)?;
            m.insert(name.clone(), r.f64s(len)?);
            v.insert(name, r.f64s(len)?);
        }
        if r.pos != data.len() {
            return Err(HarnessError::Checkpoint(format!(
                "{} trailing bytes after checkpoint",
                data.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            params,
            optimizer: OptimizerState {
                config: AdamConfig { beta1, beta2, eps },
                step,
                m,
                v,
            },
            config,
            epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename so an interrupted save leaves the old file intact.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(|e| HarnessError::Io(format!("{}: {e}", tmp.display())))?;
        std::fs::rename(&tmp, path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&data)
    }
}

/// Reconciles a checkpoint with the config of the current run.
///
/// Architecture keys always come from the checkpoint, since its parameters
/// only fit that network; everything else (data, optimizer, schedule, splits)
/// comes from `current`. Each differing key produces one warning.
pub fn reconcile(checkpoint: &Checkpoint, current: &RunConfig) -> Result<(RunConfig, Vec<String>)> {
    let saved = &checkpoint.config;
    if saved.hash() == current.hash() {
        return Ok((current.clone(), Vec::new()));
    }
    let mut merged = current.clone();
    let mut warnings = Vec::new();
    let saved_text = saved.to_text();
    for (key, cur, old) in current.diff(saved) {
        if ARCHITECTURE_KEYS.contains(&key.as_str()) {
            warnings.push(format!("config hash mismatch: `{key}` = {cur} ignored, checkpoint uses {old}"));
        } else {
            warnings.push(format!("config hash mismatch: `{key}` = {cur} overrides checkpoint value {old}"));
        }
    }
    for line in saved_text.lines() {
        if let Some((k, v)) = line.split_once(" = ") {
            if ARCHITECTURE_KEYS.contains(&k) {
                merged.set(k, v)?;
            }
        }
    }
    merged.validate()?;
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok((merged, warnings))
}
