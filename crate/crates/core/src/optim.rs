//! AdamW with bias-corrected moments and decoupled weight decay.
//!
//! ```text
//! m     = beta1 * m + (1 - beta1) * g
//! v     = beta2 * v + (1 - beta2) * g^2
//! theta = theta * (1 - lr * wd) - lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{read_f64s, read_u32, read_u64, write_f64s};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip applied before the update; 0 disables it.
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            max_grad_norm: 1.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.max_grad_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(dim: usize) -> Self {
        OptimizerState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
        }
    }
}

/// Scales `grads` in place so their L2 norm is at most `max_norm` and returns
/// the norm before scaling.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<()> {
    for (what, got) in [("gradient", grads.len()), ("first moment", state.m.len()), ("second moment", state.v.len())] {
        if got != params.len() {
            return Err(Error::Dimension {
                what,
                expected: params.len(),
                got,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] * decay - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

const OPT_MAGIC: &[u8; 8] = b"SCRPOOPT";
const OPT_VERSION: u32 = 1;

/// Binary dump: magic, version, step, length, then both moment vectors as
/// little-endian `f64`.
pub fn save_optimizer(path: &Path, state: &OptimizerState) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(OPT_MAGIC)?;
    w.write_all(&OPT_VERSION.to_le_bytes())?;
    w.write_all(&state.step.to_le_bytes())?;
    w.write_all(&(state.m.len() as u64).to_le_bytes())?;
    write_f64s(&mut w, &state.m)?;
    write_f64s(&mut w, &state.v)?;
    w.flush()?;
    Ok(())
}

pub fn load_optimizer(path: &Path) -> Result<OptimizerState> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let bad = |e: std::io::Error| Error::Checkpoint(format!("optimizer state: {e}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != OPT_MAGIC {
        return Err(Error::Checkpoint("not an optimizer state file".into()));
    }
    let version = read_u32(&mut r).map_err(bad)?;
    if version != OPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported optimizer state version {version}")));
    }
    let step = read_u64(&mut r).map_err(bad)?;
    let n = read_u64(&mut r).map_err(bad)? as usize;
    let m = read_f64s(&mut r, n).map_err(bad)?;
    let v = read_f64s(&mut r, n).map_err(bad)?;
    Ok(OptimizerState { m, v, step })
}
