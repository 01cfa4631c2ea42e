//! Learning-rate schedule, Adam, and resumable optimizer state.

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::nn::{Mat, Real};
use crate::seed::Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Inverse square root schedule with linear warmup:
/// `max_lr * min(step / warmup, sqrt(warmup / step))`.
pub fn inverse_sqrt_lr(max_lr: f64, warmup: u64, step: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::invalid("learning rate is defined from step 1"));
    }
    if warmup == 0 {
        return Err(Error::invalid("warmup must be at least 1 step"));
    }
    let (s, w) = (step as f64, warmup as f64);
    Ok(max_lr * (s / w).min((w / s).sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.98, eps: 1e-8 }
    }
}

/// One bias-corrected Adam update. `step` is the 1-based count after this update.
/// Fails without touching anything if a gradient is not finite.
pub fn adam_update<T: Real>(
    params: &mut [Mat<T>],
    grads: &[Mat<T>],
    m: &mut [Mat<T>],
    v: &mut [Mat<T>],
    names: &[String],
    step: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (g, name) in grads.iter().zip(names) {
        if g.data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        assert_eq!(p.shape(), g.shape());
        for i in 0..p.data.len() {
            let gi = g.data[i].f64();
            let mi = cfg.beta1 * m.data[i].f64() + (1.0 - cfg.beta1) * gi;
            let vi = cfg.beta2 * v.data[i].f64() + (1.0 - cfg.beta2) * gi * gi;
            m.data[i] = T::of(mi);
            v.data[i] = T::of(vi);
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
            p.data[i] = T::of(p.data[i].f64() - update);
        }
    }
    Ok(())
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub checkpoint: Checkpoint,
    pub params: Vec<Mat<f32>>,
    pub m: Vec<Mat<f32>>,
    pub v: Vec<Mat<f32>>,
    pub step: u64,
    pub rng: Rng,
}

const STATE_MAGIC: &[u8] = b"DESKMT-STATE\n";

#[derive(Serialize, Deserialize)]
struct StateHeader {
    version: u32,
    step: u64,
    rng_seed: String,
    rng_stream: u64,
    rng_word_pos: String,
    checkpoint_bytes: u64,
}

impl TrainState {
    pub fn new(checkpoint: Checkpoint, seed: u64) -> Self {
        let params: Vec<Mat<f32>> = checkpoint.params();
        let zeros: Vec<Mat<f32>> = params.iter().map(|p| Mat::zeros(p.rows, p.cols)).collect();
        TrainState { checkpoint, m: zeros.clone(), v: zeros, params, step: 0, rng: crate::seed::rng(seed) }
    }

    pub fn names(&self) -> Vec<String> {
        self.checkpoint.tensors.iter().map(|t| t.name.clone()).collect()
    }

    /// Applies one update with already-normalized gradients.
    pub fn adam_step(&mut self, grads: &[Mat<f32>], lr: f64, adam: &AdamConfig) -> Result<()> {
        let names = self.names();
        adam_update(&mut self.params, grads, &mut self.m, &mut self.v, &names, self.step + 1, lr, adam)?;
        self.step += 1;
        Ok(())
    }

    /// Current parameters as a checkpoint stamped with the step.
    pub fn snapshot(&self) -> Checkpoint {
        let mut c = self.checkpoint.clone();
        c.set_params(&self.params);
        c.step = self.step;
        c.dev_bleu = None;
        c.meta.remove("id");
        c
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ckpt = self.snapshot().to_bytes();
        let header = StateHeader {
            version: 1,
            step: self.step,
            rng_seed: hex::encode(self.rng.get_seed()),
            rng_stream: self.rng.get_stream(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            checkpoint_bytes: ckpt.len() as u64,
        };
        let text = toml::to_string(&header).expect("state header serializes");
        let mut out = STATE_MAGIC.to_vec();
        out.extend((text.len() as u64).to_le_bytes());
        out.extend(text.as_bytes());
        out.extend(&ckpt);
        for mat in self.m.iter().chain(&self.v) {
            for x in &mat.data {
                out.extend(x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("train state", d);
        let rest = bytes.strip_prefix(STATE_MAGIC).ok_or_else(|| bad("missing magic"))?;
        let (len, rest) = rest.split_at_checked(8).ok_or_else(|| bad("truncated"))?;
        let len = u64::from_le_bytes(len.try_into().unwrap()) as usize;
        let (text, rest) = rest.split_at_checked(len).ok_or_else(|| bad("truncated header"))?;
        let header: StateHeader =
            toml::from_str(std::str::from_utf8(text).map_err(|e| bad(&e.to_string()))?).map_err(|e| bad(&e.to_string()))?;
        let (ckpt, mut rest) = rest.split_at_checked(header.checkpoint_bytes as usize).ok_or_else(|| bad("truncated checkpoint"))?;
        let checkpoint = Checkpoint::from_bytes(ckpt)?;
        let params: Vec<Mat<f32>> = checkpoint.params();
        let mut read = |shape: &Mat<f32>| -> Result<Mat<f32>> {
            let n = shape.data.len() * 4;
            let (chunk, tail) = rest.split_at_checked(n).ok_or_else(|| bad("truncated moments"))?;
            rest = tail;
            Ok(Mat::from_vec(shape.rows, shape.cols, chunk.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()))
        };
        let m = params.iter().map(&mut read).collect::<Result<Vec<_>>>()?;
        let v = params.iter().map(&mut read).collect::<Result<Vec<_>>>()?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let seed: [u8; 32] = hex::decode(&header.rng_seed).ok().and_then(|s| s.try_into().ok()).ok_or_else(|| bad("rng seed"))?;
        let mut rng = Rng::from_seed(seed);
        rng.set_stream(header.rng_stream);
        rng.set_word_pos(header.rng_word_pos.parse().map_err(|_| bad("rng position"))?);
        Ok(TrainState { checkpoint, params, m, v, step: header.step, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}
