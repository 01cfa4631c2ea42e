//! Training loop, checkpoint emission and in-domain fine-tuning.

mod optim;

pub use optim::{adam_update, inverse_sqrt_lr, AdamConfig, TrainState};

use crate::corpus::{build_batches, pair_lengths, ParallelCorpus};
use crate::error::{Error, Result};
use crate::model::{loss_and_grads, Checkpoint, EncodedBatch, ModelConfig};
use crate::nn::{Mat, Real};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Steps(u64),
    Epochs(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    InverseSqrt,
    /// Fixed learning rate (fine-tuning).
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub max_lr: f64,
    pub warmup_steps: u64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub label_smoothing: f64,
    /// Overrides the model's residual dropout when set.
    pub dropout: Option<f64>,
    pub max_tokens: usize,
    pub accumulation: usize,
    pub budget: Budget,
    pub checkpoint_every: u64,
    pub schedule: Schedule,
    pub seed: u64,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            max_lr: 5e-4,
            warmup_steps: 4000,
            betas: (0.9, 0.98),
            adam_eps: 1e-8,
            label_smoothing: 0.1,
            dropout: Some(0.2),
            max_tokens: 4096,
            accumulation: 8,
            budget: Budget::Steps(100_000),
            checkpoint_every: 1000,
            schedule: Schedule::InverseSqrt,
            seed: 1,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps == 0 || self.accumulation == 0 || self.checkpoint_every == 0 {
            return Err(Error::invalid("warmup, accumulation and checkpoint interval must be at least 1"));
        }
        if matches!(self.budget, Budget::Steps(0) | Budget::Epochs(0)) {
            return Err(Error::invalid("training budget must be positive"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label smoothing must be in [0, 1)"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.betas.0, beta2: self.betas.1, eps: self.adam_eps }
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        match self.schedule {
            Schedule::InverseSqrt => inverse_sqrt_lr(self.max_lr, self.warmup_steps, step),
            Schedule::Constant(lr) if step > 0 => Ok(lr),
            Schedule::Constant(_) => Err(Error::invalid("learning rate is defined from step 1")),
        }
    }
}

/// `max_lr * min(step / warmup, sqrt(warmup / step))` for the plan's values.
pub fn lr_at(plan: &TrainPlan, step: u64) -> Result<f64> {
    plan.lr_at(step)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogEntry {
    pub step: u64,
    pub lr: f64,
    /// Mean label-smoothed loss per target token over the update.
    pub loss: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn to_text(&self) -> String {
        let mut s = String::from("step\tlr\tloss\ttokens\n");
        for e in &self.entries {
            let _ = writeln!(s, "{}\t{:.6e}\t{:.6}\t{}", e.step, e.lr, e.loss, e.tokens);
        }
        s
    }

    /// Mean loss over the first and the last `fraction` of updates.
    pub fn head_tail_means(&self, fraction: f64) -> Option<(f64, f64)> {
        let n = self.entries.len();
        let k = ((n as f64 * fraction).ceil() as usize).max(1);
        if n < 2 * k {
            return None;
        }
        let mean = |xs: &[LogEntry]| xs.iter().map(|e| e.loss).sum::<f64>() / xs.len() as f64;
        Some((mean(&self.entries[..k]), mean(&self.entries[n - k..])))
    }
}

/// Checkpoints emitted by a run, oldest first, and its loss log.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoints: Vec<Checkpoint>,
    pub log: TrainLog,
}

impl TrainOutcome {
    pub fn last(&self) -> &Checkpoint {
        self.checkpoints.last().expect("a run emits at least one checkpoint")
    }

    /// Writes `step_N.ckpt` files and `train.log` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for c in &self.checkpoints {
            c.save(&dir.join(format!("step_{}.ckpt", c.step)))?;
        }
        let log = dir.join("train.log");
        fs::write(&log, self.log.to_text()).map_err(|e| Error::io(&log, e))
    }
}

/// Gradients summed over `micro` batches and divided by their total target
/// token count, with the summed loss and that count.
pub fn accumulated_gradients<T: Real, R: rand::Rng>(
    cfg: &ModelConfig,
    params: &[Mat<T>],
    micro: &[EncodedBatch],
    epsilon: f64,
    train: bool,
    rng: &mut R,
) -> Result<(f64, usize, Vec<Mat<T>>)> {
    let mut total: Option<Vec<Mat<T>>> = None;
    let mut loss = 0.0;
    let mut tokens = 0;
    for batch in micro {
        let (l, n, grads) = loss_and_grads(cfg, params, batch, epsilon, train, rng);
        loss += l;
        tokens += n;
        match &mut total {
            None => total = Some(grads),
            Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_assign(g)),
        }
    }
    let Some(mut grads) = total.filter(|_| tokens > 0) else {
        return Err(Error::invalid("update window holds no target tokens"));
    };
    let scale = T::of(1.0 / tokens as f64);
    grads.iter_mut().for_each(|g| g.data.iter_mut().for_each(|x| *x = *x * scale));
    Ok((loss, tokens, grads))
}

/// One optimizer update over `micro` batches. Returns (loss per token, tokens).
pub fn update_on(state: &mut TrainState, cfg: &ModelConfig, micro: &[EncodedBatch], plan: &TrainPlan) -> Result<(f64, usize)> {
    let (loss, tokens, grads) = accumulated_gradients(cfg, &state.params, micro, plan.label_smoothing, true, &mut state.rng)?;
    let lr = plan.lr_at(state.step + 1)?;
    state.adam_step(&grads, lr, &plan.adam())?;
    Ok((loss / tokens as f64, tokens))
}

fn concat(corpora: &[ParallelCorpus]) -> Result<ParallelCorpus> {
    let data = ParallelCorpus::concat(corpora.iter())?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus("training data".into()));
    }
    Ok(data)
}

fn check_vocab(cfg: &ModelConfig, data: &ParallelCorpus) -> Result<()> {
    let v = cfg.vocab_size as u32;
    for (i, (s, t)) in data.pairs().iter().enumerate() {
        if let Some(&bad) = s.iter().chain(t).find(|&&id| id >= v) {
            return Err(Error::VocabMismatch(format!("pair {i} has id {bad} but the model vocabulary has {v} entries")));
        }
    }
    Ok(())
}

/// Trains from `init` (or a fresh seeded model when `None`) on the concatenation of `corpora`.
pub fn train(cfg: &ModelConfig, init: Option<&Checkpoint>, corpora: &[ParallelCorpus], plan: &TrainPlan) -> Result<TrainOutcome> {
    plan.validate()?;
    let mut cfg = cfg.clone();
    if let Some(d) = plan.dropout {
        cfg.dropout = d;
    }
    let data = concat(corpora)?;
    check_vocab(&cfg, &data)?;
    let ckpt = match init {
        Some(c) => {
            if c.config.vocab_size != cfg.vocab_size {
                return Err(Error::VocabMismatch(format!("initial checkpoint has {} ids, config {}", c.config.vocab_size, cfg.vocab_size)));
            }
            let mut c = c.clone();
            c.config = cfg.clone();
            c.check_layout()?;
            c
        }
        None => Checkpoint::init(&cfg, crate::seed::derive(plan.seed, "init"))?,
    };
    let mut state = TrainState::new(ckpt, crate::seed::derive(plan.seed, "train"));
    let batches = build_batches(&pair_lengths(&data), plan.max_tokens, plan.accumulation)?;
    let steps = match plan.budget {
        Budget::Steps(n) => n,
        Budget::Epochs(e) => e * batches.steps_per_epoch() as u64,
    };
    let mut log = TrainLog::default();
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let encode = |idx: usize| {
        let pairs: Vec<_> = batches.batches[idx].indices.iter().map(|&i| data.pairs()[i].clone()).collect();
        EncodedBatch::from_pairs(&pairs, cfg.target_order)
    };
    for _ in 0..steps {
        let mut micro = Vec::with_capacity(plan.accumulation);
        for _ in 0..plan.accumulation {
            if cursor == order.len() {
                order = (0..batches.batches.len()).collect();
                order.shuffle(&mut state.rng);
                cursor = 0;
            }
            micro.push(encode(order[cursor]));
            cursor += 1;
        }
        let (loss, tokens) = update_on(&mut state, &cfg, &micro, plan)?;
        log.entries.push(LogEntry { step: state.step, lr: plan.lr_at(state.step)?, loss, tokens });
        if state.step % plan.checkpoint_every == 0 || state.step == steps {
            checkpoints.push(state.snapshot());
        }
        log::debug!("step {} loss {:.4}", state.step, loss);
    }
    Ok(TrainOutcome { checkpoints, log })
}

/// Continues training on the dev set alone for 1 or 2 epochs at a constant
/// learning rate of a tenth of the plan's peak.
pub fn fine_tune(ckpt: &Checkpoint, dev: &ParallelCorpus, epochs: u64, plan: &TrainPlan) -> Result<Checkpoint> {
    if !(1..=2).contains(&epochs) {
        return Err(Error::invalid(format!("fine-tuning runs for 1 or 2 epochs, not {epochs}")));
    }
    if dev.is_empty() {
        return Err(Error::EmptyCorpus("fine-tuning dev set".into()));
    }
    let mut ft = plan.clone();
    ft.schedule = Schedule::Constant(plan.max_lr / 10.0);
    ft.budget = Budget::Epochs(epochs);
    ft.checkpoint_every = u64::MAX;
    ft.dropout = None;
    let out = train(&ckpt.config, Some(ckpt), std::slice::from_ref(dev), &ft)?;
    let mut tuned = out.last().clone();
    tuned.step += ckpt.step;
    tuned.meta = ckpt.meta.clone();
    tuned.meta.remove("id");
    tuned.meta.insert("fine_tuned".into(), format!("{epochs}"));
    tuned.meta.insert("parent".into(), ckpt.id());
    Ok(tuned)
}

/// Mean label-smoothed loss per token on `data` with dropout off.
pub fn heldout_loss(ckpt: &Checkpoint, data: &ParallelCorpus, epsilon: f64) -> Result<f64> {
    let params: Vec<Mat<f32>> = ckpt.params();
    let (mut loss, mut tokens) = (0.0, 0);
    for chunk in data.pairs().chunks(64) {
        let batch = EncodedBatch::from_pairs(chunk, ckpt.config.target_order);
        let (l, n) = crate::model::batch_loss(&ckpt.config, &params, &batch, epsilon);
        loss += l;
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::EmptyCorpus("held-out data".into()));
    }
    Ok(loss / tokens as f64)
}
