//! Encoder-decoder models: configuration, checkpoints, forward pass and decoding.

mod beam;
mod checkpoint;
mod config;
mod infer;
mod network;

pub use beam::{beam_decode, beam_decode_batch, beam_decode_padded, beam_search, BeamOptions, EnsembleScorer, StepScorer};
pub use checkpoint::{Checkpoint, NamedTensor};
pub use config::{deep_kernel_schedule, preset_config, Arch, Init, ModelConfig, ParamSpec, TargetOrder, PRESET_NAMES};
pub use infer::{DecoderState, Encoded, Model};
pub use network::{positions, EncodedBatch, Network};
pub(crate) use network::param_index;

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::nn::{Graph, Mat, Real};
use rand::Rng;

/// Label-smoothed cross entropy of `logits` against `targets`, averaged over
/// rows whose target is not `pad`. Returns the mean and the number of rows counted.
pub fn label_smoothed_loss<T: Real>(logits: &Mat<T>, targets: &[u32], epsilon: f64, pad: u32) -> Result<(f64, usize)> {
    if logits.rows != targets.len() {
        return Err(Error::invalid(format!("{} logit rows for {} targets", logits.rows, targets.len())));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::invalid(format!("label smoothing {epsilon} outside [0, 1)")));
    }
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let (loss, count) = g.smoothed_nll(x, targets, epsilon, pad);
    if count == 0 {
        return Err(Error::invalid("every target is padding"));
    }
    Ok((g.value(loss).data[0].f64() / count as f64, count))
}

/// Summed loss, target token count and parameter gradients for one batch.
pub fn loss_and_grads<T: Real, R: Rng>(
    cfg: &ModelConfig,
    params: &[Mat<T>],
    batch: &EncodedBatch,
    epsilon: f64,
    train: bool,
    rng: &mut R,
) -> (f64, usize, Vec<Mat<T>>) {
    let index = param_index(cfg);
    let mut net = Network::differentiable(cfg, &index, params, train, rng);
    let (loss, count) = net.loss(batch, epsilon);
    let value = net.graph.value(loss).data[0].f64();
    let vars = net.params.clone();
    let mut grads = net.graph.backward(loss, T::one());
    let out = vars.iter().zip(params).map(|(v, p)| grads.take(*v).unwrap_or_else(|| Mat::zeros(p.rows, p.cols))).collect();
    (value, count, out)
}

/// Summed loss without gradients (dropout off).
pub fn batch_loss<T: Real>(cfg: &ModelConfig, params: &[Mat<T>], batch: &EncodedBatch, epsilon: f64) -> (f64, usize) {
    let index = param_index(cfg);
    let mut rng = crate::seed::rng(0);
    let mut net = Network::new(cfg, &index, params, false, &mut rng);
    let (loss, count) = net.loss(batch, epsilon);
    (net.graph.value(loss).data[0].f64(), count)
}

/// Eval-mode logits, one `[tgt_len, vocab]` block per batch row.
pub fn forward_logits<T: Real>(cfg: &ModelConfig, params: &[Mat<T>], batch: &EncodedBatch) -> Vec<Mat<T>> {
    let index = param_index(cfg);
    let mut rng = crate::seed::rng(0);
    let mut net = Network::new(cfg, &index, params, false, &mut rng);
    let logits = net.logits(batch);
    let all = net.graph.value(logits);
    let v = all.cols;
    (0..batch.batch)
        .map(|b| Mat::from_vec(batch.tgt_len, v, all.data[b * batch.tgt_len * v..(b + 1) * batch.tgt_len * v].to_vec()))
        .collect()
}

/// Token-reverses every target; sources and provenance are untouched.
pub fn reverse_target(corpus: &ParallelCorpus) -> ParallelCorpus {
    let pairs = corpus.pairs().iter().map(|(s, t)| (s.clone(), t.iter().rev().copied().collect())).collect();
    corpus.with_pairs(pairs)
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Elements compared.
    pub checked: usize,
    /// Elements whose difference interval crossed a ReLU kink. They are still
    /// checked: the replays hold the activation pattern at the base point.
    pub kinks: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst element.
    pub worst: (String, usize),
    /// Analytic and numeric values at the worst element.
    pub worst_values: (f64, f64),
}

/// Relative error `|a - f| / max(|a|, |f|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Magnitude below which gradients are compared absolutely rather than relatively.
pub const GRAD_CHECK_FLOOR: f64 = 1e-5;

/// Compares every parameter's gradient of the mean batch loss (dropout off)
/// with a central difference of step `h`, in f64. ReLU activation patterns are
/// frozen at the base point so the difference measures the same piece of the
/// loss that backprop differentiates. Work is spread over the
/// available cores.
pub fn gradient_check(cfg: &ModelConfig, seed: u64, batch: &EncodedBatch, epsilon: f64, h: f64) -> Result<GradCheck> {
    let ckpt = Checkpoint::init(cfg, seed)?;
    let params: Vec<Mat<f64>> = ckpt.params();
    let mut rng = crate::seed::rng(seed);
    let (_, count, grads) = loss_and_grads(cfg, &params, batch, epsilon, false, &mut rng);
    let n = count as f64;
    let names: Vec<String> = cfg.param_specs().into_iter().map(|p| p.name).collect();
    let index = param_index(cfg);
    let workers = crate::par::jobs();
    let parts: Vec<GradCheck> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (params, grads, names, index) = (params.clone(), &grads, &names, &index);
                scope.spawn(move || {
                    let mut rng = crate::seed::rng(seed);
                    let mut net = Network::owned(cfg, index, params, &mut rng);
                    let start = net.graph.len();
                    net.loss(batch, epsilon);
                    let mut part = GradCheck { checked: 0, kinks: 0, max_rel_error: 0.0, worst: (String::new(), 0), worst_values: (0.0, 0.0) };
                    let mut flat = 0usize;
                    for (pi, name) in names.iter().enumerate() {
                        let leaf = net.params[pi];
                        for i in 0..grads[pi].data.len() {
                            flat += 1;
                            if flat % workers != w {
                                continue;
                            }
                            let orig = net.graph.value(leaf).data[i];
                            let mut at = |x: f64| {
                                net.graph.begin_replay(start, &[(leaf, i, x)]);
                                let (loss, _) = net.loss(batch, epsilon);
                                let value = net.graph.value(loss).data[0];
                                (value, net.graph.end_replay())
                            };
                            let (plus, k1) = at(orig + h);
                            let (minus, k2) = at(orig - h);
                            part.kinks += usize::from(k1 || k2);
                            let numeric = (plus - minus) / (2.0 * h * n);
                            let analytic = grads[pi].data[i] / n;
                            let err = relative_error(analytic, numeric, GRAD_CHECK_FLOOR);
                            part.checked += 1;
                            if err > part.max_rel_error {
                                part.max_rel_error = err;
                                part.worst = (name.clone(), i);
                                part.worst_values = (analytic, numeric);
                            }
                        }
                    }
                    part
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("gradient check worker panicked")).collect()
    });
    let mut report = GradCheck { checked: 0, kinks: 0, max_rel_error: 0.0, worst: (String::new(), 0), worst_values: (0.0, 0.0) };
    for part in parts {
        report.checked += part.checked;
        report.kinks += part.kinks;
        if part.max_rel_error > report.max_rel_error {
            report.max_rel_error = part.max_rel_error;
            report.worst = part.worst;
            report.worst_values = part.worst_values;
        }
    }
    Ok(report)
}
