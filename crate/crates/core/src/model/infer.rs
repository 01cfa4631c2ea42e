//! Incremental decoding with cached keys/values and convolution history.

use super::checkpoint::Checkpoint;
use super::config::{Arch, ModelConfig};
use super::network::{param_index, positions, EncodedBatch, Network};
use crate::error::Result;
use crate::nn::{log_softmax_row, matmul, softmax_masked, Mat};
use std::collections::HashMap;

/// A checkpoint prepared for inference.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    params: Vec<Mat<f32>>,
    index: HashMap<String, usize>,
}

/// Encoder output for a batch of sources plus the per-layer cross-attention projections.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub batch: usize,
    pub len: usize,
    valid: Vec<bool>,
    cross_k: Vec<Mat<f32>>,
    cross_v: Vec<Mat<f32>>,
}

#[derive(Clone, Debug)]
enum LayerCache {
    /// Keys then values, appended row by row (`attention_width` each).
    Attn { keys: Vec<f32>, values: Vec<f32> },
    /// GLU outputs of the most recent positions, newest last.
    Conv { history: Vec<Vec<f32>> },
}

/// Decoder state of one hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState {
    /// Which encoded sentence this hypothesis attends to.
    pub sentence: usize,
    pos: usize,
    layers: Vec<LayerCache>,
}

fn add_bias(x: &mut Mat<f32>, b: &Mat<f32>) {
    for r in 0..x.rows {
        for (y, &v) in x.row_mut(r).iter_mut().zip(&b.data) {
            *y += v;
        }
    }
}

fn layer_norm(x: &Mat<f32>, g: &Mat<f32>, b: &Mat<f32>) -> Mat<f32> {
    let mut out = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let n = row.len() as f64;
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let rs = 1.0 / (var + 1e-5).sqrt();
        for (j, y) in out.row_mut(r).iter_mut().enumerate() {
            *y = ((row[j] as f64 - mean) * rs) as f32 * g.data[j] + b.data[j];
        }
    }
    out
}

impl Model {
    pub fn new(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.check_layout()?;
        Ok(Model { cfg: ckpt.config.clone(), params: ckpt.params(), index: param_index(&ckpt.config) })
    }

    pub fn vocab_size(&self) -> usize {
        self.cfg.vocab_size
    }

    fn p(&self, name: &str) -> &Mat<f32> {
        &self.params[self.index[name]]
    }

    fn linear(&self, x: &Mat<f32>, prefix: &str) -> Mat<f32> {
        let mut y = matmul(x, self.p(&format!("{prefix}.w")), false);
        add_bias(&mut y, self.p(&format!("{prefix}.b")));
        y
    }

    fn norm(&self, x: &Mat<f32>, prefix: &str) -> Mat<f32> {
        layer_norm(x, self.p(&format!("{prefix}.g")), self.p(&format!("{prefix}.b")))
    }

    /// Runs the encoder on `sources` (EOS is appended to each).
    pub fn encode<S: AsRef<[u32]>>(&self, sources: &[S]) -> Encoded {
        self.encode_padded(sources, 0)
    }

    /// As [`Model::encode`] with `extra` padding columns, which must not change results.
    pub fn encode_padded<S: AsRef<[u32]>>(&self, sources: &[S], extra: usize) -> Encoded {
        let pairs: Vec<(&[u32], &[u32])> = sources.iter().map(|s| (s.as_ref(), &[][..])).collect();
        let batch = EncodedBatch::with_padding(&pairs, self.cfg.target_order, extra);
        let mut rng = crate::seed::rng(0);
        let mut net = Network::new(&self.cfg, &self.index, &self.params, false, &mut rng);
        let mem = net.encode(&batch);
        let memory = net.graph.value(mem);
        let mut cross_k = Vec::new();
        let mut cross_v = Vec::new();
        for l in 0..self.cfg.dec_layers {
            cross_k.push(self.linear(memory, &format!("dec.{l}.cross.k")));
            cross_v.push(self.linear(memory, &format!("dec.{l}.cross.v")));
        }
        Encoded { batch: batch.batch, len: batch.src_len, valid: batch.src_valid, cross_k, cross_v }
    }

    pub fn start(&self, sentence: usize) -> DecoderState {
        let layers = (0..self.cfg.dec_layers)
            .map(|_| match self.cfg.arch {
                Arch::Transformer => LayerCache::Attn { keys: Vec::new(), values: Vec::new() },
                Arch::DynamicConv => LayerCache::Conv { history: Vec::new() },
            })
            .collect();
        DecoderState { sentence, pos: 0, layers }
    }

    /// Multi-head attention of one query row over `n` cached key/value rows.
    fn attend(&self, q: &[f32], keys: &[f32], values: &[f32], valid: impl Fn(usize) -> bool, out: &mut [f32]) {
        let (heads, hd) = (self.cfg.heads, self.cfg.head_dim);
        let width = heads * hd;
        let n = keys.len() / width;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut scores = vec![0f32; n];
        for h in 0..heads {
            let qh = &q[h * hd..(h + 1) * hd];
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &keys[j * width + h * hd..j * width + (h + 1) * hd];
                *s = (qh.iter().zip(kh).map(|(&a, &b)| a * b).sum::<f32>() as f64 * scale) as f32;
            }
            softmax_masked(&mut scores, &valid);
            let oh = &mut out[h * hd..(h + 1) * hd];
            oh.iter_mut().for_each(|o| *o = 0.0);
            for (j, &p) in scores.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for (o, &v) in oh.iter_mut().zip(&values[j * width + h * hd..]) {
                    *o += p * v;
                }
            }
        }
    }

    /// Feeds one token per state and returns next-token log-probabilities.
    pub fn step(&self, enc: &Encoded, states: &mut [DecoderState], tokens: &[u32]) -> Vec<Vec<f64>> {
        assert_eq!(states.len(), tokens.len());
        let n = states.len();
        if n == 0 {
            return Vec::new();
        }
        let d = self.cfg.embed_dim;
        let width = self.cfg.attention_width();
        let table = self.p("embed");
        let max_pos = states.iter().map(|s| s.pos).max().unwrap_or(0);
        let pe = positions::<f32>(max_pos + 1, d);
        let scale = (d as f64).sqrt() as f32;
        let mut x = Mat::zeros(n, d);
        for (i, (s, &tok)) in states.iter().zip(tokens).enumerate() {
            for (j, y) in x.row_mut(i).iter_mut().enumerate() {
                *y = table.at(tok as usize, j) * scale + pe.at(s.pos, j);
            }
        }
        for l in 0..self.cfg.dec_layers {
            let prefix = format!("dec.{l}");
            let h = self.norm(&x, &format!("{prefix}.mix_ln"));
            let mixed = match self.cfg.arch {
                Arch::Transformer => {
                    let q = self.linear(&h, &format!("{prefix}.attn.q"));
                    let k = self.linear(&h, &format!("{prefix}.attn.k"));
                    let v = self.linear(&h, &format!("{prefix}.attn.v"));
                    let mut a = Mat::zeros(n, width);
                    for (i, s) in states.iter_mut().enumerate() {
                        let LayerCache::Attn { keys, values } = &mut s.layers[l] else { unreachable!() };
                        keys.extend_from_slice(k.row(i));
                        values.extend_from_slice(v.row(i));
                        self.attend(q.row(i), keys, values, |_| true, a.row_mut(i));
                    }
                    self.linear(&a, &format!("{prefix}.attn.o"))
                }
                Arch::DynamicConv => {
                    let kernel = self.cfg.dec_kernels[l];
                    let heads = self.cfg.heads;
                    let u = self.linear(&h, &format!("{prefix}.conv.in"));
                    let mut g = Mat::zeros(n, d);
                    for i in 0..n {
                        let row = u.row(i);
                        for (j, y) in g.row_mut(i).iter_mut().enumerate() {
                            *y = (row[j] as f64 * (1.0 / (1.0 + (-(row[d + j] as f64)).exp()))) as f32;
                        }
                    }
                    let mut w = self.linear(&g, &format!("{prefix}.conv.wgen"));
                    let per_head = d / heads;
                    let mut c = Mat::zeros(n, d);
                    for (i, s) in states.iter_mut().enumerate() {
                        let LayerCache::Conv { history } = &mut s.layers[l] else { unreachable!() };
                        history.push(g.row(i).to_vec());
                        if history.len() > kernel {
                            history.remove(0);
                        }
                        let wrow = w.row_mut(i);
                        for group in wrow.chunks_mut(kernel) {
                            softmax_masked(group, |_| true);
                        }
                        let out = c.row_mut(i);
                        // kernel slot kk reads position t + kk - (K-1); history ends at t
                        for (back, past) in history.iter().rev().enumerate() {
                            let kk = kernel - 1 - back;
                            for hh in 0..heads {
                                let wt = wrow[hh * kernel + kk];
                                for ch in hh * per_head..(hh + 1) * per_head {
                                    out[ch] += wt * past[ch];
                                }
                            }
                        }
                    }
                    self.linear(&c, &format!("{prefix}.conv.out"))
                }
            };
            x.add_assign(&mixed);

            let h = self.norm(&x, &format!("{prefix}.cross_ln"));
            let q = self.linear(&h, &format!("{prefix}.cross.q"));
            let mut a = Mat::zeros(n, width);
            for (i, s) in states.iter().enumerate() {
                let b = s.sentence;
                let rows = b * enc.len * width..(b + 1) * enc.len * width;
                let valid = &enc.valid[b * enc.len..(b + 1) * enc.len];
                self.attend(q.row(i), &enc.cross_k[l].data[rows.clone()], &enc.cross_v[l].data[rows], |j| valid[j], a.row_mut(i));
            }
            let a = self.linear(&a, &format!("{prefix}.cross.o"));
            x.add_assign(&a);

            let h = self.norm(&x, &format!("{prefix}.ffn_ln"));
            let mut f = self.linear(&h, &format!("{prefix}.ffn.fc1"));
            f.data.iter_mut().for_each(|v| *v = v.max(0.0));
            let f = self.linear(&f, &format!("{prefix}.ffn.fc2"));
            x.add_assign(&f);
        }
        for s in states.iter_mut() {
            s.pos += 1;
        }
        let h = self.norm(&x, "dec.ln");
        let logits = matmul(&h, table, true);
        (0..n).map(|i| log_softmax_row(logits.row(i))).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{forward_logits, preset_config, TargetOrder};

    fn tiny(arch: &str) -> Checkpoint {
        let mut cfg = preset_config(arch, 24).unwrap();
        cfg.embed_dim = 16;
        cfg.ffn_dim = 32;
        cfg.heads = 2;
        cfg.head_dim = 8;
        Checkpoint::init(&cfg, 11).unwrap()
    }

    fn check_incremental(ckpt: &Checkpoint) {
        let model = Model::new(ckpt).unwrap();
        let src: Vec<Vec<u32>> = vec![vec![7, 9, 12, 5], vec![20, 8]];
        let tgt: Vec<Vec<u32>> = vec![vec![10, 11, 6], vec![14, 15, 16, 17, 18]];
        let pairs: Vec<_> = src.iter().zip(&tgt).collect();
        let batch = EncodedBatch::from_pairs(&pairs, TargetOrder::L2r);
        let full = forward_logits(&model.cfg, &ckpt.params::<f32>(), &batch);
        let enc = model.encode(&src);
        for b in 0..2 {
            let mut state = vec![model.start(b)];
            for t in 0..=tgt[b].len() {
                let tok = batch.tgt_in[b * batch.tgt_len + t];
                let lp = model.step(&enc, &mut state, &[tok]);
                let reference = log_softmax_row(full[b].row(t));
                for (a, r) in lp[0].iter().zip(&reference) {
                    assert!((a - r).abs() < 1e-4, "sentence {b} step {t}: {a} vs {r}");
                }
            }
        }
    }

    #[test]
    fn incremental_transformer_matches_full_forward() {
        check_incremental(&tiny("base"));
    }

    #[test]
    fn incremental_dynconv_matches_full_forward() {
        check_incremental(&tiny("dynconv7e6d"));
    }

    #[test]
    fn padding_does_not_change_step_output() {
        for arch in ["base", "dynconv7e6d"] {
            let ckpt = tiny(arch);
            let model = Model::new(&ckpt).unwrap();
            let src = vec![vec![7u32, 9, 12]];
            let a = model.encode(&src);
            let b = model.encode_padded(&src, 5);
            let la = model.step(&a, &mut [model.start(0)], &[crate::textkit::BOS]);
            let lb = model.step(&b, &mut [model.start(0)], &[crate::textkit::BOS]);
            for (x, y) in la[0].iter().zip(&lb[0]) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }
}
