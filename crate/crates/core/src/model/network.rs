//! Training-time forward pass built on the autodiff tape.

use super::config::{Arch, ModelConfig, TargetOrder};
use crate::nn::{AttentionSpec, ConvSpec, Graph, Mat, Real, Var};
use crate::textkit::{BOS, EOS, PAD};
use rand::Rng;
use std::collections::HashMap;

/// A padded batch in model layout. Sources end with EOS; decoder inputs start
/// with BOS; decoder outputs end with EOS. Target order is already applied.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedBatch {
    pub batch: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub src: Vec<u32>,
    pub src_valid: Vec<bool>,
    pub tgt_in: Vec<u32>,
    pub tgt_out: Vec<u32>,
}

impl EncodedBatch {
    pub fn from_pairs<S: AsRef<[u32]>, U: AsRef<[u32]>>(pairs: &[(S, U)], order: TargetOrder) -> Self {
        Self::with_padding(pairs, order, 0)
    }

    /// Like [`EncodedBatch::from_pairs`] with `extra` additional padding columns on the source.
    pub fn with_padding<S: AsRef<[u32]>, U: AsRef<[u32]>>(pairs: &[(S, U)], order: TargetOrder, extra: usize) -> Self {
        let batch = pairs.len();
        let src_len = pairs.iter().map(|(s, _)| s.as_ref().len() + 1).max().unwrap_or(1) + extra;
        let tgt_len = pairs.iter().map(|(_, t)| t.as_ref().len() + 1).max().unwrap_or(1);
        let mut src = vec![PAD; batch * src_len];
        let mut src_valid = vec![false; batch * src_len];
        let mut tgt_in = vec![PAD; batch * tgt_len];
        let mut tgt_out = vec![PAD; batch * tgt_len];
        for (b, (s, t)) in pairs.iter().enumerate() {
            let s = s.as_ref();
            for (i, &id) in s.iter().chain(std::iter::once(&EOS)).enumerate() {
                src[b * src_len + i] = id;
                src_valid[b * src_len + i] = true;
            }
            let mut t: Vec<u32> = t.as_ref().to_vec();
            if order == TargetOrder::R2l {
                t.reverse();
            }
            tgt_in[b * tgt_len] = BOS;
            for (i, &id) in t.iter().enumerate() {
                tgt_in[b * tgt_len + i + 1] = id;
                tgt_out[b * tgt_len + i] = id;
            }
            tgt_out[b * tgt_len + t.len()] = EOS;
        }
        EncodedBatch { batch, src_len, tgt_len, src, src_valid, tgt_in, tgt_out }
    }

    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}

/// Sinusoidal position table, `len x dim`.
pub fn positions<T: Real>(len: usize, dim: usize) -> Mat<T> {
    let mut m = Mat::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            m.data[pos * dim + i] = T::of(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

pub(crate) fn param_index(cfg: &ModelConfig) -> HashMap<String, usize> {
    cfg.param_specs().into_iter().enumerate().map(|(i, p)| (p.name, i)).collect()
}

/// Builds the encoder/decoder graph for one batch.
pub struct Network<'a, T: Real, R: Rng> {
    pub cfg: &'a ModelConfig,
    pub graph: Graph<T>,
    pub params: Vec<Var>,
    index: &'a HashMap<String, usize>,
    train: bool,
    rng: &'a mut R,
}

impl<'a, T: Real, R: Rng> Network<'a, T, R> {
    pub fn new(cfg: &'a ModelConfig, index: &'a HashMap<String, usize>, values: &[Mat<T>], train: bool, rng: &'a mut R) -> Self {
        let mut graph = Graph::new();
        let params = values.iter().map(|m| if train { graph.param(m.clone()) } else { graph.constant(m.clone()) }).collect();
        Network { cfg, graph, params, index, train, rng }
    }

    /// Like [`Network::new`] but every parameter is a differentiable leaf
    /// regardless of `train` (used for gradient checks with dropout off).
    pub fn differentiable(cfg: &'a ModelConfig, index: &'a HashMap<String, usize>, values: &[Mat<T>], train: bool, rng: &'a mut R) -> Self {
        let mut graph = Graph::new();
        let params = values.iter().map(|m| graph.param(m.clone())).collect();
        Network { cfg, graph, params, index, train, rng }
    }

    /// Takes ownership of `values` as constants (no copies); see [`Network::into_params`].
    pub fn owned(cfg: &'a ModelConfig, index: &'a HashMap<String, usize>, values: Vec<Mat<T>>, rng: &'a mut R) -> Self {
        let mut graph = Graph::new();
        let params = values.into_iter().map(|m| graph.constant(m)).collect();
        Network { cfg, graph, params, index, train: false, rng }
    }

    /// Returns the parameter values, consuming the network.
    pub fn into_params(mut self) -> Vec<Mat<T>> {
        let vars = std::mem::take(&mut self.params);
        vars.into_iter().map(|v| self.graph.take_value(v)).collect()
    }

    fn p(&self, name: &str) -> Var {
        self.params[*self.index.get(name).unwrap_or_else(|| panic!("no parameter `{name}`"))]
    }

    fn linear(&mut self, x: Var, prefix: &str) -> Var {
        let (w, b) = (self.p(&format!("{prefix}.w")), self.p(&format!("{prefix}.b")));
        self.graph.linear(x, w, b)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Var {
        let (g, b) = (self.p(&format!("{prefix}.g")), self.p(&format!("{prefix}.b")));
        self.graph.layer_norm(x, g, b)
    }

    fn dropout(&mut self, x: Var, p: f64) -> Var {
        if self.train {
            self.graph.dropout(x, p, self.rng)
        } else {
            x
        }
    }

    fn embed(&mut self, ids: &[u32], batch: usize, len: usize) -> Var {
        let d = self.cfg.embed_dim;
        let table = self.p("embed");
        let e = self.graph.embed(table, ids, (d as f64).sqrt());
        let tiled = if self.graph.is_replaying() {
            // constants are kept from the original pass
            Mat::default()
        } else {
            let pe = positions::<T>(len, d);
            let mut tiled = Mat::zeros(batch * len, d);
            for b in 0..batch {
                tiled.data[b * len * d..(b + 1) * len * d].copy_from_slice(&pe.data);
            }
            tiled
        };
        let pe = self.graph.constant(tiled);
        let x = self.graph.add(e, pe);
        self.dropout(x, self.cfg.dropout)
    }

    fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, lq: usize, lk: usize, causal: bool, key_valid: Vec<bool>) -> Var {
        let spec = AttentionSpec {
            batch,
            query_len: lq,
            key_len: lk,
            heads: self.cfg.heads,
            head_dim: self.cfg.head_dim,
            causal,
            key_valid,
            dropout: if self.train { self.cfg.attention_dropout } else { 0.0 },
        };
        self.graph.attention(q, k, v, spec, self.rng)
    }

    /// Self-attention or dynamic-convolution mixing sublayer, before the residual.
    #[allow(clippy::too_many_arguments)]
    fn mixer(&mut self, h: Var, prefix: &str, batch: usize, len: usize, causal: bool, valid: &[bool], kernel: usize) -> Var {
        match self.cfg.arch {
            Arch::Transformer => {
                let q = self.linear(h, &format!("{prefix}.attn.q"));
                let k = self.linear(h, &format!("{prefix}.attn.k"));
                let v = self.linear(h, &format!("{prefix}.attn.v"));
                let a = self.attention(q, k, v, batch, len, len, causal, valid.to_vec());
                self.linear(a, &format!("{prefix}.attn.o"))
            }
            Arch::DynamicConv => {
                let mask: Vec<T> = valid.iter().map(|&ok| if ok { T::one() } else { T::zero() }).collect();
                let u = self.linear(h, &format!("{prefix}.conv.in"));
                let u = self.graph.glu(u);
                let u = if causal { u } else { self.graph.scale_rows(u, mask) };
                let w = self.linear(u, &format!("{prefix}.conv.wgen"));
                let spec = ConvSpec {
                    batch,
                    len,
                    heads: self.cfg.heads,
                    kernel,
                    causal,
                    dropout: if self.train { self.cfg.attention_dropout } else { 0.0 },
                };
                let c = self.graph.dynamic_conv(u, w, spec, self.rng);
                self.linear(c, &format!("{prefix}.conv.out"))
            }
        }
    }

    fn ffn(&mut self, x: Var, prefix: &str) -> Var {
        let h = self.norm(x, &format!("{prefix}.ffn_ln"));
        let h = self.linear(h, &format!("{prefix}.ffn.fc1"));
        let h = self.graph.relu(h);
        let h = self.dropout(h, self.cfg.relu_dropout);
        let h = self.linear(h, &format!("{prefix}.ffn.fc2"));
        let h = self.dropout(h, self.cfg.dropout);
        self.graph.add(x, h)
    }

    /// Encoder output, `[batch*src_len, embed_dim]`.
    pub fn encode(&mut self, b: &EncodedBatch) -> Var {
        let mut x = self.embed(&b.src, b.batch, b.src_len);
        for l in 0..self.cfg.enc_layers {
            let prefix = format!("enc.{l}");
            let h = self.norm(x, &format!("{prefix}.mix_ln"));
            let kernel = self.cfg.enc_kernels.get(l).copied().unwrap_or(0);
            let m = self.mixer(h, &prefix, b.batch, b.src_len, false, &b.src_valid, kernel);
            let m = self.dropout(m, self.cfg.dropout);
            x = self.graph.add(x, m);
            x = self.ffn(x, &prefix);
        }
        self.norm(x, "enc.ln")
    }

    /// Decoder logits for `tgt_in`, `[batch*tgt_len, vocab]`.
    pub fn decode(&mut self, memory: Var, b: &EncodedBatch) -> Var {
        let mut x = self.embed(&b.tgt_in, b.batch, b.tgt_len);
        let tgt_valid = vec![true; b.batch * b.tgt_len];
        for l in 0..self.cfg.dec_layers {
            let prefix = format!("dec.{l}");
            let h = self.norm(x, &format!("{prefix}.mix_ln"));
            let kernel = self.cfg.dec_kernels.get(l).copied().unwrap_or(0);
            let m = self.mixer(h, &prefix, b.batch, b.tgt_len, true, &tgt_valid, kernel);
            let m = self.dropout(m, self.cfg.dropout);
            x = self.graph.add(x, m);

            let h = self.norm(x, &format!("{prefix}.cross_ln"));
            let q = self.linear(h, &format!("{prefix}.cross.q"));
            let k = self.linear(memory, &format!("{prefix}.cross.k"));
            let v = self.linear(memory, &format!("{prefix}.cross.v"));
            let a = self.attention(q, k, v, b.batch, b.tgt_len, b.src_len, false, b.src_valid.clone());
            let a = self.linear(a, &format!("{prefix}.cross.o"));
            let a = self.dropout(a, self.cfg.dropout);
            x = self.graph.add(x, a);
            x = self.ffn(x, &prefix);
        }
        let h = self.norm(x, "dec.ln");
        let table = self.p("embed");
        self.graph.matmul(h, table, true)
    }

    pub fn logits(&mut self, b: &EncodedBatch) -> Var {
        let memory = self.encode(b);
        self.decode(memory, b)
    }

    /// Summed label-smoothed loss over the batch and its target token count.
    pub fn loss(&mut self, b: &EncodedBatch, epsilon: f64) -> (Var, usize) {
        let logits = self.logits(b);
        self.graph.smoothed_nll(logits, &b.tgt_out, epsilon, PAD)
    }
}
