use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Transformer,
    DynamicConv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetOrder {
    #[default]
    L2r,
    R2l,
}

/// Architecture hyperparameters. Attention width is `heads * head_dim`,
/// independent of `embed_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub vocab_size: usize,
    /// Reserved ids at the bottom of the vocabulary (never emitted, except EOS).
    #[serde(default = "default_specials")]
    pub num_specials: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    /// Per-layer kernel widths (dynamic convolution only).
    #[serde(default)]
    pub enc_kernels: Vec<usize>,
    #[serde(default)]
    pub dec_kernels: Vec<usize>,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub relu_dropout: f64,
    #[serde(default)]
    pub target_order: TargetOrder,
}

fn default_specials() -> usize {
    crate::textkit::BT_TAG as usize + 1
}

pub const PRESET_NAMES: [&str; 9] =
    ["base", "deep15e6d", "mid25e6d", "mid50e6d", "wide_ffn", "hdim128", "hdim256", "dynconv7e6d", "dynconv25e6d"];

const BASE_LAYERS: usize = 2;
const SMALL_KERNEL: usize = 3;
const MID_KERNEL: usize = 5;
const LARGE_KERNEL: usize = 9;

/// Layer count scaled from a 6-layer reference.
fn scaled_depth(reference_layers: usize) -> usize {
    ((BASE_LAYERS * reference_layers) as f64 / 6.0).round() as usize
}

/// Growing small-kernel schedule used by the shallow convolution model.
fn small_kernels(n: usize) -> Vec<usize> {
    (0..n).map(|i| if i == 0 { SMALL_KERNEL } else { MID_KERNEL }).collect()
}

/// Layers up to `ceil(depth * 7 / 25)` keep the small schedule, deeper layers use the large kernel.
pub fn deep_kernel_schedule(depth: usize) -> Vec<usize> {
    let small = (depth * 7).div_ceil(25);
    (0..depth).map(|i| if i < small { small_kernels(small)[i] } else { LARGE_KERNEL }).collect()
}

/// Desk-scale analogues of the baseline architecture zoo. Absolute sizes are
/// small; depth, width and head-size ratios follow the full-size models.
pub fn preset_config(name: &str, vocab_size: usize) -> Result<ModelConfig> {
    let base = ModelConfig {
        arch: Arch::Transformer,
        vocab_size,
        num_specials: default_specials(),
        enc_layers: BASE_LAYERS,
        dec_layers: BASE_LAYERS,
        embed_dim: 64,
        ffn_dim: 256,
        heads: 4,
        head_dim: 16,
        enc_kernels: Vec::new(),
        dec_kernels: Vec::new(),
        dropout: 0.2,
        attention_dropout: 0.1,
        relu_dropout: 0.1,
        target_order: TargetOrder::L2r,
    };
    let cfg = match name {
        "base" => base,
        "deep15e6d" => ModelConfig { enc_layers: BASE_LAYERS * 15 / 6, ..base },
        "mid25e6d" | "mid50e6d" => {
            let reference = if name == "mid25e6d" { 25 } else { 50 };
            ModelConfig {
                enc_layers: scaled_depth(reference),
                embed_dim: base.embed_dim * 3 / 4,
                ffn_dim: base.ffn_dim * 3 / 4,
                ..base
            }
        }
        "wide_ffn" => ModelConfig {
            ffn_dim: base.ffn_dim * 15000 / 4096,
            attention_dropout: 0.3,
            relu_dropout: 0.3,
            ..base
        },
        "hdim128" => ModelConfig { head_dim: base.head_dim * 2, ..base },
        "hdim256" => ModelConfig { head_dim: base.head_dim * 4, ..base },
        "dynconv7e6d" => {
            let enc = scaled_depth(7);
            ModelConfig {
                arch: Arch::DynamicConv,
                enc_layers: enc,
                enc_kernels: small_kernels(enc),
                dec_kernels: small_kernels(BASE_LAYERS),
                ..base
            }
        }
        "dynconv25e6d" => {
            let enc = scaled_depth(25);
            ModelConfig {
                arch: Arch::DynamicConv,
                enc_layers: enc,
                enc_kernels: deep_kernel_schedule(enc),
                dec_kernels: small_kernels(BASE_LAYERS),
                ..base
            }
        }
        other => return Err(Error::invalid(format!("unknown preset `{other}`; expected one of {PRESET_NAMES:?}"))),
    };
    Ok(cfg)
}

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform with fan-based bound.
    Fan,
    /// Uniform with the standard deviation of `N(0, 1/d)`.
    Embedding,
    Zeros,
    Ones,
}

impl ModelConfig {
    pub fn attention_width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.vocab_size == 0 {
            return bad("vocab_size must be set".into());
        }
        if self.enc_layers == 0 || self.dec_layers == 0 || self.embed_dim == 0 || self.ffn_dim == 0 || self.heads == 0 || self.head_dim == 0 {
            return bad("model dimensions must be positive".into());
        }
        for (name, p) in [("dropout", self.dropout), ("attention_dropout", self.attention_dropout), ("relu_dropout", self.relu_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1)"));
            }
        }
        if self.arch == Arch::DynamicConv {
            if self.enc_kernels.len() != self.enc_layers || self.dec_kernels.len() != self.dec_layers {
                return bad("one kernel size per layer is required".into());
            }
            if self.embed_dim % self.heads != 0 {
                return bad("embed_dim must be divisible by heads".into());
            }
            if self.enc_kernels.iter().chain(&self.dec_kernels).any(|&k| k == 0) {
                return bad("kernel sizes must be positive".into());
            }
        }
        Ok(())
    }

    /// Every parameter tensor, in canonical order. Pure function of the config.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.embed_dim;
        let a = self.attention_width();
        let mut out = Vec::new();
        let mut push = |name: String, rows: usize, cols: usize, init: Init| out.push(ParamSpec { name, rows, cols, init });
        let linear = |push: &mut dyn FnMut(String, usize, usize, Init), p: &str, i: usize, o: usize| {
            push(format!("{p}.w"), i, o, Init::Fan);
            push(format!("{p}.b"), 1, o, Init::Zeros);
        };
        let norm = |push: &mut dyn FnMut(String, usize, usize, Init), p: &str| {
            push(format!("{p}.g"), 1, d, Init::Ones);
            push(format!("{p}.b"), 1, d, Init::Zeros);
        };
        push("embed".into(), self.vocab_size, d, Init::Embedding);
        for (side, layers, kernels) in [("enc", self.enc_layers, &self.enc_kernels), ("dec", self.dec_layers, &self.dec_kernels)] {
            for l in 0..layers {
                let p = format!("{side}.{l}");
                norm(&mut push, &format!("{p}.mix_ln"));
                match self.arch {
                    Arch::Transformer => {
                        for proj in ["q", "k", "v"] {
                            linear(&mut push, &format!("{p}.attn.{proj}"), d, a);
                        }
                        linear(&mut push, &format!("{p}.attn.o"), a, d);
                    }
                    Arch::DynamicConv => {
                        linear(&mut push, &format!("{p}.conv.in"), d, 2 * d);
                        linear(&mut push, &format!("{p}.conv.wgen"), d, self.heads * kernels[l]);
                        linear(&mut push, &format!("{p}.conv.out"), d, d);
                    }
                }
                if side == "dec" {
                    norm(&mut push, &format!("{p}.cross_ln"));
                    for proj in ["q", "k", "v"] {
                        linear(&mut push, &format!("{p}.cross.{proj}"), d, a);
                    }
                    linear(&mut push, &format!("{p}.cross.o"), a, d);
                }
                norm(&mut push, &format!("{p}.ffn_ln"));
                linear(&mut push, &format!("{p}.ffn.fc1"), d, self.ffn_dim);
                linear(&mut push, &format!("{p}.ffn.fc2"), self.ffn_dim, d);
            }
            norm(&mut push, &format!("{side}.ln"));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|p| p.rows * p.cols).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn base_desk_scale() {
        let c = preset_config("base", 100).unwrap();
        assert_eq!((c.enc_layers, c.dec_layers, c.embed_dim, c.ffn_dim, c.heads, c.head_dim), (2, 2, 64, 256, 4, 16));
        assert_eq!((c.dropout, c.attention_dropout, c.relu_dropout), (0.2, 0.1, 0.1));
    }

    #[test]
    fn preset_ratios() {
        let base = preset_config("base", 50).unwrap();
        let deep = preset_config("deep15e6d", 50).unwrap();
        assert_eq!(deep.enc_layers * 2, base.enc_layers * 5);
        let mid = preset_config("mid25e6d", 50).unwrap();
        assert_eq!((mid.embed_dim * 4, mid.ffn_dim * 4), (base.embed_dim * 3, base.ffn_dim * 3));
        assert!(preset_config("mid50e6d", 50).unwrap().enc_layers > mid.enc_layers);
        let wide = preset_config("wide_ffn", 50).unwrap();
        assert_eq!(wide.ffn_dim, 937);
        assert_eq!((wide.attention_dropout, wide.relu_dropout), (0.3, 0.3));
        assert_eq!(preset_config("hdim128", 50).unwrap().head_dim, 2 * base.head_dim);
        assert_eq!(preset_config("hdim256", 50).unwrap().head_dim, 4 * base.head_dim);
    }

    #[test]
    fn dynconv_kernel_schedule() {
        let c = preset_config("dynconv25e6d", 50).unwrap();
        assert_eq!(c.enc_layers, 8);
        // ceil(8 * 7 / 25) = 3 small layers
        assert_eq!(c.enc_kernels, vec![3, 5, 5, 9, 9, 9, 9, 9]);
        c.validate().unwrap();
        preset_config("dynconv7e6d", 50).unwrap().validate().unwrap();
    }

    #[test]
    fn unknown_preset() {
        assert!(preset_config("transformer_huge", 10).is_err());
    }

    #[test]
    fn every_preset_validates() {
        for n in PRESET_NAMES {
            preset_config(n, 40).unwrap().validate().unwrap();
        }
    }

    #[test]
    fn param_count_is_monotone() {
        let base = preset_config("base", 40).unwrap();
        let n = base.param_count();
        assert!(ModelConfig { enc_layers: 3, ..base.clone() }.param_count() > n);
        assert!(ModelConfig { ffn_dim: 300, ..base.clone() }.param_count() > n);
        assert!(ModelConfig { head_dim: 20, ..base.clone() }.param_count() > n);
    }
}
