use super::config::{Init, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{Mat, Real};
use crate::seed;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

const MAGIC: &[u8] = b"DESKMT-CKPT\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

/// Model parameters plus training metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<NamedTensor>,
    pub step: u64,
    pub dev_bleu: Option<f64>,
    /// Seed the parameters were initialised from.
    pub seed: u64,
    /// Free-form labels: `id`, `run`, `fine_tuned`, `pretrain_id`, `sampling`, ...
    pub meta: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    step: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    dev_bleu: Option<f64>,
    /// Hex, since TOML integers are signed 64-bit.
    seed: String,
    config: ModelConfig,
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

impl Checkpoint {
    /// Fresh parameters: fan-based uniform weights, one seeded stream per tensor.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .param_specs()
            .into_iter()
            .map(|p| {
                let n = p.rows * p.cols;
                let mut rng = seed::rng_for(seed, &p.name);
                let data = match p.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::Fan => {
                        let bound = (6.0 / (p.rows + p.cols) as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
                    }
                    Init::Embedding => {
                        let bound = (3.0 / p.cols as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect()
                    }
                };
                NamedTensor { name: p.name, rows: p.rows, cols: p.cols, data }
            })
            .collect();
        Ok(Checkpoint { config: config.clone(), tensors, step: 0, dev_bleu: None, seed, meta: BTreeMap::new() })
    }

    pub fn id(&self) -> String {
        self.meta.get("id").cloned().unwrap_or_else(|| self.content_hash()[..16].to_string())
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.meta.insert("id".into(), id.into());
        self
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Parameters as matrices of the compute type, in canonical order.
    pub fn params<T: Real>(&self) -> Vec<Mat<T>> {
        self.tensors.iter().map(|t| Mat::from_vec(t.rows, t.cols, t.data.iter().map(|&x| T::of(x as f64)).collect())).collect()
    }

    /// Replaces parameter values (canonical order); metadata is kept.
    pub fn set_params<T: Real>(&mut self, params: &[Mat<T>]) {
        assert_eq!(params.len(), self.tensors.len());
        for (t, p) in self.tensors.iter_mut().zip(params) {
            assert_eq!((t.rows, t.cols), p.shape(), "shape of {}", t.name);
            t.data = p.data.iter().map(|x| x.f64() as f32).collect();
        }
    }

    /// Verifies that tensor names and shapes are the ones the config implies.
    pub fn check_layout(&self) -> Result<()> {
        let specs = self.config.param_specs();
        if specs.len() != self.tensors.len() {
            return Err(Error::Tensor { name: "*".into(), detail: format!("expected {} tensors, found {}", specs.len(), self.tensors.len()) });
        }
        for (s, t) in specs.iter().zip(&self.tensors) {
            if s.name != t.name || s.rows != t.rows || s.cols != t.cols || t.data.len() != t.rows * t.cols {
                return Err(Error::Tensor {
                    name: t.name.clone(),
                    detail: format!("expected {} [{}x{}], found [{}x{}]", s.name, s.rows, s.cols, t.rows, t.cols),
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            version: FORMAT_VERSION,
            step: self.step,
            dev_bleu: self.dev_bleu,
            seed: format!("{:016x}", self.seed),
            config: self.config.clone(),
            meta: self.meta.clone(),
            tensors: self.tensors.iter().map(|t| TensorEntry { name: t.name.clone(), rows: t.rows, cols: t.cols }).collect(),
        };
        let text = toml::to_string(&header).expect("checkpoint header serialises");
        let n: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + text.len() + 4 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for t in &self.tensors {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::format("checkpoint", d);
        let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| bad("missing magic"))?;
        if rest.len() < 8 {
            return Err(bad("truncated header length"));
        }
        let hlen = u64::from_le_bytes(rest[..8].try_into().expect("8 bytes")) as usize;
        let rest = &rest[8..];
        if rest.len() < hlen {
            return Err(bad("truncated header"));
        }
        let text = std::str::from_utf8(&rest[..hlen]).map_err(|_| bad("header is not UTF-8"))?;
        let header: Header = toml::from_str(text).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        if header.version != FORMAT_VERSION {
            return Err(bad("unsupported format version"));
        }
        let seed = u64::from_str_radix(&header.seed, 16).map_err(|_| bad("seed is not hex"))?;
        let mut data = &rest[hlen..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n = e.rows * e.cols;
            if data.len() < 4 * n {
                return Err(Error::format("checkpoint", format!("tensor {} truncated", e.name)));
            }
            let values = data[..4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            data = &data[4 * n..];
            tensors.push(NamedTensor { name: e.name, rows: e.rows, cols: e.cols, data: values });
        }
        if !data.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let ckpt = Checkpoint { config: header.config, tensors, step: header.step, dev_bleu: header.dev_bleu, seed, meta: header.meta };
        ckpt.check_layout()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Hash of the config and parameter values only, ignoring step and labels.
    pub fn param_hash(&self) -> String {
        let mut bytes = toml::to_string(&self.config).expect("config serialises").into_bytes();
        for t in &self.tensors {
            bytes.extend(t.data.iter().flat_map(|x| x.to_le_bytes()));
        }
        seed::content_hash(&bytes)
    }

    pub fn content_hash(&self) -> String {
        seed::content_hash(&self.to_bytes())
    }
}
