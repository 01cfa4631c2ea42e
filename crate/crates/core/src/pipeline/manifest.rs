//! Pipeline manifest: a versioned TOML document describing data, the model
//! roster and the stage list.

use crate::corpus::{Sampling, SyntheticTaskSpec};
use crate::error::{Error, Result};
use crate::eval::Tokenization;
use crate::model::{preset_config, ModelConfig};
use crate::textkit::{BpeOptions, QuoteStyle};
use crate::training::{Budget, TrainPlan};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;

pub const MANIFEST_VERSION: u32 = 1;

/// Stages in their only valid relative order.
pub const STAGES: [&str; 6] = ["baseline", "mrasp", "joint_train", "distill", "finetune", "ensemble_search"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub experiment: String,
    pub seed: Option<u64>,
    pub data: DataSection,
    #[serde(default)]
    pub vocab: VocabSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub overrides: ModelOverrides,
    pub models: Vec<RosterEntry>,
    pub stages: Vec<String>,
    #[serde(default)]
    pub train: TrainPlan,
    #[serde(default)]
    pub baseline: StageBudget,
    #[serde(default)]
    pub mrasp: Option<MraspSection>,
    #[serde(default)]
    pub joint_train: JointSection,
    #[serde(default)]
    pub distill: DistillSection,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub ensemble_search: SearchSection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: Option<SyntheticData>,
    pub files: Option<FileData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub task: SyntheticTaskSpec,
    pub parallel: usize,
    pub mono_src: usize,
    pub mono_tgt: usize,
    pub dev: usize,
    /// Domain of the dev set and of the in-domain fine-tuning pairs.
    #[serde(default)]
    pub dev_domain: u64,
    /// In-domain pairs for fine-tuning.
    #[serde(default)]
    pub indomain: usize,
}

/// Plain-text inputs: parallel and dev files hold `source<TAB>target` lines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileData {
    pub source_language: String,
    pub target_language: String,
    pub parallel: String,
    pub mono_src: String,
    pub mono_tgt: String,
    pub dev: String,
    #[serde(default)]
    pub indomain: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    pub merges: usize,
    pub min_frequency: usize,
    pub upsample_low_resource: bool,
}

impl Default for VocabSection {
    fn default() -> Self {
        let d = BpeOptions::default();
        VocabSection { merges: d.merges, min_frequency: d.min_frequency, upsample_low_resource: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub beam: usize,
    pub quotes: QuoteStyle,
    pub tokenization: Tokenization,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { beam: 4, quotes: QuoteStyle::AsIs, tokenization: Tokenization::Intl }
    }
}

/// Size overrides applied on top of every preset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelOverrides {
    pub embed_dim: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub enc_layers: Option<usize>,
    pub dec_layers: Option<usize>,
}

impl ModelOverrides {
    pub fn apply(&self, cfg: &mut ModelConfig) {
        let set = |slot: &mut usize, v: Option<usize>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.embed_dim, self.embed_dim);
        set(&mut cfg.ffn_dim, self.ffn_dim);
        set(&mut cfg.heads, self.heads);
        set(&mut cfg.head_dim, self.head_dim);
        if let Some(n) = self.enc_layers {
            cfg.enc_layers = n;
            if !cfg.enc_kernels.is_empty() {
                cfg.enc_kernels.resize(n, *cfg.enc_kernels.last().expect("non-empty"));
            }
        }
        if let Some(n) = self.dec_layers {
            cfg.dec_layers = n;
            if !cfg.dec_kernels.is_empty() {
                cfg.dec_kernels.resize(n, *cfg.dec_kernels.last().expect("non-empty"));
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RosterEntry {
    pub name: String,
    pub preset: String,
    #[serde(default = "no_sampling")]
    pub sampling: Sampling,
}

fn no_sampling() -> Sampling {
    Sampling::None
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageBudget {
    /// Update count; the `[train]` budget when unset.
    pub steps: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MraspSection {
    /// Extra language pairs used only for pretraining (both directions).
    pub auxiliary: Vec<SyntheticData>,
    /// Architecture of the pretrained model; roster models with this preset get a fine-tuned alternative.
    #[serde(default = "base_preset")]
    pub preset: String,
    pub steps: u64,
    /// Fine-tuning updates per model; the baseline budget when unset.
    #[serde(default)]
    pub finetune_steps: Option<u64>,
}

fn base_preset() -> String {
    "base".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointSection {
    pub max_iters: usize,
    pub convergence: f64,
    pub tag: bool,
    pub beam: usize,
    pub steps: Option<u64>,
    /// Monolingual shards per side; one per roster model when unset.
    pub shards: Option<usize>,
    pub allow_shard_reuse: bool,
}

impl Default for JointSection {
    fn default() -> Self {
        JointSection { max_iters: 3, convergence: 0.2, tag: true, beam: 4, steps: None, shards: None, allow_shard_reuse: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    /// Continue from the student's group member after joint training.
    Bt,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub k: usize,
    pub students_per_group: usize,
    pub beam: usize,
    pub steps: Option<u64>,
    pub r2l_steps: Option<u64>,
    pub student_init: StudentInit,
    /// Start the R2L teacher from its group member's weights.
    pub r2l_init: StudentInit,
    pub directions: Vec<String>,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection { k: 3, students_per_group: 1, beam: 4, steps: None, r2l_steps: None, student_init: StudentInit::Bt, r2l_init: StudentInit::Bt, directions: vec!["s2t".into(), "t2s".into()] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: u64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection { epochs: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub top_k: usize,
    pub n_draws: usize,
    pub beam: usize,
    pub directions: Vec<String>,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection { top_k: 3, n_draws: 10, beam: 4, directions: vec!["s2t".into(), "t2s".into()] }
    }
}

pub const DIRECTIONS: [&str; 2] = ["s2t", "t2s"];

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::format("manifest", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serialises")
    }

    /// Pins the experiment: hash of the canonical serialisation.
    pub fn hash(&self) -> String {
        crate::seed::content_hash(self.to_toml().as_bytes())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn has_stage(&self, name: &str) -> bool {
        self.stages.iter().any(|s| s == name)
    }

    pub fn model_config(&self, entry: &RosterEntry, vocab_size: usize, num_specials: usize) -> Result<ModelConfig> {
        let mut cfg = preset_config(&entry.preset, vocab_size)?;
        cfg.num_specials = num_specials;
        self.overrides.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn plan(&self, steps: Option<u64>) -> TrainPlan {
        let mut p = self.train.clone();
        if let Some(n) = steps {
            p.budget = Budget::Steps(n);
        }
        p
    }

    fn consumers(&self) -> usize {
        self.models.len()
    }

    /// Every problem that would stop the run; empty means runnable.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.version != MANIFEST_VERSION {
            v.push(format!("manifest version {} is not supported (expected {MANIFEST_VERSION})", self.version));
        }
        if self.experiment.trim().is_empty() {
            v.push("experiment id is empty".into());
        }
        if self.seed.is_none() {
            v.push("global seed is missing".into());
        }
        match (&self.data.synthetic, &self.data.files) {
            (None, None) => v.push("data needs a synthetic task or input files".into()),
            (Some(_), Some(_)) => v.push("data has both a synthetic task and input files".into()),
            (Some(s), None) => {
                if let Err(e) = s.task.validate() {
                    v.push(format!("synthetic task: {e}"));
                }
                if s.parallel == 0 || s.dev == 0 {
                    v.push("synthetic data needs parallel and dev pairs".into());
                }
            }
            _ => {}
        }
        if self.models.is_empty() {
            v.push("model roster is empty".into());
        }
        let mut names = HashSet::new();
        for m in &self.models {
            if !names.insert(&m.name) {
                v.push(format!("model name `{}` is used twice", m.name));
            }
            if let Err(e) = self.model_config(m, 64, crate::textkit::BT_TAG as usize + 1) {
                v.push(format!("model `{}`: {e}", m.name));
            }
            match m.sampling {
                Sampling::Upsample(r) if !(r >= 1.0) => v.push(format!("model `{}`: up-sampling ratio {r} < 1", m.name)),
                Sampling::Bagging(r) if !(r > 0.0) => v.push(format!("model `{}`: bagging ratio {r} must be positive", m.name)),
                _ => {}
            }
        }
        if let Err(e) = self.train.validate() {
            v.push(format!("train: {e}"));
        }
        self.validate_stages(&mut v);
        v
    }

    fn validate_stages(&self, v: &mut Vec<String>) {
        let mut last: Option<(usize, &str)> = None;
        let mut seen = HashSet::new();
        for s in &self.stages {
            let Some(rank) = STAGES.iter().position(|x| x == s) else {
                v.push(format!("unknown stage `{s}`; expected one of {STAGES:?}"));
                continue;
            };
            if !seen.insert(s.as_str()) {
                v.push(format!("stage `{s}` is listed twice"));
            }
            if let Some((prev_rank, prev)) = last {
                if rank < prev_rank {
                    v.push(format!("stage `{s}` must come before `{prev}`"));
                }
            }
            last = Some((rank, s));
        }
        if !self.has_stage("baseline") {
            v.push("stage list must start with `baseline`".into());
        }
        if self.has_stage("distill") && !self.has_stage("joint_train") {
            v.push("`distill` needs `joint_train` earlier in the stage list".into());
        }
        if self.has_stage("mrasp") && self.mrasp.is_none() {
            v.push("stage `mrasp` needs an [mrasp] section".into());
        }
        if self.has_stage("finetune") {
            let has_indomain = match (&self.data.synthetic, &self.data.files) {
                (Some(s), _) => s.indomain > 0,
                (_, Some(f)) => f.indomain.is_some(),
                _ => false,
            };
            if !has_indomain {
                v.push("stage `finetune` needs in-domain data".into());
            }
            if !(1..=2).contains(&self.finetune.epochs) {
                v.push(format!("finetune runs for 1 or 2 epochs, not {}", self.finetune.epochs));
            }
        }
        if self.has_stage("joint_train") {
            let shards = self.joint_train.shards.unwrap_or(self.consumers());
            if shards == 0 {
                v.push("joint_train needs at least one shard".into());
            } else if shards < self.consumers() && !self.joint_train.allow_shard_reuse {
                v.push(format!("{shards} monolingual shards for {} models; set allow_shard_reuse to share", self.consumers()));
            }
            if let Some(s) = &self.data.synthetic {
                if shards > s.mono_src.min(s.mono_tgt) {
                    v.push(format!("{shards} shards but only {} monolingual sentences", s.mono_src.min(s.mono_tgt)));
                }
            }
            if self.joint_train.beam == 0 {
                v.push("joint_train beam must be at least 1".into());
            }
        }
        if self.has_stage("distill") {
            let d = &self.distill;
            if d.k == 0 || self.models.len() % d.k != 0 {
                v.push(format!("{} models cannot form {} equal distillation groups", self.models.len(), d.k));
            }
            if d.students_per_group == 0 {
                v.push("distill needs at least one student per group".into());
            }
            check_directions("distill", &d.directions, v);
        }
        if self.has_stage("ensemble_search") {
            let s = &self.ensemble_search;
            if s.top_k == 0 || s.n_draws == 0 {
                v.push("ensemble_search needs top_k and n_draws of at least 1".into());
            }
            check_directions("ensemble_search", &s.directions, v);
        }
    }
}

fn check_directions(stage: &str, dirs: &[String], v: &mut Vec<String>) {
    if dirs.is_empty() {
        v.push(format!("{stage} has no directions"));
    }
    for d in dirs {
        if !DIRECTIONS.contains(&d.as_str()) {
            v.push(format!("{stage}: unknown direction `{d}` (use s2t or t2s)"));
        }
    }
}
