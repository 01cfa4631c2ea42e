//! Stage ledger: what ran, on which inputs, and what it produced.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const LEDGER_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Running,
    Done,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the experiment directory.
    pub path: String,
    pub hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub inputs_hash: String,
    /// Seed as hex.
    pub seed: String,
    #[serde(default)]
    pub outputs: Vec<Artifact>,
}

/// Wall-clock times live in `timings.tsv`, so two runs of one manifest write identical ledgers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ledger {
    pub version: u32,
    pub experiment: String,
    pub manifest_hash: String,
    pub seed: String,
    #[serde(default)]
    pub stages: Vec<StageRecord>,
}

impl Ledger {
    pub fn new(experiment: &str, manifest_hash: &str, seed: u64) -> Self {
        Ledger { version: LEDGER_VERSION, experiment: experiment.into(), manifest_hash: manifest_hash.into(), seed: format!("{seed:016x}"), stages: Vec::new() }
    }

    pub fn load(path: &Path) -> Result<Option<Self>> {
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let l: Ledger = toml::from_str(&text).map_err(|e| Error::format("ledger", e.to_string()))?;
        if l.version != LEDGER_VERSION {
            return Err(Error::format("ledger", format!("version {} is not supported", l.version)));
        }
        Ok(Some(l))
    }

    /// Atomic replace through a temporary file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::format("ledger", e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }

    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn interrupted(&self) -> Option<&str> {
        self.stages.iter().find(|s| s.status == StageStatus::Running).map(|s| s.name.as_str())
    }

    pub fn upsert(&mut self, rec: StageRecord) {
        match self.stages.iter_mut().find(|s| s.name == rec.name) {
            Some(slot) => *slot = rec,
            None => self.stages.push(rec),
        }
    }

    /// A stage may be skipped when it is done on the same inputs and every
    /// output still has its recorded hash.
    pub fn reusable(&self, name: &str, inputs_hash: &str, root: &Path) -> bool {
        let Some(rec) = self.get(name) else { return false };
        rec.status == StageStatus::Done
            && rec.inputs_hash == inputs_hash
            && rec.outputs.iter().all(|a| fs::read(root.join(&a.path)).map(|b| crate::seed::content_hash(&b) == a.hash).unwrap_or(false))
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reuse_requires_matching_inputs_and_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::write(root.join("a.bin"), b"xyz").unwrap();
        let mut l = Ledger::new("e", "h", u64::MAX);
        l.upsert(StageRecord {
            name: "baseline".into(),
            status: StageStatus::Done,
            inputs_hash: "i1".into(),
            seed: "00".into(),
            outputs: vec![Artifact { path: "a.bin".into(), hash: crate::seed::content_hash(b"xyz") }],
        });
        assert!(l.reusable("baseline", "i1", root));
        assert!(!l.reusable("baseline", "i2", root));
        assert!(!l.reusable("distill", "i1", root));
        fs::write(root.join("a.bin"), b"changed").unwrap();
        assert!(!l.reusable("baseline", "i1", root));

        let path = root.join("ledger.toml");
        l.save(&path).unwrap();
        assert_eq!(Ledger::load(&path).unwrap().unwrap(), l);
        assert!(Ledger::load(&root.join("none.toml")).unwrap().is_none());
    }
}
