//! Shared fixtures for the benchmarks.

use deskmt::corpus::{ParallelCorpus, SyntheticTask, SyntheticTaskSpec};
use deskmt::model::{preset_config, ModelConfig};

/// A cipher task with `pairs` training pairs and a base model config sized for its vocabulary.
pub fn cipher_fixture(pairs: usize) -> (SyntheticTask, ParallelCorpus, ModelConfig) {
    let task = SyntheticTask::new(SyntheticTaskSpec::cipher("src", "tgt", 200, 7)).expect("valid spec");
    let corpus = task.sample_parallel(pairs, "bench");
    let cfg = preset_config("base", task.vocabulary().len()).expect("known preset");
    (task, corpus, cfg)
}
