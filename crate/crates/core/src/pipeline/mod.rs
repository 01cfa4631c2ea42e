//! Manifest-driven pipeline: stages, ledger-based resume and the final report.

mod ledger;
mod manifest;
mod report;
mod run;

pub use ledger::{write_atomic, Artifact, Ledger, StageRecord, StageStatus, LEDGER_VERSION};
pub use manifest::{
    DataSection, DistillSection, EvalSection, FileData, FinetuneSection, JointSection, Manifest, ModelOverrides, MraspSection, RosterEntry, SearchSection,
    StageBudget, StudentInit, SyntheticData, VocabSection, DIRECTIONS, MANIFEST_VERSION, STAGES,
};
pub use report::{Report, ReportRow, SYSTEMS};
pub use run::{prepare_data, run, Data, RunError, RunOptions};
