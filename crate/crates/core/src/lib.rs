pub mod corpus;
pub mod ensemble;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod seed;
pub mod synthesis;
pub mod textkit;
pub mod training;

pub use error::{Error, Result};
