//! Graph-based attention over medical ontologies for sequential diagnosis
//! prediction from electronic health records.

pub mod cooccurrence;
pub mod ehr;
pub mod evaluation;
mod error;
pub mod glove;
pub mod linalg;
pub mod model;
pub mod ontology;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
