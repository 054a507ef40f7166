//! Time-aware, knowledge-enriched mortality risk modeling for longitudinal
//! clinical records: synthetic cohorts, ontology-derived frozen code
//! embeddings, a dual-attention recurrent network with analytic gradients,
//! recall-weighted training, a multi-seed evaluation harness, and closed-form
//! per-patient attribution reports.

pub mod cohort;
pub mod error;
pub mod evaluate;
pub mod interpret;
pub mod model;
pub mod ontology;
pub mod preprocess;
pub mod train;

pub use error::{Error, Result};
