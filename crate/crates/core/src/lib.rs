//! Training-only CT supervision for X-ray classifiers.
//!
//! The crate covers the whole experimental pipeline: cohort ingestion and
//! X-ray/CT pairing, patient-level splits and Monte Carlo resampling,
//! teacher/student/late-fusion networks with optional mechanism blocks, the
//! hard/soft distillation objective and its mechanism-control losses,
//! deterministic training, imbalance-sensitive metrics, the experiment
//! matrices with their hypothesis ledger, audit-traceable reporting, and a
//! synthetic cohort generator for desk-scale runs.

pub mod cli;
pub mod cohort;
pub mod error;
pub mod experiments;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reporting;
pub mod seeding;
pub mod splits;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
