//! Core library for checkpoint composition experiments: container I/O,
//! weight-delta geometry, layer surgery, rank-profile language
//! identification, and translated-corpus quality filters.
//!
//! The crate is organized around five independent pieces:
//!
//! * [`store`] — single-file tensor containers: parsing, canonical
//!   writing, and grouping tensor names into pre / per-layer / post blocks.
//! * [`delta`] — streaming weight-delta statistics: pairwise cosines,
//!   Gram matrices, eigenvalue spectra, and per-layer norms.
//! * [`surgery`] — byte-level layer transplantation between compatible
//!   checkpoints, plus sweep planning over contiguous layer windows.
//! * [`lid`] — character n-gram rank profiles for language
//!   identification and fidelity scoring of generated traces.
//! * [`filter`] — quality filters for translated reasoning corpora:
//!   self-reference screening, token-budget chunking, compression- and
//!   length-ratio anomaly detection.
//!
//! [`config`] carries the shared run configuration and [`report`] the
//! provenance envelope (resolved config, tool version, input hashes)
//! embedded in emitted reports.

pub mod config;
pub mod delta;
pub mod filter;
pub mod lid;
pub mod report;
pub mod store;
pub mod surgery;

pub use config::RunConfig;
pub use delta::{AnalysisReport, DeltaStats};
pub use filter::{FilterOutcome, FilterVerdict, Sample};
pub use lid::{FidelityReport, LanguageProfile};
pub use store::{CheckpointHandle, Dtype, LayerGroup, LayerMap, TensorEntry, TensorMeta};
pub use surgery::{CompatReport, SwapPlan};
