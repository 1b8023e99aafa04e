//! Seeded batch augmentation: config, plan sampling, per-document
//! augmentation and the curation manifest.

mod batch;
mod config;
pub mod manifest;
mod plan;
mod sample;

pub use batch::{
    augment_document, discover_sources, load_source, run_batch, trace_shapes, variant_name,
    AugmentError, Augmented, BatchError, BatchOptions, BatchReport, Failure, SourcePair,
};
pub use config::{
    AffineRanges, AugmentationConfig, ConfigError, DeformationRange, IntRange, InverseConfig, Range,
};
pub use manifest::{ManifestEntry, Verdict};
pub use plan::{Derivation, PlanError, TransformPlan};
pub use sample::{sample_plan, stream_seed};
