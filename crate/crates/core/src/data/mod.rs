//! Interaction ingestion, filtering, sequence building, windowing, negative
//! sampling and bucket assignment.

mod bucket;
mod ingest;
mod negative;
mod sequences;
mod window;

pub use bucket::{bucketize, quartile_edges, BucketAssignment, BucketAxis, BucketSpec};
pub use ingest::{k_core_filter, k_core_filter_iterative, parse_interactions, Interaction, KCoreMode, ParseReport};
pub use negative::sample_negative;
pub use sequences::{build_sequences, BuildReport, DatasetStats, SequenceDataset};
pub use window::{inference_window, make_window, TrainingWindow};
