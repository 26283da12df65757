//! Benchmark side: datasets, task streams, containers, metrics, configuration.

pub mod config;
pub mod data;
pub mod metrics;
pub mod ssds;
pub mod stream;

pub use metrics::AccuracyMatrix;
pub use data::{Dataset, ImageShape, LabelledSet, UnlabelledSet};
pub use stream::{build_semi_split, gen_synth_blobs, BlobSpec, SemiTask, SplitSpec, TaskStream};
