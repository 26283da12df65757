#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;

use metacl::bench::config::{BufferConfig, DataSource, ExperimentConfig, FineTuneConfig};
use metacl::consolidation::ConsolidationConfig;
use metacl::gan::GanTrainConfig;
use metacl::hypernet::HyperConfig;

/// A 3-task stream small enough for a full run in a few seconds.
pub fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::blobs8(seed, 6);
    cfg.data.source = DataSource::Blobs {
        num_classes: 6,
        per_class: 40,
        image_size: 8,
        noise_level: 0.8,
        seed: 1,
    };
    cfg.data.split.num_tasks = 3;
    cfg.data.split.unlabelled = 12;
    cfg.data.split.val_labelled = 2;
    cfg.data.split.val_unlabelled = 2;
    cfg.data.split.test = 10;
    cfg.gan = GanTrainConfig {
        epochs: 2,
        batch_size: 8,
        ..GanTrainConfig::default()
    };
    cfg.base_models = 2;
    cfg.hyper = HyperConfig {
        epochs: 2,
        ..HyperConfig::default()
    };
    cfg.consolidation = ConsolidationConfig {
        pseudo_models: 2,
        passes: 1,
    };
    cfg.ensemble = 2;
    cfg.fine_tune = FineTuneConfig {
        epochs: 1,
        batch_size: 8,
        ..FineTuneConfig::default()
    };
    cfg.buffer = BufferConfig {
        labelled: 4,
        unlabelled: 4,
    };
    cfg
}
