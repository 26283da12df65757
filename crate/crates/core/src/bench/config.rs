//! Experiment configuration (JSON). Every key is explicit and unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::ssds::ingest_images;
use super::stream::{build_semi_split, gen_synth_blobs, BlobSpec, SplitSpec, TaskStream};
use crate::consolidation::ConsolidationConfig;
use crate::error::{Error, Result};
use crate::gan::GanTrainConfig;
use crate::hypernet::{HyperConfig, TaskMix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated on the fly; `seed` fixes the class templates and noise.
    Blobs {
        num_classes: usize,
        per_class: usize,
        image_size: usize,
        noise_level: f64,
        seed: u64,
    },
    /// A labelled SSDS container. Relative paths resolve against the config file.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub split: SplitSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 2e-4,
            batch_size: 32,
            beta1: 0.9,
            beta2: 0.999,
        }
    }
}

impl FineTuneConfig {
    pub fn as_gan_config(&self) -> GanTrainConfig {
        GanTrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            use_unlabelled: true,
            ..GanTrainConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BufferConfig {
    pub labelled: usize,
    pub unlabelled: usize,
}

impl Default for BufferConfig {
    fn default() -> Self {
        Self {
            labelled: 12,
            unlabelled: 48,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EwcConfig {
    pub lambda: f64,
}

impl Default for EwcConfig {
    fn default() -> Self {
        Self { lambda: 100.0 }
    }
}

/// Which class ids a prediction may choose from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelSpace {
    /// Every class of every task seen so far.
    Seen,
    /// Only the classes of the task the test item belongs to.
    Task,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub label_space: LabelSpace,
    pub task_aware: bool,
    /// Task code given to the decoder in task-agnostic inference.
    pub agnostic_code: TaskMix,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            label_space: LabelSpace::Seen,
            task_aware: false,
            agnostic_code: TaskMix::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub gan: GanTrainConfig,
    #[serde(default = "default_base_models")]
    pub base_models: usize,
    #[serde(default)]
    pub hyper: HyperConfig,
    #[serde(default)]
    pub consolidation: ConsolidationConfig,
    #[serde(default = "default_ensemble")]
    pub ensemble: usize,
    #[serde(default)]
    pub fine_tune: FineTuneConfig,
    #[serde(default)]
    pub buffer: BufferConfig,
    #[serde(default)]
    pub ewc: EwcConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_base_models() -> usize {
    5
}

fn default_ensemble() -> usize {
    15
}

pub const PRESETS: &[&str] = &["blobs8"];

/// Blob parameters of a named preset.
pub fn preset_blobs(name: &str) -> Result<(BlobSpec, u64)> {
    match name {
        "blobs8" => Ok((
            BlobSpec {
                num_classes: 8,
                per_class: 300,
                image_size: 8,
                noise_level: 1.0,
            },
            1,
        )),
        other => Err(Error::Config(format!("unknown preset {other:?}; known: {PRESETS:?}"))),
    }
}

impl ExperimentConfig {
    /// The `blobs8` stream: 4 tasks of 2 classes, `labelled` items per task.
    pub fn blobs8(seed: u64, labelled: usize) -> Self {
        let (b, data_seed) = preset_blobs("blobs8").expect("known preset");
        Self {
            seed,
            data: DataConfig {
                source: DataSource::Blobs {
                    num_classes: b.num_classes,
                    per_class: b.per_class,
                    image_size: b.image_size,
                    noise_level: b.noise_level,
                    seed: data_seed,
                },
                split: SplitSpec {
                    num_tasks: 4,
                    classes_per_task: 2,
                    labelled,
                    unlabelled: 200,
                    val_labelled: 20,
                    val_unlabelled: 20,
                    test: 200,
                },
            },
            gan: GanTrainConfig::default(),
            base_models: default_base_models(),
            hyper: HyperConfig::default(),
            consolidation: ConsolidationConfig::default(),
            ensemble: default_ensemble(),
            fine_tune: FineTuneConfig::default(),
            buffer: BufferConfig::default(),
            ewc: EwcConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file; a relative dataset path is resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let DataSource::File { path: data } = &mut cfg.data.source {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.base_models == 0 {
            return bad("base_models must be at least 1");
        }
        if self.ensemble == 0 {
            return bad("ensemble must be at least 1");
        }
        if self.gan.batch_size == 0 || self.fine_tune.batch_size == 0 {
            return bad("batch sizes must be at least 1");
        }
        if !(self.gan.lr > 0.0 && self.fine_tune.lr > 0.0 && self.hyper.lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if self.ewc.lambda.is_nan() || self.ewc.lambda < 0.0 {
            return bad("ewc.lambda must be >= 0");
        }
        if self.hyper.chunk_size == 0 {
            return bad("hyper.chunk_size must be at least 1");
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<(Dataset, String)> {
        match &self.data.source {
            DataSource::Blobs {
                num_classes,
                per_class,
                image_size,
                noise_level,
                seed,
            } => {
                let spec = BlobSpec {
                    num_classes: *num_classes,
                    per_class: *per_class,
                    image_size: *image_size,
                    noise_level: *noise_level,
                };
                Ok((gen_synth_blobs(spec, *seed)?, format!("blobs-{seed}")))
            }
            DataSource::File { path } => Ok((ingest_images(path)?, path.display().to_string())),
        }
    }

    /// Dataset split into tasks with the experiment seed.
    pub fn build_stream(&self) -> Result<TaskStream> {
        let (dataset, id) = self.load_dataset()?;
        build_semi_split(&dataset, &id, self.data.split, self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let cfg = ExperimentConfig::blobs8(3, 50);
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        let mut v: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
        v["gan"]["momentum"] = serde_json::json!(0.5);
        assert!(matches!(ExperimentConfig::from_json(&v.to_string()), Err(Error::Config(_))));
    }

    #[test]
    fn defaults_follow_the_reference_setup() {
        let cfg = ExperimentConfig::from_json(
            r#"{"seed": 1, "data": {"source": {"kind": "blobs", "num_classes": 8, "per_class": 10,
                "image_size": 8, "noise_level": 0.3, "seed": 2},
                "split": {"num_tasks": 4, "classes_per_task": 2, "labelled": 4, "unlabelled": 4,
                "val_labelled": 0, "val_unlabelled": 0, "test": 4}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.base_models, 5);
        assert_eq!(cfg.ensemble, 15);
        assert_eq!(cfg.hyper.chunk_size, 250);
        assert_eq!(cfg.hyper.latent_dim, 10);
        assert_eq!(cfg.hyper.hidden, 30);
        assert_eq!(cfg.hyper.epochs, 50);
        assert_eq!(cfg.gan.lr, 2e-4);
        assert_eq!(cfg.fine_tune.epochs, 20);
    }
}
