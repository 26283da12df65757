//! The sequential protocol over a task stream, for the hypernetwork method
//! and the two single-model baselines, plus on-disk experiment state.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::buffer::{update_buffer, BufferSlice, ExemplarBuffer};
use super::ensemble::ModelCounter;
use super::ewc::EwcState;
use super::infer::{fine_tune, EvalTarget, Inference};
use crate::bench::config::{ExperimentConfig, LabelSpace};
use crate::bench::metrics::AccuracyMatrix;
use crate::bench::ssds;
use crate::bench::stream::{SemiTask, TaskStream};
use crate::codec::{self, OffsetCodec, WeightVector};
use crate::consolidation::{learn_task, PriorStore};
use crate::error::{Error, Result};
use crate::gan::{accuracy, evaluate, predict_among, train_base, train_semi_acgan, Architecture, ManifestEntry, ModelParams};
use crate::hypernet::{HyperParams, TaskDescriptor};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Mcssl,
    SingleSsl,
    EwcSsl,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Mcssl, Method::SingleSsl, Method::EwcSsl];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mcssl => "mcssl",
            Method::SingleSsl => "single-ssl",
            Method::EwcSsl => "ewc-ssl",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}; expected mcssl, single-ssl or ewc-ssl")))
    }
}

/// Per-task numbers that are not part of the accuracy matrix.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskDiagnostics {
    /// Test accuracy of each freshly trained base model on its own task.
    pub base_accuracy: Vec<f64>,
    /// Mean squared chunk reconstruction error per hypernetwork epoch.
    pub hyper_mse: Vec<f64>,
    pub consolidation_steps: usize,
    /// Most ensemble members held in memory at once during evaluation.
    pub peak_live_models: usize,
}

/// Worker threads for base-model training: `METACL_THREADS` if set, else all cores.
pub fn thread_count() -> Result<usize> {
    match std::env::var("METACL_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!("METACL_THREADS={v:?} is not a positive integer"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Everything that survives from one task to the next. Raw task data is
/// never stored here; only buffer exemplars, priors and weights are.
#[derive(Clone, Debug)]
pub struct ExperimentState {
    pub config: ExperimentConfig,
    pub method: Method,
    pub num_tasks: usize,
    pub next_task: usize,
    pub task_classes: Vec<Vec<usize>>,
    pub matrix: AccuracyMatrix,
    pub priors: PriorStore,
    pub hyper: Option<HyperParams>,
    pub learner: Option<ModelParams>,
    pub ewc: Option<EwcState>,
    pub buffer: ExemplarBuffer,
    pub diagnostics: Vec<TaskDiagnostics>,
    codec: OffsetCodec,
}

impl ExperimentState {
    pub fn new(config: ExperimentConfig, method: Method, stream: &TaskStream) -> Result<Self> {
        config.validate()?;
        let shape = stream.shape().ok_or_else(|| Error::Data("task stream is empty".into()))?;
        let arch = Architecture::new(shape, stream.num_classes);
        arch.validate()?;
        let root = RngStream::new(config.seed);
        let reference = ModelParams::init(arch, &mut root.derive_str("reference"))?;
        let codec = OffsetCodec::new(&reference, config.hyper.chunk_size)?;
        let hyper = match method {
            Method::Mcssl => Some(HyperParams::init(
                &config.hyper,
                stream.len(),
                codec.num_chunks(),
                &mut root.derive_str("hypernet-init"),
            )?),
            _ => None,
        };
        let learner = (method != Method::Mcssl).then_some(reference);
        Ok(Self {
            method,
            num_tasks: stream.len(),
            next_task: 0,
            task_classes: Vec::new(),
            matrix: AccuracyMatrix::new(),
            priors: PriorStore::new(),
            hyper,
            learner,
            ewc: None,
            buffer: ExemplarBuffer::new(shape),
            diagnostics: Vec::new(),
            codec,
            config,
        })
    }

    pub fn codec(&self) -> &OffsetCodec {
        &self.codec
    }

    pub fn is_finished(&self) -> bool {
        self.next_task == self.num_tasks
    }

    fn task_rng(&self, k: usize) -> RngStream {
        RngStream::new(self.config.seed).child("task", k as u64)
    }

    /// Train on task `k`, which must be the next task in the stream.
    pub fn learn_task(&mut self, k: usize, task: &SemiTask) -> Result<()> {
        if k != self.next_task || k >= self.num_tasks {
            return Err(Error::Contract(format!(
                "task {k} arrived out of order; expected {} of {}",
                self.next_task, self.num_tasks
            )));
        }
        let rng = self.task_rng(k);
        let mut diag = TaskDiagnostics::default();
        self.task_classes.push(task.classes.clone());
        let allowed = self.allowed_classes(k, k);
        match self.method {
            Method::Mcssl => {
                let models = self.train_base_models(task, &rng)?;
                for m in &models {
                    diag.base_accuracy.push(evaluate(m, &task.test, Some(&allowed))?);
                }
                let chunks = models.iter().map(|m| self.codec.encode(m)).collect::<Result<Vec<_>>>()?;
                drop(models);
                let hyper = self.hyper.as_mut().expect("hypernetwork present for this method");
                let t = TaskDescriptor::new(k, self.num_tasks)?;
                let report = learn_task(
                    hyper,
                    &mut self.priors,
                    &chunks,
                    &t,
                    &self.config.hyper,
                    &self.config.consolidation,
                    &rng.derive_str("hypernet"),
                )?;
                diag.hyper_mse = report.train.epoch_mse;
                diag.consolidation_steps = report.replay.steps;
            }
            Method::SingleSsl | Method::EwcSsl => {
                let learner = self.learner.as_mut().expect("learner present for this method");
                let penalty = self.ewc.as_ref().map(|e| e as &dyn crate::gan::DiscriminatorPenalty);
                train_semi_acgan(
                    learner,
                    &task.train_labelled,
                    &task.train_unlabelled,
                    &task.classes,
                    &self.config.gan,
                    penalty,
                    &rng.child("base", 0),
                )?;
                diag.base_accuracy.push(evaluate(learner, &task.test, Some(&allowed))?);
            }
        }
        update_buffer(
            &mut self.buffer,
            k,
            task,
            self.config.buffer.labelled,
            self.config.buffer.unlabelled,
            &rng.derive_str("buffer"),
        )?;
        if self.method == Method::EwcSsl {
            let learner = self.learner.as_ref().expect("learner present");
            let slice = self.buffer.slice(k).expect("slice just added");
            self.ewc = Some(EwcState::absorb_task(self.ewc.take(), self.config.ewc.lambda, learner, &slice.labelled)?);
        }
        self.diagnostics.push(diag);
        self.next_task += 1;
        Ok(())
    }

    fn train_base_models(&self, task: &SemiTask, rng: &RngStream) -> Result<Vec<ModelParams>> {
        let reference = self.codec.reference()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count()?)
            .build()
            .map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))?;
        pool.install(|| {
            (0..self.config.base_models)
                .into_par_iter()
                .map(|b| train_base(task, &reference, &self.config.gan, &rng.child("base", b as u64)))
                .collect()
        })
    }

    /// Classes a prediction on task `j`'s test set may use after task `k`.
    fn allowed_classes(&self, k: usize, j: usize) -> Vec<usize> {
        match self.config.eval.label_space {
            LabelSpace::Task => self.task_classes[j].clone(),
            LabelSpace::Seen => {
                let mut all: Vec<usize> = self.task_classes[..=k].iter().flatten().copied().collect();
                all.sort_unstable();
                all
            }
        }
    }

    /// Evaluate on the test sets of tasks `0..next_task` and append the row.
    pub fn evaluate(&mut self, stream: &TaskStream) -> Result<Vec<f64>> {
        if self.next_task == 0 || self.matrix.num_tasks() != self.next_task - 1 {
            return Err(Error::Contract("evaluate must follow each learned task exactly once".into()));
        }
        let k = self.next_task - 1;
        let targets: Vec<EvalTarget<'_>> = (0..=k)
            .map(|j| EvalTarget {
                test: &stream.tasks[j].test,
                allowed: self.allowed_classes(k, j),
            })
            .collect();
        let rng = self.task_rng(k).derive_str("evaluate");
        let counter = ModelCounter::new();
        let aware = self.config.eval.task_aware;
        let predictions = match self.method {
            Method::Mcssl => {
                let inf = Inference {
                    hyper: self.hyper.as_ref().expect("hypernetwork present"),
                    codec: &self.codec,
                    fine_tune: &self.config.fine_tune,
                    ensemble: self.config.ensemble,
                    mix: self.config.eval.agnostic_code,
                    counter: &counter,
                };
                if aware {
                    inf.task_aware(&self.priors, &self.buffer, &targets, &rng)?
                } else {
                    inf.task_agnostic(&self.priors, &self.buffer, &targets, &rng)?
                }
            }
            Method::SingleSsl | Method::EwcSsl => {
                let learner = self.learner.as_ref().expect("learner present");
                let tune = |slice: &BufferSlice, rng: &RngStream| -> Result<_> {
                    let mut live = counter.hold(learner.clone());
                    fine_tune(live.params_mut(), slice, &self.config.fine_tune, rng)?;
                    Ok(live)
                };
                if aware {
                    let mut out = Vec::new();
                    for (j, t) in targets.iter().enumerate() {
                        let slice = self.buffer.slice(j).expect("slice per task");
                        let live = tune(slice, &rng.child("task", j as u64))?;
                        out.push(predict_among(&live, &t.test.all_images()?, Some(&t.allowed))?);
                    }
                    out
                } else {
                    let live = tune(&self.buffer.joint(), &rng)?;
                    targets
                        .iter()
                        .map(|t| predict_among(&live, &t.test.all_images()?, Some(&t.allowed)))
                        .collect::<Result<Vec<_>>>()?
                }
            }
        };
        let row: Vec<f64> = predictions
            .iter()
            .zip(&targets)
            .map(|(p, t)| accuracy(p, &t.test.labels))
            .collect();
        self.matrix.push_row(row.clone())?;
        if let Some(d) = self.diagnostics.last_mut() {
            d.peak_live_models = counter.peak();
        }
        Ok(row)
    }

    /// Learn and evaluate every remaining task, saving after each one when `out` is given.
    pub fn run_to_end(&mut self, stream: &TaskStream, out: Option<&Path>) -> Result<()> {
        self.run_until(stream, self.num_tasks, out)
    }

    /// Learn and evaluate tasks until `next_task == until`.
    pub fn run_until(&mut self, stream: &TaskStream, until: usize, out: Option<&Path>) -> Result<()> {
        if stream.len() != self.num_tasks {
            return Err(Error::Contract("stream does not match the experiment".into()));
        }
        while self.next_task < until.min(self.num_tasks) {
            let k = self.next_task;
            self.learn_task(k, &stream.tasks[k])?;
            self.evaluate(stream)?;
            if let Some(dir) = out {
                self.save(dir)?;
            }
        }
        Ok(())
    }

    /// `results.csv` rows: method, task_k (from 1), A_k, F_k, seed.
    pub fn results_rows(&self) -> Vec<String> {
        let a = self.matrix.step_accuracies();
        let f = self.matrix.step_forgetting();
        a.iter()
            .zip(&f)
            .enumerate()
            .map(|(k, (a, f))| format!("{},{},{},{},{}", self.method, k + 1, a, f, self.config.seed))
            .collect()
    }
}

pub const RESULTS_HEADER: &str = "method,task_k,A_k,F_k,seed";

pub fn write_results(path: &Path, states: &[&ExperimentState]) -> Result<()> {
    let mut text = String::from(RESULTS_HEADER);
    text.push('\n');
    for s in states {
        for r in s.results_rows() {
            text.push_str(&r);
            text.push('\n');
        }
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateFile {
    format: u32,
    method: Method,
    config: ExperimentConfig,
    num_tasks: usize,
    next_task: usize,
    task_classes: Vec<Vec<usize>>,
    matrix: Vec<Vec<f64>>,
    priors: PriorStore,
    diagnostics: Vec<TaskDiagnostics>,
    ewc_lambda: Option<f64>,
}

const STATE_FORMAT: u32 = 1;
pub const STATE_FILE: &str = "state.json";

fn tensors_to_weights(prefix: &str, tensors: &[Tensor]) -> Result<WeightVector> {
    let manifest = tensors
        .iter()
        .enumerate()
        .map(|(i, t)| ManifestEntry {
            name: format!("{prefix}.{i}"),
            shape: t.shape().to_vec(),
        })
        .collect();
    let values = tensors.iter().flat_map(|t| t.data().iter().copied()).collect();
    Ok(WeightVector::new(manifest, values)?)
}

fn weights_to_tensors(w: &WeightVector) -> Result<Vec<Tensor>> {
    let mut offset = 0;
    w.manifest
        .iter()
        .map(|e| {
            let n = e.numel();
            let t = Tensor::new(e.shape.clone(), w.values[offset..offset + n].to_vec());
            offset += n;
            t
        })
        .collect()
}

impl ExperimentState {
    /// Write `state.json` plus weight checkpoints and buffer containers into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("buffer")).map_err(|e| Error::io(dir, e))?;
        let file = StateFile {
            format: STATE_FORMAT,
            method: self.method,
            config: self.config.clone(),
            num_tasks: self.num_tasks,
            next_task: self.next_task,
            task_classes: self.task_classes.clone(),
            matrix: self.matrix.rows().to_vec(),
            priors: self.priors.clone(),
            diagnostics: self.diagnostics.clone(),
            ewc_lambda: self.ewc.as_ref().map(|e| e.lambda),
        };
        let json = serde_json::to_string_pretty(&file).expect("state serializes");
        let path = dir.join(STATE_FILE);
        std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
        if let Some(h) = &self.hyper {
            codec::save_weights(dir.join("hypernet.mcwt"), &codec::flatten(h))?;
        }
        if let Some(l) = &self.learner {
            codec::save_checkpoint(l, dir.join("learner.mcwt"))?;
        }
        if let Some(e) = &self.ewc {
            codec::save_weights(dir.join("ewc_anchor.mcwt"), &tensors_to_weights("anchor", &e.anchor)?)?;
            codec::save_weights(dir.join("ewc_fisher.mcwt"), &tensors_to_weights("fisher", &e.fisher)?)?;
        }
        let classes = self.codec.arch().num_classes;
        for (j, s) in self.buffer.slices().iter().enumerate() {
            ssds::write_labelled(buffer_path(dir, j, "labelled"), &s.labelled, classes)?;
            ssds::write_unlabelled(buffer_path(dir, j, "unlabelled"), &s.unlabelled, classes)?;
        }
        Ok(())
    }

    /// Reload a saved experiment. `stream` must be rebuilt from the saved config.
    pub fn load(dir: &Path) -> Result<(Self, TaskStream)> {
        let path = dir.join(STATE_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let file: StateFile = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if file.format != STATE_FORMAT {
            return Err(Error::Config(format!("unsupported state format {}", file.format)));
        }
        let stream = file.config.build_stream()?;
        let mut state = Self::new(file.config, file.method, &stream)?;
        if file.num_tasks != state.num_tasks || file.next_task > file.num_tasks {
            return Err(Error::Config("saved task counts do not match the rebuilt stream".into()));
        }
        state.next_task = file.next_task;
        state.task_classes = file.task_classes;
        state.matrix = AccuracyMatrix::from_rows(file.matrix)?;
        state.priors = file.priors;
        state.diagnostics = file.diagnostics;
        if state.hyper.is_some() && state.next_task > 0 {
            state.hyper = Some(HyperParams::from_weights(&codec::load_weights(dir.join("hypernet.mcwt"))?)?);
        }
        if state.learner.is_some() && state.next_task > 0 {
            state.learner = Some(codec::load_checkpoint(dir.join("learner.mcwt"))?);
        }
        if let Some(lambda) = file.ewc_lambda {
            state.ewc = Some(EwcState {
                lambda,
                anchor: weights_to_tensors(&codec::load_weights(dir.join("ewc_anchor.mcwt"))?)?,
                fisher: weights_to_tensors(&codec::load_weights(dir.join("ewc_fisher.mcwt"))?)?,
            });
        }
        for j in 0..state.next_task {
            let labelled = ssds::ingest_images(buffer_path(dir, j, "labelled"))?.items;
            let unlabelled = ssds::read_unlabelled(buffer_path(dir, j, "unlabelled"))?;
            state.buffer.push_slice(BufferSlice {
                classes: state.task_classes[j].clone(),
                labelled,
                unlabelled,
            });
        }
        Ok((state, stream))
    }
}

fn buffer_path(dir: &Path, task: usize, kind: &str) -> PathBuf {
    dir.join("buffer").join(format!("task{task}.{kind}.ssds"))
}

/// Run one method over the configured stream from scratch.
pub fn run_experiment(config: &ExperimentConfig, method: Method, out: Option<&Path>) -> Result<ExperimentState> {
    let stream = config.build_stream()?;
    let mut state = ExperimentState::new(config.clone(), method, &stream)?;
    state.run_to_end(&stream, out)?;
    Ok(state)
}
