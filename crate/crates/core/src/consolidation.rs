//! Replay of earlier tasks through their stored priors, so that training the
//! hypernetwork on a new task does not drift away from what it generated
//! for the old ones.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::codec::ChunkSet;
use crate::hypernet::{check_models, fit_epoch, Gaussian, HyperConfig, HyperParams, HyperTrainReport, TaskDescriptor, TaskPrior, Trainable};
use crate::rng::RngStream;
use crate::tensor::Optimizer;

/// Snapshots of each task's prior, taken when that task finished.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorStore {
    priors: Vec<TaskPrior>,
}

impl PriorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.priors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.priors.is_empty()
    }

    /// Prior of task `id` (tasks are numbered from 0 in arrival order).
    pub fn get(&self, id: usize) -> Option<&TaskPrior> {
        self.priors.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &TaskPrior)> {
        self.priors.iter().enumerate()
    }

    /// Copy the current prior of `task_id`, which must be the next unseen task.
    pub fn record_prior(&mut self, task_id: usize, hyper: &HyperParams) -> Result<()> {
        match task_id.cmp(&self.len()) {
            std::cmp::Ordering::Less => Err(Error::Contract(format!("prior for task {task_id} already recorded"))),
            std::cmp::Ordering::Greater => Err(Error::Contract(format!(
                "task {task_id} recorded out of order; next expected is {}",
                self.len()
            ))),
            std::cmp::Ordering::Equal => {
                let p = hyper.prior_of(&TaskDescriptor::new(task_id, hyper.num_tasks())?)?;
                if !p.is_finite() {
                    return Err(Error::Numeric(format!("prior of task {task_id} is not finite")));
                }
                self.priors.push(p);
                Ok(())
            }
        }
    }
}

/// Mean of the means and mean of the variances (re-expressed as log-variance).
pub fn aggregate_priors<'a>(priors: impl IntoIterator<Item = &'a TaskPrior>) -> Result<TaskPrior> {
    let priors: Vec<&TaskPrior> = priors.into_iter().collect();
    let Some(first) = priors.first() else {
        return Err(Error::Contract("cannot aggregate an empty prior store".into()));
    };
    let d = first.dim();
    if priors.iter().any(|p| p.dim() != d) {
        return Err(Error::shape("aggregate_priors", "priors of differing dimension"));
    }
    let k = priors.len() as f64;
    let mu = (0..d).map(|i| priors.iter().map(|p| p.mu[i]).sum::<f64>() / k).collect();
    let log_var = (0..d)
        .map(|i| (priors.iter().map(|p| p.log_var[i].exp()).sum::<f64>() / k).ln())
        .collect();
    Ok(Gaussian { mu, log_var })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsolidationConfig {
    /// Pseudo-models decoded per task per replay pass.
    pub pseudo_models: usize,
    /// Replay passes over the stored tasks after each hypernetwork epoch.
    pub passes: usize,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        Self {
            pseudo_models: 5,
            passes: 1,
        }
    }
}

/// What consolidation touched, in visiting order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConsolidationReport {
    /// `(pass, task, decodes)` per visit.
    pub visits: Vec<(usize, usize, usize)>,
    pub steps: usize,
}

impl ConsolidationReport {
    pub fn decodes(&self) -> usize {
        self.visits.iter().map(|v| v.2).sum()
    }

    pub fn passes(&self) -> usize {
        self.visits.iter().map(|v| v.0 + 1).max().unwrap_or(0)
    }
}

fn check_store(store: &PriorStore, tasks: usize) -> Result<()> {
    if store.is_empty() {
        return Err(Error::Contract("consolidation needs at least one stored prior".into()));
    }
    if tasks == 0 || tasks > store.len() {
        return Err(Error::Contract(format!("cannot replay {tasks} tasks from a store of {}", store.len())));
    }
    Ok(())
}

/// One replay pass: for each of the first `tasks` stored tasks in order, draw
/// one latent from its stored prior, decode the pseudo-models, then take one
/// ELBO step per pseudo-model chunk against that (frozen) prior. The prior
/// maps themselves are not updated.
fn replay_pass(
    hyper: &mut HyperParams,
    opt: &mut Optimizer,
    store: &PriorStore,
    tasks: usize,
    pseudo_models: usize,
    rng: &RngStream,
    report: &mut ConsolidationReport,
) -> Result<()> {
    let pass = report.passes();
    for (j, prior) in store.iter().take(tasks) {
        let code = TaskDescriptor::new(j, hyper.num_tasks())?.code();
        let task_rng = rng.child("task", j as u64);
        let z = prior.sample(&mut task_rng.derive_str("latent"));
        let pseudo = (0..pseudo_models)
            .map(|_| hyper.decode_all(&z, &code))
            .collect::<Result<Vec<_>>>()?;
        report.visits.push((pass, j, pseudo.len()));
        let mut noise = task_rng.derive_str("noise");
        for (i, model) in pseudo.iter().enumerate() {
            let mut order: Vec<usize> = (0..model.len()).collect();
            task_rng.child("order", i as u64).shuffle(&mut order);
            for c in order {
                hyper.elbo_step(opt, Trainable::AllButPriors, &model.chunks[c], &code, c, Some(prior), &mut noise)?;
                report.steps += 1;
            }
        }
    }
    Ok(())
}

/// `cfg.passes` replay passes over the first `tasks` stored tasks.
pub fn consolidate(
    hyper: &mut HyperParams,
    store: &PriorStore,
    tasks: usize,
    cfg: &ConsolidationConfig,
    hyper_cfg: &HyperConfig,
    rng: &RngStream,
) -> Result<ConsolidationReport> {
    check_store(store, tasks)?;
    let mut report = ConsolidationReport::default();
    if cfg.pseudo_models == 0 {
        return Ok(report);
    }
    let mut opt = Optimizer::new(hyper_cfg.optimizer, hyper_cfg.lr, hyper.trainable(Trainable::AllButPriors));
    for p in 0..cfg.passes {
        replay_pass(hyper, &mut opt, store, tasks, cfg.pseudo_models, &rng.child("pass", p as u64), &mut report)?;
    }
    Ok(report)
}

/// Outcome of [`learn_task`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskLearnReport {
    pub train: HyperTrainReport,
    pub replay: ConsolidationReport,
}

/// Teach the hypernetwork a new task while consolidating the old ones.
///
/// Each epoch over the new task's chunks is followed by `cfg.passes` replay
/// passes over the tasks already in `store`. The new task's prior is then
/// recorded and a closing set of passes replays every task including it.
pub fn learn_task(
    hyper: &mut HyperParams,
    store: &mut PriorStore,
    models: &[ChunkSet],
    task: &TaskDescriptor,
    hyper_cfg: &HyperConfig,
    cfg: &ConsolidationConfig,
    rng: &RngStream,
) -> Result<TaskLearnReport> {
    if task.id != store.len() {
        return Err(Error::Contract(format!(
            "task {} arrived but the prior store expects task {}",
            task.id,
            store.len()
        )));
    }
    check_models(hyper, models)?;
    let mut report = TaskLearnReport::default();
    let mut fit_opt = Optimizer::new(hyper_cfg.optimizer, hyper_cfg.lr, hyper.trainable(Trainable::All));
    let mut replay_opt = Optimizer::new(hyper_cfg.optimizer, hyper_cfg.lr, hyper.trainable(Trainable::AllButPriors));
    let fit_rng = rng.derive_str("fit");
    let replay_rng = rng.derive_str("replay");
    let mut pass = 0u64;
    let mut replay = |hyper: &mut HyperParams, store: &PriorStore, report: &mut ConsolidationReport| -> Result<()> {
        if cfg.pseudo_models == 0 {
            return Ok(());
        }
        for _ in 0..cfg.passes {
            replay_pass(hyper, &mut replay_opt, store, store.len(), cfg.pseudo_models, &replay_rng.child("pass", pass), report)?;
            pass += 1;
        }
        Ok(())
    };
    for epoch in 0..hyper_cfg.epochs {
        fit_epoch(hyper, &mut fit_opt, models, task, epoch, &fit_rng, &mut report.train)?;
        if !store.is_empty() {
            replay(hyper, store, &mut report.replay)?;
        }
    }
    store.record_prior(task.id, hyper)?;
    replay(hyper, store, &mut report.replay)?;
    Ok(report)
}
