//! Ensemble inference from the hypernetwork: sample members, re-estimate
//! their batch-norm statistics and fine-tune each on the exemplar buffer, vote.

use super::buffer::{BufferSlice, ExemplarBuffer};
use super::ensemble::{ModelCounter, VoteTally};
use crate::bench::config::FineTuneConfig;
use crate::bench::data::LabelledSet;
use crate::codec::OffsetCodec;
use crate::consolidation::{aggregate_priors, PriorStore};
use crate::error::{Error, Result};
use crate::gan::{predict_among, recalibrate_batch_norm, train_semi_acgan, ModelParams};
use crate::hypernet::{mixed_code, sample_model, HyperParams, TaskDescriptor, TaskMix, TaskPrior};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// A test set and the class ids predictions may choose from.
pub struct EvalTarget<'a> {
    pub test: &'a LabelledSet,
    pub allowed: Vec<usize>,
}

/// Everything inference reads but never changes.
pub struct Inference<'a> {
    pub hyper: &'a HyperParams,
    pub codec: &'a OffsetCodec,
    pub fine_tune: &'a FineTuneConfig,
    pub ensemble: usize,
    pub mix: TaskMix,
    pub counter: &'a ModelCounter,
}

/// Run the semi-supervised objective on the buffer contents. An empty buffer
/// or zero epochs leave the model untouched.
pub fn fine_tune(model: &mut ModelParams, slice: &BufferSlice, cfg: &FineTuneConfig, rng: &RngStream) -> Result<()> {
    if slice.labelled.is_empty() && slice.unlabelled.is_empty() {
        return Ok(());
    }
    train_semi_acgan(model, &slice.labelled, &slice.unlabelled, &slice.classes, &cfg.as_gan_config(), None, rng)?;
    Ok(())
}

struct Prepared {
    images: Tensor,
    allowed: Vec<usize>,
    tally: VoteTally,
}

fn prepare(targets: &[EvalTarget<'_>], num_classes: usize) -> Result<Vec<Prepared>> {
    targets
        .iter()
        .map(|t| {
            Ok(Prepared {
                images: t.test.all_images()?,
                allowed: t.allowed.clone(),
                tally: VoteTally::new(t.test.len(), num_classes),
            })
        })
        .collect()
}

impl Inference<'_> {
    /// Sample, fine-tune and vote with `ensemble` members drawn from `prior`,
    /// holding one member at a time.
    fn vote(&self, prior: &TaskPrior, code: &[f64], slice: &BufferSlice, targets: &mut [Prepared], rng: &RngStream) -> Result<()> {
        if self.ensemble == 0 {
            return Err(Error::Config("ensemble size must be at least 1".into()));
        }
        let calibration = if slice.len() >= 2 { Some(slice.images()?) } else { None };
        for e in 0..self.ensemble {
            let member_rng = rng.child("member", e as u64);
            let chunks = sample_model(self.hyper, prior, code, &mut member_rng.derive_str("latent"))?;
            let mut live = self.counter.hold(self.codec.decode(&chunks)?);
            drop(chunks);
            if let Some(images) = &calibration {
                recalibrate_batch_norm(live.params_mut(), images)?;
            }
            fine_tune(live.params_mut(), slice, self.fine_tune, &member_rng.derive_str("fine-tune"))?;
            for t in targets.iter_mut() {
                let preds = predict_among(&live, &t.images, Some(&t.allowed))?;
                t.tally.add(&preds)?;
            }
        }
        Ok(())
    }

    /// Predictions for every target from one ensemble sampled from the
    /// aggregate of all stored priors and fine-tuned on the whole buffer.
    pub fn task_agnostic(
        &self,
        priors: &PriorStore,
        buffer: &ExemplarBuffer,
        targets: &[EvalTarget<'_>],
        rng: &RngStream,
    ) -> Result<Vec<Vec<usize>>> {
        let prior = aggregate_priors(priors.iter().map(|(_, p)| p))?;
        let tasks: Vec<usize> = (0..priors.len()).collect();
        let code = mixed_code(&tasks, self.hyper.num_tasks(), self.mix)?;
        let mut prepared = prepare(targets, self.codec.arch().num_classes)?;
        self.vote(&prior, &code, &buffer.joint(), &mut prepared, rng)?;
        Ok(prepared.iter().map(|p| p.tally.winners()).collect())
    }

    /// `targets[j]` is predicted by an ensemble drawn from task `j`'s prior
    /// and fine-tuned on task `j`'s buffer slice.
    pub fn task_aware(
        &self,
        priors: &PriorStore,
        buffer: &ExemplarBuffer,
        targets: &[EvalTarget<'_>],
        rng: &RngStream,
    ) -> Result<Vec<Vec<usize>>> {
        let num_classes = self.codec.arch().num_classes;
        let mut out = Vec::with_capacity(targets.len());
        for (j, target) in targets.iter().enumerate() {
            let prior = priors
                .get(j)
                .ok_or_else(|| Error::Contract(format!("no stored prior for task {j}")))?;
            let slice = buffer
                .slice(j)
                .ok_or_else(|| Error::Contract(format!("no buffer slice for task {j}")))?;
            let code = TaskDescriptor::new(j, self.hyper.num_tasks())?.code();
            let mut prepared = prepare(std::slice::from_ref(target), num_classes)?;
            self.vote(prior, &code, slice, &mut prepared, &rng.child("task", j as u64))?;
            out.push(prepared[0].tally.winners());
        }
        Ok(out)
    }
}
