//! Alternating D/G optimization of the semi-supervised objective.

use serde::{Deserialize, Serialize};

use super::loss;
use super::model::{discriminator_forward, generator_forward, DiscNodes, ModelParams, Phase};
use crate::bench::data::{LabelledSet, UnlabelledSet};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Graph, NodeId, Optimizer, OptimizerKind, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Include the unlabelled source term L_s^U in the D objective.
    pub use_unlabelled: bool,
    pub generator_loss: GeneratorLoss,
}

/// Source term used in the G step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorLoss {
    /// Minimize `log(1 - D(G(z)))`, the literal minimax form.
    Minimax,
    /// Maximize `log D(G(z))` instead; same fixed point, stronger early gradients.
    #[default]
    NonSaturating,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            use_unlabelled: true,
            generator_loss: GeneratorLoss::NonSaturating,
        }
    }
}

impl GanTrainConfig {
    fn optimizer_kind(&self) -> OptimizerKind {
        OptimizerKind::Adam {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    /// The step count does not depend on `use_unlabelled`, so ablations train
    /// for the same number of updates.
    pub fn steps_per_epoch(&self, labelled: usize, unlabelled: usize) -> usize {
        let n = labelled.max(unlabelled);
        if n == 0 || self.batch_size == 0 {
            0
        } else {
            n.div_ceil(self.batch_size)
        }
    }
}

/// Extra term added to the D loss (used for the EWC baseline).
pub trait DiscriminatorPenalty: Sync {
    fn build(&self, g: &mut Graph, nodes: &DiscNodes) -> Result<NodeId>;
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    /// Component values of the final D step.
    pub last: loss::LossComponents,
}

/// Endless reshuffled pass over `0..n`.
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: RngStream,
}

impl Cycler {
    fn new(n: usize, mut rng: RngStream) -> Self {
        let order = rng.permutation(n);
        Self { order, pos: 0, rng }
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        if self.order.is_empty() {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Train `params` in place on labelled and unlabelled data.
///
/// `classes` is the label set fake images are conditioned on; it must be
/// non-empty whenever there is anything to train on.
pub fn train_semi_acgan(
    params: &mut ModelParams,
    labelled: &LabelledSet,
    unlabelled: &UnlabelledSet,
    classes: &[usize],
    cfg: &GanTrainConfig,
    penalty: Option<&dyn DiscriminatorPenalty>,
    rng: &RngStream,
) -> Result<TrainSummary> {
    let steps_per_epoch = cfg.steps_per_epoch(labelled.len(), unlabelled.len());
    let total = cfg.epochs * steps_per_epoch;
    let mut summary = TrainSummary::default();
    if total == 0 {
        return Ok(summary);
    }
    if classes.is_empty() {
        return Err(Error::Config("no classes to condition the generator on".into()));
    }
    if let Some(bad) = classes.iter().find(|&&c| c >= params.arch.num_classes) {
        return Err(Error::Config(format!("class {bad} outside the model's class head")));
    }

    let mut d_opt = Optimizer::new(cfg.optimizer_kind(), cfg.lr, params.discriminator.trainable());
    let mut g_opt = Optimizer::new(cfg.optimizer_kind(), cfg.lr, params.generator.trainable());

    let mut lab_cycle = Cycler::new(labelled.len(), rng.derive_str("labelled-order"));
    let mut unl_cycle = Cycler::new(
        if cfg.use_unlabelled { unlabelled.len() } else { 0 },
        rng.derive_str("unlabelled-order"),
    );

    for step in 0..total {
        let mut step_rng = rng.child("step", step as u64);
        let lab_idx = lab_cycle.take(if labelled.is_empty() { 0 } else { cfg.batch_size });
        let unl_idx = unl_cycle.take(cfg.batch_size);
        summary.last = d_step(params, labelled, unlabelled, &lab_idx, &unl_idx, classes, cfg, penalty, &mut d_opt, &mut step_rng)?;
        g_step(params, classes, cfg, !labelled.is_empty(), &mut g_opt, &mut step_rng)?;
        summary.steps += 1;
    }
    Ok(summary)
}

fn sample_fakes(
    params: &ModelParams,
    classes: &[usize],
    n: usize,
    rng: &mut RngStream,
) -> (Tensor, Vec<usize>) {
    let noise = rng.normal_tensor(&[n, params.arch.noise_dim]);
    let labels = (0..n).map(|_| classes[rng.below(classes.len())]).collect();
    (noise, labels)
}

#[allow(clippy::too_many_arguments)]
fn d_step(
    params: &mut ModelParams,
    labelled: &LabelledSet,
    unlabelled: &UnlabelledSet,
    lab_idx: &[usize],
    unl_idx: &[usize],
    classes: &[usize],
    cfg: &GanTrainConfig,
    penalty: Option<&dyn DiscriminatorPenalty>,
    opt: &mut Optimizer,
    rng: &mut RngStream,
) -> Result<loss::LossComponents> {
    let arch = params.arch;
    let mut g = Graph::new();
    let dn = params.discriminator.bind(&mut g, true);
    let gn = params.generator.bind(&mut g, false);

    let (noise, y_fake) = sample_fakes(params, classes, cfg.batch_size, rng);
    let noise = g.constant(noise);
    let (fake, _) = generator_forward(&mut g, &arch, &params.generator, &gn, noise, &y_fake, true)?;

    let (nl, nu) = (lab_idx.len(), unl_idx.len());
    let mut comps = loss::LossComponents::default();
    let mut class_term = None;
    let mut source_lab = None;
    let mut source_unl = None;

    let mut dropout_rng = rng.derive_str("d-dropout");
    let fake_out = discriminator_forward(&mut g, &arch, &params.discriminator, &dn, fake, Phase::Train(&mut dropout_rng))?;
    let p_fake_is_fake = loss::complement(&mut g, fake_out.p_source)?;

    if nl + nu > 0 {
        let mut real = labelled.batch(lab_idx).map(Tensor::into_data).unwrap_or_default();
        if nu > 0 {
            real.extend(unlabelled.batch(unl_idx)?.into_data());
        }
        let img = arch.image;
        let real = g.constant(Tensor::new(vec![nl + nu, img.channels, img.height, img.width], real)?);
        let out = discriminator_forward(&mut g, &arch, &params.discriminator, &dn, real, Phase::Train(&mut dropout_rng))?;
        if let Some(stats) = &out.bn_stats {
            params.discriminator.bn.absorb(stats, arch.bn_momentum);
        }
        if nl > 0 {
            let src = g.slice_rows(out.p_source, 0, nl)?;
            let cls = g.slice_rows(out.p_class, 0, nl)?;
            let y_real = labelled.labels_of(lab_idx);
            source_lab = Some(loss::source_labelled(&mut g, src, p_fake_is_fake)?);
            class_term = Some(loss::class_labelled(&mut g, cls, &y_real, fake_out.p_class, &y_fake)?);
        }
        if nu > 0 {
            let src = g.slice_rows(out.p_source, nl, nl + nu)?;
            source_unl = Some(loss::source_unlabelled(&mut g, src)?);
        }
    }
    if source_lab.is_none() {
        source_lab = Some(loss::mean_log_prob(&mut g, p_fake_is_fake)?);
    }

    let mut objective = loss::d_objective(&mut g, class_term, source_lab, source_unl)?;
    if let Some(p) = penalty {
        let extra = p.build(&mut g, &dn)?;
        objective = g.add(objective, extra)?;
    }
    let read = |g: &Graph, n: Option<NodeId>| n.map_or(0.0, |n| g.value(n).data()[0]);
    comps.class_labelled = read(&g, class_term);
    comps.source_labelled = read(&g, source_lab);
    comps.source_unlabelled = read(&g, source_unl);

    let mut grads = g.gradients(objective)?;
    let grads: Vec<Tensor> = dn
        .trainable()
        .into_iter()
        .map(|id| grads.take(id).expect("trainable leaf"))
        .collect();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    opt.step(&mut params.discriminator.trainable_mut(), &grad_refs)?;
    Ok(comps)
}

fn g_step(
    params: &mut ModelParams,
    classes: &[usize],
    cfg: &GanTrainConfig,
    class_terms: bool,
    opt: &mut Optimizer,
    rng: &mut RngStream,
) -> Result<()> {
    let arch = params.arch;
    let mut g = Graph::new();
    let gn = params.generator.bind(&mut g, true);
    let dn = params.discriminator.bind(&mut g, false);

    let (noise, y_fake) = sample_fakes(params, classes, cfg.batch_size, rng);
    let noise = g.constant(noise);
    let (fake, stats) = generator_forward(&mut g, &arch, &params.generator, &gn, noise, &y_fake, true)?;
    for (bn, s) in [&mut params.generator.bn0, &mut params.generator.bn1].into_iter().zip(&stats) {
        bn.absorb(s, arch.bn_momentum);
    }
    let mut dropout_rng = rng.derive_str("g-dropout");
    let out = discriminator_forward(&mut g, &arch, &params.discriminator, &dn, fake, Phase::Train(&mut dropout_rng))?;

    // Real-data terms are constant with respect to G and are left out.
    let class = if class_terms {
        loss::class_term(&mut g, out.p_class, &y_fake)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let objective = match cfg.generator_loss {
        GeneratorLoss::Minimax => {
            let p_fake_is_fake = loss::complement(&mut g, out.p_source)?;
            let source = loss::mean_log_prob(&mut g, p_fake_is_fake)?;
            loss::g_objective(&mut g, class, source)?
        }
        GeneratorLoss::NonSaturating => {
            let fooled = loss::mean_log_prob(&mut g, out.p_source)?;
            let total = g.add(class, fooled)?;
            g.scale(total, -1.0)
        }
    };

    let mut grads = g.gradients(objective)?;
    let grads: Vec<Tensor> = gn
        .trainable()
        .into_iter()
        .map(|id| grads.take(id).expect("trainable leaf"))
        .collect();
    let grad_refs: Vec<&Tensor> = grads.iter().collect();
    opt.step(&mut params.generator.trainable_mut(), &grad_refs)?;
    Ok(())
}
