//! Semi-ACGAN base learner: class-conditional generator, discriminator with
//! validity and auxiliary-class heads, and its semi-supervised training.

pub mod loss;
pub mod model;
pub mod train;

pub use loss::LossComponents;
pub use model::{
    Architecture, BatchNormParams, DiscriminatorParams, GeneratorParams, ManifestEntry,
    ModelParams, NamedTensors,
};
pub use train::{train_semi_acgan, DiscriminatorPenalty, GanTrainConfig, GeneratorLoss, TrainSummary};

use crate::bench::data::LabelledSet;
use crate::bench::stream::SemiTask;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor};
use model::{discriminator_forward, generator_forward, Phase};

const EVAL_BATCH: usize = 256;

/// Images from the generator in evaluation mode (running batch-norm statistics).
pub fn generate(params: &ModelParams, noise: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let mut g = Graph::new();
    let gn = params.generator.bind(&mut g, false);
    let z = g.constant(noise.clone());
    let (img, _) = generator_forward(&mut g, &params.arch, &params.generator, &gn, z, labels, false)?;
    g.evaluate(img)
}

/// `(p_source, p_class)` per item, evaluation mode.
pub fn discriminate(params: &ModelParams, images: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (src, cls, _) = disc_eval(params, images)?;
    Ok((src, cls))
}

/// Class logits per item, evaluation mode.
pub fn class_logits(params: &ModelParams, images: &Tensor) -> Result<Tensor> {
    Ok(disc_eval(params, images)?.2)
}

fn disc_eval(params: &ModelParams, images: &Tensor) -> Result<(Vec<f64>, Tensor, Tensor)> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape("discriminate", format!("images {s:?}")));
    }
    let n = s[0];
    let per = images.numel() / n;
    let c = params.arch.num_classes;
    let (mut src, mut cls, mut logits) = (Vec::with_capacity(n), Vec::with_capacity(n * c), Vec::with_capacity(n * c));
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let mut shape = s.to_vec();
        shape[0] = end - start;
        let chunk = Tensor::new(shape, images.data()[start * per..end * per].to_vec())?;
        let mut g = Graph::new();
        let dn = params.discriminator.bind(&mut g, false);
        let x = g.constant(chunk);
        let out = discriminator_forward(&mut g, &params.arch, &params.discriminator, &dn, x, Phase::Eval)?;
        src.extend_from_slice(g.value(out.p_source).data());
        cls.extend_from_slice(g.value(out.p_class).data());
        logits.extend_from_slice(g.value(out.class_logits).data());
    }
    Ok((src, Tensor::new(vec![n, c], cls)?, Tensor::new(vec![n, c], logits)?))
}

/// Replace the discriminator's running batch-norm statistics with those of
/// `images`, observed in one pass without dropout.
///
/// Decoded weights only approximate a trained model, and its stored running
/// statistics rarely match the activations the approximate trunk produces.
pub fn recalibrate_batch_norm(params: &mut ModelParams, images: &Tensor) -> Result<()> {
    if images.shape().first().copied().unwrap_or(0) < 2 {
        return Err(Error::Data("batch-norm recalibration needs at least two images".into()));
    }
    let mut g = Graph::new();
    let dn = params.discriminator.bind(&mut g, false);
    let x = g.constant(images.clone());
    let out = discriminator_forward(&mut g, &params.arch, &params.discriminator, &dn, x, Phase::Statistics)?;
    let stats = out.bn_stats.expect("statistics phase reports batch statistics");
    params.discriminator.bn.absorb(&stats, 1.0);
    Ok(())
}

/// Index of the largest score among `allowed` (or all columns); ties go to the lowest id.
pub fn argmax_rows(scores: &Tensor, allowed: Option<&[usize]>) -> Vec<usize> {
    let cols = scores.shape()[1];
    let all: Vec<usize> = (0..cols).collect();
    let mut candidates = allowed.unwrap_or(&all).to_vec();
    candidates.sort_unstable();
    scores
        .data()
        .chunks(cols)
        .map(|row| {
            let mut best = candidates[0];
            for &c in &candidates[1..] {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Predicted class per image: argmax of the auxiliary head, ties to the lowest id.
pub fn predict(params: &ModelParams, images: &Tensor) -> Result<Vec<usize>> {
    predict_among(params, images, None)
}

/// Like [`predict`] but restricted to the `allowed` class ids.
pub fn predict_among(params: &ModelParams, images: &Tensor, allowed: Option<&[usize]>) -> Result<Vec<usize>> {
    let logits = class_logits(params, images)?;
    Ok(argmax_rows(&logits, allowed))
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Accuracy of `params` on a labelled set.
pub fn evaluate(params: &ModelParams, set: &LabelledSet, allowed: Option<&[usize]>) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let preds = predict_among(params, &set.all_images()?, allowed)?;
    Ok(accuracy(&preds, &set.labels))
}

/// Train a base model for one task starting from `init`.
pub fn train_base(task: &SemiTask, init: &ModelParams, cfg: &GanTrainConfig, rng: &RngStream) -> Result<ModelParams> {
    for &c in &task.classes {
        if !task.train_labelled.labels.contains(&c) {
            return Err(Error::Config(format!("class {c} has no labelled training example")));
        }
    }
    let mut params = init.clone();
    train_semi_acgan(&mut params, &task.train_labelled, &task.train_unlabelled, &task.classes, cfg, None, rng)?;
    Ok(params)
}
