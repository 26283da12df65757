//! The three Semi-ACGAN log-likelihood terms and the two player objectives.
//!
//! All terms are expectations of clamped log-probabilities, so each is ≤ 0.
//! The graph builders are the single implementation; the slice helpers just
//! run them over constants.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// `mean(log(clamp(p)))` over any non-empty tensor of probabilities.
pub fn mean_log_prob(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    if g.value(p).numel() == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let c = g.clamp(p, PROB_EPS, 1.0 - PROB_EPS);
    let l = g.log(c)?;
    Ok(g.mean(l))
}

/// `1 - p`, elementwise.
pub fn complement(g: &mut Graph, p: NodeId) -> Result<NodeId> {
    let one = g.constant(Tensor::scalar(1.0));
    g.sub(one, p)
}

/// L_s^L = E[log p(s=real | x_real)] + E[log p(s=fake | x_fake)].
pub fn source_labelled(g: &mut Graph, p_real_on_real: NodeId, p_fake_on_fake: NodeId) -> Result<NodeId> {
    let a = mean_log_prob(g, p_real_on_real)?;
    let b = mean_log_prob(g, p_fake_on_fake)?;
    g.add(a, b)
}

/// L_c^L = E[log p(y=ŷ | x_real)] + E[log p(y=ŷ | x_fake)].
pub fn class_labelled(
    g: &mut Graph,
    p_class_on_real: NodeId,
    y_real: &[usize],
    p_class_on_fake: NodeId,
    y_fake: &[usize],
) -> Result<NodeId> {
    let a = class_term(g, p_class_on_real, y_real)?;
    let b = class_term(g, p_class_on_fake, y_fake)?;
    g.add(a, b)
}

/// `E[log p(y=ŷ | x)]` for one batch.
pub fn class_term(g: &mut Graph, p_class: NodeId, labels: &[usize]) -> Result<NodeId> {
    if labels.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let picked = g.gather(p_class, labels)?;
    mean_log_prob(g, picked)
}

/// L_s^U = E[log p(s=real | u)]; unlabelled items have no class term.
pub fn source_unlabelled(g: &mut Graph, p_real_on_unlabelled: NodeId) -> Result<NodeId> {
    mean_log_prob(g, p_real_on_unlabelled)
}

/// Component values of one step, as maximands.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub class_labelled: f64,
    pub source_labelled: f64,
    pub source_unlabelled: f64,
}

impl LossComponents {
    /// D maximizes L_c^L + L_s^L + L_s^U.
    pub fn d_maximand(&self) -> f64 {
        self.class_labelled + self.source_labelled + self.source_unlabelled
    }

    /// G maximizes L_c^L - L_s^L.
    pub fn g_maximand(&self) -> f64 {
        self.class_labelled - self.source_labelled
    }

    /// Quantity handed to a minimizer for the D step.
    pub fn d_objective(&self) -> f64 {
        -self.d_maximand()
    }

    /// Quantity handed to a minimizer for the G step.
    pub fn g_objective(&self) -> f64 {
        -self.g_maximand()
    }
}

/// Minimized D loss from optional graph components (missing terms count as 0).
pub fn d_objective(
    g: &mut Graph,
    class_labelled: Option<NodeId>,
    source_labelled: Option<NodeId>,
    source_unlabelled: Option<NodeId>,
) -> Result<NodeId> {
    let terms: Vec<NodeId> = [class_labelled, source_labelled, source_unlabelled]
        .into_iter()
        .flatten()
        .collect();
    let total = sum_nodes(g, &terms)?;
    Ok(g.scale(total, -1.0))
}

/// Minimized G loss, `-(L_c^L - L_s^L)`.
pub fn g_objective(g: &mut Graph, class_labelled: NodeId, source_labelled: NodeId) -> Result<NodeId> {
    let m = g.sub(class_labelled, source_labelled)?;
    Ok(g.scale(m, -1.0))
}

fn sum_nodes(g: &mut Graph, terms: &[NodeId]) -> Result<NodeId> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(g.constant(Tensor::scalar(0.0)));
    };
    rest.iter().try_fold(first, |acc, &t| g.add(acc, t))
}

fn column(values: &[f64]) -> Result<Tensor> {
    if values.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Tensor::new(vec![values.len()], values.to_vec())
}

fn rows(values: &[Vec<f64>]) -> Result<Tensor> {
    let cols = values.first().map(Vec::len).ok_or_else(|| Error::Contract("empty batch".into()))?;
    if values.iter().any(|r| r.len() != cols) {
        return Err(Error::shape("class loss", "ragged probability rows"));
    }
    Tensor::new(vec![values.len(), cols], values.concat())
}

/// L_s^L over plain probability slices.
pub fn loss_source_labelled(p_real_on_real: &[f64], p_fake_on_fake: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(column(p_real_on_real)?);
    let b = g.constant(column(p_fake_on_fake)?);
    let l = source_labelled(&mut g, a, b)?;
    g.value(l).item()
}

/// L_c^L over plain probability rows.
pub fn loss_class_labelled(
    p_class_on_real: &[Vec<f64>],
    y_real: &[usize],
    p_class_on_fake: &[Vec<f64>],
    y_fake: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(rows(p_class_on_real)?);
    let b = g.constant(rows(p_class_on_fake)?);
    let l = class_labelled(&mut g, a, y_real, b, y_fake)?;
    g.value(l).item()
}

/// L_s^U over plain probabilities.
pub fn loss_source_unlabelled(p_real_on_unlabelled: &[f64]) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.constant(column(p_real_on_unlabelled)?);
    let l = source_unlabelled(&mut g, a)?;
    g.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_HALF: f64 = -std::f64::consts::LN_2;

    #[test]
    fn source_labelled_examples() {
        assert!(loss_source_labelled(&[1.0, 1.0], &[1.0]).unwrap().abs() < 1e-6);
        let v = loss_source_labelled(&[0.5], &[0.5]).unwrap();
        assert!((v - 2.0 * LN_HALF).abs() < 1e-12);
        assert!((v + 1.38629).abs() < 1e-5);
        let a = loss_source_labelled(&[0.3, 0.9], &[0.6]).unwrap();
        let b = loss_source_labelled(&[0.6], &[0.3, 0.9]).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn class_labelled_examples() {
        let onehot = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(loss_class_labelled(&onehot, &[1, 0], &onehot, &[1, 0]).unwrap().abs() < 1e-6);
        let uniform = vec![vec![0.5, 0.5]; 3];
        let v = loss_class_labelled(&uniform, &[0, 1, 1], &uniform, &[1, 0, 0]).unwrap();
        assert!((v - 2.0 * LN_HALF).abs() < 1e-12);
        let p = vec![vec![0.2, 0.8], vec![0.7, 0.3], vec![0.4, 0.6]];
        let rev: Vec<_> = p.iter().rev().cloned().collect();
        let a = loss_class_labelled(&p, &[1, 0, 0], &p, &[0, 1, 1]).unwrap();
        let b = loss_class_labelled(&rev, &[0, 0, 1], &rev, &[1, 1, 0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn source_unlabelled_examples() {
        assert!(loss_source_unlabelled(&[1.0]).unwrap().abs() < 1e-6);
        assert!((loss_source_unlabelled(&[0.5, 0.5]).unwrap() - LN_HALF).abs() < 1e-12);
        let p = [0.2, 0.7, 0.99];
        let first = loss_source_labelled(&p, &[1.0]).unwrap();
        assert!((loss_source_unlabelled(&p).unwrap() - first).abs() < 1e-6);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(loss_source_labelled(&[], &[0.5]).is_err());
        assert!(loss_source_unlabelled(&[]).is_err());
        assert!(loss_class_labelled(&[], &[], &[vec![1.0]], &[0]).is_err());
    }

    #[test]
    fn objectives_arithmetic() {
        let zero = LossComponents::default();
        assert_eq!(zero.d_objective(), 0.0);
        assert_eq!(zero.g_objective(), 0.0);
        let c = LossComponents {
            class_labelled: -1.0,
            source_labelled: -2.0,
            source_unlabelled: -3.0,
        };
        assert_eq!(c.d_maximand(), -6.0);
        assert_eq!(c.g_maximand(), 1.0);
        assert_eq!(c.d_objective(), 6.0);
        assert_eq!(c.g_objective(), -1.0);
    }

    #[test]
    fn graph_objectives_match_scalar_form() {
        let mut g = Graph::new();
        let lc = g.constant(Tensor::scalar(-1.0));
        let ls = g.constant(Tensor::scalar(-2.0));
        let lu = g.constant(Tensor::scalar(-3.0));
        let d = d_objective(&mut g, Some(lc), Some(ls), Some(lu)).unwrap();
        let gen = g_objective(&mut g, lc, ls).unwrap();
        assert_eq!(g.value(d).item().unwrap(), 6.0);
        assert_eq!(g.value(gen).item().unwrap(), -1.0);
    }
}
