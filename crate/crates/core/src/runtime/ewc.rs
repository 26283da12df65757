//! Quadratic weight anchoring of the discriminator for the EWC baseline.

use serde::{Deserialize, Serialize};

use crate::bench::data::LabelledSet;
use crate::error::{Error, Result};
use crate::gan::model::{discriminator_forward, DiscNodes, Phase};
use crate::gan::{DiscriminatorPenalty, ModelParams};
use crate::tensor::{Graph, NodeId, Tensor};

/// Anchor weights and accumulated diagonal Fisher, both over the
/// discriminator's trainable tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EwcState {
    pub lambda: f64,
    pub anchor: Vec<Tensor>,
    pub fisher: Vec<Tensor>,
}

impl EwcState {
    /// Mean squared gradient of `log p(y | x)` over `data`, one item at a
    /// time with the discriminator in evaluation mode.
    pub fn fisher_diagonal(params: &ModelParams, data: &LabelledSet) -> Result<Vec<Tensor>> {
        let mut acc: Vec<Tensor> = params
            .discriminator
            .trainable()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        if data.is_empty() {
            return Ok(acc);
        }
        for i in 0..data.len() {
            let mut g = Graph::new();
            let dn = params.discriminator.bind(&mut g, true);
            let x = g.constant(data.batch(&[i])?);
            let out = discriminator_forward(&mut g, &params.arch, &params.discriminator, &dn, x, Phase::Eval)?;
            let p = g.gather(out.p_class, &[data.labels[i]])?;
            let p = g.clamp(p, crate::gan::loss::PROB_EPS, 1.0);
            let lp = g.log(p)?;
            let ll = g.sum(lp);
            let grads = g.gradients(ll)?;
            for (a, id) in acc.iter_mut().zip(dn.trainable()) {
                for (s, gv) in a.data_mut().iter_mut().zip(grads.of(id).data()) {
                    *s += gv * gv;
                }
            }
        }
        let n = data.len() as f64;
        for a in &mut acc {
            a.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        Ok(acc)
    }

    /// Anchor at `params` and add the Fisher estimated on `data` to what has
    /// been accumulated so far.
    pub fn absorb_task(previous: Option<EwcState>, lambda: f64, params: &ModelParams, data: &LabelledSet) -> Result<Self> {
        let fresh = Self::fisher_diagonal(params, data)?;
        let fisher = match previous {
            Some(p) => p
                .fisher
                .into_iter()
                .zip(fresh)
                .map(|(mut a, b)| {
                    a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
                    a
                })
                .collect(),
            None => fresh,
        };
        Ok(Self {
            lambda,
            anchor: params.discriminator.trainable().into_iter().cloned().collect(),
            fisher,
        })
    }

    /// `(λ/2) Σ F_i (θ_i − θ*_i)²` for the given discriminator tensors.
    pub fn penalty_value(&self, current: &[&Tensor]) -> Result<f64> {
        if current.len() != self.anchor.len() {
            return Err(Error::shape("ewc", format!("{} tensors, anchor has {}", current.len(), self.anchor.len())));
        }
        let mut total = 0.0;
        for ((c, a), f) in current.iter().zip(&self.anchor).zip(&self.fisher) {
            if c.shape() != a.shape() || a.shape() != f.shape() {
                return Err(Error::shape("ewc", format!("{:?} vs anchor {:?}", c.shape(), a.shape())));
            }
            for ((x, y), w) in c.data().iter().zip(a.data()).zip(f.data()) {
                total += w * (x - y) * (x - y);
            }
        }
        Ok(0.5 * self.lambda * total)
    }
}

impl DiscriminatorPenalty for EwcState {
    fn build(&self, g: &mut Graph, nodes: &DiscNodes) -> Result<NodeId> {
        let mut terms = Vec::new();
        for ((id, a), f) in nodes.trainable().into_iter().zip(&self.anchor).zip(&self.fisher) {
            let anchor = g.constant(a.clone());
            let diff = g.sub(id, anchor)?;
            let sq = g.mul(diff, diff)?;
            let w = g.constant(f.clone());
            let weighted = g.mul(sq, w)?;
            terms.push(g.sum(weighted));
        }
        let mut total = g.constant(Tensor::scalar(0.0));
        for t in terms {
            total = g.add(total, t)?;
        }
        Ok(g.scale(total, 0.5 * self.lambda))
    }
}
