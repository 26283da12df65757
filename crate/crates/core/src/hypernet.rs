//! Hypernetwork: a VAE over fixed-size weight chunks with one learnable
//! diagonal-Gaussian prior per task.
//!
//! Encoder input is `[chunk ‖ t ‖ e_c]` and decoder input `[z ‖ t ‖ e_c]`, where
//! `t` is the task code and `e_c` a learned embedding of the chunk index.
//! Both sides have one tanh hidden layer.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::codec::ChunkSet;
use crate::error::{Error, FormatError, Result};
use crate::gan::{ManifestEntry, NamedTensors};
use crate::rng::RngStream;
use crate::tensor::{Graph, NodeId, Optimizer, OptimizerKind, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperConfig {
    pub latent_dim: usize,
    pub hidden: usize,
    pub chunk_size: usize,
    pub chunk_embed_dim: usize,
    pub init_scale: f64,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            latent_dim: 10,
            hidden: 30,
            chunk_size: 250,
            chunk_embed_dim: 8,
            init_scale: 0.05,
            epochs: 50,
            lr: 1.0,
            optimizer: OptimizerKind::adadelta(),
        }
    }
}

/// Identity of a task among `num_tasks`, used as a one-hot code.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub id: usize,
    pub num_tasks: usize,
}

impl TaskDescriptor {
    pub fn new(id: usize, num_tasks: usize) -> Result<Self> {
        if id >= num_tasks {
            return Err(Error::Contract(format!("task {id} outside 0..{num_tasks}")));
        }
        Ok(Self { id, num_tasks })
    }

    /// Parse a one-hot vector; anything else is rejected.
    pub fn from_code(code: &[f64]) -> Result<Self> {
        let ones: Vec<usize> = code.iter().enumerate().filter(|(_, &v)| v == 1.0).map(|(i, _)| i).collect();
        let zeros = code.iter().filter(|&&v| v == 0.0).count();
        if ones.len() != 1 || zeros + 1 != code.len() {
            return Err(Error::Contract(format!("task code {code:?} is not one-hot")));
        }
        Self::new(ones[0], code.len())
    }

    pub fn code(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_tasks];
        v[self.id] = 1.0;
        v
    }
}

/// How several one-hot task codes combine into one decoder input when the
/// task is unknown.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskMix {
    /// Mean of the one-hot codes (entries sum to 1).
    Mean,
    /// Indicator of every listed task (entries are 0 or 1).
    #[default]
    Indicator,
}

/// Combine the given tasks' one-hot codes.
pub fn mixed_code(tasks: &[usize], num_tasks: usize, mix: TaskMix) -> Result<Vec<f64>> {
    if tasks.is_empty() {
        return Err(Error::Contract("mixed task code needs at least one task".into()));
    }
    let weight = match mix {
        TaskMix::Mean => 1.0 / tasks.len() as f64,
        TaskMix::Indicator => 1.0,
    };
    let mut v = vec![0.0; num_tasks];
    for &t in tasks {
        let slot = v
            .get_mut(t)
            .ok_or_else(|| Error::Contract(format!("task {t} outside 0..{num_tasks}")))?;
        *slot = weight;
    }
    Ok(v)
}

/// Diagonal Gaussian given by mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

pub type LatentPosterior = Gaussian;
pub type TaskPrior = Gaussian;

impl Gaussian {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().chain(&self.log_var).all(|v| v.is_finite())
    }

    /// `mu + exp(log_var / 2) * eps`.
    pub fn reparameterize(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.dim() {
            return Err(Error::shape("reparameterize", format!("eps has {} entries, latent {}", eps.len(), self.dim())));
        }
        Ok(self
            .mu
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect())
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let eps: Vec<f64> = (0..self.dim()).map(|_| rng.normal()).collect();
        self.reparameterize(&eps).expect("eps sized to the latent")
    }

    /// Log density at `x`.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        self.mu
            .iter()
            .zip(&self.log_var)
            .zip(x)
            .map(|((m, lv), x)| -0.5 * ((2.0 * PI).ln() + lv + (x - m).powi(2) / lv.exp()))
            .sum()
    }
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_gaussians(q: &Gaussian, p: &Gaussian) -> Result<f64> {
    if q.dim() != p.dim() || q.log_var.len() != q.dim() || p.log_var.len() != p.dim() {
        return Err(Error::shape("kl_gaussians", format!("dims {} and {}", q.dim(), p.dim())));
    }
    Ok((0..q.dim())
        .map(|d| {
            let (mq, lq, mp, lp) = (q.mu[d], q.log_var[d], p.mu[d], p.log_var[d]);
            0.5 * (lp - lq) + (lq.exp() + (mq - mp).powi(2)) / (2.0 * lp.exp()) - 0.5
        })
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub enc_w: Tensor,
    pub enc_b: Tensor,
    pub mu_w: Tensor,
    pub mu_b: Tensor,
    pub lv_w: Tensor,
    pub lv_b: Tensor,
    pub dec_w: Tensor,
    pub dec_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
    /// `W_μ`, one row per task.
    pub prior_mu: Tensor,
    /// `W_Σ`, one row of log-variances per task.
    pub prior_log_var: Tensor,
    pub chunk_emb: Tensor,
}

impl NamedTensors for HyperParams {
    fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("enc.hidden.weight", &self.enc_w),
            ("enc.hidden.bias", &self.enc_b),
            ("enc.mu.weight", &self.mu_w),
            ("enc.mu.bias", &self.mu_b),
            ("enc.log_var.weight", &self.lv_w),
            ("enc.log_var.bias", &self.lv_b),
            ("dec.hidden.weight", &self.dec_w),
            ("dec.hidden.bias", &self.dec_b),
            ("dec.out.weight", &self.out_w),
            ("dec.out.bias", &self.out_b),
            ("prior.mu", &self.prior_mu),
            ("prior.log_var", &self.prior_log_var),
            ("chunk_embedding", &self.chunk_emb),
        ]
    }

    fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("enc.hidden.weight", &mut self.enc_w),
            ("enc.hidden.bias", &mut self.enc_b),
            ("enc.mu.weight", &mut self.mu_w),
            ("enc.mu.bias", &mut self.mu_b),
            ("enc.log_var.weight", &mut self.lv_w),
            ("enc.log_var.bias", &mut self.lv_b),
            ("dec.hidden.weight", &mut self.dec_w),
            ("dec.hidden.bias", &mut self.dec_b),
            ("dec.out.weight", &mut self.out_w),
            ("dec.out.bias", &mut self.out_b),
            ("prior.mu", &mut self.prior_mu),
            ("prior.log_var", &mut self.prior_log_var),
            ("chunk_embedding", &mut self.chunk_emb),
        ]
    }
}

/// Which parameter groups an optimization pass may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    /// Encoder, decoder, priors and chunk embeddings.
    All,
    /// Everything except the prior maps.
    AllButPriors,
}

impl HyperParams {
    pub fn init(cfg: &HyperConfig, num_tasks: usize, num_chunks: usize, rng: &mut RngStream) -> Result<Self> {
        if [num_tasks, num_chunks, cfg.chunk_size, cfg.latent_dim, cfg.hidden, cfg.chunk_embed_dim].contains(&0) {
            return Err(Error::Config("hypernetwork dimensions must be positive".into()));
        }
        let s = cfg.init_scale;
        let mut u = |shape: &[usize]| rng.uniform_tensor(shape, -s, s);
        let enc_in = cfg.chunk_size + num_tasks + cfg.chunk_embed_dim;
        let dec_in = cfg.latent_dim + num_tasks + cfg.chunk_embed_dim;
        let (h, l) = (cfg.hidden, cfg.latent_dim);
        Ok(Self {
            enc_w: u(&[enc_in, h]),
            enc_b: u(&[h]),
            mu_w: u(&[h, l]),
            mu_b: u(&[l]),
            lv_w: u(&[h, l]),
            lv_b: u(&[l]),
            dec_w: u(&[dec_in, h]),
            dec_b: u(&[h]),
            out_w: u(&[h, cfg.chunk_size]),
            out_b: u(&[cfg.chunk_size]),
            prior_mu: u(&[num_tasks, l]),
            prior_log_var: Tensor::zeros(&[num_tasks, l]),
            chunk_emb: u(&[num_chunks, cfg.chunk_embed_dim]),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.named_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        z
    }

    pub fn num_tasks(&self) -> usize {
        self.prior_mu.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.prior_mu.shape()[1]
    }

    pub fn chunk_size(&self) -> usize {
        self.out_b.numel()
    }

    pub fn num_chunks(&self) -> usize {
        self.chunk_emb.shape()[0]
    }

    /// Rebuild from a checkpoint manifest and values.
    pub fn from_weights(w: &crate::codec::WeightVector) -> Result<Self> {
        let find = |name: &str| -> Result<&ManifestEntry> {
            w.manifest
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| FormatError::Manifest(format!("missing {name}")).into())
        };
        let prior = &find("prior.mu")?.shape;
        let out = &find("dec.out.bias")?.shape;
        let emb = &find("chunk_embedding")?.shape;
        let hidden = &find("enc.hidden.bias")?.shape;
        if prior.len() != 2 || out.len() != 1 || emb.len() != 2 || hidden.len() != 1 {
            return Err(FormatError::Manifest("unexpected hypernetwork tensor ranks".into()).into());
        }
        let cfg = HyperConfig {
            latent_dim: prior[1],
            hidden: hidden[0],
            chunk_size: out[0],
            chunk_embed_dim: emb[1],
            ..HyperConfig::default()
        };
        let mut h = Self::init(&cfg, prior[0], emb[0], &mut RngStream::new(0))?;
        w.write_into(&mut h)?;
        Ok(h)
    }

    fn check_task_code(&self, t: &[f64]) -> Result<()> {
        if t.len() != self.num_tasks() {
            return Err(Error::shape("task code", format!("{} entries for {} tasks", t.len(), self.num_tasks())));
        }
        Ok(())
    }

    fn check_chunk_id(&self, id: usize) -> Result<()> {
        if id >= self.num_chunks() {
            return Err(Error::Contract(format!("chunk id {id} outside 0..{}", self.num_chunks())));
        }
        Ok(())
    }

    /// `μ_t = W_μᵀt`, `log σ²_t = W_Σᵀt`.
    pub fn prior_of(&self, t: &TaskDescriptor) -> Result<TaskPrior> {
        if t.num_tasks != self.num_tasks() {
            return Err(Error::Contract(format!(
                "descriptor over {} tasks, hypernetwork holds {}",
                t.num_tasks,
                self.num_tasks()
            )));
        }
        Ok(Gaussian {
            mu: self.prior_mu.row(t.id).to_vec(),
            log_var: self.prior_log_var.row(t.id).to_vec(),
        })
    }

    pub fn encode(&self, chunk: &[f64], t: &[f64], chunk_id: usize) -> Result<LatentPosterior> {
        self.check_task_code(t)?;
        self.check_chunk_id(chunk_id)?;
        if chunk.len() != self.chunk_size() {
            return Err(Error::shape("encode", format!("chunk of {} values, expected {}", chunk.len(), self.chunk_size())));
        }
        let mut g = Graph::new();
        let n = self.bind(&mut g, None);
        let x = g.constant(Tensor::from_parts(vec![1, chunk.len()], chunk.to_vec()));
        let tc = g.constant(Tensor::from_parts(vec![1, t.len()], t.to_vec()));
        let (mu, lv) = n.encoder(&mut g, x, tc, &[chunk_id])?;
        Ok(Gaussian {
            mu: g.value(mu).data().to_vec(),
            log_var: g.value(lv).data().to_vec(),
        })
    }

    /// Decode one chunk.
    pub fn decode(&self, z: &[f64], t: &[f64], chunk_id: usize) -> Result<Vec<f64>> {
        self.check_chunk_id(chunk_id)?;
        Ok(self.decode_rows(z, t, &[chunk_id])?.into_data())
    }

    /// Decode every chunk of a model from a single latent code.
    pub fn decode_all(&self, z: &[f64], t: &[f64]) -> Result<ChunkSet> {
        let ids: Vec<usize> = (0..self.num_chunks()).collect();
        let out = self.decode_rows(z, t, &ids)?;
        let c = self.chunk_size();
        Ok(ChunkSet {
            chunk_size: c,
            chunks: out.data().chunks(c).map(<[f64]>::to_vec).collect(),
            pad_len: 0,
        })
    }

    fn decode_rows(&self, z: &[f64], t: &[f64], ids: &[usize]) -> Result<Tensor> {
        self.check_task_code(t)?;
        if z.len() != self.latent_dim() {
            return Err(Error::shape("decode", format!("latent of {} values, expected {}", z.len(), self.latent_dim())));
        }
        let rows = ids.len();
        let mut g = Graph::new();
        let n = self.bind(&mut g, None);
        let zc = g.constant(Tensor::from_parts(vec![rows, z.len()], z.repeat(rows)));
        let tc = g.constant(Tensor::from_parts(vec![rows, t.len()], t.repeat(rows)));
        let out = n.decoder(&mut g, zc, tc, ids)?;
        g.evaluate(out)
    }

    fn bind(&self, g: &mut Graph, trainable: Option<Trainable>) -> HyperNodes {
        let all = trainable.is_some();
        let priors = trainable == Some(Trainable::All);
        let mut leaf = |t: &Tensor, rg: bool| g.leaf(t.clone(), rg);
        HyperNodes {
            enc_w: leaf(&self.enc_w, all),
            enc_b: leaf(&self.enc_b, all),
            mu_w: leaf(&self.mu_w, all),
            mu_b: leaf(&self.mu_b, all),
            lv_w: leaf(&self.lv_w, all),
            lv_b: leaf(&self.lv_b, all),
            dec_w: leaf(&self.dec_w, all),
            dec_b: leaf(&self.dec_b, all),
            out_w: leaf(&self.out_w, all),
            out_b: leaf(&self.out_b, all),
            prior_mu: leaf(&self.prior_mu, priors),
            prior_log_var: leaf(&self.prior_log_var, priors),
            chunk_emb: leaf(&self.chunk_emb, all),
        }
    }

    /// Single-sample ELBO for one chunk with fixed noise `eps`.
    ///
    /// With `prior = None` the KL term uses `prior_of(t)` from the live prior
    /// maps (so `t` must be one-hot); otherwise the given prior is a constant.
    pub fn elbo(&self, chunk: &[f64], t: &[f64], chunk_id: usize, eps: &[f64], prior: Option<&TaskPrior>) -> Result<f64> {
        let mut g = Graph::new();
        let n = self.bind(&mut g, None);
        let e = self.elbo_graph(&mut g, &n, chunk, t, chunk_id, eps, prior)?;
        Ok(g.value(e.elbo).data()[0])
    }

    #[allow(clippy::too_many_arguments)]
    fn elbo_graph(
        &self,
        g: &mut Graph,
        n: &HyperNodes,
        chunk: &[f64],
        t: &[f64],
        chunk_id: usize,
        eps: &[f64],
        prior: Option<&TaskPrior>,
    ) -> Result<ElboNodes> {
        self.check_task_code(t)?;
        self.check_chunk_id(chunk_id)?;
        let (c, l) = (self.chunk_size(), self.latent_dim());
        if chunk.len() != c || eps.len() != l {
            return Err(Error::shape("elbo", format!("chunk {} (want {c}), eps {} (want {l})", chunk.len(), eps.len())));
        }
        let x = g.constant(Tensor::from_parts(vec![1, c], chunk.to_vec()));
        let tc = g.constant(Tensor::from_parts(vec![1, t.len()], t.to_vec()));
        let (mu, lv) = n.encoder(g, x, tc, &[chunk_id])?;
        let half_lv = g.scale(lv, 0.5);
        let std = g.exp(half_lv);
        let eps = g.constant(Tensor::from_parts(vec![1, l], eps.to_vec()));
        let noise = g.mul(std, eps)?;
        let z = g.add(mu, noise)?;
        let x_hat = n.decoder(g, z, tc, &[chunk_id])?;

        let (p_mu, p_lv) = match prior {
            Some(p) => {
                if p.dim() != l {
                    return Err(Error::shape("elbo", format!("prior of dim {}, latent {l}", p.dim())));
                }
                (
                    g.constant(Tensor::from_parts(vec![1, l], p.mu.clone())),
                    g.constant(Tensor::from_parts(vec![1, l], p.log_var.clone())),
                )
            }
            None => {
                TaskDescriptor::from_code(t)?;
                (g.matmul(tc, n.prior_mu)?, g.matmul(tc, n.prior_log_var)?)
            }
        };
        // KL = Σ ½[(lv_p − lv_q) + (exp(lv_q) + (μ_q − μ_p)²)·exp(−lv_p) − 1]
        let dlv = g.sub(p_lv, lv)?;
        let var_q = g.exp(lv);
        let dmu = g.sub(mu, p_mu)?;
        let dmu2 = g.mul(dmu, dmu)?;
        let num = g.add(var_q, dmu2)?;
        let neg_plv = g.scale(p_lv, -1.0);
        let inv_var_p = g.exp(neg_plv);
        let ratio = g.mul(num, inv_var_p)?;
        let inner = g.add(dlv, ratio)?;
        let kl_sum = g.sum(inner);
        let kl_half = g.scale(kl_sum, 0.5);
        let kl = g.add_scalar(kl_half, -0.5 * l as f64)?;

        let diff = g.sub(x, x_hat)?;
        let sq = g.mul(diff, diff)?;
        let sse = g.sum(sq);
        let rec = g.scale(sse, -0.5);
        let rec = g.add_scalar(rec, -0.5 * c as f64 * (2.0 * PI).ln())?;
        let elbo = g.sub(rec, kl)?;
        Ok(ElboNodes { elbo, kl, sse })
    }

    /// One optimizer step on `-ELBO` for a single chunk; returns the ELBO before the step.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn elbo_step(
        &mut self,
        opt: &mut Optimizer,
        which: Trainable,
        chunk: &[f64],
        t: &[f64],
        chunk_id: usize,
        prior: Option<&TaskPrior>,
        rng: &mut RngStream,
    ) -> Result<ElboValues> {
        let eps: Vec<f64> = (0..self.latent_dim()).map(|_| rng.normal()).collect();
        let mut g = Graph::new();
        let n = self.bind(&mut g, Some(which));
        let e = self.elbo_graph(&mut g, &n, chunk, t, chunk_id, &eps, prior)?;
        let loss = g.scale(e.elbo, -1.0);
        let values = ElboValues {
            elbo: g.value(e.elbo).data()[0],
            kl: g.value(e.kl).data()[0],
            sse: g.value(e.sse).data()[0],
        };
        let mut grads = g.gradients(loss)?;
        let ids = n.ids(which);
        let grads: Vec<Tensor> = ids.iter().map(|&id| grads.take(id).expect("trainable leaf")).collect();
        let refs: Vec<&Tensor> = grads.iter().collect();
        opt.step(&mut self.trainable_mut(which), &refs)?;
        Ok(values)
    }

    pub(crate) fn trainable(&self, which: Trainable) -> Vec<&Tensor> {
        let mut v = vec![
            &self.enc_w, &self.enc_b, &self.mu_w, &self.mu_b, &self.lv_w, &self.lv_b, &self.dec_w, &self.dec_b,
            &self.out_w, &self.out_b, &self.chunk_emb,
        ];
        if which == Trainable::All {
            v.extend([&self.prior_mu, &self.prior_log_var]);
        }
        v
    }

    fn trainable_mut(&mut self, which: Trainable) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.enc_w,
            &mut self.enc_b,
            &mut self.mu_w,
            &mut self.mu_b,
            &mut self.lv_w,
            &mut self.lv_b,
            &mut self.dec_w,
            &mut self.dec_b,
            &mut self.out_w,
            &mut self.out_b,
            &mut self.chunk_emb,
        ];
        if which == Trainable::All {
            v.extend([&mut self.prior_mu, &mut self.prior_log_var]);
        }
        v
    }

    /// ELBO gradient with respect to every tensor, for a fixed `eps` (used by checks).
    pub fn elbo_gradients(&self, chunk: &[f64], t: &[f64], chunk_id: usize, eps: &[f64]) -> Result<(f64, HyperParams)> {
        let mut g = Graph::new();
        let n = self.bind(&mut g, Some(Trainable::All));
        let e = self.elbo_graph(&mut g, &n, chunk, t, chunk_id, eps, None)?;
        let grads = g.gradients(e.elbo)?;
        let mut out = self.zeros_like();
        let ids = n.ids(Trainable::All);
        for (dst, id) in out.trainable_mut(Trainable::All).into_iter().zip(ids) {
            *dst = grads.of(id).clone();
        }
        Ok((g.value(e.elbo).data()[0], out))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ElboValues {
    pub elbo: f64,
    pub kl: f64,
    /// Squared reconstruction error of the chunk.
    pub sse: f64,
}

struct ElboNodes {
    elbo: NodeId,
    kl: NodeId,
    sse: NodeId,
}

struct HyperNodes {
    enc_w: NodeId,
    enc_b: NodeId,
    mu_w: NodeId,
    mu_b: NodeId,
    lv_w: NodeId,
    lv_b: NodeId,
    dec_w: NodeId,
    dec_b: NodeId,
    out_w: NodeId,
    out_b: NodeId,
    prior_mu: NodeId,
    prior_log_var: NodeId,
    chunk_emb: NodeId,
}

impl HyperNodes {
    fn ids(&self, which: Trainable) -> Vec<NodeId> {
        let mut v = vec![
            self.enc_w, self.enc_b, self.mu_w, self.mu_b, self.lv_w, self.lv_b, self.dec_w, self.dec_b, self.out_w,
            self.out_b, self.chunk_emb,
        ];
        if which == Trainable::All {
            v.extend([self.prior_mu, self.prior_log_var]);
        }
        v
    }

    fn with_context(&self, g: &mut Graph, head: NodeId, t: NodeId, ids: &[usize]) -> Result<NodeId> {
        let e = g.embedding(self.chunk_emb, ids)?;
        g.concat_cols(&[head, t, e])
    }

    fn encoder(&self, g: &mut Graph, x: NodeId, t: NodeId, ids: &[usize]) -> Result<(NodeId, NodeId)> {
        let input = self.with_context(g, x, t, ids)?;
        let h = g.linear(input, self.enc_w, self.enc_b)?;
        let h = g.tanh(h);
        Ok((g.linear(h, self.mu_w, self.mu_b)?, g.linear(h, self.lv_w, self.lv_b)?))
    }

    fn decoder(&self, g: &mut Graph, z: NodeId, t: NodeId, ids: &[usize]) -> Result<NodeId> {
        let input = self.with_context(g, z, t, ids)?;
        let h = g.linear(input, self.dec_w, self.dec_b)?;
        let h = g.tanh(h);
        g.linear(h, self.out_w, self.out_b)
    }
}

/// Summary of one hypernetwork training call.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HyperTrainReport {
    pub steps: usize,
    /// Mean per-value squared reconstruction error in each epoch.
    pub epoch_mse: Vec<f64>,
    /// Mean KL to the task prior in each epoch.
    pub epoch_kl: Vec<f64>,
}

/// Fit the hypernetwork to the chunked weights of one task's base models,
/// one chunk per step, in a seed-determined order each epoch.
pub fn train_hypernet(
    hyper: &mut HyperParams,
    models: &[ChunkSet],
    task: &TaskDescriptor,
    cfg: &HyperConfig,
    rng: &RngStream,
) -> Result<HyperTrainReport> {
    let mut report = HyperTrainReport::default();
    if cfg.epochs == 0 {
        return Ok(report);
    }
    check_models(hyper, models)?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, hyper.trainable(Trainable::All));
    for epoch in 0..cfg.epochs {
        fit_epoch(hyper, &mut opt, models, task, epoch, rng, &mut report)?;
    }
    Ok(report)
}

pub(crate) fn check_models(hyper: &HyperParams, models: &[ChunkSet]) -> Result<()> {
    let Some(first) = models.first() else {
        return Err(Error::Contract("hypernetwork training needs at least one model".into()));
    };
    for m in models {
        if m.chunk_size != hyper.chunk_size() || m.len() != hyper.num_chunks() || m.pad_len != first.pad_len {
            return Err(Error::Contract(format!(
                "model has {} chunks of {} (pad {}), hypernetwork expects {} of {}",
                m.len(),
                m.chunk_size,
                m.pad_len,
                hyper.num_chunks(),
                hyper.chunk_size()
            )));
        }
    }
    Ok(())
}

/// One pass over every chunk of every model; appends the epoch's statistics.
pub(crate) fn fit_epoch(
    hyper: &mut HyperParams,
    opt: &mut Optimizer,
    models: &[ChunkSet],
    task: &TaskDescriptor,
    epoch: usize,
    rng: &RngStream,
    report: &mut HyperTrainReport,
) -> Result<()> {
    let code = task.code();
    let mut order: Vec<(usize, usize)> = (0..models.len())
        .flat_map(|m| (0..hyper.num_chunks()).map(move |c| (m, c)))
        .collect();
    rng.child("order", epoch as u64).shuffle(&mut order);
    let mut noise = rng.child("noise", epoch as u64);
    let (mut sse, mut kl) = (0.0, 0.0);
    for &(m, c) in &order {
        let v = hyper.elbo_step(opt, Trainable::All, &models[m].chunks[c], &code, c, None, &mut noise)?;
        sse += v.sse;
        kl += v.kl;
        report.steps += 1;
    }
    report.epoch_mse.push(sse / (order.len() * hyper.chunk_size()) as f64);
    report.epoch_kl.push(kl / order.len() as f64);
    Ok(())
}

/// Mean per-value squared error between chunks and their deterministic
/// reconstruction through the posterior mean.
pub fn reconstruction_mse(hyper: &HyperParams, model: &ChunkSet, t: &[f64]) -> Result<f64> {
    let mut sse = 0.0;
    for (c, chunk) in model.chunks.iter().enumerate() {
        let q = hyper.encode(chunk, t, c)?;
        let x_hat = hyper.decode(&q.mu, t, c)?;
        sse += chunk.iter().zip(&x_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    Ok(sse / (model.len() * model.chunk_size) as f64)
}

/// Draw one latent from `prior` and decode every chunk with it.
pub fn sample_model(hyper: &HyperParams, prior: &TaskPrior, t: &[f64], rng: &mut RngStream) -> Result<ChunkSet> {
    if prior.dim() != hyper.latent_dim() {
        return Err(Error::shape("sample_model", format!("prior of dim {}, latent {}", prior.dim(), hyper.latent_dim())));
    }
    hyper.decode_all(&prior.sample(rng), t)
}

/// `count` independent draws; each uses its own child stream.
pub fn sample_models(hyper: &HyperParams, prior: &TaskPrior, t: &[f64], count: usize, rng: &RngStream) -> Result<Vec<ChunkSet>> {
    (0..count)
        .map(|i| sample_model(hyper, prior, t, &mut rng.child("sample", i as u64)))
        .collect()
}
