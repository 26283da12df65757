//! Central finite-difference checks for the autodiff tape.
//!
//! Every case is reduced to a scalar by a fixed, non-uniform weighting of its
//! output so that no coordinate's gradient is trivially symmetric.

use metacl::hypernet::{HyperConfig, HyperParams, TaskDescriptor};
use metacl::gan::NamedTensors;
use metacl::rng::RngStream;
use metacl::tensor::{BatchNormMode, Graph, NodeId, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
pub const FLOOR: f64 = 1e-5;
/// Coordinates probed per input tensor; larger inputs are subsampled.
const PROBES: usize = 24;

pub type Build = fn(&mut Graph, &[NodeId]) -> NodeId;

pub struct OpCase {
    pub name: &'static str,
    pub shapes: &'static [&'static [usize]],
    pub build: Build,
    /// Moves random inputs into the op's smooth domain.
    pub prep: fn(f64) -> f64,
}

fn id(x: f64) -> f64 {
    x
}

fn away_from_zero(x: f64) -> f64 {
    x + 0.1f64.copysign(x)
}

fn positive(x: f64) -> f64 {
    x.abs() + 0.5
}

fn away_from_clamp_edges(x: f64) -> f64 {
    let y = away_from_zero(x);
    if (y.abs() - 0.5).abs() < 0.05 {
        y + 0.1f64.copysign(y)
    } else {
        y
    }
}

fn weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.3 * i as f64 + 0.7).sin() + 0.2).collect()
}

/// `Σ out ⊙ w` for a fixed weighting `w`.
pub fn scalarize(g: &mut Graph, out: NodeId) -> NodeId {
    let shape = g.shape(out).to_vec();
    let n = shape.iter().product();
    let w = g.constant(Tensor::new(shape, weights(n)).unwrap());
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

fn loss_value(build: Build, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &ids);
    let l = scalarize(&mut g, out);
    g.value(l).data()[0]
}

/// Relative error with a floor: a central difference of an O(10) loss carries
/// about 1e-10 of rounding noise at this step, so gradients below the floor
/// are compared absolutely against `TOLERANCE * FLOOR`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

/// Worst relative error over probed coordinates of one random instance.
pub fn check_op(case: &OpCase, rng: &mut RngStream) -> f64 {
    let inputs: Vec<Tensor> = case
        .shapes
        .iter()
        .map(|s| rng.normal_tensor(s).map(case.prep))
        .collect();
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(&mut g, &ids);
    let l = scalarize(&mut g, out);
    let grads = g.gradients(l).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.of(ids[k]).clone();
        for i in probe_indices(input.numel(), rng) {
            let mut plus = inputs.clone();
            plus[k].data_mut()[i] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[i] -= STEP;
            let numeric = (loss_value(case.build, &plus) - loss_value(case.build, &minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[i], numeric));
        }
    }
    worst
}

fn probe_indices(n: usize, rng: &mut RngStream) -> Vec<usize> {
    if n <= PROBES {
        (0..n).collect()
    } else {
        (0..PROBES).map(|_| rng.below(n)).collect()
    }
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase { name: "add", shapes: &[&[3, 4], &[3, 4]], build: |g, x| g.add(x[0], x[1]).unwrap(), prep: id },
        OpCase { name: "add_broadcast", shapes: &[&[3, 4], &[4]], build: |g, x| g.add(x[0], x[1]).unwrap(), prep: id },
        OpCase { name: "sub", shapes: &[&[2, 3, 2], &[3, 1]], build: |g, x| g.sub(x[0], x[1]).unwrap(), prep: id },
        OpCase { name: "mul", shapes: &[&[3, 4], &[1, 4]], build: |g, x| g.mul(x[0], x[1]).unwrap(), prep: id },
        OpCase { name: "add_scalar", shapes: &[&[5]], build: |g, x| g.add_scalar(x[0], 0.3).unwrap(), prep: id },
        OpCase { name: "matmul", shapes: &[&[3, 4], &[4, 5]], build: |g, x| g.matmul(x[0], x[1]).unwrap(), prep: id },
        OpCase { name: "linear", shapes: &[&[4, 3], &[3, 2], &[2]], build: |g, x| g.linear(x[0], x[1], x[2]).unwrap(), prep: id },
        OpCase {
            name: "conv2d_s1_p1",
            shapes: &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]],
            build: |g, x| g.conv2d(x[0], x[1], Some(x[2]), 1, 1).unwrap(),
            prep: id,
        },
        OpCase {
            name: "conv2d_s2_p0",
            shapes: &[&[2, 1, 6, 6], &[2, 1, 4, 4]],
            build: |g, x| g.conv2d(x[0], x[1], None, 2, 0).unwrap(),
            prep: id,
        },
        OpCase { name: "upsample_nearest", shapes: &[&[2, 2, 2, 3]], build: |g, x| g.upsample_nearest(x[0], 2).unwrap(), prep: id },
        OpCase {
            name: "batch_norm_train",
            shapes: &[&[4, 3, 2, 2], &[3], &[3]],
            build: |g, x| g.batch_norm(x[0], x[1], x[2], BatchNormMode::Train, 1e-5).unwrap().0,
            prep: id,
        },
        OpCase {
            name: "batch_norm_train_2d",
            shapes: &[&[5, 3], &[3], &[3]],
            build: |g, x| g.batch_norm(x[0], x[1], x[2], BatchNormMode::Train, 1e-5).unwrap().0,
            prep: id,
        },
        OpCase {
            name: "batch_norm_eval",
            shapes: &[&[3, 2, 2, 2], &[2], &[2]],
            build: |g, x| {
                let mean = Tensor::vector(vec![0.1, -0.2]);
                let var = Tensor::vector(vec![0.8, 1.3]);
                g.batch_norm(x[0], x[1], x[2], BatchNormMode::Eval { mean: &mean, var: &var }, 1e-5).unwrap().0
            },
            prep: id,
        },
        OpCase { name: "leaky_relu", shapes: &[&[4, 5]], build: |g, x| g.leaky_relu(x[0], 0.2), prep: away_from_zero },
        OpCase { name: "tanh", shapes: &[&[4, 5]], build: |g, x| g.tanh(x[0]), prep: id },
        OpCase { name: "sigmoid", shapes: &[&[4, 5]], build: |g, x| g.sigmoid(x[0]), prep: id },
        OpCase { name: "exp", shapes: &[&[4, 5]], build: |g, x| g.exp(x[0]), prep: id },
        OpCase { name: "scale", shapes: &[&[4, 5]], build: |g, x| g.scale(x[0], -1.7), prep: id },
        OpCase { name: "clamp", shapes: &[&[4, 5]], build: |g, x| g.clamp(x[0], -0.5, 0.5), prep: away_from_clamp_edges },
        OpCase { name: "log", shapes: &[&[4, 5]], build: |g, x| g.log(x[0]).unwrap(), prep: positive },
        OpCase { name: "softmax", shapes: &[&[3, 6]], build: |g, x| g.softmax(x[0]).unwrap(), prep: id },
        OpCase { name: "sum", shapes: &[&[3, 4]], build: |g, x| { let s = g.sum(x[0]); g.mul(s, s).unwrap() }, prep: id },
        OpCase { name: "mean", shapes: &[&[3, 4]], build: |g, x| { let s = g.mean(x[0]); g.mul(s, s).unwrap() }, prep: id },
        OpCase {
            name: "dropout",
            shapes: &[&[4, 6]],
            build: |g, x| {
                let mut rng = RngStream::new(11);
                g.dropout(x[0], 0.3, Some(&mut rng)).unwrap()
            },
            prep: id,
        },
        OpCase { name: "embedding", shapes: &[&[5, 3]], build: |g, x| g.embedding(x[0], &[4, 0, 4, 2]).unwrap(), prep: id },
        OpCase { name: "gather", shapes: &[&[4, 3]], build: |g, x| g.gather(x[0], &[2, 0, 1, 2]).unwrap(), prep: id },
        OpCase { name: "concat_cols", shapes: &[&[3, 2], &[3, 4]], build: |g, x| g.concat_cols(&[x[0], x[1], x[0]]).unwrap(), prep: id },
        OpCase { name: "slice_rows", shapes: &[&[5, 3]], build: |g, x| g.slice_rows(x[0], 1, 4).unwrap(), prep: id },
        OpCase { name: "reshape", shapes: &[&[2, 6]], build: |g, x| { let r = g.reshape(x[0], &[3, 4]).unwrap(); g.mul(r, r).unwrap() }, prep: id },
    ]
}

/// Worst relative error of the hypernetwork ELBO gradient on one random instance.
///
/// Uses a reduced architecture so every parameter tensor can be probed quickly.
pub fn check_elbo(rng: &mut RngStream) -> f64 {
    let cfg = HyperConfig {
        latent_dim: 3,
        hidden: 5,
        chunk_size: 7,
        chunk_embed_dim: 2,
        init_scale: 0.5,
        ..HyperConfig::default()
    };
    let (tasks, chunks) = (3, 4);
    let mut hyper = HyperParams::init(&cfg, tasks, chunks, rng).unwrap();
    for (_, t) in hyper.named_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    let chunk: Vec<f64> = (0..cfg.chunk_size).map(|_| rng.normal()).collect();
    let eps: Vec<f64> = (0..cfg.latent_dim).map(|_| rng.normal()).collect();
    let t = TaskDescriptor::new(rng.below(tasks), tasks).unwrap().code();
    let chunk_id = rng.below(chunks);

    let (_, grads) = hyper.elbo_gradients(&chunk, &t, chunk_id, &eps).unwrap();
    let grads: Vec<Tensor> = grads.named().into_iter().map(|(_, t)| t.clone()).collect();
    let elbo_at = |h: &HyperParams| h.elbo(&chunk, &t, chunk_id, &eps, None).unwrap();

    let mut worst: f64 = 0.0;
    let sizes: Vec<usize> = hyper.named().iter().map(|(_, t)| t.numel()).collect();
    for (k, &n) in sizes.iter().enumerate() {
        for i in probe_indices(n, rng) {
            let mut plus = hyper.clone();
            plus.named_mut()[k].1.data_mut()[i] += STEP;
            let mut minus = hyper.clone();
            minus.named_mut()[k].1.data_mut()[i] -= STEP;
            let numeric = (elbo_at(&plus) - elbo_at(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(grads[k].data()[i], numeric));
        }
    }
    worst
}
