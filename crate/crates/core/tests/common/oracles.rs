//! Independent reference implementations the library is checked against.

use std::f64::consts::PI;

use metacl::rng::RngStream;

/// Diagonal Gaussian log density written out from the textbook formula.
fn log_normal(x: &[f64], mu: &[f64], log_var: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(log_var)
        .map(|((x, m), lv)| {
            let var = lv.exp();
            -0.5 * (2.0 * PI * var).ln() - (x - m) * (x - m) / (2.0 * var)
        })
        .sum()
}

/// Monte-Carlo estimate of `KL(q ‖ p)` = E_q[log q − log p] from `samples`
/// draws of q, taken as antithetic pairs `mu ± sigma * eps` to cancel the
/// odd part of the integrand.
pub fn kl_monte_carlo(
    q: (&[f64], &[f64]),
    p: (&[f64], &[f64]),
    samples: usize,
    rng: &mut RngStream,
) -> f64 {
    let d = q.0.len();
    let mut plus = vec![0.0; d];
    let mut minus = vec![0.0; d];
    let mut total = 0.0;
    for _ in 0..samples / 2 {
        for i in 0..d {
            let step = (0.5 * q.1[i]).exp() * rng.normal();
            plus[i] = q.0[i] + step;
            minus[i] = q.0[i] - step;
        }
        for x in [&plus, &minus] {
            total += log_normal(x, q.0, q.1) - log_normal(x, p.0, p.1);
        }
    }
    total / (2 * (samples / 2)) as f64
}

pub type MeanLogVar = (Vec<f64>, Vec<f64>);

/// A random pair of diagonal Gaussians of dimension 1 to 3 for the KL oracle.
pub fn random_gaussian_pair(rng: &mut RngStream) -> (MeanLogVar, MeanLogVar) {
    let dim = 1 + rng.below(3);
    let mut one = || {
        let mu: Vec<f64> = (0..dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let log_var: Vec<f64> = (0..dim).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
        (mu, log_var)
    };
    (one(), one())
}

/// Average accuracy by literal double loop over a lower-triangular matrix.
pub fn brute_avg_accuracy(a: &[Vec<f64>]) -> f64 {
    let k_max = a.len();
    let mut sum_k = 0.0;
    for k in 1..=k_max {
        let mut s = 0.0;
        for j in 1..=k {
            s += a[k - 1][j - 1];
        }
        sum_k += s / k as f64;
    }
    sum_k / k_max as f64
}

/// Average forgetting: for each k ≥ 2 and each earlier task j, the largest
/// drop from any earlier step l (j ≤ l < k) that had evaluated task j.
pub fn brute_avg_forgetting(a: &[Vec<f64>]) -> f64 {
    let k_max = a.len();
    if k_max < 2 {
        return 0.0;
    }
    let mut sum_k = 0.0;
    for k in 2..=k_max {
        let mut s = 0.0;
        for j in 1..k {
            let mut best = f64::NEG_INFINITY;
            for l in 1..k {
                if l >= j {
                    let drop = a[l - 1][j - 1] - a[k - 1][j - 1];
                    if drop > best {
                        best = drop;
                    }
                }
            }
            s += best;
        }
        sum_k += s / (k - 1) as f64;
    }
    sum_k / (k_max - 1) as f64
}

/// Random lower-triangular accuracy matrix with `k` rows.
pub fn random_matrix(k: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
    (1..=k).map(|r| (0..r).map(|_| rng.uniform()).collect()).collect()
}
