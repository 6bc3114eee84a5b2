#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

/// Box-Muller standard normal.
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Standard Gumbel draw.
pub fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = 1.0 - rng.random::<f64>();
    -(-u.ln()).ln()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1.0)
}

/// Random `(y, p, sigma)` with `J = 4`, `y` in [-2, 2], `p` in [0.5, 3],
/// `sigma` in [0.05, 2].
pub fn random_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, f64) {
    let y = (0..4).map(|_| uniform(rng, -2.0, 2.0)).collect();
    let p = (0..4).map(|_| uniform(rng, 0.5, 3.0)).collect();
    (y, p, uniform(rng, 0.05, 2.0))
}

/// Plain-logit shares `exp(y_j) / (1 + sum_k exp(y_k))`, computed directly.
pub fn logit(y: &[f64]) -> Vec<f64> {
    let denom = 1.0 + y.iter().map(|v| v.exp()).sum::<f64>();
    y.iter().map(|v| v.exp() / denom).collect()
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

use hdblp::market::MarketData;
use hdblp::shares::{compute_shares, QuadratureRule};
use nalgebra::{DMatrix, DVector};

/// Exactly linear markets: `z = Pi x + e`, `p = x bx + z bz`,
/// `y = x beta + alpha p`, shares at `sigma`. `e` is drawn unless `exact_z`.
pub struct LinearDesign {
    pub pi: DMatrix<f64>,
    pub bx: DVector<f64>,
    pub bz: DVector<f64>,
    pub beta: DVector<f64>,
    pub alpha: f64,
    pub sigma: f64,
}

impl LinearDesign {
    pub fn new(dx: usize, dz: usize) -> Self {
        let pi = DMatrix::from_fn(dz, dx, |i, k| if k == i + 1 { 0.5 } else if k == i + 2 { -0.25 } else { 0.0 });
        let bx = DVector::from_fn(dx, |k, _| if k == 0 { 1.5 } else if k == dx - 1 { 0.3 } else { 0.0 });
        let bz = DVector::from_element(dz, 0.4);
        let beta = DVector::from_fn(dx, |k, _| if k < 3 { 1.0 / (k + 1) as f64 } else { 0.0 });
        Self { pi, bx, bz, beta, alpha: -1.0, sigma: 0.8 }
    }

    pub fn markets(&self, t: usize, j: usize, exact_z: bool, quad: &QuadratureRule, seed: u64) -> Vec<MarketData> {
        let mut r = rng(seed);
        let (dz, dx) = self.pi.shape();
        (0..t)
            .map(|_| {
                let x = DMatrix::from_fn(j, dx, |_, k| if k == 0 { 1.0 } else { uniform(&mut r, -1.0, 1.0) });
                let mut z = &x * self.pi.transpose();
                if !exact_z {
                    z += DMatrix::from_fn(j, dz, |_, _| uniform(&mut r, -1.0, 1.0));
                }
                let p = &x * &self.bx + &z * &self.bz;
                let y = &x * &self.beta + self.alpha * &p;
                let shares = compute_shares(y.as_slice(), p.as_slice(), self.sigma, quad).unwrap();
                MarketData::new(x, p.as_slice().to_vec(), z, shares).unwrap()
            })
            .collect()
    }
}

use hdblp::dgp::TruthRecord;
use hdblp::nuisance::{LambdaRecord, NuisanceFit};

/// Nuisance fit holding the true first-stage and structural coefficients.
pub fn true_fit(record: &TruthRecord, fold: Option<usize>) -> NuisanceFit {
    let beta = record.beta_vector();
    NuisanceFit {
        fold,
        pi_hat: record.pi_matrix(),
        beta_px: DVector::from_vec(record.beta_p.clone()),
        beta_pz: DVector::zeros(record.pi.len()),
        sigma_tilde: record.sigma,
        alpha_tilde: record.alpha,
        beta_tilde: beta.clone(),
        alpha_hat: record.alpha,
        beta_hat: beta,
        lambdas: LambdaRecord {
            pi: vec![0.0; record.pi.len()],
            p: 0.0,
            theta: 0.0,
            beta: 0.0,
        },
    }
}

/// Random unit-norm perturbation of `(beta, Pi)`.
pub fn random_direction(r: &mut ChaCha8Rng, dx: usize, dz: usize) -> (DVector<f64>, DMatrix<f64>) {
    let d = DVector::from_fn(dx, |_, _| normal(r));
    let m = DMatrix::from_fn(dz, dx, |_, _| normal(r));
    let norm = (d.norm_squared() + m.norm_squared()).sqrt();
    (d / norm, m / norm)
}
