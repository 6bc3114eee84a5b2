//! Monte Carlo data-generating process with sparse, quartically decaying
//! nuisance coefficients and non-Gaussian first-stage errors.
//!
//! Per product `(j, t)`:
//!
//! ```text
//! x_1 = 1,  x_k = sqrt(3) U[-1, 1]            (k >= 2)
//! xi, eta_1, eta_2 ~ U[-1, 1]
//! eps_z = (1.34 (eta_1^2 - 1/3), 1.34 (eta_2^2 - 1/3), 0.86 eta_1, 0.86 eta_2)
//! u_p = xi + (x_2^2 - 1)/10 + (x_3^2 - 1)/5 + eta_1 + eta_2/2
//!       + (e^eta_1 - E e^eta)/5 + (e^eta_2 - E e^eta)/5
//! z = Pi_0 x + eps_z,  p = x' beta_p0 + u_p,  y = alpha_0 p + x' beta_0 + xi
//! ```
//!
//! and inside shares come from the random-coefficient logit at `sigma_0`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HdBlpError, Result};
use crate::market::MarketData;
use crate::shares::{compute_shares, QuadratureRule};

/// `E[exp(eta)]` for `eta ~ U[-1, 1]`, i.e. `sinh(1)` to six decimals.
pub const MEAN_EXP_UNIFORM: f64 = 1.175201;

/// Instruments the error design supports.
pub const MAX_INSTRUMENTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DgpConfig {
    pub markets: usize,
    pub products: usize,
    pub dim_x: usize,
    pub dim_z: usize,
    pub sigma: f64,
    pub alpha: f64,
    /// Multiplier on the structural error; 0 gives noiseless utilities.
    pub xi_scale: f64,
    pub quadrature_nodes: usize,
    pub seed: u64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        Self {
            markets: 50,
            products: 4,
            dim_x: 200,
            dim_z: 4,
            sigma: 1.0,
            alpha: -1.0,
            xi_scale: 1.0,
            quadrature_nodes: crate::shares::DEFAULT_NODES,
            seed: 0,
        }
    }
}

impl DgpConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| Err(HdBlpError::Config(msg));
        if self.markets == 0 || self.products == 0 {
            return err("markets and products must be positive".into());
        }
        if self.dim_z == 0 || self.dim_z > MAX_INSTRUMENTS {
            return err(format!(
                "dim_z must be between 1 and {MAX_INSTRUMENTS}, got {}",
                self.dim_z
            ));
        }
        // Pi_0 row i starts at column i and spans five entries; beta_p0 needs
        // its intercept plus four trailing columns distinct from x_2, x_3.
        let needed = (self.dim_z + 5).max(8);
        if self.dim_x < needed {
            return err(format!("dim_x must be at least {needed}, got {}", self.dim_x));
        }
        if !(self.sigma >= 0.0) || !self.sigma.is_finite() || !self.alpha.is_finite() {
            return err("sigma must be finite and nonnegative; alpha finite".into());
        }
        if !(self.xi_scale >= 0.0) || !self.xi_scale.is_finite() {
            return err("xi_scale must be finite and nonnegative".into());
        }
        if self.quadrature_nodes == 0 {
            return err("quadrature_nodes must be positive".into());
        }
        Ok(())
    }

    pub fn quadrature(&self) -> Result<QuadratureRule> {
        QuadratureRule::gauss_hermite(self.quadrature_nodes)
    }
}

/// Population coefficients of the design.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub sigma: f64,
    pub alpha: f64,
    pub beta: Vec<f64>,
    /// Indices of nonzero entries of `beta`.
    pub beta_support: Vec<usize>,
    /// Rows of `Pi_0`, one per instrument.
    pub pi: Vec<Vec<f64>>,
    pub beta_p: Vec<f64>,
}

impl TruthRecord {
    pub fn beta_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta)
    }

    pub fn pi_matrix(&self) -> DMatrix<f64> {
        let rows = self.pi.len();
        let cols = self.pi.first().map_or(0, |r| r.len());
        DMatrix::from_fn(rows, cols, |i, k| self.pi[i][k])
    }
}

/// `beta_0 = 2 (1, 1/4, 1/9, 1/16, 0, ...)`.
pub fn true_beta(dim_x: usize) -> Vec<f64> {
    let mut beta = vec![0.0; dim_x];
    for k in 0..4.min(dim_x) {
        beta[k] = 2.0 / ((k + 1) * (k + 1)) as f64;
    }
    beta
}

/// Row `i` (1-based) of `Pi_0`: `i` leading zeros, then `(1, 1/4, ..., 1/25) / 2`.
pub fn true_pi(dim_z: usize, dim_x: usize) -> Vec<Vec<f64>> {
    (1..=dim_z)
        .map(|i| {
            let mut row = vec![0.0; dim_x];
            for k in 0..5 {
                if i + k < dim_x {
                    row[i + k] = 0.5 / ((k + 1) * (k + 1)) as f64;
                }
            }
            row
        })
        .collect()
}

/// `beta_p0 = (1.2, 0, ..., 0, 1.2, 1.2, 1.2, 1.2)`.
pub fn true_beta_p(dim_x: usize) -> Vec<f64> {
    let mut beta = vec![0.0; dim_x];
    beta[0] = 1.2;
    for k in dim_x.saturating_sub(4)..dim_x {
        beta[k] = 1.2;
    }
    beta
}

pub fn truth_report(cfg: &DgpConfig) -> TruthRecord {
    let beta = true_beta(cfg.dim_x);
    let beta_support = beta
        .iter()
        .enumerate()
        .filter(|(_, b)| **b != 0.0)
        .map(|(k, _)| k)
        .collect();
    TruthRecord {
        sigma: cfg.sigma,
        alpha: cfg.alpha,
        beta,
        beta_support,
        pi: true_pi(cfg.dim_z, cfg.dim_x),
        beta_p: true_beta_p(cfg.dim_x),
    }
}

/// Unobservables realised in one market.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketShocks {
    pub xi: Vec<f64>,
    /// J rows of d_z first-stage errors.
    pub eps_z: Vec<Vec<f64>>,
    pub u_p: Vec<f64>,
    /// Linear utility index at the truth.
    pub y: Vec<f64>,
}

/// Sidecar carried next to the observables for oracle estimators and scoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetTruth {
    pub config: DgpConfig,
    pub record: TruthRecord,
    pub shocks: Vec<MarketShocks>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub markets: Vec<MarketData>,
    pub truth: Option<DatasetTruth>,
}

impl Dataset {
    pub fn observables(&self) -> &[MarketData] {
        &self.markets
    }

    pub fn truth(&self) -> Result<&DatasetTruth> {
        self.truth
            .as_ref()
            .ok_or_else(|| HdBlpError::InvalidArgument("dataset carries no truth sidecar".into()))
    }
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(-1.0..=1.0)
}

/// Draw one dataset. Market `t` uses ChaCha stream `t` of `cfg.seed`, so
/// markets can be generated in any order with identical results.
pub fn generate_dataset(cfg: &DgpConfig) -> Result<Dataset> {
    cfg.validate()?;
    let quad = cfg.quadrature()?;
    let record = truth_report(cfg);
    let pi = record.pi_matrix();
    let sqrt3 = 3f64.sqrt();
    let (j, dx, dz) = (cfg.products, cfg.dim_x, cfg.dim_z);

    let mut markets = Vec::with_capacity(cfg.markets);
    let mut shocks = Vec::with_capacity(cfg.markets);
    for t in 0..cfg.markets {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(t as u64);
        let mut x = DMatrix::zeros(j, dx);
        let mut z = DMatrix::zeros(j, dz);
        let mut p = vec![0.0; j];
        let mut y = vec![0.0; j];
        let mut market_shocks = MarketShocks {
            xi: vec![0.0; j],
            eps_z: Vec::with_capacity(j),
            u_p: vec![0.0; j],
            y: vec![0.0; j],
        };
        for jj in 0..j {
            x[(jj, 0)] = 1.0;
            for k in 1..dx {
                x[(jj, k)] = sqrt3 * uniform(&mut rng);
            }
            let xi = cfg.xi_scale * uniform(&mut rng);
            let eta1 = uniform(&mut rng);
            let eta2 = uniform(&mut rng);
            let eps_all = [
                1.34 * (eta1 * eta1 - 1.0 / 3.0),
                1.34 * (eta2 * eta2 - 1.0 / 3.0),
                0.86 * eta1,
                0.86 * eta2,
            ];
            let eps = eps_all[..dz].to_vec();
            let x2 = x[(jj, 1)];
            let x3 = x[(jj, 2)];
            let u_p = xi
                + 0.1 * (x2 * x2 - 1.0)
                + 0.2 * (x3 * x3 - 1.0)
                + eta1
                + 0.5 * eta2
                + 0.2 * (eta1.exp() - MEAN_EXP_UNIFORM)
                + 0.2 * (eta2.exp() - MEAN_EXP_UNIFORM);
            let xrow = x.row(jj);
            let mut price = u_p;
            let mut index = xi;
            for k in 0..dx {
                price += xrow[k] * record.beta_p[k];
                index += xrow[k] * record.beta[k];
            }
            for i in 0..dz {
                let mut zi = eps[i];
                for k in 0..dx {
                    zi += pi[(i, k)] * xrow[k];
                }
                z[(jj, i)] = zi;
            }
            p[jj] = price;
            y[jj] = index + cfg.alpha * price;
            market_shocks.xi[jj] = xi;
            market_shocks.u_p[jj] = u_p;
            market_shocks.eps_z.push(eps);
        }
        market_shocks.y = y.clone();
        let shares = compute_shares(&y, &p, cfg.sigma, &quad)?;
        markets.push(MarketData::new(x, p, z, shares)?);
        shocks.push(market_shocks);
    }
    Ok(Dataset {
        markets,
        truth: Some(DatasetTruth {
            config: cfg.clone(),
            record,
            shocks,
        }),
    })
}
