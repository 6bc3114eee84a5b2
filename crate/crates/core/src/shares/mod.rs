//! Random-coefficient logit shares.
//!
//! The taste shock on price is `b = sigma * node` with nodes drawn from a
//! [`QuadratureRule`] for a standard normal, so a consumer at node `k` has
//! logit utilities `y_j + p_j * sigma * node_k` against an outside good
//! normalised to zero. Every integrand is evaluated with a log-sum-exp shift.

mod quadrature;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HdBlpError, Result};

pub use quadrature::{QuadratureRule, DEFAULT_NODES};

/// Inside-good market shares: every entry in (0, 1), outside share positive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ShareVector(Vec<f64>);

impl ShareVector {
    pub fn new(shares: Vec<f64>) -> Result<Self> {
        if shares.is_empty() {
            return Err(HdBlpError::InvalidShares("empty share vector".into()));
        }
        if shares.iter().any(|s| !s.is_finite()) {
            return Err(HdBlpError::NonFinite("shares"));
        }
        if let Some(bad) = shares.iter().find(|&&s| s <= 0.0 || s >= 1.0) {
            return Err(HdBlpError::InvalidShares(format!(
                "share {bad} outside (0, 1)"
            )));
        }
        let inside: f64 = shares.iter().sum();
        if inside >= 1.0 {
            return Err(HdBlpError::InvalidShares(format!(
                "inside shares sum to {inside}, leaving no outside good"
            )));
        }
        Ok(Self(shares))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn outside(&self) -> f64 {
        1.0 - self.0.iter().sum::<f64>()
    }
}

impl TryFrom<Vec<f64>> for ShareVector {
    type Error = HdBlpError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ShareVector> for Vec<f64> {
    fn from(s: ShareVector) -> Self {
        s.0
    }
}

/// Linear utility index `y_j = x_j' beta + alpha p_j + xi_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityIndex(pub Vec<f64>);

impl UtilityIndex {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionOptions {
    /// Stop once `max_j |log s_j - log f_j(y)|` is at or below this value.
    pub tol: f64,
    pub max_iter: usize,
    /// Try a damped Newton step before each contraction step, keeping it only
    /// when it lowers the residual. Off means plain fixed-point iteration.
    pub newton: bool,
}

impl Default for InversionOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 1000,
            newton: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Inversion {
    pub y: UtilityIndex,
    pub iterations: usize,
    pub residual: f64,
}

fn check_inputs(what: &'static str, y: &[f64], p: &[f64], sigma: f64) -> Result<()> {
    if y.len() != p.len() {
        return Err(HdBlpError::dim("price vector", y.len(), p.len()));
    }
    if y.is_empty() {
        return Err(HdBlpError::InvalidArgument(format!("{what}: no products")));
    }
    if y.iter().chain(p).any(|v| !v.is_finite()) || !sigma.is_finite() {
        return Err(HdBlpError::NonFinite(what));
    }
    if sigma < 0.0 {
        return Err(HdBlpError::InvalidArgument(format!(
            "{what}: sigma must be nonnegative, got {sigma}"
        )));
    }
    Ok(())
}

/// Per-node choice probabilities for one consumer type, written to `probs`.
#[inline]
fn node_probabilities(y: &[f64], p: &[f64], shock: f64, probs: &mut [f64]) {
    let mut top = 0.0_f64;
    for ((u, &yj), &pj) in probs.iter_mut().zip(y).zip(p) {
        *u = yj + pj * shock;
        top = top.max(*u);
    }
    let mut denom = (-top).exp();
    for u in probs.iter_mut() {
        *u = (*u - top).exp();
        denom += *u;
    }
    for u in probs.iter_mut() {
        *u /= denom;
    }
}

/// Integrated shares without input validation; `out` and `scratch` have length J.
fn fill_shares(
    y: &[f64],
    p: &[f64],
    sigma: f64,
    quad: &QuadratureRule,
    out: &mut [f64],
    scratch: &mut [f64],
) {
    out.iter_mut().for_each(|v| *v = 0.0);
    if sigma == 0.0 {
        node_probabilities(y, p, 0.0, out);
        return;
    }
    for (&node, &w) in quad.nodes().iter().zip(quad.weights()) {
        node_probabilities(y, p, sigma * node, scratch);
        for (o, &s) in out.iter_mut().zip(scratch.iter()) {
            *o += w * s;
        }
    }
}

/// Market shares `f_s(p, y, sigma)` of the random-coefficient logit.
pub fn compute_shares(
    y: &[f64],
    p: &[f64],
    sigma: f64,
    quad: &QuadratureRule,
) -> Result<ShareVector> {
    check_inputs("compute_shares", y, p, sigma)?;
    let mut out = vec![0.0; y.len()];
    let mut scratch = vec![0.0; y.len()];
    fill_shares(y, p, sigma, quad, &mut out, &mut scratch);
    ShareVector::new(out).map_err(|e| {
        HdBlpError::InvalidShares(format!("shares underflowed for the given utilities: {e}"))
    })
}

/// One application of `T(x) = x + log s - log f_s(p, x, sigma)`.
pub fn contraction_step(
    x: &[f64],
    shares: &ShareVector,
    p: &[f64],
    sigma: f64,
    quad: &QuadratureRule,
) -> Result<Vec<f64>> {
    check_inputs("contraction_step", x, p, sigma)?;
    if shares.len() != x.len() {
        return Err(HdBlpError::dim("share vector", x.len(), shares.len()));
    }
    let mut fitted = vec![0.0; x.len()];
    let mut scratch = vec![0.0; x.len()];
    fill_shares(x, p, sigma, quad, &mut fitted, &mut scratch);
    Ok(x.iter()
        .zip(shares.as_slice())
        .zip(&fitted)
        .map(|((&xj, &sj), &fj)| xj + sj.ln() - fj.ln())
        .collect())
}

/// Recover the utility index that rationalises `shares` at dispersion `sigma`.
///
/// Starts from the plain-logit solution `log(s_j / s_0)`.
pub fn invert_shares(
    shares: &ShareVector,
    p: &[f64],
    sigma: f64,
    quad: &QuadratureRule,
    opts: &InversionOptions,
) -> Result<Inversion> {
    let s0 = shares.outside();
    let start: Vec<f64> = shares.as_slice().iter().map(|s| (s / s0).ln()).collect();
    invert_shares_from(shares, p, sigma, quad, opts, &start)
}

/// As [`invert_shares`], starting the iteration at `start`.
pub fn invert_shares_from(
    shares: &ShareVector,
    p: &[f64],
    sigma: f64,
    quad: &QuadratureRule,
    opts: &InversionOptions,
    start: &[f64],
) -> Result<Inversion> {
    check_inputs("invert_shares", start, p, sigma)?;
    if shares.len() != p.len() {
        return Err(HdBlpError::dim("share vector", p.len(), shares.len()));
    }
    if !(opts.tol > 0.0) {
        return Err(HdBlpError::InvalidArgument(format!(
            "inversion tolerance must be positive, got {}",
            opts.tol
        )));
    }
    let j = p.len();
    let log_s: Vec<f64> = shares.as_slice().iter().map(|s| s.ln()).collect();
    let mut y = start.to_vec();
    let mut fitted = vec![0.0; j];
    let mut scratch = vec![0.0; j];
    let mut gap = vec![0.0; j];
    let mut residual = f64::INFINITY;

    for iteration in 0..=opts.max_iter {
        fill_shares(&y, p, sigma, quad, &mut fitted, &mut scratch);
        residual = 0.0;
        for k in 0..j {
            gap[k] = log_s[k] - fitted[k].ln();
            residual = residual.max(gap[k].abs());
        }
        if !residual.is_finite() {
            break;
        }
        if residual <= opts.tol {
            return Ok(Inversion {
                y: UtilityIndex(y),
                iterations: iteration,
                residual,
            });
        }
        if iteration == opts.max_iter {
            break;
        }
        if opts.newton {
            if let Some(step) = newton_step(&y, p, sigma, quad, &fitted, &gap) {
                // Halve the Newton step until the sup-norm residual drops.
                let mut scale = 1.0;
                let mut accepted = false;
                for _ in 0..4 {
                    let trial: Vec<f64> =
                        y.iter().zip(&step).map(|(a, b)| a + scale * b).collect();
                    fill_shares(&trial, p, sigma, quad, &mut scratch, &mut gap);
                    let trial_residual = scratch
                        .iter()
                        .zip(&log_s)
                        .map(|(f, ls)| (ls - f.ln()).abs())
                        .fold(0.0, f64::max);
                    if trial_residual < residual {
                        y = trial;
                        accepted = true;
                        break;
                    }
                    scale *= 0.5;
                }
                if accepted {
                    continue;
                }
                // Fall back to a plain contraction step.
                for k in 0..j {
                    gap[k] = log_s[k] - fitted[k].ln();
                }
            }
        }
        for k in 0..j {
            y[k] += gap[k];
        }
    }
    Err(HdBlpError::InversionFailed {
        iterations: opts.max_iter,
        residual,
    })
}

/// Solve `(diag(f)^-1 df/dy) step = gap` for the log-share residual.
fn newton_step(
    y: &[f64],
    p: &[f64],
    sigma: f64,
    quad: &QuadratureRule,
    fitted: &[f64],
    gap: &[f64],
) -> Option<Vec<f64>> {
    let mut jac = jacobian_unchecked(y, p, sigma, quad);
    for (i, &f) in fitted.iter().enumerate() {
        for k in 0..jac.ncols() {
            jac[(i, k)] /= f;
        }
    }
    let rhs = DVector::from_column_slice(gap);
    jac.lu().solve(&rhs).map(|v| v.iter().copied().collect())
}

fn jacobian_unchecked(y: &[f64], p: &[f64], sigma: f64, quad: &QuadratureRule) -> DMatrix<f64> {
    let j = y.len();
    let mut jac = DMatrix::zeros(j, j);
    let mut probs = vec![0.0; j];
    let mut accumulate = |probs: &[f64], w: f64| {
        for a in 0..j {
            jac[(a, a)] += w * probs[a];
            for b in 0..j {
                jac[(a, b)] -= w * probs[a] * probs[b];
            }
        }
    };
    if sigma == 0.0 {
        node_probabilities(y, p, 0.0, &mut probs);
        accumulate(&probs, 1.0);
    } else {
        for (&node, &w) in quad.nodes().iter().zip(quad.weights()) {
            node_probabilities(y, p, sigma * node, &mut probs);
            accumulate(&probs, w);
        }
    }
    jac
}

/// `d f_s / d y` as a J x J matrix: entry (i, j) is `d f_i / d y_j`.
pub fn share_jacobian_y(
    y: &[f64],
    p: &[f64],
    sigma: f64,
    quad: &QuadratureRule,
) -> Result<DMatrix<f64>> {
    check_inputs("share_jacobian_y", y, p, sigma)?;
    Ok(jacobian_unchecked(y, p, sigma, quad))
}

/// `d f_s / d sigma` at fixed `y`.
pub fn share_derivative_sigma(
    y: &[f64],
    p: &[f64],
    sigma: f64,
    quad: &QuadratureRule,
) -> Result<Vec<f64>> {
    check_inputs("share_derivative_sigma", y, p, sigma)?;
    let j = y.len();
    let mut out = vec![0.0; j];
    let mut probs = vec![0.0; j];
    for (&node, &w) in quad.nodes().iter().zip(quad.weights()) {
        node_probabilities(y, p, sigma * node, &mut probs);
        let mean_price: f64 = probs.iter().zip(p).map(|(s, pk)| s * pk).sum();
        for k in 0..j {
            out[k] += w * probs[k] * (p[k] - mean_price) * node;
        }
    }
    Ok(out)
}

/// `d y(sigma) / d sigma` by the implicit function theorem at a known
/// solution `y` of `s = f_s(p, y, sigma)`.
pub fn dy_dsigma_at(y: &[f64], p: &[f64], sigma: f64, quad: &QuadratureRule) -> Result<Vec<f64>> {
    let jac = share_jacobian_y(y, p, sigma, quad)?;
    let ds = share_derivative_sigma(y, p, sigma, quad)?;
    let rhs = -DVector::from_vec(ds);
    let sol = jac
        .lu()
        .solve(&rhs)
        .ok_or(HdBlpError::Singular("share Jacobian"))?;
    if sol.iter().any(|v| !v.is_finite()) {
        return Err(HdBlpError::Singular("share Jacobian"));
    }
    Ok(sol.iter().copied().collect())
}

/// `d y(sigma) / d sigma` for observed shares, inverting first.
pub fn dy_dsigma(
    shares: &ShareVector,
    p: &[f64],
    sigma: f64,
    quad: &QuadratureRule,
    opts: &InversionOptions,
) -> Result<Vec<f64>> {
    let inv = invert_shares(shares, p, sigma, quad, opts)?;
    dy_dsigma_at(inv.y.as_slice(), p, sigma, quad)
}
