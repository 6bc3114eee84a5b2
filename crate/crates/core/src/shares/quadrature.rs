use serde::{Deserialize, Serialize};

use crate::error::{HdBlpError, Result};

/// Default number of nodes for the taste-shock integral.
pub const DEFAULT_NODES: usize = 21;

/// Discrete probability measure used to integrate over the scalar taste shock.
///
/// Nodes are standard-normal abscissae; a rule is scaled by `sigma` at the
/// point of use so the same rule serves every value of the dispersion
/// parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn new(nodes: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(HdBlpError::InvalidArgument(
                "quadrature rule needs at least one node".into(),
            ));
        }
        if nodes.len() != weights.len() {
            return Err(HdBlpError::dim("quadrature weights", nodes.len(), weights.len()));
        }
        if nodes.iter().chain(weights.iter()).any(|v| !v.is_finite()) {
            return Err(HdBlpError::NonFinite("quadrature rule"));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(HdBlpError::InvalidArgument(
                "quadrature weights must be nonnegative".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(HdBlpError::InvalidArgument(format!(
                "quadrature weights sum to {total}, expected 1"
            )));
        }
        Ok(Self { nodes, weights })
    }

    /// Gauss-Hermite rule for a standard normal variable with `n` nodes.
    ///
    /// Nodes are the roots of the probabilists' Hermite polynomial `He_n`,
    /// located by Newton iteration from asymptotic starting values; weights
    /// are `n! / (n^2 He_{n-1}(x)^2)`, which integrate against N(0, 1).
    pub fn gauss_hermite(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(HdBlpError::InvalidArgument(
                "quadrature rule needs at least one node".into(),
            ));
        }
        if n > 150 {
            return Err(HdBlpError::InvalidArgument(format!(
                "{n} Gauss-Hermite nodes exceed the supported maximum of 150"
            )));
        }
        // Roots of the physicists' polynomial H_n, scaled by sqrt(2) below.
        let mut roots = vec![0.0; n];
        let half = n.div_ceil(2);
        let nf = n as f64;
        let mut z = 0.0_f64;
        for i in 0..half {
            z = match i {
                0 => (2.0 * nf + 1.0).sqrt() - 1.85575 * (2.0 * nf + 1.0).powf(-1.0 / 6.0),
                1 => z - 1.14 * nf.powf(0.426) / z,
                2 => 1.86 * z - 0.86 * roots[0],
                3 => 1.91 * z - 0.91 * roots[1],
                _ => 2.0 * z - roots[i - 2],
            };
            for _ in 0..100 {
                let (h, hprime) = physicists_hermite(n, z);
                let step = h / hprime;
                z -= step;
                if step.abs() <= 1e-15 * z.abs().max(1.0) {
                    break;
                }
            }
            roots[i] = z;
        }
        let mut nodes = Vec::with_capacity(n);
        for i in 0..n {
            let r = if i < half { roots[i] } else { -roots[n - 1 - i] };
            nodes.push(r * std::f64::consts::SQRT_2);
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        nodes.reverse();

        // log n! - 2 log n - 2 log|He_{n-1}(x)|, evaluated in logs for large n.
        let log_nfact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
        let mut weights: Vec<f64> = nodes
            .iter()
            .map(|&x| {
                let he_prev = probabilists_hermite(n - 1, x);
                (log_nfact - 2.0 * nf.ln() - 2.0 * he_prev.abs().ln()).exp()
            })
            .collect();
        // Enforce exact mirror symmetry before normalising.
        for i in 0..n / 2 {
            let avg = 0.5 * (weights[i] + weights[n - 1 - i]);
            weights[i] = avg;
            weights[n - 1 - i] = avg;
        }
        let total: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= total;
        }
        Self::new(nodes, weights)
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Integrate `f` against the rule.
    pub fn integrate(&self, mut f: impl FnMut(f64) -> f64) -> f64 {
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(&b, &w)| w * f(b))
            .sum()
    }
}

impl Default for QuadratureRule {
    fn default() -> Self {
        Self::gauss_hermite(DEFAULT_NODES).expect("default quadrature rule is valid")
    }
}

/// `(H_n(z), H_n'(z))` for the physicists' Hermite polynomial, normalised to
/// avoid overflow (the ratio is what Newton needs).
fn physicists_hermite(n: usize, z: f64) -> (f64, f64) {
    // Orthonormal recurrence: p_{k} = z sqrt(2/k) p_{k-1} - sqrt((k-1)/k) p_{k-2}.
    let mut p_prev = 0.0;
    let mut p = std::f64::consts::PI.powf(-0.25);
    for k in 1..=n {
        let kf = k as f64;
        let next = z * (2.0 / kf).sqrt() * p - ((kf - 1.0) / kf).sqrt() * p_prev;
        p_prev = p;
        p = next;
    }
    let deriv = (2.0 * n as f64).sqrt() * p_prev;
    (p, deriv)
}

fn probabilists_hermite(n: usize, x: f64) -> f64 {
    let mut prev = 1.0;
    if n == 0 {
        return prev;
    }
    let mut cur = x;
    for k in 1..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    cur
}
