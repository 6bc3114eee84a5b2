use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HdBlpError, Result};

/// Regressors, response and optional row weights for a penalised fit.
#[derive(Clone, Debug)]
pub struct DesignProblem {
    x: DMatrix<f64>,
    y: DVector<f64>,
    weights: Option<DVector<f64>>,
}

impl DesignProblem {
    pub fn new(x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        Self::build(x, y, None)
    }

    pub fn weighted(x: DMatrix<f64>, y: DVector<f64>, weights: DVector<f64>) -> Result<Self> {
        Self::build(x, y, Some(weights))
    }

    fn build(x: DMatrix<f64>, y: DVector<f64>, weights: Option<DVector<f64>>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(HdBlpError::InvalidArgument("design has no rows".into()));
        }
        if y.len() != x.nrows() {
            return Err(HdBlpError::dim("response", x.nrows(), y.len()));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(HdBlpError::NonFinite("design problem"));
        }
        if let Some(w) = &weights {
            if w.len() != x.nrows() {
                return Err(HdBlpError::dim("row weights", x.nrows(), w.len()));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(HdBlpError::InvalidArgument(
                    "row weights must be finite and nonnegative".into(),
                ));
            }
        }
        Ok(Self { x, y, weights })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn weights(&self) -> Option<&DVector<f64>> {
        self.weights.as_ref()
    }

    pub fn nrows(&self) -> usize {
        self.x.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.x.ncols()
    }

    /// Restrict to a subset of rows.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(rows),
            y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| self.y[r])),
            weights: self
                .weights
                .as_ref()
                .map(|w| DVector::from_iterator(rows.len(), rows.iter().map(|&r| w[r]))),
        }
    }

    /// Columns rescaled to unit weighted mean square; returns the scale factors.
    pub fn standardized(&self) -> (Self, Vec<f64>) {
        let n = self.nrows() as f64;
        let mut x = self.x.clone();
        let mut scales = Vec::with_capacity(x.ncols());
        for j in 0..x.ncols() {
            let ms: f64 = (0..x.nrows())
                .map(|i| self.row_weight(i) * x[(i, j)] * x[(i, j)])
                .sum::<f64>()
                / n;
            let scale = if ms > 0.0 { ms.sqrt() } else { 1.0 };
            x.column_mut(j).scale_mut(1.0 / scale);
            scales.push(scale);
        }
        (
            Self {
                x,
                y: self.y.clone(),
                weights: self.weights.clone(),
            },
            scales,
        )
    }

    #[inline]
    fn row_weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// Smallest penalty at which the all-zero vector solves the problem:
    /// `(2/n) max_j |X_j' W Y|`.
    pub fn lambda_max(&self) -> f64 {
        let n = self.nrows() as f64;
        (0..self.ncols())
            .map(|j| {
                let dot: f64 = (0..self.nrows())
                    .map(|i| self.row_weight(i) * self.x[(i, j)] * self.y[i])
                    .sum();
                2.0 * dot.abs() / n
            })
            .fold(0.0, f64::max)
    }

    /// `(1/n) sum w_i (y_i - x_i' beta)^2 + lambda |beta|_1`.
    pub fn objective(&self, coef: &DVector<f64>, lambda: f64) -> f64 {
        let resid = &self.y - &self.x * coef;
        let n = self.nrows() as f64;
        let loss: f64 = resid
            .iter()
            .enumerate()
            .map(|(i, r)| self.row_weight(i) * r * r)
            .sum::<f64>()
            / n;
        loss + lambda * coef.lp_norm(1)
    }

    /// Largest violation of the subgradient optimality conditions.
    pub fn kkt_violation(&self, coef: &DVector<f64>, lambda: f64) -> f64 {
        let resid = &self.y - &self.x * coef;
        let n = self.nrows() as f64;
        (0..self.ncols())
            .map(|j| {
                let g: f64 = 2.0
                    * (0..self.nrows())
                        .map(|i| self.row_weight(i) * self.x[(i, j)] * resid[i])
                        .sum::<f64>()
                    / n;
                if coef[j] == 0.0 {
                    (g.abs() - lambda).max(0.0)
                } else {
                    (g - lambda * coef[j].signum()).abs()
                }
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoOptions {
    /// Bound on both the largest coefficient change of a sweep and the final
    /// KKT violation.
    pub tol: f64,
    pub max_sweeps: usize,
    /// Rescale columns to unit mean square before fitting; coefficients are
    /// reported on the original scale.
    pub standardize: bool,
}

impl Default for LassoOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_sweeps: 100_000,
            standardize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LassoSolution {
    pub coef: DVector<f64>,
    pub lambda: f64,
    pub objective: f64,
    pub kkt_violation: f64,
    pub sweeps: usize,
}

/// Cyclic coordinate descent for `(1/n)|Y - X b|^2 + lambda |b|_1`.
pub fn lasso(prob: &DesignProblem, lambda: f64, tol: f64) -> Result<LassoSolution> {
    lasso_with(
        prob,
        lambda,
        &LassoOptions {
            tol,
            ..Default::default()
        },
        None,
    )
}

/// Coordinate descent with explicit options and an optional warm start.
pub fn lasso_with(
    prob: &DesignProblem,
    lambda: f64,
    opts: &LassoOptions,
    warm: Option<&DVector<f64>>,
) -> Result<LassoSolution> {
    if !(opts.tol > 0.0) {
        return Err(HdBlpError::InvalidArgument(format!(
            "lasso tolerance must be positive, got {}",
            opts.tol
        )));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(HdBlpError::InvalidArgument(format!(
            "lasso penalty must be finite and nonnegative, got {lambda}"
        )));
    }
    if let Some(w) = warm {
        if w.len() != prob.ncols() {
            return Err(HdBlpError::dim("warm start", prob.ncols(), w.len()));
        }
    }
    if opts.standardize {
        let (scaled, scales) = prob.standardized();
        let warm_scaled = warm.map(|w| {
            DVector::from_iterator(w.len(), w.iter().zip(&scales).map(|(b, s)| b * s))
        });
        let inner = LassoOptions {
            standardize: false,
            ..*opts
        };
        let sol = CoordinateDescent::new(&scaled).run(lambda, &inner, warm_scaled.as_ref(), None)?;
        let coef = DVector::from_iterator(
            sol.coef.len(),
            sol.coef.iter().zip(&scales).map(|(b, s)| b / s),
        );
        return Ok(LassoSolution {
            objective: prob.objective(&coef, lambda),
            kkt_violation: sol.kkt_violation,
            coef,
            lambda,
            sweeps: sol.sweeps,
        });
    }
    CoordinateDescent::new(prob).run(lambda, opts, warm, None)
}

/// Coordinate descent recording the objective after every full sweep.
pub fn lasso_trace(
    prob: &DesignProblem,
    lambda: f64,
    opts: &LassoOptions,
) -> Result<(LassoSolution, Vec<f64>)> {
    let mut trace = Vec::new();
    let sol = CoordinateDescent::new(prob).run(lambda, opts, None, Some(&mut trace))?;
    Ok((sol, trace))
}

const INNER_SWEEPS: usize = 500;

enum FaceStep {
    Reached,
    Blocked(usize),
    Failed,
}

pub(crate) struct CoordinateDescent<'a> {
    prob: &'a DesignProblem,
    /// `(2/n) sum_i w_i x_ij^2`
    curvature: Vec<f64>,
    /// Columns premultiplied by `2 w_i / n`.
    scaled_cols: DMatrix<f64>,
}

impl<'a> CoordinateDescent<'a> {
    pub(crate) fn new(prob: &'a DesignProblem) -> Self {
        let n = prob.nrows() as f64;
        let mut scaled_cols = prob.x.clone();
        for i in 0..prob.nrows() {
            let f = 2.0 * prob.row_weight(i) / n;
            for j in 0..prob.ncols() {
                scaled_cols[(i, j)] *= f;
            }
        }
        let curvature = (0..prob.ncols())
            .map(|j| scaled_cols.column(j).dot(&prob.x.column(j)))
            .collect();
        Self {
            prob,
            curvature,
            scaled_cols,
        }
    }

    /// Update coordinate `j` in place; returns the absolute change.
    #[inline]
    fn update(&self, j: usize, lambda: f64, coef: &mut DVector<f64>, resid: &mut DVector<f64>) -> f64 {
        let a = self.curvature[j];
        if a <= 0.0 {
            // Column of zeros: any value fits equally well, the penalty picks 0.
            let old = coef[j];
            if old != 0.0 {
                coef[j] = 0.0;
            }
            return old.abs();
        }
        let grad = self.scaled_cols.column(j).dot(resid);
        let rho = grad + a * coef[j];
        let new = soft_threshold(rho, lambda) / a;
        let delta = new - coef[j];
        if delta != 0.0 {
            resid.axpy(-delta, &self.prob.x.column(j), 1.0);
            coef[j] = new;
        }
        delta.abs()
    }

    fn kkt(&self, coef: &DVector<f64>, resid: &DVector<f64>, lambda: f64) -> f64 {
        (0..coef.len())
            .map(|j| {
                let g = self.scaled_cols.column(j).dot(resid);
                if coef[j] == 0.0 {
                    (g.abs() - lambda).max(0.0)
                } else {
                    (g - lambda * coef[j].signum()).abs()
                }
            })
            .fold(0.0, f64::max)
    }

    /// Move toward the minimiser of the smooth objective on the current
    /// orthant face, stopping at the first sign change. Never increases the
    /// objective.
    fn face_step(&self, lambda: f64, coef: &mut DVector<f64>, active: &[usize]) -> FaceStep {
        if active.is_empty() {
            return FaceStep::Reached;
        }
        if active.len() > self.prob.nrows() {
            return FaceStep::Failed;
        }
        let k = active.len();
        let h = DMatrix::from_fn(k, k, |a, b| {
            self.scaled_cols
                .column(active[a])
                .dot(&self.prob.x.column(active[b]))
        });
        let rhs = DVector::from_fn(k, |a, _| {
            self.scaled_cols.column(active[a]).dot(&self.prob.y) - lambda * coef[active[a]].signum()
        });
        let Some(chol) = h.cholesky() else {
            return FaceStep::Failed;
        };
        let target = chol.solve(&rhs);
        if target.iter().any(|v| !v.is_finite()) {
            return FaceStep::Failed;
        }
        let mut step = 1.0_f64;
        let mut blocking = None;
        for (a, &j) in active.iter().enumerate() {
            if target[a].signum() != coef[j].signum() {
                let t = coef[j] / (coef[j] - target[a]);
                if t < step {
                    step = t;
                    blocking = Some(j);
                }
            }
        }
        for (a, &j) in active.iter().enumerate() {
            coef[j] += step * (target[a] - coef[j]);
        }
        match blocking {
            Some(j) => {
                coef[j] = 0.0;
                FaceStep::Blocked(j)
            }
            None => FaceStep::Reached,
        }
    }

    pub(crate) fn run(
        &self,
        lambda: f64,
        opts: &LassoOptions,
        warm: Option<&DVector<f64>>,
        mut trace: Option<&mut Vec<f64>>,
    ) -> Result<LassoSolution> {
        let d = self.prob.ncols();
        let mut coef = warm.cloned().unwrap_or_else(|| DVector::zeros(d));
        let mut resid = &self.prob.y - &self.prob.x * &coef;
        let mut sweeps = 0;
        let mut last_support: Vec<usize> = Vec::new();
        if let Some(t) = trace.as_deref_mut() {
            t.push(self.prob.objective(&coef, lambda));
        }
        loop {
            // Full sweep over every coordinate.
            let mut max_change = 0.0_f64;
            for j in 0..d {
                max_change = max_change.max(self.update(j, lambda, &mut coef, &mut resid));
            }
            sweeps += 1;
            if let Some(t) = trace.as_deref_mut() {
                t.push(self.prob.objective(&coef, lambda));
            }
            if max_change <= opts.tol || sweeps % 8 == 0 {
                // Refresh the residual against drift, then certify.
                resid = &self.prob.y - &self.prob.x * &coef;
                let kkt = self.kkt(&coef, &resid, lambda);
                if kkt <= opts.tol {
                    return Ok(LassoSolution {
                        objective: self.prob.objective(&coef, lambda),
                        kkt_violation: kkt,
                        coef,
                        lambda,
                        sweeps,
                    });
                }
            }
            if max_change > opts.tol && trace.is_none() {
                let support: Vec<usize> = (0..d).filter(|&j| coef[j] != 0.0).collect();
                let mut solved = false;
                if support == last_support {
                    // Support looks settled: jump to the face minimiser, dropping
                    // coordinates that change sign on the way.
                    let mut active = support.clone();
                    for _ in 0..=support.len() {
                        match self.face_step(lambda, &mut coef, &active) {
                            FaceStep::Reached => {
                                solved = true;
                                break;
                            }
                            FaceStep::Blocked(j) => active.retain(|&k| k != j),
                            FaceStep::Failed => break,
                        }
                    }
                    resid = &self.prob.y - &self.prob.x * &coef;
                }
                last_support = support;
                if !solved {
                    // Iterate on the active set until it settles.
                    let active: Vec<usize> = (0..d).filter(|&j| coef[j] != 0.0).collect();
                    for _ in 0..INNER_SWEEPS {
                        let mut change = 0.0_f64;
                        for &j in &active {
                            change = change.max(self.update(j, lambda, &mut coef, &mut resid));
                        }
                        sweeps += 1;
                        if change <= opts.tol * 0.1 || sweeps >= opts.max_sweeps {
                            break;
                        }
                    }
                }
            }
            if sweeps >= opts.max_sweeps {
                return Err(HdBlpError::Solver(format!(
                    "coordinate descent did not converge in {sweeps} sweeps at lambda {lambda}"
                )));
            }
        }
    }
}

#[inline]
pub(crate) fn soft_threshold(value: f64, threshold: f64) -> f64 {
    if value > threshold {
        value - threshold
    } else if value < -threshold {
        value + threshold
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(n: usize, d: usize, seed: u64) -> DesignProblem {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0));
        let beta = DVector::from_fn(d, |j, _| if j < 2 { 1.5 } else { 0.0 });
        let noise = DVector::from_fn(n, |_, _| 0.3 * rng.random_range(-1.0..1.0));
        let y = &x * beta + noise;
        DesignProblem::new(x, y).unwrap()
    }

    #[test]
    fn zero_solution_above_threshold() {
        let prob = random_problem(30, 8, 1);
        let lmax = prob.lambda_max();
        let sol = lasso(&prob, lmax, 1e-10).unwrap();
        assert!(sol.coef.iter().all(|&b| b == 0.0));
        let sol = lasso(&prob, 2.0 * lmax, 1e-10).unwrap();
        assert!(sol.coef.iter().all(|&b| b == 0.0));
        let sol = lasso(&prob, 0.9 * lmax, 1e-10).unwrap();
        assert!(sol.coef.iter().any(|&b| b != 0.0));
    }

    #[test]
    fn single_column_soft_threshold() {
        // (1/n) X'X = 1 and (1/n) X'Y = 1: minimiser is 1 - lambda / 2.
        let x = DMatrix::from_column_slice(4, 1, &[1.0, -1.0, 1.0, -1.0]);
        let y = DVector::from_vec(vec![1.0, -1.0, 1.0, -1.0]);
        let prob = DesignProblem::new(x, y).unwrap();
        let sol = lasso(&prob, 1.0, 1e-12).unwrap();
        assert_abs_diff_eq!(sol.coef[0], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn objective_never_increases_across_sweeps() {
        let prob = random_problem(40, 15, 7);
        let lambda = 0.05 * prob.lambda_max();
        let (_, trace) = lasso_trace(&prob, lambda, &LassoOptions::default()).unwrap();
        assert!(trace.len() > 2);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-13, "objective rose from {} to {}", w[0], w[1]);
        }
    }

    #[test]
    fn returned_solutions_satisfy_kkt() {
        for seed in 0..5 {
            let prob = random_problem(50, 20, seed);
            for frac in [0.5, 0.1, 0.01] {
                let lambda = frac * prob.lambda_max();
                let sol = lasso(&prob, lambda, 1e-9).unwrap();
                assert!(sol.kkt_violation <= 1e-9);
                assert!(prob.kkt_violation(&sol.coef, lambda) <= 1e-9);
            }
        }
    }

    #[test]
    fn standardized_fit_reports_original_scale() {
        let mut prob = random_problem(60, 5, 11);
        prob.x.column_mut(0).scale_mut(10.0);
        let lambda = 0.0;
        let plain = lasso(&prob, lambda, 1e-11).unwrap();
        let opts = LassoOptions {
            tol: 1e-11,
            standardize: true,
            ..Default::default()
        };
        let scaled = lasso_with(&prob, lambda, &opts, None).unwrap();
        for j in 0..5 {
            assert_abs_diff_eq!(plain.coef[j], scaled.coef[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn weights_act_as_row_replication() {
        let prob = random_problem(12, 3, 5);
        let mut w = DVector::from_element(12, 1.0);
        w[0] = 2.0;
        let weighted = DesignProblem::weighted(prob.x.clone(), prob.y.clone(), w).unwrap();
        let mut rows: Vec<usize> = (0..12).collect();
        rows.push(0);
        let replicated = prob.select_rows(&rows);
        // Replication changes n from 12 to 13; rescale lambda to match.
        let a = lasso(&weighted, 0.1 * 13.0 / 12.0, 1e-12).unwrap();
        let b = lasso(&replicated, 0.1, 1e-12).unwrap();
        for j in 0..3 {
            assert_abs_diff_eq!(a.coef[j], b.coef[j], epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let prob = random_problem(5, 2, 0);
        assert!(lasso(&prob, 0.1, 0.0).is_err());
        assert!(lasso(&prob, -1.0, 1e-9).is_err());
        let x = DMatrix::from_element(2, 1, f64::NAN);
        assert!(DesignProblem::new(x, DVector::zeros(2)).is_err());
        assert!(DesignProblem::new(DMatrix::zeros(3, 1), DVector::zeros(2)).is_err());
    }
}
