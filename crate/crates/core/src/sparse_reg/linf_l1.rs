//! `min_g |c - B g|_inf + lambda |g|_1` through its linear-programming dual.
//!
//! The dual is
//!
//! ```text
//! max  c' mu   s.t.  |B' mu|_inf <= lambda,  |mu|_1 <= 1
//! ```
//!
//! Splitting `mu = mu+ - mu-` gives an LP whose right-hand side is
//! nonnegative, so the slack basis is feasible and no phase one is needed.
//! The primal minimiser is read off the shadow prices: `g = pi+ - pi-` for
//! the two blocks of `B' mu` rows and `t` for the `|mu|_1` row. Only the
//! objective depends on `c`, so a solved tableau stays primal feasible for a
//! new `c` and re-optimisation starts from the previous basis.

use nalgebra::{DMatrix, DVector};

use crate::error::{HdBlpError, Result};

const PIVOT_EPS: f64 = 1e-11;
const BLAND_AFTER_DEGENERATE: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct LinfL1Solution {
    pub gamma: DVector<f64>,
    /// `|c - B gamma|_inf + lambda |gamma|_1` at the returned `gamma`.
    pub objective: f64,
    /// `c' mu` at the dual certificate.
    pub dual_objective: f64,
    pub pivots: usize,
}

impl LinfL1Solution {
    pub fn duality_gap(&self) -> f64 {
        self.objective - self.dual_objective
    }
}

/// Objective `|c - B g|_inf + lambda |g|_1` at an arbitrary `g`.
pub fn linf_l1_objective(b: &DMatrix<f64>, c: &DVector<f64>, lambda: f64, gamma: &DVector<f64>) -> f64 {
    (c - b * gamma).amax() + lambda * gamma.lp_norm(1)
}

/// Globally minimise `|c - B g|_inf + lambda |g|_1`.
pub fn linf_l1_solve(b: &DMatrix<f64>, c: &DVector<f64>, lambda: f64) -> Result<LinfL1Solution> {
    LinfL1Solver::new(b, lambda)?.solve(c)
}

/// Reusable solver for a fixed `B` and `lambda` across many `c`.
#[derive(Clone, Debug)]
pub struct LinfL1Solver {
    b: DMatrix<f64>,
    lambda: f64,
    tableau: Tableau,
}

impl LinfL1Solver {
    pub fn new(b: &DMatrix<f64>, lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(HdBlpError::InvalidArgument(format!(
                "penalty must be finite and nonnegative, got {lambda}"
            )));
        }
        if b.nrows() == 0 || b.ncols() == 0 {
            return Err(HdBlpError::InvalidArgument("empty moment matrix".into()));
        }
        if b.iter().any(|v| !v.is_finite()) {
            return Err(HdBlpError::NonFinite("moment matrix"));
        }
        Ok(Self {
            b: b.clone(),
            lambda,
            tableau: Tableau::new(b, lambda),
        })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn solve(&mut self, c: &DVector<f64>) -> Result<LinfL1Solution> {
        if c.len() != self.b.nrows() {
            return Err(HdBlpError::dim("moment vector", self.b.nrows(), c.len()));
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(HdBlpError::NonFinite("moment vector"));
        }
        let mut last_gap = f64::NAN;
        for attempt in 0..2 {
            if attempt == 1 {
                // Accumulated round-off: rebuild from the slack basis.
                self.tableau = Tableau::new(&self.b, self.lambda);
            }
            let pivots = self.tableau.optimise(c)?;
            let sol = self.certify(c, pivots);
            match sol {
                Ok(sol) => return Ok(sol),
                Err(gap) => last_gap = gap,
            }
        }
        Err(HdBlpError::Solver(format!(
            "l_inf/l_1 solve failed certification (duality gap {last_gap:e})"
        )))
    }

    fn certify(&self, c: &DVector<f64>, pivots: usize) -> std::result::Result<LinfL1Solution, f64> {
        let d = self.b.ncols();
        let prices = self.tableau.shadow_prices();
        let gamma = DVector::from_iterator(d, (0..d).map(|k| prices[k] - prices[d + k]));
        let objective = linf_l1_objective(&self.b, c, self.lambda, &gamma);

        let mu = self.tableau.dual_point(self.b.nrows());
        let mu_l1 = mu.lp_norm(1);
        let bt_mu = self.b.tr_mul(&mu).amax();
        let scale = 1.0 + objective.abs();
        let slack_tol = 1e-10 * (1.0 + self.lambda);
        let feasible = mu_l1 <= 1.0 + 1e-10 && bt_mu <= self.lambda + slack_tol;
        // Rescale a marginally infeasible dual point so the bound stays valid.
        let shrink = 1.0_f64
            .max(mu_l1)
            .max(if self.lambda > 0.0 { bt_mu / self.lambda } else { 1.0 });
        let dual_objective = c.dot(&mu) / shrink;
        let gap = objective - dual_objective;
        if feasible && gap <= 1e-8 * scale && gap >= -1e-8 * scale {
            Ok(LinfL1Solution {
                gamma,
                objective,
                dual_objective,
                pivots,
            })
        } else {
            Err(gap)
        }
    }
}

/// Dense simplex tableau for `max obj' v, A v <= rhs, v >= 0` with slacks.
#[derive(Clone, Debug)]
struct Tableau {
    rows: usize,
    /// structural columns (2m) followed by slacks (rows), then the rhs.
    width: usize,
    structural: usize,
    data: Vec<f64>,
    basis: Vec<usize>,
    objective: Vec<f64>,
    reduced: Vec<f64>,
}

impl Tableau {
    fn new(b: &DMatrix<f64>, lambda: f64) -> Self {
        let (m, d) = (b.nrows(), b.ncols());
        let rows = 2 * d + 1;
        let structural = 2 * m;
        let width = structural + rows + 1;
        let mut data = vec![0.0; rows * width];
        for k in 0..d {
            let upper = k * width;
            let lower = (d + k) * width;
            for i in 0..m {
                let v = b[(i, k)];
                data[upper + i] = v;
                data[upper + m + i] = -v;
                data[lower + i] = -v;
                data[lower + m + i] = v;
            }
            data[upper + width - 1] = lambda;
            data[lower + width - 1] = lambda;
        }
        let last = 2 * d * width;
        for i in 0..structural {
            data[last + i] = 1.0;
        }
        data[last + width - 1] = 1.0;
        for r in 0..rows {
            data[r * width + structural + r] = 1.0;
        }
        Self {
            rows,
            width,
            structural,
            data,
            basis: (structural..structural + rows).collect(),
            objective: vec![0.0; width - 1],
            reduced: vec![0.0; width],
        }
    }

    #[inline]
    fn at(&self, r: usize, col: usize) -> f64 {
        self.data[r * self.width + col]
    }

    fn set_objective(&mut self, c: &DVector<f64>) {
        let m = c.len();
        self.objective.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..m {
            self.objective[i] = c[i];
            self.objective[m + i] = -c[i];
        }
        // reduced_j = sum_r obj[basis r] * T[r, j] - obj_j; last entry is the value.
        self.reduced.iter_mut().for_each(|v| *v = 0.0);
        for r in 0..self.rows {
            let cb = self.objective[self.basis[r]];
            if cb != 0.0 {
                let row = &self.data[r * self.width..(r + 1) * self.width];
                for (z, &t) in self.reduced.iter_mut().zip(row) {
                    *z += cb * t;
                }
            }
        }
        for j in 0..self.width - 1 {
            self.reduced[j] -= self.objective[j];
        }
    }

    fn optimise(&mut self, c: &DVector<f64>) -> Result<usize> {
        self.set_objective(c);
        let scale = c.amax().max(1.0);
        let cost_tol = 1e-12 * scale;
        let max_pivots = 50 * (self.rows + self.structural);
        let mut degenerate_run = 0;
        for pivots in 0..max_pivots {
            let bland = degenerate_run >= BLAND_AFTER_DEGENERATE;
            let entering = if bland {
                (0..self.width - 1).find(|&j| self.reduced[j] < -cost_tol)
            } else {
                let mut best = None;
                let mut most = -cost_tol;
                for j in 0..self.width - 1 {
                    if self.reduced[j] < most {
                        most = self.reduced[j];
                        best = Some(j);
                    }
                }
                best
            };
            let Some(col) = entering else {
                return Ok(pivots);
            };

            let rhs = self.width - 1;
            let mut leave: Option<usize> = None;
            let mut best_ratio = f64::INFINITY;
            for r in 0..self.rows {
                let a = self.at(r, col);
                if a > PIVOT_EPS {
                    let ratio = self.at(r, rhs).max(0.0) / a;
                    let better = match leave {
                        None => true,
                        Some(l) => {
                            if ratio < best_ratio - 1e-12 {
                                true
                            } else if ratio <= best_ratio + 1e-12 {
                                if bland {
                                    self.basis[r] < self.basis[l]
                                } else {
                                    a > self.at(l, col)
                                }
                            } else {
                                false
                            }
                        }
                    };
                    if better {
                        best_ratio = ratio;
                        leave = Some(r);
                    }
                }
            }
            let Some(row) = leave else {
                return Err(HdBlpError::Solver(
                    "dual LP unbounded; the bound |mu|_1 <= 1 should prevent this".into(),
                ));
            };
            if best_ratio <= 1e-14 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            self.pivot(row, col);
        }
        Err(HdBlpError::Solver(format!(
            "simplex exceeded {max_pivots} pivots"
        )))
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let w = self.width;
        let p = self.data[row * w + col];
        {
            let pivot_row = &mut self.data[row * w..(row + 1) * w];
            for v in pivot_row.iter_mut() {
                *v /= p;
            }
            pivot_row[col] = 1.0;
        }
        let (head, rest) = self.data.split_at_mut(row * w);
        let (pivot_row, tail) = rest.split_at_mut(w);
        for chunk in head.chunks_exact_mut(w).chain(tail.chunks_exact_mut(w)) {
            let f = chunk[col];
            if f != 0.0 {
                for (v, &pr) in chunk.iter_mut().zip(pivot_row.iter()) {
                    *v -= f * pr;
                }
                chunk[col] = 0.0;
            }
        }
        let f = self.reduced[col];
        if f != 0.0 {
            for (v, &pr) in self.reduced.iter_mut().zip(pivot_row.iter()) {
                *v -= f * pr;
            }
            self.reduced[col] = 0.0;
        }
        self.basis[row] = col;
    }

    /// Dual values of the constraint rows: reduced costs of the slacks.
    fn shadow_prices(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.reduced[self.structural + r].max(0.0))
            .collect()
    }

    fn dual_point(&self, m: usize) -> DVector<f64> {
        let mut mu = DVector::zeros(m);
        let rhs = self.width - 1;
        for r in 0..self.rows {
            let var = self.basis[r];
            if var < self.structural {
                let value = self.at(r, rhs).max(0.0);
                if var < m {
                    mu[var] += value;
                } else {
                    mu[var - m] -= value;
                }
            }
        }
        mu
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn exact_interpolation_without_penalty() {
        let b = DMatrix::identity(2, 2);
        let c = DVector::from_vec(vec![1.0, 0.0]);
        let sol = linf_l1_solve(&b, &c, 0.0).unwrap();
        assert_abs_diff_eq!(sol.objective, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.gamma[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(sol.gamma[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn large_penalty_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let b = DMatrix::from_fn(6, 3, |_, _| rng.random_range(-1.0..1.0));
        let c = DVector::from_fn(6, |_, _| rng.random_range(-1.0..1.0));
        // Any lambda above max_k |B_k|_1 makes moving off zero unprofitable.
        let lambda = (0..3).map(|k| b.column(k).lp_norm(1)).fold(0.0, f64::max) + 0.1;
        let sol = linf_l1_solve(&b, &c, lambda).unwrap();
        assert!(sol.gamma.iter().all(|g| g.abs() < 1e-12));
        assert_abs_diff_eq!(sol.objective, c.amax(), epsilon = 1e-12);
    }

    #[test]
    fn dominates_zero_and_unpenalised_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..10 {
            let b = DMatrix::from_fn(12, 5, |_, _| rng.random_range(-1.0..1.0));
            let c = DVector::from_fn(12, |_, _| rng.random_range(-1.0..1.0));
            let lambda = rng.random_range(0.01..0.5);
            let sol = linf_l1_solve(&b, &c, lambda).unwrap();
            let free = linf_l1_solve(&b, &c, 0.0).unwrap();
            let at_zero = linf_l1_objective(&b, &c, lambda, &DVector::zeros(5));
            let at_free = linf_l1_objective(&b, &c, lambda, &free.gamma);
            assert!(sol.objective <= at_zero + 1e-10);
            assert!(sol.objective <= at_free + 1e-10);
            assert!(sol.duality_gap().abs() <= 1e-8 * (1.0 + sol.objective));
        }
    }

    #[test]
    fn warm_start_matches_cold_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let b = DMatrix::from_fn(30, 20, |_, _| rng.random_range(-1.0..1.0));
        let mut solver = LinfL1Solver::new(&b, 0.05).unwrap();
        for _ in 0..5 {
            let c = DVector::from_fn(30, |_, _| rng.random_range(-1.0..1.0));
            let warm = solver.solve(&c).unwrap();
            let cold = linf_l1_solve(&b, &c, 0.05).unwrap();
            assert_abs_diff_eq!(warm.objective, cold.objective, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let b = DMatrix::identity(2, 2);
        assert!(linf_l1_solve(&b, &DVector::zeros(3), 0.1).is_err());
        assert!(linf_l1_solve(&b, &DVector::zeros(2), -0.1).is_err());
        assert!(linf_l1_solve(&DMatrix::zeros(0, 2), &DVector::zeros(0), 0.1).is_err());
    }
}
