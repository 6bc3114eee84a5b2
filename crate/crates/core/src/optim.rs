//! Bounded one-dimensional search: an equally spaced grid followed by
//! golden-section refinement around the best grid point.

use serde::{Deserialize, Serialize};

use crate::error::{HdBlpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSearch {
    pub lower: f64,
    pub upper: f64,
    pub points: usize,
    /// Golden-section stops when the bracket is narrower than this; zero
    /// disables refinement.
    pub refine_tol: f64,
}

impl Default for GridSearch {
    fn default() -> Self {
        Self {
            lower: 0.0,
            upper: 3.0,
            points: 61,
            refine_tol: 1e-6,
        }
    }
}

impl GridSearch {
    pub fn validate(&self) -> Result<()> {
        if !(self.lower.is_finite() && self.upper.is_finite() && self.lower <= self.upper) {
            return Err(HdBlpError::Config(format!(
                "search interval [{}, {}] is invalid",
                self.lower, self.upper
            )));
        }
        if self.points == 0 {
            return Err(HdBlpError::Config("search grid needs at least one point".into()));
        }
        if !(self.refine_tol >= 0.0) {
            return Err(HdBlpError::Config("refine_tol must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> Vec<f64> {
        if self.points == 1 {
            return vec![0.5 * (self.lower + self.upper)];
        }
        let step = (self.upper - self.lower) / (self.points - 1) as f64;
        (0..self.points)
            .map(|i| {
                if i + 1 == self.points {
                    self.upper
                } else {
                    self.lower + step * i as f64
                }
            })
            .collect()
    }

    pub fn step(&self) -> f64 {
        if self.points <= 1 {
            self.upper - self.lower
        } else {
            (self.upper - self.lower) / (self.points - 1) as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub argmin: f64,
    pub value: f64,
    pub evaluations: usize,
    /// Grid points where the objective could not be evaluated.
    pub failed_points: usize,
}

const INV_PHI: f64 = 0.618_033_988_749_894_9;

/// Minimise `f` over `[lower, upper]`. Grid points where `f` errors are
/// skipped; the search fails only when every grid point fails.
pub fn minimize_scalar<F>(search: &GridSearch, mut f: F) -> Result<SearchOutcome>
where
    F: FnMut(f64) -> Result<f64>,
{
    search.validate()?;
    let grid = search.grid();
    let mut best: Option<(usize, f64)> = None;
    let mut failed = 0;
    let mut last_err = None;
    for (i, &x) in grid.iter().enumerate() {
        match f(x) {
            Ok(v) if v.is_finite() => {
                if best.is_none_or(|(_, b)| v < b) {
                    best = Some((i, v));
                }
            }
            Ok(_) => failed += 1,
            Err(e) => {
                log::warn!("objective failed at {x}: {e}");
                failed += 1;
                last_err = Some(e);
            }
        }
    }
    let Some((idx, value)) = best else {
        return Err(HdBlpError::Estimation(format!(
            "objective failed at all {} grid points{}",
            grid.len(),
            last_err.map(|e| format!(" (last error: {e})")).unwrap_or_default()
        )));
    };
    let mut outcome = SearchOutcome {
        argmin: grid[idx],
        value,
        evaluations: grid.len(),
        failed_points: failed,
    };
    if search.refine_tol == 0.0 || grid.len() == 1 {
        return Ok(outcome);
    }

    let step = search.step();
    let mut a = (grid[idx] - step).max(search.lower);
    let mut b = (grid[idx] + step).min(search.upper);
    let mut eval = |x: f64, outcome: &mut SearchOutcome| -> f64 {
        outcome.evaluations += 1;
        match f(x) {
            Ok(v) if v.is_finite() => {
                if v < outcome.value {
                    outcome.value = v;
                    outcome.argmin = x;
                }
                v
            }
            _ => f64::INFINITY,
        }
    };
    let mut c = b - INV_PHI * (b - a);
    let mut d = a + INV_PHI * (b - a);
    let mut fc = eval(c, &mut outcome);
    let mut fd = eval(d, &mut outcome);
    while (b - a) > search.refine_tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INV_PHI * (b - a);
            fc = eval(c, &mut outcome);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INV_PHI * (b - a);
            fd = eval(d, &mut outcome);
        }
    }
    Ok(outcome)
}
