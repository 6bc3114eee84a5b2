use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::lasso::{CoordinateDescent, DesignProblem, LassoOptions};
use crate::error::{HdBlpError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvPoint {
    pub lambda: f64,
    pub mean_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    pub curve: Vec<CvPoint>,
}

/// Assign `n` items to `k` folds: seeded shuffle, then contiguous blocks.
pub fn shuffled_folds(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut fold = vec![0; n];
    for (pos, &item) in order.iter().enumerate() {
        fold[item] = pos * k / n;
    }
    fold
}

/// Geometric grid `lambda_max * ratio^(i/(count-1))`, descending.
pub fn geometric_grid(lambda_max: f64, ratio: f64, count: usize) -> Vec<f64> {
    if count <= 1 {
        return vec![lambda_max];
    }
    (0..count)
        .map(|i| lambda_max * ratio.powf(i as f64 / (count - 1) as f64))
        .collect()
}

/// K-fold cross-validation of the Lasso penalty over `grid`.
///
/// Rows are shuffled with `seed` and split into `k` contiguous folds. The
/// chosen penalty minimises mean held-out squared error; ties go to the
/// larger penalty.
pub fn cross_validate_lambda(
    prob: &DesignProblem,
    grid: &[f64],
    k: usize,
    seed: u64,
) -> Result<CvResult> {
    cross_validate_lambda_with(prob, grid, k, seed, &LassoOptions::default())
}

pub fn cross_validate_lambda_with(
    prob: &DesignProblem,
    grid: &[f64],
    k: usize,
    seed: u64,
    opts: &LassoOptions,
) -> Result<CvResult> {
    if k < 2 {
        return Err(HdBlpError::InvalidArgument(format!(
            "cross-validation needs at least 2 folds, got {k}"
        )));
    }
    if grid.is_empty() || grid.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(HdBlpError::InvalidArgument(
            "lambda grid must be nonempty and strictly positive".into(),
        ));
    }
    let n = prob.nrows();
    if n < k {
        return Err(HdBlpError::InvalidArgument(format!(
            "{n} rows cannot be split into {k} folds"
        )));
    }
    let folds = shuffled_folds(n, k, seed);
    // Fit along a descending path so each solve warm-starts from a sparser one.
    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_by(|&a, &b| grid[b].total_cmp(&grid[a]));

    let mut total_error = vec![0.0; grid.len()];
    for fold in 0..k {
        let train: Vec<usize> = (0..n).filter(|&i| folds[i] != fold).collect();
        let test: Vec<usize> = (0..n).filter(|&i| folds[i] == fold).collect();
        let train_prob = prob.select_rows(&train);
        let test_prob = prob.select_rows(&test);
        let solver = CoordinateDescent::new(&train_prob);
        let mut warm: Option<DVector<f64>> = None;
        for &g in &order {
            let sol = solver.run(grid[g], opts, warm.as_ref(), None)?;
            let resid = test_prob.y() - test_prob.x() * &sol.coef;
            let wsum: f64 = match test_prob.weights() {
                Some(w) => w.sum(),
                None => test.len() as f64,
            };
            let sse: f64 = match test_prob.weights() {
                Some(w) => resid.iter().zip(w.iter()).map(|(r, w)| w * r * r).sum(),
                None => resid.norm_squared(),
            };
            total_error[g] += if wsum > 0.0 { sse / wsum } else { 0.0 };
            warm = Some(sol.coef);
        }
    }

    let curve: Vec<CvPoint> = grid
        .iter()
        .zip(&total_error)
        .map(|(&lambda, &e)| CvPoint {
            lambda,
            mean_error: e / k as f64,
        })
        .collect();
    let best = curve
        .iter()
        .min_by(|a, b| {
            a.mean_error
                .total_cmp(&b.mean_error)
                .then(b.lambda.total_cmp(&a.lambda))
        })
        .map(|p| p.lambda)
        .expect("grid is nonempty");
    Ok(CvResult { lambda: best, curve })
}
