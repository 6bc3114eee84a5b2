//! Lasso path and K-fold cross-validation on a sparse linear model.

use hdblp::sparse_reg::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn main() -> hdblp::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (n, d) = (120, 300);
    let x = DMatrix::from_fn(n, d, |_, _| standard_normal(&mut rng));
    let mut truth = DVector::zeros(d);
    truth[0] = 2.0;
    truth[5] = -1.5;
    truth[17] = 1.0;
    let y = &x * &truth + DVector::from_fn(n, |_, _| 0.5 * standard_normal(&mut rng));
    let prob = DesignProblem::new(x, y)?;

    let grid = geometric_grid(prob.lambda_max(), 1e-2, 20);
    let cv = cross_validate_lambda(&prob, &grid, 5, 1)?;
    for pt in &cv.curve {
        println!("lambda {:9.5}  cv error {:.4}", pt.lambda, pt.mean_error);
    }

    let fit = lasso(&prob, cv.lambda, 1e-9)?;
    let support: Vec<(usize, f64)> = fit
        .coef
        .iter()
        .enumerate()
        .filter(|(_, c)| c.abs() > 1e-8)
        .map(|(j, c)| (j, *c))
        .collect();
    println!("chosen lambda {:.5}, {} nonzero", cv.lambda, support.len());
    for (j, c) in support.iter().take(10) {
        println!("  beta[{j}] = {c:.4}");
    }
    println!("KKT violation {:.2e}", prob.kkt_violation(&fit.coef, fit.lambda));
    Ok(())
}
