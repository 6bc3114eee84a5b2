//! Sup-norm fit with an l1 penalty, solved exactly as a linear program.

use hdblp::sparse_reg::{linf_l1_objective, linf_l1_solve, LinfL1Solver};
use nalgebra::{DMatrix, DVector};

fn main() -> hdblp::Result<()> {
    let b = DMatrix::from_row_slice(5, 3, &[
        1.0, 0.2, 0.0,
        0.3, 1.0, 0.1,
        0.0, 0.4, 1.0,
        0.5, 0.5, 0.5,
        -0.2, 0.1, 0.3,
    ]);
    let c = DVector::from_vec(vec![1.0, -0.5, 0.8, 0.4, 0.1]);

    for lambda in [0.01, 0.1, 0.5, 2.0] {
        let sol = linf_l1_solve(&b, &c, lambda)?;
        println!(
            "lambda {lambda:5.2}  gamma {:?}  objective {:.6}  gap {:.1e}",
            sol.gamma.as_slice(),
            sol.objective,
            sol.duality_gap()
        );
    }

    // Reuse one factorised problem for several right-hand sides.
    let mut solver = LinfL1Solver::new(&b, 0.1)?;
    for shift in [0.0, 0.5, 1.0] {
        let rhs = c.add_scalar(shift);
        let sol = solver.solve(&rhs)?;
        let check = linf_l1_objective(&b, &rhs, 0.1, &sol.gamma);
        println!("shift {shift:.1}  objective {:.6} (recomputed {check:.6})", sol.objective);
    }
    Ok(())
}
