//! Penalised regression: coordinate-descent Lasso, K-fold tuning, and the
//! sup-norm plus l1 minimum-distance problem.

mod cv;
mod lasso;
mod linf_l1;

pub use cv::{
    cross_validate_lambda, cross_validate_lambda_with, geometric_grid, shuffled_folds, CvPoint,
    CvResult,
};
pub use lasso::{
    lasso, lasso_trace, lasso_with, DesignProblem, LassoOptions, LassoSolution,
};
pub use linf_l1::{linf_l1_objective, linf_l1_solve, LinfL1Solution, LinfL1Solver};
