//! Fold-wise nuisance estimation: instrument and price projections by Lasso,
//! the l-infinity/l1 Step A profile over sigma, and the Step B Lasso of the
//! inverted utilities on predicted price and characteristics.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HdBlpError, Result};
use crate::market::{pool, MarketData, UtilityCache};
use crate::optim::{minimize_scalar, GridSearch};
use crate::sparse_reg::{
    cross_validate_lambda_with, geometric_grid, lasso_with, shuffled_folds, DesignProblem,
    LassoOptions, LassoSolution, LinfL1Solver,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FoldMode {
    /// Consecutive blocks of `T / L` markets; the remainder joins the last block.
    #[default]
    Contiguous,
    SeededShuffle,
}

/// Partition of market indices into cross-fitting groups. Group labels are
/// zero-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    assignments: Vec<usize>,
    groups: usize,
}

impl FoldPlan {
    pub fn from_assignments(assignments: Vec<usize>) -> Result<Self> {
        let groups = assignments.iter().max().map_or(0, |g| g + 1);
        if groups == 0 {
            return Err(HdBlpError::InvalidArgument("fold plan has no markets".into()));
        }
        let mut seen = vec![false; groups];
        for &g in &assignments {
            seen[g] = true;
        }
        if let Some(empty) = seen.iter().position(|s| !s) {
            return Err(HdBlpError::InvalidArgument(format!("fold group {empty} is empty")));
        }
        Ok(Self { assignments, groups })
    }

    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn markets(&self) -> usize {
        self.assignments.len()
    }

    pub fn group_of(&self, market: usize) -> usize {
        self.assignments[market]
    }

    /// Markets in group `l`.
    pub fn members(&self, l: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&t| self.assignments[t] == l)
            .collect()
    }

    /// Markets outside group `l`.
    pub fn complement(&self, l: usize) -> Vec<usize> {
        (0..self.assignments.len())
            .filter(|&t| self.assignments[t] != l)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.groups];
        for &g in &self.assignments {
            sizes[g] += 1;
        }
        sizes
    }
}

pub fn make_folds(t: usize, l: usize, mode: FoldMode, seed: u64) -> Result<FoldPlan> {
    if l == 0 || l > t {
        return Err(HdBlpError::InvalidArgument(format!(
            "cannot split {t} markets into {l} groups"
        )));
    }
    let base = t / l;
    let position_group = |pos: usize| (pos / base).min(l - 1);
    let assignments = match mode {
        FoldMode::Contiguous => (0..t).map(position_group).collect(),
        FoldMode::SeededShuffle => {
            let mut order: Vec<usize> = (0..t).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut a = vec![0; t];
            for (pos, &market) in order.iter().enumerate() {
                a[market] = position_group(pos);
            }
            a
        }
    };
    FoldPlan::from_assignments(assignments)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum LambdaMode {
    #[default]
    Cv,
    Theoretical,
}

/// How one penalty is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Penalty {
    Fixed(f64),
    CrossValidated,
    Theoretical,
}

/// Multipliers for the rate-based penalties and the sparsity level `d0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConstants {
    pub c_pi: f64,
    pub c_p: f64,
    pub c_theta: f64,
    pub c_beta: f64,
    pub sparsity: usize,
}

impl Default for TheoryConstants {
    fn default() -> Self {
        Self {
            c_pi: 0.15,
            c_p: 0.25,
            c_theta: 0.1,
            c_beta: 0.15,
            sparsity: 5,
        }
    }
}

/// Penalty levels actually used by one fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaRecord {
    /// One per instrument.
    pub pi: Vec<f64>,
    pub p: f64,
    pub theta: f64,
    pub beta: f64,
}

/// Rate-based penalties for `t` training markets:
/// `pi, beta ~ sqrt(d0 log(dx v t) / t)`, `p ~ sqrt(log(dx v t) / t)`,
/// `theta ~ sqrt(log(dz~ v t) / t)`.
pub fn theoretical_lambdas(
    t: usize,
    dim_x: usize,
    dim_z: usize,
    dim_z_tilde: usize,
    c: &TheoryConstants,
) -> LambdaRecord {
    let tf = t as f64;
    let lx = (dim_x.max(t) as f64).ln();
    let lz = (dim_z_tilde.max(t) as f64).ln();
    let d0 = c.sparsity as f64;
    LambdaRecord {
        pi: vec![c.c_pi * (d0 * lx / tf).sqrt(); dim_z],
        p: c.c_p * (lx / tf).sqrt(),
        theta: c.c_theta * (lz / tf).sqrt(),
        beta: c.c_beta * (d0 * lx / tf).sqrt(),
    }
}

/// Row-level K-fold CV for the Lasso fits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LassoCv {
    pub folds: usize,
    pub grid_points: usize,
    /// Smallest grid value as a fraction of the zero-solution threshold.
    pub grid_ratio: f64,
}

impl Default for LassoCv {
    fn default() -> Self {
        Self {
            folds: 5,
            grid_points: 20,
            grid_ratio: 1e-2,
        }
    }
}

/// Market-level K-fold CV for the Step A penalty. Each candidate is scored
/// by the sup-norm of the held-out moment at the training fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepACv {
    pub folds: usize,
    pub grid_points: usize,
    /// Smallest grid value as a fraction of the largest entry of `B`.
    pub grid_ratio: f64,
    /// Sigma grid used inside each CV fit.
    pub sigma_points: usize,
}

impl Default for StepACv {
    fn default() -> Self {
        Self {
            folds: 5,
            grid_points: 8,
            grid_ratio: 5e-3,
            sigma_points: 31,
        }
    }
}

/// Explicit penalty values that bypass the selected mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaOverrides {
    pub pi: Option<f64>,
    pub p: Option<f64>,
    pub theta: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    pub lambda_mode: LambdaMode,
    pub overrides: LambdaOverrides,
    pub constants: TheoryConstants,
    pub lasso_cv: LassoCv,
    pub step_a_cv: StepACv,
    pub sigma_search: GridSearch,
    pub lasso: LassoOptions,
    /// Seed for all CV fold shuffles.
    pub cv_seed: u64,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        Self {
            lambda_mode: LambdaMode::Cv,
            overrides: LambdaOverrides::default(),
            constants: TheoryConstants::default(),
            lasso_cv: LassoCv::default(),
            step_a_cv: StepACv::default(),
            sigma_search: GridSearch::default(),
            lasso: LassoOptions::default(),
            cv_seed: 0,
        }
    }
}

/// Penalty choice for each nuisance fit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Penalties {
    pub pi: Penalty,
    pub p: Penalty,
    pub theta: Penalty,
    pub beta: Penalty,
}

impl NuisanceConfig {
    pub fn validate(&self) -> Result<()> {
        self.sigma_search.validate()?;
        if self.lasso_cv.folds < 2 || self.step_a_cv.folds < 2 {
            return Err(HdBlpError::Config("cross-validation needs at least 2 folds".into()));
        }
        if self.lasso_cv.grid_points == 0 || self.step_a_cv.grid_points == 0 {
            return Err(HdBlpError::Config("penalty grids need at least one point".into()));
        }
        for r in [self.lasso_cv.grid_ratio, self.step_a_cv.grid_ratio] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(HdBlpError::Config(format!("grid ratio {r} must lie in (0, 1]")));
            }
        }
        if self.step_a_cv.sigma_points == 0 {
            return Err(HdBlpError::Config("Step A CV needs at least one sigma point".into()));
        }
        let o = &self.overrides;
        for v in [o.pi, o.p, o.theta, o.beta].into_iter().flatten() {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(HdBlpError::Config(format!("penalty override {v} is invalid")));
            }
        }
        let c = &self.constants;
        for v in [c.c_pi, c.c_p, c.c_theta, c.c_beta] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(HdBlpError::Config(format!("theory constant {v} must be positive")));
            }
        }
        Ok(())
    }

    pub fn penalties(&self) -> Penalties {
        let mode = match self.lambda_mode {
            LambdaMode::Cv => Penalty::CrossValidated,
            LambdaMode::Theoretical => Penalty::Theoretical,
        };
        let pick = |o: Option<f64>| o.map_or(mode, Penalty::Fixed);
        Penalties {
            pi: pick(self.overrides.pi),
            p: pick(self.overrides.p),
            theta: pick(self.overrides.theta),
            beta: pick(self.overrides.beta),
        }
    }
}

/// The markets a fit may read, addressed through the shared utility cache.
#[derive(Clone, Copy)]
pub struct Sample<'c, 'a> {
    cache: &'c UtilityCache<'a>,
    indices: &'c [usize],
}

impl<'c, 'a> Sample<'c, 'a> {
    pub fn new(cache: &'c UtilityCache<'a>, indices: &'c [usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(HdBlpError::InvalidArgument("training sample is empty".into()));
        }
        let t = cache.markets().len();
        if let Some(&bad) = indices.iter().find(|&&i| i >= t) {
            return Err(HdBlpError::InvalidArgument(format!(
                "market index {bad} out of range for {t} markets"
            )));
        }
        Ok(Self { cache, indices })
    }

    pub fn indices(&self) -> &'c [usize] {
        self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn cache(&self) -> &'c UtilityCache<'a> {
        self.cache
    }

    pub fn markets(&self) -> Vec<&'a MarketData> {
        let all = self.cache.markets();
        self.indices.iter().map(|&t| &all[t]).collect()
    }

    /// Stacked `y(sigma)` over the sample, market by market.
    pub fn utilities(&self, sigma: f64) -> Result<DVector<f64>> {
        let ys = self.cache.utilities(sigma, self.indices)?;
        Ok(DVector::from_iterator(
            ys.iter().map(|y| y.len()).sum(),
            ys.iter().flat_map(|y| y.iter().copied()),
        ))
    }
}

fn mix_seed(base: u64, tag: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fit_lasso(
    prob: &DesignProblem,
    lambda: f64,
    cv: Option<(&LassoCv, u64)>,
    opts: &LassoOptions,
) -> Result<LassoSolution> {
    let lambda = match cv {
        None => lambda,
        Some((cv, seed)) => {
            let lmax = prob.lambda_max();
            if !(lmax > 0.0) {
                0.0
            } else {
                let grid = geometric_grid(lmax, cv.grid_ratio, cv.grid_points);
                let folds = cv.folds.min(prob.nrows());
                cross_validate_lambda_with(prob, &grid, folds, seed, opts)?.lambda
            }
        }
    };
    lasso_with(prob, lambda, opts, None)
}

fn resolve_lasso<'p>(
    penalty: Penalty,
    theory: f64,
    cfg: &'p NuisanceConfig,
    seed: u64,
) -> (f64, Option<(&'p LassoCv, u64)>) {
    match penalty {
        Penalty::Fixed(l) => (l, None),
        Penalty::Theoretical => (theory, None),
        Penalty::CrossValidated => (f64::NAN, Some((&cfg.lasso_cv, seed))),
    }
}

fn theory_for(sample: &Sample, cfg: &NuisanceConfig) -> LambdaRecord {
    let m = sample.markets()[0];
    theoretical_lambdas(
        sample.len(),
        m.dim_x(),
        m.dim_z(),
        m.dim_x() + m.dim_z(),
        &cfg.constants,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FzFit {
    /// d_z x d_x; prediction is `Pi x`.
    pub pi_hat: DMatrix<f64>,
    pub lambdas: Vec<f64>,
}

/// Lasso of each instrument on the characteristics, pooled over the sample.
pub fn fit_fz(sample: &Sample, penalty: Penalty, cfg: &NuisanceConfig, seed: u64) -> Result<FzFit> {
    let markets = sample.markets();
    let rows = pool(&markets);
    let (dx, dz) = (rows.x.ncols(), rows.z.ncols());
    let theory = theory_for(sample, cfg);
    let mut pi_hat = DMatrix::zeros(dz, dx);
    let mut lambdas = Vec::with_capacity(dz);
    for i in 0..dz {
        let prob = DesignProblem::new(rows.x.clone(), rows.z.column(i).into_owned())?;
        let (lambda, cv) = resolve_lasso(penalty, theory.pi[i], cfg, mix_seed(seed, i as u64));
        let sol = fit_lasso(&prob, lambda, cv, &cfg.lasso)?;
        pi_hat.row_mut(i).copy_from(&sol.coef.transpose());
        lambdas.push(sol.lambda);
    }
    Ok(FzFit { pi_hat, lambdas })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpFit {
    pub beta_px: DVector<f64>,
    pub beta_pz: DVector<f64>,
    pub lambda: f64,
}

impl FpFit {
    pub fn predict(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> DVector<f64> {
        x * &self.beta_px + z * &self.beta_pz
    }
}

/// Lasso of price on `(x', z')'`, pooled over the sample.
pub fn fit_fp(sample: &Sample, penalty: Penalty, cfg: &NuisanceConfig, seed: u64) -> Result<FpFit> {
    let markets = sample.markets();
    let rows = pool(&markets);
    let (dx, dz) = (rows.x.ncols(), rows.z.ncols());
    let mut design = DMatrix::zeros(rows.x.nrows(), dx + dz);
    design.columns_mut(0, dx).copy_from(&rows.x);
    design.columns_mut(dx, dz).copy_from(&rows.z);
    let prob = DesignProblem::new(design, rows.p)?;
    let (lambda, cv) = resolve_lasso(penalty, theory_for(sample, cfg).p, cfg, seed);
    let sol = fit_lasso(&prob, lambda, cv, &cfg.lasso)?;
    Ok(FpFit {
        beta_px: sol.coef.rows(0, dx).into_owned(),
        beta_pz: sol.coef.rows(dx, dz).into_owned(),
        lambda: sol.lambda,
    })
}

/// Pieces of the Step A moment `g(theta) = c(sigma) - B (alpha, beta')'`
/// with instruments `z~ = (x', z')'`.
struct StepAMoments<'c, 'a> {
    sample: Sample<'c, 'a>,
    /// `z~' / n`, (d_x + d_z) x n.
    zt_scaled: DMatrix<f64>,
    /// `(1/n) sum z~ (p, x')`, (d_x + d_z) x (1 + d_x).
    b: DMatrix<f64>,
}

impl<'c, 'a> StepAMoments<'c, 'a> {
    fn new(sample: Sample<'c, 'a>) -> Self {
        let markets = sample.markets();
        let rows = pool(&markets);
        let (n, dx, dz) = (rows.x.nrows(), rows.x.ncols(), rows.z.ncols());
        let mut zt = DMatrix::zeros(dx + dz, n);
        zt.rows_mut(0, dx).copy_from(&rows.x.transpose());
        zt.rows_mut(dx, dz).copy_from(&rows.z.transpose());
        zt /= n as f64;
        let mut r = DMatrix::zeros(n, 1 + dx);
        r.column_mut(0).copy_from(&rows.p);
        r.columns_mut(1, dx).copy_from(&rows.x);
        let b = &zt * r;
        Self {
            sample,
            zt_scaled: zt,
            b,
        }
    }

    fn c(&self, sigma: f64) -> Result<DVector<f64>> {
        Ok(&self.zt_scaled * self.sample.utilities(sigma)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAFit {
    pub sigma: f64,
    pub alpha: f64,
    pub beta: DVector<f64>,
    pub lambda: f64,
    /// Penalised sup-norm objective at the returned point.
    pub objective: f64,
    pub evaluations: usize,
}

fn profile_step_a(moments: &StepAMoments, lambda: f64, search: &GridSearch) -> Result<StepAFit> {
    let mut solver = LinfL1Solver::new(&moments.b, lambda)?;
    let outcome = minimize_scalar(search, |sigma| Ok(solver.solve(&moments.c(sigma)?)?.objective))?;
    let sol = solver.solve(&moments.c(outcome.argmin)?)?;
    let dx = moments.b.ncols() - 1;
    Ok(StepAFit {
        sigma: outcome.argmin,
        alpha: sol.gamma[0],
        beta: sol.gamma.rows(1, dx).into_owned(),
        lambda,
        objective: sol.objective,
        evaluations: outcome.evaluations,
    })
}

/// Market-level cross-validation of the Step A penalty over the sample.
pub fn cross_validate_step_a(sample: &Sample, cfg: &NuisanceConfig, seed: u64) -> Result<f64> {
    let k = cfg.step_a_cv.folds.min(sample.len());
    if k < 2 {
        return Err(HdBlpError::InvalidArgument(
            "Step A cross-validation needs at least 2 markets".into(),
        ));
    }
    let full = StepAMoments::new(*sample);
    let lmax = full.b.amax();
    let grid = geometric_grid(lmax, cfg.step_a_cv.grid_ratio, cfg.step_a_cv.grid_points);
    let folds = shuffled_folds(sample.len(), k, seed);
    let search = GridSearch {
        points: cfg.step_a_cv.sigma_points,
        refine_tol: 0.0,
        ..cfg.sigma_search
    };
    let mut splits = Vec::with_capacity(k);
    for f in 0..k {
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (pos, &t) in sample.indices().iter().enumerate() {
            if folds[pos] == f {
                held.push(t);
            } else {
                train.push(t);
            }
        }
        splits.push((train, held));
    }
    let mut best: Option<(f64, f64)> = None;
    for &lambda in &grid {
        let mut total = 0.0;
        for (train, held) in &splits {
            let train_m = StepAMoments::new(Sample::new(sample.cache(), train)?);
            let held_m = StepAMoments::new(Sample::new(sample.cache(), held)?);
            let fit = profile_step_a(&train_m, lambda, &search)?;
            let mut gamma = DVector::zeros(fit.beta.len() + 1);
            gamma[0] = fit.alpha;
            gamma.rows_mut(1, fit.beta.len()).copy_from(&fit.beta);
            total += (held_m.c(fit.sigma)? - &held_m.b * gamma).amax();
        }
        let score = total / k as f64;
        log::debug!("step A cv: lambda {lambda:.4e} held-out {score:.6e}");
        // Grid is descending, so strict improvement keeps the larger penalty on ties.
        if best.is_none_or(|(_, s)| score < s) {
            best = Some((lambda, score));
        }
    }
    Ok(best.expect("grid is nonempty").0)
}

/// Profile `min_gamma |c(sigma) - B gamma|_inf + lambda |gamma|_1` over the
/// sigma search.
pub fn step_a(sample: &Sample, penalty: Penalty, cfg: &NuisanceConfig, seed: u64) -> Result<StepAFit> {
    let lambda = match penalty {
        Penalty::Fixed(l) => l,
        Penalty::Theoretical => theory_for(sample, cfg).theta,
        Penalty::CrossValidated => cross_validate_step_a(sample, cfg, seed)?,
    };
    profile_step_a(&StepAMoments::new(*sample), lambda, &cfg.sigma_search)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepBFit {
    pub alpha: f64,
    pub beta: DVector<f64>,
    pub lambda: f64,
}

/// Lasso of `y(sigma~)` on `(f_p(x, z), x')`, pooled over the sample.
pub fn step_b(
    sample: &Sample,
    sigma_tilde: f64,
    fp: &FpFit,
    penalty: Penalty,
    cfg: &NuisanceConfig,
    seed: u64,
) -> Result<StepBFit> {
    let markets = sample.markets();
    let rows = pool(&markets);
    let (n, dx) = (rows.x.nrows(), rows.x.ncols());
    if fp.beta_px.len() != dx || fp.beta_pz.len() != rows.z.ncols() {
        return Err(HdBlpError::dim("price fit coefficients", dx + rows.z.ncols(), fp.beta_px.len() + fp.beta_pz.len()));
    }
    let mut design = DMatrix::zeros(n, 1 + dx);
    design.column_mut(0).copy_from(&fp.predict(&rows.x, &rows.z));
    design.columns_mut(1, dx).copy_from(&rows.x);
    let prob = DesignProblem::new(design, sample.utilities(sigma_tilde)?)?;
    let (lambda, cv) = resolve_lasso(penalty, theory_for(sample, cfg).beta, cfg, seed);
    let sol = fit_lasso(&prob, lambda, cv, &cfg.lasso)?;
    Ok(StepBFit {
        alpha: sol.coef[0],
        beta: sol.coef.rows(1, dx).into_owned(),
        lambda: sol.lambda,
    })
}

/// All nuisance estimates from one training sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceFit {
    /// Group whose complement was used; `None` for a full-sample fit.
    pub fold: Option<usize>,
    pub pi_hat: DMatrix<f64>,
    pub beta_px: DVector<f64>,
    pub beta_pz: DVector<f64>,
    pub sigma_tilde: f64,
    pub alpha_tilde: f64,
    pub beta_tilde: DVector<f64>,
    pub alpha_hat: f64,
    pub beta_hat: DVector<f64>,
    pub lambdas: LambdaRecord,
}

impl NuisanceFit {
    pub fn is_finite(&self) -> bool {
        let scalars = [self.sigma_tilde, self.alpha_tilde, self.alpha_hat];
        scalars.iter().all(|v| v.is_finite())
            && self
                .pi_hat
                .iter()
                .chain(self.beta_px.iter())
                .chain(self.beta_pz.iter())
                .chain(self.beta_tilde.iter())
                .chain(self.beta_hat.iter())
                .all(|v| v.is_finite())
    }
}

/// Fit every nuisance on the given sample. `tag` separates CV seeds between
/// samples.
pub fn fit_sample(
    sample: &Sample,
    penalties: &Penalties,
    cfg: &NuisanceConfig,
    tag: u64,
) -> Result<NuisanceFit> {
    let seed = mix_seed(cfg.cv_seed, tag);
    let fz = fit_fz(sample, penalties.pi, cfg, mix_seed(seed, 1))?;
    let fp = fit_fp(sample, penalties.p, cfg, mix_seed(seed, 2))?;
    let a = step_a(sample, penalties.theta, cfg, mix_seed(seed, 3))?;
    let b = step_b(sample, a.sigma, &fp, penalties.beta, cfg, mix_seed(seed, 4))?;
    let fit = NuisanceFit {
        fold: None,
        pi_hat: fz.pi_hat,
        beta_px: fp.beta_px,
        beta_pz: fp.beta_pz,
        sigma_tilde: a.sigma,
        alpha_tilde: a.alpha,
        beta_tilde: a.beta,
        alpha_hat: b.alpha,
        beta_hat: b.beta,
        lambdas: LambdaRecord {
            pi: fz.lambdas,
            p: fp.lambda,
            theta: a.lambda,
            beta: b.lambda,
        },
    };
    if !fit.is_finite() {
        return Err(HdBlpError::NonFinite("nuisance estimates"));
    }
    Ok(fit)
}

/// Nuisances for group `fold`, estimated on its complement.
pub fn fit_fold(
    cache: &UtilityCache,
    plan: &FoldPlan,
    fold: usize,
    penalties: &Penalties,
    cfg: &NuisanceConfig,
) -> Result<NuisanceFit> {
    if plan.markets() != cache.markets().len() {
        return Err(HdBlpError::dim("fold plan markets", cache.markets().len(), plan.markets()));
    }
    if fold >= plan.groups() {
        return Err(HdBlpError::InvalidArgument(format!(
            "fold {fold} out of range for {} groups",
            plan.groups()
        )));
    }
    let complement = plan.complement(fold);
    if complement.is_empty() {
        return Err(HdBlpError::InvalidArgument(
            "a single group leaves no markets to fit nuisances on".into(),
        ));
    }
    let sample = Sample::new(cache, &complement)?;
    let mut fit = fit_sample(&sample, penalties, cfg, fold as u64 + 1)?;
    fit.fold = Some(fold);
    Ok(fit)
}

/// Nuisances estimated on every market.
pub fn fit_full(cache: &UtilityCache, penalties: &Penalties, cfg: &NuisanceConfig) -> Result<NuisanceFit> {
    let all: Vec<usize> = (0..cache.markets().len()).collect();
    fit_sample(&Sample::new(cache, &all)?, penalties, cfg, 0)
}

/// One fit per group, each on that group's complement.
pub fn fit_cross(
    cache: &UtilityCache,
    plan: &FoldPlan,
    penalties: &Penalties,
    cfg: &NuisanceConfig,
) -> Result<Vec<NuisanceFit>> {
    (0..plan.groups())
        .map(|l| fit_fold(cache, plan, l, penalties, cfg))
        .collect()
}
