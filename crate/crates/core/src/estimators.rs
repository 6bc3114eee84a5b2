//! The six estimators of `(sigma, alpha)` behind one interface.
//!
//! Feasible estimators see only observables. Oracle estimators additionally
//! receive the simulation truth, through a separate entry point.

use std::cell::OnceCell;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dgp::{Dataset, DatasetTruth};
use crate::error::{HdBlpError, Result};
use crate::market::{check_panel, MarketData, UtilityCache};
use crate::nuisance::{
    cross_validate_step_a, fit_cross, fit_full, make_folds, FoldMode, FoldPlan, LambdaRecord,
    NuisanceConfig, NuisanceFit, Penalties, Penalty, Sample,
};
use crate::orthogonal::{
    asymptotic_se, minimize_gmm, optimal_weight, two_sided_pvalue, GmmFit, GmmOptions,
    Inference, MarketMoment, MomentSystem, ThetaOne, WeightMatrix,
};
use crate::shares::{InversionOptions, QuadratureRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorKind {
    Preliminary,
    NonOrthogonal,
    NeymanOrthogonal,
    NeymanOrthogonalOpt,
    Oracle1,
    Oracle2,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::Preliminary,
        EstimatorKind::NonOrthogonal,
        EstimatorKind::NeymanOrthogonal,
        EstimatorKind::NeymanOrthogonalOpt,
        EstimatorKind::Oracle1,
        EstimatorKind::Oracle2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Preliminary => "Preliminary",
            EstimatorKind::NonOrthogonal => "NonOrthogonal",
            EstimatorKind::NeymanOrthogonal => "NeymanOrthogonal",
            EstimatorKind::NeymanOrthogonalOpt => "NeymanOrthogonalOpt",
            EstimatorKind::Oracle1 => "Oracle1",
            EstimatorKind::Oracle2 => "Oracle2",
        }
    }

    pub fn is_oracle(self) -> bool {
        matches!(self, EstimatorKind::Oracle1 | EstimatorKind::Oracle2)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = HdBlpError;

    /// Accepts the display name or a kebab/snake form, case-insensitively.
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .trim()
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        let kind = match key.as_str() {
            "preliminary" | "prelim" => EstimatorKind::Preliminary,
            "nonorthogonal" | "nonorth" => EstimatorKind::NonOrthogonal,
            "neymanorthogonal" | "no" => EstimatorKind::NeymanOrthogonal,
            "neymanorthogonalopt" | "noopt" => EstimatorKind::NeymanOrthogonalOpt,
            "oracle1" => EstimatorKind::Oracle1,
            "oracle2" => EstimatorKind::Oracle2,
            _ => {
                return Err(HdBlpError::InvalidArgument(format!(
                    "unknown estimator {s:?}; expected one of {}",
                    EstimatorKind::ALL.map(|k| k.name()).join(", ")
                )))
            }
        };
        Ok(kind)
    }
}

/// Parse a comma-separated estimator list; `all` selects every kind.
pub fn parse_estimator_list(list: &str) -> Result<Vec<EstimatorKind>> {
    if list.trim().eq_ignore_ascii_case("all") {
        return Ok(EstimatorKind::ALL.to_vec());
    }
    let mut kinds = Vec::new();
    for item in list.split(',').filter(|s| !s.trim().is_empty()) {
        let k: EstimatorKind = item.parse()?;
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    if kinds.is_empty() {
        return Err(HdBlpError::InvalidArgument("empty estimator list".into()));
    }
    Ok(kinds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub fold_groups: usize,
    pub fold_mode: FoldMode,
    /// Used only by the shuffled fold mode.
    pub fold_seed: u64,
    /// Choose the Step A penalty once on the full sample and reuse it for
    /// every fold, instead of cross-validating inside each fold.
    pub share_step_a_lambda: bool,
    pub quadrature_nodes: usize,
    pub inversion: InversionOptions,
    pub gmm: GmmOptions,
    pub nuisance: NuisanceConfig,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            fold_groups: 6,
            fold_mode: FoldMode::Contiguous,
            fold_seed: 0,
            share_step_a_lambda: true,
            quadrature_nodes: crate::shares::DEFAULT_NODES,
            inversion: InversionOptions::default(),
            gmm: GmmOptions::default(),
            nuisance: NuisanceConfig::default(),
        }
    }
}

impl EstimationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.fold_groups < 2 {
            return Err(HdBlpError::Config("cross-fitting needs at least 2 groups".into()));
        }
        if self.quadrature_nodes == 0 {
            return Err(HdBlpError::Config("quadrature needs at least one node".into()));
        }
        if !(self.inversion.tol > 0.0) || self.inversion.max_iter == 0 {
            return Err(HdBlpError::Config("inversion tolerance and iteration cap must be positive".into()));
        }
        if self.gmm.sigma_points == 0 || !(self.gmm.refine_tol >= 0.0) {
            return Err(HdBlpError::Config("invalid GMM search settings".into()));
        }
        self.gmm.bounds.validate()?;
        self.nuisance.validate()
    }

    pub fn quadrature(&self) -> Result<QuadratureRule> {
        QuadratureRule::gauss_hermite(self.quadrature_nodes)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// GMM objective, or the penalised Step A objective for the preliminary fit.
    pub objective: f64,
    pub evaluations: usize,
    pub instruments: usize,
    pub markets: usize,
    /// Penalties of every nuisance fit used, in group order.
    pub lambdas: Vec<LambdaRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub estimator: EstimatorKind,
    pub theta: ThetaOne,
    pub se: [f64; 2],
    pub vcov: [[f64; 2]; 2],
    /// Against the null supplied to [`EstimateReport::test_against`].
    pub tstats: Option<[f64; 2]>,
    pub pvalues: Option<[f64; 2]>,
    pub diagnostics: Diagnostics,
}

impl EstimateReport {
    fn new(estimator: EstimatorKind, theta: ThetaOne, inf: &Inference, diagnostics: Diagnostics) -> Result<Self> {
        let se = [inf.se[0], inf.se[1]];
        if !se.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(HdBlpError::Estimation(format!(
                "{estimator}: degenerate standard errors {se:?}"
            )));
        }
        Ok(Self {
            estimator,
            theta,
            se,
            vcov: [
                [inf.vcov[(0, 0)], inf.vcov[(0, 1)]],
                [inf.vcov[(1, 0)], inf.vcov[(1, 1)]],
            ],
            tstats: None,
            pvalues: None,
            diagnostics,
        })
    }

    /// Fill t-statistics and two-sided p-values for `H0: (sigma, alpha) = null`.
    pub fn test_against(&mut self, null: [f64; 2]) {
        let est = self.theta.as_array();
        let t = [
            (est[0] - null[0]) / self.se[0],
            (est[1] - null[1]) / self.se[1],
        ];
        self.pvalues = Some([two_sided_pvalue(t[0]), two_sided_pvalue(t[1])]);
        self.tstats = Some(t);
    }

    pub fn estimate(&self) -> [f64; 2] {
        self.theta.as_array()
    }
}

type Cached<T> = OnceCell<std::result::Result<T, String>>;

fn cached<'s, T>(cell: &'s Cached<T>, f: impl FnOnce() -> Result<T>) -> Result<&'s T> {
    cell.get_or_init(|| f().map_err(|e| e.to_string()))
        .as_ref()
        .map_err(|e| HdBlpError::Estimation(e.clone()))
}

/// Shared state for running several estimators on one dataset: the
/// inverted-utility cache, the fold plan, and lazily computed nuisances.
pub struct EstimationSession<'a> {
    cfg: &'a EstimationConfig,
    cache: UtilityCache<'a>,
    plan: FoldPlan,
    penalties: Cached<Penalties>,
    full: Cached<NuisanceFit>,
    cross: Cached<Vec<NuisanceFit>>,
    orthogonal_first: Cached<GmmFit>,
}

impl<'a> EstimationSession<'a> {
    pub fn new(markets: &'a [MarketData], quad: &'a QuadratureRule, cfg: &'a EstimationConfig) -> Result<Self> {
        cfg.validate()?;
        check_panel(markets)?;
        let plan = make_folds(markets.len(), cfg.fold_groups, cfg.fold_mode, cfg.fold_seed)?;
        Ok(Self {
            cfg,
            cache: UtilityCache::new(markets, quad, cfg.inversion),
            plan,
            penalties: OnceCell::new(),
            full: OnceCell::new(),
            cross: OnceCell::new(),
            orthogonal_first: OnceCell::new(),
        })
    }

    pub fn plan(&self) -> &FoldPlan {
        &self.plan
    }

    pub fn cache(&self) -> &UtilityCache<'a> {
        &self.cache
    }

    fn markets(&self) -> &'a [MarketData] {
        self.cache.markets()
    }

    pub fn penalties(&self) -> Result<&Penalties> {
        cached(&self.penalties, || {
            let ncfg = &self.cfg.nuisance;
            let mut p = ncfg.penalties();
            if self.cfg.share_step_a_lambda && p.theta == Penalty::CrossValidated {
                let all: Vec<usize> = (0..self.markets().len()).collect();
                let sample = Sample::new(&self.cache, &all)?;
                p.theta = Penalty::Fixed(cross_validate_step_a(&sample, ncfg, ncfg.cv_seed)?);
            }
            Ok(p)
        })
    }

    /// Nuisances fitted on every market.
    pub fn full_fit(&self) -> Result<&NuisanceFit> {
        cached(&self.full, || fit_full(&self.cache, self.penalties()?, &self.cfg.nuisance))
    }

    /// One nuisance fit per group, each on the group's complement.
    pub fn cross_fits(&self) -> Result<&[NuisanceFit]> {
        cached(&self.cross, || {
            fit_cross(&self.cache, &self.plan, self.penalties()?, &self.cfg.nuisance)
        })
        .map(Vec::as_slice)
    }

    fn diagnostics(&self, fit: &GmmFit, instruments: usize, lambdas: Vec<LambdaRecord>) -> Diagnostics {
        Diagnostics {
            objective: fit.objective,
            evaluations: fit.evaluations,
            instruments,
            markets: self.markets().len(),
            lambdas,
        }
    }

    /// Run a feasible estimator; oracle kinds are rejected.
    pub fn run_feasible(&self, kind: EstimatorKind) -> Result<EstimateReport> {
        match kind {
            EstimatorKind::Preliminary => self.preliminary(),
            EstimatorKind::NonOrthogonal => self.non_orthogonal(),
            EstimatorKind::NeymanOrthogonal => self.neyman_orthogonal(),
            EstimatorKind::NeymanOrthogonalOpt => self.neyman_orthogonal_opt(),
            EstimatorKind::Oracle1 | EstimatorKind::Oracle2 => Err(HdBlpError::InvalidArgument(
                format!("{kind} needs the simulation truth"),
            )),
        }
    }

    /// Run an oracle estimator with the known nuisance parameters.
    pub fn run_oracle(&self, kind: EstimatorKind, truth: &DatasetTruth) -> Result<EstimateReport> {
        if truth.shocks.len() != self.markets().len() {
            return Err(HdBlpError::dim("truth markets", self.markets().len(), truth.shocks.len()));
        }
        match kind {
            EstimatorKind::Oracle1 => self.oracle1(truth),
            EstimatorKind::Oracle2 => self.oracle2(truth),
            _ => Err(HdBlpError::InvalidArgument(format!("{kind} is not an oracle estimator"))),
        }
    }

    pub fn run(&self, kind: EstimatorKind, truth: Option<&DatasetTruth>) -> Result<EstimateReport> {
        if kind.is_oracle() {
            let truth = truth.ok_or_else(|| {
                HdBlpError::InvalidArgument(format!("{kind} needs a truth sidecar"))
            })?;
            self.run_oracle(kind, truth)
        } else {
            self.run_feasible(kind)
        }
    }

    /// Moments with instruments `(x', z')'` and offsets `x' beta`.
    fn stacked_moment(&self, beta: &DVector<f64>) -> Result<MomentSystem<'_, 'a>> {
        let parts = self
            .markets()
            .iter()
            .map(|m| {
                let (j, dx, dz) = (m.products(), m.dim_x(), m.dim_z());
                let mut h = DMatrix::zeros(j, dx + dz);
                h.columns_mut(0, dx).copy_from(&m.x);
                h.columns_mut(dx, dz).copy_from(&m.z);
                MarketMoment {
                    instruments: h,
                    offset: &m.x * beta,
                }
            })
            .collect();
        MomentSystem::new(&self.cache, parts)
    }

    fn gmm_report(
        &self,
        kind: EstimatorKind,
        system: &MomentSystem,
        w: &WeightMatrix,
        lambdas: Vec<LambdaRecord>,
    ) -> Result<EstimateReport> {
        let fit = minimize_gmm(system, w, &self.cfg.gmm)?;
        let inf = asymptotic_se(system, &fit.theta, w)?;
        EstimateReport::new(kind, fit.theta, &inf, self.diagnostics(&fit, system.dim(), lambdas))
    }

    fn preliminary(&self) -> Result<EstimateReport> {
        let full = self.full_fit()?;
        let theta = ThetaOne::new(full.sigma_tilde, full.alpha_tilde, self.cfg.gmm.bounds)?;
        let system = self.stacked_moment(&full.beta_tilde)?;
        let w = WeightMatrix::identity(system.dim());
        let inf = asymptotic_se(&system, &theta, &w)?;
        let diag = Diagnostics {
            objective: system
                .mean_moment(theta.sigma, theta.alpha)?
                .amax(),
            evaluations: 0,
            instruments: system.dim(),
            markets: self.markets().len(),
            lambdas: vec![full.lambdas.clone()],
        };
        EstimateReport::new(EstimatorKind::Preliminary, theta, &inf, diag)
    }

    fn non_orthogonal(&self) -> Result<EstimateReport> {
        let full = self.full_fit()?;
        let system = self.stacked_moment(&full.beta_hat)?;
        let w = WeightMatrix::identity(system.dim());
        self.gmm_report(EstimatorKind::NonOrthogonal, &system, &w, vec![full.lambdas.clone()])
    }

    fn orthogonal_system(&self) -> Result<MomentSystem<'_, 'a>> {
        MomentSystem::orthogonal(&self.cache, &self.plan, self.cross_fits()?)
    }

    fn fold_lambdas(&self) -> Result<Vec<LambdaRecord>> {
        Ok(self.cross_fits()?.iter().map(|f| f.lambdas.clone()).collect())
    }

    fn orthogonal_first_stage(&self, system: &MomentSystem) -> Result<&GmmFit> {
        cached(&self.orthogonal_first, || {
            minimize_gmm(system, &WeightMatrix::identity(system.dim()), &self.cfg.gmm)
        })
    }

    fn neyman_orthogonal(&self) -> Result<EstimateReport> {
        let system = self.orthogonal_system()?;
        let w = WeightMatrix::identity(system.dim());
        let fit = self.orthogonal_first_stage(&system)?;
        let inf = asymptotic_se(&system, &fit.theta, &w)?;
        let diag = self.diagnostics(fit, system.dim(), self.fold_lambdas()?);
        EstimateReport::new(EstimatorKind::NeymanOrthogonal, fit.theta, &inf, diag)
    }

    fn neyman_orthogonal_opt(&self) -> Result<EstimateReport> {
        let system = self.orthogonal_system()?;
        let first = self.orthogonal_first_stage(&system)?.theta;
        let w = optimal_weight(&system, &first)?;
        self.gmm_report(EstimatorKind::NeymanOrthogonalOpt, &system, &w, self.fold_lambdas()?)
    }

    fn oracle1(&self, truth: &DatasetTruth) -> Result<EstimateReport> {
        let beta = truth.record.beta_vector();
        let support = &truth.record.beta_support;
        let parts = self
            .markets()
            .iter()
            .map(|m| {
                let (j, dz) = (m.products(), m.dim_z());
                let mut h = DMatrix::zeros(j, support.len() + dz);
                for (c, &k) in support.iter().enumerate() {
                    h.set_column(c, &m.x.column(k));
                }
                h.columns_mut(support.len(), dz).copy_from(&m.z);
                Ok(MarketMoment {
                    instruments: h,
                    offset: oracle_offset(m, &beta)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let system = MomentSystem::new(&self.cache, parts)?;
        let w = WeightMatrix::identity(system.dim());
        self.gmm_report(EstimatorKind::Oracle1, &system, &w, Vec::new())
    }

    fn oracle2(&self, truth: &DatasetTruth) -> Result<EstimateReport> {
        let beta = truth.record.beta_vector();
        let parts = self
            .markets()
            .iter()
            .zip(&truth.shocks)
            .map(|(m, shocks)| {
                let j = m.products();
                if shocks.eps_z.len() != j {
                    return Err(HdBlpError::dim("instrument shocks", j, shocks.eps_z.len()));
                }
                let dz = shocks.eps_z[0].len();
                let h = DMatrix::from_fn(j, dz, |r, c| shocks.eps_z[r][c]);
                Ok(MarketMoment {
                    instruments: h,
                    offset: oracle_offset(m, &beta)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let system = MomentSystem::new(&self.cache, parts)?;
        let w = WeightMatrix::identity(system.dim());
        self.gmm_report(EstimatorKind::Oracle2, &system, &w, Vec::new())
    }
}

fn oracle_offset(m: &MarketData, beta: &DVector<f64>) -> Result<DVector<f64>> {
    if beta.len() != m.dim_x() {
        return Err(HdBlpError::dim("true coefficients", m.dim_x(), beta.len()));
    }
    Ok(&m.x * beta)
}

/// Run one estimator on a dataset. When the dataset carries its truth, the
/// report's tests are against the true `(sigma, alpha)`.
pub fn run_estimator(kind: EstimatorKind, data: &Dataset, cfg: &EstimationConfig) -> Result<EstimateReport> {
    let quad = cfg.quadrature()?;
    let session = EstimationSession::new(&data.markets, &quad, cfg)?;
    let mut report = session.run(kind, data.truth.as_ref())?;
    if let Some(t) = &data.truth {
        report.test_against([t.record.sigma, t.record.alpha]);
    }
    Ok(report)
}
