//! Moment functions linear in `(y(sigma), p)`, the profiled GMM objective
//! over `(sigma, alpha)`, optimal weighting and sandwich inference.
//!
//! Every moment here has the form
//! `psi_t(sigma, alpha) = (1/J) sum_j h_jt (y_jt(sigma) - alpha p_jt - u_jt)`
//! with market-specific instruments `h_jt` and offsets `u_jt`. The
//! orthogonal moment uses `h = z - Pi x` and `u = x' beta`.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{HdBlpError, Result};
use crate::market::{MarketData, UtilityCache};
use crate::nuisance::{FoldPlan, NuisanceFit};
use crate::optim::{minimize_scalar, GridSearch};
use crate::shares::{dy_dsigma_at, invert_shares, InversionOptions, QuadratureRule};

/// Compact parameter set for `(sigma, alpha)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParameterBox {
    pub sigma: (f64, f64),
    pub alpha: (f64, f64),
}

impl Default for ParameterBox {
    fn default() -> Self {
        Self {
            sigma: (0.0, 3.0),
            alpha: (-10.0, 10.0),
        }
    }
}

impl ParameterBox {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok(self.sigma) || !ok(self.alpha) || self.sigma.0 < 0.0 {
            return Err(HdBlpError::Config(format!("invalid parameter box {self:?}")));
        }
        Ok(())
    }

    pub fn contains(&self, sigma: f64, alpha: f64) -> bool {
        (self.sigma.0..=self.sigma.1).contains(&sigma) && (self.alpha.0..=self.alpha.1).contains(&alpha)
    }
}

/// The structural parameters `(sigma, alpha)` inside their box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaOne {
    pub sigma: f64,
    pub alpha: f64,
    pub bounds: ParameterBox,
}

impl ThetaOne {
    pub fn new(sigma: f64, alpha: f64, bounds: ParameterBox) -> Result<Self> {
        if !bounds.contains(sigma, alpha) {
            return Err(HdBlpError::InvalidArgument(format!(
                "({sigma}, {alpha}) lies outside {bounds:?}"
            )));
        }
        Ok(Self { sigma, alpha, bounds })
    }

    pub fn as_array(&self) -> [f64; 2] {
        [self.sigma, self.alpha]
    }
}

/// Symmetric positive definite weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if !w.is_square() || w.nrows() == 0 {
            return Err(HdBlpError::InvalidArgument("weight matrix must be square and nonempty".into()));
        }
        let scale = w.amax().max(1.0);
        if (&w - w.transpose()).amax() > 1e-10 * scale {
            return Err(HdBlpError::InvalidArgument("weight matrix is not symmetric".into()));
        }
        if w.clone().cholesky().is_none() {
            return Err(HdBlpError::Singular("weight matrix is not positive definite"));
        }
        Ok(Self(w))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(&self.0 * c)
    }
}

/// One market's instruments (J x q) and utility offsets (length J).
#[derive(Clone, Debug, PartialEq)]
pub struct MarketMoment {
    pub instruments: DMatrix<f64>,
    pub offset: DVector<f64>,
}

/// Orthogonal moment for one market:
/// `(1/J) sum_j (z_j - Pi x_j) (y_j(sigma) - alpha p_j - x_j' beta)`.
pub fn psi_moment(
    market: &MarketData,
    sigma: f64,
    alpha: f64,
    pi_hat: &DMatrix<f64>,
    beta_hat: &DVector<f64>,
    quad: &QuadratureRule,
    opts: &InversionOptions,
) -> Result<DVector<f64>> {
    let y = invert_shares(&market.shares, &market.p, sigma, quad, opts)?.y.into_inner();
    let m = orthogonal_market_moment(market, pi_hat, beta_hat)?;
    let resid = DVector::from_iterator(
        y.len(),
        (0..y.len()).map(|j| y[j] - alpha * market.p[j] - m.offset[j]),
    );
    Ok(m.instruments.transpose() * resid / y.len() as f64)
}

pub fn orthogonal_market_moment(
    market: &MarketData,
    pi_hat: &DMatrix<f64>,
    beta_hat: &DVector<f64>,
) -> Result<MarketMoment> {
    if pi_hat.nrows() != market.dim_z() || pi_hat.ncols() != market.dim_x() {
        return Err(HdBlpError::dim(
            "instrument projection",
            market.dim_z() * market.dim_x(),
            pi_hat.nrows() * pi_hat.ncols(),
        ));
    }
    if beta_hat.len() != market.dim_x() {
        return Err(HdBlpError::dim("characteristic coefficients", market.dim_x(), beta_hat.len()));
    }
    Ok(MarketMoment {
        instruments: &market.z - &market.x * pi_hat.transpose(),
        offset: &market.x * beta_hat,
    })
}

/// A moment system over every market of a dataset.
pub struct MomentSystem<'c, 'a> {
    cache: &'c UtilityCache<'a>,
    parts: Vec<MarketMoment>,
    /// `E_T[(1/J) h' p]`
    b: DVector<f64>,
    /// `E_T[(1/J) h' u]`
    hu: DVector<f64>,
}

impl<'c, 'a> MomentSystem<'c, 'a> {
    pub fn new(cache: &'c UtilityCache<'a>, parts: Vec<MarketMoment>) -> Result<Self> {
        let markets = cache.markets();
        if parts.len() != markets.len() || parts.is_empty() {
            return Err(HdBlpError::dim("market moments", markets.len(), parts.len()));
        }
        let q = parts[0].instruments.ncols();
        if q == 0 {
            return Err(HdBlpError::InvalidArgument("moment has no instruments".into()));
        }
        let mut b = DVector::zeros(q);
        let mut hu = DVector::zeros(q);
        for (m, part) in markets.iter().zip(&parts) {
            let j = m.products();
            if part.instruments.nrows() != j || part.instruments.ncols() != q || part.offset.len() != j {
                return Err(HdBlpError::dim("moment rows", j, part.instruments.nrows()));
            }
            if part.instruments.iter().chain(part.offset.iter()).any(|v| !v.is_finite()) {
                return Err(HdBlpError::NonFinite("moment instruments"));
            }
            let jf = j as f64;
            b += part.instruments.transpose() * DVector::from_column_slice(&m.p) / jf;
            hu += part.instruments.transpose() * &part.offset / jf;
        }
        let t = markets.len() as f64;
        b /= t;
        hu /= t;
        Ok(Self { cache, parts, b, hu })
    }

    /// Cross-fitted orthogonal moment: market `t` uses the nuisances of its
    /// own group, `fits[plan.group_of(t)]`.
    pub fn orthogonal(cache: &'c UtilityCache<'a>, plan: &FoldPlan, fits: &[NuisanceFit]) -> Result<Self> {
        let markets = cache.markets();
        if plan.markets() != markets.len() {
            return Err(HdBlpError::dim("fold plan markets", markets.len(), plan.markets()));
        }
        if fits.len() != plan.groups() {
            return Err(HdBlpError::dim("fold fits", plan.groups(), fits.len()));
        }
        for (l, fit) in fits.iter().enumerate() {
            if fit.fold.is_some_and(|f| f != l) {
                return Err(HdBlpError::InvalidArgument(format!(
                    "fit for group {:?} supplied in position {l}",
                    fit.fold
                )));
            }
        }
        let parts = markets
            .iter()
            .enumerate()
            .map(|(t, m)| {
                let fit = &fits[plan.group_of(t)];
                orthogonal_market_moment(m, &fit.pi_hat, &fit.beta_hat)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(cache, parts)
    }

    pub fn cache(&self) -> &'c UtilityCache<'a> {
        self.cache
    }

    pub fn parts(&self) -> &[MarketMoment] {
        &self.parts
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    pub fn markets(&self) -> usize {
        self.parts.len()
    }

    /// `E_T[(1/J) h' (y(sigma) - u)]`
    pub fn a(&self, sigma: f64) -> Result<DVector<f64>> {
        let ys = self.cache.at(sigma)?;
        let mut a = DVector::zeros(self.dim());
        for (y, part) in ys.iter().zip(&self.parts) {
            a += part.instruments.transpose() * DVector::from_column_slice(y) / y.len() as f64;
        }
        Ok(a / self.parts.len() as f64 - &self.hu)
    }

    /// `E_T[(1/J) h' p]`
    pub fn b(&self) -> &DVector<f64> {
        &self.b
    }

    /// Mean moment `E_T psi_t(sigma, alpha)`.
    pub fn mean_moment(&self, sigma: f64, alpha: f64) -> Result<DVector<f64>> {
        Ok(self.a(sigma)? - &self.b * alpha)
    }

    /// Per-market moments `psi_t`, one column per market.
    pub fn market_moments(&self, sigma: f64, alpha: f64) -> Result<DMatrix<f64>> {
        let residuals = self.residuals(sigma, alpha)?;
        let mut out = DMatrix::zeros(self.dim(), self.parts.len());
        for (t, (part, r)) in self.parts.iter().zip(&residuals).enumerate() {
            out.set_column(t, &(part.instruments.transpose() * r / r.len() as f64));
        }
        Ok(out)
    }

    /// `y_jt(sigma) - alpha p_jt - u_jt` per market.
    pub fn residuals(&self, sigma: f64, alpha: f64) -> Result<Vec<DVector<f64>>> {
        let ys = self.cache.at(sigma)?;
        Ok(ys
            .iter()
            .zip(&self.parts)
            .zip(self.cache.markets())
            .map(|((y, part), m)| {
                DVector::from_iterator(y.len(), (0..y.len()).map(|j| y[j] - alpha * m.p[j] - part.offset[j]))
            })
            .collect())
    }
}

/// `m' W m` at the mean moment.
pub fn gmm_objective(system: &MomentSystem, sigma: f64, alpha: f64, w: &WeightMatrix) -> Result<f64> {
    if w.dim() != system.dim() {
        return Err(HdBlpError::dim("weight matrix", system.dim(), w.dim()));
    }
    let m = system.mean_moment(sigma, alpha)?;
    Ok(m.dot(&(w.matrix() * &m)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmOptions {
    pub bounds: ParameterBox,
    pub sigma_points: usize,
    pub refine_tol: f64,
}

impl Default for GmmOptions {
    fn default() -> Self {
        Self {
            bounds: ParameterBox::default(),
            sigma_points: 61,
            refine_tol: 1e-6,
        }
    }
}

impl GmmOptions {
    pub fn search(&self) -> GridSearch {
        GridSearch {
            lower: self.bounds.sigma.0,
            upper: self.bounds.sigma.1,
            points: self.sigma_points,
            refine_tol: self.refine_tol,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    pub theta: ThetaOne,
    pub objective: f64,
    pub evaluations: usize,
}

/// Minimiser of `(a - alpha b)' W (a - alpha b)` over `alpha` in its box.
pub fn profile_alpha(a: &DVector<f64>, b: &DVector<f64>, w: &WeightMatrix, bounds: (f64, f64)) -> f64 {
    let wb = w.matrix() * b;
    let denom = b.dot(&wb);
    let alpha = if denom > 0.0 { a.dot(&wb) / denom } else { 0.0 };
    alpha.clamp(bounds.0, bounds.1)
}

/// Minimise the GMM objective: closed-form `alpha` for each `sigma`, then a
/// grid and golden-section search over `sigma`.
pub fn minimize_gmm(system: &MomentSystem, w: &WeightMatrix, opts: &GmmOptions) -> Result<GmmFit> {
    opts.bounds.validate()?;
    if w.dim() != system.dim() {
        return Err(HdBlpError::dim("weight matrix", system.dim(), w.dim()));
    }
    let profiled = |sigma: f64| -> Result<(f64, f64)> {
        let a = system.a(sigma)?;
        let alpha = profile_alpha(&a, system.b(), w, opts.bounds.alpha);
        let m = a - system.b() * alpha;
        Ok((alpha, m.dot(&(w.matrix() * &m))))
    };
    let outcome = minimize_scalar(&opts.search(), |s| profiled(s).map(|(_, v)| v))?;
    let (alpha, objective) = profiled(outcome.argmin)?;
    Ok(GmmFit {
        theta: ThetaOne::new(outcome.argmin, alpha, opts.bounds)?,
        objective,
        evaluations: outcome.evaluations,
    })
}

/// Inverse of the mean outer product of the rows of `contributions`
/// (n x q), symmetrised; a ridge of `1e-10 trace / q` is added only when
/// the Cholesky factorisation fails.
pub fn weight_from_contributions(contributions: &DMatrix<f64>) -> Result<WeightMatrix> {
    let n = contributions.nrows();
    if n == 0 {
        return Err(HdBlpError::InvalidArgument("no moment contributions".into()));
    }
    let q = contributions.ncols();
    let s = contributions.transpose() * contributions / n as f64;
    let s = (&s + s.transpose()) * 0.5;
    let chol = s.clone().cholesky().or_else(|| {
        let ridge = 1e-10 * s.trace() / q as f64;
        log::warn!("moment covariance not positive definite; adding ridge {ridge:.3e}");
        (&s + DMatrix::identity(q, q) * ridge).cholesky()
    });
    let inv = chol
        .ok_or(HdBlpError::Singular("moment covariance"))?
        .inverse();
    WeightMatrix::new((&inv + inv.transpose()) * 0.5)
}

/// Contributions `h_jt (y_jt(sigma) - alpha p_jt - u_jt)` stacked by row.
pub fn moment_contributions(system: &MomentSystem, sigma: f64, alpha: f64) -> Result<DMatrix<f64>> {
    let residuals = system.residuals(sigma, alpha)?;
    let n: usize = residuals.iter().map(|r| r.len()).sum();
    let mut out = DMatrix::zeros(n, system.dim());
    let mut row = 0;
    for (part, r) in system.parts().iter().zip(&residuals) {
        for j in 0..r.len() {
            out.row_mut(row).copy_from(&(part.instruments.row(j) * r[j]));
            row += 1;
        }
    }
    Ok(out)
}

/// `W = (E_JT[phi phi'])^{-1}` at a first-stage estimate.
pub fn optimal_weight(system: &MomentSystem, first: &ThetaOne) -> Result<WeightMatrix> {
    weight_from_contributions(&moment_contributions(system, first.sigma, first.alpha)?)
}

/// `(G W G')^{-1} G W Omega W G' (G W G')^{-1} / T` for a 2 x q Jacobian.
pub fn sandwich(g: &DMatrix<f64>, w: &DMatrix<f64>, omega: &DMatrix<f64>, t: usize) -> Result<DMatrix<f64>> {
    let gw = g * w;
    let gwg = &gw * g.transpose();
    let eig = gwg.clone().symmetric_eigenvalues();
    if !(eig.min() > 1e-12 * eig.amax()) {
        return Err(HdBlpError::Singular("G W G'"));
    }
    let bread = gwg.try_inverse().ok_or(HdBlpError::Singular("G W G'"))?;
    let meat = &gw * omega * gw.transpose();
    let v = &bread * meat * &bread / t as f64;
    Ok((&v + v.transpose()) * 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Inference {
    pub vcov: Matrix2<f64>,
    pub se: Vector2<f64>,
    /// 2 x q Jacobian of the mean moment, rows for `(sigma, alpha)`.
    pub jacobian: DMatrix<f64>,
    pub omega: DMatrix<f64>,
}

/// Sandwich covariance at `theta` with
/// `G = E_JT[(dy/dsigma, -p)' h']` and `Omega = E_T[psi_t psi_t']`.
pub fn asymptotic_se(system: &MomentSystem, theta: &ThetaOne, w: &WeightMatrix) -> Result<Inference> {
    if w.dim() != system.dim() {
        return Err(HdBlpError::dim("weight matrix", system.dim(), w.dim()));
    }
    let cache = system.cache();
    let quad = cache.quadrature();
    let ys = cache.at(theta.sigma)?;
    let q = system.dim();
    let mut g = DMatrix::zeros(2, q);
    let mut rows = 0usize;
    for ((y, part), m) in ys.iter().zip(system.parts()).zip(cache.markets()) {
        let dy = dy_dsigma_at(y, &m.p, theta.sigma, quad)?;
        for j in 0..y.len() {
            let h = part.instruments.row(j);
            for k in 0..q {
                g[(0, k)] += dy[j] * h[k];
                g[(1, k)] -= m.p[j] * h[k];
            }
        }
        rows += y.len();
    }
    g /= rows as f64;
    let psi = system.market_moments(theta.sigma, theta.alpha)?;
    let t = system.markets();
    let omega = &psi * psi.transpose() / t as f64;
    let v = sandwich(&g, w.matrix(), &omega, t)?;
    let vcov = Matrix2::new(v[(0, 0)], v[(0, 1)], v[(1, 0)], v[(1, 1)]);
    let se = Vector2::new(vcov[(0, 0)].max(0.0).sqrt(), vcov[(1, 1)].max(0.0).sqrt());
    Ok(Inference {
        vcov,
        se,
        jacobian: g,
        omega,
    })
}

/// Two-sided normal p-value for a t-statistic.
pub fn two_sided_pvalue(t: f64) -> f64 {
    let n = Normal::standard();
    2.0 * n.sf(t.abs())
}
