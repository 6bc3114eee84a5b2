//! Observed market data and a per-dataset cache of inverted utilities.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{HdBlpError, Result};
use crate::shares::{invert_shares, invert_shares_from, InversionOptions, QuadratureRule, ShareVector};

/// One market's observables: J products with characteristics, prices,
/// instruments and inside shares.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketData {
    /// J x d_x characteristics.
    pub x: DMatrix<f64>,
    pub p: Vec<f64>,
    /// J x d_z instruments.
    pub z: DMatrix<f64>,
    pub shares: ShareVector,
}

impl MarketData {
    pub fn new(x: DMatrix<f64>, p: Vec<f64>, z: DMatrix<f64>, shares: ShareVector) -> Result<Self> {
        let j = shares.len();
        if x.nrows() != j {
            return Err(HdBlpError::dim("characteristics rows", j, x.nrows()));
        }
        if z.nrows() != j {
            return Err(HdBlpError::dim("instrument rows", j, z.nrows()));
        }
        if p.len() != j {
            return Err(HdBlpError::dim("prices", j, p.len()));
        }
        if x.iter().chain(z.iter()).chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(HdBlpError::NonFinite("market data"));
        }
        Ok(Self { x, p, z, shares })
    }

    pub fn products(&self) -> usize {
        self.p.len()
    }

    pub fn dim_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn dim_z(&self) -> usize {
        self.z.ncols()
    }
}

/// Check that every market shares the same J, d_x and d_z.
pub fn check_panel(markets: &[MarketData]) -> Result<(usize, usize, usize)> {
    let first = markets
        .first()
        .ok_or_else(|| HdBlpError::InvalidArgument("no markets".into()))?;
    let dims = (first.products(), first.dim_x(), first.dim_z());
    for m in markets {
        if m.products() != dims.0 {
            return Err(HdBlpError::dim("products per market", dims.0, m.products()));
        }
        if m.dim_x() != dims.1 {
            return Err(HdBlpError::dim("characteristics", dims.1, m.dim_x()));
        }
        if m.dim_z() != dims.2 {
            return Err(HdBlpError::dim("instruments", dims.2, m.dim_z()));
        }
    }
    Ok(dims)
}

/// Rows of the selected markets stacked product by product.
#[derive(Clone, Debug)]
pub struct PooledRows {
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub p: DVector<f64>,
}

pub fn pool(markets: &[&MarketData]) -> PooledRows {
    let j = markets.first().map_or(0, |m| m.products());
    let n = j * markets.len();
    let dx = markets.first().map_or(0, |m| m.dim_x());
    let dz = markets.first().map_or(0, |m| m.dim_z());
    let mut x = DMatrix::zeros(n, dx);
    let mut z = DMatrix::zeros(n, dz);
    let mut p = DVector::zeros(n);
    for (t, m) in markets.iter().enumerate() {
        let base = t * j;
        x.rows_mut(base, j).copy_from(&m.x);
        z.rows_mut(base, j).copy_from(&m.z);
        for k in 0..j {
            p[base + k] = m.p[k];
        }
    }
    PooledRows { x, z, p }
}

/// Spacing of the warm-start anchors in `sigma`.
pub const ANCHOR_STEP: f64 = 0.1;

type Store = BTreeMap<u64, Vec<Option<Arc<Vec<f64>>>>>;

/// Inverted utilities `y_t(sigma)` memoised by `sigma` and market.
///
/// Markets are inverted lazily, only when requested, so a fit that asks for
/// a subset of markets never reads the others. Each inversion at `sigma`
/// starts from the solution at the nearest anchor on a fixed grid of step
/// [`ANCHOR_STEP`], and anchors start from the logit inversion, so every
/// result depends only on `(sigma, market)` and never on evaluation order.
pub struct UtilityCache<'a> {
    markets: &'a [MarketData],
    quad: &'a QuadratureRule,
    opts: InversionOptions,
    store: Mutex<Store>,
}

impl<'a> UtilityCache<'a> {
    pub fn new(markets: &'a [MarketData], quad: &'a QuadratureRule, opts: InversionOptions) -> Self {
        Self {
            markets,
            quad,
            opts,
            store: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn markets(&self) -> &'a [MarketData] {
        self.markets
    }

    pub fn quadrature(&self) -> &'a QuadratureRule {
        self.quad
    }

    pub fn inversion_options(&self) -> &InversionOptions {
        &self.opts
    }

    fn solve(&self, store: &mut Store, sigma: f64, t: usize) -> Result<Arc<Vec<f64>>> {
        let m = &self.markets[t];
        let anchor = (sigma / ANCHOR_STEP).round() * ANCHOR_STEP;
        let start: Vec<f64> = if anchor == sigma {
            let s0 = m.shares.outside();
            m.shares.as_slice().iter().map(|s| (s / s0).ln()).collect()
        } else {
            let key = anchor.to_bits();
            let cached = store.get(&key).and_then(|row| row[t].clone());
            let y = match cached {
                Some(y) => y,
                None => {
                    let y = self.solve(store, anchor, t)?;
                    store.entry(key).or_insert_with(|| vec![None; self.markets.len()])[t] = Some(y.clone());
                    y
                }
            };
            y.to_vec()
        };
        let inv = invert_shares_from(&m.shares, &m.p, sigma, self.quad, &self.opts, &start)
            .or_else(|_| invert_shares(&m.shares, &m.p, sigma, self.quad, &self.opts))?;
        Ok(Arc::new(inv.y.into_inner()))
    }

    /// `y_t(sigma)` for every market, indexed like the market slice.
    pub fn at(&self, sigma: f64) -> Result<Vec<Arc<Vec<f64>>>> {
        let all: Vec<usize> = (0..self.markets.len()).collect();
        self.utilities(sigma, &all)
    }

    /// `y_t(sigma)` for the listed markets, in the order given.
    pub fn utilities(&self, sigma: f64, indices: &[usize]) -> Result<Vec<Arc<Vec<f64>>>> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(HdBlpError::InvalidArgument(format!(
                "sigma must be finite and nonnegative, got {sigma}"
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&t| t >= self.markets.len()) {
            return Err(HdBlpError::InvalidArgument(format!(
                "market index {bad} out of range for {} markets",
                self.markets.len()
            )));
        }
        // Nonnegative floats order like their bit patterns.
        let key = sigma.to_bits();
        let mut store = self.store.lock().expect("utility cache poisoned");
        let missing: Vec<usize> = match store.get(&key) {
            Some(row) => indices.iter().copied().filter(|&t| row[t].is_none()).collect(),
            None => indices.to_vec(),
        };
        let mut solved = Vec::with_capacity(missing.len());
        for &t in &missing {
            solved.push((t, self.solve(&mut store, sigma, t)?));
        }
        let row = store
            .entry(key)
            .or_insert_with(|| vec![None; self.markets.len()]);
        for (t, y) in solved {
            row[t] = Some(y);
        }
        Ok(indices
            .iter()
            .map(|&t| row[t].clone().expect("filled above"))
            .collect())
    }
}
