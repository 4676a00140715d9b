//! Statistical diagnostics of backtest output: rolling stock
//! characteristics, OLS with Newey-West (Bartlett) standard errors,
//! period-by-period lasso on characteristics, and regressions of ablation
//! return differences on market variables.

use std::path::Path;

use chrono::{Duration, NaiveDate};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::AlignedPanel;
use crate::error::{Error, Result};

/// Minimum valid observations for a calendar-day window of `n` days.
pub fn min_observations(n: usize) -> usize {
    match n {
        0..=7 => 3,
        8..=14 => 6,
        _ => 10,
    }
}

pub const CHARACTERISTICS: [&str; 8] = ["Illiq", "Spread", "Turn", "Ztrade", "Trend", "Retvol", "Beta", "Ivol"];

/// `values[[t, i, k]]`: characteristic `k` of ticker `i` on `dates[t]`;
/// NaN where the window holds too few valid observations.
#[derive(Clone, Debug, PartialEq)]
pub struct CharacteristicsMatrix {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    /// Characteristic name with its window, e.g. `Trend14`.
    pub names: Vec<String>,
    pub values: Array3<f64>,
    /// True when Spread comes from the high-low range instead of quotes.
    pub spread_is_proxy: bool,
}

/// Raw characteristics for each window length (calendar days). Row `t`
/// refers to `aligned.dates[t + 1]`, the date of return row `t`.
///
/// `market` holds the market return on the same rows, `rf` the risk-free
/// rate (zero when absent). A day counts as a valid observation for ticker
/// `i` when its bar was observed rather than forward-filled. Spread uses the
/// relative high-low range as a stand-in for the quoted spread; shares
/// outstanding are `market_cap / close`.
pub fn raw_characteristics(
    aligned: &AlignedPanel,
    market: &[f64],
    rf: Option<&[f64]>,
    windows: &[usize],
) -> Result<CharacteristicsMatrix> {
    let rows = aligned.returns.nrows();
    let n = aligned.tickers.len();
    if market.len() != rows || rf.is_some_and(|r| r.len() != rows) {
        return Err(Error::Alignment(format!(
            "{rows} return rows but {} market values",
            market.len()
        )));
    }
    if windows.is_empty() || windows.contains(&0) {
        return Err(Error::Config("characteristic windows must be positive".into()));
    }
    let dates: Vec<NaiveDate> = aligned.dates[1..].to_vec();
    let k = CHARACTERISTICS.len();
    let mut values = Array3::from_elem((rows, n, k * windows.len()), f64::NAN);
    let mut names = Vec::new();
    for &w in windows {
        for c in CHARACTERISTICS {
            names.push(format!("{c}{w}"));
        }
    }
    for (wi, &w) in windows.iter().enumerate() {
        let min_obs = min_observations(w);
        let span = Duration::days(w as i64);
        let mut lo = 0;
        for t in 0..rows {
            while dates[t] - dates[lo] >= span {
                lo += 1;
            }
            for i in 0..n {
                let bars = &aligned.bars[i];
                let mut obs: Vec<usize> = Vec::new();
                let mut trading_days = 0usize;
                let mut zero = 0.0;
                for s in lo..=t {
                    trading_days += 1;
                    let row = s + 1;
                    if aligned.filled[[row, i]] {
                        zero += 1.0;
                        continue;
                    }
                    if bars.volume[row] == 0.0 {
                        zero += 1.0;
                    }
                    obs.push(s);
                }
                let base = wi * k;
                if trading_days >= min_obs {
                    values[[t, i, base + 3]] = zero;
                }
                if obs.len() < min_obs {
                    continue;
                }
                let m = obs.len() as f64;
                let r: Vec<f64> = obs.iter().map(|&s| aligned.returns[[s, i]]).collect();
                // Illiq over days with trading
                let illiq: Vec<f64> = obs
                    .iter()
                    .zip(&r)
                    .filter_map(|(&s, ret)| {
                        let dv = bars.close[s + 1] * bars.volume[s + 1];
                        (dv > 0.0).then(|| ret.abs() / dv * 1e6)
                    })
                    .collect();
                if illiq.len() >= min_obs {
                    values[[t, i, base]] = illiq.iter().sum::<f64>() / illiq.len() as f64;
                }
                values[[t, i, base + 1]] = obs
                    .iter()
                    .map(|&s| {
                        let (h, l) = (bars.high[s + 1], bars.low[s + 1]);
                        (h - l) / ((h + l) / 2.0)
                    })
                    .sum::<f64>()
                    / m;
                let turn: Vec<f64> = obs
                    .iter()
                    .filter_map(|&s| {
                        let cap = aligned.market_cap[[s + 1, i]];
                        let shrout = cap / bars.close[s + 1];
                        (shrout.is_finite() && shrout > 0.0).then(|| bars.volume[s + 1] / shrout)
                    })
                    .collect();
                if turn.len() >= min_obs {
                    values[[t, i, base + 2]] = turn.iter().sum::<f64>() / turn.len() as f64;
                }
                values[[t, i, base + 4]] = r.iter().fold(1.0, |acc, x| acc * (1.0 + x)) - 1.0;
                let mean = r.iter().sum::<f64>() / m;
                values[[t, i, base + 5]] = (r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (m - 1.0)).sqrt();
                let ex: Vec<f64> = obs
                    .iter()
                    .zip(&r)
                    .map(|(&s, x)| x - rf.map(|f| f[s]).unwrap_or(0.0))
                    .collect();
                let mx: Vec<f64> = obs
                    .iter()
                    .map(|&s| market[s] - rf.map(|f| f[s]).unwrap_or(0.0))
                    .collect();
                if let Some((beta, ivol)) = capm(&ex, &mx) {
                    values[[t, i, base + 6]] = beta;
                    values[[t, i, base + 7]] = ivol;
                }
            }
        }
    }
    Ok(CharacteristicsMatrix {
        dates,
        tickers: aligned.tickers.clone(),
        names,
        values,
        spread_is_proxy: true,
    })
}

/// Slope and residual standard deviation (`m - 1` denominator) of `y` on
/// `x` with intercept; `None` when `x` has no variation.
fn capm(y: &[f64], x: &[f64]) -> Option<(f64, f64)> {
    let m = y.len() as f64;
    let (my, mx) = (y.iter().sum::<f64>() / m, x.iter().sum::<f64>() / m);
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx <= 1e-300 {
        return None;
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let beta = sxy / sxx;
    let alpha = my - beta * mx;
    let ss: f64 = x.iter().zip(y).map(|(a, b)| (b - alpha - beta * a).powi(2)).sum();
    Some((beta, (ss / (m - 1.0)).sqrt()))
}

/// Cross-sectional z-scores per date and characteristic (sample standard
/// deviation). Entries are set to NaN where fewer than two names are valid,
/// and to zero where all valid names share one value.
pub fn standardize(m: &mut CharacteristicsMatrix) {
    let (rows, n, k) = m.values.dim();
    for t in 0..rows {
        for c in 0..k {
            let valid: Vec<usize> = (0..n).filter(|&i| m.values[[t, i, c]].is_finite()).collect();
            if valid.len() < 2 {
                for &i in &valid {
                    m.values[[t, i, c]] = f64::NAN;
                }
                continue;
            }
            let vn = valid.len() as f64;
            let mean = valid.iter().map(|&i| m.values[[t, i, c]]).sum::<f64>() / vn;
            let sd = (valid.iter().map(|&i| (m.values[[t, i, c]] - mean).powi(2)).sum::<f64>() / (vn - 1.0)).sqrt();
            for &i in &valid {
                let v = &mut m.values[[t, i, c]];
                *v = if sd > 1e-300 { (*v - mean) / sd } else { 0.0 };
            }
        }
    }
}

/// Raw characteristics, cross-sectionally standardized.
pub fn compute_characteristics(
    aligned: &AlignedPanel,
    market: &[f64],
    rf: Option<&[f64]>,
    windows: &[usize],
) -> Result<CharacteristicsMatrix> {
    let mut m = raw_characteristics(aligned, market, rf, windows)?;
    standardize(&mut m);
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionResult {
    /// Names aligned with the coefficients; `const` first when fitted.
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub t_values: Vec<f64>,
    pub r2: f64,
    pub adj_r2: f64,
    pub lags: usize,
    pub observations: usize,
    #[serde(skip)]
    pub residuals: Vec<f64>,
}

/// `floor(4 (T / 100)^(2/9))`.
pub fn default_nw_lag(t: usize) -> usize {
    (4.0 * (t as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize
}

fn ratio(c: f64, se: f64) -> f64 {
    if se > 0.0 {
        c / se
    } else if c == 0.0 {
        0.0
    } else {
        c.signum() * f64::INFINITY
    }
}

/// OLS of `y` on `[1, x]` (or `x` alone) with the Bartlett-weighted HAC
/// covariance `(X'X)^-1 S (X'X)^-1`,
/// `S = sum_t u_t^2 x_t x_t' + sum_{l=1}^{L} (1 - l/(L+1)) sum_t u_t u_{t-l} (x_t x_{t-l}' + x_{t-l} x_t')`.
/// No small-sample scaling; lag 0 gives White's estimator.
pub fn ols_newey_west(
    y: &[f64],
    x: ArrayView2<f64>,
    names: &[&str],
    lags: Option<usize>,
    intercept: bool,
) -> Result<RegressionResult> {
    let t = y.len();
    if x.nrows() != t {
        return Err(Error::Alignment(format!("{t} responses but {} design rows", x.nrows())));
    }
    if names.len() != x.ncols() {
        return Err(Error::Shape("one name per regressor required".into()));
    }
    let p = x.ncols() + intercept as usize;
    if t <= p {
        return Err(Error::SingularDesign);
    }
    if y.iter().chain(x.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite regression input".into()));
    }
    let design = DMatrix::from_fn(t, p, |i, j| {
        if intercept {
            if j == 0 {
                1.0
            } else {
                x[[i, j - 1]]
            }
        } else {
            x[[i, j]]
        }
    });
    let yv = DVector::from_column_slice(y);
    let svd = design.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-10) {
        return Err(Error::SingularDesign);
    }
    let xtx = design.transpose() * &design;
    let xtx_inv = xtx.try_inverse().ok_or(Error::SingularDesign)?;
    let beta = &xtx_inv * (design.transpose() * &yv);
    let resid = &yv - &design * &beta;
    let lags = lags.unwrap_or_else(|| default_nw_lag(t));
    let mut s = DMatrix::<f64>::zeros(p, p);
    for i in 0..t {
        let xi = design.row(i).transpose();
        s += &xi * xi.transpose() * (resid[i] * resid[i]);
    }
    for l in 1..=lags.min(t - 1) {
        let w = 1.0 - l as f64 / (lags as f64 + 1.0);
        let mut g = DMatrix::<f64>::zeros(p, p);
        for i in l..t {
            let xi = design.row(i).transpose();
            let xj = design.row(i - l).transpose();
            g += &xi * xj.transpose() * (resid[i] * resid[i - l]);
        }
        s += (&g + g.transpose()) * w;
    }
    let cov = &xtx_inv * s * &xtx_inv;
    let ym = y.iter().sum::<f64>() / t as f64;
    let sst: f64 = if intercept {
        y.iter().map(|v| (v - ym).powi(2)).sum()
    } else {
        y.iter().map(|v| v * v).sum()
    };
    let ssr: f64 = resid.iter().map(|v| v * v).sum();
    let (r2, adj) = if sst > 0.0 {
        let r2 = 1.0 - ssr / sst;
        let dof = if intercept { t - 1 } else { t } as f64;
        (r2, 1.0 - (1.0 - r2) * dof / (t - p) as f64)
    } else {
        (f64::NAN, f64::NAN)
    };
    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let std_errors: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    let mut all_names: Vec<String> = Vec::with_capacity(p);
    if intercept {
        all_names.push("const".into());
    }
    all_names.extend(names.iter().map(|s| s.to_string()));
    Ok(RegressionResult {
        names: all_names,
        t_values: coefficients.iter().zip(&std_errors).map(|(c, s)| ratio(*c, *s)).collect(),
        coefficients,
        std_errors,
        r2,
        adj_r2: adj,
        lags,
        observations: t,
        residuals: resid.iter().copied().collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LassoFit {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    /// False when the subgradient conditions were not met within
    /// [`LASSO_KKT_SWEEPS`]; happens on rank-deficient designs, where the
    /// coefficients are not unique but the fitted values are.
    pub kkt_met: bool,
}

pub const LASSO_TOL: f64 = 1e-8;
/// Largest allowed optimality-condition residual, relative to the product
/// of the response and design scales.
pub const LASSO_KKT_TOL: f64 = 1e-8;
/// Extra sweeps allowed for the subgradient conditions once the fitted
/// values have settled.
pub const LASSO_KKT_SWEEPS: usize = 2_000;
pub const LASSO_MAX_ITER: usize = 100_000;

fn soft_threshold(z: f64, g: f64) -> f64 {
    if z > g {
        z - g
    } else if z < -g {
        z + g
    } else {
        0.0
    }
}

/// Coordinate descent on `(1/2T) |y - b0 - X b|^2 + lambda |b|_1` with an
/// unpenalised intercept. Stops when, over a full sweep, no coordinate update
/// changes the fitted values by a mean square above [`LASSO_TOL`] times the
/// variance of y and the subgradient conditions hold to [`LASSO_KKT_TOL`].
pub fn lasso(y: &[f64], x: ArrayView2<f64>, lambda: f64) -> Result<LassoFit> {
    lasso_warm(y, x, lambda, None)
}

fn lasso_warm(y: &[f64], x: ArrayView2<f64>, lambda: f64, start: Option<&[f64]>) -> Result<LassoFit> {
    let (t, k) = x.dim();
    if y.len() != t || t == 0 {
        return Err(Error::Alignment(format!("{} responses but {t} design rows", y.len())));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config("lasso penalty must be >= 0".into()));
    }
    let tf = t as f64;
    let ym = y.iter().sum::<f64>() / tf;
    let xm: Vec<f64> = (0..k).map(|j| x.column(j).sum() / tf).collect();
    let xc = Array2::from_shape_fn((t, k), |(i, j)| x[[i, j]] - xm[j]);
    let sq: Vec<f64> = (0..k).map(|j| xc.column(j).iter().map(|v| v * v).sum::<f64>() / tf).collect();
    // columns that are constant up to rounding carry no signal
    let sq_floor = 1e-20 * sq.iter().cloned().fold(0.0, f64::max);
    let y_c: Vec<f64> = y.iter().map(|v| v - ym).collect();
    let mut r = y_c.clone();
    // convergence is judged on the change in fitted values relative to y's scale
    let y_scale = (r.iter().map(|v| v * v).sum::<f64>() / tf).sqrt().max(f64::MIN_POSITIVE);
    let x_scale = sq.iter().cloned().fold(0.0, f64::max).sqrt();
    let mut b = vec![0.0; k];
    if let Some(b0) = start {
        for j in 0..k {
            if b0[j] != 0.0 && sq[j] > sq_floor {
                b[j] = b0[j];
                for (ri, xi) in r.iter_mut().zip(xc.column(j).iter()) {
                    *ri -= b0[j] * xi;
                }
            }
        }
    }
    let mut iterations = 0;
    let mut settled = 0;
    let mut kkt_met = true;
    loop {
        iterations += 1;
        let mut max_change: f64 = 0.0;
        for j in 0..k {
            if sq[j] <= sq_floor {
                continue;
            }
            let col = xc.column(j);
            let rho = col.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / tf + sq[j] * b[j];
            let new = soft_threshold(rho, lambda) / sq[j];
            let delta = new - b[j];
            if delta != 0.0 {
                for (ri, xi) in r.iter_mut().zip(col.iter()) {
                    *ri -= delta * xi;
                }
                b[j] = new;
                max_change = max_change.max(delta * delta * sq[j] / (y_scale * y_scale));
            }
        }
        if max_change < LASSO_TOL {
            let tol = LASSO_KKT_TOL * y_scale * x_scale;
            if kkt_worst(&xc, &r, &b, &sq, sq_floor, lambda) <= tol {
                break;
            }
            // coordinate descent crawls along near-flat directions of a
            // collinear design; solve the support equations directly instead
            if let Some((pb, pr)) = polish_support(&xc, &y_c, &b, lambda) {
                if kkt_worst(&xc, &pr, &pb, &sq, sq_floor, lambda) <= tol {
                    b = pb;
                    break;
                }
            }
            settled += 1;
            if settled >= LASSO_KKT_SWEEPS {
                kkt_met = false;
                break;
            }
        }
        if iterations >= LASSO_MAX_ITER {
            return Err(Error::Convergence {
                iterations,
                last_change: max_change,
            });
        }
    }
    let intercept = ym - xm.iter().zip(&b).map(|(m, c)| m * c).sum::<f64>();
    Ok(LassoFit {
        intercept,
        coefficients: b,
        lambda,
        iterations,
        kkt_met,
    })
}

/// Largest subgradient-condition residual over the usable columns.
fn kkt_worst(xc: &Array2<f64>, r: &[f64], b: &[f64], sq: &[f64], sq_floor: f64, lambda: f64) -> f64 {
    let tf = r.len() as f64;
    (0..b.len())
        .filter(|&j| sq[j] > sq_floor)
        .map(|j| {
            let g = xc.column(j).iter().zip(r).map(|(a, v)| a * v).sum::<f64>() / tf;
            if b[j] == 0.0 {
                (g.abs() - lambda).max(0.0)
            } else {
                (g - lambda * b[j].signum()).abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Exact minimiser on the current support with the current signs held
/// fixed, with its residual. `None` when the support Gram matrix is singular
/// or a sign flips.
fn polish_support(xc: &Array2<f64>, y_c: &[f64], b: &[f64], lambda: f64) -> Option<(Vec<f64>, Vec<f64>)> {
    let support: Vec<usize> = (0..b.len()).filter(|&j| b[j] != 0.0).collect();
    let t = y_c.len();
    let tf = t as f64;
    if support.is_empty() || support.len() >= t {
        return None;
    }
    let m = support.len();
    let gram = DMatrix::from_fn(m, m, |a, c| {
        xc.column(support[a]).dot(&xc.column(support[c])) / tf
    });
    let rhs = DVector::from_fn(m, |a, _| {
        let j = support[a];
        xc.column(j).iter().zip(y_c).map(|(x, y)| x * y).sum::<f64>() / tf - lambda * b[j].signum()
    });
    let sol = gram.cholesky()?.solve(&rhs);
    let mut out = vec![0.0; b.len()];
    for (a, &j) in support.iter().enumerate() {
        if sol[a].signum() != b[j].signum() || !sol[a].is_finite() {
            return None;
        }
        out[j] = sol[a];
    }
    let mut r = y_c.to_vec();
    for &j in &support {
        for (ri, xi) in r.iter_mut().zip(xc.column(j).iter()) {
            *ri -= out[j] * xi;
        }
    }
    Some((out, r))
}

/// Smallest penalty at which every slope is zero.
pub fn lambda_max(y: &[f64], x: ArrayView2<f64>) -> f64 {
    let (t, k) = x.dim();
    let tf = t as f64;
    let ym = y.iter().sum::<f64>() / tf;
    (0..k)
        .map(|j| {
            let col = x.column(j);
            let xm = col.sum() / tf;
            (col.iter().zip(y).map(|(a, b)| (a - xm) * (b - ym)).sum::<f64>() / tf).abs()
        })
        .fold(0.0, f64::max)
}

/// Lasso with the penalty chosen by `folds`-fold cross-validation over
/// `grid` log-spaced values from `lambda_max` down to `1e-3 lambda_max`.
/// Fold `f` holds rows `i` with `i % folds == f`.
pub fn lasso_cv(y: &[f64], x: ArrayView2<f64>, folds: usize, grid: usize) -> Result<LassoFit> {
    let (t, k) = x.dim();
    if folds < 2 || t < folds || grid == 0 {
        return Err(Error::Config(format!("cannot cross-validate {t} rows with {folds} folds")));
    }
    let lmax = lambda_max(y, x);
    if lmax <= 0.0 {
        return lasso(y, x, 0.0);
    }
    let lambdas: Vec<f64> = (0..grid)
        .map(|g| {
            let f = if grid == 1 { 0.0 } else { g as f64 / (grid - 1) as f64 };
            lmax * 10f64.powf(-3.0 * f)
        })
        .collect();
    // each fold walks the path from lambda_max down, warm-starting each fit
    let mut sse = vec![0.0; grid];
    for f in 0..folds {
        let train: Vec<usize> = (0..t).filter(|i| i % folds != f).collect();
        let test: Vec<usize> = (0..t).filter(|i| i % folds == f).collect();
        let xt = x.select(ndarray::Axis(0), &train);
        let yt: Vec<f64> = train.iter().map(|&i| y[i]).collect();
        let mut prev: Option<Vec<f64>> = None;
        for (g, &lam) in lambdas.iter().enumerate() {
            let fit = lasso_warm(&yt, xt.view(), lam, prev.as_deref())?;
            for &i in &test {
                let pred = fit.intercept + (0..k).map(|j| x[[i, j]] * fit.coefficients[j]).sum::<f64>();
                sse[g] += (y[i] - pred).powi(2);
            }
            prev = Some(fit.coefficients);
        }
    }
    let mut best = 0;
    for g in 1..grid {
        if sse[g] < sse[best] {
            best = g;
        }
    }
    let mut prev: Option<Vec<f64>> = None;
    for &lam in &lambdas[..best] {
        prev = Some(lasso_warm(y, x, lam, prev.as_deref())?.coefficients);
    }
    lasso_warm(y, x, lambdas[best], prev.as_deref())
}

/// Largest violation of the lasso optimality conditions at `fit`:
/// `|g_j| <= lambda` for zero slopes and `g_j = lambda sign(b_j)` otherwise,
/// with `g = X_c' r / T`.
pub fn kkt_violation(y: &[f64], x: ArrayView2<f64>, fit: &LassoFit) -> f64 {
    let (t, k) = x.dim();
    let tf = t as f64;
    let r: Vec<f64> = (0..t)
        .map(|i| y[i] - fit.intercept - (0..k).map(|j| x[[i, j]] * fit.coefficients[j]).sum::<f64>())
        .collect();
    let mut worst: f64 = 0.0;
    for j in 0..k {
        let g = x.column(j).iter().zip(&r).map(|(a, b)| a * b).sum::<f64>() / tf;
        let b = fit.coefficients[j];
        let v = if b == 0.0 {
            (g.abs() - fit.lambda).max(0.0)
        } else {
            (g - fit.lambda * b.signum()).abs()
        };
        worst = worst.max(v);
    }
    worst
}

/// Scale applied to portfolio weights before the per-period lasso.
pub const WEIGHT_SCALE: f64 = 100.0;

/// For each date, lasso of `WEIGHT_SCALE * weight` on the standardized
/// characteristics of the names with complete rows. `weights[t][i]` is the
/// weight of `chars.tickers[i]` on `chars.dates[t]`. Dates with too few
/// complete names for cross-validation are skipped.
pub fn period_lasso(
    chars: &CharacteristicsMatrix,
    weights: &[Vec<f64>],
    folds: usize,
    grid: usize,
) -> Result<Vec<(NaiveDate, LassoFit)>> {
    let (rows, n, k) = chars.values.dim();
    if weights.len() != rows {
        return Err(Error::Alignment(format!("{} weight rows for {rows} dates", weights.len())));
    }
    let mut out = Vec::new();
    for t in 0..rows {
        if weights[t].len() != n {
            return Err(Error::Alignment("weight row width differs from ticker count".into()));
        }
        let keep: Vec<usize> = (0..n)
            .filter(|&i| weights[t][i].is_finite() && (0..k).all(|c| chars.values[[t, i, c]].is_finite()))
            .collect();
        if keep.len() < folds.max(2) * 2 {
            continue;
        }
        let x = Array2::from_shape_fn((keep.len(), k), |(r, c)| chars.values[[t, keep[r], c]]);
        let y: Vec<f64> = keep.iter().map(|&i| WEIGHT_SCALE * weights[t][i]).collect();
        out.push((chars.dates[t], lasso_cv(&y, x.view(), folds, grid)?));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub name: String,
    /// Percent of periods with a nonzero coefficient.
    pub rate: f64,
    /// Time-series mean coefficient, zeros included.
    pub mean: f64,
    pub t_value: f64,
}

/// Selection rate, mean coefficient and Newey-West t-value of the mean per
/// characteristic.
pub fn selection_report(coefs: &[Vec<f64>], names: &[String], lags: Option<usize>) -> Result<Vec<SelectionRow>> {
    let p = coefs.len();
    if p < 2 {
        return Err(Error::Estimator("selection report needs at least two periods".into()));
    }
    let ones = Array2::<f64>::zeros((p, 0));
    names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let series: Vec<f64> = coefs.iter().map(|c| c[j]).collect();
            let nonzero = series.iter().filter(|v| **v != 0.0).count();
            let mean = series.iter().sum::<f64>() / p as f64;
            let t_value = if series.iter().all(|v| *v == series[0]) {
                ratio(mean, 0.0)
            } else {
                ols_newey_west(&series, ones.view(), &[], lags, true)?.t_values[0]
            };
            Ok(SelectionRow {
                name: name.clone(),
                rate: 100.0 * nonzero as f64 / p as f64,
                mean,
                t_value,
            })
        })
        .collect()
}

/// `full - ablated`, date by date.
pub fn ablation_contribution(full: &[f64], ablated: &[f64]) -> Result<Vec<f64>> {
    if full.len() != ablated.len() {
        return Err(Error::Alignment(format!(
            "{} and {} daily returns",
            full.len(),
            ablated.len()
        )));
    }
    Ok(full.iter().zip(ablated).map(|(a, b)| a - b).collect())
}

/// `contribution_t = b0 + b1 market_t + b2 vix_t + u_t` with Newey-West
/// errors.
pub fn regress_on_market(contribution: &[f64], market: &[f64], vix: &[f64], lags: Option<usize>) -> Result<RegressionResult> {
    let t = contribution.len();
    if market.len() != t || vix.len() != t {
        return Err(Error::Alignment("contribution, market and volatility index differ in length".into()));
    }
    let x = Array2::from_shape_fn((t, 2), |(i, j)| if j == 0 { market[i] } else { vix[i] });
    ols_newey_west(contribution, x.view(), &["market", "vix"], lags, true)
}

/// `|(x_t - mean) / std|` with moments fixed from a training period.
pub fn structural_deviation(series: &[f64], mean: f64, std: f64) -> Result<Vec<f64>> {
    if !(std > 0.0) {
        return Err(Error::Degenerate("deviation scale must be positive".into()));
    }
    Ok(series.iter().map(|x| ((x - mean) / std).abs()).collect())
}

/// Daily factor returns: `date,mkt_rf,smb,hml[,mom],rf`.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorTable {
    pub dates: Vec<NaiveDate>,
    pub names: Vec<String>,
    pub values: Array2<f64>,
    pub rf: Vec<f64>,
}

impl FactorTable {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let header: Vec<String> = rdr.headers()?.iter().map(|s| s.to_ascii_lowercase()).collect();
        let col = |name: &str| header.iter().position(|h| h == name);
        let date_col = col("date").ok_or_else(|| Error::Parse { line: 1, msg: "missing date column".into() })?;
        let rf_col = col("rf").ok_or_else(|| Error::Parse { line: 1, msg: "missing rf column".into() })?;
        let mut factor_cols = Vec::new();
        for name in ["mkt_rf", "smb", "hml"] {
            factor_cols.push(col(name).ok_or_else(|| Error::Parse {
                line: 1,
                msg: format!("missing {name} column"),
            })?);
        }
        if let Some(m) = col("mom") {
            factor_cols.push(m);
        }
        let names: Vec<String> = factor_cols.iter().map(|&c| header[c].clone()).collect();
        let (mut dates, mut rf, mut flat) = (Vec::new(), Vec::new(), Vec::new());
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            let field = |c: usize| rec.get(c).ok_or_else(|| Error::Parse { line, msg: "short row".into() });
            let num = |c: usize| -> Result<f64> {
                let s = field(c)?;
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse { line, msg: format!("bad number {s:?}") })
            };
            let d = NaiveDate::parse_from_str(field(date_col)?, "%Y-%m-%d")
                .map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            if dates.last().is_some_and(|p| *p >= d) {
                return Err(Error::Integrity(format!("factor dates not increasing at line {line}")));
            }
            dates.push(d);
            rf.push(num(rf_col)?);
            for &c in &factor_cols {
                flat.push(num(c)?);
            }
        }
        if dates.is_empty() {
            return Err(Error::EmptyPanel(format!("{} has no rows", path.display())));
        }
        let values = Array2::from_shape_vec((dates.len(), names.len()), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self { dates, names, values, rf })
    }

    /// Rows for `dates`, each of which must be present.
    pub fn select(&self, dates: &[NaiveDate]) -> Result<(Array2<f64>, Vec<f64>)> {
        let idx: Vec<usize> = dates
            .iter()
            .map(|d| {
                self.dates
                    .binary_search(d)
                    .map_err(|_| Error::Alignment(format!("no factor row for {d}")))
            })
            .collect::<Result<_>>()?;
        Ok((
            self.values.select(ndarray::Axis(0), &idx),
            idx.iter().map(|&i| self.rf[i]).collect(),
        ))
    }
}

/// Excess returns on the factor columns with Newey-West errors.
pub fn factor_regression(returns: &[f64], dates: &[NaiveDate], factors: &FactorTable, lags: Option<usize>) -> Result<RegressionResult> {
    let (x, rf) = factors.select(dates)?;
    let y: Vec<f64> = returns.iter().zip(&rf).map(|(r, f)| r - f).collect();
    let names: Vec<&str> = factors.names.iter().map(|s| s.as_str()).collect();
    ols_newey_west(&y, x.view(), &names, lags, true)
}
