//! Helpers shared by the integration tests: finite differences, reference
//! statistics and small hand-built markets.

#![allow(dead_code)]

pub mod gradcheck;

use chrono::NaiveDate;
use derl::market::MarketData;
use derl::synth::business_days;
use ndarray::Array2;

/// Entries smaller than `REL_FLOOR * max(1, max_j |g_j|)` are compared on
/// that absolute scale instead of their own magnitude.
pub const REL_FLOOR: f64 = 1e-6;

/// Finite-difference step of the five-point stencil.
pub const FD_STEP: f64 = 1e-4;

pub fn rel_err_floor(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    rel_err_floor(analytic, numeric, REL_FLOOR)
}

/// Fourth-order central differences of `f` at `x` in every coordinate
/// (five-point stencil; the plain two-point rule is rounding-limited for
/// small gradient entries at any step size).
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            let mut at = |d: f64| {
                p[i] = orig + d;
                f(&p)
            };
            let v = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            p[i] = orig;
            v
        })
        .collect()
}

/// Largest relative error between an analytic gradient and finite
/// differences of `f`.
pub fn max_rel_err(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64]) -> f64 {
    assert_eq!(x.len(), analytic.len(), "gradient length");
    let numeric = central_diff(f, x, FD_STEP);
    let scale = analytic.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err_floor(*a, *n, REL_FLOOR * scale))
        .fold(0.0, f64::max)
}

/// Two-pass sample moments, the reference for the streaming implementations.
pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub fn sample_std(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Welford's online mean and M2, then higher central moments in a second
/// streaming pass; returns (mean, sample std, skew, excess kurtosis).
pub fn welford(x: &[f64]) -> (f64, f64, f64, f64) {
    let (mut n, mut m, mut m2) = (0.0f64, 0.0f64, 0.0f64);
    for &v in x {
        n += 1.0;
        let d = v - m;
        m += d / n;
        m2 += d * (v - m);
    }
    let (mut c3, mut c4) = (0.0, 0.0);
    for &v in x {
        let d = v - m;
        c3 += d * d * d;
        c4 += d * d * d * d;
    }
    let pm2 = m2 / n;
    (m, (m2 / (n - 1.0)).sqrt(), (c3 / n) / pm2.powf(1.5), (c4 / n) / (pm2 * pm2) - 3.0)
}

/// Market with the given per-row returns (cash column first) and a single
/// constant metric, on a weekday calendar.
pub fn market_from_returns(returns: Array2<f64>) -> MarketData {
    let t = returns.nrows();
    let d = returns.ncols();
    let dates = business_days(NaiveDate::from_ymd_opt(2001, 1, 1).unwrap(), t);
    let mut assets = vec!["CASH".to_string()];
    assets.extend((1..d).map(|i| format!("A{i}")));
    MarketData::new(dates, assets, returns, Array2::zeros((t, 1))).unwrap()
}

/// Lag-one autoregressive series `x_t = phi x_{t-1} + e_t` driven by the
/// given innovations.
pub fn ar1(innovations: &[f64], phi: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(innovations.len());
    let mut prev = 0.0;
    for &e in innovations {
        prev = phi * prev + e;
        out.push(prev);
    }
    out
}
