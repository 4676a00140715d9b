//! Technical indicators over OHLCV bars.
//!
//! Every indicator returns a series of the input length whose warm-up prefix
//! is NaN. Formulas:
//!
//! | name  | definition |
//! |-------|------------|
//! | SMA n | arithmetic mean of the last `n` closes |
//! | EMA n | seeded with SMA n at row `n-1`, then `alpha = 2/(n+1)` |
//! | MACD  | histogram: (EMA12 - EMA26) minus its 9-period EMA |
//! | RSI n | Wilder smoothing of gains/losses; 100 with no losses, 50 if flat |
//! | BOLL n| %B against SMA n +/- 2 population std; 0.5 when the band is flat |
//! | CCI n | (TP - SMA(TP)) / (0.015 mean abs deviation), TP = (H+L+C)/3; 0 if flat |
//! | ADX n | Wilder-smoothed DX; first value at row `2n-1` |
//! | OBV   | starts at the first volume, adds/subtracts volume on up/down closes |
//! | STOCH n | %K = 100 (C - LL)/(HH - LL); 50 when the range is zero |
//! | CMF n | sum of money-flow volume over sum of volume |
//! | ADL   | cumulative money-flow volume, starting at 0 |
//! | WILLR n | -100 (HH - C)/(HH - LL); -50 when the range is zero |
//!
//! The window is ignored for MACD (12/26/9), OBV and ADL.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Bars;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum IndicatorKind {
    Sma,
    Ema,
    Macd,
    Rsi,
    Boll,
    Cci,
    Adx,
    Obv,
    Stoch,
    Cmf,
    Adl,
    Willr,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IndicatorSpec {
    pub name: IndicatorKind,
    pub window: usize,
}

impl IndicatorSpec {
    pub fn new(name: IndicatorKind, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config(format!("{name:?} window must be at least 1")));
        }
        Ok(Self { name, window })
    }

    /// Number of leading rows without a value.
    pub fn warm_up(&self) -> usize {
        let n = self.window;
        match self.name {
            IndicatorKind::Sma
            | IndicatorKind::Ema
            | IndicatorKind::Boll
            | IndicatorKind::Cci
            | IndicatorKind::Stoch
            | IndicatorKind::Cmf
            | IndicatorKind::Willr => n - 1,
            IndicatorKind::Rsi => n,
            IndicatorKind::Adx => 2 * n - 1,
            IndicatorKind::Macd => 25 + 8,
            IndicatorKind::Obv | IndicatorKind::Adl => 0,
        }
    }

    pub fn label(&self) -> String {
        match self.name {
            IndicatorKind::Macd | IndicatorKind::Obv | IndicatorKind::Adl => {
                format!("{:?}", self.name).to_uppercase()
            }
            _ => format!("{}{}", format!("{:?}", self.name).to_uppercase(), self.window),
        }
    }
}

/// Moving averages and trend strength at 21/42/63 days plus the
/// single-window oscillators at their conventional periods.
pub fn default_specs() -> Vec<IndicatorSpec> {
    use IndicatorKind::*;
    let mut specs = Vec::new();
    for kind in [Sma, Ema, Rsi, Cci, Adx] {
        for w in [21, 42, 63] {
            specs.push(IndicatorSpec { name: kind, window: w });
        }
    }
    for (kind, w) in [(Macd, 26), (Boll, 20), (Obv, 1), (Stoch, 14), (Cmf, 20), (Adl, 1), (Willr, 14)] {
        specs.push(IndicatorSpec { name: kind, window: w });
    }
    specs
}

fn check_bars(bars: &Bars) -> Result<()> {
    let t = bars.close.len();
    if [bars.open.len(), bars.high.len(), bars.low.len(), bars.volume.len()]
        .iter()
        .any(|&l| l != t)
    {
        return Err(Error::Shape("OHLCV columns differ in length".into()));
    }
    Ok(())
}

pub fn sma(x: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; x.len()];
    if n == 0 || x.len() < n {
        return out;
    }
    for t in n - 1..x.len() {
        out[t] = x[t + 1 - n..=t].iter().sum::<f64>() / n as f64;
    }
    out
}

/// EMA over the finite suffix of `x` starting at `first`.
fn ema_from(x: &[f64], n: usize, first: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; x.len()];
    if first + n > x.len() {
        return out;
    }
    let alpha = 2.0 / (n as f64 + 1.0);
    let seed = first + n - 1;
    let mut prev = x[first..=seed].iter().sum::<f64>() / n as f64;
    out[seed] = prev;
    for t in seed + 1..x.len() {
        prev = alpha * x[t] + (1.0 - alpha) * prev;
        out[t] = prev;
    }
    out
}

pub fn ema(x: &[f64], n: usize) -> Vec<f64> {
    ema_from(x, n, 0)
}

pub fn macd_histogram(close: &[f64]) -> Vec<f64> {
    let fast = ema(close, 12);
    let slow = ema(close, 26);
    let line: Vec<f64> = fast.iter().zip(&slow).map(|(f, s)| f - s).collect();
    let signal = ema_from(&line, 9, 25);
    line.iter().zip(&signal).map(|(l, s)| l - s).collect()
}

pub fn rsi(close: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; close.len()];
    if close.len() <= n {
        return out;
    }
    let value = |g: f64, l: f64| {
        if l == 0.0 {
            if g > 0.0 {
                100.0
            } else {
                50.0
            }
        } else {
            100.0 - 100.0 / (1.0 + g / l)
        }
    };
    let (mut gain, mut loss) = (0.0, 0.0);
    for t in 1..=n {
        let d = close[t] - close[t - 1];
        gain += d.max(0.0);
        loss += (-d).max(0.0);
    }
    gain /= n as f64;
    loss /= n as f64;
    out[n] = value(gain, loss);
    let nf = n as f64;
    for t in n + 1..close.len() {
        let d = close[t] - close[t - 1];
        gain = (gain * (nf - 1.0) + d.max(0.0)) / nf;
        loss = (loss * (nf - 1.0) + (-d).max(0.0)) / nf;
        out[t] = value(gain, loss);
    }
    out
}

/// Midline, upper and lower band with population standard deviation.
pub fn bollinger_bands(close: &[f64], n: usize, k: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mid = sma(close, n);
    let mut upper = vec![f64::NAN; close.len()];
    let mut lower = vec![f64::NAN; close.len()];
    for t in 0..close.len() {
        if mid[t].is_nan() {
            continue;
        }
        let w = &close[t + 1 - n..=t];
        let var = w.iter().map(|c| (c - mid[t]).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        upper[t] = mid[t] + k * sd;
        lower[t] = mid[t] - k * sd;
    }
    (mid, upper, lower)
}

pub fn bollinger_percent_b(close: &[f64], n: usize) -> Vec<f64> {
    let (mid, upper, lower) = bollinger_bands(close, n, 2.0);
    (0..close.len())
        .map(|t| {
            if mid[t].is_nan() {
                f64::NAN
            } else if upper[t] - lower[t] <= 0.0 {
                0.5
            } else {
                (close[t] - lower[t]) / (upper[t] - lower[t])
            }
        })
        .collect()
}

pub fn cci(bars: &Bars, n: usize) -> Vec<f64> {
    let tp: Vec<f64> = (0..bars.len())
        .map(|t| (bars.high[t] + bars.low[t] + bars.close[t]) / 3.0)
        .collect();
    let avg = sma(&tp, n);
    (0..tp.len())
        .map(|t| {
            if avg[t].is_nan() {
                return f64::NAN;
            }
            let md = tp[t + 1 - n..=t].iter().map(|p| (p - avg[t]).abs()).sum::<f64>() / n as f64;
            if md == 0.0 {
                0.0
            } else {
                (tp[t] - avg[t]) / (0.015 * md)
            }
        })
        .collect()
}

pub fn adx(bars: &Bars, n: usize) -> Vec<f64> {
    let len = bars.len();
    let mut out = vec![f64::NAN; len];
    if len < 2 * n {
        return out;
    }
    let (h, l, c) = (&bars.high, &bars.low, &bars.close);
    let mut tr = vec![0.0; len];
    let mut pdm = vec![0.0; len];
    let mut mdm = vec![0.0; len];
    for t in 1..len {
        tr[t] = (h[t] - l[t]).max((h[t] - c[t - 1]).abs()).max((l[t] - c[t - 1]).abs());
        let up = h[t] - h[t - 1];
        let down = l[t - 1] - l[t];
        pdm[t] = if up > down && up > 0.0 { up } else { 0.0 };
        mdm[t] = if down > up && down > 0.0 { down } else { 0.0 };
    }
    let nf = n as f64;
    let mut s_tr: f64 = tr[1..=n].iter().sum();
    let mut s_p: f64 = pdm[1..=n].iter().sum();
    let mut s_m: f64 = mdm[1..=n].iter().sum();
    let dx = |s_tr: f64, s_p: f64, s_m: f64| {
        if s_tr <= 0.0 {
            return 0.0;
        }
        let pdi = 100.0 * s_p / s_tr;
        let mdi = 100.0 * s_m / s_tr;
        if pdi + mdi == 0.0 {
            0.0
        } else {
            100.0 * (pdi - mdi).abs() / (pdi + mdi)
        }
    };
    let mut dxs = vec![dx(s_tr, s_p, s_m)];
    if n == 1 {
        out[1] = dxs[0];
    }
    for t in n + 1..len {
        s_tr = s_tr - s_tr / nf + tr[t];
        s_p = s_p - s_p / nf + pdm[t];
        s_m = s_m - s_m / nf + mdm[t];
        let v = dx(s_tr, s_p, s_m);
        if t < 2 * n {
            dxs.push(v);
            if t == 2 * n - 1 {
                let first = dxs.iter().sum::<f64>() / nf;
                out[t] = first;
            }
        } else {
            out[t] = (out[t - 1] * (nf - 1.0) + v) / nf;
        }
    }
    out
}

pub fn obv(bars: &Bars) -> Vec<f64> {
    let mut out = Vec::with_capacity(bars.len());
    if bars.is_empty() {
        return out;
    }
    let mut acc = bars.volume[0];
    out.push(acc);
    for t in 1..bars.len() {
        let d = bars.close[t] - bars.close[t - 1];
        if d > 0.0 {
            acc += bars.volume[t];
        } else if d < 0.0 {
            acc -= bars.volume[t];
        }
        out.push(acc);
    }
    out
}

fn range_extremes(bars: &Bars, t: usize, n: usize) -> (f64, f64) {
    let hh = bars.high[t + 1 - n..=t].iter().copied().fold(f64::MIN, f64::max);
    let ll = bars.low[t + 1 - n..=t].iter().copied().fold(f64::MAX, f64::min);
    (hh, ll)
}

pub fn stochastic_k(bars: &Bars, n: usize) -> Vec<f64> {
    (0..bars.len())
        .map(|t| {
            if t + 1 < n {
                return f64::NAN;
            }
            let (hh, ll) = range_extremes(bars, t, n);
            if hh - ll <= 0.0 {
                50.0
            } else {
                100.0 * (bars.close[t] - ll) / (hh - ll)
            }
        })
        .collect()
}

pub fn williams_r(bars: &Bars, n: usize) -> Vec<f64> {
    (0..bars.len())
        .map(|t| {
            if t + 1 < n {
                return f64::NAN;
            }
            let (hh, ll) = range_extremes(bars, t, n);
            if hh - ll <= 0.0 {
                -50.0
            } else {
                -100.0 * (hh - bars.close[t]) / (hh - ll)
            }
        })
        .collect()
}

fn money_flow_volume(bars: &Bars) -> Vec<f64> {
    (0..bars.len())
        .map(|t| {
            let (h, l, c) = (bars.high[t], bars.low[t], bars.close[t]);
            if h - l <= 0.0 {
                0.0
            } else {
                ((c - l) - (h - c)) / (h - l) * bars.volume[t]
            }
        })
        .collect()
}

pub fn chaikin_money_flow(bars: &Bars, n: usize) -> Vec<f64> {
    let mfv = money_flow_volume(bars);
    (0..bars.len())
        .map(|t| {
            if t + 1 < n {
                return f64::NAN;
            }
            let v: f64 = bars.volume[t + 1 - n..=t].iter().sum();
            if v == 0.0 {
                0.0
            } else {
                mfv[t + 1 - n..=t].iter().sum::<f64>() / v
            }
        })
        .collect()
}

pub fn accumulation_distribution(bars: &Bars) -> Vec<f64> {
    let mut acc = 0.0;
    money_flow_volume(bars)
        .into_iter()
        .map(|m| {
            acc += m;
            acc
        })
        .collect()
}

/// Evaluates one indicator; rows inside the warm-up are NaN.
pub fn compute_indicator(bars: &Bars, spec: &IndicatorSpec) -> Result<Vec<f64>> {
    check_bars(bars)?;
    if spec.window == 0 {
        return Err(Error::Config("indicator window must be at least 1".into()));
    }
    let warm = spec.warm_up();
    if bars.len() <= warm {
        return Err(Error::InsufficientHistory {
            needed: warm + 1,
            available: bars.len(),
        });
    }
    let n = spec.window;
    let out = match spec.name {
        IndicatorKind::Sma => sma(&bars.close, n),
        IndicatorKind::Ema => ema(&bars.close, n),
        IndicatorKind::Macd => macd_histogram(&bars.close),
        IndicatorKind::Rsi => rsi(&bars.close, n),
        IndicatorKind::Boll => bollinger_percent_b(&bars.close, n),
        IndicatorKind::Cci => cci(bars, n),
        IndicatorKind::Adx => adx(bars, n),
        IndicatorKind::Obv => obv(bars),
        IndicatorKind::Stoch => stochastic_k(bars, n),
        IndicatorKind::Cmf => chaikin_money_flow(bars, n),
        IndicatorKind::Adl => accumulation_distribution(bars),
        IndicatorKind::Willr => williams_r(bars, n),
    };
    debug_assert!(out[warm..].iter().all(|v| !v.is_nan()));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ticker: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<IndicatorSpec>,
}

/// Metrics block `l`: per-ticker indicators (ticker-major, spec order) then
/// the market-level series.
#[derive(Clone, Debug, PartialEq)]
pub struct IndicatorMatrix {
    pub values: Array2<f64>,
    pub columns: Vec<ColumnInfo>,
    /// Longest warm-up over all columns.
    pub warm_up: usize,
}

impl IndicatorMatrix {
    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn manifest_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Manifest<'a> {
            rows: usize,
            warm_up: usize,
            columns: &'a [ColumnInfo],
        }
        Ok(serde_json::to_string_pretty(&Manifest {
            rows: self.values.nrows(),
            warm_up: self.warm_up,
            columns: &self.columns,
        })?)
    }
}

pub fn build_metrics_block(
    tickers: &[String],
    bars: &[Bars],
    specs: &[IndicatorSpec],
    market_series: &[(String, Vec<f64>)],
) -> Result<IndicatorMatrix> {
    if tickers.len() != bars.len() {
        return Err(Error::Shape("one bar set per ticker required".into()));
    }
    let t_len = bars
        .first()
        .map(|b| b.len())
        .or_else(|| market_series.first().map(|s| s.1.len()))
        .unwrap_or(0);
    if bars.iter().any(|b| b.len() != t_len) || market_series.iter().any(|s| s.1.len() != t_len) {
        return Err(Error::Alignment("inputs do not share one calendar".into()));
    }
    let per_ticker: Vec<Vec<Vec<f64>>> = bars
        .par_iter()
        .map(|b| specs.iter().map(|s| compute_indicator(b, s)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let h = tickers.len() * specs.len() + market_series.len();
    let mut values = Array2::from_elem((t_len, h), f64::NAN);
    let mut columns = Vec::with_capacity(h);
    let mut col = 0;
    for (ticker, cols) in tickers.iter().zip(per_ticker) {
        for (spec, series) in specs.iter().zip(cols) {
            values.column_mut(col).assign(&ndarray::ArrayView1::from(&series));
            columns.push(ColumnInfo {
                name: format!("{ticker}:{}", spec.label()),
                ticker: Some(ticker.clone()),
                spec: Some(*spec),
            });
            col += 1;
        }
    }
    for (name, series) in market_series {
        values.column_mut(col).assign(&ndarray::ArrayView1::from(series));
        columns.push(ColumnInfo {
            name: name.clone(),
            ticker: None,
            spec: None,
        });
        col += 1;
    }
    let warm_up = if tickers.is_empty() {
        0
    } else {
        specs.iter().map(|s| s.warm_up()).max().unwrap_or(0)
    };
    Ok(IndicatorMatrix {
        values,
        columns,
        warm_up,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closes(c: &[f64]) -> Bars {
        Bars::from_closes(c, &vec![1.0; c.len()])
    }

    #[test]
    fn sma_example() {
        let v = compute_indicator(&closes(&[1.0, 2.0, 3.0]), &IndicatorSpec::new(IndicatorKind::Sma, 3).unwrap()).unwrap();
        assert!(v[0].is_nan() && v[1].is_nan());
        assert_eq!(v[2], 2.0);
    }

    #[test]
    fn rsi_rising_is_100() {
        let c: Vec<f64> = (1..=30).map(|i| i as f64).collect();
        let v = rsi(&c, 14);
        assert!(v[14..].iter().all(|&x| x == 100.0));
    }

    #[test]
    fn obv_example() {
        let b = Bars::from_closes(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]);
        assert_eq!(obv(&b), vec![10.0, 30.0, 60.0]);
    }

    #[test]
    fn insufficient_history() {
        let b = closes(&[1.0; 10]);
        assert!(matches!(
            compute_indicator(&b, &IndicatorSpec::new(IndicatorKind::Adx, 21).unwrap()),
            Err(Error::InsufficientHistory { .. })
        ));
    }

    #[test]
    fn constant_series_fixed_points() {
        let b = closes(&[5.0; 80]);
        for spec in [
            IndicatorSpec::new(IndicatorKind::Sma, 21).unwrap(),
            IndicatorSpec::new(IndicatorKind::Ema, 21).unwrap(),
        ] {
            let v = compute_indicator(&b, &spec).unwrap();
            assert!(v[20..].iter().all(|&x| (x - 5.0).abs() < 1e-12));
        }
        let m = compute_indicator(&b, &IndicatorSpec::new(IndicatorKind::Macd, 26).unwrap()).unwrap();
        assert!(m[33..].iter().all(|&x| x.abs() < 1e-12));
        assert!(rsi(&b.close, 14)[14..].iter().all(|&x| x == 50.0));
    }

    #[test]
    fn default_warm_up_is_adx63() {
        let specs = default_specs();
        assert_eq!(specs.len(), 22);
        assert_eq!(specs.iter().map(|s| s.warm_up()).max(), Some(125));
    }

    #[test]
    fn every_indicator_finite_after_warm_up() {
        let n = 200;
        let mut b = Bars::default();
        let mut c = 50.0;
        for t in 0..n {
            let next = c * (1.0 + 0.01 * ((t * 7919 % 13) as f64 - 6.0) / 6.0);
            let hi = c.max(next) * 1.01;
            let lo = c.min(next) * 0.99;
            b.push(c, hi, lo, next, (t % 5) as f64 * 100.0);
            c = next;
        }
        for spec in default_specs() {
            let v = compute_indicator(&b, &spec).unwrap();
            let w = spec.warm_up();
            assert!(v[..w].iter().all(|x| x.is_nan()), "{spec:?}");
            assert!(v[w..].iter().all(|x| x.is_finite()), "{spec:?}");
        }
    }

    #[test]
    fn metrics_block_width() {
        let b = closes(&[1.0, 2.0, 3.0, 4.0]);
        let specs = [
            IndicatorSpec::new(IndicatorKind::Sma, 2).unwrap(),
            IndicatorSpec::new(IndicatorKind::Ema, 2).unwrap(),
            IndicatorSpec::new(IndicatorKind::Obv, 1).unwrap(),
        ];
        let tickers = vec!["A".to_string(), "B".to_string()];
        let m1 = vec![0.0; 4];
        let m = build_metrics_block(
            &tickers,
            &[b.clone(), b.clone()],
            &specs,
            &[("rate".into(), m1.clone()), ("fx".into(), m1.clone())],
        )
        .unwrap();
        assert_eq!(m.width(), 8);
        let m_less = build_metrics_block(&tickers, &[b.clone(), b.clone()], &specs, &[("rate".into(), m1)]).unwrap();
        assert_eq!(m_less.width(), 7);
        assert!(matches!(
            build_metrics_block(&tickers, &[b.clone(), closes(&[1.0])], &specs, &[]),
            Err(Error::Alignment(_))
        ));
    }
}
