//! Deterministic synthetic data: OHLCV markets with momentum and an optional
//! regime shift, and linear-Gaussian transition tasks for the autoencoder.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Bars, Panel, PanelRow, Series};
use crate::error::{Error, Result};
use crate::wae::TransitionBatch;

/// Per-asset return process
/// `r_t = drift + m_t * momentum * r_{t-1} + vol * eps_t`, where `m_t` is +1
/// before the regime shift and -1 from it on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    /// One entry per asset, or a single entry applied to all.
    pub drift: Vec<f64>,
    pub vol: Vec<f64>,
    pub momentum: f64,
    pub regime_shift: Option<usize>,
    pub start: NaiveDate,
    pub initial_price: f64,
    pub shares_outstanding: f64,
    pub mean_volume: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            drift: vec![0.0003],
            vol: vec![0.012],
            momentum: 0.05,
            regime_shift: None,
            start: NaiveDate::from_ymd_opt(2000, 1, 3).unwrap(),
            initial_price: 100.0,
            shares_outstanding: 1e6,
            mean_volume: 1e5,
        }
    }
}

impl SynthSpec {
    fn per_asset(v: &[f64], d: usize, what: &str) -> Result<Vec<f64>> {
        match v.len() {
            1 => Ok(vec![v[0]; d]),
            n if n == d => Ok(v.to_vec()),
            n => Err(Error::Config(format!("{what} has {n} entries for {d} assets"))),
        }
    }

    pub fn validate(&self, assets: usize) -> Result<()> {
        if assets < 2 {
            return Err(Error::Config("synthetic market needs at least 2 assets".into()));
        }
        let vol = Self::per_asset(&self.vol, assets, "vol")?;
        let drift = Self::per_asset(&self.drift, assets, "drift")?;
        if vol.iter().any(|v| !v.is_finite() || *v < 0.0) || drift.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("vol must be >= 0 and drift finite".into()));
        }
        if !(self.momentum.is_finite() && self.momentum.abs() < 1.0) {
            return Err(Error::Config("momentum must lie in (-1, 1)".into()));
        }
        if !(self.initial_price > 0.0 && self.shares_outstanding > 0.0 && self.mean_volume > 0.0) {
            return Err(Error::Config("prices, shares and volume must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SynthMarket {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    pub bars: Vec<Bars>,
    pub market_cap: Vec<Vec<f64>>,
    /// `(T - 1) x D` close-to-close returns aligned with `dates[1..]`.
    pub returns: Array2<f64>,
}

impl SynthMarket {
    pub fn panel(&self) -> Result<Panel> {
        let mut rows = Vec::with_capacity(self.dates.len() * self.tickers.len());
        for (k, t) in self.tickers.iter().enumerate() {
            let b = &self.bars[k];
            for (i, &date) in self.dates.iter().enumerate() {
                rows.push(PanelRow {
                    date,
                    ticker: t.clone(),
                    open: b.open[i],
                    high: b.high[i],
                    low: b.low[i],
                    close: b.close[i],
                    volume: b.volume[i],
                    market_cap: Some(self.market_cap[k][i]),
                });
            }
        }
        Panel::from_rows(rows)
    }

    /// Annualized 21-day realized volatility of the equal-weighted market,
    /// in percent; a stand-in volatility index. The first 21 rows repeat the
    /// first full-window value.
    pub fn volatility_index(&self) -> Series {
        let t_len = self.dates.len();
        let ew: Vec<f64> = self.returns.rows().into_iter().map(|r| r.mean().unwrap_or(0.0)).collect();
        let w = 21usize;
        let mut v = vec![f64::NAN; t_len];
        for t in 1..t_len {
            let lo = t.saturating_sub(w);
            let xs = &ew[lo..t];
            if xs.len() < 2 {
                continue;
            }
            let m = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
            v[t] = 100.0 * (252.0 * var).sqrt();
        }
        let first = v.iter().copied().find(|x| x.is_finite()).unwrap_or(0.0);
        for x in v.iter_mut() {
            if !x.is_finite() {
                *x = first;
            }
        }
        Series {
            dates: self.dates.clone(),
            values: v,
        }
    }
}

/// Monday-to-Friday calendar of `n` days from `start` (rolled forward to a
/// weekday).
pub fn business_days(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(n);
    let mut d = start;
    while out.len() < n {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d + Days::new(1);
    }
    out
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Simulates `assets` tickers over `days` trading days.
pub fn synth_market(seed: u64, assets: usize, days: usize, spec: &SynthSpec) -> Result<SynthMarket> {
    spec.validate(assets)?;
    if days == 0 {
        return Err(Error::Config("synthetic market needs at least one day".into()));
    }
    let drift = SynthSpec::per_asset(&spec.drift, assets, "drift")?;
    let vol = SynthSpec::per_asset(&spec.vol, assets, "vol")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dates = business_days(spec.start, days);
    let width = (assets as f64).log10().floor() as usize + 1;
    let tickers: Vec<String> = (0..assets).map(|k| format!("S{k:0width$}")).collect();
    let mut bars = vec![Bars::default(); assets];
    let mut caps = vec![Vec::with_capacity(days); assets];
    let mut returns = Array2::zeros((days.saturating_sub(1), assets));
    let mut prev_r = vec![0.0; assets];
    let mut close = vec![spec.initial_price; assets];
    for t in 0..days {
        let sign = match spec.regime_shift {
            Some(s) if t >= s => -1.0,
            _ => 1.0,
        };
        for k in 0..assets {
            let eps = normal(&mut rng);
            let wick_hi = normal(&mut rng).abs();
            let wick_lo = normal(&mut rng).abs();
            let vol_shock = normal(&mut rng);
            let open = close[k];
            if t > 0 {
                let r = drift[k] + sign * spec.momentum * prev_r[k] + vol[k] * eps;
                let r = r.max(-0.9);
                close[k] = open * (1.0 + r);
                returns[[t - 1, k]] = close[k] / open - 1.0;
                prev_r[k] = r;
            }
            let c = close[k];
            let high = open.max(c) * (1.0 + 0.5 * vol[k] * wick_hi);
            let low = open.min(c) * (1.0 - (0.5 * vol[k] * wick_lo).min(0.5));
            let volume = (spec.mean_volume * (0.3 * vol_shock - 0.045).exp()).round();
            bars[k].push(open, high, low, c, volume);
            caps[k].push(c * spec.shares_outstanding);
        }
    }
    Ok(SynthMarket {
        dates,
        tickers,
        bars,
        market_cap: caps,
        returns,
    })
}

/// `s' = sign * M s + C a + noise * eps` with `M = P Q^T` of rank `rank`.
/// States are i.i.d. standard normal and actions are softmax weights of
/// standard normal logits.
#[derive(Clone, Debug)]
pub struct LinearGaussianTask {
    pub dim_s: usize,
    pub dim_a: usize,
    pub rank: usize,
    pub m: Array2<f64>,
    pub c: Array2<f64>,
    pub noise: f64,
}

impl LinearGaussianTask {
    pub fn new(seed: u64, dim_s: usize, rank: usize, dim_a: usize, noise: f64) -> Result<Self> {
        if rank == 0 || rank > dim_s || dim_a == 0 {
            return Err(Error::Config("need 1 <= rank <= dim_s and dim_a >= 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Array2::from_shape_fn((dim_s, rank), |_| normal(&mut rng));
        let q = Array2::from_shape_fn((dim_s, rank), |_| normal(&mut rng) / (dim_s as f64).sqrt());
        let mut m = p.dot(&q.t());
        // unit average output variance for standard-normal states
        let scale = (m.iter().map(|v| v * v).sum::<f64>() / dim_s as f64).sqrt();
        m.mapv_inplace(|v| v / scale);
        let c = Array2::from_shape_fn((dim_s, dim_a), |_| 0.5 * normal(&mut rng));
        Ok(Self {
            dim_s,
            dim_a,
            rank,
            m,
            c,
            noise,
        })
    }

    pub fn next_state(&self, s: &Array1<f64>, a: &Array1<f64>, flipped: bool, rng: &mut impl Rng) -> Array1<f64> {
        let sign = if flipped { -1.0 } else { 1.0 };
        let mut out = self.m.dot(s) * sign + self.c.dot(a);
        for v in out.iter_mut() {
            let e: f64 = StandardNormal.sample(rng);
            *v += self.noise * e;
        }
        out
    }

    pub fn sample(&self, n: usize, flipped: bool, rng: &mut impl Rng) -> TransitionBatch {
        let mut states = Array2::zeros((n, self.dim_s));
        let mut actions = Array2::zeros((n, self.dim_a));
        let mut next = Array2::zeros((n, self.dim_s));
        for i in 0..n {
            let s = Array1::from_shape_fn(self.dim_s, |_| StandardNormal.sample(rng));
            let logits: Vec<f64> = (0..self.dim_a).map(|_| StandardNormal.sample(rng)).collect();
            let a = Array1::from(crate::nn::softmax(&logits).expect("finite logits"));
            let s2 = self.next_state(&s, &a, flipped, rng);
            states.row_mut(i).assign(&s);
            actions.row_mut(i).assign(&a);
            next.row_mut(i).assign(&s2);
        }
        TransitionBatch::new(states, actions, next).expect("consistent shapes")
    }

    /// A stream of `total` transitions whose dynamics flip sign from index
    /// `total / 2` on.
    pub fn regime_shift_stream(&self, total: usize, rng: &mut impl Rng) -> (TransitionBatch, usize) {
        let half = total / 2;
        let first = self.sample(half, false, rng);
        let second = self.sample(total - half, true, rng);
        (first.concat(&second).expect("same dims"), half)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_market() {
        let spec = SynthSpec::default();
        let a = synth_market(3, 3, 50, &spec).unwrap();
        let b = synth_market(3, 3, 50, &spec).unwrap();
        assert_eq!(a.bars, b.bars);
        assert_eq!(a.returns, b.returns);
        let c = synth_market(4, 3, 50, &spec).unwrap();
        assert_ne!(a.returns, c.returns);
    }

    #[test]
    fn zero_vol_is_constant() {
        let spec = SynthSpec {
            drift: vec![0.0],
            vol: vec![0.0],
            ..SynthSpec::default()
        };
        let m = synth_market(1, 2, 30, &spec).unwrap();
        for b in &m.bars {
            assert!(b.close.iter().all(|&c| c == 100.0));
        }
    }

    #[test]
    fn returns_match_closes() {
        let spec = SynthSpec {
            regime_shift: Some(100),
            momentum: 0.3,
            ..SynthSpec::default()
        };
        let m = synth_market(9, 4, 200, &spec).unwrap();
        for (k, b) in m.bars.iter().enumerate() {
            for t in 1..200 {
                assert!((b.close[t] / b.close[t - 1] - 1.0 - m.returns[[t - 1, k]]).abs() < 1e-10);
                assert!(b.low[t] <= b.open[t].min(b.close[t]) && b.high[t] >= b.open[t].max(b.close[t]));
            }
        }
        assert!(m.panel().is_ok());
    }

    #[test]
    fn bad_specs_rejected() {
        assert!(synth_market(1, 1, 10, &SynthSpec::default()).is_err());
        let spec = SynthSpec {
            vol: vec![0.1, 0.2],
            ..SynthSpec::default()
        };
        assert!(synth_market(1, 3, 10, &spec).is_err());
    }

    #[test]
    fn business_days_skip_weekends() {
        let d = business_days(NaiveDate::from_ymd_opt(2024, 1, 5).unwrap(), 3);
        assert_eq!(d[1], NaiveDate::from_ymd_opt(2024, 1, 8).unwrap());
    }

    #[test]
    fn transition_task_has_requested_rank_structure() {
        let task = LinearGaussianTask::new(2, 10, 3, 2, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let batch = task.sample(8, false, &mut rng);
        assert_eq!(batch.len(), 8);
        assert_eq!(batch.states.ncols(), 10);
        let ms: f64 = task.m.iter().map(|v| v * v).sum::<f64>() / 10.0;
        assert!((ms - 1.0).abs() < 1e-12);
    }
}
