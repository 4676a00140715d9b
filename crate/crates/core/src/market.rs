//! Portfolio MDP: state layout, action projection, wealth transition with
//! proportional costs, and the rolling Sharpe reward.
//!
//! Asset index [`CASH`] (0) is the risk-free asset; its per-period return is
//! the risk-free rate. Returns are simple returns and wealth compounds with
//! gross returns `1 + delta`.

use chrono::NaiveDate;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax;

/// Index of the risk-free asset in every weight and return vector.
pub const CASH: usize = 0;

pub const SIMPLEX_TOL: f64 = 1e-9;

/// Raw market state `(delta, w, l, x)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarketState {
    pub returns: Vec<f64>,
    pub holdings: Vec<f64>,
    pub metrics: Vec<f64>,
    pub wealth: f64,
}

impl MarketState {
    pub fn num_assets(&self) -> usize {
        self.returns.len()
    }

    pub fn dim(&self) -> usize {
        state_dim(self.returns.len(), self.metrics.len())
    }

    /// Flattened as `[returns; holdings; metrics; wealth]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.returns);
        v.extend_from_slice(&self.holdings);
        v.extend_from_slice(&self.metrics);
        v.push(self.wealth);
        v
    }

    pub fn from_vector(v: &[f64], num_assets: usize, num_metrics: usize) -> Result<Self> {
        let expected = state_dim(num_assets, num_metrics);
        if v.len() != expected {
            return Err(Error::Shape(format!(
                "state vector has length {}, expected {expected}",
                v.len()
            )));
        }
        let d = num_assets;
        Ok(Self {
            returns: v[..d].to_vec(),
            holdings: v[d..2 * d].to_vec(),
            metrics: v[2 * d..2 * d + num_metrics].to_vec(),
            wealth: v[expected - 1],
        })
    }
}

/// `2D + h + 1`.
pub fn state_dim(num_assets: usize, num_metrics: usize) -> usize {
    2 * num_assets + num_metrics + 1
}

/// Target weights over all assets, cash included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PortfolioAction(pub Vec<f64>);

impl PortfolioAction {
    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn uniform(num_assets: usize) -> Self {
        Self(vec![1.0 / num_assets as f64; num_assets])
    }

    pub fn all_cash(num_assets: usize) -> Self {
        let mut w = vec![0.0; num_assets];
        w[CASH] = 1.0;
        Self(w)
    }

    pub fn is_long_only(&self) -> bool {
        let sum: f64 = self.0.iter().sum();
        self.0.iter().all(|&w| w >= 0.0 && w.is_finite()) && (sum - 1.0).abs() <= SIMPLEX_TOL
    }

    pub fn check_long_only(&self) -> Result<()> {
        if self.is_long_only() {
            Ok(())
        } else {
            Err(Error::Numeric(format!("action {:?} is not on the simplex", self.0)))
        }
    }
}

/// Softmax onto the probability simplex.
pub fn project_long_only(logits: &[f64]) -> Result<PortfolioAction> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    Ok(PortfolioAction(softmax(logits)?))
}

/// Shift every weight equally so that the weights sum to one.
pub fn project_long_short(raw: &[f64]) -> Result<PortfolioAction> {
    if raw.is_empty() {
        return Err(Error::Shape("empty action".into()));
    }
    let d = raw.len() as f64;
    let shift = (raw.iter().sum::<f64>() - 1.0) / d;
    Ok(PortfolioAction(raw.iter().map(|a| a - shift).collect()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub rate: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self { rate: 0.001 }
    }
}

impl CostModel {
    pub fn new(rate: f64) -> Result<Self> {
        if !(rate.is_finite() && rate >= 0.0) {
            return Err(Error::Config(format!("cost rate must be >= 0, got {rate}")));
        }
        Ok(Self { rate })
    }
}

/// `sum_d |a_d - w_d|`, cash leg included.
pub fn turnover(target: &[f64], holdings: &[f64]) -> f64 {
    target.iter().zip(holdings).map(|(a, w)| (a - w).abs()).sum()
}

/// `rate * x * sum_d |a_d - w_d|`.
pub fn transaction_cost(model: &CostModel, target: &[f64], holdings: &[f64], wealth: f64) -> f64 {
    model.rate * wealth * turnover(target, holdings)
}

/// One portfolio transition. The new holdings equal the action; wealth is
/// `(sum_d (1 + delta'_d) a_d) x - c(a, w)`.
pub fn step(
    state: &MarketState,
    action: &PortfolioAction,
    next_returns: &[f64],
    next_metrics: &[f64],
    cost: &CostModel,
) -> Result<MarketState> {
    let d = state.num_assets();
    if action.len() != d || next_returns.len() != d || state.holdings.len() != d {
        return Err(Error::Shape(format!(
            "transition with {d} assets got action {} and returns {}",
            action.len(),
            next_returns.len()
        )));
    }
    let c = transaction_cost(cost, action.weights(), &state.holdings, state.wealth);
    let growth: f64 = action
        .weights()
        .iter()
        .zip(next_returns)
        .map(|(a, r)| a * (1.0 + r))
        .sum();
    let wealth = growth * state.wealth - c;
    if !wealth.is_finite() {
        return Err(Error::Numeric(format!("wealth became {wealth}")));
    }
    if wealth <= 0.0 {
        return Err(Error::Bankruptcy { wealth });
    }
    Ok(MarketState {
        returns: next_returns.to_vec(),
        holdings: action.0.clone(),
        metrics: next_metrics.to_vec(),
        wealth,
    })
}

/// Mean over sample standard deviation (n - 1 denominator) of `realized - rf`.
pub fn reward_sharpe(realized: &[f64], rf: &[f64]) -> Result<f64> {
    if realized.len() != rf.len() {
        return Err(Error::Shape(format!(
            "{} returns but {} risk-free rates",
            realized.len(),
            rf.len()
        )));
    }
    let k = realized.len();
    if k < 2 {
        return Err(Error::InsufficientHistory {
            needed: 2,
            available: k,
        });
    }
    let excess: Vec<f64> = realized.iter().zip(rf).map(|(r, f)| r - f).collect();
    let mean = excess.iter().sum::<f64>() / k as f64;
    let var = excess.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    let sd = var.sqrt();
    // relative floor: a window of identical returns leaves only rounding noise
    if !(sd > 1e-12 * mean.abs().max(1e-300)) || sd < 1e-15 {
        return Err(Error::DegenerateReward);
    }
    Ok(mean / sd)
}

/// Observed transition `(s, a, r, s')`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransitionTuple {
    pub state: MarketState,
    pub action: PortfolioAction,
    pub reward: f64,
    pub next_state: MarketState,
}

/// Calendar-aligned numeric inputs for one trading universe.
///
/// Row `t` of `returns` is the simple return from close `t - 1` to close `t`
/// (row 0 is zero). Column [`CASH`] carries the risk-free rate.
#[derive(Clone, Debug)]
pub struct MarketData {
    pub dates: Vec<NaiveDate>,
    pub assets: Vec<String>,
    pub returns: Array2<f64>,
    pub metrics: Array2<f64>,
    /// Market capitalisations of the non-cash assets (`T x (D - 1)`), if known.
    pub market_caps: Option<Array2<f64>>,
    /// First row whose metrics are complete (indicator warm-up satisfied).
    pub first_valid: usize,
    /// Per asset, the last row at which the asset can be held.
    pub last_tradable: Vec<usize>,
}

impl MarketData {
    pub fn new(
        dates: Vec<NaiveDate>,
        assets: Vec<String>,
        returns: Array2<f64>,
        metrics: Array2<f64>,
    ) -> Result<Self> {
        let t = dates.len();
        if returns.nrows() != t || metrics.nrows() != t {
            return Err(Error::Shape(format!(
                "{} dates, {} return rows, {} metric rows",
                t,
                returns.nrows(),
                metrics.nrows()
            )));
        }
        if returns.ncols() != assets.len() {
            return Err(Error::Shape("returns columns do not match assets".into()));
        }
        if returns.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integrity("non-finite return".into()));
        }
        let first_valid = (0..t)
            .find(|&i| metrics.row(i).iter().all(|v| v.is_finite()))
            .unwrap_or(t);
        let last_tradable = vec![t.saturating_sub(1); assets.len()];
        Ok(Self {
            dates,
            assets,
            returns,
            metrics,
            market_caps: None,
            first_valid,
            last_tradable,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn num_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn num_metrics(&self) -> usize {
        self.metrics.ncols()
    }

    pub fn state_dim(&self) -> usize {
        state_dim(self.num_assets(), self.num_metrics())
    }

    pub fn risk_free(&self, t: usize) -> f64 {
        self.returns[[t, CASH]]
    }

    /// Moves the weight of assets that can no longer be held at `t` into cash.
    pub fn mask_action(&self, t: usize, action: &PortfolioAction) -> PortfolioAction {
        let mut w = action.0.clone();
        for (d, &last) in self.last_tradable.iter().enumerate() {
            if d != CASH && t >= last && w[d] != 0.0 {
                w[CASH] += w[d];
                w[d] = 0.0;
            }
        }
        PortfolioAction(w)
    }
}

/// State at row `t` with the given holdings and wealth.
pub fn assemble_state(
    data: &MarketData,
    t: usize,
    holdings: &[f64],
    wealth: f64,
) -> Result<MarketState> {
    if t >= data.len() {
        return Err(Error::Range(format!("row {t} beyond {} rows", data.len())));
    }
    if t < data.first_valid {
        return Err(Error::InsufficientHistory {
            needed: data.first_valid + 1,
            available: t + 1,
        });
    }
    if holdings.len() != data.num_assets() {
        return Err(Error::Shape("holdings length differs from asset count".into()));
    }
    Ok(MarketState {
        returns: data.returns.row(t).to_vec(),
        holdings: holdings.to_vec(),
        metrics: data.metrics.row(t).to_vec(),
        wealth,
    })
}

/// Maps a raw state to the network input: returns and metrics are
/// standardized with statistics fitted on a training span; holdings and
/// wealth pass through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateScaler {
    pub return_mean: Vec<f64>,
    pub return_std: Vec<f64>,
    pub metric_mean: Vec<f64>,
    pub metric_std: Vec<f64>,
}

impl StateScaler {
    pub fn identity(num_assets: usize, num_metrics: usize) -> Self {
        Self {
            return_mean: vec![0.0; num_assets],
            return_std: vec![1.0; num_assets],
            metric_mean: vec![0.0; num_metrics],
            metric_std: vec![1.0; num_metrics],
        }
    }

    /// Fit on rows `[from, to)`.
    pub fn fit(data: &MarketData, from: usize, to: usize) -> Result<Self> {
        let from = from.max(data.first_valid);
        if to <= from + 1 {
            return Err(Error::InsufficientHistory {
                needed: 2,
                available: to.saturating_sub(from),
            });
        }
        let stats = |col: ndarray::ArrayView1<f64>| {
            let xs = &col.as_slice().map(|s| s.to_vec()).unwrap_or_else(|| col.to_vec())[from..to];
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let sd = var.sqrt();
            (mean, if sd > 1e-12 { sd } else { 1.0 })
        };
        let (mut rm, mut rs) = (Vec::new(), Vec::new());
        for c in data.returns.columns() {
            let (m, s) = stats(c);
            rm.push(m);
            rs.push(s);
        }
        let (mut mm, mut ms) = (Vec::new(), Vec::new());
        for c in data.metrics.columns() {
            let (m, s) = stats(c);
            mm.push(m);
            ms.push(s);
        }
        Ok(Self {
            return_mean: rm,
            return_std: rs,
            metric_mean: mm,
            metric_std: ms,
        })
    }

    pub fn observe(&self, state: &MarketState) -> Vec<f64> {
        let mut v = Vec::with_capacity(state.dim());
        v.extend(
            state
                .returns
                .iter()
                .zip(self.return_mean.iter().zip(&self.return_std))
                .map(|(x, (m, s))| (x - m) / s),
        );
        v.extend_from_slice(&state.holdings);
        v.extend(
            state
                .metrics
                .iter()
                .zip(self.metric_mean.iter().zip(&self.metric_std))
                .map(|(x, (m, s))| (x - m) / s),
        );
        v.push(state.wealth);
        v
    }
}

/// What an environment step reports back.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub reward: f64,
    pub next_state: MarketState,
    pub done: bool,
    pub degenerate_reward: bool,
}

/// Walks a historical span one trading day at a time.
///
/// The reward for action `a_t` is the Sharpe ratio of the returns earned by
/// holding `a_t` over the following `reward_window` days (truncated at the end
/// of the span), net of the cost of moving into `a_t` and in excess of the
/// risk-free rate. Every row consumed lies below `end`.
#[derive(Clone, Debug)]
pub struct PortfolioEnv<'a> {
    data: &'a MarketData,
    cost: CostModel,
    reward_window: usize,
    end: usize,
    t: usize,
    state: MarketState,
    max_row_read: usize,
}

impl<'a> PortfolioEnv<'a> {
    /// `end` is the exclusive row limit of data the environment may read.
    pub fn new(
        data: &'a MarketData,
        cost: CostModel,
        reward_window: usize,
        start: usize,
        end: usize,
    ) -> Result<Self> {
        if reward_window < 2 {
            return Err(Error::Config("reward window must be at least 2".into()));
        }
        let end = end.min(data.len());
        if start + 3 > end {
            return Err(Error::InsufficientHistory {
                needed: start + 3,
                available: end,
            });
        }
        let d = data.num_assets();
        let state = assemble_state(data, start, &PortfolioAction::uniform(d).0, 1.0)?;
        Ok(Self {
            data,
            cost,
            reward_window,
            end,
            t: start,
            state,
            max_row_read: start,
        })
    }

    pub fn reset(&mut self, start: usize) -> Result<&MarketState> {
        if start + 3 > self.end {
            return Err(Error::InsufficientHistory {
                needed: start + 3,
                available: self.end,
            });
        }
        let d = self.data.num_assets();
        self.t = start;
        self.state = assemble_state(self.data, start, &PortfolioAction::uniform(d).0, 1.0)?;
        self.max_row_read = self.max_row_read.max(start);
        Ok(&self.state)
    }

    pub fn state(&self) -> &MarketState {
        &self.state
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn data(&self) -> &MarketData {
        self.data
    }

    /// Highest data row consumed so far; always below `end`.
    pub fn max_row_read(&self) -> usize {
        self.max_row_read
    }

    pub fn step(&mut self, action: &PortfolioAction) -> Result<StepOutcome> {
        let t = self.t;
        let action = self.data.mask_action(t, action);
        let last = (t + self.reward_window).min(self.end - 1);
        let cost = transaction_cost(&self.cost, action.weights(), &self.state.holdings, 1.0);
        let mut realized = Vec::with_capacity(last - t);
        let mut rf = Vec::with_capacity(last - t);
        for i in t + 1..=last {
            let gross: f64 = action
                .weights()
                .iter()
                .zip(self.data.returns.row(i))
                .map(|(a, r)| a * (1.0 + r))
                .sum();
            let net = if i == t + 1 { gross - cost } else { gross };
            realized.push(net - 1.0);
            rf.push(self.data.risk_free(i));
        }
        let (reward, degenerate) = match reward_sharpe(&realized, &rf) {
            Ok(r) => (r, false),
            Err(Error::DegenerateReward) => {
                log::debug!("degenerate reward window at row {t}; using 0");
                (0.0, true)
            }
            Err(e) => return Err(e),
        };
        let next = step(
            &self.state,
            &action,
            &self.data.returns.row(t + 1).to_vec(),
            &self.data.metrics.row(t + 1).to_vec(),
            &self.cost,
        )?;
        self.t = t + 1;
        self.max_row_read = self.max_row_read.max(last).max(t + 1);
        self.state = next.clone();
        Ok(StepOutcome {
            reward,
            next_state: next,
            done: self.t + 3 > self.end,
            degenerate_reward: degenerate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn long_only_projection_examples() {
        let a = project_long_only(&[0.3, 0.3, 0.3, 0.3]).unwrap();
        assert!(a.0.iter().all(|&w| close(w, 0.25, 1e-15)));
        let a = project_long_only(&[3f64.ln(), 0.0]).unwrap();
        assert!(close(a.0[0], 0.75, 1e-15) && close(a.0[1], 0.25, 1e-15));
    }

    #[test]
    fn long_short_projection_examples() {
        let a = project_long_short(&[0.7, 0.5, -0.2]).unwrap();
        assert!(a.0.iter().zip([0.7, 0.5, -0.2]).all(|(x, y)| close(*x, y, 1e-15)));
        assert_eq!(project_long_short(&[1.0, 1.0]).unwrap().0, vec![0.5, 0.5]);
        let a = project_long_short(&[0.0, 0.0, 0.0]).unwrap();
        assert!(a.0.iter().all(|&w| close(w, 1.0 / 3.0, 1e-15)));
    }

    #[test]
    fn cost_examples() {
        let m = CostModel::new(0.001).unwrap();
        assert_eq!(transaction_cost(&m, &[0.3, 0.7], &[0.3, 0.7], 100.0), 0.0);
        assert!(close(transaction_cost(&m, &[0.0, 1.0], &[1.0, 0.0], 100.0), 0.2, 1e-15));
        let zero = CostModel::new(0.0).unwrap();
        assert_eq!(transaction_cost(&zero, &[0.0, 1.0], &[1.0, 0.0], 100.0), 0.0);
        assert!(CostModel::new(-0.1).is_err());
    }

    fn state2(w: Vec<f64>, x: f64) -> MarketState {
        MarketState {
            returns: vec![0.0, 0.0],
            holdings: w,
            metrics: vec![],
            wealth: x,
        }
    }

    #[test]
    fn step_examples() {
        let zero = CostModel::new(0.0).unwrap();
        let s = state2(vec![0.4, 0.6], 50.0);
        let a = PortfolioAction(vec![0.4, 0.6]);
        let next = step(&s, &a, &[0.0, 0.0], &[], &zero).unwrap();
        assert_eq!(next.wealth, 50.0);
        assert_eq!(next.holdings, a.0);

        let s = state2(vec![0.5, 0.5], 100.0);
        let a = PortfolioAction(vec![0.5, 0.5]);
        let next = step(&s, &a, &[0.02, 0.0], &[], &zero).unwrap();
        assert!(close(next.wealth, 101.0, 1e-12));
    }

    #[test]
    fn step_reports_bankruptcy() {
        let zero = CostModel::new(0.0).unwrap();
        let s = state2(vec![0.0, 1.0], 10.0);
        let a = PortfolioAction(vec![0.0, 1.0]);
        assert!(matches!(
            step(&s, &a, &[0.0, -1.0], &[], &zero),
            Err(Error::Bankruptcy { .. })
        ));
    }

    #[test]
    fn reward_examples() {
        let r = reward_sharpe(&[0.01, 0.02, 0.03], &[0.0; 3]).unwrap();
        assert!(close(r, 2.0, 1e-12));
        let r = reward_sharpe(&[0.01, -0.01, 0.01, -0.01], &[0.0; 4]).unwrap();
        assert!(close(r, 0.0, 1e-15));
        assert!(matches!(
            reward_sharpe(&[0.01; 5], &[0.0; 5]),
            Err(Error::DegenerateReward)
        ));
        assert!(reward_sharpe(&[0.01], &[0.0]).is_err());
    }

    #[test]
    fn state_layout() {
        assert_eq!(state_dim(2, 0), 5);
        // 501 assets including cash; 14,503 metric columns
        assert_eq!(state_dim(501, 14_503), 15_506);
        let s = MarketState {
            returns: vec![0.1, 0.2],
            holdings: vec![0.5, 0.5],
            metrics: vec![3.0],
            wealth: 7.0,
        };
        let v = s.to_vector();
        assert_eq!(v, vec![0.1, 0.2, 0.5, 0.5, 3.0, 7.0]);
        assert_eq!(MarketState::from_vector(&v, 2, 1).unwrap(), s);
    }

    #[test]
    fn assemble_state_requires_warm_up() {
        let dates: Vec<NaiveDate> = (0..4)
            .map(|i| NaiveDate::from_ymd_opt(2020, 1, 1 + i).unwrap())
            .collect();
        let returns = Array2::zeros((4, 2));
        let mut metrics = Array2::zeros((4, 1));
        metrics[[0, 0]] = f64::NAN;
        let data = MarketData::new(dates, vec!["CASH".into(), "A".into()], returns, metrics).unwrap();
        assert_eq!(data.first_valid, 1);
        assert!(matches!(
            assemble_state(&data, 0, &[1.0, 0.0], 1.0),
            Err(Error::InsufficientHistory { .. })
        ));
        assert_eq!(assemble_state(&data, 1, &[1.0, 0.0], 1.0).unwrap().dim(), 6);
    }
}
