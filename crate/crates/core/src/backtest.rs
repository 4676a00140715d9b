//! Rolling-window backtesting: schedule construction, out-of-sample trading
//! with parameter inheritance across windows, baselines, and performance
//! statistics.
//!
//! Window `i` trains on rows `[train_start, train_end)` and trades
//! `[val_start, val_end)` with `train_end == val_start` and
//! `val_start == previous val_end`. The decision for day `t + 1` is taken at
//! the close of day `t` from data up to row `t` only.

use std::cell::Cell;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::foml::{Foml, FomlConfig, FomlLogRow};
use crate::market::{
    assemble_state, project_long_only, step, CostModel, MarketData, MarketState, PortfolioAction, PortfolioEnv,
    StateScaler, CASH,
};
use crate::td3::{train_loop, EncoderRefresh, Embedding, Learner, Td3Agent, Td3Config, TrainLogRow};
use crate::wae::{TransitionBatch, Wae, WaeConfig, WaeTrainer};

pub const TRADING_DAYS: usize = 252;

/// One validation segment. Training history for the first window defaults to
/// `train_years` of trading days before `val_start`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSpec {
    #[serde(default)]
    pub train_start: Option<NaiveDate>,
    pub val_start: NaiveDate,
    /// Last validation date (inclusive).
    pub val_end: NaiveDate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub segment: usize,
    pub index: usize,
    pub train_start: usize,
    pub train_end: usize,
    pub val_start: usize,
    pub val_end: usize,
}

impl Window {
    pub fn val_len(&self) -> usize {
        self.val_end - self.val_start
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSchedule {
    pub window_len: usize,
    pub train_len: usize,
    pub windows: Vec<Window>,
}

impl WindowSchedule {
    pub fn segment_windows(&self, segment: usize) -> impl Iterator<Item = &Window> {
        self.windows.iter().filter(move |w| w.segment == segment)
    }

    pub fn num_segments(&self) -> usize {
        self.windows.iter().map(|w| w.segment + 1).max().unwrap_or(0)
    }

    /// Checks the chain identity and tiling within each segment.
    pub fn check_chain(&self) -> Result<()> {
        for pair in self.windows.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if a.segment == b.segment && (b.val_start != a.val_end || b.train_end != b.val_start) {
                return Err(Error::Schedule(format!(
                    "window {} of segment {} does not continue its predecessor",
                    b.index, b.segment
                )));
            }
        }
        Ok(())
    }
}

fn position(calendar: &[NaiveDate], d: NaiveDate, what: &str) -> Result<usize> {
    calendar
        .binary_search(&d)
        .map_err(|_| Error::Schedule(format!("{what} {d} is not a trading day of the calendar")))
}

/// Tiles each segment's validation span with `window`-day windows (the last
/// one possibly shorter). Training spans roll forward with the window and
/// keep the length of the first one.
pub fn build_schedule(
    calendar: &[NaiveDate],
    segments: &[SegmentSpec],
    train_years: usize,
    window: usize,
) -> Result<WindowSchedule> {
    if window == 0 {
        return Err(Error::Config("window length must be at least 1 day".into()));
    }
    if segments.is_empty() {
        return Err(Error::Schedule("no segments".into()));
    }
    if calendar.windows(2).any(|p| p[0] >= p[1]) {
        return Err(Error::Schedule("calendar is not strictly increasing".into()));
    }
    let default_train = train_years * TRADING_DAYS;
    let mut windows = Vec::new();
    let mut train_len_first = None;
    for (si, seg) in segments.iter().enumerate() {
        let vs = position(calendar, seg.val_start, "validation start")?;
        let ve = position(calendar, seg.val_end, "validation end")? + 1;
        if ve <= vs {
            return Err(Error::Schedule(format!("segment {si} has an empty validation span")));
        }
        let ts = match seg.train_start {
            Some(d) => position(calendar, d, "training start")?,
            None => vs.checked_sub(default_train).ok_or_else(|| {
                Error::Schedule(format!(
                    "segment {si} needs {default_train} training days before {}, calendar has {vs}",
                    seg.val_start
                ))
            })?,
        };
        if ts >= vs {
            return Err(Error::Schedule(format!("segment {si} has no training history")));
        }
        let train_len = vs - ts;
        train_len_first.get_or_insert(train_len);
        let mut start = vs;
        let mut index = 0;
        while start < ve {
            let end = (start + window).min(ve);
            windows.push(Window {
                segment: si,
                index,
                train_start: start - train_len,
                train_end: start,
                val_start: start,
                val_end: end,
            });
            start = end;
            index += 1;
        }
    }
    let schedule = WindowSchedule {
        window_len: window,
        train_len: train_len_first.unwrap_or(default_train),
        windows,
    };
    schedule.check_chain()?;
    Ok(schedule)
}

/// Read access to market data up to a fixed row; anything later is refused.
pub struct MarketView<'a> {
    data: &'a MarketData,
    limit: usize,
    max_seen: Cell<usize>,
}

impl<'a> MarketView<'a> {
    pub fn new(data: &'a MarketData, limit: usize) -> Self {
        Self {
            data,
            limit,
            max_seen: Cell::new(0),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn max_seen(&self) -> usize {
        self.max_seen.get()
    }

    pub fn num_assets(&self) -> usize {
        self.data.num_assets()
    }

    fn touch(&self, t: usize) -> Result<()> {
        if t > self.limit {
            return Err(Error::State(format!("look-ahead: row {t} requested at decision row {}", self.limit)));
        }
        self.max_seen.set(self.max_seen.get().max(t));
        Ok(())
    }

    pub fn returns(&self, t: usize) -> Result<Vec<f64>> {
        self.touch(t)?;
        Ok(self.data.returns.row(t).to_vec())
    }

    /// Market capitalisations of the non-cash assets at `t`, if available.
    pub fn market_caps(&self, t: usize) -> Result<Option<Vec<f64>>> {
        self.touch(t)?;
        Ok(self.data.market_caps.as_ref().map(|c| c.row(t).to_vec()))
    }

    pub fn state(&self, t: usize, holdings: &[f64], wealth: f64) -> Result<MarketState> {
        self.touch(t)?;
        assemble_state(self.data, t, holdings, wealth)
    }

    pub fn tradable(&self, t: usize, asset: usize) -> bool {
        t < self.data.last_tradable[asset]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub train_steps: usize,
    pub mean_reward: f64,
    pub last_td_loss: f64,
    pub encoder_updates: usize,
    /// Highest data row read while training; `None` if nothing was read.
    pub max_row_read: Option<usize>,
}

/// A trading policy driven by the backtester.
pub trait Strategy: Send {
    fn name(&self) -> &str;

    /// Train or adapt before trading `window`. Must not read rows at or after
    /// `window.train_end`.
    fn prepare(&mut self, _data: &MarketData, _window: &Window) -> Result<FitReport> {
        Ok(FitReport::default())
    }

    /// Target weights for the next day, decided at `view.limit()`.
    fn decide(&mut self, view: &MarketView<'_>, holdings: &[f64], wealth: f64) -> Result<PortfolioAction>;

    /// Checksum of the learnable state; equal before and after a window's
    /// trading phase when parameters are inherited unchanged.
    fn lineage(&self) -> u64 {
        0
    }
}

/// Equal weight over the tradable non-cash assets, rebalanced daily.
#[derive(Clone, Debug, Default)]
pub struct EqualWeight;

impl Strategy for EqualWeight {
    fn name(&self) -> &str {
        "ew"
    }

    fn decide(&mut self, view: &MarketView<'_>, _holdings: &[f64], _wealth: f64) -> Result<PortfolioAction> {
        let t = view.limit();
        let d = view.num_assets();
        let live: Vec<usize> = (0..d).filter(|&k| k != CASH && view.tradable(t, k)).collect();
        let mut w = vec![0.0; d];
        if live.is_empty() {
            w[CASH] = 1.0;
        } else {
            for &k in &live {
                w[k] = 1.0 / live.len() as f64;
            }
        }
        Ok(PortfolioAction(w))
    }
}

/// Capitalisation weights of the tradable non-cash assets at the decision
/// date, rebalanced daily.
#[derive(Clone, Debug, Default)]
pub struct ValueWeight;

impl Strategy for ValueWeight {
    fn name(&self) -> &str {
        "vw"
    }

    fn decide(&mut self, view: &MarketView<'_>, _holdings: &[f64], _wealth: f64) -> Result<PortfolioAction> {
        let t = view.limit();
        let caps = view
            .market_caps(t)?
            .ok_or_else(|| Error::Config("value weighting needs market capitalisations".into()))?;
        let d = view.num_assets();
        let mut w = vec![0.0; d];
        let mut total = 0.0;
        for k in 1..d {
            let c = caps[k - 1];
            if view.tradable(t, k) && c.is_finite() && c > 0.0 {
                w[k] = c;
                total += c;
            }
        }
        if total > 0.0 {
            w.iter_mut().for_each(|v| *v /= total);
        } else {
            w[CASH] = 1.0;
        }
        Ok(PortfolioAction(w))
    }
}

/// Everything the learned strategy needs besides data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DerlConfig {
    pub wae: WaeConfig,
    pub foml: FomlConfig,
    pub td3: Td3Config,
    /// Random-policy transitions collected for the initial embedding.
    pub embed_samples: usize,
    /// Agent steps before the first window.
    pub initial_steps: usize,
    /// Agent steps per subsequent window.
    pub steps_per_window: usize,
    pub reward_window: usize,
    /// Train the autoencoder and act on its embedding; raw states otherwise.
    pub use_embedding: bool,
    /// Refresh the encoder online every `foml.stream_len` steps.
    pub use_meta: bool,
}

impl Default for DerlConfig {
    fn default() -> Self {
        Self {
            wae: WaeConfig::default(),
            foml: FomlConfig::default(),
            td3: Td3Config::default(),
            embed_samples: 50_000,
            initial_steps: 100_000,
            steps_per_window: 2_000,
            reward_window: 42,
            use_embedding: true,
            use_meta: true,
        }
    }
}

impl DerlConfig {
    pub fn validate(&self) -> Result<()> {
        self.wae.validate()?;
        self.foml.validate()?;
        self.td3.validate()?;
        if self.reward_window < 2 {
            return Err(Error::Config("reward window must be at least 2".into()));
        }
        if self.use_embedding && self.embed_samples < self.wae.batch_size {
            return Err(Error::Config("embedding sample count is below the WAE batch size".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerlSeeds {
    pub embed: u64,
    pub foml: u64,
    pub agent: u64,
    pub replay: u64,
    pub rollout: u64,
}

impl DerlSeeds {
    pub fn from_base(base: u64) -> Self {
        Self {
            embed: base.wrapping_add(11),
            foml: base.wrapping_add(23),
            agent: base.wrapping_add(37),
            replay: base.wrapping_add(41),
            rollout: base.wrapping_add(53),
        }
    }
}

/// `n` transitions of a policy with i.i.d. standard-normal logits over rows
/// `[span.0, span.1)`, restarting at `span.0` when the span is exhausted.
/// States are scaled by `scaler`; actions are the resulting holdings.
pub fn random_rollouts(
    data: &MarketData,
    scaler: &StateScaler,
    cost: CostModel,
    reward_window: usize,
    span: (usize, usize),
    n: usize,
    seed: u64,
) -> Result<TransitionBatch> {
    let (from, to) = span;
    let mut env = PortfolioEnv::new(data, cost, reward_window, from, to)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = data.num_assets();
    let ds = data.state_dim();
    let mut s = ndarray::Array2::zeros((n, ds));
    let mut a = ndarray::Array2::zeros((n, d));
    let mut s2 = ndarray::Array2::zeros((n, ds));
    for i in 0..n {
        let logits: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let action = project_long_only(&logits)?;
        let obs = scaler.observe(env.state());
        let out = env.step(&action)?;
        s.row_mut(i).assign(&ndarray::ArrayView1::from(&obs));
        a.row_mut(i).assign(&ndarray::ArrayView1::from(&out.next_state.holdings));
        s2.row_mut(i)
            .assign(&ndarray::ArrayView1::from(&scaler.observe(&out.next_state)));
        if out.done {
            env.reset(from)?;
        }
    }
    TransitionBatch::new(s, a, s2)
}

struct FomlRefresh<'a> {
    foml: &'a mut Foml,
    updates: usize,
}

impl EncoderRefresh for FomlRefresh<'_> {
    fn interval(&self) -> usize {
        self.foml.config.stream_len
    }

    fn refresh(&mut self, embedding: &mut Embedding, recent: &TransitionBatch) -> Result<bool> {
        match embedding {
            Embedding::Encoder(w) => {
                self.foml.run_window_update(w, recent)?;
                self.updates += 1;
                Ok(true)
            }
            Embedding::Raw { .. } => Ok(false),
        }
    }
}

struct DerlState {
    scaler: StateScaler,
    learner: Learner,
    foml: Option<Foml>,
    cursor: usize,
}

/// Embedding + meta-learning + TD3, trained on each window's history with
/// parameters carried over from the previous window.
pub struct DerlStrategy {
    pub config: DerlConfig,
    pub cost: CostModel,
    pub seeds: DerlSeeds,
    state: Option<DerlState>,
    pub train_log: Vec<TrainLogRow>,
    pub wae_curve: Vec<crate::wae::TrainRecord>,
    name: String,
}

impl DerlStrategy {
    pub fn new(config: DerlConfig, cost: CostModel, seeds: DerlSeeds) -> Result<Self> {
        config.validate()?;
        let name = match (config.use_embedding, config.use_meta) {
            (true, true) => "derl",
            (true, false) => "derl-no-meta",
            (false, _) => "derl-no-embed",
        }
        .to_string();
        Ok(Self {
            config,
            cost,
            seeds,
            state: None,
            train_log: Vec::new(),
            wae_curve: Vec::new(),
            name,
        })
    }

    pub fn foml_log(&self) -> &[FomlLogRow] {
        self.state
            .as_ref()
            .and_then(|s| s.foml.as_ref())
            .map(|f| f.log.as_slice())
            .unwrap_or(&[])
    }

    fn initialise(&mut self, data: &MarketData, from: usize, to: usize) -> Result<DerlState> {
        let scaler = StateScaler::fit(data, from, to)?;
        let embedding = if self.config.use_embedding {
            let batch = random_rollouts(
                data,
                &scaler,
                self.cost,
                self.config.reward_window,
                (from, to),
                self.config.embed_samples,
                self.seeds.rollout,
            )?;
            let wae = Wae::new(data.state_dim(), data.num_assets(), &self.config.wae, self.seeds.embed)?;
            let mut trainer = WaeTrainer::new(wae, self.config.wae.learning_rate, self.seeds.embed);
            self.wae_curve = trainer.train(&batch, self.config.wae.steps, self.config.wae.batch_size)?;
            Embedding::Encoder(Box::new(trainer.wae))
        } else {
            Embedding::Raw { dim: data.state_dim() }
        };
        let foml = match (&embedding, self.config.use_meta) {
            (Embedding::Encoder(w), true) => Some(Foml::new(self.config.foml.clone(), w, self.seeds.foml)?),
            _ => None,
        };
        let agent = Td3Agent::new(embedding.dim(), data.num_assets(), self.config.td3.clone(), self.seeds.agent)?;
        Ok(DerlState {
            scaler,
            learner: Learner::new(agent, embedding, self.seeds.replay),
            foml,
            cursor: from,
        })
    }
}

impl Strategy for DerlStrategy {
    fn name(&self) -> &str {
        &self.name
    }

    fn prepare(&mut self, data: &MarketData, window: &Window) -> Result<FitReport> {
        let from = window.train_start.max(data.first_valid);
        let to = window.train_end;
        if from + self.config.reward_window + 3 > to {
            return Err(Error::InsufficientHistory {
                needed: from + self.config.reward_window + 3,
                available: to,
            });
        }
        let steps = if self.state.is_none() {
            let st = self.initialise(data, from, to)?;
            self.state = Some(st);
            self.config.initial_steps
        } else {
            self.config.steps_per_window
        };
        let st = self.state.as_mut().expect("initialised above");
        let mut env = PortfolioEnv::new(data, self.cost, self.config.reward_window, from, to)?;
        let resume = if st.cursor >= from && st.cursor + 3 <= to { st.cursor } else { from };
        env.reset(resume)?;
        let mut hook = st.foml.as_mut().map(|f| FomlRefresh { foml: f, updates: 0 });
        let log = train_loop(
            &mut env,
            from,
            &st.scaler,
            &mut st.learner,
            steps,
            hook.as_mut().map(|h| h as &mut dyn EncoderRefresh),
        )?;
        let encoder_updates = hook.map(|h| h.updates).unwrap_or(0);
        st.cursor = env.time();
        let report = FitReport {
            train_steps: steps,
            mean_reward: if log.is_empty() {
                0.0
            } else {
                log.iter().map(|r| r.reward).sum::<f64>() / log.len() as f64
            },
            last_td_loss: log.last().map(|r| r.td_loss).unwrap_or(0.0),
            encoder_updates,
            max_row_read: if steps > 0 { Some(env.max_row_read()) } else { None },
        };
        self.train_log.extend(log);
        Ok(report)
    }

    fn decide(&mut self, view: &MarketView<'_>, holdings: &[f64], wealth: f64) -> Result<PortfolioAction> {
        let st = self
            .state
            .as_ref()
            .ok_or_else(|| Error::State("strategy used before its first training window".into()))?;
        let state = view.state(view.limit(), holdings, wealth)?;
        st.learner.policy_action(&st.scaler.observe(&state))
    }

    fn lineage(&self) -> u64 {
        let Some(st) = &self.state else { return 0 };
        let mut h = Fnv::default();
        for p in st.learner.agent.actor.flat_params() {
            h.write_f64(p);
        }
        if let Embedding::Encoder(w) = &st.learner.embedding {
            for p in w.encoder.flat_params() {
                h.write_f64(p);
            }
        }
        h.0
    }
}

/// FNV-1a over the bit patterns of a float sequence.
struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv {
    fn write_f64(&mut self, v: f64) {
        for b in v.to_bits().to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowLog {
    pub segment: usize,
    pub window: usize,
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub val_start: NaiveDate,
    pub val_end: NaiveDate,
    pub days: usize,
    pub train_steps: usize,
    pub mean_reward: f64,
    pub last_td_loss: f64,
    pub encoder_updates: usize,
    pub train_max_row: Option<usize>,
    pub decision_max_row: usize,
    pub lineage_in: String,
    pub lineage_out: String,
    pub window_return: f64,
}

/// Daily out-of-sample record of one strategy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub strategy: String,
    pub assets: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// Net simple return on each date.
    pub returns: Vec<f64>,
    /// Risk-free rate on each date.
    pub risk_free: Vec<f64>,
    /// Weights held over each date (decided the previous close).
    pub weights: Vec<Vec<f64>>,
    /// Wealth at each date's close, starting from 1.
    pub wealth: Vec<f64>,
    pub windows: Vec<WindowLog>,
}

impl BacktestResult {
    /// `max |prod (1 + R) - W|` along the path.
    pub fn compounding_error(&self) -> f64 {
        let mut w = 1.0;
        let mut err: f64 = 0.0;
        for (r, x) in self.returns.iter().zip(&self.wealth) {
            w *= 1.0 + r;
            err = err.max((w - x).abs());
        }
        err
    }
}

struct SegmentRun {
    dates: Vec<NaiveDate>,
    returns: Vec<f64>,
    risk_free: Vec<f64>,
    weights: Vec<Vec<f64>>,
    windows: Vec<WindowLog>,
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

fn run_segment(
    data: &MarketData,
    windows: &[Window],
    strategy: &mut dyn Strategy,
    cost: &CostModel,
) -> Result<SegmentRun> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Schedule("segment without windows".into()))?;
    if first.val_start == 0 || first.val_start - 1 < data.first_valid {
        return Err(Error::InsufficientHistory {
            needed: data.first_valid + 1,
            available: first.val_start,
        });
    }
    let d = data.num_assets();
    let mut state = assemble_state(data, first.val_start - 1, &PortfolioAction::all_cash(d).0, 1.0)?;
    let mut out = SegmentRun {
        dates: Vec::new(),
        returns: Vec::new(),
        risk_free: Vec::new(),
        weights: Vec::new(),
        windows: Vec::new(),
    };
    let mut prev_lineage: Option<u64> = None;
    for w in windows {
        if w.val_end > data.len() {
            return Err(Error::Schedule(format!("window {} runs past the data", w.index)));
        }
        let lineage_in = strategy.lineage();
        if let Some(p) = prev_lineage {
            if p != lineage_in {
                return Err(Error::State(format!("parameters changed between windows before window {}", w.index)));
            }
        }
        let fit = strategy.prepare(data, w)?;
        if let Some(m) = fit.max_row_read {
            if m >= w.train_end {
                return Err(Error::State(format!("training for window {} read row {m}", w.index)));
            }
        }
        let start_wealth = state.wealth;
        let mut decision_max = 0;
        for t in w.val_start - 1..w.val_end - 1 {
            let view = MarketView::new(data, t);
            let action = strategy.decide(&view, &state.holdings, state.wealth)?;
            if view.max_seen() > t {
                return Err(Error::State(format!("decision at row {t} consumed row {}", view.max_seen())));
            }
            decision_max = decision_max.max(view.max_seen());
            action.check_long_only()?;
            let action = data.mask_action(t, &action);
            let next = step(
                &state,
                &action,
                &data.returns.row(t + 1).to_vec(),
                &data.metrics.row(t + 1).to_vec(),
                cost,
            )?;
            out.dates.push(data.dates[t + 1]);
            out.returns.push(next.wealth / state.wealth - 1.0);
            out.risk_free.push(data.risk_free(t + 1));
            out.weights.push(action.0);
            state = next;
        }
        let lineage_out = strategy.lineage();
        out.windows.push(WindowLog {
            segment: w.segment,
            window: w.index,
            train_start: data.dates[w.train_start],
            train_end: data.dates[w.train_end - 1],
            val_start: data.dates[w.val_start],
            val_end: data.dates[w.val_end - 1],
            days: w.val_len(),
            train_steps: fit.train_steps,
            mean_reward: fit.mean_reward,
            last_td_loss: fit.last_td_loss,
            encoder_updates: fit.encoder_updates,
            train_max_row: fit.max_row_read,
            decision_max_row: decision_max,
            lineage_in: hex(lineage_in),
            lineage_out: hex(lineage_out),
            window_return: state.wealth / start_wealth - 1.0,
        });
        prev_lineage = Some(lineage_out);
    }
    Ok(out)
}

/// Runs every segment of `schedule` with a fresh strategy from `factory`
/// (segment index as argument). Segments are independent and may run on up
/// to `jobs` threads; results are concatenated in segment order.
pub fn run_backtest<S, F>(
    data: &MarketData,
    schedule: &WindowSchedule,
    factory: F,
    cost: &CostModel,
    jobs: usize,
) -> Result<(BacktestResult, Vec<S>)>
where
    S: Strategy,
    F: Fn(usize) -> Result<S> + Sync,
{
    let n = schedule.num_segments();
    let work = |s: usize| -> Result<(SegmentRun, S)> {
        let windows: Vec<Window> = schedule.segment_windows(s).copied().collect();
        let mut strat = factory(s)?;
        let run = run_segment(data, &windows, &mut strat, cost)?;
        Ok((run, strat))
    };
    let runs: Vec<Result<(SegmentRun, S)>> = if jobs > 1 && n > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| (0..n).into_par_iter().map(work).collect())
    } else {
        (0..n).map(work).collect()
    };
    let mut result = BacktestResult {
        strategy: String::new(),
        assets: data.assets.clone(),
        dates: Vec::new(),
        returns: Vec::new(),
        risk_free: Vec::new(),
        weights: Vec::new(),
        wealth: Vec::new(),
        windows: Vec::new(),
    };
    let mut strategies = Vec::with_capacity(n);
    for r in runs {
        let (run, strat) = r?;
        if let Some(&last) = result.dates.last() {
            if run.dates.first().is_some_and(|d| *d <= last) {
                return Err(Error::Schedule("segments overlap or are out of order".into()));
            }
        }
        result.strategy = strat.name().to_string();
        result.dates.extend(run.dates);
        result.returns.extend(run.returns);
        result.risk_free.extend(run.risk_free);
        result.weights.extend(run.weights);
        result.windows.extend(run.windows);
        strategies.push(strat);
    }
    let mut w = 1.0;
    result.wealth = result
        .returns
        .iter()
        .map(|r| {
            w *= 1.0 + r;
            w
        })
        .collect();
    Ok((result, strategies))
}

/// Annualized summary statistics of excess returns.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub observations: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    /// Excess kurtosis (normal = 0).
    pub kurtosis: f64,
    pub sharpe: f64,
    pub sortino: f64,
}

/// Annualized mean and standard deviation (sample, `T - 1`) of `r - rf`;
/// Sharpe is their ratio; Sortino divides by the root mean square of the
/// negative excess returns over all `T` days. Skewness and kurtosis are the
/// moment ratios `m3 / m2^1.5` and `m4 / m2^2 - 3`.
pub fn metrics(returns: &[f64], rf: &[f64], periods_per_year: usize) -> Result<MetricsReport> {
    if returns.len() != rf.len() {
        return Err(Error::Alignment("returns and risk-free rates differ in length".into()));
    }
    let n = returns.len();
    if n < 2 {
        return Err(Error::InsufficientHistory { needed: 2, available: n });
    }
    let ex: Vec<f64> = returns.iter().zip(rf).map(|(r, f)| r - f).collect();
    let tf = n as f64;
    let mean = ex.iter().sum::<f64>() / tf;
    let (mut m2, mut m3, mut m4, mut down) = (0.0, 0.0, 0.0, 0.0);
    for &e in &ex {
        let d = e - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
        if e < 0.0 {
            down += e * e;
        }
    }
    let sd = (m2 / (tf - 1.0)).sqrt();
    if !(sd > 1e-15) {
        return Err(Error::Degenerate("excess returns have zero dispersion".into()));
    }
    let (m2, m3, m4) = (m2 / tf, m3 / tf, m4 / tf);
    let ppy = periods_per_year as f64;
    let mean_ann = ppy * mean;
    let std_ann = ppy.sqrt() * sd;
    let dd = (down / tf).sqrt() * ppy.sqrt();
    Ok(MetricsReport {
        observations: n,
        mean: mean_ann,
        std: std_ann,
        skewness: m3 / m2.powf(1.5),
        kurtosis: m4 / (m2 * m2) - 3.0,
        sharpe: mean_ann / std_ann,
        sortino: if dd > 0.0 { mean_ann / dd } else { f64::INFINITY },
    })
}

fn daily_sharpe(x: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (v > 0.0).then(|| m / v.sqrt())
}

/// One-sided bootstrap p-value for `H0: SR_A <= SR_B`, resampling the paired
/// series with a stationary block bootstrap (geometric blocks of mean length
/// `block_len`, wrapping around). The statistic is centred at the observed
/// difference; ties count half.
pub fn bootstrap_sr_test(a: &[f64], b: &[f64], reps: usize, block_len: f64, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Alignment("bootstrap series differ in length".into()));
    }
    let n = a.len();
    if n < 50 {
        return Err(Error::Estimator(format!("bootstrap needs at least 50 observations, got {n}")));
    }
    if reps == 0 || !(block_len >= 1.0) {
        return Err(Error::Config("bootstrap needs reps >= 1 and block length >= 1".into()));
    }
    let (sa, sb) = match (daily_sharpe(a), daily_sharpe(b)) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::Estimator("degenerate series in Sharpe test".into())),
    };
    let observed = sa - sb;
    let p_new = 1.0 / block_len;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ra, mut rb) = (vec![0.0; n], vec![0.0; n]);
    let mut exceed = 0.0;
    for _ in 0..reps {
        let mut idx = rng.random_range(0..n);
        for i in 0..n {
            if i > 0 {
                idx = if rng.random::<f64>() < p_new { rng.random_range(0..n) } else { (idx + 1) % n };
            }
            ra[i] = a[idx];
            rb[i] = b[idx];
        }
        let diff = match (daily_sharpe(&ra), daily_sharpe(&rb)) {
            (Some(x), Some(y)) => x - y,
            _ => observed,
        };
        let centred = diff - observed;
        if centred > observed {
            exceed += 1.0;
        } else if centred == observed {
            exceed += 0.5;
        }
    }
    Ok(exceed / reps as f64)
}

/// Row indices with `vix < threshold` and `vix >= threshold`. The threshold
/// defaults to the sample median.
pub fn regime_split(returns: &[f64], vix: &[f64], threshold: Option<f64>) -> Result<(Vec<usize>, Vec<usize>, f64)> {
    if returns.len() != vix.len() {
        return Err(Error::Alignment(format!(
            "{} returns but {} volatility-index values",
            returns.len(),
            vix.len()
        )));
    }
    if vix.iter().any(|v| !v.is_finite()) {
        return Err(Error::Alignment("volatility index has gaps".into()));
    }
    let thr = match threshold {
        Some(t) => t,
        None => median(vix).ok_or_else(|| Error::Alignment("empty series".into()))?,
    };
    let (lo, hi): (Vec<usize>, Vec<usize>) = (0..vix.len()).partition(|&i| vix[i] < thr);
    Ok((lo, hi, thr))
}

pub fn median(x: &[f64]) -> Option<f64> {
    if x.is_empty() {
        return None;
    }
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

pub fn write_results(result: &BacktestResult, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date".to_string(), "return".into(), "risk_free".into(), "wealth".into()];
    header.extend(result.assets.iter().map(|a| format!("w_{a}")));
    w.write_record(&header)?;
    for i in 0..result.dates.len() {
        let mut row = vec![
            result.dates[i].to_string(),
            result.returns[i].to_string(),
            result.risk_free[i].to_string(),
            result.wealth[i].to_string(),
        ];
        row.extend(result.weights[i].iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a file written by [`write_results`]. Window logs are not part of
/// it and come back empty.
pub fn read_results(path: impl AsRef<Path>, strategy: &str) -> Result<BacktestResult> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path)?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 5 || header[..4] != ["date", "return", "risk_free", "wealth"] {
        return Err(Error::Parse {
            line: 1,
            msg: "expected date,return,risk_free,wealth,w_<asset>... columns".into(),
        });
    }
    let assets: Vec<String> = header[4..]
        .iter()
        .map(|h| h.strip_prefix("w_").unwrap_or(h).to_string())
        .collect();
    let mut out = BacktestResult {
        strategy: strategy.to_string(),
        assets,
        dates: Vec::new(),
        returns: Vec::new(),
        risk_free: Vec::new(),
        weights: Vec::new(),
        wealth: Vec::new(),
        windows: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec?;
        let bad = |msg: String| Error::Parse { line, msg };
        let num = |j: usize| -> Result<f64> {
            rec.get(j)
                .and_then(|s| s.parse::<f64>().ok())
                .ok_or_else(|| bad(format!("column {} is not a number", j + 1)))
        };
        let d = rec.get(0).unwrap_or_default();
        out.dates
            .push(NaiveDate::parse_from_str(d, "%Y-%m-%d").map_err(|e| bad(format!("date {d:?}: {e}")))?);
        out.returns.push(num(1)?);
        out.risk_free.push(num(2)?);
        out.wealth.push(num(3)?);
        out.weights.push((4..header.len()).map(num).collect::<Result<_>>()?);
    }
    Ok(out)
}

pub fn write_windows(windows: &[WindowLog], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for row in windows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_json<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    Ok(())
}
