//! Command implementations behind the `derl` binary. Each command is a pure
//! function of its configuration and input files and writes into an output
//! directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::Serialize;

use crate::analysis::{
    ablation_contribution, compute_characteristics, factor_regression, period_lasso, regress_on_market,
    selection_report, structural_deviation, FactorTable, RegressionResult, SelectionRow,
};
use crate::backtest::{
    bootstrap_sr_test, build_schedule, random_rollouts, metrics, read_results, regime_split, run_backtest, write_json, write_results,
    write_windows, BacktestResult, DerlSeeds, DerlStrategy, EqualWeight, MetricsReport, ValueWeight,
    WindowSchedule, TRADING_DAYS,
};
use crate::config::RunConfig;
use crate::data::{build_market_data, load_panel, write_panel, AlignedPanel, Panel, Series};
use crate::error::{Error, Result};
use crate::foml::write_foml_log;
use crate::market::{CostModel, MarketData, StateScaler};
use crate::synth::synth_market;
use crate::td3::write_training_log;
use crate::wae::{write_training_curve, Checkpoint, Wae, WaeTrainer, CHECKPOINT_FORMAT};

/// Switches that select the ablation arms and parallelism.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunFlags {
    pub no_meta: bool,
    pub no_embed: bool,
    pub jobs: usize,
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn echo_config(cfg: &RunConfig, out: &Path) -> Result<()> {
    write_json(cfg, out.join("config.json"))
}

/// Writes `panel.csv` and `vix.csv` for a synthetic market.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let sim = &cfg.simulate;
    sim.spec.validate(sim.assets)?;
    if sim.days < 2 {
        return Err(Error::Config("simulate.days must be at least 2".into()));
    }
    ensure_dir(out)?;
    let market = synth_market(cfg.seeds.synth, sim.assets, sim.days, &sim.spec)?;
    let panel_path = out.join("panel.csv");
    write_panel(&market.panel()?, &panel_path)?;
    let vix_path = out.join("vix.csv");
    market.volatility_index().write(&vix_path)?;
    echo_config(cfg, out)?;
    Ok(vec![panel_path, vix_path])
}

/// Inputs shared by the data-driven commands.
pub struct Prepared {
    pub panel: Panel,
    pub data: MarketData,
    pub aligned: AlignedPanel,
    pub schedule: WindowSchedule,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    cfg.validate_inputs()?;
    let panel = load_panel(&cfg.data.panel)?;
    let calendar = panel.calendar();
    let first = *calendar.first().ok_or_else(|| Error::EmptyPanel("panel has no dates".into()))?;
    let last = *calendar.last().expect("non-empty calendar");
    let rf = cfg.data.risk_free.as_ref().map(Series::load).transpose()?;
    let (data, _, aligned) = build_market_data(
        &panel,
        cfg.universe_size,
        cfg.as_of.unwrap_or(first),
        cfg.start.unwrap_or(first),
        cfg.end.unwrap_or(last),
        &cfg.indicators,
        &[],
        rf.as_ref(),
    )?;
    if cfg.segments.is_empty() {
        return Err(Error::Config("no backtest segments configured".into()));
    }
    let schedule = build_schedule(&data.dates, &cfg.segments, cfg.train_years, cfg.window)?;
    Ok(Prepared {
        panel,
        data,
        aligned,
        schedule,
    })
}

/// Trains the initial embedding on random-policy transitions from the first
/// segment's training span. With `resume`, training continues from a
/// checkpoint and step numbering carries on.
pub fn cmd_train_embed(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<PathBuf> {
    let prep = prepare(cfg)?;
    ensure_dir(out)?;
    let w0 = prep.schedule.windows[0];
    let from = w0.train_start.max(prep.data.first_valid);
    let to = w0.train_end;
    let scaler = StateScaler::fit(&prep.data, from, to)?;
    let seeds = DerlSeeds::from_base(cfg.seeds.agent);
    let batch = random_rollouts(
        &prep.data,
        &scaler,
        CostModel::new(cfg.cost_rate)?,
        cfg.derl.reward_window,
        (from, to),
        cfg.derl.embed_samples,
        seeds.rollout,
    )?;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            let mut t = ck.trainer;
            if t.wae.dim_s() != prep.data.state_dim() || t.wae.dim_a() != prep.data.num_assets() {
                return Err(Error::Config("checkpoint dimensions do not match the configured market".into()));
            }
            t.resync_rng();
            t
        }
        None => {
            let wae = Wae::new(prep.data.state_dim(), prep.data.num_assets(), &cfg.derl.wae, seeds.embed)?;
            WaeTrainer::new(wae, cfg.derl.wae.learning_rate, seeds.embed)
        }
    };
    let records = trainer.train(&batch, cfg.derl.wae.steps, cfg.derl.wae.batch_size)?;
    write_training_curve(&records, out.join("embed_curve.csv"))?;
    let path = out.join("checkpoint.json");
    Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        trainer,
        anchor: None,
    }
    .save(&path)?;
    echo_config(cfg, out)?;
    Ok(path)
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsFile {
    pub strategy: String,
    pub observations: usize,
    pub windows: usize,
    pub metrics: BTreeMap<String, MetricsReport>,
    /// One-sided bootstrap p-values for the strategy's Sharpe ratio exceeding
    /// each baseline's.
    pub p_values: BTreeMap<String, f64>,
    pub final_wealth: BTreeMap<String, f64>,
}

/// Runs the learned strategy and the baselines over the configured
/// segments and writes `results.csv`, `windows.csv`, `baselines.csv`,
/// `metrics.json` and the training logs.
pub fn cmd_backtest(cfg: &RunConfig, flags: RunFlags, out: &Path) -> Result<MetricsFile> {
    let prep = prepare(cfg)?;
    ensure_dir(out)?;
    let cost = CostModel::new(cfg.cost_rate)?;
    let mut derl_cfg = cfg.derl.clone();
    if flags.no_embed {
        derl_cfg.use_embedding = false;
    }
    if flags.no_meta {
        derl_cfg.use_meta = false;
    }
    let seeds = DerlSeeds::from_base(cfg.seeds.agent);
    let jobs = flags.jobs.max(1);
    let (result, strategies) = run_backtest(
        &prep.data,
        &prep.schedule,
        |_| DerlStrategy::new(derl_cfg.clone(), cost, seeds),
        &cost,
        jobs,
    )?;
    let (ew, _) = run_backtest(&prep.data, &prep.schedule, |_| Ok(EqualWeight), &cost, jobs)?;
    let vw = if prep.data.market_caps.is_some() {
        Some(run_backtest(&prep.data, &prep.schedule, |_| Ok(ValueWeight), &cost, jobs)?.0)
    } else {
        None
    };

    write_results(&result, out.join("results.csv"))?;
    write_windows(&result.windows, out.join("windows.csv"))?;
    write_baselines(&ew, vw.as_ref(), out.join("baselines.csv"))?;
    let mut train_log = Vec::new();
    let mut foml_log = Vec::new();
    let mut curve = Vec::new();
    for d in &strategies {
        train_log.extend(d.train_log.iter().copied());
        foml_log.extend(d.foml_log().iter().cloned());
        curve.extend(d.wae_curve.iter().cloned());
    }
    write_training_log(&train_log, out.join("train_log.csv"))?;
    if !foml_log.is_empty() {
        write_foml_log(&foml_log, out.join("foml_log.csv"))?;
    }
    if !curve.is_empty() {
        write_training_curve(&curve, out.join("embed_curve.csv"))?;
    }

    let mut report = MetricsFile {
        strategy: result.strategy.clone(),
        observations: result.returns.len(),
        windows: result.windows.len(),
        metrics: BTreeMap::new(),
        p_values: BTreeMap::new(),
        final_wealth: BTreeMap::new(),
    };
    let a = &cfg.analysis;
    let mut add = |name: &str, r: &BacktestResult| -> Result<()> {
        report.metrics.insert(name.to_string(), metrics(&r.returns, &r.risk_free, TRADING_DAYS)?);
        report.final_wealth.insert(name.to_string(), r.wealth.last().copied().unwrap_or(1.0));
        Ok(())
    };
    add(&result.strategy, &result)?;
    add("ew", &ew)?;
    if let Some(vw) = &vw {
        add("vw", vw)?;
    }
    let mut baselines = vec![("ew", &ew)];
    if let Some(vw) = &vw {
        baselines.push(("vw", vw));
    }
    for (name, b) in baselines {
        if result.returns.len() >= 50 {
            let p = bootstrap_sr_test(&result.returns, &b.returns, a.bootstrap_reps, a.bootstrap_block, cfg.seeds.bootstrap)?;
            report.p_values.insert(name.to_string(), p);
        }
    }
    write_json(&report, out.join("metrics.json"))?;
    echo_config(cfg, out)?;
    Ok(report)
}

fn write_baselines(ew: &BacktestResult, vw: Option<&BacktestResult>, path: PathBuf) -> Result<()> {
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["date", "ew"];
    if vw.is_some() {
        header.push("vw");
    }
    w.write_record(&header)?;
    for i in 0..ew.dates.len() {
        let mut row = vec![ew.dates[i].to_string(), ew.returns[i].to_string()];
        if let Some(vw) = vw {
            row.push(vw.returns[i].to_string());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct RegimeReport {
    pub threshold: f64,
    pub low_days: usize,
    pub high_days: usize,
    pub low: Option<MetricsReport>,
    pub high: Option<MetricsReport>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub days: usize,
    pub mean_contribution: f64,
    pub on_market: RegressionResult,
    pub on_deviation: Option<RegressionResult>,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct AnalysisReport {
    pub observations: usize,
    pub factor_loadings: Option<RegressionResult>,
    pub regimes: Option<RegimeReport>,
    pub selection: Option<Vec<SelectionRow>>,
    pub lasso_periods: usize,
    pub ablation: Option<AblationReport>,
}

/// Equal-weighted return of the aligned universe on each return row.
fn universe_market(aligned: &AlignedPanel) -> Vec<f64> {
    aligned.returns.rows().into_iter().map(|r| r.mean().unwrap_or(0.0)).collect()
}

/// Factor loadings, regime-split metrics, characteristic selection and, when
/// `ablated` is given, the regression of the return difference on market
/// variables. Writes `report.json`, `factor_loadings.csv` and
/// `selection.csv`.
pub fn cmd_analyze(cfg: &RunConfig, results_dir: &Path, ablated: Option<&Path>, out: &Path) -> Result<AnalysisReport> {
    let res = read_results(results_dir.join("results.csv"), "strategy")?;
    if res.dates.len() < 2 {
        return Err(Error::InsufficientHistory {
            needed: 2,
            available: res.dates.len(),
        });
    }
    ensure_dir(out)?;
    let a = &cfg.analysis;
    let mut report = AnalysisReport {
        observations: res.dates.len(),
        ..AnalysisReport::default()
    };
    if let Some(f) = &cfg.data.factors {
        let factors = FactorTable::load(f)?;
        let reg = factor_regression(&res.returns, &res.dates, &factors, a.nw_lags)?;
        write_regression_csv(&reg, out.join("factor_loadings.csv"))?;
        report.factor_loadings = Some(reg);
    }
    let vix = cfg
        .data
        .vix
        .as_ref()
        .map(|p| Series::load(p).and_then(|s| s.on_calendar(&res.dates)))
        .transpose()?;
    if let Some(v) = &vix {
        let (lo, hi, thr) = regime_split(&res.returns, v, a.vix_threshold)?;
        let sub = |idx: &[usize]| {
            let r: Vec<f64> = idx.iter().map(|&i| res.returns[i]).collect();
            let f: Vec<f64> = idx.iter().map(|&i| res.risk_free[i]).collect();
            metrics(&r, &f, TRADING_DAYS).ok()
        };
        log::info!("regime split at {thr}: {} low, {} high, {} total", lo.len(), hi.len(), res.dates.len());
        report.regimes = Some(RegimeReport {
            threshold: thr,
            low_days: lo.len(),
            high_days: hi.len(),
            low: sub(&lo),
            high: sub(&hi),
        });
    }

    // characteristics need the panel the backtest ran on
    if !cfg.data.panel.is_empty() {
        let prep = prepare(cfg)?;
        let market = universe_market(&prep.aligned);
        let rf: Option<Vec<f64>> = cfg
            .data
            .risk_free
            .as_ref()
            .map(|p| Series::load(p).and_then(|s| s.on_calendar(&prep.aligned.dates[1..])))
            .transpose()?;
        let chars = compute_characteristics(&prep.aligned, &market, rf.as_deref(), &a.windows)?;
        // weights held on a result date were chosen at the previous close
        let tickers = &chars.tickers;
        let col_of: Vec<Option<usize>> = tickers.iter().map(|t| res.assets.iter().position(|a| a == t)).collect();
        let mut weights = vec![vec![f64::NAN; tickers.len()]; chars.dates.len()];
        for (i, d) in res.dates.iter().enumerate() {
            if let Ok(pos) = chars.dates.binary_search(d) {
                if pos > 0 {
                    for (k, c) in col_of.iter().enumerate() {
                        if let Some(c) = c {
                            weights[pos - 1][k] = res.weights[i][*c];
                        }
                    }
                }
            }
        }
        let fits = period_lasso(&chars, &weights, a.lasso_folds, a.lasso_grid)?;
        report.lasso_periods = fits.len();
        if fits.len() >= 2 {
            let coefs: Vec<Vec<f64>> = fits.iter().map(|(_, f)| f.coefficients.clone()).collect();
            let rows = selection_report(&coefs, &chars.names, a.nw_lags)?;
            let mut w = csv::Writer::from_path(out.join("selection.csv"))?;
            for r in &rows {
                w.serialize(r)?;
            }
            w.flush().map_err(|e| Error::io(out.join("selection.csv"), e))?;
            report.selection = Some(rows);
        }

        if let Some(dir) = ablated {
            let abl = read_results(dir.join("results.csv"), "ablated")?;
            if abl.dates != res.dates {
                return Err(Error::Alignment("ablation run covers different dates".into()));
            }
            let contribution = ablation_contribution(&res.returns, &abl.returns)?;
            let mkt: Vec<f64> = res
                .dates
                .iter()
                .map(|d| {
                    chars
                        .dates
                        .binary_search(d)
                        .map(|i| market[i])
                        .map_err(|_| Error::Alignment(format!("no market return on {d}")))
                })
                .collect::<Result<_>>()?;
            let v = vix.clone().ok_or_else(|| Error::Config("ablation analysis needs data.vix".into()))?;
            let on_market = regress_on_market(&contribution, &mkt, &v, a.nw_lags)?;
            // deviations use moments of the first training span
            let w0 = prep.schedule.windows[0];
            let train_rows = w0.train_start.max(1)..w0.train_end;
            let train_mkt: Vec<f64> = train_rows.clone().map(|t| market[t - 1]).collect();
            let vix_all = Series::load(cfg.data.vix.as_ref().expect("checked above"))?.on_calendar(&prep.aligned.dates)?;
            let train_vix: Vec<f64> = train_rows.map(|t| vix_all[t]).collect();
            let moments = |x: &[f64]| {
                let n = x.len() as f64;
                let m = x.iter().sum::<f64>() / n;
                (m, (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt())
            };
            let (mm, ms) = moments(&train_mkt);
            let (vm, vs) = moments(&train_vix);
            let on_deviation = match (structural_deviation(&mkt, mm, ms), structural_deviation(&v, vm, vs)) {
                (Ok(dm), Ok(dv)) => {
                    let x = Array2::from_shape_fn((dm.len(), 2), |(i, j)| if j == 0 { dm[i] } else { dv[i] });
                    crate::analysis::ols_newey_west(&contribution, x.view(), &["dmkt", "dvix"], a.nw_lags, true).ok()
                }
                _ => None,
            };
            report.ablation = Some(AblationReport {
                days: contribution.len(),
                mean_contribution: contribution.iter().sum::<f64>() / contribution.len() as f64,
                on_market,
                on_deviation,
            });
        }
    }
    write_json(&report, out.join("report.json"))?;
    echo_config(cfg, out)?;
    Ok(report)
}

fn write_regression_csv(r: &RegressionResult, path: PathBuf) -> Result<()> {
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["name", "coefficient", "std_error", "t_value"])?;
    for i in 0..r.names.len() {
        w.write_record([
            r.names[i].clone(),
            r.coefficients[i].to_string(),
            r.std_errors[i].to_string(),
            r.t_values[i].to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}
