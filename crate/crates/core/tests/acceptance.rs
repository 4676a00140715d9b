//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Built with `harness = false` so the lines
//! are never captured.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::NaiveDate;
use derl::analysis::{ablation_contribution, kkt_violation, lambda_max, lasso, ols_newey_west, regress_on_market};
use derl::backtest::{
    bootstrap_sr_test, build_schedule, metrics, read_results, run_backtest, DerlConfig, DerlSeeds, DerlStrategy,
    EqualWeight, MarketView, SegmentSpec, Strategy,
};
use derl::commands::{cmd_analyze, cmd_backtest, cmd_simulate, RunFlags};
use derl::config::RunConfig;
use derl::data::{build_market_data, Series};
use derl::foml::{anchor_update, online_update, Foml, FomlConfig, ParamBundle};
use derl::indicators::{IndicatorKind, IndicatorSpec};
use derl::market::{step, CostModel, MarketState, PortfolioAction};
use derl::synth::{business_days, synth_market, LinearGaussianTask, SynthSpec};
use derl::td3::Td3Config;
use derl::wae::{Reduction, Wae, WaeConfig, WaeNoise, WaeTrainer};
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::gradcheck::{self, CHECK_INIT_STD};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------- 1

fn gradients() -> Outcome {
    const TOL: f64 = 1e-4;
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut deepest = 0;
    let mut widest = 0;
    for seed in 0..50 {
        let (e, layers, width) = gradcheck::random_net(seed);
        worst = worst.max(e);
        deepest = deepest.max(layers);
        widest = widest.max(width);
    }
    let nets = worst;
    let mut parts = vec![("nets", nets)];
    for seed in 0..3 {
        parts.push(("wae", gradcheck::wae_objective(seed, Reduction::Mean)));
        parts.push(("wae-sum", gradcheck::wae_objective(seed, Reduction::Sum)));
        parts.push(("regularizer", gradcheck::foml_regularizer(seed)));
        parts.push(("critic", gradcheck::critic(seed)));
        parts.push(("actor", gradcheck::actor(seed)));
    }
    let max = parts.iter().map(|p| p.1).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    let by_kind = |k: &str| parts.iter().filter(|p| p.0 == k).map(|p| p.1).fold(0.0, f64::max);
    check(
        max < TOL && secs < 60.0,
        format!(
            "max rel err {max:.2e} (50 nets up to {deepest} layers/{widest} units {nets:.1e}, wae {:.1e}, regularizer {:.1e}, critic {:.1e}, actor {:.1e}); weights and biases N(0, {CHECK_INIT_STD}^2); {secs:.1}s",
            by_kind("wae").max(by_kind("wae-sum")),
            by_kind("regularizer"),
            by_kind("critic"),
            by_kind("actor"),
        ),
    )
}

// ---------------------------------------------------------------- 2

fn schedule() -> Outcome {
    let t0 = Instant::now();
    let year = 252;
    // three training years precede thirty validation years
    let cal = business_days(NaiveDate::from_ymd_opt(1990, 1, 1).unwrap(), 33 * year);
    let segs: Vec<SegmentSpec> = (0..6)
        .map(|s| {
            let from = 3 * year + s * 5 * year;
            SegmentSpec {
                train_start: None,
                val_start: cal[from],
                val_end: cal[from + 5 * year - 1],
            }
        })
        .collect();
    let sched = build_schedule(&cal, &segs, 3, 42).map_err(fail)?;
    let chain = sched.windows.iter().enumerate().all(|(i, w)| {
        w.train_end == w.val_start
            && (i == 0 || sched.windows[i - 1].segment != w.segment || sched.windows[i - 1].val_end == w.val_start)
    });
    let full = sched.windows.iter().all(|w| w.val_len() == 42);
    let secs = t0.elapsed().as_secs_f64();
    check(
        sched.windows.len() == 180 && chain && full && sched.check_chain().is_ok() && secs < 1.0,
        format!(
            "{} windows of 42 days over 6 x 1260 validation days (after 756 training days); chain identity {}; {secs:.3}s",
            sched.windows.len(),
            if chain { "holds" } else { "broken" }
        ),
    )
}

// ---------------------------------------------------------------- 3

fn foml_contraction() -> Outcome {
    let t0 = Instant::now();
    let cfg = WaeConfig {
        dim_z: 3,
        hidden: vec![8, 8],
        init_std: 0.1,
        ..WaeConfig::default()
    };
    let mut worst: f64 = 0.0;
    for (seed, (a1, b1, a2, b2)) in [(1e-4, 1e-3, 5e-4, 5e-3), (0.05, 2.0, 0.1, 1.5), (0.3, 0.5, 0.2, 0.25)].into_iter().enumerate() {
        let seed = seed as u64;
        let mut wae = Wae::new(6, 3, &cfg, seed).map_err(fail)?;
        let anchor = ParamBundle::of(&Wae::new(6, 3, &cfg, seed + 100).map_err(fail)?);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = small_batch(&mut rng);
        let mut eval = wae.objective(&batch, &WaeNoise::sample(4, 3, &mut rng), Reduction::Mean).map_err(fail)?;
        eval.encoder.scale(0.0);
        eval.decoder.scale(0.0);

        let before: Vec<f64> = ParamBundle::of(&wae).flat().iter().zip(anchor.flat()).map(|(p, z)| p - z).collect();
        online_update(&mut wae, &anchor, (&eval.encoder, &eval.decoder), a1, b1).map_err(fail)?;
        let after: Vec<f64> = ParamBundle::of(&wae).flat().iter().zip(anchor.flat()).map(|(p, z)| p - z).collect();
        let k = 1.0 - 2.0 * a1 * b1;
        for (b, a) in before.iter().zip(&after) {
            worst = worst.max((a - k * b).abs());
        }

        // J = 0: the history is the live parameter set alone
        let live = ParamBundle::of(&wae);
        let mut zeta = anchor.clone();
        let before: Vec<f64> = zeta.flat().iter().zip(live.flat()).map(|(z, p)| z - p).collect();
        anchor_update(&mut zeta, std::slice::from_ref(&live), None, a2, b2).map_err(fail)?;
        let after: Vec<f64> = zeta.flat().iter().zip(live.flat()).map(|(z, p)| z - p).collect();
        let k = 1.0 - 2.0 * a2 * b2;
        for (b, a) in before.iter().zip(&after) {
            worst = worst.max((a - k * b).abs());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        worst <= 1e-12 && secs < 1.0,
        format!("largest deviation from the contraction factor, per coordinate: {worst:.1e} (3 step-size settings); {secs:.3}s"),
    )
}

fn small_batch(rng: &mut ChaCha8Rng) -> derl::wae::TransitionBatch {
    let s = Array2::from_shape_simple_fn((4, 6), || normal(rng));
    let a = Array2::from_elem((4, 3), 1.0 / 3.0);
    let sn = Array2::from_shape_simple_fn((4, 6), || normal(rng));
    derl::wae::TransitionBatch::new(s, a, sn).unwrap()
}

// ---------------------------------------------------------------- 4

const TASK_DIM_S: usize = 40;
const TASK_RANK: usize = 4;
const TASK_DIM_A: usize = 5;
const TASK_NOISE: f64 = 0.1;

fn task_wae_config(steps: usize) -> WaeConfig {
    WaeConfig {
        dim_z: 4,
        hidden: vec![64, 64],
        init_std: 0.1,
        steps,
        ..WaeConfig::default()
    }
}

fn embedding_value() -> Outcome {
    let t0 = Instant::now();
    let cfg = task_wae_config(3000);
    let mut wins = 0;
    let mut ratios = Vec::new();
    for seed in 0..5u64 {
        let task = LinearGaussianTask::new(seed, TASK_DIM_S, TASK_RANK, TASK_DIM_A, TASK_NOISE).map_err(fail)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
        let train = task.sample(4000, false, &mut rng);
        let test = task.sample(1000, false, &mut rng);
        let wae = Wae::new(TASK_DIM_S, TASK_DIM_A, &cfg, seed).map_err(fail)?;
        let mut learned = WaeTrainer::new(wae.clone(), cfg.learning_rate, seed);
        learned.train(&train, cfg.steps, cfg.batch_size).map_err(fail)?;
        let mut frozen = WaeTrainer::new(wae, cfg.learning_rate, seed);
        frozen.freeze_encoder = true;
        frozen.train(&train, cfg.steps, cfg.batch_size).map_err(fail)?;
        let r = learned.wae.reconstruction_mse(&test).map_err(fail)? / frozen.wae.reconstruction_mse(&test).map_err(fail)?;
        if r < 0.5 {
            wins += 1;
        }
        ratios.push(r);
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        wins == 5 && secs < 300.0,
        format!(
            "{wins}/5 seeds below half the frozen-encoder MSE, ratios {ratios:.3?}; init N(0, {}^2), {} Adam steps; {secs:.1}s",
            cfg.init_std, cfg.steps
        ),
    )
}

// ---------------------------------------------------------------- 5

fn adaptation_value() -> Outcome {
    let t0 = Instant::now();
    let cfg = task_wae_config(3000);
    let foml_cfg = FomlConfig::default();
    let windows = 100;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5u64 {
        let task = LinearGaussianTask::new(seed, TASK_DIM_S, TASK_RANK, TASK_DIM_A, TASK_NOISE).map_err(fail)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 2000);
        let pre = task.sample(4000, false, &mut rng);
        let mut trainer = WaeTrainer::new(Wae::new(TASK_DIM_S, TASK_DIM_A, &cfg, seed).map_err(fail)?, cfg.learning_rate, seed);
        trainer.train(&pre, cfg.steps, cfg.batch_size).map_err(fail)?;
        let frozen = trainer.wae.clone();

        let (stream, flip) = task.regime_shift_stream(windows * foml_cfg.stream_len, &mut rng);
        let mut live = trainer.wae;
        let mut foml = Foml::new(foml_cfg.clone(), &live, seed).map_err(fail)?;
        for w in 0..windows {
            let chunk = stream.slice(w * foml_cfg.stream_len, (w + 1) * foml_cfg.stream_len);
            foml.run_window_update(&mut live, &chunk).map_err(fail)?;
        }
        let test = task.sample(1000, true, &mut rng);
        let (a, b) = (live.reconstruction_mse(&test).map_err(fail)?, frozen.reconstruction_mse(&test).map_err(fail)?);
        if a < b {
            wins += 1;
        }
        pairs.push((a, b));
        assert_eq!(flip, windows * foml_cfg.stream_len / 2);
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        wins >= 4 && secs < 600.0,
        format!(
            "{wins}/5 seeds with lower post-shift MSE than the frozen model, (foml, frozen) {:.4?}; {windows} windows of {}, flip at window {}; init N(0, {}^2); {secs:.1}s",
            pairs,
            foml_cfg.stream_len,
            windows / 2,
            cfg.init_std
        ),
    )
}

// ---------------------------------------------------------------- 6

fn agent_sanity() -> Outcome {
    let t0 = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    let cfg = DerlConfig {
        wae: WaeConfig {
            dim_z: 8,
            hidden: vec![64, 64],
            init_std: 0.1,
            steps: 2000,
            ..WaeConfig::default()
        },
        td3: Td3Config {
            gamma: 0.9,
            hidden: vec![64, 64],
            init_std: 0.1,
            ..Td3Config::default()
        },
        embed_samples: 4000,
        initial_steps: 14_250,
        steps_per_window: 250,
        ..DerlConfig::default()
    };
    let mut total_steps = 0;
    for seed in 0..5u64 {
        let spec = SynthSpec {
            drift: vec![0.002, 0.0, 0.0, 0.0, 0.0],
            vol: vec![0.01],
            ..SynthSpec::default()
        };
        let m = synth_market(seed, 5, 1800, &spec).map_err(fail)?;
        let panel = m.panel().map_err(fail)?;
        let specs = [IndicatorSpec::new(IndicatorKind::Rsi, 14).unwrap(), IndicatorSpec::new(IndicatorKind::Sma, 5).unwrap()];
        let (data, _, _) =
            build_market_data(&panel, 5, m.dates[0], m.dates[0], *m.dates.last().unwrap(), &specs, &[], None).map_err(fail)?;
        let seg = SegmentSpec {
            train_start: None,
            val_start: data.dates[796],
            val_end: data.dates[1799],
        };
        let sched = build_schedule(&data.dates, &[seg], 3, 42).map_err(fail)?;
        total_steps = cfg.initial_steps + (sched.windows.len() - 1) * cfg.steps_per_window;
        let cost = CostModel::default();
        let seeds = DerlSeeds::from_base(seed);
        let (res, _) = run_backtest(&data, &sched, |_| DerlStrategy::new(cfg.clone(), cost, seeds), &cost, 1).map_err(fail)?;
        let (ew, _) = run_backtest(&data, &sched, |_| Ok(EqualWeight), &cost, 1).map_err(fail)?;
        let a = metrics(&res.returns, &res.risk_free, 252).map_err(fail)?.sharpe;
        let b = metrics(&ew.returns, &ew.risk_free, 252).map_err(fail)?.sharpe;
        if a > b {
            wins += 1;
        }
        rows.push((a, b));
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        wins >= 4 && secs < 900.0,
        format!(
            "{wins}/5 seeds beat equal weight, (derl, ew) Sharpe {rows:.2?}; {total_steps} agent steps; init N(0, 0.1^2); {secs:.1}s"
        ),
    )
}

// ---------------------------------------------------------------- 7

/// Alternates the whole portfolio between the first two risky assets.
struct Rotate;

impl Strategy for Rotate {
    fn name(&self) -> &str {
        "rotate"
    }

    fn decide(&mut self, view: &MarketView<'_>, _holdings: &[f64], _wealth: f64) -> derl::error::Result<PortfolioAction> {
        let mut w = vec![0.0; 3];
        w[1 + view.limit() % 2] = 1.0;
        Ok(PortfolioAction(w))
    }
}

fn accounting() -> Outcome {
    // random churn at zero cost over zero returns
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let free = CostModel::new(0.0).map_err(fail)?;
    let mut state = MarketState {
        returns: vec![0.0; 4],
        holdings: vec![1.0, 0.0, 0.0, 0.0],
        metrics: vec![],
        wealth: 1.0,
    };
    let mut drift: f64 = 0.0;
    for _ in 0..10_000 {
        let logits: Vec<f64> = (0..4).map(|_| 3.0 * normal(&mut rng)).collect();
        let a = PortfolioAction(derl::nn::softmax(&logits).unwrap());
        state = step(&state, &a, &[0.0; 4], &[], &free).map_err(fail)?;
        drift = drift.max((state.wealth - 1.0).abs());
    }

    // scripted full rotations through the backtest engine
    let t = 400;
    let data = common::market_from_returns(Array2::zeros((t, 3)));
    let seg = SegmentSpec {
        train_start: None,
        val_start: data.dates[300],
        val_end: data.dates[t - 1],
    };
    let sched = build_schedule(&data.dates, &[seg], 1, 42).map_err(fail)?;
    let cost = CostModel::new(0.001).map_err(fail)?;
    let (res, _) = run_backtest(&data, &sched, |_| Ok(Rotate), &cost, 1).map_err(fail)?;
    // the first day buys in from the initial holdings; every later day is a full rotation
    let per_trade = res.returns[1..].iter().map(|r| (-r - 0.002).abs()).fold(0.0, f64::max);
    let engine_wealth = res.wealth.windows(2).skip(1).map(|w| ((w[0] - w[1]) / w[0] - 0.002).abs()).fold(0.0, f64::max);
    check(
        drift <= 1e-10 && per_trade <= 1e-12 && engine_wealth <= 1e-12,
        format!(
            "zero-cost wealth drift {drift:.1e} over 10000 random rebalances; full-rotation cost error {:.1e} of wealth over {} trades",
            per_trade.max(engine_wealth),
            res.returns.len() - 1
        ),
    )
}

// ---------------------------------------------------------------- 8

fn statistics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut notes = Vec::new();
    let close = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0);

    let mut metrics_ok = true;
    for n in [30, 252, 5000] {
        let r: Vec<f64> = (0..n).map(|_| 0.0004 + 0.01 * normal(&mut rng) + 0.01 * normal(&mut rng).powi(3)).collect();
        let rf = vec![0.0001; n];
        let ex: Vec<f64> = r.iter().map(|v| v - 0.0001).collect();
        let (m, sd, skew, kurt) = common::welford(&ex);
        let rep = metrics(&r, &rf, 252).map_err(fail)?;
        metrics_ok &= close(rep.mean, 252.0 * m, 1e-12)
            && close(rep.std, 252f64.sqrt() * sd, 1e-12)
            && close(rep.sharpe, 252f64.sqrt() * m / sd, 1e-12)
            && close(rep.skewness, skew, 1e-12)
            && close(rep.kurtosis, kurt, 1e-12);
    }
    notes.push(format!("metrics {}", if metrics_ok { "match" } else { "differ" }));

    let (t, k) = (200, 6);
    let x = Array2::from_shape_simple_fn((t, k), || normal(&mut rng));
    let y: Vec<f64> = (0..t).map(|i| 0.3 + 1.5 * x[[i, 0]] - 0.7 * x[[i, 2]] + 0.5 * normal(&mut rng)).collect();
    let xm = DMatrix::from_fn(t, k + 1, |i, j| if j == 0 { 1.0 } else { x[[i, j - 1]] });
    let yv = DVector::from_column_slice(&y);
    let beta = xm.clone().svd(true, true).solve(&yv, 1e-14).map_err(fail)?;
    let l0 = lasso(&y, x.view(), 0.0).map_err(fail)?;
    let ols_gap = (0..k).map(|j| (l0.coefficients[j] - beta[j + 1]).abs()).fold((l0.intercept - beta[0]).abs(), f64::max);
    let lmax = lambda_max(&y, x.view());
    let kkt = [0.01, 0.1, 0.5, 0.9]
        .iter()
        .map(|f| lasso(&y, x.view(), f * lmax).map(|fit| kkt_violation(&y, x.view(), &fit)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(fail)?
        .into_iter()
        .fold(0.0, f64::max);
    notes.push(format!("lasso-vs-OLS {ols_gap:.1e}, KKT {kkt:.1e}"));

    let names = ["x0", "x1", "x2", "x3", "x4", "x5"];
    let reg = ols_newey_west(&y, x.view(), &names, Some(0), true).map_err(fail)?;
    let resid = &yv - &xm * &beta;
    let bread = (xm.transpose() * &xm).try_inverse().ok_or("singular design")?;
    let meat = xm.transpose() * DMatrix::from_diagonal(&resid.map(|e| e * e)) * &xm;
    let white = &bread * meat * &bread;
    let nw_gap = (0..=k).map(|j| (reg.std_errors[j] - white[(j, j)].sqrt()).abs() / white[(j, j)].sqrt()).fold(0.0, f64::max);
    notes.push(format!("NW(0)-vs-White {nw_gap:.1e}"));

    // equal Sharpe by construction: the second series is a permutation of the first
    let a: Vec<f64> = (0..1000).map(|_| 0.0005 + 0.01 * normal(&mut rng)).collect();
    let mut b = a.clone();
    for i in (1..b.len()).rev() {
        let j = rng.random_range(0..=i);
        b.swap(i, j);
    }
    let p = bootstrap_sr_test(&a, &b, 10_000, 10.0, 42).map_err(fail)?;
    notes.push(format!("null bootstrap p {p:.3}"));

    check(
        metrics_ok && ols_gap <= 1e-6 && kkt <= 1e-6 && nw_gap <= 1e-10 && (p - 0.5).abs() <= 0.1,
        notes.join("; "),
    )
}

// ---------------------------------------------------------------- 9, 10

fn desk_config(data_dir: &Path) -> Result<RunConfig, String> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.json");
    let mut cfg = RunConfig::load(&path).map_err(fail)?;
    cfg.data.panel = vec![data_dir.join("panel.csv")];
    cfg.data.vix = Some(data_dir.join("vix.csv"));
    Ok(cfg)
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

fn determinism(root: &Path) -> Outcome {
    let t0 = Instant::now();
    let data = root.join("data");
    let cfg = desk_config(&data)?;
    cmd_simulate(&cfg, &data).map_err(fail)?;
    let flags = RunFlags { jobs: 1, ..RunFlags::default() };
    cmd_backtest(&cfg, flags, &root.join("a")).map_err(fail)?;
    cmd_backtest(&cfg, flags, &root.join("b")).map_err(fail)?;
    let (fa, fb) = (files(&root.join("a")), files(&root.join("b")));
    let mut differing = Vec::new();
    for (x, y) in fa.iter().zip(&fb) {
        if x.file_name() != y.file_name() || std::fs::read(x).unwrap() != std::fs::read(y).unwrap() {
            differing.push(x.file_name().unwrap().to_string_lossy().into_owned());
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    check(
        fa.len() == fb.len() && differing.is_empty() && fa.iter().any(|p| p.ends_with("results.csv")) && secs < 1200.0,
        format!(
            "{} output files compared byte for byte, {} differ {differing:?}; desk config, two runs {secs:.1}s",
            fa.len(),
            differing.len()
        ),
    )
}

fn ablation(root: &Path) -> Outcome {
    let t0 = Instant::now();
    let data = root.join("data");
    let cfg = desk_config(&data)?;
    for (name, flags) in [
        ("noembed", RunFlags { no_embed: true, jobs: 1, ..RunFlags::default() }),
        ("nometa", RunFlags { no_meta: true, jobs: 1, ..RunFlags::default() }),
    ] {
        let rep = cmd_backtest(&cfg, flags, &root.join(name)).map_err(fail)?;
        if rep.observations == 0 {
            return Err(format!("{name} arm produced no returns"));
        }
    }
    let report = cmd_analyze(&cfg, &root.join("a"), Some(&root.join("noembed")), &root.join("analysis")).map_err(fail)?;
    let harness = report.ablation.as_ref().map_or(0, |a| a.days);

    // plant a known dependence on the volatility index on top of the ablated arm
    let abl = read_results(root.join("noembed").join("results.csv"), "ablated").map_err(fail)?;
    let vix = Series::load(data.join("vix.csv")).and_then(|s| s.on_calendar(&abl.dates)).map_err(fail)?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mkt: Vec<f64> = (0..abl.dates.len()).map(|_| 0.0003 + 0.01 * normal(&mut rng)).collect();
    let shocks: Vec<f64> = (0..abl.dates.len()).map(|_| 0.001 * normal(&mut rng)).collect();
    let u = common::ar1(&shocks, 0.4);
    let (b0, b_mkt, b_vix) = (1e-4, 0.2, 2e-3);
    let full: Vec<f64> = (0..abl.returns.len())
        .map(|i| abl.returns[i] + b0 + b_mkt * mkt[i] + b_vix * vix[i] + u[i])
        .collect();
    let contribution = ablation_contribution(&full, &abl.returns).map_err(fail)?;
    let reg = regress_on_market(&contribution, &mkt, &vix, None).map_err(fail)?;
    let iv = reg.names.iter().position(|n| n == "vix").ok_or("no vix coefficient")?;
    let z = (reg.coefficients[iv] - b_vix) / reg.std_errors[iv];
    let secs = t0.elapsed().as_secs_f64();
    check(
        z.abs() <= 2.0 && reg.t_values[iv].abs() > 2.0 && harness == abl.dates.len(),
        format!(
            "both arms and the analysis completed ({harness} aligned days); planted vix slope {b_vix:e}, estimate {:.3e} (NW se {:.1e}, t {:.1}, {z:+.2} se from the truth, lag {}); {secs:.1}s",
            reg.coefficients[iv], reg.std_errors[iv], reg.t_values[iv], reg.lags
        ),
    )
}

fn main() {
    let dir = tempfile::tempdir().expect("temporary directory");
    let root = dir.path().to_path_buf();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("gradient correctness", Box::new(gradients)),
        ("schedule arithmetic", Box::new(schedule)),
        ("online-update contraction", Box::new(foml_contraction)),
        ("embedding value", Box::new(embedding_value)),
        ("adaptation value", Box::new(adaptation_value)),
        ("agent sanity", Box::new(agent_sanity)),
        ("accounting exactness", Box::new(accounting)),
        ("statistics oracles", Box::new(statistics)),
        ("determinism", Box::new({
            let r = root.clone();
            move || determinism(&r)
        })),
        ("ablation harness", Box::new({
            let r = root.clone();
            move || ablation(&r)
        })),
    ];
    // ACCEPTANCE_ONLY=n runs a single criterion (10 also runs 9, whose outputs it reads)
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n && !(o == 10 && n == 9)) {
            continue;
        }
        let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(d) => println!("PASS {n:>2} {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {n:>2} {name}: {d}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
