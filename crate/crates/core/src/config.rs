//! Run configuration: one JSON document driving every command. Absent fields
//! take their defaults; the resolved document is written next to each
//! command's outputs.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::backtest::{DerlConfig, SegmentSpec};
use crate::error::{Error, Result};
use crate::indicators::{default_specs, IndicatorSpec};
use crate::synth::SynthSpec;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Panel CSV files, concatenated.
    pub panel: Vec<PathBuf>,
    /// Volatility index (`date,value`), used as a state variable and by the
    /// regime split.
    pub vix: Option<PathBuf>,
    /// Daily risk-free rate (`date,value`).
    pub risk_free: Option<PathBuf>,
    /// Factor returns (`date,mkt_rf,smb,hml[,mom],rf`).
    pub factors: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub synth: u64,
    pub agent: u64,
    pub bootstrap: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            synth: 1,
            agent: 2,
            bootstrap: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub assets: usize,
    pub days: usize,
    pub spec: SynthSpec,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            assets: 10,
            days: 1500,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Characteristic windows in calendar days.
    pub windows: Vec<usize>,
    /// Regime threshold on the volatility index; the sample median if absent.
    pub vix_threshold: Option<f64>,
    /// Newey-West lag; `floor(4 (T/100)^(2/9))` if absent.
    pub nw_lags: Option<usize>,
    pub lasso_folds: usize,
    pub lasso_grid: usize,
    pub bootstrap_reps: usize,
    pub bootstrap_block: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            windows: vec![7, 14, 30],
            vix_threshold: None,
            nw_lags: None,
            lasso_folds: 5,
            lasso_grid: 20,
            bootstrap_reps: 10_000,
            bootstrap_block: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataPaths,
    pub universe_size: usize,
    /// Universe selection date; the first panel date if absent.
    pub as_of: Option<NaiveDate>,
    /// Calendar bounds; the panel's full range if absent.
    pub start: Option<NaiveDate>,
    pub end: Option<NaiveDate>,
    pub indicators: Vec<IndicatorSpec>,
    pub segments: Vec<SegmentSpec>,
    pub train_years: usize,
    pub window: usize,
    pub cost_rate: f64,
    pub derl: DerlConfig,
    pub seeds: Seeds,
    pub simulate: SimulateConfig,
    pub analysis: AnalysisConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataPaths::default(),
            universe_size: 50,
            as_of: None,
            start: None,
            end: None,
            indicators: default_specs(),
            segments: Vec::new(),
            train_years: 3,
            window: 42,
            cost_rate: 0.001,
            derl: DerlConfig::default(),
            seeds: Seeds::default(),
            simulate: SimulateConfig::default(),
            analysis: AnalysisConfig::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)?;
        // relative paths are resolved against the config file's directory
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.data.panel.iter_mut().for_each(fix);
        for p in [&mut cfg.data.vix, &mut cfg.data.risk_free, &mut cfg.data.factors].into_iter().flatten() {
            fix(p);
        }
        fix(&mut cfg.out);
        Ok(cfg)
    }

    /// Replaces every seed with one derived from `base`.
    pub fn override_seeds(&mut self, base: u64) {
        self.seeds = Seeds {
            synth: base,
            agent: base.wrapping_add(1),
            bootstrap: base.wrapping_add(2),
        };
    }

    /// Parameter checks shared by all commands.
    pub fn validate(&self) -> Result<()> {
        if self.universe_size == 0 {
            return Err(Error::Config("universe_size must be at least 1".into()));
        }
        if self.window == 0 || self.train_years == 0 {
            return Err(Error::Config("window and train_years must be positive".into()));
        }
        if !(self.cost_rate.is_finite() && self.cost_rate >= 0.0) {
            return Err(Error::Config(format!("cost_rate must be >= 0, got {}", self.cost_rate)));
        }
        if let (Some(s), Some(e)) = (self.start, self.end) {
            if s > e {
                return Err(Error::Config(format!("start {s} is after end {e}")));
            }
        }
        self.derl.validate()
    }

    /// Checks that every referenced input file exists.
    pub fn validate_inputs(&self) -> Result<()> {
        if self.data.panel.is_empty() {
            return Err(Error::Config("data.panel lists no files".into()));
        }
        let all = self
            .data
            .panel
            .iter()
            .chain(self.data.vix.iter())
            .chain(self.data.risk_free.iter())
            .chain(self.data.factors.iter());
        for p in all {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}
