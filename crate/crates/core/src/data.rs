//! OHLCV panel ingestion, universe selection and calendar alignment.
//!
//! CSV schema: `date,ticker,open,high,low,close,volume[,market_cap]` with ISO
//! dates. Auxiliary series (risk-free rate, volatility index, market-level
//! variables) use `date,value`.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use chrono::NaiveDate;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::indicators::IndicatorMatrix;
use crate::market::MarketData;

/// Longest run of consecutive missing calendar days that is forward-filled.
pub const DEFAULT_MAX_GAP: usize = 5;

/// Column-oriented bars of one instrument.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Bars {
    pub open: Vec<f64>,
    pub high: Vec<f64>,
    pub low: Vec<f64>,
    pub close: Vec<f64>,
    pub volume: Vec<f64>,
}

impl Bars {
    pub fn len(&self) -> usize {
        self.close.len()
    }

    pub fn is_empty(&self) -> bool {
        self.close.is_empty()
    }

    pub fn push(&mut self, open: f64, high: f64, low: f64, close: f64, volume: f64) {
        self.open.push(open);
        self.high.push(high);
        self.low.push(low);
        self.close.push(close);
        self.volume.push(volume);
    }

    /// Bars built from closes only (open = high = low = close).
    pub fn from_closes(close: &[f64], volume: &[f64]) -> Self {
        Self {
            open: close.to_vec(),
            high: close.to_vec(),
            low: close.to_vec(),
            close: close.to_vec(),
            volume: volume.to_vec(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TickerSeries {
    pub dates: Vec<NaiveDate>,
    pub bars: Bars,
    pub market_cap: Vec<Option<f64>>,
}

impl TickerSeries {
    pub fn position(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Panel {
    pub series: BTreeMap<String, TickerSeries>,
}

/// One CSV record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelRow {
    pub date: NaiveDate,
    pub ticker: String,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
    #[serde(default)]
    pub market_cap: Option<f64>,
}

fn check_row(row: &PanelRow) -> std::result::Result<(), String> {
    let prices = [row.open, row.high, row.low, row.close];
    if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
        return Err(format!("{} {}: prices must be positive", row.ticker, row.date));
    }
    if !(row.volume.is_finite() && row.volume >= 0.0) {
        return Err(format!("{} {}: volume must be >= 0", row.ticker, row.date));
    }
    if row.high < row.low {
        return Err(format!("{} {}: high below low", row.ticker, row.date));
    }
    if let Some(c) = row.market_cap {
        if !(c.is_finite() && c > 0.0) {
            return Err(format!("{} {}: market cap must be positive", row.ticker, row.date));
        }
    }
    Ok(())
}

impl Panel {
    /// Validates rows and sorts each ticker chronologically.
    pub fn from_rows(rows: impl IntoIterator<Item = PanelRow>) -> Result<Self> {
        let mut grouped: BTreeMap<String, BTreeMap<NaiveDate, PanelRow>> = BTreeMap::new();
        for row in rows {
            check_row(&row).map_err(Error::Integrity)?;
            let entry = grouped.entry(row.ticker.clone()).or_default();
            if entry.contains_key(&row.date) {
                return Err(Error::Integrity(format!(
                    "duplicate row for {} on {}",
                    row.ticker, row.date
                )));
            }
            entry.insert(row.date, row);
        }
        if grouped.is_empty() {
            return Err(Error::EmptyPanel("no rows".into()));
        }
        let series = grouped
            .into_iter()
            .map(|(ticker, rows)| {
                let mut s = TickerSeries::default();
                for (date, r) in rows {
                    s.dates.push(date);
                    s.bars.push(r.open, r.high, r.low, r.close, r.volume);
                    s.market_cap.push(r.market_cap);
                }
                (ticker, s)
            })
            .collect();
        Ok(Self { series })
    }

    pub fn tickers(&self) -> Vec<String> {
        self.series.keys().cloned().collect()
    }

    /// Sorted union of all trading dates.
    pub fn calendar(&self) -> Vec<NaiveDate> {
        let set: BTreeSet<NaiveDate> = self
            .series
            .values()
            .flat_map(|s| s.dates.iter().copied())
            .collect();
        set.into_iter().collect()
    }

    pub fn rows(&self) -> Vec<PanelRow> {
        let mut out = Vec::new();
        for (ticker, s) in &self.series {
            for i in 0..s.dates.len() {
                out.push(PanelRow {
                    date: s.dates[i],
                    ticker: ticker.clone(),
                    open: s.bars.open[i],
                    high: s.bars.high[i],
                    low: s.bars.low[i],
                    close: s.bars.close[i],
                    volume: s.bars.volume[i],
                    market_cap: s.market_cap[i],
                });
            }
        }
        out.sort_by(|a, b| a.date.cmp(&b.date).then_with(|| a.ticker.cmp(&b.ticker)));
        out
    }

    fn has_market_cap(&self) -> bool {
        self.series
            .values()
            .any(|s| s.market_cap.iter().any(|c| c.is_some()))
    }
}

fn parse_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Loads and merges one or more panel files.
pub fn load_panel<P: AsRef<Path>>(paths: &[P]) -> Result<Panel> {
    let mut rows = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        for record in reader.deserialize::<PanelRow>() {
            rows.push(record.map_err(parse_error)?);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyPanel("no data rows in input".into()));
    }
    Panel::from_rows(rows)
}

pub fn write_panel(panel: &Panel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let with_cap = panel.has_market_cap();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["date", "ticker", "open", "high", "low", "close", "volume"];
    if with_cap {
        header.push("market_cap");
    }
    w.write_record(&header)?;
    for r in panel.rows() {
        let mut rec = vec![
            r.date.to_string(),
            r.ticker,
            r.open.to_string(),
            r.high.to_string(),
            r.low.to_string(),
            r.close.to_string(),
            r.volume.to_string(),
        ];
        if with_cap {
            rec.push(r.market_cap.map(|c| c.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A dated scalar series such as a risk-free rate or volatility index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Series {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

#[derive(Deserialize)]
struct SeriesRow {
    date: NaiveDate,
    value: f64,
}

impl Series {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Result<Self> {
        if dates.len() != values.len() {
            return Err(Error::Alignment("series dates and values differ in length".into()));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Integrity("series dates must be strictly increasing".into()));
        }
        Ok(Self { dates, values })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
        let (mut dates, mut values) = (Vec::new(), Vec::new());
        for record in reader.deserialize::<SeriesRow>() {
            let r = record.map_err(parse_error)?;
            if !r.value.is_finite() {
                return Err(Error::Integrity(format!("non-finite value on {}", r.date)));
            }
            dates.push(r.date);
            values.push(r.value);
        }
        if dates.is_empty() {
            return Err(Error::EmptyPanel(format!("{} has no rows", path.display())));
        }
        Self::new(dates, values)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["date", "value"])?;
        for (d, v) in self.dates.iter().zip(&self.values) {
            w.write_record([d.to_string(), v.to_string()])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Values on `calendar`, carrying the last observation forward. Dates
    /// before the first observation are an alignment error.
    pub fn on_calendar(&self, calendar: &[NaiveDate]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(calendar.len());
        let mut j = 0;
        let mut last: Option<f64> = None;
        for &d in calendar {
            while j < self.dates.len() && self.dates[j] <= d {
                last = Some(self.values[j]);
                j += 1;
            }
            match last {
                Some(v) => out.push(v),
                None => {
                    return Err(Error::Alignment(format!("series has no value on or before {d}")))
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Universe {
    pub as_of: NaiveDate,
    pub tickers: Vec<String>,
}

/// The `n` largest names by market cap on `as_of`; ties go to the
/// lexicographically smaller ticker.
pub fn select_universe(panel: &Panel, as_of: NaiveDate, n: usize) -> Result<Universe> {
    if n == 0 {
        return Err(Error::Config("universe size must be at least 1".into()));
    }
    let mut caps: Vec<(&String, f64)> = panel
        .series
        .iter()
        .filter_map(|(t, s)| s.position(as_of).and_then(|i| s.market_cap[i]).map(|c| (t, c)))
        .collect();
    if caps.len() < n {
        return Err(Error::Coverage(format!(
            "{} tickers have a market cap on {as_of}, need {n}",
            caps.len()
        )));
    }
    caps.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Ok(Universe {
        as_of,
        tickers: caps.into_iter().take(n).map(|(t, _)| t.clone()).collect(),
    })
}

/// Rectangular view of a universe over a shared calendar.
#[derive(Clone, Debug)]
pub struct AlignedPanel {
    pub dates: Vec<NaiveDate>,
    pub tickers: Vec<String>,
    /// Per ticker, bars on every calendar date (gaps forward-filled).
    pub bars: Vec<Bars>,
    /// `(T - 1) x N` simple close-to-close returns aligned with `dates[1..]`.
    pub returns: Array2<f64>,
    /// `T x N`, true where the bar was forward-filled.
    pub filled: Array2<bool>,
    /// `T x N` market caps carried forward; NaN where never observed.
    pub market_cap: Array2<f64>,
    /// Per ticker, the last calendar row with a genuine bar when the ticker
    /// stops trading before the end of the range.
    pub delisted_at: Vec<Option<usize>>,
}

impl AlignedPanel {
    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

/// Aligns `universe` on the panel's trading calendar within `[start, end]`.
///
/// Runs of at most `max_gap` missing days are forward-filled with the last
/// close (zero return) and flagged. A ticker whose data stops more than
/// `max_gap` days before `end` is treated as delisted; longer interior gaps
/// or a missing first day are coverage errors.
pub fn align(
    panel: &Panel,
    universe: &Universe,
    start: NaiveDate,
    end: NaiveDate,
    max_gap: usize,
) -> Result<AlignedPanel> {
    if start > end {
        return Err(Error::Range(format!("start {start} after end {end}")));
    }
    let mut set = BTreeSet::new();
    for t in &universe.tickers {
        let s = panel
            .series
            .get(t)
            .ok_or_else(|| Error::Coverage(format!("ticker {t} not in panel")))?;
        set.extend(s.dates.iter().copied().filter(|d| *d >= start && *d <= end));
    }
    let dates: Vec<NaiveDate> = set.into_iter().collect();
    if dates.len() < 2 {
        return Err(Error::Range(format!("fewer than two trading days in [{start}, {end}]")));
    }
    let t_len = dates.len();
    let n = universe.tickers.len();
    let mut bars = Vec::with_capacity(n);
    let mut filled = Array2::from_elem((t_len, n), false);
    let mut market_cap = Array2::from_elem((t_len, n), f64::NAN);
    let mut delisted_at = vec![None; n];
    for (k, ticker) in universe.tickers.iter().enumerate() {
        let s = &panel.series[ticker];
        let mut b = Bars::default();
        let mut j = s.dates.partition_point(|d| *d < dates[0]);
        let mut run = 0usize;
        let mut last_real = None;
        let mut cap = f64::NAN;
        for (i, &d) in dates.iter().enumerate() {
            if j < s.dates.len() && s.dates[j] == d {
                b.push(
                    s.bars.open[j],
                    s.bars.high[j],
                    s.bars.low[j],
                    s.bars.close[j],
                    s.bars.volume[j],
                );
                if let Some(c) = s.market_cap[j] {
                    cap = c;
                }
                j += 1;
                run = 0;
                last_real = Some(i);
            } else {
                if i == 0 {
                    return Err(Error::Coverage(format!("{ticker} has no bar on {d}")));
                }
                let c = b.close[i - 1];
                b.push(c, c, c, c, 0.0);
                filled[[i, k]] = true;
                run += 1;
                let more = j < s.dates.len();
                if run > max_gap && more {
                    return Err(Error::Coverage(format!(
                        "{ticker} is missing more than {max_gap} consecutive days before {d}"
                    )));
                }
            }
            market_cap[[i, k]] = cap;
        }
        if run > max_gap {
            delisted_at[k] = last_real;
        }
        bars.push(b);
    }
    let mut returns = Array2::zeros((t_len - 1, n));
    for (k, b) in bars.iter().enumerate() {
        for t in 1..t_len {
            returns[[t - 1, k]] = b.close[t] / b.close[t - 1] - 1.0;
        }
    }
    Ok(AlignedPanel {
        dates,
        tickers: universe.tickers.clone(),
        bars,
        returns,
        filled,
        market_cap,
        delisted_at,
    })
}

/// Assembles environment inputs: the cash column carries `rf` (per-period
/// rate, zero when absent), risky columns the aligned returns, and the
/// metrics block the indicator matrix.
pub fn to_market_data(
    aligned: &AlignedPanel,
    metrics: &IndicatorMatrix,
    rf: Option<&[f64]>,
) -> Result<MarketData> {
    let t_len = aligned.len();
    if metrics.values.nrows() != t_len {
        return Err(Error::Alignment(format!(
            "metrics have {} rows, calendar has {t_len}",
            metrics.values.nrows()
        )));
    }
    if let Some(rf) = rf {
        if rf.len() != t_len {
            return Err(Error::Alignment("risk-free series length differs from calendar".into()));
        }
    }
    let n = aligned.tickers.len();
    let mut returns = Array2::zeros((t_len, n + 1));
    for t in 1..t_len {
        returns[[t, 0]] = rf.map(|r| r[t]).unwrap_or(0.0);
        for k in 0..n {
            returns[[t, k + 1]] = aligned.returns[[t - 1, k]];
        }
    }
    let mut assets = vec!["CASH".to_string()];
    assets.extend(aligned.tickers.iter().cloned());
    let mut data = MarketData::new(aligned.dates.clone(), assets, returns, metrics.values.clone())?;
    if aligned.market_cap.iter().all(|c| c.is_finite()) {
        data.market_caps = Some(aligned.market_cap.clone());
    }
    for (k, d) in aligned.delisted_at.iter().enumerate() {
        if let Some(last) = d {
            data.last_tradable[k + 1] = *last;
        }
    }
    Ok(data)
}

/// Universe selection, alignment, indicator computation and cash column in
/// one call. `market_series` are extra state variables (for example a
/// volatility index) carried forward onto the trading calendar; `rf` is a
/// daily risk-free rate series.
#[allow(clippy::too_many_arguments)]
pub fn build_market_data(
    panel: &Panel,
    universe_size: usize,
    as_of: NaiveDate,
    start: NaiveDate,
    end: NaiveDate,
    specs: &[crate::indicators::IndicatorSpec],
    market_series: &[(String, &Series)],
    rf: Option<&Series>,
) -> Result<(MarketData, IndicatorMatrix, AlignedPanel)> {
    let universe = select_universe(panel, as_of, universe_size)?;
    let aligned = align(panel, &universe, start, end, DEFAULT_MAX_GAP)?;
    let extra: Vec<(String, Vec<f64>)> = market_series
        .iter()
        .map(|(name, s)| Ok((name.clone(), s.on_calendar(&aligned.dates)?)))
        .collect::<Result<_>>()?;
    let metrics = crate::indicators::build_metrics_block(&aligned.tickers, &aligned.bars, specs, &extra)?;
    let rf = rf.map(|s| s.on_calendar(&aligned.dates)).transpose()?;
    let data = to_market_data(&aligned, &metrics, rf.as_deref())?;
    Ok((data, metrics, aligned))
}
