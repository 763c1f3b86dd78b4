//! OHLCV ingestion, multi-asset date alignment and the five rate-of-change
//! indicators that make up the market feature tensor.
//!
//! Bars are indexed `0..len`. The indicator row for bar `t` compares bar `t`
//! with bar `t - 1`, so bar 0 has no row and the feature window ending at `t`
//! needs `t >= n`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of indicator features per asset and period.
pub const FEATURES: usize = 5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{source_name}: cannot read: {message}")]
    Io {
        source_name: String,
        message: String,
    },
    #[error("{source_name}: line {line}: {message}")]
    Parse {
        source_name: String,
        line: u64,
        message: String,
    },
    #[error("{source_name}: line {line}: invalid bar: {message}")]
    InvalidBar {
        source_name: String,
        line: u64,
        message: String,
    },
    #[error("{source_name}: dates not strictly increasing at line {line} ({date})")]
    NonMonotoneDates {
        source_name: String,
        line: u64,
        date: NaiveDate,
    },
    #[error("{source_name}: {rows} rows, at least {required} required")]
    TooShort {
        source_name: String,
        rows: usize,
        required: usize,
    },
    #[error("missing column `{column}` in {source_name}")]
    MissingColumn { source_name: String, column: String },
    #[error("non-positive price for asset {asset} at {date}")]
    NonPositivePrice { asset: usize, date: NaiveDate },
    #[error("window underflow: period {period} < window {window}")]
    WindowUnderflow { period: usize, window: usize },
    #[error("period {period} out of range (series has {len} bars)")]
    PeriodOutOfRange { period: usize, len: usize },
    #[error("no assets supplied")]
    NoAssets,
}

/// Column names used to locate fields in an input CSV.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsvSchema {
    pub date: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub volume: String,
    /// chrono format string for the date column.
    pub date_format: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            date: "date".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            volume: "volume".into(),
            date_format: "%Y-%m-%d".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OhlcvBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl OhlcvBar {
    pub fn validate(&self) -> Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err("prices must be finite and > 0".into());
        }
        if !self.volume.is_finite() || self.volume < 0.0 {
            return Err("volume must be finite and >= 0".into());
        }
        if self.high < self.low {
            return Err(format!("high {} < low {}", self.high, self.low));
        }
        if self.open < self.low || self.open > self.high {
            return Err(format!("open {} outside [low, high]", self.open));
        }
        if self.close < self.low || self.close > self.high {
            return Err(format!("close {} outside [low, high]", self.close));
        }
        Ok(())
    }
}

/// Validated, date-sorted bars of one asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetSeries {
    pub name: String,
    pub bars: Vec<OhlcvBar>,
}

impl AssetSeries {
    pub fn len(&self) -> usize {
        self.bars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bars.is_empty()
    }

    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.bars.iter().map(|b| b.date)
    }
}

/// Loads one asset CSV. `min_rows` is normally `n + 2`.
pub fn load_series(
    path: &Path,
    schema: &CsvSchema,
    min_rows: usize,
) -> Result<AssetSeries, DataError> {
    let source_name = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| DataError::Io {
        source_name: source_name.clone(),
        message: e.to_string(),
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| source_name.clone());
    let mut series = parse_series(file, schema, &source_name)?;
    series.name = name;
    if series.len() < min_rows {
        return Err(DataError::TooShort {
            source_name,
            rows: series.len(),
            required: min_rows,
        });
    }
    Ok(series)
}

/// Parses and validates CSV content. Performs no length check.
pub fn parse_series<R: Read>(
    reader: R,
    schema: &CsvSchema,
    source_name: &str,
) -> Result<AssetSeries, DataError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Parse {
            source_name: source_name.into(),
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn {
                source_name: source_name.into(),
                column: name.into(),
            })
    };
    let cols = [
        column(&schema.date)?,
        column(&schema.open)?,
        column(&schema.high)?,
        column(&schema.low)?,
        column(&schema.close)?,
        column(&schema.volume)?,
    ];

    let mut bars: Vec<OhlcvBar> = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| DataError::Parse {
            source_name: source_name.into(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize| record.get(cols[idx]).unwrap_or("");
        let parse_err = |message: String| DataError::Parse {
            source_name: source_name.into(),
            line,
            message,
        };
        let date = NaiveDate::parse_from_str(field(0), &schema.date_format)
            .map_err(|e| parse_err(format!("bad date `{}`: {e}", field(0))))?;
        let num = |idx: usize, what: &str| -> Result<f64, DataError> {
            field(idx)
                .parse::<f64>()
                .map_err(|e| parse_err(format!("bad {what} `{}`: {e}", field(idx))))
        };
        let bar = OhlcvBar {
            date,
            open: num(1, "open")?,
            high: num(2, "high")?,
            low: num(3, "low")?,
            close: num(4, "close")?,
            volume: num(5, "volume")?,
        };
        bar.validate().map_err(|message| DataError::InvalidBar {
            source_name: source_name.into(),
            line,
            message,
        })?;
        if let Some(prev) = bars.last() {
            if bar.date <= prev.date {
                return Err(DataError::NonMonotoneDates {
                    source_name: source_name.into(),
                    line,
                    date: bar.date,
                });
            }
        }
        bars.push(bar);
    }
    Ok(AssetSeries {
        name: source_name.into(),
        bars,
    })
}

/// Outcome of aligning several assets on their common trading dates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub first_date: Option<NaiveDate>,
    pub last_date: Option<NaiveDate>,
    pub common_dates: usize,
    /// Per asset, the dates present in that asset's file but dropped because
    /// at least one other asset has no bar on that date.
    pub dropped: Vec<(String, Vec<NaiveDate>)>,
}

/// Restricts every series to the intersection of dates.
pub fn align(series: Vec<AssetSeries>) -> Result<(Vec<AssetSeries>, AlignmentReport), DataError> {
    if series.is_empty() {
        return Err(DataError::NoAssets);
    }
    let mut common: BTreeSet<NaiveDate> = series[0].dates().collect();
    for s in &series[1..] {
        let dates: BTreeSet<NaiveDate> = s.dates().collect();
        common = common.intersection(&dates).copied().collect();
    }
    let mut dropped = Vec::with_capacity(series.len());
    let aligned = series
        .into_iter()
        .map(|s| {
            let (kept, gone): (Vec<OhlcvBar>, Vec<OhlcvBar>) =
                s.bars.into_iter().partition(|b| common.contains(&b.date));
            dropped.push((s.name.clone(), gone.into_iter().map(|b| b.date).collect()));
            AssetSeries {
                name: s.name,
                bars: kept,
            }
        })
        .collect();
    let report = AlignmentReport {
        first_date: common.first().copied(),
        last_date: common.last().copied(),
        common_dates: common.len(),
        dropped,
    };
    Ok((aligned, report))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct IndicatorRow {
    /// Close-to-close rate of change.
    pub kc: f64,
    /// Open relative to previous close.
    pub ko: f64,
    /// Close relative to high (always <= 0).
    pub kh: f64,
    /// Close relative to low (always >= 0).
    pub kl: f64,
    /// Volume rate of change.
    pub kv: f64,
}

impl IndicatorRow {
    pub fn as_array(&self) -> [f64; FEATURES] {
        [self.kc, self.ko, self.kh, self.kl, self.kv]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QualityIssue {
    /// Previous volume was zero; kv emitted as 0.
    ZeroPreviousVolume,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityFlag {
    pub asset: usize,
    pub date: NaiveDate,
    pub issue: QualityIssue,
}

/// Indicator rows for bars `1..len` of `series`; output length is `len - 1`.
///
/// `asset` is only used to label quality flags and errors.
pub fn compute_indicators(
    series: &AssetSeries,
    asset: usize,
) -> Result<(Vec<IndicatorRow>, Vec<QualityFlag>), DataError> {
    let mut rows = Vec::with_capacity(series.len().saturating_sub(1));
    let mut flags = Vec::new();
    for bar in &series.bars {
        if [bar.open, bar.high, bar.low, bar.close]
            .iter()
            .any(|p| *p <= 0.0)
        {
            return Err(DataError::NonPositivePrice {
                asset,
                date: bar.date,
            });
        }
    }
    for pair in series.bars.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        let kv = if prev.volume == 0.0 {
            flags.push(QualityFlag {
                asset,
                date: cur.date,
                issue: QualityIssue::ZeroPreviousVolume,
            });
            0.0
        } else {
            (cur.volume - prev.volume) / prev.volume
        };
        rows.push(IndicatorRow {
            kc: (cur.close - prev.close) / prev.close,
            ko: (cur.open - prev.close) / prev.close,
            kh: (cur.close - cur.high) / cur.high,
            kl: (cur.close - cur.low) / cur.low,
            kv,
        });
    }
    Ok((rows, flags))
}

/// Feature tensor of shape `(assets, window, FEATURES)`, oldest column first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTensor {
    assets: usize,
    window: usize,
    values: Vec<f64>,
}

impl FeatureTensor {
    pub fn from_values(assets: usize, window: usize, values: Vec<f64>) -> Self {
        assert_eq!(
            values.len(),
            assets * window * FEATURES,
            "feature tensor shape"
        );
        Self {
            assets,
            window,
            values,
        }
    }

    pub fn zeros(assets: usize, window: usize) -> Self {
        Self::from_values(assets, window, vec![0.0; assets * window * FEATURES])
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.assets, self.window, FEATURES)
    }

    pub fn assets(&self) -> usize {
        self.assets
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn get(&self, asset: usize, step: usize, feature: usize) -> f64 {
        self.values[(asset * self.window + step) * FEATURES + feature]
    }

    /// The `(window, FEATURES)` block for one asset, row-major.
    pub fn asset_window(&self, asset: usize) -> &[f64] {
        let len = self.window * FEATURES;
        &self.values[asset * len..(asset + 1) * len]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Tensor with asset blocks reordered so that block `k` is old block `order[k]`.
    pub fn permute_assets(&self, order: &[usize]) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for &a in order {
            values.extend_from_slice(self.asset_window(a));
        }
        Self::from_values(order.len(), self.window, values)
    }
}

/// Stacks per-asset indicator sequences into the window ending at bar `t`.
///
/// `indicators[i][k]` is the row for bar `k + 1`.
pub fn feature_tensor(
    indicators: &[Vec<IndicatorRow>],
    t: usize,
    n: usize,
) -> Result<FeatureTensor, DataError> {
    if t < n || n == 0 {
        return Err(DataError::WindowUnderflow {
            period: t,
            window: n,
        });
    }
    let mut values = Vec::with_capacity(indicators.len() * n * FEATURES);
    for rows in indicators {
        if t > rows.len() {
            return Err(DataError::PeriodOutOfRange {
                period: t,
                len: rows.len() + 1,
            });
        }
        for bar in (t + 1 - n)..=t {
            values.extend_from_slice(&rows[bar - 1].as_array());
        }
    }
    Ok(FeatureTensor::from_values(indicators.len(), n, values))
}

/// Aligned multi-asset market with indicators computed once at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketData {
    names: Vec<String>,
    dates: Vec<NaiveDate>,
    closes: Vec<Vec<f64>>,
    indicators: Vec<Vec<IndicatorRow>>,
    flags: Vec<QualityFlag>,
}

impl MarketData {
    /// Builds from already aligned series (identical date vectors).
    pub fn from_aligned(series: &[AssetSeries]) -> Result<Self, DataError> {
        let first = series.first().ok_or(DataError::NoAssets)?;
        let dates: Vec<NaiveDate> = first.dates().collect();
        let mut indicators = Vec::with_capacity(series.len());
        let mut flags = Vec::new();
        for (asset, s) in series.iter().enumerate() {
            if s.dates().ne(dates.iter().copied()) {
                return Err(DataError::Parse {
                    source_name: s.name.clone(),
                    line: 0,
                    message: "series not aligned; call align() first".into(),
                });
            }
            let (rows, f) = compute_indicators(s, asset)?;
            indicators.push(rows);
            flags.extend(f);
        }
        Ok(Self {
            names: series.iter().map(|s| s.name.clone()).collect(),
            dates,
            closes: series
                .iter()
                .map(|s| s.bars.iter().map(|b| b.close).collect())
                .collect(),
            indicators,
            flags,
        })
    }

    /// Loads, aligns and indexes a set of asset files.
    pub fn load(
        paths: &[PathBuf],
        schema: &CsvSchema,
        min_rows: usize,
    ) -> Result<(Self, AlignmentReport), DataError> {
        let series = paths
            .iter()
            .map(|p| load_series(p, schema, min_rows))
            .collect::<Result<Vec<_>, _>>()?;
        let (aligned, report) = align(series)?;
        if report.common_dates < min_rows {
            return Err(DataError::TooShort {
                source_name: "aligned dataset".into(),
                rows: report.common_dates,
                required: min_rows,
            });
        }
        Ok((Self::from_aligned(&aligned)?, report))
    }

    pub fn num_assets(&self) -> usize {
        self.names.len()
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn date(&self, t: usize) -> NaiveDate {
        self.dates[t]
    }

    pub fn close(&self, asset: usize, t: usize) -> f64 {
        self.closes[asset][t]
    }

    pub fn quality_flags(&self) -> &[QualityFlag] {
        &self.flags
    }

    pub fn indicators(&self) -> &[Vec<IndicatorRow>] {
        &self.indicators
    }

    /// Indicator row of bar `t` (requires `t >= 1`).
    pub fn indicator(&self, asset: usize, t: usize) -> &IndicatorRow {
        &self.indicators[asset][t - 1]
    }

    /// Close-to-close rates of bar `t` for every asset.
    pub fn kc(&self, t: usize) -> Result<Vec<f64>, DataError> {
        if t == 0 || t >= self.len() {
            return Err(DataError::PeriodOutOfRange {
                period: t,
                len: self.len(),
            });
        }
        Ok(self.indicators.iter().map(|rows| rows[t - 1].kc).collect())
    }

    pub fn feature_tensor(&self, t: usize, n: usize) -> Result<FeatureTensor, DataError> {
        if t >= self.len() {
            return Err(DataError::PeriodOutOfRange {
                period: t,
                len: self.len(),
            });
        }
        feature_tensor(&self.indicators, t, n)
    }

    /// First bar index at or after `date`.
    pub fn index_at_or_after(&self, date: NaiveDate) -> Option<usize> {
        let idx = self.dates.partition_point(|d| *d < date);
        (idx < self.len()).then_some(idx)
    }

    /// Last bar index at or before `date`.
    pub fn index_at_or_before(&self, date: NaiveDate) -> Option<usize> {
        self.dates.partition_point(|d| *d <= date).checked_sub(1)
    }

    /// Bar indices grouped by calendar year.
    pub fn years(&self) -> BTreeMap<i32, (usize, usize)> {
        use chrono::Datelike;
        let mut out: BTreeMap<i32, (usize, usize)> = BTreeMap::new();
        for (t, d) in self.dates.iter().enumerate() {
            out.entry(d.year())
                .and_modify(|range| range.1 = t)
                .or_insert((t, t));
        }
        out
    }

    /// Writes `date,kc,ko,kh,kl,kv` for one asset.
    pub fn write_indicator_csv<W: Write>(&self, asset: usize, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "kc", "ko", "kh", "kl", "kv"])?;
        for (k, row) in self.indicators[asset].iter().enumerate() {
            let date = self.dates[k + 1].to_string();
            let vals = row.as_array().map(|v| v.to_string());
            w.write_record(std::iter::once(date.as_str()).chain(vals.iter().map(String::as_str)))?;
        }
        w.flush()
    }
}
