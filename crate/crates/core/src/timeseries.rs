//! Daily OHLCV ingestion, simple returns and fixed-width fractional differencing.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dated daily bars for one asset. Prices are assumed split/dividend adjusted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub asset_id: String,
    pub dates: Vec<NaiveDate>,
    pub open: Vec<f64>,
    pub high: Vec<f64>,
    pub low: Vec<f64>,
    pub close: Vec<f64>,
    pub volume: Vec<f64>,
}

impl PriceSeries {
    pub fn new(
        asset_id: impl Into<String>,
        dates: Vec<NaiveDate>,
        open: Vec<f64>,
        high: Vec<f64>,
        low: Vec<f64>,
        close: Vec<f64>,
        volume: Vec<f64>,
    ) -> Result<Self> {
        let series = Self {
            asset_id: asset_id.into(),
            dates,
            open,
            high,
            low,
            close,
            volume,
        };
        series.validate()?;
        Ok(series)
    }

    /// Series where every OHLC field equals the close and volume is zero.
    pub fn from_closes(
        asset_id: impl Into<String>,
        dates: Vec<NaiveDate>,
        close: Vec<f64>,
    ) -> Result<Self> {
        let n = close.len();
        Self::new(
            asset_id,
            dates,
            close.clone(),
            close.clone(),
            close.clone(),
            close,
            vec![0.0; n],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dates.len();
        for (name, col) in [
            ("open", &self.open),
            ("high", &self.high),
            ("low", &self.low),
            ("close", &self.close),
            ("volume", &self.volume),
        ] {
            if col.len() != n {
                return Err(Error::Shape(format!(
                    "{}: column {name} has {} values for {n} dates",
                    self.asset_id,
                    col.len()
                )));
            }
        }
        for w in self.dates.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::Domain(format!(
                    "{}: dates not strictly increasing at {}",
                    self.asset_id, w[1]
                )));
            }
        }
        for i in 0..n {
            for (name, v) in [
                ("open", self.open[i]),
                ("high", self.high[i]),
                ("low", self.low[i]),
                ("close", self.close[i]),
            ] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Domain(format!(
                        "{}: non-positive {name} {v} on {}",
                        self.asset_id, self.dates[i]
                    )));
                }
            }
            if !(self.volume[i].is_finite() && self.volume[i] >= 0.0) {
                return Err(Error::Domain(format!(
                    "{}: negative volume on {}",
                    self.asset_id, self.dates[i]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn slice(&self, range: Range<usize>) -> PriceSeries {
        PriceSeries {
            asset_id: self.asset_id.clone(),
            dates: self.dates[range.clone()].to_vec(),
            open: self.open[range.clone()].to_vec(),
            high: self.high[range.clone()].to_vec(),
            low: self.low[range.clone()].to_vec(),
            close: self.close[range.clone()].to_vec(),
            volume: self.volume[range].to_vec(),
        }
    }

    fn select(&self, keep: &[usize]) -> PriceSeries {
        let pick = |v: &Vec<f64>| keep.iter().map(|&i| v[i]).collect::<Vec<_>>();
        PriceSeries {
            asset_id: self.asset_id.clone(),
            dates: keep.iter().map(|&i| self.dates[i]).collect(),
            open: pick(&self.open),
            high: pick(&self.high),
            low: pick(&self.low),
            close: pick(&self.close),
            volume: pick(&self.volume),
        }
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["date", "open", "high", "low", "close", "volume"])?;
        for i in 0..self.len() {
            w.write_record([
                self.dates[i].to_string(),
                self.open[i].to_string(),
                self.high[i].to_string(),
                self.low[i].to_string(),
                self.close[i].to_string(),
                self.volume[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Header names for each required column.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ColumnMapping {
    pub date: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub volume: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            date: "date".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            volume: "volume".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum MissingPolicy {
    Reject,
    /// Carry the last observed value forward for at most `max_gap` consecutive rows.
    ForwardFill {
        max_gap: usize,
    },
}

impl Default for MissingPolicy {
    fn default() -> Self {
        MissingPolicy::ForwardFill { max_gap: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoadOptions {
    pub mapping: ColumnMapping,
    pub missing: MissingPolicy,
}

/// Load one asset's bars from a CSV file. The asset id is the file stem.
pub fn load_ohlcv(path: impl AsRef<Path>, options: &LoadOptions) -> Result<PriceSeries> {
    let path = path.as_ref();
    let asset_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let file = File::open(path)?;
    read_ohlcv(file, &asset_id, options)
}

struct RawRow {
    row: usize,
    date: NaiveDate,
    fields: [Option<f64>; 5],
}

pub fn read_ohlcv<R: Read>(
    reader: R,
    asset_id: &str,
    options: &LoadOptions,
) -> Result<PriceSeries> {
    let parse_err = |row: usize, message: String| Error::Parse {
        source_name: asset_id.to_string(),
        row,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let m = &options.mapping;
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(0, format!("missing column `{name}` in header")))
    };
    let date_col = find(&m.date)?;
    let value_cols = [
        find(&m.open)?,
        find(&m.high)?,
        find(&m.low)?,
        find(&m.close)?,
        find(&m.volume)?,
    ];
    const NAMES: [&str; 5] = ["open", "high", "low", "close", "volume"];

    let mut rows = Vec::new();
    let mut seen: HashMap<NaiveDate, usize> = HashMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let raw_date = rec.get(date_col).unwrap_or("");
        let date: NaiveDate = raw_date
            .get(..10.min(raw_date.len()))
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(row, format!("malformed date `{raw_date}`")))?;
        if let Some(first) = seen.insert(date, row) {
            return Err(parse_err(
                row,
                format!("duplicate date {date} (first seen on row {first})"),
            ));
        }
        let mut fields = [None; 5];
        for (k, &col) in value_cols.iter().enumerate() {
            let raw = rec.get(col).unwrap_or("");
            if raw.is_empty() || raw.eq_ignore_ascii_case("nan") || raw.eq_ignore_ascii_case("null")
            {
                continue;
            }
            let v: f64 = raw
                .parse()
                .map_err(|_| parse_err(row, format!("malformed {} value `{raw}`", NAMES[k])))?;
            let bad = if k == 4 { !(v >= 0.0) } else { !(v > 0.0) } || !v.is_finite();
            if bad {
                let what = if k == 4 { "negative" } else { "non-positive" };
                return Err(parse_err(row, format!("{what} {} value {v}", NAMES[k])));
            }
            fields[k] = Some(v);
        }
        rows.push(RawRow { row, date, fields });
    }
    rows.sort_by_key(|r| r.date);

    let n = rows.len();
    let mut cols: [Vec<f64>; 5] = Default::default();
    let mut gap = [0usize; 5];
    for r in &rows {
        for k in 0..5 {
            let v = match (r.fields[k], options.missing) {
                (Some(v), _) => {
                    gap[k] = 0;
                    v
                }
                (None, MissingPolicy::Reject) => {
                    return Err(parse_err(r.row, format!("missing {} value", NAMES[k])));
                }
                (None, MissingPolicy::ForwardFill { max_gap }) => {
                    gap[k] += 1;
                    if gap[k] > max_gap {
                        return Err(parse_err(
                            r.row,
                            format!("{} missing for more than {max_gap} consecutive days; asset rejected", NAMES[k]),
                        ));
                    }
                    *cols[k].last().ok_or_else(|| {
                        parse_err(r.row, format!("missing {} value on first date", NAMES[k]))
                    })?
                }
            };
            cols[k].push(v);
        }
    }
    let [open, high, low, close, volume] = cols;
    debug_assert_eq!(close.len(), n);
    PriceSeries::new(
        asset_id,
        rows.iter().map(|r| r.date).collect(),
        open,
        high,
        low,
        close,
        volume,
    )
}

/// Restrict every series to the dates common to all of them.
pub fn align_inner(series: &[PriceSeries]) -> Result<Vec<PriceSeries>> {
    let Some(first) = series.first() else {
        return Ok(Vec::new());
    };
    let mut common: BTreeSet<NaiveDate> = first.dates.iter().copied().collect();
    for s in &series[1..] {
        let dates: BTreeSet<NaiveDate> = s.dates.iter().copied().collect();
        common = common.intersection(&dates).copied().collect();
    }
    if common.is_empty() {
        return Err(Error::Alignment("assets share no trading dates".into()));
    }
    Ok(series
        .iter()
        .map(|s| {
            let keep: Vec<usize> = (0..s.len())
                .filter(|&i| common.contains(&s.dates[i]))
                .collect();
            s.select(&keep)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub asset_id: String,
    /// `dates[t]` is the date on which `values[t]` is realised (the later close).
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

pub fn simple_returns(prices: &PriceSeries) -> Result<ReturnSeries> {
    if prices.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "{}: need at least 2 closes for returns, got {}",
            prices.asset_id,
            prices.len()
        )));
    }
    Ok(ReturnSeries {
        asset_id: prices.asset_id.clone(),
        dates: prices.dates[1..].to_vec(),
        values: close_to_close(&prices.close),
    })
}

pub(crate) fn close_to_close(close: &[f64]) -> Vec<f64> {
    close.windows(2).map(|w| w[1] / w[0] - 1.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FracDiffSeries {
    pub asset_id: String,
    pub order_d: f64,
    pub weight_cutoff: f64,
    /// Same length as the input; the first `warmup` entries are NaN.
    pub values: Vec<f64>,
    pub warmup: usize,
}

impl FracDiffSeries {
    pub fn available(&self) -> &[f64] {
        &self.values[self.warmup..]
    }
}

/// Binomial weights `w_0 = 1, w_k = -w_{k-1} (d - k + 1) / k`, stopping at the
/// first `|w_k| < cutoff` or after `max_len` weights.
pub fn frac_diff_weights(d: f64, cutoff: f64, max_len: usize) -> Vec<f64> {
    let mut w = vec![1.0];
    let mut k = 1usize;
    while w.len() < max_len {
        let next = -w[k - 1] * (d - k as f64 + 1.0) / k as f64;
        if next.abs() < cutoff {
            break;
        }
        w.push(next);
        k += 1;
    }
    w
}

/// Fixed-width fractional differencing. The kernel is capped at the series length.
pub fn frac_diff(series: &[f64], d: f64, cutoff: f64) -> Result<FracDiffSeries> {
    frac_diff_capped(series, d, cutoff, usize::MAX)
}

pub fn frac_diff_capped(
    series: &[f64],
    d: f64,
    cutoff: f64,
    max_width: usize,
) -> Result<FracDiffSeries> {
    if !(0.0..=1.0).contains(&d) {
        return Err(Error::Domain(format!(
            "fractional order d = {d} outside [0, 1]"
        )));
    }
    if !(cutoff > 0.0) {
        return Err(Error::Domain(format!("weight cutoff {cutoff} must be > 0")));
    }
    if series.is_empty() {
        return Err(Error::InsufficientData("empty series".into()));
    }
    let weights = frac_diff_weights(d, cutoff, series.len().min(max_width.max(1)));
    let warmup = weights.len() - 1;
    let mut values = vec![f64::NAN; series.len()];
    for (t, out) in values.iter_mut().enumerate().skip(warmup) {
        *out = weights
            .iter()
            .enumerate()
            .map(|(k, w)| w * series[t - k])
            .sum();
    }
    Ok(FracDiffSeries {
        asset_id: String::new(),
        order_d: d,
        weight_cutoff: cutoff,
        values,
        warmup,
    })
}
