//! Causal technical features. Every value at row `t` is a function of bars `0..=t` only.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::timeseries::{frac_diff_capped, PriceSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KamaParams {
    pub er_window: usize,
    pub fast: usize,
    pub slow: usize,
}

impl Default for KamaParams {
    fn default() -> Self {
        Self {
            er_window: 10,
            fast: 2,
            slow: 30,
        }
    }
}

impl KamaParams {
    fn check(&self, len: usize) -> Result<()> {
        if self.er_window < 1 || self.fast < 1 || self.fast >= self.slow {
            return Err(Error::Domain(format!(
                "invalid KAMA parameters er_window={} fast={} slow={}",
                self.er_window, self.fast, self.slow
            )));
        }
        if len <= self.er_window {
            return Err(Error::InsufficientData(format!(
                "KAMA window {} needs more than {} closes",
                self.er_window, len
            )));
        }
        Ok(())
    }
}

/// Kaufman efficiency ratio; NaN before index `window`. A path with no movement has ER 0.
pub fn efficiency_ratio(closes: &[f64], window: usize) -> Vec<f64> {
    let mut out = vec![f64::NAN; closes.len()];
    for t in window..closes.len() {
        let change = (closes[t] - closes[t - window]).abs();
        let path: f64 = (t - window + 1..=t)
            .map(|s| (closes[s] - closes[s - 1]).abs())
            .sum();
        out[t] = if path > 0.0 { change / path } else { 0.0 };
    }
    out
}

/// Kaufman's adaptive moving average, seeded with the close at index `er_window`.
pub fn kama(closes: &[f64], er_window: usize, fast: usize, slow: usize) -> Result<Vec<f64>> {
    let p = KamaParams {
        er_window,
        fast,
        slow,
    };
    p.check(closes.len())?;
    let er = efficiency_ratio(closes, er_window);
    let fast_sc = 2.0 / (fast as f64 + 1.0);
    let slow_sc = 2.0 / (slow as f64 + 1.0);
    let mut out = vec![f64::NAN; closes.len()];
    out[er_window] = closes[er_window];
    for t in er_window + 1..closes.len() {
        let sc = (er[t] * (fast_sc - slow_sc) + slow_sc).powi(2);
        out[t] = out[t - 1] + sc * (closes[t] - out[t - 1]);
    }
    Ok(out)
}

/// Wilder RSI; NaN before index `window`.
pub fn rsi(closes: &[f64], window: usize) -> Vec<f64> {
    let n = closes.len();
    let mut out = vec![f64::NAN; n];
    if window == 0 || n <= window {
        return out;
    }
    let w = window as f64;
    let (mut gain, mut loss) = (0.0, 0.0);
    for s in 1..=window {
        let d = closes[s] - closes[s - 1];
        if d > 0.0 {
            gain += d;
        } else {
            loss -= d;
        }
    }
    gain /= w;
    loss /= w;
    let value = |g: f64, l: f64| {
        if l == 0.0 {
            if g == 0.0 {
                50.0
            } else {
                100.0
            }
        } else {
            100.0 - 100.0 / (1.0 + g / l)
        }
    };
    out[window] = value(gain, loss);
    for t in window + 1..n {
        let d = closes[t] - closes[t - 1];
        gain = (gain * (w - 1.0) + d.max(0.0)) / w;
        loss = (loss * (w - 1.0) + (-d).max(0.0)) / w;
        out[t] = value(gain, loss);
    }
    out
}

pub fn rate_of_change(closes: &[f64], window: usize) -> Vec<f64> {
    (0..closes.len())
        .map(|t| {
            if t >= window {
                closes[t] / closes[t - window] - 1.0
            } else {
                f64::NAN
            }
        })
        .collect()
}

/// Distance of the close from its trailing `window`-day mean, in trailing standard deviations.
pub fn zscore_distance(closes: &[f64], window: usize) -> Vec<f64> {
    (0..closes.len())
        .map(|t| {
            if window == 0 || t + 1 < window {
                return f64::NAN;
            }
            let slice = &closes[t + 1 - window..=t];
            let (mean, sd) = mean_sd(slice);
            if sd > 0.0 {
                (closes[t] - mean) / sd
            } else {
                0.0
            }
        })
        .collect()
}

fn mean_sd(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trailing windows of simple returns: at row `t` the window holds returns realised on days `t-w+1..=t`.
fn rolling_returns<F: Fn(&[f64]) -> f64>(closes: &[f64], window: usize, f: F) -> Vec<f64> {
    let returns: Vec<f64> = std::iter::once(f64::NAN)
        .chain(closes.windows(2).map(|w| w[1] / w[0] - 1.0))
        .collect();
    (0..closes.len())
        .map(|t| {
            if window > 0 && t >= window {
                f(&returns[t + 1 - window..=t])
            } else {
                f64::NAN
            }
        })
        .collect()
}

pub fn rolling_volatility(closes: &[f64], window: usize) -> Vec<f64> {
    rolling_returns(closes, window, |r| mean_sd(r).1)
}

pub fn rolling_autocorrelation(closes: &[f64], window: usize) -> Vec<f64> {
    rolling_returns(closes, window, |r| {
        if r.len() < 3 {
            return 0.0;
        }
        let (a, b) = (&r[1..], &r[..r.len() - 1]);
        let (ma, sa) = mean_sd(a);
        let (mb, sb) = mean_sd(b);
        if sa == 0.0 || sb == 0.0 {
            return 0.0;
        }
        let cov = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - ma) * (y - mb))
            .sum::<f64>()
            / a.len() as f64;
        cov / (sa * sb)
    })
}

/// OLS slope of log close against time over the trailing window.
pub fn rolling_trend_slope(closes: &[f64], window: usize) -> Vec<f64> {
    (0..closes.len())
        .map(|t| {
            if window < 2 || t + 1 < window {
                return f64::NAN;
            }
            let ys: Vec<f64> = closes[t + 1 - window..=t].iter().map(|c| c.ln()).collect();
            let xm = (window as f64 - 1.0) / 2.0;
            let ym = ys.iter().sum::<f64>() / window as f64;
            let (mut num, mut den) = (0.0, 0.0);
            for (i, y) in ys.iter().enumerate() {
                let dx = i as f64 - xm;
                num += dx * (y - ym);
                den += dx * dx;
            }
            num / den
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyRatio {
    pub value: f64,
    /// Set when the whole series carries no energy; `value` is then 0.
    pub degenerate: bool,
}

/// Share of the total sum of squares falling in chunk `focus_chunk` when the
/// series is cut into `num_chunks` contiguous pieces (earlier chunks take the remainder).
pub fn energy_ratio_by_chunks(
    series: &[f64],
    num_chunks: usize,
    focus_chunk: usize,
) -> Result<EnergyRatio> {
    if num_chunks == 0 || focus_chunk >= num_chunks {
        return Err(Error::Domain(format!(
            "focus chunk {focus_chunk} invalid for {num_chunks} chunks"
        )));
    }
    if series.len() < num_chunks {
        return Err(Error::InsufficientData(format!(
            "{} values cannot form {num_chunks} chunks",
            series.len()
        )));
    }
    let total: f64 = series.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Ok(EnergyRatio {
            value: 0.0,
            degenerate: true,
        });
    }
    let base = series.len() / num_chunks;
    let extra = series.len() % num_chunks;
    let start = focus_chunk * base + focus_chunk.min(extra);
    let len = base + usize::from(focus_chunk < extra);
    let focus: f64 = series[start..start + len].iter().map(|x| x * x).sum();
    Ok(EnergyRatio {
        value: focus / total,
        degenerate: false,
    })
}

pub fn rolling_energy_ratio(
    closes: &[f64],
    window: usize,
    num_chunks: usize,
    focus: usize,
) -> Vec<f64> {
    rolling_returns(closes, window, |r| {
        energy_ratio_by_chunks(r, num_chunks, focus)
            .map(|e| e.value)
            .unwrap_or(f64::NAN)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KamaFamily {
    pub enabled: bool,
    pub params: Vec<KamaParams>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowFamily {
    pub enabled: bool,
    pub windows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyFamily {
    pub enabled: bool,
    pub windows: Vec<usize>,
    pub num_chunks: usize,
    pub focus_chunks: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FracDiffFamily {
    pub enabled: bool,
    pub d: f64,
    pub cutoff: f64,
    /// Longest kernel kept; bounds the warm-up (and therefore the purge gap).
    pub max_width: usize,
}

impl Default for KamaFamily {
    fn default() -> Self {
        Self {
            enabled: true,
            params: vec![
                KamaParams::default(),
                KamaParams {
                    er_window: 20,
                    fast: 2,
                    slow: 30,
                },
            ],
        }
    }
}

impl WindowFamily {
    fn on(windows: &[usize]) -> Self {
        Self {
            enabled: true,
            windows: windows.to_vec(),
        }
    }

    fn active(&self) -> &[usize] {
        if self.enabled {
            &self.windows
        } else {
            &[]
        }
    }
}

impl Default for EnergyFamily {
    fn default() -> Self {
        Self {
            enabled: true,
            windows: vec![21],
            num_chunks: 4,
            focus_chunks: vec![0, 3],
        }
    }
}

impl Default for FracDiffFamily {
    fn default() -> Self {
        Self {
            enabled: true,
            d: 0.4,
            cutoff: 1e-4,
            max_width: 63,
        }
    }
}

/// Enabled feature families and their windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub kama: KamaFamily,
    pub momentum: WindowFamily,
    pub volatility: WindowFamily,
    pub energy_ratio: EnergyFamily,
    pub autocorrelation: WindowFamily,
    pub trend_slope: WindowFamily,
    pub fracdiff: FracDiffFamily,
}

/// Columns produced by [`FeatureConfig::default`].
pub const DEFAULT_CATALOG_COLUMNS: usize = 21;

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            kama: KamaFamily::default(),
            momentum: WindowFamily::on(&[5, 10, 21]),
            volatility: WindowFamily::on(&[10, 21]),
            energy_ratio: EnergyFamily::default(),
            autocorrelation: WindowFamily::on(&[21]),
            trend_slope: WindowFamily::on(&[10, 21]),
            fracdiff: FracDiffFamily::default(),
        }
    }
}

impl FeatureConfig {
    /// Every family disabled.
    pub fn none() -> Self {
        Self {
            kama: KamaFamily {
                enabled: false,
                params: Vec::new(),
            },
            momentum: WindowFamily::default(),
            volatility: WindowFamily::default(),
            energy_ratio: EnergyFamily {
                enabled: false,
                ..Default::default()
            },
            autocorrelation: WindowFamily::default(),
            trend_slope: WindowFamily::default(),
            fracdiff: FracDiffFamily {
                enabled: false,
                ..Default::default()
            },
        }
    }

    pub fn with_momentum(mut self, windows: &[usize]) -> Self {
        self.momentum = WindowFamily::on(windows);
        self
    }

    /// Column names in emission order, before constant-column removal.
    pub fn column_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.kama.enabled {
            for p in &self.kama.params {
                names.push(format!("kama_dist_{}_{}_{}", p.er_window, p.fast, p.slow));
                names.push(format!("kama_er_{}_{}_{}", p.er_window, p.fast, p.slow));
            }
        }
        for w in self.momentum.active() {
            names.push(format!("roc_{w}"));
            names.push(format!("rsi_{w}"));
            names.push(format!("zdist_{w}"));
        }
        for w in self.volatility.active() {
            names.push(format!("vol_{w}"));
        }
        if self.energy_ratio.enabled {
            for w in &self.energy_ratio.windows {
                for f in &self.energy_ratio.focus_chunks {
                    names.push(format!("energy_{w}_{}_{f}", self.energy_ratio.num_chunks));
                }
            }
        }
        for w in self.autocorrelation.active() {
            names.push(format!("autocorr_{w}"));
        }
        for w in self.trend_slope.active() {
            names.push(format!("slope_{w}"));
        }
        if self.fracdiff.enabled {
            names.push(format!("fracdiff_{}", self.fracdiff.d));
        }
        names
    }

    fn validate(&self) -> Result<()> {
        if self.column_names().is_empty() {
            return Err(Error::Config("feature config enables no columns".into()));
        }
        let windows = self
            .momentum
            .active()
            .iter()
            .chain(self.volatility.active())
            .chain(self.autocorrelation.active())
            .chain(self.trend_slope.active());
        if windows.clone().any(|&w| w == 0) {
            return Err(Error::Config("feature windows must be >= 1".into()));
        }
        if self.energy_ratio.enabled {
            let e = &self.energy_ratio;
            if e.num_chunks == 0 || e.focus_chunks.iter().any(|&f| f >= e.num_chunks) {
                return Err(Error::Config(
                    "energy ratio focus chunk out of range".into(),
                ));
            }
            if e.windows.iter().any(|&w| w < e.num_chunks) {
                return Err(Error::Config(
                    "energy ratio window shorter than chunk count".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Compute every configured column over the whole series (NaN during each column's warm-up).
pub fn compute_columns(
    prices: &PriceSeries,
    config: &FeatureConfig,
) -> Result<Vec<(String, Vec<f64>)>> {
    config.validate()?;
    let c = &prices.close;
    let mut cols: Vec<Vec<f64>> = Vec::new();
    if config.kama.enabled {
        for p in &config.kama.params {
            let k = kama(c, p.er_window, p.fast, p.slow)?;
            cols.push(c.iter().zip(&k).map(|(c, k)| c / k - 1.0).collect());
            cols.push(efficiency_ratio(c, p.er_window));
        }
    }
    for &w in config.momentum.active() {
        cols.push(rate_of_change(c, w));
        cols.push(rsi(c, w));
        cols.push(zscore_distance(c, w));
    }
    for &w in config.volatility.active() {
        cols.push(rolling_volatility(c, w));
    }
    if config.energy_ratio.enabled {
        let e = &config.energy_ratio;
        for &w in &e.windows {
            for &f in &e.focus_chunks {
                cols.push(rolling_energy_ratio(c, w, e.num_chunks, f));
            }
        }
    }
    for &w in config.autocorrelation.active() {
        cols.push(rolling_autocorrelation(c, w));
    }
    for &w in config.trend_slope.active() {
        cols.push(rolling_trend_slope(c, w));
    }
    if config.fracdiff.enabled {
        let f = &config.fracdiff;
        let logs: Vec<f64> = c.iter().map(|v| v.ln()).collect();
        cols.push(frac_diff_capped(&logs, f.d, f.cutoff, f.max_width)?.values);
    }
    Ok(config.column_names().into_iter().zip(cols).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub asset_id: String,
    pub dates: Vec<NaiveDate>,
    pub feature_names: Vec<String>,
    /// Row-major, one row per date. Warm-up rows may contain NaN.
    pub values: Vec<Vec<f64>>,
    /// Rows `0..max_lag` are warm-up and never used for training.
    pub max_lag: usize,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.values.len()
    }

    pub fn n_cols(&self) -> usize {
        self.feature_names.len()
    }

    pub fn is_warmup(&self, row: usize) -> bool {
        row < self.max_lag
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[j]).collect()
    }

    /// Keep only the named columns, in the given order.
    pub fn project(&self, names: &[String]) -> Result<FeatureMatrix> {
        let idx: Vec<usize> = names
            .iter()
            .map(|n| {
                self.feature_names
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| {
                        Error::Shape(format!("{}: no feature column `{n}`", self.asset_id))
                    })
            })
            .collect::<Result<_>>()?;
        Ok(FeatureMatrix {
            asset_id: self.asset_id.clone(),
            dates: self.dates.clone(),
            feature_names: names.to_vec(),
            values: self
                .values
                .iter()
                .map(|r| idx.iter().map(|&j| r[j]).collect())
                .collect(),
            max_lag: self.max_lag,
        })
    }
}

/// Build the feature matrix, dropping columns that are constant after the warm-up.
pub fn build_feature_matrix(prices: &PriceSeries, config: &FeatureConfig) -> Result<FeatureMatrix> {
    let cols = compute_columns(prices, config)?;
    let n = prices.len();
    let max_lag = cols
        .iter()
        .map(|(_, v)| v.iter().position(|x| x.is_finite()).unwrap_or(n))
        .max()
        .unwrap_or(0);
    if max_lag >= n {
        return Err(Error::InsufficientData(format!(
            "{}: {n} bars do not cover the feature warm-up",
            prices.asset_id
        )));
    }
    let kept: Vec<(String, Vec<f64>)> = cols
        .into_iter()
        .filter(|(_, v)| {
            let live = &v[max_lag..];
            live.iter().any(|x| *x != live[0])
        })
        .collect();
    let values = (0..n)
        .map(|t| kept.iter().map(|(_, v)| v[t]).collect())
        .collect();
    Ok(FeatureMatrix {
        asset_id: prices.asset_id.clone(),
        dates: prices.dates.clone(),
        feature_names: kept.into_iter().map(|(name, _)| name).collect(),
        values,
        max_lag,
    })
}

/// Column z-scoring with statistics taken from training rows only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for row in rows {
            if sum.is_empty() {
                sum = vec![0.0; row.len()];
                sq = vec![0.0; row.len()];
            }
            for (j, v) in row.iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::InsufficientData(
                "no rows to fit standardizer".into(),
            ));
        }
        let nf = n as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
        let scale = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let sd = (q / nf - m * m).max(0.0).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn transform(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.scale))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}
