//! Synthetic markets with planted regimes.
//!
//! Each asset's log price is a slow trend level, whose drift switches between a
//! bull and a bear value, plus a mean-reverting deviation whose shock volatility
//! switches between a low and a high state. Runs that the labeller marks bullish
//! therefore tend to be overextended and revert, which is the setting where fading
//! a predicted regime pays and following a detected one arrives late.

use chrono::{Datelike, Days, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::regime::{Trend, VarianceState};
use crate::timeseries::PriceSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantedConfig {
    pub n_assets: usize,
    pub n_days: usize,
    pub start: NaiveDate,
    /// AR(1) coefficient of the log deviation from trend.
    pub reversion: f64,
    /// Daily shock sd in the low- and high-variance states.
    pub shock_sd: [f64; 2],
    pub variance_persistence: f64,
    /// Daily trend drift in the bull and bear states.
    pub drift: [f64; 2],
    pub trend_persistence: f64,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            n_assets: 3,
            n_days: 2000,
            start: NaiveDate::from_ymd_opt(2012, 1, 2).expect("valid date"),
            reversion: 0.9,
            shock_sd: [0.007, 0.018],
            variance_persistence: 0.985,
            drift: [0.0006, -0.0004],
            trend_persistence: 0.99,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedAsset {
    pub prices: PriceSeries,
    pub variance_state: Vec<VarianceState>,
    pub trend_state: Vec<Trend>,
    /// Log deviation from the trend level.
    pub deviation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantedUniverse {
    pub assets: Vec<PlantedAsset>,
    /// Equal-weight index of the assets, rebased to 100.
    pub benchmark: PriceSeries,
}

/// Weekdays starting at `start` (or the next weekday).
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

pub fn planted_universe(config: &PlantedConfig, seed: u64) -> Result<PlantedUniverse> {
    let dates = business_days(config.start, config.n_days);
    let mut assets = Vec::with_capacity(config.n_assets);
    for a in 0..config.n_assets {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(a as u64);
        assets.push(planted_asset(
            config,
            &dates,
            &format!("asset_{}", (b'a' + a as u8) as char),
            &mut rng,
        )?);
    }
    let n = config.n_days;
    let index: Vec<f64> = (0..n)
        .map(|t| {
            100.0
                * assets
                    .iter()
                    .map(|x| x.prices.close[t] / x.prices.close[0])
                    .sum::<f64>()
                / assets.len() as f64
        })
        .collect();
    let benchmark = PriceSeries::from_closes("benchmark", dates, index)?;
    Ok(PlantedUniverse { assets, benchmark })
}

fn planted_asset(
    config: &PlantedConfig,
    dates: &[NaiveDate],
    id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<PlantedAsset> {
    let n = dates.len();
    let gauss = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut vol = if rng.random_range(0.0..1.0) < 0.5 {
        VarianceState::Lv
    } else {
        VarianceState::Hv
    };
    let mut trend = if rng.random_range(0.0..1.0) < 0.5 {
        Trend::Bullish
    } else {
        Trend::Bearish
    };
    let mut level = 100f64.ln() + rng.random_range(-0.5..0.5);
    let mut dev = 0.0;
    let mut close = Vec::with_capacity(n);
    let (mut open, mut high, mut low, mut volume) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let (mut vs, mut ts, mut ds) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    for t in 0..n {
        if t > 0 {
            if rng.random_range(0.0..1.0) > config.variance_persistence {
                vol = match vol {
                    VarianceState::Lv => VarianceState::Hv,
                    VarianceState::Hv => VarianceState::Lv,
                };
            }
            if rng.random_range(0.0..1.0) > config.trend_persistence {
                trend = match trend {
                    Trend::Bullish => Trend::Bearish,
                    Trend::Bearish => Trend::Bullish,
                };
            }
        }
        let sd = config.shock_sd[matches!(vol, VarianceState::Hv) as usize];
        level += config.drift[matches!(trend, Trend::Bearish) as usize];
        dev = config.reversion * dev + sd * gauss(rng);
        let c = (level + dev).exp();
        let prev = close.last().copied().unwrap_or(c);
        let o = prev * (1.0 + 0.25 * sd * gauss(rng));
        let wiggle = sd * gauss(rng).abs();
        high.push(o.max(c) * (1.0 + wiggle));
        low.push(o.min(c) * (1.0 - wiggle));
        open.push(o);
        close.push(c);
        volume.push(
            (1e6 * (1.0 + 30.0 * sd) * (1.0 + 0.2 * gauss(rng)))
                .max(1.0)
                .round(),
        );
        vs.push(vol);
        ts.push(trend);
        ds.push(dev);
    }
    Ok(PlantedAsset {
        prices: PriceSeries::new(id, dates.to_vec(), open, high, low, close, volume)?,
        variance_state: vs,
        trend_state: ts,
        deviation: ds,
    })
}
