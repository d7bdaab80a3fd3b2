//! Four-state KAMA + Markov-switching regime detection and the three-class training targets.
//!
//! Variance regimes come from a two-state Gaussian Markov-switching model on daily
//! returns (state 0 = low variance, 1 = high variance). Trend comes from the close
//! crossing a KAMA band. Their product gives four states, which are folded into
//! Bullish / Bearish / Other targets:
//!
//! * Bullish: an LV-bull run, extended into a directly following HV-bull run up to
//!   that run's highest close.
//! * Bearish: an HV-bear run, extended into a directly following LV-bear run up to
//!   that run's lowest close.
//! * Other: everything else, plus any Bullish/Bearish run whose start-to-end move
//!   does not beat the round-trip trading cost.

use std::fmt;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{kama, KamaParams};
use crate::markov::{self, EmTrace, GaussianChain};
use crate::timeseries::{close_to_close, PriceSeries};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Bullish,
    Bearish,
    Other,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Bullish, Label::Bearish, Label::Other];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Label {
        Label::ALL[i]
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Bullish => "bullish",
            Label::Bearish => "bearish",
            Label::Other => "other",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceState {
    Lv,
    Hv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trend {
    Bullish,
    Bearish,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FourState {
    LvBull,
    LvBear,
    HvBull,
    HvBear,
}

impl FourState {
    pub fn combine(v: VarianceState, t: Trend) -> FourState {
        match (v, t) {
            (VarianceState::Lv, Trend::Bullish) => FourState::LvBull,
            (VarianceState::Lv, Trend::Bearish) => FourState::LvBear,
            (VarianceState::Hv, Trend::Bullish) => FourState::HvBull,
            (VarianceState::Hv, Trend::Bearish) => FourState::HvBear,
        }
    }

    pub fn split(self) -> (VarianceState, Trend) {
        match self {
            FourState::LvBull => (VarianceState::Lv, Trend::Bullish),
            FourState::LvBear => (VarianceState::Lv, Trend::Bearish),
            FourState::HvBull => (VarianceState::Hv, Trend::Bullish),
            FourState::HvBear => (VarianceState::Hv, Trend::Bearish),
        }
    }
}

impl fmt::Display for FourState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FourState::LvBull => "lv_bull",
            FourState::LvBear => "lv_bear",
            FourState::HvBull => "hv_bull",
            FourState::HvBear => "hv_bear",
        })
    }
}

/// Two-state Markov-switching model with state-dependent Gaussian returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsrModel {
    /// `transition[i][j]` = P(next = j | current = i); 0 = LV, 1 = HV.
    pub transition: [[f64; 2]; 2],
    pub initial: [f64; 2],
    pub mu: [f64; 2],
    pub sigma2: [f64; 2],
    pub log_likelihood: f64,
    pub trace: EmTrace,
}

impl MsrModel {
    pub fn new(
        transition: [[f64; 2]; 2],
        initial: [f64; 2],
        mu: [f64; 2],
        sigma2: [f64; 2],
    ) -> Result<Self> {
        let m = MsrModel {
            transition,
            initial,
            mu,
            sigma2,
            log_likelihood: f64::NAN,
            trace: EmTrace {
                converged: false,
                iterations: 0,
                log_likelihoods: Vec::new(),
                variance_floor_hits: 0,
            },
        };
        m.chain().validate()?;
        Ok(m)
    }

    pub fn converged(&self) -> bool {
        self.trace.converged
    }

    fn chain(&self) -> GaussianChain {
        GaussianChain {
            initial: self.initial.to_vec(),
            transition: self.transition.iter().map(|r| r.to_vec()).collect(),
            means: self.mu.to_vec(),
            variances: self.sigma2.to_vec(),
        }
    }

    fn from_chain(c: &GaussianChain, trace: EmTrace) -> Self {
        let mut m = MsrModel {
            transition: [
                [c.transition[0][0], c.transition[0][1]],
                [c.transition[1][0], c.transition[1][1]],
            ],
            initial: [c.initial[0], c.initial[1]],
            mu: [c.means[0], c.means[1]],
            sigma2: [c.variances[0], c.variances[1]],
            log_likelihood: trace.log_likelihoods.last().copied().unwrap_or(f64::NAN),
            trace,
        };
        if m.sigma2[0] > m.sigma2[1] {
            m.transition = [
                [m.transition[1][1], m.transition[1][0]],
                [m.transition[0][1], m.transition[0][0]],
            ];
            m.initial.swap(0, 1);
            m.mu.swap(0, 1);
            m.sigma2.swap(0, 1);
        }
        m
    }

    /// Deterministic starting point: two-group 1-D k-means on |r| sets the variances,
    /// persistence 0.95 on the diagonal.
    pub fn initial_guess(returns: &[f64]) -> Result<MsrModel> {
        if returns.len() < 2 {
            return Err(Error::InsufficientData(
                "need returns to initialise MSR".into(),
            ));
        }
        let abs: Vec<f64> = returns.iter().map(|r| r.abs()).collect();
        let mut sorted = abs.clone();
        sorted.sort_by(f64::total_cmp);
        let mut cut = sorted[sorted.len() / 2];
        for _ in 0..50 {
            let (lo, hi): (Vec<f64>, Vec<f64>) = abs.iter().partition(|a| **a <= cut);
            if lo.is_empty() || hi.is_empty() {
                break;
            }
            let c_lo = lo.iter().sum::<f64>() / lo.len() as f64;
            let c_hi = hi.iter().sum::<f64>() / hi.len() as f64;
            let next = 0.5 * (c_lo + c_hi);
            if next == cut {
                break;
            }
            cut = next;
        }
        let group = |high: bool| -> Vec<f64> {
            returns
                .iter()
                .zip(&abs)
                .filter(|(_, a)| (**a > cut) == high)
                .map(|(r, _)| *r)
                .collect()
        };
        let stats = |g: &[f64]| -> (f64, f64) {
            if g.is_empty() {
                return (0.0, markov::VARIANCE_FLOOR);
            }
            let m = g.iter().sum::<f64>() / g.len() as f64;
            let v = g.iter().map(|x| (x - m).powi(2)).sum::<f64>() / g.len() as f64;
            (m, v.max(markov::VARIANCE_FLOOR))
        };
        let (m_lo, v_lo) = stats(&group(false));
        let (m_hi, v_hi) = stats(&group(true));
        MsrModel::new(
            [[0.95, 0.05], [0.05, 0.95]],
            [0.5, 0.5],
            [m_lo, m_hi],
            [v_lo, v_hi.max(v_lo * (1.0 + 1e-9))],
        )
    }
}

/// Filtered state probabilities and the log-likelihood (sum of predictive log densities).
pub fn hamilton_filter(returns: &[f64], model: &MsrModel) -> Result<(Vec<[f64; 2]>, f64)> {
    if returns.is_empty() {
        return Err(Error::InsufficientData("empty return series".into()));
    }
    let out = markov::filter(&model.chain(), returns)?;
    Ok((
        out.filtered.iter().map(|p| [p[0], p[1]]).collect(),
        out.log_likelihood,
    ))
}

/// Full-sample smoothed state probabilities.
pub fn smoothed_probabilities(returns: &[f64], model: &MsrModel) -> Result<Vec<[f64; 2]>> {
    if returns.is_empty() {
        return Err(Error::InsufficientData("empty return series".into()));
    }
    let post = markov::posterior(&model.chain(), returns)?;
    Ok(post.smoothed.iter().map(|p| [p[0], p[1]]).collect())
}

pub fn fit_msr(returns: &[f64], max_iter: usize, tol: f64) -> Result<MsrModel> {
    let init = MsrModel::initial_guess(returns)?;
    fit_msr_from(returns, &init, max_iter, tol)
}

/// EM from an explicit starting model. The result is relabelled so that state 0 has the lower variance.
pub fn fit_msr_from(
    returns: &[f64],
    init: &MsrModel,
    max_iter: usize,
    tol: f64,
) -> Result<MsrModel> {
    if returns.len() < 50 {
        return Err(Error::InsufficientData(format!(
            "MSR needs at least 50 returns, got {}",
            returns.len()
        )));
    }
    if max_iter == 0 {
        return Err(Error::Config("max_iter must be >= 1".into()));
    }
    let (chain, trace) = markov::em(returns, init.chain(), max_iter, tol)?;
    Ok(MsrModel::from_chain(&chain, trace))
}

/// Trend state from the close crossing `KAMA * (1 +/- band)`. Inside the band the
/// previous state persists; days before the first crossing are `None`.
pub fn kama_trend(closes: &[f64], params: KamaParams, band: f64) -> Result<Vec<Option<Trend>>> {
    if !(band >= 0.0) {
        return Err(Error::Domain(format!(
            "hysteresis band {band} must be >= 0"
        )));
    }
    let k = kama(closes, params.er_window, params.fast, params.slow)?;
    let mut state = None;
    Ok(closes
        .iter()
        .zip(&k)
        .map(|(&c, &m)| {
            if m.is_finite() {
                if c > m * (1.0 + band) {
                    state = Some(Trend::Bullish);
                } else if c < m * (1.0 - band) {
                    state = Some(Trend::Bearish);
                }
            }
            state
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSegmentation {
    pub dates: Vec<NaiveDate>,
    pub variance_state: Vec<VarianceState>,
    pub trend_state: Vec<Trend>,
    pub four_state: Vec<FourState>,
    pub target_label: Vec<Label>,
}

impl RegimeSegmentation {
    /// Target labels start as `Other`; fill them with [`generate_labels`].
    pub fn from_states(
        dates: Vec<NaiveDate>,
        variance: Vec<VarianceState>,
        trend: Vec<Trend>,
    ) -> Result<Self> {
        if variance.len() != dates.len() || trend.len() != dates.len() {
            return Err(Error::Shape("segmentation arrays differ in length".into()));
        }
        let four_state = variance
            .iter()
            .zip(&trend)
            .map(|(v, t)| FourState::combine(*v, *t))
            .collect();
        Ok(Self {
            target_label: vec![Label::Other; dates.len()],
            dates,
            variance_state: variance,
            trend_state: trend,
            four_state,
        })
    }

    pub fn from_four_states(dates: Vec<NaiveDate>, four: &[FourState]) -> Result<Self> {
        let (v, t) = four.iter().map(|s| s.split()).unzip();
        Self::from_states(dates, v, t)
    }

    /// A segmentation whose four states regenerate `labels` exactly: Bullish days
    /// become LV-bull, Bearish days HV-bear, and Other runs take a state that
    /// cannot extend their predecessor.
    pub fn from_labels(dates: Vec<NaiveDate>, labels: &[Label]) -> Result<Self> {
        let mut four = Vec::with_capacity(labels.len());
        let mut filler = FourState::LvBear;
        for &l in labels {
            four.push(match l {
                Label::Bullish => {
                    filler = FourState::LvBear;
                    FourState::LvBull
                }
                Label::Bearish => {
                    filler = FourState::HvBull;
                    FourState::HvBear
                }
                Label::Other => filler,
            });
        }
        let mut seg = Self::from_four_states(dates, &four)?;
        seg.target_label = labels.to_vec();
        Ok(seg)
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["date", "four_state", "target_label"])?;
        for i in 0..self.len() {
            w.write_record([
                self.dates[i].to_string(),
                self.four_state[i].to_string(),
                self.target_label[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Maximal runs `(start, end_inclusive)` of equal values.
pub(crate) fn runs<T: PartialEq>(xs: &[T]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=xs.len() {
        if i == xs.len() || xs[i] != xs[start] {
            if i > start {
                out.push((start, i - 1));
            }
            start = i;
        }
    }
    out
}

/// Derive Bullish / Bearish / Other targets from the four-state path.
///
/// Cost filtering is per episode, where an episode is a maximal run of one label;
/// a run whose `|close[end] / close[start] - 1|` is at most `roundtrip_cost` becomes Other.
pub fn generate_labels(
    seg: &RegimeSegmentation,
    prices: &PriceSeries,
    roundtrip_cost: f64,
) -> Result<Vec<Label>> {
    if seg.dates != prices.dates {
        return Err(Error::Alignment(
            "segmentation and prices cover different dates".into(),
        ));
    }
    let close = &prices.close;
    let mut labels = vec![Label::Other; seg.len()];
    let segments = runs(&seg.four_state);
    for (k, &(start, end)) in segments.iter().enumerate() {
        let next = segments.get(k + 1).copied();
        match seg.four_state[start] {
            FourState::LvBull => {
                labels[start..=end].fill(Label::Bullish);
                if let Some((ns, ne)) =
                    next.filter(|(ns, _)| seg.four_state[*ns] == FourState::HvBull)
                {
                    let peak =
                        (ns..=ne).fold(ns, |best, i| if close[i] > close[best] { i } else { best });
                    labels[ns..=peak].fill(Label::Bullish);
                }
            }
            FourState::HvBear => {
                labels[start..=end].fill(Label::Bearish);
                if let Some((ns, ne)) =
                    next.filter(|(ns, _)| seg.four_state[*ns] == FourState::LvBear)
                {
                    let trough =
                        (ns..=ne).fold(ns, |best, i| if close[i] < close[best] { i } else { best });
                    labels[ns..=trough].fill(Label::Bearish);
                }
            }
            FourState::HvBull | FourState::LvBear => {}
        }
    }
    for (start, end) in runs(&labels) {
        if labels[start] != Label::Other
            && (close[end] / close[start] - 1.0).abs() <= roundtrip_cost
        {
            labels[start..=end].fill(Label::Other);
        }
    }
    Ok(labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegimeConfig {
    pub kama: KamaParams,
    /// Fractional hysteresis band around KAMA.
    pub band: f64,
    pub msr_max_iter: usize,
    pub msr_tol: f64,
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            kama: KamaParams::default(),
            band: 0.001,
            msr_max_iter: 500,
            msr_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Labeling {
    pub segmentation: RegimeSegmentation,
    pub msr: MsrModel,
}

/// In-sample labelling: smoothed MSR probabilities thresholded at 0.5 and KAMA trend
/// (days before the first crossing take the first crossing's state).
pub fn label_regimes(
    prices: &PriceSeries,
    config: &RegimeConfig,
    roundtrip_cost: f64,
) -> Result<Labeling> {
    let returns = close_to_close(&prices.close);
    let msr = fit_msr(&returns, config.msr_max_iter, config.msr_tol)?;
    let smoothed = smoothed_probabilities(&returns, &msr)?;
    let mut variance: Vec<VarianceState> = smoothed.iter().map(|p| hv_if(p[1])).collect();
    variance.insert(0, variance[0]);

    let trend =
        backfill(kama_trend(&prices.close, config.kama, config.band)?).ok_or_else(|| {
            Error::InsufficientData(format!(
                "{}: close never crosses the KAMA band",
                prices.asset_id
            ))
        })?;
    let mut segmentation = RegimeSegmentation::from_states(prices.dates.clone(), variance, trend)?;
    segmentation.target_label = generate_labels(&segmentation, prices, roundtrip_cost)?;
    Ok(Labeling { segmentation, msr })
}

fn hv_if(p_hv: f64) -> VarianceState {
    if p_hv >= 0.5 {
        VarianceState::Hv
    } else {
        VarianceState::Lv
    }
}

fn backfill(states: Vec<Option<Trend>>) -> Option<Vec<Trend>> {
    let first = states.iter().flatten().next().copied()?;
    Some(states.into_iter().map(|s| s.unwrap_or(first)).collect())
}

/// Causal four-state detection with a fitted model: filtered (not smoothed)
/// probabilities and the KAMA trend up to each day. `None` until both are known.
pub fn detect_states(
    prices: &PriceSeries,
    msr: &MsrModel,
    config: &RegimeConfig,
) -> Result<Vec<Option<FourState>>> {
    let returns = close_to_close(&prices.close);
    let (filtered, _) = hamilton_filter(&returns, msr)?;
    let trend = kama_trend(&prices.close, config.kama, config.band)?;
    Ok((0..prices.len())
        .map(|t| {
            let v = if t == 0 {
                None
            } else {
                Some(hv_if(filtered[t - 1][1]))
            };
            Some(FourState::combine(v?, trend[t]?))
        })
        .collect())
}
