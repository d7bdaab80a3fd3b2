//! Gaussian hidden Markov model on daily returns, used as a benchmark that
//! predicts tomorrow's state by continuation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backtest::{Position, SignalMode};
use crate::error::{Error, Result};
use crate::forest::{from_versioned_json, to_versioned_json};
use crate::markov::{self, EmTrace, GaussianChain};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmModel {
    pub n_states: usize,
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    /// Sorted ascending.
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
    pub log_likelihood: f64,
    pub trace: EmTrace,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HmmConfig {
    pub n_states: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// States whose mean return is within this band of zero give no position.
    pub dead_band: f64,
    pub mode: SignalMode,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self {
            n_states: 3,
            max_iter: 300,
            tol: 1e-8,
            dead_band: 0.0,
            mode: SignalMode::Conventional,
        }
    }
}

const FORMAT: &str = "kmrf-hmm";
const FORMAT_VERSION: u32 = 1;

impl HmmModel {
    fn chain(&self) -> GaussianChain {
        GaussianChain {
            initial: self.initial.clone(),
            transition: self.transition.clone(),
            means: self.means.clone(),
            variances: self.variances.clone(),
        }
    }

    fn from_chain(c: GaussianChain, trace: EmTrace) -> Self {
        let k = c.n_states();
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| c.means[a].total_cmp(&c.means[b]));
        HmmModel {
            n_states: k,
            initial: order.iter().map(|&i| c.initial[i]).collect(),
            transition: order
                .iter()
                .map(|&i| order.iter().map(|&j| c.transition[i][j]).collect())
                .collect(),
            means: order.iter().map(|&i| c.means[i]).collect(),
            variances: order.iter().map(|&i| c.variances[i]).collect(),
            log_likelihood: trace.log_likelihoods.last().copied().unwrap_or(f64::NAN),
            trace,
        }
    }

    /// Filtered state probabilities for every prefix of `returns`.
    pub fn filter(&self, returns: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(markov::filter(&self.chain(), returns)?.filtered)
    }

    /// One-step-ahead state distribution from filtered probabilities.
    pub fn predict_next(&self, filtered: &[f64]) -> Vec<f64> {
        (0..self.n_states)
            .map(|j| {
                (0..self.n_states)
                    .map(|i| filtered[i] * self.transition[i][j])
                    .sum()
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        to_versioned_json(FORMAT, FORMAT_VERSION, self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        from_versioned_json(FORMAT, FORMAT_VERSION, s)
    }
}

/// Baum-Welch from a seeded start: means at jittered quantiles of the data,
/// common variance, persistent diagonal. States are returned sorted by mean.
pub fn fit_hmm(
    returns: &[f64],
    n_states: usize,
    max_iter: usize,
    tol: f64,
    seed: u64,
) -> Result<HmmModel> {
    if returns.len() < 100 {
        return Err(Error::InsufficientData(format!(
            "HMM needs at least 100 returns, got {}",
            returns.len()
        )));
    }
    if !(1..=4).contains(&n_states) {
        return Err(Error::Config(format!(
            "n_states must be 1..=4, got {n_states}"
        )));
    }
    markov::check_finite(returns)?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var =
        (returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).max(markov::VARIANCE_FLOOR);
    if n_states == 1 {
        let chain = GaussianChain {
            initial: vec![1.0],
            transition: vec![vec![1.0]],
            means: vec![mean],
            variances: vec![var],
        };
        let ll = markov::filter(&chain, returns)?.log_likelihood;
        let trace = EmTrace {
            converged: true,
            iterations: 0,
            log_likelihoods: vec![ll],
            variance_floor_hits: 0,
        };
        return Ok(HmmModel::from_chain(chain, trace));
    }

    let mut sorted = returns.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sd = var.sqrt();
    let means: Vec<f64> = (0..n_states)
        .map(|k| {
            let q = sorted
                [((k as f64 + 0.5) / n_states as f64 * (sorted.len() - 1) as f64).round() as usize];
            let z: f64 = StandardNormal.sample(&mut rng);
            q + 0.05 * sd * z
        })
        .collect();
    let stay = 0.9;
    let off = (1.0 - stay) / (n_states - 1) as f64;
    let init = GaussianChain {
        initial: vec![1.0 / n_states as f64; n_states],
        transition: (0..n_states)
            .map(|i| {
                (0..n_states)
                    .map(|j| if i == j { stay } else { off })
                    .collect()
            })
            .collect(),
        means,
        variances: vec![var; n_states],
    };
    let (chain, trace) = markov::em(returns, init, max_iter, tol)?;
    Ok(HmmModel::from_chain(chain, trace))
}

/// Position for the day after the last observed return: the most likely next state
/// under the filtered distribution decides the side.
pub fn hmm_signal(
    model: &HmmModel,
    returns_to_date: &[f64],
    dead_band: f64,
    mode: SignalMode,
) -> Result<Position> {
    let filtered = model.filter(returns_to_date)?;
    let last = filtered
        .last()
        .ok_or_else(|| Error::InsufficientData("no returns for HMM signal".into()))?;
    Ok(signal_from_filtered(model, last, dead_band, mode))
}

/// `hmm_signal` for every prefix of `returns`, computed in one filtering pass.
pub fn hmm_signals(
    model: &HmmModel,
    returns: &[f64],
    dead_band: f64,
    mode: SignalMode,
) -> Result<Vec<Position>> {
    Ok(model
        .filter(returns)?
        .iter()
        .map(|f| signal_from_filtered(model, f, dead_band, mode))
        .collect())
}

fn signal_from_filtered(
    model: &HmmModel,
    filtered: &[f64],
    dead_band: f64,
    mode: SignalMode,
) -> Position {
    let next = model.predict_next(filtered);
    let mut best = 0;
    for k in 1..next.len() {
        if next[k] > next[best] {
            best = k;
        }
    }
    let m = model.means[best];
    let conventional = if m.abs() <= dead_band {
        Position::Flat
    } else if m > 0.0 {
        Position::Long
    } else {
        Position::Short
    };
    match mode {
        SignalMode::Conventional => conventional,
        SignalMode::Contrarian => conventional.flipped(),
    }
}
