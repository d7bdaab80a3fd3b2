//! Log-space forward/backward recursions and EM for chains with Gaussian emissions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub(crate) const VARIANCE_FLOOR: f64 = 1e-12;

/// Convergence record of an EM fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmTrace {
    pub converged: bool,
    pub iterations: usize,
    /// Log-likelihood of every parameter set evaluated, in order.
    pub log_likelihoods: Vec<f64>,
    /// Number of times a state variance hit the floor.
    pub variance_floor_hits: usize,
}

pub(crate) fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

pub(crate) fn logsumexp(xs: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct GaussianChain {
    pub initial: Vec<f64>,
    pub transition: Vec<Vec<f64>>,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl GaussianChain {
    pub fn n_states(&self) -> usize {
        self.means.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_states();
        let bad = |m: &str| Err(Error::Domain(m.to_string()));
        if k == 0
            || self.initial.len() != k
            || self.variances.len() != k
            || self.transition.len() != k
        {
            return bad("chain parameter lengths disagree");
        }
        let stochastic = |row: &[f64]| {
            row.len() == k
                && row.iter().all(|p| (0.0..=1.0).contains(p))
                && (row.iter().sum::<f64>() - 1.0).abs() < 1e-10
        };
        if !stochastic(&self.initial) || !self.transition.iter().all(|r| stochastic(r)) {
            return bad("initial distribution and transition rows must be stochastic");
        }
        if !self.variances.iter().all(|v| *v > 0.0 && v.is_finite())
            || !self.means.iter().all(|m| m.is_finite())
        {
            return bad("state variances must be positive and finite");
        }
        Ok(())
    }

    fn log_emissions(&self, y: &[f64]) -> Vec<Vec<f64>> {
        y.iter()
            .map(|&x| {
                (0..self.n_states())
                    .map(|s| log_normal_pdf(x, self.means[s], self.variances[s]))
                    .collect()
            })
            .collect()
    }

    fn log_transition(&self) -> Vec<Vec<f64>> {
        self.transition
            .iter()
            .map(|r| r.iter().map(|p| p.ln()).collect())
            .collect()
    }
}

pub(crate) struct FilterOutput {
    /// P(state_t | y_0..=t), one vector per step.
    pub filtered: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

pub(crate) fn check_finite(y: &[f64]) -> Result<()> {
    if let Some(t) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite observation at index {t}"
        )));
    }
    Ok(())
}

/// Normalised forward recursion; the log-likelihood accumulates per-step predictive log densities.
pub(crate) fn filter(chain: &GaussianChain, y: &[f64]) -> Result<FilterOutput> {
    check_finite(y)?;
    let k = chain.n_states();
    let log_a = chain.log_transition();
    let log_b = chain.log_emissions(y);
    let mut filtered = Vec::with_capacity(y.len());
    let mut ll = 0.0;
    let mut log_prev: Vec<f64> = Vec::new();
    for t in 0..y.len() {
        let log_pred: Vec<f64> = if t == 0 {
            chain.initial.iter().map(|p| p.ln()).collect()
        } else {
            (0..k)
                .map(|j| logsumexp((0..k).map(|i| log_prev[i] + log_a[i][j])))
                .collect()
        };
        let joint: Vec<f64> = (0..k).map(|j| log_pred[j] + log_b[t][j]).collect();
        let step = logsumexp(joint.iter().copied());
        if !step.is_finite() {
            return Err(Error::Numerical(format!(
                "zero predictive density at step {t}"
            )));
        }
        ll += step;
        log_prev = joint.iter().map(|v| v - step).collect();
        filtered.push(log_prev.iter().map(|v| v.exp()).collect());
    }
    Ok(FilterOutput {
        filtered,
        log_likelihood: ll,
    })
}

pub(crate) struct Posterior {
    /// P(state_t | all observations).
    pub smoothed: Vec<Vec<f64>>,
    /// Sum over t of P(state_t = i, state_{t+1} = j | all observations).
    pub transitions: Vec<Vec<f64>>,
    pub log_likelihood: f64,
}

pub(crate) fn posterior(chain: &GaussianChain, y: &[f64]) -> Result<Posterior> {
    check_finite(y)?;
    let n = y.len();
    let k = chain.n_states();
    let log_a = chain.log_transition();
    let log_b = chain.log_emissions(y);

    let mut alpha = vec![vec![0.0; k]; n];
    for j in 0..k {
        alpha[0][j] = chain.initial[j].ln() + log_b[0][j];
    }
    for t in 1..n {
        for j in 0..k {
            alpha[t][j] = log_b[t][j] + logsumexp((0..k).map(|i| alpha[t - 1][i] + log_a[i][j]));
        }
    }
    let ll = logsumexp(alpha[n - 1].iter().copied());
    if !ll.is_finite() {
        return Err(Error::Numerical(
            "observation sequence has zero likelihood".into(),
        ));
    }

    let mut beta = vec![vec![0.0; k]; n];
    for t in (0..n - 1).rev() {
        for i in 0..k {
            beta[t][i] = logsumexp((0..k).map(|j| log_a[i][j] + log_b[t + 1][j] + beta[t + 1][j]));
        }
    }

    let smoothed = (0..n)
        .map(|t| {
            let row: Vec<f64> = (0..k).map(|i| alpha[t][i] + beta[t][i]).collect();
            let norm = logsumexp(row.iter().copied());
            row.iter().map(|v| (v - norm).exp()).collect()
        })
        .collect();

    let mut transitions = vec![vec![0.0; k]; k];
    for t in 0..n.saturating_sub(1) {
        for i in 0..k {
            for j in 0..k {
                let lx = alpha[t][i] + log_a[i][j] + log_b[t + 1][j] + beta[t + 1][j] - ll;
                transitions[i][j] += lx.exp();
            }
        }
    }
    Ok(Posterior {
        smoothed,
        transitions,
        log_likelihood: ll,
    })
}

fn m_step(
    y: &[f64],
    post: &Posterior,
    prev: &GaussianChain,
    floor_hits: &mut usize,
) -> GaussianChain {
    let k = prev.n_states();
    let mut means = vec![0.0; k];
    let mut variances = vec![0.0; k];
    for s in 0..k {
        let w: f64 = post.smoothed.iter().map(|g| g[s]).sum();
        if w <= 0.0 {
            means[s] = prev.means[s];
            variances[s] = prev.variances[s];
            continue;
        }
        let mean = y
            .iter()
            .zip(&post.smoothed)
            .map(|(x, g)| g[s] * x)
            .sum::<f64>()
            / w;
        let mut var = y
            .iter()
            .zip(&post.smoothed)
            .map(|(x, g)| g[s] * (x - mean).powi(2))
            .sum::<f64>()
            / w;
        if !(var >= VARIANCE_FLOOR) {
            log::warn!("state {s} variance {var:e} floored at {VARIANCE_FLOOR:e}");
            *floor_hits += 1;
            var = VARIANCE_FLOOR;
        }
        means[s] = mean;
        variances[s] = var;
    }
    let transition = (0..k)
        .map(|i| {
            let total: f64 = post.transitions[i].iter().sum();
            if total > 0.0 {
                post.transitions[i].iter().map(|x| x / total).collect()
            } else {
                prev.transition[i].clone()
            }
        })
        .collect();
    let g0 = &post.smoothed[0];
    let s0: f64 = g0.iter().sum();
    GaussianChain {
        initial: g0.iter().map(|g| g / s0).collect(),
        transition,
        means,
        variances,
    }
}

/// Baum-Welch. Stops when the log-likelihood gain drops below `tol`.
pub(crate) fn em(
    y: &[f64],
    init: GaussianChain,
    max_iter: usize,
    tol: f64,
) -> Result<(GaussianChain, EmTrace)> {
    init.validate()?;
    let mut chain = init;
    let mut trace = EmTrace {
        converged: false,
        iterations: 0,
        log_likelihoods: Vec::new(),
        variance_floor_hits: 0,
    };
    let mut post = posterior(&chain, y)?;
    trace.log_likelihoods.push(post.log_likelihood);
    for _ in 0..max_iter {
        let next = m_step(y, &post, &chain, &mut trace.variance_floor_hits);
        let next_post = posterior(&next, y)?;
        trace.iterations += 1;
        trace.log_likelihoods.push(next_post.log_likelihood);
        let gain = next_post.log_likelihood - post.log_likelihood;
        chain = next;
        post = next_post;
        if gain < tol {
            trace.converged = true;
            break;
        }
    }
    Ok((chain, trace))
}
