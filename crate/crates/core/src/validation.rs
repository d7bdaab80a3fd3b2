//! Purged group time-series splits, shadow-feature selection and random
//! hyperparameter search with a replayable trial log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::error::{Error, Result};
use crate::forest::{
    accuracy, fisher_yates, fit_forest_with, permutation_importance, ForestHyperparams,
    ForestModel, ForestOptions,
};
use crate::matrix::Matrix;
use crate::regime::Label;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    /// Day indices, ascending.
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub n_days: usize,
    pub n_folds: usize,
    pub group_days: usize,
    pub purge_gap: usize,
    /// Group id of every day.
    pub group_of_day: Vec<usize>,
    pub folds: Vec<Fold>,
}

/// Expanding-window folds over contiguous groups of `group_days` days. The groups
/// are split into `n_folds + 1` equal blocks (leftover groups join the first
/// training block); fold `k` validates on block `k + 1` and trains on everything
/// before it except the `purge_gap` days adjacent to the validation block.
pub fn make_splits(
    dates: &[NaiveDate],
    n_folds: usize,
    group_days: usize,
    purge_gap: usize,
) -> Result<SplitPlan> {
    if dates.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "split dates must be strictly increasing".into(),
        ));
    }
    make_splits_for(dates.len(), n_folds, group_days, purge_gap)
}

pub fn make_splits_for(
    n_days: usize,
    n_folds: usize,
    group_days: usize,
    purge_gap: usize,
) -> Result<SplitPlan> {
    if n_folds == 0 {
        return Err(Error::Config("n_folds must be >= 1".into()));
    }
    if group_days == 0 {
        return Err(Error::Config("group_days must be >= 1".into()));
    }
    let n_groups = n_days.div_ceil(group_days);
    let per_fold = n_groups / (n_folds + 1);
    if per_fold == 0 {
        return Err(Error::Config(format!(
            "{n_days} days make {n_groups} groups of {group_days}; need at least n_folds + 1 = {} groups",
            n_folds + 1
        )));
    }
    let first_val_group = n_groups - n_folds * per_fold;
    let group_start = |g: usize| (g * group_days).min(n_days);
    let mut folds = Vec::with_capacity(n_folds);
    for k in 0..n_folds {
        let v0 = group_start(first_val_group + k * per_fold);
        let v1 = group_start(first_val_group + (k + 1) * per_fold);
        if v0 <= purge_gap {
            return Err(Error::Config(format!(
                "purge_gap {purge_gap} removes all {v0} training days of fold {k}"
            )));
        }
        if v1 <= v0 {
            return Err(Error::Config(format!(
                "fold {k} has an empty validation block"
            )));
        }
        folds.push(Fold {
            train: (0..v0 - purge_gap).collect(),
            validation: (v0..v1).collect(),
        });
    }
    Ok(SplitPlan {
        n_days,
        n_folds,
        group_days,
        purge_gap,
        group_of_day: (0..n_days).map(|d| d / group_days).collect(),
        folds,
    })
}

impl SplitPlan {
    pub fn check_invariants(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Leakage(m));
        for (k, f) in self.folds.iter().enumerate() {
            let (Some(&tmax), Some(&vmin)) = (f.train.last(), f.validation.first()) else {
                return fail(format!("fold {k} is empty"));
            };
            if tmax + self.purge_gap >= vmin {
                return fail(format!(
                    "fold {k}: last train day {tmax} + purge {} reaches validation day {vmin}",
                    self.purge_gap
                ));
            }
            let val_groups: Vec<usize> =
                f.validation.iter().map(|&d| self.group_of_day[d]).collect();
            if f.train
                .iter()
                .any(|&d| val_groups.contains(&self.group_of_day[d]))
            {
                return fail(format!(
                    "fold {k}: a group appears in both train and validation"
                ));
            }
            if k > 0
                && !self.folds[k - 1]
                    .train
                    .iter()
                    .all(|d| f.train.binary_search(d).is_ok())
            {
                return fail(format!(
                    "fold {k}: training set does not contain fold {}'s",
                    k - 1
                ));
            }
        }
        Ok(())
    }

    /// Rows (of a pooled matrix whose row `i` is observed on day `row_day[i]`) in fold `k`.
    pub fn fold_rows(&self, k: usize, row_day: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let f = &self.folds[k];
        let (t_end, v0, v1) = (
            f.train.last().map_or(0, |d| d + 1),
            f.validation[0],
            f.validation[f.validation.len() - 1] + 1,
        );
        let train = (0..row_day.len()).filter(|&i| row_day[i] < t_end).collect();
        let val = (0..row_day.len())
            .filter(|&i| (v0..v1).contains(&row_day[i]))
            .collect();
        (train, val)
    }
}

/// Fit on fold `k`'s training rows only.
pub fn fit_fold(
    plan: &SplitPlan,
    k: usize,
    x: &Matrix,
    y: &[Label],
    row_day: &[usize],
    names: &[String],
    hp: &ForestHyperparams,
    seed: u64,
    options: &ForestOptions,
) -> Result<ForestModel> {
    let (train, _) = plan.fold_rows(k, row_day);
    let xt = x.select_rows(&train);
    let yt: Vec<Label> = train.iter().map(|&i| y[i]).collect();
    fit_forest_with(&xt, &yt, hp, seed, names, options)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accepted,
    Rejected,
    Undecided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVerdict {
    pub feature: String,
    pub hits: usize,
    pub p_value: f64,
    /// Importance averaged over trials and folds.
    pub mean_importance: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub n_trials: usize,
    pub verdicts: Vec<FeatureVerdict>,
}

impl Selection {
    /// Accepted and undecided features, in input order.
    pub fn kept(&self) -> Vec<String> {
        self.verdicts
            .iter()
            .filter(|v| v.decision != Decision::Rejected)
            .map(|v| v.feature.clone())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub n_trials: usize,
    pub alpha: f64,
    pub importance_repeats: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        Self {
            n_trials: 30,
            alpha: 0.05,
            importance_repeats: 1,
        }
    }
}

/// Two-sided binomial test of `hits` successes in `n` trials against p = 1/2.
pub fn binomial_two_sided(hits: usize, n: usize) -> f64 {
    let b = Binomial::new(0.5, n as u64).expect("valid binomial");
    let lower = b.cdf(hits as u64);
    let upper = if hits == 0 {
        1.0
    } else {
        b.sf(hits as u64 - 1)
    };
    (2.0 * lower.min(upper)).min(1.0)
}

/// Shadow-feature selection. Each trial appends a shuffled copy of every column,
/// fits on each fold's training rows, and measures permutation importance on the
/// fold's validation rows. A real column scores a hit when its fold-averaged
/// importance beats the best shadow column.
pub fn select_features(
    x: &Matrix,
    y: &[Label],
    names: &[String],
    plan: &SplitPlan,
    row_day: &[usize],
    base_hp: &ForestHyperparams,
    config: &SelectionConfig,
    seed: u64,
) -> Result<Selection> {
    if config.n_trials < 10 {
        return Err(Error::Config(
            "feature selection needs at least 10 trials".into(),
        ));
    }
    if x.n_rows() != y.len() || x.n_rows() != row_day.len() || names.len() != x.n_cols() {
        return Err(Error::Shape("selection inputs disagree in size".into()));
    }
    let f = x.n_cols();
    let mut all_names = names.to_vec();
    all_names.extend(names.iter().map(|n| format!("shadow_{n}")));
    let mut hits = vec![0usize; f];
    let mut total_importance = vec![0.0; f];
    let options = ForestOptions {
        check_ranges: false,
        ..Default::default()
    };
    for trial in 0..config.n_trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(trial as u64);
        let shadows: Vec<Vec<f64>> = (0..f)
            .map(|j| {
                let mut c = x.column(j);
                fisher_yates(&mut c, &mut rng);
                c
            })
            .collect();
        let xs = x.hstack(&shadows)?;
        let mut importance = vec![0.0; 2 * f];
        for k in 0..plan.n_folds {
            let fit_seed = seed ^ ((trial as u64) << 32) ^ k as u64;
            let model = fit_fold(
                plan, k, &xs, y, row_day, &all_names, base_hp, fit_seed, &options,
            )?;
            let (_, val) = plan.fold_rows(k, row_day);
            let xv = xs.select_rows(&val);
            let yv: Vec<Label> = val.iter().map(|&i| y[i]).collect();
            let imp = permutation_importance(
                &model,
                &xv,
                &yv,
                accuracy,
                config.importance_repeats,
                fit_seed,
            )?;
            for (acc, v) in importance.iter_mut().zip(&imp) {
                *acc += v.mean / plan.n_folds as f64;
            }
        }
        let shadow_max = importance[f..]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        for j in 0..f {
            total_importance[j] += importance[j];
            if importance[j] > shadow_max {
                hits[j] += 1;
            }
        }
    }
    let n = config.n_trials;
    let verdicts: Vec<FeatureVerdict> = (0..f)
        .map(|j| {
            let p = binomial_two_sided(hits[j], n);
            let decision = if p < config.alpha && 2 * hits[j] > n {
                Decision::Accepted
            } else if p < config.alpha && 2 * hits[j] < n {
                Decision::Rejected
            } else {
                Decision::Undecided
            };
            FeatureVerdict {
                feature: names[j].clone(),
                hits: hits[j],
                p_value: p,
                mean_importance: total_importance[j] / n as f64,
                decision,
            }
        })
        .collect();
    if verdicts.iter().all(|v| v.decision == Decision::Rejected) {
        return Err(Error::Config(
            "every feature was rejected; revise the feature configuration".into(),
        ));
    }
    Ok(Selection {
        n_trials: n,
        verdicts,
    })
}

/// Inclusive search ranges for the seven forest hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub n_estimators: (usize, usize),
    pub max_depth: (usize, usize),
    pub min_samples_split: (usize, usize),
    pub min_samples_leaf: (usize, usize),
    pub max_samples: (f64, f64),
    pub min_weight_fraction_leaf: (f64, f64),
    pub max_features: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            n_estimators: (10, 300),
            max_depth: (1, 20),
            min_samples_split: (1, 100),
            min_samples_leaf: (1, 100),
            max_samples: (0.1, 1.0),
            min_weight_fraction_leaf: (0.0, 0.05),
            max_features: (0.2, 1.0),
        }
    }
}

impl SearchSpace {
    /// Both corners must be valid hyperparameters, so every sample is too.
    pub fn validate(&self) -> Result<()> {
        let ordered = self.n_estimators.0 <= self.n_estimators.1
            && self.max_depth.0 <= self.max_depth.1
            && self.min_samples_split.0 <= self.min_samples_split.1
            && self.min_samples_leaf.0 <= self.min_samples_leaf.1
            && self.max_samples.0 <= self.max_samples.1
            && self.min_weight_fraction_leaf.0 <= self.min_weight_fraction_leaf.1
            && self.max_features.0 <= self.max_features.1;
        if !ordered {
            return Err(Error::Config(
                "search range lower bound exceeds upper bound".into(),
            ));
        }
        self.corner(false).validate()?;
        self.corner(true).validate()
    }

    fn corner(&self, upper: bool) -> ForestHyperparams {
        let p = |r: (usize, usize)| if upper { r.1 } else { r.0 };
        let q = |r: (f64, f64)| if upper { r.1 } else { r.0 };
        ForestHyperparams {
            n_estimators: p(self.n_estimators),
            max_depth: p(self.max_depth),
            min_samples_split: p(self.min_samples_split),
            min_samples_leaf: p(self.min_samples_leaf),
            max_samples: q(self.max_samples),
            min_weight_fraction_leaf: q(self.min_weight_fraction_leaf),
            max_features: q(self.max_features),
        }
    }

    pub fn contains(&self, hp: &ForestHyperparams) -> bool {
        let within = |v: usize, r: (usize, usize)| (r.0..=r.1).contains(&v);
        let within_f = |v: f64, r: (f64, f64)| (r.0..=r.1).contains(&v);
        within(hp.n_estimators, self.n_estimators)
            && within(hp.max_depth, self.max_depth)
            && within(hp.min_samples_split, self.min_samples_split)
            && within(hp.min_samples_leaf, self.min_samples_leaf)
            && within_f(hp.max_samples, self.max_samples)
            && within_f(hp.min_weight_fraction_leaf, self.min_weight_fraction_leaf)
            && within_f(hp.max_features, self.max_features)
    }
}

pub trait Sampler {
    fn sample(&self, trial_id: usize) -> ForestHyperparams;
}

/// Uniform over each range; trial `i` always draws the same point for a given seed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomSampler {
    pub space: SearchSpace,
    pub seed: u64,
}

impl Sampler for RandomSampler {
    fn sample(&self, trial_id: usize) -> ForestHyperparams {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(trial_id as u64);
        let s = &self.space;
        let mut int = |r: (usize, usize)| rng.random_range(r.0..=r.1);
        let (a, b, c, d) = (
            int(s.n_estimators),
            int(s.max_depth),
            int(s.min_samples_split),
            int(s.min_samples_leaf),
        );
        let mut real = |r: (f64, f64)| {
            if r.0 == r.1 {
                r.0
            } else {
                rng.random_range(r.0..=r.1)
            }
        };
        ForestHyperparams {
            n_estimators: a,
            max_depth: b,
            min_samples_split: c,
            min_samples_leaf: d,
            max_samples: real(s.max_samples),
            min_weight_fraction_leaf: real(s.min_weight_fraction_leaf),
            max_features: real(s.max_features),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Loose,
    Rigorous,
}

impl Phase {
    pub fn default_trials(self) -> usize {
        match self {
            Phase::Loose => 30,
            Phase::Rigorous => 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub phase: Phase,
    pub params: ForestHyperparams,
    pub fold_scores: Vec<f64>,
    /// Arithmetic mean of `fold_scores`; absent for failed trials.
    pub mean_score: Option<f64>,
    pub status: TrialStatus,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Append-only NDJSON store of trial records. Reopening a log replays its
/// records, so an interrupted search resumes without re-running trials.
#[derive(Debug)]
pub struct TrialLog {
    path: Option<PathBuf>,
    records: BTreeMap<(Phase, usize), TrialRecord>,
}

impl TrialLog {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            records: BTreeMap::new(),
        }
    }

    /// Open (or create) a log file. Lines that are not trial records, such as a
    /// header, are skipped.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut records = BTreeMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(&path)?).lines() {
                let line = line?;
                if let Ok(r) = serde_json::from_str::<TrialRecord>(&line) {
                    records.insert((r.phase, r.trial_id), r);
                }
            }
        }
        Ok(Self {
            path: Some(path),
            records,
        })
    }

    pub fn write_header<T: Serialize>(&self, header: &T) -> Result<()> {
        if let Some(p) = &self.path {
            if !p.exists() || std::fs::metadata(p)?.len() == 0 {
                let mut f = OpenOptions::new().create(true).append(true).open(p)?;
                writeln!(f, "{}", serde_json::to_string(header)?)?;
            }
        }
        Ok(())
    }

    pub fn get(&self, phase: Phase, trial_id: usize) -> Option<&TrialRecord> {
        self.records.get(&(phase, trial_id))
    }

    pub fn append(&mut self, record: TrialRecord) -> Result<()> {
        if let Some(p) = &self.path {
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            writeln!(f, "{}", serde_json::to_string(&record)?)?;
        }
        self.records.insert((record.phase, record.trial_id), record);
        Ok(())
    }

    pub fn records(&self, phase: Phase) -> Vec<&TrialRecord> {
        self.records.values().filter(|r| r.phase == phase).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub best: TrialRecord,
    pub trials: Vec<TrialRecord>,
}

/// Random search. `objective` returns one validation score per fold; a failing
/// objective marks the trial failed and the search continues. The best trial is
/// the highest mean score, earliest trial on ties.
pub fn tune<S, F>(
    sampler: &S,
    objective: F,
    n_trials: usize,
    phase: Phase,
    log: &mut TrialLog,
) -> Result<TuneOutcome>
where
    S: Sampler + ?Sized,
    F: Fn(&ForestHyperparams) -> Result<Vec<f64>>,
{
    if n_trials == 0 {
        return Err(Error::Config("n_trials must be >= 1".into()));
    }
    let mut trials = Vec::with_capacity(n_trials);
    for trial_id in 0..n_trials {
        let params = sampler.sample(trial_id);
        if let Some(r) = log.get(phase, trial_id) {
            if r.params == params {
                trials.push(r.clone());
                continue;
            }
            return Err(Error::Config(format!(
                "trial log entry {trial_id} ({phase:?}) was sampled with different settings"
            )));
        }
        let record = match objective(&params) {
            Ok(scores) if !scores.is_empty() && scores.iter().all(|s| s.is_finite()) => {
                TrialRecord {
                    trial_id,
                    phase,
                    params,
                    mean_score: Some(scores.iter().sum::<f64>() / scores.len() as f64),
                    fold_scores: scores,
                    status: TrialStatus::Complete,
                    error: None,
                }
            }
            Ok(scores) => TrialRecord {
                trial_id,
                phase,
                params,
                fold_scores: scores,
                mean_score: None,
                status: TrialStatus::Failed,
                error: Some("non-finite fold score".into()),
            },
            Err(e) => {
                log::warn!("trial {trial_id} failed: {e}");
                TrialRecord {
                    trial_id,
                    phase,
                    params,
                    fold_scores: Vec::new(),
                    mean_score: None,
                    status: TrialStatus::Failed,
                    error: Some(e.to_string()),
                }
            }
        };
        log.append(record.clone())?;
        trials.push(record);
    }
    let mut best: Option<&TrialRecord> = None;
    for t in &trials {
        if let Some(s) = t.mean_score {
            if best.is_none_or(|b| s > b.mean_score.expect("complete")) {
                best = Some(t);
            }
        }
    }
    let best = best
        .cloned()
        .ok_or_else(|| Error::Numerical(format!("all {n_trials} {phase:?} trials failed")))?;
    Ok(TuneOutcome { best, trials })
}
