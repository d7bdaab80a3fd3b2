//! End-to-end runs: ingest, features, labels, two-phase tuning with feature
//! selection, final fit, test-span prediction, backtests against the HMM and
//! detection-only baselines, and report artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backtest::{
    apply_execution_lag, benchmark_curve, cumulative_performance, decide_class, decide_positions,
    portfolio_returns, position_for, write_trades_csv, AssetBook, AssetClass, BacktestResult,
    CostSchedule, Position, SignalMode, DEFAULT_EXECUTION_LAG,
};
use crate::error::{Error, Result};
use crate::features::{compute_columns, FeatureConfig};
use crate::forest::{fit_forest, ForestHyperparams, ForestModel};
use crate::hmm::{fit_hmm, hmm_signals, HmmConfig};
use crate::matrix::Matrix;
use crate::metrics::{
    significance_test, sortino, Dispersion, MetricBlock, MetricFlag, SignificanceResult,
};
use crate::regime::{detect_states, label_regimes, FourState, Label, Labeling, RegimeConfig};
use crate::synthetic::PlantedUniverse;
use crate::timeseries::{align_inner, close_to_close, load_ohlcv, LoadOptions, PriceSeries};
use crate::validation::{
    make_splits, select_features, tune, Phase, RandomSampler, SearchSpace, Selection,
    SelectionConfig, SplitPlan, TrialLog, TrialRecord, TrialStatus, TuneOutcome,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetEntry {
    pub path: PathBuf,
    #[serde(default = "default_class")]
    pub class: AssetClass,
}

fn default_class() -> AssetClass {
    AssetClass::Equities
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkEntry {
    pub path: PathBuf,
}

/// Replacement cost schedules per asset class; absent classes use the defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostOverrides {
    pub equities: Option<CostSchedule>,
    pub commodities: Option<CostSchedule>,
    pub fx: Option<CostSchedule>,
}

impl CostOverrides {
    pub fn schedule(&self, class: AssetClass) -> CostSchedule {
        let o = match class {
            AssetClass::Equities => self.equities,
            AssetClass::Commodities => self.commodities,
            AssetClass::Fx => self.fx,
        };
        o.unwrap_or_else(|| CostSchedule::for_class(class))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub n_folds: usize,
    pub group_days: usize,
    /// Defaults to the feature warm-up length.
    pub purge_gap: Option<usize>,
    /// Trailing share of dates held out for testing.
    pub test_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            n_folds: 4,
            group_days: 21,
            purge_gap: None,
            test_fraction: 0.15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub loose_trials: usize,
    pub rigorous_trials: usize,
    pub space: SearchSpace,
    pub selection: SelectionConfig,
    /// Forest used inside feature selection; defaults to the loose-phase winner.
    pub selection_hp: Option<ForestHyperparams>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            loose_trials: Phase::Loose.default_trials(),
            rigorous_trials: Phase::Rigorous.default_trials(),
            space: SearchSpace::default(),
            selection: SelectionConfig::default(),
            selection_hp: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BacktestConfig {
    /// Interpretation of the forest's predictions.
    pub mode: SignalMode,
    /// Interpretation used by the detection-only baseline.
    pub detection_mode: SignalMode,
    /// Minimum probability of the argmax class; below it the position is flat.
    pub threshold: f64,
    pub execution_lag: usize,
    /// Days before each entry over which the trade-log move into the entry is measured.
    pub entry_lookback: usize,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            mode: SignalMode::Contrarian,
            detection_mode: SignalMode::Conventional,
            threshold: 0.5,
            execution_lag: DEFAULT_EXECUTION_LAG,
            entry_lookback: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub dispersion: Dispersion,
    pub block_len: usize,
    pub n_boot: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            dispersion: Dispersion::Population,
            block_len: 10,
            n_boot: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub assets: Vec<AssetEntry>,
    pub benchmark: Option<BenchmarkEntry>,
    pub loading: LoadOptions,
    pub costs: CostOverrides,
    pub features: FeatureConfig,
    pub regime: RegimeConfig,
    pub split: SplitConfig,
    pub search: SearchConfig,
    pub backtest: BacktestConfig,
    pub hmm: HmmConfig,
    pub metrics: MetricsConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            assets: Vec::new(),
            benchmark: None,
            loading: LoadOptions::default(),
            costs: CostOverrides::default(),
            features: FeatureConfig::default(),
            regime: RegimeConfig::default(),
            split: SplitConfig::default(),
            search: SearchConfig::default(),
            backtest: BacktestConfig::default(),
            hmm: HmmConfig::default(),
            metrics: MetricsConfig::default(),
            seed: 42,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PipelineConfig {
    /// Parse a TOML file. Relative paths are resolved against the file's directory.
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg: PipelineConfig = toml::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for a in &mut cfg.assets {
            a.path = base.join(&a.path);
        }
        if let Some(b) = &mut cfg.benchmark {
            b.path = base.join(&b.path);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.split.test_fraction > 0.0 && self.split.test_fraction < 1.0) {
            return bad("test_fraction must lie strictly between 0 and 1");
        }
        if !(0.0..=1.0).contains(&self.backtest.threshold) {
            return bad("decision threshold must lie in [0, 1]");
        }
        if self.backtest.entry_lookback == 0 {
            return bad("entry_lookback must be at least one day");
        }
        if self.search.loose_trials == 0 || self.search.rigorous_trials == 0 {
            return bad("each tuning phase needs at least one trial");
        }
        for class in [
            AssetClass::Equities,
            AssetClass::Commodities,
            AssetClass::Fx,
        ] {
            self.costs.schedule(class).validate()?;
        }
        self.search.space.validate()?;
        if let Some(hp) = &self.search.selection_hp {
            hp.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the configuration, output directory excluded.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(&c)?)))
    }
}

/// Stage seeds derived from the master seed.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let h = Sha256::digest(format!("{master}:{stage}").as_bytes());
    u64::from_le_bytes(h[..8].try_into().expect("8 bytes"))
}

const SEED_STAGES: [&str; 6] = [
    "loose",
    "selection",
    "rigorous",
    "final",
    "hmm",
    "significance",
];

fn seed_table(master: u64) -> BTreeMap<String, u64> {
    let mut m: BTreeMap<String, u64> = SEED_STAGES
        .iter()
        .map(|s| (s.to_string(), derive_seed(master, s)))
        .collect();
    m.insert("master".into(), master);
    m
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniverseAsset {
    pub prices: PriceSeries,
    pub class: AssetClass,
}

/// The assets of one run plus the benchmark index.
#[derive(Debug, Clone, PartialEq)]
pub struct Universe {
    pub assets: Vec<UniverseAsset>,
    pub benchmark: PriceSeries,
}

impl Universe {
    pub fn load(config: &PipelineConfig) -> Result<Self> {
        if config.assets.is_empty() {
            return Err(Error::Config("config lists no assets".into()));
        }
        let bench = config
            .benchmark
            .as_ref()
            .ok_or_else(|| Error::Config("config needs exactly one benchmark".into()))?;
        let assets = config
            .assets
            .iter()
            .map(|a| {
                Ok(UniverseAsset {
                    prices: load_ohlcv(&a.path, &config.loading)?,
                    class: a.class,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            assets,
            benchmark: load_ohlcv(&bench.path, &config.loading)?,
        })
    }

    pub fn from_planted(p: &PlantedUniverse, class: AssetClass) -> Self {
        Self {
            assets: p
                .assets
                .iter()
                .map(|a| UniverseAsset {
                    prices: a.prices.clone(),
                    class,
                })
                .collect(),
            benchmark: p.benchmark.clone(),
        }
    }

    /// Restrict everything to the common calendar.
    fn aligned(&self) -> Result<Universe> {
        let mut ids: Vec<&str> = self
            .assets
            .iter()
            .map(|a| a.prices.asset_id.as_str())
            .collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("asset ids must be unique".into()));
        }
        let mut all: Vec<PriceSeries> = self.assets.iter().map(|a| a.prices.clone()).collect();
        all.push(self.benchmark.clone());
        let mut aligned = align_inner(&all)?;
        let benchmark = aligned.pop().expect("benchmark present");
        Ok(Universe {
            assets: aligned
                .into_iter()
                .zip(&self.assets)
                .map(|(prices, a)| UniverseAsset {
                    prices,
                    class: a.class,
                })
                .collect(),
            benchmark,
        })
    }
}

/// Read access to the first `limit` days. Training stages only ever hold a
/// limited token; the full token is issued once a final model exists.
struct DataAccess {
    limit: usize,
}

impl DataAccess {
    fn prices(&self, s: &PriceSeries) -> PriceSeries {
        s.slice(0..self.limit.min(s.len()))
    }

    fn require(&self, day: usize) -> Result<()> {
        if day >= self.limit {
            return Err(Error::Leakage(format!(
                "day {day} is outside the accessible span 0..{}",
                self.limit
            )));
        }
        Ok(())
    }

    fn unlock(&self, _final_model: &ForestModel, n_days: usize) -> DataAccess {
        DataAccess { limit: n_days }
    }
}

/// Everything derived from the training span.
struct Training {
    universe: Universe,
    access: DataAccess,
    n_days: usize,
    n_train: usize,
    costs: Vec<CostSchedule>,
    labelings: Vec<Labeling>,
    feature_names: Vec<String>,
    x: Matrix,
    y: Vec<Label>,
    row_day: Vec<usize>,
    row_asset: Vec<usize>,
    max_lag: usize,
    purge_gap: usize,
    plan: SplitPlan,
    /// Per asset, per day: close-to-close return (0 on day 0), training span only.
    returns: Vec<Vec<f64>>,
}

fn daily_returns(close: &[f64]) -> Vec<f64> {
    let mut r = close_to_close(close);
    r.insert(0, 0.0);
    r
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::stage(name, e))
}

fn prepare(config: &PipelineConfig, universe: &Universe) -> Result<Training> {
    config.validate()?;
    let universe = stage("ingest", universe.aligned())?;
    let n_days = universe.benchmark.len();
    let n_test = (config.split.test_fraction * n_days as f64).round() as usize;
    let n_train = n_days - n_test;
    if n_test == 0 || n_train < 250 {
        return Err(Error::stage(
            "ingest",
            Error::InsufficientData(format!(
                "{n_days} common days leave {n_train} training and {n_test} test days"
            )),
        ));
    }
    let access = DataAccess { limit: n_train };
    let views: Vec<PriceSeries> = universe
        .assets
        .iter()
        .map(|a| access.prices(&a.prices))
        .collect();
    let costs: Vec<CostSchedule> = universe
        .assets
        .iter()
        .map(|a| config.costs.schedule(a.class))
        .collect();

    let columns = stage(
        "features",
        views
            .iter()
            .map(|v| compute_columns(v, &config.features))
            .collect::<Result<Vec<_>>>(),
    )?;
    let max_lag = columns
        .iter()
        .flat_map(|cols| {
            cols.iter()
                .map(|(_, v)| v.iter().position(|x| x.is_finite()).unwrap_or(v.len()))
        })
        .max()
        .unwrap_or(0);

    let labelings = stage(
        "labels",
        views
            .iter()
            .zip(&costs)
            .map(|(v, c)| label_regimes(v, &config.regime, c.total_percent() / 100.0))
            .collect::<Result<Vec<_>>>(),
    )?;

    // Row for (day t, asset a) predicts the label of day t + 1.
    let all_names: Vec<String> = columns[0].iter().map(|(n, _)| n.clone()).collect();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let (mut y, mut row_day, mut row_asset) = (Vec::new(), Vec::new(), Vec::new());
    for t in max_lag..n_train.saturating_sub(1) {
        for (a, cols) in columns.iter().enumerate() {
            let row: Vec<f64> = cols.iter().map(|(_, v)| v[t]).collect();
            if row.iter().all(|v| v.is_finite()) {
                access.require(t + 1)?;
                rows.push(row);
                y.push(labelings[a].segmentation.target_label[t + 1]);
                row_day.push(t);
                row_asset.push(a);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::stage(
            "features",
            Error::InsufficientData("no complete feature rows in the training span".into()),
        ));
    }
    let live: Vec<usize> = (0..all_names.len())
        .filter(|&j| rows.iter().any(|r| r[j] != rows[0][j]))
        .collect();
    let x = Matrix::from_rows(&rows)?.select_cols(&live);
    let feature_names: Vec<String> = live.iter().map(|&j| all_names[j].clone()).collect();

    let purge_gap = config.split.purge_gap.unwrap_or(max_lag);
    let plan = stage(
        "splits",
        make_splits(
            &universe.benchmark.dates[..n_train],
            config.split.n_folds,
            config.split.group_days,
            purge_gap,
        ),
    )?;
    let returns = views.iter().map(|v| daily_returns(&v.close)).collect();
    Ok(Training {
        universe,
        access,
        n_days,
        n_train,
        costs,
        labelings,
        feature_names,
        x,
        y,
        row_day,
        row_asset,
        max_lag,
        purge_gap,
        plan,
        returns,
    })
}

impl Training {
    fn sub(&self, rows: &[usize], cols: &[usize]) -> Matrix {
        self.x.select_rows(rows).select_cols(cols)
    }

    /// Validation Sortino of the strategy per fold: fit on the fold's training
    /// rows, trade its validation block with out-of-fold predictions only.
    fn fold_scores(
        &self,
        cols: &[usize],
        hp: &ForestHyperparams,
        seed: u64,
        bt: &BacktestConfig,
    ) -> Result<Vec<f64>> {
        let names: Vec<String> = cols
            .iter()
            .map(|&j| self.feature_names[j].clone())
            .collect();
        let n_assets = self.universe.assets.len();
        let mut scores = Vec::with_capacity(self.plan.n_folds);
        for k in 0..self.plan.n_folds {
            let (train, val) = self.plan.fold_rows(k, &self.row_day);
            let yt: Vec<Label> = train.iter().map(|&i| self.y[i]).collect();
            let model = fit_forest(
                &self.sub(&train, cols),
                &yt,
                hp,
                seed.wrapping_add(k as u64),
                &names,
            )?;
            let probs = model.predict_proba_matrix(&self.sub(&val, cols))?;
            let fold = &self.plan.folds[k];
            let (v0, v1) = (
                fold.validation[0],
                fold.validation[fold.validation.len() - 1] + 1,
            );
            let mut decisions = vec![vec![Position::Flat; v1 - v0]; n_assets];
            let positions = decide_positions(&probs, bt.mode, bt.threshold)?;
            for (&i, p) in val.iter().zip(positions) {
                decisions[self.row_asset[i]][self.row_day[i] - v0] = p;
            }
            let dates = self.universe.benchmark.dates[v0..v1].to_vec();
            let books: Vec<AssetBook> = (0..n_assets)
                .map(|a| AssetBook {
                    asset_id: self.universe.assets[a].prices.asset_id.clone(),
                    dates: dates.clone(),
                    positions: apply_execution_lag(&decisions[a], bt.execution_lag),
                    returns: self.returns[a][v0..v1].to_vec(),
                    costs: self.costs[a],
                })
                .collect();
            let result = portfolio_returns(&books)?;
            let s = sortino(&result.net, 0.0)?;
            scores.push(match s.flag {
                Some(MetricFlag::Undefined) => 0.0,
                Some(MetricFlag::ZeroDownside) => {
                    return Err(Error::Numerical(format!(
                        "fold {k}: no losing day, Sortino unbounded"
                    )))
                }
                _ => s.value,
            });
        }
        Ok(scores)
    }

    fn tune_phase(
        &self,
        config: &PipelineConfig,
        cols: &[usize],
        phase: Phase,
        n_trials: usize,
        seed: u64,
        log: &mut TrialLog,
    ) -> Result<TuneOutcome> {
        let sampler = RandomSampler {
            space: config.search.space,
            seed,
        };
        tune(
            &sampler,
            |hp| self.fold_scores(cols, hp, seed, &config.backtest),
            n_trials,
            phase,
            log,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningSummary {
    pub loose_best: TrialRecord,
    pub rigorous_best: TrialRecord,
    pub loose_trials: usize,
    pub rigorous_trials: usize,
    pub failed_trials: usize,
}

struct Tuned {
    loose: TuneOutcome,
    selection: Selection,
    kept: Vec<usize>,
    rigorous: TuneOutcome,
}

fn run_tuning(config: &PipelineConfig, tr: &Training, log: &mut TrialLog) -> Result<Tuned> {
    let seeds = seed_table(config.seed);
    let all: Vec<usize> = (0..tr.feature_names.len()).collect();
    let loose = stage(
        "loose_tune",
        tr.tune_phase(
            config,
            &all,
            Phase::Loose,
            config.search.loose_trials,
            seeds["loose"],
            log,
        ),
    )?;
    let base = config.search.selection_hp.unwrap_or(loose.best.params);
    let selection = stage(
        "feature_selection",
        select_features(
            &tr.x,
            &tr.y,
            &tr.feature_names,
            &tr.plan,
            &tr.row_day,
            &base,
            &config.search.selection,
            seeds["selection"],
        ),
    )?;
    let kept_names = selection.kept();
    let kept: Vec<usize> = (0..tr.feature_names.len())
        .filter(|&j| kept_names.contains(&tr.feature_names[j]))
        .collect();
    let rigorous = stage(
        "rigorous_tune",
        tr.tune_phase(
            config,
            &kept,
            Phase::Rigorous,
            config.search.rigorous_trials,
            seeds["rigorous"],
            log,
        ),
    )?;
    Ok(Tuned {
        loose,
        selection,
        kept,
        rigorous,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub mode: SignalMode,
    pub metrics: MetricBlock,
    pub n_trades: usize,
    pub n_long_trades: usize,
    pub n_short_trades: usize,
    pub total_cost: f64,
    /// Q at the end of the test span (starting from 100).
    pub final_equity: f64,
    /// Mean side-signed move over the lookback window before entry.
    pub mean_pre_entry_move: Option<f64>,
    /// Mean compounded gross return per trade.
    pub mean_trade_gross_return: Option<f64>,
    pub significance_vs_zero: SignificanceResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spans {
    pub train_start: NaiveDate,
    pub train_end: NaiveDate,
    pub test_start: NaiveDate,
    pub test_end: NaiveDate,
    pub n_train_days: usize,
    pub n_test_days: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportAsset {
    pub id: String,
    pub class: AssetClass,
    pub two_way_cost_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub format_version: u32,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Model(s) this run trades: "kmrf", "hmm" or "detection".
    pub run: String,
    pub assets: Vec<ReportAsset>,
    pub benchmark: String,
    pub spans: Spans,
    pub feature_columns: Vec<String>,
    pub max_lag: usize,
    pub purge_gap: usize,
    pub selected_features: Option<Vec<String>>,
    pub tuning: Option<TuningSummary>,
    pub final_hyperparams: Option<ForestHyperparams>,
    pub models: BTreeMap<String, ModelSummary>,
    /// Block-bootstrap tests of the mean daily return difference, keyed "a_vs_b".
    pub comparisons: BTreeMap<String, SignificanceResult>,
    pub benchmark_final_level: f64,
}

pub const REPORT_VERSION: u32 = 1;

/// Report plus the daily series behind it.
#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub report: Report,
    pub backtests: BTreeMap<String, BacktestResult>,
    pub benchmark_returns: Vec<f64>,
    pub final_model: Option<ForestModel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineModel {
    Hmm,
    Detection,
}

impl BaselineModel {
    fn key(self) -> &'static str {
        match self {
            BaselineModel::Hmm => "hmm",
            BaselineModel::Detection => "detection",
        }
    }
}

/// Test-span context available after unlocking the full series.
struct TestSpan<'a> {
    tr: &'a Training,
    access: DataAccess,
    /// Ex-post labelling of the full series, used for MCC and regime onsets.
    expost: Vec<Labeling>,
}

impl<'a> TestSpan<'a> {
    fn open(config: &PipelineConfig, tr: &'a Training, access: DataAccess) -> Result<Self> {
        let expost = tr
            .universe
            .assets
            .iter()
            .zip(&tr.costs)
            .map(|(a, c)| {
                label_regimes(
                    &access.prices(&a.prices),
                    &config.regime,
                    c.total_percent() / 100.0,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { tr, access, expost })
    }

    fn span(&self) -> std::ops::Range<usize> {
        self.tr.n_train..self.tr.n_days
    }

    /// Trade decisions indexed by decision day; held `lag` days later.
    fn backtest(
        &self,
        decisions: &[Vec<Position>],
        lag: usize,
        lookback: usize,
    ) -> Result<BacktestResult> {
        let span = self.span();
        self.access.require(span.end - 1)?;
        let dates = self.tr.universe.benchmark.dates[span.clone()].to_vec();
        let books: Vec<AssetBook> = self
            .tr
            .universe
            .assets
            .iter()
            .enumerate()
            .map(|(a, asset)| {
                let held = apply_execution_lag(&decisions[a], lag);
                AssetBook {
                    asset_id: asset.prices.asset_id.clone(),
                    dates: dates.clone(),
                    positions: held[span.clone()].to_vec(),
                    returns: daily_returns(&asset.prices.close)[span.clone()].to_vec(),
                    costs: self.tr.costs[a],
                }
            })
            .collect();
        let mut result = portfolio_returns(&books)?;
        self.annotate_entries(&mut result, lookback);
        Ok(result)
    }

    /// Side-signed move over the `lookback` days ending at each entry fill. A
    /// positive value means the position was entered after the price had already
    /// moved its way.
    fn annotate_entries(&self, result: &mut BacktestResult, lookback: usize) {
        let index: BTreeMap<NaiveDate, usize> = self
            .tr
            .universe
            .benchmark
            .dates
            .iter()
            .enumerate()
            .map(|(i, d)| (*d, i))
            .collect();
        for trade in &mut result.trades {
            let Some(a) = self
                .tr
                .universe
                .assets
                .iter()
                .position(|x| x.prices.asset_id == trade.asset_id)
            else {
                continue;
            };
            let open = index[&trade.open_date];
            if open < lookback + 1 {
                continue;
            }
            let close = &self.tr.universe.assets[a].prices.close;
            trade.pre_entry_move =
                Some(trade.side.sign() * (close[open - 1] / close[open - 1 - lookback] - 1.0));
        }
    }

    fn benchmark_returns(&self) -> Vec<f64> {
        daily_returns(&self.tr.universe.benchmark.close)[self.span()].to_vec()
    }

    fn summarise(
        &self,
        config: &PipelineConfig,
        mode: SignalMode,
        result: &BacktestResult,
        labels: Option<(&[Label], &[Label])>,
    ) -> Result<ModelSummary> {
        let bench = self.benchmark_returns();
        let metrics =
            MetricBlock::compute(&result.net, Some(&bench), labels, config.metrics.dispersion)?;
        let equity = cumulative_performance(&result.net)?;
        let moves: Vec<f64> = result
            .trades
            .iter()
            .filter_map(|t| t.pre_entry_move)
            .collect();
        Ok(ModelSummary {
            mode,
            metrics,
            n_trades: result.trades.len(),
            n_long_trades: result
                .trades
                .iter()
                .filter(|t| t.side == Position::Long)
                .count(),
            n_short_trades: result
                .trades
                .iter()
                .filter(|t| t.side == Position::Short)
                .count(),
            total_cost: result.total_cost(),
            final_equity: equity.last().copied().unwrap_or(100.0),
            mean_pre_entry_move: (!moves.is_empty())
                .then(|| moves.iter().sum::<f64>() / moves.len() as f64),
            mean_trade_gross_return: (!result.trades.is_empty()).then(|| {
                result.trades.iter().map(|t| t.gross_return).sum::<f64>()
                    / result.trades.len() as f64
            }),
            significance_vs_zero: significance_test(
                &result.net,
                None,
                config.metrics.block_len,
                config.metrics.n_boot,
                derive_seed(config.seed, "significance"),
            )?,
        })
    }

    fn kmrf_decisions(
        &self,
        config: &PipelineConfig,
        model: &ForestModel,
        kept: &[String],
    ) -> Result<(Vec<Vec<Position>>, Vec<Vec<Option<Label>>>)> {
        let n = self.tr.n_days;
        let lag = config.backtest.execution_lag;
        let first = self.tr.n_train.saturating_sub(lag).max(self.tr.max_lag);
        let mut decisions = vec![vec![Position::Flat; n]; self.tr.universe.assets.len()];
        let mut classes = vec![vec![None; n]; self.tr.universe.assets.len()];
        for (a, asset) in self.tr.universe.assets.iter().enumerate() {
            let cols = compute_columns(&self.access.prices(&asset.prices), &config.features)?;
            let picked: Vec<&Vec<f64>> = kept
                .iter()
                .map(|k| {
                    &cols
                        .iter()
                        .find(|(n, _)| n == k)
                        .expect("kept feature is a configured column")
                        .1
                })
                .collect();
            let rows: Vec<Vec<f64>> = (first..n)
                .map(|t| picked.iter().map(|c| c[t]).collect())
                .collect();
            let probs = model.predict_proba_matrix(&Matrix::from_rows(&rows)?)?;
            for (i, p) in probs.iter().enumerate() {
                let class = decide_class(p, config.backtest.threshold);
                decisions[a][first + i] = position_for(class, config.backtest.mode);
                classes[a][first + i] = Some(class);
            }
        }
        Ok((decisions, classes))
    }

    fn hmm_decisions(
        &self,
        config: &PipelineConfig,
        mode: SignalMode,
    ) -> Result<Vec<Vec<Position>>> {
        let seed = derive_seed(config.seed, "hmm");
        self.tr
            .universe
            .assets
            .iter()
            .enumerate()
            .map(|(a, asset)| {
                let train_returns = close_to_close(&asset.prices.close[..self.tr.n_train]);
                let h = &config.hmm;
                let model = fit_hmm(
                    &train_returns,
                    h.n_states,
                    h.max_iter,
                    h.tol,
                    seed.wrapping_add(a as u64),
                )?;
                let full = close_to_close(&self.access.prices(&asset.prices).close);
                let signals = hmm_signals(&model, &full, h.dead_band, mode)?;
                // signals[i] uses returns through day i + 1.
                let mut d = vec![Position::Flat; self.tr.n_days];
                for (i, s) in signals.into_iter().enumerate() {
                    d[i + 1] = s;
                }
                Ok(d)
            })
            .collect()
    }

    fn detection_decisions(
        &self,
        config: &PipelineConfig,
        mode: SignalMode,
    ) -> Result<Vec<Vec<Position>>> {
        self.tr
            .universe
            .assets
            .iter()
            .enumerate()
            .map(|(a, asset)| {
                let states = detect_states(
                    &self.access.prices(&asset.prices),
                    &self.tr.labelings[a].msr,
                    &config.regime,
                )?;
                Ok(states
                    .into_iter()
                    .map(|s| {
                        let label = match s {
                            Some(FourState::LvBull) => Label::Bullish,
                            Some(FourState::HvBear) => Label::Bearish,
                            _ => Label::Other,
                        };
                        position_for(label, mode)
                    })
                    .collect())
            })
            .collect()
    }
}

fn spans(tr: &Training) -> Spans {
    let d = &tr.universe.benchmark.dates;
    Spans {
        train_start: d[0],
        train_end: d[tr.n_train - 1],
        test_start: d[tr.n_train],
        test_end: d[tr.n_days - 1],
        n_train_days: tr.n_train,
        n_test_days: tr.n_days - tr.n_train,
    }
}

fn base_report(config: &PipelineConfig, tr: &Training, run: &str) -> Result<Report> {
    Ok(Report {
        format_version: REPORT_VERSION,
        config_hash: config.hash()?,
        seeds: seed_table(config.seed),
        run: run.to_string(),
        assets: tr
            .universe
            .assets
            .iter()
            .zip(&tr.costs)
            .map(|(a, c)| ReportAsset {
                id: a.prices.asset_id.clone(),
                class: a.class,
                two_way_cost_percent: c.total_percent(),
            })
            .collect(),
        benchmark: tr.universe.benchmark.asset_id.clone(),
        spans: spans(tr),
        feature_columns: tr.feature_names.clone(),
        max_lag: tr.max_lag,
        purge_gap: tr.purge_gap,
        selected_features: None,
        tuning: None,
        final_hyperparams: None,
        models: BTreeMap::new(),
        comparisons: BTreeMap::new(),
        benchmark_final_level: 0.0,
    })
}

fn compare(
    config: &PipelineConfig,
    a: &BacktestResult,
    b: &BacktestResult,
) -> Result<SignificanceResult> {
    significance_test(
        &a.net,
        Some(&b.net),
        config.metrics.block_len,
        config.metrics.n_boot,
        derive_seed(config.seed, "significance"),
    )
}

/// Writes artifacts into the run directory, each stamped with the config hash and seeds.
pub struct Artifacts {
    dir: PathBuf,
    stamp: String,
}

impl Artifacts {
    pub fn create(dir: impl AsRef<Path>, config: &PipelineConfig) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        let failed = dir.join("FAILED");
        if failed.exists() {
            fs::remove_file(failed)?;
        }
        let seeds: Vec<String> = seed_table(config.seed)
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        Ok(Self {
            dir,
            stamp: format!("config_hash={} seeds={}", config.hash()?, seeds.join(",")),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Open the trial log, refusing logs written under a different configuration.
    fn trial_log(&self, config: &PipelineConfig) -> Result<TrialLog> {
        let path = self.path("trials.ndjson");
        let header = serde_json::json!({
            "kind": "header",
            "config_hash": config.hash()?,
            "seeds": seed_table(config.seed),
        });
        if path.exists() {
            if let Some(Ok(first)) = BufReader::new(fs::File::open(&path)?).lines().next() {
                if first != serde_json::to_string(&header)? {
                    return Err(Error::Config(format!(
                        "{} was written by a different configuration; use a fresh output directory",
                        path.display()
                    )));
                }
            }
        }
        let log = TrialLog::open(&path)?;
        log.write_header(&header)?;
        Ok(log)
    }

    fn write_report(&self, report: &Report) -> Result<()> {
        let mut text = serde_json::to_string_pretty(report)?;
        text.push('\n');
        fs::write(self.path("report.json"), text)?;
        Ok(())
    }

    fn write_selection(
        &self,
        names: &[String],
        selection: Option<&Selection>,
        kept: &[String],
    ) -> Result<()> {
        let mut f = fs::File::create(self.path("features_selected.txt"))?;
        writeln!(f, "# {}", self.stamp)?;
        for k in kept {
            writeln!(f, "{k}")?;
        }
        let mut f = fs::File::create(self.path("importances.csv"))?;
        writeln!(f, "# {}", self.stamp)?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record([
            "rank",
            "feature",
            "mean_importance",
            "hits",
            "p_value",
            "decision",
        ])?;
        if let Some(sel) = selection {
            let mut order: Vec<usize> = (0..sel.verdicts.len()).collect();
            order.sort_by(|&a, &b| {
                sel.verdicts[b]
                    .mean_importance
                    .total_cmp(&sel.verdicts[a].mean_importance)
                    .then(a.cmp(&b))
            });
            for (rank, &i) in order.iter().enumerate() {
                let v = &sel.verdicts[i];
                w.write_record([
                    (rank + 1).to_string(),
                    v.feature.clone(),
                    v.mean_importance.to_string(),
                    v.hits.to_string(),
                    v.p_value.to_string(),
                    serde_json::to_value(v.decision)?
                        .as_str()
                        .unwrap_or_default()
                        .to_string(),
                ])?;
            }
        } else {
            for (rank, n) in names.iter().enumerate() {
                w.write_record([
                    (rank + 1).to_string(),
                    n.clone(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    fn write_equity(
        &self,
        dates: &[NaiveDate],
        curves: &BTreeMap<String, BacktestResult>,
        benchmark: &[f64],
    ) -> Result<()> {
        let mut f = fs::File::create(self.path("equity.csv"))?;
        writeln!(f, "# {}", self.stamp)?;
        let mut w = csv::Writer::from_writer(f);
        let mut header = vec!["date".to_string()];
        let mut columns: Vec<Vec<f64>> = Vec::new();
        for (name, r) in curves {
            header.push(format!("{name}_return"));
            header.push(format!("{name}_equity"));
            columns.push(r.net.clone());
            columns.push(cumulative_performance(&r.net)?);
        }
        header.push("benchmark_level".into());
        columns.push(benchmark.to_vec());
        w.write_record(&header)?;
        for (t, d) in dates.iter().enumerate() {
            let mut rec = vec![d.to_string()];
            rec.extend(columns.iter().map(|c| c[t].to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    fn write_trades(&self, trades: &BacktestResult) -> Result<()> {
        write_trades_csv(&self.path("trades.csv"), &self.stamp, &trades.trades)
    }

    pub fn mark_failed(&self, err: &Error) {
        let _ = fs::write(self.path("FAILED"), format!("{err}\n"));
    }
}

fn with_failure_marker<T>(
    artifacts: Option<&Artifacts>,
    f: impl FnOnce() -> Result<T>,
) -> Result<T> {
    let r = f();
    if let (Err(e), Some(a)) = (&r, artifacts) {
        a.mark_failed(e);
    }
    r
}

/// Full run: tune, select, fit, predict the test span, and compare with both baselines.
pub fn run_pipeline(
    config: &PipelineConfig,
    universe: &Universe,
    artifacts: Option<&Artifacts>,
) -> Result<PipelineOutcome> {
    with_failure_marker(artifacts, || {
        let tr = prepare(config, universe)?;
        let mut log = match artifacts {
            Some(a) => a.trial_log(config)?,
            None => TrialLog::in_memory(),
        };
        let tuned = run_tuning(config, &tr, &mut log)?;
        let kept_names: Vec<String> = tuned
            .kept
            .iter()
            .map(|&j| tr.feature_names[j].clone())
            .collect();
        if let Some(a) = artifacts {
            a.write_selection(&tr.feature_names, Some(&tuned.selection), &kept_names)?;
        }

        let hp = tuned.rigorous.best.params;
        let final_model = stage(
            "final_fit",
            fit_forest(
                &tr.sub(&(0..tr.y.len()).collect::<Vec<_>>(), &tuned.kept),
                &tr.y,
                &hp,
                derive_seed(config.seed, "final"),
                &kept_names,
            ),
        )?;

        let access = tr.access.unlock(&final_model, tr.n_days);
        let test = stage("predict", TestSpan::open(config, &tr, access))?;
        let (lag, lookback) = (
            config.backtest.execution_lag,
            config.backtest.entry_lookback,
        );
        let (kmrf_dec, classes) = stage(
            "predict",
            test.kmrf_decisions(config, &final_model, &kept_names),
        )?;
        let kmrf = stage("backtest", test.backtest(&kmrf_dec, lag, lookback))?;
        let hmm = stage(
            "baseline_hmm",
            test.hmm_decisions(config, config.hmm.mode)
                .and_then(|d| test.backtest(&d, lag, lookback)),
        )?;
        let detection = stage(
            "baseline_detection",
            test.detection_decisions(config, config.backtest.detection_mode)
                .and_then(|d| test.backtest(&d, lag, lookback)),
        )?;

        // Predicted class at day t against the ex-post label of day t + 1.
        let (mut y_true, mut y_pred) = (Vec::new(), Vec::new());
        for a in 0..tr.universe.assets.len() {
            for t in tr.n_train..tr.n_days - 1 {
                if let Some(c) = classes[a][t] {
                    y_pred.push(c);
                    y_true.push(test.expost[a].segmentation.target_label[t + 1]);
                }
            }
        }

        let mut report = base_report(config, &tr, "kmrf")?;
        report.selected_features = Some(kept_names.clone());
        let failed = tuned
            .loose
            .trials
            .iter()
            .chain(&tuned.rigorous.trials)
            .filter(|t| t.status == TrialStatus::Failed)
            .count();
        report.tuning = Some(TuningSummary {
            loose_best: tuned.loose.best.clone(),
            rigorous_best: tuned.rigorous.best.clone(),
            loose_trials: tuned.loose.trials.len(),
            rigorous_trials: tuned.rigorous.trials.len(),
            failed_trials: failed,
        });
        report.final_hyperparams = Some(hp);
        let metrics = |mode, r: &BacktestResult, labels| {
            stage("metrics", test.summarise(config, mode, r, labels))
        };
        report.models.insert(
            "kmrf".into(),
            metrics(
                config.backtest.mode,
                &kmrf,
                Some((&y_true[..], &y_pred[..])),
            )?,
        );
        report
            .models
            .insert("hmm".into(), metrics(config.hmm.mode, &hmm, None)?);
        report.models.insert(
            "detection".into(),
            metrics(config.backtest.detection_mode, &detection, None)?,
        );
        report.comparisons.insert(
            "kmrf_vs_hmm".into(),
            stage("metrics", compare(config, &kmrf, &hmm))?,
        );
        report.comparisons.insert(
            "kmrf_vs_detection".into(),
            stage("metrics", compare(config, &kmrf, &detection))?,
        );

        let span = test.span();
        let bench_curve =
            benchmark_curve(&tr.universe.benchmark.close[span.start - 1..span.end])[1..].to_vec();
        report.benchmark_final_level = bench_curve.last().copied().unwrap_or(100.0);

        let mut backtests = BTreeMap::new();
        backtests.insert("kmrf".to_string(), kmrf);
        backtests.insert("hmm".to_string(), hmm);
        backtests.insert("detection".to_string(), detection);
        if let Some(a) = artifacts {
            a.write_trades(&backtests["kmrf"])?;
            a.write_equity(&tr.universe.benchmark.dates[span], &backtests, &bench_curve)?;
            a.write_report(&report)?;
        }
        Ok(PipelineOutcome {
            report,
            backtests,
            benchmark_returns: test.benchmark_returns(),
            final_model: Some(final_model),
        })
    })
}

/// Trade one baseline on the test span. `mode` overrides the configured interpretation.
pub fn run_baseline(
    config: &PipelineConfig,
    universe: &Universe,
    model: BaselineModel,
    mode: Option<SignalMode>,
    artifacts: Option<&Artifacts>,
) -> Result<PipelineOutcome> {
    with_failure_marker(artifacts, || {
        let tr = prepare(config, universe)?;
        // Baselines need no forest; their inputs are fitted on the training span above.
        let access = DataAccess { limit: tr.n_days };
        let test = stage("predict", TestSpan::open(config, &tr, access))?;
        let (lag, lookback) = (
            config.backtest.execution_lag,
            config.backtest.entry_lookback,
        );
        let (mode, decisions) = match model {
            BaselineModel::Hmm => {
                let m = mode.unwrap_or(config.hmm.mode);
                (m, test.hmm_decisions(config, m))
            }
            BaselineModel::Detection => {
                let m = mode.unwrap_or(config.backtest.detection_mode);
                (m, test.detection_decisions(config, m))
            }
        };
        let result = stage(
            "backtest",
            decisions.and_then(|d| test.backtest(&d, lag, lookback)),
        )?;
        let mut report = base_report(config, &tr, model.key())?;
        report.models.insert(
            model.key().into(),
            stage("metrics", test.summarise(config, mode, &result, None))?,
        );
        let span = test.span();
        let bench_curve =
            benchmark_curve(&tr.universe.benchmark.close[span.start - 1..span.end])[1..].to_vec();
        report.benchmark_final_level = bench_curve.last().copied().unwrap_or(100.0);
        let mut backtests = BTreeMap::new();
        backtests.insert(model.key().to_string(), result);
        if let Some(a) = artifacts {
            a.write_trades(&backtests[model.key()])?;
            a.write_equity(&tr.universe.benchmark.dates[span], &backtests, &bench_curve)?;
            a.write_report(&report)?;
        }
        Ok(PipelineOutcome {
            report,
            backtests,
            benchmark_returns: test.benchmark_returns(),
            final_model: None,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub selected_features: Vec<String>,
    pub tuning: TuningSummary,
}

/// Search only: both tuning phases and feature selection on the training span.
pub fn run_tune(
    config: &PipelineConfig,
    universe: &Universe,
    artifacts: Option<&Artifacts>,
) -> Result<TuneReport> {
    with_failure_marker(artifacts, || {
        let tr = prepare(config, universe)?;
        let mut log = match artifacts {
            Some(a) => a.trial_log(config)?,
            None => TrialLog::in_memory(),
        };
        let tuned = run_tuning(config, &tr, &mut log)?;
        let kept: Vec<String> = tuned
            .kept
            .iter()
            .map(|&j| tr.feature_names[j].clone())
            .collect();
        let failed = tuned
            .loose
            .trials
            .iter()
            .chain(&tuned.rigorous.trials)
            .filter(|t| t.status == TrialStatus::Failed)
            .count();
        let out = TuneReport {
            config_hash: config.hash()?,
            seeds: seed_table(config.seed),
            selected_features: kept.clone(),
            tuning: TuningSummary {
                loose_best: tuned.loose.best,
                rigorous_best: tuned.rigorous.best,
                loose_trials: tuned.loose.trials.len(),
                rigorous_trials: tuned.rigorous.trials.len(),
                failed_trials: failed,
            },
        };
        if let Some(a) = artifacts {
            a.write_selection(&tr.feature_names, Some(&tuned.selection), &kept)?;
            fs::write(
                a.path("tune.json"),
                serde_json::to_string_pretty(&out)? + "\n",
            )?;
        }
        Ok(out)
    })
}

/// Label the training span of every asset; writes `labels/<asset>.csv`.
pub fn run_label(
    config: &PipelineConfig,
    universe: &Universe,
    artifacts: Option<&Artifacts>,
) -> Result<Vec<Labeling>> {
    with_failure_marker(artifacts, || {
        let tr = prepare(config, universe)?;
        if let Some(a) = artifacts {
            let dir = a.path("labels");
            fs::create_dir_all(&dir)?;
            for (asset, l) in tr.universe.assets.iter().zip(&tr.labelings) {
                l.segmentation
                    .write_csv(dir.join(format!("{}.csv", asset.prices.asset_id)))?;
            }
        }
        Ok(tr.labelings)
    })
}

/// Human-readable summary of a finished run directory.
pub fn render_report(dir: impl AsRef<Path>) -> Result<String> {
    let dir = dir.as_ref();
    let report: Report = serde_json::from_str(&fs::read_to_string(dir.join("report.json"))?)?;
    let mut s = String::new();
    let fmt = |v: f64| {
        if v.is_finite() {
            format!("{v:.3}")
        } else {
            "n/a".to_string()
        }
    };
    s.push_str(&format!(
        "run: {}   config {}\n",
        report.run,
        &report.config_hash[..12]
    ));
    s.push_str(&format!(
        "train {} .. {} ({} days), test {} .. {} ({} days)\n",
        report.spans.train_start,
        report.spans.train_end,
        report.spans.n_train_days,
        report.spans.test_start,
        report.spans.test_end,
        report.spans.n_test_days
    ));
    if let Some(f) = &report.selected_features {
        s.push_str(&format!(
            "selected features ({}): {}\n",
            f.len(),
            f.join(", ")
        ));
    }
    s.push_str(&format!(
        "{:<10} {:>9} {:>9} {:>9} {:>8} {:>10} {:>8}\n",
        "model", "sortino", "adj_shp", "info", "trades", "final_Q", "p(mean)"
    ));
    for (name, m) in &report.models {
        s.push_str(&format!(
            "{:<10} {:>9} {:>9} {:>9} {:>8} {:>10.2} {:>8.3}\n",
            name,
            fmt(m.metrics.sortino.value),
            fmt(m.metrics.adjusted_sharpe.value),
            m.metrics
                .information_ratio
                .map_or("n/a".into(), |v| fmt(v.value)),
            m.n_trades,
            m.final_equity,
            m.significance_vs_zero.p_value
        ));
    }
    s.push_str(&format!(
        "benchmark {} final level {:.2}\n",
        report.benchmark, report.benchmark_final_level
    ));
    let trials = dir.join("trials.ndjson");
    if trials.exists() {
        let log = TrialLog::open(&trials)?;
        for phase in [Phase::Loose, Phase::Rigorous] {
            let recs = log.records(phase);
            let ok = recs
                .iter()
                .filter(|r| r.status == TrialStatus::Complete)
                .count();
            s.push_str(&format!(
                "{phase:?} trials: {} logged, {ok} complete\n",
                recs.len()
            ));
        }
    }
    Ok(s)
}
