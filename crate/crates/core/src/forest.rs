//! Random-forest classifier over the three regime labels.
//!
//! Trees are grown greedily on Gini impurity with exact midpoint thresholds. Each
//! tree draws its bootstrap and its per-node feature subsets from its own ChaCha
//! stream keyed by `(seed, tree_index)`, so serial and parallel fits agree bit for bit.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::regime::Label;

const N_CLASSES: usize = 3;

/// The seven tuned hyperparameters. All other settings follow common library
/// defaults: Gini criterion, bootstrap sampling, no class weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestHyperparams {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    pub min_samples_leaf: usize,
    /// Fraction of training rows drawn (with replacement) per tree.
    pub max_samples: f64,
    pub min_weight_fraction_leaf: f64,
    /// Fraction of columns considered at each split.
    pub max_features: f64,
}

impl Default for ForestHyperparams {
    fn default() -> Self {
        Self {
            n_estimators: 100,
            max_depth: 20,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_samples: 1.0,
            min_weight_fraction_leaf: 0.0,
            max_features: 0.5,
        }
    }
}

impl ForestHyperparams {
    pub fn validate(&self) -> Result<()> {
        let checks = [
            (
                (10..=300).contains(&self.n_estimators),
                "n_estimators in 10..=300",
            ),
            ((1..=20).contains(&self.max_depth), "max_depth in 1..=20"),
            (
                (1..=100).contains(&self.min_samples_split),
                "min_samples_split in 1..=100",
            ),
            (
                (1..=100).contains(&self.min_samples_leaf),
                "min_samples_leaf in 1..=100",
            ),
            (
                (0.1..=1.0).contains(&self.max_samples),
                "max_samples in [0.1, 1.0]",
            ),
            (
                (0.0..=0.05).contains(&self.min_weight_fraction_leaf),
                "min_weight_fraction_leaf in [0, 0.05]",
            ),
            (
                (0.2..=1.0).contains(&self.max_features),
                "max_features in [0.2, 1.0]",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, what)) => Err(Error::Config(format!(
                "hyperparameter out of range: {what}"
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForestOptions {
    /// Disable to grow every tree on the full training set.
    pub bootstrap: bool,
    pub parallel: bool,
    /// Skip the tuning-range check (tests use tiny forests).
    pub check_ranges: bool,
}

impl Default for ForestOptions {
    fn default() -> Self {
        Self {
            bootstrap: true,
            parallel: true,
            check_ranges: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        /// Bootstrap-weighted class counts of the training rows reaching this leaf.
        counts: [f64; N_CLASSES],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Node 0 is the root; rows with `x[feature] <= threshold` go left.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf_for(&self, row: &[f64]) -> &[f64; N_CLASSES] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if row[*feature] <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
                Node::Leaf { counts } => return counts,
            }
        }
    }

    pub fn proba(&self, row: &[f64]) -> [f64; N_CLASSES] {
        let c = self.leaf_for(row);
        let total: f64 = c.iter().sum();
        [c[0] / total, c[1] / total, c[2] / total]
    }

    pub fn depth(&self) -> usize {
        fn go(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Split { left, right, .. } => 1 + go(nodes, *left).max(go(nodes, *right)),
                Node::Leaf { .. } => 0,
            }
        }
        go(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub feature_names: Vec<String>,
    pub classes: [Label; N_CLASSES],
    pub hyperparams: ForestHyperparams,
    pub seed: u64,
    pub trees: Vec<Tree>,
    /// Set when training saw a single class; the model then always predicts it.
    pub degenerate: Option<Label>,
}

const FORMAT: &str = "kmrf-forest";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    model: T,
}

pub(crate) fn to_versioned_json<T: Serialize>(
    format: &str,
    version: u32,
    model: &T,
) -> Result<String> {
    Ok(serde_json::to_string(&Envelope {
        format: format.to_string(),
        version,
        model,
    })?)
}

pub(crate) fn from_versioned_json<T: for<'de> Deserialize<'de>>(
    format: &str,
    version: u32,
    s: &str,
) -> Result<T> {
    let env: Envelope<T> = serde_json::from_str(s)?;
    if env.format != format || env.version != version {
        return Err(Error::Config(format!(
            "expected {format} v{version}, found {} v{}",
            env.format, env.version
        )));
    }
    Ok(env.model)
}

impl ForestModel {
    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn predict_proba(&self, row: &[f64]) -> Result<[f64; N_CLASSES]> {
        if row.len() != self.n_features() {
            return Err(Error::Shape(format!(
                "row has {} features, model expects {}",
                row.len(),
                self.n_features()
            )));
        }
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::Domain("NaN in prediction row".into()));
        }
        if let Some(label) = self.degenerate {
            let mut p = [0.0; N_CLASSES];
            p[label.index()] = 1.0;
            return Ok(p);
        }
        let mut acc = [0.0; N_CLASSES];
        for t in &self.trees {
            let p = t.proba(row);
            for k in 0..N_CLASSES {
                acc[k] += p[k];
            }
        }
        let n = self.trees.len() as f64;
        Ok(acc.map(|v| v / n))
    }

    pub fn predict_proba_matrix(&self, x: &Matrix) -> Result<Vec<[f64; N_CLASSES]>> {
        x.rows().map(|r| self.predict_proba(r)).collect()
    }

    /// Most probable class; ties go to the earlier class in `Label::ALL`.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<Label>> {
        Ok(self.predict_proba_matrix(x)?.iter().map(argmax).collect())
    }

    /// Number of splits on each feature across all trees.
    pub fn split_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_features()];
        for t in &self.trees {
            for n in &t.nodes {
                if let Node::Split { feature, .. } = n {
                    counts[*feature] += 1;
                }
            }
        }
        counts
    }

    pub fn to_json(&self) -> Result<String> {
        to_versioned_json(FORMAT, FORMAT_VERSION, self)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        from_versioned_json(FORMAT, FORMAT_VERSION, s)
    }
}

pub fn argmax(p: &[f64; N_CLASSES]) -> Label {
    let mut best = 0;
    for k in 1..N_CLASSES {
        if p[k] > p[best] {
            best = k;
        }
    }
    Label::from_index(best)
}

pub fn fit_forest(
    x: &Matrix,
    y: &[Label],
    hp: &ForestHyperparams,
    seed: u64,
    feature_names: &[String],
) -> Result<ForestModel> {
    fit_forest_with(x, y, hp, seed, feature_names, &ForestOptions::default())
}

pub fn fit_forest_with(
    x: &Matrix,
    y: &[Label],
    hp: &ForestHyperparams,
    seed: u64,
    feature_names: &[String],
    options: &ForestOptions,
) -> Result<ForestModel> {
    if options.check_ranges {
        hp.validate()?;
    }
    if x.n_rows() != y.len() {
        return Err(Error::Shape(format!(
            "{} rows but {} labels",
            x.n_rows(),
            y.len()
        )));
    }
    if feature_names.len() != x.n_cols() {
        return Err(Error::Shape(format!(
            "{} feature names for {} columns",
            feature_names.len(),
            x.n_cols()
        )));
    }
    if x.n_rows() == 0 {
        return Err(Error::InsufficientData("no training rows".into()));
    }
    if x.has_non_finite() {
        return Err(Error::Domain(
            "training matrix contains non-finite values (warm-up rows?)".into(),
        ));
    }
    if hp.n_estimators == 0 || hp.max_depth == 0 {
        return Err(Error::Config(
            "n_estimators and max_depth must be positive".into(),
        ));
    }
    let mut model = ForestModel {
        feature_names: feature_names.to_vec(),
        classes: Label::ALL,
        hyperparams: *hp,
        seed,
        trees: Vec::new(),
        degenerate: None,
    };
    if y.iter().all(|l| *l == y[0]) {
        let mut counts = [0.0; N_CLASSES];
        counts[y[0].index()] = y.len() as f64;
        model.trees.push(Tree {
            nodes: vec![Node::Leaf { counts }],
        });
        model.degenerate = Some(y[0]);
        return Ok(model);
    }

    let yi: Vec<u8> = y.iter().map(|l| l.index() as u8).collect();
    let presorted: Vec<Vec<u32>> = (0..x.n_cols())
        .map(|j| {
            let mut idx: Vec<u32> = (0..x.n_rows() as u32).collect();
            idx.sort_by(|&a, &b| {
                x.get(a as usize, j)
                    .total_cmp(&x.get(b as usize, j))
                    .then(a.cmp(&b))
            });
            idx
        })
        .collect();
    let ctx = TreeContext {
        x,
        y: &yi,
        presorted: &presorted,
        hp,
        bootstrap: options.bootstrap,
        seed,
    };
    model.trees = if options.parallel {
        (0..hp.n_estimators)
            .into_par_iter()
            .map(|t| ctx.grow(t))
            .collect()
    } else {
        (0..hp.n_estimators).map(|t| ctx.grow(t)).collect()
    };
    Ok(model)
}

struct TreeContext<'a> {
    x: &'a Matrix,
    y: &'a [u8],
    presorted: &'a [Vec<u32>],
    hp: &'a ForestHyperparams,
    bootstrap: bool,
    seed: u64,
}

struct Grower<'a> {
    ctx: &'a TreeContext<'a>,
    weight: Vec<u32>,
    goes_left: Vec<bool>,
    rng: ChaCha8Rng,
    n_try: usize,
    min_leaf_weight: f64,
    nodes: Vec<Node>,
}

impl TreeContext<'_> {
    fn grow(&self, tree_index: usize) -> Tree {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(tree_index as u64);
        let n = self.x.n_rows();
        let mut weight = vec![0u32; n];
        if self.bootstrap {
            let draws = ((self.hp.max_samples * n as f64).ceil() as usize).clamp(1, n);
            for _ in 0..draws {
                weight[rng.random_range(0..n)] += 1;
            }
        } else {
            weight.fill(1);
        }
        let total: f64 = weight.iter().map(|&w| w as f64).sum();
        let n_try = ((self.hp.max_features * self.x.n_cols() as f64).ceil() as usize)
            .clamp(1, self.x.n_cols());
        let lists: Vec<Vec<u32>> = self
            .presorted
            .iter()
            .map(|p| {
                p.iter()
                    .copied()
                    .filter(|&r| weight[r as usize] > 0)
                    .collect()
            })
            .collect();
        let mut g = Grower {
            ctx: self,
            weight,
            goes_left: vec![false; n],
            rng,
            n_try,
            min_leaf_weight: self.hp.min_weight_fraction_leaf * total,
            nodes: Vec::new(),
        };
        g.build(lists, 0);
        Tree { nodes: g.nodes }
    }
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    proxy: f64,
}

impl Grower<'_> {
    fn build(&mut self, lists: Vec<Vec<u32>>, depth: usize) -> usize {
        let hp = self.ctx.hp;
        let mut counts = [0.0; N_CLASSES];
        for &r in &lists[0] {
            counts[self.ctx.y[r as usize] as usize] += self.weight[r as usize] as f64;
        }
        let n: f64 = counts.iter().sum();
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { counts });

        let pure = counts.iter().filter(|c| **c > 0.0).count() <= 1;
        let min_leaf = hp.min_samples_leaf as f64;
        if pure
            || depth >= hp.max_depth
            || n < hp.min_samples_split as f64
            || n < 2.0 * min_leaf
            || n < 2.0 * self.min_leaf_weight
        {
            return id;
        }

        let mut features = index::sample(&mut self.rng, self.ctx.x.n_cols(), self.n_try).into_vec();
        features.sort_unstable();
        let Some(best) = self.best_split(&lists, &features, &counts, n) else {
            return id;
        };
        debug_assert!(best.proxy >= counts.iter().map(|c| c * c).sum::<f64>() / n - 1e-9 * n);

        let x = self.ctx.x;
        for &r in &lists[0] {
            self.goes_left[r as usize] = x.get(r as usize, best.feature) <= best.threshold;
        }
        let (mut left, mut right) = (
            Vec::with_capacity(lists.len()),
            Vec::with_capacity(lists.len()),
        );
        for l in lists {
            let (a, b): (Vec<u32>, Vec<u32>) =
                l.into_iter().partition(|&r| self.goes_left[r as usize]);
            left.push(a);
            right.push(b);
        }
        let l = self.build(left, depth + 1);
        let r = self.build(right, depth + 1);
        self.nodes[id] = Node::Split {
            feature: best.feature,
            threshold: best.threshold,
            left: l,
            right: r,
        };
        id
    }

    /// Maximises `sum_k L_k^2 / n_L + sum_k R_k^2 / n_R`, which minimises the
    /// weighted child Gini impurity. Scanning features and thresholds in ascending
    /// order with a strict improvement test keeps the lowest (feature, threshold) on ties.
    fn best_split(
        &self,
        lists: &[Vec<u32>],
        features: &[usize],
        counts: &[f64; N_CLASSES],
        n: f64,
    ) -> Option<SplitChoice> {
        let x = self.ctx.x;
        let min_leaf = (self.ctx.hp.min_samples_leaf as f64).max(self.min_leaf_weight);
        let eps = 1e-12 * n;
        let mut best: Option<SplitChoice> = None;
        for &f in features {
            let list = &lists[f];
            let mut left = [0.0; N_CLASSES];
            let mut nl = 0.0;
            for w in 0..list.len().saturating_sub(1) {
                let r = list[w] as usize;
                let wt = self.weight[r] as f64;
                left[self.ctx.y[r] as usize] += wt;
                nl += wt;
                let (a, b) = (x.get(r, f), x.get(list[w + 1] as usize, f));
                if !(a < b) {
                    continue;
                }
                let nr = n - nl;
                if nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let mut proxy = 0.0;
                for k in 0..N_CLASSES {
                    let rk = counts[k] - left[k];
                    proxy += left[k] * left[k] / nl + rk * rk / nr;
                }
                if best.as_ref().is_none_or(|b| proxy > b.proxy + eps) {
                    best = Some(SplitChoice {
                        feature: f,
                        threshold: midpoint(a, b),
                        proxy,
                    });
                }
            }
        }
        best
    }
}

pub(crate) fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m >= b {
        a
    } else {
        m
    }
}

/// Importance of one column by permutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImportance {
    pub feature: String,
    /// Mean drop in the metric when the column is shuffled.
    pub mean: f64,
    pub std: f64,
    /// Never used in a split, or no measurable effect.
    pub negligible: bool,
}

pub fn accuracy(y_true: &[Label], y_pred: &[Label]) -> f64 {
    if y_true.is_empty() {
        return 0.0;
    }
    y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count() as f64 / y_true.len() as f64
}

/// `metric(y, pred(X)) - metric(y, pred(X with column f shuffled))`, averaged over `repeats`.
pub fn permutation_importance<M>(
    model: &ForestModel,
    x: &Matrix,
    y: &[Label],
    metric: M,
    repeats: usize,
    seed: u64,
) -> Result<Vec<FeatureImportance>>
where
    M: Fn(&[Label], &[Label]) -> f64,
{
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    if x.n_rows() != y.len() {
        return Err(Error::Shape("importance rows and labels differ".into()));
    }
    let base = metric(y, &model.predict(x)?);
    let used = model.split_counts();
    let mut work = x.clone();
    let mut out = Vec::with_capacity(x.n_cols());
    for f in 0..x.n_cols() {
        let original = x.column(f);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(f as u64);
        let mut drops = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let mut shuffled = original.clone();
            fisher_yates(&mut shuffled, &mut rng);
            work.set_column(f, &shuffled);
            drops.push(base - metric(y, &model.predict(&work)?));
        }
        work.set_column(f, &original);
        let mean = drops.iter().sum::<f64>() / repeats as f64;
        let std = (drops.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / repeats as f64).sqrt();
        out.push(FeatureImportance {
            feature: model.feature_names[f].clone(),
            mean,
            std,
            negligible: used[f] == 0 || mean.abs() < 1e-12,
        });
    }
    Ok(out)
}

pub(crate) fn fisher_yates<T, R: Rng>(v: &mut [T], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    fn toy(seed: u64, n: usize) -> (Matrix, Vec<Label>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let bull = i % 2 == 0;
            let a = if bull {
                rng.random_range(0.0..0.4)
            } else {
                rng.random_range(0.6..1.0)
            };
            rows.push(vec![a, rng.random_range(0.0..1.0)]);
            y.push(if bull { Label::Bullish } else { Label::Bearish });
        }
        (Matrix::from_rows(&rows).unwrap(), y)
    }

    fn small_hp(n_estimators: usize, max_depth: usize) -> ForestHyperparams {
        ForestHyperparams {
            n_estimators,
            max_depth,
            min_samples_split: 2,
            min_samples_leaf: 1,
            max_samples: 1.0,
            min_weight_fraction_leaf: 0.0,
            max_features: 1.0,
        }
    }

    #[test]
    fn separable_toy_is_fit_perfectly() {
        let (x, y) = toy(1, 40);
        let m = fit_forest(&x, &y, &small_hp(25, 3), 7, &names(2)).unwrap();
        assert_eq!(accuracy(&y, &m.predict(&x).unwrap()), 1.0);
        assert!(m.trees.iter().all(|t| t.depth() <= 3));
    }

    #[test]
    fn same_seed_same_forest_serial_or_parallel() {
        let (x, y) = toy(2, 60);
        let hp = ForestHyperparams {
            max_features: 0.5,
            max_samples: 0.7,
            ..small_hp(20, 5)
        };
        let a = fit_forest(&x, &y, &hp, 3, &names(2)).unwrap();
        let b = fit_forest(&x, &y, &hp, 3, &names(2)).unwrap();
        let serial = fit_forest_with(
            &x,
            &y,
            &hp,
            3,
            &names(2),
            &ForestOptions {
                parallel: false,
                ..Default::default()
            },
        )
        .unwrap();
        let ja = a.to_json().unwrap();
        assert_eq!(ja, b.to_json().unwrap());
        assert_eq!(ja, serial.to_json().unwrap());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let (x, y) = toy(3, 50);
        let m = fit_forest(&x, &y, &small_hp(10, 4), 1, &names(2)).unwrap();
        let back = ForestModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let bad = m.to_json().unwrap().replace("kmrf-forest", "other");
        assert!(ForestModel::from_json(&bad).is_err());
    }

    #[test]
    fn single_class_is_degenerate() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let y = vec![Label::Other; 3];
        let m = fit_forest(&x, &y, &small_hp(10, 3), 0, &names(1)).unwrap();
        assert_eq!(m.degenerate, Some(Label::Other));
        assert_eq!(m.predict_proba(&[5.0]).unwrap(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn proba_shape_and_nan_errors() {
        let (x, y) = toy(4, 30);
        let m = fit_forest(&x, &y, &small_hp(10, 3), 0, &names(2)).unwrap();
        assert!(matches!(m.predict_proba(&[0.1]), Err(Error::Shape(_))));
        assert!(m.predict_proba(&[f64::NAN, 0.0]).is_err());
        for r in x.rows() {
            let p = m.predict_proba(r).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn averaging_over_trees() {
        let leaf = |c: [f64; 3]| Tree {
            nodes: vec![Node::Leaf { counts: c }],
        };
        let m = ForestModel {
            feature_names: names(1),
            classes: Label::ALL,
            hyperparams: small_hp(10, 1),
            seed: 0,
            trees: vec![leaf([4.0, 0.0, 0.0]), leaf([0.0, 2.0, 0.0])],
            degenerate: None,
        };
        assert_eq!(m.predict_proba(&[0.0]).unwrap(), [0.5, 0.5, 0.0]);
        let single = ForestModel {
            trees: vec![leaf([3.0, 0.0, 0.0])],
            ..m.clone()
        };
        assert_eq!(single.predict_proba(&[0.0]).unwrap(), [1.0, 0.0, 0.0]);
        let mut rev = m.clone();
        rev.trees.reverse();
        assert_eq!(
            rev.predict_proba(&[0.0]).unwrap(),
            m.predict_proba(&[0.0]).unwrap()
        );
    }

    #[test]
    fn ten_tree_proba_matches_manual_traversal() {
        let (x, y) = toy(9, 80);
        let hp = ForestHyperparams {
            max_samples: 0.6,
            max_features: 0.5,
            ..small_hp(10, 4)
        };
        let m = fit_forest(&x, &y, &hp, 5, &names(2)).unwrap();
        let row = [0.45, 0.3];
        let mut acc = [0.0; 3];
        for t in &m.trees {
            let mut i = 0;
            let counts = loop {
                match &t.nodes[i] {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        i = if row[*feature] <= *threshold {
                            *left
                        } else {
                            *right
                        }
                    }
                    Node::Leaf { counts } => break *counts,
                }
            };
            let s: f64 = counts.iter().sum();
            for k in 0..3 {
                acc[k] += counts[k] / s / 10.0;
            }
        }
        let got = m.predict_proba(&row).unwrap();
        for k in 0..3 {
            assert!((got[k] - acc[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn leaf_counts_sum_to_routed_weight() {
        let (x, y) = toy(5, 70);
        let m = fit_forest(
            &x,
            &y,
            &ForestHyperparams {
                max_samples: 0.5,
                ..small_hp(10, 4)
            },
            2,
            &names(2),
        )
        .unwrap();
        let draws = (0.5f64 * 70.0).ceil();
        for t in &m.trees {
            let total: f64 = t
                .nodes
                .iter()
                .filter_map(|n| match n {
                    Node::Leaf { counts } => Some(counts.iter().sum::<f64>()),
                    _ => None,
                })
                .sum();
            assert_eq!(total, draws);
        }
    }

    #[test]
    fn identical_trees_without_randomness() {
        let (x, y) = toy(6, 40);
        let m = fit_forest_with(
            &x,
            &y,
            &small_hp(10, 6),
            9,
            &names(2),
            &ForestOptions {
                bootstrap: false,
                ..Default::default()
            },
        )
        .unwrap();
        for t in &m.trees[1..] {
            assert_eq!(t, &m.trees[0]);
        }
    }

    #[test]
    fn importance_unused_and_leaked() {
        let (x, y) = toy(7, 80);
        let leak: Vec<f64> = y.iter().map(|l| l.index() as f64).collect();
        let x3 = x.hstack(&[leak]).unwrap();
        let m = fit_forest(
            &x3,
            &y,
            &ForestHyperparams {
                max_features: 0.34,
                ..small_hp(30, 1)
            },
            4,
            &names(3),
        )
        .unwrap();
        let imp = permutation_importance(&m, &x3, &y, accuracy, 5, 1).unwrap();
        assert!(imp[1].negligible);
        let best = imp.iter().map(|i| i.mean).fold(f64::MIN, f64::max);
        assert!(best > 0.2);
    }

    /// Brute-force CART: every feature, every midpoint, weighted Gini computed directly.
    fn oracle_tree(
        x: &Matrix,
        y: &[Label],
        rows: &[usize],
        depth: usize,
        hp: &ForestHyperparams,
    ) -> OracleNode {
        let mut counts = [0.0; 3];
        for &r in rows {
            counts[y[r].index()] += 1.0;
        }
        let n = rows.len() as f64;
        let gini = |c: &[f64; 3], n: f64| 1.0 - c.iter().map(|v| (v / n).powi(2)).sum::<f64>();
        let pure = counts.iter().filter(|c| **c > 0.0).count() <= 1;
        let leaf = OracleNode::Leaf(counts);
        if pure
            || depth >= hp.max_depth
            || n < hp.min_samples_split as f64
            || n < 2.0 * hp.min_samples_leaf as f64
        {
            return leaf;
        }
        let mut best: Option<(f64, usize, f64)> = None;
        for f in 0..x.n_cols() {
            let mut vals: Vec<f64> = rows.iter().map(|&r| x.get(r, f)).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let thr = midpoint(w[0], w[1]);
                let (mut l, mut r) = ([0.0; 3], [0.0; 3]);
                for &i in rows {
                    if x.get(i, f) <= thr {
                        l[y[i].index()] += 1.0;
                    } else {
                        r[y[i].index()] += 1.0;
                    }
                }
                let (nl, nr): (f64, f64) = (l.iter().sum(), r.iter().sum());
                if nl < hp.min_samples_leaf as f64 || nr < hp.min_samples_leaf as f64 {
                    continue;
                }
                let g = nl / n * gini(&l, nl) + nr / n * gini(&r, nr);
                if best.is_none_or(|(bg, _, _)| g < bg - 1e-12) {
                    best = Some((g, f, thr));
                }
            }
        }
        let Some((_, f, thr)) = best else { return leaf };
        let (lr, rr): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&r| x.get(r, f) <= thr);
        OracleNode::Split(
            f,
            thr,
            Box::new(oracle_tree(x, y, &lr, depth + 1, hp)),
            Box::new(oracle_tree(x, y, &rr, depth + 1, hp)),
        )
    }

    enum OracleNode {
        Split(usize, f64, Box<OracleNode>, Box<OracleNode>),
        Leaf([f64; 3]),
    }

    fn oracle_counts<'a>(node: &'a OracleNode, row: &[f64]) -> &'a [f64; 3] {
        match node {
            OracleNode::Split(f, t, l, r) => oracle_counts(if row[*f] <= *t { l } else { r }, row),
            OracleNode::Leaf(c) => c,
        }
    }

    #[test]
    fn single_tree_matches_exhaustive_cart() {
        for seed in 0..8u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 30;
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    (0..3)
                        .map(|_| (rng.random_range(0..12) as f64) / 4.0)
                        .collect()
                })
                .collect();
            let y: Vec<Label> = rows
                .iter()
                .map(|r| {
                    let noisy = rng.random_range(0.0..1.0) < 0.2;
                    let k = if r[0] + r[1] > 2.5 {
                        0
                    } else if r[2] > 1.5 {
                        1
                    } else {
                        2
                    };
                    Label::from_index(if noisy { rng.random_range(0..3) } else { k })
                })
                .collect();
            let x = Matrix::from_rows(&rows).unwrap();
            let hp = ForestHyperparams {
                min_samples_leaf: 1 + seed as usize % 3,
                ..small_hp(10, 4)
            };
            let opts = ForestOptions {
                bootstrap: false,
                ..Default::default()
            };
            let m = fit_forest_with(&x, &y, &hp, seed, &names(3), &opts).unwrap();
            let oracle = oracle_tree(&x, &y, &(0..n).collect::<Vec<_>>(), 0, &hp);
            let mut probes: Vec<Vec<f64>> = rows.clone();
            probes.extend((0..200).map(|_| (0..3).map(|_| rng.random_range(-0.5..3.5)).collect()));
            for p in &probes {
                assert_eq!(
                    m.trees[0].leaf_for(p),
                    oracle_counts(&oracle, p),
                    "seed {seed}"
                );
            }
        }
    }

    #[test]
    fn hyperparameter_ranges() {
        assert!(ForestHyperparams::default().validate().is_ok());
        let bad = ForestHyperparams {
            max_features: 0.1,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
