//! Random search over forest hyperparameters with purged-fold validation and a
//! resumable NDJSON trial log.
//!
//! cargo run --release --example hyperparameter_search

use kmrf::forest::ForestOptions;
use kmrf::forest::{accuracy, ForestHyperparams};
use kmrf::matrix::Matrix;
use kmrf::regime::Label;
use kmrf::validation::{
    fit_fold, make_splits_for, tune, Phase, RandomSampler, SearchSpace, TrialLog,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> kmrf::Result<()> {
    let n = 800;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut rows, mut y) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let r: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = r[0] * r[1] + 0.3 * r[2] + rng.random_range(-0.2..0.2);
        y.push(if s > 0.15 {
            Label::Bullish
        } else if s < -0.15 {
            Label::Bearish
        } else {
            Label::Other
        });
        rows.push(r);
    }
    let x = Matrix::from_rows(&rows)?;
    let names: Vec<String> = (0..4).map(|i| format!("x{i}")).collect();
    let row_day: Vec<usize> = (0..n).collect();
    let plan = make_splits_for(n, 3, 20, 0)?;

    let objective = |hp: &ForestHyperparams| -> kmrf::Result<Vec<f64>> {
        (0..plan.n_folds)
            .map(|k| {
                let model = fit_fold(
                    &plan,
                    k,
                    &x,
                    &y,
                    &row_day,
                    &names,
                    hp,
                    1,
                    &ForestOptions::default(),
                )?;
                let (_, val) = plan.fold_rows(k, &row_day);
                let yv: Vec<Label> = val.iter().map(|&i| y[i]).collect();
                Ok(accuracy(&yv, &model.predict(&x.select_rows(&val))?))
            })
            .collect()
    };
    let sampler = RandomSampler {
        space: SearchSpace {
            n_estimators: (10, 80),
            ..Default::default()
        },
        seed: 5,
    };

    let path = std::env::temp_dir().join("kmrf_example_trials.ndjson");
    let _ = std::fs::remove_file(&path);
    let mut log = TrialLog::open(&path)?;
    let first = tune(&sampler, objective, 8, Phase::Loose, &mut log)?;
    // Reopening replays the eight logged trials and only runs the new ones.
    let mut log = TrialLog::open(&path)?;
    let out = tune(&sampler, objective, 12, Phase::Loose, &mut log)?;
    assert_eq!(&out.trials[..8], &first.trials[..]);
    for t in &out.trials {
        println!(
            "trial {:>2}: trees {:>3} depth {:>2} leaf {:>3} features {:.2} -> {:.3}",
            t.trial_id,
            t.params.n_estimators,
            t.params.max_depth,
            t.params.min_samples_leaf,
            t.params.max_features,
            t.mean_score.unwrap_or(f64::NAN)
        );
    }
    println!(
        "best trial {} with mean accuracy {:.3}",
        out.best.trial_id,
        out.best.mean_score.unwrap()
    );
    println!("log at {}", path.display());
    Ok(())
}
