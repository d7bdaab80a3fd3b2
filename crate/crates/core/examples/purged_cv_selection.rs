//! Purged expanding-window folds and shadow-feature selection on a dataset
//! with five informative columns and twenty noise columns.
//!
//! cargo run --release --example purged_cv_selection

use kmrf::forest::ForestHyperparams;
use kmrf::matrix::Matrix;
use kmrf::regime::Label;
use kmrf::validation::{make_splits_for, select_features, SelectionConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> kmrf::Result<()> {
    let n = 1000;
    let plan = make_splits_for(n, 4, 20, 10)?;
    plan.check_invariants()?;
    for (k, f) in plan.folds.iter().enumerate() {
        println!(
            "fold {k}: train days 0..={}, validate {}..={}",
            f.train.last().unwrap(),
            f.validation[0],
            f.validation.last().unwrap()
        );
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut rows, mut y) = (Vec::new(), Vec::new());
    for _ in 0..n {
        let r: Vec<f64> = (0..25).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s =
            r[0] + 0.9 * r[1] + 0.8 * r[2] + 0.7 * r[3] + 0.6 * r[4] + rng.random_range(-0.3..0.3);
        y.push(if s > 0.6 {
            Label::Bullish
        } else if s < -0.6 {
            Label::Bearish
        } else {
            Label::Other
        });
        rows.push(r);
    }
    let names: Vec<String> = (0..25)
        .map(|i| {
            if i < 5 {
                format!("signal_{i}")
            } else {
                format!("noise_{i}")
            }
        })
        .collect();
    let row_day: Vec<usize> = (0..n).collect();
    let hp = ForestHyperparams {
        n_estimators: 30,
        max_depth: 6,
        max_features: 0.5,
        ..Default::default()
    };
    let sel = select_features(
        &Matrix::from_rows(&rows)?,
        &y,
        &names,
        &plan,
        &row_day,
        &hp,
        &SelectionConfig::default(),
        1,
    )?;
    for v in &sel.verdicts {
        println!(
            "{:<10} hits {:>2}/{}  p {:.4}  {:?}",
            v.feature, v.hits, sel.n_trials, v.p_value, v.decision
        );
    }
    println!("kept: {:?}", sel.kept());
    Ok(())
}
