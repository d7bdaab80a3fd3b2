//! Train a random forest on pooled feature rows, inspect permutation
//! importance, and round-trip the model through JSON.
//!
//! cargo run --release --example forest

use kmrf::features::{build_feature_matrix, FeatureConfig};
use kmrf::forest::{accuracy, fit_forest, permutation_importance, ForestHyperparams, ForestModel};
use kmrf::matrix::Matrix;
use kmrf::regime::{label_regimes, Label, RegimeConfig};
use kmrf::synthetic::{planted_universe, PlantedConfig};

fn main() -> kmrf::Result<()> {
    let u = planted_universe(&PlantedConfig::default(), 3)?;
    let (mut rows, mut y) = (Vec::new(), Vec::new());
    let mut names = Vec::new();
    for a in &u.assets {
        let fm = build_feature_matrix(&a.prices, &FeatureConfig::default())?;
        let labels = label_regimes(&a.prices, &RegimeConfig::default(), 0.004)?
            .segmentation
            .target_label;
        for t in fm.max_lag..fm.n_rows() - 1 {
            if fm.values[t].iter().all(|v| v.is_finite()) {
                rows.push(fm.values[t].clone());
                y.push(labels[t + 1]);
            }
        }
        names = fm.feature_names;
    }
    let x = Matrix::from_rows(&rows)?;
    let cut = x.n_rows() * 4 / 5;
    let train: Vec<usize> = (0..cut).collect();
    let test: Vec<usize> = (cut..x.n_rows()).collect();
    let (xt, xv) = (x.select_rows(&train), x.select_rows(&test));
    let (yt, yv): (Vec<Label>, Vec<Label>) = (y[..cut].to_vec(), y[cut..].to_vec());

    let hp = ForestHyperparams {
        n_estimators: 100,
        max_depth: 8,
        min_samples_leaf: 20,
        ..Default::default()
    };
    let model = fit_forest(&xt, &yt, &hp, 11, &names)?;
    let pred = model.predict(&xv)?;
    println!(
        "held-out accuracy {:.3} on {} rows",
        accuracy(&yv, &pred),
        yv.len()
    );

    let mut imp = permutation_importance(&model, &xv, &yv, accuracy, 3, 5)?;
    imp.sort_by(|a, b| b.mean.total_cmp(&a.mean));
    for f in imp.iter().take(8) {
        println!("  {:<22} {:+.4} ± {:.4}", f.feature, f.mean, f.std);
    }

    let json = model.to_json()?;
    let back = ForestModel::from_json(&json)?;
    assert_eq!(back.predict(&xv)?, pred);
    println!(
        "model JSON is {} bytes and reloads to identical predictions",
        json.len()
    );
    Ok(())
}
