//! Full run on a synthetic universe with planted regimes: tuning, feature
//! selection, final fit, test-span backtest and both baselines.
//!
//! cargo run --release --example synthetic_end_to_end -- [seed] [loose] [rigorous]

use kmrf::backtest::AssetClass;
use kmrf::pipeline::{run_pipeline, PipelineConfig, Universe};
use kmrf::synthetic::{planted_universe, PlantedConfig};
use kmrf::validation::{SearchSpace, SelectionConfig};

fn main() -> kmrf::Result<()> {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let seed = args.first().copied().unwrap_or(7);
    let mut config = PipelineConfig {
        seed,
        ..Default::default()
    };
    config.search.loose_trials = args.get(1).copied().unwrap_or(6) as usize;
    config.search.rigorous_trials = args.get(2).copied().unwrap_or(10) as usize;
    config.search.selection = SelectionConfig {
        n_trials: 10,
        ..Default::default()
    };
    config.search.space = SearchSpace {
        n_estimators: (10, 60),
        max_depth: (2, 8),
        min_samples_leaf: (20, 100),
        ..Default::default()
    };
    let universe = Universe::from_planted(
        &planted_universe(&PlantedConfig::default(), seed)?,
        AssetClass::Equities,
    );
    let t0 = std::time::Instant::now();
    let out = run_pipeline(&config, &universe, None)?;
    let r = &out.report;
    println!("selected: {:?}", r.selected_features);
    for (name, m) in &r.models {
        println!(
            "{name:<10} sortino {:>7.3}  final Q {:>8.2}  trades {:>4}  cost {:.4}  pre-entry {:?}",
            m.metrics.sortino.value,
            m.final_equity,
            m.n_trades,
            m.total_cost,
            m.mean_pre_entry_move
        );
    }
    if let Some(mcc) = &r.models["kmrf"].metrics.mcc {
        println!("mcc average {:.3}", mcc.average);
    }
    for (k, s) in &r.comparisons {
        println!("{k}: p = {:.3}", s.p_value);
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
    Ok(())
}
