//! Fit a Gaussian HMM to daily returns and trade its one-step-ahead state forecast.
//!
//! cargo run --release --example hmm_baseline

use kmrf::backtest::{Position, SignalMode};
use kmrf::hmm::{fit_hmm, hmm_signals, HmmModel};
use kmrf::timeseries::{load_ohlcv, simple_returns, LoadOptions};

fn main() -> kmrf::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/synthetic/asset_a.csv");
    let prices = load_ohlcv(path, &LoadOptions::default())?;
    let r = simple_returns(&prices)?.values;
    let (train, test) = r.split_at(r.len() * 85 / 100);

    let model = fit_hmm(train, 3, 300, 1e-8, 1)?;
    for k in 0..model.n_states {
        println!(
            "state {k}: mean {:+.5}  sd {:.5}  stay {:.3}",
            model.means[k],
            model.variances[k].sqrt(),
            model.transition[k][k]
        );
    }
    println!(
        "log-likelihood {:.2} after {} iterations",
        model.log_likelihood, model.trace.iterations
    );

    let signals = hmm_signals(&model, &r, 0.0, SignalMode::Conventional)?;
    // signals[i] is decided after return i and earns return i + 1.
    let mut pnl = 0.0;
    for i in train.len() - 1..r.len() - 1 {
        pnl += signals[i].sign() * r[i + 1];
    }
    let longs = signals[train.len()..]
        .iter()
        .filter(|p| **p == Position::Long)
        .count();
    println!(
        "test span: {} days, {longs} long days, summed return {pnl:+.4}",
        test.len()
    );

    let back = HmmModel::from_json(&model.to_json()?)?;
    assert_eq!(back, model);
    Ok(())
}
