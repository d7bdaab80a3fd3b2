//! Fit the two-state switching model, combine it with the KAMA trend, and turn
//! the four-state segmentation into cost-filtered trading labels.
//!
//! cargo run --example regime_labels

use kmrf::backtest::{AssetClass, CostSchedule};
use kmrf::regime::{label_regimes, FourState, Label, RegimeConfig};
use kmrf::timeseries::{load_ohlcv, LoadOptions};

fn main() -> kmrf::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/synthetic/asset_c.csv");
    let prices = load_ohlcv(path, &LoadOptions::default())?;
    let cost = CostSchedule::for_class(AssetClass::Equities).total_percent() / 100.0;
    let l = label_regimes(&prices, &RegimeConfig::default(), cost)?;

    let m = &l.msr;
    println!(
        "low-variance state:  mean {:+.5}  sd {:.5}  stay {:.3}",
        m.mu[0],
        m.sigma2[0].sqrt(),
        m.transition[0][0]
    );
    println!(
        "high-variance state: mean {:+.5}  sd {:.5}  stay {:.3}",
        m.mu[1],
        m.sigma2[1].sqrt(),
        m.transition[1][1]
    );
    println!(
        "EM iterations {}, log-likelihood {:.2}",
        m.trace.iterations, m.log_likelihood
    );

    let seg = &l.segmentation;
    for s in [
        FourState::LvBull,
        FourState::LvBear,
        FourState::HvBull,
        FourState::HvBear,
    ] {
        let n = seg.four_state.iter().filter(|&&x| x == s).count();
        println!("{s:?}: {n} days");
    }
    for lab in Label::ALL {
        let n = seg.target_label.iter().filter(|&&x| x == lab).count();
        println!("label {lab}: {n} days");
    }
    let out = std::env::temp_dir().join("kmrf_labels_asset_c.csv");
    seg.write_csv(&out)?;
    println!("segmentation written to {}", out.display());
    Ok(())
}
