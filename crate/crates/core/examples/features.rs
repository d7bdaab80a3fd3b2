//! Technical indicators and the default feature catalogue for one asset.
//!
//! cargo run --example features

use kmrf::features::{
    build_feature_matrix, efficiency_ratio, kama, rsi, FeatureConfig, KamaParams,
};
use kmrf::timeseries::{load_ohlcv, LoadOptions};

fn main() -> kmrf::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/synthetic/asset_b.csv");
    let prices = load_ohlcv(path, &LoadOptions::default())?;
    let p = KamaParams::default();
    let k = kama(&prices.close, p.er_window, p.fast, p.slow)?;
    let er = efficiency_ratio(&prices.close, p.er_window);
    let r = rsi(&prices.close, 14);
    println!("date        close     kama      ER     RSI14");
    for t in (30..prices.len()).step_by(200) {
        println!(
            "{}  {:>8.3} {:>8.3}  {:.3}  {:>6.2}",
            prices.dates[t], prices.close[t], k[t], er[t], r[t]
        );
    }

    let fm = build_feature_matrix(&prices, &FeatureConfig::default())?;
    println!("\n{} columns, warm-up {} rows:", fm.n_cols(), fm.max_lag);
    for name in &fm.feature_names {
        println!("  {name}");
    }
    Ok(())
}
