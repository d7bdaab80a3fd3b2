//! Fractional differencing of a log price series for a range of orders.
//!
//! cargo run --example fracdiff

use kmrf::timeseries::{frac_diff, frac_diff_weights, load_ohlcv, LoadOptions};

fn main() -> kmrf::Result<()> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/configs/synthetic/asset_a.csv");
    let prices = load_ohlcv(path, &LoadOptions::default())?;
    let logs: Vec<f64> = prices.close.iter().map(|c| c.ln()).collect();

    println!(
        "first weights at d = 0.4: {:?}",
        frac_diff_weights(0.4, 1e-4, 8)
    );
    for d in [0.0, 0.2, 0.4, 0.6, 1.0] {
        let fd = frac_diff(&logs, d, 1e-4)?;
        let v = fd.available();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        let lag1 = v
            .windows(2)
            .map(|w| (w[0] - mean) * (w[1] - mean))
            .sum::<f64>()
            / (v.len() as f64 * sd * sd);
        println!(
            "d = {d:.1}  warm-up {:>4}  mean {mean:>8.4}  sd {sd:.4}  lag-1 autocorr {lag1:.3}",
            fd.warmup
        );
    }
    Ok(())
}
