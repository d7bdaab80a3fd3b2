//! Write a planted-regime universe as OHLCV CSV files.
//!
//! cargo run --release --example generate_synthetic -- <out_dir> [seed]

use std::path::PathBuf;

use kmrf::synthetic::{planted_universe, PlantedConfig};

fn main() -> kmrf::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().unwrap_or_else(|| "synthetic_data".into()));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(42);
    std::fs::create_dir_all(&dir)?;
    let u = planted_universe(&PlantedConfig::default(), seed)?;
    for a in &u.assets {
        a.prices
            .write_csv(dir.join(format!("{}.csv", a.prices.asset_id)))?;
    }
    u.benchmark.write_csv(dir.join("benchmark.csv"))?;
    println!(
        "wrote {} assets and a benchmark to {}",
        u.assets.len(),
        dir.display()
    );
    Ok(())
}
