//! Run the full pipeline from a TOML configuration and write its artifacts.
//!
//! cargo run --release --example pipeline_from_config -- [config.toml] [out_dir]

use std::path::PathBuf;

use kmrf::pipeline::{render_report, run_pipeline, Artifacts, PipelineConfig, Universe};

fn main() -> kmrf::Result<()> {
    let mut args = std::env::args().skip(1);
    let config_path = args.next().map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(concat!(
            env!("CARGO_MANIFEST_DIR"),
            "/configs/synthetic/config.toml"
        ))
    });
    let mut config = PipelineConfig::from_toml_file(&config_path)?;
    config.output_dir = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("kmrf_run"));

    let artifacts = Artifacts::create(&config.output_dir, &config)?;
    let universe = Universe::load(&config)?;
    let outcome = run_pipeline(&config, &universe, Some(&artifacts))?;
    print!("{}", render_report(artifacts.dir())?);
    let kmrf = &outcome.backtests["kmrf"];
    println!(
        "{} kmrf trades, first: {:?}",
        kmrf.trades.len(),
        kmrf.trades.first()
    );
    println!("artifacts in {}", artifacts.dir().display());
    Ok(())
}
