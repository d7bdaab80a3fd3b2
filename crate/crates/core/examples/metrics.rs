//! Risk-adjusted return metrics, per-class MCC and a block-bootstrap
//! significance test.
//!
//! cargo run --release --example metrics

use kmrf::metrics::{mcc_per_class, significance_test, Dispersion, MetricBlock};
use kmrf::regime::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> kmrf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 0.01).expect("valid sd");
    let bench: Vec<f64> = (0..252).map(|_| noise.sample(&mut rng)).collect();
    let model: Vec<f64> = bench
        .iter()
        .map(|b| 0.5 * b + 0.0008 + noise.sample(&mut rng) * 0.5)
        .collect();

    let truth: Vec<Label> = (0..252)
        .map(|_| Label::from_index(rng.random_range(0..3)))
        .collect();
    let pred: Vec<Label> = truth
        .iter()
        .map(|&l| {
            if rng.random_range(0.0..1.0) < 0.6 {
                l
            } else {
                Label::from_index(rng.random_range(0..3))
            }
        })
        .collect();

    let block = MetricBlock::compute(
        &model,
        Some(&bench),
        Some((&truth, &pred)),
        Dispersion::Population,
    )?;
    println!("{}", serde_json::to_string_pretty(&block)?);

    let mcc = mcc_per_class(&truth, &pred)?;
    println!("average MCC {:.3}", mcc.average);

    let vs_zero = significance_test(&model, None, 10, 2000, 1)?;
    let vs_bench = significance_test(&model, Some(&bench), 10, 2000, 1)?;
    println!(
        "mean daily return {:.5}: p = {:.4} against zero",
        vs_zero.observed_mean, vs_zero.p_value
    );
    println!(
        "mean excess over benchmark {:.5}: p = {:.4}",
        vs_bench.observed_mean, vs_bench.p_value
    );
    Ok(())
}
