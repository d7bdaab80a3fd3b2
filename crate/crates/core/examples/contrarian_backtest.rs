//! Turn class probabilities into contrarian and conventional positions, apply the
//! execution lag, and run the equal-weight long/short book with trading costs.
//!
//! cargo run --example contrarian_backtest

use kmrf::backtest::{
    apply_execution_lag, cumulative_performance, decide_positions, portfolio_returns, AssetBook,
    AssetClass, CostSchedule, SignalMode, DEFAULT_EXECUTION_LAG,
};
use kmrf::synthetic::{planted_universe, PlantedConfig};

fn main() -> kmrf::Result<()> {
    let u = planted_universe(
        &PlantedConfig {
            n_days: 400,
            ..Default::default()
        },
        1,
    )?;
    // Stand-in forecaster: the planted deviation from trend says which way the
    // next regime leans. Stretched above trend reads as bullish.
    for mode in [SignalMode::Contrarian, SignalMode::Conventional] {
        let books = u
            .assets
            .iter()
            .map(|a| {
                let probs: Vec<[f64; 3]> = a
                    .deviation
                    .iter()
                    .map(|&d| {
                        let b = 1.0 / (1.0 + (-60.0 * d).exp());
                        [0.8 * b, 0.8 * (1.0 - b), 0.2]
                    })
                    .collect();
                let decisions = decide_positions(&probs, mode, 0.5)?;
                let mut returns = vec![0.0];
                returns.extend(a.prices.close.windows(2).map(|w| w[1] / w[0] - 1.0));
                Ok(AssetBook {
                    asset_id: a.prices.asset_id.clone(),
                    dates: a.prices.dates.clone(),
                    positions: apply_execution_lag(&decisions, DEFAULT_EXECUTION_LAG),
                    returns,
                    costs: CostSchedule::for_class(AssetClass::Equities),
                })
            })
            .collect::<kmrf::Result<Vec<_>>>()?;
        let result = portfolio_returns(&books)?;
        let q = cumulative_performance(&result.net)?;
        let gross = cumulative_performance(&result.gross)?;
        println!(
            "{mode:?}: {} trades, costs {:.4}, final Q net {:.2} gross {:.2}",
            result.trades.len(),
            result.total_cost(),
            q.last().unwrap(),
            gross.last().unwrap()
        );
    }

    let c = CostSchedule::for_class(AssetClass::Equities);
    println!(
        "equities round trip {:.2}%: a +1% opening day nets {:.2}%, a +1% round trip nets {:.2}%",
        c.total_percent(),
        100.0 * (0.01 - c.per_leg()),
        100.0 * (0.01 - 2.0 * c.per_leg())
    );
    Ok(())
}
