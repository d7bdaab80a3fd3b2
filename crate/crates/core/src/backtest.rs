//! Positions from predicted regime probabilities, and equal-weight long/short
//! portfolio returns net of transaction costs.

use std::fmt;
use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forest::argmax;
use crate::regime::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    Long,
    Short,
    Flat,
}

impl Position {
    pub fn sign(self) -> f64 {
        match self {
            Position::Long => 1.0,
            Position::Short => -1.0,
            Position::Flat => 0.0,
        }
    }

    pub fn flipped(self) -> Position {
        match self {
            Position::Long => Position::Short,
            Position::Short => Position::Long,
            Position::Flat => Position::Flat,
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Position::Long => "long",
            Position::Short => "short",
            Position::Flat => "flat",
        })
    }
}

/// How a predicted regime maps to a trade.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalMode {
    /// Fade the predicted regime: short a predicted bullish run, buy a predicted bearish one.
    #[default]
    Contrarian,
    Conventional,
}

impl std::str::FromStr for SignalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "contrarian" => Ok(SignalMode::Contrarian),
            "conventional" => Ok(SignalMode::Conventional),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

pub fn position_for(label: Label, mode: SignalMode) -> Position {
    let conventional = match label {
        Label::Bullish => Position::Long,
        Label::Bearish => Position::Short,
        Label::Other => Position::Flat,
    };
    match mode {
        SignalMode::Conventional => conventional,
        SignalMode::Contrarian => conventional.flipped(),
    }
}

/// Argmax class when its probability reaches `threshold`, otherwise `Other`.
pub fn decide_class(probs: &[f64; 3], threshold: f64) -> Label {
    let best = argmax(probs);
    if probs[best.index()] >= threshold {
        best
    } else {
        Label::Other
    }
}

pub fn decide_positions(
    probs: &[[f64; 3]],
    mode: SignalMode,
    threshold: f64,
) -> Result<Vec<Position>> {
    for (t, p) in probs.iter().enumerate() {
        if p.iter().any(|v| !(0.0..=1.0 + 1e-9).contains(v))
            || (p.iter().sum::<f64>() - 1.0).abs() > 1e-6
        {
            return Err(Error::Domain(format!(
                "invalid probability vector at day {t}: {p:?}"
            )));
        }
    }
    Ok(probs
        .iter()
        .map(|p| position_for(decide_class(p, threshold), mode))
        .collect())
}

/// Decisions made from day `t` data are held over day `t + lag`'s return.
/// With close-to-close returns, `lag = 2` means: decide after the close of `t`,
/// fill at the close of `t + 1`.
pub fn apply_execution_lag(decisions: &[Position], lag: usize) -> Vec<Position> {
    (0..decisions.len())
        .map(|t| {
            if t < lag {
                Position::Flat
            } else {
                decisions[t - lag]
            }
        })
        .collect()
}

pub const DEFAULT_EXECUTION_LAG: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetClass {
    Equities,
    Commodities,
    Fx,
}

impl fmt::Display for AssetClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AssetClass::Equities => "equities",
            AssetClass::Commodities => "commodities",
            AssetClass::Fx => "fx",
        })
    }
}

/// Two-way trading costs in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostSchedule {
    pub brokerage: f64,
    pub bid_ask: f64,
    pub market_impact: f64,
}

impl CostSchedule {
    pub fn for_class(class: AssetClass) -> Self {
        match class {
            AssetClass::Equities => Self {
                brokerage: 0.07,
                bid_ask: 0.065,
                market_impact: 0.265,
            },
            AssetClass::Commodities => Self {
                brokerage: 0.14,
                bid_ask: 0.13,
                market_impact: 0.0,
            },
            AssetClass::Fx => Self {
                brokerage: 0.0,
                bid_ask: 0.13,
                market_impact: 0.0,
            },
        }
    }

    pub fn zero() -> Self {
        Self {
            brokerage: 0.0,
            bid_ask: 0.0,
            market_impact: 0.0,
        }
    }

    /// Two-way total in percent.
    pub fn total_percent(&self) -> f64 {
        self.brokerage + self.bid_ask + self.market_impact
    }

    /// Cost debited per leg (open or close), as a return fraction.
    pub fn per_leg(&self) -> f64 {
        self.total_percent() / 100.0 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        if [self.brokerage, self.bid_ask, self.market_impact]
            .iter()
            .any(|c| !(c.is_finite() && *c >= 0.0))
        {
            return Err(Error::Config(
                "cost components must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// One asset's held positions and realised returns on a common calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetBook {
    pub asset_id: String,
    pub dates: Vec<NaiveDate>,
    /// Position held over each day's return.
    pub positions: Vec<Position>,
    /// Close-to-close return of each day.
    pub returns: Vec<f64>,
    pub costs: CostSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub asset_id: String,
    /// First day whose return the position earns.
    pub open_date: NaiveDate,
    /// Last day whose return the position earns.
    pub close_date: NaiveDate,
    pub side: Position,
    pub holding_days: usize,
    /// Compounded side-signed asset return over the holding period, before costs.
    pub gross_return: f64,
    /// Portfolio-level cost debits attributed to this trade (open plus close legs).
    pub cost: f64,
    /// Side-signed asset move over a lookback window ending at the entry fill, when known.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pre_entry_move: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestResult {
    pub dates: Vec<NaiveDate>,
    /// Daily portfolio return net of costs.
    pub net: Vec<f64>,
    pub gross: Vec<f64>,
    pub trades: Vec<Trade>,
    pub long_weight: Vec<f64>,
    pub short_weight: Vec<f64>,
}

impl BacktestResult {
    pub fn total_cost(&self) -> f64 {
        self.trades.iter().map(|t| t.cost).sum()
    }
}

/// Equal-weight long and short books, each normalised to 1 when non-empty. An
/// asset whose position opens or closes on a day is debited half the two-way cost
/// for each leg, weighted by its book weight on the day the position is held
/// (open) or was last held (close). Positions still open on the final day are
/// closed there.
pub fn portfolio_returns(books: &[AssetBook]) -> Result<BacktestResult> {
    let Some(first) = books.first() else {
        return Err(Error::InsufficientData("no assets in backtest".into()));
    };
    let dates = first.dates.clone();
    let n = dates.len();
    for b in books {
        if b.dates != dates {
            return Err(Error::Alignment(format!(
                "asset {} is not on the common calendar",
                b.asset_id
            )));
        }
        if b.positions.len() != n || b.returns.len() != n {
            return Err(Error::Shape(format!(
                "asset {} positions/returns length mismatch",
                b.asset_id
            )));
        }
        if let Some(t) = b.returns.iter().position(|r| !r.is_finite()) {
            return Err(Error::Numerical(format!(
                "asset {} has a non-finite return at day {t}",
                b.asset_id
            )));
        }
        b.costs.validate()?;
    }

    let weight = |t: usize, b: &AssetBook| -> f64 {
        let p = b.positions[t];
        if p == Position::Flat {
            return 0.0;
        }
        let count = books.iter().filter(|o| o.positions[t] == p).count();
        1.0 / count as f64
    };
    let weights: Vec<Vec<f64>> = (0..n)
        .map(|t| books.iter().map(|b| weight(t, b)).collect())
        .collect();

    let mut net = vec![0.0; n];
    let mut gross = vec![0.0; n];
    let mut long_weight = vec![0.0; n];
    let mut short_weight = vec![0.0; n];
    let mut trades = Vec::new();

    for (i, b) in books.iter().enumerate() {
        let leg = b.costs.per_leg();
        let mut open: Option<(usize, f64)> = None;
        for t in 0..n {
            let pos = b.positions[t];
            let prev = if t == 0 {
                Position::Flat
            } else {
                b.positions[t - 1]
            };
            let w = weights[t][i];
            let contrib = w * pos.sign() * b.returns[t];
            gross[t] += contrib;
            net[t] += contrib;
            match pos {
                Position::Long => long_weight[t] += w,
                Position::Short => short_weight[t] += w,
                Position::Flat => {}
            }
            if pos != prev {
                if prev != Position::Flat {
                    let debit = weights[t - 1][i] * leg;
                    net[t] -= debit;
                    let (start, cost) = open.take().expect("open trade for non-flat position");
                    trades.push(close_trade(b, start, t - 1, cost + debit));
                }
                if pos != Position::Flat {
                    let debit = w * leg;
                    net[t] -= debit;
                    open = Some((t, debit));
                }
            }
        }
        if let Some((start, cost)) = open {
            let debit = weights[n - 1][i] * leg;
            net[n - 1] -= debit;
            trades.push(close_trade(b, start, n - 1, cost + debit));
        }
    }
    trades.sort_by(|a, b| {
        a.open_date
            .cmp(&b.open_date)
            .then_with(|| a.asset_id.cmp(&b.asset_id))
    });
    Ok(BacktestResult {
        dates,
        net,
        gross,
        trades,
        long_weight,
        short_weight,
    })
}

fn close_trade(b: &AssetBook, start: usize, end: usize, cost: f64) -> Trade {
    let side = b.positions[start];
    let growth: f64 = b.returns[start..=end]
        .iter()
        .map(|r| 1.0 + side.sign() * r)
        .product();
    Trade {
        asset_id: b.asset_id.clone(),
        open_date: b.dates[start],
        close_date: b.dates[end],
        side,
        holding_days: end - start + 1,
        gross_return: growth - 1.0,
        cost,
        pre_entry_move: None,
    }
}

/// Wealth path `Q(t) = 100 * prod_{s <= t} (1 + r(s))`, excluding the initial 100.
pub fn cumulative_performance(returns: &[f64]) -> Result<Vec<f64>> {
    let mut q = 100.0;
    let mut out = Vec::with_capacity(returns.len());
    for (day, r) in returns.iter().enumerate() {
        if !(*r > -1.0) {
            return Err(Error::Ruin { day, value: *r });
        }
        q *= 1.0 + r;
        out.push(q);
    }
    Ok(out)
}

/// Uncompounded index level rebased to 100 at the first close.
pub fn benchmark_curve(closes: &[f64]) -> Vec<f64> {
    match closes.first() {
        Some(&p0) => closes.iter().map(|p| 100.0 * p / p0).collect(),
        None => Vec::new(),
    }
}

pub fn write_trades_csv(path: &Path, header_comment: &str, trades: &[Trade]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "# {header_comment}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record([
        "asset_id",
        "open_date",
        "close_date",
        "side",
        "holding_days",
        "gross_return",
        "cost",
        "pre_entry_move",
    ])?;
    for t in trades {
        w.write_record([
            t.asset_id.clone(),
            t.open_date.to_string(),
            t.close_date.to_string(),
            t.side.to_string(),
            t.holding_days.to_string(),
            t.gross_return.to_string(),
            t.cost.to_string(),
            t.pre_entry_move.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
