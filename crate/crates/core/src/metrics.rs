//! Risk-adjusted return ratios, per-class Matthews correlation and a block-bootstrap
//! significance test. Ratios are annualised with `sqrt(252)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regime::Label;

pub const TRADING_DAYS: f64 = 252.0;

/// Why a metric value is not an ordinary finite number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricFlag {
    /// No negative excess return; the value is a signed infinity (or 0 for a zero mean).
    ZeroDownside,
    /// 0/0 or a zero denominator; the value is NaN (serialised as null).
    Undefined,
    /// Adjusted Sharpe exponent was negative.
    NegativeExponent,
    /// MCC denominator was zero; the value is 0 by convention.
    ZeroDenominator,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    #[serde(with = "nullable_f64")]
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flag: Option<MetricFlag>,
}

impl MetricValue {
    fn plain(value: f64) -> Self {
        Self { value, flag: None }
    }

    fn flagged(value: f64, flag: MetricFlag) -> Self {
        Self {
            value,
            flag: Some(flag),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite()
    }
}

/// JSON has no NaN or infinity: NaN becomes null, infinities become "inf"/"-inf".
mod nullable_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_nan() {
            s.serialize_none()
        } else if v.is_infinite() {
            s.serialize_str(if *v > 0.0 { "inf" } else { "-inf" })
        } else {
            s.serialize_f64(*v)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(match Option::<Repr>::deserialize(d)? {
            None => f64::NAN,
            Some(Repr::Num(v)) => v,
            Some(Repr::Str(s)) if s == "inf" => f64::INFINITY,
            Some(Repr::Str(s)) if s == "-inf" => f64::NEG_INFINITY,
            Some(Repr::Str(s)) => return Err(serde::de::Error::custom(format!("bad number {s}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dispersion {
    /// Divide by T.
    #[default]
    Population,
    /// Divide by T - 1.
    Sample,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn std_dev(x: &[f64], d: Dispersion) -> f64 {
    let m = mean(x);
    let ss: f64 = x.iter().map(|v| (v - m).powi(2)).sum();
    let denom = match d {
        Dispersion::Population => x.len() as f64,
        Dispersion::Sample => (x.len() as f64 - 1.0).max(1.0),
    };
    (ss / denom).sqrt()
}

fn non_empty(r: &[f64]) -> Result<()> {
    if r.is_empty() {
        return Err(Error::InsufficientData(
            "metric on empty return series".into(),
        ));
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite return in metric input".into()));
    }
    Ok(())
}

/// Mean excess return over the full-sample downside deviation.
pub fn sortino(returns: &[f64], risk_free: f64) -> Result<MetricValue> {
    non_empty(returns)?;
    let excess: Vec<f64> = returns.iter().map(|r| r - risk_free).collect();
    let m = mean(&excess);
    let dd = (excess.iter().map(|e| e.min(0.0).powi(2)).sum::<f64>() / excess.len() as f64).sqrt();
    if dd == 0.0 {
        return Ok(if m == 0.0 {
            MetricValue::flagged(f64::NAN, MetricFlag::Undefined)
        } else {
            MetricValue::flagged(m.signum() * f64::INFINITY, MetricFlag::ZeroDownside)
        });
    }
    Ok(MetricValue::plain(m / dd * TRADING_DAYS.sqrt()))
}

/// `mean / sd^(mean / mean|.|)`. Not scale invariant because of the exponent.
pub fn adjusted_sharpe(
    returns: &[f64],
    risk_free: f64,
    dispersion: Dispersion,
) -> Result<MetricValue> {
    non_empty(returns)?;
    let excess: Vec<f64> = returns.iter().map(|r| r - risk_free).collect();
    let m = mean(&excess);
    let mean_abs = excess.iter().map(|e| e.abs()).sum::<f64>() / excess.len() as f64;
    let sd = std_dev(&excess, dispersion);
    if sd == 0.0 || mean_abs == 0.0 {
        return Ok(MetricValue::flagged(f64::NAN, MetricFlag::Undefined));
    }
    let exponent = m / mean_abs;
    let value = m / sd.powf(exponent) * TRADING_DAYS.sqrt();
    Ok(if exponent < 0.0 {
        MetricValue::flagged(value, MetricFlag::NegativeExponent)
    } else {
        MetricValue::plain(value)
    })
}

/// Mean active return over tracking error. Values above 1 are generally considered good.
pub fn information_ratio(
    model: &[f64],
    benchmark: &[f64],
    dispersion: Dispersion,
) -> Result<MetricValue> {
    if model.len() != benchmark.len() {
        return Err(Error::Alignment(format!(
            "{} model returns vs {} benchmark returns",
            model.len(),
            benchmark.len()
        )));
    }
    non_empty(model)?;
    non_empty(benchmark)?;
    let active: Vec<f64> = model.iter().zip(benchmark).map(|(a, b)| a - b).collect();
    let sd = std_dev(&active, dispersion);
    // Constant active returns leave rounding noise in the dispersion.
    let scale = active.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if sd <= 1e-14 * scale.max(f64::MIN_POSITIVE) || sd == 0.0 {
        return Ok(MetricValue::flagged(f64::NAN, MetricFlag::Undefined));
    }
    Ok(MetricValue::plain(mean(&active) / sd * TRADING_DAYS.sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn one_vs_rest(y_true: &[Label], y_pred: &[Label], class: Label) -> Self {
        let mut c = Confusion {
            tp: 0,
            tn: 0,
            fp: 0,
            fn_: 0,
        };
        for (t, p) in y_true.iter().zip(y_pred) {
            match (*t == class, *p == class) {
                (true, true) => c.tp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
                (true, false) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn mcc(&self) -> MetricValue {
        let (tp, tn, fp, fn_) = (
            self.tp as f64,
            self.tn as f64,
            self.fp as f64,
            self.fn_ as f64,
        );
        let denom = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
        if denom == 0.0 {
            return MetricValue::flagged(0.0, MetricFlag::ZeroDenominator);
        }
        MetricValue::plain((tp * tn - fp * fn_) / denom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MccBlock {
    pub bullish: MetricValue,
    pub bearish: MetricValue,
    pub other: MetricValue,
    /// Mean of the bullish and bearish values.
    pub average: f64,
}

pub fn mcc_per_class(y_true: &[Label], y_pred: &[Label]) -> Result<MccBlock> {
    if y_true.is_empty() {
        return Err(Error::InsufficientData(
            "MCC on empty label sequence".into(),
        ));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Alignment("label sequences differ in length".into()));
    }
    let m = |c| Confusion::one_vs_rest(y_true, y_pred, c).mcc();
    let (bullish, bearish, other) = (m(Label::Bullish), m(Label::Bearish), m(Label::Other));
    Ok(MccBlock {
        bullish,
        bearish,
        other,
        average: (bullish.value + bearish.value) / 2.0,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricBlock {
    pub sortino: MetricValue,
    pub adjusted_sharpe: MetricValue,
    /// Absent when no benchmark was supplied.
    pub information_ratio: Option<MetricValue>,
    pub mcc: Option<MccBlock>,
    pub risk_free: f64,
}

impl MetricBlock {
    pub fn compute(
        returns: &[f64],
        benchmark: Option<&[f64]>,
        labels: Option<(&[Label], &[Label])>,
        dispersion: Dispersion,
    ) -> Result<Self> {
        Ok(Self {
            sortino: sortino(returns, 0.0)?,
            adjusted_sharpe: adjusted_sharpe(returns, 0.0, dispersion)?,
            information_ratio: benchmark
                .map(|b| information_ratio(returns, b, dispersion))
                .transpose()?,
            mcc: labels.map(|(t, p)| mcc_per_class(t, p)).transpose()?,
            risk_free: 0.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub p_value: f64,
    /// Observed mean (difference) of daily returns.
    pub observed_mean: f64,
    pub n_boot: usize,
    pub block_len: usize,
}

/// Circular block bootstrap test of a zero mean (or zero mean difference when
/// `other` is given). The series is centred to impose the null, and the p-value is
/// `(1 + #{|mean*| >= |observed|}) / (1 + n_boot)`.
pub fn significance_test(
    model: &[f64],
    other: Option<&[f64]>,
    block_len: usize,
    n_boot: usize,
    seed: u64,
) -> Result<SignificanceResult> {
    if n_boot < 1000 {
        return Err(Error::Config(
            "significance test needs n_boot >= 1000".into(),
        ));
    }
    if block_len == 0 {
        return Err(Error::Config("block_len must be positive".into()));
    }
    let diff: Vec<f64> = match other {
        Some(o) if o.len() != model.len() => {
            return Err(Error::Alignment(
                "significance series differ in length".into(),
            ))
        }
        Some(o) => model.iter().zip(o).map(|(a, b)| a - b).collect(),
        None => model.to_vec(),
    };
    if diff.len() < block_len {
        return Err(Error::InsufficientData(format!(
            "series of {} days is shorter than block length {block_len}",
            diff.len()
        )));
    }
    non_empty(&diff)?;
    let n = diff.len();
    let observed = mean(&diff);
    let centred: Vec<f64> = diff.iter().map(|v| v - observed).collect();
    let threshold = observed.abs() * (1.0 - 1e-12);
    let extreme: usize = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            let mut total = 0.0;
            let mut drawn = 0;
            while drawn < n {
                let start = rng.random_range(0..n);
                for k in 0..block_len.min(n - drawn) {
                    total += centred[(start + k) % n];
                }
                drawn += block_len;
            }
            usize::from((total / n as f64).abs() >= threshold)
        })
        .sum();
    Ok(SignificanceResult {
        p_value: (1 + extreme) as f64 / (1 + n_boot) as f64,
        observed_mean: observed,
        n_boot,
        block_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sortino_cases() {
        assert_eq!(
            sortino(&[0.0, 0.0, 0.0], 0.0).unwrap().flag,
            Some(MetricFlag::Undefined)
        );
        assert_eq!(sortino(&[0.01, -0.01], 0.0).unwrap().value, 0.0);
        let r = [0.02, -0.01, 0.03, -0.02];
        // mean 0.005, downside sqrt((1e-4 + 4e-4)/4)
        let expected = 0.005 / (5e-4f64 / 4.0).sqrt() * 252f64.sqrt();
        assert!((sortino(&r, 0.0).unwrap().value - expected).abs() < 1e-12);
        let up = sortino(&[0.01, 0.02], 0.0).unwrap();
        assert_eq!(up.value, f64::INFINITY);
        assert_eq!(up.flag, Some(MetricFlag::ZeroDownside));
    }

    #[test]
    fn adjusted_sharpe_cases() {
        let r = [0.01, 0.03, 0.02];
        let sd = std_dev(&r, Dispersion::Population);
        let asr = adjusted_sharpe(&r, 0.0, Dispersion::Population).unwrap();
        assert!((asr.value - 0.02 / sd * 252f64.sqrt()).abs() < 1e-10);
        assert_eq!(
            adjusted_sharpe(&[0.01, -0.01], 0.0, Dispersion::Population)
                .unwrap()
                .value,
            0.0
        );
        let neg = adjusted_sharpe(&[-0.02, 0.01, -0.01], 0.0, Dispersion::Population).unwrap();
        assert_eq!(neg.flag, Some(MetricFlag::NegativeExponent));
    }

    #[test]
    fn information_ratio_degenerate() {
        let b = [0.01, -0.02, 0.005];
        assert_eq!(
            information_ratio(&b, &b, Dispersion::Population)
                .unwrap()
                .flag,
            Some(MetricFlag::Undefined)
        );
        let shifted: Vec<f64> = b.iter().map(|v| v + 0.001).collect();
        assert_eq!(
            information_ratio(&shifted, &b, Dispersion::Population)
                .unwrap()
                .flag,
            Some(MetricFlag::Undefined)
        );
        assert!(information_ratio(&b, &b[..2], Dispersion::Population).is_err());
    }

    #[test]
    fn mcc_cases() {
        use Label::*;
        let t = [Bullish, Bearish, Other, Bullish, Bearish, Other];
        let perfect = mcc_per_class(&t, &t).unwrap();
        assert_eq!(
            (
                perfect.bullish.value,
                perfect.bearish.value,
                perfect.other.value
            ),
            (1.0, 1.0, 1.0)
        );
        let swapped: Vec<Label> = t
            .iter()
            .map(|l| match l {
                Bullish => Bearish,
                Bearish => Other,
                Other => Bullish,
            })
            .collect();
        let anti = mcc_per_class(&t, &swapped).unwrap();
        assert!(anti.bullish.value < 0.0 && anti.bearish.value < 0.0);
        let c = Confusion {
            tp: 8,
            tn: 80,
            fp: 4,
            fn_: 8,
        };
        let expected = (8.0 * 80.0 - 4.0 * 8.0) / (12.0f64 * 16.0 * 84.0 * 88.0).sqrt();
        assert!((c.mcc().value - expected).abs() < 1e-15);
        assert!(mcc_per_class(&[], &[]).is_err());
        let one_class = mcc_per_class(&[Other, Other], &[Other, Other]).unwrap();
        assert_eq!(one_class.bullish.flag, Some(MetricFlag::ZeroDenominator));
    }

    #[test]
    fn scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r: Vec<f64> = (0..100).map(|_| rng.random_range(-0.02..0.02)).collect();
        let b: Vec<f64> = (0..100).map(|_| rng.random_range(-0.02..0.02)).collect();
        for k in [0.5, 3.0, 17.0] {
            let rk: Vec<f64> = r.iter().map(|v| v * k).collect();
            let bk: Vec<f64> = b.iter().map(|v| v * k).collect();
            let s0 = sortino(&r, 0.0).unwrap().value;
            assert!((sortino(&rk, 0.0).unwrap().value - s0).abs() < 1e-10 * s0.abs().max(1.0));
            let i0 = information_ratio(&r, &b, Dispersion::Population)
                .unwrap()
                .value;
            let ik = information_ratio(&rk, &bk, Dispersion::Population)
                .unwrap()
                .value;
            assert!((ik - i0).abs() < 1e-10 * i0.abs().max(1.0));
        }
    }

    #[test]
    fn significance() {
        let zeros = vec![0.0; 300];
        let up = vec![0.01; 300];
        assert!(
            significance_test(&up, Some(&zeros), 10, 1000, 1)
                .unwrap()
                .p_value
                < 0.01
        );
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r: Vec<f64> = (0..300).map(|_| rng.random_range(-0.02..0.02)).collect();
        assert!(
            significance_test(&r, Some(&r), 10, 1000, 1)
                .unwrap()
                .p_value
                > 0.99
        );
        assert!(significance_test(&r[..5], None, 10, 1000, 1).is_err());
        assert!(significance_test(&r, None, 10, 999, 1).is_err());
    }

    #[test]
    fn metric_value_json() {
        let v = MetricValue::flagged(f64::NAN, MetricFlag::Undefined);
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(s, r#"{"value":null,"flag":"undefined"}"#);
        let back: MetricValue = serde_json::from_str(&s).unwrap();
        assert!(back.value.is_nan());
        let inf: MetricValue = serde_json::from_str(
            &serde_json::to_string(&MetricValue::plain(f64::NEG_INFINITY)).unwrap(),
        )
        .unwrap();
        assert_eq!(inf.value, f64::NEG_INFINITY);
    }
}
