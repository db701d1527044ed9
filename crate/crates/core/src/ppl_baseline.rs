//! Perplexity-threshold routing: answer when the base prediction's perplexity
//! is at most `tau`, search otherwise.
//!
//! Two calibration strategies are offered. `max-f1` sweeps every threshold
//! that yields a distinct answer/search partition (midpoints between
//! consecutive distinct perplexities, plus the two infinite sentinels) and
//! keeps the best F1, preferring the smaller `tau` on ties. A sweep point
//! where F1 is undefined (nothing answered and no correct item) scores 0.
//! `target-search-rate` picks the threshold that searches the requested
//! fraction of items.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{Judgment, Output};
use crate::inference::Prediction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Calibration {
    MaxF1,
    TargetSearchRate,
}

impl FromStr for Calibration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max-f1" => Ok(Calibration::MaxF1),
            "target-search-rate" => Ok(Calibration::TargetSearchRate),
            other => Err(Error::Config(format!("unknown calibration strategy `{other}`"))),
        }
    }
}

/// Threshold value in raw-perplexity units. The infinite sentinels serialize
/// as the strings `"+inf"` and `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tau(pub f64);

impl Tau {
    pub const NEVER_SEARCH: Tau = Tau(f64::INFINITY);
    pub const ALWAYS_SEARCH: Tau = Tau(f64::NEG_INFINITY);
}

impl fmt::Display for Tau {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == f64::INFINITY {
            f.write_str("+inf")
        } else if self.0 == f64::NEG_INFINITY {
            f.write_str("-inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Tau {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Tau {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Tau(v)),
            Raw::Str(s) if s == "+inf" => Ok(Tau::NEVER_SEARCH),
            Raw::Str(s) if s == "-inf" => Ok(Tau::ALWAYS_SEARCH),
            Raw::Str(s) => Err(de::Error::custom(format!("invalid threshold {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplThreshold {
    pub tau: Tau,
    pub strategy: Calibration,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_rate: Option<f64>,
    pub fitted_on: String,
}

impl PplThreshold {
    pub fn new(tau: Tau, strategy: Calibration, target_rate: Option<f64>, fitted_on: impl Into<String>) -> Result<Self> {
        let t = Self {
            tau,
            strategy,
            target_rate,
            fitted_on: fitted_on.into(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.0.is_nan() || (self.tau.0.is_finite() && self.tau.0 <= 0.0) {
            return Err(Error::Domain(format!(
                "threshold must be positive or an infinite sentinel, got {}",
                self.tau
            )));
        }
        if self.fitted_on.trim().is_empty() {
            return Err(Error::Domain("threshold provenance is empty".to_string()));
        }
        if let Some(r) = self.target_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Domain(format!("target rate {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Answer,
    Search,
}

/// A calibration item: a prediction's perplexity and whether it was correct.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub perplexity: f64,
    pub correct: bool,
}

impl Scored {
    pub fn new(perplexity: f64, correct: bool) -> Self {
        Self { perplexity, correct }
    }
}

pub fn decide_perplexity(perplexity: f64, tau: Tau) -> Result<Decision> {
    if !perplexity.is_finite() {
        return Err(Error::Domain(format!("non-finite perplexity {perplexity}")));
    }
    Ok(if perplexity > tau.0 {
        Decision::Search
    } else {
        Decision::Answer
    })
}

pub fn decide(prediction: &Prediction, threshold: &PplThreshold) -> Result<Decision> {
    decide_perplexity(prediction.perplexity, threshold.tau)
        .map_err(|e| Error::Domain(format!("record `{}`: {e}", prediction.record_id)))
}

/// The routed output: the base prediction unchanged, or a search.
pub fn route(prediction: &Prediction, threshold: &PplThreshold) -> Result<Output> {
    Ok(match decide(prediction, threshold)? {
        Decision::Answer => Output::Text(prediction.text.clone()),
        Decision::Search => Output::Search,
    })
}

/// Adapted judgment under routing: answered items keep their base judgment.
pub fn routed_judgment(base: Judgment, decision: Decision) -> Judgment {
    match decision {
        Decision::Answer => base,
        Decision::Search => Judgment::Search,
    }
}

fn midpoint(a: f64, b: f64) -> f64 {
    a + (b - a) / 2.0
}

fn sorted_values(scored: &[Scored]) -> Result<Vec<Scored>> {
    if scored.is_empty() {
        return Err(Error::Domain("cannot calibrate on an empty set".to_string()));
    }
    if let Some(bad) = scored.iter().find(|s| !(s.perplexity.is_finite() && s.perplexity > 0.0)) {
        return Err(Error::Domain(format!(
            "perplexity {} is not a finite positive value",
            bad.perplexity
        )));
    }
    let mut v = scored.to_vec();
    v.sort_by(|a, b| a.perplexity.partial_cmp(&b.perplexity).unwrap_or(Ordering::Equal));
    Ok(v)
}

/// Rational F1 `2tp / (2tp + fp + fn)`, with 0/0 treated as 0.
#[derive(Clone, Copy)]
struct F1Ratio {
    num: u64,
    den: u64,
}

impl F1Ratio {
    fn new(tp: u64, fp: u64, fn_: u64) -> Self {
        let den = 2 * tp + fp + fn_;
        if den == 0 {
            Self { num: 0, den: 1 }
        } else {
            Self { num: 2 * tp, den }
        }
    }

    fn gt(self, other: Self) -> bool {
        (self.num as u128) * (other.den as u128) > (other.num as u128) * (self.den as u128)
    }
}

fn max_f1(sorted: &[Scored]) -> Tau {
    let total_correct = sorted.iter().filter(|s| s.correct).count() as u64;
    // Answering nothing: tp = fp = 0, every correct item is a false negative.
    let mut best_tau = Tau::ALWAYS_SEARCH;
    let mut best = F1Ratio::new(0, 0, total_correct);
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].perplexity;
        while i < sorted.len() && sorted[i].perplexity == v {
            if sorted[i].correct {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let tau = if i < sorted.len() {
            Tau(midpoint(v, sorted[i].perplexity))
        } else {
            Tau::NEVER_SEARCH
        };
        let score = F1Ratio::new(tp, fp, total_correct - tp);
        if score.gt(best) {
            best = score;
            best_tau = tau;
        }
    }
    best_tau
}

fn quantile(sorted: &[Scored], target_rate: f64) -> Result<Tau> {
    if !(0.0..=1.0).contains(&target_rate) {
        return Err(Error::Domain(format!("target search rate {target_rate} outside [0, 1]")));
    }
    let n = sorted.len();
    let searched = (target_rate * n as f64).round() as usize;
    let answered = n - searched.min(n);
    if answered == 0 {
        return Ok(Tau::ALWAYS_SEARCH);
    }
    // Ties with the last answered value are answered as well.
    let v = sorted[answered - 1].perplexity;
    Ok(match sorted[answered..].iter().find(|s| s.perplexity > v) {
        Some(next) => Tau(midpoint(v, next.perplexity)),
        None => Tau::NEVER_SEARCH,
    })
}

pub fn calibrate(
    scored: &[Scored],
    strategy: Calibration,
    target_rate: Option<f64>,
    fitted_on: impl Into<String>,
) -> Result<PplThreshold> {
    let sorted = sorted_values(scored)?;
    let tau = match strategy {
        Calibration::MaxF1 => max_f1(&sorted),
        Calibration::TargetSearchRate => {
            let rate = target_rate.ok_or_else(|| {
                Error::Config("target-search-rate calibration needs a target rate".to_string())
            })?;
            quantile(&sorted, rate)?
        }
    };
    let fitted_on = fitted_on.into();
    let fitted_on = if fitted_on.trim().is_empty() {
        format!("{} items", scored.len())
    } else {
        fitted_on
    };
    PplThreshold::new(
        tau,
        strategy,
        matches!(strategy, Calibration::TargetSearchRate).then_some(target_rate).flatten(),
        fitted_on,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn items(pairs: &[(f64, bool)]) -> Vec<Scored> {
        pairs.iter().map(|&(p, c)| Scored::new(p, c)).collect()
    }

    fn n_search(scored: &[Scored], tau: Tau) -> usize {
        scored
            .iter()
            .filter(|s| decide_perplexity(s.perplexity, tau).unwrap() == Decision::Search)
            .count()
    }

    #[test]
    fn separable_data_reaches_f1_one() {
        let s = items(&[(1.0, true), (2.0, true), (3.0, false), (4.0, false)]);
        let t = calibrate(&s, Calibration::MaxF1, None, "fixture").unwrap();
        assert!(t.tau.0 > 2.0 && t.tau.0 < 3.0);
        assert_eq!(t.tau.0, 2.5);
    }

    #[test]
    fn all_correct_never_searches() {
        let s = items(&[(1.5, true), (9.0, true), (3.0, true)]);
        let t = calibrate(&s, Calibration::MaxF1, None, "fixture").unwrap();
        assert_eq!(t.tau, Tau::NEVER_SEARCH);
    }

    #[test]
    fn all_wrong_always_searches() {
        let s = items(&[(1.5, false), (9.0, false)]);
        let t = calibrate(&s, Calibration::MaxF1, None, "fixture").unwrap();
        assert_eq!(t.tau, Tau::ALWAYS_SEARCH);
    }

    #[test]
    fn target_rate_half_of_four() {
        let s = items(&[(4.0, false), (1.0, true), (3.0, false), (2.0, true)]);
        let t = calibrate(&s, Calibration::TargetSearchRate, Some(0.5), "fixture").unwrap();
        assert_eq!(t.tau.0, 2.5);
        assert_eq!(n_search(&s, t.tau), 2);
        assert_eq!(t.target_rate, Some(0.5));
    }

    #[test]
    fn target_rate_extremes() {
        let s = items(&[(1.0, true), (2.0, false)]);
        let t0 = calibrate(&s, Calibration::TargetSearchRate, Some(0.0), "f").unwrap();
        assert_eq!(t0.tau, Tau::NEVER_SEARCH);
        let t1 = calibrate(&s, Calibration::TargetSearchRate, Some(1.0), "f").unwrap();
        assert_eq!(t1.tau, Tau::ALWAYS_SEARCH);
        assert!(matches!(
            calibrate(&s, Calibration::TargetSearchRate, None, "f"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(matches!(calibrate(&[], Calibration::MaxF1, None, "f"), Err(Error::Domain(_))));
    }

    #[test]
    fn decide_boundaries() {
        assert_eq!(decide_perplexity(1.5, Tau(2.5)).unwrap(), Decision::Answer);
        assert_eq!(decide_perplexity(3.5, Tau(2.5)).unwrap(), Decision::Search);
        assert_eq!(decide_perplexity(2.5, Tau(2.5)).unwrap(), Decision::Answer);
        assert!(decide_perplexity(f64::NAN, Tau(2.5)).is_err());
        assert!(decide_perplexity(f64::INFINITY, Tau::NEVER_SEARCH).is_err());
    }

    #[test]
    fn threshold_manifest_round_trip() {
        for tau in [Tau(2.25), Tau::NEVER_SEARCH, Tau::ALWAYS_SEARCH] {
            let t = PplThreshold::new(tau, Calibration::MaxF1, None, "dev").unwrap();
            let json = serde_json::to_string(&t).unwrap();
            let back: PplThreshold = serde_json::from_str(&json).unwrap();
            assert_eq!(back, t);
        }
        let json = serde_json::to_value(PplThreshold::new(Tau::NEVER_SEARCH, Calibration::MaxF1, None, "d").unwrap()).unwrap();
        assert_eq!(json["tau"], "+inf");
    }

    #[test]
    fn invalid_thresholds_rejected() {
        assert!(PplThreshold::new(Tau(-1.0), Calibration::MaxF1, None, "d").is_err());
        assert!(PplThreshold::new(Tau(f64::NAN), Calibration::MaxF1, None, "d").is_err());
        assert!(PplThreshold::new(Tau(2.0), Calibration::MaxF1, None, " ").is_err());
    }

    proptest! {
        #[test]
        fn raising_tau_never_adds_searches(
            ppls in proptest::collection::vec(1.0f64..50.0, 1..50),
            t1 in 0.5f64..60.0, dt in 0.0f64..20.0,
        ) {
            let s: Vec<_> = ppls.iter().map(|&p| Scored::new(p, true)).collect();
            prop_assert!(n_search(&s, Tau(t1 + dt)) <= n_search(&s, Tau(t1)));
        }
    }
}
