//! Three-way judging (correct / hallucinated / search) and the paired
//! base-vs-adapted confusion metrics.
//!
//! Confusion cells for a (base, adapted) pair:
//!
//! | base \ adapted | C  | H  | S  |
//! |----------------|----|----|----|
//! | C              | TP | FP | FN |
//! | H              | TP | FP | TN |

use std::collections::HashMap;
use std::fmt;

use serde::de::{self, Deserializer};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::corpus::{Normalizer, QaRecord};
use crate::error::{Error, Result};
use crate::labeler::SearchToken;

pub const DEFAULT_LAMBDA: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Judgment {
    #[serde(rename = "C")]
    Correct,
    #[serde(rename = "H")]
    Hallucinated,
    #[serde(rename = "S")]
    Search,
}

impl Judgment {
    pub fn letter(self) -> char {
        match self {
            Judgment::Correct => 'C',
            Judgment::Hallucinated => 'H',
            Judgment::Search => 'S',
        }
    }
}

/// A model output as seen by the judge: free text or a decision to search.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Text(String),
    Search,
}

/// Recognizes search requests in raw model text: the search token itself,
/// or any alias (such as an "I don't know" abstention) after normalization.
#[derive(Debug, Clone)]
pub struct SearchMarkers {
    pub token: SearchToken,
    pub aliases: Vec<String>,
}

impl SearchMarkers {
    pub fn new(token: SearchToken) -> Self {
        Self {
            token,
            aliases: Vec::new(),
        }
    }

    pub fn with_alias(mut self, alias: impl Into<String>) -> Self {
        self.aliases.push(alias.into());
        self
    }

    pub fn classify(&self, text: &str, normalizer: &Normalizer<'_>) -> Output {
        if self.token.matches(text) {
            return Output::Search;
        }
        if !self.aliases.is_empty() {
            let norm = normalizer.normalize(text);
            if !norm.is_empty() && self.aliases.iter().any(|a| normalizer.normalize(a) == norm) {
                return Output::Search;
            }
        }
        Output::Text(text.to_string())
    }
}

pub fn judge(output: &Output, record: &QaRecord, normalizer: &Normalizer<'_>) -> Judgment {
    match output {
        Output::Search => Judgment::Search,
        Output::Text(t) if normalizer.exact_match(t, &record.gold_answers) => Judgment::Correct,
        Output::Text(_) => Judgment::Hallucinated,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cell {
    TruePositive,
    FalsePositive,
    TrueNegative,
    FalseNegative,
}

pub fn confusion_cell(base: Judgment, adapted: Judgment) -> Result<Cell> {
    use Judgment::*;
    match (base, adapted) {
        (Search, _) => Err(Error::Pairing(
            "base model outputs cannot be search decisions".to_string(),
        )),
        (_, Correct) => Ok(Cell::TruePositive),
        (_, Hallucinated) => Ok(Cell::FalsePositive),
        (Correct, Search) => Ok(Cell::FalseNegative),
        (Hallucinated, Search) => Ok(Cell::TrueNegative),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn add(&mut self, cell: Cell) {
        match cell {
            Cell::TruePositive => self.tp += 1,
            Cell::FalsePositive => self.fp += 1,
            Cell::TrueNegative => self.tn += 1,
            Cell::FalseNegative => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn f1(&self) -> Result<f64> {
        f1_score(self.tp as f64, self.fp as f64, self.fn_ as f64)
    }
}

/// `2·tp / (2·tp + fp + fn)`. Accepts fractional (rate-weighted) counts.
pub fn f1_score(tp: f64, fp: f64, fn_: f64) -> Result<f64> {
    let denom = 2.0 * tp + fp + fn_;
    if !(denom > 0.0) {
        return Err(Error::UndefinedMetric(
            "F1 with 2*tp + fp + fn = 0".to_string(),
        ));
    }
    Ok(2.0 * tp / denom)
}

pub fn f1(counts: &ConfusionCounts) -> Result<f64> {
    counts.f1()
}

/// A ratio that may be undefined (empty denominator). Serialized as a number
/// or as the string `"undefined"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fraction {
    Value(f64),
    Undefined,
}

impl Fraction {
    pub fn ratio(num: u64, den: u64) -> Self {
        if den == 0 {
            Fraction::Undefined
        } else {
            Fraction::Value(num as f64 / den as f64)
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Fraction::Value(v) => Some(v),
            Fraction::Undefined => None,
        }
    }
}

impl From<Result<f64>> for Fraction {
    fn from(r: Result<f64>) -> Self {
        r.map(Fraction::Value).unwrap_or(Fraction::Undefined)
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Fraction::Value(v) => s.serialize_f64(*v),
            Fraction::Undefined => s.serialize_str("undefined"),
        }
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Fraction::Value(v)),
            Raw::Str(s) if s == "undefined" => Ok(Fraction::Undefined),
            Raw::Str(s) => Err(de::Error::custom(format!("expected number or \"undefined\", got {s:?}"))),
        }
    }
}

impl fmt::Display for Fraction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fraction::Value(v) => write!(f, "{v}"),
            Fraction::Undefined => f.write_str("undefined"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedItem {
    pub id: String,
    pub judgment: Judgment,
}

impl JudgedItem {
    pub fn new(id: impl Into<String>, judgment: Judgment) -> Self {
        Self {
            id: id.into(),
            judgment,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseRates {
    pub c: f64,
    pub h: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub c: f64,
    pub h: f64,
    pub s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Retention {
    pub c_frac: Fraction,
    pub h_frac: Fraction,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgmentCounts {
    pub base_c: u64,
    pub base_h: u64,
    pub adapted_c: u64,
    pub adapted_h: u64,
    pub adapted_s: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportProvenance {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adapted_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: u64,
    pub lambda: f64,
    pub base: BaseRates,
    pub adapted: Rates,
    pub counts: JudgmentCounts,
    pub retention: Retention,
    pub confusion: ConfusionCounts,
    pub f1: Fraction,
    pub budget_cost: f64,
    #[serde(default)]
    pub provenance: ReportProvenance,
}

/// Empirical budget objective: search rate plus λ times hallucination rate.
pub fn budget_cost(s_rate: f64, h_rate: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(s_rate + lambda * h_rate)
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("lambda must be finite and >= 1, got {lambda}")))
    }
}

/// Compares aligned base and adapted judgments over the same records.
pub fn evaluate_pair(base: &[JudgedItem], adapted: &[JudgedItem], lambda: f64) -> Result<EvalReport> {
    check_lambda(lambda)?;
    if base.len() != adapted.len() {
        return Err(Error::Pairing(format!(
            "{} base judgments vs {} adapted judgments",
            base.len(),
            adapted.len()
        )));
    }
    if base.is_empty() {
        return Err(Error::Pairing("nothing to evaluate".to_string()));
    }

    let mut confusion = ConfusionCounts::default();
    let mut counts = JudgmentCounts::default();
    let (mut kept_c, mut kept_h) = (0u64, 0u64);
    for (b, a) in base.iter().zip(adapted) {
        if b.id != a.id {
            return Err(Error::Pairing(format!(
                "base item `{}` aligned with adapted item `{}`",
                b.id, a.id
            )));
        }
        confusion.add(confusion_cell(b.judgment, a.judgment)?);
        match b.judgment {
            Judgment::Correct => counts.base_c += 1,
            Judgment::Hallucinated => counts.base_h += 1,
            Judgment::Search => unreachable!("rejected by confusion_cell"),
        }
        match a.judgment {
            Judgment::Correct => counts.adapted_c += 1,
            Judgment::Hallucinated => counts.adapted_h += 1,
            Judgment::Search => counts.adapted_s += 1,
        }
        match (b.judgment, a.judgment) {
            (Judgment::Correct, Judgment::Correct) => kept_c += 1,
            (Judgment::Hallucinated, Judgment::Hallucinated) => kept_h += 1,
            _ => {}
        }
    }

    let n = base.len() as u64;
    let nf = n as f64;
    let adapted_rates = Rates {
        c: counts.adapted_c as f64 / nf,
        h: counts.adapted_h as f64 / nf,
        s: counts.adapted_s as f64 / nf,
    };
    debug_assert!((adapted_rates.c + adapted_rates.h + adapted_rates.s - 1.0).abs() <= 1e-9);
    // Computed from counts so that e.g. 620 searches + 166 errors over 1000
    // items gives exactly 0.786.
    let budget_cost = (counts.adapted_s as f64 + lambda * counts.adapted_h as f64) / nf;

    Ok(EvalReport {
        n,
        lambda,
        base: BaseRates {
            c: counts.base_c as f64 / nf,
            h: counts.base_h as f64 / nf,
        },
        adapted: adapted_rates,
        counts,
        retention: Retention {
            c_frac: Fraction::ratio(kept_c, counts.base_c),
            h_frac: Fraction::ratio(kept_h, counts.base_h),
        },
        confusion,
        f1: confusion.f1().into(),
        budget_cost,
        provenance: ReportProvenance::default(),
    })
}

/// Judges base and adapted outputs for the same records and aligns them by id,
/// in `records` order. Both maps must cover every record.
pub fn judge_pair(
    records: &[QaRecord],
    base: &HashMap<&str, Output>,
    adapted: &HashMap<&str, Output>,
    normalizer: &Normalizer<'_>,
) -> Result<(Vec<JudgedItem>, Vec<JudgedItem>)> {
    let mut b = Vec::with_capacity(records.len());
    let mut a = Vec::with_capacity(records.len());
    for r in records {
        let bo = base
            .get(r.id.as_str())
            .ok_or_else(|| Error::Pairing(format!("no base output for `{}`", r.id)))?;
        let ao = adapted
            .get(r.id.as_str())
            .ok_or_else(|| Error::Pairing(format!("no adapted output for `{}`", r.id)))?;
        b.push(JudgedItem::new(r.id.clone(), judge(bo, r, normalizer)));
        a.push(JudgedItem::new(r.id.clone(), judge(ao, r, normalizer)));
    }
    Ok((b, a))
}

fn pct(v: f64) -> String {
    format!("{:.1}", v * 100.0)
}

fn pct_with_retention(v: f64, frac: Fraction) -> String {
    match frac {
        Fraction::Value(f) => format!("{} ({:.1}%)", pct(v), f * 100.0),
        Fraction::Undefined => format!("{} (n/a)", pct(v)),
    }
}

impl EvalReport {
    /// Plain-text table: one row for the base model and one for the adapted
    /// policy, with retention fractions in parentheses.
    pub fn render_table(&self, base_name: &str, adapted_name: &str) -> String {
        let rows = [
            [
                base_name.to_string(),
                pct(self.base.c),
                pct(self.base.h),
                pct(0.0),
                "-".to_string(),
            ],
            [
                adapted_name.to_string(),
                pct_with_retention(self.adapted.c, self.retention.c_frac),
                pct_with_retention(self.adapted.h, self.retention.h_frac),
                pct(self.adapted.s),
                match self.f1 {
                    Fraction::Value(f) => pct(f),
                    Fraction::Undefined => "n/a".to_string(),
                },
            ],
        ];
        let header = ["model", "C", "H", "Search", "F1"];
        let mut widths = header.map(str::len);
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
                .trim_end()
                .to_string()
        };
        let mut out = String::new();
        out.push_str(&line(&header.map(str::to_string)));
        out.push('\n');
        for row in &rows {
            out.push_str(&line(row));
            out.push('\n');
        }
        out.push_str(&format!(
            "n={}  TP={} FP={} TN={} FN={}  lambda={}  budget_cost={:.4}\n",
            self.n,
            self.confusion.tp,
            self.confusion.fp,
            self.confusion.tn,
            self.confusion.fn_,
            self.lambda,
            self.budget_cost
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{NormalizationProfile, Split};
    use proptest::prelude::*;
    use Judgment::*;

    fn items(js: &[Judgment]) -> Vec<JudgedItem> {
        js.iter()
            .enumerate()
            .map(|(i, j)| JudgedItem::new(format!("r{i}"), *j))
            .collect()
    }

    #[test]
    fn judge_examples() {
        let p = NormalizationProfile::english();
        let n = p.normalizer();
        let r = QaRecord::new("q", "capital?", vec!["Paris".into()], Split::Dev).unwrap();
        let markers = SearchMarkers::new(SearchToken::default());
        assert_eq!(judge(&markers.classify("<search>", &n), &r, &n), Search);
        assert_eq!(judge(&markers.classify("Paris", &n), &r, &n), Correct);
        assert_eq!(judge(&markers.classify("Lyon", &n), &r, &n), Hallucinated);
    }

    #[test]
    fn idk_alias_counts_as_search() {
        let p = NormalizationProfile::english();
        let n = p.normalizer();
        let markers = SearchMarkers::new(SearchToken::default()).with_alias("I don't know");
        assert_eq!(markers.classify("I don't know.", &n), Output::Search);
        assert_eq!(markers.classify("i dont know", &n), Output::Search);
        assert_eq!(markers.classify("Paris", &n), Output::Text("Paris".into()));
    }

    #[test]
    fn cells_follow_the_table() {
        assert_eq!(confusion_cell(Correct, Search).unwrap(), Cell::FalseNegative);
        assert_eq!(confusion_cell(Hallucinated, Search).unwrap(), Cell::TrueNegative);
        assert_eq!(confusion_cell(Hallucinated, Correct).unwrap(), Cell::TruePositive);
        assert_eq!(confusion_cell(Correct, Correct).unwrap(), Cell::TruePositive);
        assert_eq!(confusion_cell(Correct, Hallucinated).unwrap(), Cell::FalsePositive);
        assert_eq!(confusion_cell(Hallucinated, Hallucinated).unwrap(), Cell::FalsePositive);
        assert!(matches!(confusion_cell(Search, Correct), Err(Error::Pairing(_))));
    }

    #[test]
    fn f1_examples() {
        let c = ConfusionCounts { tp: 2, fp: 1, tn: 0, fn_: 1 };
        assert!((f1(&c).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        let perfect = ConfusionCounts { tp: 5, fp: 0, tn: 3, fn_: 0 };
        assert_eq!(f1(&perfect).unwrap(), 1.0);
        assert!(matches!(f1(&ConfusionCounts { tn: 4, ..Default::default() }), Err(Error::UndefinedMetric(_))));
        let weighted = f1_score(21.3, 16.6, 6.0).unwrap();
        assert!((weighted - 0.653).abs() < 5e-4, "{weighted}");
    }

    #[test]
    fn identity_policy() {
        let base = items(&[Correct, Hallucinated, Hallucinated, Correct]);
        let r = evaluate_pair(&base, &base, 1.0).unwrap();
        assert_eq!(r.adapted.s, 0.0);
        assert_eq!(r.retention.c_frac, Fraction::Value(1.0));
        assert_eq!(r.retention.h_frac, Fraction::Value(1.0));
        assert_eq!(r.budget_cost, 0.5);
        assert_eq!(r.f1, Fraction::Value(2.0 * 2.0 / (4.0 + 2.0)));
    }

    #[test]
    fn always_search_policy() {
        let base = items(&[Correct, Hallucinated, Hallucinated]);
        let adapted = items(&[Search, Search, Search]);
        let r = evaluate_pair(&base, &adapted, 1.0).unwrap();
        assert_eq!((r.adapted.c, r.adapted.h, r.adapted.s), (0.0, 0.0, 1.0));
        assert_eq!(r.budget_cost, 1.0);
        assert_eq!(r.retention.c_frac, Fraction::Value(0.0));
        assert_eq!(r.f1, Fraction::Value(0.0));
    }

    #[test]
    fn four_item_hand_enumeration() {
        // (C,C)=TP (C,S)=FN (H,S)=TN (H,C)=TP
        let base = items(&[Correct, Correct, Hallucinated, Hallucinated]);
        let adapted = items(&[Correct, Search, Search, Correct]);
        let r = evaluate_pair(&base, &adapted, 2.0).unwrap();
        assert_eq!(r.confusion, ConfusionCounts { tp: 2, fp: 0, tn: 1, fn_: 1 });
        assert_eq!(r.f1, Fraction::Value(0.8));
        assert_eq!(r.retention.c_frac, Fraction::Value(0.5));
        assert_eq!(r.retention.h_frac, Fraction::Value(0.0));
        assert_eq!(r.budget_cost, 0.5);
    }

    #[test]
    fn empty_denominators_are_undefined() {
        let base = items(&[Hallucinated, Hallucinated]);
        let adapted = items(&[Search, Search]);
        let r = evaluate_pair(&base, &adapted, 1.0).unwrap();
        assert_eq!(r.retention.c_frac, Fraction::Undefined);
        assert_eq!(r.f1, Fraction::Undefined);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["retention"]["c_frac"], "undefined");
        let back: EvalReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn pairing_errors() {
        let base = items(&[Correct]);
        assert!(matches!(evaluate_pair(&base, &[], 1.0), Err(Error::Pairing(_))));
        let other = vec![JudgedItem::new("zz", Correct)];
        assert!(matches!(evaluate_pair(&base, &other, 1.0), Err(Error::Pairing(_))));
        assert!(matches!(evaluate_pair(&base, &base, 0.5), Err(Error::Domain(_))));
        let bad_base = items(&[Search]);
        assert!(matches!(evaluate_pair(&bad_base, &bad_base, 1.0), Err(Error::Pairing(_))));
    }

    #[test]
    fn table_lists_retention() {
        let base = items(&[Correct, Correct, Hallucinated, Hallucinated]);
        let adapted = items(&[Correct, Search, Search, Correct]);
        let t = evaluate_pair(&base, &adapted, 1.0).unwrap().render_table("base", "adapted");
        assert!(t.contains("50.0 (50.0%)"), "{t}");
        assert!(t.contains("80.0"), "{t}");
    }

    fn arb_pair() -> impl Strategy<Value = Vec<(Judgment, Judgment)>> {
        proptest::collection::vec(
            (
                prop_oneof![Just(Correct), Just(Hallucinated)],
                prop_oneof![Just(Correct), Just(Hallucinated), Just(Search)],
            ),
            1..60,
        )
    }

    fn split(pairs: &[(Judgment, Judgment)]) -> (Vec<JudgedItem>, Vec<JudgedItem>) {
        let b: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let a: Vec<_> = pairs.iter().map(|p| p.1).collect();
        (items(&b), items(&a))
    }

    proptest! {
        #[test]
        fn partition_and_rate_identity(pairs in arb_pair()) {
            let (b, a) = split(&pairs);
            let r = evaluate_pair(&b, &a, 1.0).unwrap();
            prop_assert_eq!(r.confusion.total(), r.n);
            prop_assert_eq!(r.confusion.tp, r.counts.adapted_c);
            prop_assert_eq!(r.confusion.fp, r.counts.adapted_h);
            prop_assert_eq!(r.confusion.tn + r.confusion.fn_, r.counts.adapted_s);
            prop_assert!((r.adapted.c + r.adapted.h + r.adapted.s - 1.0).abs() <= 1e-9);
            for f in [r.retention.c_frac, r.retention.h_frac] {
                if let Fraction::Value(v) = f { prop_assert!((0.0..=1.0).contains(&v)); }
            }
        }

        #[test]
        fn budget_bounds_and_monotone(pairs in arb_pair(), l1 in 1.0f64..10.0, dl in 0.0f64..10.0) {
            let (b, a) = split(&pairs);
            let r1 = evaluate_pair(&b, &a, l1).unwrap();
            let r2 = evaluate_pair(&b, &a, l1 + dl).unwrap();
            prop_assert!(r1.budget_cost >= 0.0 && r1.budget_cost <= l1 + 1e-12);
            prop_assert!(r2.budget_cost >= r1.budget_cost);
            if r1.counts.adapted_s == 0 {
                prop_assert!((r1.budget_cost - l1 * r1.adapted.h).abs() < 1e-12);
            }
        }

        #[test]
        fn f1_invariant_under_duplication(pairs in arb_pair(), k in 2usize..5) {
            let (b, a) = split(&pairs);
            let many: Vec<_> = pairs.iter().cycle().take(pairs.len() * k).copied().collect();
            let (bk, ak) = split(&many);
            let r1 = evaluate_pair(&b, &a, 1.0).unwrap();
            let rk = evaluate_pair(&bk, &ak, 1.0).unwrap();
            match (r1.f1, rk.f1) {
                (Fraction::Value(x), Fraction::Value(y)) => prop_assert!((x - y).abs() < 1e-12),
                (x, y) => prop_assert_eq!(x, y),
            }
        }
    }
}
