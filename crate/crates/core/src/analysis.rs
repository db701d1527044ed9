//! Post-hoc analyses: how outcome rates move with the quality of search
//! results, how the budget objective moves with λ, and perplexity histograms
//! split by judgment.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluator::{check_lambda, Judgment};

/// Allowed deviation of `c0 + h0 + s` from 100 percentage points. Published
/// rates are rounded to one decimal and can be off by 0.1.
pub const RATE_SUM_TOLERANCE_PCT: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub ratio: f64,
    pub c: f64,
    pub h: f64,
}

/// Outcome rates (in percent) when a fraction `ratio` of searches return a
/// correct answer and the rest a wrong one:
/// `c(r) = c0 + r·s`, `h(r) = h0 + (1 − r)·s`.
pub fn tradeoff_curve(c0: f64, h0: f64, s: f64, ratios: &[f64]) -> Result<Vec<TradeoffPoint>> {
    for (name, v) in [("c0", c0), ("h0", h0), ("s", s)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Domain(format!("{name} = {v} is not a non-negative rate")));
        }
    }
    let sum = c0 + h0 + s;
    if (sum - 100.0).abs() > RATE_SUM_TOLERANCE_PCT + 1e-9 {
        return Err(Error::Domain(format!(
            "rates sum to {sum}, expected 100 ± {RATE_SUM_TOLERANCE_PCT}"
        )));
    }
    ratios
        .iter()
        .map(|&r| {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Domain(format!("search-correctness ratio {r} outside [0, 1]")));
            }
            Ok(TradeoffPoint {
                ratio: r,
                c: c0 + r * s,
                h: h0 + (1.0 - r) * s,
            })
        })
        .collect()
}

/// `0.0, 0.1, …, 1.0` without accumulated rounding.
pub fn default_ratios() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn lambda_sweep(s_rate: f64, h_rate: f64, lambdas: &[f64]) -> Result<Vec<(f64, f64)>> {
    for (name, v) in [("search rate", s_rate), ("hallucination rate", h_rate)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Domain(format!("{name} {v} outside [0, 1]")));
        }
    }
    let mut out = lambdas
        .iter()
        .map(|&l| {
            check_lambda(l)?;
            Ok((l, s_rate + l * h_rate))
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Log,
    Identity,
}

impl FromStr for Transform {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(Transform::Log),
            "identity" => Ok(Transform::Identity),
            other => Err(Error::Config(format!("unknown value transform `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramSpec {
    pub bin_edges: Vec<f64>,
    pub value_transform: Transform,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_key: Option<Judgment>,
}

impl HistogramSpec {
    pub fn new(bin_edges: Vec<f64>, value_transform: Transform) -> Result<Self> {
        let spec = Self {
            bin_edges,
            value_transform,
            class_key: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `bins` equal-width bins spanning `[lo, hi]`.
    pub fn uniform(lo: f64, hi: f64, bins: usize, value_transform: Transform) -> Result<Self> {
        if bins == 0 {
            return Err(Error::Domain("histogram needs at least one bin".to_string()));
        }
        let width = (hi - lo) / bins as f64;
        let mut edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
        edges.push(hi);
        Self::new(edges, value_transform)
    }

    pub fn for_class(mut self, class: Judgment) -> Self {
        self.class_key = Some(class);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.bin_edges.len() < 2 {
            return Err(Error::Domain("histogram needs at least two bin edges".to_string()));
        }
        if self.bin_edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::Domain("histogram bin edges must be finite".to_string()));
        }
        if self.bin_edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Domain("histogram bin edges must be strictly increasing".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistogramCounts {
    pub counts: Vec<u64>,
    /// Values below the first edge.
    pub below: u64,
    /// Values above the last edge.
    pub above: u64,
}

impl HistogramCounts {
    pub fn overflow(&self) -> u64 {
        self.below + self.above
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.overflow()
    }
}

/// Bins are half-open `[e_i, e_{i+1})` except the last, which is closed.
pub fn histogram(values: &[f64], spec: &HistogramSpec) -> Result<HistogramCounts> {
    spec.validate()?;
    let edges = &spec.bin_edges;
    let bins = edges.len() - 1;
    let mut out = HistogramCounts {
        counts: vec![0; bins],
        below: 0,
        above: 0,
    };
    for (i, &raw) in values.iter().enumerate() {
        let v = match spec.value_transform {
            Transform::Identity => raw,
            Transform::Log => {
                if !(raw > 0.0) {
                    return Err(Error::Domain(format!(
                        "item {i}: cannot take the log of {raw}"
                    )));
                }
                raw.ln()
            }
        };
        if v.is_nan() {
            return Err(Error::Domain(format!("item {i}: value is NaN")));
        }
        if v < edges[0] {
            out.below += 1;
        } else if v > edges[bins] {
            out.above += 1;
        } else if v == edges[bins] {
            out.counts[bins - 1] += 1;
        } else {
            // First edge strictly greater than v closes v's bin.
            let upper = edges.partition_point(|&e| e <= v);
            out.counts[upper - 1] += 1;
        }
    }
    Ok(out)
}

/// One histogram per judgment class present in `items`, in C, H, S order.
pub fn histogram_by_class(
    items: &[(Judgment, f64)],
    edges: &[f64],
    transform: Transform,
) -> Result<Vec<(Judgment, HistogramCounts)>> {
    let mut out = Vec::new();
    for class in [Judgment::Correct, Judgment::Hallucinated, Judgment::Search] {
        let values: Vec<f64> = items
            .iter()
            .filter(|(j, _)| *j == class)
            .map(|(_, v)| *v)
            .collect();
        if values.is_empty() {
            continue;
        }
        let spec = HistogramSpec::new(edges.to_vec(), transform)?.for_class(class);
        out.push((class, histogram(&values, &spec)?));
    }
    Ok(out)
}

fn header(comments: &[String]) -> String {
    comments.iter().map(|c| format!("# {c}\n")).collect()
}

/// Tab-separated `ratio c h` rows.
pub fn tradeoff_tsv(points: &[TradeoffPoint], comments: &[String]) -> String {
    let mut out = header(comments);
    out.push_str("ratio\tc\th\n");
    for p in points {
        let _ = writeln!(out, "{:.2}\t{:.2}\t{:.2}", p.ratio, p.c, p.h);
    }
    out
}

pub fn lambda_tsv(points: &[(f64, f64)], comments: &[String]) -> String {
    let mut out = header(comments);
    out.push_str("lambda\tbudget_cost\n");
    for (l, c) in points {
        let _ = writeln!(out, "{l}\t{c:.6}");
    }
    out
}

/// Tab-separated `class bin_lo bin_hi count` rows plus `below`/`above` rows per class.
pub fn histogram_tsv(edges: &[f64], classes: &[(Judgment, HistogramCounts)], comments: &[String]) -> String {
    let mut out = header(comments);
    out.push_str("class\tbin_lo\tbin_hi\tcount\n");
    for (class, h) in classes {
        let c = class.letter();
        for (i, n) in h.counts.iter().enumerate() {
            let _ = writeln!(out, "{c}\t{}\t{}\t{n}", edges[i], edges[i + 1]);
        }
        let _ = writeln!(out, "{c}\t-inf\t{}\t{}", edges[0], h.below);
        let _ = writeln!(out, "{c}\t{}\t+inf\t{}", edges[edges.len() - 1], h.above);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn round1(x: f64) -> f64 {
        (x * 10.0).round() / 10.0
    }

    #[test]
    fn tradeoff_columns() {
        let pts = tradeoff_curve(21.3, 16.6, 62.0, &[0.5, 1.0, 0.0]).unwrap();
        assert_eq!((round1(pts[0].c), round1(pts[0].h)), (52.3, 47.6));
        assert_eq!((round1(pts[1].c), round1(pts[1].h)), (83.3, 16.6));
        assert_eq!((round1(pts[2].c), round1(pts[2].h)), (21.3, 78.6));
    }

    #[test]
    fn tradeoff_input_errors() {
        assert!(tradeoff_curve(21.3, 16.6, 62.0, &[1.2]).is_err());
        assert!(tradeoff_curve(21.3, 16.6, 62.0, &[-0.1]).is_err());
        assert!(tradeoff_curve(20.0, 16.6, 62.0, &[0.5]).is_err());
        assert!(tradeoff_curve(-1.0, 39.0, 62.0, &[0.5]).is_err());
    }

    #[test]
    fn lambda_sweep_examples() {
        let s = lambda_sweep(0.62, 0.166, &[1.0]).unwrap();
        assert!((s[0].1 - 0.786).abs() < 1e-12);
        for (_, c) in lambda_sweep(0.0, 0.0, &[1.0, 2.0, 5.0]).unwrap() {
            assert_eq!(c, 0.0);
        }
        for (_, c) in lambda_sweep(1.0, 0.0, &[7.0, 1.0, 3.5]).unwrap() {
            assert_eq!(c, 1.0);
        }
        let sorted: Vec<f64> = lambda_sweep(0.1, 0.1, &[3.0, 1.0, 2.0]).unwrap().iter().map(|p| p.0).collect();
        assert_eq!(sorted, [1.0, 2.0, 3.0]);
        assert!(lambda_sweep(0.5, 0.1, &[0.9]).is_err());
    }

    #[test]
    fn histogram_examples() {
        let spec = HistogramSpec::new(vec![0.0, 1.0, 2.0], Transform::Identity).unwrap();
        assert_eq!(histogram(&[0.1, 0.2, 1.5], &spec).unwrap().counts, [2, 1]);
        assert_eq!(histogram(&[], &spec).unwrap().counts, [0, 0]);
        assert_eq!(histogram(&[1.0], &spec).unwrap().counts, [0, 1]);
        assert_eq!(histogram(&[2.0], &spec).unwrap().counts, [0, 1]);
        let h = histogram(&[-0.5, 3.0, 0.0], &spec).unwrap();
        assert_eq!((h.below, h.above, h.counts.clone()), (1, 1, vec![1, 0]));
    }

    #[test]
    fn log_transform() {
        let spec = HistogramSpec::new(vec![0.0, 1.0, 2.0], Transform::Log).unwrap();
        let e = std::f64::consts::E;
        assert_eq!(histogram(&[1.0, 2.0, e * e * 1.01], &spec).unwrap().counts, [2, 0]);
        let err = histogram(&[1.0, 0.0], &spec).unwrap_err();
        assert!(err.to_string().contains("item 1"), "{err}");
    }

    #[test]
    fn bad_edges_rejected() {
        assert!(HistogramSpec::new(vec![1.0], Transform::Identity).is_err());
        assert!(HistogramSpec::new(vec![1.0, 1.0], Transform::Identity).is_err());
        assert!(HistogramSpec::new(vec![2.0, 1.0], Transform::Identity).is_err());
    }

    #[test]
    fn tsv_shapes() {
        let pts = tradeoff_curve(21.3, 16.6, 62.0, &default_ratios()).unwrap();
        let t = tradeoff_tsv(&pts, &["config_hash=x".to_string()]);
        assert_eq!(t.lines().count(), 13);
        assert!(t.contains("0.50\t52.30\t47.60"), "{t}");
    }

    proptest! {
        #[test]
        fn conservation_endpoints_linearity(
            c0 in 0.0f64..60.0, h0 in 0.0f64..40.0,
            r in 0.0f64..=1.0,
        ) {
            let s = 100.0 - c0 - h0;
            let pts = tradeoff_curve(c0, h0, s, &[0.0, r, 1.0]).unwrap();
            for p in &pts {
                prop_assert!((p.c + p.h - (c0 + h0 + s)).abs() < 1e-9);
            }
            prop_assert_eq!(pts[0].c, c0);
            prop_assert!((pts[2].h - h0).abs() < 1e-12);
            // three collinear points with slope s
            prop_assert!((pts[1].c - pts[0].c - r * (pts[2].c - pts[0].c)).abs() < 1e-9);
        }

        #[test]
        fn histogram_conserves_items(
            values in proptest::collection::vec(-5.0f64..5.0, 0..80),
            edges in proptest::collection::btree_set(-40i32..40, 2..8),
        ) {
            let edges: Vec<f64> = edges.into_iter().map(|e| e as f64 / 8.0).collect();
            let spec = HistogramSpec::new(edges, Transform::Identity).unwrap();
            let h = histogram(&values, &spec).unwrap();
            prop_assert_eq!(h.total(), values.len() as u64);
        }
    }
}
