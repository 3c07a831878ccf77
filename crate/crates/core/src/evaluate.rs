//! AUROC, thresholded false-positive rates, score histograms, near-OOD
//! confusion counts and the aggregate evaluation report.
//!
//! Scores follow the crate-wide orientation: higher means more OOD. A
//! sample is accepted as in-distribution iff its score is `<=` the threshold.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{atomic_write, FeatureSet};
use crate::error::{MoodError, Result};
use crate::gaussian::{mahalanobis_score, predict_class, GaussianModel};

pub const DEFAULT_TPR: f64 = 0.95;
pub const DEFAULT_BINS: usize = 20;

fn check_scores(name: &str, s: &[f64]) -> Result<()> {
    if s.is_empty() {
        return Err(MoodError::Data(format!("{name} scores are empty")));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(MoodError::Data(format!("{name} scores contain non-finite values")));
    }
    Ok(())
}

/// Probability that a random OOD score exceeds a random ID score, ties
/// counting one half. Computed from midrank sums, which are kept doubled so
/// that they stay integral.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores("ID", id_scores)?;
    check_scores("OOD", ood_scores)?;
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&v| (v, false))
        .chain(ood_scores.iter().map(|&v| (v, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut ood_rank2: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // 1-based ranks i+1..=j share midrank (i+1+j)/2
        let rank2 = (i + 1 + j) as u128;
        let ood_in_group = all[i..j].iter().filter(|x| x.1).count() as u128;
        ood_rank2 += rank2 * ood_in_group;
        i = j;
    }
    let (n, m) = (id_scores.len() as u128, ood_scores.len() as u128);
    let u2 = ood_rank2 - m * (m + 1);
    Ok(u2 as f64 / (2 * n * m) as f64)
}

/// Smallest observed ID score `t` with `#{s <= t} / n >= tpr`.
pub fn threshold_at_tpr(id_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores("ID", id_scores)?;
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(MoodError::Parameter(format!("tpr {tpr} outside (0, 1]")));
    }
    let mut s = id_scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let exact = tpr * n as f64;
    let rounded = exact.round();
    // 0.95 · 20 must count as 19, not 19.000000000000004
    let k = if (exact - rounded).abs() <= 1e-9 * exact.max(1.0) {
        rounded as usize
    } else {
        exact.ceil() as usize
    };
    Ok(s[k.clamp(1, n) - 1])
}

/// Fraction of OOD scores accepted at the ID threshold for `tpr`.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr: f64) -> Result<f64> {
    check_scores("OOD", ood_scores)?;
    let t = threshold_at_tpr(id_scores, tpr)?;
    Ok(ood_scores.iter().filter(|&&v| v <= t).count() as f64 / ood_scores.len() as f64)
}

/// Per-ID-class counts of OOD samples that are accepted at the Mahalanobis
/// threshold, keyed by their nearest class.
pub fn confusion_counts(gm: &GaussianModel, ood: &FeatureSet, id_scores: &[f64], tpr: f64) -> Result<Vec<usize>> {
    if ood.n_cols() != gm.dim() {
        return Err(MoodError::Shape(format!(
            "OOD features have {} columns, model expects {}",
            ood.n_cols(),
            gm.dim()
        )));
    }
    let t = threshold_at_tpr(id_scores, tpr)?;
    let mut counts = vec![0; gm.class_count()];
    for f in ood.features().iter_rows() {
        if mahalanobis_score(gm, f)? <= t {
            counts[predict_class(gm, f)?] += 1;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// `count / (n · bin width)`; integrates to 1.
    pub densities: Vec<f64>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `edge_lo,edge_hi,count,density` rows.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["edge_lo", "edge_hi", "count", "density"])
            .expect("in-memory write");
        for (i, c) in self.counts.iter().enumerate() {
            w.write_record([
                self.edges[i].to_string(),
                self.edges[i + 1].to_string(),
                c.to_string(),
                self.densities[i].to_string(),
            ])
            .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

/// Equal-width histogram over `range` (default `[min, max]`). Bins are
/// `[e_i, e_{i+1})` except the last, which is closed.
pub fn histogram(scores: &[f64], bins: usize, range: Option<(f64, f64)>) -> Result<Histogram> {
    check_scores("histogram", scores)?;
    if bins == 0 {
        return Err(MoodError::Parameter("bins must be positive".into()));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) => {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(MoodError::Parameter(format!("histogram range [{lo}, {hi}] is empty")));
            }
            if let Some(v) = scores.iter().find(|&&v| v < lo || v > hi) {
                return Err(MoodError::Parameter(format!("score {v} lies outside [{lo}, {hi}]")));
            }
            (lo, hi)
        }
        None => {
            let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo == hi {
                return Err(MoodError::Data(format!("all scores equal {lo}; histogram range is degenerate")));
            }
            (lo, hi)
        }
    };
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|i| lo + i as f64 * width).collect();
    edges.push(hi);
    let mut counts = vec![0usize; bins];
    for &v in scores {
        let mut b = (((v - lo) / width) as usize).min(bins - 1);
        // settle rounding against the materialized edges
        while b > 0 && v < edges[b] {
            b -= 1;
        }
        while b + 1 < bins && v >= edges[b + 1] {
            b += 1;
        }
        counts[b] += 1;
    }
    let n = scores.len() as f64;
    let densities = counts
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 / (n * (edges[i + 1] - edges[i])))
        .collect();
    Ok(Histogram {
        edges,
        counts,
        densities,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodSetReport {
    pub name: String,
    pub samples: usize,
    pub auroc: f64,
    pub fpr_at_tpr: f64,
    pub histogram: Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Macro average over OOD sets.
    pub auroc: f64,
    /// Macro average over OOD sets, at `tpr`.
    pub fpr_at_tpr95: f64,
    pub tpr: f64,
    pub threshold: f64,
    pub id_samples: usize,
    pub id_histogram: Histogram,
    pub ood_sets: Vec<OodSetReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<Vec<usize>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| MoodError::Format(format!("eval report: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, self.to_json().as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportOptions {
    pub tpr: f64,
    pub bins: usize,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            tpr: DEFAULT_TPR,
            bins: DEFAULT_BINS,
        }
    }
}

/// Inputs for the confusion section: the fitted model and OOD features
/// whose Mahalanobis scores are compared against the ID threshold.
pub struct ConfusionInput<'a> {
    pub model: &'a GaussianModel,
    pub ood_features: &'a FeatureSet,
}

pub fn build_report(
    id_scores: &[f64],
    ood_sets: &[(String, Vec<f64>)],
    opts: &ReportOptions,
    confusion: Option<ConfusionInput<'_>>,
) -> Result<EvalReport> {
    if ood_sets.is_empty() {
        return Err(MoodError::Data("at least one OOD score set is required".into()));
    }
    check_scores("ID", id_scores)?;
    for (name, s) in ood_sets {
        check_scores(name, s)?;
    }
    // shared range so ID and OOD histograms are directly comparable
    let all = id_scores.iter().chain(ood_sets.iter().flat_map(|(_, s)| s.iter()));
    let (mut lo, mut hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if lo == hi {
        lo -= 0.5;
        hi += 0.5;
    }
    let range = Some((lo, hi));
    let threshold = threshold_at_tpr(id_scores, opts.tpr)?;
    let mut sets = Vec::with_capacity(ood_sets.len());
    for (name, s) in ood_sets {
        sets.push(OodSetReport {
            name: name.clone(),
            samples: s.len(),
            auroc: auroc(id_scores, s)?,
            fpr_at_tpr: fpr_at_tpr(id_scores, s, opts.tpr)?,
            histogram: histogram(s, opts.bins, range)?,
        });
    }
    let k = sets.len() as f64;
    let confusion = match confusion {
        Some(c) => Some(confusion_counts(c.model, c.ood_features, id_scores, opts.tpr)?),
        None => None,
    };
    Ok(EvalReport {
        auroc: sets.iter().map(|s| s.auroc).sum::<f64>() / k,
        fpr_at_tpr95: sets.iter().map(|s| s.fpr_at_tpr).sum::<f64>() / k,
        tpr: opts.tpr,
        threshold,
        id_samples: id_scores.len(),
        id_histogram: histogram(id_scores, opts.bins, range)?,
        ood_sets: sets,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use proptest::prelude::*;

    fn brute_auroc(id: &[f64], ood: &[f64]) -> f64 {
        let mut s = 0.0;
        for &o in ood {
            for &i in id {
                s += if o > i {
                    1.0
                } else if o == i {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (id.len() * ood.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.0, 1.0], &[2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(auroc(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0]).unwrap(), 0.5);
        assert_eq!(auroc(&[1.0, 3.0], &[2.0, 4.0]).unwrap(), 0.75);
        assert!(matches!(auroc(&[], &[1.0]), Err(MoodError::Data(_))));
    }

    proptest! {
        #[test]
        fn auroc_equals_brute_force(
            id in proptest::collection::vec(0u8..20, 1..60),
            ood in proptest::collection::vec(0u8..20, 1..60),
        ) {
            let id: Vec<f64> = id.into_iter().map(f64::from).collect();
            let ood: Vec<f64> = ood.into_iter().map(f64::from).collect();
            prop_assert!((auroc(&id, &ood).unwrap() - brute_auroc(&id, &ood)).abs() < 1e-12);
            prop_assert!((auroc(&id, &ood).unwrap() + auroc(&ood, &id).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn fpr_monotone_in_tpr(
            id in proptest::collection::vec(-5.0f64..5.0, 1..50),
            ood in proptest::collection::vec(-5.0f64..5.0, 1..50),
            a in 0.01f64..=1.0, b in 0.01f64..=1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(fpr_at_tpr(&id, &ood, lo).unwrap() <= fpr_at_tpr(&id, &ood, hi).unwrap());
        }

        #[test]
        fn threshold_is_minimal(id in proptest::collection::vec(0u8..10, 1..40), tpr in 0.01f64..=1.0) {
            let id: Vec<f64> = id.into_iter().map(f64::from).collect();
            let t = threshold_at_tpr(&id, tpr).unwrap();
            let frac = |x: f64| id.iter().filter(|&&v| v <= x).count() as f64 / id.len() as f64;
            prop_assert!(frac(t) >= tpr - 1e-12);
            for &s in &id {
                if s < t {
                    prop_assert!(frac(s) < tpr);
                }
            }
        }

        #[test]
        fn histogram_conserves(s in proptest::collection::vec(-100.0f64..100.0, 2..100), bins in 1usize..30) {
            prop_assume!(s.iter().any(|&v| v != s[0]));
            let h = histogram(&s, bins, None).unwrap();
            prop_assert_eq!(h.total(), s.len());
            prop_assert_eq!(h.edges.len(), bins + 1);
            let mass: f64 = h.densities.iter().zip(h.edges.windows(2)).map(|(d, e)| d * (e[1] - e[0])).sum();
            prop_assert!((mass - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn threshold_examples() {
        let id: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(threshold_at_tpr(&id, 0.95).unwrap(), 19.0);
        assert_eq!(threshold_at_tpr(&id, 1.0).unwrap(), 20.0);
        assert_eq!(threshold_at_tpr(&[3.0; 7], 0.3).unwrap(), 3.0);
        assert_eq!(fpr_at_tpr(&id, &id, 0.95).unwrap(), 0.95);
        assert_eq!(fpr_at_tpr(&id, &[100.0, 200.0], 0.95).unwrap(), 0.0);
        assert_eq!(fpr_at_tpr(&id, &[19.5], 0.95).unwrap(), 0.0);
        assert!(threshold_at_tpr(&id, 0.0).is_err());
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&[0.0, 0.5, 1.0], 2, None).unwrap();
        assert_eq!(h.edges, vec![0.0, 0.5, 1.0]);
        assert_eq!(h.counts, vec![1, 2]);
        let c = histogram(&[0.1, 0.2, 0.3], 4, Some((0.0, 4.0))).unwrap();
        assert_eq!(c.counts, vec![3, 0, 0, 0]);
        assert!(matches!(histogram(&[2.0, 2.0], 3, None), Err(MoodError::Data(_))));
        assert!(histogram(&[5.0], 3, Some((0.0, 1.0))).is_err());
        let csv = String::from_utf8(h.to_csv()).unwrap();
        assert_eq!(csv.lines().next().unwrap(), "edge_lo,edge_hi,count,density");
        assert_eq!(csv.lines().nth(2).unwrap(), "0.5,1,2,1.3333333333333333");
    }

    fn three_class() -> GaussianModel {
        let means = Matrix::from_rows(&[vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]]).unwrap();
        GaussianModel::from_parts(means, &Matrix::identity(2), vec![5, 5, 5]).unwrap()
    }

    #[test]
    fn confusion_simple_cases() {
        let g = three_class();
        let id = vec![0.5, 1.0, 2.0, 1.5];
        let far = FeatureSet::new(Matrix::from_rows(&[vec![50.0, 50.0], vec![-40.0, 3.0]]).unwrap(), None, "far").unwrap();
        assert_eq!(confusion_counts(&g, &far, &id, 0.95).unwrap(), vec![0, 0, 0]);
        let at1 = FeatureSet::new(Matrix::from_rows(&[vec![10.0, 0.0]]).unwrap(), None, "at").unwrap();
        assert_eq!(confusion_counts(&g, &at1, &id, 0.95).unwrap(), vec![0, 1, 0]);
        let wrong = FeatureSet::new(Matrix::zeros(1, 3), None, "w").unwrap();
        assert!(matches!(confusion_counts(&g, &wrong, &id, 0.95), Err(MoodError::Shape(_))));
    }

    #[test]
    fn report_averages_and_round_trips() {
        let id = vec![0.0, 1.0, 2.0, 3.0];
        let sets = vec![("a".to_string(), vec![4.0, 5.0]), ("b".to_string(), vec![1.5, 0.5])];
        let r = build_report(&id, &sets, &ReportOptions::default(), None).unwrap();
        let (a, b) = (auroc(&id, &sets[0].1).unwrap(), auroc(&id, &sets[1].1).unwrap());
        assert_eq!(r.auroc, (a + b) / 2.0);
        assert_eq!(r.id_histogram.total(), 4);
        assert_eq!(r.ood_sets[1].histogram.total(), 2);
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        let single = build_report(&id, &sets[..1], &ReportOptions::default(), None).unwrap();
        assert_eq!(single.auroc, a);
        let flat = build_report(&[1.0], &[("x".into(), vec![1.0])], &ReportOptions::default(), None).unwrap();
        assert_eq!(flat.auroc, 0.5);
    }
}
