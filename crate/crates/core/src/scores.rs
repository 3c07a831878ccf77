//! OOD score functions. Every score is oriented so that higher means more
//! out-of-distribution.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::atomic_write;
use crate::error::{MoodError, Result};
use crate::gaussian::{mahalanobis_score, GaussianModel};
use crate::linalg::{log_sum_exp, softmax, Matrix};

pub const DEFAULT_TEMPERATURE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Msp,
    Entropy,
    Energy,
    Gradnorm,
    Mahalanobis,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::Msp,
        Metric::Entropy,
        Metric::Energy,
        Metric::Gradnorm,
        Metric::Mahalanobis,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Msp => "msp",
            Metric::Entropy => "entropy",
            Metric::Energy => "energy",
            Metric::Gradnorm => "gradnorm",
            Metric::Mahalanobis => "mahalanobis",
        }
    }

    /// Whether the metric reads logits (as opposed to features).
    pub fn uses_logits(self) -> bool {
        matches!(self, Metric::Msp | Metric::Entropy | Metric::Energy)
    }

    pub fn uses_temperature(self) -> bool {
        matches!(self, Metric::Energy | Metric::Gradnorm)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = MoodError;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MoodError::Config(format!("unknown metric {s:?}")))
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.len() < 2 {
        return Err(MoodError::Shape(format!("need at least 2 logits, got {}", logits.len())));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(MoodError::numeric("non-finite logits"));
    }
    Ok(())
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(MoodError::Parameter(format!("temperature {t} must be positive")));
    }
    Ok(())
}

/// Negated maximum softmax probability.
pub fn msp_score(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    Ok(-softmax(logits).into_iter().fold(0.0, f64::max))
}

/// Shannon entropy (nats) of the softmax distribution.
pub fn entropy_score(logits: &[f64]) -> Result<f64> {
    check_logits(logits)?;
    let lse = log_sum_exp(logits);
    Ok(-logits
        .iter()
        .map(|z| {
            let lp = z - lse;
            let p = lp.exp();
            if p == 0.0 {
                0.0
            } else {
                p * lp
            }
        })
        .sum::<f64>())
}

/// Free energy `−T · log Σ exp(z/T)`.
pub fn energy_score(logits: &[f64], temperature: f64) -> Result<f64> {
    check_logits(logits)?;
    check_temperature(temperature)?;
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    Ok(-temperature * log_sum_exp(&scaled))
}

/// Negated L1 norm of the last-layer weight gradient of `CE(uniform, softmax(logits/T))`,
/// which factorizes as `‖f‖₁ · ‖p − u‖₁ / T`.
pub fn gradnorm_score(feature: &[f64], weight: &Matrix, bias: &[f64], temperature: f64) -> Result<f64> {
    check_temperature(temperature)?;
    if weight.cols() != feature.len() || weight.rows() != bias.len() {
        return Err(MoodError::Shape(format!(
            "head is {}x{} with {} biases, feature has {} entries",
            weight.rows(),
            weight.cols(),
            bias.len(),
            feature.len()
        )));
    }
    if feature.iter().chain(bias).any(|v| !v.is_finite()) || !weight.is_finite() {
        return Err(MoodError::numeric("non-finite gradnorm input"));
    }
    let logits: Vec<f64> = weight
        .iter_rows()
        .zip(bias)
        .map(|(w, b)| (w.iter().zip(feature).map(|(a, x)| a * x).sum::<f64>() + b) / temperature)
        .collect();
    check_logits(&logits)?;
    let u = 1.0 / logits.len() as f64;
    let dev: f64 = softmax(&logits).iter().map(|p| (p - u).abs()).sum();
    let f1: f64 = feature.iter().map(|v| v.abs()).sum();
    Ok(-(f1 * dev / temperature))
}

/// Scores for a batch of samples under one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    metric: Metric,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    temperature: Option<f64>,
    values: Vec<f64>,
}

impl ScoreVector {
    pub fn new(metric: Metric, temperature: Option<f64>, values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MoodError::numeric(format!("score {i} is not finite")));
        }
        Ok(ScoreVector {
            metric,
            temperature,
            values,
        })
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn temperature(&self) -> Option<f64> {
        self.temperature
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn to_csv(&self) -> Vec<u8> {
        scores_to_csv(&self.values)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_csv())
    }
}

/// `index,score` CSV; values use shortest round-trip formatting.
pub fn scores_to_csv(values: &[f64]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "score"]).expect("in-memory write");
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()]).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Parses an `index,score` CSV. Indices must run 0, 1, 2, ... in order.
pub fn parse_score_csv(bytes: &[u8]) -> Result<Vec<f64>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let headers = r.headers().map_err(|e| MoodError::Format(format!("score csv: {e}")))?;
    if headers.len() != 2 || &headers[0] != "index" || &headers[1] != "score" {
        return Err(MoodError::Format(format!("score csv header must be index,score, got {headers:?}")));
    }
    let mut out = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| MoodError::Format(format!("score csv: {e}")))?;
        let idx: usize = rec[0]
            .parse()
            .map_err(|_| MoodError::Format(format!("row {row}: bad index {:?}", &rec[0])))?;
        if idx != row {
            return Err(MoodError::Format(format!("row {row}: expected index {row}, found {idx}")));
        }
        let v: f64 = rec[1]
            .parse()
            .map_err(|_| MoodError::Format(format!("row {row}: bad score {:?}", &rec[1])))?;
        if !v.is_finite() {
            return Err(MoodError::Format(format!("row {row}: score is not finite")));
        }
        out.push(v);
    }
    Ok(out)
}

pub fn read_score_csv(path: &Path) -> Result<Vec<f64>> {
    let bytes = std::fs::read(path).map_err(|e| MoodError::io(path, e))?;
    parse_score_csv(&bytes)
}

/// Model state a metric needs beyond its per-sample input.
#[derive(Debug, Clone, Copy)]
pub enum ScoreContext<'a> {
    None,
    Gaussian(&'a GaussianModel),
    Head { weight: &'a Matrix, bias: &'a [f64] },
}

/// Applies `metric` to every row of `inputs` (logits or features, as the metric requires).
pub fn score_batch(inputs: &Matrix, metric: Metric, temperature: f64, ctx: ScoreContext<'_>) -> Result<ScoreVector> {
    let rows: Vec<&[f64]> = inputs.iter_rows().collect();
    let values: Vec<f64> = match (metric, ctx) {
        (Metric::Msp, _) => rows.par_iter().map(|r| msp_score(r)).collect::<Result<_>>()?,
        (Metric::Entropy, _) => rows.par_iter().map(|r| entropy_score(r)).collect::<Result<_>>()?,
        (Metric::Energy, _) => rows
            .par_iter()
            .map(|r| energy_score(r, temperature))
            .collect::<Result<_>>()?,
        (Metric::Gradnorm, ScoreContext::Head { weight, bias }) => rows
            .par_iter()
            .map(|r| gradnorm_score(r, weight, bias, temperature))
            .collect::<Result<_>>()?,
        (Metric::Mahalanobis, ScoreContext::Gaussian(g)) => rows
            .par_iter()
            .map(|r| mahalanobis_score(g, r))
            .collect::<Result<_>>()?,
        (Metric::Gradnorm, _) => {
            return Err(MoodError::Config("gradnorm needs classifier head weights".into()));
        }
        (Metric::Mahalanobis, _) => {
            return Err(MoodError::Config("mahalanobis needs a fitted Gaussian model".into()));
        }
    };
    ScoreVector::new(metric, metric.uses_temperature().then_some(temperature), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::FeatureSet;
    use crate::gaussian::fit_gaussian;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn msp_examples() {
        assert!(close(msp_score(&[0.7; 10]).unwrap(), -0.1, 1e-15));
        assert!(close(msp_score(&[100.0, 0.0]).unwrap(), -1.0, 1e-15));
        assert!(msp_score(&[1.0]).is_err());
        assert!(matches!(msp_score(&[f64::INFINITY, 0.0]), Err(MoodError::Numeric { .. })));
    }

    #[test]
    fn entropy_examples() {
        assert!(close(entropy_score(&[2.0; 4]).unwrap(), 4f64.ln(), 1e-15));
        assert!(entropy_score(&[100.0, 0.0]).unwrap() < 1e-40);
        let want = -(0.75 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!(close(entropy_score(&[3f64.ln(), 0.0]).unwrap(), want, 1e-15));
        assert!(close(want, 0.5623, 1e-4));
    }

    #[test]
    fn energy_examples() {
        assert!(close(energy_score(&[0.0, 0.0], 1.0).unwrap(), -2f64.ln(), 1e-15));
        // −10 − ln(1 + e^−10)
        assert!(close(energy_score(&[10.0, 0.0], 1.0).unwrap(), -10.000_045_398_899_218, 1e-12));
        assert!(energy_score(&[0.0, 0.0], 0.0).is_err());
    }

    #[test]
    fn gradnorm_examples() {
        // weight rows pick out ln 3 and 0 from feature [1, 1]
        let w = Matrix::from_rows(&[vec![3f64.ln(), 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(close(gradnorm_score(&[1.0, 1.0], &w, &[0.0, 0.0], 1.0).unwrap(), -1.0, 1e-15));
        assert_eq!(gradnorm_score(&[0.0, 0.0], &w, &[0.0, 0.0], 1.0).unwrap(), 0.0);
        let flat = Matrix::zeros(3, 2);
        assert_eq!(gradnorm_score(&[4.0, -2.0], &flat, &[1.0; 3], 1.0).unwrap(), 0.0);
    }

    /// Cross-entropy between uniform and softmax(z/T), z = W f + b.
    fn ce_uniform(w: &Matrix, b: &[f64], f: &[f64], t: f64) -> f64 {
        let z: Vec<f64> = (0..w.rows())
            .map(|k| (w.row(k).iter().zip(f).map(|(a, x)| a * x).sum::<f64>() + b[k]) / t)
            .collect();
        let lse = log_sum_exp(&z);
        -z.iter().map(|v| (v - lse) / z.len() as f64).sum::<f64>()
    }

    proptest! {
        #[test]
        fn gradnorm_matches_finite_differences(
            k in 2usize..5, d in 1usize..5, seed in 0u64..1000, t in 0.5f64..3.0
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut w = Matrix::zeros(k, d);
            w.as_mut_slice().iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
            let b: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let h = 1e-6;
            let mut l1 = 0.0;
            for i in 0..k * d {
                let mut wp = w.clone();
                wp.as_mut_slice()[i] += h;
                let mut wm = w.clone();
                wm.as_mut_slice()[i] -= h;
                l1 += ((ce_uniform(&wp, &b, &f, t) - ce_uniform(&wm, &b, &f, t)) / (2.0 * h)).abs();
            }
            let got = -gradnorm_score(&f, &w, &b, t).unwrap();
            prop_assert!((got - l1).abs() <= 1e-5 * l1.max(1e-6), "{} vs {}", got, l1);
        }

        #[test]
        fn shift_invariance(z in proptest::collection::vec(-10.0f64..10.0, 2..8), c in -50.0f64..50.0) {
            let s: Vec<f64> = z.iter().map(|v| v + c).collect();
            prop_assert!((msp_score(&z).unwrap() - msp_score(&s).unwrap()).abs() < 1e-12);
            prop_assert!((entropy_score(&z).unwrap() - entropy_score(&s).unwrap()).abs() < 1e-12);
            prop_assert!((energy_score(&s, 1.0).unwrap() - (energy_score(&z, 1.0).unwrap() - c)).abs() < 1e-9);
            let w = Matrix::from_vec(z.len(), 1, z.clone()).unwrap();
            let b0 = vec![0.0; z.len()];
            let bc = vec![c; z.len()];
            prop_assert!((gradnorm_score(&[1.0], &w, &b0, 1.0).unwrap() - gradnorm_score(&[1.0], &w, &bc, 1.0).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn entropy_in_range(z in proptest::collection::vec(-30.0f64..30.0, 2..10)) {
            let h = entropy_score(&z).unwrap();
            prop_assert!(h >= -1e-15 && h <= (z.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn energy_temperature_scaling(z in proptest::collection::vec(-10.0f64..10.0, 2..6), t in 0.1f64..10.0) {
            let zs: Vec<f64> = z.iter().map(|v| v / t).collect();
            let lhs = energy_score(&z, t).unwrap();
            let rhs = t * energy_score(&zs, 1.0).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn batch_is_pointwise_and_order_preserving() {
        let z = Matrix::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.0, 0.0, 0.0], vec![5.0, -1.0, 2.0]]).unwrap();
        for m in [Metric::Msp, Metric::Entropy, Metric::Energy] {
            let v = score_batch(&z, m, 1.0, ScoreContext::None).unwrap();
            assert_eq!(v.len(), 3);
            let single: Vec<f64> = (0..3)
                .map(|i| score_batch(&Matrix::from_vec(1, 3, z.row(i).to_vec()).unwrap(), m, 1.0, ScoreContext::None).unwrap().values()[0])
                .collect();
            assert_eq!(v.values(), single.as_slice());
            let rev = Matrix::from_rows(&[z.row(2).to_vec(), z.row(1).to_vec(), z.row(0).to_vec()]).unwrap();
            let r = score_batch(&rev, m, 1.0, ScoreContext::None).unwrap();
            assert_eq!(r.values().iter().rev().copied().collect::<Vec<_>>(), v.values());
        }
    }

    #[test]
    fn missing_context_is_config_error() {
        let x = Matrix::zeros(2, 3);
        assert!(matches!(score_batch(&x, Metric::Gradnorm, 1.0, ScoreContext::None), Err(MoodError::Config(_))));
        assert!(matches!(score_batch(&x, Metric::Mahalanobis, 1.0, ScoreContext::None), Err(MoodError::Config(_))));
    }

    #[test]
    fn orientation() {
        let confident = [12.0, 0.0, 0.0];
        let uniform = [0.0, 0.0, 0.0];
        assert!(msp_score(&confident).unwrap() < msp_score(&uniform).unwrap());
        assert!(entropy_score(&confident).unwrap() < entropy_score(&uniform).unwrap());
        assert!(energy_score(&confident, 1.0).unwrap() < energy_score(&uniform, 1.0).unwrap());
        let w = Matrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let (id_f, ood_f) = ([3.0, 0.0], [0.0, 0.0]);
        assert!(gradnorm_score(&id_f, &w, &[0.0; 3], 1.0).unwrap() < gradnorm_score(&ood_f, &w, &[0.0; 3], 1.0).unwrap());
        let fs = FeatureSet::new(
            Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![5.0, 5.0], vec![6.0, 6.0]]).unwrap(),
            Some(vec![0, 0, 1, 1]),
            "t",
        )
        .unwrap();
        let g = fit_gaussian(&fs, 1e-3).unwrap();
        let id = mahalanobis_score(&g, g.means().row(0)).unwrap();
        let ood = mahalanobis_score(&g, &[-40.0, 40.0]).unwrap();
        assert!(id < ood);
    }

    #[test]
    fn csv_round_trip() {
        let v = ScoreVector::new(Metric::Energy, Some(1.0), vec![0.1, -3.5e-17, 1e300, 2.0 / 3.0]).unwrap();
        assert_eq!(parse_score_csv(&v.to_csv()).unwrap(), v.values());
        assert_eq!(String::from_utf8(scores_to_csv(&[1.5])).unwrap(), "index,score\n0,1.5\n");
    }

    #[test]
    fn csv_rejects_malformed() {
        assert!(parse_score_csv(b"idx,score\n0,1\n").is_err());
        assert!(parse_score_csv(b"index,score\n1,1\n").is_err());
        assert!(parse_score_csv(b"index,score\n0,abc\n").is_err());
        assert!(parse_score_csv(b"index,score\n0,NaN\n").is_err());
        assert!(parse_score_csv(b"index,score\n0,1,2\n").is_err());
        assert_eq!(parse_score_csv(b"index,score\n").unwrap(), Vec::<f64>::new());
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
        }
        assert!("odin".parse::<Metric>().is_err());
    }
}
