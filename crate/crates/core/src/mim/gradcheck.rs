//! Central finite-difference verification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::ToyMimModel;
use crate::error::{MoodError, Result};

/// Coordinates sampled per check, spread across tensors by size.
pub const MIN_CHECKED_COORDS: usize = 256;
const SAMPLE_SEED: u64 = 0x6772_6164;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Tensor name, flat index, analytic and numeric values at the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error `|a − n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Deterministic coordinate subsample: every tensor contributes at least one
/// coordinate and the total is at least [`MIN_CHECKED_COORDS`] (or every
/// coordinate, for smaller models).
pub fn sample_coordinates(model: &ToyMimModel) -> Vec<(usize, usize)> {
    let lens: Vec<usize> = model.params().iter().map(|p| p.data.len()).collect();
    let total: usize = lens.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(SAMPLE_SEED);
    let mut out = Vec::new();
    for (ti, &len) in lens.iter().enumerate() {
        if len == 0 {
            continue;
        }
        let want = (MIN_CHECKED_COORDS * len).div_ceil(total.max(1)).max(2).min(len);
        let mut idx = rand::seq::index::sample(&mut rng, len, want).into_vec();
        idx.sort_unstable();
        out.extend(idx.into_iter().map(|i| (ti, i)));
    }
    out
}

/// Compares the gradient returned by `loss_and_grad` against central
/// differences with step `epsilon` on [`sample_coordinates`].
pub fn gradient_check<F>(model: &ToyMimModel, loss_and_grad: F, epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&ToyMimModel) -> Result<(f64, ToyMimModel)>,
{
    if !(epsilon > 0.0) {
        return Err(MoodError::Parameter(format!("epsilon {epsilon} must be positive")));
    }
    let (_, grad) = loss_and_grad(model)?;
    let names: Vec<String> = model.params().into_iter().map(|p| p.name).collect();
    let analytic: Vec<Vec<f64>> = grad.params().iter().map(|p| p.data.to_vec()).collect();
    if analytic.len() != names.len() {
        return Err(MoodError::Shape("gradient structure differs from model".into()));
    }
    if analytic.iter().flatten().any(|g| !g.is_finite()) {
        return Err(MoodError::numeric("analytic gradient is not finite"));
    }

    let coords = sample_coordinates(model);
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: coords.len(),
        worst: None,
    };
    for &(ti, i) in &coords {
        let orig = probe.params()[ti].data[i];
        probe.params_mut()[ti][i] = orig + epsilon;
        let plus = loss_and_grad(&probe)?.0;
        probe.params_mut()[ti][i] = orig - epsilon;
        let minus = loss_and_grad(&probe)?.0;
        probe.params_mut()[ti][i] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[ti][i];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((names[ti].clone(), i, a, numeric));
        }
    }
    Ok(report)
}
