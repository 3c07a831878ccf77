//! Class-conditional Gaussians with a shared covariance, scored by the
//! minimum squared Mahalanobis distance over class means.

use std::path::Path;

use rayon::prelude::*;
use serde_json::json;

use crate::datamodel::{Container, Dtype, FeatureSet};
use crate::error::{MoodError, Result};
use crate::linalg::{pairwise_sum, Matrix};

const KIND: &str = "gaussian_model";
pub const DEFAULT_REG: f64 = 1e-6;
/// Lower bound on the diagonal loading.
pub const EPSILON_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Diagonal loading relative to `trace(Σ)/d`.
    pub reg: f64,
    /// Standardize each feature column (ID mean 0, unit variance) before fitting.
    pub standardize: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            reg: DEFAULT_REG,
            standardize: false,
        }
    }
}

/// Per-column affine map `(x − shift) / scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    fn apply(&self, f: &[f64]) -> Vec<f64> {
        f.iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    means: Matrix,
    chol: Matrix,
    class_counts: Vec<usize>,
    reg_epsilon: f64,
    standardizer: Option<Standardizer>,
}

impl GaussianModel {
    pub fn means(&self) -> &Matrix {
        &self.means
    }

    /// Lower-triangular factor of the regularized covariance.
    pub fn chol(&self) -> &Matrix {
        &self.chol
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn class_count(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn reg_epsilon(&self) -> f64 {
        self.reg_epsilon
    }

    pub fn standardizer(&self) -> Option<&Standardizer> {
        self.standardizer.as_ref()
    }

    /// `L·Lᵀ`, the regularized covariance actually used for scoring.
    pub fn regularized_covariance(&self) -> Matrix {
        self.chol.matmul(&self.chol.transpose())
    }

    /// The pooled covariance before diagonal loading.
    pub fn covariance(&self) -> Matrix {
        let mut s = self.regularized_covariance();
        for i in 0..s.rows() {
            s[(i, i)] -= self.reg_epsilon;
        }
        s
    }

    /// Builds a model from explicit parameters; `covariance` must be positive definite.
    pub fn from_parts(means: Matrix, covariance: &Matrix, class_counts: Vec<usize>) -> Result<Self> {
        let d = means.cols();
        if covariance.rows() != d || covariance.cols() != d {
            return Err(MoodError::Shape(format!(
                "covariance is {}x{}, means have {d} columns",
                covariance.rows(),
                covariance.cols()
            )));
        }
        if class_counts.len() != means.rows() || means.rows() == 0 {
            return Err(MoodError::Shape("class_counts must match the number of means".into()));
        }
        let chol = cholesky(covariance)?;
        Ok(GaussianModel {
            means,
            chol,
            class_counts,
            reg_epsilon: 0.0,
            standardizer: None,
        })
    }

    fn prepare(&self, f: &[f64]) -> Result<Vec<f64>> {
        if f.len() != self.dim() {
            return Err(MoodError::Shape(format!("feature has {} entries, model expects {}", f.len(), self.dim())));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(MoodError::numeric("non-finite feature"));
        }
        Ok(match &self.standardizer {
            Some(s) => s.apply(f),
            None => f.to_vec(),
        })
    }

    /// Squared Mahalanobis distance from `f` to every class mean.
    pub fn class_distances(&self, f: &[f64]) -> Result<Vec<f64>> {
        let f = self.prepare(f)?;
        let mut diff = vec![0.0; f.len()];
        Ok((0..self.class_count())
            .map(|c| {
                for ((d, x), m) in diff.iter_mut().zip(&f).zip(self.means.row(c)) {
                    *d = x - m;
                }
                // (f−μ)ᵀ(LLᵀ)⁻¹(f−μ) = ‖L⁻¹(f−μ)‖²
                let z = forward_solve(&self.chol, &diff);
                z.iter().map(|v| v * v).sum()
            })
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load_kind(path, KIND)?)
    }

    pub fn to_container(&self) -> Container {
        let (k, d) = (self.class_count(), self.dim());
        let mut c = Container::new(
            KIND,
            json!({
                "classes": k,
                "dim": d,
                "reg_epsilon": self.reg_epsilon,
                "class_counts": self.class_counts,
                "standardized": self.standardizer.is_some(),
            }),
        );
        c.push("means", Dtype::F64, vec![k, d], self.means.as_slice().to_vec());
        c.push("chol", Dtype::F64, vec![d, d], self.chol.as_slice().to_vec());
        if let Some(s) = &self.standardizer {
            c.push("standardize_shift", Dtype::F64, vec![d], s.shift.clone());
            c.push("standardize_scale", Dtype::F64, vec![d], s.scale.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta_usize = |key: &str| {
            c.meta
                .get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| MoodError::Format(format!("gaussian model lacks {key}")))
        };
        let (k, d) = (meta_usize("classes")?, meta_usize("dim")?);
        let reg_epsilon = c
            .meta
            .get("reg_epsilon")
            .and_then(|v| v.as_f64())
            .ok_or_else(|| MoodError::Format("gaussian model lacks reg_epsilon".into()))?;
        let class_counts: Vec<usize> = c
            .meta
            .get("class_counts")
            .cloned()
            .and_then(|v| serde_json::from_value(v).ok())
            .ok_or_else(|| MoodError::Format("gaussian model lacks class_counts".into()))?;
        if class_counts.len() != k {
            return Err(MoodError::Format("class_counts length disagrees with classes".into()));
        }
        let means = Matrix::from_vec(k, d, c.tensor("means", &[k, d])?.to_vec())?;
        let chol = Matrix::from_vec(d, d, c.tensor("chol", &[d, d])?.to_vec())?;
        for i in 0..d {
            if !(chol[(i, i)] > 0.0) || (i + 1..d).any(|j| chol[(i, j)] != 0.0) {
                return Err(MoodError::Format("stored factor is not lower-triangular with positive diagonal".into()));
            }
        }
        let standardizer = if c.has("standardize_shift") {
            Some(Standardizer {
                shift: c.tensor("standardize_shift", &[d])?.to_vec(),
                scale: c.tensor("standardize_scale", &[d])?.to_vec(),
            })
        } else {
            None
        };
        Ok(GaussianModel {
            means,
            chol,
            class_counts,
            reg_epsilon,
            standardizer,
        })
    }
}

/// Fits per-class means and the pooled within-class covariance.
///
/// Class indices run over `0..=max(label)`; every one of them must have at
/// least two samples.
pub fn fit_gaussian(fs: &FeatureSet, reg: f64) -> Result<GaussianModel> {
    fit_gaussian_with(fs, FitOptions { reg, standardize: false })
}

pub fn fit_gaussian_with(fs: &FeatureSet, opts: FitOptions) -> Result<GaussianModel> {
    if !(opts.reg > 0.0 && opts.reg.is_finite()) {
        return Err(MoodError::Parameter(format!("reg {} must be positive", opts.reg)));
    }
    let labels = fs
        .labels()
        .ok_or_else(|| MoodError::Data("fitting needs labelled features".into()))?;
    let (n, d) = (fs.n_rows(), fs.n_cols());
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c < 2) {
        return Err(MoodError::Data(format!("class {c} has {} samples; at least 2 are needed", counts[c])));
    }

    let standardizer = opts.standardize.then(|| standardizer_for(fs.features()));
    let x: Matrix = match &standardizer {
        Some(s) => Matrix::from_rows(&fs.features().iter_rows().map(|r| s.apply(r)).collect::<Vec<_>>())?,
        None => fs.features().clone(),
    };

    let mut means = Matrix::zeros(k, d);
    for c in 0..k {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        let mut col = Vec::with_capacity(members.len());
        for j in 0..d {
            col.clear();
            col.extend(members.iter().map(|&i| x[(i, j)]));
            means[(c, j)] = pairwise_sum(&col) / members.len() as f64;
        }
    }
    let mut centered = x;
    for i in 0..n {
        let mu = means.row(labels[i]).to_vec();
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mu) {
            *v -= m;
        }
    }
    let cols: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| centered[(i, j)]).collect()).collect();
    let upper: Vec<Vec<f64>> = (0..d)
        .into_par_iter()
        .map(|p| {
            let mut prod = vec![0.0; n];
            (p..d)
                .map(|q| {
                    for ((o, a), b) in prod.iter_mut().zip(&cols[p]).zip(&cols[q]) {
                        *o = a * b;
                    }
                    pairwise_sum(&prod) / n as f64
                })
                .collect()
        })
        .collect();
    let mut sigma = Matrix::zeros(d, d);
    for p in 0..d {
        for (off, &v) in upper[p].iter().enumerate() {
            sigma[(p, p + off)] = v;
            sigma[(p + off, p)] = v;
        }
    }

    let trace: f64 = (0..d).map(|i| sigma[(i, i)]).sum();
    let eps = (opts.reg * trace / d as f64).max(EPSILON_FLOOR);
    for i in 0..d {
        sigma[(i, i)] += eps;
    }
    let chol = cholesky(&sigma)?;
    Ok(GaussianModel {
        means,
        chol,
        class_counts: counts,
        reg_epsilon: eps,
        standardizer,
    })
}

fn standardizer_for(x: &Matrix) -> Standardizer {
    let n = x.rows() as f64;
    let (mut shift, mut scale) = (Vec::new(), Vec::new());
    for j in 0..x.cols() {
        let col: Vec<f64> = x.iter_rows().map(|r| r[j]).collect();
        let m = pairwise_sum(&col) / n;
        let sq: Vec<f64> = col.iter().map(|v| (v - m) * (v - m)).collect();
        let sd = (pairwise_sum(&sq) / n).sqrt();
        shift.push(m);
        scale.push(if sd > 0.0 { sd } else { 1.0 });
    }
    Standardizer { shift, scale }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let d = a.rows();
    if a.cols() != d {
        return Err(MoodError::Shape("cholesky needs a square matrix".into()));
    }
    let mut l = Matrix::zeros(d, d);
    for j in 0..d {
        let s: f64 = (0..j).map(|k| l[(j, k)] * l[(j, k)]).sum();
        let diag = a[(j, j)] - s;
        if !(diag > 0.0) || !diag.is_finite() {
            return Err(MoodError::numeric(format!(
                "covariance is not positive definite (pivot {j} = {diag:e})"
            )));
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..d {
            let s: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            l[(i, j)] = (a[(i, j)] - s) / ljj;
        }
    }
    Ok(l)
}

/// Solves `L·z = b` for lower-triangular `L`.
pub fn forward_solve(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; b.len()];
    for i in 0..b.len() {
        let s: f64 = (0..i).map(|k| l[(i, k)] * z[k]).sum();
        z[i] = (b[i] - s) / l[(i, i)];
    }
    z
}

/// Minimum squared Mahalanobis distance to any class mean; higher = more OOD.
pub fn mahalanobis_score(m: &GaussianModel, f: &[f64]) -> Result<f64> {
    let d = m.class_distances(f)?;
    Ok(d.into_iter().fold(f64::INFINITY, f64::min))
}

/// Nearest class by Mahalanobis distance; ties go to the lowest index.
pub fn predict_class(m: &GaussianModel, f: &[f64]) -> Result<usize> {
    let d = m.class_distances(f)?;
    let mut best = 0;
    for (c, &v) in d.iter().enumerate() {
        if v < d[best] {
            best = c;
        }
    }
    Ok(best)
}
