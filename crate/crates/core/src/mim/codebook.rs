//! k-means codebook over raw patch vectors, used as discrete reconstruction targets.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{MoodError, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    centroids: Matrix,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn new(centroids: Matrix) -> Result<Self> {
        if centroids.rows() == 0 || centroids.cols() == 0 {
            return Err(MoodError::Validation("codebook must be non-empty".into()));
        }
        if !centroids.is_finite() {
            return Err(MoodError::Validation("codebook centroids must be finite".into()));
        }
        Ok(Codebook { centroids })
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    /// Number of centroids.
    pub fn size(&self) -> usize {
        self.centroids.rows()
    }

    /// Length of each centroid.
    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    /// Index of the closest centroid; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, c) in self.centroids.iter_rows().enumerate() {
            let d = sq_dist(c, v);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }

    /// Total squared distance of every vector to its nearest centroid.
    pub fn quantization_error(&self, vectors: &[&[f64]]) -> f64 {
        vectors
            .iter()
            .map(|v| sq_dist(self.centroids.row(self.nearest(v)), v))
            .sum()
    }
}

/// Result of [`build_codebook`].
#[derive(Debug, Clone)]
pub struct CodebookFit {
    pub codebook: Codebook,
    /// Quantization error after initialization, then after each Lloyd iteration.
    pub errors: Vec<f64>,
}

/// Lloyd's k-means from a seeded farthest-point initialization.
///
/// The first centroid is a uniformly drawn vector; each further centroid is
/// the vector farthest from all chosen so far (lowest index on ties). A
/// cluster that empties keeps its previous centroid.
pub fn build_codebook(vectors: &[&[f64]], size: usize, iters: usize, seed: u64) -> Result<CodebookFit> {
    if size == 0 {
        return Err(MoodError::Parameter("codebook size must be positive".into()));
    }
    let dim = vectors.first().map_or(0, |v| v.len());
    if dim == 0 || vectors.iter().any(|v| v.len() != dim) {
        return Err(MoodError::Shape("codebook input vectors must share a positive length".into()));
    }
    let distinct: HashSet<Vec<u64>> = vectors
        .iter()
        .map(|v| v.iter().map(|x| x.to_bits()).collect())
        .collect();
    if distinct.len() < size {
        return Err(MoodError::Data(format!(
            "{} distinct vectors cannot seed {size} centroids",
            distinct.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = Matrix::zeros(size, dim);
    let first = rng.gen_range(0..vectors.len());
    centroids.row_mut(0).copy_from_slice(vectors[first]);
    let mut min_d: Vec<f64> = vectors.iter().map(|v| sq_dist(v, vectors[first])).collect();
    for k in 1..size {
        let mut far = (0, -1.0);
        for (i, &d) in min_d.iter().enumerate() {
            if d > far.1 {
                far = (i, d);
            }
        }
        centroids.row_mut(k).copy_from_slice(vectors[far.0]);
        for (m, v) in min_d.iter_mut().zip(vectors) {
            *m = m.min(sq_dist(v, vectors[far.0]));
        }
    }

    let mut codebook = Codebook { centroids };
    let mut errors = vec![codebook.quantization_error(vectors)];
    for _ in 0..iters {
        let mut sums = Matrix::zeros(size, dim);
        let mut counts = vec![0usize; size];
        for v in vectors {
            let c = codebook.nearest(v);
            counts[c] += 1;
            for (s, &x) in sums.row_mut(c).iter_mut().zip(v.iter()) {
                *s += x;
            }
        }
        let mut moved = false;
        for (c, &n) in counts.iter().enumerate() {
            if n == 0 {
                continue;
            }
            for (dst, &s) in codebook.centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                let new = s / n as f64;
                moved |= new != *dst;
                *dst = new;
            }
        }
        errors.push(codebook.quantization_error(vectors));
        if !moved {
            break;
        }
    }
    Ok(CodebookFit { codebook, errors })
}
