//! Symmetric factorizations shared by the sampler, the regression, and the
//! likelihood.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

/// Relative jitter levels (fractions of the mean diagonal) tried in order.
const JITTER_LEVELS: [f64; 6] = [0.0, 1e-12, 1e-11, 1e-10, 1e-9, 1e-8];

#[derive(Debug, Error, PartialEq)]
#[error("matrix of size {size} is not positive definite even with jitter {max_jitter:e}")]
pub struct FactorizationError {
    pub size: usize,
    pub max_jitter: f64,
}

/// Cholesky factor of `matrix + jitter * I`.
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// `L^-1 b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky factor has a non-zero diagonal")
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }
}

fn mean_diagonal(matrix: &DMatrix<f64>) -> f64 {
    let n = matrix.nrows().max(1) as f64;
    let m = matrix.diagonal().sum() / n;
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Cholesky with jitter escalating from 0 to 1e-8 of the mean diagonal.
pub fn cholesky_with_jitter(matrix: &DMatrix<f64>) -> Result<Factor, FactorizationError> {
    let scale = mean_diagonal(matrix);
    for level in JITTER_LEVELS {
        let jitter = level * scale;
        let mut m = matrix.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(m) {
            return Ok(Factor { chol, jitter });
        }
    }
    Err(FactorizationError {
        size: matrix.nrows(),
        max_jitter: JITTER_LEVELS[JITTER_LEVELS.len() - 1] * scale,
    })
}

/// A matrix `B` with `B B^T` equal to the (PSD part of the) input: the
/// jittered Cholesky factor when it exists, otherwise eigenvectors scaled by
/// the square roots of eigenvalues clipped at zero.
pub fn sampling_factor(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>, FactorizationError> {
    if let Ok(f) = cholesky_with_jitter(matrix) {
        return Ok(f.chol.l());
    }
    let eig = SymmetricEigen::new(matrix.clone());
    let max = eig.eigenvalues.amax();
    if !max.is_finite() || eig.eigenvalues.min() < -1e-6 * max.max(1e-300) {
        return Err(FactorizationError {
            size: matrix.nrows(),
            max_jitter: JITTER_LEVELS[JITTER_LEVELS.len() - 1] * mean_diagonal(matrix),
        });
    }
    let mut b = eig.eigenvectors;
    for (j, &ev) in eig.eigenvalues.iter().enumerate() {
        let s = ev.max(0.0).sqrt();
        b.column_mut(j).scale_mut(s);
    }
    Ok(b)
}
