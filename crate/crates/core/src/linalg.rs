//! Small dense linear-algebra helpers shared by the GP models.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter schedule: the first retry adds `1e-10 * mean(diag)` and
/// each further retry multiplies by ten until `1e-4 * mean(diag)`.
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

/// A Cholesky factor together with the diagonal jitter it needed.
#[derive(Clone, Debug)]
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// log |A| from the factor diagonal.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Solves `L v = b` for the lower factor.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        let l = self.chol.l_dirty();
        let n = b.len();
        let mut v = b.clone();
        for i in 0..n {
            let mut s = v[i];
            for k in 0..i {
                s -= l[(i, k)] * v[k];
            }
            v[i] = s / l[(i, i)];
        }
        v
    }
}

/// Factorizes a symmetric matrix, escalating diagonal jitter on failure.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<Factor> {
    if let Some(chol) = Cholesky::new(a.clone()) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let n = a.nrows();
    let mean_diag = if n == 0 {
        1.0
    } else {
        (a.diagonal().sum() / n as f64).abs().max(f64::MIN_POSITIVE)
    };
    let mut rel = JITTER_START;
    while rel <= JITTER_MAX * (1.0 + 1e-9) {
        let jitter = rel * mean_diag;
        let mut b = a.clone();
        for i in 0..n {
            b[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(b) {
            return Ok(Factor { chol, jitter });
        }
        rel *= 10.0;
    }
    Err(Error::NotPositiveDefinite {
        jitter: JITTER_MAX * mean_diag,
    })
}
