//! Symmetric positive-definite linear algebra kept off the gradient tape.
//!
//! Inverses are never formed: every `K⁻¹ b` goes through the two triangular
//! solves of a [`CholeskyFactor`].

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Multipliers of the mean diagonal tried, in order, when a factorization fails.
pub const JITTER_SCHEDULE: [f64; 4] = [1e-10, 1e-8, 1e-6, 1e-4];

/// A symmetric matrix intended for Cholesky factorization.
#[derive(Clone, Debug, PartialEq)]
pub struct SpdMatrix {
    data: DMatrix<f64>,
}

impl SpdMatrix {
    /// Wraps `m`, replacing it by `(m + mᵀ) / 2`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::dim(format!(
                "SPD matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let sym = (&m + m.transpose()) * 0.5;
        Ok(Self { data: sym })
    }

    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::dim(format!("expected {} entries, got {}", n * n, data.len())));
        }
        Self::new(DMatrix::from_row_slice(n, n, data))
    }

    pub fn identity(n: usize) -> Self {
        Self {
            data: DMatrix::identity(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[(i, j)]
    }

    pub fn mean_diagonal(&self) -> f64 {
        if self.n() == 0 {
            return 0.0;
        }
        self.data.diagonal().sum() / self.n() as f64
    }

    /// Returns `self + c·I`.
    pub fn add_diagonal(&self, c: f64) -> Self {
        let mut data = self.data.clone();
        for i in 0..self.n() {
            data[(i, i)] += c;
        }
        Self { data }
    }
}

/// Lower-triangular `L` with `L·Lᵀ = source + jitter·I`.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    l: DMatrix<f64>,
    logdet: f64,
    jitter: f64,
}

impl CholeskyFactor {
    pub fn n(&self) -> usize {
        self.l.nrows()
    }

    pub fn l(&self) -> &DMatrix<f64> {
        &self.l
    }

    /// `log det(L·Lᵀ) = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// Absolute diagonal jitter that was added before the factorization succeeded.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.l * self.l.transpose()
    }

    /// Diagonal of `(L·Lᵀ)⁻¹`, computed column by column from `L⁻¹`.
    pub fn inverse_diagonal(&self) -> Vec<f64> {
        let n = self.n();
        let linv = self
            .l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("factor has a positive diagonal");
        (0..n).map(|i| linv.column(i).norm_squared()).collect()
    }

    /// Solves `(L·Lᵀ) x = b` for a row-major `n×k` right-hand side in place.
    pub(crate) fn solve_rows_in_place(&self, b: &mut [f64], cols: usize) {
        let n = self.n();
        debug_assert_eq!(b.len(), n * cols);
        // forward: L y = b
        for i in 0..n {
            for j in 0..i {
                let lij = self.l[(i, j)];
                for c in 0..cols {
                    b[i * cols + c] -= lij * b[j * cols + c];
                }
            }
            let d = self.l[(i, i)];
            for c in 0..cols {
                b[i * cols + c] /= d;
            }
        }
        // backward: Lᵀ x = y
        for i in (0..n).rev() {
            for j in i + 1..n {
                let lji = self.l[(j, i)];
                for c in 0..cols {
                    b[i * cols + c] -= lji * b[j * cols + c];
                }
            }
            let d = self.l[(i, i)];
            for c in 0..cols {
                b[i * cols + c] /= d;
            }
        }
    }
}

fn try_factor(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Some(DMatrix::zeros(0, 0));
    }
    let chol = nalgebra::Cholesky::new(m.clone())?;
    let l = chol.unpack();
    if l.diagonal().iter().all(|d| *d > 0.0 && d.is_finite()) {
        Some(l)
    } else {
        None
    }
}

/// Cholesky factorization with the fixed jitter schedule.
pub fn cholesky(m: &SpdMatrix) -> Result<CholeskyFactor> {
    let scale = m.mean_diagonal().abs().max(f64::MIN_POSITIVE);
    let mut tried = Vec::new();
    let attempts = std::iter::once(0.0).chain(JITTER_SCHEDULE.iter().map(|j| j * scale));
    for jitter in attempts {
        let candidate = if jitter == 0.0 {
            m.data.clone()
        } else {
            m.add_diagonal(jitter).data
        };
        if let Some(l) = try_factor(&candidate) {
            let logdet = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            return Ok(CholeskyFactor { l, logdet, jitter });
        }
        tried.push(jitter);
    }
    Err(Error::NotPositiveDefinite { jitters: tried })
}

/// Solves `(L·Lᵀ) x = b`.
pub fn solve_spd(f: &CholeskyFactor, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.nrows() != f.n() {
        return Err(Error::dim(format!(
            "solve_spd: factor has order {}, rhs has {} rows",
            f.n(),
            b.nrows()
        )));
    }
    let y = f
        .l
        .solve_lower_triangular(b)
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
    f.l.tr_solve_lower_triangular(&y)
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))
}

/// Draws `mean + L·u` with `u` i.i.d. standard normal.
pub fn sample_mvn(mean: &DVector<f64>, f: &CholeskyFactor, rng: &mut SeededRng) -> Result<DVector<f64>> {
    if mean.len() != f.n() {
        return Err(Error::dim(format!(
            "sample_mvn: mean has length {}, factor has order {}",
            mean.len(),
            f.n()
        )));
    }
    let u = DVector::from_vec(rng.normals(f.n()));
    Ok(mean + &f.l * u)
}
