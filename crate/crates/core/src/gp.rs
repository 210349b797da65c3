//! Squared-exponential Gaussian-process prior over encoder hidden states.
//!
//! Each latent dimension is an independent GP and all dimensions share one
//! Gram matrix, so a joint over `n` positions and `D` latent dimensions costs a
//! single `n×n` factorization. Kernel inputs are optionally standardized per
//! sequence (zero mean, unit variance per coordinate) before distances are
//! taken; the prior mean is always computed from the raw states.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, CholeskyFactor, SpdMatrix};
use crate::rng::SeededRng;

/// Variance guard used by per-sequence standardization.
pub const STANDARDIZE_EPS: f64 = 1e-8;

/// Admissible signal scales when a spec comes from configuration.
pub const V_BOUNDS: (f64, f64) = (0.01, 100.0);
/// Admissible length scales when a spec comes from configuration.
pub const R_BOUNDS: (f64, f64) = (1e-4, 10.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// `m(h) = h`
    Identity,
    /// `m(h) = 0`
    Zero,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpPriorSpec {
    pub v: f64,
    pub r: f64,
    pub sigma2: f64,
    pub mean_mode: MeanMode,
    #[serde(default = "default_true")]
    pub standardize: bool,
}

impl Default for GpPriorSpec {
    fn default() -> Self {
        Self {
            v: 1.0,
            r: 1.0,
            sigma2: 0.1,
            mean_mode: MeanMode::Identity,
            standardize: true,
        }
    }
}

impl GpPriorSpec {
    /// A spec whose `v` and `r` lie inside the configuration grid bounds.
    pub fn new(v: f64, r: f64, sigma2: f64, mean_mode: MeanMode) -> Result<Self> {
        let spec = Self::with_override(v, r, sigma2, mean_mode)?;
        spec.check_bounds()?;
        Ok(spec)
    }

    /// Skips the grid-bound check; values still have to be positive.
    pub fn with_override(v: f64, r: f64, sigma2: f64, mean_mode: MeanMode) -> Result<Self> {
        let spec = Self {
            v,
            r,
            sigma2,
            mean_mode,
            standardize: true,
        };
        spec.check_positive()?;
        Ok(spec)
    }

    pub fn without_standardization(mut self) -> Self {
        self.standardize = false;
        self
    }

    pub fn check_positive(&self) -> Result<()> {
        if !(self.v > 0.0 && self.v.is_finite()) {
            return Err(Error::config(format!("v must be positive, got {}", self.v)));
        }
        if !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::config(format!("r must be positive, got {}", self.r)));
        }
        if !(self.sigma2 >= 0.0 && self.sigma2.is_finite()) {
            return Err(Error::config(format!("sigma2 must be non-negative, got {}", self.sigma2)));
        }
        Ok(())
    }

    pub fn check_bounds(&self) -> Result<()> {
        self.check_positive()?;
        if self.v < V_BOUNDS.0 || self.v > V_BOUNDS.1 {
            return Err(Error::config(format!("v = {} outside [{}, {}]", self.v, V_BOUNDS.0, V_BOUNDS.1)));
        }
        if self.r < R_BOUNDS.0 || self.r > R_BOUNDS.1 {
            return Err(Error::config(format!("r = {} outside [{}, {}]", self.r, R_BOUNDS.0, R_BOUNDS.1)));
        }
        Ok(())
    }

    fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.v * self.v * (-d2 / (2.0 * self.r * self.r)).exp()
    }

    /// `k(h, h2) = v² exp(−‖h − h2‖² / 2r²)`
    pub fn kernel(&self, h: &[f64], h2: &[f64]) -> Result<f64> {
        if h.len() != h2.len() {
            return Err(Error::dim(format!("kernel inputs have lengths {} and {}", h.len(), h2.len())));
        }
        Ok(self.k(h, h2))
    }

    /// Cross-covariance between the rows of `a` and the rows of `b`.
    pub fn cross_gram(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
        let ar: Vec<Vec<f64>> = a.row_iter().map(|r| r.iter().copied().collect()).collect();
        let br: Vec<Vec<f64>> = b.row_iter().map(|r| r.iter().copied().collect()).collect();
        DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| self.k(&ar[i], &br[j]))
    }

    /// Marginal prior over `query` rows: mean per `mean_mode`, covariance `k(q, q)`.
    ///
    /// Without standardization, as there are no observed states to take
    /// statistics from.
    pub fn prior_predict(&self, query: &DMatrix<f64>) -> (DMatrix<f64>, SpdMatrix) {
        let mean = match self.mean_mode {
            MeanMode::Identity => query.clone(),
            MeanMode::Zero => DMatrix::zeros(query.nrows(), query.ncols()),
        };
        let cov = SpdMatrix::new(self.cross_gram(query, query)).expect("square");
        (mean, cov)
    }
}

/// `k(h, h2)` as a free function.
pub fn kernel(spec: &GpPriorSpec, h: &[f64], h2: &[f64]) -> Result<f64> {
    spec.kernel(h, h2)
}

/// Per-coordinate affine map to zero mean and unit variance across positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mut mean = Vec::with_capacity(x.ncols());
        let mut scale = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean.push(m);
            scale.push((var + STANDARDIZE_EPS).sqrt());
        }
        Self { mean, scale }
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j])
    }
}

/// Joint prior over `z_{1:n}` given hidden states `h_{1:n}`.
#[derive(Clone, Debug)]
pub struct GpJoint {
    spec: GpPriorSpec,
    standardizer: Option<Standardizer>,
    inputs: DMatrix<f64>,
    mean: DMatrix<f64>,
    gram: SpdMatrix,
    chol: CholeskyFactor,
}

impl GpJoint {
    /// Builds the joint with the mean given by `spec.mean_mode`.
    pub fn build(spec: &GpPriorSpec, hidden: &DMatrix<f64>) -> Result<Self> {
        let mean = match spec.mean_mode {
            MeanMode::Identity => hidden.clone(),
            MeanMode::Zero => DMatrix::zeros(hidden.nrows(), hidden.ncols()),
        };
        Self::with_mean(spec, hidden, mean)
    }

    /// Builds the joint with an explicit prior mean (e.g. projected states).
    pub fn with_mean(spec: &GpPriorSpec, hidden: &DMatrix<f64>, mean: DMatrix<f64>) -> Result<Self> {
        spec.check_positive()?;
        if mean.nrows() != hidden.nrows() {
            return Err(Error::dim(format!(
                "prior mean has {} rows, hidden states have {}",
                mean.nrows(),
                hidden.nrows()
            )));
        }
        let standardizer = spec.standardize.then(|| Standardizer::fit(hidden));
        let inputs = match &standardizer {
            Some(s) => s.apply(hidden),
            None => hidden.clone(),
        };
        let mut g = spec.cross_gram(&inputs, &inputs);
        let v2 = spec.v * spec.v;
        for i in 0..g.nrows() {
            g[(i, i)] = v2;
        }
        let gram = SpdMatrix::new(g)?;
        let chol = cholesky(&gram.add_diagonal(spec.sigma2))?;
        Ok(Self {
            spec: *spec,
            standardizer,
            inputs,
            mean,
            gram,
            chol,
        })
    }

    pub fn n(&self) -> usize {
        self.mean.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn spec(&self) -> &GpPriorSpec {
        &self.spec
    }

    pub fn mean(&self) -> &DMatrix<f64> {
        &self.mean
    }

    /// Kernel inputs after optional standardization.
    pub fn inputs(&self) -> &DMatrix<f64> {
        &self.inputs
    }

    pub fn gram(&self) -> &SpdMatrix {
        &self.gram
    }

    /// Factor of `gram + σ²I` (plus any jitter).
    pub fn chol(&self) -> &CholeskyFactor {
        &self.chol
    }

    /// Draws `z_d = m_d + L u_d` independently for every latent dimension.
    pub fn sample_prior_function(&self, rng: &mut SeededRng) -> DMatrix<f64> {
        let (n, d) = (self.n(), self.latent_dim());
        let mut z = self.mean.clone();
        for col in 0..d {
            let u = DVector::from_vec(rng.normals(n));
            let lu = self.chol.l() * u;
            for i in 0..n {
                z[(i, col)] += lu[i];
            }
        }
        z
    }

    /// Predictive mean and covariance at `query` given latent values `observed_z`.
    ///
    /// The covariance is shared across latent dimensions; negative diagonal
    /// round-off is clamped to zero.
    pub fn posterior_predict(
        &self,
        observed_z: &DMatrix<f64>,
        query: &DMatrix<f64>,
    ) -> Result<(DMatrix<f64>, SpdMatrix)> {
        if observed_z.nrows() != self.n() || observed_z.ncols() != self.latent_dim() {
            return Err(Error::dim(format!(
                "observed z is {}x{}, joint is {}x{}",
                observed_z.nrows(),
                observed_z.ncols(),
                self.n(),
                self.latent_dim()
            )));
        }
        if query.ncols() != self.inputs.ncols() {
            return Err(Error::dim(format!(
                "query has {} columns, hidden states have {}",
                query.ncols(),
                self.inputs.ncols()
            )));
        }
        let m = query.nrows();
        let d = self.latent_dim();
        let prior_mean = match self.spec.mean_mode {
            MeanMode::Identity if d == query.ncols() => query.clone(),
            MeanMode::Identity => {
                return Err(Error::dim(format!(
                    "identity mean needs latent dim {d} to equal query dim {}",
                    query.ncols()
                )))
            }
            MeanMode::Zero => DMatrix::zeros(m, d),
        };
        let q = match &self.standardizer {
            Some(s) => s.apply(query),
            None => query.clone(),
        };
        let kqq = self.spec.cross_gram(&q, &q);
        if self.n() == 0 {
            return Ok((prior_mean, SpdMatrix::new(kqq)?));
        }
        let kqx = self.spec.cross_gram(&q, &self.inputs);
        let residual = observed_z - &self.mean;
        let alpha = crate::linalg::solve_spd(&self.chol, &residual)?;
        let mean = prior_mean + &kqx * alpha;
        let w = self
            .chol
            .l()
            .solve_lower_triangular(&kqx.transpose())
            .ok_or_else(|| Error::Numerical("singular factor".into()))?;
        let mut cov = kqq - w.transpose() * w;
        for i in 0..m {
            if cov[(i, i)] < 0.0 {
                cov[(i, i)] = 0.0;
            }
        }
        Ok((mean, SpdMatrix::new(cov)?))
    }
}

/// Builds the joint prior over `hidden` rows.
pub fn build_joint(spec: &GpPriorSpec, hidden: &DMatrix<f64>) -> Result<GpJoint> {
    GpJoint::build(spec, hidden)
}
