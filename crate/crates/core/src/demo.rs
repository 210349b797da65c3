//! One-dimensional prior and posterior function samples for plotting.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gp::{GpJoint, GpPriorSpec, MeanMode};
use crate::linalg::{cholesky, sample_mvn, SpdMatrix};
use crate::rng::SeededRng;

pub const DEMO_SAMPLES: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct DemoRow {
    pub x: f64,
    pub sample_id: String,
    pub value: f64,
    pub band_lo: f64,
    pub band_hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GpDemo {
    pub grid: Vec<f64>,
    pub train_x: Vec<f64>,
    pub train_y: Vec<f64>,
    pub posterior_var: Vec<f64>,
    pub rows: Vec<DemoRow>,
}

/// Evenly spaced points on `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

fn column(xs: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(xs.len(), 1, xs)
}

fn draw(mean: &DMatrix<f64>, cov: &SpdMatrix, rng: &mut SeededRng) -> Result<DVector<f64>> {
    let f = cholesky(cov)?;
    sample_mvn(&DVector::from_column_slice(mean.as_slice()), &f, rng)
}

/// Prior draws on `grid`, then posterior draws after observing `sin(x)` at
/// `n_train` grid points spread evenly across it. Inputs are used raw and the
/// prior mean is zero.
pub fn gp_demo(spec: &GpPriorSpec, grid: &[f64], n_train: usize, seed: u64) -> Result<GpDemo> {
    if grid.is_empty() || n_train > grid.len() {
        return Err(Error::config(format!("{n_train} training points on a grid of {}", grid.len())));
    }
    let spec = GpPriorSpec {
        mean_mode: MeanMode::Zero,
        ..spec.without_standardization()
    };
    spec.check_positive()?;
    let q = column(grid);
    let mut rows = Vec::with_capacity(2 * DEMO_SAMPLES * grid.len());

    let (_, prior_cov) = spec.prior_predict(&q);
    for (k, f) in prior_samples(&spec, grid, DEMO_SAMPLES, seed)?.into_iter().enumerate() {
        for (i, &x) in grid.iter().enumerate() {
            let sd = prior_cov.get(i, i).sqrt();
            rows.push(DemoRow {
                x,
                sample_id: format!("prior-{k}"),
                value: f[i],
                band_lo: -2.0 * sd,
                band_hi: 2.0 * sd,
            });
        }
    }

    let idx: Vec<usize> = match n_train {
        0 => Vec::new(),
        1 => vec![grid.len() / 2],
        n => (0..n).map(|j| j * (grid.len() - 1) / (n - 1)).collect(),
    };
    let train_x: Vec<f64> = idx.iter().map(|&i| grid[i]).collect();
    let train_y: Vec<f64> = train_x.iter().map(|x| x.sin()).collect();
    let joint = GpJoint::build(&spec, &column(&train_x))?;
    let (post_mean, post_cov) = joint.posterior_predict(&column(&train_y), &q)?;
    let posterior_var: Vec<f64> = (0..grid.len()).map(|i| post_cov.get(i, i)).collect();
    for k in 0..DEMO_SAMPLES {
        let mut rng = SeededRng::derived(seed, "posterior", k as u64);
        let f = draw(&post_mean, &post_cov, &mut rng)?;
        for (i, &x) in grid.iter().enumerate() {
            let sd = posterior_var[i].sqrt();
            rows.push(DemoRow {
                x,
                sample_id: format!("posterior-{k}"),
                value: f[i],
                band_lo: post_mean[(i, 0)] - 2.0 * sd,
                band_hi: post_mean[(i, 0)] + 2.0 * sd,
            });
        }
    }
    Ok(GpDemo {
        grid: grid.to_vec(),
        train_x,
        train_y,
        posterior_var,
        rows,
    })
}

/// `count` zero-mean prior function draws on `grid`; draw `k` uses the
/// stream `(seed, "prior", k)`.
pub fn prior_samples(spec: &GpPriorSpec, grid: &[f64], count: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let (mean, cov) = spec.prior_predict(&column(grid));
    let f = cholesky(&cov)?;
    let mean = DVector::zeros(mean.nrows());
    (0..count)
        .map(|k| {
            let mut rng = SeededRng::derived(seed, "prior", k as u64);
            Ok(sample_mvn(&mean, &f, &mut rng)?.as_slice().to_vec())
        })
        .collect()
}

impl GpDemo {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,sample_id,value,band_lo,band_hi\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.x, r.sample_id, r.value, r.band_lo, r.band_hi));
        }
        out
    }
}
