#![allow(dead_code)]

use gpvseq_core::gp::{GpPriorSpec, MeanMode};
use gpvseq_core::rng::SeededRng;
use gpvseq_core::variational::LatentPosterior;
use nalgebra::DMatrix;

/// Five-point central difference of `f` at `x[i]`.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut at = |d: f64| {
        p[i] = x[i] + d;
        f(&p)
    };
    let (f2, f1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
    (-f2 + 8.0 * f1 - 8.0 * m1 + m2) / (12.0 * h)
}

/// Absolute check below `floor`, relative above it.
pub fn grad_close(analytic: f64, numeric: f64, rel: f64, floor: f64) -> bool {
    if analytic.abs() > floor || numeric.abs() > floor {
        (analytic - numeric).abs() / analytic.abs().max(numeric.abs()) < rel
    } else {
        (analytic - numeric).abs() < floor
    }
}

pub fn random_matrix(rng: &mut SeededRng, r: usize, c: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.uniform_range(lo, hi))
}

/// Well-conditioned SPD matrix `B·Bᵀ/n + I`.
pub fn random_spd(rng: &mut SeededRng, n: usize) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.normal());
    &b * b.transpose() / n as f64 + DMatrix::identity(n, n)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    for _ in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[(i, j)].powi(2)).sum();
        if off < 1e-26 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[(p, q)].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * m[(p, q)]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..n).map(|i| m[(i, i)]).collect()
}

/// Squared-exponential kernel written out directly.
pub fn se(v: f64, r: f64, a: &[f64], b: &[f64]) -> f64 {
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    v * v * (-d2 / (2.0 * r * r)).exp()
}

pub fn se_gram(v: f64, r: f64, a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let rows = |m: &DMatrix<f64>, i: usize| m.row(i).iter().copied().collect::<Vec<_>>();
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| se(v, r, &rows(a, i), &rows(b, j)))
}

/// A random gp prior over `n` hidden states of width `d` with a posterior near it.
pub fn random_instance(rng: &mut SeededRng, n: usize, d: usize) -> (GpPriorSpec, DMatrix<f64>, LatentPosterior) {
    let spec = GpPriorSpec::new(rng.uniform_range(0.5, 2.0), rng.uniform_range(0.5, 2.0), rng.uniform_range(0.05, 0.5), MeanMode::Identity)
        .unwrap()
        .without_standardization();
    let h = random_matrix(rng, n, d, -1.5, 1.5);
    let mu = &h + random_matrix(rng, n, d, -1.0, 1.0);
    let s = random_matrix(rng, n, d, 0.2, 2.0);
    (spec, h, LatentPosterior::new(mu, s).unwrap())
}

/// `log N(z; m, K)` summed over latent columns, with an LU inverse and determinant.
fn log_normal_columns(z: &DMatrix<f64>, m: &DMatrix<f64>, kinv: &DMatrix<f64>, logdet: f64) -> f64 {
    let n = z.nrows() as f64;
    let mut total = 0.0;
    for c in 0..z.ncols() {
        let d = z.column(c) - m.column(c);
        total += -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + (d.transpose() * kinv * &d)[(0, 0)]);
    }
    total
}

/// Monte Carlo KL from the posterior to the gp prior: `(estimate, standard error)`.
/// The entropy of the diagonal posterior is exact; only the cross term is sampled.
pub fn monte_carlo_kl(spec: &GpPriorSpec, h: &DMatrix<f64>, post: &LatentPosterior, samples: usize, rng: &mut SeededRng) -> (f64, f64) {
    let (n, d) = h.shape();
    let kp = se_gram(spec.v, spec.r, h, h) + DMatrix::identity(n, n) * spec.sigma2;
    let lu = kp.lu();
    let logdet = lu.determinant().ln();
    let kinv = lu.try_inverse().unwrap();
    let sd = post.s.map(f64::sqrt);
    let neg_entropy: f64 = post.s.iter().map(|s| -0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * s).ln()).sum();
    let (mut sum, mut sum2) = (0.0, 0.0);
    for _ in 0..samples {
        let u = DMatrix::from_fn(n, d, |_, _| rng.normal());
        let z = &post.mu + sd.component_mul(&u);
        let x = neg_entropy - log_normal_columns(&z, h, &kinv, logdet);
        sum += x;
        sum2 += x * x;
    }
    let mean = sum / samples as f64;
    (mean, ((sum2 / samples as f64 - mean * mean) / samples as f64).sqrt())
}
