//! Amortized diagonal posterior, reparameterized sampling, closed-form KL
//! terms and the single-sample ELBO.
//!
//! The prior covariance `K_p = gram + σ²I` is factorized off the tape every
//! step and enters the graph as a constant; gradients reach the encoder only
//! through the prior mean and through the posterior networks.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::gp::GpJoint;
use crate::rng::SeededRng;
use crate::seq2seq::{Batch, ModelVars, Seq2SeqModel, Variant};
use crate::tensor::{BlockSolve, Tape, Tensor, Var};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Weight of the KL term in the ELBO; never annealed.
pub const KL_WEIGHT: f64 = 1.0;

/// Two single-hidden-layer feed-forward nets: `f_μ` and `log f_σ²`.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorNet {
    pub mu_w1: Tensor,
    pub mu_b1: Tensor,
    pub mu_w2: Tensor,
    pub mu_b2: Tensor,
    pub lv_w1: Tensor,
    pub lv_b1: Tensor,
    pub lv_w2: Tensor,
    pub lv_b2: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct PosteriorVars {
    pub mu_w1: Var,
    pub mu_b1: Var,
    pub mu_w2: Var,
    pub mu_b2: Var,
    pub lv_w1: Var,
    pub lv_b1: Var,
    pub lv_w2: Var,
    pub lv_b2: Var,
}

impl PosteriorNet {
    pub const NAMES: [&'static str; 8] = [
        "posterior.mu_w1",
        "posterior.mu_b1",
        "posterior.mu_w2",
        "posterior.mu_b2",
        "posterior.lv_w1",
        "posterior.lv_b1",
        "posterior.lv_w2",
        "posterior.lv_b2",
    ];

    /// Hidden width equals the input width.
    pub fn init(hidden: usize, latent: usize, init: &mut dyn FnMut(Vec<usize>) -> Tensor, zeros: &dyn Fn(Vec<usize>) -> Tensor) -> Self {
        Self {
            mu_w1: init(vec![hidden, hidden]),
            mu_b1: zeros(vec![hidden]),
            mu_w2: init(vec![hidden, latent]),
            mu_b2: zeros(vec![latent]),
            lv_w1: init(vec![hidden, hidden]),
            lv_b1: zeros(vec![hidden]),
            lv_w2: init(vec![hidden, latent]),
            lv_b2: zeros(vec![latent]),
        }
    }

    pub fn zeroed(hidden: usize, latent: usize) -> Self {
        let z = |s: Vec<usize>| Tensor::param(s.clone(), vec![0.0; s.iter().product()]).expect("shape");
        let mut zm = z;
        Self::init(hidden, latent, &mut zm, &z)
    }

    pub fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.mu_w1, &self.mu_b1, &self.mu_w2, &self.mu_b2, &self.lv_w1, &self.lv_b1, &self.lv_w2, &self.lv_b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 8] {
        [
            &mut self.mu_w1,
            &mut self.mu_b1,
            &mut self.mu_w2,
            &mut self.mu_b2,
            &mut self.lv_w1,
            &mut self.lv_b1,
            &mut self.lv_w2,
            &mut self.lv_b2,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> PosteriorVars {
        let mut b = |t: &Tensor| if trainable { tape.leaf(t) } else { tape.frozen(t) };
        PosteriorVars {
            mu_w1: b(&self.mu_w1),
            mu_b1: b(&self.mu_b1),
            mu_w2: b(&self.mu_w2),
            mu_b2: b(&self.mu_b2),
            lv_w1: b(&self.lv_w1),
            lv_b1: b(&self.lv_b1),
            lv_w2: b(&self.lv_w2),
            lv_b2: b(&self.lv_b2),
        }
    }
}

impl PosteriorVars {
    pub fn in_order(&self) -> [Var; 8] {
        [
            self.mu_w1, self.mu_b1, self.mu_w2, self.mu_b2, self.lv_w1, self.lv_b1, self.lv_w2, self.lv_b2,
        ]
    }
}

/// Posterior parameters as tape values.
#[derive(Clone, Copy, Debug)]
pub struct PosteriorOnTape {
    pub mu: Var,
    /// Clamped log-variance.
    pub logvar: Var,
    /// `exp(logvar)`
    pub s: Var,
}

/// Per-position diagonal Gaussian `N(mu_i, diag(s_i))`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mu: DMatrix<f64>,
    pub s: DMatrix<f64>,
}

fn to_dmatrix(tape: &Tape, v: Var) -> DMatrix<f64> {
    let shape = tape.shape(v);
    let (r, c) = match shape.len() {
        2 => (shape[0], shape[1]),
        1 => (1, shape[0]),
        _ => (1, 1),
    };
    DMatrix::from_row_slice(r, c, tape.value(v))
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

impl LatentPosterior {
    pub fn new(mu: DMatrix<f64>, s: DMatrix<f64>) -> Result<Self> {
        if mu.shape() != s.shape() {
            return Err(Error::dim(format!("mu is {:?}, s is {:?}", mu.shape(), s.shape())));
        }
        if s.iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::InvalidOperand {
                op: "posterior",
                msg: "variances must be strictly positive".into(),
            });
        }
        Ok(Self { mu, s })
    }

    pub fn from_tape(tape: &Tape, p: &PosteriorOnTape) -> Self {
        Self {
            mu: to_dmatrix(tape, p.mu),
            s: to_dmatrix(tape, p.s),
        }
    }

    pub fn n(&self) -> usize {
        self.mu.nrows()
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }

    /// `z = mu + sqrt(tau · s) ∘ u`, drawn row by row.
    pub fn sample(&self, tau: f64, rng: &mut SeededRng) -> Result<DMatrix<f64>> {
        check_tau(tau)?;
        let mut z = self.mu.clone();
        for i in 0..self.n() {
            for d in 0..self.dim() {
                let u = rng.normal();
                z[(i, d)] += (tau * self.s[(i, d)]).sqrt() * u;
            }
        }
        Ok(z)
    }

    /// Puts `mu`, `log s` and `s` on a tape as constants.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> PosteriorOnTape {
        let (n, d) = self.mu.shape();
        let mk = |m: &DMatrix<f64>| {
            let t = Tensor::new(vec![n, d], row_major(m)).expect("shape");
            if trainable {
                Tensor::param(vec![n, d], t.into_data()).expect("shape")
            } else {
                t
            }
        };
        let mu = tape.leaf(&mk(&self.mu));
        let logvar = tape.leaf(&mk(&self.s.map(f64::ln)));
        let s = tape.exp(logvar).expect("elementwise");
        PosteriorOnTape { mu, logvar, s }
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidOperand {
            op: "reparam_sample",
            msg: format!("covariance scale must be non-negative, got {tau}"),
        });
    }
    Ok(())
}

fn mlp(tape: &mut Tape, x: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Result<Var> {
    let a = tape.matmul(x, w1)?;
    let a = tape.add(a, b1)?;
    let a = tape.tanh(a)?;
    let o = tape.matmul(a, w2)?;
    tape.add(o, b2)
}

/// Runs both posterior nets on `hidden` (`n×H`), giving `n×D` means and variances.
pub fn infer_posterior(tape: &mut Tape, net: &PosteriorVars, hidden: Var) -> Result<PosteriorOnTape> {
    let mu = mlp(tape, hidden, net.mu_w1, net.mu_b1, net.mu_w2, net.mu_b2)?;
    let raw = mlp(tape, hidden, net.lv_w1, net.lv_b1, net.lv_w2, net.lv_b2)?;
    let logvar = tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX)?;
    let s = tape.exp(logvar)?;
    Ok(PosteriorOnTape { mu, logvar, s })
}

/// `z = mu + sqrt(tau) · exp(logvar / 2) ∘ u`; differentiable in `mu` and `logvar`.
pub fn reparam_sample(tape: &mut Tape, post: &PosteriorOnTape, tau: f64, rng: &mut SeededRng) -> Result<Var> {
    check_tau(tau)?;
    if tau == 0.0 {
        return Ok(post.mu);
    }
    let shape = tape.shape(post.mu).to_vec();
    let n: usize = shape.iter().product();
    let u: Vec<f64> = rng.normals(n).into_iter().map(|x| x * tau.sqrt()).collect();
    let u = tape.constant(shape, u)?;
    let half = tape.scale(post.logvar, 0.5)?;
    let sd = tape.exp(half)?;
    let noise = tape.mul(sd, u)?;
    tape.add(post.mu, noise)
}

/// Position layout of a flattened batch: sequence `b` occupies rows
/// `b·stride .. b·stride + lens[b]`.
#[derive(Clone, Debug)]
pub struct RowLayout {
    pub lens: Vec<usize>,
    pub stride: usize,
}

impl RowLayout {
    pub fn single(n: usize) -> Self {
        Self { lens: vec![n], stride: n }
    }

    pub fn rows(&self) -> usize {
        self.lens.len() * self.stride
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    /// 1 for real positions, 0 for padding, as a `rows×1` column.
    pub fn mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.rows()];
        for (b, &n) in self.lens.iter().enumerate() {
            m[b * self.stride..b * self.stride + n].iter_mut().for_each(|x| *x = 1.0);
        }
        m
    }
}

/// `½ Σ (μ² + s − log s − 1)` over real rows, divided by the batch size.
pub fn kl_standard_normal_on_tape(tape: &mut Tape, post: &PosteriorOnTape, layout: &RowLayout) -> Result<Var> {
    let rows = layout.rows();
    let mask = tape.constant(vec![rows, 1], layout.mask())?;
    let mu2 = tape.square(post.mu)?;
    let a = tape.add(mu2, post.s)?;
    let a = tape.sub(a, post.logvar)?;
    let a = tape.add_scalar(a, -1.0)?;
    let a = tape.mul(a, mask)?;
    let total = tape.sum(a)?;
    tape.scale(total, 0.5 / layout.batch() as f64)
}

/// Closed-form `KL[q ‖ N(m, K_p)]` per latent dimension, summed, divided by
/// the batch size. `joints[b]` is the prior of sequence `b`.
pub fn kl_gp_on_tape(
    tape: &mut Tape,
    post: &PosteriorOnTape,
    prior_mean: Var,
    joints: &[GpJoint],
    layout: &RowLayout,
) -> Result<Var> {
    let rows = layout.rows();
    if joints.len() != layout.batch() {
        return Err(Error::dim(format!("{} joints for a batch of {}", joints.len(), layout.batch())));
    }
    let shape = tape.shape(post.mu).to_vec();
    if shape.len() != 2 || shape[0] != rows || tape.shape(prior_mean) != shape.as_slice() {
        return Err(Error::dim(format!(
            "posterior {:?} and prior mean {:?} must both be {rows}xD",
            shape,
            tape.shape(prior_mean)
        )));
    }
    let d = shape[1];
    let mut kinv_diag = vec![0.0; rows];
    let mut constant = 0.0;
    let mut blocks = Vec::with_capacity(joints.len());
    for (b, (joint, &n)) in joints.iter().zip(&layout.lens).enumerate() {
        if joint.n() != n || joint.latent_dim() != d {
            return Err(Error::dim(format!(
                "joint {b} is {}x{}, posterior block is {n}x{d}",
                joint.n(),
                joint.latent_dim()
            )));
        }
        let start = b * layout.stride;
        let f = joint.chol();
        kinv_diag[start..start + n].copy_from_slice(&f.inverse_diagonal());
        constant += d as f64 * (f.logdet() - n as f64);
        blocks.push((start, Arc::new(f.clone())));
    }
    let mask = tape.constant(vec![rows, 1], layout.mask())?;
    let kinv = tape.constant(vec![rows, 1], kinv_diag)?;

    let delta = tape.sub(prior_mean, post.mu)?;
    let delta = tape.mul(delta, mask)?;
    let solved = tape.spd_solve(delta, Arc::new(BlockSolve { rows, blocks }))?;
    let quad = tape.mul(delta, solved)?;
    let quad = tape.sum(quad)?;

    let tr = tape.mul(post.s, kinv)?;
    let tr = tape.sum(tr)?;

    let logs = tape.mul(post.logvar, mask)?;
    let logs = tape.sum(logs)?;

    let a = tape.add(quad, tr)?;
    let a = tape.sub(a, logs)?;
    let a = tape.add_scalar(a, constant)?;
    tape.scale(a, 0.5 / layout.batch() as f64)
}

/// `KL[q ‖ p]` for a single sequence against its GP joint prior.
pub fn kl_diag_vs_gp(post: &LatentPosterior, joint: &GpJoint) -> Result<f64> {
    let mut tape = Tape::new();
    let p = post.to_tape(&mut tape, false);
    let mean = Tensor::new(vec![joint.n(), joint.latent_dim()], row_major(joint.mean()))?;
    let m = tape.leaf(&mean);
    let kl = kl_gp_on_tape(&mut tape, &p, m, std::slice::from_ref(joint), &RowLayout::single(post.n()))?;
    Ok(tape.item(kl))
}

/// `KL[q ‖ N(0, I)]` for a single sequence.
pub fn kl_diag_vs_standard_normal(post: &LatentPosterior) -> Result<f64> {
    let mut tape = Tape::new();
    let p = post.to_tape(&mut tape, false);
    let kl = kl_standard_normal_on_tape(&mut tape, &p, &RowLayout::single(post.n()))?;
    Ok(tape.item(kl))
}

/// Scalar terms of one ELBO evaluation.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    /// `recon_nll + KL_WEIGHT · kl`
    pub loss: Var,
    pub recon_nll: f64,
    pub kl: f64,
}

/// Single-sample ELBO loss for `batch` on `tape`.
///
/// Reconstruction is the mean per-token NLL under teacher forcing; the KL is
/// summed over positions and dimensions and divided by the batch size. The
/// deterministic variant uses `z = h` and a KL of exactly zero.
pub fn elbo_loss(tape: &mut Tape, model: &Seq2SeqModel, vars: &ModelVars, batch: &Batch, rng: &mut SeededRng) -> Result<ElboTerms> {
    if batch.is_empty() {
        return Err(Error::InvalidOperand {
            op: "elbo_loss",
            msg: "empty batch".into(),
        });
    }
    let enc = model.encode_batch(tape, vars, batch)?;
    let layout = RowLayout {
        lens: batch.src_lens.clone(),
        stride: enc.max_len,
    };
    let (z, kl) = match model.variant() {
        Variant::Deterministic => (enc.hidden, None),
        Variant::Normal | Variant::Gp => {
            let pv = vars.posterior.as_ref().expect("stochastic variants carry a posterior net");
            let post = infer_posterior(tape, pv, enc.hidden)?;
            let z = reparam_sample(tape, &post, 1.0, rng)?;
            let kl = if model.variant() == Variant::Normal {
                kl_standard_normal_on_tape(tape, &post, &layout)?
            } else {
                let (prior_mean, joints) = model.gp_prior(tape, vars, &enc)?;
                kl_gp_on_tape(tape, &post, prior_mean, &joints, &layout)?
            };
            (z, Some(kl))
        }
    };
    let recon = model.teacher_forced_nll(tape, vars, &enc, z, batch)?;
    let (loss, kl_value) = match kl {
        None => (recon, 0.0),
        Some(kl) => {
            let weighted = tape.scale(kl, KL_WEIGHT)?;
            (tape.add(recon, weighted)?, tape.item(kl))
        }
    };
    Ok(ElboTerms {
        loss,
        recon_nll: tape.item(recon),
        kl: kl_value,
    })
}
