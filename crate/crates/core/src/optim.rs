use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for a fixed list of parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let sizes: Vec<usize> = params.into_iter().map(Tensor::numel).collect();
        Self {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update in place; gradients are zeroed afterwards.
    ///
    /// Every parameter must carry a gradient. Nothing is modified on error.
    pub fn step(&mut self, params: &mut [(&str, &mut Tensor)], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::dim(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, (name, p)) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(name.to_string()));
            }
            if p.numel() != self.m[i].len() {
                return Err(Error::dim(format!("parameter `{name}` changed size")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let g = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in p.data_mut().iter_mut().enumerate() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g[k];
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + EPSILON);
            }
            p.zero_grad();
        }
        Ok(())
    }
}
