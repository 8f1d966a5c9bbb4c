//! Extra-gradient Adam for the primal variables and projected extra-gradient ascent for the
//! multiplier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamMoments {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    /// Folds `grad` into the moments and returns the bias-corrected Adam direction.
    fn direction(&mut self, grad: &[f64]) -> Vec<f64> {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        self.m
            .iter_mut()
            .zip(self.v.iter_mut())
            .zip(grad)
            .map(|((m, v), &g)| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS)
            })
            .collect()
    }
}

/// Adam with an extrapolation (lookahead) phase. Each phase keeps its own moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtraAdam {
    pub lr: f64,
    pub extrapolation: AdamMoments,
    pub update: AdamMoments,
}

fn check_finite(grad: &[f64], phase: &str) -> Result<()> {
    match grad.iter().position(|g| !g.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numerical(format!("non-finite gradient at parameter {i} during {phase}"))),
    }
}

impl ExtraAdam {
    pub fn new(len: usize, lr: f64) -> Self {
        Self { lr, extrapolation: AdamMoments::new(len), update: AdamMoments::new(len) }
    }

    /// The lookahead point `θ − lr·adam(∇f(θ))`.
    pub fn extrapolate(&mut self, params: &[f64], grad: &[f64]) -> Result<Vec<f64>> {
        check_finite(grad, "extrapolation")?;
        let dir = self.extrapolation.direction(grad);
        Ok(params.iter().zip(dir).map(|(p, d)| p - self.lr * d).collect())
    }

    /// Moves the original parameters using the gradient taken at the lookahead point.
    pub fn apply(&mut self, params: &mut [f64], lookahead_grad: &[f64]) -> Result<()> {
        check_finite(lookahead_grad, "update")?;
        let dir = self.update.direction(lookahead_grad);
        for (p, d) in params.iter_mut().zip(dir) {
            *p -= self.lr * d;
        }
        Ok(())
    }

    /// One full step for a function whose gradient is `grad_fn`.
    pub fn step(&mut self, params: &mut [f64], mut grad_fn: impl FnMut(&[f64]) -> Result<Vec<f64>>) -> Result<()> {
        let g = grad_fn(params)?;
        let look = self.extrapolate(params, &g)?;
        let g2 = grad_fn(&look)?;
        self.apply(params, &g2)
    }
}

/// `λ ← max(0, λ + lr·violation)`.
pub fn dual_ascent(lambda: f64, lr: f64, violation: f64) -> f64 {
    (lambda + lr * violation).max(0.0)
}
