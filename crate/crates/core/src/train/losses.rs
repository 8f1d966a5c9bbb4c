//! Objective terms and their gradients with respect to the network outputs.

use crate::error::{Error, Result};
use crate::nn::Matrix;

/// Standard deviation substituted for masked coordinates in the oracle penalty.
pub const ORACLE_MASKED_SD: f64 = 4.539_992_976_248_485e-5; // exp(-10)

/// `mean_rows ||x − x̂||²` and its gradient w.r.t. `x̂`.
pub fn reconstruction_loss(x: &Matrix, x_hat: &Matrix) -> Result<(f64, Matrix)> {
    let diff = x_hat.sub(x)?;
    let b = x.rows() as f64;
    let loss = diff.data().iter().map(|v| v * v).sum::<f64>() / b;
    Ok((loss, diff.scale(2.0 / b)))
}

/// `Σ|ẑ| / (nn·B) − ε` and its gradient w.r.t. `ẑ` (sign, with 0 at 0).
pub fn sparsity_constraint(z_hat: &Matrix, epsilon: f64) -> (f64, Matrix) {
    let scale = 1.0 / (z_hat.rows() * z_hat.cols()) as f64;
    let l1 = z_hat.data().iter().map(|v| v.abs()).sum::<f64>() * scale;
    let grad = z_hat.map(|v| if v > 0.0 { scale } else if v < 0.0 { -scale } else { 0.0 });
    (l1 - epsilon, grad)
}

/// How the location and spread of a group column are obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MomentMode<'a> {
    /// Sample mean and biased sample variance.
    Estimated,
    /// Fixed centre; spread 1 for measured coordinates and `exp(−10)` for masked ones,
    /// read from the group's mask row.
    Oracle { center: f64, masks: &'a [Vec<bool>] },
}

#[derive(Debug, Clone)]
pub struct MomentPenalty {
    pub value: f64,
    pub grad: Matrix,
    /// `(group, dim)` terms dropped for zero variance.
    pub skipped: usize,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `Σ_{g, j} |skew| + |kurt − 3|` over the rows of each group, with gradient w.r.t. `ẑ`.
/// `groups[g]` lists the batch rows of group `g` (an empty list contributes nothing).
pub fn group_moment_penalty(z_hat: &Matrix, groups: &[Vec<usize>], mode: MomentMode<'_>) -> Result<MomentPenalty> {
    let nn = z_hat.cols();
    if let MomentMode::Oracle { masks, .. } = mode {
        if masks.len() < groups.len() || masks.iter().any(|m| m.len() != nn) {
            return Err(Error::Shape(format!(
                "oracle penalty needs one length-{nn} mask per group ({} groups, {} masks)",
                groups.len(),
                masks.len()
            )));
        }
    }
    let mut grad = Matrix::zeros(z_hat.rows(), nn);
    let mut value = 0.0;
    let mut skipped = 0;
    let mut vals = Vec::new();
    for (g, rows) in groups.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let b = rows.len() as f64;
        for j in 0..nn {
            vals.clear();
            vals.extend(rows.iter().map(|&r| z_hat[(r, j)]));
            let center = match mode {
                MomentMode::Estimated => vals.iter().sum::<f64>() / b,
                MomentMode::Oracle { center, .. } => center,
            };
            let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
            for &v in &vals {
                let c = v - center;
                m2 += c * c;
                m3 += c * c * c;
                m4 += c * c * c * c;
            }
            m2 /= b;
            m3 /= b;
            m4 /= b;
            match mode {
                MomentMode::Estimated => {
                    if !(m2 > 0.0) {
                        skipped += 1;
                        continue;
                    }
                    let skew = m3 / m2.powf(1.5);
                    let kurt = m4 / (m2 * m2);
                    value += skew.abs() + (kurt - 3.0).abs();
                    let (ss, sk) = (sign(skew), sign(kurt - 3.0));
                    // d/dm2, d/dm3, d/dm4 of the penalty.
                    let d2 = ss * (-1.5 * m3 * m2.powf(-2.5)) + sk * (-2.0 * m4 / (m2 * m2 * m2));
                    let d3 = ss * m2.powf(-1.5);
                    let d4 = sk / (m2 * m2);
                    for (&r, &v) in rows.iter().zip(&vals) {
                        let c = v - center;
                        // dm_k/dv = (k/B)(c^{k−1} − m_{k−1}); m1 = 0.
                        let dm2 = 2.0 * c / b;
                        let dm3 = 3.0 * (c * c - m2) / b;
                        let dm4 = 4.0 * (c * c * c - m3) / b;
                        grad[(r, j)] += d2 * dm2 + d3 * dm3 + d4 * dm4;
                    }
                }
                MomentMode::Oracle { masks, .. } => {
                    let sd = if masks[g][j] { 1.0 } else { ORACLE_MASKED_SD };
                    let (s3, s4) = (sd * sd * sd, sd * sd * sd * sd);
                    let skew = m3 / s3;
                    let kurt = m4 / s4;
                    value += skew.abs() + (kurt - 3.0).abs();
                    let d3 = sign(skew) / s3;
                    let d4 = sign(kurt - 3.0) / s4;
                    for (&r, &v) in rows.iter().zip(&vals) {
                        let c = v - center;
                        grad[(r, j)] += d3 * 3.0 * c * c / b + d4 * 4.0 * c * c * c / b;
                    }
                }
            }
        }
    }
    Ok(MomentPenalty { value, grad, skipped })
}
