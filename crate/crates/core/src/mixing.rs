//! Ground-truth mixing functions `x = f(z)`.

use std::f64::consts::FRAC_PI_4;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, Matrix, Mlp, Mode};

pub const MIXING_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MixingFn {
    /// `x = A z`, `A` is `d×n`.
    Linear { a: Matrix },
    PiecewiseMlp { net: Mlp },
    /// The 2→2 map `sinh(R(π/4) z) + sinh(R(−π/4) z)`.
    SinhExample,
}

impl MixingFn {
    pub fn n(&self) -> usize {
        match self {
            MixingFn::Linear { a } => a.cols(),
            MixingFn::PiecewiseMlp { net } => net.in_dim(),
            MixingFn::SinhExample => 2,
        }
    }

    pub fn d(&self) -> usize {
        match self {
            MixingFn::Linear { a } => a.rows(),
            MixingFn::PiecewiseMlp { net } => net.out_dim(),
            MixingFn::SinhExample => 2,
        }
    }

    /// Applies `f` to every row of `z`.
    pub fn apply(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.n() {
            return Err(Error::Shape(format!("mixing expects {} columns, got {}", self.n(), z.cols())));
        }
        match self {
            MixingFn::Linear { a } => z.matmul_t(a),
            MixingFn::PiecewiseMlp { net } => net.predict(z, Mode::Eval),
            MixingFn::SinhExample => {
                let mut out = z.clone();
                for r in 0..z.rows() {
                    let y = sinh_example([z[(r, 0)], z[(r, 1)]]);
                    out.row_mut(r).copy_from_slice(&y);
                }
                Ok(out)
            }
        }
    }

    /// Every weight matrix of the map (empty for the sinh example).
    pub fn weights(&self) -> Vec<&Matrix> {
        match self {
            MixingFn::Linear { a } => vec![a],
            MixingFn::PiecewiseMlp { net } => net.layers().iter().map(|l| &l.weight).collect(),
            MixingFn::SinhExample => Vec::new(),
        }
    }
}

fn orthonormal_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    // Full column rank holds with probability one; redraw on the measure-zero failure.
    for _ in 0..8 {
        if let Ok(q) = Matrix::randn(rows, cols, rng).orthonormal_columns() {
            return Ok(q);
        }
    }
    Err(Error::Numerical(format!("could not draw a full-rank {rows}x{cols} Gaussian matrix")))
}

pub fn gen_linear_mixing<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Result<MixingFn> {
    if n == 0 || d < n {
        return Err(Error::Config(format!("linear mixing needs 1 <= n <= d, got n={n}, d={d}")));
    }
    Ok(MixingFn::Linear { a: orthonormal_gaussian(d, n, rng)? })
}

/// `m` bias-free layers of width `max(n, d)` (the last one outputs `d`), each weight with
/// orthonormal columns, LeakyReLU(0.2) after all but the last.
pub fn gen_piecewise_mixing<R: Rng + ?Sized>(n: usize, d: usize, m: usize, rng: &mut R) -> Result<MixingFn> {
    if n == 0 || d < n || m == 0 {
        return Err(Error::Config(format!("piecewise mixing needs 1 <= n <= d and m >= 1, got n={n}, d={d}, m={m}")));
    }
    let width = n.max(d);
    let mut layers = Vec::with_capacity(m);
    let mut input = n;
    for l in 0..m {
        let last = l + 1 == m;
        let out = if last { d } else { width };
        layers.push(Layer {
            weight: orthonormal_gaussian(out, input, rng)?,
            bias: vec![0.0; out],
            activation: if last { Activation::Identity } else { Activation::LeakyRelu(MIXING_SLOPE) },
            batch_norm: None,
        });
        input = out;
    }
    Ok(MixingFn::PiecewiseMlp { net: Mlp::new(layers)? })
}

fn rotations() -> (f64, f64) {
    (FRAC_PI_4.cos(), FRAC_PI_4.sin())
}

pub fn sinh_example(z: [f64; 2]) -> [f64; 2] {
    let (c, s) = rotations();
    let [z1, z2] = z;
    [
        (c * z1 - s * z2).sinh() + (c * z1 + s * z2).sinh(),
        (s * z1 + c * z2).sinh() + (-s * z1 + c * z2).sinh(),
    ]
}

/// Jacobian of [`sinh_example`], row-major.
pub fn sinh_example_jacobian(z: [f64; 2]) -> [[f64; 2]; 2] {
    let (c, s) = rotations();
    let [z1, z2] = z;
    let a = (c * z1 - s * z2).cosh();
    let b = (c * z1 + s * z2).cosh();
    let p = (s * z1 + c * z2).cosh();
    let q = (-s * z1 + c * z2).cosh();
    [[c * a + c * b, -s * a + s * b], [s * p - s * q, c * p + c * q]]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianPoint {
    pub z: [f64; 2],
    pub jacobian: [[f64; 2]; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterexampleReport {
    pub samples: usize,
    pub mean_l0_z: f64,
    pub mean_l0_fz: f64,
    /// `mean_l0_fz − mean_l0_z`.
    pub sparsity_gap: f64,
    pub jacobian_points: Vec<JacobianPoint>,
    pub min_abs_jacobian_entry: f64,
    pub mcc: f64,
}

fn l0(v: &[f64]) -> usize {
    v.iter().filter(|&&x| x != 0.0).count()
}

/// Monte Carlo summary of the sinh example with standard-normal causal variables, masks
/// drawn uniformly from `{0,1}²`, and mask value 0.
pub fn counterexample_report<R: Rng + ?Sized>(samples: usize, rng: &mut R) -> Result<CounterexampleReport> {
    if samples < 3 {
        return Err(Error::Config("the counterexample needs at least 3 samples".into()));
    }
    let mut z = Matrix::randn(samples, 2, rng);
    for r in 0..samples {
        for v in z.row_mut(r) {
            if rng.random::<bool>() {
                *v = 0.0;
            }
        }
    }
    let fz = MixingFn::SinhExample.apply(&z)?;
    let total = |m: &Matrix| (0..samples).map(|r| l0(m.row(r))).sum::<usize>() as f64 / samples as f64;
    let (mean_l0_z, mean_l0_fz) = (total(&z), total(&fz));

    let mut jacobian_points = Vec::with_capacity(10);
    while jacobian_points.len() < 10 {
        let p = Matrix::randn(1, 2, rng);
        let z = [p[(0, 0)], p[(0, 1)]];
        if z != [0.0, 0.0] {
            jacobian_points.push(JacobianPoint { z, jacobian: sinh_example_jacobian(z) });
        }
    }
    let min_abs_jacobian_entry = jacobian_points
        .iter()
        .flat_map(|p| p.jacobian.iter().flatten().map(|v| v.abs()))
        .fold(f64::INFINITY, f64::min);
    let (mcc, _) = crate::eval::mcc(&crate::eval::pearson_corr(&z, &fz)?)?;
    Ok(CounterexampleReport {
        samples,
        mean_l0_z,
        mean_l0_fz,
        sparsity_gap: mean_l0_fz - mean_l0_z,
        jacobian_points,
        min_abs_jacobian_entry,
        mcc,
    })
}
