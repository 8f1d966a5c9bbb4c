//! Correlation-based disentanglement scores, sparsity statistics, and moment diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::MaskedDataset;
use crate::nn::Matrix;
use crate::train::EncoderDecoder;

pub const DEFAULT_ZERO_TOL: f64 = 1e-3;

/// Pearson correlations `corr[i][j] = Corr(z_i, ẑ_j)`. Zero-variance columns correlate 0.
pub fn pearson_corr(z: &Matrix, z_hat: &Matrix) -> Result<Matrix> {
    if z.rows() != z_hat.rows() {
        return Err(Error::Shape(format!("{} vs {} samples", z.rows(), z_hat.rows())));
    }
    if z.rows() < 3 {
        return Err(Error::Precondition("correlation needs at least 3 samples".into()));
    }
    let centered = |m: &Matrix| {
        let mu = m.column_means();
        let mut c = m.clone();
        c.add_row_vector(&mu.iter().map(|v| -v).collect::<Vec<_>>());
        let norms: Vec<f64> = (0..c.cols()).map(|j| c.column(j).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
        (c, norms)
    };
    let (a, na) = centered(z);
    let (b, nb) = centered(z_hat);
    let mut corr = a.t_matmul(&b)?;
    for i in 0..corr.rows() {
        for j in 0..corr.cols() {
            let d = na[i] * nb[j];
            corr[(i, j)] = if d > 0.0 { (corr[(i, j)] / d).clamp(-1.0, 1.0) } else { 0.0 };
        }
    }
    Ok(corr)
}

/// Minimum-cost assignment of every row to a distinct column (rows <= cols), by shortest
/// augmenting paths with potentials. Returns the column of each row.
pub fn linear_assignment(cost: &Matrix) -> Result<Vec<usize>> {
    let (n, m) = cost.shape();
    if n > m {
        return Err(Error::Precondition(format!("assignment needs rows <= cols, got {n}x{m}")));
    }
    if !cost.is_finite() {
        return Err(Error::Numerical("assignment cost has non-finite entries".into()));
    }
    // 1-based arrays; column 0 is a virtual start.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            assignment[owner[j] - 1] = j - 1;
        }
    }
    Ok(assignment)
}

/// Mean of `|corr[i][π(i)]|` under the injective `π` maximizing it.
pub fn mcc(corr: &Matrix) -> Result<(f64, Vec<usize>)> {
    let perm = linear_assignment(&corr.map(|c| -c.abs()))?;
    Ok((assignment_score(corr, &perm), perm))
}

pub fn assignment_score(corr: &Matrix, perm: &[usize]) -> f64 {
    perm.iter().enumerate().map(|(i, &j)| corr[(i, j)].abs()).sum::<f64>() / perm.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityStats {
    /// Mean count of non-zero ground-truth entries per sample.
    pub mean_l0_z: f64,
    /// Mean absolute learned entry (normalized by dimension and samples).
    pub mean_l1_zhat: f64,
    /// Mean count of learned entries above the tolerance per sample.
    pub mean_l0_zhat: f64,
}

pub fn sparsity_stats(z: &Matrix, z_hat: &Matrix, zero_tol: f64) -> Result<SparsityStats> {
    if !(zero_tol > 0.0) {
        return Err(Error::Config(format!("zero_tol must be positive, got {zero_tol}")));
    }
    let rows = z.rows().max(1) as f64;
    let zhat_rows = z_hat.rows().max(1) as f64;
    Ok(SparsityStats {
        mean_l0_z: z.data().iter().filter(|&&v| v != 0.0).count() as f64 / rows,
        mean_l1_zhat: z_hat.data().iter().map(|v| v.abs()).sum::<f64>() / (zhat_rows * z_hat.cols().max(1) as f64),
        mean_l0_zhat: z_hat.data().iter().filter(|v| v.abs() > zero_tol).count() as f64 / zhat_rows,
    })
}

/// Biased central moments `(m2, m3, m4)` around `center`.
pub fn central_moments(values: &[f64], center: f64) -> (f64, f64, f64) {
    let b = values.len() as f64;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for &v in values {
        let c = v - center;
        let c2 = c * c;
        m2 += c2;
        m3 += c2 * c;
        m4 += c2 * c2;
    }
    (m2 / b, m3 / b, m4 / b)
}

/// Sample skewness and kurtosis from biased moments; `None` for a constant sample.
pub fn skew_kurt(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let (m2, m3, m4) = central_moments(values, mean);
    (m2 > 0.0).then(|| (m3 / m2.powf(1.5), m4 / (m2 * m2)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub group: usize,
    pub dim: usize,
    pub count: usize,
    /// `None` when the column is constant within the group.
    pub skew: Option<f64>,
    pub kurt: Option<f64>,
}

pub fn moment_diagnostics(z_hat: &Matrix, groups: &[usize]) -> Result<Vec<MomentRow>> {
    if groups.len() != z_hat.rows() {
        return Err(Error::Shape("one group label per row required".into()));
    }
    let k = groups.iter().max().map_or(0, |g| g + 1);
    let mut members = vec![Vec::new(); k];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    let mut rows = Vec::new();
    for (g, idx) in members.iter().enumerate().filter(|(_, idx)| !idx.is_empty()) {
        for dim in 0..z_hat.cols() {
            let vals: Vec<f64> = idx.iter().map(|&i| z_hat[(i, dim)]).collect();
            let sk = skew_kurt(&vals);
            rows.push(MomentRow { group: g, dim, count: idx.len(), skew: sk.map(|m| m.0), kurt: sk.map(|m| m.1) });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Equal-width bins over the sample range; the last bin is closed.
pub fn histogram(values: &[f64], bins: usize) -> Vec<HistogramBin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(b, count)| HistogramBin { lo: lo + b as f64 * width, hi: lo + (b + 1) as f64 * width, count })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corr: Matrix,
    pub permutation: Vec<usize>,
    pub mcc: f64,
    pub sparsity: SparsityStats,
    /// Standard deviation of every learned dimension over the evaluation set.
    pub zhat_std: Vec<f64>,
    pub per_group_moments: Vec<MomentRow>,
}

impl EvalReport {
    /// Learned dimensions whose standard deviation exceeds `threshold`.
    pub fn active_dims(&self, threshold: f64) -> usize {
        self.zhat_std.iter().filter(|&&s| s > threshold).count()
    }
}

pub fn evaluate_latents(z: &Matrix, z_hat: &Matrix, groups: &[usize]) -> Result<EvalReport> {
    let corr = pearson_corr(z, z_hat)?;
    let (mcc, permutation) = mcc(&corr)?;
    Ok(EvalReport {
        corr,
        permutation,
        mcc,
        sparsity: sparsity_stats(z, z_hat, DEFAULT_ZERO_TOL)?,
        zhat_std: z_hat.column_variances().iter().map(|v| v.sqrt()).collect(),
        per_group_moments: moment_diagnostics(z_hat, groups)?,
    })
}

/// Encodes the dataset with inference-mode batch norm and scores it against `Z`.
pub fn evaluate(model: &EncoderDecoder, dataset: &MaskedDataset) -> Result<EvalReport> {
    let z_hat = model.encode(&dataset.x)?;
    evaluate_latents(&dataset.z, &z_hat, &dataset.group)
}
