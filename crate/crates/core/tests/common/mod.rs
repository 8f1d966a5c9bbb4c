//! Independent oracles and single-case checks shared by the property suites and the acceptance
//! runner. Each check returns a description of the first disagreement it finds.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparsecrl::discovery::{cpdag_of_dag, pc_algorithm, shd, Cpdag};
use sparsecrl::eval::{linear_assignment, mcc, pearson_corr};
use sparsecrl::masking::{
    apply_masks, build_dataset, gen_masks_fixed_ratio, mask_value, variability_violations, Assignment, MaskSet, MaskValue,
    MaskedDataset, RatioMode,
};
use sparsecrl::mixing::gen_linear_mixing;
use sparsecrl::nn::{Activation, Matrix, Mode};
use sparsecrl::scm::{latent_moments, sample_er_dag, sample_linear_scm, Dag, LatentMoments, NoiseKind};
use sparsecrl::train::{build_networks, lagrangian, EncoderDecoder, EncoderNorm, Regime, TrainConfig, NET_SLOPE};

pub type Check = Result<(), String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Minimum total cost over every injective row → column map, by enumeration.
pub fn brute_force_assignment(cost: &Matrix) -> f64 {
    fn go(cost: &Matrix, row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.rows() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..cost.cols() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[(row, c)] + go(cost, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(cost, 0, &mut vec![false; cost.cols()])
}

pub fn hungarian_case(rows: usize, cols: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let cost = Matrix::from_fn(rows, cols, |_, _| r.random_range(-10.0..10.0));
    let perm = linear_assignment(&cost).map_err(|e| e.to_string())?;
    let distinct: BTreeSet<usize> = perm.iter().copied().collect();
    if distinct.len() != rows {
        return Err(format!("not injective: {perm:?}"));
    }
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
    let best = brute_force_assignment(&cost);
    if (total - best).abs() > 1e-9 {
        return Err(format!("{rows}x{cols} seed {seed}: cost {total} vs optimum {best}"));
    }
    Ok(())
}

/// `ẑ_j = d_j · z_{π(j)}` must score exactly 1 and recover `π`.
pub fn scaled_permutation_case(n: usize, seed: u64) -> Check {
    let mut r = rng(seed);
    let z = Matrix::randn(300, n, &mut r);
    let mut perm: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        perm.swap(i, r.random_range(0..=i));
    }
    let scales: Vec<f64> =
        (0..n).map(|_| r.random_range(0.1..10.0) * if r.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let z_hat = Matrix::from_fn(300, n, |row, j| scales[j] * z[(row, perm[j])]);
    let (score, p) = mcc(&pearson_corr(&z, &z_hat).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    if (score - 1.0).abs() > 1e-12 {
        return Err(format!("n {n} seed {seed}: MCC {score}"));
    }
    if (0..n).any(|j| p[perm[j]] != j) {
        return Err(format!("n {n} seed {seed}: assignment {p:?} for permutation {perm:?}"));
    }
    Ok(())
}

/// `M = μ + δσ` coordinatewise, negative δ rejected, and masked entries replaced by `M`.
pub fn mask_value_case(n: usize, delta: f64, seed: u64) -> Check {
    let mut r = rng(seed);
    let mu: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
    let sigma: Vec<f64> = (0..n).map(|_| r.random_range(0.1..4.0)).collect();
    let moments = LatentMoments { mu: mu.clone(), sigma_diag: sigma.clone(), cov: None };
    let v = mask_value(&moments, delta).map_err(|e| e.to_string())?;
    for j in 0..n {
        if v.m[j] != mu[j] + delta * sigma[j] {
            return Err(format!("coordinate {j}: {} vs {}", v.m[j], mu[j] + delta * sigma[j]));
        }
    }
    if mask_value(&moments, -delta - 1e-3).is_ok() {
        return Err("negative delta accepted".into());
    }
    let masks: Vec<Vec<bool>> = (0..1usize << n).map(|b| (0..n).map(|j| b >> j & 1 == 1).collect()).collect();
    let set = MaskSet::explicit(n, masks).map_err(|e| e.to_string())?;
    let c = Matrix::randn(40, n, &mut r);
    let group: Vec<usize> = (0..40).map(|_| r.random_range(0..set.len())).collect();
    let z = apply_masks(&c, &group, &set, &v).map_err(|e| e.to_string())?;
    for row in 0..40 {
        for j in 0..n {
            let expect = if set.mask(group[row])[j] { c[(row, j)] } else { v.m[j] };
            if z[(row, j)] != expect {
                return Err(format!("row {row}, coordinate {j}: {} vs {expect}", z[(row, j)]));
            }
        }
    }
    Ok(())
}

pub fn random_cpdag<R: Rng>(n: usize, r: &mut R) -> Cpdag {
    let mut directed = Vec::new();
    let mut undirected = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            match r.random_range(0..4) {
                0 => {}
                1 => undirected.push((a, b)),
                2 => directed.push((a, b)),
                _ => directed.push((b, a)),
            }
        }
    }
    Cpdag::new(n, directed, undirected).unwrap()
}

pub fn shd_axioms_case(seed: u64) -> Check {
    let mut r = rng(seed);
    let (a, b, c) = (random_cpdag(5, &mut r), random_cpdag(5, &mut r), random_cpdag(5, &mut r));
    let d = |x: &Cpdag, y: &Cpdag| shd(x, y).unwrap();
    if d(&a, &a) != 0 {
        return Err("d(a, a) != 0".into());
    }
    if d(&a, &b) != d(&b, &a) {
        return Err("not symmetric".into());
    }
    if d(&a, &c) > d(&a, &b) + d(&b, &c) {
        return Err("triangle inequality fails".into());
    }
    if (d(&a, &b) == 0) != (a == b) {
        return Err("zero distance between different graphs".into());
    }
    Ok(())
}

/// Sufficient support variability straight from its definition: for each `i`, the union of
/// supports of masks not measuring `i` covers every other index.
pub fn variability_oracle(n: usize, masks: &[Vec<bool>]) -> Vec<usize> {
    (0..n)
        .filter(|&i| {
            let union: BTreeSet<usize> =
                masks.iter().filter(|m| !m[i]).flat_map(|m| (0..n).filter(|&j| m[j])).collect();
            let others: BTreeSet<usize> = (0..n).filter(|&j| j != i).collect();
            !others.is_subset(&union)
        })
        .collect()
}

/// Random mask sets; returns how many satisfied the assumption.
pub fn variability_sets(count: usize, seed: u64) -> Result<usize, String> {
    let mut r = rng(seed);
    let mut satisfied = 0;
    for _ in 0..count {
        let n = r.random_range(2..=6);
        let k = r.random_range(1..=10);
        let mut masks: Vec<Vec<bool>> = Vec::new();
        while masks.len() < k.min(1 << n) {
            let m: Vec<bool> = (0..n).map(|_| r.random_bool(0.5)).collect();
            if !masks.contains(&m) {
                masks.push(m);
            }
        }
        let set = MaskSet::explicit(n, masks.clone()).map_err(|e| e.to_string())?;
        let expect = variability_oracle(n, &masks);
        let got = variability_violations(&set);
        if got != expect {
            return Err(format!("masks {masks:?}: checker {got:?}, oracle {expect:?}"));
        }
        satisfied += expect.is_empty() as usize;
    }
    Ok(satisfied)
}

/// Closed-form covariance of a linear-Gaussian SCM against 1e5 samples, within 5 standard errors.
pub fn scm_covariance_case(seed: u64) -> Check {
    let mut r = rng(100 + seed);
    let dag = sample_er_dag(5, 1, &mut r).map_err(|e| e.to_string())?;
    let scm = sample_linear_scm(dag, NoiseKind::Gaussian, &mut r);
    let cov = latent_moments(&scm, 0, &mut r).cov.ok_or("no closed form")?;
    let rows = 100_000;
    let c = scm.sample_c(rows, &mut r);
    let mean = c.column_means();
    for i in 0..5 {
        if mean[i].abs() > 5.0 * (cov[(i, i)] / rows as f64).sqrt() {
            return Err(format!("seed {seed}: mean {i} is {}", mean[i]));
        }
        for j in 0..5 {
            let emp =
                (0..rows).map(|t| (c[(t, i)] - mean[i]) * (c[(t, j)] - mean[j])).sum::<f64>() / (rows - 1) as f64;
            let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / rows as f64).sqrt();
            if (emp - cov[(i, j)]).abs() > 5.0 * se {
                return Err(format!("seed {seed} ({i},{j}): {emp} vs {}", cov[(i, j)]));
            }
        }
    }
    Ok(())
}

/// Exact CPDAG recoveries out of 10 seeds for the chain and the collider.
pub fn pc_recoveries() -> [usize; 2] {
    let chain = Dag::new(3, vec![(0, 1), (1, 2)]).unwrap();
    let collider = Dag::new(3, vec![(0, 2), (1, 2)]).unwrap();
    [chain, collider].map(|dag| {
        let truth = cpdag_of_dag(&dag);
        (0..10)
            .filter(|&seed| {
                let mut r = rng(200 + seed);
                let scm = sample_linear_scm(dag.clone(), NoiseKind::Gaussian, &mut r);
                let data = scm.sample_c(10_000, &mut r);
                pc_algorithm(&data, 0.01).unwrap().cpdag == truth
            })
            .count()
    })
}

pub fn linear_dataset(n: usize, rows: usize, assignment: Assignment, seed: u64) -> MaskedDataset {
    let mut r = rng(seed);
    let scm = sample_linear_scm(sample_er_dag(n, 1, &mut r).unwrap(), NoiseKind::Gaussian, &mut r);
    let masks = gen_masks_fixed_ratio(n, RatioMode::Fraction(0.5), 2, &mut r).unwrap();
    let mixing = gen_linear_mixing(n, n, &mut r).unwrap();
    build_dataset(&scm, &masks, &MaskValue::zero(n), &mixing, rows, assignment, &mut r).unwrap()
}

pub fn small_config(regime: Regime, n: usize) -> TrainConfig {
    TrainConfig {
        regime,
        batch_size: 64,
        iterations: 30,
        log_interval: 5,
        width_scale: 0.1,
        primal_lr: 1e-3,
        dual_lr: 5e-4,
        ..TrainConfig::linear(n)
    }
}

/// Kinks of |·| and LeakyReLU at least `margin` away from every point of the batch.
fn smooth_enough(model: &EncoderDecoder, x: &Matrix, margin: f64) -> bool {
    let (z, enc) = model.encoder.forward(x, Mode::Train).unwrap();
    let (_, dec) = model.decoder.forward(&z, Mode::Train).unwrap();
    z.data().iter().all(|v| v.abs() > margin)
        && enc.min_abs_kink_distance(&model.encoder) > margin
        && dec.min_abs_kink_distance(&model.decoder) > margin
}

/// Worst relative error between the analytic gradient of the full Lagrangian (reconstruction,
/// moment penalty, λ times the constraint) and central differences over every parameter.
pub fn lagrangian_gradient_error(regime: Regime, seed: u64, all_measured: bool) -> f64 {
    let n = 3;
    let data = linear_dataset(n, 60, Assignment::BalancedPerGroup, seed);
    let groups: Vec<Vec<usize>> = data.group_indices();
    let mut config = small_config(regime, n);
    config.delta = 2.0;
    let act = if regime == Regime::LinearSparse { Activation::Identity } else { Activation::LeakyRelu(NET_SLOPE) };
    let mut r = rng(seed);
    let model = loop {
        let mut m = build_networks(n, n, n, 0.1, EncoderNorm::Hidden, act, &mut r).unwrap();
        // Perturb so batch-norm shifts and scales are not at their initial values.
        let p: Vec<f64> = m.flat_params().iter().map(|v| v + r.random_range(-0.3..0.3)).collect();
        m.set_flat_params(&p).unwrap();
        if smooth_enough(&m, &data.x, 1e-3) {
            break m;
        }
    };
    let lambda = 0.7;
    let full = vec![vec![true; n]; data.mask_set.len()];
    let masks = if all_measured { &full[..] } else { data.mask_set.masks() };
    let at = |p: &[f64]| {
        let mut m = model.clone();
        m.set_flat_params(p).unwrap();
        lagrangian(&m, &config, masks, lambda, &data.x, &groups).unwrap().value
    };
    let analytic = lagrangian(&model, &config, masks, lambda, &data.x, &groups).unwrap().grad;
    let params = model.flat_params();
    let h = 1e-5;
    // Biases ahead of batch norm have zero gradient, and there both estimates are roundoff. The
    // loss is a long sum, so its evaluation error is taken as 1e3 ulps; divided by h that is the
    // absolute noise of the difference quotient, and entries below noise / 1e-5 are scored
    // against that floor instead of their own size.
    let noise = 1e3 * f64::EPSILON * at(&params).abs() / h;
    let floor = noise / 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let mut p = params.clone();
        p[i] += h;
        let up = at(&p);
        p[i] -= 2.0 * h;
        let down = at(&p);
        let numeric = (up - down) / (2.0 * h);
        let e = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(floor);
        worst = worst.max(e);
    }
    worst
}
