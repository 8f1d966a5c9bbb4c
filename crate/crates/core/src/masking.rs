//! Mask sets, mask values, and the masked causal variables `Z = y⊙c + (1 − y)⊙m`.
//!
//! Latent indices are 0-based throughout.

use std::collections::{BTreeSet, HashSet};

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixing::MixingFn;
use crate::nn::Matrix;
use crate::scm::{LatentMoments, ScmModel};

/// Regeneration budget for random fixed-ratio mask sets.
pub const FIXED_RATIO_RETRIES: usize = 1000;
/// `2^n` rows are enumerated, so `n` is capped.
pub const MAX_ALL_SUBSETS_N: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    AllSubsets,
    FixedRatio,
    VaryingRatio,
    Explicit,
}

/// Fraction of measured latents per mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioMode {
    /// Exactly one measured latent.
    OneVar,
    Fraction(f64),
}

impl RatioMode {
    /// Number of ones per row: round-half-up of `ρn`, clamped to `[1, n − 1]` for `ρ < 1`.
    pub fn ones(self, n: usize) -> Result<usize> {
        match self {
            RatioMode::OneVar => Ok(1),
            RatioMode::Fraction(rho) => {
                if !(rho > 0.0 && rho <= 1.0) {
                    return Err(Error::Config(format!("ratio {rho} not in (0, 1]")));
                }
                if rho >= 1.0 {
                    return Ok(n);
                }
                let r = (rho * n as f64 + 0.5).floor() as usize;
                Ok(r.clamp(1, n.saturating_sub(1).max(1)))
            }
        }
    }
}

impl std::str::FromStr for RatioMode {
    type Err = Error;
    /// Accepts `1var`, `50%`, or `0.5`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("1var") {
            return Ok(RatioMode::OneVar);
        }
        let (num, scale) = match s.strip_suffix('%') {
            Some(p) => (p, 0.01),
            None => (s, 1.0),
        };
        num.trim()
            .parse::<f64>()
            .map(|v| RatioMode::Fraction(v * scale))
            .map_err(|_| Error::Config(format!("cannot parse ratio '{s}'")))
    }
}

impl std::fmt::Display for RatioMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RatioMode::OneVar => write!(f, "1var"),
            RatioMode::Fraction(r) => write!(f, "{}%", r * 100.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSet {
    n: usize,
    /// Rows are `y` vectors.
    masks: Vec<Vec<bool>>,
    strategy: MaskStrategy,
}

impl MaskSet {
    /// An explicit set; rows must be distinct and of length `n`. Sufficient variability is
    /// not enforced here (see [`check_sufficient_variability`]).
    pub fn explicit(n: usize, masks: Vec<Vec<bool>>) -> Result<Self> {
        Self::build(n, masks, MaskStrategy::Explicit)
    }

    fn build(n: usize, masks: Vec<Vec<bool>>, strategy: MaskStrategy) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Config("a mask set needs at least one mask".into()));
        }
        let mut seen = HashSet::new();
        for (g, m) in masks.iter().enumerate() {
            if m.len() != n {
                return Err(Error::Shape(format!("mask {g} has length {}, expected {n}", m.len())));
            }
            if !seen.insert(m.clone()) {
                return Err(Error::Config(format!("mask {g} is a duplicate")));
            }
        }
        Ok(Self { n, masks, strategy })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn masks(&self) -> &[Vec<bool>] {
        &self.masks
    }

    pub fn mask(&self, g: usize) -> &[bool] {
        &self.masks[g]
    }

    pub fn strategy(&self) -> MaskStrategy {
        self.strategy
    }

    /// Index of the all-ones mask, if present.
    pub fn full_mask_index(&self) -> Option<usize> {
        self.masks.iter().position(|m| m.iter().all(|&b| b))
    }

    /// Appends the all-ones mask unless already present. Adding a row never breaks
    /// sufficient variability.
    pub fn with_full_mask(mut self) -> Self {
        if self.full_mask_index().is_none() {
            self.masks.push(vec![true; self.n]);
        }
        self
    }

    /// Rows as 0/1 integers, for CSV export.
    pub fn to_rows(&self) -> Vec<Vec<u8>> {
        self.masks.iter().map(|m| m.iter().map(|&b| b as u8).collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<u8>], strategy: MaskStrategy) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        let masks = rows
            .iter()
            .map(|r| {
                r.iter()
                    .map(|&v| match v {
                        0 => Ok(false),
                        1 => Ok(true),
                        other => Err(Error::Config(format!("mask entry {other} is not 0/1"))),
                    })
                    .collect::<Result<Vec<bool>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Self::build(n, masks, strategy)
    }
}

/// Indices of the ones in `y`.
pub fn support_index_set(y: &[bool]) -> BTreeSet<usize> {
    y.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect()
}

/// Latents `i` for which the union of supports of the masks excluding `i` is not
/// `[n] \ {i}`. Empty when the assumption holds.
pub fn variability_violations(set: &MaskSet) -> Vec<usize> {
    let n = set.n();
    (0..n)
        .filter(|&i| {
            let mut covered = vec![false; n];
            for m in set.masks().iter().filter(|m| !m[i]) {
                for (c, &b) in covered.iter_mut().zip(m) {
                    *c |= b;
                }
            }
            (0..n).any(|j| j != i && !covered[j])
        })
        .collect()
}

pub fn check_sufficient_variability(set: &MaskSet) -> Result<()> {
    let violations = variability_violations(set);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(Error::InsufficientVariability { violations })
    }
}

/// All `2^n` masks, in binary counting order (latent 0 is the most significant bit).
pub fn gen_masks_all_subsets(n: usize) -> Result<MaskSet> {
    if n == 0 || n > MAX_ALL_SUBSETS_N {
        return Err(Error::Config(format!("all-subsets masks need 1 <= n <= {MAX_ALL_SUBSETS_N}, got {n}")));
    }
    let masks = (0..1usize << n)
        .map(|bits| (0..n).map(|j| bits >> (n - 1 - j) & 1 == 1).collect())
        .collect();
    MaskSet::build(n, masks, MaskStrategy::AllSubsets)
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// `kmul·n` distinct random masks with the same number of ones (see [`RatioMode::ones`]),
/// capped at the number of distinct such masks. Regenerated until sufficient variability
/// holds, up to [`FIXED_RATIO_RETRIES`] attempts.
pub fn gen_masks_fixed_ratio<R: Rng + ?Sized>(n: usize, ratio: RatioMode, kmul: usize, rng: &mut R) -> Result<MaskSet> {
    if n == 0 || kmul == 0 {
        return Err(Error::Config("fixed-ratio masks need n >= 1 and kmul >= 1".into()));
    }
    let ones = ratio.ones(n)?;
    let available = binomial(n, ones);
    let k = ((kmul * n) as u128).min(available) as usize;
    let mut best: Option<Vec<usize>> = None;
    for _ in 0..FIXED_RATIO_RETRIES {
        let mut seen = HashSet::with_capacity(k);
        let mut masks = Vec::with_capacity(k);
        while masks.len() < k {
            let mut row = vec![false; n];
            for j in sample_indices(rng, n, ones) {
                row[j] = true;
            }
            if seen.insert(row.clone()) {
                masks.push(row);
            }
        }
        let set = MaskSet::build(n, masks, MaskStrategy::FixedRatio)?;
        let v = variability_violations(&set);
        if v.is_empty() {
            return Ok(set);
        }
        if best.as_ref().is_none_or(|b| v.len() < b.len()) {
            best = Some(v);
        }
    }
    Err(Error::InsufficientVariability { violations: best.unwrap_or_default() })
}

/// `n` cyclic windows, row `g` starting at latent `g` with length `g + 1`. Such windows alone can never satisfy sufficient variability (every latent
/// `i` needs a non-full window starting at `i + 1`), so singleton masks are appended for
/// each latent left uncovered, in increasing order.
pub fn gen_masks_varying_ratio(n: usize) -> Result<MaskSet> {
    if n < 2 {
        return Err(Error::Config("varying-ratio masks need n >= 2".into()));
    }
    let mut masks: Vec<Vec<bool>> = (0..n)
        .map(|g| {
            let mut row = vec![false; n];
            for t in 0..=g {
                row[(g + t) % n] = true;
            }
            row
        })
        .collect();
    let mut needed = BTreeSet::new();
    for i in 0..n {
        let mut covered = vec![false; n];
        for m in masks.iter().filter(|m| !m[i]) {
            for (c, &b) in covered.iter_mut().zip(m) {
                *c |= b;
            }
        }
        needed.extend((0..n).filter(|&j| j != i && !covered[j]));
    }
    for j in needed {
        let mut row = vec![false; n];
        row[j] = true;
        if !masks.contains(&row) {
            masks.push(row);
        }
    }
    let set = MaskSet::build(n, masks, MaskStrategy::VaryingRatio)?;
    check_sufficient_variability(&set)?;
    Ok(set)
}

/// Value taken by unmeasured latents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskValue {
    pub m: Vec<f64>,
    pub delta: f64,
}

impl MaskValue {
    pub fn zero(n: usize) -> Self {
        Self { m: vec![0.0; n], delta: 0.0 }
    }
}

/// `m = μ + δ·σ`, elementwise.
pub fn mask_value(moments: &LatentMoments, delta: f64) -> Result<MaskValue> {
    if !(delta >= 0.0) {
        return Err(Error::Config(format!("delta must be >= 0, got {delta}")));
    }
    if moments.mu.len() != moments.sigma_diag.len() {
        return Err(Error::Shape("moment vectors differ in length".into()));
    }
    let m = moments.mu.iter().zip(&moments.sigma_diag).map(|(mu, s)| mu + delta * s).collect();
    Ok(MaskValue { m, delta })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Each sample draws a mask uniformly at random.
    UniformPerSample,
    /// Groups receive equal counts (remainder to the lowest indices).
    BalancedPerGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskedDataset {
    pub x: Matrix,
    pub z: Matrix,
    pub c: Matrix,
    pub group: Vec<usize>,
    pub mask_set: MaskSet,
    pub mask_value: MaskValue,
}

impl MaskedDataset {
    pub fn len(&self) -> usize {
        self.group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.group.is_empty()
    }

    /// Row indices of each group.
    pub fn group_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.mask_set.len()];
        for (i, &g) in self.group.iter().enumerate() {
            out[g].push(i);
        }
        out
    }

    /// The subset of rows belonging to group `g`, keeping the mask set.
    pub fn restrict_to_group(&self, g: usize) -> MaskedDataset {
        let idx: Vec<usize> = self.group.iter().enumerate().filter(|(_, &x)| x == g).map(|(i, _)| i).collect();
        MaskedDataset {
            x: self.x.select_rows(&idx),
            z: self.z.select_rows(&idx),
            c: self.c.select_rows(&idx),
            group: vec![g; idx.len()],
            mask_set: self.mask_set.clone(),
            mask_value: self.mask_value.clone(),
        }
    }

    /// Checks `Z = y⊙c + (1 − y)⊙m` exactly for every sample; returns the first bad row.
    pub fn z_consistency_violation(&self) -> Option<usize> {
        (0..self.len()).find(|&i| {
            let y = self.mask_set.mask(self.group[i]);
            (0..self.mask_set.n()).any(|j| {
                let expect = if y[j] { self.c[(i, j)] } else { self.mask_value.m[j] };
                self.z[(i, j)] != expect
            })
        })
    }
}

/// Applies the masks to `c` given group labels.
pub fn apply_masks(c: &Matrix, group: &[usize], masks: &MaskSet, value: &MaskValue) -> Result<Matrix> {
    let n = masks.n();
    if c.cols() != n || value.m.len() != n || group.len() != c.rows() {
        return Err(Error::Shape("causal samples, masks, groups and mask value disagree".into()));
    }
    let mut z = c.clone();
    for (i, &g) in group.iter().enumerate() {
        let y = masks.mask(g);
        for (j, v) in z.row_mut(i).iter_mut().enumerate() {
            if !y[j] {
                *v = value.m[j];
            }
        }
    }
    Ok(z)
}

pub fn assign_groups<R: Rng + ?Sized>(rows: usize, groups: usize, assignment: Assignment, rng: &mut R) -> Result<Vec<usize>> {
    match assignment {
        Assignment::UniformPerSample => Ok((0..rows).map(|_| rng.random_range(0..groups)).collect()),
        Assignment::BalancedPerGroup => {
            if rows < groups {
                return Err(Error::Precondition(format!("{rows} samples cannot cover {groups} groups")));
            }
            Ok((0..rows).map(|i| i % groups).collect())
        }
    }
}

/// Samples `C`, assigns masks, forms `Z`, and mixes to `X`.
pub fn build_dataset<R: Rng + ?Sized>(
    scm: &ScmModel,
    mask_set: &MaskSet,
    mask_value: &MaskValue,
    mixing: &MixingFn,
    rows: usize,
    assignment: Assignment,
    rng: &mut R,
) -> Result<MaskedDataset> {
    if scm.n() != mask_set.n() || mixing.n() != mask_set.n() {
        return Err(Error::Shape(format!(
            "SCM has {} latents, masks {}, mixing {}",
            scm.n(),
            mask_set.n(),
            mixing.n()
        )));
    }
    let c = scm.sample_c(rows, rng);
    let group = assign_groups(rows, mask_set.len(), assignment, rng)?;
    let z = apply_masks(&c, &group, mask_set, mask_value)?;
    let x = mixing.apply(&z)?;
    Ok(MaskedDataset { x, z, c, group, mask_set: mask_set.clone(), mask_value: mask_value.clone() })
}
