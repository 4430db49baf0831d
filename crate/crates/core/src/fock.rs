//! Truncated multi-mode Fock-space linear algebra.
//!
//! States live in the tensor product of `mode_count` single-mode spaces, each
//! truncated at `n_max` photons. Basis vectors are ordered lexicographically
//! in the photon numbers with mode 0 varying slowest, so a two-mode index is
//! `n0 * (n_max + 1) + n1`.
//!
//! Linear-optical elements only ever touch one or two modes. [`ModeUnitary`]
//! therefore stores the small local block and applies it by gathering the
//! affected amplitudes, which keeps a 4-mode, `n_max = 3` network (D = 256)
//! cheap enough to evaluate thousands of times per scan. The dense `D x D`
//! form is available through [`ModeUnitary::matrix`].
//!
//! Beam splitter convention ("i on reflection"):
//!
//! ```text
//! a† -> cos θ a† + i e^{iφ} sin θ b†
//! b† -> i e^{-iφ} sin θ a† + cos θ b†
//! ```
//!
//! Pair blocks whose total photon number exceeds `n_max` cannot be represented
//! in the truncated space; they are left untouched so the operator stays
//! exactly unitary. [`ModeUnitary::overflow_population`] reports how much of
//! a state sits in those blocks.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_probability, Error, Result};

pub type CMatrix = DMatrix<Complex64>;

const HERMITIAN_TOL: f64 = 1e-10;
const UNITARY_TOL: f64 = 1e-10;
/// Largest Hilbert dimension we are willing to allocate densely.
const MAX_DIM: usize = 1 << 13;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FockConfig {
    pub mode_count: usize,
    pub n_max: usize,
}

impl FockConfig {
    pub const DEFAULT_N_MAX: usize = 3;

    pub fn new(mode_count: usize, n_max: usize) -> Result<Self> {
        if mode_count == 0 {
            return Err(Error::invalid("mode_count", "must be positive"));
        }
        if n_max == 0 {
            return Err(Error::invalid("n_max", "must be positive"));
        }
        let dim = (n_max + 1)
            .checked_pow(mode_count as u32)
            .filter(|&d| d <= MAX_DIM)
            .ok_or_else(|| {
                Error::invalid(
                    "mode_count",
                    format!("({n_max}+1)^{mode_count} exceeds the dense limit {MAX_DIM}"),
                )
            })?;
        debug_assert!(dim > 0);
        Ok(Self { mode_count, n_max })
    }

    /// Same cutoff, different number of modes.
    pub fn with_modes(&self, mode_count: usize) -> Result<Self> {
        Self::new(mode_count, self.n_max)
    }

    pub fn levels(&self) -> usize {
        self.n_max + 1
    }

    pub fn dim(&self) -> usize {
        self.levels().pow(self.mode_count as u32)
    }

    pub fn stride(&self, mode: usize) -> usize {
        self.levels().pow((self.mode_count - 1 - mode) as u32)
    }

    pub fn occupation(&self, index: usize, mode: usize) -> usize {
        (index / self.stride(mode)) % self.levels()
    }

    pub fn occupations(&self, index: usize) -> Vec<usize> {
        (0..self.mode_count)
            .map(|m| self.occupation(index, m))
            .collect()
    }

    pub fn index_of(&self, occupations: &[usize]) -> Result<usize> {
        if occupations.len() != self.mode_count {
            return Err(Error::ConfigMismatch(format!(
                "{} occupations given for {} modes",
                occupations.len(),
                self.mode_count
            )));
        }
        let mut index = 0;
        for &n in occupations {
            if n > self.n_max {
                return Err(Error::invalid(
                    "occupations",
                    format!("{n} photons exceeds cutoff {}", self.n_max),
                ));
            }
            index = index * self.levels() + n;
        }
        Ok(index)
    }

    pub fn total_photons(&self, index: usize) -> usize {
        (0..self.mode_count).map(|m| self.occupation(index, m)).sum()
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode < self.mode_count {
            Ok(())
        } else {
            Err(Error::ModeOutOfRange {
                index: mode,
                mode_count: self.mode_count,
            })
        }
    }
}

/// A (not necessarily normalized) density matrix on a truncated Fock space.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    config: FockConfig,
    matrix: CMatrix,
}

impl DensityOperator {
    pub fn from_matrix(config: FockConfig, matrix: CMatrix) -> Result<Self> {
        let d = config.dim();
        if matrix.nrows() != d || matrix.ncols() != d {
            return Err(Error::ConfigMismatch(format!(
                "matrix is {}x{}, config expects {d}x{d}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let rho = Self { config, matrix };
        let herm = rho.hermiticity_error();
        if herm > HERMITIAN_TOL * rho.matrix.norm().max(1.0) {
            return Err(Error::Numerical(format!(
                "density matrix is not Hermitian (max deviation {herm:.3e})"
            )));
        }
        Ok(rho)
    }

    pub fn vacuum(config: FockConfig) -> Self {
        let mut matrix = CMatrix::zeros(config.dim(), config.dim());
        matrix[(0, 0)] = ONE;
        Self { config, matrix }
    }

    pub fn fock_state(config: FockConfig, occupations: &[usize]) -> Result<Self> {
        let i = config.index_of(occupations)?;
        let mut matrix = CMatrix::zeros(config.dim(), config.dim());
        matrix[(i, i)] = ONE;
        Ok(Self { config, matrix })
    }

    /// `|ψ⟩⟨ψ|` for the given amplitudes (not renormalized).
    pub fn pure(config: FockConfig, amplitudes: &[Complex64]) -> Result<Self> {
        if amplitudes.len() != config.dim() {
            return Err(Error::ConfigMismatch(format!(
                "{} amplitudes for dimension {}",
                amplitudes.len(),
                config.dim()
            )));
        }
        let d = config.dim();
        let matrix = CMatrix::from_fn(d, d, |i, j| amplitudes[i] * amplitudes[j].conj());
        Ok(Self { config, matrix })
    }

    /// Diagonal state with the given basis populations.
    pub fn diagonal(config: FockConfig, populations: &[f64]) -> Result<Self> {
        if populations.len() != config.dim() {
            return Err(Error::ConfigMismatch(format!(
                "{} populations for dimension {}",
                populations.len(),
                config.dim()
            )));
        }
        let mut matrix = CMatrix::zeros(config.dim(), config.dim());
        for (i, &p) in populations.iter().enumerate() {
            matrix[(i, i)] = Complex64::new(p, 0.0);
        }
        Ok(Self { config, matrix })
    }

    pub fn config(&self) -> FockConfig {
        self.config
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.diagonal().iter().map(|z| z.re).sum()
    }

    pub fn normalize(self) -> Result<Self> {
        let t = self.trace();
        if !(t.is_finite() && t > 0.0) {
            return Err(Error::Numerical(format!(
                "cannot normalize a state with trace {t}"
            )));
        }
        Ok(Self {
            config: self.config,
            matrix: self.matrix.unscale(t),
        })
    }

    pub fn element(&self, row: &[usize], col: &[usize]) -> Result<Complex64> {
        let i = self.config.index_of(row)?;
        let j = self.config.index_of(col)?;
        Ok(self.matrix[(i, j)])
    }

    pub fn population(&self, occupations: &[usize]) -> Result<f64> {
        let i = self.config.index_of(occupations)?;
        Ok(self.matrix[(i, i)].re)
    }

    pub fn populations(&self) -> Vec<f64> {
        self.matrix.diagonal().iter().map(|z| z.re).collect()
    }

    /// Probability of finding exactly `n` photons in `mode`.
    pub fn mode_population(&self, mode: usize, n: usize) -> Result<f64> {
        self.config.check_mode(mode)?;
        Ok((0..self.config.dim())
            .filter(|&i| self.config.occupation(i, mode) == n)
            .map(|i| self.matrix[(i, i)].re)
            .sum())
    }

    pub fn mean_photons(&self, mode: usize) -> Result<f64> {
        self.config.check_mode(mode)?;
        Ok((0..self.config.dim())
            .map(|i| self.config.occupation(i, mode) as f64 * self.matrix[(i, i)].re)
            .sum())
    }

    pub fn hermiticity_error(&self) -> f64 {
        let d = self.matrix.nrows();
        let mut worst: f64 = 0.0;
        for i in 0..d {
            for j in i..d {
                worst = worst.max((self.matrix[(i, j)] - self.matrix[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = SymmetricEigen::new(self.matrix.clone())
            .eigenvalues
            .iter()
            .copied()
            .collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// `weight_a * a + weight_b * b`.
    pub fn mix(a: &Self, weight_a: f64, b: &Self, weight_b: f64) -> Result<Self> {
        if a.config != b.config {
            return Err(Error::ConfigMismatch(
                "cannot mix states on different spaces".into(),
            ));
        }
        Ok(Self {
            config: a.config,
            matrix: a.matrix.scale(weight_a) + b.matrix.scale(weight_b),
        })
    }
}

/// Unitary acting on a subset of modes, stored as its local block.
#[derive(Debug, Clone)]
pub struct ModeUnitary {
    config: FockConfig,
    modes: Vec<usize>,
    block: CMatrix,
    /// Nonzero entries of `block` as (row, col, value).
    nonzeros: Vec<(usize, usize, Complex64)>,
}

impl ModeUnitary {
    /// Builds an operator from its block on `modes`; the local basis index
    /// runs over the occupations of `modes` in the order given, first mode
    /// slowest.
    pub fn local(config: FockConfig, modes: Vec<usize>, block: CMatrix) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::invalid("modes", "at least one mode required"));
        }
        for (k, &m) in modes.iter().enumerate() {
            config.check_mode(m)?;
            if modes[..k].contains(&m) {
                return Err(Error::invalid("modes", format!("mode {m} repeated")));
            }
        }
        let local_dim = config.levels().pow(modes.len() as u32);
        if block.nrows() != local_dim || block.ncols() != local_dim {
            return Err(Error::ConfigMismatch(format!(
                "block is {}x{}, expected {local_dim}x{local_dim}",
                block.nrows(),
                block.ncols()
            )));
        }
        let defect = (&block * block.adjoint() - CMatrix::identity(local_dim, local_dim))
            .iter()
            .map(|z| z.norm())
            .fold(0.0, f64::max);
        if defect > UNITARY_TOL {
            return Err(Error::Numerical(format!(
                "block is not unitary (max deviation {defect:.3e})"
            )));
        }
        let nonzeros = (0..local_dim)
            .flat_map(|r| (0..local_dim).map(move |c| (r, c)))
            .filter_map(|(r, c)| {
                let v = block[(r, c)];
                (v.norm() > 0.0).then_some((r, c, v))
            })
            .collect();
        Ok(Self {
            config,
            modes,
            block,
            nonzeros,
        })
    }

    pub fn identity(config: FockConfig) -> Self {
        let l = config.levels();
        Self::local(config, vec![0], CMatrix::identity(l, l)).expect("identity is unitary")
    }

    pub fn config(&self) -> FockConfig {
        self.config
    }

    pub fn modes(&self) -> &[usize] {
        &self.modes
    }

    pub fn block(&self) -> &CMatrix {
        &self.block
    }

    /// Offsets of each local basis state relative to a base index with the
    /// acted-on modes empty.
    fn local_offsets(&self) -> Vec<usize> {
        let levels = self.config.levels();
        let local_dim = self.block.nrows();
        (0..local_dim)
            .map(|l| {
                let mut rem = l;
                let mut off = 0;
                for &m in self.modes.iter().rev() {
                    off += (rem % levels) * self.config.stride(m);
                    rem /= levels;
                }
                off
            })
            .collect()
    }

    /// Full-space indices whose acted-on modes are all empty.
    fn base_indices(&self) -> Vec<usize> {
        (0..self.config.dim())
            .filter(|&i| self.modes.iter().all(|&m| self.config.occupation(i, m) == 0))
            .collect()
    }

    /// Dense `D x D` representation.
    pub fn matrix(&self) -> CMatrix {
        let d = self.config.dim();
        let offsets = self.local_offsets();
        let mut out = CMatrix::zeros(d, d);
        for base in self.base_indices() {
            for &(r, c, v) in &self.nonzeros {
                out[(base + offsets[r], base + offsets[c])] = v;
            }
        }
        out
    }

    /// `U · m` for any `D x D` matrix `m`.
    pub fn left_multiply(&self, m: &CMatrix) -> Result<CMatrix> {
        let d = self.config.dim();
        if m.nrows() != d {
            return Err(Error::ConfigMismatch(format!(
                "operand has {} rows, unitary acts on dimension {d}",
                m.nrows()
            )));
        }
        let offsets = self.local_offsets();
        let bases = self.base_indices();
        let local_dim = offsets.len();
        let mut out = CMatrix::zeros(d, m.ncols());
        let mut gathered = vec![ZERO; local_dim];
        for col in 0..m.ncols() {
            let src = m.column(col);
            let mut dst = out.column_mut(col);
            for &base in &bases {
                for (g, off) in gathered.iter_mut().zip(&offsets) {
                    *g = src[base + off];
                }
                for &(r, c, v) in &self.nonzeros {
                    dst[base + offsets[r]] += v * gathered[c];
                }
            }
        }
        Ok(out)
    }

    /// `U m U†`, also valid for non-Hermitian `m`.
    pub fn conjugate(&self, m: &CMatrix) -> Result<CMatrix> {
        let um = self.left_multiply(m)?;
        // (U (U m)†)† = U m U†
        Ok(self.left_multiply(&um.adjoint())?.adjoint())
    }

    /// Population of `rho` in pair blocks this operator leaves untouched
    /// because their photon number exceeds the cutoff.
    pub fn overflow_population(&self, rho: &DensityOperator) -> f64 {
        let n_max = self.config.n_max;
        (0..self.config.dim())
            .filter(|&i| {
                self.modes
                    .iter()
                    .map(|&m| self.config.occupation(i, m))
                    .sum::<usize>()
                    > n_max
            })
            .map(|i| rho.matrix[(i, i)].re)
            .sum()
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Two-mode beam splitter lifted to the truncated Fock space.
pub fn bs_unitary(
    config: FockConfig,
    mode_a: usize,
    mode_b: usize,
    theta: f64,
    phi: f64,
) -> Result<ModeUnitary> {
    config.check_mode(mode_a)?;
    config.check_mode(mode_b)?;
    if mode_a == mode_b {
        return Err(Error::invalid("mode_b", "must differ from mode_a"));
    }
    ensure_finite("theta", theta)?;
    ensure_finite("phi", phi)?;

    let levels = config.levels();
    let n_max = config.n_max;
    let (c, s) = (theta.cos(), theta.sin());
    let i = Complex64::i();
    let a_to_b = i * Complex64::from_polar(1.0, phi) * s;
    let b_to_a = i * Complex64::from_polar(1.0, -phi) * s;
    let cc = Complex64::new(c, 0.0);

    let mut block = CMatrix::zeros(levels * levels, levels * levels);
    for na in 0..levels {
        for nb in 0..levels {
            let col = na * levels + nb;
            if na + nb > n_max {
                block[(col, col)] = ONE;
                continue;
            }
            let norm = (factorial(na) * factorial(nb)).sqrt();
            // (c a† + a_to_b b†)^na (b_to_a a† + c b†)^nb |0,0⟩
            for k in 0..=na {
                let left = binomial(na, k) * cc.powu(k as u32) * a_to_b.powu((na - k) as u32);
                for l in 0..=nb {
                    let right =
                        binomial(nb, l) * b_to_a.powu(l as u32) * cc.powu((nb - l) as u32);
                    let p = k + l;
                    let q = na + nb - p;
                    let amp = left * right * (factorial(p) * factorial(q)).sqrt() / norm;
                    block[(p * levels + q, col)] += amp;
                }
            }
        }
    }
    ModeUnitary::local(config, vec![mode_a, mode_b], block)
}

/// Single-mode phase shifter `exp(i φ n̂)`.
pub fn phase_shift(config: FockConfig, mode: usize, phi: f64) -> Result<ModeUnitary> {
    config.check_mode(mode)?;
    ensure_finite("phi", phi)?;
    let levels = config.levels();
    let mut block = CMatrix::zeros(levels, levels);
    for n in 0..levels {
        block[(n, n)] = Complex64::from_polar(1.0, phi * n as f64);
    }
    ModeUnitary::local(config, vec![mode], block)
}

pub fn apply_unitary(rho: &DensityOperator, u: &ModeUnitary) -> Result<DensityOperator> {
    if rho.config != u.config {
        return Err(Error::ConfigMismatch(
            "state and unitary are defined on different spaces".into(),
        ));
    }
    Ok(DensityOperator {
        config: rho.config,
        matrix: u.conjugate(&rho.matrix)?,
    })
}

/// `a ⊗ b`, with the modes of `a` first.
pub fn tensor(a: &DensityOperator, b: &DensityOperator) -> Result<DensityOperator> {
    if a.config.n_max != b.config.n_max {
        return Err(Error::ConfigMismatch(format!(
            "cutoffs differ ({} vs {})",
            a.config.n_max, b.config.n_max
        )));
    }
    let config = FockConfig::new(a.config.mode_count + b.config.mode_count, a.config.n_max)?;
    Ok(DensityOperator {
        config,
        matrix: a.matrix.kronecker(&b.matrix),
    })
}

/// Reduced state on `keep` (returned in ascending mode order).
pub fn partial_trace(rho: &DensityOperator, keep: &[usize]) -> Result<DensityOperator> {
    if keep.is_empty() {
        return Err(Error::invalid("keep", "at least one mode must be kept"));
    }
    let cfg = rho.config;
    let mut kept: Vec<usize> = keep.to_vec();
    kept.sort_unstable();
    kept.dedup();
    for &m in &kept {
        cfg.check_mode(m)?;
    }
    let traced: Vec<usize> = (0..cfg.mode_count).filter(|m| !kept.contains(m)).collect();
    let out_cfg = cfg.with_modes(kept.len())?;
    let traced_cfg_dim = cfg.levels().pow(traced.len() as u32);

    let full_index = |k_idx: usize, t_idx: usize| -> usize {
        let mut idx = 0;
        for (pos, &m) in kept.iter().enumerate() {
            let n = (k_idx / out_cfg.stride(pos)) % cfg.levels();
            idx += n * cfg.stride(m);
        }
        let mut rem = t_idx;
        for &m in traced.iter().rev() {
            idx += (rem % cfg.levels()) * cfg.stride(m);
            rem /= cfg.levels();
        }
        idx
    };

    let dk = out_cfg.dim();
    let mut out = CMatrix::zeros(dk, dk);
    for t in 0..traced_cfg_dim {
        let rows: Vec<usize> = (0..dk).map(|k| full_index(k, t)).collect();
        for (i, &ri) in rows.iter().enumerate() {
            for (j, &rj) in rows.iter().enumerate() {
                out[(i, j)] += rho.matrix[(ri, rj)];
            }
        }
    }
    Ok(DensityOperator {
        config: out_cfg,
        matrix: out,
    })
}

/// Reorders modes: new mode `k` is old mode `order[k]`.
pub fn permute_modes(rho: &DensityOperator, order: &[usize]) -> Result<DensityOperator> {
    let cfg = rho.config;
    if order.len() != cfg.mode_count {
        return Err(Error::ConfigMismatch(format!(
            "permutation of length {} for {} modes",
            order.len(),
            cfg.mode_count
        )));
    }
    let mut seen = vec![false; cfg.mode_count];
    for &m in order {
        cfg.check_mode(m)?;
        if std::mem::replace(&mut seen[m], true) {
            return Err(Error::invalid("order", format!("mode {m} repeated")));
        }
    }
    let d = cfg.dim();
    let map: Vec<usize> = (0..d)
        .map(|new| {
            order
                .iter()
                .enumerate()
                .map(|(k, &old)| cfg.occupation(new, k) * cfg.stride(old))
                .sum()
        })
        .collect();
    let matrix = CMatrix::from_fn(d, d, |i, j| rho.matrix[(map[i], map[j])]);
    Ok(DensityOperator { config: cfg, matrix })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ClickOutcome {
    NoClick,
    Click,
}

/// Binary (non-photon-number-resolving) detector: each photon is detected
/// independently with `detector_efficiency`; a dark count fires with
/// `dark_count_prob` per pulse regardless of the light.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClickPovm {
    pub detector_efficiency: f64,
    pub dark_count_prob: f64,
}

impl Default for ClickPovm {
    fn default() -> Self {
        Self {
            detector_efficiency: 1.0,
            dark_count_prob: 0.0,
        }
    }
}

impl ClickPovm {
    pub fn new(detector_efficiency: f64, dark_count_prob: f64) -> Result<Self> {
        ensure_probability("detector_efficiency", detector_efficiency)?;
        ensure_probability("dark_count_prob", dark_count_prob)?;
        Ok(Self {
            detector_efficiency,
            dark_count_prob,
        })
    }

    /// Diagonal element `⟨n|E|n⟩` of the chosen POVM element.
    pub fn weight(&self, outcome: ClickOutcome, n: usize) -> f64 {
        let none = (1.0 - self.dark_count_prob) * (1.0 - self.detector_efficiency).powi(n as i32);
        match outcome {
            ClickOutcome::NoClick => none,
            ClickOutcome::Click => 1.0 - none,
        }
    }

    /// The POVM element on `mode`, extended by identity to the full space.
    pub fn element(&self, outcome: ClickOutcome, config: FockConfig, mode: usize) -> Result<CMatrix> {
        config.check_mode(mode)?;
        let d = config.dim();
        let mut e = CMatrix::zeros(d, d);
        for i in 0..d {
            e[(i, i)] = Complex64::new(self.weight(outcome, config.occupation(i, mode)), 0.0);
        }
        Ok(e)
    }
}

/// `Tr(ρ ⊗_k E_k)` for one outcome per mode, clamped to `[0, 1]`.
pub fn outcome_probability(
    rho: &DensityOperator,
    povm: &ClickPovm,
    pattern: &[ClickOutcome],
) -> Result<f64> {
    let cfg = rho.config;
    if pattern.len() != cfg.mode_count {
        return Err(Error::ConfigMismatch(format!(
            "{} outcomes for {} modes",
            pattern.len(),
            cfg.mode_count
        )));
    }
    // tables[mode][n]
    let tables: Vec<Vec<f64>> = pattern
        .iter()
        .map(|&o| (0..cfg.levels()).map(|n| povm.weight(o, n)).collect())
        .collect();
    let p: f64 = (0..cfg.dim())
        .map(|i| {
            let w: f64 = tables
                .iter()
                .enumerate()
                .map(|(m, t)| t[cfg.occupation(i, m)])
                .product();
            w * rho.matrix[(i, i)].re
        })
        .sum();
    Ok(p.clamp(0.0, 1.0))
}

/// Sum of the magnitudes of the negative eigenvalues of the partial
/// transpose over mode 1. Positive values certify entanglement.
pub fn ppt_negativity(rho: &DensityOperator) -> Result<f64> {
    let cfg = rho.config;
    if cfg.mode_count != 2 {
        return Err(Error::ConfigMismatch(format!(
            "negativity needs a two-mode state, got {} modes",
            cfg.mode_count
        )));
    }
    let l = cfg.levels();
    let d = cfg.dim();
    let pt = CMatrix::from_fn(d, d, |row, col| {
        let (a, b) = (row / l, row % l);
        let (a2, b2) = (col / l, col % l);
        rho.matrix[(a * l + b2, a2 * l + b)]
    });
    Ok(SymmetricEigen::new(pt)
        .eigenvalues
        .iter()
        .filter(|&&x| x < 0.0)
        .map(|x| -x)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_4};

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn ket(cfg: FockConfig, terms: &[(&[usize], Complex64)]) -> Vec<Complex64> {
        let mut v = vec![ZERO; cfg.dim()];
        for (occ, amp) in terms {
            v[cfg.index_of(occ).unwrap()] += *amp;
        }
        v
    }

    fn apply_ket(u: &ModeUnitary, v: &[Complex64]) -> Vec<Complex64> {
        let m = CMatrix::from_column_slice(v.len(), 1, v);
        u.left_multiply(&m).unwrap().iter().copied().collect()
    }

    #[test]
    fn basis_ordering_is_lexicographic_mode0_slowest() {
        let cfg = FockConfig::new(2, 3).unwrap();
        assert_eq!(cfg.index_of(&[1, 0]).unwrap(), 4);
        assert_eq!(cfg.index_of(&[0, 1]).unwrap(), 1);
        assert_eq!(cfg.occupations(7), vec![1, 3]);
        assert_eq!(FockConfig::new(4, 3).unwrap().dim(), 256);
    }

    #[test]
    fn config_rejects_degenerate_sizes() {
        assert!(FockConfig::new(0, 3).is_err());
        assert!(FockConfig::new(2, 0).is_err());
        assert!(FockConfig::new(40, 3).is_err());
    }

    #[test]
    fn single_photon_splits_evenly_with_i_on_reflection() {
        let cfg = FockConfig::new(2, 3).unwrap();
        let u = bs_unitary(cfg, 0, 1, FRAC_PI_4, 0.0).unwrap();
        let out = apply_ket(&u, &ket(cfg, &[(&[1, 0], ONE)]));
        let expected = ket(
            cfg,
            &[(&[1, 0], c(FRAC_1_SQRT_2, 0.0)), (&[0, 1], c(0.0, FRAC_1_SQRT_2))],
        );
        for (a, b) in out.iter().zip(&expected) {
            assert_abs_diff_eq!((a - b).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn hong_ou_mandel_bunching() {
        // (a† + i b†)(i a† + b†)/2 |0⟩ = i (a†² + b†²)/2 |0⟩
        let cfg = FockConfig::new(2, 3).unwrap();
        let u = bs_unitary(cfg, 0, 1, FRAC_PI_4, 0.0).unwrap();
        let out = apply_ket(&u, &ket(cfg, &[(&[1, 1], ONE)]));
        let idx = |o: &[usize]| cfg.index_of(o).unwrap();
        assert_abs_diff_eq!(out[idx(&[1, 1])].norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!((out[idx(&[2, 0])] - c(0.0, FRAC_1_SQRT_2)).norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!((out[idx(&[0, 2])] - c(0.0, FRAC_1_SQRT_2)).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn zero_angle_is_identity() {
        let cfg = FockConfig::new(3, 2).unwrap();
        let u = bs_unitary(cfg, 2, 0, 0.0, 0.7).unwrap();
        let m = u.matrix();
        assert_abs_diff_eq!((m - CMatrix::identity(cfg.dim(), cfg.dim())).norm(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn beam_splitter_is_unitary_and_number_conserving() {
        let cfg = FockConfig::new(3, 3).unwrap();
        let u = bs_unitary(cfg, 0, 2, 0.37, 1.9).unwrap().matrix();
        let d = cfg.dim();
        let defect = (&u * u.adjoint() - CMatrix::identity(d, d)).camax();
        assert!(defect < 1e-10, "unitarity defect {defect}");
        for i in 0..d {
            for j in 0..d {
                if cfg.total_photons(i) != cfg.total_photons(j) {
                    assert_eq!(u[(i, j)], ZERO, "cross-block entry at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn local_and_dense_application_agree() {
        let cfg = FockConfig::new(3, 2).unwrap();
        let u = bs_unitary(cfg, 2, 1, 0.9, -0.4).unwrap();
        let d = cfg.dim();
        let m = CMatrix::from_fn(d, d, |i, j| c((i * 7 + j) as f64 % 5.0, (i as f64 - j as f64) * 0.1));
        let dense = u.matrix();
        let expected = &dense * &m * dense.adjoint();
        assert_abs_diff_eq!((u.conjugate(&m).unwrap() - expected).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn bad_modes_and_angles_are_rejected() {
        let cfg = FockConfig::new(2, 3).unwrap();
        assert!(matches!(
            bs_unitary(cfg, 0, 2, 0.1, 0.0),
            Err(Error::ModeOutOfRange { index: 2, .. })
        ));
        assert!(bs_unitary(cfg, 1, 1, 0.1, 0.0).is_err());
        assert!(bs_unitary(cfg, 0, 1, f64::NAN, 0.0).is_err());
        assert!(bs_unitary(cfg, 0, 1, 0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn apply_unitary_rejects_mismatched_spaces() {
        let rho = DensityOperator::vacuum(FockConfig::new(2, 3).unwrap());
        let u = bs_unitary(FockConfig::new(2, 2).unwrap(), 0, 1, 0.3, 0.0).unwrap();
        assert!(matches!(apply_unitary(&rho, &u), Err(Error::ConfigMismatch(_))));
    }

    #[test]
    fn split_single_photon_is_rank_one_projector() {
        let cfg = FockConfig::new(2, 3).unwrap();
        let rho = DensityOperator::fock_state(cfg, &[1, 0]).unwrap();
        let out = apply_unitary(&rho, &bs_unitary(cfg, 0, 1, FRAC_PI_4, 0.0).unwrap()).unwrap();
        let psi = ket(
            cfg,
            &[(&[1, 0], c(FRAC_1_SQRT_2, 0.0)), (&[0, 1], c(0.0, FRAC_1_SQRT_2))],
        );
        let expected = DensityOperator::pure(cfg, &psi).unwrap();
        assert_abs_diff_eq!((out.matrix() - expected.matrix()).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn tensor_of_vacua_and_trace_product() {
        let one = FockConfig::new(1, 3).unwrap();
        let v = DensityOperator::vacuum(one);
        let vv = tensor(&v, &v).unwrap();
        assert_eq!(vv, DensityOperator::vacuum(FockConfig::new(2, 3).unwrap()));

        let a = DensityOperator::diagonal(one, &[0.2, 0.3, 0.1, 0.1]).unwrap();
        let b = DensityOperator::diagonal(one, &[0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_abs_diff_eq!(tensor(&a, &b).unwrap().trace(), a.trace() * b.trace(), epsilon = 1e-14);
        let other = DensityOperator::vacuum(FockConfig::new(1, 2).unwrap());
        assert!(tensor(&a, &other).is_err());
    }

    #[test]
    fn partial_trace_of_product_keeps_factor() {
        let one = FockConfig::new(1, 2).unwrap();
        let a = DensityOperator::diagonal(one, &[0.6, 0.3, 0.1]).unwrap();
        let psi = [c(0.6, 0.0), c(0.0, 0.8), ZERO];
        let b = DensityOperator::pure(one, &psi).unwrap();
        let ab = tensor(&a, &b).unwrap();
        let ra = partial_trace(&ab, &[0]).unwrap();
        let rb = partial_trace(&ab, &[1]).unwrap();
        assert_abs_diff_eq!((ra.matrix() - a.matrix()).norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!((rb.matrix() - b.matrix()).norm(), 0.0, epsilon = 1e-14);
        assert!(partial_trace(&ab, &[]).is_err());
    }

    #[test]
    fn permute_then_trace_matches_direct_trace() {
        let one = FockConfig::new(1, 2).unwrap();
        let a = DensityOperator::diagonal(one, &[0.6, 0.3, 0.1]).unwrap();
        let b = DensityOperator::diagonal(one, &[0.1, 0.2, 0.7]).unwrap();
        let c_ = DensityOperator::diagonal(one, &[0.3, 0.3, 0.4]).unwrap();
        let abc = tensor(&tensor(&a, &b).unwrap(), &c_).unwrap();
        let cab = permute_modes(&abc, &[2, 0, 1]).unwrap();
        let expected = tensor(&tensor(&c_, &a).unwrap(), &b).unwrap();
        assert_abs_diff_eq!((cab.matrix() - expected.matrix()).norm(), 0.0, epsilon = 1e-14);
        assert!(permute_modes(&abc, &[0, 0, 1]).is_err());
    }

    #[test]
    fn detector_outcomes() {
        let one = FockConfig::new(1, 3).unwrap();
        let povm = ClickPovm::new(0.7, 0.0).unwrap();
        let vac = DensityOperator::vacuum(one);
        assert_eq!(
            outcome_probability(&vac, &ClickPovm::default(), &[ClickOutcome::NoClick]).unwrap(),
            1.0
        );
        let n1 = DensityOperator::fock_state(one, &[1]).unwrap();
        assert_abs_diff_eq!(outcome_probability(&n1, &povm, &[ClickOutcome::Click]).unwrap(), 0.7, epsilon = 1e-15);
        let n2 = DensityOperator::fock_state(one, &[2]).unwrap();
        assert_abs_diff_eq!(outcome_probability(&n2, &povm, &[ClickOutcome::NoClick]).unwrap(), 0.09, epsilon = 1e-15);
        assert!(outcome_probability(&n2, &povm, &[]).is_err());
        assert!(ClickPovm::new(1.2, 0.0).is_err());
    }

    #[test]
    fn povm_elements_resolve_identity() {
        let cfg = FockConfig::new(2, 3).unwrap();
        let povm = ClickPovm::new(0.55, 0.01).unwrap();
        let sum = povm.element(ClickOutcome::NoClick, cfg, 1).unwrap()
            + povm.element(ClickOutcome::Click, cfg, 1).unwrap();
        assert!((sum - CMatrix::identity(cfg.dim(), cfg.dim())).camax() < 1e-10);
    }

    #[test]
    fn bell_like_state_has_negativity_one_half_at_any_phase() {
        let cfg = FockConfig::new(2, 3).unwrap();
        for &delta in &[0.0, 0.4, 2.0, 5.5] {
            let psi = ket(
                cfg,
                &[
                    (&[1, 0], c(FRAC_1_SQRT_2, 0.0)),
                    (&[0, 1], Complex64::from_polar(FRAC_1_SQRT_2, delta)),
                ],
            );
            let rho = DensityOperator::pure(cfg, &psi).unwrap();
            assert_abs_diff_eq!(ppt_negativity(&rho).unwrap(), 0.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn separable_states_have_zero_negativity() {
        let one = FockConfig::new(1, 3).unwrap();
        let a = DensityOperator::pure(one, &[c(0.6, 0.0), c(0.0, 0.8), ZERO, ZERO]).unwrap();
        let b = DensityOperator::diagonal(one, &[0.5, 0.25, 0.15, 0.1]).unwrap();
        let prod = tensor(&a, &b).unwrap();
        assert!(ppt_negativity(&prod).unwrap() < 1e-12);
        let mixed = DensityOperator::mix(&prod, 0.3, &tensor(&b, &a).unwrap(), 0.7).unwrap();
        assert!(ppt_negativity(&mixed).unwrap() < 1e-12);
        let three = FockConfig::new(3, 1).unwrap();
        assert!(ppt_negativity(&DensityOperator::vacuum(three)).is_err());
    }

    #[test]
    fn overflow_population_counts_states_beyond_cutoff() {
        let cfg = FockConfig::new(2, 2).unwrap();
        let u = bs_unitary(cfg, 0, 1, FRAC_PI_4, 0.0).unwrap();
        let rho = DensityOperator::diagonal(cfg, &[0.5, 0.0, 0.0, 0.0, 0.0, 0.25, 0.0, 0.0, 0.25]).unwrap();
        // |1,2⟩ and |2,2⟩ exceed n_max = 2 in total
        assert_abs_diff_eq!(u.overflow_population(&rho), 0.5, epsilon = 1e-15);
    }
}
