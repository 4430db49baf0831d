//! Physical models for the two light sources.
//!
//! * the pseudo-thermal "star": a double slit under Gaussian illumination,
//!   whose mutual coherence at the two collection fibers follows from the
//!   van Cittert–Zernike theorem, and whose collected two-mode field is a
//!   Gaussian thermal state;
//! * the heralded down-conversion photon that is split into the
//!   path-entangled reference state.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_probability, Error, Result};
use crate::fock::{self, DensityOperator, FockConfig};
use crate::quadrature;

const VCZ_REL_TOL: f64 = 1e-8;

/// Double slit (centres at `±d`, width `w`) under a Gaussian beam of radius
/// `σ`, observed at distance `z` and wavelength `λ`. Lengths in metres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceModel {
    /// Distance from the centre of one slit to the midpoint between slits.
    pub slit_half_separation: f64,
    pub slit_width: f64,
    pub gaussian_radius: f64,
    pub wavelength: f64,
    pub distance: f64,
}

impl Default for SourceModel {
    fn default() -> Self {
        Self {
            slit_half_separation: 0.5e-3,
            slit_width: 0.5e-3,
            gaussian_radius: 1.7e-3,
            wavelength: 830e-9,
            distance: 1.02,
        }
    }
}

impl SourceModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("slit_half_separation", self.slit_half_separation),
            ("slit_width", self.slit_width),
            ("gaussian_radius", self.gaussian_radius),
            ("wavelength", self.wavelength),
            ("distance", self.distance),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be positive and finite, got {v}")));
            }
        }
        if self.slit_width >= 2.0 * self.slit_half_separation {
            return Err(Error::invalid(
                "slit_width",
                format!(
                    "slits overlap: width {} >= separation {}",
                    self.slit_width,
                    2.0 * self.slit_half_separation
                ),
            ));
        }
        Ok(())
    }

    /// `λ z`, the scale converting baselines to source-plane frequencies.
    pub fn lambda_z(&self) -> f64 {
        self.wavelength * self.distance
    }

    /// Slit intervals `[lo, hi]`, left slit first.
    pub fn slit_intervals(&self) -> [(f64, f64); 2] {
        let (d, h) = (self.slit_half_separation, 0.5 * self.slit_width);
        [(-d - h, -d + h), (d - h, d + h)]
    }

    /// Unnormalized intensity profile.
    pub fn raw_intensity(&self, x: f64) -> f64 {
        let inside = self
            .slit_intervals()
            .iter()
            .any(|&(lo, hi)| (lo..=hi).contains(&x));
        if inside {
            (-2.0 * x * x / (self.gaussian_radius * self.gaussian_radius)).exp()
        } else {
            0.0
        }
    }

    /// `∫ I_raw(x) dx`.
    pub fn raw_flux(&self) -> Result<f64> {
        let mut total = 0.0;
        for (lo, hi) in self.slit_intervals() {
            total += quadrature::integrate(
                |x| Complex64::new(self.raw_intensity(x), 0.0),
                lo,
                hi,
                1e-12,
                0.0,
            )?
            .re;
        }
        Ok(total)
    }

    /// Intensity normalized so that it integrates to one.
    pub fn intensity(&self, x: f64) -> Result<f64> {
        Ok(self.raw_intensity(x) / self.raw_flux()?)
    }
}

/// Complex degree of coherence between transverse positions `y1` and `y2`:
/// `exp(-iπ r/λz) ∫ I(x) exp(-i2π x Δy/λz) dx` with `Δy = y2 - y1` and
/// `r = y2² - y1²`.
pub fn coherence_vcz(source: &SourceModel, y1: f64, y2: f64) -> Result<Complex64> {
    source.validate()?;
    ensure_finite("y1", y1)?;
    ensure_finite("y2", y2)?;
    let lz = source.lambda_z();
    let r = y2 * y2 - y1 * y1;
    let prefactor = Complex64::from_polar(1.0, -PI * r / lz);
    let dy = y2 - y1;
    if dy == 0.0 {
        return Ok(prefactor);
    }
    let flux = source.raw_flux()?;
    let k = 2.0 * PI * dy / lz;
    let mut integral = Complex64::new(0.0, 0.0);
    for (lo, hi) in source.slit_intervals() {
        // the integrand is smooth on each slit; integrating slit by slit
        // keeps the rect edges at interval boundaries
        integral += quadrature::integrate(
            |x| Complex64::from_polar(source.raw_intensity(x), -k * x),
            lo,
            hi,
            VCZ_REL_TOL,
            1e-3 * VCZ_REL_TOL * flux,
        )?;
    }
    let j = prefactor * integral / flux;
    // |j| <= 1 holds analytically; shave quadrature round-off
    Ok(if j.norm() > 1.0 { j / j.norm() } else { j })
}

/// Bose–Einstein photon-number distribution `n̄^n / (n̄+1)^(n+1)`.
pub fn thermal_pn(mean: f64, n: usize) -> Result<f64> {
    if !(mean.is_finite() && mean >= 0.0) {
        return Err(Error::invalid("mean", format!("must be nonnegative, got {mean}")));
    }
    Ok(thermal_pn_unchecked(mean, n))
}

fn thermal_pn_unchecked(mean: f64, n: usize) -> f64 {
    if mean == 0.0 {
        return if n == 0 { 1.0 } else { 0.0 };
    }
    let ratio = mean / (1.0 + mean);
    ratio.powi(n as i32) / (1.0 + mean)
}

/// Single-mode thermal state truncated at the cutoff and renormalized.
pub fn single_mode_thermal(mean: f64, config: FockConfig) -> Result<DensityOperator> {
    if config.mode_count != 1 {
        return Err(Error::ConfigMismatch("single-mode config required".into()));
    }
    let pops: Vec<f64> = (0..=config.n_max)
        .map(|n| thermal_pn(mean, n))
        .collect::<Result<_>>()?;
    DensityOperator::diagonal(config, &pops)?.normalize()
}

/// The fields collected by the two telescope fibers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherencePair {
    /// Mean photon number per fiber per pulse.
    pub mean_photons: f64,
    pub j: Complex64,
    pub y1: f64,
    pub y2: f64,
}

impl CoherencePair {
    pub const DEFAULT_MEAN_PHOTONS: f64 = 0.008;

    pub fn new(mean_photons: f64, j: Complex64, y1: f64, y2: f64) -> Result<Self> {
        let pair = Self {
            mean_photons,
            j,
            y1,
            y2,
        };
        pair.validate()?;
        Ok(pair)
    }

    /// Pair for fibers at `y1`, `y2` looking at `source`.
    pub fn from_source(source: &SourceModel, mean_photons: f64, y1: f64, y2: f64) -> Result<Self> {
        Self::new(mean_photons, coherence_vcz(source, y1, y2)?, y1, y2)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean_photons.is_finite() && self.mean_photons >= 0.0) {
            return Err(Error::invalid("mean_photons", "must be nonnegative"));
        }
        if !(self.j.re.is_finite() && self.j.im.is_finite()) || self.j.norm() > 1.0 + 1e-9 {
            return Err(Error::invalid("j", format!("|j| must not exceed 1, got {}", self.j.norm())));
        }
        Ok(())
    }
}

/// Two-mode Gaussian thermal state whose first-order coherence matrix is
/// `⟨a_k† a_l⟩ = [[n̄, n̄ j*], [n̄ j, n̄]]`, i.e. `ρ_{10,01} ≈ n̄ j`.
///
/// Built in the eigenmode basis, where it is a product of thermal states of
/// means `n̄(1 ± |j|)` truncated to at most `n_max` photons in total, then
/// rotated onto the fiber modes by a balanced beam splitter.
pub fn thermal_pair_state(pair: &CoherencePair, config: FockConfig) -> Result<DensityOperator> {
    pair.validate()?;
    if config.mode_count != 2 {
        return Err(Error::ConfigMismatch("thermal pair needs a two-mode config".into()));
    }
    let mag = pair.j.norm().min(1.0);
    let mean_plus = pair.mean_photons * (1.0 + mag);
    let mean_minus = pair.mean_photons * (1.0 - mag);
    let pops: Vec<f64> = (0..config.dim())
        .map(|i| {
            let (np, nm) = (config.occupation(i, 0), config.occupation(i, 1));
            if np + nm > config.n_max {
                0.0
            } else {
                thermal_pn_unchecked(mean_plus, np) * thermal_pn_unchecked(mean_minus, nm)
            }
        })
        .collect();
    let diag = DensityOperator::diagonal(config, &pops)?;
    // a photon in eigenmode 0 leaves as (|10⟩ + i e^{iφ}|01⟩)/√2; choosing
    // φ = -arg j - π/2 puts the coherence ρ_{10,01} on arg j
    let phi = -pair.j.arg() - FRAC_PI_2;
    let u = fock::bs_unitary(config, 0, 1, FRAC_PI_4, phi)?;
    fock::apply_unitary(&diag, &u)?.normalize()
}

/// Down-conversion source statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpdcModel {
    pub mean_photons: f64,
    pub heralding_efficiency: f64,
    pub schmidt_number: f64,
}

impl Default for SpdcModel {
    fn default() -> Self {
        Self {
            mean_photons: 0.01,
            heralding_efficiency: 0.28,
            schmidt_number: 1.51,
        }
    }
}

impl SpdcModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.mean_photons.is_finite() && self.mean_photons >= 0.0) {
            return Err(Error::invalid("mean_photons", "must be nonnegative"));
        }
        ensure_probability("heralding_efficiency", self.heralding_efficiency)?;
        if !(self.schmidt_number.is_finite() && self.schmidt_number >= 1.0) {
            return Err(Error::invalid("schmidt_number", "must be at least 1"));
        }
        Ok(())
    }

    /// Heralded populations of `|1⟩` and `|2⟩` before normalization:
    /// `η p(1)` and `(2-η) η p(2)`.
    pub fn heralded_weights(&self) -> (f64, f64) {
        let eta = self.heralding_efficiency;
        let p1 = thermal_pn_unchecked(self.mean_photons, 1);
        let p2 = thermal_pn_unchecked(self.mean_photons, 2);
        (eta * p1, (2.0 - eta) * eta * p2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeraldedReference {
    pub state: DensityOperator,
    /// Probability per pulse that the herald fires.
    pub herald_probability: f64,
}

/// `ρ ∝ η p(1)|1⟩⟨1| + (2-η) η p(2)|2⟩⟨2|`, normalized.
pub fn heralded_state(spdc: &SpdcModel, config: FockConfig) -> Result<HeraldedReference> {
    spdc.validate()?;
    if config.mode_count != 1 {
        return Err(Error::ConfigMismatch("heralded state is single-mode".into()));
    }
    let (w1, w2) = spdc.heralded_weights();
    let total = w1 + w2;
    let mut pops = vec![0.0; config.dim()];
    if total > 0.0 {
        pops[1] = w1 / total;
        if config.n_max >= 2 {
            pops[2] = w2 / total;
        }
    } else {
        // n̄ → 0 limit: p(2)/p(1) → 0
        pops[1] = 1.0;
    }
    let state = DensityOperator::diagonal(config, &pops)?.normalize()?;
    Ok(HeraldedReference {
        state,
        herald_probability: total,
    })
}

/// Heralded state with the vacuum and higher photon numbers kept: a binary
/// herald of efficiency `η` on one arm of the pair source and transmission
/// `η` on the other, every pair number up to the cutoff.
pub fn heralded_state_with_loss(spdc: &SpdcModel, config: FockConfig) -> Result<HeraldedReference> {
    spdc.validate()?;
    if config.mode_count != 1 {
        return Err(Error::ConfigMismatch("heralded state is single-mode".into()));
    }
    let eta = spdc.heralding_efficiency;
    let mut pops = vec![0.0; config.dim()];
    let mut herald = 0.0;
    for n in 1..=config.n_max {
        let p_fire = thermal_pn_unchecked(spdc.mean_photons, n) * (1.0 - (1.0 - eta).powi(n as i32));
        herald += p_fire;
        for (k, pop) in pops.iter_mut().enumerate().take(n + 1) {
            let binom: f64 = (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64);
            *pop += p_fire * binom * eta.powi(k as i32) * (1.0 - eta).powi((n - k) as i32);
        }
    }
    let state = DensityOperator::diagonal(config, &pops)?.normalize()?;
    Ok(HeraldedReference {
        state,
        herald_probability: herald,
    })
}

/// Splits a single-mode state on a balanced beam splitter and applies the
/// phase `δ` to the second output. A single photon becomes
/// `(|10⟩ + i e^{iδ}|01⟩)/√2`.
pub fn pers_split(heralded: &DensityOperator, delta: f64, config: FockConfig) -> Result<DensityOperator> {
    ensure_finite("delta", delta)?;
    let in_cfg = heralded.config();
    if in_cfg.mode_count != 1 || config.mode_count != 2 || config.n_max != in_cfg.n_max {
        return Err(Error::ConfigMismatch(
            "pers_split maps a single-mode state onto a two-mode space with the same cutoff".into(),
        ));
    }
    if (heralded.trace() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("heralded", "input state must have unit trace"));
    }
    let with_vac = fock::tensor(heralded, &DensityOperator::vacuum(in_cfg))?;
    let split = fock::apply_unitary(&with_vac, &fock::bs_unitary(config, 0, 1, FRAC_PI_4, 0.0)?)?;
    fock::apply_unitary(&split, &fock::phase_shift(config, 1, delta)?)
}

/// `g²(0) = 1 + 1/K` for a source with Schmidt number `K`.
pub fn g2_from_schmidt(schmidt_number: f64) -> Result<f64> {
    if !(schmidt_number >= 1.0) {
        return Err(Error::invalid("schmidt_number", format!("must be >= 1, got {schmidt_number}")));
    }
    Ok(1.0 + 1.0 / schmidt_number)
}

/// Weights of the fewest thermal modes whose participation ratio
/// `1 / Σ λ²` equals `K`: one dominant mode, the rest equal.
pub fn schmidt_mode_weights(schmidt_number: f64) -> Result<Vec<f64>> {
    if !(schmidt_number >= 1.0 && schmidt_number.is_finite()) {
        return Err(Error::invalid("schmidt_number", format!("must be finite and >= 1, got {schmidt_number}")));
    }
    let modes = schmidt_number.ceil().max(1.0) as usize;
    if modes == 1 {
        return Ok(vec![1.0]);
    }
    // λ² + (1-λ)²/(m-1) = 1/K, larger root
    let m = modes as f64;
    let target = 1.0 / schmidt_number;
    let (a, b, c) = (1.0 + 1.0 / (m - 1.0), -2.0 / (m - 1.0), 1.0 / (m - 1.0) - target);
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let lead = (-b + disc.sqrt()) / (2.0 * a);
    let rest = (1.0 - lead) / (m - 1.0);
    Ok(std::iter::once(lead).chain(std::iter::repeat_n(rest, modes - 1)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg(modes: usize) -> FockConfig {
        FockConfig::new(modes, 3).unwrap()
    }

    #[test]
    fn zero_baseline_is_fully_coherent() {
        let s = SourceModel::default();
        assert_eq!(coherence_vcz(&s, 1.3e-3, 1.3e-3).unwrap(), Complex64::new(1.0, 0.0));
    }

    #[test]
    fn delta_pair_limit_matches_cosine() {
        // σ → ∞, w → 0: |j| = |cos(2π d Δy / λz)|
        let s = SourceModel {
            slit_half_separation: 0.5e-3,
            slit_width: 1e-7,
            gaussian_radius: 1e3,
            ..SourceModel::default()
        };
        let lz = s.lambda_z();
        for k in 0..20 {
            let dy = 0.05e-3 + k as f64 * 0.3e-3;
            let j = coherence_vcz(&s, 0.0, dy).unwrap();
            let expected = (2.0 * PI * 0.5e-3 * dy / lz).cos().abs();
            assert_abs_diff_eq!(j.norm(), expected, epsilon = 1e-6);
        }
        let first_zero = lz / (4.0 * 0.5e-3);
        assert_abs_diff_eq!(first_zero, 0.423e-3, epsilon = 1e-6);
        assert!(coherence_vcz(&s, 0.0, first_zero).unwrap().norm() < 1e-6);
    }

    #[test]
    fn finite_slit_adds_sinc_envelope() {
        let s = SourceModel {
            slit_half_separation: 0.5e-3,
            slit_width: 0.5e-3,
            gaussian_radius: 1e3,
            ..SourceModel::default()
        };
        let lz = s.lambda_z();
        for k in 1..25 {
            let dy = k as f64 * 0.11e-3;
            let arg = PI * s.slit_width * dy / lz;
            let expected = ((2.0 * PI * s.slit_half_separation * dy / lz).cos() * arg.sin() / arg).abs();
            assert_abs_diff_eq!(coherence_vcz(&s, 0.0, dy).unwrap().norm(), expected, epsilon = 1e-7);
        }
        let envelope_zero = lz / s.slit_width;
        assert_abs_diff_eq!(envelope_zero, 1.693e-3, epsilon = 1e-6);
        assert!(coherence_vcz(&s, 0.0, envelope_zero).unwrap().norm() < 1e-7);
    }

    #[test]
    fn coherence_is_hermitian_and_bounded() {
        let s = SourceModel::default();
        for &(y1, y2) in &[(0.0, 1e-3), (-2e-3, 0.7e-3), (3e-3, -1e-3)] {
            let a = coherence_vcz(&s, y1, y2).unwrap();
            let b = coherence_vcz(&s, y2, y1).unwrap();
            assert_abs_diff_eq!((a - b.conj()).norm(), 0.0, epsilon = 1e-12);
            assert!(a.norm() <= 1.0);
        }
        assert!(coherence_vcz(&s, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn source_validation() {
        let overlapping = SourceModel {
            slit_width: 1.2e-3,
            ..SourceModel::default()
        };
        assert!(overlapping.validate().is_err());
        let negative = SourceModel {
            distance: -1.0,
            ..SourceModel::default()
        };
        assert!(negative.validate().is_err());
        let s = SourceModel::default();
        let norm = quadrature::integrate(|x| Complex64::new(s.intensity(x).unwrap(), 0.0), -1.0e-3, -0.0, 1e-10, 0.0)
            .unwrap();
        assert_abs_diff_eq!(norm.re, 0.5, epsilon = 1e-9);
    }

    #[test]
    fn bose_distribution_values() {
        assert_abs_diff_eq!(thermal_pn(0.01, 1).unwrap(), 0.009_803_0, epsilon = 5e-8);
        assert_abs_diff_eq!(thermal_pn(0.01, 2).unwrap(), 9.7059e-5, epsilon = 5e-9);
        assert_eq!(thermal_pn(0.0, 0).unwrap(), 1.0);
        assert!(thermal_pn(-0.1, 0).is_err());
        let total: f64 = (0..200).map(|n| thermal_pn(0.3, n).unwrap()).sum();
        assert_abs_diff_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bose_identity_gives_g2_of_two() {
        for &m in &[0.001, 0.008, 0.5, 3.0] {
            let (p0, p1, p2) = (thermal_pn(m, 0).unwrap(), thermal_pn(m, 1).unwrap(), thermal_pn(m, 2).unwrap());
            assert_abs_diff_eq!(2.0 * p2 * p0 / (p1 * p1), 2.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn incoherent_pair_is_product_of_thermal_states() {
        let pair = CoherencePair::new(0.008, Complex64::new(0.0, 0.0), 0.0, 0.0).unwrap();
        let rho = thermal_pair_state(&pair, cfg(2)).unwrap();
        let single = single_mode_thermal(0.008, cfg(1)).unwrap();
        let product = fock::tensor(&single, &single).unwrap();
        // identical up to the total-photon truncation (O(n̄^4))
        let diff = (rho.matrix() - product.matrix()).camax();
        assert!(diff < 1e-7, "{diff}");
    }

    #[test]
    fn fully_coherent_pair_single_photon_sector_is_pure() {
        let phase = 0.9;
        let nbar = 0.008;
        let pair = CoherencePair::new(nbar, Complex64::from_polar(1.0, phase), 0.0, 0.0).unwrap();
        let rho = thermal_pair_state(&pair, cfg(2)).unwrap();
        let p10 = rho.element(&[1, 0], &[1, 0]).unwrap();
        let p01 = rho.element(&[0, 1], &[0, 1]).unwrap();
        let c = rho.element(&[1, 0], &[0, 1]).unwrap();
        // one eigenmode of mean 2n̄, the other empty
        let weight = thermal_pn(2.0 * nbar, 1).unwrap() / 2.0;
        assert_abs_diff_eq!(p10.re, weight, epsilon = 1e-9);
        assert_abs_diff_eq!(p01.re, weight, epsilon = 1e-9);
        // rank one: |c|² = p10 p01, phase on arg j
        assert_abs_diff_eq!(c.norm(), weight, epsilon = 1e-9);
        assert_abs_diff_eq!(c.arg(), phase, epsilon = 1e-9);
    }

    #[test]
    fn single_photon_coherence_matches_gaussian_state_formula() {
        // exact Gaussian thermal state: ⟨10|ρ|01⟩ = [N(1+N)^-1]_{21} / det(1+N)
        // with N_{kl} = ⟨a_k† a_l⟩ = [[n̄, n̄ j*], [n̄ j, n̄]]
        let nbar = 0.008;
        let j = Complex64::from_polar(0.7, PI / 3.0);
        let n = nalgebra::Matrix2::new(
            Complex64::new(nbar, 0.0),
            nbar * j.conj(),
            nbar * j,
            Complex64::new(nbar, 0.0),
        );
        let one_plus = nalgebra::Matrix2::identity() + n;
        let exact = (n * one_plus.try_inverse().unwrap())[(1, 0)] / one_plus.determinant();

        let rho = thermal_pair_state(&CoherencePair::new(nbar, j, 0.0, 0.0).unwrap(), cfg(2)).unwrap();
        let got = rho.element(&[1, 0], &[0, 1]).unwrap();
        assert!((got - exact).norm() < 1e-6 * exact.norm(), "{got} vs {exact}");
        // the exact amplitude sits about 3% below first order at this n̄
        let first_order = nbar * j;
        assert!((got - first_order).norm() < 0.04 * first_order.norm());
        assert_abs_diff_eq!(got.arg(), PI / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(first_order.norm(), 0.0056, epsilon = 1e-12);
    }

    #[test]
    fn thermal_pair_marginals_are_thermal() {
        let pair = CoherencePair::new(0.008, Complex64::from_polar(0.6, -1.1), 0.0, 0.0).unwrap();
        let rho = thermal_pair_state(&pair, cfg(2)).unwrap();
        let single = single_mode_thermal(0.008, cfg(1)).unwrap();
        for keep in [0, 1] {
            let reduced = fock::partial_trace(&rho, &[keep]).unwrap();
            assert!((reduced.matrix() - single.matrix()).camax() < 1e-6);
        }
        assert!(rho.hermiticity_error() < 1e-12);
        assert!(CoherencePair::new(0.008, Complex64::new(1.2, 0.0), 0.0, 0.0).is_err());
    }

    #[test]
    fn heralded_populations_and_rate() {
        let h = heralded_state(&SpdcModel::default(), cfg(1)).unwrap();
        let p1 = h.state.population(&[1]).unwrap();
        let p2 = h.state.population(&[2]).unwrap();
        let (eta, q1, q2) = (0.28_f64, 0.01 / 1.01_f64.powi(2), 0.01_f64.powi(2) / 1.01_f64.powi(3));
        let w1 = eta * q1;
        let w2 = (2.0 - eta) * eta * q2;
        assert_abs_diff_eq!(p1, w1 / (w1 + w2), epsilon = 1e-12);
        assert_abs_diff_eq!(p2, w2 / (w1 + w2), epsilon = 1e-12);
        assert_abs_diff_eq!(p1, 0.98326, epsilon = 5e-6);
        assert_abs_diff_eq!(h.herald_probability, 0.002791, epsilon = 1e-6);
        assert!(h.herald_probability > 0.0 && h.herald_probability < 1.0);

        let ideal = SpdcModel {
            mean_photons: 1e-12,
            heralding_efficiency: 1.0,
            ..SpdcModel::default()
        };
        let h = heralded_state(&ideal, cfg(1)).unwrap();
        assert_abs_diff_eq!(h.state.population(&[1]).unwrap(), 1.0, epsilon = 1e-11);
        let dark = SpdcModel {
            mean_photons: 0.0,
            ..SpdcModel::default()
        };
        let h = heralded_state(&dark, cfg(1)).unwrap();
        assert_eq!(h.herald_probability, 0.0);
        assert_eq!(h.state.population(&[1]).unwrap(), 1.0);
    }

    #[test]
    fn split_single_photon_gives_path_entangled_state() {
        let one = DensityOperator::fock_state(cfg(1), &[1]).unwrap();
        let rho = pers_split(&one, 0.0, cfg(2)).unwrap();
        let half = Complex64::new(0.5, 0.0);
        assert_abs_diff_eq!((rho.element(&[1, 0], &[1, 0]).unwrap() - half).norm(), 0.0, epsilon = 1e-14);
        // ⟨10|ρ|01⟩ = (1/√2)(i/√2)* = -i/2
        assert_abs_diff_eq!(
            (rho.element(&[1, 0], &[0, 1]).unwrap() - Complex64::new(0.0, -0.5)).norm(),
            0.0,
            epsilon = 1e-14
        );
        assert_abs_diff_eq!(fock::ppt_negativity(&rho).unwrap(), 0.5, epsilon = 1e-12);

        let delta = 1.234;
        let rho = pers_split(&one, delta, cfg(2)).unwrap();
        let expected = Complex64::new(0.0, -0.5) * Complex64::from_polar(1.0, -delta);
        assert_abs_diff_eq!((rho.element(&[1, 0], &[0, 1]).unwrap() - expected).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn split_photon_pair_bunches() {
        let two = DensityOperator::fock_state(cfg(1), &[2]).unwrap();
        let rho = pers_split(&two, 0.3, cfg(2)).unwrap();
        // (a† + i b†)²/2 |0⟩: |20⟩ and |02⟩ carry 1/4 each, |11⟩ carries 1/2
        assert_abs_diff_eq!(rho.population(&[2, 0]).unwrap(), 0.25, epsilon = 1e-14);
        assert_abs_diff_eq!(rho.population(&[1, 1]).unwrap(), 0.5, epsilon = 1e-14);
        assert_abs_diff_eq!(rho.population(&[0, 2]).unwrap(), 0.25, epsilon = 1e-14);
        assert!(pers_split(&two, 0.3, FockConfig::new(2, 2).unwrap()).is_err());
    }

    #[test]
    fn lossy_heralded_reference_is_still_entangled() {
        let h = heralded_state_with_loss(&SpdcModel::default(), cfg(1)).unwrap();
        assert!(h.state.population(&[0]).unwrap() > 0.5);
        let split = pers_split(&h.state, 0.0, cfg(2)).unwrap();
        assert!(fock::ppt_negativity(&split).unwrap() > 1e-9);
    }

    #[test]
    fn schmidt_relations() {
        assert_abs_diff_eq!(g2_from_schmidt(1.51).unwrap(), 1.662, epsilon = 5e-4);
        assert_eq!(g2_from_schmidt(1.0).unwrap(), 2.0);
        assert_abs_diff_eq!(g2_from_schmidt(1e12).unwrap(), 1.0, epsilon = 1e-11);
        assert!(g2_from_schmidt(0.9).is_err());
        for &k in &[1.0, 1.51, 2.0, 3.7] {
            let w = schmidt_mode_weights(k).unwrap();
            let sum: f64 = w.iter().sum();
            let pr = 1.0 / w.iter().map(|x| x * x).sum::<f64>();
            assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(pr, k, epsilon = 1e-9);
        }
    }
}
