//! The four-mode interference network: telescope fields T1, T2 meet the
//! reference modes S1, S2 on two fiber beam splitters, whose outputs are
//! watched by detectors `+1, −1` (station 1) and `+2, −2` (station 2).
//!
//! Mode order is `(T1, S1, T2, S2)` before the beam splitters and
//! `(+1, −1, +2, −2)` after them. The same order is used for the 4-bit
//! click masks of [`OutcomePattern`].

use std::f64::consts::{FRAC_PI_4, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_probability, Error, Result};
use crate::fock::{self, ClickOutcome, ClickPovm, CMatrix, DensityOperator, FockConfig, ModeUnitary};
use crate::optics::{self, CoherencePair, HeraldedReference, SpdcModel};

/// Default number of δ samples in a [`FringeTable`].
pub const FRINGE_SAMPLES: usize = 64;

pub const DETECTOR_NAMES: [&str; 4] = ["+1", "-1", "+2", "-2"];

/// Click/no-click outcome of the four detectors, bit `k` set when detector
/// `k` (in `+1, −1, +2, −2` order) clicked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutcomePattern(u8);

impl OutcomePattern {
    pub fn new(clicks: [bool; 4]) -> Self {
        Self(
            clicks
                .iter()
                .enumerate()
                .fold(0, |m, (k, &c)| if c { m | (1 << k) } else { m }),
        )
    }

    pub fn from_mask(mask: u8) -> Result<Self> {
        if mask >= 16 {
            return Err(Error::invalid("mask", format!("pattern masks use 4 bits, got {mask}")));
        }
        Ok(Self(mask))
    }

    pub fn mask(self) -> u8 {
        self.0
    }

    pub fn clicked(self, detector: usize) -> bool {
        detector < 4 && self.0 & (1 << detector) != 0
    }

    pub fn click_count(self) -> u32 {
        self.0.count_ones()
    }

    /// At least one click at each station.
    pub fn is_coincidence(self) -> bool {
        self.0 & 0b0011 != 0 && self.0 & 0b1100 != 0
    }

    pub fn outcomes(self) -> [ClickOutcome; 4] {
        std::array::from_fn(|k| {
            if self.clicked(k) {
                ClickOutcome::Click
            } else {
                ClickOutcome::NoClick
            }
        })
    }

    pub fn all() -> impl Iterator<Item = Self> {
        (0..16).map(Self)
    }

    /// The nine cross-station coincidence patterns in mask order.
    pub fn coincidences() -> Vec<Self> {
        Self::all().filter(|p| p.is_coincidence()).collect()
    }
}

impl std::fmt::Display for OutcomePattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = (0..4).filter(|&k| self.clicked(k)).map(|k| DETECTOR_NAMES[k]).collect();
        if names.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", names.join(","))
        }
    }
}

/// Fringe sign assigned to each cross-station detector pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignConvention {
    pub plus_plus: i8,
    pub plus_minus: i8,
    pub minus_plus: i8,
    pub minus_minus: i8,
}

impl Default for SignConvention {
    fn default() -> Self {
        Self {
            plus_plus: 1,
            plus_minus: -1,
            minus_plus: -1,
            minus_minus: 1,
        }
    }
}

impl SignConvention {
    pub fn validate(&self) -> Result<()> {
        let d = Self::default();
        let flipped = Self {
            plus_plus: -1,
            plus_minus: 1,
            minus_plus: 1,
            minus_minus: -1,
        };
        if *self != d && *self != flipped {
            return Err(Error::invalid(
                "sign_convention",
                "flipping one detector must flip the sign: use (+,+)=(−,−)=±1, (+,−)=(−,+)=∓1",
            ));
        }
        Ok(())
    }

    /// Sign for station-1 detector `a` (0 or 1) and station-2 detector `b`
    /// (2 or 3).
    pub fn sign(&self, a: usize, b: usize) -> i8 {
        match (a, b) {
            (0, 2) => self.plus_plus,
            (0, _) => self.plus_minus,
            (_, 2) => self.minus_plus,
            _ => self.minus_minus,
        }
    }
}

/// What to do with coincidences involving more than one detector per station.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiClickPolicy {
    /// Use the pair with the lowest detector indices.
    #[default]
    LowestPair,
    Discard,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterferenceConfig {
    /// Coherent overlap Γ of reference and starlight modes.
    pub gamma: f64,
    pub detector_efficiency: f64,
    pub dark_count_prob: f64,
    pub sign_convention: SignConvention,
    pub multi_click: MultiClickPolicy,
}

impl InterferenceConfig {
    /// Per-detector efficiency giving about 10⁴ retained coincidences per
    /// 10 s at 80 MHz with the default sources at zero baseline.
    pub const DEFAULT_DETECTOR_EFFICIENCY: f64 = 0.52;

    pub fn validate(&self) -> Result<()> {
        ensure_probability("gamma", self.gamma)?;
        ensure_probability("detector_efficiency", self.detector_efficiency)?;
        ensure_probability("dark_count_prob", self.dark_count_prob)?;
        self.sign_convention.validate()
    }

    pub fn povm(&self) -> Result<ClickPovm> {
        ClickPovm::new(self.detector_efficiency, self.dark_count_prob)
    }
}

impl Default for InterferenceConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            detector_efficiency: Self::DEFAULT_DETECTOR_EFFICIENCY,
            dark_count_prob: 0.0,
            sign_convention: SignConvention::default(),
            multi_click: MultiClickPolicy::default(),
        }
    }
}

/// The two fiber beam splitters acting on `(T1, S1, T2, S2)`.
#[derive(Debug, Clone)]
struct Network {
    config: FockConfig,
    fbs: [ModeUnitary; 2],
}

impl Network {
    fn new(n_max: usize) -> Result<Self> {
        let config = FockConfig::new(4, n_max)?;
        Ok(Self {
            config,
            fbs: [
                fock::bs_unitary(config, 0, 1, FRAC_PI_4, 0.0)?,
                fock::bs_unitary(config, 2, 3, FRAC_PI_4, 0.0)?,
            ],
        })
    }

    /// `(T1, T2) ⊗ (S1, S2)` reordered to `(T1, S1, T2, S2)`.
    fn input(&self, thermal: &DensityOperator, reference: &DensityOperator) -> Result<DensityOperator> {
        fock::permute_modes(&fock::tensor(thermal, reference)?, &[0, 2, 1, 3])
    }

    fn propagate(&self, m: &CMatrix) -> Result<CMatrix> {
        let once = self.fbs[0].conjugate(m)?;
        self.fbs[1].conjugate(&once)
    }

    fn output_populations(&self, m: &CMatrix) -> Result<Vec<f64>> {
        let out = self.propagate(m)?;
        Ok((0..self.config.dim()).map(|i| out[(i, i)].re).collect())
    }

    /// Output photon-number distribution when the reference photons are
    /// fully distinguishable from the starlight: each source is sent through
    /// the splitters alone and the per-detector photon numbers add.
    ///
    /// Returns the distribution and the probability lost beyond the cutoff.
    fn distinguishable_populations(
        &self,
        thermal: &DensityOperator,
        reference: &DensityOperator,
    ) -> Result<(Vec<f64>, f64)> {
        let vac = DensityOperator::vacuum(thermal.config());
        let from_t = self.output_populations(self.input(thermal, &vac)?.matrix())?;
        let from_s = self.output_populations(self.input(&vac, reference)?.matrix())?;
        let cfg = self.config;
        let support = |p: &[f64]| -> Vec<(Vec<usize>, f64)> {
            p.iter()
                .enumerate()
                .filter(|(_, &v)| v > 0.0)
                .map(|(i, &v)| (cfg.occupations(i), v))
                .collect()
        };
        let (st, ss) = (support(&from_t), support(&from_s));
        let mut pops = vec![0.0; cfg.dim()];
        let mut leaked = 0.0;
        let mut occ = [0usize; 4];
        for (nt, pt) in &st {
            for (ns, ps) in &ss {
                for k in 0..4 {
                    occ[k] = nt[k] + ns[k];
                }
                if occ.iter().any(|&n| n > cfg.n_max) {
                    leaked += pt * ps;
                } else {
                    pops[cfg.index_of(&occ)?] += pt * ps;
                }
            }
        }
        Ok((pops, leaked))
    }
}

fn check_inputs(thermal: &DensityOperator, reference: &DensityOperator) -> Result<usize> {
    let (a, b) = (thermal.config(), reference.config());
    if a.mode_count != 2 || b.mode_count != 2 {
        return Err(Error::ConfigMismatch(
            "starlight and reference must both be two-mode states".into(),
        ));
    }
    if a.n_max != b.n_max {
        return Err(Error::ConfigMismatch(format!(
            "cutoff mismatch: starlight n_max {} vs reference n_max {}",
            a.n_max, b.n_max
        )));
    }
    Ok(a.n_max)
}

/// The state at the detectors: `Γ ρ_coherent + (1 − Γ) ρ_distinguishable`.
///
/// `ρ_coherent` is the full unitary evolution of `(T1, S1, T2, S2)` through
/// both splitters. `ρ_distinguishable` is diagonal in the output Fock basis
/// and holds the photon-number statistics obtained when reference and
/// starlight photons cannot interfere; it is renormalized after discarding
/// the (tiny) probability of exceeding the cutoff. Click statistics of the
/// mixture are exact for a single reference photon.
pub fn assemble_state(
    thermal: &DensityOperator,
    reference: &DensityOperator,
    cfg: &InterferenceConfig,
) -> Result<DensityOperator> {
    cfg.validate()?;
    let n_max = check_inputs(thermal, reference)?;
    let net = Network::new(n_max)?;
    let input = net.input(thermal, reference)?;
    let coherent = net.propagate(input.matrix())?;
    let (pops, leaked) = net.distinguishable_populations(thermal, reference)?;
    let kept = 1.0 - leaked;
    if kept <= 0.0 {
        return Err(Error::Numerical("all probability lies beyond the photon cutoff".into()));
    }
    let mut m = coherent * Complex64::new(cfg.gamma, 0.0);
    for (i, p) in pops.iter().enumerate() {
        m[(i, i)] += (1.0 - cfg.gamma) * p / kept;
    }
    DensityOperator::from_matrix(net.config, m)
}

/// Probability of exactly this click pattern (unlisted detectors silent).
pub fn coincidence_probability(
    state: &DensityOperator,
    pattern: OutcomePattern,
    cfg: &InterferenceConfig,
) -> Result<f64> {
    if state.config().mode_count != 4 {
        return Err(Error::ConfigMismatch("detector patterns need the four-mode output state".into()));
    }
    fock::outcome_probability(state, &cfg.povm()?, &pattern.outcomes())
}

/// Pattern probabilities for a diagonal (population) vector, all 16 at once.
fn pattern_probabilities(config: FockConfig, pops: &[f64], povm: &ClickPovm) -> [f64; 16] {
    let levels = config.levels();
    let silent: Vec<f64> = (0..levels).map(|n| povm.weight(ClickOutcome::NoClick, n)).collect();
    let mut out = [0.0; 16];
    for (i, &p) in pops.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let occ = config.occupations(i);
        for (mask, slot) in out.iter_mut().enumerate() {
            let w: f64 = (0..4)
                .map(|k| {
                    let s = silent[occ[k]];
                    if mask & (1 << k) != 0 {
                        1.0 - s
                    } else {
                        s
                    }
                })
                .product();
            *slot += w * p;
        }
    }
    out
}

/// Eq.-style closed form for the fringe contrast at first order in the
/// starlight photon number:
///
/// `2 p(1) |ρ₁₀⁰¹| Γ / [(2 − η) p(2) ρ₀₀⁰⁰ + p(1)(ρ₁₀¹⁰ + ρ₀₁⁰¹)]`
///
/// with `ρ₁₀⁰¹ = n̄ j`, `ρ₁₀¹⁰ = ρ₀₁⁰¹ = n̄`, `ρ₀₀⁰⁰ = 1 − 2n̄`. The phase is
/// `arg j`.
pub fn predicted_visibility(mean_star: f64, j: Complex64, spdc: &SpdcModel, gamma: f64) -> Result<Complex64> {
    spdc.validate()?;
    ensure_probability("gamma", gamma)?;
    if !(mean_star.is_finite() && (0.0..=0.5).contains(&mean_star)) {
        return Err(Error::invalid("mean_star", format!("must lie in [0, 0.5], got {mean_star}")));
    }
    ensure_finite("j.re", j.re)?;
    ensure_finite("j.im", j.im)?;
    let p1 = optics::thermal_pn(spdc.mean_photons, 1)?;
    let p2 = optics::thermal_pn(spdc.mean_photons, 2)?;
    let eta = spdc.heralding_efficiency;
    let rho_coh = mean_star * j;
    let denom = (2.0 - eta) * p2 * (1.0 - 2.0 * mean_star) + p1 * 2.0 * mean_star;
    if denom <= 0.0 {
        return Err(Error::Numerical("no photons: prediction undefined".into()));
    }
    Ok(Complex64::from_polar(2.0 * p1 * rho_coh.norm() * gamma / denom, j.arg()))
}

/// Resolves a coincidence pattern to its fringe sign; `None` when the
/// multi-click policy discards it.
pub fn sign_of_pattern(pattern: OutcomePattern, cfg: &InterferenceConfig) -> Result<Option<i8>> {
    if !pattern.is_coincidence() {
        return Err(Error::invalid(
            "pattern",
            format!("{pattern} is not a cross-station coincidence"),
        ));
    }
    if pattern.click_count() > 2 && cfg.multi_click == MultiClickPolicy::Discard {
        return Ok(None);
    }
    let a = if pattern.clicked(0) { 0 } else { 1 };
    let b = if pattern.clicked(2) { 2 } else { 3 };
    Ok(Some(cfg.sign_convention.sign(a, b)))
}

/// `P(δ) = mean + amplitude · cos(δ + phase)` with `amplitude ≥ 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fringe {
    pub mean: f64,
    pub amplitude: f64,
    pub phase: f64,
}

impl Fringe {
    /// First-harmonic fit of uniformly spaced samples over one period.
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let c1: Complex64 = samples
            .iter()
            .enumerate()
            .map(|(k, &p)| p * Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n))
            .sum::<Complex64>()
            / n;
        Self {
            mean,
            amplitude: 2.0 * c1.norm(),
            phase: c1.arg(),
        }
    }

    pub fn eval(&self, delta: f64) -> f64 {
        self.mean + self.amplitude * (delta + self.phase).cos()
    }

    pub fn contrast(&self) -> f64 {
        if self.mean > 0.0 {
            self.amplitude / self.mean
        } else {
            0.0
        }
    }
}

/// Per-pattern coincidence fringes versus the reference phase δ, for one
/// baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FringeTable {
    pub patterns: Vec<OutcomePattern>,
    pub fringes: Vec<Fringe>,
    /// Probability per pulse that the herald fires.
    pub herald_probability: f64,
    /// Largest deviation of any sampled pattern probability from its
    /// first-harmonic fit.
    pub max_harmonic_residual: f64,
    /// Summed population of the cutoff-overflow blocks of the splitters.
    pub overflow_population: f64,
    /// Probability of each pattern in `patterns` at the sampled phases.
    pub samples: Vec<Vec<f64>>,
}

impl FringeTable {
    pub fn fringe(&self, pattern: OutcomePattern) -> Option<&Fringe> {
        self.patterns.iter().position(|&p| p == pattern).map(|k| &self.fringes[k])
    }

    /// Coincidence probability per pulse given that the herald fired.
    pub fn mean_coincidence_probability(&self) -> f64 {
        self.fringes.iter().map(|f| f.mean).sum()
    }

    /// Retained events expected in `pulses` pulses.
    pub fn expected_events(&self, pulses: f64) -> f64 {
        pulses * self.herald_probability * self.mean_coincidence_probability()
    }
}

/// Samples the coincidence fringes on `samples` equally spaced δ ∈ [0, 2π).
///
/// `reference` is the heralded single-mode state; it is split onto S1, S2
/// and the phase δ is applied to S2.
pub fn fringe_table(
    thermal: &DensityOperator,
    reference: &HeraldedReference,
    cfg: &InterferenceConfig,
    samples: usize,
) -> Result<FringeTable> {
    cfg.validate()?;
    if samples < 8 {
        return Err(Error::invalid("samples", "need at least 8 phase samples"));
    }
    let two = thermal.config();
    let pers = optics::pers_split(&reference.state, 0.0, two)?;
    let n_max = check_inputs(thermal, &pers)?;
    let net = Network::new(n_max)?;
    let cfg4 = net.config;
    let povm = cfg.povm()?;
    let input = net.input(thermal, &pers)?;
    let overflow: f64 = net.fbs.iter().map(|u| u.overflow_population(&input)).sum();

    let (dist, leaked) = net.distinguishable_populations(thermal, &pers)?;
    let kept = 1.0 - leaked;
    let flat = pattern_probabilities(cfg4, &dist, &povm);

    let patterns = OutcomePattern::coincidences();
    // only output populations are needed: ⟨i|U M U†|i⟩ over the few
    // nonzero entries of row i of U, with δ entering as e^{iδ(n_k − n_l)}
    // on the S2 occupations of the input
    let u = net.fbs[1].left_multiply(&net.fbs[0].matrix())?;
    let rows: Vec<Vec<(usize, Complex64)>> = (0..cfg4.dim())
        .map(|i| {
            (0..cfg4.dim())
                .filter(|&k| u[(i, k)].norm_sqr() > 0.0)
                .map(|k| (k, u[(i, k)]))
                .collect()
        })
        .collect();
    let s2: Vec<usize> = (0..cfg4.dim()).map(|i| cfg4.occupation(i, 3)).collect();
    let m0 = input.matrix();
    let mut table = vec![vec![0.0; samples]; patterns.len()];
    let mut pops = vec![0.0; cfg4.dim()];
    let mut amp = Vec::new();
    for k in 0..samples {
        let delta = 2.0 * PI * k as f64 / samples as f64;
        let rotor: Vec<Complex64> = (0..=n_max).map(|n| Complex64::from_polar(1.0, delta * n as f64)).collect();
        for (row, pop) in rows.iter().zip(pops.iter_mut()) {
            amp.clear();
            amp.extend(row.iter().map(|&(c, v)| v * rotor[s2[c]]));
            let mut acc = Complex64::new(0.0, 0.0);
            for (&(a, _), ua) in row.iter().zip(&amp) {
                for (&(b, _), ub) in row.iter().zip(&amp) {
                    acc += ua * m0[(a, b)] * ub.conj();
                }
            }
            *pop = acc.re;
        }
        let coh = pattern_probabilities(cfg4, &pops, &povm);
        for (row, p) in table.iter_mut().zip(&patterns) {
            let mask = p.mask() as usize;
            row[k] = cfg.gamma * coh[mask] + (1.0 - cfg.gamma) * flat[mask] / kept;
        }
    }
    let fringes: Vec<Fringe> = table.iter().map(|row| Fringe::from_samples(row)).collect();
    let mut residual: f64 = 0.0;
    for (row, f) in table.iter().zip(&fringes) {
        for (k, &p) in row.iter().enumerate() {
            let delta = 2.0 * PI * k as f64 / samples as f64;
            residual = residual.max((p - f.eval(delta)).abs());
        }
    }
    Ok(FringeTable {
        patterns,
        fringes,
        herald_probability: reference.herald_probability,
        max_harmonic_residual: residual,
        overflow_population: overflow,
        samples: table,
    })
}

/// Everything needed to turn a baseline into a fringe table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Physics {
    pub source: optics::SourceModel,
    pub mean_star: f64,
    pub spdc: SpdcModel,
    pub interference: InterferenceConfig,
    /// Photon cutoff per mode.
    pub n_max: usize,
}

impl Default for Physics {
    fn default() -> Self {
        Self {
            source: optics::SourceModel::default(),
            mean_star: CoherencePair::DEFAULT_MEAN_PHOTONS,
            spdc: SpdcModel::default(),
            interference: InterferenceConfig::default(),
            n_max: FockConfig::DEFAULT_N_MAX,
        }
    }
}

impl Physics {
    pub fn two_mode(&self) -> Result<FockConfig> {
        FockConfig::new(2, self.n_max)
    }

    /// Telescope T2 sits on axis and T1 is displaced by `-baseline`.
    pub fn coherence_pair(&self, baseline: f64) -> Result<CoherencePair> {
        CoherencePair::from_source(&self.source, self.mean_star, -baseline, 0.0)
    }

    pub fn fringe_table(&self, baseline: f64) -> Result<FringeTable> {
        let two = self.two_mode()?;
        let pair = self.coherence_pair(baseline)?;
        self.fringe_table_for(&pair, two)
    }

    pub fn fringe_table_for(&self, pair: &CoherencePair, two: FockConfig) -> Result<FringeTable> {
        let thermal = optics::thermal_pair_state(pair, two)?;
        let reference = optics::heralded_state(&self.spdc, two.with_modes(1)?)?;
        fringe_table(&thermal, &reference, &self.interference, FRINGE_SAMPLES)
    }

    pub fn predicted_visibility(&self, baseline: f64) -> Result<Complex64> {
        let pair = self.coherence_pair(baseline)?;
        predicted_visibility(self.mean_star, pair.j, &self.spdc, self.interference.gamma)
    }
}
