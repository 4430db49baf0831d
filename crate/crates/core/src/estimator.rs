//! From time tags to visibilities: event phases via the clock, the
//! circular-moment visibility estimator, and g²(0) from split counts.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::montecarlo::{AcquisitionHeader, ClockSignal, EventRecord, PztWaveform, SplitCounts};
use crate::protocol::{sign_of_pattern, InterferenceConfig};

/// One coincidence reduced to what the estimator needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseSample {
    pub delta: f64,
    pub sign: i8,
    /// Inverse phase-coverage weight (1 when the sweep covers whole turns).
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PhaseAssignment {
    pub samples: Vec<PhaseSample>,
    /// Events outside the span of the clock record.
    pub outside_clock: usize,
    /// Multi-click events dropped by the configured policy.
    pub discarded: usize,
    /// Events without a herald or without a cross-station coincidence.
    pub not_coincidence: usize,
}

/// Number of times the sweep `[min, max]` passes through `delta` (mod 2π)
/// per ramp.
pub fn coverage_count(delta: f64, w: &PztWaveform) -> u32 {
    let turn = 2.0 * PI;
    let hi = ((w.phase_max - delta) / turn).floor();
    let lo = ((w.phase_min - delta) / turn).ceil();
    (hi - lo + 1.0).max(0.0) as u32
}

fn covers_whole_turns(w: &PztWaveform) -> bool {
    let turns = w.span() / (2.0 * PI);
    (turns - turns.round()).abs() < 1e-9 && turns.round() >= 1.0
}

/// Assigns each retained event the PZT phase from linear interpolation
/// between its bracketing clock edges.
pub fn phases_from_tags(
    events: &[EventRecord],
    clock: &ClockSignal,
    w: &PztWaveform,
    cfg: &InterferenceConfig,
) -> Result<PhaseAssignment> {
    w.validate()?;
    if clock.edges.len() < 2 {
        return Err(Error::InsufficientData("clock record needs at least two edges".into()));
    }
    if clock.edges.windows(2).any(|p| p[1].time <= p[0].time) {
        return Err(Error::invalid("clock", "edge times must be strictly increasing"));
    }
    let uniform = covers_whole_turns(w);
    let mut out = PhaseAssignment::default();
    for e in events {
        if !e.herald || !e.pattern.is_coincidence() {
            out.not_coincidence += 1;
            continue;
        }
        let Some(sign) = sign_of_pattern(e.pattern, cfg)? else {
            out.discarded += 1;
            continue;
        };
        let t = e.time_tag_ps as f64 * 1e-12;
        // last edge at or before t
        let k = clock.edges.partition_point(|edge| edge.time <= t);
        if k == 0 || k >= clock.edges.len() {
            out.outside_clock += 1;
            continue;
        }
        let (a, b) = (clock.edges[k - 1], clock.edges[k]);
        let frac = (t - a.time) / (b.time - a.time);
        let delta = if a.rising {
            w.phase_min + w.span() * frac
        } else {
            w.phase_max - w.span() * frac
        };
        let weight = if uniform {
            1.0
        } else {
            1.0 / coverage_count(delta, w).max(1) as f64
        };
        out.samples.push(PhaseSample { delta, sign, weight });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorOptions {
    pub min_events: usize,
    pub bootstrap_resamples: usize,
    pub seed: u64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            min_events: 100,
            bootstrap_resamples: 200,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VisibilityPoint {
    pub baseline: f64,
    pub v: Complex64,
    /// Bootstrap standard error of `|v|`.
    pub std_error: f64,
    pub n_events: usize,
    /// `|V|²` with the finite-sample bias `4/N` removed.
    pub v2_unbiased: f64,
}

impl VisibilityPoint {
    /// Standard error of `v2_unbiased` propagated from `std_error`, with
    /// the `2σ²` floor that `|v|²` keeps at zero visibility.
    pub fn v2_error(&self) -> f64 {
        let s2 = self.std_error * self.std_error;
        (4.0 * self.v.norm_sqr() * s2 + 4.0 * s2 * s2).sqrt()
    }
}

/// `2 Σ w s e^{-iδ} / Σ w`.
fn moment(samples: &[PhaseSample], idx: Option<&[usize]>) -> (Complex64, f64, f64) {
    let mut acc = Complex64::new(0.0, 0.0);
    let (mut sw, mut sw2) = (0.0, 0.0);
    let mut add = |s: &PhaseSample| {
        acc += s.weight * s.sign as f64 * Complex64::from_polar(1.0, -s.delta);
        sw += s.weight;
        sw2 += s.weight * s.weight;
    };
    match idx {
        Some(idx) => idx.iter().for_each(|&i| add(&samples[i])),
        None => samples.iter().for_each(add),
    }
    (2.0 * acc / sw, sw, sw2)
}

/// `√2 / √N`: the large-N standard error of `|v|` for small visibilities.
pub fn analytic_std_error(n: usize) -> f64 {
    (2.0 / n as f64).sqrt()
}

pub fn estimate_visibility(samples: &[PhaseSample], opts: &EstimatorOptions) -> Result<VisibilityPoint> {
    let n = samples.len();
    if n < opts.min_events.max(2) {
        return Err(Error::InsufficientData(format!(
            "{n} events, need at least {}",
            opts.min_events.max(2)
        )));
    }
    if samples.iter().any(|s| !(s.delta.is_finite() && s.weight > 0.0 && s.weight.is_finite())) {
        return Err(Error::invalid("samples", "phases must be finite and weights positive"));
    }
    let (v, sw, sw2) = moment(samples, None);
    // E|Σ w z|² = Σ w² + ((Σ w)² − Σ w²) |E z|² with |z| = 1 and V = 2|E z|
    let v2_unbiased = (v.norm_sqr() * sw * sw - 4.0 * sw2) / (sw * sw - sw2);

    let std_error = if opts.bootstrap_resamples >= 2 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut idx = vec![0usize; n];
        let mags: Vec<f64> = (0..opts.bootstrap_resamples)
            .map(|_| {
                for i in idx.iter_mut() {
                    *i = rng.gen_range(0..n);
                }
                moment(samples, Some(&idx)).0.norm()
            })
            .collect();
        let mean = mags.iter().sum::<f64>() / mags.len() as f64;
        (mags.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (mags.len() - 1) as f64).sqrt()
    } else {
        analytic_std_error(n)
    };
    Ok(VisibilityPoint {
        baseline: 0.0,
        v,
        std_error,
        n_events: n,
        v2_unbiased,
    })
}

/// Phases and visibility for one recorded scan point. The bootstrap seed is
/// offset by the point index so points resample independently.
pub fn analyze_acquisition(
    header: &AcquisitionHeader,
    events: &[EventRecord],
    clock: &ClockSignal,
    cfg: &InterferenceConfig,
    opts: &EstimatorOptions,
) -> Result<VisibilityPoint> {
    let assigned = phases_from_tags(events, clock, &header.waveform, cfg)?;
    let opts = EstimatorOptions {
        seed: opts.seed.wrapping_add(header.point_index as u64),
        ..*opts
    };
    let mut point = estimate_visibility(&assigned.samples, &opts)?;
    point.baseline = header.baseline;
    Ok(point)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct G2Estimate {
    pub g2: f64,
    pub std_error: f64,
}

/// `g² = C N / (N_a N_b)` with Poisson error propagation.
pub fn g2_estimate(counts: &SplitCounts) -> Result<G2Estimate> {
    if counts.singles_a == 0 || counts.singles_b == 0 {
        return Err(Error::InsufficientData("g² needs singles on both detectors".into()));
    }
    if counts.pulses == 0 {
        return Err(Error::InsufficientData("no pulses".into()));
    }
    let (c, a, b) = (
        counts.coincidences as f64,
        counts.singles_a as f64,
        counts.singles_b as f64,
    );
    let g2 = c * counts.pulses as f64 / (a * b);
    let rel = if c > 0.0 {
        (1.0 / c + 1.0 / a + 1.0 / b).sqrt()
    } else {
        f64::INFINITY
    };
    Ok(G2Estimate {
        g2,
        std_error: g2 * rel,
    })
}

/// One row of the scan CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub baseline_m: f64,
    pub u: f64,
    pub v_abs: f64,
    pub v_phase_rad: f64,
    pub v_abs_err: f64,
    pub n_events: usize,
    pub v2_unbiased: f64,
}

impl ScanRow {
    pub fn from_point(p: &VisibilityPoint, wavelength: f64) -> Self {
        Self {
            baseline_m: p.baseline,
            u: p.baseline / wavelength,
            v_abs: p.v.norm(),
            v_phase_rad: p.v.arg(),
            v_abs_err: p.std_error,
            n_events: p.n_events,
            v2_unbiased: p.v2_unbiased,
        }
    }

    pub fn to_point(&self) -> VisibilityPoint {
        VisibilityPoint {
            baseline: self.baseline_m,
            v: Complex64::from_polar(self.v_abs, self.v_phase_rad),
            std_error: self.v_abs_err,
            n_events: self.n_events,
            v2_unbiased: self.v2_unbiased,
        }
    }
}

pub fn write_scan_csv(path: &Path, points: &[VisibilityPoint], wavelength: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for p in points {
        w.serialize(ScanRow::from_point(p, wavelength)).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scan_csv(path: &Path) -> Result<Vec<VisibilityPoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize::<ScanRow>()
        .map(|row| row.map(|r| r.to_point()).map_err(|e| csv_error(path, e)))
        .collect()
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format {
                path: path.to_path_buf(),
                reason: format!("{other:?}"),
            },
        }
    } else {
        Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
    }
}
