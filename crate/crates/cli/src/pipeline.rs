//! In-memory pipeline stages shared by the subcommands.

use qvlbi::estimator::{analyze_acquisition, VisibilityPoint};
use qvlbi::montecarlo::{run_scan, Acquisition, AcquisitionHeader, ClockSignal, EventRecord};
use qvlbi::protocol::{predicted_visibility, OutcomePattern};
use qvlbi::reconstruct::{
    autocorrelation_from_visibility, autocorrelation_zero_padded, fit_autocorrelation, AutocorrCurve, FitReport,
    FitResult,
};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;

/// Tolerances on the recovered slit geometry.
pub const D_TOLERANCE: f64 = 0.02e-3;
pub const W_TOLERANCE: f64 = 0.03e-3;
/// Two fitted σ agree when they differ by at most this many combined
/// standard errors.
pub const SIGMA_AGREEMENT_K: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub baseline_m: f64,
    pub j_abs: f64,
    pub j_phase_rad: f64,
    pub v_closed_form: f64,
    pub v_phase_rad: f64,
    /// Contrast of the (+1, +2) coincidence fringe from the Fock model.
    pub v_fock: f64,
    pub coincidence_probability: f64,
    pub expected_events: f64,
}

fn pp() -> OutcomePattern {
    OutcomePattern::new([true, false, true, false])
}

pub fn predict(cfg: &ExperimentConfig) -> Result<Vec<PredictionRow>, CliError> {
    let physics = cfg.physics();
    let pulses = cfg.scan.pulses_per_point() as f64;
    cfg.baselines()
        .into_iter()
        .map(|b| {
            let pair = physics.coherence_pair(b)?;
            let v = physics.predicted_visibility(b)?;
            let table = physics.fringe_table_for(&pair, physics.two_mode()?)?;
            Ok(PredictionRow {
                baseline_m: b,
                j_abs: pair.j.norm(),
                j_phase_rad: pair.j.arg(),
                v_closed_form: v.norm(),
                v_phase_rad: v.arg(),
                v_fock: table.fringe(pp()).map_or(0.0, |f| f.contrast()),
                coincidence_probability: table.herald_probability * table.mean_coincidence_probability(),
                expected_events: table.expected_events(pulses),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub gamma: f64,
    pub v_closed_form: f64,
    pub v_fock: f64,
}

/// Visibility at zero baseline for `steps + 1` overlaps in `[0, 1]`.
pub fn gamma_sweep(cfg: &ExperimentConfig, steps: usize) -> Result<Vec<GammaRow>, CliError> {
    let steps = steps.max(1);
    (0..=steps)
        .map(|k| {
            let gamma = k as f64 / steps as f64;
            let mut physics = cfg.physics();
            physics.interference.gamma = gamma;
            let pair = physics.coherence_pair(0.0)?;
            let table = physics.fringe_table_for(&pair, physics.two_mode()?)?;
            Ok(GammaRow {
                gamma,
                v_closed_form: predicted_visibility(physics.mean_star, pair.j, &physics.spdc, gamma)?.norm(),
                v_fock: table.fringe(pp()).map_or(0.0, |f| f.contrast()),
            })
        })
        .collect()
}

/// Simulates the configured scan, handing each point to `sink`.
pub fn simulate<F>(cfg: &ExperimentConfig, sink: F) -> Result<(), CliError>
where
    F: FnMut(Acquisition) -> qvlbi::Result<()>,
{
    run_scan(&cfg.scan, &cfg.physics(), sink).map_err(CliError::from)
}

pub fn analyze_point(
    cfg: &ExperimentConfig,
    header: &AcquisitionHeader,
    events: &[EventRecord],
    clock: &ClockSignal,
) -> Result<VisibilityPoint, CliError> {
    analyze_acquisition(header, events, clock, &cfg.interference, &cfg.estimator).map_err(|e| {
        CliError::from(e).with_context(&format!("point {} (baseline {} m)", header.point_index, header.baseline))
    })
}

/// Simulates and analyzes every point without touching the disk.
pub fn simulate_and_analyze(cfg: &ExperimentConfig) -> Result<Vec<VisibilityPoint>, CliError> {
    let mut points = Vec::new();
    let mut failure = None;
    simulate(cfg, |acq| {
        match analyze_point(cfg, &acq.header, &acq.events, &acq.clock) {
            Ok(p) => points.push(p),
            Err(e) => {
                failure.get_or_insert(e);
            }
        }
        Ok(())
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(points),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub curve: AutocorrCurve,
    pub padded: AutocorrCurve,
    pub fit: FitResult,
}

pub fn reconstruct(cfg: &ExperimentConfig, points: &[VisibilityPoint]) -> Result<Reconstruction, CliError> {
    let (lambda, z) = (cfg.source.wavelength, cfg.source.distance);
    let curve = autocorrelation_from_visibility(points, lambda, z)?;
    let padded = autocorrelation_zero_padded(points, lambda, z, cfg.reconstruct.zero_pad)?;
    let fit = fit_autocorrelation(&curve, &cfg.reconstruct.initial, &cfg.reconstruct.options)?;
    Ok(Reconstruction { curve, padded, fit })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub sigma_m: f64,
    pub d_m: f64,
    pub w_m: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub truth: Geometry,
    pub fit: FitReport,
    pub d_error_m: f64,
    pub w_error_m: f64,
    pub d_within_tolerance: bool,
    pub w_within_tolerance: bool,
    pub n_points: usize,
    pub total_events: usize,
    pub max_visibility: f64,
    pub max_predicted_visibility: f64,
}

pub fn report(
    name: &str,
    cfg: &ExperimentConfig,
    points: &[VisibilityPoint],
    fit: &FitResult,
) -> Result<RunReport, CliError> {
    let truth = Geometry {
        sigma_m: cfg.source.gaussian_radius,
        d_m: cfg.source.slit_half_separation,
        w_m: cfg.source.slit_width,
    };
    let physics = cfg.physics();
    let mut max_pred: f64 = 0.0;
    for p in points {
        max_pred = max_pred.max(physics.predicted_visibility(p.baseline)?.norm());
    }
    let d_error_m = fit.params.d - truth.d_m;
    let w_error_m = fit.params.w - truth.w_m;
    Ok(RunReport {
        name: name.into(),
        truth,
        fit: FitReport::from(fit),
        d_error_m,
        w_error_m,
        d_within_tolerance: d_error_m.abs() <= D_TOLERANCE,
        w_within_tolerance: w_error_m.abs() <= W_TOLERANCE,
        n_points: points.len(),
        total_events: points.iter().map(|p| p.n_events).sum(),
        max_visibility: points.iter().map(|p| p.v.norm()).fold(0.0, f64::max),
        max_predicted_visibility: max_pred,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SigmaAgreement {
    pub runs: [String; 2],
    pub sigma_m: [f64; 2],
    pub difference_m: f64,
    pub combined_error_m: Option<f64>,
    pub consistent: bool,
}

/// Compares the fitted beam radius of two runs.
pub fn sigma_agreement(a: &RunReport, b: &RunReport) -> SigmaAgreement {
    let diff = a.fit.sigma_m - b.fit.sigma_m;
    let combined = match (&a.fit.errors, &b.fit.errors) {
        (Some(ea), Some(eb)) => Some(ea.sigma_m.hypot(eb.sigma_m)),
        _ => None,
    };
    SigmaAgreement {
        runs: [a.name.clone(), b.name.clone()],
        sigma_m: [a.fit.sigma_m, b.fit.sigma_m],
        difference_m: diff,
        combined_error_m: combined,
        consistent: combined.is_some_and(|c| diff.abs() <= SIGMA_AGREEMENT_K * c),
    }
}
