//! Subcommands: each reads a resolved config and writes into its output
//! directory.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use qvlbi::estimator::{write_scan_csv, VisibilityPoint};
use qvlbi::montecarlo::{point_file_names, read_clock, read_events, write_acquisition};
use qvlbi::reconstruct::{write_autocorrelation_csv, write_fit_json, FitReport};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, CONFIG_VERSION};
use crate::error::{io_err, CliError};
use crate::pipeline::{self, RunReport, SigmaAgreement};

pub const PREDICT_CSV: &str = "predict.csv";
pub const GAMMA_CSV: &str = "gamma_sweep.csv";
pub const EVENTS_DIR: &str = "events";
pub const SCAN_CSV: &str = "scan.csv";
pub const AUTOCORR_CSV: &str = "autocorrelation.csv";
pub const AUTOCORR_PADDED_CSV: &str = "autocorrelation_padded.csv";
pub const FIT_JSON: &str = "fit.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const REPORT_JSON: &str = "report.json";
pub const RESOLVED_CONFIG: &str = "config.toml";

const GAMMA_STEPS: usize = 10;

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), value).map_err(|e| io_err(path, e))
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let path = dir.join(RESOLVED_CONFIG);
    fs::write(&path, cfg.to_toml()?).map_err(|e| io_err(&path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutcome {
    pub max_visibility: f64,
    pub rows: usize,
}

pub fn cmd_predict(cfg: &ExperimentConfig) -> Result<PredictOutcome, CliError> {
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let rows = pipeline::predict(cfg)?;
    write_csv(&dir.join(PREDICT_CSV), &rows)?;
    write_csv(&dir.join(GAMMA_CSV), &pipeline::gamma_sweep(cfg, GAMMA_STEPS)?)?;
    let max_visibility = rows.iter().map(|r| r.v_closed_form).fold(0.0, f64::max);
    println!(
        "predicted max |v| = {max_visibility:.4} over {} baselines; wrote {}",
        rows.len(),
        dir.join(PREDICT_CSV).display()
    );
    Ok(PredictOutcome {
        max_visibility,
        rows: rows.len(),
    })
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let events_dir = cfg.output_dir.join(EVENTS_DIR);
    create_dir(&events_dir)?;
    write_config(cfg, &cfg.output_dir)?;
    let total = cfg.baselines().len();
    pipeline::simulate(cfg, |acq| {
        write_acquisition(&events_dir, &acq)?;
        eprintln!(
            "point {}/{total}: baseline {:.3} mm, {} events (expected {:.0})",
            acq.header.point_index + 1,
            acq.header.baseline * 1e3,
            acq.events.len(),
            acq.expected_events
        );
        Ok(())
    })?;
    Ok(events_dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub version: String,
    pub tool_version: String,
    pub n_points: usize,
    pub total_events: usize,
    pub files: Vec<String>,
    pub fit: Option<FitReport>,
    pub reconstruction_error: Option<String>,
}

/// Point indices found in an events directory, in order.
fn point_indices(dir: &Path) -> Result<Vec<u32>, CliError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| io_err(dir, e))? {
        let name = entry.map_err(|e| io_err(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(k) = name
            .strip_prefix("point_")
            .and_then(|s| s.strip_suffix(".events"))
            .and_then(|s| s.parse::<u32>().ok())
        {
            out.push(k);
        }
    }
    out.sort_unstable();
    if out.is_empty() {
        return Err(CliError::Io(format!("{}: no point_*.events files", dir.display())));
    }
    Ok(out)
}

pub fn load_points(cfg: &ExperimentConfig, events_dir: &Path) -> Result<Vec<VisibilityPoint>, CliError> {
    let mut points = Vec::new();
    for k in point_indices(events_dir)? {
        let (ev, ck) = point_file_names(k);
        let (header, events) = read_events(&events_dir.join(&ev))?;
        let (clock_header, clock) = read_clock(&events_dir.join(&ck))?;
        if clock_header != header {
            return Err(CliError::Io(format!(
                "{}: header does not match {ev}",
                events_dir.join(&ck).display()
            )));
        }
        points.push(pipeline::analyze_point(cfg, &header, &events, &clock)?);
    }
    Ok(points)
}

/// Writes the autocorrelation and fit files for `points`.
fn write_reconstruction(cfg: &ExperimentConfig, points: &[VisibilityPoint]) -> Result<pipeline::Reconstruction, CliError> {
    let dir = &cfg.output_dir;
    let rec = pipeline::reconstruct(cfg, points)?;
    let z = cfg.source.distance;
    write_autocorrelation_csv(&dir.join(AUTOCORR_CSV), &rec.curve, z, Some(&rec.fit))?;
    write_autocorrelation_csv(&dir.join(AUTOCORR_PADDED_CSV), &rec.padded, z, Some(&rec.fit))?;
    write_fit_json(&dir.join(FIT_JSON), &rec.fit)?;
    Ok(rec)
}

/// Scan CSV always; autocorrelation and fit when the scan supports them.
/// A failed reconstruction is reported in the summary, not as an error.
pub fn cmd_analyze(cfg: &ExperimentConfig, events_dir: &Path) -> Result<AnalysisSummary, CliError> {
    let dir = &cfg.output_dir;
    create_dir(dir)?;
    let points = load_points(cfg, events_dir)?;
    write_scan_csv(&dir.join(SCAN_CSV), &points, cfg.source.wavelength)?;
    let mut files = vec![SCAN_CSV.to_string()];
    let (fit, reconstruction_error) = match write_reconstruction(cfg, &points) {
        Ok(rec) => {
            files.extend([AUTOCORR_CSV, AUTOCORR_PADDED_CSV, FIT_JSON].map(String::from));
            (Some(FitReport::from(&rec.fit)), None)
        }
        Err(CliError::Io(m)) => return Err(CliError::Io(m)),
        Err(e) => {
            eprintln!("warning: no source reconstruction: {e}");
            (None, Some(e.to_string()))
        }
    };
    files.push(SUMMARY_JSON.into());
    let summary = AnalysisSummary {
        version: CONFIG_VERSION.into(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        n_points: points.len(),
        total_events: points.iter().map(|p| p.n_events).sum(),
        files,
        fit,
        reconstruction_error,
    };
    write_json(&dir.join(SUMMARY_JSON), &summary)?;
    match &summary.fit {
        Some(f) => println!(
            "{} points, {} events; fit σ = {:.3} mm, d = {:.4} mm, w = {:.4} mm",
            summary.n_points,
            summary.total_events,
            f.sigma_m * 1e3,
            f.d_m * 1e3,
            f.w_m * 1e3
        ),
        None => println!("{} points, {} events", summary.n_points, summary.total_events),
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinedReport {
    pub runs: Vec<RunReport>,
    pub sigma_agreement: Vec<SigmaAgreement>,
}

/// predict → simulate → analyze → report for one config.
pub fn run_one(name: &str, cfg: &ExperimentConfig) -> Result<RunReport, CliError> {
    cmd_predict(cfg)?;
    let events = cmd_simulate(cfg)?;
    let points = load_points(cfg, &events)?;
    write_scan_csv(&cfg.output_dir.join(SCAN_CSV), &points, cfg.source.wavelength)?;
    let rec = write_reconstruction(cfg, &points)?;
    let report = pipeline::report(name, cfg, &points, &rec.fit)?;
    write_json(&cfg.output_dir.join(REPORT_JSON), &report)?;
    println!(
        "{name}: d = {:.4} mm (truth {:.4}, {}), w = {:.4} mm (truth {:.4}, {}), σ = {:.3} mm",
        report.fit.d_m * 1e3,
        report.truth.d_m * 1e3,
        if report.d_within_tolerance { "ok" } else { "OUT OF TOLERANCE" },
        report.fit.w_m * 1e3,
        report.truth.w_m * 1e3,
        if report.w_within_tolerance { "ok" } else { "OUT OF TOLERANCE" },
        report.fit.sigma_m * 1e3,
    );
    Ok(report)
}

/// Runs each named config; with several, also compares every pair of
/// fitted beam radii and writes the combined report to `report_dir`.
pub fn cmd_run(configs: &[(String, ExperimentConfig)], report_dir: &Path) -> Result<CombinedReport, CliError> {
    let mut runs = Vec::new();
    for (name, cfg) in configs {
        runs.push(run_one(name, cfg)?);
    }
    let mut sigma_agreement = Vec::new();
    for i in 0..runs.len() {
        for j in i + 1..runs.len() {
            let a = pipeline::sigma_agreement(&runs[i], &runs[j]);
            println!(
                "σ {} vs {}: {:.3} vs {:.3} mm, {}",
                a.runs[0],
                a.runs[1],
                a.sigma_m[0] * 1e3,
                a.sigma_m[1] * 1e3,
                if a.consistent { "consistent" } else { "INCONSISTENT" }
            );
            sigma_agreement.push(a);
        }
    }
    let combined = CombinedReport { runs, sigma_agreement };
    if configs.len() > 1 {
        create_dir(report_dir)?;
        write_json(&report_dir.join(REPORT_JSON), &combined)?;
    }
    Ok(combined)
}
