//! Experiment configuration file (TOML).

use std::path::{Path, PathBuf};

use qvlbi::estimator::EstimatorOptions;
use qvlbi::fock::FockConfig;
use qvlbi::montecarlo::{Baselines, ScanConfig};
use qvlbi::optics::{CoherencePair, SourceModel, SpdcModel};
use qvlbi::protocol::{InterferenceConfig, Physics};
use qvlbi::reconstruct::{FitOptions, FitParams};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const CONFIG_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StarlightSettings {
    /// Mean photon number per pulse collected by each telescope.
    pub mean_photons: f64,
}

impl Default for StarlightSettings {
    fn default() -> Self {
        Self {
            mean_photons: CoherencePair::DEFAULT_MEAN_PHOTONS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FockSettings {
    pub n_max: usize,
}

impl Default for FockSettings {
    fn default() -> Self {
        Self {
            n_max: FockConfig::DEFAULT_N_MAX,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructSettings {
    pub initial: FitParams,
    pub options: FitOptions,
    /// Zero-padding factor for the plotted autocorrelation.
    pub zero_pad: usize,
}

impl Default for ReconstructSettings {
    fn default() -> Self {
        Self {
            initial: FitParams::default(),
            options: FitOptions::default(),
            zero_pad: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub source: SourceModel,
    #[serde(default)]
    pub starlight: StarlightSettings,
    #[serde(default)]
    pub spdc: SpdcModel,
    #[serde(default)]
    pub interference: InterferenceConfig,
    #[serde(default)]
    pub fock: FockSettings,
    #[serde(default)]
    pub scan: ScanConfig,
    #[serde(default)]
    pub estimator: EstimatorOptions,
    #[serde(default)]
    pub reconstruct: ReconstructSettings,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION.into(),
            output_dir: default_output_dir(),
            source: SourceModel::default(),
            starlight: StarlightSettings::default(),
            spdc: SpdcModel::default(),
            interference: InterferenceConfig::default(),
            fock: FockSettings::default(),
            scan: ScanConfig::default(),
            estimator: EstimatorOptions::default(),
            reconstruct: ReconstructSettings::default(),
        }
    }
}

/// Command-line overrides applied on top of a loaded file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub points: Option<usize>,
    pub duration: Option<f64>,
}

fn section(name: &str, r: qvlbi::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| CliError::Config(format!("[{name}] {e}")))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version `{}` (expected `{CONFIG_VERSION}`)",
                self.version
            )));
        }
        section("source", self.source.validate())?;
        let m = self.starlight.mean_photons;
        if !(m.is_finite() && (0.0..=0.5).contains(&m)) {
            return Err(CliError::Config(format!(
                "[starlight] mean_photons must lie in [0, 0.5], got {m}"
            )));
        }
        section("spdc", self.spdc.validate())?;
        section("interference", self.interference.validate())?;
        section("fock", FockConfig::new(4, self.fock.n_max).map(|_| ()))?;
        section("scan", self.scan.validate())?;
        // TOML integers are signed 64-bit
        for (sec, field, seed) in [("scan", "rng_seed", self.scan.rng_seed), ("estimator", "seed", self.estimator.seed)] {
            if seed > i64::MAX as u64 {
                return Err(CliError::Config(format!("[{sec}] {field} must not exceed {}, got {seed}", i64::MAX)));
            }
        }
        if self.reconstruct.zero_pad == 0 {
            return Err(CliError::Config("[reconstruct] zero_pad must be at least 1".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) -> Result<(), CliError> {
        if let Some(seed) = o.seed {
            self.scan.rng_seed = seed;
        }
        if let Some(out) = &o.out {
            self.output_dir = out.clone();
        }
        if let Some(n) = o.points {
            if n == 0 {
                return Err(CliError::Config("--points must be at least 1".into()));
            }
            self.scan.baselines = self.scan.baselines.truncated(n);
        }
        if let Some(d) = o.duration {
            self.scan.duration_per_point = d;
        }
        self.validate()
    }

    pub fn physics(&self) -> Physics {
        Physics {
            source: self.source,
            mean_star: self.starlight.mean_photons,
            spdc: self.spdc,
            interference: self.interference,
            n_max: self.fock.n_max,
        }
    }

    pub fn baselines(&self) -> Vec<f64> {
        self.scan.baselines.points()
    }

    /// A 61-point, 0.1 mm-step scan of the given slit half-separation.
    pub fn desk_scale(slit_half_separation: f64) -> Self {
        let mut cfg = Self::default();
        cfg.source.slit_half_separation = slit_half_separation;
        cfg.scan.baselines = Baselines::Grid {
            start: 0.0,
            step: 1e-4,
            count: 61,
        };
        cfg.reconstruct.initial.d = slit_half_separation * 1.05;
        cfg
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_through_toml() {
        let mut cfg = ExperimentConfig::desk_scale(1e-3);
        cfg.scan.rng_seed = 12345;
        cfg.interference.gamma = 0.37;
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        let default = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&default.to_toml().unwrap()).unwrap(), default);
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("version = \"1\"\n[source]\nslit_half_separation = 1e-3\n").unwrap();
        assert_eq!(cfg.source.slit_half_separation, 1e-3);
        assert_eq!(cfg.source.slit_width, 0.5e-3);
        assert_eq!(cfg.scan, ScanConfig::default());
    }

    #[test]
    fn field_errors_name_the_section() {
        let err = ExperimentConfig::from_toml("version = \"1\"\n[spdc]\nheralding_efficiency = 1.5\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[spdc]") && msg.contains("heralding_efficiency"), "{msg}");
        assert_eq!(err.exit_code(), 2);

        let err = ExperimentConfig::from_toml("version = \"1\"\n[source]\nslit_widht = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("slit_widht"));
        assert!(ExperimentConfig::from_toml("[source]\n").is_err());
        assert!(ExperimentConfig::from_toml("version = \"0\"\n").is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.scan.rng_seed = u64::MAX;
        assert!(cfg.validate().unwrap_err().to_string().contains("rng_seed"));
    }

    #[test]
    fn overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            seed: Some(9),
            out: Some("elsewhere".into()),
            points: Some(3),
            duration: Some(0.1),
        })
        .unwrap();
        assert_eq!(cfg.scan.rng_seed, 9);
        assert_eq!(cfg.baselines().len(), 3);
        assert_eq!(cfg.scan.duration_per_point, 0.1);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
        assert!(cfg
            .apply(&Overrides {
                duration: Some(-1.0),
                ..Overrides::default()
            })
            .is_err());
    }
}
