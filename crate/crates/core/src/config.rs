//! Run configuration: JSON files, named presets, and validation.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{SelectionMode, DEFAULT_PERCENTILE, HISTOGRAM_BINS};
use crate::dynamics::{BlochState, PhysicalParams, Propagator};
use crate::error::{Error, Result};
use crate::mlp::{default_deltas, ShootOptions};
use crate::simulator::MatrixFormat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    pub x: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionConfig {
    pub x_f: f64,
    pub z_f: f64,
    pub window: f64,
    #[serde(default)]
    pub mode: SelectionMode,
}

/// Everything a command needs. All quantities are SI; `omega_hz` is the
/// Rabi frequency divided by 2 pi and `gamma` the ensemble dephasing rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub omega_hz: f64,
    pub tau: f64,
    pub gamma: f64,
    pub dt: f64,
    pub delta_v: f64,
    pub initial: InitialState,
    pub duration: f64,
    pub n: usize,
    pub seed: u64,
    pub propagator: Propagator,
    pub matrix_format: MatrixFormat,
    pub selection: SelectionConfig,
    /// Selection times and boundary-value horizons, s.
    pub horizons: Vec<f64>,
    pub percentile: f64,
    /// Centered moving-average width for weak functions, samples.
    pub smoothing: usize,
    pub histogram_bins: usize,
    pub solver: ShootOptions,
    pub variational: bool,
    /// Offsets for the variational check, 1/µs.
    pub deltas: Vec<[f64; 2]>,
    #[serde(skip_serializing)]
    pub workers: Option<usize>,
    #[serde(skip_serializing)]
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Fig2c)
    }
}

/// Named parameter sets, one per reproduced figure or panel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Fig2c,
    Fig3,
    Fig4,
    FigS2,
    FigS3,
    FigS4a,
    FigS4b,
    FigS4c,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::Fig2c,
        Preset::Fig3,
        Preset::Fig4,
        Preset::FigS2,
        Preset::FigS3,
        Preset::FigS4a,
        Preset::FigS4b,
        Preset::FigS4c,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig2c => "fig2c",
            Preset::Fig3 => "fig3",
            Preset::Fig4 => "fig4",
            Preset::FigS2 => "figS2",
            Preset::FigS3 => "figS3",
            Preset::FigS4a => "figS4a",
            Preset::FigS4b => "figS4b",
            Preset::FigS4c => "figS4c",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .iter()
            .copied()
            .find(|p| p.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
                Error::invalid("preset", format!("unknown `{s}`, expected one of {}", names.join(", ")))
            })
    }
}

const FIG4_HORIZONS: [f64; 3] = [0.464e-6, 0.944e-6, 1.424e-6];

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let base = RunConfig {
            omega_hz: 1.08e6,
            tau: 315e-9,
            gamma: 3.85e6,
            dt: 16e-9,
            delta_v: 1.0,
            initial: InitialState { x: 0.88, z: 0.0 },
            duration: 1.424e-6,
            n: 100_000,
            seed: 1,
            propagator: Propagator::Symmetric,
            matrix_format: MatrixFormat::F64Le,
            selection: SelectionConfig {
                x_f: -0.29,
                z_f: 0.7,
                window: 0.08,
                mode: SelectionMode::Both,
            },
            horizons: vec![1.424e-6],
            percentile: DEFAULT_PERCENTILE,
            smoothing: 0,
            histogram_bins: HISTOGRAM_BINS,
            solver: ShootOptions::default(),
            variational: false,
            deltas: default_deltas(),
            workers: None,
            out: None,
        };
        let undriven_slow = RunConfig {
            omega_hz: 0.0,
            tau: 1.25e-6,
            gamma: 0.94e6,
            ..base.clone()
        };
        match p {
            Preset::Fig2c => base,
            Preset::Fig3 => RunConfig {
                initial: InitialState { x: 0.97, z: 0.0 },
                selection: SelectionConfig {
                    x_f: 0.23,
                    z_f: -0.85,
                    window: 0.03,
                    mode: SelectionMode::Both,
                },
                solver: ShootOptions::default().with_step(1e-10),
                ..undriven_slow
            },
            Preset::Fig4 => RunConfig {
                horizons: FIG4_HORIZONS.to_vec(),
                ..base
            },
            Preset::FigS2 => RunConfig {
                selection: SelectionConfig {
                    x_f: -0.683,
                    z_f: -0.227,
                    window: 0.03,
                    mode: SelectionMode::Both,
                },
                duration: 0.464e-6,
                horizons: vec![0.464e-6],
                variational: true,
                solver: ShootOptions::default().with_step(1e-10),
                ..base
            },
            Preset::FigS3 => RunConfig {
                initial: InitialState { x: 1.0, z: 0.0 },
                duration: 4.992e-6,
                horizons: vec![],
                n: 20_000,
                ..undriven_slow
            },
            Preset::FigS4a => RunConfig {
                omega_hz: 1.08e6,
                tau: 1.25e-6,
                gamma: 0.94e6,
                ..figs4_common(&base, [-0.78, 0.7, -0.73])
            },
            Preset::FigS4b => figs4_common(&base, [-0.69, 0.5, -0.73]),
            Preset::FigS4c => RunConfig {
                omega_hz: 0.58e6,
                ..figs4_common(&base, [-0.35, -0.5, -0.56])
            },
        }
    }

    /// Builds a configuration from a preset, a JSON document laid over it,
    /// and finally explicit overrides.
    pub fn layered(preset: Preset, file: Option<&Path>) -> Result<Self> {
        let mut value = serde_json::to_value(RunConfig::preset(preset)).expect("config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let overlay: Value = serde_json::from_str(&text).map_err(|e| Error::Json {
                path: path.to_path_buf(),
                source: e,
            })?;
            if !overlay.is_object() {
                return Err(Error::invalid("config", format!("{} must hold a JSON object", path.display())));
            }
            merge(&mut value, overlay);
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Json {
            path: file.map(Path::to_path_buf).unwrap_or_default(),
            source: e,
        })?;
        Ok(cfg)
    }

    pub fn params(&self) -> Result<PhysicalParams> {
        let mut p = PhysicalParams::from_rabi_hz(self.omega_hz, self.tau, self.gamma, self.dt)?;
        p.delta_v = self.delta_v;
        p.validated()
    }

    pub fn initial_state(&self) -> Result<BlochState> {
        BlochState::new(self.initial.x, self.initial.z).map_err(|_| {
            Error::invalid(
                "initial",
                format!("({}, {}) lies outside the Bloch disk", self.initial.x, self.initial.z),
            )
        })
    }

    /// Checks every field that commands rely on, naming the first offender.
    pub fn validate(&self) -> Result<()> {
        self.params()?;
        self.initial_state()?;
        if !(self.duration.is_finite() && self.duration >= 0.0) {
            return Err(Error::invalid("duration", format!("must be non-negative, got {}", self.duration)));
        }
        if self.n == 0 {
            return Err(Error::invalid("n", "need at least one trajectory"));
        }
        if !(self.selection.window.is_finite() && self.selection.window > 0.0) {
            return Err(Error::invalid(
                "selection.window",
                format!("must be positive, got {}", self.selection.window),
            ));
        }
        if !(1.0..=20.0).contains(&self.percentile) {
            return Err(Error::invalid(
                "percentile",
                format!("must lie in [1, 20], got {}", self.percentile),
            ));
        }
        if self.histogram_bins < 2 {
            return Err(Error::invalid("histogram_bins", "need at least 2"));
        }
        for (i, h) in self.horizons.iter().enumerate() {
            if !(h.is_finite() && *h > 0.0) {
                return Err(Error::invalid(format!("horizons[{i}]"), format!("must be positive, got {h}")));
            }
        }
        if !(self.solver.step.is_finite() && self.solver.step > 0.0) {
            return Err(Error::invalid("solver.step", "must be positive"));
        }
        if self.workers == Some(0) {
            return Err(Error::invalid("workers", "must be at least 1"));
        }
        Ok(())
    }
}

fn figs4_common(base: &RunConfig, x_targets: [f64; 3]) -> RunConfig {
    RunConfig {
        selection: SelectionConfig {
            x_f: x_targets[0],
            z_f: -0.5,
            window: 0.03,
            mode: SelectionMode::ZOnly,
        },
        horizons: FIG4_HORIZONS.to_vec(),
        ..base.clone()
    }
}

/// Final `x` per horizon for the extended-results panels.
pub fn figs4_x_targets(p: Preset) -> Option<[f64; 3]> {
    match p {
        Preset::FigS4a => Some([-0.78, 0.7, -0.73]),
        Preset::FigS4b => Some([-0.69, 0.5, -0.73]),
        Preset::FigS4c => Some([-0.35, -0.5, -0.56]),
        _ => None,
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn presets_are_valid() {
        for p in Preset::ALL {
            RunConfig::preset(p).validate().unwrap();
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("fig9".parse::<Preset>().is_err());
    }

    #[test]
    fn preset_values() {
        let c = RunConfig::preset(Preset::Fig4);
        let p = c.params().unwrap();
        assert!((p.eta_tot() - 0.412).abs() < 1e-3);
        assert_eq!(c.horizons, FIG4_HORIZONS.to_vec());
        let c = RunConfig::preset(Preset::Fig3);
        assert_eq!(c.params().unwrap().omega, 0.0);
        assert_eq!(c.selection.z_f, -0.85);
    }

    #[test]
    fn file_overrides_preset() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"n": 12, "selection": {{"window": 0.05}}, "solver": {{"step": 2e-9}}}}"#).unwrap();
        let c = RunConfig::layered(Preset::Fig4, Some(f.path())).unwrap();
        assert_eq!(c.n, 12);
        assert_eq!(c.selection.window, 0.05);
        assert_eq!(c.selection.z_f, 0.7);
        assert_eq!(c.solver.step, 2e-9);
        assert_eq!(c.solver.grid.len(), 5);
    }

    #[test]
    fn unknown_and_invalid_fields_are_named() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, r#"{{"omga_hz": 1.0}}"#).unwrap();
        let e = RunConfig::layered(Preset::Fig2c, Some(f.path())).unwrap_err();
        assert!(e.to_string().contains("omga_hz"), "{e}");

        let c = RunConfig {
            tau: -1.0,
            ..RunConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("`tau`"));
        let c = RunConfig {
            gamma: 1.0,
            ..RunConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("`gamma`"));
        let c = RunConfig {
            percentile: 30.0,
            ..RunConfig::default()
        };
        assert!(c.validate().unwrap_err().to_string().contains("percentile"));
    }

    #[test]
    fn workers_and_out_stay_out_of_manifests() {
        let c = RunConfig {
            workers: Some(3),
            out: Some("x".into()),
            ..RunConfig::default()
        };
        let v = serde_json::to_value(&c).unwrap();
        assert!(v.get("workers").is_none());
        assert!(v.get("out").is_none());
        let back: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(back.workers, None);
    }
}
