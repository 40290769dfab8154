//! Gaussian detector model.
//!
//! Everything internal is in the dimensionless readout `r = 2 V / delta_v`:
//! for a qubit in `|0>` (`|1>`) one sample of duration `dt` is normal with
//! mean `+1` (`-1`) and variance `tau / dt`. Volts appear only when reading or
//! writing records and during calibration.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dynamics::{PhysicalParams, NORM_SLACK};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorModel {
    pub delta_v: f64,
    pub tau: f64,
    pub dt: f64,
}

impl DetectorModel {
    pub fn new(delta_v: f64, tau: f64, dt: f64) -> Result<Self> {
        for (name, v) in [("delta_v", delta_v), ("tau", tau), ("dt", dt)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(name, format!("must be positive, got {v}")));
            }
        }
        Ok(DetectorModel { delta_v, tau, dt })
    }

    pub fn from_params(params: &PhysicalParams) -> Self {
        DetectorModel {
            delta_v: params.delta_v,
            tau: params.tau,
            dt: params.dt,
        }
    }

    /// Per-sample variance in volts squared, `delta_v^2 tau / (4 dt)`.
    pub fn sigma2_step(&self) -> f64 {
        self.delta_v * self.delta_v * self.tau / (4.0 * self.dt)
    }

    /// Per-sample variance of `r`, `tau / dt`.
    pub fn variance_r(&self) -> f64 {
        self.tau / self.dt
    }

    /// `ln sqrt(dt / (2 pi tau))`, the per-sample density normalization.
    pub fn log_normalization(&self) -> f64 {
        0.5 * (self.dt / (2.0 * std::f64::consts::PI * self.tau)).ln()
    }
}

fn check_z(z: f64) -> Result<f64> {
    if !z.is_finite() || z.abs() > 1.0 + NORM_SLACK {
        return Err(Error::invalid("z", format!("must lie in [-1, 1], got {z}")));
    }
    Ok(z.clamp(-1.0, 1.0))
}

/// Draws one readout for a qubit with coordinate `z`: the `+1` component is
/// chosen with probability `(1 + z)/2`, then Gaussian noise of variance
/// `tau/dt` is added.
pub fn sample_readout<R: Rng + ?Sized>(z: f64, model: &DetectorModel, rng: &mut R) -> Result<f64> {
    Ok(draw(check_z(z)?, model.variance_r().sqrt(), rng))
}

#[inline]
pub(crate) fn draw<R: Rng + ?Sized>(z: f64, sigma: f64, rng: &mut R) -> f64 {
    let mean = if rng.random::<f64>() < 0.5 * (1.0 + z) { 1.0 } else { -1.0 };
    let noise: f64 = rng.sample(StandardNormal);
    mean + sigma * noise
}

/// Log-density of readout `r` given `z`, including the normalization
/// `sqrt(dt / (2 pi tau))`.
pub fn readout_log_likelihood(r: f64, z: f64, model: &DetectorModel) -> Result<f64> {
    Ok(log_likelihood_unchecked(r, check_z(z)?, model))
}

pub(crate) fn log_likelihood_unchecked(r: f64, z: f64, model: &DetectorModel) -> f64 {
    let a = model.dt / (2.0 * model.tau);
    let w_plus = 0.5 * (1.0 + z);
    let w_minus = 0.5 * (1.0 - z);
    let e_plus = -a * (r - 1.0) * (r - 1.0);
    let e_minus = -a * (r + 1.0) * (r + 1.0);
    let mix = match (w_plus > 0.0, w_minus > 0.0) {
        (true, true) => {
            let (lp, lm) = (w_plus.ln() + e_plus, w_minus.ln() + e_minus);
            let m = lp.max(lm);
            m + ((lp - m).exp() + (lm - m).exp()).ln()
        }
        (true, false) => e_plus,
        (false, true) => e_minus,
        (false, false) => f64::NEG_INFINITY,
    };
    model.log_normalization() + mix
}

/// A uniformly sampled record of dimensionless readouts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutRecord {
    dt: f64,
    values: Vec<f64>,
}

/// Column layout of a record file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordUnits {
    /// `t_seconds,r`
    Dimensionless,
    /// `t_seconds,v_volts`
    Volts,
}

impl ReadoutRecord {
    pub fn new(dt: f64, values: Vec<f64>) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::invalid("dt", format!("must be positive, got {dt}")));
        }
        if values.is_empty() {
            return Err(Error::invalid("record", "must contain at least one sample"));
        }
        Ok(ReadoutRecord { dt, values })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Parses a CSV record with header `t_seconds,r` or `t_seconds,v_volts`.
    /// Voltages are converted with `delta_v`, which is then required. The
    /// sampling interval is inferred from the time column and must be uniform
    /// to 1 ppm.
    pub fn read_csv<R: BufRead>(reader: R, delta_v: Option<f64>, path: Option<&Path>) -> Result<Self> {
        let err = |line: usize, reason: String| Error::Record {
            path: path.map(Path::to_path_buf),
            line,
            reason,
        };
        let mut lines = reader.lines().enumerate();
        let (units, header_line) = loop {
            match lines.next() {
                None => return Err(err(1, "empty file, expected a header".into())),
                Some((i, line)) => {
                    let line = line.map_err(|e| err(i + 1, e.to_string()))?;
                    let trimmed = line.trim();
                    if trimmed.is_empty() || trimmed.starts_with('#') {
                        continue;
                    }
                    let cols: Vec<&str> = trimmed.split(',').map(str::trim).collect();
                    let units = match cols.as_slice() {
                        ["t_seconds", "r"] => RecordUnits::Dimensionless,
                        ["t_seconds", "v_volts"] => RecordUnits::Volts,
                        _ => {
                            return Err(err(
                                i + 1,
                                format!("unrecognized header `{trimmed}`, expected `t_seconds,r` or `t_seconds,v_volts`"),
                            ))
                        }
                    };
                    break (units, i + 1);
                }
            }
        };
        let scale = match (units, delta_v) {
            (RecordUnits::Dimensionless, _) => 1.0,
            (RecordUnits::Volts, Some(dv)) if dv.is_finite() && dv > 0.0 => 2.0 / dv,
            (RecordUnits::Volts, _) => {
                return Err(err(header_line, "voltage record requires a positive delta_v".into()))
            }
        };

        let mut times = Vec::new();
        let mut values = Vec::new();
        let mut line_numbers = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| err(i + 1, e.to_string()))?;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut cols = trimmed.split(',');
            let (Some(t), Some(v), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(err(i + 1, format!("expected 2 columns, got `{trimmed}`")));
            };
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| err(i + 1, format!("invalid {what} `{}`", s.trim())))
            };
            times.push(parse(t, "time")?);
            values.push(parse(v, "value")? * scale);
            line_numbers.push(i + 1);
        }
        if times.len() < 2 {
            return Err(err(
                line_numbers.last().copied().unwrap_or(header_line),
                "need at least two samples to infer dt".into(),
            ));
        }
        let n = times.len();
        let dt = (times[n - 1] - times[0]) / (n - 1) as f64;
        if !(dt > 0.0) {
            return Err(err(line_numbers[n - 1], "time column must increase".into()));
        }
        for k in 1..n {
            let step = times[k] - times[k - 1];
            if (step - dt).abs() > 1e-6 * dt {
                return Err(err(
                    line_numbers[k],
                    format!("non-uniform sampling: step {step:e} s differs from {dt:e} s by more than 1 ppm"),
                ));
            }
        }
        ReadoutRecord::new(dt, values)
    }

    pub fn read_csv_file(path: &Path, delta_v: Option<f64>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(std::io::BufReader::new(file), delta_v, Some(path))
    }

    /// Writes `t_seconds,r` with `t_k = k dt`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t_seconds,r")?;
        for (k, r) in self.values.iter().enumerate() {
            writeln!(out, "{:e},{r:e}", k as f64 * self.dt)?;
        }
        Ok(())
    }
}

/// Result of a detector calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub delta_v: f64,
    pub tau: f64,
    /// `(integration time, separation S = delta_v^2 / sigma^2)` per point.
    pub points: Vec<(f64, f64)>,
}

struct Moments {
    mean: f64,
    var: f64,
}

fn integrated_moments(records: &[Vec<f64>], steps: usize) -> Result<Moments> {
    let n = records.len();
    if n < 2 {
        return Err(Error::Calibration(format!("need at least two records, got {n}")));
    }
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for rec in records {
        if rec.len() < steps {
            return Err(Error::Calibration(format!(
                "record of {} samples is shorter than the integration window of {steps}",
                rec.len()
            )));
        }
        let avg = rec[..steps].iter().sum::<f64>() / steps as f64;
        sum += avg;
        sum_sq += avg * avg;
    }
    let mean = sum / n as f64;
    let var = ((sum_sq - n as f64 * mean * mean) / (n - 1) as f64).max(0.0);
    Ok(Moments { mean, var })
}

/// Peak separation of the time-averaged signal over the first `steps`
/// samples of records prepared in `|0>` (ground) and `|1>` (excited).
pub fn estimate_delta_v(ground: &[Vec<f64>], excited: &[Vec<f64>], steps: usize) -> Result<f64> {
    if steps == 0 {
        return Err(Error::Calibration("integration window must be at least one sample".into()));
    }
    Ok(integrated_moments(ground, steps)?.mean - integrated_moments(excited, steps)?.mean)
}

/// Calibrates `delta_v` and `tau` from voltage records of known preparations.
///
/// For each integration window the time-averaged signals are moment-matched
/// to Gaussians; `S = delta_v^2 / sigma^2` is then regressed through the
/// origin against the integration time, `S = 4 t / tau`. The returned
/// `delta_v` is the window-length-weighted mean of the per-window separations.
pub fn calibrate_tau(
    ground: &[Vec<f64>],
    excited: &[Vec<f64>],
    dt: f64,
    integration_steps: &[usize],
) -> Result<Calibration> {
    let mut windows: Vec<usize> = integration_steps.to_vec();
    windows.sort_unstable();
    windows.dedup();
    if windows.len() < 3 {
        return Err(Error::Calibration(format!(
            "need at least 3 distinct integration times, got {}",
            windows.len()
        )));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::Calibration(format!("dt must be positive, got {dt}")));
    }
    let mut points = Vec::with_capacity(windows.len());
    let mut dv_weighted = 0.0;
    let mut weight = 0.0;
    for &m in &windows {
        if m == 0 {
            return Err(Error::Calibration("integration window must be at least one sample".into()));
        }
        let g = integrated_moments(ground, m)?;
        let e = integrated_moments(excited, m)?;
        let dv = g.mean - e.mean;
        let var = 0.5 * (g.var + e.var);
        if !(var > 0.0) {
            return Err(Error::Calibration(format!(
                "zero signal variance at integration window {m}; tau is unidentifiable"
            )));
        }
        let t = m as f64 * dt;
        points.push((t, dv * dv / var));
        dv_weighted += m as f64 * dv;
        weight += m as f64;
    }
    let slope = points.iter().map(|(t, s)| t * s).sum::<f64>() / points.iter().map(|(t, _)| t * t).sum::<f64>();
    if !(slope.is_finite() && slope > 0.0) {
        return Err(Error::Calibration(format!("non-positive fitted slope {slope:e}")));
    }
    Ok(Calibration {
        delta_v: dv_weighted / weight,
        tau: 4.0 / slope,
        points,
    })
}

/// Synthetic voltage records for a qubit pinned in an eigenstate (`z = +/-1`).
pub fn synthetic_eigenstate_records<R: Rng + ?Sized>(
    z: f64,
    model: &DetectorModel,
    n_records: usize,
    len: usize,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let sigma = model.sigma2_step().sqrt();
    let mean = 0.5 * model.delta_v * z.signum();
    (0..n_records)
        .map(|_| {
            (0..len)
                .map(|_| mean + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}
