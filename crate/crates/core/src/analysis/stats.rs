use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::postselect::SubEnsemble;
use crate::error::{Error, Result};
use crate::mlp::path::trajectory_log_likelihood;
use crate::simulator::TrajectorySet;

pub const MIN_MLP_MEMBERS: usize = 20;
pub const DEFAULT_PERCENTILE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinate {
    X,
    Z,
}

/// A pointwise path estimate with its spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    pub times: Vec<f64>,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub x_stderr: Vec<f64>,
    pub z_stderr: Vec<f64>,
    /// Trajectories contributing to each point.
    pub n: usize,
    /// Lowest log-likelihood among contributing trajectories, when ranked.
    pub threshold: Option<f64>,
}

impl PathEstimate {
    pub fn coordinate(&self, c: Coordinate) -> (&[f64], &[f64]) {
        match c {
            Coordinate::X => (&self.x, &self.x_stderr),
            Coordinate::Z => (&self.z, &self.z_stderr),
        }
    }

    /// Writes one coordinate as `t,value,stderr,n`.
    pub fn write_csv<W: Write>(&self, c: Coordinate, mut out: W) -> std::io::Result<()> {
        let (v, se) = self.coordinate(c);
        writeln!(out, "t,value,stderr,n")?;
        for k in 0..self.times.len() {
            writeln!(out, "{:e},{:e},{:e},{}", self.times[k], v[k], se[k], self.n)?;
        }
        Ok(())
    }

    /// `sqrt(mean_k (dx_k^2 + dz_k^2))` against reference samples on the
    /// same grid.
    pub fn rms_distance(&self, x: &[f64], z: &[f64]) -> Result<f64> {
        if x.len() != self.x.len() || z.len() != self.z.len() {
            return Err(Error::invalid(
                "reference",
                format!("has {} points, path has {}", x.len(), self.x.len()),
            ));
        }
        let sum: f64 = (0..x.len())
            .map(|k| (self.x[k] - x[k]).powi(2) + (self.z[k] - z[k]).powi(2))
            .sum();
        Ok((sum / x.len() as f64).sqrt())
    }
}

fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Pointwise average of the most likely `percentile` percent of the
/// sub-ensemble, ranked by the log-likelihood of each readout record.
pub fn empirical_mlp(sub: &SubEnsemble, percentile: f64) -> Result<PathEstimate> {
    if !(1.0..=20.0).contains(&percentile) {
        return Err(Error::invalid(
            "percentile",
            format!("must lie in [1, 20], got {percentile}"),
        ));
    }
    if sub.len() < MIN_MLP_MEMBERS {
        return Err(Error::InsufficientStatistics {
            what: "post-selected sub-ensemble for the empirical most likely path".into(),
            needed: MIN_MLP_MEMBERS,
            got: sub.len(),
        });
    }
    let ll: Vec<f64> = sub.trajectories.par_iter().map(trajectory_log_likelihood).collect();
    let mut order: Vec<usize> = (0..sub.len()).collect();
    order.sort_by(|&a, &b| ll[b].total_cmp(&ll[a]).then(a.cmp(&b)));
    let keep = ((percentile / 100.0 * sub.len() as f64).ceil() as usize).max(1);
    let top = &order[..keep];
    let mut est = pointwise(sub, top, |v| mean_and_stderr(v));
    est.threshold = Some(ll[top[keep - 1]]);
    Ok(est)
}

fn pointwise(sub: &SubEnsemble, members: &[usize], stat: impl Fn(&mut [f64]) -> (f64, f64)) -> PathEstimate {
    let n_t = sub.k_f + 1;
    let mut est = PathEstimate {
        times: sub.times(),
        x: Vec::with_capacity(n_t),
        z: Vec::with_capacity(n_t),
        x_stderr: Vec::with_capacity(n_t),
        z_stderr: Vec::with_capacity(n_t),
        n: members.len(),
        threshold: None,
    };
    let mut xs = vec![0.0; members.len()];
    let mut zs = vec![0.0; members.len()];
    for k in 0..n_t {
        for (j, &i) in members.iter().enumerate() {
            let q = sub.trajectories[i].states[k];
            xs[j] = q.x;
            zs[j] = q.z;
        }
        let (mx, sx) = stat(&mut xs);
        let (mz, sz) = stat(&mut zs);
        est.x.push(mx);
        est.z.push(mz);
        est.x_stderr.push(sx);
        est.z_stderr.push(sz);
    }
    est
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Path of per-time medians of `x` and `z`. The spread columns hold the
/// median absolute deviation.
pub fn median_path(sub: &SubEnsemble) -> Result<PathEstimate> {
    if sub.is_empty() {
        return Err(Error::InsufficientStatistics {
            what: "sub-ensemble for the median path".into(),
            needed: 1,
            got: 0,
        });
    }
    let members: Vec<usize> = (0..sub.len()).collect();
    Ok(pointwise(sub, &members, |v| {
        let m = median(v);
        let mut dev: Vec<f64> = v.iter().map(|x| (x - m).abs()).collect();
        (m, median(&mut dev))
    }))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Counts,
    /// Each time column divided by its total.
    PerTimeFraction,
}

/// Counts of one Bloch coordinate per (time, value) cell. Values outside the
/// range land in the edge bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram2D {
    pub coordinate: Coordinate,
    pub time_edges: Vec<f64>,
    pub value_edges: Vec<f64>,
    /// `counts[time][value]`.
    pub counts: Vec<Vec<u64>>,
}

pub const HISTOGRAM_RANGE: (f64, f64) = (-1.05, 1.05);
pub const HISTOGRAM_BINS: usize = 50;

impl Histogram2D {
    fn empty(coordinate: Coordinate, n_t: usize, dt: f64, bins: usize) -> Self {
        let (lo, hi) = HISTOGRAM_RANGE;
        Histogram2D {
            coordinate,
            time_edges: (0..=n_t).map(|k| (k as f64 - 0.5) * dt).collect(),
            value_edges: (0..=bins).map(|b| lo + (hi - lo) * b as f64 / bins as f64).collect(),
            counts: vec![vec![0; bins]; n_t],
        }
    }

    fn bin(&self, v: f64) -> usize {
        let (lo, hi) = HISTOGRAM_RANGE;
        let bins = self.value_edges.len() - 1;
        let b = ((v - lo) / (hi - lo) * bins as f64).floor();
        if b.is_nan() {
            0
        } else {
            (b.max(0.0) as usize).min(bins - 1)
        }
    }

    fn add(&mut self, other: &Histogram2D) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn column_total(&self, k: usize) -> u64 {
        self.counts[k].iter().sum()
    }

    pub fn values(&self, norm: Normalization) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|col| {
                let total: u64 = col.iter().sum();
                col.iter()
                    .map(|&c| match norm {
                        Normalization::Counts => c as f64,
                        Normalization::PerTimeFraction if total > 0 => c as f64 / total as f64,
                        Normalization::PerTimeFraction => 0.0,
                    })
                    .collect()
            })
            .collect()
    }

    /// First row: `value_edges` then the value bin edges. Second row:
    /// `time_edges` then the time bin edges. Then one row per time bin.
    pub fn write_csv<W: Write>(&self, norm: Normalization, mut out: W) -> std::io::Result<()> {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        writeln!(out, "value_edges,{}", join(&self.value_edges))?;
        writeln!(out, "time_edges,{}", join(&self.time_edges))?;
        for (k, row) in self.values(norm).iter().enumerate() {
            writeln!(out, "{k},{}", join(row))?;
        }
        Ok(())
    }
}

fn check_bins(bins: usize) -> Result<()> {
    if bins < 2 {
        return Err(Error::invalid("bins", format!("need at least 2, got {bins}")));
    }
    Ok(())
}

/// Histogram of a sub-ensemble.
pub fn histogram(sub: &SubEnsemble, coordinate: Coordinate, bins: usize) -> Result<Histogram2D> {
    check_bins(bins)?;
    let mut h = Histogram2D::empty(coordinate, sub.k_f + 1, sub.params.dt, bins);
    for t in &sub.trajectories {
        for (k, q) in t.states.iter().enumerate() {
            let v = match coordinate {
                Coordinate::X => q.x,
                Coordinate::Z => q.z,
            };
            let b = h.bin(v);
            h.counts[k][b] += 1;
        }
    }
    Ok(h)
}

/// Histogram of a full ensemble, accumulated in fixed blocks without
/// materializing every trajectory at once.
pub fn histogram_set(set: &TrajectorySet, coordinate: Coordinate, bins: usize) -> Result<Histogram2D> {
    check_bins(bins)?;
    const BLOCK: usize = 512;
    let n_t = set.n_steps() + 1;
    let dt = set.params().dt;
    let parts: Vec<Histogram2D> = (0..set.len().div_ceil(BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut h = Histogram2D::empty(coordinate, n_t, dt, bins);
            for i in b * BLOCK..((b + 1) * BLOCK).min(set.len()) {
                for (k, q) in set.trajectory(i).states.iter().enumerate() {
                    let v = match coordinate {
                        Coordinate::X => q.x,
                        Coordinate::Z => q.z,
                    };
                    let bin = h.bin(v);
                    h.counts[k][bin] += 1;
                }
            }
            h
        })
        .collect();
    let mut h = Histogram2D::empty(coordinate, n_t, dt, bins);
    for p in &parts {
        h.add(p);
    }
    Ok(h)
}

/// Conditioned average of the dimensionless readout. `times` are the
/// midpoints of the integration intervals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakFunction {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub stderr: Vec<f64>,
    pub n: usize,
}

impl WeakFunction {
    /// Writes `t,value,stderr,n`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,value,stderr,n")?;
        for k in 0..self.times.len() {
            writeln!(out, "{:e},{:e},{:e},{}", self.times[k], self.values[k], self.stderr[k], self.n)?;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }

    /// Centered moving average over `window` samples, truncated at the ends.
    /// Windows of 0 or 1 leave the series unchanged.
    pub fn smoothed(&self, window: usize) -> WeakFunction {
        if window <= 1 {
            return self.clone();
        }
        let half_lo = (window - 1) / 2;
        let half_hi = window / 2;
        let n = self.values.len();
        let mut values = Vec::with_capacity(n);
        let mut stderr = Vec::with_capacity(n);
        for k in 0..n {
            let lo = k.saturating_sub(half_lo);
            let hi = (k + half_hi).min(n - 1);
            let m = (hi - lo + 1) as f64;
            values.push(self.values[lo..=hi].iter().sum::<f64>() / m);
            stderr.push(self.stderr[lo..=hi].iter().map(|s| s * s).sum::<f64>().sqrt() / m);
        }
        WeakFunction {
            times: self.times.clone(),
            values,
            stderr,
            n: self.n,
        }
    }
}

/// Per-sample mean of the readout over the sub-ensemble, with optional
/// centered smoothing.
pub fn weak_function(sub: &SubEnsemble, smoothing_window: usize) -> Result<WeakFunction> {
    if sub.is_empty() {
        return Err(Error::InsufficientStatistics {
            what: "sub-ensemble for the weak function".into(),
            needed: 1,
            got: 0,
        });
    }
    let dt = sub.params.dt;
    let mut column = vec![0.0; sub.len()];
    let mut wf = WeakFunction {
        times: Vec::with_capacity(sub.k_f),
        values: Vec::with_capacity(sub.k_f),
        stderr: Vec::with_capacity(sub.k_f),
        n: sub.len(),
    };
    for k in 0..sub.k_f {
        for (j, t) in sub.trajectories.iter().enumerate() {
            column[j] = t.readouts[k];
        }
        let (m, se) = mean_and_stderr(&column);
        wf.times.push((k as f64 + 0.5) * dt);
        wf.values.push(m);
        wf.stderr.push(se);
    }
    Ok(wf.smoothed(smoothing_window))
}
