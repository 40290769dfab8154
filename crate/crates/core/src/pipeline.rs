//! End-to-end commands: each writes its artifacts plus a manifest that lists
//! the resolved configuration and a SHA-256 digest of every file.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    empirical_mlp, histogram, histogram_set, median_path, postselect, weak_function, Coordinate,
    Histogram2D, Normalization, PathEstimate, PostSelection, WeakFunction, mlt_density, most_likely_time,
};
use crate::config::{figs4_x_targets, Preset, RunConfig};
use crate::detector::ReadoutRecord;
use crate::dynamics::{lindblad_ensemble, PhysicalParams};
use crate::error::{Error, Result};
use crate::mlp::{
    analytic_undriven_from, shoot, trajectory_log_likelihood, variational_check, BoundaryConditions,
    Classification, OptimalPath, Root, ShootReport, StartOutcome,
};
use crate::simulator::{
    ensemble_moments, reconstruct_from_record, save_set, simulate_ensemble, TrajectorySet, FORMAT_VERSION,
};

pub const RUN_MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub artifacts: Vec<Artifact>,
}

/// Collects the files a command writes into one directory.
struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Output {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
        let path = self.dir.join(name);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
        self.record(name);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let text = serde_json::to_string_pretty(value).expect("report serializes");
        self.write(name, |w| writeln!(w, "{text}"))
    }

    fn record(&mut self, name: &str) {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
    }

    fn adopt(&mut self, paths: &[PathBuf]) {
        for p in paths {
            if let Some(name) = p.file_name().and_then(|n| n.to_str()) {
                self.record(name);
            }
        }
    }

    fn finish(mut self, command: &str, cfg: &RunConfig) -> Result<RunManifest> {
        self.files.sort();
        let mut artifacts = Vec::with_capacity(self.files.len());
        for name in &self.files {
            let path = self.dir.join(name);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            artifacts.push(Artifact {
                file: name.clone(),
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
        let manifest = RunManifest {
            format_version: FORMAT_VERSION,
            command: command.to_string(),
            seed: cfg.seed,
            config: cfg.clone(),
            artifacts,
        };
        let path = self.dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(manifest)
    }
}

/// Runs `f` on a pool of `workers` threads, or on the global pool.
pub fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match workers {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::invalid("workers", e.to_string()))?;
            Ok(pool.install(f))
        }
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

fn simulate(cfg: &RunConfig, params: &PhysicalParams) -> Result<TrajectorySet> {
    log::info!("simulating {} trajectories over {:e} s", cfg.n, cfg.duration);
    stage(
        "simulate",
        simulate_ensemble(cfg.initial_state()?, params, cfg.duration, cfg.n, cfg.seed, cfg.propagator),
    )
}

/// Simulates an ensemble and writes it with its moments.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    with_workers(cfg.workers, || {
        let params = cfg.params()?;
        let set = simulate(cfg, &params)?;
        let mut o = Output::new(out)?;
        let written = save_set(&set, out, cfg.matrix_format)?;
        o.adopt(&written);
        let m = ensemble_moments(&set);
        let init = cfg.initial_state()?;
        o.write("moments.csv", |w| {
            writeln!(w, "t,mean_x,stderr_x,mean_z,stderr_z,mean_purity,lindblad_x,lindblad_z")?;
            for row in &m {
                let (lx, lz) = lindblad_ensemble(init.x, init.z, params.omega, params.gamma_ens, row.t);
                writeln!(
                    w,
                    "{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                    row.t,
                    row.mean_x,
                    row.stderr_x(),
                    row.mean_z,
                    row.stderr_z(),
                    row.mean_purity,
                    lx,
                    lz
                )?;
            }
            Ok(())
        })?;
        o.finish("simulate", cfg)
    })?
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalSummary {
    pub classification: Classification,
    pub reference: f64,
    pub gaps: usize,
    pub evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub boundary: BoundaryConditions,
    pub residual: f64,
    pub iterations: usize,
    pub energy_drift: f64,
    pub log_likelihood: f64,
    pub roots: Vec<Root>,
    pub starts: Vec<StartOutcome>,
    /// Largest coordinate deviation from the closed form, without drive.
    pub analytic_max_deviation: Option<f64>,
    pub variational: Option<VariationalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpReport {
    pub horizons: Vec<HorizonReport>,
}

fn boundary(cfg: &RunConfig, x_f: f64, horizon: f64) -> Result<BoundaryConditions> {
    BoundaryConditions::new(
        (cfg.initial.x, cfg.initial.z),
        (x_f, cfg.selection.z_f),
        horizon,
    )
}

fn solve(cfg: &RunConfig, params: &PhysicalParams, bc: &BoundaryConditions) -> Result<ShootReport> {
    stage("shoot", shoot(bc, params, &cfg.solver))
}

fn write_path(o: &mut Output, name: &str, path: &OptimalPath) -> Result<()> {
    o.write(name, |w| path.write_csv(w))
}

/// Solves the boundary-value problem at every configured horizon.
pub fn cmd_mlp(cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    if cfg.horizons.is_empty() {
        return Err(Error::invalid("horizons", "need at least one horizon"));
    }
    with_workers(cfg.workers, || {
        let params = cfg.params()?;
        let mut o = Output::new(out)?;
        let mut report = MlpReport { horizons: Vec::new() };
        for (i, &h) in cfg.horizons.iter().enumerate() {
            let bc = boundary(cfg, cfg.selection.x_f, h)?;
            let solved = solve(cfg, &params, &bc)?;
            let principal = solved.principal();
            let path = principal.path();
            write_path(&mut o, &format!("path_T{}.csv", i + 1), path)?;
            o.write(&format!("signal_T{}.csv", i + 1), |w| {
                writeln!(w, "t,r,v_volts")?;
                for (k, p) in path.points.iter().enumerate() {
                    let r = p.readout();
                    writeln!(w, "{:e},{:e},{:e}", k as f64 * path.step, r, 0.5 * params.delta_v * r)?;
                }
                Ok(())
            })?;
            let analytic_max_deviation = if params.omega == 0.0 && cfg.initial.z == 0.0 {
                let a = stage(
                    "analytic",
                    analytic_undriven_from(cfg.initial.x, cfg.selection.z_f, h, &params, cfg.solver.step),
                )?;
                write_path(&mut o, &format!("analytic_T{}.csv", i + 1), &a)?;
                Some(a.max_deviation(path))
            } else {
                None
            };
            let variational = if cfg.variational {
                let v = stage(
                    "variational",
                    variational_check(path, &bc, &params, &cfg.deltas, &cfg.solver),
                )?;
                o.write(&format!("variational_T{}.csv", i + 1), |w| {
                    writeln!(w, "delta_1,delta_2,log_likelihood,relative,residual")?;
                    for p in &v.profile {
                        let fmt = |x: Option<f64>| x.map(|v| format!("{v:e}")).unwrap_or_default();
                        writeln!(
                            w,
                            "{},{},{},{},{}",
                            p.delta[0],
                            p.delta[1],
                            fmt(p.log_likelihood),
                            fmt(p.log_likelihood.map(|l| l - v.reference)),
                            fmt(p.residual)
                        )?;
                    }
                    Ok(())
                })?;
                Some(VariationalSummary {
                    classification: v.classification,
                    reference: v.reference,
                    gaps: v.gaps,
                    evaluated: v.profile.len(),
                })
            } else {
                None
            };
            report.horizons.push(HorizonReport {
                boundary: bc,
                residual: principal.residual,
                iterations: principal.iterations,
                energy_drift: principal.energy_drift,
                log_likelihood: principal.log_likelihood,
                roots: solved.roots.clone(),
                starts: solved.starts.clone(),
                analytic_max_deviation,
                variational,
            });
        }
        o.json("mlp_report.json", &report)?;
        o.finish("mlp", cfg)
    })?
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    Fig3,
    Fig4,
    FigS2,
    FigS3,
    FigS4,
}

impl Figure {
    pub const ALL: [Figure; 5] = [Figure::Fig3, Figure::Fig4, Figure::FigS2, Figure::FigS3, Figure::FigS4];

    pub fn name(self) -> &'static str {
        match self {
            Figure::Fig3 => "fig3",
            Figure::Fig4 => "fig4",
            Figure::FigS2 => "figS2",
            Figure::FigS3 => "figS3",
            Figure::FigS4 => "figS4",
        }
    }

    /// Preset the figure's configuration starts from.
    pub fn preset(self) -> Preset {
        match self {
            Figure::Fig3 => Preset::Fig3,
            Figure::Fig4 => Preset::Fig4,
            Figure::FigS2 => Preset::FigS2,
            Figure::FigS3 => Preset::FigS3,
            Figure::FigS4 => Preset::FigS4a,
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .iter()
            .copied()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::invalid(
                    "figure",
                    format!("unknown `{s}`, expected one of fig3, fig4, figS2, figS3, figS4"),
                )
            })
    }
}

/// Theory and Monte Carlo results for one post-selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionComparison {
    pub selection: PostSelection,
    pub n_selected: usize,
    pub acceptance: f64,
    pub theory_residual: f64,
    pub theory_log_likelihood: f64,
    pub theory_roots: usize,
    pub rms_empirical: f64,
    pub rms_median: f64,
    pub weak_max_abs: f64,
    pub weak_exceeds_unit_range: bool,
    pub times: Vec<f64>,
    pub empirical_x: Vec<f64>,
    pub empirical_z: Vec<f64>,
    pub median_x: Vec<f64>,
    pub median_z: Vec<f64>,
    pub theory_x: Vec<f64>,
    pub theory_z: Vec<f64>,
    pub weak_times: Vec<f64>,
    pub weak_function: Vec<f64>,
    pub weak_stderr: Vec<f64>,
    pub optimal_r: Vec<f64>,
    pub optimal_v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonBundle {
    pub figure: String,
    pub n_trajectories: usize,
    pub panels: Vec<SelectionComparison>,
}

fn write_hist(o: &mut Output, name: &str, h: &Histogram2D) -> Result<()> {
    o.write(name, |w| h.write_csv(Normalization::Counts, w))
}

fn write_estimate(o: &mut Output, stem: &str, est: &PathEstimate) -> Result<()> {
    o.write(&format!("{stem}_x.csv"), |w| est.write_csv(Coordinate::X, &mut *w))?;
    o.write(&format!("{stem}_z.csv"), |w| est.write_csv(Coordinate::Z, &mut *w))
}

fn write_weak(o: &mut Output, name: &str, wf: &WeakFunction) -> Result<()> {
    o.write(name, |w| wf.write_csv(w))
}

/// Readout of a path at time `t`, linearly interpolated.
fn readout_at(path: &OptimalPath, t: f64) -> f64 {
    let s = (t / path.step).clamp(0.0, (path.points.len() - 1) as f64);
    let k = (s.floor() as usize).min(path.points.len().saturating_sub(2));
    if path.points.len() == 1 {
        return path.points[0].readout();
    }
    let w = s - k as f64;
    (1.0 - w) * path.points[k].readout() + w * path.points[k + 1].readout()
}

/// Post-selects `set` at each horizon, extracts empirical and theoretical
/// most likely paths, and writes the per-panel artifacts.
fn compare_selections(
    o: &mut Output,
    prefix: &str,
    cfg: &RunConfig,
    params: &PhysicalParams,
    set: &TrajectorySet,
    x_targets: &[f64],
) -> Result<Vec<SelectionComparison>> {
    let mut panels = Vec::new();
    for (i, (&h, &x_f)) in cfg.horizons.iter().zip(x_targets).enumerate() {
        let tag = format!("{prefix}_t{}", i + 1);
        let sel = PostSelection {
            x_f,
            z_f: cfg.selection.z_f,
            window: cfg.selection.window,
            t_f: h,
            mode: cfg.selection.mode,
        };
        let sub = stage("postselect", postselect(set, &sel))?;
        log::info!("{tag}: {} of {} trajectories selected", sub.len(), set.len());
        write_hist(o, &format!("{tag}_hist_z_selected.csv"), &histogram(&sub, Coordinate::Z, cfg.histogram_bins)?)?;
        write_hist(o, &format!("{tag}_hist_x_selected.csv"), &histogram(&sub, Coordinate::X, cfg.histogram_bins)?)?;
        let emp = stage("empirical_mlp", empirical_mlp(&sub, cfg.percentile))?;
        let med = stage("median_path", median_path(&sub))?;
        write_estimate(o, &format!("{tag}_mlp_empirical"), &emp)?;
        write_estimate(o, &format!("{tag}_median"), &med)?;

        let bc = boundary(cfg, x_f, h)?;
        let theory = if params.omega == 0.0 && cfg.initial.z == 0.0 {
            let mut a = stage(
                "analytic",
                analytic_undriven_from(cfg.initial.x, cfg.selection.z_f, h, params, cfg.solver.step),
            )?;
            let end = a.end();
            a.residual = Some((end.x - x_f).hypot(end.z - cfg.selection.z_f));
            (a, 1)
        } else {
            let solved = solve(cfg, params, &bc)?;
            (solved.principal_path().clone(), solved.roots.len())
        };
        let (path, roots) = theory;
        write_path(o, &format!("{tag}_mlp_theory.csv"), &path)?;

        let times = emp.times.clone();
        let theory_x: Vec<f64> = times.iter().map(|&t| path.state_at(t).x).collect();
        let theory_z: Vec<f64> = times.iter().map(|&t| path.state_at(t).z).collect();
        let wf = stage("weak_function", weak_function(&sub, cfg.smoothing))?;
        write_weak(o, &format!("{tag}_weak_function.csv"), &wf)?;
        let optimal_r: Vec<f64> = wf.times.iter().map(|&t| readout_at(&path, t)).collect();
        let optimal_v: Vec<f64> = optimal_r.iter().map(|r| 0.5 * params.delta_v * r).collect();
        o.write(&format!("{tag}_optimal_signal.csv"), |w| {
            writeln!(w, "t,r,v_volts")?;
            for (k, p) in path.points.iter().enumerate() {
                let r = p.readout();
                writeln!(w, "{:e},{:e},{:e}", k as f64 * path.step, r, 0.5 * params.delta_v * r)?;
            }
            Ok(())
        })?;
        panels.push(SelectionComparison {
            selection: sel,
            n_selected: sub.len(),
            acceptance: sub.acceptance(),
            theory_residual: path.residual.unwrap_or(0.0),
            theory_log_likelihood: path.log_likelihood,
            theory_roots: roots,
            rms_empirical: emp.rms_distance(&theory_x, &theory_z)?,
            rms_median: med.rms_distance(&theory_x, &theory_z)?,
            weak_max_abs: wf.max_abs(),
            weak_exceeds_unit_range: wf.max_abs() > 1.0,
            times,
            empirical_x: emp.x.clone(),
            empirical_z: emp.z.clone(),
            median_x: med.x.clone(),
            median_z: med.z.clone(),
            theory_x,
            theory_z,
            weak_times: wf.times.clone(),
            weak_function: wf.values.clone(),
            weak_stderr: wf.stderr.clone(),
            optimal_r,
            optimal_v,
        });
    }
    Ok(panels)
}

fn selection_figure(o: &mut Output, prefix: &str, cfg: &RunConfig, x_targets: &[f64]) -> Result<ComparisonBundle> {
    cfg.validate()?;
    let params = cfg.params()?;
    let set = simulate(cfg, &params)?;
    write_hist(o, &format!("{prefix}_hist_z_all.csv"), &histogram_set(&set, Coordinate::Z, cfg.histogram_bins)?)?;
    write_hist(o, &format!("{prefix}_hist_x_all.csv"), &histogram_set(&set, Coordinate::X, cfg.histogram_bins)?)?;
    let panels = compare_selections(o, prefix, cfg, &params, &set, x_targets)?;
    let bundle = ComparisonBundle {
        figure: prefix.to_string(),
        n_trajectories: set.len(),
        panels,
    };
    o.json(&format!("{prefix}_comparison.json"), &bundle)?;
    Ok(bundle)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingMarker {
    pub z_f: f64,
    pub t_opt: f64,
    pub grid_argmax: f64,
}

/// Density of the final `z` versus duration, with most-likely-time markers
/// and the empirical density of a simulated ensemble.
fn timing_figure(o: &mut Output, cfg: &RunConfig) -> Result<Vec<TimingMarker>> {
    cfg.validate()?;
    let params = cfg.params()?;
    let targets = [0.2, 0.4, 0.6];
    let z_i = cfg.initial.z;
    let grid = 1e-9;
    let n_grid = (4.0 * params.tau / grid).round() as usize;
    let mut markers = Vec::new();
    let mut columns = Vec::new();
    for &z_f in &targets {
        let col: Vec<f64> = (1..=n_grid)
            .map(|k| mlt_density(z_f, z_i, k as f64 * grid, params.tau))
            .collect::<Result<_>>()?;
        let best = (0..col.len()).max_by(|&a, &b| col[a].total_cmp(&col[b])).unwrap_or(0);
        markers.push(TimingMarker {
            z_f,
            t_opt: most_likely_time(z_f, z_i, params.tau)?,
            grid_argmax: (best + 1) as f64 * grid,
        });
        columns.push(col);
    }
    o.write("figS3_density.csv", |w| {
        writeln!(w, "T,P_0.2,P_0.4,P_0.6")?;
        for k in 0..n_grid {
            writeln!(w, "{:e},{:e},{:e},{:e}", (k + 1) as f64 * grid, columns[0][k], columns[1][k], columns[2][k])?;
        }
        Ok(())
    })?;
    o.json("figS3_markers.json", &markers)?;

    let set = simulate(cfg, &params)?;
    let w_half = cfg.selection.window;
    let counts: Vec<[usize; 3]> = {
        let n_t = set.n_steps() + 1;
        let mut c = vec![[0usize; 3]; n_t];
        for t in set.iter() {
            for (k, q) in t.states.iter().enumerate() {
                for (j, &z_f) in targets.iter().enumerate() {
                    if (q.z - z_f).abs() <= w_half {
                        c[k][j] += 1;
                    }
                }
            }
        }
        c
    };
    let norm = set.len() as f64 * 2.0 * w_half;
    o.write("figS3_empirical.csv", |w| {
        writeln!(w, "T,P_0.2,P_0.4,P_0.6")?;
        for (k, c) in counts.iter().enumerate().skip(1) {
            writeln!(
                w,
                "{:e},{:e},{:e},{:e}",
                k as f64 * params.dt,
                c[0] as f64 / norm,
                c[1] as f64 / norm,
                c[2] as f64 / norm
            )?;
        }
        Ok(())
    })?;
    Ok(markers)
}

/// Reproduces the artifacts behind one figure.
pub fn cmd_figure(figure: Figure, cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    with_workers(cfg.workers, || {
        let mut o = Output::new(out)?;
        match figure {
            Figure::Fig3 | Figure::Fig4 => {
                let x = vec![cfg.selection.x_f; cfg.horizons.len()];
                selection_figure(&mut o, figure.name(), cfg, &x)?;
            }
            Figure::FigS2 => {
                cfg.validate()?;
                let params = cfg.params()?;
                let h = *cfg
                    .horizons
                    .first()
                    .ok_or_else(|| Error::invalid("horizons", "need one horizon"))?;
                let bc = boundary(cfg, cfg.selection.x_f, h)?;
                let solved = solve(cfg, &params, &bc)?;
                let path = solved.principal_path();
                write_path(&mut o, "figS2_path.csv", path)?;
                let v = stage(
                    "variational",
                    variational_check(path, &bc, &params, &cfg.deltas, &cfg.solver),
                )?;
                o.write("figS2_profile.csv", |w| {
                    writeln!(w, "delta_1,delta_2,relative_log_likelihood")?;
                    for p in &v.profile {
                        match p.log_likelihood {
                            Some(l) => writeln!(w, "{},{},{:e}", p.delta[0], p.delta[1], l - v.reference)?,
                            None => writeln!(w, "{},{},", p.delta[0], p.delta[1])?,
                        }
                    }
                    Ok(())
                })?;
                o.json("figS2_report.json", &v)?;
            }
            Figure::FigS3 => {
                timing_figure(&mut o, cfg)?;
            }
            Figure::FigS4 => {
                let mut panels = Vec::new();
                for p in [Preset::FigS4a, Preset::FigS4b, Preset::FigS4c] {
                    let base = RunConfig::preset(p);
                    let panel_cfg = RunConfig {
                        n: cfg.n,
                        seed: cfg.seed,
                        propagator: cfg.propagator,
                        percentile: cfg.percentile,
                        smoothing: cfg.smoothing,
                        histogram_bins: cfg.histogram_bins,
                        solver: cfg.solver.clone(),
                        selection: crate::config::SelectionConfig {
                            window: cfg.selection.window,
                            mode: cfg.selection.mode,
                            ..base.selection
                        },
                        ..base
                    };
                    let x = figs4_x_targets(p).expect("extended-results preset").to_vec();
                    panels.push(stage(p.name(), selection_figure(&mut o, p.name(), &panel_cfg, &x))?);
                }
            }
        }
        o.finish(&format!("figure {}", figure.name()), cfg)
    })?
}

/// Propagates an external readout record and writes the state sequence.
pub fn cmd_reconstruct(record_file: &Path, cfg: &RunConfig, out: &Path) -> Result<RunManifest> {
    let params = cfg.params()?;
    let initial = cfg.initial_state()?;
    let record = stage("read_record", ReadoutRecord::read_csv_file(record_file, Some(cfg.delta_v)))?;
    let traj = stage(
        "reconstruct",
        reconstruct_from_record(initial, &params, &record, cfg.propagator),
    )?;
    let mut o = Output::new(out)?;
    o.write("trajectory.csv", |w| {
        writeln!(w, "t,x,z,r")?;
        for (k, q) in traj.states.iter().enumerate() {
            let r = traj.readouts.get(k).map(|r| format!("{r:e}")).unwrap_or_default();
            writeln!(w, "{:e},{:e},{:e},{}", k as f64 * params.dt, q.x, q.z, r)?;
        }
        Ok(())
    })?;
    #[derive(Serialize)]
    struct Summary {
        samples: usize,
        log_likelihood: f64,
        final_x: f64,
        final_z: f64,
    }
    let end = traj.final_state();
    o.json(
        "reconstruct_report.json",
        &Summary {
            samples: traj.n_steps(),
            log_likelihood: trajectory_log_likelihood(&traj),
            final_x: end.x,
            final_z: end.z,
        },
    )?;
    o.finish("reconstruct", cfg)
}

/// Checks every artifact listed in a manifest against its digest.
pub fn verify_manifest(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join(RUN_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Json { path, source: e })?;
    let mut mismatched = Vec::new();
    for a in &manifest.artifacts {
        let p = dir.join(&a.file);
        let ok = fs::read(&p)
            .map(|b| hex::encode(Sha256::digest(&b)) == a.sha256)
            .unwrap_or(false);
        if !ok {
            mismatched.push(a.file.clone());
        }
    }
    Ok(mismatched)
}
