//! Monte Carlo generation of measurement records and conditioned states.
//!
//! A trajectory is stored as its initial state plus the readout record; the
//! state sequence is recomputed on demand by running the propagator over the
//! record, so a stored trajectory always re-propagates bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{self, DetectorModel, ReadoutRecord};
use crate::dynamics::{BlochState, PhysicalParams, Propagator};
use crate::error::{Error, Result};
use crate::rng::{substream, Purpose, StreamRng};

/// Version tag written into every ensemble manifest.
pub const FORMAT_VERSION: u32 = 1;

/// Trajectories per block in parallel reductions. Fixed so the summation
/// order does not depend on the number of workers.
const REDUCTION_BLOCK: usize = 512;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub params: PhysicalParams,
    pub propagator: Propagator,
    /// Readouts `r_k` collected over `[k dt, (k+1) dt)`.
    pub readouts: Vec<f64>,
    /// States at `t = 0, dt, ..., n dt`; one more than `readouts`.
    pub states: Vec<BlochState>,
}

impl Trajectory {
    pub fn initial(&self) -> BlochState {
        self.states[0]
    }

    pub fn final_state(&self) -> BlochState {
        *self.states.last().expect("trajectory has at least the initial state")
    }

    pub fn n_steps(&self) -> usize {
        self.readouts.len()
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.states.len()).map(|k| k as f64 * self.params.dt).collect()
    }

    pub fn record(&self) -> Result<ReadoutRecord> {
        ReadoutRecord::new(self.params.dt, self.readouts.clone())
    }

    /// `z` of the state each readout is conditioned on.
    pub fn measured_z(&self) -> impl Iterator<Item = f64> + '_ {
        self.states[..self.readouts.len()]
            .iter()
            .map(|s| self.propagator.measured_state(*s, &self.params).z)
    }

    /// The first `steps` samples of this trajectory.
    pub fn truncated(&self, steps: usize) -> Trajectory {
        let steps = steps.min(self.n_steps());
        Trajectory {
            params: self.params,
            propagator: self.propagator,
            readouts: self.readouts[..steps].to_vec(),
            states: self.states[..=steps].to_vec(),
        }
    }
}

fn propagate(
    initial: BlochState,
    readouts: &[f64],
    params: &PhysicalParams,
    propagator: Propagator,
) -> Vec<BlochState> {
    let mut states = Vec::with_capacity(readouts.len() + 1);
    let mut q = initial;
    states.push(q);
    for &r in readouts {
        q = propagator.step(q, r, params);
        states.push(q);
    }
    states
}

fn fill_record(
    initial: BlochState,
    params: &PhysicalParams,
    propagator: Propagator,
    rng: &mut StreamRng,
    out: &mut [f64],
) -> BlochState {
    let sigma = (params.tau / params.dt).sqrt();
    let mut q = initial;
    for slot in out.iter_mut() {
        let z = propagator.measured_state(q, params).z.clamp(-1.0, 1.0);
        let r = detector::draw(z, sigma, rng);
        *slot = r;
        q = propagator.step(q, r, params);
    }
    q
}

/// Simulates one run: at each sample a readout is drawn from the state being
/// measured, then the state is updated with it.
pub fn simulate_trajectory<R: Rng + ?Sized>(
    initial: BlochState,
    params: &PhysicalParams,
    duration: f64,
    propagator: Propagator,
    rng: &mut R,
) -> Result<Trajectory> {
    let params = params.validated()?;
    let initial = BlochState::new(initial.x, initial.z)?;
    let n = params.steps_for(duration)?;
    let model = DetectorModel::from_params(&params);
    let mut readouts = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n + 1);
    let mut q = initial;
    states.push(q);
    for _ in 0..n {
        let z = propagator.measured_state(q, &params).z.clamp(-1.0, 1.0);
        let r = detector::sample_readout(z, &model, rng)?;
        q = propagator.step(q, r, &params);
        readouts.push(r);
        states.push(q);
    }
    Ok(Trajectory {
        params,
        propagator,
        readouts,
        states,
    })
}

/// Propagates an externally supplied record from `initial`.
pub fn reconstruct_from_record(
    initial: BlochState,
    params: &PhysicalParams,
    record: &ReadoutRecord,
    propagator: Propagator,
) -> Result<Trajectory> {
    let params = params.validated()?;
    let initial = BlochState::new(initial.x, initial.z)?;
    if (record.dt() - params.dt).abs() > 1e-6 * params.dt {
        return Err(Error::invalid(
            "dt",
            format!(
                "record sampling interval {:e} s does not match configured dt {:e} s",
                record.dt(),
                params.dt
            ),
        ));
    }
    let states = propagate(initial, record.values(), &params, propagator);
    Ok(Trajectory {
        params,
        propagator,
        readouts: record.values().to_vec(),
        states,
    })
}

/// Everything needed to regenerate an ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub format_version: u32,
    pub params: PhysicalParams,
    pub propagator: Propagator,
    pub initial: BlochState,
    pub duration: f64,
    pub n_steps: usize,
    pub n_traj: usize,
    pub master_seed: u64,
}

/// An ensemble of runs sharing parameters and initial state. Readouts are a
/// row-major `n_traj x n_steps` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    pub manifest: EnsembleManifest,
    readouts: Vec<f64>,
}

/// Simulates `n_traj` independent runs. Run `i` draws from the stream
/// `(master_seed, i)`, so the result does not depend on the thread pool.
pub fn simulate_ensemble(
    initial: BlochState,
    params: &PhysicalParams,
    duration: f64,
    n_traj: usize,
    master_seed: u64,
    propagator: Propagator,
) -> Result<TrajectorySet> {
    let params = params.validated()?;
    let initial = BlochState::new(initial.x, initial.z)?;
    if n_traj == 0 {
        return Err(Error::invalid("n", "need at least one trajectory"));
    }
    let n_steps = params.steps_for(duration)?;
    let total = n_traj
        .checked_mul(n_steps)
        .ok_or_else(|| Error::invalid("n", "ensemble size overflows memory addressing"))?;
    let mut readouts: Vec<f64> = Vec::new();
    readouts.try_reserve_exact(total).map_err(|e| {
        Error::invalid(
            "n",
            format!("cannot allocate {n_traj} x {n_steps} readouts: {e}"),
        )
    })?;
    readouts.resize(total, 0.0);
    if n_steps > 0 {
        readouts
            .par_chunks_mut(n_steps)
            .enumerate()
            .for_each(|(i, row)| {
                let mut rng = substream(master_seed, Purpose::Trajectory, i as u64);
                fill_record(initial, &params, propagator, &mut rng, row);
            });
    }
    Ok(TrajectorySet {
        manifest: EnsembleManifest {
            format_version: FORMAT_VERSION,
            params,
            propagator,
            initial,
            duration,
            n_steps,
            n_traj,
            master_seed,
        },
        readouts,
    })
}

impl TrajectorySet {
    pub fn len(&self) -> usize {
        self.manifest.n_traj
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.n_traj == 0
    }

    pub fn n_steps(&self) -> usize {
        self.manifest.n_steps
    }

    pub fn params(&self) -> &PhysicalParams {
        &self.manifest.params
    }

    pub fn readouts(&self) -> &[f64] {
        &self.readouts
    }

    pub fn record(&self, i: usize) -> &[f64] {
        let n = self.manifest.n_steps;
        &self.readouts[i * n..(i + 1) * n]
    }

    /// Materializes trajectory `i`.
    pub fn trajectory(&self, i: usize) -> Trajectory {
        let m = &self.manifest;
        Trajectory {
            params: m.params,
            propagator: m.propagator,
            readouts: self.record(i).to_vec(),
            states: propagate(m.initial, self.record(i), &m.params, m.propagator),
        }
    }

    /// State of trajectory `i` after `step` samples.
    pub fn state_at(&self, i: usize, step: usize) -> BlochState {
        let m = &self.manifest;
        let mut q = m.initial;
        for &r in &self.record(i)[..step] {
            q = m.propagator.step(q, r, &m.params);
        }
        q
    }

    pub fn iter(&self) -> impl Iterator<Item = Trajectory> + '_ {
        (0..self.len()).map(move |i| self.trajectory(i))
    }

    /// Index of the sample at time `t`, which must fall on the sampling grid
    /// within the simulated horizon.
    pub fn step_index(&self, t: f64) -> Result<usize> {
        let k = self.manifest.params.steps_for(t).map_err(|_| {
            Error::invalid("t", format!("{t:e} s is not on the sampling grid"))
        })?;
        if k > self.n_steps() {
            return Err(Error::invalid(
                "t",
                format!("{t:e} s exceeds the simulated duration {:e} s", self.manifest.duration),
            ));
        }
        Ok(k)
    }

    /// Rebuilds a set from a manifest and its readout matrix.
    pub fn from_parts(manifest: EnsembleManifest, readouts: Vec<f64>) -> Result<Self> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::invalid(
                "format_version",
                format!("unsupported version {}", manifest.format_version),
            ));
        }
        if readouts.len() != manifest.n_traj * manifest.n_steps {
            return Err(Error::invalid(
                "readouts",
                format!(
                    "expected {} x {} values, got {}",
                    manifest.n_traj,
                    manifest.n_steps,
                    readouts.len()
                ),
            ));
        }
        Ok(TrajectorySet { manifest, readouts })
    }
}

/// Per-time ensemble statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMoments {
    pub t: f64,
    pub n: usize,
    pub mean_x: f64,
    pub mean_z: f64,
    pub var_x: f64,
    pub var_z: f64,
    /// Average of `x^2 + z^2` over trajectories.
    pub mean_purity: f64,
}

impl EnsembleMoments {
    pub fn stderr_x(&self) -> f64 {
        (self.var_x / self.n as f64).sqrt()
    }

    pub fn stderr_z(&self) -> f64 {
        (self.var_z / self.n as f64).sqrt()
    }
}

#[derive(Clone)]
struct Sums {
    x: Vec<f64>,
    xx: Vec<f64>,
    z: Vec<f64>,
    zz: Vec<f64>,
}

impl Sums {
    fn zeros(n: usize) -> Self {
        Sums {
            x: vec![0.0; n],
            xx: vec![0.0; n],
            z: vec![0.0; n],
            zz: vec![0.0; n],
        }
    }

    fn add(&mut self, other: &Sums) {
        for k in 0..self.x.len() {
            self.x[k] += other.x[k];
            self.xx[k] += other.xx[k];
            self.z[k] += other.z[k];
            self.zz[k] += other.zz[k];
        }
    }
}

/// Mean and variance of `x` and `z` at every sample time. Blocks of
/// trajectories are summed in parallel and combined in index order.
pub fn ensemble_moments(set: &TrajectorySet) -> Vec<EnsembleMoments> {
    let n_t = set.n_steps() + 1;
    let m = &set.manifest;
    let blocks: Vec<Sums> = (0..set.len().div_ceil(REDUCTION_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut s = Sums::zeros(n_t);
            let end = ((b + 1) * REDUCTION_BLOCK).min(set.len());
            for i in b * REDUCTION_BLOCK..end {
                let mut q = m.initial;
                let rec = set.record(i);
                for k in 0..n_t {
                    if k > 0 {
                        q = m.propagator.step(q, rec[k - 1], &m.params);
                    }
                    s.x[k] += q.x;
                    s.xx[k] += q.x * q.x;
                    s.z[k] += q.z;
                    s.zz[k] += q.z * q.z;
                }
            }
            s
        })
        .collect();
    let mut total = Sums::zeros(n_t);
    for b in &blocks {
        total.add(b);
    }
    let n = set.len() as f64;
    let dof = (n - 1.0).max(1.0);
    (0..n_t)
        .map(|k| {
            let mean_x = total.x[k] / n;
            let mean_z = total.z[k] / n;
            EnsembleMoments {
                t: k as f64 * m.params.dt,
                n: set.len(),
                mean_x,
                mean_z,
                var_x: ((total.xx[k] - n * mean_x * mean_x) / dof).max(0.0),
                var_z: ((total.zz[k] - n * mean_z * mean_z) / dof).max(0.0),
                mean_purity: (total.xx[k] + total.zz[k]) / n,
            }
        })
        .collect()
}

/// Options for simulated projective tomography.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TomographyOptions {
    /// Probability that a projective readout reports the correct outcome.
    /// Outcomes are flipped with probability `1 - fidelity` and the averages
    /// are corrected by `1 / (2 fidelity - 1)`.
    pub readout_fidelity: f64,
    pub seed: u64,
}

impl Default for TomographyOptions {
    fn default() -> Self {
        TomographyOptions {
            readout_fidelity: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TomographyEstimate {
    pub x: f64,
    pub z: f64,
    pub x_stderr: f64,
    pub z_stderr: f64,
    pub n_selected: usize,
}

/// Conditioned tomography at time `t`: runs whose propagated state lies
/// within `window` of the target in both `x` and `z` each contribute one
/// simulated projective measurement along x and one along z, drawn from
/// their propagated state.
pub fn conditioned_tomography(
    set: &TrajectorySet,
    target: BlochState,
    t: f64,
    window: f64,
    options: &TomographyOptions,
) -> Result<TomographyEstimate> {
    if !(window > 0.0) {
        return Err(Error::invalid("window", format!("must be positive, got {window}")));
    }
    let f = options.readout_fidelity;
    if !(f > 0.5 && f <= 1.0) {
        return Err(Error::invalid("readout_fidelity", format!("must lie in (0.5, 1], got {f}")));
    }
    let k = set.step_index(t)?;
    let shots: Vec<(f64, f64)> = (0..set.len())
        .into_par_iter()
        .filter_map(|i| {
            let q = set.state_at(i, k);
            if (q.x - target.x).abs() > window || (q.z - target.z).abs() > window {
                return None;
            }
            let mut rng = substream(options.seed, Purpose::Tomography, i as u64);
            let mut shot = |p: f64| {
                let outcome = if rng.random::<f64>() < 0.5 * (1.0 + p) { 1.0 } else { -1.0 };
                if rng.random::<f64>() < f {
                    outcome
                } else {
                    -outcome
                }
            };
            Some((shot(q.x), shot(q.z)))
        })
        .collect();
    let n = shots.len();
    if n == 0 {
        return Err(Error::InsufficientStatistics {
            what: format!("conditioned tomography at t = {t:e} s"),
            needed: 1,
            got: 0,
        });
    }
    let contrast = 2.0 * f - 1.0;
    let mx = shots.iter().map(|s| s.0).sum::<f64>() / n as f64;
    let mz = shots.iter().map(|s| s.1).sum::<f64>() / n as f64;
    let se = |m: f64| ((1.0 - m * m).max(0.0) / n as f64).sqrt() / contrast;
    Ok(TomographyEstimate {
        x: mx / contrast,
        z: mz / contrast,
        x_stderr: se(mx),
        z_stderr: se(mz),
        n_selected: n,
    })
}

/// On-disk layout of the readout matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixFormat {
    /// Little-endian IEEE-754 doubles, row-major.
    #[default]
    F64Le,
    /// One trajectory per line, comma-separated.
    Csv,
}

impl MatrixFormat {
    pub fn file_name(self) -> &'static str {
        match self {
            MatrixFormat::F64Le => "readouts.f64le",
            MatrixFormat::Csv => "readouts.csv",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredManifest {
    #[serde(flatten)]
    ensemble: EnsembleManifest,
    data_file: String,
    data_format: MatrixFormat,
}

/// Name of the ensemble manifest inside a set directory.
pub const SET_MANIFEST: &str = "ensemble.json";

/// Writes `ensemble.json` and the readout matrix into `dir`. Returns the
/// paths written.
pub fn save_set(set: &TrajectorySet, dir: &Path, format: MatrixFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let data_path = dir.join(format.file_name());
    let file = fs::File::create(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(&data_path, e);
    match format {
        MatrixFormat::F64Le => {
            for v in &set.readouts {
                out.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        MatrixFormat::Csv => {
            let n = set.n_steps();
            for i in 0..set.len() {
                let row = &set.readouts[i * n..(i + 1) * n];
                let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
                writeln!(out, "{}", line.join(",")).map_err(io)?;
            }
        }
    }
    out.flush().map_err(io)?;

    let manifest_path = dir.join(SET_MANIFEST);
    let stored = StoredManifest {
        ensemble: set.manifest.clone(),
        data_file: format.file_name().to_string(),
        data_format: format,
    };
    let json = serde_json::to_string_pretty(&stored).expect("manifest serializes");
    fs::write(&manifest_path, json + "\n").map_err(|e| Error::io(&manifest_path, e))?;
    Ok(vec![manifest_path, data_path])
}

/// Loads a set written by [`save_set`].
pub fn load_set(dir: &Path) -> Result<TrajectorySet> {
    let manifest_path = dir.join(SET_MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let stored: StoredManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: manifest_path.clone(),
        source: e,
    })?;
    let data_path = dir.join(&stored.data_file);
    let file = fs::File::open(&data_path).map_err(|e| Error::io(&data_path, e))?;
    let mut reader = BufReader::new(file);
    let readouts = match stored.data_format {
        MatrixFormat::F64Le => {
            let mut bytes = Vec::new();
            reader.read_to_end(&mut bytes).map_err(|e| Error::io(&data_path, e))?;
            if bytes.len() % 8 != 0 {
                return Err(Error::Record {
                    path: Some(data_path),
                    line: 0,
                    reason: "binary matrix length is not a multiple of 8 bytes".into(),
                });
            }
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect()
        }
        MatrixFormat::Csv => {
            let mut values = Vec::new();
            for (i, line) in reader.lines().enumerate() {
                let line = line.map_err(|e| Error::io(&data_path, e))?;
                for field in line.split(',').filter(|f| !f.trim().is_empty()) {
                    let v = field.trim().parse::<f64>().map_err(|_| Error::Record {
                        path: Some(data_path.clone()),
                        line: i + 1,
                        reason: format!("invalid value `{}`", field.trim()),
                    })?;
                    values.push(v);
                }
            }
            values
        }
    };
    TrajectorySet::from_parts(stored.ensemble, readouts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::mlt_density;
    use approx::assert_abs_diff_eq;

    fn undriven(tau: f64, gamma: f64) -> PhysicalParams {
        PhysicalParams::from_rabi_hz(0.0, tau, gamma, 16e-9).unwrap()
    }

    fn fig2c() -> PhysicalParams {
        PhysicalParams::from_rabi_hz(1.08e6, 315e-9, 3.85e6, 16e-9).unwrap()
    }

    #[test]
    fn zero_duration_is_initial_state() {
        let mut rng = substream(1, Purpose::Trajectory, 0);
        let t = simulate_trajectory(BlochState::PLUS_X, &undriven(315e-9, 3.85e6), 0.0, Propagator::default(), &mut rng)
            .unwrap();
        assert_eq!(t.states, vec![BlochState::PLUS_X]);
        assert!(t.readouts.is_empty());
    }

    #[test]
    fn stored_states_recompute_bit_exactly() {
        for prop in [Propagator::FirstOrder, Propagator::ExactRotation, Propagator::Symmetric] {
            let mut rng = substream(9, Purpose::Trajectory, 0);
            let p = fig2c();
            let t = simulate_trajectory(BlochState::new(0.88, 0.0).unwrap(), &p, 1.424e-6, prop, &mut rng).unwrap();
            assert_eq!(t.states.len(), t.readouts.len() + 1);
            let again = reconstruct_from_record(t.initial(), &p, &t.record().unwrap(), prop).unwrap();
            assert_eq!(again.states, t.states);
            for k in 0..t.n_steps() {
                assert_eq!(t.states[k + 1], prop.step(t.states[k], t.readouts[k], &p));
            }
        }
    }

    #[test]
    fn ensemble_rows_match_single_trajectory_simulation() {
        let p = fig2c();
        let set = simulate_ensemble(BlochState::PLUS_X, &p, 0.32e-6, 5, 42, Propagator::default()).unwrap();
        for i in 0..5 {
            let mut rng = substream(42, Purpose::Trajectory, i as u64);
            let t = simulate_trajectory(BlochState::PLUS_X, &p, 0.32e-6, Propagator::default(), &mut rng).unwrap();
            assert_eq!(set.trajectory(i), t);
            assert_eq!(set.state_at(i, 20), t.states[20]);
        }
    }

    #[test]
    fn ensemble_is_deterministic_across_worker_counts() {
        let p = fig2c();
        let run = |workers: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap()
                .install(|| {
                    let set = simulate_ensemble(BlochState::PLUS_X, &p, 0.48e-6, 3000, 5, Propagator::default()).unwrap();
                    let moments = ensemble_moments(&set);
                    (set, moments)
                })
        };
        let (a, ma) = run(1);
        let (b, mb) = run(4);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn zero_record_keeps_state_constant() {
        let p = PhysicalParams::from_rabi_hz(0.0, 315e-9, 1.0 / 630e-9, 16e-9).unwrap();
        let rec = ReadoutRecord::new(16e-9, vec![0.0; 50]).unwrap();
        let s = BlochState::new(0.6, 0.3).unwrap();
        let t = reconstruct_from_record(s, &p, &rec, Propagator::default()).unwrap();
        for q in &t.states {
            assert_abs_diff_eq!(q.x, s.x, epsilon = 1e-14);
            assert_abs_diff_eq!(q.z, s.z, epsilon = 1e-14);
        }
    }

    #[test]
    fn constant_record_follows_sech_tanh() {
        let p = undriven(1.25e-6, 0.94e6);
        let r_bar = -1.1;
        let rec = ReadoutRecord::new(p.dt, vec![r_bar; 89]).unwrap();
        let t = reconstruct_from_record(BlochState::PLUS_X, &p, &rec, Propagator::FirstOrder).unwrap();
        for (k, q) in t.states.iter().enumerate() {
            let time = k as f64 * p.dt;
            let u = r_bar * time / p.tau;
            assert_abs_diff_eq!(q.z, u.tanh(), epsilon = 1e-12);
            assert_abs_diff_eq!(q.x, (-p.gamma_extra() * time).exp() / u.cosh(), epsilon = 1e-12);
        }
    }

    #[test]
    fn reconstruct_rejects_dt_mismatch() {
        let rec = ReadoutRecord::new(20e-9, vec![0.1; 4]).unwrap();
        assert!(reconstruct_from_record(BlochState::PLUS_X, &fig2c(), &rec, Propagator::default()).is_err());
    }

    fn normal_cdf(x: f64) -> f64 {
        use statrs::distribution::{ContinuousCDF, Normal};
        Normal::new(0.0, 1.0).unwrap().cdf(x)
    }

    #[test]
    fn collapse_at_unit_efficiency() {
        // Without drive z(T) = tanh(sum r dt / tau) and the sum is a mixture of
        // N(+-T/tau, T/tau), so P(|z(T)| > 1 - 1e-3) is known in closed form.
        let tau = 320e-9;
        let p = undriven(tau, 1.0 / (2.0 * tau));
        for (n_tau, min_fraction) in [(10.0, 0.97), (20.0, 0.99)] {
            let duration = n_tau * tau;
            let set = simulate_ensemble(BlochState::PLUS_X, &p, duration, 20_000, 17, Propagator::default()).unwrap();
            let k = set.n_steps();
            let pinned = (0..set.len())
                .filter(|&i| (set.state_at(i, k).z.abs() - 1.0).abs() < 1e-3)
                .count() as f64
                / set.len() as f64;
            let s = (1.0f64 - 1e-3).atanh();
            let mean = duration / tau;
            let sd = mean.sqrt();
            let expected = 1.0 - (normal_cdf((s - mean) / sd) - normal_cdf((-s - mean) / sd));
            let tol = 4.0 * (expected * (1.0 - expected) / set.len() as f64).sqrt();
            assert!((pinned - expected).abs() < tol, "{n_tau}: {pinned} vs {expected}");
            assert!(pinned > min_fraction, "{pinned}");
        }
    }

    #[test]
    fn undriven_variance_matches_terminal_density() {
        let p = undriven(315e-9, 3.85e6);
        let set = simulate_ensemble(BlochState::PLUS_X, &p, 1.6e-6, 40_000, 3, Propagator::default()).unwrap();
        let moments = ensemble_moments(&set);
        // E[z^2] from the closed-form terminal density, by quadrature in u = atanh z
        let second_moment = |t: f64| {
            let n = 20_000;
            let (lo, hi) = (-12.0f64, 12.0f64);
            let h = (hi - lo) / n as f64;
            (0..=n)
                .map(|i| {
                    let u = lo + i as f64 * h;
                    let z = u.tanh();
                    let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                    w * z * z * mlt_density(z, 0.0, t, p.tau).unwrap_or(0.0) * (1.0 - z * z)
                })
                .sum::<f64>()
                * h
        };
        let mut previous = 0.0;
        for k in [10, 25, 50, 100] {
            let m = &moments[k];
            let expected = second_moment(m.t);
            assert!((m.var_z + m.mean_z * m.mean_z - expected).abs() < 0.01, "k={k}: {} vs {expected}", m.var_z);
            assert!(m.var_z > previous);
            previous = m.var_z;
        }
        let late_growth = moments[100].var_z - moments[75].var_z;
        let early_growth = moments[25].var_z - moments[0].var_z;
        assert!(late_growth < 0.25 * early_growth);
    }

    #[test]
    fn trajectories_purer_than_ensemble_average() {
        let set = simulate_ensemble(BlochState::new(0.88, 0.0).unwrap(), &fig2c(), 1.424e-6, 5000, 8, Propagator::default())
            .unwrap();
        let m = &ensemble_moments(&set)[set.step_index(1.008e-6).unwrap()];
        let avg_state_purity = m.mean_x * m.mean_x + m.mean_z * m.mean_z;
        assert!(m.mean_purity > avg_state_purity + 0.2, "{} vs {avg_state_purity}", m.mean_purity);
    }

    #[test]
    fn tomography_of_initial_state() {
        let set = simulate_ensemble(BlochState::PLUS_X, &undriven(315e-9, 3.85e6), 0.32e-6, 4000, 1, Propagator::default())
            .unwrap();
        let est = conditioned_tomography(&set, BlochState::PLUS_X, 0.0, 2.0, &TomographyOptions::default()).unwrap();
        assert_eq!(est.n_selected, 4000);
        assert_eq!(est.x, 1.0);
        assert!(est.z.abs() < 4.0 * est.z_stderr);
    }

    #[test]
    fn tomography_of_pinned_eigenstates() {
        let tau = 320e-9;
        let p = undriven(tau, 1.0 / (2.0 * tau));
        let set = simulate_ensemble(BlochState::PLUS_X, &p, 6.4e-6, 4000, 2, Propagator::default()).unwrap();
        for target in [BlochState::GROUND, BlochState::EXCITED] {
            let est = conditioned_tomography(&set, target, 6.4e-6, 0.01, &TomographyOptions::default()).unwrap();
            assert!(est.n_selected > 1000);
            assert!((est.z - target.z).abs() <= 4.0 * est.z_stderr.max(1.0 / est.n_selected as f64));
        }
    }

    #[test]
    fn tomography_tracks_individual_trajectory() {
        let p = fig2c();
        let initial = BlochState::new(0.88, 0.0).unwrap();
        let set = simulate_ensemble(initial, &p, 1.424e-6, 40_000, 21, Propagator::default()).unwrap();
        let target = set.trajectory(0);
        let opts = TomographyOptions { readout_fidelity: 1.0, seed: 4 };
        let mut failures = 0;
        let checks = [10, 20, 30, 45, 60, 75];
        for &k in &checks {
            let q = target.states[k];
            let est = conditioned_tomography(&set, q, k as f64 * p.dt, 0.03, &opts).unwrap();
            // allow the +-0.03 selection window on top of the binomial error
            let ok = |est_v: f64, se: f64, truth: f64| (est_v - truth).abs() <= 3.0 * se + 0.03;
            if !(ok(est.x, est.x_stderr, q.x) && ok(est.z, est.z_stderr, q.z)) {
                failures += 1;
            }
        }
        assert!(failures <= 1, "{failures} of {} checks outside error bars", checks.len());
    }

    #[test]
    fn tomography_empty_selection_is_explicit() {
        let set = simulate_ensemble(BlochState::PLUS_X, &fig2c(), 0.16e-6, 10, 1, Propagator::default()).unwrap();
        let err = conditioned_tomography(&set, BlochState::EXCITED, 0.0, 0.01, &TomographyOptions::default()).unwrap_err();
        assert!(matches!(err, Error::InsufficientStatistics { got: 0, .. }));
    }

    #[test]
    fn tomography_fidelity_correction_is_unbiased() {
        let set = simulate_ensemble(BlochState::PLUS_X, &undriven(315e-9, 3.85e6), 0.16e-6, 20_000, 1, Propagator::default())
            .unwrap();
        let opts = TomographyOptions { readout_fidelity: 0.95, seed: 1 };
        let est = conditioned_tomography(&set, BlochState::PLUS_X, 0.0, 2.0, &opts).unwrap();
        assert!((est.x - 1.0).abs() < 4.0 * est.x_stderr.max(0.003));
    }

    #[test]
    fn save_and_load_roundtrip() {
        let set = simulate_ensemble(BlochState::PLUS_X, &fig2c(), 0.16e-6, 7, 3, Propagator::default()).unwrap();
        for format in [MatrixFormat::F64Le, MatrixFormat::Csv] {
            let dir = tempfile::tempdir().unwrap();
            save_set(&set, dir.path(), format).unwrap();
            assert_eq!(load_set(dir.path()).unwrap(), set);
        }
    }
}
