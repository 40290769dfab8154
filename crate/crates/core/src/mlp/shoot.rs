use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::path::{integrate_endpoint, integrate_n, OptimalPath};
use super::system::{DecayModel, PathSystem, PhasePoint};
use crate::dynamics::{steps_for, PhysicalParams, NORM_SLACK};
use crate::error::{Error, Result};

/// Pre- and post-selected states and the time between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryConditions {
    pub x_i: f64,
    pub z_i: f64,
    pub x_f: f64,
    pub z_f: f64,
    pub horizon: f64,
}

impl BoundaryConditions {
    pub fn new(initial: (f64, f64), target: (f64, f64), horizon: f64) -> Result<Self> {
        let bc = BoundaryConditions {
            x_i: initial.0,
            z_i: initial.1,
            x_f: target.0,
            z_f: target.1,
            horizon,
        };
        bc.validate()?;
        Ok(bc)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, x, z) in [("initial", self.x_i, self.z_i), ("target", self.x_f, self.z_f)] {
            if !(x.is_finite() && z.is_finite()) || x.hypot(z) > 1.0 + NORM_SLACK {
                return Err(Error::invalid(
                    name,
                    format!("({x}, {z}) lies outside the Bloch disk"),
                ));
            }
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::invalid(
                "horizon",
                format!("must be positive, got {}", self.horizon),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShootOptions {
    /// RK4 step in seconds.
    pub step: f64,
    /// Bloch-distance residual below which a root is accepted.
    pub tolerance: f64,
    /// Newton keeps iterating until this residual or until it stalls.
    pub polish_tolerance: f64,
    pub max_iterations: usize,
    /// Values of `p_x(0)` and `p_z(0)`; starts are the Cartesian product.
    pub grid: Vec<f64>,
    /// Additional starts tried after the grid.
    pub extra_starts: Vec<[f64; 2]>,
    /// Step length factor applied on each backtrack.
    pub damping: f64,
    pub max_backtracks: usize,
    /// Relative finite-difference step for the Jacobian.
    pub fd_step: f64,
    /// Singular values of the Jacobian below `rcond` times the largest
    /// entry are treated as zero in the Newton solve.
    pub rcond: f64,
    /// Points per axis of a residual scan over the bounding box of `grid`.
    /// Local minima of the scan become additional starts. Zero disables it.
    pub scan_points: usize,
    /// Most scan minima kept as starts.
    pub scan_seeds: usize,
    /// Upper bound on target-continuation increments per start; the
    /// smallest increment is its reciprocal. Zero disables continuation.
    pub continuation_steps: usize,
    /// The multi-start search runs on the coarsest grid that divides the
    /// horizon into at least this many steps; each distinct root is then
    /// polished at `step`. Zero searches at `step` directly.
    pub coarse_points: usize,
    /// Roots closer than this in initial-multiplier space are merged.
    pub dedup_distance: f64,
    /// Roots whose paths differ by less than this everywhere are merged.
    pub path_dedup: f64,
    pub decay: DecayModel,
}

impl Default for ShootOptions {
    fn default() -> Self {
        ShootOptions {
            step: 1e-9,
            tolerance: 1e-6,
            polish_tolerance: 1e-11,
            max_iterations: 60,
            grid: vec![-3.0, -1.5, 0.0, 1.5, 3.0],
            extra_starts: Vec::new(),
            damping: 0.5,
            max_backtracks: 30,
            fd_step: 1e-6,
            rcond: 1e-7,
            continuation_steps: 256,
            scan_points: 41,
            scan_seeds: 8,
            coarse_points: 500,
            dedup_distance: 1e-4,
            path_dedup: 1e-6,
            decay: DecayModel::Excess,
        }
    }
}

impl ShootOptions {
    pub fn with_step(self, step: f64) -> Self {
        ShootOptions { step, ..self }
    }

    pub fn starts(&self) -> Vec<[f64; 2]> {
        let mut out: Vec<[f64; 2]> = self
            .grid
            .iter()
            .flat_map(|&px| self.grid.iter().map(move |&pz| [px, pz]))
            .collect();
        out.extend_from_slice(&self.extra_starts);
        out
    }
}

/// One converged solution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Root {
    pub multipliers: [f64; 2],
    pub residual: f64,
    pub iterations: usize,
    pub start_index: usize,
    pub principal: bool,
    #[serde(skip)]
    pub path: Option<OptimalPath>,
    pub log_likelihood: f64,
    pub energy_drift: f64,
}

impl Root {
    pub fn path(&self) -> &OptimalPath {
        self.path.as_ref().expect("root carries its path")
    }
}

/// What happened to one start of the multi-start search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartOutcome {
    pub start: [f64; 2],
    pub multipliers: [f64; 2],
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShootReport {
    pub boundary: BoundaryConditions,
    /// Distinct roots, most likely first.
    pub roots: Vec<Root>,
    /// Outcomes of the search, at `search_step`.
    pub starts: Vec<StartOutcome>,
    pub search_step: f64,
}

impl ShootReport {
    pub fn principal(&self) -> &Root {
        &self.roots[0]
    }

    pub fn principal_path(&self) -> &OptimalPath {
        self.roots[0].path()
    }
}

struct Problem {
    system: PathSystem,
    bc: BoundaryConditions,
    n: usize,
    step: f64,
}

struct Solve {
    m: [f64; 2],
    residual: f64,
    iterations: usize,
    failure: Option<String>,
}

impl Problem {
    fn start(&self, m: [f64; 2]) -> PhasePoint {
        PhasePoint::new(self.bc.x_i, self.bc.z_i, m[0], m[1])
    }

    fn endpoint(&self, m: [f64; 2]) -> Result<Vector2<f64>> {
        let end = integrate_endpoint(&self.system, self.start(m), self.n, self.step)?;
        Ok(Vector2::new(end.x, end.z))
    }

    fn jacobian(&self, m: [f64; 2], h_rel: f64) -> Result<Matrix2<f64>> {
        let mut j = Matrix2::zeros();
        for col in 0..2 {
            let h = h_rel * (1.0 + m[col].abs());
            let mut up = m;
            up[col] += h;
            let mut dn = m;
            dn[col] -= h;
            let d = (self.endpoint(up)? - self.endpoint(dn)?) / (2.0 * h);
            j.set_column(col, &d);
        }
        Ok(j)
    }

    /// Damped Newton towards `target`, stopping below `stop` or on stall.
    fn newton(&self, m0: [f64; 2], target: Vector2<f64>, stop: f64, opts: &ShootOptions) -> Solve {
        let mut out = Solve {
            m: m0,
            residual: f64::INFINITY,
            iterations: 0,
            failure: None,
        };
        let mut f = match self.endpoint(m0) {
            Ok(e) => e - target,
            Err(e) => {
                out.failure = Some(e.to_string());
                return out;
            }
        };
        out.residual = f.norm();
        for it in 0..opts.max_iterations {
            if out.residual < stop {
                break;
            }
            out.iterations = it + 1;
            let j = match self.jacobian(out.m, opts.fd_step) {
                Ok(j) => j,
                Err(e) => {
                    out.failure = Some(e.to_string());
                    break;
                }
            };
            let scale = j.abs().max().max(f64::MIN_POSITIVE);
            let delta = match j.svd(true, true).solve(&(-f), opts.rcond * scale) {
                Ok(d) => d,
                Err(e) => {
                    out.failure = Some(e.to_string());
                    break;
                }
            };
            let mut lambda = 1.0;
            let mut improved = None;
            for _ in 0..=opts.max_backtracks {
                let trial = [out.m[0] + lambda * delta[0], out.m[1] + lambda * delta[1]];
                if let Ok(e) = self.endpoint(trial) {
                    let ft = e - target;
                    if ft.norm() < out.residual {
                        improved = Some((trial, ft));
                        break;
                    }
                }
                lambda *= opts.damping;
            }
            match improved {
                Some((trial, ft)) => {
                    out.m = trial;
                    f = ft;
                    out.residual = f.norm();
                }
                None => break,
            }
        }
        out
    }

    /// Local minima of the terminal miss over a uniform grid, best first.
    fn scan(&self, lo: f64, hi: f64, opts: &ShootOptions) -> Vec<[f64; 2]> {
        let n = opts.scan_points;
        if n < 3 || opts.scan_seeds == 0 || !(hi > lo) {
            return Vec::new();
        }
        let target = Vector2::new(self.bc.x_f, self.bc.z_f);
        let at = |i: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
        let miss: Vec<f64> = (0..n * n)
            .into_par_iter()
            .map(|k| {
                self.endpoint([at(k / n), at(k % n)])
                    .map(|e| (e - target).norm())
                    .unwrap_or(f64::INFINITY)
            })
            .collect();
        let mut minima: Vec<(f64, usize)> = Vec::new();
        for i in 0..n {
            for j in 0..n {
                let v = miss[i * n + j];
                if !v.is_finite() {
                    continue;
                }
                let mut lowest = true;
                for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (a, b) = (i as i64 + di, j as i64 + dj);
                        if (di, dj) == (0, 0) || a < 0 || b < 0 || a >= n as i64 || b >= n as i64 {
                            continue;
                        }
                        if miss[a as usize * n + b as usize] < v {
                            lowest = false;
                        }
                    }
                }
                if lowest {
                    minima.push((v, i * n + j));
                }
            }
        }
        minima.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        minima
            .into_iter()
            .take(opts.scan_seeds)
            .map(|(_, k)| [at(k / n), at(k % n)])
            .collect()
    }

    /// Newton from `start`; when that fails, walks the target from the
    /// start's own endpoint to the requested one in adaptive increments.
    fn solve_from(&self, start: [f64; 2], opts: &ShootOptions) -> StartOutcome {
        let target = Vector2::new(self.bc.x_f, self.bc.z_f);
        let mut outcome = StartOutcome {
            start,
            multipliers: start,
            residual: f64::INFINITY,
            iterations: 0,
            converged: false,
            failure: None,
        };
        let direct = self.newton(start, target, opts.polish_tolerance, opts);
        outcome.iterations = direct.iterations;
        outcome.multipliers = direct.m;
        outcome.residual = direct.residual;
        outcome.failure = direct.failure.clone();
        if direct.residual >= opts.tolerance && opts.continuation_steps > 0 {
            if let Ok(origin) = self.endpoint(start) {
                let mut m = start;
                let mut s = 0.0;
                let mut ds = 0.5f64;
                let min_ds = 1.0 / opts.continuation_steps as f64;
                let mut budget = opts.continuation_steps;
                while s < 1.0 && budget > 0 {
                    budget -= 1;
                    let next = (s + ds).min(1.0);
                    let goal = origin + (target - origin) * next;
                    let stop = if next >= 1.0 { opts.polish_tolerance } else { opts.tolerance * 1e-3 };
                    let step = self.newton(m, goal, stop, opts);
                    outcome.iterations += step.iterations;
                    if step.residual < opts.tolerance {
                        m = step.m;
                        s = next;
                        ds = (ds * 2.0).min(0.5);
                        outcome.multipliers = m;
                        outcome.residual = if s >= 1.0 { step.residual } else { outcome.residual };
                    } else if ds * 0.5 < min_ds {
                        outcome.failure = Some(format!(
                            "continuation stalled at fraction {s:.4} (residual {:e})",
                            step.residual
                        ));
                        break;
                    } else {
                        ds *= 0.5;
                    }
                }
                if s >= 1.0 {
                    let polish = self.newton(m, target, opts.polish_tolerance, opts);
                    outcome.iterations += polish.iterations;
                    outcome.multipliers = polish.m;
                    outcome.residual = polish.residual;
                }
            }
        }
        outcome.converged = outcome.residual < opts.tolerance;
        if outcome.converged {
            outcome.failure = None;
        } else if outcome.failure.is_none() {
            outcome.failure = Some(format!("stalled at residual {:e}", outcome.residual));
        }
        outcome
    }
}

/// Finds initial multipliers whose extremal path joins the boundary states.
///
/// Every start of the grid runs a damped Newton iteration on the terminal
/// miss, falling back to continuation in the target state. Converged roots
/// are deduplicated and returned most likely first.
pub fn shoot(bc: &BoundaryConditions, params: &PhysicalParams, opts: &ShootOptions) -> Result<ShootReport> {
    shoot_system(bc, PathSystem::new(params, opts.decay), opts)
}

/// As [`shoot`] for an explicit, possibly perturbed, system.
pub fn shoot_system(bc: &BoundaryConditions, system: PathSystem, opts: &ShootOptions) -> Result<ShootReport> {
    bc.validate()?;
    if !(opts.step.is_finite() && opts.step > 0.0) {
        return Err(Error::invalid("step", format!("must be positive, got {}", opts.step)));
    }
    if !(opts.damping > 0.0 && opts.damping < 1.0) {
        return Err(Error::invalid("damping", "must lie in (0, 1)"));
    }
    let fine = Problem {
        system,
        bc: *bc,
        n: steps_for(bc.horizon, opts.step, "horizon")?,
        step: opts.step,
    };
    let factor = coarse_factor(fine.n, opts.coarse_points);
    let search = Problem {
        system,
        bc: *bc,
        n: fine.n / factor,
        step: opts.step * factor as f64,
    };
    let mut starts = opts.starts();
    let lo = opts.grid.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = opts.grid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    starts.extend(search.scan(lo, hi, opts));
    if starts.is_empty() {
        return Err(Error::invalid("grid", "no starting multipliers"));
    }
    let outcomes: Vec<StartOutcome> = starts.par_iter().map(|s| search.solve_from(*s, opts)).collect();

    let mut candidates: Vec<(usize, &StartOutcome)> = Vec::new();
    for (idx, o) in outcomes.iter().enumerate() {
        let near = |c: &(usize, &StartOutcome)| {
            (c.1.multipliers[0] - o.multipliers[0]).hypot(c.1.multipliers[1] - o.multipliers[1]) < opts.dedup_distance
        };
        if o.converged && !candidates.iter().any(near) {
            candidates.push((idx, o));
        }
    }
    let target = Vector2::new(bc.x_f, bc.z_f);
    let polished: Vec<(usize, usize, Solve)> = candidates
        .par_iter()
        .map(|&(idx, o)| {
            if factor == 1 {
                let solve = Solve {
                    m: o.multipliers,
                    residual: o.residual,
                    iterations: 0,
                    failure: None,
                };
                return (idx, o.iterations, solve);
            }
            (idx, o.iterations, fine.newton(o.multipliers, target, opts.polish_tolerance, opts))
        })
        .collect();

    let mut roots: Vec<Root> = Vec::new();
    for (idx, coarse_iterations, solve) in polished {
        if solve.residual >= opts.tolerance {
            log::debug!("root from start {idx} lost on refinement (residual {:e})", solve.residual);
            continue;
        }
        let near = |r: &Root| {
            (r.multipliers[0] - solve.m[0]).hypot(r.multipliers[1] - solve.m[1]) < opts.dedup_distance
        };
        if roots.iter().any(near) {
            continue;
        }
        let mut path = match integrate_n(&fine.system, fine.start(solve.m), fine.n, fine.step) {
            Ok(p) => p,
            Err(_) => continue,
        };
        if roots.iter().any(|r| r.path().max_deviation(&path) < opts.path_dedup) {
            continue;
        }
        path.residual = Some(solve.residual);
        roots.push(Root {
            multipliers: solve.m,
            residual: solve.residual,
            iterations: coarse_iterations + solve.iterations,
            start_index: idx,
            principal: false,
            log_likelihood: path.log_likelihood,
            energy_drift: path.energy_drift(),
            path: Some(path),
        });
    }
    if roots.is_empty() {
        let best_residual = outcomes.iter().map(|o| o.residual).fold(f64::INFINITY, f64::min);
        return Err(Error::NoRoot {
            starts: outcomes.len(),
            best_residual,
            landscape: outcomes
                .iter()
                .map(|o| (o.start[0], o.start[1], o.residual))
                .collect(),
        });
    }
    roots.sort_by(|a, b| b.log_likelihood.total_cmp(&a.log_likelihood));
    roots[0].principal = true;
    for r in &roots[1..] {
        log::info!(
            "secondary root at p(0) = ({:.6}, {:.6}), log-likelihood {:.6} below principal",
            r.multipliers[0],
            r.multipliers[1],
            roots[0].log_likelihood - r.log_likelihood
        );
    }
    Ok(ShootReport {
        boundary: *bc,
        roots,
        starts: outcomes,
        search_step: search.step,
    })
}

/// Largest divisor of `n` leaving at least `points` steps.
fn coarse_factor(n: usize, points: usize) -> usize {
    if points == 0 || n <= points {
        return 1;
    }
    (1..=n / points).rev().find(|f| n % f == 0).unwrap_or(1)
}
