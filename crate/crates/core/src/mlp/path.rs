use std::io::Write;

use serde::{Deserialize, Serialize};

use super::system::{PathSystem, PhasePoint};
use crate::detector::{log_likelihood_unchecked, DetectorModel};
use crate::dynamics::{steps_for, BlochState, PhysicalParams, Propagator};
use crate::error::{Error, Result};
use crate::simulator::Trajectory;

/// Multiplier magnitude beyond which an integration is considered divergent.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Offset kept between `tanh^-1` arguments and `+-1`.
pub(crate) const ATANH_MARGIN: f64 = 1e-12;

/// A solution of the extremal-path equations sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalPath {
    pub step: f64,
    pub points: Vec<PhasePoint>,
    pub energy: Vec<f64>,
    /// Bloch distance of the endpoint from the requested final state, when
    /// the path was solved against boundary conditions.
    pub residual: Option<f64>,
    /// [`path_action`] of the path's own `(z, r)` samples on its grid.
    pub log_likelihood: f64,
}

impl OptimalPath {
    fn from_points(points: Vec<PhasePoint>, step: f64, system: &PathSystem) -> Self {
        let energy = points.iter().map(|p| system.energy(p)).collect();
        let model = DetectorModel {
            delta_v: 1.0,
            tau: system.tau,
            dt: step,
        };
        let n = points.len().saturating_sub(1);
        let log_likelihood = path_action(points[..n].iter().map(|p| (p.z, p.readout())), &model);
        OptimalPath {
            step,
            points,
            energy,
            residual: None,
            log_likelihood,
        }
    }

    pub fn horizon(&self) -> f64 {
        (self.points.len() - 1) as f64 * self.step
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.points.len()).map(|k| k as f64 * self.step).collect()
    }

    pub fn readouts(&self) -> Vec<f64> {
        self.points.iter().map(PhasePoint::readout).collect()
    }

    pub fn start(&self) -> PhasePoint {
        self.points[0]
    }

    pub fn end(&self) -> PhasePoint {
        *self.points.last().expect("path has at least one point")
    }

    /// `max |E(t) - E(0)| / |E(0)|`.
    pub fn energy_drift(&self) -> f64 {
        let e0 = self.energy[0];
        let worst = self.energy.iter().map(|e| (e - e0).abs()).fold(0.0, f64::max);
        worst / e0.abs().max(f64::MIN_POSITIVE)
    }

    /// Linear interpolation of the Bloch state at time `t`.
    pub fn state_at(&self, t: f64) -> BlochState {
        let s = (t / self.step).clamp(0.0, (self.points.len() - 1) as f64);
        let k = (s.floor() as usize).min(self.points.len().saturating_sub(2));
        if self.points.len() == 1 {
            return self.points[0].state();
        }
        let w = s - k as f64;
        let (a, b) = (self.points[k], self.points[k + 1]);
        BlochState {
            x: a.x + w * (b.x - a.x),
            z: a.z + w * (b.z - a.z),
        }
    }

    /// Largest coordinate difference from another path on the same grid.
    pub fn max_deviation(&self, other: &OptimalPath) -> f64 {
        self.points
            .iter()
            .zip(&other.points)
            .map(|(a, b)| (a.x - b.x).abs().max((a.z - b.z).abs()))
            .fold(0.0, f64::max)
    }

    /// Writes `t,x,z,p_x,p_z,r,energy`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t,x,z,p_x,p_z,r,energy")?;
        for (k, (p, e)) in self.points.iter().zip(&self.energy).enumerate() {
            writeln!(
                out,
                "{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
                k as f64 * self.step,
                p.x,
                p.z,
                p.p_x,
                p.p_z,
                p.readout(),
                e
            )?;
        }
        Ok(())
    }

    /// Parses the output of [`OptimalPath::write_csv`].
    pub fn read_csv(text: &str, system: &PathSystem) -> Result<Self> {
        let mut points = Vec::new();
        let mut times = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<f64> = line
                .split(',')
                .map(|c| c.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Record {
                    path: None,
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            if cols.len() != 7 {
                return Err(Error::Record {
                    path: None,
                    line: i + 1,
                    reason: format!("expected 7 columns, got {}", cols.len()),
                });
            }
            times.push(cols[0]);
            points.push(PhasePoint::new(cols[1], cols[2], cols[3], cols[4]));
        }
        if points.len() < 2 {
            return Err(Error::invalid("path", "need at least two rows"));
        }
        let step = times[1] - times[0];
        Ok(OptimalPath::from_points(points, step, system))
    }
}

fn rk4_step(system: &PathSystem, y: [f64; 4], h: f64) -> [f64; 4] {
    let f = |v: [f64; 4]| system.rhs(&PhasePoint::from_array(v));
    let add = |a: [f64; 4], b: [f64; 4], s: f64| [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2], a[3] + s * b[3]];
    let k1 = f(y);
    let k2 = f(add(y, k1, 0.5 * h));
    let k3 = f(add(y, k2, 0.5 * h));
    let k4 = f(add(y, k3, h));
    let mut out = y;
    for i in 0..4 {
        out[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

fn check_finite(y: &[f64; 4], t: f64) -> Result<()> {
    let magnitude = y[2].hypot(y[3]);
    if !y.iter().all(|v| v.is_finite()) || magnitude > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { t, magnitude });
    }
    Ok(())
}

/// Endpoint after `n` RK4 steps, without storing the path.
pub(crate) fn integrate_endpoint(system: &PathSystem, start: PhasePoint, n: usize, step: f64) -> Result<PhasePoint> {
    let mut y = start.to_array();
    for k in 0..n {
        y = rk4_step(system, y, step);
        check_finite(&y, (k + 1) as f64 * step)?;
    }
    Ok(PhasePoint::from_array(y))
}

pub(crate) fn integrate_n(system: &PathSystem, start: PhasePoint, n: usize, step: f64) -> Result<OptimalPath> {
    let mut points = Vec::with_capacity(n + 1);
    let mut y = start.to_array();
    check_finite(&y, 0.0)?;
    points.push(start);
    for k in 0..n {
        y = rk4_step(system, y, step);
        check_finite(&y, (k + 1) as f64 * step)?;
        points.push(PhasePoint::from_array(y));
    }
    Ok(OptimalPath::from_points(points, step, system))
}

/// Integrates the extremal-path equations with classic fixed-step RK4.
/// `horizon` must be an integer multiple of `step`.
pub fn integrate_path(start: PhasePoint, horizon: f64, step: f64, system: &PathSystem) -> Result<OptimalPath> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::invalid("step", format!("must be positive, got {step}")));
    }
    let n = steps_for(horizon, step, "horizon")?;
    integrate_n(system, start, n, step)
}

pub(crate) fn clamped_atanh(z: f64, what: &str) -> Result<f64> {
    if !z.is_finite() || z.abs() >= 1.0 {
        return Err(Error::invalid(
            what,
            format!("{z} is on or outside the poles; tanh^-1 diverges"),
        ));
    }
    let limit = 1.0 - ATANH_MARGIN;
    if z.abs() > limit {
        log::warn!("{what} = {z} clamped to {limit} before tanh^-1");
    }
    Ok(z.clamp(-limit, limit).atanh())
}

/// Closed-form most-likely path without drive, from `(1, 0)` to `z_f`
/// in time `horizon`: `x = e^{-gamma t} sech(r t / tau)`,
/// `z = tanh(r t / tau)` with constant `r = (tau / T) tanh^-1 z_f`.
pub fn analytic_undriven(z_f: f64, horizon: f64, params: &PhysicalParams, step: f64) -> Result<OptimalPath> {
    analytic_undriven_from(1.0, z_f, horizon, params, step)
}

/// As [`analytic_undriven`], from `(x_i, 0)`. The `x` equation is linear in
/// `x`, so the solution scales with `x_i`.
pub fn analytic_undriven_from(
    x_i: f64,
    z_f: f64,
    horizon: f64,
    params: &PhysicalParams,
    step: f64,
) -> Result<OptimalPath> {
    if params.omega != 0.0 {
        return Err(Error::invalid("omega", "the closed form requires zero drive"));
    }
    if !(horizon > 0.0) {
        return Err(Error::invalid("horizon", format!("must be positive, got {horizon}")));
    }
    if !(x_i.is_finite() && x_i.abs() <= 1.0) {
        return Err(Error::invalid("x_i", format!("must lie in [-1, 1], got {x_i}")));
    }
    let n = steps_for(horizon, step, "horizon")?;
    let r_bar = params.tau / horizon * clamped_atanh(z_f, "z_f")?;
    let gamma = params.gamma_extra();
    let points = (0..=n)
        .map(|k| {
            let t = k as f64 * step;
            let u = r_bar * t / params.tau;
            let z = u.tanh();
            let x = x_i * (-gamma * t).exp() / u.cosh();
            // constant readout with p_x = 0: r = z + p_z (1 - z^2)
            let p_z = (r_bar - z) * u.cosh().powi(2);
            PhasePoint::new(x, z, 0.0, p_z)
        })
        .collect();
    let system = super::system::PathSystem::new(params, super::system::DecayModel::Excess);
    let mut path = OptimalPath::from_points(points, step, &system);
    path.residual = Some(0.0);
    Ok(path)
}

/// `ln prod_k P(r_k | z_k)`: the sum of per-sample readout log-likelihoods.
/// The sampling interval is `model.dt`.
pub fn path_action<I>(samples: I, model: &DetectorModel) -> f64
where
    I: IntoIterator<Item = (f64, f64)>,
{
    samples
        .into_iter()
        .map(|(z, r)| log_likelihood_unchecked(r, z.clamp(-1.0, 1.0), model))
        .sum()
}

/// [`path_action`] of a simulated or reconstructed trajectory, each readout
/// evaluated against the state it was conditioned on.
pub fn trajectory_log_likelihood(traj: &Trajectory) -> f64 {
    let model = DetectorModel::from_params(&traj.params);
    path_action(traj.measured_z().zip(traj.readouts.iter().copied()), &model)
}

/// The discrete stochastic action
/// `-p_{-1}.(q_0 - q_I) - p_n.(q_n - q_F) + sum_k [-p_k.(q_{k+1} - E[q_k, r_k]) + ln P(r_k | q_k)]`
/// for a state sequence, its readouts and a full set of multipliers
/// `p_{-1}, ..., p_n` (`readouts.len() + 2` entries).
pub fn discrete_action(
    states: &[BlochState],
    readouts: &[f64],
    multipliers: &[[f64; 2]],
    initial: BlochState,
    target: BlochState,
    params: &PhysicalParams,
    propagator: Propagator,
) -> Result<f64> {
    let n = readouts.len();
    if states.len() != n + 1 || multipliers.len() != n + 2 {
        return Err(Error::invalid(
            "multipliers",
            format!(
                "need {} states and {} multipliers for {n} readouts",
                n + 1,
                n + 2
            ),
        ));
    }
    let model = DetectorModel::from_params(params);
    let dot = |p: [f64; 2], a: BlochState, b: BlochState| p[0] * (a.x - b.x) + p[1] * (a.z - b.z);
    let mut s = -dot(multipliers[0], states[0], initial) - dot(multipliers[n + 1], states[n], target);
    for k in 0..n {
        let predicted = propagator.step(states[k], readouts[k], params);
        let measured = propagator.measured_state(states[k], params);
        s += -dot(multipliers[k + 1], states[k + 1], predicted)
            + log_likelihood_unchecked(readouts[k], measured.z.clamp(-1.0, 1.0), &model);
    }
    Ok(s)
}

/// Detector voltage corresponding to the optimal readout, `V = delta_v r / 2`.
pub fn optimal_signal(path: &OptimalPath, delta_v: f64) -> Vec<f64> {
    path.points.iter().map(|p| 0.5 * delta_v * p.readout()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::system::DecayModel;
    use crate::rng::{substream, Purpose};
    use crate::simulator::simulate_trajectory;
    use approx::assert_abs_diff_eq;

    fn fig3() -> PhysicalParams {
        PhysicalParams::from_rabi_hz(0.0, 1.25e-6, 0.94e6, 16e-9).unwrap()
    }

    fn fig4() -> PhysicalParams {
        PhysicalParams::from_rabi_hz(1.08e6, 315e-9, 3.85e6, 16e-9).unwrap()
    }

    #[test]
    fn analytic_zero_target() {
        let p = fig3();
        let path = analytic_undriven(0.0, 1.424e-6, &p, 1e-9).unwrap();
        for (k, pt) in path.points.iter().enumerate() {
            let t = k as f64 * 1e-9;
            assert_eq!(pt.z, 0.0);
            assert_abs_diff_eq!(pt.x, (-p.gamma_extra() * t).exp(), epsilon = 1e-15);
            assert_eq!(pt.readout(), 0.0);
        }
    }

    #[test]
    fn analytic_fig3_readout_and_endpoint() {
        let p = fig3();
        let path = analytic_undriven(-0.85, 1.424e-6, &p, 1e-9).unwrap();
        let r_bar = 1.25 / 1.424 * (-0.85f64).atanh();
        assert_abs_diff_eq!(r_bar, -1.1027, epsilon = 1e-4);
        for pt in &path.points {
            assert_abs_diff_eq!(pt.readout(), r_bar, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(path.end().z, -0.85, epsilon = 1e-14);
        // E = (r^2 - 1) / (2 tau) along the closed form
        for e in &path.energy {
            assert_abs_diff_eq!(*e * p.tau, (r_bar * r_bar - 1.0) / 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn analytic_rejects_poles_and_drive() {
        assert!(analytic_undriven(1.0, 1e-6, &fig3(), 1e-9).is_err());
        assert!(analytic_undriven(-1.0, 1e-6, &fig3(), 1e-9).is_err());
        assert!(analytic_undriven(0.5, 1e-6, &fig4(), 1e-9).is_err());
        assert!(analytic_undriven(1.0 - 1e-13, 1e-6, &fig3(), 1e-9).is_ok());
    }

    #[test]
    fn integration_matches_closed_form() {
        let p = fig3();
        let analytic = analytic_undriven(-0.85, 1.424e-6, &p, 1e-10).unwrap();
        let sys = PathSystem::new(&p, DecayModel::Excess);
        let path = integrate_path(analytic.start(), 1.424e-6, 1e-10, &sys).unwrap();
        assert!(path.max_deviation(&analytic) < 1e-8, "{}", path.max_deviation(&analytic));
    }

    #[test]
    fn zero_horizon_is_single_point() {
        let sys = PathSystem::new(&fig4(), DecayModel::Excess);
        let start = PhasePoint::new(0.88, 0.0, 0.3, -0.2);
        let path = integrate_path(start, 0.0, 1e-9, &sys).unwrap();
        assert_eq!(path.points, vec![start]);
        assert_eq!(path.log_likelihood, 0.0);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let sys = PathSystem::new(&fig4(), DecayModel::Excess);
        let start = PhasePoint::new(0.88, 0.0, 0.4, -0.6);
        let horizon = 0.464e-6;
        let reference = integrate_path(start, horizon, 0.25e-10, &sys).unwrap().end();
        let err = |h: f64| {
            let e = integrate_path(start, horizon, h, &sys).unwrap().end();
            (e.x - reference.x).hypot(e.z - reference.z)
        };
        let ratio = err(8e-9) / err(4e-9);
        assert!((13.0..19.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn divergence_is_reported() {
        let sys = PathSystem::new(&fig4(), DecayModel::Excess);
        let start = PhasePoint::new(0.88, 0.0, 5e5, 5e5);
        assert!(matches!(
            integrate_path(start, 1e-6, 1e-9, &sys),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn energy_conserved_along_integration() {
        let sys = PathSystem::new(&fig4(), DecayModel::Excess);
        let path = integrate_path(PhasePoint::new(0.88, 0.0, 0.2, -0.3), 1.424e-6, 1e-9, &sys).unwrap();
        assert!(path.energy_drift() < 1e-6, "{:e}", path.energy_drift());
    }

    #[test]
    fn action_is_maximal_at_centered_eigenstate() {
        let model = DetectorModel::new(1.0, 315e-9, 16e-9).unwrap();
        let centered = path_action((0..50).map(|_| (1.0, 1.0)), &model);
        for z in [0.99, 0.5, 0.0, -1.0] {
            assert!(path_action((0..50).map(|_| (z, 1.0)), &model) < centered);
        }
    }

    #[test]
    fn discrete_action_reduces_to_log_likelihood() {
        let p = fig4();
        let mut rng = substream(3, Purpose::Trajectory, 0);
        let initial = BlochState::new(0.88, 0.0).unwrap();
        for prop in [Propagator::FirstOrder, Propagator::Symmetric] {
            let t = simulate_trajectory(initial, &p, 0.8e-6, prop, &mut rng).unwrap();
            let mut mult_rng = substream(4, Purpose::Trajectory, 1);
            use rand::Rng;
            let multipliers: Vec<[f64; 2]> = (0..t.readouts.len() + 2)
                .map(|_| [mult_rng.random_range(-5.0..5.0), mult_rng.random_range(-5.0..5.0)])
                .collect();
            let s = discrete_action(&t.states, &t.readouts, &multipliers, initial, t.final_state(), &p, prop).unwrap();
            assert_abs_diff_eq!(s, trajectory_log_likelihood(&t), epsilon = 1e-9);
        }
    }

    #[test]
    fn action_refinement_up_to_normalization() {
        // the offset-free action converges to -int (r^2 - 2 r z + 1) / (2 tau) dt
        let p = fig3();
        let path = analytic_undriven(-0.85, 1.424e-6, &p, 1e-9).unwrap();
        let model_at = |dt: f64| DetectorModel::new(1.0, p.tau, dt).unwrap();
        let reduced = |stride: usize| {
            let dt = stride as f64 * 1e-9;
            let samples: Vec<(f64, f64)> = path.points[..path.points.len() - 1]
                .iter()
                .step_by(stride)
                .map(|pt| (pt.z, pt.readout()))
                .collect();
            let model = model_at(dt);
            path_action(samples.iter().copied(), &model) - samples.len() as f64 * model.log_normalization()
        };
        let r = path.points[0].readout();
        let exact = -(0..=14240)
            .map(|k| {
                let t = k as f64 * 1e-10;
                let z = (r * t / p.tau).tanh();
                let w = if k == 0 || k == 14240 { 0.5 } else { 1.0 };
                w * (r * r - 2.0 * r * z + 1.0)
            })
            .sum::<f64>()
            * 1e-10
            / (2.0 * p.tau);
        let (coarse, fine) = (reduced(8), reduced(4));
        assert!((fine - exact).abs() < (coarse - exact).abs());
        assert!((fine - exact).abs() < 0.01 * exact.abs(), "{fine} vs {exact}");
    }

    #[test]
    fn constant_signal_for_closed_form() {
        let p = fig3();
        let path = analytic_undriven(-0.85, 1.424e-6, &p, 1e-9).unwrap();
        let v = optimal_signal(&path, 0.6);
        let r_bar = path.points[0].readout();
        for vi in v {
            assert_abs_diff_eq!(vi, 0.3 * r_bar, epsilon = 1e-12);
        }
        let flat = analytic_undriven(0.0, 1e-6, &p, 1e-9).unwrap();
        assert!(optimal_signal(&flat, 0.6).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn csv_roundtrip() {
        let p = fig3();
        let sys = PathSystem::new(&p, DecayModel::Excess);
        let path = analytic_undriven(-0.5, 0.2e-6, &p, 1e-9).unwrap();
        let mut buf = Vec::new();
        path.write_csv(&mut buf).unwrap();
        let back = OptimalPath::read_csv(std::str::from_utf8(&buf).unwrap(), &sys).unwrap();
        assert_eq!(back.points, path.points);
    }
}
