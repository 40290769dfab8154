//! Qubit state in the x–z plane of the Bloch sphere and its propagation.
//!
//! The state is stored as the pair `(x, z)`; the drive is about the y axis
//! and the measurement is along z, so `y` stays identically zero. Populations
//! follow `rho_11 = (1 - z) / 2` and coherence `rho_01 = x / 2`, with
//! `z = +1` the `|0>` state.
//!
//! Two kinds of update live here: the discrete per-sample update (a Rabi
//! rotation followed by a quantum Bayes update with extra coherence decay) and
//! the continuum-limit rate equations it approximates. The ensemble-average
//! (Lindblad) evolution has a closed form, also provided.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on the Bloch-disk norm before a state is considered invalid.
pub const NORM_SLACK: f64 = 1e-9;

/// A qubit state with `y = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlochState {
    pub x: f64,
    pub z: f64,
}

impl BlochState {
    /// The `+x` eigenstate, `(1, 0)`.
    pub const PLUS_X: BlochState = BlochState { x: 1.0, z: 0.0 };
    /// `|0>`, `z = +1`.
    pub const GROUND: BlochState = BlochState { x: 0.0, z: 1.0 };
    /// `|1>`, `z = -1`.
    pub const EXCITED: BlochState = BlochState { x: 0.0, z: -1.0 };

    pub fn new(x: f64, z: f64) -> Result<Self> {
        let state = BlochState { x, z };
        if !x.is_finite() || !z.is_finite() || state.norm() > 1.0 + NORM_SLACK {
            return Err(Error::InvalidState { x, z });
        }
        Ok(state)
    }

    /// Builds a state from the population of `|1>` and the (real) coherence.
    pub fn from_density(rho11: f64, rho01: f64) -> Self {
        BlochState {
            x: 2.0 * rho01,
            z: 1.0 - 2.0 * rho11,
        }
    }

    pub fn rho00(&self) -> f64 {
        0.5 * (1.0 + self.z)
    }

    pub fn rho11(&self) -> f64 {
        0.5 * (1.0 - self.z)
    }

    pub fn rho01(&self) -> f64 {
        0.5 * self.x
    }

    pub fn norm(&self) -> f64 {
        self.x.hypot(self.z)
    }

    /// `x^2 + z^2`, equal to 1 for pure states.
    pub fn purity(&self) -> f64 {
        self.x * self.x + self.z * self.z
    }

    pub fn distance(&self, other: &BlochState) -> f64 {
        (self.x - other.x).hypot(self.z - other.z)
    }

    /// Rescales onto the unit circle when the norm exceeds `1 + NORM_SLACK`;
    /// otherwise returns the state untouched.
    pub fn project_into_disk(self) -> Self {
        let n = self.norm();
        if n > 1.0 + NORM_SLACK {
            BlochState {
                x: self.x / n,
                z: self.z / n,
            }
        } else {
            self
        }
    }
}

/// Physical parameters of the drive, the measurement and the detector.
///
/// `gamma_ens` is the ensemble dephasing rate; the excess coherence decay
/// `gamma = gamma_ens - 1/(2 tau)` and the total efficiency are derived from
/// it and never set independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalParams {
    /// Rabi angular frequency, rad/s.
    pub omega: f64,
    /// Characteristic measurement time, s.
    pub tau: f64,
    /// Ensemble dephasing rate, 1/s.
    pub gamma_ens: f64,
    /// Sampling interval, s.
    pub dt: f64,
    /// Separation of the detector peaks, arbitrary voltage units.
    pub delta_v: f64,
}

impl PhysicalParams {
    /// Validates and builds a parameter set. `omega_hz` is `Omega / 2 pi`.
    pub fn from_rabi_hz(omega_hz: f64, tau: f64, gamma_ens: f64, dt: f64) -> Result<Self> {
        PhysicalParams {
            omega: 2.0 * std::f64::consts::PI * omega_hz,
            tau,
            gamma_ens,
            dt,
            delta_v: 1.0,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(name, format!("must be finite, got {v}")))
            }
        };
        finite("omega", self.omega)?;
        finite("tau", self.tau)?;
        finite("gamma", self.gamma_ens)?;
        finite("dt", self.dt)?;
        finite("delta_v", self.delta_v)?;
        if self.tau <= 0.0 {
            return Err(Error::invalid("tau", format!("must be positive, got {}", self.tau)));
        }
        if self.dt <= 0.0 {
            return Err(Error::invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if self.delta_v <= 0.0 {
            return Err(Error::invalid(
                "delta_v",
                format!("must be positive, got {}", self.delta_v),
            ));
        }
        let floor = 1.0 / (2.0 * self.tau);
        if self.gamma_ens < floor * (1.0 - 1e-12) {
            return Err(Error::invalid(
                "gamma",
                format!(
                    "ensemble dephasing {:e} 1/s is below the measurement floor 1/(2 tau) = {:e} 1/s",
                    self.gamma_ens, floor
                ),
            ));
        }
        if self.dt > self.tau / 5.0 {
            log::warn!(
                "sampling step dt = {:e} s is not small compared with tau = {:e} s",
                self.dt,
                self.tau
            );
        }
        Ok(self)
    }

    /// Excess coherence decay `gamma = Gamma - 1/(2 tau)`, clamped at zero.
    pub fn gamma_extra(&self) -> f64 {
        (self.gamma_ens - 1.0 / (2.0 * self.tau)).max(0.0)
    }

    pub fn eta_tot(&self) -> f64 {
        1.0 / (2.0 * self.tau * self.gamma_ens)
    }

    pub fn omega_hz(&self) -> f64 {
        self.omega / (2.0 * std::f64::consts::PI)
    }

    /// Dimensionless readout `r = 2 V / delta_v`.
    pub fn r_from_volts(&self, v: f64) -> f64 {
        2.0 * v / self.delta_v
    }

    pub fn volts_from_r(&self, r: f64) -> f64 {
        0.5 * r * self.delta_v
    }

    /// Number of samples covering `duration`, which must be an integer
    /// multiple of `dt` to within one part in 1e9.
    pub fn steps_for(&self, duration: f64) -> Result<usize> {
        steps_for(duration, self.dt, "duration")
    }
}

pub(crate) fn steps_for(duration: f64, step: f64, field: &str) -> Result<usize> {
    if !duration.is_finite() || duration < 0.0 {
        return Err(Error::invalid(field, format!("must be non-negative, got {duration}")));
    }
    let n = (duration / step).round();
    if (n * step - duration).abs() > 1e-9 * duration.max(step) {
        return Err(Error::invalid(
            field,
            format!("{duration:e} s is not a multiple of the step {step:e} s"),
        ));
    }
    Ok(n as usize)
}

/// First-order Rabi update of the density matrix over one step:
/// `rho01' = rho01 + (Omega/2)(rho00 - rho11) dt`, then
/// `rho11' = rho11 + (Omega/2)(rho01' + rho10') dt`.
///
/// The result is not projected back into the Bloch disk; the scheme lets the
/// norm grow by `O(Omega dt)`.
pub fn unitary_step(state: BlochState, omega: f64, dt: f64) -> BlochState {
    let half = 0.5 * omega * dt;
    let rho01 = state.rho01() + half * (state.rho00() - state.rho11());
    let rho11 = state.rho11() + half * (2.0 * rho01);
    BlochState::from_density(rho11, rho01)
}

/// Exact rotation about y by the angle `omega * dt`.
pub fn rotation_step(state: BlochState, omega: f64, dt: f64) -> BlochState {
    let (s, c) = (omega * dt).sin_cos();
    BlochState {
        x: c * state.x + s * state.z,
        z: -s * state.x + c * state.z,
    }
}

/// Quantum Bayes update for a dimensionless readout `r` collected over one
/// sampling interval, with the additional coherence factor `exp(-gamma dt)`.
///
/// The population update is the posterior
/// `rho11 = (rho11/rho00) e^{-2 r dt/tau} / (1 + (rho11/rho00) e^{-2 r dt/tau})`,
/// evaluated here as `z' = tanh(atanh z + r dt / tau)`. The coherence scales
/// with `sqrt(rho11 rho00)` of the posterior over the prior.
///
/// On an eigenstate the likelihood ratio cannot move the populations; only the
/// coherence factor is applied.
pub fn bayes_step(state: BlochState, r: f64, params: &PhysicalParams) -> BlochState {
    let decay = (-params.gamma_extra() * params.dt).exp();
    let z = state.z;
    if z.abs() >= 1.0 {
        return BlochState {
            x: state.x * decay,
            z: z.signum(),
        };
    }
    let u = z.atanh();
    let u_new = u + r * params.dt / params.tau;
    // cosh(u) / cosh(u') == sqrt(1 - z'^2) / sqrt(1 - z^2)
    let coherence = u.cosh() / u_new.cosh();
    BlochState {
        x: state.x * coherence * decay,
        z: u_new.tanh(),
    }
}

/// Bayes update for a raw detector voltage.
pub fn bayes_step_volts(state: BlochState, v: f64, params: &PhysicalParams) -> BlochState {
    bayes_step(state, params.r_from_volts(v), params)
}

/// Continuum-limit rates `(dx/dt, dz/dt)` for a given readout `r`.
pub fn continuum_derivatives(x: f64, z: f64, r: f64, params: &PhysicalParams) -> (f64, f64) {
    let gamma = params.gamma_extra();
    let rt = r / params.tau;
    (
        -gamma * x + params.omega * z - x * z * rt,
        -params.omega * x + (1.0 - z * z) * rt,
    )
}

/// Closed-form ensemble evolution under `dx/dt = -Gamma x + Omega z`,
/// `dz/dt = -Omega x`, starting from `(x0, z0)`.
///
/// With `lambda = sqrt(Omega^2 - (Gamma/2)^2)`; when `lambda^2 < 0` the
/// trigonometric functions continue to their hyperbolic counterparts, and at
/// `lambda = 0` the limit `sin(lambda t)/lambda -> t` is used.
pub fn lindblad_ensemble(x0: f64, z0: f64, omega: f64, gamma_ens: f64, t: f64) -> (f64, f64) {
    let half = 0.5 * gamma_ens;
    let disc = omega * omega - half * half;
    let (c, s) = if disc > 0.0 {
        let lambda = disc.sqrt();
        let (sin, cos) = (lambda * t).sin_cos();
        (cos, sin / lambda)
    } else if disc < 0.0 {
        let kappa = (-disc).sqrt();
        ((kappa * t).cosh(), (kappa * t).sinh() / kappa)
    } else {
        (1.0, t)
    };
    let envelope = (-half * t).exp();
    (
        envelope * (x0 * c - 0.5 * (gamma_ens * x0 - 2.0 * omega * z0) * s),
        envelope * (z0 * c + 0.5 * (gamma_ens * z0 - 2.0 * omega * x0) * s),
    )
}

/// Total quantum efficiency `1 / (2 tau Gamma)`.
pub fn efficiency(tau: f64, gamma_ens: f64) -> Result<f64> {
    positive("tau", tau)?;
    positive("gamma", gamma_ens)?;
    Ok(1.0 / (2.0 * tau * gamma_ens))
}

/// Efficiency factor from extra environmental dephasing,
/// `(1 + kappa / (8 chi^2 nbar T2*))^-1`. Rates in rad/s, `t2star` in s.
pub fn env_dephasing_efficiency(kappa: f64, chi: f64, nbar: f64, t2star: f64) -> Result<f64> {
    positive("kappa", kappa)?;
    positive("chi", chi.abs())?;
    positive("nbar", nbar)?;
    positive("t2star", t2star)?;
    Ok(1.0 / (1.0 + kappa / (8.0 * chi * chi * nbar * t2star)))
}

/// Characteristic measurement time `kappa / (16 chi^2 nbar eta)` of a
/// dispersive cavity readout.
pub fn measurement_time(kappa: f64, chi: f64, nbar: f64, eta: f64) -> Result<f64> {
    positive("kappa", kappa)?;
    positive("chi", chi.abs())?;
    positive("nbar", nbar)?;
    positive("eta", eta)?;
    Ok(kappa / (16.0 * chi * chi * nbar * eta))
}

fn positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be positive, got {v}")))
    }
}

/// How one sampling interval is propagated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagator {
    /// [`unitary_step`] then [`bayes_step`]; the readout is conditioned on the
    /// state at the start of the interval.
    FirstOrder,
    /// [`rotation_step`] then [`bayes_step`]; readout conditioned on the state
    /// at the start of the interval.
    ExactRotation,
    /// Half rotation, Bayes update, half rotation. The readout is conditioned
    /// on the state the Bayes update acts on, which makes the ensemble mean a
    /// second-order approximation of the Lindblad flow.
    #[default]
    Symmetric,
}

impl Propagator {
    /// The state whose `z` sets the readout distribution for the interval
    /// starting at `state`.
    pub fn measured_state(self, state: BlochState, params: &PhysicalParams) -> BlochState {
        match self {
            Propagator::FirstOrder | Propagator::ExactRotation => state,
            Propagator::Symmetric => rotation_step(state, params.omega, 0.5 * params.dt),
        }
    }

    /// Advances `state` by one interval given the readout `r`.
    pub fn step(self, state: BlochState, r: f64, params: &PhysicalParams) -> BlochState {
        match self {
            Propagator::FirstOrder => {
                let rotated = unitary_step(state, params.omega, params.dt).project_into_disk();
                bayes_step(rotated, r, params)
            }
            Propagator::ExactRotation => {
                bayes_step(rotation_step(state, params.omega, params.dt), r, params)
            }
            Propagator::Symmetric => {
                let half = 0.5 * params.dt;
                let mid = rotation_step(state, params.omega, half);
                rotation_step(bayes_step(mid, r, params), params.omega, half)
            }
        }
    }
}
