use serde::{Deserialize, Serialize};

use crate::dynamics::{BlochState, PhysicalParams};

/// A point of the extremal-path phase space: Bloch coordinates and their
/// conjugate multipliers. The optimal readout is derived on demand.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub x: f64,
    pub z: f64,
    pub p_x: f64,
    pub p_z: f64,
}

impl PhasePoint {
    pub fn new(x: f64, z: f64, p_x: f64, p_z: f64) -> Self {
        PhasePoint { x, z, p_x, p_z }
    }

    pub fn from_array(v: [f64; 4]) -> Self {
        PhasePoint::new(v[0], v[1], v[2], v[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.z, self.p_x, self.p_z]
    }

    /// Optimal readout `r = z + p_z (1 - z^2) - p_x x z`.
    pub fn readout(&self) -> f64 {
        self.z + self.p_z * (1.0 - self.z * self.z) - self.p_x * self.x * self.z
    }

    pub fn state(&self) -> BlochState {
        BlochState { x: self.x, z: self.z }
    }

    pub fn multiplier_norm(&self) -> f64 {
        self.p_x.hypot(self.p_z)
    }
}

/// Which decay rate enters the `x` equation of the extremal-path system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayModel {
    /// `gamma = Gamma - 1/(2 tau)`, the decay left after the measurement
    /// backaction is accounted for explicitly.
    #[default]
    Excess,
    /// The full ensemble rate `Gamma`.
    Ensemble,
}

/// The autonomous ODE system whose solutions extremize the path likelihood.
///
/// `drift` adds constants to the right-hand sides of the multiplier
/// equations; it is zero except when probing the neighbourhood of a solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathSystem {
    pub omega: f64,
    pub tau: f64,
    pub gamma: f64,
    pub drift: [f64; 2],
}

impl PathSystem {
    pub fn new(params: &PhysicalParams, decay: DecayModel) -> Self {
        PathSystem {
            omega: params.omega,
            tau: params.tau,
            gamma: match decay {
                DecayModel::Excess => params.gamma_extra(),
                DecayModel::Ensemble => params.gamma_ens,
            },
            drift: [0.0, 0.0],
        }
    }

    pub fn with_drift(self, drift: [f64; 2]) -> Self {
        PathSystem { drift, ..self }
    }

    /// Time derivatives of `(x, z, p_x, p_z)`.
    pub fn rhs(&self, p: &PhasePoint) -> [f64; 4] {
        let PhasePoint { x, z, p_x, p_z } = *p;
        let rt = p.readout() / self.tau;
        [
            -self.gamma * x + self.omega * z - x * z * rt,
            -self.omega * x + (1.0 - z * z) * rt,
            self.gamma * p_x + self.omega * p_z + p_x * z * rt + self.drift[0],
            -self.omega * p_x + (p_x * x + 2.0 * p_z * z - 1.0) * rt + self.drift[1],
        ]
    }

    /// `p . F(q, r) - (r^2 - 2 r z + 1) / (2 tau)` at an arbitrary readout.
    pub fn hamiltonian_at(&self, p: &PhasePoint, r: f64) -> f64 {
        let PhasePoint { x, z, p_x, p_z } = *p;
        let rt = r / self.tau;
        let fx = -self.gamma * x + self.omega * z - x * z * rt;
        let fz = -self.omega * x + (1.0 - z * z) * rt;
        p_x * fx + p_z * fz - (r * r - 2.0 * r * z + 1.0) / (2.0 * self.tau)
    }

    /// The conserved stochastic energy, the Hamiltonian at the optimal readout.
    pub fn energy(&self, p: &PhasePoint) -> f64 {
        self.hamiltonian_at(p, p.readout())
    }
}

/// Right-hand side of the extremal-path equations with the default decay.
pub fn ode_rhs(p: &PhasePoint, params: &PhysicalParams) -> [f64; 4] {
    PathSystem::new(params, DecayModel::Excess).rhs(p)
}

/// Stochastic energy `p_x x' + p_z z' - (r^2 - 2 r z + 1)/(2 tau)`.
pub fn stochastic_energy(p: &PhasePoint, params: &PhysicalParams) -> f64 {
    PathSystem::new(params, DecayModel::Excess).energy(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn params() -> PhysicalParams {
        PhysicalParams::from_rabi_hz(1.08e6, 315e-9, 3.85e6, 16e-9).unwrap()
    }

    #[test]
    fn zero_multipliers_on_equator() {
        let p = params();
        let pt = PhasePoint::new(0.7, 0.0, 0.0, 0.0);
        assert_eq!(pt.readout(), 0.0);
        let d = ode_rhs(&pt, &p);
        assert_abs_diff_eq!(d[0], -p.gamma_extra() * 0.7);
        assert_abs_diff_eq!(d[1], -p.omega * 0.7);
    }

    #[test]
    fn eigenstate_is_pinned() {
        let p = PhysicalParams::from_rabi_hz(0.0, 315e-9, 3.85e6, 16e-9).unwrap();
        let pt = PhasePoint::new(0.0, 1.0, 0.0, 0.4);
        assert_eq!(pt.readout(), 1.0);
        assert_eq!(ode_rhs(&pt, &p)[1], 0.0);
    }

    #[test]
    fn energy_at_rest() {
        let p = params();
        let e = stochastic_energy(&PhasePoint::new(0.3, 0.0, 0.0, 0.0), &p);
        assert_abs_diff_eq!(e, -1.0 / (2.0 * p.tau), epsilon = 1e-6);
    }

    #[test]
    fn ensemble_decay_toggle() {
        let p = params();
        assert_eq!(PathSystem::new(&p, DecayModel::Ensemble).gamma, p.gamma_ens);
        assert_eq!(PathSystem::new(&p, DecayModel::Excess).gamma, p.gamma_extra());
    }

    /// Independent partial derivatives of the action integrand with the
    /// readout held as a free variable.
    fn partials(sys: &PathSystem, p: &PhasePoint, r: f64) -> [f64; 5] {
        let PhasePoint { x, z, p_x, p_z } = *p;
        let (w, g, tau) = (sys.omega, sys.gamma, sys.tau);
        [
            // dH/dx
            p_x * (-g - z * r / tau) - p_z * w,
            // dH/dz
            p_x * (w - x * r / tau) + p_z * (-2.0 * z * r / tau) + r / tau,
            // dH/dp_x
            -g * x + w * z - x * z * r / tau,
            // dH/dp_z
            -w * x + (1.0 - z * z) * r / tau,
            // dH/dr
            (-p_x * x * z + p_z * (1.0 - z * z) - (r - z)) / tau,
        ]
    }

    proptest! {
        #[test]
        fn rhs_is_hamiltonian_flow(x in -1.0..1.0f64, z in -1.0..1.0f64, px in -3.0..3.0f64, pz in -3.0..3.0f64) {
            let sys = PathSystem::new(&params(), DecayModel::Excess);
            let pt = PhasePoint::new(x, z, px, pz);
            let r = pt.readout();
            let d = partials(&sys, &pt, r);
            prop_assert!(d[4].abs() * sys.tau < 1e-12, "readout is stationary");
            let rhs = sys.rhs(&pt);
            let expected = [d[2], d[3], -d[0], -d[1]];
            for i in 0..4 {
                let scale = expected[i].abs().max(1.0 / sys.tau);
                prop_assert!((rhs[i] - expected[i]).abs() < 1e-9 * scale);
            }
        }

        #[test]
        fn rhs_matches_finite_differences_of_energy(x in -1.0..1.0f64, z in -1.0..1.0f64, px in -3.0..3.0f64, pz in -3.0..3.0f64) {
            // envelope theorem: derivatives of H(q, p, r*(q, p)) equal the partials
            let sys = PathSystem::new(&params(), DecayModel::Excess);
            let base = [x, z, px, pz];
            let h = 1e-5;
            let grad: Vec<f64> = (0..4).map(|i| {
                let mut up = base; up[i] += h;
                let mut dn = base; dn[i] -= h;
                (sys.energy(&PhasePoint::from_array(up)) - sys.energy(&PhasePoint::from_array(dn))) / (2.0 * h)
            }).collect();
            let rhs = sys.rhs(&PhasePoint::from_array(base));
            let expected = [grad[2], grad[3], -grad[0], -grad[1]];
            for i in 0..4 {
                let scale = expected[i].abs().max(rhs[i].abs()).max(1.0 / sys.tau);
                prop_assert!((rhs[i] - expected[i]).abs() < 1e-6 * scale, "{i}: {} vs {}", rhs[i], expected[i]);
            }
        }

        #[test]
        fn optimal_readout_maximizes_integrand(x in -1.0..1.0f64, z in -1.0..1.0f64, px in -3.0..3.0f64, pz in -3.0..3.0f64, dr in 0.01..5.0f64) {
            let sys = PathSystem::new(&params(), DecayModel::Excess);
            let pt = PhasePoint::new(x, z, px, pz);
            let best = sys.hamiltonian_at(&pt, pt.readout());
            prop_assert!(sys.hamiltonian_at(&pt, pt.readout() + dr) < best);
            prop_assert!(sys.hamiltonian_at(&pt, pt.readout() - dr) < best);
        }
    }
}
