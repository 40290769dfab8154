use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::path::OptimalPath;
use super::shoot::{shoot_system, BoundaryConditions, ShootOptions};
use super::system::PathSystem;
use crate::dynamics::PhysicalParams;
use crate::error::{Error, Result};

/// Drift offsets are given in units of 1/µs.
pub const DELTA_UNIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Maximum,
    Minimum,
    Saddle,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfilePoint {
    pub delta: [f64; 2],
    /// `None` when the perturbed system could not be shot to the boundaries.
    pub log_likelihood: Option<f64>,
    pub residual: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalReport {
    pub classification: Classification,
    pub reference: f64,
    pub profile: Vec<ProfilePoint>,
    pub gaps: usize,
}

impl VariationalReport {
    pub fn at(&self, delta: [f64; 2]) -> Option<&ProfilePoint> {
        self.profile.iter().find(|p| p.delta == delta)
    }
}

/// `0, +-0.05, +-0.1, +-0.2, +-0.3, +-0.5` on each axis.
pub fn default_deltas() -> Vec<[f64; 2]> {
    let axis = [-0.5, -0.3, -0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2, 0.3, 0.5];
    axis.iter()
        .flat_map(|&a| axis.iter().map(move |&b| [a, b]))
        .collect()
}

/// Perturbs the multiplier equations by constant offsets, re-solves the
/// boundary-value problem for each offset and compares the likelihood of the
/// perturbed paths with the unperturbed one.
///
/// Shooting for each offset starts from the multipliers of `path`.
pub fn variational_check(
    path: &OptimalPath,
    bc: &BoundaryConditions,
    params: &PhysicalParams,
    deltas: &[[f64; 2]],
    opts: &ShootOptions,
) -> Result<VariationalReport> {
    let start = path.start();
    if (start.x - bc.x_i).abs() > 1e-9 || (start.z - bc.z_i).abs() > 1e-9 {
        return Err(Error::invalid("path", "does not start at the initial boundary state"));
    }
    if (path.step - opts.step).abs() > 1e-6 * opts.step {
        return Err(Error::invalid(
            "step",
            format!("path step {} differs from solver step {}", path.step, opts.step),
        ));
    }
    let base = PathSystem::new(params, opts.decay);
    let local = ShootOptions {
        grid: Vec::new(),
        extra_starts: vec![[start.p_x, start.p_z]],
        ..opts.clone()
    };
    let reference = path.log_likelihood;
    let profile: Vec<ProfilePoint> = deltas
        .par_iter()
        .map(|&delta| {
            if delta == [0.0, 0.0] {
                return ProfilePoint {
                    delta,
                    log_likelihood: Some(reference),
                    residual: path.residual,
                };
            }
            let system = base.with_drift([delta[0] * DELTA_UNIT, delta[1] * DELTA_UNIT]);
            match shoot_system(bc, system, &local) {
                Ok(report) => {
                    let root = report.principal();
                    ProfilePoint {
                        delta,
                        log_likelihood: Some(root.log_likelihood),
                        residual: Some(root.residual),
                    }
                }
                Err(e) => {
                    log::debug!("perturbation {delta:?} left unsolved: {e}");
                    ProfilePoint {
                        delta,
                        log_likelihood: None,
                        residual: None,
                    }
                }
            }
        })
        .collect();
    let others: Vec<f64> = profile
        .iter()
        .filter(|p| p.delta != [0.0, 0.0])
        .filter_map(|p| p.log_likelihood)
        .collect();
    let gaps = profile.iter().filter(|p| p.log_likelihood.is_none()).count();
    let classification = if others.is_empty() {
        Classification::Undetermined
    } else if others.iter().all(|&l| l < reference) {
        Classification::Maximum
    } else if others.iter().all(|&l| l > reference) {
        Classification::Minimum
    } else {
        Classification::Saddle
    };
    Ok(VariationalReport {
        classification,
        reference,
        profile,
        gaps,
    })
}
