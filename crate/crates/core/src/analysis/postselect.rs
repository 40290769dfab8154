use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{BlochState, PhysicalParams, Propagator};
use crate::error::{Error, Result};
use crate::simulator::{Trajectory, TrajectorySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Both `|x - x_f|` and `|z - z_f|` within the window.
    #[default]
    Both,
    /// Only `|z - z_f|` within the window.
    ZOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PostSelection {
    pub x_f: f64,
    pub z_f: f64,
    pub window: f64,
    pub t_f: f64,
    #[serde(default)]
    pub mode: SelectionMode,
}

impl PostSelection {
    pub fn new(x_f: f64, z_f: f64, window: f64, t_f: f64) -> Self {
        PostSelection {
            x_f,
            z_f,
            window,
            t_f,
            mode: SelectionMode::Both,
        }
    }

    pub fn z_only(z_f: f64, window: f64, t_f: f64) -> Self {
        PostSelection {
            x_f: 0.0,
            z_f,
            window,
            t_f,
            mode: SelectionMode::ZOnly,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.window.is_finite() && self.window > 0.0) {
            return Err(Error::invalid("window", format!("must be positive, got {}", self.window)));
        }
        if !(self.x_f.is_finite() && self.z_f.is_finite()) {
            return Err(Error::invalid("target", "must be finite"));
        }
        Ok(())
    }

    pub fn accepts(&self, q: BlochState) -> bool {
        let z_ok = (q.z - self.z_f).abs() <= self.window;
        match self.mode {
            SelectionMode::Both => z_ok && (q.x - self.x_f).abs() <= self.window,
            SelectionMode::ZOnly => z_ok,
        }
    }
}

/// Trajectories that passed a post-selection, cut at the selection time.
#[derive(Debug, Clone, PartialEq)]
pub struct SubEnsemble {
    pub params: PhysicalParams,
    pub propagator: Propagator,
    pub selection: Option<PostSelection>,
    /// Sample index of the selection time.
    pub k_f: usize,
    /// Index of each member in the parent set.
    pub indices: Vec<usize>,
    pub trajectories: Vec<Trajectory>,
    pub parent_size: usize,
}

impl SubEnsemble {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn acceptance(&self) -> f64 {
        self.len() as f64 / self.parent_size.max(1) as f64
    }

    /// Sample times `0, dt, ..., k_f dt` shared by every member.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.k_f).map(|k| k as f64 * self.params.dt).collect()
    }

    /// Wraps explicit trajectories, which must share length and parameters.
    pub fn from_trajectories(trajectories: Vec<Trajectory>) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::invalid("trajectories", "need at least one"))?;
        let k_f = first.n_steps();
        if trajectories.iter().any(|t| t.n_steps() != k_f || t.params != first.params) {
            return Err(Error::invalid("trajectories", "lengths or parameters differ"));
        }
        Ok(SubEnsemble {
            params: first.params,
            propagator: first.propagator,
            selection: None,
            k_f,
            indices: (0..trajectories.len()).collect(),
            parent_size: trajectories.len(),
            trajectories,
        })
    }

    /// The whole set without any selection.
    pub fn all(set: &TrajectorySet) -> Self {
        let trajectories: Vec<Trajectory> = (0..set.len()).into_par_iter().map(|i| set.trajectory(i)).collect();
        SubEnsemble {
            params: *set.params(),
            propagator: set.manifest.propagator,
            selection: None,
            k_f: set.n_steps(),
            indices: (0..set.len()).collect(),
            parent_size: set.len(),
            trajectories,
        }
    }
}

/// Keeps the runs whose state at `sel.t_f` is inside the selection window.
/// An empty result is not an error.
pub fn postselect(set: &TrajectorySet, sel: &PostSelection) -> Result<SubEnsemble> {
    sel.validate()?;
    let k_f = set.step_index(sel.t_f)?;
    let selected: Vec<(usize, Trajectory)> = (0..set.len())
        .into_par_iter()
        .filter_map(|i| {
            let t = set.trajectory(i).truncated(k_f);
            sel.accepts(t.final_state()).then_some((i, t))
        })
        .collect();
    let (indices, trajectories) = selected.into_iter().unzip();
    Ok(SubEnsemble {
        params: *set.params(),
        propagator: set.manifest.propagator,
        selection: Some(*sel),
        k_f,
        indices,
        trajectories,
        parent_size: set.len(),
    })
}
