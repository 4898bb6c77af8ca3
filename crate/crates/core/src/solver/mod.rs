//! Discrete path energy and the constrained solvers built on it:
//! augmented-Lagrangian geodesic interpolation, the penalty variant for
//! distance fields, and the discrete exponential map.

mod auglag;
mod bfgs;
mod exp;
mod path;
mod penalty;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use auglag::{geodesic_auglag, geodesic_auglag_from, rule_of_thumb_eta, SolverConfig};
pub use bfgs::{bfgs_minimize, BfgsConfig, BfgsReport};
pub use exp::{discrete_exp, exp_step, ExpConfig, ExpStep};
pub use path::{path_energy, reparametrized_distance, DiscretePath};
pub use penalty::geodesic_penalty;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Accuracy,
    MaxPenalty,
    MaxIter,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Accuracy => "accuracy",
            StopReason::MaxPenalty => "max_penalty",
            StopReason::MaxIter => "max_iter",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Constraint measure of the final path: the sum of per-vertex residual
    /// norms (augmented Lagrangian) or the Euclidean norm of the stacked
    /// distances (penalty).
    pub constraint_norm: f64,
    /// Largest per-vertex constraint residual over the interior points.
    pub max_vertex_residual: f64,
    /// Max-norm of the gradient of the last inner objective.
    pub gradient_norm: f64,
    pub energy: f64,
    pub final_penalty: f64,
    /// Constraint tolerance the run was asked to reach.
    pub eta_star: f64,
    pub stop_reason: StopReason,
}

/// A solver result: the computed path and how the run ended.
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub path: DiscretePath,
    pub report: SolverReport,
}

impl Solution {
    pub(crate) fn finish(self) -> crate::Result<Solution> {
        if self.report.converged {
            Ok(self)
        } else {
            Err(crate::GeoError::NotConverged(Box::new(self)))
        }
    }
}
