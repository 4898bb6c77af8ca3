use serde::{Deserialize, Serialize};

use crate::energy::LocalEnergy;
use crate::error::{check_dim, GeoError, Result};
use crate::manifold::{ImplicitRep, PointCloud, Vector};

use super::bfgs::bfgs_minimize;
use super::path::{path_energy, DiscretePath};
use super::{Solution, SolverReport, StopReason};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Initial penalty weight.
    pub mu0: f64,
    /// Penalty growth factor on an unsuccessful outer step.
    pub alpha: f64,
    pub mu_max: f64,
    /// Final tolerance on the inner gradient.
    pub omega_star: f64,
    /// Final tolerance on the constraint measure, the sum over interior
    /// vertices of |ζ(z_k)|.
    pub eta_star: f64,
    pub max_outer: usize,
    /// Iteration cap for each inner BFGS solve.
    pub max_inner: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mu0: 10.0,
            alpha: 2.0,
            mu_max: 1e8,
            omega_star: 1e-6,
            eta_star: 1e-6,
            max_outer: 200,
            max_inner: 20_000,
        }
    }
}

impl SolverConfig {
    pub(crate) fn validate(&self) -> Result<()> {
        let ok = self.mu0 > 0.0
            && self.alpha > 1.0
            && self.mu_max >= self.mu0
            && self.omega_star > 0.0
            && self.eta_star > 0.0
            && self.max_outer > 0
            && self.max_inner > 0;
        if ok {
            Ok(())
        } else {
            Err(GeoError::InvalidArgument(format!("invalid solver configuration: {self:?}")))
        }
    }
}

/// Constraint tolerance for a learned or kernel representation: `K` times
/// the mean residual magnitude over the training cloud.
pub fn rule_of_thumb_eta(rep: &dyn ImplicitRep, cloud: &PointCloud, k: usize) -> Result<f64> {
    if cloud.is_empty() {
        return Err(GeoError::InvalidArgument("empty point cloud".into()));
    }
    check_dim("point cloud", rep.dim(), cloud.dim())?;
    let mut total = 0.0;
    for i in 0..cloud.len() {
        total += rep.residual(&cloud.point(i))?.norm();
    }
    Ok(k as f64 * total / cloud.len() as f64)
}

/// Stacked residuals `ζ(z_k)` of the interior points.
fn interior_residuals(zeta: &dyn ImplicitRep, path: &DiscretePath) -> Result<Vector> {
    let k = path.k();
    let m = zeta.dim();
    let mut r = Vector::zeros(m * (k - 1));
    for (i, z) in path.points()[1..k].iter().enumerate() {
        r.rows_mut(i * m, m).copy_from(&zeta.residual(z)?);
    }
    Ok(r)
}

/// Sum of the per-vertex norms of a stacked residual.
pub(crate) fn vertex_sum(stacked: &Vector, block: usize) -> f64 {
    (0..stacked.len() / block).map(|i| stacked.rows(i * block, block).norm()).sum()
}

pub(crate) fn vertex_max(stacked: &Vector, block: usize) -> f64 {
    (0..stacked.len() / block)
        .map(|i| stacked.rows(i * block, block).norm())
        .fold(0.0, f64::max)
}

/// Discrete geodesic between two points on `{ζ = 0}` by the augmented
/// Lagrangian method, starting from the constant-jump path.
pub fn geodesic_auglag(
    energy: &dyn LocalEnergy,
    zeta: &dyn ImplicitRep,
    z0: &Vector,
    zk: &Vector,
    k: usize,
    config: &SolverConfig,
) -> Result<Solution> {
    check_dim("start point", zeta.dim(), z0.len())?;
    check_dim("end point", zeta.dim(), zk.len())?;
    if k < 2 {
        return Err(GeoError::InvalidArgument(format!("K must be at least 2, got {k}")));
    }
    let init = DiscretePath::constant_jump(z0, zk, k)?;
    geodesic_auglag_from(energy, zeta, &init, config)
}

/// Same as [`geodesic_auglag`] with a caller-supplied initial path; its end
/// points are kept fixed.
pub fn geodesic_auglag_from(
    energy: &dyn LocalEnergy,
    zeta: &dyn ImplicitRep,
    init: &DiscretePath,
    config: &SolverConfig,
) -> Result<Solution> {
    config.validate()?;
    check_dim("initial path", zeta.dim(), init.dim())?;
    let k = init.k();
    if k < 2 {
        return Err(GeoError::InvalidArgument(format!("K must be at least 2, got {k}")));
    }
    let l = init.dim();

    let mut lambda = Vector::zeros(l * (k - 1));
    let mut mu = config.mu0;
    let mut omega = 1.0 / config.mu0;
    let mut eta = config.mu0.powf(-0.1);
    let mut path = init.clone();
    let mut inner_total = 0;
    let mut grad_norm;
    let mut outer = 0;

    let stop = loop {
        outer += 1;
        let tol = omega.max(config.omega_star);
        let objective = |x: &Vector| -> Result<(f64, Vector)> {
            let p = path.with_interior(x)?;
            let (mut value, mut grad) = path_energy(energy, &p)?;
            for (i, z) in p.points()[1..k].iter().enumerate() {
                let (r, d) = zeta.eval(z)?;
                let lam = lambda.rows(i * l, l);
                value += -lam.dot(&r) + 0.5 * mu * r.norm_squared();
                let w = &r * mu - lam;
                grad.rows_mut(i * l, l).gemv_tr(1.0, &d, &w, 1.0);
            }
            Ok((value, grad))
        };
        let (x, rep) = bfgs_minimize(objective, path.interior_stacked(), tol, config.max_inner)?;
        inner_total += rep.iterations;
        grad_norm = rep.grad_norm;
        path = path.with_interior(&x)?;

        let residuals = interior_residuals(zeta, &path)?;
        let c = vertex_sum(&residuals, l);
        if c <= eta.max(config.eta_star) {
            if c <= config.eta_star && grad_norm <= config.omega_star {
                break StopReason::Accuracy;
            }
            lambda -= &residuals * mu;
            eta /= mu.powf(0.9);
            omega /= mu;
        } else {
            mu *= config.alpha;
            eta = mu.powf(-0.1);
            omega = 1.0 / mu;
            if mu > config.mu_max {
                break StopReason::MaxPenalty;
            }
        }
        if outer >= config.max_outer {
            break StopReason::MaxIter;
        }
    };

    let residuals = interior_residuals(zeta, &path)?;
    let (energy_value, _) = path_energy(energy, &path)?;
    let report = SolverReport {
        converged: stop == StopReason::Accuracy,
        outer_iterations: outer,
        inner_iterations: inner_total,
        constraint_norm: vertex_sum(&residuals, zeta.dim()),
        max_vertex_residual: vertex_max(&residuals, zeta.dim()),
        gradient_norm: grad_norm,
        energy: energy_value,
        final_penalty: mu,
        eta_star: config.eta_star,
        stop_reason: stop,
    };
    Solution { path, report }.finish()
}
