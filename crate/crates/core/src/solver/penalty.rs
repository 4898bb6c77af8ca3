use crate::energy::LocalEnergy;
use crate::error::{check_dim, GeoError, Result};
use crate::manifold::{DistanceField, Vector};

use super::auglag::SolverConfig;
use super::bfgs::bfgs_minimize;
use super::path::{path_energy, DiscretePath};
use super::{Solution, SolverReport, StopReason};

/// Distances of the interior points to the manifold.
fn interior_distances(dist: &dyn DistanceField, path: &DiscretePath) -> Result<Vector> {
    let k = path.k();
    let mut d = Vector::zeros(k - 1);
    for (i, z) in path.points()[1..k].iter().enumerate() {
        d[i] = dist.distance_and_gradient(z)?.0;
    }
    Ok(d)
}

/// Discrete geodesic for a manifold given only by a distance field, by a
/// quadratic penalty on the interior distances. `K = 1` returns the two
/// end points unchanged.
pub fn geodesic_penalty(
    energy: &dyn LocalEnergy,
    dist: &dyn DistanceField,
    z0: &Vector,
    zk: &Vector,
    k: usize,
    config: &SolverConfig,
) -> Result<Solution> {
    config.validate()?;
    check_dim("start point", dist.dim(), z0.len())?;
    check_dim("end point", dist.dim(), zk.len())?;
    if k == 0 {
        return Err(GeoError::InvalidArgument("K must be at least 1".into()));
    }
    if k == 1 {
        let path = DiscretePath::new(vec![z0.clone(), zk.clone()])?;
        let (e, _) = path_energy(energy, &path)?;
        let report = SolverReport {
            converged: true,
            outer_iterations: 0,
            inner_iterations: 0,
            constraint_norm: 0.0,
            max_vertex_residual: 0.0,
            gradient_norm: 0.0,
            energy: e,
            final_penalty: config.mu0,
            eta_star: config.eta_star,
            stop_reason: StopReason::Accuracy,
        };
        return Ok(Solution { path, report });
    }

    let l = z0.len();
    let mut path = DiscretePath::constant_jump(z0, zk, k)?;
    let mut mu = config.mu0;
    let mut outer = 0;
    let mut inner_total = 0;
    let mut grad_norm;

    let stop = loop {
        outer += 1;
        let objective = |x: &Vector| -> Result<(f64, Vector)> {
            let p = path.with_interior(x)?;
            let (mut value, mut grad) = path_energy(energy, &p)?;
            for (i, z) in p.points()[1..k].iter().enumerate() {
                let (d, g) = dist.distance_and_gradient(z)?;
                value += 0.5 * mu * d * d;
                grad.rows_mut(i * l, l).axpy(mu * d, &g, 1.0);
            }
            Ok((value, grad))
        };
        let (x, rep) = bfgs_minimize(objective, path.interior_stacked(), config.omega_star, config.max_inner)?;
        inner_total += rep.iterations;
        grad_norm = rep.grad_norm;
        path = path.with_interior(&x)?;

        let c = interior_distances(dist, &path)?.norm();
        if c <= config.eta_star {
            break StopReason::Accuracy;
        }
        mu *= config.alpha;
        if mu > config.mu_max {
            break StopReason::MaxPenalty;
        }
        if outer >= config.max_outer {
            break StopReason::MaxIter;
        }
    };

    let d = interior_distances(dist, &path)?;
    let (e, _) = path_energy(energy, &path)?;
    let report = SolverReport {
        converged: stop == StopReason::Accuracy,
        outer_iterations: outer,
        inner_iterations: inner_total,
        constraint_norm: d.norm(),
        max_vertex_residual: d.iter().fold(0.0, |m, c| m.max(c.abs())),
        gradient_norm: grad_norm,
        energy: e,
        final_penalty: mu,
        eta_star: config.eta_star,
        stop_reason: stop,
    };
    Solution { path, report }.finish()
}
