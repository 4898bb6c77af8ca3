use serde::{Deserialize, Serialize};

use crate::energy::LocalEnergy;
use crate::error::{check_dim, GeoError, Result};
use crate::manifold::{ImplicitRep, Matrix, Vector};

use super::bfgs::{bfgs_minimize, BfgsReport};
use super::path::DiscretePath;
use super::{Solution, SolverReport, StopReason};

const DEGENERATE_STEP: f64 = 1e-12;
/// Singular values of `Dζ` below this fraction of the largest one are
/// treated as tangential.
const NORMAL_CUTOFF: f64 = 0.5;

/// `Dζ` restricted to its normal singular directions. Exact representations
/// have singular values 0 or 1 and pass through unchanged; learned ones have
/// small tangential singular values through which the multiplier could
/// cancel any tangential residual.
fn normal_part(d: &Matrix) -> Matrix {
    let mut svd = d.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    for s in svd.singular_values.iter_mut() {
        if *s < NORMAL_CUTOFF * smax {
            *s = 0.0;
        }
    }
    svd.recompose().expect("both factors were computed")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpConfig {
    /// Weight of the constraint penalty on the new point.
    pub mu: f64,
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Objective values at or below this count as solved even when the
    /// gradient test was not met.
    pub residual_floor: f64,
    /// A step whose line search stalls counts as solved when the gradient
    /// max-norm is at most this. With an inexact `ζ` the objective has a
    /// positive minimum and the line search stalls in its rounding floor.
    pub stall_grad_tol: f64,
}

impl Default for ExpConfig {
    fn default() -> Self {
        ExpConfig { mu: 1e4, grad_tol: 1e-10, max_iter: 2_000, residual_floor: 1e-20, stall_grad_tol: 1e-4 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpStep {
    pub z_next: Vector,
    /// Multiplier of the constraint at the current point.
    pub lambda: Vector,
    /// Final value of the step objective.
    pub residual: f64,
    pub report: BfgsReport,
}

/// One step `z_{k+1}` of the discrete exponential map: the point that makes
/// `z_cur` a constrained critical point of `W(z_prev, ·) + W(·, z_next)`
/// while also lying on the manifold. `k` is the total number of segments.
pub fn exp_step(
    energy: &dyn LocalEnergy,
    zeta: &dyn ImplicitRep,
    z_prev: &Vector,
    z_cur: &Vector,
    k: usize,
    config: &ExpConfig,
) -> Result<ExpStep> {
    let l = zeta.dim();
    check_dim("previous point", l, z_prev.len())?;
    check_dim("current point", l, z_cur.len())?;
    if (z_cur - z_prev).norm() < DEGENERATE_STEP {
        return Err(GeoError::DegenerateStep);
    }
    let kf = k as f64;
    let incoming = energy.eval(z_prev, z_cur)?.grad_second;
    let d_cur = normal_part(&zeta.eval(z_cur)?.1);
    let mu = config.mu;

    let objective = |x: &Vector| -> Result<(f64, Vector)> {
        let z = x.rows(0, l).into_owned();
        let lam = x.rows(l, l).into_owned();
        let out = energy.eval(z_cur, &z)?;
        let mixed = energy.mixed_hessian(z_cur, &z)?;
        let (c, d_next) = zeta.eval(&z)?;
        let mut r = (&incoming + &out.grad_first) * kf;
        r.gemv_tr(-1.0, &d_cur, &lam, 1.0);
        let value = r.norm_squared() + 0.5 * mu * c.norm_squared();
        let mut grad = Vector::zeros(2 * l);
        {
            let mut gz = grad.rows_mut(0, l);
            gz.gemv_tr(2.0 * kf, &mixed, &r, 0.0);
            gz.gemv_tr(mu, &d_next, &c, 1.0);
        }
        grad.rows_mut(l, l).gemv(-2.0, &d_cur, &r, 0.0);
        Ok((value, grad))
    };

    let mut x0 = Vector::zeros(2 * l);
    x0.rows_mut(0, l).copy_from(&(z_cur * 2.0 - z_prev));
    let (x, report) = bfgs_minimize(objective, x0, config.grad_tol, config.max_iter)?;
    let z_next = x.rows(0, l).into_owned();
    let lambda = x.rows(l, l).into_owned();
    let stalled = report.line_search_failed && report.grad_norm <= config.stall_grad_tol;
    if !(report.converged || stalled || report.value <= config.residual_floor) {
        let path = DiscretePath::new(vec![z_prev.clone(), z_cur.clone(), z_next.clone()])?;
        let c = zeta.residual(&z_next)?.norm();
        let failed = SolverReport {
            converged: false,
            outer_iterations: 1,
            inner_iterations: report.iterations,
            constraint_norm: c,
            max_vertex_residual: c,
            gradient_norm: report.grad_norm,
            energy: report.value,
            final_penalty: mu,
            eta_star: 0.0,
            stop_reason: StopReason::MaxIter,
        };
        return Err(GeoError::NotConverged(Box::new(Solution { path, report: failed })));
    }
    Ok(ExpStep { z_next, lambda, residual: report.value, report })
}

/// Gauss-Newton correction `z − Dζ(z)⁺ ζ(z)` pulling a point back onto the
/// manifold to first order, along the normal singular directions only.
fn gauss_newton_correct(zeta: &dyn ImplicitRep, z: &Vector) -> Result<Vector> {
    let (c, d) = zeta.eval(z)?;
    let svd = d.svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let step = svd
        .solve(&c, NORMAL_CUTOFF * smax.max(f64::MIN_POSITIVE))
        .map_err(|e| GeoError::InvalidArgument(e.to_string()))?;
    Ok(z - step)
}

/// Discrete exponential map: `K` steps from `z0` with initial velocity `v0`.
/// The first point is `z0 + v0 / K` corrected onto the manifold.
pub fn discrete_exp(
    energy: &dyn LocalEnergy,
    zeta: &dyn ImplicitRep,
    z0: &Vector,
    v0: &Vector,
    k: usize,
    config: &ExpConfig,
) -> Result<DiscretePath> {
    let l = zeta.dim();
    check_dim("start point", l, z0.len())?;
    check_dim("initial velocity", l, v0.len())?;
    if k == 0 {
        return Err(GeoError::InvalidArgument("K must be at least 1".into()));
    }
    if v0.iter().any(|c| !c.is_finite()) {
        return Err(GeoError::InvalidArgument("initial velocity is not finite".into()));
    }
    let z1 = gauss_newton_correct(zeta, &(z0 + v0 / k as f64))?;
    let mut points = vec![z0.clone(), z1];
    for i in 1..k {
        let step = exp_step(energy, zeta, &points[i - 1], &points[i], k, config)?;
        points.push(step.z_next);
    }
    DiscretePath::new(points)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::energy::Euclidean;
    use crate::manifold::AnalyticManifold;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    #[test]
    fn flat_plane_gives_straight_line() {
        let plane = AnalyticManifold::xy_plane();
        let path = discrete_exp(&Euclidean, &plane, &v(&[0.0, 0.0, 0.0]), &v(&[1.0, 0.5, 0.0]), 8, &ExpConfig::default())
            .unwrap();
        for (i, z) in path.points().iter().enumerate() {
            let t = i as f64 / 8.0;
            assert!((z - v(&[t, 0.5 * t, 0.0])).norm() < 1e-10);
        }
    }

    #[test]
    fn sphere_step_stays_on_the_great_circle() {
        let s = AnalyticManifold::sphere(1.0).unwrap();
        let h = 0.1_f64;
        let prev = v(&[1.0, 0.0, 0.0]);
        let cur = v(&[h.cos(), h.sin(), 0.0]);
        let step = exp_step(&Euclidean, &s, &prev, &cur, 10, &ExpConfig::default()).unwrap();
        let expect = v(&[(2.0 * h).cos(), (2.0 * h).sin(), 0.0]);
        assert!((&step.z_next - expect).norm() < 1e-4, "{}", step.z_next);
        assert!(step.z_next[2].abs() < 1e-10);
    }

    #[test]
    fn repeated_point_is_degenerate() {
        let s = AnalyticManifold::sphere(1.0).unwrap();
        let p = v(&[1.0, 0.0, 0.0]);
        assert!(matches!(
            exp_step(&Euclidean, &s, &p, &p, 4, &ExpConfig::default()),
            Err(GeoError::DegenerateStep)
        ));
    }
}
