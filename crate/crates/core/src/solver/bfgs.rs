//! Dense BFGS with a strong-Wolfe line search.

use serde::{Deserialize, Serialize};

use crate::error::{GeoError, Result};
use crate::manifold::{Matrix, Vector};

const WOLFE_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_SEARCH: usize = 60;
/// Value changes below this fraction of |f| are treated as rounding noise.
const VALUE_NOISE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BfgsConfig {
    /// Stop once the max-norm of the gradient falls to this value.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for BfgsConfig {
    fn default() -> Self {
        BfgsConfig { grad_tol: 1e-8, max_iter: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BfgsReport {
    pub iterations: usize,
    pub evaluations: usize,
    pub value: f64,
    pub grad_norm: f64,
    pub converged: bool,
    /// The run ended because no step along the steepest descent direction
    /// gave a decrease.
    pub line_search_failed: bool,
}

struct Sample {
    alpha: f64,
    value: f64,
    slope: f64,
    x: Vector,
    grad: Vector,
}

struct Objective<F> {
    f: F,
    evaluations: usize,
}

impl<F> Objective<F>
where
    F: FnMut(&Vector) -> Result<(f64, Vector)>,
{
    fn call(&mut self, x: &Vector) -> Result<(f64, Vector)> {
        self.evaluations += 1;
        let (v, g) = (self.f)(x)?;
        if g.len() != x.len() {
            return Err(GeoError::dim("objective gradient", x.len(), g.len()));
        }
        Ok((v, g))
    }

    /// Evaluation along the ray; failures and non-finite values count as +inf.
    fn probe(&mut self, x: &Vector, p: &Vector, alpha: f64) -> Sample {
        let xa = x + p * alpha;
        match self.call(&xa) {
            Ok((v, g)) if v.is_finite() && g.iter().all(|c| c.is_finite()) => {
                let slope = g.dot(p);
                Sample { alpha, value: v, slope, x: xa, grad: g }
            }
            _ => Sample { alpha, value: f64::INFINITY, slope: f64::NAN, x: xa, grad: Vector::zeros(0) },
        }
    }
}

fn max_norm(v: &Vector) -> f64 {
    v.iter().fold(0.0, |m, c| m.max(c.abs()))
}

/// Minimizer of the cubic matching values and slopes at both ends, or
/// `None` when the interpolant is unusable.
fn cubic_minimizer(lo: &Sample, hi: &Sample) -> Option<f64> {
    if !hi.value.is_finite() || !hi.slope.is_finite() {
        return None;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (lo.alpha - hi.alpha);
    let rad = d1 * d1 - lo.slope * hi.slope;
    if rad < 0.0 {
        return None;
    }
    let d2 = (hi.alpha - lo.alpha).signum() * rad.sqrt();
    let denom = hi.slope - lo.slope + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let a = hi.alpha - (hi.alpha - lo.alpha) * (hi.slope + d2 - d1) / denom;
    a.is_finite().then_some(a)
}

/// Strong-Wolfe step along `p`. On failure returns the best point found
/// that still satisfies sufficient decrease, if any.
fn line_search<F>(obj: &mut Objective<F>, x: &Vector, value: f64, grad: &Vector, p: &Vector, alpha0: f64) -> Option<Sample>
where
    F: FnMut(&Vector) -> Result<(f64, Vector)>,
{
    let slope0 = grad.dot(p);
    let origin = Sample { alpha: 0.0, value, slope: slope0, x: x.clone(), grad: grad.clone() };
    let armijo = |s: &Sample| s.value <= value + WOLFE_C1 * s.alpha * slope0;
    let curvature = |s: &Sample| s.slope.abs() <= -WOLFE_C2 * slope0;
    // Approximate Wolfe test (Hager and Zhang): near a minimizer the decrease
    // drops below rounding and only the slopes remain informative.
    let noise = VALUE_NOISE * value.abs();
    let approx_wolfe = |s: &Sample| s.value <= value + noise && curvature(s);

    let mut prev = origin;
    let mut alpha = alpha0;
    let mut evals = 0;
    let (mut lo, mut hi);
    loop {
        let cur = obj.probe(x, p, alpha);
        evals += 1;
        if approx_wolfe(&cur) {
            return Some(cur);
        }
        if !armijo(&cur) || (prev.alpha > 0.0 && cur.value >= prev.value) {
            lo = prev;
            hi = cur;
            break;
        }
        if curvature(&cur) {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            lo = cur;
            hi = prev;
            break;
        }
        if evals >= MAX_LINE_SEARCH {
            return Some(cur);
        }
        prev = cur;
        alpha *= 2.0;
    }

    while evals < MAX_LINE_SEARCH {
        let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
        let width = b - a;
        if width <= f64::EPSILON * b.max(1e-300) {
            break;
        }
        let guard = 0.1 * width;
        let trial = match cubic_minimizer(&lo, &hi) {
            Some(t) if t > a + guard && t < b - guard => t,
            _ => 0.5 * (lo.alpha + hi.alpha),
        };
        let cur = obj.probe(x, p, trial);
        evals += 1;
        if approx_wolfe(&cur) {
            return Some(cur);
        }
        if !armijo(&cur) || cur.value >= lo.value {
            hi = cur;
        } else {
            if curvature(&cur) {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
    (lo.alpha > 0.0 && lo.value < value).then_some(lo)
}

/// Minimizes a smooth objective given as value-and-gradient, starting at `x0`.
///
/// Converges when `‖∇f‖_∞ ≤ grad_tol`. Hitting `max_iter` or exhausting the
/// line search is reported, not raised; only an error at `x0` propagates.
pub fn bfgs_minimize<F>(f: F, x0: Vector, grad_tol: f64, max_iter: usize) -> Result<(Vector, BfgsReport)>
where
    F: FnMut(&Vector) -> Result<(f64, Vector)>,
{
    let mut obj = Objective { f, evaluations: 0 };
    let n = x0.len();
    let mut x = x0;
    let (mut value, mut grad) = obj.call(&x)?;
    if !value.is_finite() {
        return Err(GeoError::InvalidArgument("objective is not finite at the starting point".into()));
    }
    let mut h = Matrix::identity(n, n);
    let mut h_is_identity = true;
    let mut first_update = true;
    let mut iterations = 0;
    let mut line_search_failed = false;

    while max_norm(&grad) > grad_tol && iterations < max_iter {
        let mut p = -(&h * &grad);
        if grad.dot(&p) >= 0.0 {
            h.fill_with_identity();
            h_is_identity = true;
            p = -grad.clone();
        }
        let alpha0 = if first_update { (1.0 / p.norm()).min(1.0) } else { 1.0 };
        let step = match line_search(&mut obj, &x, value, &grad, &p, alpha0) {
            Some(s) => s,
            None if !h_is_identity => {
                h.fill_with_identity();
                h_is_identity = true;
                first_update = true;
                continue;
            }
            None => {
                line_search_failed = true;
                break;
            }
        };
        iterations += 1;

        let s = &step.x - &x;
        let y = &step.grad - &grad;
        let sy = s.dot(&y);
        if sy > 1e-12 * s.norm() * y.norm() && sy > 0.0 {
            if first_update {
                h *= sy / y.dot(&y);
                first_update = false;
            }
            let rho = 1.0 / sy;
            let hy = &h * &y;
            let yhy = y.dot(&hy);
            // H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ, expanded.
            h.ger(-rho, &hy, &s, 1.0);
            h.ger(-rho, &s, &hy, 1.0);
            h.ger(rho * rho * yhy + rho, &s, &s, 1.0);
            h_is_identity = false;
        }
        x = step.x;
        value = step.value;
        grad = step.grad;
    }

    let grad_norm = max_norm(&grad);
    let report = BfgsReport {
        iterations,
        evaluations: obj.evaluations,
        value,
        grad_norm,
        converged: grad_norm <= grad_tol,
        line_search_failed,
    };
    Ok((x, report))
}

impl BfgsConfig {
    pub fn minimize<F>(&self, f: F, x0: Vector) -> Result<(Vector, BfgsReport)>
    where
        F: FnMut(&Vector) -> Result<(f64, Vector)>,
    {
        bfgs_minimize(f, x0, self.grad_tol, self.max_iter)
    }
}
