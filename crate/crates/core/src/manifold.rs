//! Analytic ground-truth manifolds, point-cloud sampling and the Gaussian
//! kernel-barycenter projection.
//!
//! Every manifold here is a closed subset `Z ⊂ R^l` with a well defined
//! nearest-point projection `Π` away from its singular set. The implicit
//! representation used by the solvers is the residual `ζ(z) = z − Π(z)`,
//! whose Jacobian `Dζ = I − DΠ` has the tangent space of `Z` as its kernel
//! on the manifold.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, GeoError, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Distance to the singular set below which projections are refused.
pub const SINGULAR_GUARD: f64 = 1e-9;

const ORTHONORMAL_TOL: f64 = 1e-12;

/// An implicit description `ζ: R^l → R^l` of a manifold, `Z = {ζ = 0}`.
pub trait ImplicitRep: Send + Sync {
    fn dim(&self) -> usize;

    /// Residual `ζ(z)` and Jacobian `Dζ(z)` with `(i, j) = ∂ζ_i / ∂z_j`.
    fn eval(&self, z: &Vector) -> Result<(Vector, Matrix)>;

    fn residual(&self, z: &Vector) -> Result<Vector> {
        Ok(self.eval(z)?.0)
    }
}

/// An unsigned distance function `d ≥ 0` vanishing exactly on the manifold.
pub trait DistanceField: Send + Sync {
    fn dim(&self) -> usize;

    /// Distance and its gradient. The gradient is only meaningful off the
    /// zero set; callers must not rely on it where `d` vanishes.
    fn distance_and_gradient(&self, z: &Vector) -> Result<(f64, Vector)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineSubspace {
    basepoint: Vector,
    basis: Vec<Vector>,
    /// Half side length of the coordinate box used when sampling.
    half_width: f64,
}

impl AffineSubspace {
    pub fn basepoint(&self) -> &Vector {
        &self.basepoint
    }

    pub fn basis(&self) -> &[Vector] {
        &self.basis
    }

    pub fn half_width(&self) -> f64 {
        self.half_width
    }

    fn projector(&self) -> Matrix {
        let l = self.basepoint.len();
        let mut p = Matrix::zeros(l, l);
        for u in &self.basis {
            p += u * u.transpose();
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AnalyticManifold {
    /// Torus of revolution around the `z` axis in `R^3`.
    Torus { major: f64, minor: f64 },
    /// Sphere centered at the origin of `R^3`.
    Sphere { radius: f64 },
    /// Circle centered at the origin of `R^2`.
    Circle2D { radius: f64 },
    AffineSubspace(AffineSubspace),
}

impl AnalyticManifold {
    pub fn torus(major: f64, minor: f64) -> Result<Self> {
        if !(minor > 0.0 && minor < major && major.is_finite()) {
            return Err(GeoError::InvalidArgument(format!(
                "torus radii must satisfy 0 < r < R, got R = {major}, r = {minor}"
            )));
        }
        Ok(AnalyticManifold::Torus { major, minor })
    }

    /// Torus with outer radius one: `R = 2/3`, `r = 1/3`.
    pub fn default_torus() -> Self {
        AnalyticManifold::Torus {
            major: 2.0 / 3.0,
            minor: 1.0 / 3.0,
        }
    }

    pub fn sphere(radius: f64) -> Result<Self> {
        positive("sphere radius", radius)?;
        Ok(AnalyticManifold::Sphere { radius })
    }

    pub fn circle(radius: f64) -> Result<Self> {
        positive("circle radius", radius)?;
        Ok(AnalyticManifold::Circle2D { radius })
    }

    pub fn affine(basepoint: Vector, basis: Vec<Vector>) -> Result<Self> {
        Self::affine_with_extent(basepoint, basis, 1.0)
    }

    pub fn affine_with_extent(basepoint: Vector, basis: Vec<Vector>, half_width: f64) -> Result<Self> {
        let l = basepoint.len();
        if l == 0 || basis.len() > l {
            return Err(GeoError::InvalidArgument(format!(
                "affine subspace needs 1 ≤ l and at most l basis vectors (l = {l}, m = {})",
                basis.len()
            )));
        }
        positive("affine sampling half width", half_width)?;
        for (i, u) in basis.iter().enumerate() {
            check_dim("affine basis vector", l, u.len())?;
            for (j, w) in basis.iter().enumerate().take(i + 1) {
                let expected = if i == j { 1.0 } else { 0.0 };
                if (u.dot(w) - expected).abs() > ORTHONORMAL_TOL {
                    return Err(GeoError::InvalidArgument(format!(
                        "affine basis is not orthonormal at pair ({i}, {j})"
                    )));
                }
            }
        }
        Ok(AnalyticManifold::AffineSubspace(AffineSubspace {
            basepoint,
            basis,
            half_width,
        }))
    }

    /// The plane `{p_3 = 0}` in `R^3`.
    pub fn xy_plane() -> Self {
        Self::affine(
            Vector::zeros(3),
            vec![Vector::from_column_slice(&[1.0, 0.0, 0.0]), Vector::from_column_slice(&[0.0, 1.0, 0.0])],
        )
        .expect("coordinate basis is orthonormal")
    }

    pub fn name(&self) -> &'static str {
        match self {
            AnalyticManifold::Torus { .. } => "torus",
            AnalyticManifold::Sphere { .. } => "sphere",
            AnalyticManifold::Circle2D { .. } => "circle",
            AnalyticManifold::AffineSubspace(_) => "affine subspace",
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            AnalyticManifold::Torus { .. } | AnalyticManifold::Sphere { .. } => 3,
            AnalyticManifold::Circle2D { .. } => 2,
            AnalyticManifold::AffineSubspace(a) => a.basepoint.len(),
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self {
            AnalyticManifold::Torus { .. } | AnalyticManifold::Sphere { .. } => 2,
            AnalyticManifold::Circle2D { .. } => 1,
            AnalyticManifold::AffineSubspace(a) => a.basis.len(),
        }
    }

    fn singular(&self) -> GeoError {
        GeoError::SingularPoint {
            manifold: self.name(),
            guard: SINGULAR_GUARD,
        }
    }

    /// Nearest point and the Jacobian of the nearest-point map.
    fn project_with_jacobian(&self, p: &Vector) -> Result<(Vector, Matrix)> {
        check_dim("analytic projection", self.ambient_dim(), p.len())?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::InvalidArgument("projection of a non-finite point".into()));
        }
        match self {
            AnalyticManifold::Torus { major, minor } => {
                let (x, jac) = torus_projection(*major, *minor, &Vector3::new(p[0], p[1], p[2]))
                    .ok_or_else(|| self.singular())?;
                Ok((Vector::from_column_slice(x.as_slice()), Matrix::from_column_slice(3, 3, jac.as_slice())))
            }
            AnalyticManifold::Sphere { radius } | AnalyticManifold::Circle2D { radius } => {
                let norm = p.norm();
                if norm < SINGULAR_GUARD {
                    return Err(self.singular());
                }
                let n = p / norm;
                let l = p.len();
                let jac = (Matrix::identity(l, l) - &n * n.transpose()) * (*radius / norm);
                Ok((n * *radius, jac))
            }
            AnalyticManifold::AffineSubspace(a) => {
                let proj = a.projector();
                let x = &a.basepoint + &proj * (p - &a.basepoint);
                Ok((x, proj))
            }
        }
    }

    /// Nearest point of the manifold to `p`.
    pub fn project(&self, p: &Vector) -> Result<Vector> {
        Ok(self.project_with_jacobian(p)?.0)
    }

    /// Residual `ζ(p) = p − Π(p)` and its exact Jacobian `I − DΠ(p)`.
    pub fn zeta(&self, p: &Vector) -> Result<(Vector, Matrix)> {
        let (x, dpi) = self.project_with_jacobian(p)?;
        let l = p.len();
        Ok((p - x, Matrix::identity(l, l) - dpi))
    }

    /// Unsigned Euclidean distance to the manifold.
    ///
    /// Unlike the projection, the distance is single valued on the singular
    /// set (the torus axis, the sphere center), so it is returned there too.
    pub fn distance(&self, p: &Vector) -> Result<f64> {
        check_dim("ambient distance", self.ambient_dim(), p.len())?;
        if p.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::InvalidArgument("distance of a non-finite point".into()));
        }
        Ok(match self {
            AnalyticManifold::Torus { major, minor } => {
                let rho = p[0].hypot(p[1]);
                ((rho - major).hypot(p[2]) - minor).abs()
            }
            AnalyticManifold::Sphere { radius } | AnalyticManifold::Circle2D { radius } => (p.norm() - radius).abs(),
            AnalyticManifold::AffineSubspace(_) => self.zeta(p)?.0.norm(),
        })
    }

    /// A unit vector normal to the manifold at the surface point `x`; for
    /// codimension above one a uniformly random direction of the normal space.
    pub fn random_unit_normal<R: Rng + ?Sized>(&self, x: &Vector, rng: &mut R) -> Result<Vector> {
        let (_, dzeta) = self.zeta(x)?;
        let l = x.len();
        match self {
            AnalyticManifold::AffineSubspace(_) => {
                if self.intrinsic_dim() == l {
                    return Err(GeoError::InvalidArgument("full-dimensional subspace has no normal".into()));
                }
                loop {
                    let g = Vector::from_fn(l, |_, _| rng.sample::<f64, _>(StandardNormal));
                    let n = &dzeta * g;
                    let norm = n.norm();
                    if norm > 1e-8 {
                        return Ok(n / norm);
                    }
                }
            }
            AnalyticManifold::Torus { major, .. } => {
                let rho = x[0].hypot(x[1]);
                if rho < SINGULAR_GUARD {
                    return Err(self.singular());
                }
                let c = Vector::from_column_slice(&[major * x[0] / rho, major * x[1] / rho, 0.0]);
                let q = x - c;
                Ok(&q / q.norm())
            }
            AnalyticManifold::Sphere { .. } | AnalyticManifold::Circle2D { .. } => Ok(x / x.norm()),
        }
    }

    /// One area-uniform point on the manifold.
    pub fn sample_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        use std::f64::consts::TAU;
        match self {
            AnalyticManifold::Torus { major, minor } => {
                // Rejection in φ against the area element (R + r cos φ).
                let (theta, phi) = loop {
                    let theta = rng.random::<f64>() * TAU;
                    let phi = rng.random::<f64>() * TAU;
                    let accept = rng.random::<f64>() * (major + minor);
                    if accept <= major + minor * phi.cos() {
                        break (theta, phi);
                    }
                };
                torus_point(*major, *minor, theta, phi)
            }
            AnalyticManifold::Sphere { radius } => loop {
                let g = Vector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
                let n = g.norm();
                if n > 1e-12 {
                    break g * (radius / n);
                }
            },
            AnalyticManifold::Circle2D { radius } => {
                let t = rng.random::<f64>() * TAU;
                Vector::from_column_slice(&[radius * t.cos(), radius * t.sin()])
            }
            AnalyticManifold::AffineSubspace(a) => {
                let mut x = a.basepoint.clone();
                for u in &a.basis {
                    let c = (2.0 * rng.random::<f64>() - 1.0) * a.half_width;
                    x.axpy(c, u, 1.0);
                }
                x
            }
        }
    }

    /// `n` area-uniform points plus isotropic Gaussian noise of std `noise_sd`.
    pub fn sample_cloud(&self, n: usize, noise_sd: f64, seed: u64) -> Result<PointCloud> {
        if n == 0 {
            return Err(GeoError::InvalidArgument("cloud size must be at least 1".into()));
        }
        if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
            return Err(GeoError::InvalidArgument(format!("noise std must be ≥ 0, got {noise_sd}")));
        }
        let l = self.ambient_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(n * l);
        for _ in 0..n {
            let x = self.sample_point(&mut rng);
            for v in x.iter() {
                let noise: f64 = if noise_sd > 0.0 {
                    noise_sd * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                data.push(v + noise);
            }
        }
        Ok(PointCloud {
            data,
            dim: l,
            seed,
            noise_sd,
        })
    }
}

fn positive(what: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(GeoError::InvalidArgument(format!("{what} must be positive, got {value}")))
    }
}

/// Torus parametrization by longitude `θ` and tube angle `φ`.
pub fn torus_point(major: f64, minor: f64, theta: f64, phi: f64) -> Vector {
    let w = major + minor * phi.cos();
    Vector::from_column_slice(&[w * theta.cos(), w * theta.sin(), minor * phi.sin()])
}

/// Two-stage projection: first onto the center circle, then radially in the
/// tube. Returns `None` on the axis or the center circle.
fn torus_projection(major: f64, minor: f64, p: &Vector3<f64>) -> Option<(Vector3<f64>, Matrix3<f64>)> {
    let rho = p.x.hypot(p.y);
    if rho < SINGULAR_GUARD {
        return None;
    }
    let e = Vector3::new(p.x / rho, p.y / rho, 0.0);
    let center = e * major;
    let q = p - center;
    let qn = q.norm();
    if qn < SINGULAR_GUARD {
        return None;
    }
    let n = q / qn;
    let planar = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0));
    let d_center = (planar - e * e.transpose()) * (major / rho);
    let d_normal = (Matrix3::identity() - n * n.transpose()) * (Matrix3::identity() - d_center) / qn;
    Some((center + n * minor, d_center + d_normal * minor))
}

impl ImplicitRep for AnalyticManifold {
    fn dim(&self) -> usize {
        self.ambient_dim()
    }

    fn eval(&self, z: &Vector) -> Result<(Vector, Matrix)> {
        self.zeta(z)
    }
}

impl DistanceField for AnalyticManifold {
    fn dim(&self) -> usize {
        self.ambient_dim()
    }

    fn distance_and_gradient(&self, z: &Vector) -> Result<(f64, Vector)> {
        let residual = self.zeta(z)?.0;
        let d = residual.norm();
        if d == 0.0 {
            return Ok((0.0, Vector::zeros(z.len())));
        }
        Ok((d, residual / d))
    }
}

/// Finite point sample of a manifold, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    data: Vec<f64>,
    dim: usize,
    seed: u64,
    noise_sd: f64,
}

impl PointCloud {
    pub fn from_points(points: &[Vector], seed: u64, noise_sd: f64) -> Result<Self> {
        let dim = points
            .first()
            .map(|p| p.len())
            .ok_or_else(|| GeoError::InvalidArgument("point cloud must be nonempty".into()))?;
        let mut data = Vec::with_capacity(points.len() * dim);
        for p in points {
            check_dim("point cloud", dim, p.len())?;
            data.extend(p.iter());
        }
        Self::from_flat(data, dim, seed, noise_sd)
    }

    pub fn from_flat(data: Vec<f64>, dim: usize, seed: u64, noise_sd: f64) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(GeoError::InvalidArgument(format!(
                "flat cloud of {} values is not a nonempty multiple of dim {dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(GeoError::InvalidArgument("point cloud contains non-finite entries".into()));
        }
        Ok(PointCloud {
            data,
            dim,
            seed,
            noise_sd,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn noise_sd(&self) -> f64 {
        self.noise_sd
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point(&self, i: usize) -> Vector {
        Vector::from_column_slice(self.row(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}

/// Log-weights `−|y − z_i|² / (2σ²)` of the Gaussian kernel, shifted by their maximum.
fn shifted_weights(y: &Vector, cloud: &PointCloud, sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(GeoError::InvalidArgument(format!("kernel width must be positive, got {sigma}")));
    }
    check_dim("kernel projection", cloud.dim(), y.len())?;
    let scale = 0.5 / (sigma * sigma);
    let mut logw: Vec<f64> = cloud
        .rows()
        .map(|z| -scale * z.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .collect();
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(GeoError::DegenerateWeights);
    }
    for w in logw.iter_mut() {
        *w = (*w - max).exp();
    }
    Ok(logw)
}

/// Gaussian-weighted barycenter of the cloud around `y`.
pub fn kernel_projection(y: &Vector, cloud: &PointCloud, sigma: f64) -> Result<Vector> {
    let weights = shifted_weights(y, cloud, sigma)?;
    let total: f64 = weights.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Err(GeoError::DegenerateWeights);
    }
    let mut acc = Vector::zeros(cloud.dim());
    for (w, z) in weights.iter().zip(cloud.rows()) {
        for (a, v) in acc.iter_mut().zip(z) {
            *a += w * v;
        }
    }
    Ok(acc / total)
}

/// Kernel-barycenter projection viewed as an implicit representation.
///
/// The Jacobian of the barycenter is the weighted covariance of the cloud
/// divided by `σ²`.
#[derive(Debug, Clone)]
pub struct KernelRep {
    pub cloud: PointCloud,
    pub sigma: f64,
}

impl ImplicitRep for KernelRep {
    fn dim(&self) -> usize {
        self.cloud.dim()
    }

    fn eval(&self, y: &Vector) -> Result<(Vector, Matrix)> {
        let weights = shifted_weights(y, &self.cloud, self.sigma)?;
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(GeoError::DegenerateWeights);
        }
        let l = self.cloud.dim();
        let mut mean = Vector::zeros(l);
        let mut second = Matrix::zeros(l, l);
        for (w, z) in weights.iter().zip(self.cloud.rows()) {
            let wn = w / total;
            for i in 0..l {
                mean[i] += wn * z[i];
                for j in 0..l {
                    second[(i, j)] += wn * z[i] * z[j];
                }
            }
        }
        let cov = second - &mean * mean.transpose();
        let jac = Matrix::identity(l, l) - cov / (self.sigma * self.sigma);
        Ok((y - mean, jac))
    }
}

/// Distance field `|ζ(z)|` of any implicit representation, with gradient
/// `Dζ(z)ᵀ ζ(z) / |ζ(z)|`.
#[derive(Debug, Clone, Copy)]
pub struct ResidualDistance<'a, R: ?Sized>(pub &'a R);

impl<R: ImplicitRep + ?Sized> DistanceField for ResidualDistance<'_, R> {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn distance_and_gradient(&self, z: &Vector) -> Result<(f64, Vector)> {
        let (r, d) = self.0.eval(z)?;
        let n = r.norm();
        if n == 0.0 {
            return Ok((0.0, Vector::zeros(z.len())));
        }
        Ok((n, d.tr_mul(&r) / n))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn fd_jacobian(f: impl Fn(&Vector) -> Vector, x: &Vector, h: f64) -> Matrix {
        let l = x.len();
        let mut jac = Matrix::zeros(f(x).len(), l);
        for j in 0..l {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            jac.set_column(j, &((f(&xp) - f(&xm)) / (2.0 * h)));
        }
        jac
    }

    /// Brute-force nearest torus point over a `n × n` grid in `(θ, φ)`.
    fn torus_grid_nearest(major: f64, minor: f64, p: &Vector, n: usize) -> (Vector, f64) {
        use std::f64::consts::TAU;
        let mut best = (f64::INFINITY, 0.0, 0.0);
        let trig: Vec<(f64, f64)> = (0..n).map(|i| (TAU * i as f64 / n as f64).sin_cos()).collect();
        for &(st, ct) in &trig {
            for &(sp, cp) in &trig {
                let w = major + minor * cp;
                let d2 = (w * ct - p[0]).powi(2) + (w * st - p[1]).powi(2) + (minor * sp - p[2]).powi(2);
                if d2 < best.0 {
                    best = (d2, st.atan2(ct), sp.atan2(cp));
                }
            }
        }
        (torus_point(major, minor, best.1, best.2), best.0.sqrt())
    }

    #[test]
    fn torus_point_on_surface_projects_to_itself() {
        let t = AnalyticManifold::default_torus();
        let x = t.project(&v(&[1.0, 0.0, 0.0])).unwrap();
        assert!((x - v(&[1.0, 0.0, 0.0])).norm() < 1e-15);
    }

    #[test]
    fn sphere_radial_projection() {
        let s = AnalyticManifold::sphere(1.0).unwrap();
        let x = s.project(&v(&[2.0, 0.0, 0.0])).unwrap();
        assert!((x - v(&[1.0, 0.0, 0.0])).norm() < 1e-15);
        assert_eq!(s.distance(&v(&[2.0, 0.0, 0.0])).unwrap(), 1.0);
    }

    #[test]
    fn torus_projection_matches_grid_search() {
        let t = AnalyticManifold::default_torus();
        let p = v(&[2.0, 0.0, 0.0]);
        let x = t.project(&p).unwrap();
        assert!((&x - v(&[1.0, 0.0, 0.0])).norm() < 1e-15);
        let (grid, _) = torus_grid_nearest(2.0 / 3.0, 1.0 / 3.0, &p, 4096);
        // Grid spacing is 2π/4096 in each angle.
        assert!((grid - x).norm() < 1e-3);
    }

    #[test]
    fn torus_distance_on_axis_matches_grid_search() {
        let t = AnalyticManifold::default_torus();
        let p = v(&[0.0, 0.0, 1.0]);
        let d = t.distance(&p).unwrap();
        let (_, grid_d) = torus_grid_nearest(2.0 / 3.0, 1.0 / 3.0, &p, 4096);
        assert!(grid_d >= d - 1e-12);
        assert!((grid_d - d).abs() < 1e-6, "{grid_d} vs {d}");
        assert!(t.project(&p).is_err());
    }

    #[test]
    fn torus_distance_zero_on_surface() {
        let t = AnalyticManifold::default_torus();
        let x = torus_point(2.0 / 3.0, 1.0 / 3.0, 0.4, 2.1);
        assert!(t.distance(&x).unwrap() < 1e-15);
    }

    #[test]
    fn singular_points_are_rejected() {
        let s = AnalyticManifold::sphere(1.0).unwrap();
        assert!(matches!(s.project(&v(&[0.0, 0.0, 0.0])), Err(GeoError::SingularPoint { .. })));
        let t = AnalyticManifold::default_torus();
        assert!(matches!(t.zeta(&v(&[0.0, 0.0, 0.3])), Err(GeoError::SingularPoint { .. })));
        assert!(matches!(t.zeta(&v(&[2.0 / 3.0, 0.0, 0.0])), Err(GeoError::SingularPoint { .. })));
    }

    #[test]
    fn affine_residual_and_jacobian() {
        let a = AnalyticManifold::affine(v(&[0.0, 0.0]), vec![v(&[1.0, 0.0])]).unwrap();
        let (res, jac) = a.zeta(&v(&[3.0, 4.0])).unwrap();
        assert_eq!(res, v(&[0.0, 4.0]));
        assert_eq!(jac, Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));
    }

    #[test]
    fn non_orthonormal_basis_rejected() {
        let r = AnalyticManifold::affine(v(&[0.0, 0.0, 0.0]), vec![v(&[1.0, 0.0, 0.0]), v(&[1.0, 1.0, 0.0])]);
        assert!(r.is_err());
    }

    #[test]
    fn sphere_residual_vanishes_on_surface() {
        let s = AnalyticManifold::sphere(1.0).unwrap();
        let (res, _) = s.zeta(&v(&[1.0, 0.0, 0.0])).unwrap();
        assert_eq!(res.norm(), 0.0);
    }

    #[test]
    fn torus_jacobian_matches_finite_differences() {
        let t = AnalyticManifold::default_torus();
        let p = v(&[1.2, 0.0, 0.1]);
        let (res, jac) = t.zeta(&p).unwrap();
        let fd = fd_jacobian(|x| t.zeta(x).unwrap().0, &p, 1e-5);
        assert!((&jac - &fd).norm() <= 1e-6 * jac.norm().max(1.0));
        let proj_fd = fd_jacobian(|x| t.project(x).unwrap(), &p, 1e-5);
        let expected = Matrix::identity(3, 3) - proj_fd;
        assert!((&jac - expected).norm() < 1e-6);
        assert!((res - (&p - t.project(&p).unwrap())).norm() < 1e-15);
    }

    #[test]
    fn tangent_rank_on_manifold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for m in [
            AnalyticManifold::default_torus(),
            AnalyticManifold::sphere(1.3).unwrap(),
            AnalyticManifold::circle(0.7).unwrap(),
            AnalyticManifold::xy_plane(),
        ] {
            let x = m.sample_point(&mut rng);
            let (_, dz) = m.zeta(&x).unwrap();
            let l = x.len();
            let dpi = Matrix::identity(l, l) - dz;
            assert_eq!(dpi.rank(1e-8), m.intrinsic_dim(), "{}", m.name());
        }
    }

    #[test]
    fn cloud_without_noise_lies_on_manifold() {
        for m in [
            AnalyticManifold::default_torus(),
            AnalyticManifold::sphere(1.0).unwrap(),
            AnalyticManifold::circle(2.0).unwrap(),
            AnalyticManifold::xy_plane(),
        ] {
            let cloud = m.sample_cloud(500, 0.0, 11).unwrap();
            for i in 0..cloud.len() {
                let (res, _) = m.zeta(&cloud.point(i)).unwrap();
                assert!(res.norm() <= 1e-12, "{} residual {}", m.name(), res.norm());
            }
        }
    }

    #[test]
    fn cloud_sampling_is_deterministic() {
        let t = AnalyticManifold::default_torus();
        assert_eq!(t.sample_cloud(200, 0.05, 9).unwrap(), t.sample_cloud(200, 0.05, 9).unwrap());
        assert_ne!(t.sample_cloud(200, 0.05, 9).unwrap(), t.sample_cloud(200, 0.05, 10).unwrap());
    }

    #[test]
    fn torus_tube_angle_follows_area_density() {
        use std::f64::consts::{PI, TAU};
        let (major, minor) = (2.0 / 3.0, 1.0 / 3.0);
        let t = AnalyticManifold::default_torus();
        let n = 100_000;
        let cloud = t.sample_cloud(n, 0.0, 2024).unwrap();
        let bins = 32;
        let mut counts = vec![0usize; bins];
        for z in cloud.rows() {
            let rho = z[0].hypot(z[1]);
            let phi = z[2].atan2(rho - major).rem_euclid(TAU);
            counts[((phi / TAU * bins as f64) as usize).min(bins - 1)] += 1;
        }
        // Density of φ is (R + r cos φ) / (2π R); integrate it over each bin.
        let width = TAU / bins as f64;
        let chi2: f64 = (0..bins)
            .map(|b| {
                let (a, c) = (b as f64 * width, (b + 1) as f64 * width);
                let mass = (major * (c - a) + minor * (c.sin() - a.sin())) / (2.0 * PI * major);
                let expected = mass * n as f64;
                (counts[b] as f64 - expected).powi(2) / expected
            })
            .sum();
        // 99.9% quantile of χ² with 31 degrees of freedom.
        assert!(chi2 < 61.1, "chi2 = {chi2}");
    }

    #[test]
    fn kernel_projection_degenerate_clouds() {
        let z = v(&[0.3, -0.2, 0.5]);
        let single = PointCloud::from_points(&[z.clone()], 0, 0.0).unwrap();
        let y = v(&[5.0, 5.0, 5.0]);
        assert!((kernel_projection(&y, &single, 0.01).unwrap() - &z).norm() < 1e-15);

        let a = v(&[1.0, 2.0, -1.0]);
        let pair = PointCloud::from_points(&[-a.clone(), a], 0, 0.0).unwrap();
        assert!(kernel_projection(&Vector::zeros(3), &pair, 0.7).unwrap().norm() < 1e-15);
    }

    #[test]
    fn kernel_projection_far_query_stays_finite() {
        let cloud = AnalyticManifold::sphere(1.0).unwrap().sample_cloud(100, 0.0, 1).unwrap();
        let y = v(&[1e3, 0.0, 0.0]);
        let p = kernel_projection(&y, &cloud, 1e-3).unwrap();
        assert!(p.iter().all(|c| c.is_finite()));
        assert!(matches!(
            kernel_projection(&v(&[f64::NAN, 0.0, 0.0]), &cloud, 0.1),
            Err(GeoError::DegenerateWeights)
        ));
    }

    #[test]
    fn kernel_projection_on_dense_plane_is_orthogonal() {
        let basis = vec![v(&[1.0, 0.0, 0.0]), v(&[0.0, 1.0, 0.0])];
        let plane = AnalyticManifold::affine_with_extent(Vector::zeros(3), basis, 0.25).unwrap();
        let cloud = plane.sample_cloud(100_000, 0.0, 5).unwrap();
        let y = v(&[0.01, -0.02, 0.1]);
        let p = kernel_projection(&y, &cloud, 0.03).unwrap();
        let exact = plane.project(&y).unwrap();
        assert!((p - exact).norm() < 2e-3);
    }

    #[test]
    fn kernel_defect_grows_quadratically_with_width() {
        let t = AnalyticManifold::default_torus();
        let cloud = t.sample_cloud(400_000, 0.0, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let targets: Vec<Vector> = (0..20).map(|_| t.sample_point(&mut rng)).collect();
        let mut defects = Vec::new();
        for sigma in [0.01, 0.02, 0.04] {
            let mean: f64 = targets
                .iter()
                .map(|z| {
                    let n = t.random_unit_normal(z, &mut rng).unwrap();
                    (kernel_projection(z, &cloud, sigma).unwrap() - z).dot(&n).abs()
                })
                .sum::<f64>()
                / targets.len() as f64;
            defects.push(mean);
        }
        assert!(defects[0] < defects[1] && defects[1] < defects[2], "{defects:?}");
        // Principal curvatures are at most 1/r + 1/(R − r) = 6, so C ≤ 6 is generous.
        for (d, sigma) in defects.iter().zip([0.01, 0.02, 0.04]) {
            assert!(*d <= 6.0 * sigma * sigma + 1e-4, "defect {d} at sigma {sigma}");
        }
    }

    #[test]
    fn kernel_rep_jacobian_matches_finite_differences() {
        let cloud = AnalyticManifold::circle(1.0).unwrap().sample_cloud(300, 0.01, 4).unwrap();
        let rep = KernelRep { cloud, sigma: 0.2 };
        let y = v(&[0.8, 0.5]);
        let (_, jac) = rep.eval(&y).unwrap();
        let fd = fd_jacobian(|x| rep.eval(x).unwrap().0, &y, 1e-5);
        assert!((&jac - &fd).norm() <= 1e-6 * jac.norm());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn manifolds() -> Vec<AnalyticManifold> {
            vec![
                AnalyticManifold::default_torus(),
                AnalyticManifold::sphere(1.0).unwrap(),
                AnalyticManifold::xy_plane(),
            ]
        }

        proptest! {
            #[test]
            fn projection_is_idempotent(x in -2.0..2.0f64, y in -2.0..2.0f64, z in -2.0..2.0f64) {
                let p = v(&[x, y, z]);
                for m in manifolds() {
                    if let Ok(q) = m.project(&p) {
                        let qq = m.project(&q).unwrap();
                        prop_assert!((qq - &q).norm() <= 1e-10);
                        prop_assert!(m.zeta(&q).unwrap().0.norm() <= 1e-12);
                    }
                }
            }

            #[test]
            fn residual_is_normal(x in -2.0..2.0f64, y in -2.0..2.0f64, z in -2.0..2.0f64) {
                let p = v(&[x, y, z]);
                for m in manifolds() {
                    if let Ok((res, _)) = m.zeta(&p) {
                        let q = &p - &res;
                        let (_, dz) = m.zeta(&q).unwrap();
                        let tangent = Matrix::identity(3, 3) - dz;
                        prop_assert!((tangent * &res).norm() <= 1e-8);
                    }
                }
            }

            #[test]
            fn jacobian_matches_central_differences(x in -1.5..1.5f64, y in -1.5..1.5f64, z in -0.6..0.6f64) {
                let p = v(&[x, y, z]);
                for m in manifolds() {
                    // Stay clear of the singular sets where the map is not smooth.
                    if m.distance(&p).unwrap() > 0.25 && !matches!(m, AnalyticManifold::AffineSubspace(_)) {
                        continue;
                    }
                    if let Ok((_, jac)) = m.zeta(&p) {
                        let fd = fd_jacobian(|q| m.zeta(q).unwrap().0, &p, 1e-5);
                        prop_assert!((&jac - &fd).norm() <= 1e-5 * jac.norm().max(1.0));
                    }
                }
            }
        }
    }
}
