use crate::energy::LocalEnergy;
use crate::error::{check_dim, GeoError, Result};
use crate::manifold::Vector;

/// Ordered points `z_0, …, z_K` in `R^l` with `K ≥ 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePath {
    points: Vec<Vector>,
}

impl DiscretePath {
    pub fn new(points: Vec<Vector>) -> Result<Self> {
        if points.len() < 2 {
            return Err(GeoError::InvalidArgument(format!(
                "a discrete path needs at least two points, got {}",
                points.len()
            )));
        }
        let l = points[0].len();
        if l == 0 {
            return Err(GeoError::InvalidArgument("path points must have dimension ≥ 1".into()));
        }
        for p in &points {
            check_dim("path point", l, p.len())?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(GeoError::InvalidArgument("path contains non-finite coordinates".into()));
            }
        }
        Ok(DiscretePath { points })
    }

    /// The path that stays at `z0` up to index `⌊K/2⌋` and jumps to `zK` afterwards.
    pub fn constant_jump(z0: &Vector, zk: &Vector, k: usize) -> Result<Self> {
        check_dim("path endpoints", z0.len(), zk.len())?;
        if k == 0 {
            return Err(GeoError::InvalidArgument("K must be at least 1".into()));
        }
        let points = (0..=k).map(|i| if i <= k / 2 { z0.clone() } else { zk.clone() }).collect();
        Self::new(points)
    }

    /// Equispaced points on the segment from `z0` to `zK`.
    pub fn linear(z0: &Vector, zk: &Vector, k: usize) -> Result<Self> {
        check_dim("path endpoints", z0.len(), zk.len())?;
        if k == 0 {
            return Err(GeoError::InvalidArgument("K must be at least 1".into()));
        }
        let points = (0..=k)
            .map(|i| {
                let t = i as f64 / k as f64;
                z0 * (1.0 - t) + zk * t
            })
            .collect();
        Self::new(points)
    }

    pub fn k(&self) -> usize {
        self.points.len() - 1
    }

    pub fn dim(&self) -> usize {
        self.points[0].len()
    }

    pub fn points(&self) -> &[Vector] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Vector> {
        self.points
    }

    pub fn start(&self) -> &Vector {
        &self.points[0]
    }

    pub fn end(&self) -> &Vector {
        &self.points[self.k()]
    }

    /// Interior points `z_1 … z_{K−1}` stacked into one vector.
    pub fn interior_stacked(&self) -> Vector {
        let l = self.dim();
        let mut x = Vector::zeros(l * (self.k() - 1));
        for (i, p) in self.points[1..self.k()].iter().enumerate() {
            x.rows_mut(i * l, l).copy_from(p);
        }
        x
    }

    /// Copy of the path with the interior replaced by the stacked vector `x`.
    pub fn with_interior(&self, x: &Vector) -> Result<Self> {
        let l = self.dim();
        check_dim("stacked interior", l * (self.k() - 1), x.len())?;
        let mut points = self.points.clone();
        for (i, p) in points[1..self.k()].iter_mut().enumerate() {
            p.copy_from(&x.rows(i * l, l));
        }
        Ok(DiscretePath { points })
    }

    pub fn segment_lengths(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| (&w[1] - &w[0]).norm()).collect()
    }

    pub fn length(&self) -> f64 {
        self.segment_lengths().iter().sum()
    }

    /// Point at arclength fraction `s ∈ [0, 1]` along the polygon.
    pub fn at_arclength(&self, s: f64) -> Vector {
        let seg = self.segment_lengths();
        let total: f64 = seg.iter().sum();
        if total == 0.0 {
            return self.points[0].clone();
        }
        let target = s.clamp(0.0, 1.0) * total;
        let mut acc = 0.0;
        for (i, len) in seg.iter().enumerate() {
            if acc + len >= target && *len > 0.0 {
                let t = ((target - acc) / len).clamp(0.0, 1.0);
                return &self.points[i] * (1.0 - t) + &self.points[i + 1] * t;
            }
            acc += len;
        }
        self.end().clone()
    }

    /// Point of the piecewise-affine interpolation at time `t ∈ [0, 1]`,
    /// vertex `k` sitting at time `k / K`.
    pub fn at_time(&self, t: f64) -> Vector {
        let k = self.k();
        let x = t.clamp(0.0, 1.0) * k as f64;
        let i = (x.floor() as usize).min(k - 1);
        let w = x - i as f64;
        &self.points[i] * (1.0 - w) + &self.points[i + 1] * w
    }
}

/// Largest distance between two polygons compared at equal arclength
/// fractions, sampled at `samples + 1` uniformly spaced fractions.
pub fn reparametrized_distance(a: &DiscretePath, b: &DiscretePath, samples: usize) -> f64 {
    (0..=samples)
        .map(|i| {
            let s = i as f64 / samples as f64;
            (a.at_arclength(s) - b.at_arclength(s)).norm()
        })
        .fold(0.0, f64::max)
}

/// Discrete path energy `E^K = K Σ_k W(z_{k−1}, z_k)` and its gradient with
/// respect to the interior points, stacked.
pub fn path_energy(energy: &dyn LocalEnergy, path: &DiscretePath) -> Result<(f64, Vector)> {
    let k = path.k();
    let l = path.dim();
    let kf = k as f64;
    let pts = path.points();
    let mut value = 0.0;
    let mut grad = Vector::zeros(l * (k - 1));
    for seg in 1..=k {
        let e = energy.eval(&pts[seg - 1], &pts[seg])?;
        value += e.value;
        // Segment `seg` couples z_{seg−1} (first slot) and z_seg (second slot).
        if seg >= 2 {
            let mut g = grad.rows_mut((seg - 2) * l, l);
            g.axpy(kf, &e.grad_first, 1.0);
        }
        if seg < k {
            let mut g = grad.rows_mut((seg - 1) * l, l);
            g.axpy(kf, &e.grad_second, 1.0);
        }
    }
    Ok((kf * value, grad))
}
