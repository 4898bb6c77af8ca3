//! Local energies `W(z, z̃)` approximating the squared Riemannian distance
//! between nearby latent points, and the synthetic decoders `ψ` that
//! induce the pullback variants.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, GeoError, Result};
use crate::nn::Mlp;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Value of `W(z, z̃)` with both partial gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyEval {
    pub value: f64,
    /// `∂_z W(z, z̃)`.
    pub grad_first: Vector,
    /// `∂_{z̃} W(z, z̃)`.
    pub grad_second: Vector,
}

pub trait LocalEnergy: Send + Sync {
    fn value(&self, z: &Vector, zt: &Vector) -> Result<f64>;

    fn eval(&self, z: &Vector, zt: &Vector) -> Result<EnergyEval>;

    /// Mixed second derivative `M_ij = ∂² W / ∂z_i ∂z̃_j`, the derivative of
    /// the first-slot gradient with respect to the second argument.
    fn mixed_hessian(&self, z: &Vector, zt: &Vector) -> Result<Matrix>;
}

/// A smooth map with an analytic Jacobian.
pub trait Decoder: Send + Sync + fmt::Debug {
    /// Decoded point `ψ(z)` and Jacobian `Dψ(z)`.
    fn decode(&self, z: &Vector) -> Result<(Vector, Matrix)>;
}

impl Decoder for Mlp {
    fn decode(&self, z: &Vector) -> Result<(Vector, Matrix)> {
        self.forward_with_jacobian(z)
    }
}

/// Block size of the sphere lift: each block is a unit vector in `R^3`.
pub const SPHERE_BLOCK: usize = 3;

#[derive(Debug, Clone)]
pub enum SyntheticDecoder {
    Identity,
    Linear(Matrix),
    /// `R^{3m} → (S^2)^m`, normalizing each consecutive triple of coordinates.
    SphereLift { blocks: usize },
    Custom(Arc<dyn Decoder>),
}

impl SyntheticDecoder {
    pub fn decode(&self, z: &Vector) -> Result<(Vector, Matrix)> {
        match self {
            SyntheticDecoder::Identity => Ok((z.clone(), Matrix::identity(z.len(), z.len()))),
            SyntheticDecoder::Linear(a) => {
                check_dim("linear decoder input", a.ncols(), z.len())?;
                Ok((a * z, a.clone()))
            }
            SyntheticDecoder::SphereLift { blocks } => {
                check_dim("sphere lift input", SPHERE_BLOCK * blocks, z.len())?;
                let mut out = Vector::zeros(z.len());
                let mut jac = Matrix::zeros(z.len(), z.len());
                for b in 0..*blocks {
                    let x = z.rows(SPHERE_BLOCK * b, SPHERE_BLOCK);
                    let norm = x.norm();
                    if norm < 1e-12 {
                        return Err(GeoError::InvalidArgument(format!("sphere lift block {b} is zero")));
                    }
                    let u = x / norm;
                    let block_jac = (Matrix::identity(SPHERE_BLOCK, SPHERE_BLOCK) - &u * u.transpose()) / norm;
                    out.rows_mut(SPHERE_BLOCK * b, SPHERE_BLOCK).copy_from(&u);
                    jac.view_mut((SPHERE_BLOCK * b, SPHERE_BLOCK * b), (SPHERE_BLOCK, SPHERE_BLOCK))
                        .copy_from(&block_jac);
                }
                Ok((out, jac))
            }
            SyntheticDecoder::Custom(d) => d.decode(z),
        }
    }
}

fn same_dims(z: &Vector, zt: &Vector) -> Result<()> {
    check_dim("local energy arguments", z.len(), zt.len())
}

/// `W_E(z, z̃) = |z̃ − z|²`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Euclidean;

impl LocalEnergy for Euclidean {
    fn value(&self, z: &Vector, zt: &Vector) -> Result<f64> {
        same_dims(z, zt)?;
        Ok((zt - z).norm_squared())
    }

    fn eval(&self, z: &Vector, zt: &Vector) -> Result<EnergyEval> {
        same_dims(z, zt)?;
        let diff = zt - z;
        Ok(EnergyEval {
            value: diff.norm_squared(),
            grad_first: &diff * -2.0,
            grad_second: diff * 2.0,
        })
    }

    fn mixed_hessian(&self, z: &Vector, zt: &Vector) -> Result<Matrix> {
        same_dims(z, zt)?;
        Ok(Matrix::identity(z.len(), z.len()) * -2.0)
    }
}

/// `W_PB(z, z̃) = scale · |ψ(z) − ψ(z̃)|²`.
///
/// With `scale = 1/2` and `ψ` the mean of a fixed-variance Gaussian decoder
/// this is the Kullback–Leibler divergence between the decoded Gaussians.
#[derive(Debug, Clone)]
pub struct Pullback {
    pub decoder: SyntheticDecoder,
    scale: f64,
}

impl Pullback {
    pub fn new(decoder: SyntheticDecoder) -> Self {
        Pullback { decoder, scale: 1.0 }
    }

    pub fn kl_gaussian(mean_map: SyntheticDecoder) -> Self {
        Pullback {
            decoder: mean_map,
            scale: 0.5,
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

impl LocalEnergy for Pullback {
    fn value(&self, z: &Vector, zt: &Vector) -> Result<f64> {
        same_dims(z, zt)?;
        let (a, _) = self.decoder.decode(z)?;
        let (b, _) = self.decoder.decode(zt)?;
        Ok(self.scale * (a - b).norm_squared())
    }

    fn eval(&self, z: &Vector, zt: &Vector) -> Result<EnergyEval> {
        same_dims(z, zt)?;
        let (a, ja) = self.decoder.decode(z)?;
        let (b, jb) = self.decoder.decode(zt)?;
        let diff = a - b;
        let s2 = 2.0 * self.scale;
        Ok(EnergyEval {
            value: self.scale * diff.norm_squared(),
            grad_first: ja.tr_mul(&diff) * s2,
            grad_second: jb.tr_mul(&diff) * -s2,
        })
    }

    fn mixed_hessian(&self, z: &Vector, zt: &Vector) -> Result<Matrix> {
        same_dims(z, zt)?;
        let (_, ja) = self.decoder.decode(z)?;
        let (_, jb) = self.decoder.decode(zt)?;
        Ok(ja.tr_mul(&jb) * (-2.0 * self.scale))
    }
}

/// Sum of squared great-circle angles between corresponding unit blocks of
/// the decoded points, `Σ_i arccos(ψ(z)_i · ψ(z̃)_i)²`.
#[derive(Debug, Clone)]
pub struct ProductSphere {
    pub decoder: SyntheticDecoder,
}

/// Largest block dot product treated as non-antipodal.
const ANTIPODAL_MARGIN: f64 = 1e-9;
const SERIES_GRAD: f64 = 1e-6;
const SERIES_HESS: f64 = 1e-3;
const UNIT_TOL: f64 = 1e-8;

/// `f(t) = arccos(t)²` and its first two derivatives, stable near `t = 1`.
pub(crate) fn arccos_sq(t: f64) -> (f64, f64, f64) {
    let s = 1.0 - t;
    let a = t.acos();
    let w = (1.0 - t * t).sqrt();
    let d1 = if s < SERIES_GRAD {
        -(2.0 + s * (2.0 / 3.0 + s * (4.0 / 15.0 + s * (4.0 / 35.0 + s * 16.0 / 315.0))))
    } else {
        -2.0 * a / w
    };
    let d2 = if s < SERIES_HESS {
        2.0 / 3.0 + s * (8.0 / 15.0 + s * (12.0 / 35.0 + s * (64.0 / 315.0 + s * 80.0 / 693.0)))
    } else {
        (2.0 - 2.0 * a * t / w) / (1.0 - t * t)
    };
    (a * a, d1, d2)
}

impl ProductSphere {
    pub fn new(decoder: SyntheticDecoder) -> Self {
        ProductSphere { decoder }
    }

    fn decode_blocks(&self, z: &Vector) -> Result<(Vector, Matrix)> {
        let (mut u, jac) = self.decoder.decode(z)?;
        if u.len() % SPHERE_BLOCK != 0 {
            return Err(GeoError::InvalidArgument(format!(
                "product-sphere decoder output dim {} is not a multiple of {SPHERE_BLOCK}",
                u.len()
            )));
        }
        for b in 0..u.len() / SPHERE_BLOCK {
            let mut block = u.rows_mut(SPHERE_BLOCK * b, SPHERE_BLOCK);
            let norm = block.norm();
            if (norm - 1.0).abs() > UNIT_TOL {
                return Err(GeoError::InvalidArgument(format!(
                    "decoded block {b} has norm {norm}, expected a unit vector"
                )));
            }
            block /= norm;
        }
        Ok((u, jac))
    }

    fn block_dots(u: &Vector, v: &Vector) -> Vec<f64> {
        (0..u.len() / SPHERE_BLOCK)
            .map(|b| u.rows(SPHERE_BLOCK * b, SPHERE_BLOCK).dot(&v.rows(SPHERE_BLOCK * b, SPHERE_BLOCK)))
            .collect()
    }

    /// Great-circle angle between unit blocks, via `atan2` for accuracy near 0 and π.
    fn block_angles(u: &Vector, v: &Vector) -> Vec<f64> {
        (0..u.len() / SPHERE_BLOCK)
            .map(|b| {
                let a = u.fixed_rows::<3>(SPHERE_BLOCK * b);
                let c = v.fixed_rows::<3>(SPHERE_BLOCK * b);
                a.cross(&c).norm().atan2(a.dot(&c))
            })
            .collect()
    }

    fn guarded(dots: &[f64]) -> Result<Vec<f64>> {
        dots.iter()
            .enumerate()
            .map(|(b, &t)| {
                if t <= -1.0 + ANTIPODAL_MARGIN {
                    Err(GeoError::AntipodalBlock { block: b })
                } else {
                    Ok(t.min(1.0))
                }
            })
            .collect()
    }
}

impl LocalEnergy for ProductSphere {
    fn value(&self, z: &Vector, zt: &Vector) -> Result<f64> {
        same_dims(z, zt)?;
        let (u, _) = self.decode_blocks(z)?;
        let (v, _) = self.decode_blocks(zt)?;
        Ok(Self::block_angles(&u, &v).iter().map(|a| a * a).sum())
    }

    fn eval(&self, z: &Vector, zt: &Vector) -> Result<EnergyEval> {
        same_dims(z, zt)?;
        let (u, ju) = self.decode_blocks(z)?;
        let (v, jv) = self.decode_blocks(zt)?;
        let dots = Self::guarded(&Self::block_dots(&u, &v))?;
        let value = Self::block_angles(&u, &v).iter().map(|a| a * a).sum();
        // Gradients of W with respect to the decoded points.
        let mut gu = Vector::zeros(u.len());
        let mut gv = Vector::zeros(v.len());
        for (b, &t) in dots.iter().enumerate() {
            let (_, d1, _) = arccos_sq(t);
            let r = SPHERE_BLOCK * b;
            gu.rows_mut(r, SPHERE_BLOCK).copy_from(&(v.rows(r, SPHERE_BLOCK) * d1));
            gv.rows_mut(r, SPHERE_BLOCK).copy_from(&(u.rows(r, SPHERE_BLOCK) * d1));
        }
        Ok(EnergyEval {
            value,
            grad_first: ju.tr_mul(&gu),
            grad_second: jv.tr_mul(&gv),
        })
    }

    fn mixed_hessian(&self, z: &Vector, zt: &Vector) -> Result<Matrix> {
        same_dims(z, zt)?;
        let (u, ju) = self.decode_blocks(z)?;
        let (v, jv) = self.decode_blocks(zt)?;
        let dots = Self::guarded(&Self::block_dots(&u, &v))?;
        let n = u.len();
        let mut middle = Matrix::zeros(n, n);
        for (b, &t) in dots.iter().enumerate() {
            let (_, d1, d2) = arccos_sq(t);
            let r = SPHERE_BLOCK * b;
            let ub = u.rows(r, SPHERE_BLOCK);
            let vb = v.rows(r, SPHERE_BLOCK);
            // ∂(f'(t) v) / ∂v = f''(t) v uᵀ + f'(t) I.
            let block = vb * ub.transpose() * d2 + Matrix::identity(SPHERE_BLOCK, SPHERE_BLOCK) * d1;
            middle.view_mut((r, r), (SPHERE_BLOCK, SPHERE_BLOCK)).copy_from(&block);
        }
        Ok(ju.tr_mul(&(middle * jv)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_column_slice(xs)
    }

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vector {
        Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
    }

    fn fd_grads(w: &dyn LocalEnergy, z: &Vector, zt: &Vector, h: f64) -> (Vector, Vector) {
        let n = z.len();
        let mut g1 = Vector::zeros(n);
        let mut g2 = Vector::zeros(n);
        for i in 0..n {
            let mut p = z.clone();
            let mut m = z.clone();
            p[i] += h;
            m[i] -= h;
            g1[i] = (w.value(&p, zt).unwrap() - w.value(&m, zt).unwrap()) / (2.0 * h);
            let mut p = zt.clone();
            let mut m = zt.clone();
            p[i] += h;
            m[i] -= h;
            g2[i] = (w.value(z, &p).unwrap() - w.value(z, &m).unwrap()) / (2.0 * h);
        }
        (g1, g2)
    }

    fn fd_mixed(w: &dyn LocalEnergy, z: &Vector, zt: &Vector, h: f64) -> Matrix {
        let n = z.len();
        let mut m = Matrix::zeros(n, n);
        for j in 0..n {
            let mut p = zt.clone();
            let mut q = zt.clone();
            p[j] += h;
            q[j] -= h;
            let col = (w.eval(z, &p).unwrap().grad_first - w.eval(z, &q).unwrap().grad_first) / (2.0 * h);
            m.set_column(j, &col);
        }
        m
    }

    fn close(a: &Vector, b: &Vector, tol: f64) -> bool {
        (a - b).norm() <= tol * a.norm().max(b.norm()).max(1e-8)
    }

    #[test]
    fn euclid_closed_form() {
        let w = Euclidean;
        let e = w.eval(&v(&[0.0, 0.0]), &v(&[3.0, 4.0])).unwrap();
        assert_eq!(e.value, 25.0);
        assert_eq!(e.grad_second, v(&[6.0, 8.0]));
        assert_eq!(e.grad_first, v(&[-6.0, -8.0]));
        assert_eq!(w.value(&v(&[1.0, 2.0]), &v(&[1.0, 2.0])).unwrap(), 0.0);
        assert!(w.value(&v(&[1.0]), &v(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn pullback_identity_reduces_to_euclid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pb = Pullback::new(SyntheticDecoder::Identity);
        let kl = Pullback::kl_gaussian(SyntheticDecoder::Identity);
        for _ in 0..10 {
            let (a, b) = (random(&mut rng, 4), random(&mut rng, 4));
            let e = Euclidean.eval(&a, &b).unwrap();
            let p = pb.eval(&a, &b).unwrap();
            assert!((e.value - p.value).abs() < 1e-14);
            assert!(close(&e.grad_first, &p.grad_first, 1e-14));
            assert!((kl.value(&a, &b).unwrap() - 0.5 * e.value).abs() < 1e-14);
        }
    }

    #[test]
    fn pullback_linear_closed_form() {
        let a = Matrix::from_row_slice(3, 2, &[1.0, 2.0, 0.0, -1.0, 3.0, 0.5]);
        let pb = Pullback::new(SyntheticDecoder::Linear(a.clone()));
        let z = v(&[0.2, -0.7]);
        let zt = v(&[1.1, 0.4]);
        let e = pb.eval(&z, &zt).unwrap();
        assert!((e.value - (&a * (&z - &zt)).norm_squared()).abs() < 1e-14);
        let expected = a.transpose() * &a * (&zt - &z) * -2.0;
        assert!(close(&e.grad_first, &expected, 1e-14));
        let kl = Pullback::kl_gaussian(SyntheticDecoder::Linear(a.clone()));
        let (g1, g2) = fd_grads(&kl, &z, &zt, 1e-5);
        let ek = kl.eval(&z, &zt).unwrap();
        assert!((ek.value - 0.5 * e.value).abs() < 1e-14);
        assert!(close(&ek.grad_first, &g1, 1e-8) && close(&ek.grad_second, &g2, 1e-8));
    }

    #[test]
    fn product_sphere_right_angles() {
        let w = ProductSphere::new(SyntheticDecoder::SphereLift { blocks: 2 });
        let z = v(&[1.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
        let zt = v(&[0.0, 3.0, 0.0, 0.5, 0.0, 0.0]);
        let expected = 2.0 * std::f64::consts::FRAC_PI_2.powi(2);
        assert!((w.value(&z, &zt).unwrap() - expected).abs() < 1e-14);
        assert_eq!(w.value(&z, &z).unwrap(), 0.0);
        let e = w.eval(&z, &z).unwrap();
        assert_eq!(e.value, 0.0);
        assert!(e.grad_first.norm() < 1e-15);
    }

    #[test]
    fn product_sphere_antipodal_blocks() {
        let w = ProductSphere::new(SyntheticDecoder::SphereLift { blocks: 1 });
        let z = v(&[0.0, 0.0, 1.0]);
        let zt = v(&[0.0, 0.0, -1.0]);
        assert!(matches!(w.eval(&z, &zt), Err(GeoError::AntipodalBlock { block: 0 })));
        let d = w.value(&z, &zt).unwrap();
        assert!((d - std::f64::consts::PI.powi(2)).abs() < 1e-12);
    }

    #[test]
    fn arccos_series_branches_are_continuous() {
        for s in [SERIES_GRAD, SERIES_HESS] {
            let (_, a1, a2) = arccos_sq(1.0 - s * (1.0 - 1e-9));
            let (_, b1, b2) = arccos_sq(1.0 - s * (1.0 + 1e-9));
            assert!((a1 - b1).abs() < 1e-8, "{a1} {b1}");
            assert!((a2 - b2).abs() < 1e-6, "{a2} {b2}");
        }
        let (f, d1, d2) = arccos_sq(1.0);
        assert_eq!((f, d1), (0.0, -2.0));
        assert!((d2 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn all_variants_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let lin = Matrix::from_fn(4, 3, |_, _| rng.random_range(-1.0..1.0));
        let net = Arc::new(Mlp::new(&[3, 6, 5], 3).unwrap());
        let energies: Vec<(&str, Box<dyn LocalEnergy>, usize)> = vec![
            ("euclid", Box::new(Euclidean), 3),
            ("pullback-linear", Box::new(Pullback::new(SyntheticDecoder::Linear(lin.clone()))), 3),
            ("pullback-mlp", Box::new(Pullback::new(SyntheticDecoder::Custom(net))), 3),
            ("pullback-sphere", Box::new(Pullback::new(SyntheticDecoder::SphereLift { blocks: 2 })), 6),
            ("product-sphere", Box::new(ProductSphere::new(SyntheticDecoder::SphereLift { blocks: 2 })), 6),
            ("kl-gauss", Box::new(Pullback::kl_gaussian(SyntheticDecoder::Linear(lin))), 3),
        ];
        for (name, w, n) in &energies {
            for _ in 0..100 {
                let z = random(&mut rng, *n);
                let zt = &z + random(&mut rng, *n) * 0.5;
                let e = w.eval(&z, &zt).unwrap();
                let (g1, g2) = fd_grads(w.as_ref(), &z, &zt, 1e-5);
                assert!(close(&e.grad_first, &g1, 1e-5), "{name}: {} vs {}", e.grad_first, g1);
                assert!(close(&e.grad_second, &g2, 1e-5), "{name}");
                let m = w.mixed_hessian(&z, &zt).unwrap();
                let fd = fd_mixed(w.as_ref(), &z, &zt, 1e-5);
                assert!((&m - &fd).norm() <= 1e-5 * m.norm().max(1e-8), "{name}: mixed {m} vs {fd}");
                assert!(e.value >= 0.0);
                assert!((w.value(&zt, &z).unwrap() - e.value).abs() <= 1e-12 * e.value.max(1.0), "{name} symmetry");
                assert!(w.value(&z, &z).unwrap().abs() < 1e-24, "{name} W(z,z)");
            }
        }
    }

    #[test]
    fn product_sphere_gradient_near_alignment() {
        let w = ProductSphere::new(SyntheticDecoder::SphereLift { blocks: 1 });
        let z = v(&[0.3, -0.4, 0.8]);
        for eps in [1e-2, 1e-4] {
            let zt = &z + v(&[eps, 0.5 * eps, -eps]);
            let e = w.eval(&z, &zt).unwrap();
            let (g1, _) = fd_grads(&w, &z, &zt, eps * 1e-3);
            assert!(close(&e.grad_first, &g1, 1e-4), "eps {eps}");
        }
    }

    #[test]
    fn consistency_with_sphere_distance() {
        // On the unit sphere the sphere lift is the identity, so the
        // product-sphere energy is the squared geodesic distance, while the
        // Euclidean energy (squared chord) differs at fourth order.
        let ps = ProductSphere::new(SyntheticDecoder::SphereLift { blocks: 1 });
        let z = v(&[1.0, 0.0, 0.0]);
        let axis = v(&[0.0, 0.6, 0.8]);
        let mut ratios = Vec::new();
        for d in [0.1_f64, 0.05, 0.025] {
            let zt = &z * d.cos() + &axis * d.sin();
            let dist2 = d * d;
            assert!((ps.value(&z, &zt).unwrap() - dist2).abs() < 1e-14);
            let gap = dist2 - Euclidean.value(&z, &zt).unwrap();
            ratios.push(gap / d.powi(4));
        }
        for r in &ratios {
            assert!((r - 1.0 / 12.0).abs() < 1e-3, "{ratios:?}");
        }
    }
}
