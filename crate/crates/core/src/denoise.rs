//! Denoising objective and the training loop producing a learned projection
//! `Π_σ` and its implicit representation `ζ_σ = id − Π_σ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, GeoError, Result};
use crate::manifold::{AnalyticManifold, ImplicitRep, Matrix, PointCloud, Vector};
use crate::nn::{AdamConfig, AdamState, Checkpoint, Mlp};

/// Loss is averaged over windows of this many steps for the trace.
pub const TRACE_EVERY: usize = 100;

/// Learning rate over the course of training, relative to the optimizer's
/// base rate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate towards zero.
    #[default]
    Cosine,
}

impl LrSchedule {
    /// Rate for the 0-based `step` out of `steps`.
    pub fn rate(&self, base: f64, step: usize, steps: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let frac = step as f64 / steps.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub sigma: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub layer_dims: Vec<usize>,
    pub optimizer: AdamConfig,
    pub schedule: LrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sigma: 0.05,
            batch_size: 128,
            steps: 20_000,
            seed: 0,
            layer_dims: vec![3, 128, 128, 128, 128, 128, 3],
            optimizer: AdamConfig::default(),
            schedule: LrSchedule::default(),
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(GeoError::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.batch_size == 0 {
            return Err(GeoError::InvalidArgument("batch_size must be at least 1".into()));
        }
        if self.layer_dims.len() < 2 || self.layer_dims.first() != self.layer_dims.last() {
            return Err(GeoError::InvalidArgument(format!(
                "layer_dims must start and end with the ambient dimension, got {:?}",
                self.layer_dims
            )));
        }
        Ok(())
    }
}

/// A trained network used as the projection `Π_σ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnedRep {
    pub model: Mlp,
    pub sigma: f64,
    pub seed: u64,
}

impl LearnedRep {
    pub fn new(model: Mlp, sigma: f64, seed: u64) -> Result<Self> {
        check_dim("learned projection output", model.input_dim(), model.output_dim())?;
        Ok(LearnedRep { model, sigma, seed })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Self::new(ckpt.to_model()?, ckpt.sigma, ckpt.seed)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, self.sigma, self.seed)
    }

    pub fn project(&self, y: &Vector) -> Result<Vector> {
        self.model.forward(y)
    }
}

impl ImplicitRep for LearnedRep {
    fn dim(&self) -> usize {
        self.model.input_dim()
    }

    fn eval(&self, z: &Vector) -> Result<(Vector, Matrix)> {
        check_dim("learned residual input", self.dim(), z.len())?;
        let (out, jac) = self.model.forward_with_jacobian(z)?;
        let l = z.len();
        Ok((z - out, Matrix::identity(l, l) - jac))
    }

    fn residual(&self, z: &Vector) -> Result<Vector> {
        Ok(z - self.model.forward(z)?)
    }
}

/// Monte-Carlo denoising loss `mean_z |z − Π(z + σ g)|²` with one noise draw
/// per sample, and its parameter gradients.
pub fn denoising_loss_batch<R: Rng + ?Sized>(
    model: &Mlp,
    batch: &[Vector],
    sigma: f64,
    rng: &mut R,
) -> Result<(f64, crate::nn::Params)> {
    if batch.is_empty() {
        return Err(GeoError::InvalidArgument("empty batch".into()));
    }
    if !(sigma > 0.0) {
        return Err(GeoError::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let l = model.input_dim();
    let mut clean = Matrix::zeros(l, batch.len());
    for (j, z) in batch.iter().enumerate() {
        check_dim("batch point", l, z.len())?;
        clean.set_column(j, z);
    }
    let noisy = clean.map(|c| c + sigma * rng.sample::<f64, _>(StandardNormal));
    loss_on_pairs(model, &clean, &noisy)
}

fn loss_on_pairs(model: &Mlp, clean: &Matrix, noisy: &Matrix) -> Result<(f64, crate::nn::Params)> {
    let n = clean.ncols() as f64;
    model.value_and_param_gradients(noisy, |out| {
        let diff = out - clean;
        (diff.norm_squared() / n, diff * (2.0 / n))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    /// Distance of the evaluation points from the surface.
    pub distance_bucket: f64,
    pub median_error: f64,
    pub p90_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss over the last trace window.
    pub final_loss: f64,
    /// Mean batch loss over each consecutive window of `TRACE_EVERY` steps.
    pub loss_trace: Vec<f64>,
    #[serde(default)]
    pub eval_table: Vec<EvalRow>,
}

/// Trains `Π_σ` on the cloud. Model weights use `cfg.seed`; batches and
/// noise use an independent stream of the same seed.
pub fn train_projection(cloud: &PointCloud, cfg: &TrainConfig) -> Result<(LearnedRep, TrainReport)> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(GeoError::InvalidArgument("empty point cloud".into()));
    }
    check_dim("point cloud vs network input", cfg.layer_dims[0], cloud.dim())?;
    let mut model = Mlp::new(&cfg.layer_dims, cfg.seed)?;
    let mut adam = AdamState::new(&model, cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let l = cloud.dim();
    let b = cfg.batch_size;
    let mut clean = Matrix::zeros(l, b);
    let mut loss_trace = Vec::with_capacity(cfg.steps / TRACE_EVERY + 1);
    let mut window = 0.0;
    let mut window_len = 0;
    let mut last_window = f64::NAN;

    for step in 0..cfg.steps {
        adam.config.learning_rate = cfg.schedule.rate(cfg.optimizer.learning_rate, step, cfg.steps);
        for j in 0..b {
            let idx = rng.random_range(0..cloud.len());
            clean.column_mut(j).copy_from_slice(cloud.row(idx));
        }
        let noisy = clean.map(|c| c + cfg.sigma * rng.sample::<f64, _>(StandardNormal));
        let (loss, grads) = loss_on_pairs(&model, &clean, &noisy)?;
        if !loss.is_finite() {
            return Err(GeoError::NonFiniteLoss { step });
        }
        adam.step(&mut model, &grads)?;
        window += loss;
        window_len += 1;
        if window_len == TRACE_EVERY || step + 1 == cfg.steps {
            last_window = window / window_len as f64;
            if window_len == TRACE_EVERY {
                loss_trace.push(last_window);
            }
            window = 0.0;
            window_len = 0;
        }
    }
    let rep = LearnedRep::new(model, cfg.sigma, cfg.seed)?;
    let report = TrainReport { final_loss: last_window, loss_trace, eval_table: Vec::new() };
    Ok((rep, report))
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Fresh evaluation points at distance `d` from the surface along the true
/// normal, with random sign; `n` per distance.
pub fn eval_points(manifold: &AnalyticManifold, distances: &[f64], n: usize, seed: u64) -> Result<Vec<(f64, Vec<Vector>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    distances
        .iter()
        .map(|&d| {
            let pts = (0..n)
                .map(|_| {
                    let x = manifold.sample_point(&mut rng);
                    let nrm = manifold.random_unit_normal(&x, &mut rng)?;
                    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    Ok(x + nrm * (sign * d))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((d, pts))
        })
        .collect()
}

/// Sorted projection errors `|Π(y) − Π_exact(y)|` of a representation for
/// each distance bucket.
pub fn projection_errors(
    rep: &dyn ImplicitRep,
    manifold: &AnalyticManifold,
    distances: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<(f64, Vec<f64>)>> {
    eval_points(manifold, distances, n, seed)?
        .into_iter()
        .map(|(d, pts)| {
            let mut errs = pts
                .iter()
                .map(|y| {
                    let approx = y - rep.residual(y)?;
                    Ok((approx - manifold.project(y)?).norm())
                })
                .collect::<Result<Vec<f64>>>()?;
            errs.sort_by(f64::total_cmp);
            Ok((d, errs))
        })
        .collect()
}

/// Median and 90th percentile of the projection errors per distance bucket.
pub fn eval_table(
    rep: &dyn ImplicitRep,
    manifold: &AnalyticManifold,
    distances: &[f64],
    n: usize,
    seed: u64,
) -> Result<Vec<EvalRow>> {
    Ok(projection_errors(rep, manifold, distances, n, seed)?
        .into_iter()
        .map(|(d, errs)| EvalRow { distance_bucket: d, median_error: quantile(&errs, 0.5), p90_error: quantile(&errs, 0.9) })
        .collect())
}

/// Evaluation buckets `{0, σ/2, σ, 2σ}` used for training reports.
pub fn default_buckets(sigma: f64) -> [f64; 4] {
    [0.0, 0.5 * sigma, sigma, 2.0 * sigma]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    fn affine_model(w: Matrix, b: Vector) -> Mlp {
        Mlp::from_layers(vec![Layer { weights: w, bias: b }]).unwrap()
    }

    fn batch(seed: u64, n: usize) -> Vec<Vector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0))).collect()
    }

    #[test]
    fn identity_loss_vanishes_with_noise() {
        let m = affine_model(Matrix::identity(3, 3), Vector::zeros(3));
        let pts = batch(1, 512);
        let mut last = f64::INFINITY;
        for sigma in [1e-1, 1e-2, 1e-3] {
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let (loss, _) = denoising_loss_batch(&m, &pts, sigma, &mut rng).unwrap();
            // E|σ g|² = 3σ²
            assert!((loss / (3.0 * sigma * sigma) - 1.0).abs() < 0.15, "{loss}");
            assert!(loss < last);
            last = loss;
        }
    }

    #[test]
    fn constant_map_loss_is_exact() {
        let c = Vector::from_column_slice(&[0.2, -0.1, 0.4]);
        let m = affine_model(Matrix::zeros(3, 3), c.clone());
        let z = Vector::from_column_slice(&[1.0, 2.0, -1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (loss, _) = denoising_loss_batch(&m, std::slice::from_ref(&z), 0.3, &mut rng).unwrap();
        assert!((loss - (&z - &c).norm_squared()).abs() < 1e-14);
    }

    #[test]
    fn loss_rejects_bad_arguments() {
        let m = affine_model(Matrix::identity(3, 3), Vector::zeros(3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(denoising_loss_batch(&m, &[], 0.1, &mut rng).is_err());
        assert!(denoising_loss_batch(&m, &batch(0, 2), 0.0, &mut rng).is_err());
    }

    #[test]
    fn learned_zeta_of_affine_networks() {
        let id = LearnedRep::new(affine_model(Matrix::identity(3, 3), Vector::zeros(3)), 0.1, 0).unwrap();
        let z = Vector::from_column_slice(&[0.3, -0.7, 2.0]);
        let (r, j) = id.eval(&z).unwrap();
        assert_eq!(r.norm(), 0.0);
        assert_eq!(j.norm(), 0.0);
        let c = LearnedRep::new(affine_model(Matrix::zeros(3, 3), Vector::from_element(3, 1.0)), 0.1, 0).unwrap();
        let (_, j) = c.eval(&z).unwrap();
        assert_eq!(j, Matrix::identity(3, 3));
        assert!(matches!(c.eval(&Vector::zeros(2)), Err(GeoError::DimensionMismatch { .. })));
    }

    #[test]
    fn learned_zeta_jacobian_matches_finite_differences() {
        let rep = LearnedRep::new(Mlp::new(&[3, 16, 16, 3], 4).unwrap(), 0.1, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let z = Vector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            let (_, j) = rep.eval(&z).unwrap();
            let h = 1e-6;
            for c in 0..3 {
                let mut zp = z.clone();
                let mut zm = z.clone();
                zp[c] += h;
                zm[c] -= h;
                let fd = (rep.residual(&zp).unwrap() - rep.residual(&zm).unwrap()) / (2.0 * h);
                let col = j.column(c);
                assert!((fd - col).norm() <= 1e-5 * col.norm().max(1.0));
            }
        }
    }

    #[test]
    fn single_point_cloud_learns_constant() {
        let z = Vector::from_column_slice(&[0.5, -0.25, 0.75]);
        let cloud = PointCloud::from_points(std::slice::from_ref(&z), 0, 0.0).unwrap();
        let cfg = TrainConfig { sigma: 0.05, steps: 10_000, seed: 11, layer_dims: vec![3, 16, 16, 3], ..TrainConfig::default() };
        let (rep, report) = train_projection(&cloud, &cfg).unwrap();
        assert_eq!(report.loss_trace.len(), 100);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..50 {
            let delta = Vector::from_fn(3, |_, _| 0.05 * rng.sample::<f64, _>(StandardNormal));
            let e = (rep.project(&(&z + delta)).unwrap() - &z).norm();
            assert!(e < 1e-2, "{e}");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cloud = AnalyticManifold::default_torus().sample_cloud(200, 0.0, 3).unwrap();
        let cfg = TrainConfig { steps: 50, batch_size: 16, layer_dims: vec![3, 8, 3], seed: 9, ..TrainConfig::default() };
        let (a, ra) = train_projection(&cloud, &cfg).unwrap();
        let (b, rb) = train_projection(&cloud, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn wrong_dims_are_rejected() {
        let cloud = AnalyticManifold::default_torus().sample_cloud(10, 0.0, 3).unwrap();
        let cfg = TrainConfig { layer_dims: vec![2, 8, 2], ..TrainConfig::default() };
        assert!(matches!(train_projection(&cloud, &cfg), Err(GeoError::DimensionMismatch { .. })));
        let cfg = TrainConfig { batch_size: 0, ..TrainConfig::default() };
        assert!(train_projection(&cloud, &cfg).is_err());
    }

    #[test]
    fn exploding_learning_rate_reports_step() {
        let cloud = AnalyticManifold::default_torus().sample_cloud(50, 0.0, 3).unwrap();
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 8,
            layer_dims: vec![3, 8, 3],
            optimizer: AdamConfig { learning_rate: f64::INFINITY, ..AdamConfig::default() },
            ..TrainConfig::default()
        };
        assert!(matches!(train_projection(&cloud, &cfg), Err(GeoError::NonFiniteLoss { step: 1 })));
    }

    #[test]
    fn cosine_schedule_decays_from_base() {
        let s = LrSchedule::Cosine;
        assert_eq!(s.rate(1e-3, 0, 100), 1e-3);
        assert!((s.rate(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
        let rates: Vec<f64> = (0..100).map(|i| s.rate(1e-3, i, 100)).collect();
        assert!(rates.windows(2).all(|w| w[1] < w[0]) && rates[99] > 0.0);
        assert_eq!(LrSchedule::Constant.rate(1e-3, 99, 100), 1e-3);
    }

    #[test]
    fn quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&xs, 0.5), 3.0);
        assert!((quantile(&xs, 0.9) - 4.6).abs() < 1e-15);
        assert!(quantile(&[], 0.5).is_nan());
    }

    #[test]
    fn exact_rep_has_zero_eval_error() {
        let t = AnalyticManifold::default_torus();
        let rows = eval_table(&t, &t, &default_buckets(0.05), 50, 1).unwrap();
        assert_eq!(rows.len(), 4);
        for r in rows {
            assert!(r.median_error < 1e-14 && r.p90_error < 1e-14);
        }
    }
}
