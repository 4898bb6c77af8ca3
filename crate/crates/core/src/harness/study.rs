//! Experiment runners: the projection parameter study and the geodesic /
//! exponential convergence study on the torus.

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::denoise::{projection_errors, quantile, train_projection, TrainConfig};
use crate::energy::LocalEnergy;
use crate::error::{GeoError, Result};
use crate::manifold::{AnalyticManifold, ImplicitRep, PointCloud, Vector};
use crate::solver::{
    discrete_exp, geodesic_auglag, geodesic_auglag_from, reparametrized_distance, DiscretePath, Solution,
    SolverConfig,
};

use super::config::{ConvergenceStudyConfig, EtaSetting, ProjectionStudyConfig, SolverSection};
use super::io::{config_hash, StudyTable};

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "GEOCALC_THREADS";

pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| GeoError::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        builder = builder.num_threads(n);
    }
    builder.build().map_err(|e| GeoError::InvalidArgument(e.to_string()))
}

/// Seed of a sweep row: a hash of the global seed and the row's key.
pub fn row_seed(global: u64, key: &str) -> u64 {
    let digest = Sha256::new().chain_update(global.to_le_bytes()).chain_update(key.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

/// One training run of the projection study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProjectionRow {
    pub size: usize,
    pub sigma: f64,
    pub depth: usize,
    pub width: usize,
    pub noise: f64,
}

impl ProjectionRow {
    fn key(&self) -> String {
        format!("n={} sigma={} depth={} width={} noise={}", self.size, self.sigma, self.depth, self.width, self.noise)
    }

    fn params(&self) -> Vec<f64> {
        vec![self.size as f64, self.sigma, self.depth as f64, self.width as f64, self.noise]
    }

    /// Layer widths for `depth` affine layers in dimension `l`.
    pub fn layer_dims(&self, l: usize) -> Vec<usize> {
        let mut dims = vec![l];
        dims.extend(std::iter::repeat_n(self.width, self.depth.saturating_sub(1)));
        dims.push(l);
        dims
    }
}

const PROJECTION_PARAMS: [&str; 5] = ["n", "sigma", "depth", "width", "noise"];

fn projection_value_names(buckets: &[f64]) -> Vec<String> {
    let mut names = vec!["near_median".to_string(), "near_p90".to_string(), "final_loss".to_string()];
    for b in buckets {
        names.push(format!("median_d{b}"));
        names.push(format!("p90_d{b}"));
    }
    names
}

fn run_projection_row(row: &ProjectionRow, cfg: &ProjectionStudyConfig, manifold: &AnalyticManifold, seed: u64) -> Result<Vec<f64>> {
    if row.depth == 0 {
        return Err(GeoError::InvalidArgument("depth must be at least 1".into()));
    }
    let rseed = row_seed(seed, &row.key());
    let l = manifold.ambient_dim();
    let cloud = manifold.sample_cloud(row.size, row.noise, rseed)?;
    let train = TrainConfig {
        sigma: row.sigma,
        batch_size: cfg.batch_size,
        steps: cfg.steps,
        seed: rseed,
        layer_dims: row.layer_dims(l),
        ..TrainConfig::default()
    };
    let (rep, report) = train_projection(&cloud, &train)?;
    // Every row is evaluated on the same points.
    let errs = projection_errors(&rep, manifold, &cfg.buckets, cfg.eval_points, seed)?;
    let mut near: Vec<f64> = errs
        .iter()
        .filter(|(d, _)| *d <= cfg.near_surface)
        .flat_map(|(_, e)| e.iter().copied())
        .collect();
    near.sort_by(f64::total_cmp);
    let mut values = vec![quantile(&near, 0.5), quantile(&near, 0.9), report.final_loss];
    for (_, e) in &errs {
        values.push(quantile(e, 0.5));
        values.push(quantile(e, 0.9));
    }
    Ok(values)
}

/// Trains one network per sweep point and tabulates projection errors
/// against the analytic projection. Returns one table per sweep axis in
/// the order sizes, sigmas, depths, widths, noises. Rows shared between
/// axes are trained once.
pub fn run_projection_study(cfg: &ProjectionStudyConfig, seed: u64) -> Result<Vec<StudyTable>> {
    let manifold = cfg.manifold.build()?;
    let base = ProjectionRow {
        size: cfg.base_size,
        sigma: cfg.base_sigma,
        depth: cfg.base_depth,
        width: cfg.base_width,
        noise: cfg.base_noise,
    };
    let axes: Vec<(&str, Vec<ProjectionRow>)> = vec![
        ("sizes", cfg.sizes.iter().map(|&size| ProjectionRow { size, ..base }).collect()),
        ("sigmas", cfg.sigmas.iter().map(|&sigma| ProjectionRow { sigma, ..base }).collect()),
        ("depths", cfg.depths.iter().map(|&depth| ProjectionRow { depth, ..base }).collect()),
        ("widths", cfg.widths.iter().map(|&width| ProjectionRow { width, ..base }).collect()),
        ("noises", cfg.noises.iter().map(|&noise| ProjectionRow { noise, ..base }).collect()),
    ];
    let mut unique: Vec<ProjectionRow> = Vec::new();
    for (_, rows) in &axes {
        for r in rows {
            if !unique.iter().any(|u| u.key() == r.key()) {
                unique.push(*r);
            }
        }
    }
    let pool = thread_pool()?;
    let results: Vec<Result<Vec<f64>>> =
        pool.install(|| unique.par_iter().map(|r| run_projection_row(r, cfg, &manifold, seed)).collect());

    let hash = config_hash(&(cfg, seed))?;
    let names = projection_value_names(&cfg.buckets);
    let mut tables = Vec::new();
    for (axis, rows) in &axes {
        let mut t = StudyTable::new(&format!("projection_{axis}"), &PROJECTION_PARAMS, &names);
        t.set_meta("seed", seed);
        t.set_meta("config_hash", &hash);
        for r in rows {
            let i = unique.iter().position(|u| u.key() == r.key()).expect("row was registered");
            match &results[i] {
                Ok(v) => t.push(r.params(), v.clone(), "ok"),
                Err(e) => t.push(r.params(), vec![f64::NAN; names.len()], &e.to_string()),
            }
        }
        tables.push(t);
    }
    Ok(tables)
}

/// Results of the convergence study.
#[derive(Debug, Clone)]
pub struct ConvergenceTables {
    /// One row per `K`: distances of the learned-ζ geodesic to the reference.
    pub geodesics: StudyTable,
    /// One row per step index: distance between learned and exact shooting.
    pub exponential: StudyTable,
    pub reference: DiscretePath,
}

fn refine(path: &DiscretePath, manifold: &AnalyticManifold) -> Result<DiscretePath> {
    let pts = path.points();
    let mut out = Vec::with_capacity(2 * pts.len() - 1);
    out.push(pts[0].clone());
    for w in pts.windows(2) {
        out.push(manifold.project(&((&w[0] + &w[1]) * 0.5))?);
        out.push(w[1].clone());
    }
    DiscretePath::new(out)
}

/// Exact-ζ geodesic at resolution `k`, computed coarse to fine: a coarse
/// solve from the constant-jump path, then repeated midpoint refinement
/// with warm-started solves.
pub fn reference_geodesic(
    energy: &dyn LocalEnergy,
    manifold: &AnalyticManifold,
    z0: &Vector,
    zk: &Vector,
    k: usize,
    config: &SolverConfig,
) -> Result<Solution> {
    let mut coarse = k;
    let mut levels = 0;
    while coarse > 16 && coarse % 2 == 0 {
        coarse /= 2;
        levels += 1;
    }
    let mut sol = geodesic_auglag(energy, manifold, z0, zk, coarse, config)?;
    for _ in 0..levels {
        let init = refine(&sol.path, manifold)?;
        sol = geodesic_auglag_from(energy, manifold, &init, config)?;
    }
    Ok(sol)
}

fn solution_or_partial(r: Result<Solution>) -> Result<(Solution, String)> {
    match r {
        Ok(s) => Ok((s, "ok".to_string())),
        Err(GeoError::NotConverged(s)) => {
            let msg = format!("not converged: {}", s.report.stop_reason);
            Ok((*s, msg))
        }
        Err(e) => Err(e),
    }
}

const GEODESIC_VALUES: [&str; 7] = [
    "dist_reference",
    "dist_exact_same_k",
    "exact_dist_reference",
    "constraint_norm",
    "max_vertex_residual",
    "eta_star",
    "energy",
];

/// Compares learned-ζ geodesics and exponential shooting against exact-ζ
/// computations on the analytic manifold `cfg.exact`.
pub fn run_convergence_study(
    learned: &dyn ImplicitRep,
    eta: EtaSetting,
    eta_cloud: Option<&PointCloud>,
    energy: &dyn LocalEnergy,
    solver: &SolverSection,
    cfg: &ConvergenceStudyConfig,
) -> Result<ConvergenceTables> {
    let exact = cfg.exact.build()?;
    let z0 = Vector::from_column_slice(&cfg.from);
    let zk = Vector::from_column_slice(&cfg.to);
    let exact_cfg = solver.solver_config(SolverConfig::default().eta_star);
    let reference = reference_geodesic(energy, &exact, &z0, &zk, cfg.reference_k, &exact_cfg)?.path;

    let pool = thread_pool()?;
    let rows: Vec<Result<(Vec<f64>, String)>> = pool.install(|| {
        cfg.ks
            .par_iter()
            .map(|&k| {
                let eta_star = eta.resolve(learned, eta_cloud, k)?;
                let (sol, status) =
                    solution_or_partial(geodesic_auglag(energy, learned, &z0, &zk, k, &solver.solver_config(eta_star)))?;
                let exact_k = reference_geodesic(energy, &exact, &z0, &zk, k, &exact_cfg)?.path;
                let values = vec![
                    reparametrized_distance(&sol.path, &reference, cfg.samples),
                    reparametrized_distance(&sol.path, &exact_k, cfg.samples),
                    reparametrized_distance(&exact_k, &reference, cfg.samples),
                    sol.report.constraint_norm,
                    sol.report.max_vertex_residual,
                    eta_star,
                    sol.report.energy,
                ];
                Ok((values, status))
            })
            .collect()
    });

    let hash = config_hash(&(cfg, solver, eta))?;
    let names: Vec<String> = GEODESIC_VALUES.iter().map(|s| s.to_string()).collect();
    let mut geodesics = StudyTable::new("convergence_geodesic", &["K"], &names);
    geodesics.set_meta("config_hash", &hash);
    geodesics.set_meta("reference_k", cfg.reference_k);
    for (&k, r) in cfg.ks.iter().zip(rows) {
        match r {
            Ok((v, status)) => geodesics.push(vec![k as f64], v, &status),
            Err(e) => geodesics.push(vec![k as f64], vec![f64::NAN; names.len()], &e.to_string()),
        }
    }

    let start = Vector::from_column_slice(&cfg.exp_start);
    let v0 = Vector::from_column_slice(&cfg.exp_velocity);
    let exp_names = vec!["divergence".to_string(), "learned_residual".to_string()];
    let mut exponential = StudyTable::new("convergence_exp", &["step"], &exp_names);
    exponential.set_meta("config_hash", &hash);
    exponential.set_meta("K", cfg.exp_k);
    let exact_exp = discrete_exp(energy, &exact, &start, &v0, cfg.exp_k, &solver.exp)?;
    match discrete_exp(energy, learned, &start, &v0, cfg.exp_k, &solver.exp) {
        Ok(path) => {
            for (i, (a, b)) in path.points().iter().zip(exact_exp.points()).enumerate() {
                let residual = learned.residual(a)?.norm();
                exponential.push(vec![i as f64], vec![(a - b).norm(), residual], "ok");
            }
        }
        Err(e) => exponential.push(vec![f64::NAN], vec![f64::NAN; 2], &e.to_string()),
    }
    Ok(ConvergenceTables { geodesics, exponential, reference })
}
