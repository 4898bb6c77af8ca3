//! Command-line entry point.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::denoise::{default_buckets, eval_table, train_projection, LrSchedule, TrainConfig};
use crate::error::{GeoError, Result};
use crate::manifold::{DistanceField, ResidualDistance, Vector};
use crate::nn::AdamConfig;
use crate::solver::{discrete_exp, geodesic_auglag, geodesic_penalty, path_energy, ExpConfig, Solution, SolverReport};

use super::config::{
    AnalyticSpec, DecoderSpec, EnergyKind, EnergySpec, EtaSetting, ExperimentConfig, ManifoldSection, Method,
    Representation, SolverSection,
};
use super::io::{self, Manifest, PathFile, StudyTable};
use super::study::{run_convergence_study, run_projection_study};

#[derive(Parser, Debug)]
#[command(name = "geocalc", version, about = "Discrete geodesics on implicitly represented manifolds")]
struct Cli {
    /// Directory receiving every artifact of the run.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a point cloud from an analytic manifold.
    Sample(SampleArgs),
    /// Train a denoising projection on a point cloud.
    Train(TrainArgs),
    /// Compare a trained projection with the analytic one.
    ProjectEval(ProjectEvalArgs),
    /// Discrete geodesic between two points.
    Geodesic(GeodesicArgs),
    /// Discrete exponential map from a point and velocity.
    Exp(ExpArgs),
    /// Projection parameter study.
    Study(StudyArgs),
    /// Geodesic and exponential convergence study.
    Convergence(ConvergenceArgs),
}

/// Comma-separated list such as `1,0,0`.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
struct List<T>(Vec<T>);

impl<T: std::str::FromStr> std::str::FromStr for List<T>
where
    T::Err: std::fmt::Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.split(',')
            .map(|t| t.trim().parse::<T>().map_err(|e| format!("`{t}`: {e}")))
            .collect::<std::result::Result<Vec<T>, String>>()
            .map(List)
    }
}

#[derive(Args, Debug, Serialize)]
struct SampleArgs {
    #[arg(long, default_value = "torus")]
    manifold: AnalyticSpec,
    #[arg(long, default_value_t = 50_000)]
    n: usize,
    /// Standard deviation of Gaussian noise added to every coordinate.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// File name inside the output directory.
    #[arg(long, default_value = "cloud.csv")]
    out: String,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long)]
    cloud: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value = "3,128,128,128,128,128,3")]
    dims: List<usize>,
    #[arg(long, default_value_t = 20_000)]
    steps: usize,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// Peak learning rate.
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, value_enum, default_value = "cosine")]
    lr_schedule: LrSchedule,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Analytic manifold for the evaluation table of the training report.
    #[arg(long)]
    eval_manifold: Option<AnalyticSpec>,
    #[arg(long, default_value_t = 1_000)]
    eval_points: usize,
}

#[derive(Args, Debug, Serialize)]
struct ProjectEvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "torus")]
    manifold: AnalyticSpec,
    #[arg(long, default_value = "0,0.02,0.04,0.08")]
    buckets: List<f64>,
    #[arg(long, default_value_t = 2_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug, Serialize)]
struct RepArgs {
    /// Analytic manifold such as `sphere`, `torus:0.6667,0.3333` or `plane`.
    #[arg(long)]
    manifold: Option<AnalyticSpec>,
    /// Trained projection checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Point cloud used through the kernel barycenter.
    #[arg(long, requires = "kernel_sigma")]
    cloud: Option<PathBuf>,
    #[arg(long)]
    kernel_sigma: Option<f64>,
    #[arg(long, value_enum, default_value = "euclid")]
    energy: EnergyKind,
    /// `identity`, `sphere-lift` or `checkpoint:<file>`.
    #[arg(long, default_value = "identity")]
    decoder: DecoderSpec,
}

impl RepArgs {
    fn manifold_section(&self) -> ManifoldSection {
        ManifoldSection {
            analytic: self.manifold,
            cloud: self.cloud.clone(),
            kernel_sigma: self.kernel_sigma,
            checkpoint: self.checkpoint.clone(),
        }
    }

    fn energy_spec(&self) -> EnergySpec {
        EnergySpec { kind: self.energy, decoder: self.decoder.clone() }
    }
}

#[derive(Args, Debug, Serialize)]
struct GeodesicArgs {
    #[command(flatten)]
    rep: RepArgs,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, allow_hyphen_values = true)]
    from: List<f64>,
    #[arg(long, allow_hyphen_values = true)]
    to: List<f64>,
    #[arg(long, value_enum, default_value = "auglag")]
    method: Method,
    /// Constraint tolerance, or `auto` for the cloud-based rule of thumb.
    #[arg(long, default_value = "1e-6")]
    eta_star: EtaSetting,
    /// Cloud for `--eta-star auto` when the source is not a cloud.
    #[arg(long)]
    eta_cloud: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    mu0: f64,
    #[arg(long, default_value_t = 1e8)]
    mu_max: f64,
    #[arg(long, default_value_t = 1e-6)]
    omega_star: f64,
    #[arg(long, default_value = "path.json")]
    out: String,
}

#[derive(Args, Debug, Serialize)]
struct ExpArgs {
    #[command(flatten)]
    rep: RepArgs,
    #[arg(long, default_value_t = 8)]
    k: usize,
    #[arg(long, allow_hyphen_values = true)]
    from: List<f64>,
    #[arg(long, allow_hyphen_values = true)]
    velocity: List<f64>,
    #[arg(long, default_value_t = 1e4)]
    mu: f64,
    #[arg(long, default_value = "path.json")]
    out: String,
}

#[derive(Args, Debug, Serialize)]
struct StudyArgs {
    /// TOML experiment configuration; built-in defaults otherwise.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the number of training steps per row.
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug, Serialize)]
struct ConvergenceArgs {
    /// TOML experiment configuration; its manifold section gives the learned representation.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// The error class decides the exit status.
fn exit_code(err: &GeoError) -> i32 {
    match err {
        GeoError::NotConverged(_)
        | GeoError::DegenerateStep
        | GeoError::NonFiniteLoss { .. }
        | GeoError::SingularPoint { .. }
        | GeoError::AntipodalBlock { .. }
        | GeoError::DegenerateWeights => 1,
        _ => 2,
    }
}

/// Runs the command line `argv` (program name first) and returns the exit
/// status: 0 on success, 1 when a solver or training run fails, 2 on usage,
/// parse or I/O errors.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let out = cli.out_dir;
    match cli.command {
        Command::Sample(a) => sample(&out, &a),
        Command::Train(a) => train(&out, &a),
        Command::ProjectEval(a) => project_eval(&out, &a),
        Command::Geodesic(a) => geodesic(&out, &a),
        Command::Exp(a) => exp(&out, &a),
        Command::Study(a) => study(&out, &a),
        Command::Convergence(a) => convergence(&out, &a),
    }
}

fn write_manifest<T: Serialize>(out: &Path, command: &str, config: &T, seeds: &[(&str, u64)], artifacts: &[&str]) -> Result<()> {
    let seeds: BTreeMap<String, u64> = seeds.iter().map(|(k, v)| (k.to_string(), *v)).collect();
    let manifest = Manifest::new(command, config, seeds, artifacts.iter().map(|s| s.to_string()).collect())?;
    io::write_text(&out.join(format!("{command}.manifest.json")), &io::to_json(&manifest)?)
}

fn sample(out: &Path, a: &SampleArgs) -> Result<()> {
    let cloud = a.manifold.build()?.sample_cloud(a.n, a.noise, a.seed)?;
    io::write_cloud(&out.join(&a.out), &cloud)?;
    write_manifest(out, "sample", a, &[("seed", a.seed)], &[&a.out])
}

fn train(out: &Path, a: &TrainArgs) -> Result<()> {
    let cloud = io::read_cloud(&a.cloud)?;
    let cfg = TrainConfig {
        sigma: a.sigma,
        batch_size: a.batch_size,
        steps: a.steps,
        seed: a.seed,
        layer_dims: a.dims.0.clone(),
        optimizer: AdamConfig { learning_rate: a.learning_rate, ..AdamConfig::default() },
        schedule: a.lr_schedule,
    };
    let (rep, mut report) = train_projection(&cloud, &cfg)?;
    if let Some(spec) = &a.eval_manifold {
        report.eval_table = eval_table(&rep, &spec.build()?, &default_buckets(a.sigma), a.eval_points, a.seed)?;
    }
    io::write_checkpoint(&out.join("checkpoint.json"), &rep.to_checkpoint())?;
    io::write_text(&out.join("train_report.json"), &io::to_json(&report)?)?;
    write_manifest(out, "train", &(a, &cfg), &[("seed", a.seed), ("cloud_seed", cloud.seed())], &["checkpoint.json", "train_report.json"])
}

fn project_eval(out: &Path, a: &ProjectEvalArgs) -> Result<()> {
    let rep = crate::denoise::LearnedRep::from_checkpoint(&io::read_checkpoint(&a.checkpoint)?)?;
    let rows = eval_table(&rep, &a.manifold.build()?, &a.buckets.0, a.n, a.seed)?;
    let mut t = StudyTable::new("projection_eval", &["distance"], &["median".into(), "p90".into()]);
    t.set_meta("seed", a.seed);
    t.set_meta("config_hash", io::config_hash(a)?);
    for r in rows {
        t.push(vec![r.distance_bucket], vec![r.median_error, r.p90_error], "ok");
    }
    io::write_table(&out.join("projection_eval.csv"), &t)?;
    write_manifest(out, "project-eval", a, &[("seed", a.seed), ("model_seed", rep.seed)], &["projection_eval.csv"])
}

fn eta_cloud(rep: &Representation, extra: &Option<PathBuf>) -> Result<Option<crate::manifold::PointCloud>> {
    match (rep.cloud(), extra) {
        (_, Some(p)) => Ok(Some(io::read_cloud(p)?)),
        (Some(c), None) => Ok(Some(c.clone())),
        (None, None) => Ok(None),
    }
}

fn write_solution(out: &Path, name: &str, energy: f64, sol: &Solution) -> Result<()> {
    let file = PathFile::new(&sol.path, Some(energy), Some(sol.report.clone()));
    io::write_text(&out.join(name), &io::to_json(&file)?)
}

fn geodesic(out: &Path, a: &GeodesicArgs) -> Result<()> {
    let rep = a.rep.manifold_section().resolve()?;
    let zeta = rep.as_implicit();
    let energy = a.rep.energy_spec().build(zeta.dim())?;
    let z0 = Vector::from_vec(a.from.0.clone());
    let zk = Vector::from_vec(a.to.0.clone());
    let cloud = eta_cloud(&rep, &a.eta_cloud)?;
    let eta = a.eta_star.resolve(zeta, cloud.as_ref(), a.k)?;
    let section = SolverSection { mu0: a.mu0, mu_max: a.mu_max, omega_star: a.omega_star, ..SolverSection::default() };
    let cfg = section.solver_config(eta);
    let result = match a.method {
        Method::Auglag => geodesic_auglag(energy.as_ref(), zeta, &z0, &zk, a.k, &cfg),
        Method::Penalty => {
            let distance: Box<dyn DistanceField + '_> = match &rep {
                Representation::Analytic(m) => Box::new(m.clone()),
                _ => Box::new(ResidualDistance(zeta)),
            };
            geodesic_penalty(energy.as_ref(), distance.as_ref(), &z0, &zk, a.k, &cfg)
        }
    };
    let seeds: Vec<(&str, u64)> = match &rep {
        Representation::Learned(l) => vec![("model_seed", l.seed)],
        Representation::Kernel(k) => vec![("cloud_seed", k.cloud.seed())],
        Representation::Analytic(_) => vec![],
    };
    let (sol, failure) = match result {
        Ok(s) => (s, None),
        Err(GeoError::NotConverged(s)) => ((*s).clone(), Some(GeoError::NotConverged(s))),
        Err(e) => return Err(e),
    };
    write_solution(out, &a.out, sol.report.energy, &sol)?;
    write_manifest(out, "geodesic", a, &seeds, &[&a.out])?;
    match failure {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn exp(out: &Path, a: &ExpArgs) -> Result<()> {
    let rep = a.rep.manifold_section().resolve()?;
    let zeta = rep.as_implicit();
    let energy = a.rep.energy_spec().build(zeta.dim())?;
    let z0 = Vector::from_vec(a.from.0.clone());
    let v0 = Vector::from_vec(a.velocity.0.clone());
    let cfg = ExpConfig { mu: a.mu, ..ExpConfig::default() };
    let path = discrete_exp(energy.as_ref(), zeta, &z0, &v0, a.k, &cfg)?;
    let e = path_energy(energy.as_ref(), &path)?.0;
    let file = PathFile::new(&path, Some(e), None::<SolverReport>);
    io::write_text(&out.join(&a.out), &io::to_json(&file)?)?;
    write_manifest(out, "exp", a, &[], &[&a.out])
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn study(out: &Path, a: &StudyArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.steps {
        cfg.projection_study.steps = s;
    }
    let tables = run_projection_study(&cfg.projection_study, cfg.seed)?;
    let mut names = Vec::new();
    for t in &tables {
        let name = format!("{}.csv", t.name);
        io::write_table(&out.join(&name), t)?;
        names.push(name);
    }
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    write_manifest(out, "study", &cfg, &[("seed", cfg.seed)], &refs)
}

fn convergence(out: &Path, a: &ConvergenceArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let rep = cfg.manifold.resolve()?;
    let zeta = rep.as_implicit();
    let energy = cfg.energy.build(zeta.dim())?;
    let cloud = eta_cloud(&rep, &cfg.solver.eta_cloud)?;
    let tables =
        run_convergence_study(zeta, cfg.solver.eta_star, cloud.as_ref(), energy.as_ref(), &cfg.solver, &cfg.convergence_study)?;
    io::write_table(&out.join("convergence_geodesic.csv"), &tables.geodesics)?;
    io::write_table(&out.join("convergence_exp.csv"), &tables.exponential)?;
    let reference = PathFile::new(&tables.reference, None, None);
    io::write_text(&out.join("reference_path.json"), &io::to_json(&reference)?)?;
    write_manifest(
        out,
        "convergence",
        &cfg,
        &[("seed", cfg.seed)],
        &["convergence_geodesic.csv", "convergence_exp.csv", "reference_path.json"],
    )
}
