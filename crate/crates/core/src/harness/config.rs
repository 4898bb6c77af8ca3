//! Experiment configuration: TOML files for the studies and the textual
//! manifold, energy and tolerance specs shared with the command line.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::denoise::{LearnedRep, TrainConfig};
use crate::energy::{Euclidean, LocalEnergy, ProductSphere, Pullback, SyntheticDecoder, SPHERE_BLOCK};
use crate::error::{GeoError, Result};
use crate::manifold::{torus_point, AnalyticManifold, ImplicitRep, KernelRep, PointCloud};
use crate::solver::{rule_of_thumb_eta, ExpConfig, SolverConfig};

use super::io;

/// An analytic manifold written as `torus[:R,r]`, `sphere[:radius]`,
/// `circle[:radius]` or `plane`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AnalyticSpec {
    Torus { major: f64, minor: f64 },
    Sphere { radius: f64 },
    Circle { radius: f64 },
    Plane,
}

impl AnalyticSpec {
    pub fn build(&self) -> Result<AnalyticManifold> {
        match *self {
            AnalyticSpec::Torus { major, minor } => AnalyticManifold::torus(major, minor),
            AnalyticSpec::Sphere { radius } => AnalyticManifold::sphere(radius),
            AnalyticSpec::Circle { radius } => AnalyticManifold::circle(radius),
            AnalyticSpec::Plane => Ok(AnalyticManifold::xy_plane()),
        }
    }
}

impl Default for AnalyticSpec {
    fn default() -> Self {
        AnalyticSpec::Torus { major: 2.0 / 3.0, minor: 1.0 / 3.0 }
    }
}

fn parse_list(s: &str, field: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| GeoError::parse("argument", field, format!("`{t}`: {e}")))
        })
        .collect()
}

impl FromStr for AnalyticSpec {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self> {
        let (name, args) = match s.split_once(':') {
            Some((n, a)) => (n, Some(parse_list(a, "manifold")?)),
            None => (s, None),
        };
        let bad = || GeoError::parse("argument", "manifold", format!("cannot read manifold spec `{s}`"));
        match (name.trim(), args.as_deref()) {
            ("torus", None) => Ok(AnalyticSpec::default()),
            ("torus", Some([major, minor])) => Ok(AnalyticSpec::Torus { major: *major, minor: *minor }),
            ("sphere", None) => Ok(AnalyticSpec::Sphere { radius: 1.0 }),
            ("sphere", Some([r])) => Ok(AnalyticSpec::Sphere { radius: *r }),
            ("circle", None) => Ok(AnalyticSpec::Circle { radius: 1.0 }),
            ("circle", Some([r])) => Ok(AnalyticSpec::Circle { radius: *r }),
            ("plane", None) => Ok(AnalyticSpec::Plane),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for AnalyticSpec {
    type Error = GeoError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for AnalyticSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AnalyticSpec::Torus { major, minor } => write!(f, "torus:{major},{minor}"),
            AnalyticSpec::Sphere { radius } => write!(f, "sphere:{radius}"),
            AnalyticSpec::Circle { radius } => write!(f, "circle:{radius}"),
            AnalyticSpec::Plane => f.write_str("plane"),
        }
    }
}

impl From<AnalyticSpec> for String {
    fn from(s: AnalyticSpec) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum EnergyKind {
    Euclid,
    Pullback,
    ProductSphere,
    KlGauss,
}

/// Decoder for the pullback energies: `identity`, `sphere-lift`, or
/// `checkpoint:<file>` for a network stored as checkpoint JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DecoderSpec {
    Identity,
    SphereLift,
    Checkpoint(PathBuf),
}

impl FromStr for DecoderSpec {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(DecoderSpec::Identity),
            "sphere-lift" => Ok(DecoderSpec::SphereLift),
            _ => match s.strip_prefix("checkpoint:") {
                Some(p) if !p.is_empty() => Ok(DecoderSpec::Checkpoint(PathBuf::from(p))),
                _ => Err(GeoError::parse("argument", "decoder", format!("unknown decoder `{s}`"))),
            },
        }
    }
}

impl TryFrom<String> for DecoderSpec {
    type Error = GeoError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DecoderSpec> for String {
    fn from(d: DecoderSpec) -> String {
        match d {
            DecoderSpec::Identity => "identity".into(),
            DecoderSpec::SphereLift => "sphere-lift".into(),
            DecoderSpec::Checkpoint(p) => format!("checkpoint:{}", p.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergySpec {
    pub kind: EnergyKind,
    #[serde(default = "default_decoder")]
    pub decoder: DecoderSpec,
}

fn default_decoder() -> DecoderSpec {
    DecoderSpec::Identity
}

impl Default for EnergySpec {
    fn default() -> Self {
        EnergySpec { kind: EnergyKind::Euclid, decoder: DecoderSpec::Identity }
    }
}

impl EnergySpec {
    /// The local energy for latent dimension `dim`.
    pub fn build(&self, dim: usize) -> Result<Box<dyn LocalEnergy>> {
        let decoder = || -> Result<SyntheticDecoder> {
            Ok(match &self.decoder {
                DecoderSpec::Identity => SyntheticDecoder::Identity,
                DecoderSpec::SphereLift => {
                    if dim % SPHERE_BLOCK != 0 {
                        return Err(GeoError::InvalidArgument(format!(
                            "sphere-lift decoder needs a latent dimension divisible by {SPHERE_BLOCK}, got {dim}"
                        )));
                    }
                    SyntheticDecoder::SphereLift { blocks: dim / SPHERE_BLOCK }
                }
                DecoderSpec::Checkpoint(p) => SyntheticDecoder::Custom(Arc::new(io::read_checkpoint(p)?.to_model()?)),
            })
        };
        Ok(match self.kind {
            EnergyKind::Euclid => Box::new(Euclidean),
            EnergyKind::Pullback => Box::new(Pullback::new(decoder()?)),
            EnergyKind::KlGauss => Box::new(Pullback::kl_gaussian(decoder()?)),
            EnergyKind::ProductSphere => Box::new(ProductSphere::new(decoder()?)),
        })
    }
}

/// Constraint tolerance: a fixed value, or `auto` for the rule of thumb
/// computed from a point cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EtaRaw", into = "EtaRaw")]
pub enum EtaSetting {
    Auto,
    Value(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EtaRaw {
    Number(f64),
    Text(String),
}

impl FromStr for EtaSetting {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(EtaSetting::Auto);
        }
        match s.parse::<f64>() {
            Ok(v) if v > 0.0 => Ok(EtaSetting::Value(v)),
            _ => Err(GeoError::parse("argument", "eta_star", format!("expected `auto` or a positive number, got `{s}`"))),
        }
    }
}

impl TryFrom<EtaRaw> for EtaSetting {
    type Error = GeoError;

    fn try_from(raw: EtaRaw) -> Result<Self> {
        match raw {
            EtaRaw::Number(v) => format!("{v}").parse(),
            EtaRaw::Text(s) => s.parse(),
        }
    }
}

impl From<EtaSetting> for EtaRaw {
    fn from(e: EtaSetting) -> EtaRaw {
        match e {
            EtaSetting::Auto => EtaRaw::Text("auto".into()),
            EtaSetting::Value(v) => EtaRaw::Number(v),
        }
    }
}

impl fmt::Display for EtaSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EtaSetting::Auto => f.write_str("auto"),
            EtaSetting::Value(v) => write!(f, "{v}"),
        }
    }
}

impl EtaSetting {
    pub fn resolve(&self, rep: &dyn ImplicitRep, cloud: Option<&PointCloud>, k: usize) -> Result<f64> {
        match (self, cloud) {
            (EtaSetting::Value(v), _) => Ok(*v),
            (EtaSetting::Auto, Some(c)) => rule_of_thumb_eta(rep, c, k),
            (EtaSetting::Auto, None) => Err(GeoError::InvalidArgument(
                "eta_star = auto needs a point cloud (eta_cloud or a cloud manifold source)".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Auglag,
    Penalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub method: Method,
    #[serde(rename = "K")]
    pub k: usize,
    pub eta_star: EtaSetting,
    /// Cloud used for `eta_star = auto` when the manifold source is not a cloud.
    pub eta_cloud: Option<PathBuf>,
    pub mu0: f64,
    pub alpha: f64,
    pub mu_max: f64,
    pub omega_star: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub exp: ExpConfig,
}

impl Default for SolverSection {
    fn default() -> Self {
        let d = SolverConfig::default();
        SolverSection {
            method: Method::Auglag,
            k: 8,
            eta_star: EtaSetting::Value(d.eta_star),
            eta_cloud: None,
            mu0: d.mu0,
            alpha: d.alpha,
            mu_max: d.mu_max,
            omega_star: d.omega_star,
            max_outer: d.max_outer,
            max_inner: d.max_inner,
            exp: ExpConfig::default(),
        }
    }
}

impl SolverSection {
    pub fn solver_config(&self, eta_star: f64) -> SolverConfig {
        SolverConfig {
            mu0: self.mu0,
            alpha: self.alpha,
            mu_max: self.mu_max,
            omega_star: self.omega_star,
            eta_star,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
        }
    }
}

/// Where the manifold comes from; exactly one field must be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ManifoldSection {
    pub analytic: Option<AnalyticSpec>,
    /// Point cloud used through the kernel-barycenter projection.
    pub cloud: Option<PathBuf>,
    pub kernel_sigma: Option<f64>,
    /// Trained projection network.
    pub checkpoint: Option<PathBuf>,
}

/// A resolved implicit representation.
pub enum Representation {
    Analytic(AnalyticManifold),
    Kernel(KernelRep),
    Learned(LearnedRep),
}

impl Representation {
    pub fn as_implicit(&self) -> &dyn ImplicitRep {
        match self {
            Representation::Analytic(m) => m,
            Representation::Kernel(k) => k,
            Representation::Learned(l) => l,
        }
    }

    pub fn cloud(&self) -> Option<&PointCloud> {
        match self {
            Representation::Kernel(k) => Some(&k.cloud),
            _ => None,
        }
    }
}

impl ManifoldSection {
    pub fn validate(&self) -> Result<()> {
        let n = self.analytic.is_some() as usize + self.cloud.is_some() as usize + self.checkpoint.is_some() as usize;
        if n != 1 {
            return Err(GeoError::parse(
                "config",
                "manifold",
                format!("exactly one of analytic, cloud, checkpoint must be given, found {n}"),
            ));
        }
        if self.cloud.is_some() && self.kernel_sigma.is_none() {
            return Err(GeoError::parse("config", "kernel_sigma", "a cloud source needs kernel_sigma"));
        }
        Ok(())
    }

    pub fn resolve(&self) -> Result<Representation> {
        self.validate()?;
        if let Some(spec) = &self.analytic {
            return Ok(Representation::Analytic(spec.build()?));
        }
        if let Some(path) = &self.cloud {
            let cloud = io::read_cloud(path)?;
            let sigma = self.kernel_sigma.unwrap_or_default();
            if !(sigma > 0.0) {
                return Err(GeoError::parse("config", "kernel_sigma", "must be positive"));
            }
            return Ok(Representation::Kernel(KernelRep { cloud, sigma }));
        }
        let path = self.checkpoint.as_ref().expect("validated");
        Ok(Representation::Learned(LearnedRep::from_checkpoint(&io::read_checkpoint(path)?)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProjectionStudyConfig {
    pub base_size: usize,
    pub base_sigma: f64,
    /// Number of affine layers.
    pub base_depth: usize,
    pub base_width: usize,
    pub base_noise: f64,
    pub sizes: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub noises: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub eval_points: usize,
    pub buckets: Vec<f64>,
    /// Points at most this far from the surface count as near-surface.
    pub near_surface: f64,
    pub manifold: AnalyticSpec,
}

impl Default for ProjectionStudyConfig {
    fn default() -> Self {
        ProjectionStudyConfig {
            base_size: 100_000,
            base_sigma: 0.02,
            base_depth: 6,
            base_width: 128,
            base_noise: 0.0,
            sizes: vec![1_000, 10_000, 100_000],
            sigmas: vec![0.01, 0.02, 0.04],
            depths: vec![3, 6],
            widths: vec![128],
            noises: vec![0.0, 0.01, 0.05],
            steps: 20_000,
            batch_size: 128,
            eval_points: 2_000,
            buckets: vec![0.0, 0.02, 0.04, 0.08],
            near_surface: 0.02,
            manifold: AnalyticSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceStudyConfig {
    /// Ground-truth manifold for the reference computations.
    pub exact: AnalyticSpec,
    pub ks: Vec<usize>,
    pub reference_k: usize,
    pub from: Vec<f64>,
    pub to: Vec<f64>,
    pub exp_start: Vec<f64>,
    pub exp_velocity: Vec<f64>,
    pub exp_k: usize,
    /// Arclength samples used when comparing paths.
    pub samples: usize,
}

impl Default for ConvergenceStudyConfig {
    fn default() -> Self {
        let (major, minor) = (2.0 / 3.0, 1.0 / 3.0);
        let start = torus_point(major, minor, 0.0, 0.3);
        // Unit tangents along the two angle directions at θ = 0, φ = 0.3.
        let e_theta = [0.0, 1.0, 0.0];
        let e_phi = [-0.3_f64.sin(), 0.0, 0.3_f64.cos()];
        let velocity: Vec<f64> = (0..3).map(|i| 1.2 * e_theta[i] + 0.5 * e_phi[i]).collect();
        ConvergenceStudyConfig {
            exact: AnalyticSpec::default(),
            ks: vec![4, 8, 16, 32],
            reference_k: 256,
            from: torus_point(major, minor, -0.5, 0.45).as_slice().to_vec(),
            to: torus_point(major, minor, 0.5, -0.45).as_slice().to_vec(),
            exp_start: start.as_slice().to_vec(),
            exp_velocity: velocity,
            exp_k: 32,
            samples: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub manifold: ManifoldSection,
    #[serde(default)]
    pub energy: EnergySpec,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub projection_study: ProjectionStudyConfig,
    #[serde(default)]
    pub convergence_study: ConvergenceStudyConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: default_output_dir(),
            manifold: ManifoldSection { analytic: Some(AnalyticSpec::default()), ..ManifoldSection::default() },
            energy: EnergySpec::default(),
            solver: SolverSection::default(),
            training: TrainConfig::default(),
            projection_study: ProjectionStudyConfig::default(),
            convergence_study: ConvergenceStudyConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let location = match e.span() {
                Some(span) => format!("line {}", text[..span.start].matches('\n').count() + 1),
                None => "config".to_string(),
            };
            let msg = e.message().to_string();
            let field = msg.split('`').nth(1).unwrap_or("config").to_string();
            GeoError::parse(location, field, msg)
        })?;
        cfg.manifold.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }
}
