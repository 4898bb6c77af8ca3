//! Text formats for every artifact: point-cloud CSV, checkpoint JSON, path
//! JSON, study-table CSV and run manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{GeoError, Result};
use crate::manifold::{PointCloud, Vector};
use crate::nn::Checkpoint;
use crate::solver::{DiscretePath, SolverReport};

fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn parse_f64(s: &str, location: &str, field: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|e| GeoError::parse(location, field, format!("`{}` is not a number ({e})", s.trim())))
}

/// `key=value` pairs of a `# …` header line.
fn header_pairs(line: &str, location: &str) -> Result<BTreeMap<String, String>> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| GeoError::parse(location, "header", "expected a line starting with `#`"))?;
    let mut out = BTreeMap::new();
    for tok in body.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| GeoError::parse(location, "header", format!("`{tok}` is not key=value")))?;
        out.insert(k.to_string(), v.to_string());
    }
    Ok(out)
}

fn header_field<'a>(pairs: &'a BTreeMap<String, String>, key: &str, location: &str) -> Result<&'a str> {
    pairs
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| GeoError::parse(location, key, "missing from header"))
}

fn json_error(e: serde_json::Error) -> GeoError {
    let msg = e.to_string();
    // serde_json names the offending field inside backticks.
    let field = msg
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "json".to_string());
    GeoError::parse(format!("line {} column {}", e.line(), e.column()), field, msg)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn cloud_to_csv(cloud: &PointCloud) -> String {
    let mut s = format!("# dim={} seed={} noise={}\n", cloud.dim(), cloud.seed(), cloud.noise_sd());
    for row in cloud.rows() {
        let line: Vec<String> = row.iter().map(|&v| fmt_f64(v)).collect();
        s.push_str(&line.join(","));
        s.push('\n');
    }
    s
}

pub fn cloud_from_csv(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    let (_, first) = lines.next().ok_or_else(|| GeoError::parse("line 1", "header", "empty file"))?;
    let pairs = header_pairs(first, "line 1")?;
    let dim = header_field(&pairs, "dim", "line 1")?
        .parse::<usize>()
        .map_err(|e| GeoError::parse("line 1", "dim", e.to_string()))?;
    let seed = header_field(&pairs, "seed", "line 1")?
        .parse::<u64>()
        .map_err(|e| GeoError::parse("line 1", "seed", e.to_string()))?;
    let noise = parse_f64(header_field(&pairs, "noise", "line 1")?, "line 1", "noise")?;
    let mut data = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("line {}", i + 1);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim {
            return Err(GeoError::parse(&loc, "row", format!("expected {dim} values, found {}", fields.len())));
        }
        for (j, f) in fields.iter().enumerate() {
            data.push(parse_f64(f, &loc, &format!("x{j}"))?);
        }
    }
    if data.is_empty() {
        return Err(GeoError::parse("line 2", "row", "no points"));
    }
    PointCloud::from_flat(data, dim, seed, noise)
}

pub fn read_cloud(path: &Path) -> Result<PointCloud> {
    cloud_from_csv(&fs::read_to_string(path)?)
}

pub fn write_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_text(path, &cloud_to_csv(cloud))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub fn checkpoint_from_json(text: &str) -> Result<Checkpoint> {
    let ckpt: Checkpoint = serde_json::from_str(text).map_err(json_error)?;
    ckpt.to_model()?;
    Ok(ckpt)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    checkpoint_from_json(&fs::read_to_string(path)?)
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_text(path, &to_json(ckpt)?)
}

/// On-disk form of a discrete path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathFile {
    #[serde(rename = "K")]
    pub k: usize,
    pub dim: usize,
    pub points: Vec<Vec<f64>>,
    #[serde(default)]
    pub energy: Option<f64>,
    #[serde(default)]
    pub report: Option<SolverReport>,
}

impl PathFile {
    pub fn new(path: &DiscretePath, energy: Option<f64>, report: Option<SolverReport>) -> Self {
        PathFile {
            k: path.k(),
            dim: path.dim(),
            points: path.points().iter().map(|p| p.as_slice().to_vec()).collect(),
            energy,
            report,
        }
    }

    pub fn to_path(&self) -> Result<DiscretePath> {
        if self.points.len() != self.k + 1 {
            return Err(GeoError::parse(
                "path",
                "K",
                format!("K = {} but {} points are listed", self.k, self.points.len()),
            ));
        }
        for (i, p) in self.points.iter().enumerate() {
            if p.len() != self.dim {
                return Err(GeoError::parse(
                    format!("points[{i}]"),
                    "dim",
                    format!("dim = {} but the point has {} coordinates", self.dim, p.len()),
                ));
            }
        }
        DiscretePath::new(self.points.iter().map(|p| Vector::from_column_slice(p)).collect())
    }
}

pub fn path_from_json(text: &str) -> Result<PathFile> {
    let file: PathFile = serde_json::from_str(text).map_err(json_error)?;
    file.to_path()?;
    Ok(file)
}

pub fn read_path(path: &Path) -> Result<PathFile> {
    path_from_json(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub params: Vec<f64>,
    pub values: Vec<f64>,
    /// `ok`, or the error that stopped this row.
    pub status: String,
}

/// One sweep: a row per sweep point, with parameter and statistic columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub name: String,
    pub param_names: Vec<String>,
    pub value_names: Vec<String>,
    pub rows: Vec<StudyRow>,
    pub metadata: BTreeMap<String, String>,
}

fn sanitize(s: &str) -> String {
    s.chars().map(|c| if c == ',' || c == '\n' || c == '\r' { ';' } else { c }).collect()
}

fn sanitize_token(s: &str) -> String {
    s.chars().map(|c| if c.is_whitespace() || c == ',' || c == '=' { '_' } else { c }).collect()
}

impl StudyTable {
    pub fn new(name: &str, param_names: &[&str], value_names: &[String]) -> Self {
        StudyTable {
            name: sanitize_token(name),
            param_names: param_names.iter().map(|s| sanitize_token(s)).collect(),
            value_names: value_names.iter().map(|s| sanitize_token(s)).collect(),
            rows: Vec::new(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, params: Vec<f64>, values: Vec<f64>, status: &str) {
        self.rows.push(StudyRow { params, values, status: sanitize(status) });
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.metadata.insert(sanitize_token(key), sanitize_token(&value.to_string()));
    }

    /// Column index of a statistic by name.
    pub fn value_index(&self, name: &str) -> Option<usize> {
        self.value_names.iter().position(|n| n == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.value_index(name)?;
        Some(self.rows.iter().map(|r| r.values[i]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# study={} params={}", self.name, self.param_names.len());
        for (k, v) in &self.metadata {
            let _ = write!(s, " {k}={v}");
        }
        s.push('\n');
        let header: Vec<&str> = self
            .param_names
            .iter()
            .chain(&self.value_names)
            .map(String::as_str)
            .chain(std::iter::once("status"))
            .collect();
        s.push_str(&header.join(","));
        s.push('\n');
        for row in &self.rows {
            let mut cells: Vec<String> = row.params.iter().chain(&row.values).map(|&v| fmt_f64(v)).collect();
            cells.push(row.status.clone());
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| GeoError::parse("line 1", "header", "empty file"))?;
        let mut pairs = header_pairs(first, "line 1")?;
        let name = header_field(&pairs, "study", "line 1")?.to_string();
        let n_params = header_field(&pairs, "params", "line 1")?
            .parse::<usize>()
            .map_err(|e| GeoError::parse("line 1", "params", e.to_string()))?;
        pairs.remove("study");
        pairs.remove("params");
        let (_, cols) = lines.next().ok_or_else(|| GeoError::parse("line 2", "columns", "missing column header"))?;
        let cols: Vec<&str> = cols.split(',').collect();
        if cols.len() < n_params + 1 || cols.last() != Some(&"status") {
            return Err(GeoError::parse("line 2", "columns", "expected parameter, value and status columns"));
        }
        let param_names: Vec<String> = cols[..n_params].iter().map(|s| s.to_string()).collect();
        let value_names: Vec<String> = cols[n_params..cols.len() - 1].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let loc = format!("line {}", i + 1);
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != cols.len() {
                return Err(GeoError::parse(&loc, "row", format!("expected {} cells, found {}", cols.len(), cells.len())));
            }
            let nums = cells[..cells.len() - 1]
                .iter()
                .zip(&cols)
                .map(|(c, name)| parse_f64(c, &loc, name))
                .collect::<Result<Vec<f64>>>()?;
            rows.push(StudyRow {
                params: nums[..n_params].to_vec(),
                values: nums[n_params..].to_vec(),
                status: cells[cells.len() - 1].to_string(),
            });
        }
        Ok(StudyTable { name, param_names, value_names, rows, metadata: pairs })
    }
}

pub fn write_table(path: &Path, table: &StudyTable) -> Result<()> {
    write_text(path, &table.to_csv())
}

pub fn read_table(path: &Path) -> Result<StudyTable> {
    StudyTable::from_csv(&fs::read_to_string(path)?)
}

/// Hex SHA-256 of the canonical JSON rendering of a configuration.
pub fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let canonical = serde_json::to_string(config)?;
    Ok(hex::encode(Sha256::digest(canonical.as_bytes())))
}

/// Everything needed to rerun a command: the resolved configuration, its
/// hash, and the seeds that were used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn new<T: Serialize>(command: &str, config: &T, seeds: BTreeMap<String, u64>, artifacts: Vec<String>) -> Result<Self> {
        Ok(Manifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            config_hash: config_hash(config)?,
            seeds,
            artifacts,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::AnalyticManifold;
    use crate::nn::Mlp;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn cloud_roundtrip_is_bit_exact() {
        let cloud = AnalyticManifold::default_torus().sample_cloud(500, 0.01, 42).unwrap();
        let back = cloud_from_csv(&cloud_to_csv(&cloud)).unwrap();
        assert_eq!(cloud, back);
        let tiny = PointCloud::from_flat(vec![f64::MIN_POSITIVE, -1e300, 1.0 / 3.0], 3, 1, 0.1).unwrap();
        assert_eq!(cloud_from_csv(&cloud_to_csv(&tiny)).unwrap(), tiny);
    }

    #[test]
    fn cloud_diagnostics_name_line_and_field() {
        let err = cloud_from_csv("# dim=2 seed=0 noise=0\n1,2\n3,x\n").unwrap_err();
        match err {
            GeoError::Parse { location, field, .. } => {
                assert_eq!(location, "line 3");
                assert_eq!(field, "x1");
            }
            e => panic!("{e:?}"),
        }
        assert!(matches!(
            cloud_from_csv("# seed=0 noise=0\n1,2\n"),
            Err(GeoError::Parse { field, .. }) if field == "dim"
        ));
        assert!(matches!(
            cloud_from_csv("# dim=2 seed=0 noise=0\n1,2,3\n"),
            Err(GeoError::Parse { field, .. }) if field == "row"
        ));
    }

    #[test]
    fn checkpoint_roundtrip_preserves_outputs() {
        let model = Mlp::new(&[3, 32, 32, 3], 5).unwrap();
        let ckpt = Checkpoint::from_model(&model, 0.05, 5);
        let back = checkpoint_from_json(&to_json(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
        let restored = back.to_model().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let x = Vector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            assert_eq!(model.forward(&x).unwrap(), restored.forward(&x).unwrap());
        }
    }

    #[test]
    fn path_json_roundtrip_and_dim_error() {
        let a = Vector::from_column_slice(&[0.1, 0.2, 0.3]);
        let b = Vector::from_column_slice(&[1.0 / 3.0, -2.0, 1e-17]);
        let p = DiscretePath::linear(&a, &b, 5).unwrap();
        let file = PathFile::new(&p, Some(1.25), None);
        let back = path_from_json(&to_json(&file).unwrap()).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_path().unwrap(), p);

        let bad = to_json(&file).unwrap().replace("\"dim\": 3", "\"dim\": 2");
        match path_from_json(&bad) {
            Err(GeoError::Parse { field, .. }) => assert_eq!(field, "dim"),
            other => panic!("{other:?}"),
        }
        let missing = r#"{"K": 1, "points": [[0.0], [1.0]]}"#;
        match path_from_json(missing) {
            Err(GeoError::Parse { field, .. }) => assert_eq!(field, "dim"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn study_table_roundtrip() {
        let mut t = StudyTable::new("sizes", &["n", "sigma"], &["median".into(), "p90".into()]);
        t.push(vec![1000.0, 0.02], vec![0.001234, 1.0 / 7.0], "ok");
        t.push(vec![1e5, 0.02], vec![f64::NAN, f64::NAN], "non-finite loss, step 3");
        t.set_meta("seed", 7);
        t.set_meta("config_hash", "abc");
        let csv = t.to_csv();
        let back = StudyTable::from_csv(&csv).unwrap();
        assert_eq!(back.to_csv(), csv);
        assert_eq!(back.rows[0], t.rows[0]);
        assert!(back.rows[1].values[0].is_nan());
        assert_eq!(back.metadata, t.metadata);
    }

    #[test]
    fn config_hash_is_stable() {
        let a = config_hash(&vec![1, 2, 3]).unwrap();
        assert_eq!(a, config_hash(&vec![1, 2, 3]).unwrap());
        assert_ne!(a, config_hash(&vec![1, 2, 4]).unwrap());
        assert_eq!(a.len(), 64);
    }
}
