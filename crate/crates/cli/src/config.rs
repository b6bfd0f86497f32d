use std::fmt;
use std::path::{Path, PathBuf};

use gamelab_core::{ControlFamily, GameSpec, GridSpec, PenaltySchedule};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Input that failed schema validation. Carries the offending field path.
#[derive(Debug)]
pub struct SchemaError {
    pub file: PathBuf,
    pub message: String,
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.file.display(), self.message)
    }
}

impl std::error::Error for SchemaError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub n_steps: usize,
    pub n_paths: usize,
    pub x0: Vec<f64>,
    #[serde(default)]
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MollifyConfig {
    pub js: Vec<u32>,
    pub k: u32,
    pub m: f64,
    #[serde(default = "default_spacing")]
    pub spacing: f64,
}

fn default_spacing() -> f64 {
    1e-2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    #[serde(default = "default_points")]
    pub n_points: usize,
    #[serde(default = "default_half_width")]
    pub half_width: f64,
}

fn default_points() -> usize {
    400
}

fn default_half_width() -> f64 {
    3.0
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self { n_points: default_points(), half_width: default_half_width() }
    }
}

/// Which field plays the limit value in the optimality and rate studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// The solved grid itself (or the smallest gamma of a sweep).
    #[default]
    Grid,
    /// The obstacle `g`, exact for the degenerate benchmarks.
    Obstacle,
}

/// One experiment. Sections a command does not use are ignored by it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Game JSON, relative to the config file.
    pub spec_ref: PathBuf,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gammas: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub schedule: PenaltySchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub paths: Option<PathsConfig>,
    #[serde(default = "default_control")]
    pub control: ControlFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<Vec<ControlFamily>>,
    #[serde(default = "default_moments")]
    pub moments: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(default)]
    pub budget: f64,
    #[serde(default)]
    pub reference: Reference,
    #[serde(default = "default_residual_tol")]
    pub residual_tol: f64,
    #[serde(default = "default_export")]
    pub export_paths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mollify: Option<MollifyConfig>,
    #[serde(default)]
    pub sample: SampleConfig,
}

fn default_control() -> ControlFamily {
    ControlFamily::Zero
}

fn default_moments() -> Vec<f64> {
    vec![1.0]
}

fn default_residual_tol() -> f64 {
    1e-2
}

fn default_export() -> usize {
    1
}

/// Parse JSON into `T`, reporting the field path of the first mismatch.
pub fn parse_json<T: DeserializeOwned>(text: &str, file: &Path) -> Result<T, SchemaError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let message = if path == "." {
            e.inner().to_string()
        } else {
            format!("at `{path}`: {}", e.inner())
        };
        SchemaError { file: file.to_path_buf(), message }
    })
}

fn read(path: &Path) -> anyhow::Result<String> {
    std::fs::read_to_string(path).map_err(|e| {
        anyhow::Error::new(SchemaError { file: path.to_path_buf(), message: format!("cannot read: {e}") })
    })
}

/// A loaded experiment: config, resolved game and the hash both artifacts carry.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub spec: GameSpec,
    pub config_hash: String,
}

impl Experiment {
    pub fn load(path: &Path, seed_override: Option<u64>) -> anyhow::Result<Self> {
        let mut config: ExperimentConfig = parse_json(&read(path)?, path)?;
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let spec_path = base.join(&config.spec_ref);
        let spec: GameSpec = parse_json(&read(&spec_path)?, &spec_path)?;
        spec.check()
            .map_err(|e| SchemaError { file: spec_path.clone(), message: e.to_string() })?;
        let config_hash = hash_of(&config, &spec)?;
        Ok(Self { config, spec, config_hash })
    }

    pub fn preamble(&self) -> String {
        format!("# config_hash={},seed={}", self.config_hash, self.config.seed)
    }

    pub fn grid(&self) -> anyhow::Result<GridSpec> {
        self.config.grid.ok_or_else(|| self.missing("grid"))
    }

    pub fn gamma(&self) -> anyhow::Result<f64> {
        self.config.gamma.ok_or_else(|| self.missing("gamma"))
    }

    pub fn paths(&self) -> anyhow::Result<&PathsConfig> {
        self.config.paths.as_ref().ok_or_else(|| self.missing("paths"))
    }

    pub fn mollify(&self) -> anyhow::Result<&MollifyConfig> {
        self.config.mollify.as_ref().ok_or_else(|| self.missing("mollify"))
    }

    fn missing(&self, field: &str) -> anyhow::Error {
        anyhow::Error::new(SchemaError {
            file: self.config.spec_ref.clone(),
            message: format!("at `{field}`: this command needs the `{field}` section"),
        })
    }
}

/// SHA-256 over the effective config followed by the resolved game.
pub fn hash_of(config: &ExperimentConfig, spec: &GameSpec) -> anyhow::Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config)?);
    h.update(b"\n");
    h.update(serde_json::to_vec(spec)?);
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    const GAME: &str = r#"{
        "dims": {"state": 1, "noise": 1}, "horizon": 1.0, "discount": 0.0,
        "drift": {"kind": "zero"}, "diffusion": {"kind": "constant", "matrix": [[0.4]]},
        "payoffs": {"f": {"kind": "constant", "value": 1.0}, "g": {"kind": "put", "strike": 1.0, "scale": 1.0}, "h": {"kind": "zero"}},
        "profile": {"variant": "a22_sublinear", "d1": 1.0, "d2": 0.5, "d3": 1.0, "k1": 2.0, "k2": 10.0, "k5": 2.0,
                    "sigma_structure": "separable_ia", "beta": 0.5}
    }"#;

    #[test]
    fn unknown_field_reports_its_path() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "game.json", GAME);
        let cfg = write(dir.path(), "c.json", r#"{"spec_ref": "game.json", "seed": 1, "grid": {"n_time": 10, "bogus": 1}}"#);
        let err = Experiment::load(&cfg, None).unwrap_err();
        let schema = err.downcast_ref::<SchemaError>().expect("schema error");
        assert!(schema.message.contains("grid"), "{}", schema.message);
    }

    #[test]
    fn seed_is_required() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "game.json", GAME);
        let cfg = write(dir.path(), "c.json", r#"{"spec_ref": "game.json"}"#);
        let err = Experiment::load(&cfg, None).unwrap_err();
        assert!(err.to_string().contains("seed"), "{err}");
    }

    #[test]
    fn seed_override_changes_hash() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "game.json", GAME);
        let cfg = write(dir.path(), "c.json", r#"{"spec_ref": "game.json", "seed": 1}"#);
        let a = Experiment::load(&cfg, None).unwrap();
        let b = Experiment::load(&cfg, Some(1)).unwrap();
        let c = Experiment::load(&cfg, Some(2)).unwrap();
        assert_eq!(a.config_hash, b.config_hash);
        assert_ne!(a.config_hash, c.config_hash);
        assert_eq!(a.config_hash.len(), 64);
    }
}
