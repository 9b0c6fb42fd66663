use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use qcse::envs::{Behavior, EnvSpec};
use qcse::tabular::VerifyConfig;
use qcse::trainer::TrainConfig;

/// Output root used when neither `--out` nor the config names one.
pub const OUT_ENV: &str = "QCSE_OUT";

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_dataset_path() -> PathBuf {
    PathBuf::from("dataset.qcse")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub behavior: Behavior,
    pub size: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Relative paths resolve against the output directory.
    #[serde(default = "default_dataset_path")]
    pub path: PathBuf,
    pub generate: Option<GenerateConfig>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { path: default_dataset_path(), generate: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    /// Neighbour counts for `sweep`; empty means the standard list.
    #[serde(default)]
    pub knn_sweep: Vec<usize>,
    /// Settings for `verify`.
    #[serde(default)]
    pub verify: VerifyConfig,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| anyhow::anyhow!("invalid config: {e}"))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.env.validate().context("env")?;
        self.train.validate().context("train")?;
        if self.seeds.is_empty() {
            bail!("seeds must list at least one seed");
        }
        if let Some(g) = &self.dataset.generate {
            if g.size == 0 {
                bail!("dataset.generate.size must be positive");
            }
        }
        Ok(())
    }

    /// Output directory: the flag, then the config, then `$QCSE_OUT/<config
    /// name>`, then `runs/<config name>`.
    pub fn resolve_out(&self, flag: Option<&Path>, config_path: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.out {
            return p.clone();
        }
        let name = config_path.and_then(|p| p.file_stem()).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("default"));
        match std::env::var_os(OUT_ENV) {
            Some(root) => PathBuf::from(root).join(name),
            None => PathBuf::from("runs").join(name),
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// `path` under `out` unless absolute; relative paths may not climb out.
pub fn within(out: &Path, path: &Path) -> anyhow::Result<PathBuf> {
    if path.is_absolute() {
        return Ok(path.to_path_buf());
    }
    if path.components().any(|c| matches!(c, Component::ParentDir)) {
        bail!("relative path {} must stay inside the output directory", path.display());
    }
    Ok(out.join(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        [env]
        kind = "gridworld"
        width = 4
        height = 3
        start = [0, 0]
        goal = [3, 2]
        max_steps = 20
    "#;

    #[test]
    fn defaults_expand_and_round_trip() {
        let cfg = ExperimentConfig::parse(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds, vec![0]);
        assert_eq!(cfg.train.batch_size, 256);
        let text = cfg.to_toml().unwrap();
        assert!(text.contains("batch_size = 256"), "{text}");
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::parse(&format!("{MINIMAL}\n[train]\nbatch = 3\n")).unwrap_err();
        assert!(format!("{err:#}").contains("batch"), "{err:#}");
        let err = ExperimentConfig::parse("seeds = [1]").unwrap_err();
        assert!(format!("{err:#}").contains("env"), "{err:#}");
    }

    #[test]
    fn relative_paths_stay_inside() {
        let out = Path::new("/tmp/x");
        assert_eq!(within(out, Path::new("a/b")).unwrap(), PathBuf::from("/tmp/x/a/b"));
        assert!(within(out, Path::new("../b")).is_err());
    }
}
