//! Structured config files (TOML sections mirroring the library's config
//! types) with `--set section.key=value` command-line overrides.

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;

use loraxs_core::adapter::InitKind;
use loraxs_core::experiments::{TaskSpec, DEFAULT_ABLATION_RANKS};
use loraxs_core::training::TrainConfig;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    #[serde(default)]
    pub task: TaskSpec,
    pub adapter: AdapterSection,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateFile {
    #[serde(default)]
    pub task: TaskSpec,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSection {
    pub rank: usize,
    /// Scaling hyperparameter; omitted means alpha = rank.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_init")]
    pub init: String,
}

impl AdapterSection {
    pub fn init_kind(&self) -> Result<InitKind> {
        self.init.parse().map_err(|e: String| anyhow!(e))
    }

    pub fn alpha_value(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    #[serde(default = "default_ranks")]
    pub ranks: Vec<usize>,
    #[serde(default = "default_inits")]
    pub inits: Vec<String>,
    /// Explicit seed list; wins over `n_seeds`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection {
            ranks: default_ranks(),
            inits: default_inits(),
            seeds: None,
            n_seeds: default_n_seeds(),
            alpha: None,
            sigma: default_sigma(),
        }
    }
}

impl AblateSection {
    pub fn seed_list(&self) -> Vec<u64> {
        self.seeds
            .clone()
            .unwrap_or_else(|| (0..self.n_seeds as u64).collect())
    }

    pub fn init_kinds(&self) -> Result<Vec<InitKind>> {
        self.inits
            .iter()
            .map(|s| s.parse().map_err(|e: String| anyhow!(e)))
            .collect()
    }
}

fn default_sigma() -> f64 {
    1e-5
}

fn default_init() -> String {
    "svd".into()
}

fn default_ranks() -> Vec<usize> {
    DEFAULT_ABLATION_RANKS.to_vec()
}

fn default_inits() -> Vec<String> {
    vec!["svd".into(), "random".into()]
}

fn default_n_seeds() -> usize {
    5
}

/// Reads a TOML config file and applies `section.key=value` overrides before
/// deserializing, so command-line flags win over file values.
pub fn load_with_overrides<T: serde::de::DeserializeOwned>(
    path: &std::path::Path,
    overrides: &[String],
) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut table: toml::Table = text
        .parse()
        .with_context(|| format!("parsing config {}", path.display()))?;
    for setting in overrides {
        apply_override(&mut table, setting)?;
    }
    T::deserialize(table).with_context(|| format!("validating config {}", path.display()))
}

fn apply_override(table: &mut toml::Table, setting: &str) -> Result<()> {
    let (key_path, raw_value) = setting
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{setting}` is not of the form section.key=value"))?;
    let parts: Vec<&str> = key_path.trim().split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        bail!("override key `{key_path}` is empty");
    }
    // Parse the value as a TOML literal; fall back to a plain string.
    let value = format!("v = {}", raw_value.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw_value.trim().to_string()));

    let mut current = table;
    for part in &parts[..parts.len() - 1] {
        current = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override key `{key_path}` crosses a non-table value"))?;
    }
    current.insert(parts.last().unwrap().to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_replace_file_values() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("t.toml");
        std::fs::write(
            &path,
            "[task]\nseed = 1\n[adapter]\nrank = 4\n[train]\nepochs = 2\n",
        )
        .unwrap();
        let cfg: TrainFile = load_with_overrides(
            &path,
            &["train.epochs=9".to_string(), "task.seed=42".to_string()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 9);
        assert_eq!(cfg.task.seed, 42);
        assert_eq!(cfg.adapter.rank, 4);
        assert_eq!(cfg.adapter.alpha_value(), 4.0);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("t.toml");
        std::fs::write(&path, "[adapter]\nrank = 4\nbogus = 1\n").unwrap();
        assert!(load_with_overrides::<TrainFile>(&path, &[]).is_err());
    }

    #[test]
    fn ablate_defaults_fill_in() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("a.toml");
        std::fs::write(&path, "[task]\nseed = 3\n").unwrap();
        let cfg: AblateFile = load_with_overrides(&path, &[]).unwrap();
        assert_eq!(cfg.ablate.ranks, vec![4, 8, 12, 20]);
        assert_eq!(cfg.ablate.seed_list(), vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.ablate.init_kinds().unwrap().len(), 2);
    }
}
