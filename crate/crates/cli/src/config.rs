use anyhow::{anyhow, bail, Context, Result};
use qcpo::cmdp::EnvConfig;
use qcpo::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// Directory receiving the metrics, checkpoint and resolved config.
    pub dir: PathBuf,
    pub metrics: String,
    pub checkpoint: String,
    /// Print a progress line every this many iterations; 0 silences it.
    pub log_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/latest"),
            metrics: "metrics.csv".into(),
            checkpoint: "checkpoint.json".into(),
            log_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub env: EnvConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Raised when the config file itself cannot be read.
#[derive(Debug)]
pub struct MissingConfig {
    pub path: PathBuf,
    pub source: std::io::Error,
}

impl std::fmt::Display for MissingConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "cannot read config file {}: {}", self.path.display(), self.source)
    }
}

impl std::error::Error for MissingConfig {}

impl RunConfigFile {
    /// Reads `path`, applies `key.path=value` overrides and validates the result.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| MissingConfig {
            path: path.to_path_buf(),
            source,
        })?;
        // parse once untouched so that errors carry line numbers
        toml::from_str::<RunConfigFile>(&text)
            .with_context(|| format!("invalid config {}", path.display()))?;
        let mut tree: toml::Table = toml::from_str(&text)?;
        for o in overrides {
            apply_override(&mut tree, o)?;
        }
        let cfg: RunConfigFile = tree
            .try_into()
            .context("config is invalid after applying --set overrides")?;
        cfg.trainer.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Sets `a.b.c = value`, reading `value` as a TOML literal and falling back
/// to a bare string.
pub fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("override `{spec}` is not of the form key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("override `{spec}` has an empty key segment");
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut node = tree;
    for p in path {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("override `{spec}`: `{p}` is not a table"))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[env]
env_id = "two_path"

[trainer]
eps0 = 0.1
batch_steps = 220
subtraj_len = 22
"#;

    fn write(text: &str) -> (tempfile::TempDir, PathBuf) {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("run.toml");
        std::fs::write(&p, text).unwrap();
        (d, p)
    }

    #[test]
    fn overrides_replace_file_values() {
        let (_d, p) = write(BASE);
        let c = RunConfigFile::load(&p, &["trainer.eps0=0.2".into(), "output.dir=\"x/y\"".into()]).unwrap();
        assert_eq!(c.trainer.eps0, 0.2);
        assert_eq!(c.output.dir, PathBuf::from("x/y"));
        assert!(c.to_toml().unwrap().contains("eps0 = 0.2"));
    }

    #[test]
    fn bare_strings_and_nested_keys() {
        let mut t: toml::Table = toml::from_str(BASE).unwrap();
        apply_override(&mut t, "trainer.mode=expcp").unwrap();
        apply_override(&mut t, "env.two_path.spike_prob = 0.1").unwrap();
        assert_eq!(t["trainer"]["mode"].as_str(), Some("expcp"));
        assert_eq!(t["env"]["two_path"]["spike_prob"].as_float(), Some(0.1));
        assert!(apply_override(&mut t, "trainer.eps0").is_err());
        assert!(apply_override(&mut t, "trainer..eps0=1").is_err());
        assert!(apply_override(&mut t, "trainer.eps0.x=1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let (_d, p) = write(&format!("{BASE}gama = 0.9\n"));
        let err = format!("{:#}", RunConfigFile::load(&p, &[]).unwrap_err());
        assert!(err.contains("gama"), "{err}");
        assert!(err.contains("line"), "{err}");
        let (_d, p) = write(BASE);
        assert!(RunConfigFile::load(&p, &["trainer.bogus=1".into()]).is_err());
    }

    #[test]
    fn invalid_values_fail_validation() {
        let (_d, p) = write(BASE);
        assert!(RunConfigFile::load(&p, &["trainer.gamma=1.5".into()]).is_err());
    }

    #[test]
    fn missing_file_is_distinguishable() {
        let err = RunConfigFile::load(Path::new("/nonexistent/run.toml"), &[]).unwrap_err();
        assert!(err.downcast_ref::<MissingConfig>().is_some());
    }
}
