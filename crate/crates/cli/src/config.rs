//! Layered run configuration: command-line flags override config-file
//! entries, which override the `DIFFAUG_SEED` environment variable (seed
//! only), which overrides built-in defaults. Every run writes the resolved
//! settings next to its outputs for exact replay.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;

/// Errors that should exit with the usage code (2) rather than the runtime
/// failure code (1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Every key any subcommand understands; config files are validated against
/// this list so typos fail loudly.
pub const KNOWN_KEYS: &[&str] = &[
    "ambience",
    "audio-root",
    "bands",
    "base-width",
    "batch-size",
    "beta-end",
    "beta-start",
    "channel-mults",
    "clf",
    "copies",
    "data",
    "epochs",
    "folds",
    "frames",
    "guidance-w",
    "input",
    "k",
    "label",
    "label-dropout",
    "label-smoothing",
    "lr",
    "manifest",
    "method",
    "methods",
    "model",
    "mu",
    "n",
    "out",
    "prediction",
    "real",
    "samples",
    "sample-rate",
    "seed",
    "sigma0",
    "steps",
    "synthetic",
    "t-steps",
    "threshold",
    "traditional",
    "weight-decay",
    "widths",
];

/// Parsed `key = value` config file plus a record of resolved settings.
pub struct Resolver {
    file: BTreeMap<String, String>,
    resolved: BTreeMap<String, String>,
}

impl Resolver {
    pub fn new(config_path: Option<&Path>) -> anyhow::Result<Self> {
        let mut file = BTreeMap::new();
        if let Some(path) = config_path {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(UsageError(format!(
                        "{}:{}: expected `key = value`, got `{line}`",
                        path.display(),
                        lineno + 1
                    ))
                    .into());
                };
                let key = key.trim().to_string();
                if !KNOWN_KEYS.contains(&key.as_str()) {
                    return Err(UsageError(format!(
                        "{}:{}: unknown key `{key}`",
                        path.display(),
                        lineno + 1
                    ))
                    .into());
                }
                file.insert(key, value.trim().to_string());
            }
        }
        Ok(Resolver {
            file,
            resolved: BTreeMap::new(),
        })
    }

    fn note(&mut self, key: &str, value: impl ToString) {
        self.resolved.insert(key.to_string(), value.to_string());
    }

    /// flag > config file > default.
    pub fn get<T: FromStr + ToString>(
        &mut self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> anyhow::Result<T>
    where
        T::Err: std::fmt::Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        let value = match flag {
            Some(v) => v,
            None => match self.file.get(key) {
                Some(raw) => raw
                    .parse::<T>()
                    .map_err(|e| UsageError(format!("config key `{key}`: {e}")))?,
                None => default,
            },
        };
        self.note(key, value.to_string());
        Ok(value)
    }

    /// flag > config file > absent.
    pub fn get_opt<T: FromStr + ToString>(
        &mut self,
        flag: Option<T>,
        key: &str,
    ) -> anyhow::Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        let value = match flag {
            Some(v) => Some(v),
            None => match self.file.get(key) {
                Some(raw) => Some(
                    raw.parse::<T>()
                        .map_err(|e| UsageError(format!("config key `{key}`: {e}")))?,
                ),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.note(key, v.to_string());
        }
        Ok(value)
    }

    /// flag > config file > absent, for path-valued settings.
    pub fn path_opt(&mut self, flag: Option<PathBuf>, key: &str) -> anyhow::Result<Option<PathBuf>> {
        debug_assert!(KNOWN_KEYS.contains(&key), "unregistered key {key}");
        let value = match flag {
            Some(v) => Some(v),
            None => self.file.get(key).map(PathBuf::from),
        };
        if let Some(v) = &value {
            self.note(key, v.display());
        }
        Ok(value)
    }

    /// Required path-valued setting: flag or config file.
    pub fn path(&mut self, flag: Option<PathBuf>, key: &str) -> anyhow::Result<PathBuf> {
        self.path_opt(flag, key)?
            .ok_or_else(|| UsageError(format!("missing required setting `{key}`")).into())
    }

    /// Seed resolution includes the environment as the lowest-precedence
    /// source: flag > config > DIFFAUG_SEED > default 0.
    pub fn seed(&mut self, flag: Option<u64>) -> anyhow::Result<u64> {
        let value = match flag {
            Some(v) => v,
            None => match self.file.get("seed") {
                Some(raw) => raw
                    .parse::<u64>()
                    .map_err(|e| UsageError(format!("config key `seed`: {e}")))?,
                None => match std::env::var("DIFFAUG_SEED") {
                    Ok(raw) => raw
                        .parse::<u64>()
                        .map_err(|e| UsageError(format!("DIFFAUG_SEED: {e}")))?,
                    Err(_) => 0,
                },
            },
        };
        self.note("seed", value);
        Ok(value)
    }

    /// Write the resolved-settings snapshot into the output directory.
    pub fn write_snapshot(&self, out_dir: &Path, command: &str) -> anyhow::Result<()> {
        let mut text = format!("command = {command}\n");
        for (key, value) in &self.resolved {
            text.push_str(&format!("{key} = {value}\n"));
        }
        let path = out_dir.join("resolved-config.txt");
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Create the output directory and return it.
pub fn prepare_out_dir(out: &Path) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out.to_path_buf())
}
