//! Run configuration files.
//!
//! Precedence, highest first: command-line flags, the `--config` file,
//! the `RAWVID_DATA_ROOT` environment variable (data root only), built-in
//! defaults. Relative paths inside a config file resolve against the file's
//! directory.

use std::path::{Path, PathBuf};

use rawvid_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::failure::{CliResult, Failure};

pub const DATA_ROOT_ENV: &str = "RAWVID_DATA_ROOT";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_root: Option<PathBuf>,
    /// Noise parameter table used to synthesize training noise.
    pub params: Option<PathBuf>,
    pub iso: Option<u32>,
    pub predenoiser: Option<PathBuf>,
    pub isp: Option<PathBuf>,
    /// State to resume or finetune from.
    pub init: Option<PathBuf>,
    pub reference_isp: Option<PathBuf>,
    pub eval_noisy: Option<PathBuf>,
    pub eval_clean: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.data_root,
            &mut self.params,
            &mut self.predenoiser,
            &mut self.isp,
            &mut self.init,
            &mut self.reference_isp,
            &mut self.eval_noisy,
            &mut self.eval_clean,
            &mut self.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides `train.seed` when set.
    pub seed: Option<u64>,
    pub verbosity: Option<String>,
    pub paths: Paths,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| Failure::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
        cfg.paths.resolve_against(path.parent().unwrap_or(Path::new(".")));
        if let Some(seed) = cfg.seed {
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    /// The config file if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn data_root(&self, flag: Option<&Path>) -> Option<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.paths.data_root.clone())
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }
}

/// `flag` over `config`.
pub fn pick<T: Clone>(flag: Option<T>, config: &Option<T>) -> Option<T> {
    flag.or_else(|| config.clone())
}

/// Fails with a configuration error unless `path` exists.
pub fn require_input(role: &str, path: &Path) -> CliResult<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Config(format!("{role} {} does not exist", path.display())))
    }
}

pub fn require<T>(role: &str, value: Option<T>) -> CliResult<T> {
    value.ok_or_else(|| Failure::Config(format!("no {role} given (flag or config file)")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 9\n[paths]\ndata_root = \"data\"\nout = \"/abs/out\"\n[train]\nstage = \"predenoise\"\nepochs = 2\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.data_root, Some(dir.path().join("data")));
        assert_eq!(cfg.paths.out, Some(PathBuf::from("/abs/out")));
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.epochs, 2);
    }

    #[test]
    fn unknown_keys_and_missing_files_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("bogus = 1"), Err(Failure::Config(_))));
        let err = RunConfig::load(Path::new("/nonexistent/run.toml")).unwrap_err();
        assert_eq!(err.exit_code(), crate::failure::EXIT_CONFIG);
    }

    #[test]
    fn flags_beat_config() {
        assert_eq!(pick(Some(1), &Some(2)), Some(1));
        assert_eq!(pick(None, &Some(2)), Some(2));
        assert_eq!(pick::<u32>(None, &None), None);
    }
}
