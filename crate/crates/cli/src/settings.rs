//! Flag, config-file and default resolution. Flags win over the config file,
//! which wins over the built-in defaults.

use std::path::Path;

use anyhow::Context;
use serde::Deserialize;

use mumoe::pruner::{Method, Mode, PruneConfig};
use mumoe::{LambdaPolicy, Strategy, TieMode};

use crate::PruneFlags;

/// Keys accepted in a `--config` JSON file. Every key is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub rho: Option<f64>,
    pub method: Option<String>,
    pub mode: Option<String>,
    pub strategy: Option<String>,
    pub tie: Option<String>,
    pub lambda_relative: Option<f64>,
    pub lambda_absolute: Option<f64>,
    pub allow_online_sparsegpt: Option<bool>,
    pub seed: Option<u64>,
    pub stride: Option<usize>,
    pub d: Option<Vec<usize>>,
    pub dprime: Option<Vec<usize>>,
    pub rhos: Option<Vec<f64>>,
    pub strategies: Option<Vec<String>>,
    pub reps: Option<usize>,
    pub warmup: Option<usize>,
    pub trials: Option<usize>,
    pub prompt_len: Option<usize>,
    pub calib_len: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

pub fn parse<T: std::str::FromStr>(what: &str, v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| format!("invalid {what}: {e}"))
}

/// Pruning configuration from flags over file over defaults. `mode` is the
/// pruning mode actually used (eval's dense mode never reaches here).
pub fn prune_config(flags: &PruneFlags, file: &FileConfig, mode: Mode) -> Result<PruneConfig, String> {
    let pick = |flag: &Option<String>, file: &Option<String>| flag.clone().or_else(|| file.clone());
    let mut cfg = PruneConfig {
        mode,
        ..PruneConfig::default()
    };
    if let Some(rho) = flags.rho.or(file.rho) {
        cfg.rho = rho;
    }
    if let Some(m) = pick(&flags.method, &file.method) {
        cfg.method = parse::<Method>("method", &m)?;
    }
    if let Some(s) = pick(&flags.strategy, &file.strategy) {
        cfg.strategy = parse::<Strategy>("strategy", &s)?;
    }
    if let Some(t) = pick(&flags.tie, &file.tie) {
        cfg.tie_mode = parse::<TieMode>("tie mode", &t)?;
    }
    let relative = flags.lambda_relative.or(file.lambda_relative);
    let absolute = flags.lambda_absolute.or(file.lambda_absolute);
    cfg.lambda_policy = match (relative, absolute) {
        (Some(_), Some(_)) => return Err("--lambda-relative and --lambda-absolute are exclusive".into()),
        (Some(r), None) => LambdaPolicy::Relative(r),
        (None, Some(a)) => LambdaPolicy::Absolute(a),
        (None, None) => cfg.lambda_policy,
    };
    cfg.allow_online_sparsegpt = flags.allow_online_sparsegpt || file.allow_online_sparsegpt.unwrap_or(false);
    cfg.validate().map_err(|e| e.to_string())?;
    Ok(cfg)
}

pub fn mode(flag: &Option<String>, file: &FileConfig, default: &str) -> String {
    flag.clone().or_else(|| file.mode.clone()).unwrap_or_else(|| default.to_owned())
}
