//! Optional JSON config file with one section per subcommand. Flags override
//! section values; the `VN_SEED` environment variable is the last seed
//! fallback before 0.

use std::fs;
use std::path::Path;

use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub split: SplitSection,
    #[serde(default)]
    pub rules: RulesSection,
    #[serde(default)]
    pub mine_sp: MineSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub strategy: Option<String>,
    pub fraction: Option<f64>,
    pub count: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RulesSection {
    pub min_confidence: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MineSection {
    pub walks: Option<usize>,
    pub exhaustive: Option<bool>,
    pub max_half_len: Option<usize>,
    pub min_confidence: Option<f64>,
    pub min_support: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub dim: Option<usize>,
    pub layers: Option<usize>,
    pub decoder: Option<String>,
    pub ablation: Option<String>,
    pub dropout: Option<f64>,
    pub share_inverse_zq: Option<bool>,
    pub zero_unknown: Option<bool>,
    pub epochs: Option<usize>,
    pub minibatches: Option<usize>,
    pub negatives: Option<usize>,
    pub learning_rate: Option<f64>,
    pub l2: Option<f64>,
    pub clip_norm: Option<f64>,
    pub penalty_c: Option<f64>,
    pub validate_every: Option<usize>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub filter_sets: Option<String>,
    pub neg_seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig, CliError> {
        let Some(path) = path else { return Ok(FileConfig::default()) };
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    }
}

/// Flag beats config section beats built-in default.
pub fn pick<T>(flag: Option<T>, section: Option<T>, default: T) -> T {
    flag.or(section).unwrap_or(default)
}

/// Seed precedence: flag, section, file-global, VN_SEED, 0.
pub fn resolve_seed(
    flag: Option<u64>,
    section: Option<u64>,
    file: &FileConfig,
) -> Result<u64, CliError> {
    if let Some(s) = flag.or(section).or(file.seed) {
        return Ok(s);
    }
    match std::env::var("VN_SEED") {
        Ok(text) => text
            .parse()
            .map_err(|_| CliError::Data(format!("VN_SEED is not an integer: {text:?}"))),
        Err(_) => Ok(0),
    }
}
