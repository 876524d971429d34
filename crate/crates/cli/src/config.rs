//! Run configuration: one TOML file with a section per stage, plus
//! dotted-key overrides applied before deserialization.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ttct_core::corpus::CorpusConfig;
use ttct_core::encoders::EncoderConfig;
use ttct_core::grid::GridConfig;
use ttct_core::predictor::CalibrationSet;
use ttct_core::saferl::{Mode, SafeRlConfig};
use ttct_core::trainer::TrainConfig;

use crate::error::{CliError, CliResult};

pub const OUTPUT_ROOT_ENV: &str = "TTCT_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "ttct-out";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub env: GridConfig,
    pub corpus: CorpusConfig,
    pub ttct: TtctSection,
    pub calibrate: CalibrateSection,
    pub rl: SafeRlConfig,
    pub policy: PolicySection,
    pub eval: EvalSection,
}

/// Artifact locations. Relative paths resolve against the output root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub ttct_dir: PathBuf,
    pub model: PathBuf,
    pub calibration: PathBuf,
    pub policy_dir: PathBuf,
    pub eval_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            ttct_dir: "ttct".into(),
            model: "ttct/model.ckpt".into(),
            calibration: "ttct/calibration.json".into(),
            policy_dir: "policy".into(),
            eval_dir: "eval".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TtctSection {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrateSection {
    pub set: CalibrationSet,
    /// Fit one threshold per constraint family besides the global one.
    pub per_family: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    /// Modes trained by one `train-policy` call; empty means `rl.mode`.
    pub modes: Vec<Mode>,
    /// Seeds trained per mode; empty means `rl.seed`.
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub greedy_eval: bool,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { modes: Vec::new(), seeds: Vec::new(), eval_episodes: 200, eval_seed: 1000, greedy_eval: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub chunk: usize,
    /// Run records (`eval.json` files) for the Pareto frontier; empty means
    /// every record found under the policy directory.
    pub runs: Vec<PathBuf>,
    pub lavawall_episodes: usize,
    pub lavawall_horizon: usize,
    /// Index into the held-out pairs of the episode broken down per step.
    pub heatmap_pair: usize,
    pub skip_transfer: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            chunk: 64,
            runs: Vec::new(),
            lavawall_episodes: 500,
            lavawall_horizon: 100,
            heatmap_pair: 0,
            skip_transfer: false,
        }
    }
}

impl RunConfig {
    pub fn modes(&self) -> Vec<Mode> {
        if self.policy.modes.is_empty() {
            vec![self.rl.mode]
        } else {
            self.policy.modes.clone()
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.policy.seeds.is_empty() {
            vec![self.rl.seed]
        } else {
            self.policy.seeds.clone()
        }
    }

    /// Sets every stage seed at once.
    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.ttct.encoder.seed = seed;
        self.ttct.train.seed = seed;
        self.rl.seed = seed;
        self.policy.seeds.clear();
    }
}

/// Reads `path` (or starts from defaults) and applies `key.path=value`
/// overrides. Values parse as TOML and fall back to plain strings.
pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    toml::Value::Table(table).try_into::<RunConfig>().map_err(|e| CliError::Config(e.to_string()))
}

pub fn apply_override(table: &mut toml::Table, spec: &str) -> CliResult<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key {key:?} is malformed")));
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {key:?}: {p:?} is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Absolute paths pass through; relative ones hang off `root`.
pub fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Output root precedence: explicit flag, then the environment, then the default.
pub fn output_root(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUTPUT_ROOT),
    }
}
