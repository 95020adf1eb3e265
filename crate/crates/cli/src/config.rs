//! Experiment documents: TOML with optional `extends`, command-line
//! overrides, and the resolved echo written next to every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajeglish_core::data::SynthConfig;
use trajeglish_core::model::{ModelConfig, NoiseConfig, TrainConfig};
use trajeglish_core::rollout::{CenterPolicy, RolloutConfig, WindowConfig};
use trajeglish_core::tokenizer::Method;
use trajeglish_core::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// `train.jsonl`, `val.jsonl` and the census.
    pub corpus_dir: PathBuf,
    /// `templates.json` and the fit report.
    pub vocab_dir: PathBuf,
    pub tokens_dir: PathBuf,
    /// Checkpoint, training log, rollouts and metrics of one experiment.
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            corpus_dir: "runs/corpus".into(),
            vocab_dir: "runs/vocab".into(),
            tokens_dir: "runs/tokens".into(),
            run_dir: "runs/default".into(),
        }
    }
}

impl Paths {
    pub fn train_corpus(&self) -> PathBuf {
        self.corpus_dir.join("train.jsonl")
    }
    pub fn val_corpus(&self) -> PathBuf {
        self.corpus_dir.join("val.jsonl")
    }
    pub fn vocab(&self) -> PathBuf {
        self.vocab_dir.join("templates.json")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.run_dir.join("model.ckpt")
    }
    pub fn rollouts(&self) -> PathBuf {
        self.run_dir.join("rollouts.jsonl")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection { val_fraction: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabSection {
    pub method: Method,
    pub size: usize,
    /// k-disks radius; unset picks the size-dependent default.
    pub epsilon: Option<f64>,
    pub restarts: usize,
    pub max_iter: usize,
    pub score_slice: usize,
    pub seed: u64,
    /// Explicit grid axis counts; unset uses the preset for `size`.
    pub grid_xyh: Option<[usize; 3]>,
    pub grid_xy: Option<usize>,
    /// Also fit the other three methods at the same size for the report.
    pub compare: bool,
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection {
            method: Method::Kdisks,
            size: 384,
            epsilon: None,
            restarts: 4,
            max_iter: 20,
            score_slice: 10_000,
            seed: 0,
            grid_xyh: None,
            grid_xy: None,
            compare: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    /// Every agent sampled from the model.
    Model,
    /// Every agent replayed from the log.
    ReplayAll,
    /// The SDC replayed, everyone else sampled.
    ReplaySdc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RolloutSection {
    pub history: usize,
    pub horizon: usize,
    pub n_rollouts: usize,
    pub temperature: f64,
    pub p_top: f64,
    pub seed: u64,
    pub control: ControlMode,
    pub windowed: bool,
    pub max_agents: usize,
    pub recompute_timesteps: Vec<usize>,
    pub center_policy: CenterPolicy,
    /// Only the first this many validation scenarios; unset is all.
    pub max_scenarios: Option<usize>,
}

impl Default for RolloutSection {
    fn default() -> Self {
        RolloutSection {
            history: 1,
            horizon: 15,
            n_rollouts: 4,
            temperature: 1.0,
            p_top: 1.0,
            seed: 0,
            control: ControlMode::Model,
            windowed: false,
            max_agents: 8,
            recompute_timesteps: Vec::new(),
            center_policy: CenterPolicy::Nearest,
            max_scenarios: None,
        }
    }
}

impl RolloutSection {
    pub fn rollout_config(&self) -> RolloutConfig {
        RolloutConfig {
            temperature: self.temperature,
            p_top: self.p_top,
            horizon: self.horizon,
            n_rollouts: self.n_rollouts,
            seed: self.seed,
            window: WindowConfig {
                max_agents: self.max_agents,
                recompute_timesteps: self.recompute_timesteps.clone(),
                center_policy: self.center_policy,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Context lengths (timesteps) of the NLL sweep.
    pub contexts: Vec<usize>,
    /// Largest predecessor count of the intra-timestep sweep.
    pub max_predecessors: usize,
    /// Label of this experiment in the report; unset uses the run directory name.
    pub condition: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            contexts: vec![1, 2, 4, 8],
            max_predecessors: 1,
            condition: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub synth: SynthConfig,
    pub split: SplitSection,
    pub vocab: VocabSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rollout: RolloutSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn condition(&self) -> String {
        self.eval.condition.clone().unwrap_or_else(|| {
            self.paths
                .run_dir
                .file_name()
                .map_or_else(|| "run".to_string(), |n| n.to_string_lossy().into_owned())
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Writes the resolved document as `<dir>/resolved_<command>.toml`.
    pub fn echo(&self, dir: &Path, command: &str) -> anyhow::Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        let path = dir.join(format!("resolved_{command}.toml"));
        std::fs::write(&path, self.to_toml()).map_err(|e| io_error(&path, e))?;
        Ok(path)
    }
}

pub(crate) fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn read_document(path: &Path, depth: usize) -> Result<toml::Table, Error> {
    if depth > 8 {
        return Err(config_error(format!("{}: `extends` chain is too deep", path.display())));
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    let mut doc: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| config_error(format!("{}: {e}", path.display())))?;
    match doc.remove("extends") {
        None => Ok(doc),
        Some(toml::Value::String(parent)) => {
            let parent_path = path.parent().unwrap_or(Path::new(".")).join(parent);
            let mut base = read_document(&parent_path, depth + 1)?;
            merge(&mut base, doc);
            Ok(base)
        }
        Some(_) => Err(config_error(format!("{}: `extends` must be a file name", path.display()))),
    }
}

/// Deep merge; scalars and arrays in `top` replace those in `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// A value as TOML if it parses as one, otherwise as a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// `["--train.lr", "1e-3", "--model.masking_regime=marginal"]` into
/// dotted-key assignments.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, toml::Value)>, Error> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let Some(key) = a.strip_prefix("--") else {
            return Err(config_error(format!("expected --section.key, found {a:?}")));
        };
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| config_error(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(config_error(format!("malformed override key {key:?}")));
        }
        out.push((key, parse_value(&raw)));
    }
    Ok(out)
}

fn apply_override(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), Error> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().expect("non-empty key");
    let mut table = doc;
    for p in path {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_error(format!("override {key}: {p} is not a section")))?;
    }
    // Integers given where floats are expected would fail to deserialize.
    let value = match (table.get(*last), value) {
        (Some(toml::Value::Float(_)), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    };
    table.insert(last.to_string(), value);
    Ok(())
}

/// Defaults, then the document (and its `extends` chain), then overrides.
pub fn load(path: Option<&Path>, overrides: &[(String, toml::Value)]) -> Result<RunConfig, Error> {
    let mut doc = toml::Table::try_from(RunConfig::default()).expect("defaults serialize");
    if let Some(p) = path {
        merge(&mut doc, read_document(p, 0)?);
    }
    for (k, v) in overrides {
        apply_override(&mut doc, k, v.clone())?;
    }
    let cfg: RunConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| config_error(e.to_string()))?;
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), Error> {
    if !(0.0..1.0).contains(&cfg.split.val_fraction) {
        return Err(config_error(format!("split.val_fraction {} must lie in [0, 1)", cfg.split.val_fraction)));
    }
    if cfg.vocab.size == 0 {
        return Err(config_error("vocab.size must be at least 1"));
    }
    if cfg.rollout.history == 0 {
        return Err(config_error("rollout.history must be at least 1"));
    }
    if let Some(NoiseConfig { sigma, .. }) = cfg.train.noise {
        if sigma < 0.0 {
            return Err(config_error("train.noise.sigma must be >= 0"));
        }
    }
    cfg.train.validate()?;
    cfg.rollout.rollout_config().validate()?;
    Ok(())
}
