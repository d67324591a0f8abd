//! Run configuration: a `key = value` file with `[section]` tables.
//!
//! Every key is optional. Unknown keys are errors. A run's resolved
//! configuration is saved as `run_meta.json`, which loads back through the
//! same entry point.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{DpoConfig, PpoConfig, RftConfig, SftConfig};
use crate::env::TaskConfig;
use crate::error::{ConfigError, Error, Result};
use crate::eval::{EvalConfig, DISTINCT_THRESHOLD};
use crate::gflownet::GfnConfig;
use crate::policy::{DecodeCfg, DecodeMode, PolicySpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SFT", alias = "sft")]
    Sft,
    #[serde(rename = "RFT", alias = "rft")]
    Rft,
    #[serde(rename = "DPO", alias = "dpo")]
    Dpo,
    #[serde(rename = "PPO", alias = "ppo")]
    Ppo,
    #[serde(rename = "GFLOWNET", alias = "gflownet")]
    Gflownet,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Sft, Method::Rft, Method::Dpo, Method::Ppo, Method::Gflownet];

    pub fn name(self) -> &'static str {
        match self {
            Method::Sft => "SFT",
            Method::Rft => "RFT",
            Method::Dpo => "DPO",
            Method::Ppo => "PPO",
            Method::Gflownet => "GFLOWNET",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Tabular,
    Neural,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Context length in tokens, prompt included.
    pub window: usize,
    /// Std of the random initial logits (tabular).
    pub init_scale: f64,
    pub embed: usize,
    pub hidden: usize,
    pub layers: usize,
    /// Mask the policy with the task grammar.
    pub constrained: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self { kind: PolicyKind::Tabular, window: 3, init_scale: 0.0, embed: 16, hidden: 64, layers: 1, constrained: true }
    }
}

impl PolicyConfig {
    pub fn spec(&self) -> PolicySpec {
        match self.kind {
            PolicyKind::Tabular => PolicySpec::Tabular { window: self.window, init_scale: self.init_scale },
            PolicyKind::Neural => {
                PolicySpec::Neural { window: self.window, embed: self.embed, hidden: self.hidden, layers: self.layers }
            }
        }
    }
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Mandatory by the time a run starts; may come from `--seed`.
    pub seed: Option<u64>,
    /// Seed for problem generation; defaults to `seed`.
    pub data_seed: Option<u64>,
    pub n_problems: usize,
    pub eval_k: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    /// Run SFT first when training another method from a fresh policy.
    pub sft_init: bool,
    pub dataset: Option<PathBuf>,
    /// Policy to start training from, or to evaluate.
    pub checkpoint: Option<PathBuf>,
    pub task: TaskConfig,
    pub policy: PolicyConfig,
    pub sft: SftConfig,
    pub rft: RftConfig,
    pub dpo: DpoConfig,
    pub ppo: PpoConfig,
    pub gflownet: GfnConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::Gflownet,
            seed: None,
            data_seed: None,
            n_problems: 200,
            eval_k: 8,
            temperature: 0.6,
            top_p: 0.9,
            max_new_tokens: 64,
            sft_init: true,
            dataset: None,
            checkpoint: None,
            task: TaskConfig::default(),
            policy: PolicyConfig::default(),
            sft: SftConfig::default(),
            rft: RftConfig::default(),
            dpo: DpoConfig::default(),
            ppo: PpoConfig::default(),
            gflownet: GfnConfig::default(),
        }
    }
}

fn range(name: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Range { name: name.to_string(), message: message.into() }
}

fn section<T>(name: &str, r: Result<T>) -> std::result::Result<(), ConfigError> {
    match r {
        Ok(_) => Ok(()),
        Err(Error::InvalidConfig(m)) => Err(range(name, m)),
        Err(e) => Err(range(name, e.to_string())),
    }
}

impl RunConfig {
    /// Parses the `key = value` format.
    pub fn from_toml_str(text: &str) -> std::result::Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1).unwrap_or(0);
            classify(e.message(), line)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> std::result::Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| classify(&e.to_string(), e.line()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; `.json` files are read as saved run metadata.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)?
        } else {
            Self::from_toml_str(&text)?
        };
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// The run seed, which must be set.
    pub fn require_seed(&self) -> std::result::Result<u64, ConfigError> {
        self.seed.ok_or_else(|| ConfigError::Missing("seed".into()))
    }

    pub fn data_seed(&self) -> std::result::Result<u64, ConfigError> {
        self.data_seed.map_or_else(|| self.require_seed(), Ok)
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(range("temperature", format!("{} must be > 0", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(range("top_p", format!("{} must lie in (0, 1]", self.top_p)));
        }
        if self.eval_k == 0 {
            return Err(range("eval_k", "must be >= 1"));
        }
        if self.n_problems == 0 {
            return Err(range("n_problems", "must be >= 1"));
        }
        if self.max_new_tokens == 0 {
            return Err(range("max_new_tokens", "must be >= 1"));
        }
        section("task", self.task.validate())?;
        let p = &self.policy;
        if p.window == 0 || p.embed == 0 || p.hidden == 0 || p.layers == 0 {
            return Err(range("policy", "window, embed, hidden and layers must be >= 1"));
        }
        if !(p.init_scale >= 0.0 && p.init_scale.is_finite()) {
            return Err(range("policy.init_scale", format!("{} must be >= 0", p.init_scale)));
        }
        if !(self.sft.lr > 0.0) {
            return Err(range("sft.lr", format!("{} must be > 0", self.sft.lr)));
        }
        if self.rft.k == 0 {
            return Err(range("rft.k", "must be >= 1"));
        }
        if !(self.rft.lr > 0.0) {
            return Err(range("rft.lr", format!("{} must be > 0", self.rft.lr)));
        }
        if !(self.dpo.beta > 0.0) {
            return Err(range("dpo.beta", format!("{} must be > 0", self.dpo.beta)));
        }
        if self.dpo.samples_per_problem < 2 {
            return Err(range("dpo.samples_per_problem", "must be >= 2"));
        }
        if !(self.dpo.lr > 0.0) {
            return Err(range("dpo.lr", format!("{} must be > 0", self.dpo.lr)));
        }
        let seed = self.seed.unwrap_or(0);
        section("ppo", self.ppo_cfg(seed).validate())?;
        section("gflownet", self.gfn_cfg(seed).validate())?;
        Ok(())
    }

    pub fn decode(&self, seed: u64) -> DecodeCfg {
        DecodeCfg {
            mode: DecodeMode::Sample,
            temperature: self.temperature,
            top_p: self.top_p,
            max_new_tokens: self.max_new_tokens,
            seed,
        }
    }

    pub fn sft_cfg(&self, seed: u64) -> SftConfig {
        SftConfig { seed, ..self.sft.clone() }
    }

    pub fn rft_cfg(&self, seed: u64) -> RftConfig {
        RftConfig { decode: self.decode(seed), ..self.rft.clone() }
    }

    pub fn dpo_cfg(&self, seed: u64) -> DpoConfig {
        DpoConfig { decode: self.decode(seed), ..self.dpo.clone() }
    }

    pub fn ppo_cfg(&self, seed: u64) -> PpoConfig {
        PpoConfig { decode: self.decode(seed), ..self.ppo.clone() }
    }

    pub fn gfn_cfg(&self, seed: u64) -> GfnConfig {
        GfnConfig { decode: self.decode(seed), ..self.gflownet.clone() }
    }

    pub fn eval_cfg(&self, seed: u64) -> EvalConfig {
        EvalConfig { k: self.eval_k, prepend_greedy: false, threshold: DISTINCT_THRESHOLD, decode: self.decode(seed) }
    }
}

/// Maps a deserializer message to a config error.
fn classify(message: &str, line: usize) -> ConfigError {
    if let Some(rest) = message.strip_prefix("unknown field `").or_else(|| message.split("unknown field `").nth(1)) {
        if let Some(name) = rest.split('`').next() {
            return ConfigError::UnknownKey(name.to_string());
        }
    }
    ConfigError::Parse { line, message: message.trim().to_string() }
}
