//! Run configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coordination::CoordinationParams;
use crate::influence::PprConfig;
use crate::llm::RetryPolicy;
use crate::opinion::OpinionScale;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("{field}: {msg}")]
    Invalid { field: &'static str, msg: String },
    #[error("unknown {what} {value:?}")]
    Unknown { what: &'static str, value: String },
}

fn invalid(field: &'static str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field, msg: msg.into() }
}

/// Simulation variants: baseline, coordination only, role differentiation
/// only, or both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Full,
    Coordinated,
    Rd,
    Hybrid,
}

impl Mode {
    pub fn coordinated(self) -> bool {
        matches!(self, Mode::Coordinated | Mode::Hybrid)
    }

    /// Whether neighbor aggregation uses PPR weights and tiers.
    pub fn role_differentiated(self) -> bool {
        matches!(self, Mode::Rd | Mode::Hybrid)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::Coordinated => "coordinated",
            Mode::Rd => "rd",
            Mode::Hybrid => "hybrid",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "full" => Ok(Mode::Full),
            "coordinated" => Ok(Mode::Coordinated),
            "rd" => Ok(Mode::Rd),
            "hybrid" => Ok(Mode::Hybrid),
            _ => Err(ConfigError::Unknown { what: "mode", value: s.into() }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorKind {
    Fj,
    Bc,
    Llm,
    MockLlm,
}

impl OperatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OperatorKind::Fj => "fj",
            OperatorKind::Bc => "bc",
            OperatorKind::Llm => "llm",
            OperatorKind::MockLlm => "mock-llm",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OperatorKind {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fj" => Ok(OperatorKind::Fj),
            "bc" => Ok(OperatorKind::Bc),
            "llm" => Ok(OperatorKind::Llm),
            "mock-llm" => Ok(OperatorKind::MockLlm),
            _ => Err(ConfigError::Unknown { what: "operator", value: s.into() }),
        }
    }
}

/// How a representative's update reaches the other unit members.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sharing {
    /// Members move by the representative's opinion change, clamped.
    #[default]
    Delta,
    /// Members take the representative's new opinion.
    Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub model: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    /// Environment variable holding the API base URL.
    pub base_url_env: String,
    /// Environment variable holding the API key.
    pub api_key_env: String,
    /// Used when `base_url_env` is unset.
    pub default_base_url: String,
    pub timeout_secs: u64,
    pub max_concurrency: usize,
    pub requests_per_minute: Option<u32>,
    /// Re-asks after an unparseable answer before falling back to a no-op.
    pub max_parse_retries: usize,
    pub retry: RetryPolicy,
    /// Lets the model re-estimate stubbornness.
    pub update_stubbornness: bool,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            model: "gpt-4o-mini".into(),
            temperature: 0.7,
            max_output_tokens: 256,
            base_url_env: "OPENAI_BASE_URL".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            default_base_url: "https://api.openai.com/v1".into(),
            timeout_secs: 60,
            max_concurrency: 8,
            requests_per_minute: None,
            max_parse_retries: 2,
            retry: RetryPolicy::default(),
            update_stubbornness: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub steps: usize,
    pub seed: u64,
    pub mode: Mode,
    pub operator: OperatorKind,
    pub sharing: Sharing,
    /// Structural similarity threshold for candidate pairs.
    pub gamma: f64,
    /// Consistency threshold for unit membership.
    pub tau: f64,
    /// Decay of consistency with state distance.
    pub lambda: f64,
    /// Weight of global influence in representative selection.
    pub beta: f64,
    pub num_tiers: usize,
    pub ppr: PprConfig,
    /// Hop radius of the built-in structural signature.
    pub max_hop: usize,
    pub bc_epsilon: f64,
    pub buffer_capacity: usize,
    pub scale: OpinionScale,
    pub llm: LlmConfig,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            seed: 0,
            mode: Mode::Full,
            operator: OperatorKind::Fj,
            sharing: Sharing::Delta,
            gamma: 0.95,
            tau: 0.85,
            lambda: 1.0,
            beta: 0.5,
            num_tiers: 2,
            ppr: PprConfig::default(),
            max_hop: crate::embed::DEFAULT_MAX_HOP,
            bc_epsilon: 0.5,
            buffer_capacity: 10,
            scale: OpinionScale::default(),
            llm: LlmConfig::default(),
        }
    }
}

impl SimulationConfig {
    pub fn coordination(&self) -> CoordinationParams {
        CoordinationParams { tau: self.tau, lambda: self.lambda, beta: self.beta }
    }

    /// Checks parameter ranges. `steps = 0` is allowed here (initial state only).
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(-1.0..=1.0).contains(&self.gamma) {
            return Err(invalid("gamma", format!("{} not in [-1, 1]", self.gamma)));
        }
        if !self.tau.is_finite() || self.tau < 0.0 {
            return Err(invalid("tau", format!("{} must be a finite value >= 0", self.tau)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(invalid("lambda", format!("{} must be >= 0", self.lambda)));
        }
        if !self.beta.is_finite() || self.beta < 0.0 {
            return Err(invalid("beta", format!("{} must be >= 0", self.beta)));
        }
        if self.num_tiers < 1 {
            return Err(invalid("num_tiers", "need at least one tier"));
        }
        self.ppr.validate().map_err(|e| invalid("ppr", e.to_string()))?;
        if self.max_hop < 1 {
            return Err(invalid("max_hop", "need at least one hop"));
        }
        if !self.bc_epsilon.is_finite() || self.bc_epsilon < 0.0 {
            return Err(invalid("bc_epsilon", format!("{} must be >= 0", self.bc_epsilon)));
        }
        let llm = &self.llm;
        if !(0.0..=2.0).contains(&llm.temperature) {
            return Err(invalid("llm.temperature", format!("{} not in [0, 2]", llm.temperature)));
        }
        if llm.max_concurrency < 1 {
            return Err(invalid("llm.max_concurrency", "must be >= 1"));
        }
        if llm.timeout_secs < 1 {
            return Err(invalid("llm.timeout_secs", "every request needs a timeout"));
        }
        if llm.max_output_tokens < 1 {
            return Err(invalid("llm.max_output_tokens", "must be >= 1"));
        }
        Ok(())
    }
}
