//! Experiment configuration: one flat document that names every knob.
//!
//! A [`Config`] is a TOML document of dotted keys (`attack.k = 5`,
//! `eval.dictionary_size = 500`) covering the whole pipeline: data paths,
//! surrogate training, attack search, evaluation, and provider connection.
//! Every run starts from [`Config::default`], merges an optional file, then
//! applies `key=value` overrides; the result serializes back deterministically
//! via [`Config::dump`], so the effective configuration can be written
//! alongside every output artifact and overrides round-trip into the dump.
//!
//! Overrides must reference existing keys with values of the existing type —
//! a misspelled key is a usage error, not a silently ignored setting.

use std::fmt;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::AttackConfig;
use crate::harness::ExperimentSpec;
use crate::llmclient::ProviderConfig;
use crate::prompts::{PromptVariant, EBMP_GENERATED_PROMPT, PAMP_GENERATED_PROMPT};
use crate::surrogate::TrainConfig;

/// Errors from loading, overriding, or interpreting a configuration.
#[derive(Debug, Error)]
pub enum ConfigError {
    /// Reading the file failed.
    #[error("config I/O failed: {0}")]
    Io(#[from] std::io::Error),
    /// The document failed to parse or re-assemble.
    #[error("config parse failed: {0}")]
    Parse(String),
    /// An override names a key the configuration does not have.
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    /// An override is not of the form `key=value`.
    #[error("override `{0}` is not of the form key=value")]
    BadOverride(String),
    /// An override value does not fit the key's type.
    #[error("bad value for `{key}`: {reason}")]
    BadValue {
        /// The dotted key.
        key: String,
        /// Parser message.
        reason: String,
    },
    /// A variant name in `eval.variants` is not recognized.
    #[error("unknown prompt variant `{0}` \
             (baseline|abstain|confidence|fsd|invd|ebmp|pamp|invd-generated:TEXT)")]
    UnknownVariant(String),
}

/// Data preparation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Corpus path (newline-delimited snippet records).
    pub corpus: String,
    /// Snippets to synthesize with `prepare-data --synthesize`.
    pub synth_count: usize,
    /// Distinct labels for synthesized corpora.
    pub synth_labels: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            corpus: String::from("data/corpus.jsonl"),
            synth_count: 240,
            synth_labels: 40,
        }
    }
}

/// Surrogate training settings (mirrors [`TrainConfig`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateSection {
    /// Checkpoint path written by `train-surrogate`.
    pub checkpoint: String,
    /// Embedding width.
    pub d: usize,
    /// Hidden width.
    pub h: usize,
    /// Full passes over the corpus.
    pub epochs: usize,
    /// Mini-batch size.
    pub batch_size: usize,
    /// Constant SGD step.
    pub learning_rate: f64,
}

impl Default for SurrogateSection {
    fn default() -> Self {
        let train = TrainConfig::default();
        SurrogateSection {
            checkpoint: String::from("out/surrogate.json"),
            d: train.d,
            h: train.h,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
        }
    }
}

/// Attack search settings (mirrors [`AttackConfig`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// Attack output path written by `gen-attacks`.
    pub records: String,
    /// Perturbation budget `1ᵀz ≤ k`.
    pub k: usize,
    /// Projected-ascent iterations.
    pub iters: usize,
    /// Constant ascent step size.
    pub step: f64,
    /// Randomized-smoothing sample count (0 disables smoothing).
    pub smooth_samples: usize,
    /// Randomized-smoothing noise scale.
    pub smooth_sigma: f64,
    /// Cap on insert sites considered per snippet.
    pub max_insert_slots: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        let attack = AttackConfig::default();
        AttackSection {
            records: String::from("out/attacks.jsonl"),
            k: attack.k,
            iters: attack.iters,
            step: attack.step,
            smooth_samples: attack.smooth_samples,
            smooth_sigma: attack.smooth_sigma,
            max_insert_slots: attack.max_insert_slots,
        }
    }
}

/// Evaluation settings (mirrors [`ExperimentSpec`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Model identifier sent with every request.
    pub model_id: String,
    /// Defense variant names evaluated after the baseline passes.
    pub variants: Vec<String>,
    /// Per-query candidate-dictionary size.
    pub dictionary_size: usize,
    /// Clean demonstration pairs per prompt.
    pub fewshot_clean: usize,
    /// Adversarial demonstration pairs for the few-shot defense.
    pub fewshot_adv: usize,
    /// Whether answer parsing falls back to whole-word label search.
    pub lenient: bool,
    /// Sampling temperature sent with every request.
    pub temperature: f64,
    /// Completion budget sent with every request.
    pub max_tokens: u32,
    /// Records-log path written by `evaluate`.
    pub records: String,
    /// Report rendering: `csv` or `table`.
    pub report_format: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        let spec = ExperimentSpec::default();
        EvalSection {
            model_id: spec.model_id,
            variants: Vec::new(),
            dictionary_size: spec.dictionary_size,
            fewshot_clean: spec.fewshot_clean,
            fewshot_adv: spec.fewshot_adv,
            lenient: spec.lenient_parsing,
            temperature: spec.temperature,
            max_tokens: spec.max_tokens,
            records: String::from("out/records.jsonl"),
            report_format: String::from("table"),
        }
    }
}

/// Provider connection settings (mirrors [`ProviderConfig`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderSection {
    /// Which provider to use: `mock` (local surrogate) or `openai`.
    pub name: String,
    /// Chat-completions endpoint for remote providers.
    pub endpoint: String,
    /// Environment variable holding the API key.
    pub auth_env_var: String,
    /// Transient-failure retries per request.
    pub max_retries: u32,
    /// First backoff delay in milliseconds (doubles per retry).
    pub backoff_ms: u64,
    /// Maximum in-flight requests.
    pub max_parallel: usize,
    /// Response-cache path; empty disables caching.
    pub cache: String,
}

impl Default for ProviderSection {
    fn default() -> Self {
        let provider = ProviderConfig::default();
        ProviderSection {
            name: String::from("mock"),
            endpoint: provider.endpoint,
            auth_env_var: provider.auth_env_var,
            max_retries: provider.max_retries,
            backoff_ms: provider.backoff_base.as_millis() as u64,
            max_parallel: provider.max_parallel,
            cache: String::new(),
        }
    }
}

/// The whole-pipeline configuration document.
///
/// One root seed feeds every stage; each consumer derives its own stream
/// (training shuffles, per-snippet attack seeds, dictionary sampling,
/// demonstration selection) by mixing the seed with a stage tag, so stages
/// never share random streams.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root seed for every seeded stage.
    pub seed: u64,
    /// Data preparation.
    pub data: DataSection,
    /// Surrogate training.
    pub surrogate: SurrogateSection,
    /// Attack search.
    pub attack: AttackSection,
    /// Evaluation.
    pub eval: EvalSection,
    /// Provider connection.
    pub provider: ProviderSection,
}

impl Config {
    /// Parses a TOML config document.
    ///
    /// # Errors
    ///
    /// [`ConfigError::Parse`] on syntax errors or unknown keys.
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    /// Reads and parses a TOML config file.
    ///
    /// # Errors
    ///
    /// [`ConfigError::Io`] and [`ConfigError::Parse`].
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Serializes the effective configuration, deterministically.
    #[must_use]
    pub fn dump(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies one `key=value` override. The dotted key must name an
    /// existing leaf and the value must parse as the leaf's type; list
    /// values are comma-separated.
    ///
    /// # Errors
    ///
    /// [`ConfigError::BadOverride`], [`ConfigError::UnknownKey`], and
    /// [`ConfigError::BadValue`].
    pub fn apply_set(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (key, raw) = spec
            .split_once('=')
            .ok_or_else(|| ConfigError::BadOverride(spec.to_owned()))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::BadOverride(spec.to_owned()));
        }
        let mut tree = toml::Value::try_from(&*self).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut node = &mut tree;
        for segment in key.split('.') {
            node = node
                .as_table_mut()
                .and_then(|t| t.get_mut(segment))
                .ok_or_else(|| ConfigError::UnknownKey(key.to_owned()))?;
        }
        if node.is_table() {
            return Err(ConfigError::UnknownKey(key.to_owned()));
        }
        *node = parse_leaf(node, key, raw)?;
        *self = tree
            .try_into()
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    ///
    /// # Errors
    ///
    /// The first failing override's error.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, specs: &[S]) -> Result<(), ConfigError> {
        for spec in specs {
            self.apply_set(spec.as_ref())?;
        }
        Ok(())
    }

    /// The surrogate training settings as a [`TrainConfig`].
    #[must_use]
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            d: self.surrogate.d,
            h: self.surrogate.h,
            epochs: self.surrogate.epochs,
            batch_size: self.surrogate.batch_size,
            learning_rate: self.surrogate.learning_rate,
            seed: self.seed,
        }
    }

    /// The attack settings as an [`AttackConfig`].
    #[must_use]
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            k: self.attack.k,
            iters: self.attack.iters,
            step: self.attack.step,
            smooth_samples: self.attack.smooth_samples,
            smooth_sigma: self.attack.smooth_sigma,
            max_insert_slots: self.attack.max_insert_slots,
            seed: self.seed,
        }
    }

    /// The provider connection settings as a [`ProviderConfig`].
    #[must_use]
    pub fn provider_config(&self) -> ProviderConfig {
        ProviderConfig {
            endpoint: self.provider.endpoint.clone(),
            auth_env_var: self.provider.auth_env_var.clone(),
            max_retries: self.provider.max_retries,
            backoff_base: Duration::from_millis(self.provider.backoff_ms),
            max_parallel: self.provider.max_parallel,
        }
    }

    /// The evaluation settings as an [`ExperimentSpec`].
    ///
    /// # Errors
    ///
    /// [`ConfigError::UnknownVariant`] for unrecognized variant names.
    pub fn experiment_spec(&self) -> Result<ExperimentSpec, ConfigError> {
        let variants = self
            .eval
            .variants
            .iter()
            .map(|name| parse_variant(name))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ExperimentSpec {
            model_id: self.eval.model_id.clone(),
            variants,
            dictionary_size: self.eval.dictionary_size,
            fewshot_clean: self.eval.fewshot_clean,
            fewshot_adv: self.eval.fewshot_adv,
            lenient_parsing: self.eval.lenient,
            seed: self.seed,
            temperature: self.eval.temperature,
            max_tokens: self.eval.max_tokens,
        })
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dump())
    }
}

/// Parses one override value as the type of the leaf it replaces.
fn parse_leaf(existing: &toml::Value, key: &str, raw: &str) -> Result<toml::Value, ConfigError> {
    use toml::Value;
    let bad = |reason: String| ConfigError::BadValue {
        key: key.to_owned(),
        reason,
    };
    Ok(match existing {
        Value::String(_) => Value::String(raw.to_owned()),
        Value::Integer(_) => Value::Integer(
            raw.trim()
                .parse()
                .map_err(|e| bad(format!("expected an integer: {e}")))?,
        ),
        Value::Float(_) => Value::Float(
            raw.trim()
                .parse()
                .map_err(|e| bad(format!("expected a number: {e}")))?,
        ),
        Value::Boolean(_) => Value::Boolean(
            raw.trim()
                .parse()
                .map_err(|e| bad(format!("expected true or false: {e}")))?,
        ),
        Value::Array(_) => Value::Array(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| Value::String(s.to_owned()))
                .collect(),
        ),
        _ => return Err(bad(String::from("unsupported value type"))),
    })
}

/// Resolves a variant name from `eval.variants`.
///
/// `ebmp` and `pamp` are aliases for the generated-instruction defense with
/// the corresponding stored prompt; `invd-generated:TEXT` supplies an
/// instruction inline.
///
/// # Errors
///
/// [`ConfigError::UnknownVariant`].
pub fn parse_variant(name: &str) -> Result<PromptVariant, ConfigError> {
    if let Some(text) = name.strip_prefix("invd-generated:") {
        return Ok(PromptVariant::InvDGenerated(text.to_owned()));
    }
    match name {
        "baseline" => Ok(PromptVariant::Baseline),
        "abstain" => Ok(PromptVariant::Abstain),
        "confidence" => Ok(PromptVariant::Confidence),
        "fsd" => Ok(PromptVariant::Fsd),
        "invd" => Ok(PromptVariant::InvD),
        "invd-step1" => Ok(PromptVariant::InvDStep1),
        "invd-step2" => Ok(PromptVariant::InvDStep2),
        "ebmp" => Ok(PromptVariant::InvDGenerated(
            EBMP_GENERATED_PROMPT.to_owned(),
        )),
        "pamp" => Ok(PromptVariant::InvDGenerated(
            PAMP_GENERATED_PROMPT.to_owned(),
        )),
        other => Err(ConfigError::UnknownVariant(other.to_owned())),
    }
}
