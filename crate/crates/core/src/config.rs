//! Run configuration resolved from defaults, a flat `key = value` file,
//! environment variables and command-line flags (later layers win).

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use crate::backend::{EndpointConfig, ImageMode};
use crate::curation::CurationOptions;
use crate::data::SamplingPolicy;
use crate::engine::{EngineConfig, FallbackPolicy, ANCHOR_TEMPLATE, ANSWER_TEMPLATE};
use crate::grpo::GrpoConfig;

pub const ENV_API_BASE: &str = "VTAGENT_API_BASE";
pub const ENV_API_KEY: &str = "VTAGENT_API_KEY";
pub const ENV_MODEL: &str = "VTAGENT_MODEL";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("config file {path}: {reason}")]
    File { path: String, reason: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    Invalid {
        key: String,
        value: String,
        reason: String,
    },
    #[error("missing required setting {0}")]
    Missing(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Http,
    Scripted,
    Replay,
}

impl FromStr for BackendKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "http" => Ok(BackendKind::Http),
            "scripted" => Ok(BackendKind::Scripted),
            "replay" => Ok(BackendKind::Replay),
            _ => Err("expected http, scripted or replay".into()),
        }
    }
}

/// Every key with its default. `config show` prints exactly this set.
const DEFAULTS: &[(&str, &str)] = &[
    ("backend", "http"),
    ("api_base", "http://localhost:8000/v1"),
    ("model", "Qwen3-VL-8B-Instruct"),
    ("api_key", ""),
    ("timeout_s", "120"),
    ("image_mode", "data-uri"),
    ("store", ""),
    ("script", ""),
    ("frames", "32"),
    ("cap", "8"),
    ("max_attempts", "5"),
    ("parallelism", "4"),
    ("fallback", "uniform-keyframes"),
    ("anchor_template", ANCHOR_TEMPLATE),
    ("answer_template", ANSWER_TEMPLATE),
    ("max_new_tokens", "512"),
    ("temperature", "0.0"),
    ("curation_temperature", "1.0"),
    ("curation_attempts", "5"),
    ("anls_threshold", "0.5"),
    ("teacher", "Qwen3-VL-32B"),
    ("seed", "0"),
    ("backoff_ms", "250"),
    ("group", "4"),
    ("eps", "0.2"),
    ("lr", "0.1"),
    ("steps", "500"),
    ("envs_per_step", "16"),
    ("toy_frames", "8"),
    ("toy_vocab", "4"),
    ("toy_feature_scale", "2.0"),
    ("tool_reward", "true"),
    ("out_dir", "out"),
];

/// Keys whose values are secrets and are masked by `config show`.
const SECRET_KEYS: &[&str] = &["api_key"];

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Layers {
    values: BTreeMap<String, String>,
}

impl Layers {
    pub fn defaults() -> Self {
        Layers {
            values: DEFAULTS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<(), ConfigError> {
        if !self.values.contains_key(key) {
            return Err(ConfigError::UnknownKey(key.into()));
        }
        self.values.insert(key.into(), value.into());
        Ok(())
    }

    pub fn apply_file_text(&mut self, path: &str, text: &str) -> Result<(), ConfigError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::File {
                path: path.into(),
                reason: format!("line {}: expected key = value", i + 1),
            })?;
            let v = v.trim().trim_matches('"');
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::File {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        self.apply_file_text(&path.display().to_string(), &text)
    }

    pub fn apply_env(&mut self, env: &HashMap<String, String>) {
        for (var, key) in [(ENV_API_BASE, "api_base"), (ENV_API_KEY, "api_key"), (ENV_MODEL, "model")] {
            if let Some(v) = env.get(var).filter(|v| !v.is_empty()) {
                self.values.insert(key.into(), v.clone());
            }
        }
    }

    pub fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or_default()
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.get(key);
        raw.parse().map_err(|e: T::Err| ConfigError::Invalid {
            key: key.into(),
            value: raw.into(),
            reason: e.to_string(),
        })
    }

    fn invalid(&self, key: &str, reason: &str) -> ConfigError {
        ConfigError::Invalid {
            key: key.into(),
            value: self.get(key).into(),
            reason: reason.into(),
        }
    }

    fn opt_path(&self, key: &str) -> Option<PathBuf> {
        let v = self.get(key);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    pub fn dump(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| {
                let shown = if SECRET_KEYS.contains(&k.as_str()) && !v.is_empty() {
                    "***"
                } else {
                    v.as_str()
                };
                format!("{k} = {shown}\n")
            })
            .collect()
    }

    pub fn resolve(&self) -> Result<RunConfig, ConfigError> {
        let backend: BackendKind = self.parse("backend")?;
        let frames: usize = self.parse("frames")?;
        let sampling = if frames == 0 {
            SamplingPolicy::All
        } else {
            SamplingPolicy::Uniform(frames)
        };
        let fallback = match self.get("fallback") {
            "uniform-keyframes" => FallbackPolicy::UniformKeyframes,
            "direct-answer" => FallbackPolicy::DirectAnswer,
            _ => return Err(self.invalid("fallback", "expected uniform-keyframes or direct-answer")),
        };
        let image_mode = match self.get("image_mode") {
            "data-uri" => ImageMode::DataUri,
            "file-url" => ImageMode::FileUrl,
            _ => return Err(self.invalid("image_mode", "expected data-uri or file-url")),
        };
        let engine = EngineConfig {
            keyframe_cap: self.parse("cap")?,
            max_attempts: self.parse("max_attempts")?,
            parallelism: self.parse("parallelism")?,
            anchor_template_id: self.get("anchor_template").into(),
            answer_template_id: self.get("answer_template").into(),
            fallback_policy: fallback,
            max_new_tokens: self.parse("max_new_tokens")?,
            temperature: self.parse("temperature")?,
            seed: self.parse("seed")?,
            backoff_base: Duration::from_millis(self.parse("backoff_ms")?),
        };
        engine
            .validate()
            .map_err(|e| ConfigError::Invalid {
                key: "engine".into(),
                value: String::new(),
                reason: e.to_string(),
            })?;
        let api_key = self.get("api_key");
        let endpoint = EndpointConfig {
            base_url: self.get("api_base").into(),
            model: self.get("model").into(),
            api_key: (!api_key.is_empty()).then(|| api_key.to_string()),
            timeout: Duration::from_secs(self.parse("timeout_s")?),
            image_mode,
        };
        let curation = CurationOptions {
            attempts: self.parse("curation_attempts")?,
            temperature: self.parse("curation_temperature")?,
            anls_threshold: self.parse("anls_threshold")?,
            teacher_id: self.get("teacher").into(),
        };
        if curation.attempts < 1 {
            return Err(self.invalid("curation_attempts", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&curation.anls_threshold) {
            return Err(self.invalid("anls_threshold", "must lie in [0, 1]"));
        }
        let grpo = GrpoConfig {
            steps: self.parse("steps")?,
            group_size: self.parse("group")?,
            envs_per_step: self.parse("envs_per_step")?,
            eps: self.parse("eps")?,
            lr: self.parse("lr")?,
            seed: self.parse("seed")?,
            tool_reward: self.parse("tool_reward")?,
            ..GrpoConfig::default()
        };
        grpo.validate().map_err(|e| ConfigError::Invalid {
            key: "grpo".into(),
            value: String::new(),
            reason: e.to_string(),
        })?;
        let toy_frames: usize = self.parse("toy_frames")?;
        let toy_vocab: usize = self.parse("toy_vocab")?;
        if toy_frames < 1 || toy_vocab < 2 {
            return Err(self.invalid("toy_vocab", "toy env needs at least 1 frame and 2 symbols"));
        }
        let toy_feature_scale: f64 = self.parse("toy_feature_scale")?;
        if !(toy_feature_scale > 0.0 && toy_feature_scale.is_finite()) {
            return Err(self.invalid("toy_feature_scale", "must be positive"));
        }
        Ok(RunConfig {
            backend,
            endpoint,
            store: self.opt_path("store"),
            script: self.opt_path("script"),
            sampling,
            engine,
            curation,
            grpo,
            toy_frames,
            toy_vocab,
            toy_feature_scale,
            anls_threshold: self.parse("anls_threshold")?,
            out_dir: PathBuf::from(self.get("out_dir")),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub endpoint: EndpointConfig,
    pub store: Option<PathBuf>,
    pub script: Option<PathBuf>,
    pub sampling: SamplingPolicy,
    pub engine: EngineConfig,
    pub curation: CurationOptions,
    pub grpo: GrpoConfig,
    pub toy_frames: usize,
    pub toy_vocab: usize,
    pub toy_feature_scale: f64,
    pub anls_threshold: f64,
    pub out_dir: PathBuf,
}
