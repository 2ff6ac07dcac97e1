//! Run configuration.
//!
//! One TOML file holds every run-level knob; command-line flags override
//! individual fields. The LLM bearer token is never part of the config:
//! only the name of the environment variable that holds it is.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::backends::http::{ChatSettings, HttpChat, HttpDetector};
use crate::backends::mock::{
    KeywordDetector, Offline, ScriptMode, ScriptedChat, ScriptedDetector, StatisticalDetector,
};
use crate::backends::{ChatModel, Detector, RetryPolicy};
use crate::collab::{HintMode, StoreMeta};
use crate::corpus::{LabelPolarity, DEFAULT_RATIOS, DEFAULT_SEED};
use crate::dialogue::{PromptTemplate, PromptVariant};
use crate::digest::{canonical_digest, sha256_hex};
use crate::error::{Error, Result};
use crate::eval::Thresholds;
use crate::{SampleId, Verdict};

/// Where a backend lives.
///
/// - `http://...` / `https://...`: the wire protocol
/// - `script:<path>`: scripted replies from a JSONL fixture
/// - `stat:tpr=<f>,fpr=<f>,seed=<n>`: statistical detector (detectors only)
/// - `keyword:<text>`: flags inputs containing `<text>` (detectors only)
/// - `offline`: every call fails as unavailable
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Http(String),
    Script(PathBuf),
    Statistical { tpr: f64, fpr: f64, seed: u64 },
    Keyword(String),
    Offline,
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.starts_with("http://") || s.starts_with("https://") {
            return Ok(BackendSpec::Http(s.to_string()));
        }
        if s == "offline" {
            return Ok(BackendSpec::Offline);
        }
        if let Some(needle) = s.strip_prefix("keyword:") {
            return Ok(BackendSpec::Keyword(needle.to_string()));
        }
        if let Some(path) = s.strip_prefix("script:") {
            return Ok(BackendSpec::Script(PathBuf::from(path)));
        }
        if let Some(params) = s.strip_prefix("stat:") {
            let (mut tpr, mut fpr, mut seed) = (None, None, DEFAULT_SEED);
            for kv in params.split(',').filter(|kv| !kv.is_empty()) {
                let (k, v) = kv.split_once('=').ok_or_else(|| {
                    Error::Config(format!("`{s}`: expected key=value, got `{kv}`"))
                })?;
                let bad = |e: &dyn fmt::Display| Error::Config(format!("`{s}`: {k}: {e}"));
                match k.trim() {
                    "tpr" => tpr = Some(v.trim().parse::<f64>().map_err(|e| bad(&e))?),
                    "fpr" => fpr = Some(v.trim().parse::<f64>().map_err(|e| bad(&e))?),
                    "seed" => seed = v.trim().parse().map_err(|e| bad(&e))?,
                    other => return Err(Error::Config(format!("`{s}`: unknown key `{other}`"))),
                }
            }
            let (tpr, fpr) = tpr
                .zip(fpr)
                .ok_or_else(|| Error::Config(format!("`{s}`: tpr and fpr are required")))?;
            if !(0.0..=1.0).contains(&tpr) || !(0.0..=1.0).contains(&fpr) {
                return Err(Error::Config(format!("`{s}`: rates must lie in [0, 1]")));
            }
            return Ok(BackendSpec::Statistical { tpr, fpr, seed });
        }
        Err(Error::Config(format!(
            "unrecognised backend `{s}` (expected http(s)://, script:<path>, stat:tpr=..,fpr=.., keyword:<text> or offline)"
        )))
    }
}

impl fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BackendSpec::Http(url) => f.write_str(url),
            BackendSpec::Script(p) => write!(f, "script:{}", p.display()),
            BackendSpec::Statistical { tpr, fpr, seed } => {
                write!(f, "stat:tpr={tpr},fpr={fpr},seed={seed}")
            }
            BackendSpec::Keyword(k) => write!(f, "keyword:{k}"),
            BackendSpec::Offline => f.write_str("offline"),
        }
    }
}

impl BackendSpec {
    /// Stable identity for digests. Scripts are identified by content, so
    /// moving a fixture does not invalidate stores built from it.
    pub fn identity(&self) -> Result<String> {
        Ok(match self {
            BackendSpec::Script(p) => {
                let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
                format!("script:sha256:{}", sha256_hex(bytes))
            }
            other => other.to_string(),
        })
    }

    /// Builds a detector. `truths` feeds the statistical mock and is ignored otherwise.
    pub fn detector(
        &self,
        timeout: Duration,
        retry: RetryPolicy,
        truths: Option<&BTreeMap<SampleId, Verdict>>,
    ) -> Result<Box<dyn Detector>> {
        Ok(match self {
            BackendSpec::Http(url) => Box::new(HttpDetector::new(url, timeout, retry)),
            BackendSpec::Script(p) => Box::new(ScriptedDetector::from_file(p)?),
            BackendSpec::Statistical { tpr, fpr, seed } => {
                let truths = truths.ok_or_else(|| {
                    Error::Config("statistical detector needs the labeled corpus".into())
                })?;
                Box::new(StatisticalDetector::new(truths.clone(), *tpr, *fpr, *seed))
            }
            BackendSpec::Keyword(k) => Box::new(KeywordDetector::new(k)),
            BackendSpec::Offline => Box::new(Offline),
        })
    }

    pub fn chat(&self, settings: &ChatSettings, retry: RetryPolicy) -> Result<Box<dyn ChatModel>> {
        Ok(match self {
            BackendSpec::Http(url) => Box::new(HttpChat::new(url, settings.clone(), retry)),
            BackendSpec::Script(p) => Box::new(ScriptedChat::from_file(p, ScriptMode::ByTurn)?),
            BackendSpec::Statistical { .. } | BackendSpec::Keyword(_) => {
                return Err(Error::Config(format!(
                    "`{self}` can only serve as a detector"
                )))
            }
            BackendSpec::Offline => Box::new(Offline),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub polarity: LabelPolarity,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            polarity: LabelPolarity::OneIsVulnerable,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
    pub seed: u64,
    pub manifest: PathBuf,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            ratios: DEFAULT_RATIOS,
            seed: DEFAULT_SEED,
            manifest: PathBuf::from("out/split.json"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub endpoint: Option<String>,
    pub timeout_secs: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_secs: 60.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmConfig {
    pub endpoint: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_secs: f64,
    pub api_key_env: Option<String>,
}

impl Default for LlmConfig {
    fn default() -> Self {
        let s = ChatSettings::default();
        Self {
            endpoint: None,
            model: s.model,
            temperature: s.temperature,
            max_tokens: s.max_tokens,
            timeout_secs: s.timeout_secs,
            api_key_env: s.api_key_env,
        }
    }
}

impl LlmConfig {
    pub fn settings(&self) -> ChatSettings {
        ChatSettings {
            model: self.model.clone(),
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            timeout_secs: self.timeout_secs,
            api_key_env: self.api_key_env.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssessConfig {
    pub hint_mode: HintMode,
    pub variant: PromptVariant,
    pub reask_limit: u32,
    pub concurrency: usize,
    /// Requests per second across all workers; unset means unlimited.
    pub rate_limit: Option<f64>,
    pub failure_threshold: f64,
    pub store: PathBuf,
    /// Template file; the built-in template when unset.
    pub template: Option<PathBuf>,
    /// Expected template version; a mismatch is a configuration error.
    pub template_version: Option<String>,
}

impl Default for AssessConfig {
    fn default() -> Self {
        Self {
            hint_mode: HintMode::Detector,
            variant: PromptVariant::Plain,
            reask_limit: 2,
            concurrency: 8,
            rate_limit: None,
            failure_threshold: 0.05,
            store: PathBuf::from("out/assessments.jsonl"),
            template: None,
            template_version: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    pub out_dir: PathBuf,
    pub drop_verdict: bool,
    /// Tokens the trainer must keep free for the marker line when truncating.
    pub tail_budget: u32,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out/enriched"),
            drop_verdict: false,
            tail_budget: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Trainer executable and leading arguments.
    pub command: Vec<String>,
    pub base_model: String,
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: u32,
    pub max_length: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            command: vec![
                "python3".into(),
                "-m".into(),
                "trainer".into(),
                "finetune".into(),
            ],
            base_model: "microsoft/unixcoder-base".into(),
            epochs: 4,
            learning_rate: 2e-5,
            batch_size: 12,
            max_length: 1024,
            seed: DEFAULT_SEED,
            output_dir: PathBuf::from("out/checkpoint"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: Thresholds,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub split: SplitConfig,
    pub detector: DetectorConfig,
    pub llm: LlmConfig,
    pub validator: DetectorConfig,
    pub assess: AssessConfig,
    pub retry: RetryPolicy,
    pub synthesis: SynthesisConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.assess;
        if a.concurrency == 0 {
            return Err(Error::Config(
                "assess.concurrency must be at least 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&a.failure_threshold) {
            return Err(Error::Config(
                "assess.failure_threshold must lie in [0, 1]".into(),
            ));
        }
        if a.rate_limit.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Config("assess.rate_limit must be positive".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(Error::Config(
                "retry.max_attempts must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Digest over every field, independent of key order in the source file.
    pub fn digest(&self) -> String {
        canonical_digest(self)
    }

    /// Loads the prompt template and checks its version against the config.
    pub fn template(&self) -> Result<PromptTemplate> {
        let tpl = match &self.assess.template {
            Some(p) => PromptTemplate::from_file(p)?,
            None => PromptTemplate::default(),
        };
        match &self.assess.template_version {
            Some(v) if *v != tpl.version => Err(Error::Config(format!(
                "template version is `{}` but the config expects `{v}`",
                tpl.version
            ))),
            _ => Ok(tpl),
        }
    }

    fn spec(endpoint: &Option<String>, what: &str) -> Result<BackendSpec> {
        endpoint
            .as_deref()
            .ok_or_else(|| Error::Config(format!("no {what} endpoint configured")))?
            .parse()
    }

    pub fn detector_spec(&self) -> Result<BackendSpec> {
        Self::spec(&self.detector.endpoint, "detector")
    }

    pub fn llm_spec(&self) -> Result<BackendSpec> {
        Self::spec(&self.llm.endpoint, "llm")
    }

    pub fn validator_spec(&self) -> Result<BackendSpec> {
        Self::spec(&self.validator.endpoint, "validator")
    }

    pub fn build_detector(
        &self,
        truths: Option<&BTreeMap<SampleId, Verdict>>,
    ) -> Result<Box<dyn Detector>> {
        self.detector_spec()?.detector(
            Duration::from_secs_f64(self.detector.timeout_secs),
            self.retry,
            truths,
        )
    }

    pub fn build_llm(&self) -> Result<Box<dyn ChatModel>> {
        self.llm_spec()?.chat(&self.llm.settings(), self.retry)
    }

    pub fn build_validator(
        &self,
        truths: Option<&BTreeMap<SampleId, Verdict>>,
    ) -> Result<Box<dyn Detector>> {
        self.validator_spec()?.detector(
            Duration::from_secs_f64(self.validator.timeout_secs),
            self.retry,
            truths,
        )
    }

    /// Identity of the assessments this config produces.
    pub fn store_identity(&self, template: &PromptTemplate) -> Result<StoreIdentity> {
        Ok(StoreIdentity {
            detector: self.detector_spec()?.identity()?,
            llm: self.llm_spec()?.identity()?,
            model: self.llm.model.clone(),
            temperature: self.llm.temperature,
            max_tokens: self.llm.max_tokens,
            variant: self.assess.variant,
            reask_limit: self.assess.reask_limit,
            seed: self.split.seed,
            template_version: template.version.clone(),
        })
    }
}

/// Everything that determines the contents of an assessment record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreIdentity {
    pub detector: String,
    pub llm: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub variant: PromptVariant,
    pub reask_limit: u32,
    pub seed: u64,
    pub template_version: String,
}

impl StoreIdentity {
    pub fn phase1_digest(&self) -> String {
        canonical_digest(self)
    }

    pub fn config_digest(&self, hint_mode: Option<HintMode>) -> String {
        canonical_digest(&serde_json::json!({ "phase1": self, "hint_mode": hint_mode }))
    }

    pub fn store_meta(&self, hint_mode: Option<HintMode>) -> StoreMeta {
        StoreMeta {
            config_digest: self.config_digest(hint_mode),
            phase1_digest: self.phase1_digest(),
            template_version: self.template_version.clone(),
            hint_mode,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.split.seed, 42);
        assert_eq!(c.split.ratios, [0.8, 0.1, 0.1]);
        assert_eq!(c.assess.concurrency, 8);
        assert_eq!(c.assess.failure_threshold, 0.05);
        assert_eq!(c.synthesis.tail_budget, 256);
        assert_eq!(c.train.epochs, 4);
        assert_eq!(c.train.learning_rate, 2e-5);
        assert_eq!(c.train.batch_size, 12);
        assert_eq!(c.train.max_length, 1024);
        assert_eq!(c.llm.temperature, 0.0);
    }

    #[test]
    fn digest_ignores_field_order() {
        let a = RunConfig::from_toml(
            "[llm]\nmodel = \"m\"\ntemperature = 0.2\n[assess]\nhint_mode = \"none\"\nconcurrency = 3\n",
        )
        .unwrap();
        let b = RunConfig::from_toml(
            "[assess]\nconcurrency = 3\nhint_mode = \"none\"\n[llm]\ntemperature = 0.2\nmodel = \"m\"\n",
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), RunConfig::default().digest());
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.assess.variant = PromptVariant::FewShot {
            vulnerable: 2,
            clean: 1,
        };
        c.eval.thresholds.f1 = Some(0.5);
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert!(c.to_toml().contains("variant = \"fewshot(2,1)\""));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[assess]\nhint = \"none\"\n").is_err());
        assert!(RunConfig::from_toml("api_key = \"x\"\n").is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::from_toml("[assess]\nconcurrency = 0\n").is_err());
        assert!(RunConfig::from_toml("[assess]\nfailure_threshold = 2.0\n").is_err());
        assert!(RunConfig::from_toml("[retry]\nmax_attempts = 0\n").is_err());
    }

    #[test]
    fn backend_specs() {
        assert_eq!(
            "https://x/predict".parse::<BackendSpec>().unwrap(),
            BackendSpec::Http("https://x/predict".into())
        );
        assert_eq!(
            "stat:tpr=0.55,fpr=0.25,seed=7"
                .parse::<BackendSpec>()
                .unwrap(),
            BackendSpec::Statistical {
                tpr: 0.55,
                fpr: 0.25,
                seed: 7
            }
        );
        assert_eq!(
            "stat:tpr=0.5,fpr=0.1".parse::<BackendSpec>().unwrap(),
            BackendSpec::Statistical {
                tpr: 0.5,
                fpr: 0.1,
                seed: 42
            }
        );
        assert!("stat:tpr=1.5,fpr=0".parse::<BackendSpec>().is_err());
        assert!("stat:tpr=0.5".parse::<BackendSpec>().is_err());
        assert!("ftp://x".parse::<BackendSpec>().is_err());
        assert_eq!(
            "offline".parse::<BackendSpec>().unwrap(),
            BackendSpec::Offline
        );
    }

    #[test]
    fn script_identity_is_content_addressed() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        fs::write(&a, "{}\n").unwrap();
        fs::write(&b, "{}\n").unwrap();
        let id = |p: &Path| BackendSpec::Script(p.to_path_buf()).identity().unwrap();
        assert_eq!(id(&a), id(&b));
    }

    #[test]
    fn template_version_pinned() {
        let mut c = RunConfig::default();
        c.assess.template_version = Some("1".into());
        assert!(c.template().is_ok());
        c.assess.template_version = Some("2".into());
        assert!(c.template().is_err());
    }

    #[test]
    fn hint_mode_changes_only_config_digest() {
        let id = StoreIdentity {
            detector: "d".into(),
            llm: "l".into(),
            model: "m".into(),
            temperature: 0.0,
            max_tokens: 10,
            variant: PromptVariant::Plain,
            reask_limit: 2,
            seed: 42,
            template_version: "1".into(),
        };
        let a = id.store_meta(Some(HintMode::Detector));
        let b = id.store_meta(Some(HintMode::None));
        assert_eq!(a.phase1_digest, b.phase1_digest);
        assert_ne!(a.config_digest, b.config_digest);
    }
}
