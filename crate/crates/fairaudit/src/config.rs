//! Audit configuration: a human-editable TOML file with full command-line
//! override, validated up front so long runs fail before the first request.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{MockBiasProfile, RateDelta};
use crate::datasets::{builtin_spec, DatasetSpec, SampleCount};
use crate::metrics::{EoCombine, FailurePolicy};
use crate::prompt::{LabelDef, TaskKind, TaskShape};
use crate::taxonomy::{InjectionMode, Taxonomy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad config file: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Sample-count setting: a number or "all".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum SampleN {
    N(usize),
    All(&'static str),
}

impl SampleN {
    pub fn to_count(self) -> SampleCount {
        match self {
            SampleN::N(n) => SampleCount::N(n),
            SampleN::All(_) => SampleCount::All,
        }
    }

    pub fn parse(raw: &str) -> Result<Self, ConfigError> {
        if raw.eq_ignore_ascii_case("all") {
            return Ok(SampleN::All("all"));
        }
        raw.parse::<usize>()
            .map(SampleN::N)
            .map_err(|_| ConfigError::Invalid(format!("sample_n must be a number or \"all\", got '{raw}'")))
    }
}

impl<'de> Deserialize<'de> for SampleN {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(usize),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(n) => Ok(SampleN::N(n)),
            Raw::Text(s) => SampleN::parse(&s).map_err(serde::de::Error::custom),
        }
    }
}

impl fmt::Display for SampleN {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SampleN::N(n) => write!(f, "{n}"),
            SampleN::All(_) => write!(f, "all"),
        }
    }
}

/// One dataset to audit: a builtin name plus a data path, or a fully custom
/// task definition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub sample_n: Option<SampleN>,
    /// Task shape, for datasets that are not builtin.
    #[serde(default)]
    pub task: Option<TaskShape>,
    /// Label names, for datasets that are not builtin.
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

/// One model endpoint. The credential is named by environment variable and
/// resolved at request time; it never appears in config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default)]
    pub temperature: Option<f64>,
    #[serde(default)]
    pub max_tokens: Option<u32>,
}

/// Planted-bias settings for the mock backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockConfig {
    #[serde(default = "default_base_tpr")]
    pub base_tpr: f64,
    #[serde(default = "default_base_fpr")]
    pub base_fpr: f64,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub deltas: BTreeMap<String, RateDelta>,
}

fn default_base_tpr() -> f64 {
    0.9
}

fn default_base_fpr() -> f64 {
    0.1
}

impl Default for MockConfig {
    fn default() -> Self {
        MockConfig {
            base_tpr: default_base_tpr(),
            base_fpr: default_base_fpr(),
            seed: None,
            deltas: BTreeMap::new(),
        }
    }
}

impl MockConfig {
    pub fn profile(&self, fallback_seed: u64) -> MockBiasProfile {
        MockBiasProfile {
            base_tpr: self.base_tpr,
            base_fpr: self.base_fpr,
            group_deltas: self.deltas.clone(),
            seed: self.seed.unwrap_or(fallback_seed),
        }
    }
}

/// Per-task-kind exemplar override files for chain-of-thought prompting.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExemplarPaths {
    #[serde(default)]
    pub binary: Option<PathBuf>,
    #[serde(default)]
    pub multiclass: Option<PathBuf>,
    #[serde(default)]
    pub multilabel: Option<PathBuf>,
}

impl ExemplarPaths {
    pub fn for_shape(&self, shape: TaskShape) -> Option<&PathBuf> {
        match shape {
            TaskShape::Binary => self.binary.as_ref(),
            TaskShape::Multiclass => self.multiclass.as_ref(),
            TaskShape::Multilabel => self.multilabel.as_ref(),
        }
    }
}

/// The full audit configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AuditConfig {
    #[serde(rename = "dataset")]
    pub datasets: Vec<DatasetConfig>,
    #[serde(rename = "model")]
    pub models: Vec<ModelConfig>,
    pub strategies: Vec<String>,
    pub taxonomy_override: Option<PathBuf>,
    pub injection_mode: InjectionMode,
    pub eo_combine: EoCombine,
    pub failure_policy: FailurePolicy,
    /// Nonzero exit when the overall parse-failure rate reaches this.
    pub failure_ceiling: f64,
    pub seed: u64,
    pub runs: u32,
    pub max_concurrency: usize,
    pub rate_limit_per_sec: Option<f64>,
    pub cache_dir: Option<PathBuf>,
    pub no_cache: bool,
    pub output_dir: PathBuf,
    pub allow_partial: bool,
    /// Stop issuing backend calls after this many (for drills and tests).
    pub max_requests: Option<u64>,
    pub max_tokens: u32,
    pub rp_persona: String,
    pub exemplars: ExemplarPaths,
    pub templates_dir: Option<PathBuf>,
    pub mock: MockConfig,
    /// Forced on by the mock-audit subcommand.
    pub use_mock: bool,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            datasets: Vec::new(),
            models: Vec::new(),
            strategies: vec!["SP".to_string()],
            taxonomy_override: None,
            injection_mode: InjectionMode::PromptInstruction,
            eo_combine: EoCombine::Mean,
            failure_policy: FailurePolicy::CountAsWrong,
            failure_ceiling: 0.2,
            seed: 42,
            runs: 3,
            max_concurrency: 4,
            rate_limit_per_sec: None,
            cache_dir: None,
            no_cache: false,
            output_dir: PathBuf::from("audit-out"),
            allow_partial: false,
            max_requests: None,
            max_tokens: 512,
            rp_persona: "a doctor".to_string(),
            exemplars: ExemplarPaths::default(),
            templates_dir: None,
            mock: MockConfig::default(),
            use_mock: false,
        }
    }
}

/// Canonical strategy names in run order.
pub fn canonical_strategy(name: &str) -> Option<&'static str> {
    match name.to_ascii_lowercase().as_str() {
        "sp" | "standard" => Some("SP"),
        "cot" | "chain-of-thought" => Some("CoT"),
        "ebr" => Some("EBR"),
        "cc" => Some("CC"),
        "rp" => Some("RP"),
        "fc" => Some("FC"),
        _ => None,
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub dataset: Option<String>,
    pub data_path: Option<PathBuf>,
    pub sample_n: Option<String>,
    pub seed: Option<u64>,
    pub runs: Option<u32>,
    pub model: Option<String>,
    pub endpoint: Option<String>,
    pub api_key_env: Option<String>,
    pub strategies: Option<Vec<String>>,
    pub max_concurrency: Option<usize>,
    pub rate_limit: Option<f64>,
    pub cache_dir: Option<PathBuf>,
    pub no_cache: bool,
    pub output_dir: Option<PathBuf>,
    pub eo_combine: Option<String>,
    pub failure_policy: Option<String>,
    pub allow_partial: bool,
    pub max_requests: Option<u64>,
}

impl AuditConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&raw).map_err(|e| ConfigError::Parse(e.to_string()))
    }

    pub fn apply(&mut self, overrides: &Overrides) -> Result<(), ConfigError> {
        if let Some(name) = &overrides.dataset {
            if !self.datasets.iter().any(|d| d.name.eq_ignore_ascii_case(name)) {
                self.datasets.push(DatasetConfig {
                    name: name.clone(),
                    path: None,
                    sample_n: None,
                    task: None,
                    labels: None,
                });
            }
            let entry = self
                .datasets
                .iter_mut()
                .find(|d| d.name.eq_ignore_ascii_case(name))
                .expect("just inserted");
            if let Some(path) = &overrides.data_path {
                entry.path = Some(path.clone());
            }
            if let Some(raw) = &overrides.sample_n {
                entry.sample_n = Some(SampleN::parse(raw)?);
            }
        } else if overrides.data_path.is_some() || overrides.sample_n.is_some() {
            // Without --dataset the overrides apply to a sole configured one.
            let [entry] = &mut self.datasets[..] else {
                return Err(ConfigError::Invalid(
                    "--data-path/--sample-n need --dataset when multiple datasets are configured"
                        .into(),
                ));
            };
            if let Some(path) = &overrides.data_path {
                entry.path = Some(path.clone());
            }
            if let Some(raw) = &overrides.sample_n {
                entry.sample_n = Some(SampleN::parse(raw)?);
            }
        }

        if let Some(name) = &overrides.model {
            if !self.models.iter().any(|m| m.name == *name) {
                self.models.push(ModelConfig {
                    name: name.clone(),
                    endpoint: None,
                    api_key_env: None,
                    temperature: None,
                    max_tokens: None,
                });
            }
            let entry = self
                .models
                .iter_mut()
                .find(|m| m.name == *name)
                .expect("just inserted");
            if let Some(endpoint) = &overrides.endpoint {
                entry.endpoint = Some(endpoint.clone());
            }
            if let Some(env) = &overrides.api_key_env {
                entry.api_key_env = Some(env.clone());
            }
        } else if let Some(endpoint) = &overrides.endpoint {
            let [entry] = &mut self.models[..] else {
                return Err(ConfigError::Invalid(
                    "--endpoint needs --model when multiple models are configured".into(),
                ));
            };
            entry.endpoint = Some(endpoint.clone());
        }

        if let Some(strategies) = &overrides.strategies {
            self.strategies = strategies.clone();
        }
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(runs) = overrides.runs {
            self.runs = runs;
        }
        if let Some(c) = overrides.max_concurrency {
            self.max_concurrency = c;
        }
        if let Some(r) = overrides.rate_limit {
            self.rate_limit_per_sec = Some(r);
        }
        if let Some(dir) = &overrides.cache_dir {
            self.cache_dir = Some(dir.clone());
        }
        if overrides.no_cache {
            self.no_cache = true;
        }
        if let Some(dir) = &overrides.output_dir {
            self.output_dir = dir.clone();
        }
        if let Some(raw) = &overrides.eo_combine {
            self.eo_combine = match raw.to_ascii_lowercase().as_str() {
                "mean" => EoCombine::Mean,
                "max" => EoCombine::Max,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "--eo-combine must be mean or max, got '{other}'"
                    )))
                }
            };
        }
        if let Some(raw) = &overrides.failure_policy {
            self.failure_policy = match raw.to_ascii_lowercase().replace('-', "_").as_str() {
                "count_as_wrong" => FailurePolicy::CountAsWrong,
                "exclude" => FailurePolicy::Exclude,
                "retry_once" => FailurePolicy::RetryOnce,
                other => {
                    return Err(ConfigError::Invalid(format!(
                        "--failure-policy must be count_as_wrong, exclude, or retry_once, got '{other}'"
                    )))
                }
            };
        }
        if overrides.allow_partial {
            self.allow_partial = true;
        }
        if let Some(n) = overrides.max_requests {
            self.max_requests = Some(n);
        }
        Ok(())
    }

    /// Inserts the implicit mock model when running offline without one.
    pub fn normalized(&self) -> AuditConfig {
        let mut config = self.clone();
        if config.use_mock && config.models.is_empty() {
            config.models.push(ModelConfig {
                name: "mock".to_string(),
                endpoint: None,
                api_key_env: None,
                temperature: None,
                max_tokens: None,
            });
        }
        config
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: String| Err(ConfigError::Invalid(msg));
        if self.datasets.is_empty() {
            return invalid("at least one dataset is required".into());
        }
        if self.models.is_empty() {
            return invalid("at least one model is required".into());
        }
        if self.strategies.is_empty() {
            return invalid("at least one strategy is required".into());
        }
        for name in &self.strategies {
            if canonical_strategy(name).is_none() {
                return invalid(format!(
                    "unknown strategy '{name}' (expected SP, CoT, EBR, CC, RP, or FC)"
                ));
            }
        }
        if self.runs == 0 {
            return invalid("runs must be at least 1".into());
        }
        if self.max_concurrency == 0 {
            return invalid("max_concurrency must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.failure_ceiling) {
            return invalid("failure_ceiling must lie in [0, 1]".into());
        }
        for ds in &self.datasets {
            resolve_dataset(ds)?;
            let path = ds
                .path
                .as_ref()
                .ok_or_else(|| ConfigError::Invalid(format!("dataset '{}' has no path", ds.name)))?;
            if !path.exists() {
                return invalid(format!(
                    "dataset '{}' path does not exist: {}",
                    ds.name,
                    path.display()
                ));
            }
        }
        for model in &self.models {
            if let Some(t) = model.temperature {
                if t < 0.0 {
                    return invalid(format!("model '{}': temperature must be >= 0", model.name));
                }
            }
            if !self.use_mock && model.endpoint.is_none() {
                return invalid(format!(
                    "model '{}' has no endpoint (or run mock-audit)",
                    model.name
                ));
            }
        }
        for path in [
            self.taxonomy_override.as_ref(),
            self.templates_dir.as_ref(),
            self.exemplars.binary.as_ref(),
            self.exemplars.multiclass.as_ref(),
            self.exemplars.multilabel.as_ref(),
        ]
        .into_iter()
        .flatten()
        {
            if !path.exists() {
                return invalid(format!("configured path does not exist: {}", path.display()));
            }
        }
        if self.rp_persona.trim().is_empty() {
            return invalid("rp_persona must be non-empty".into());
        }
        self.mock
            .profile(self.seed)
            .validate()
            .map_err(ConfigError::Invalid)?;
        Ok(())
    }

    /// Digest over everything that affects results (not performance knobs),
    /// embedded in every report for reproducibility.
    pub fn digest(&self, taxonomy: &Taxonomy) -> String {
        #[derive(Serialize)]
        struct View<'a> {
            taxonomy: &'a Taxonomy,
            strategies: Vec<&'static str>,
            eo_combine: EoCombine,
            failure_policy: FailurePolicy,
            injection_mode: InjectionMode,
            seed: u64,
            runs: u32,
            max_tokens: u32,
            rp_persona: &'a str,
            datasets: Vec<(String, String)>,
            models: Vec<(String, f64, u32)>,
            mock: Option<&'a MockConfig>,
        }
        let view = View {
            taxonomy,
            strategies: self
                .strategies
                .iter()
                .filter_map(|s| canonical_strategy(s))
                .collect(),
            eo_combine: self.eo_combine,
            failure_policy: self.failure_policy,
            injection_mode: self.injection_mode,
            seed: self.seed,
            runs: self.runs,
            max_tokens: self.max_tokens,
            rp_persona: &self.rp_persona,
            datasets: self
                .datasets
                .iter()
                .map(|d| {
                    (
                        d.name.clone(),
                        d.sample_n.map(|n| n.to_string()).unwrap_or_default(),
                    )
                })
                .collect(),
            models: self
                .models
                .iter()
                .map(|m| {
                    (
                        m.name.clone(),
                        m.temperature.unwrap_or(0.0),
                        m.max_tokens.unwrap_or(self.max_tokens),
                    )
                })
                .collect(),
            mock: self.use_mock.then_some(&self.mock),
        };
        let encoded = serde_json::to_vec(&view).expect("digest view serializes");
        hex::encode(Sha256::digest(encoded))
    }
}

/// Resolves a dataset entry into a full spec: builtin by name (with path and
/// sample-count overrides) or a custom task definition.
pub fn resolve_dataset(cfg: &DatasetConfig) -> Result<DatasetSpec, ConfigError> {
    let mut spec = match builtin_spec(&cfg.name) {
        Some(builtin) => builtin,
        None => {
            let shape = cfg.task.ok_or_else(|| {
                ConfigError::Invalid(format!(
                    "dataset '{}' is not builtin; set its 'task' and 'labels'",
                    cfg.name
                ))
            })?;
            let labels = cfg.labels.clone().unwrap_or_default();
            let task = TaskKind {
                shape,
                labels: labels.iter().map(|l| LabelDef::new(l)).collect(),
            };
            task.validate()
                .map_err(|e| ConfigError::Invalid(format!("dataset '{}': {e}", cfg.name)))?;
            DatasetSpec {
                name: cfg.name.clone(),
                task,
                source_path: None,
                test_subsample: SampleCount::N(200),
                runs: 3,
                seed: 42,
            }
        }
    };
    if let Some(path) = &cfg.path {
        spec.source_path = Some(path.clone());
    }
    if let Some(n) = cfg.sample_n {
        spec.test_subsample = n.to_count();
    }
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn data_file() -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for i in 0..10 {
            writeln!(
                f,
                r#"{{"id": "s{i}", "text": "post {i}", "label": {}}}"#,
                i % 2
            )
            .unwrap();
        }
        f.flush().unwrap();
        f
    }

    fn minimal_config(data: &Path) -> AuditConfig {
        let mut config = AuditConfig::default();
        config.use_mock = true;
        config.datasets.push(DatasetConfig {
            name: "dreaddit".into(),
            path: Some(data.to_path_buf()),
            sample_n: Some(SampleN::N(5)),
            task: None,
            labels: None,
        });
        config.normalized()
    }

    #[test]
    fn toml_round_trip_with_defaults() {
        let raw = r#"
seed = 7
runs = 1
strategies = ["sp", "fc"]
use_mock = true

[[dataset]]
name = "dreaddit"
path = "/tmp/data.jsonl"
sample_n = "all"

[[model]]
name = "gpt-4"
endpoint = "https://api.openai.com/v1"
api_key_env = "OPENAI_API_KEY"

[mock]
base_tpr = 0.8
base_fpr = 0.2

[mock.deltas.female]
fpr = 0.3
"#;
        let config: AuditConfig = toml::from_str(raw).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.runs, 1);
        assert_eq!(config.datasets.len(), 1);
        assert_eq!(config.datasets[0].sample_n, Some(SampleN::All("all")));
        assert_eq!(config.models[0].api_key_env.as_deref(), Some("OPENAI_API_KEY"));
        assert_eq!(config.mock.deltas["female"].fpr, 0.3);
        assert_eq!(config.mock.deltas["female"].tpr, 0.0);
        assert_eq!(config.failure_ceiling, 0.2);
    }

    #[test]
    fn validation_requires_components() {
        let data = data_file();
        let mut config = minimal_config(data.path());
        config.strategies.clear();
        assert!(matches!(config.validate(), Err(ConfigError::Invalid(_))));

        let mut config = minimal_config(data.path());
        config.strategies = vec!["bogus".into()];
        assert!(config.validate().is_err());

        let mut config = minimal_config(data.path());
        config.datasets.clear();
        assert!(config.validate().is_err());

        let config = minimal_config(data.path());
        config.validate().unwrap();
    }

    #[test]
    fn validation_checks_paths_and_endpoints() {
        let mut config = AuditConfig::default();
        config.datasets.push(DatasetConfig {
            name: "dreaddit".into(),
            path: Some(PathBuf::from("/nonexistent/data.jsonl")),
            sample_n: None,
            task: None,
            labels: None,
        });
        config.models.push(ModelConfig {
            name: "gpt-4".into(),
            endpoint: None,
            api_key_env: None,
            temperature: None,
            max_tokens: None,
        });
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("does not exist"));

        let data = data_file();
        config.datasets[0].path = Some(data.path().to_path_buf());
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("endpoint"));
    }

    #[test]
    fn custom_datasets_resolve_with_task_and_labels() {
        let cfg = DatasetConfig {
            name: "mystudy".into(),
            path: Some(PathBuf::from("x.jsonl")),
            sample_n: Some(SampleN::N(50)),
            task: Some(TaskShape::Multiclass),
            labels: Some(vec!["A".into(), "B".into(), "C".into()]),
        };
        let spec = resolve_dataset(&cfg).unwrap();
        assert_eq!(spec.task.labels.len(), 3);
        assert_eq!(spec.test_subsample, SampleCount::N(50));

        let missing_task = DatasetConfig {
            task: None,
            ..cfg.clone()
        };
        assert!(resolve_dataset(&missing_task).is_err());

        let bad_labels = DatasetConfig {
            labels: Some(vec!["A".into()]),
            ..cfg
        };
        assert!(resolve_dataset(&bad_labels).is_err());
    }

    #[test]
    fn overrides_apply_and_reject_bad_values() {
        let data = data_file();
        let mut config = minimal_config(data.path());
        let overrides = Overrides {
            seed: Some(99),
            runs: Some(2),
            strategies: Some(vec!["sp".into(), "ebr".into()]),
            sample_n: Some("all".into()),
            eo_combine: Some("max".into()),
            no_cache: true,
            ..Overrides::default()
        };
        config.apply(&overrides).unwrap();
        assert_eq!(config.seed, 99);
        assert_eq!(config.runs, 2);
        assert_eq!(config.eo_combine, EoCombine::Max);
        assert!(config.no_cache);
        assert_eq!(config.datasets[0].sample_n, Some(SampleN::All("all")));

        let bad = Overrides {
            eo_combine: Some("median".into()),
            ..Overrides::default()
        };
        assert!(config.apply(&bad).is_err());
    }

    #[test]
    fn digest_changes_with_result_affecting_knobs_only() {
        let data = data_file();
        let config = minimal_config(data.path());
        let taxonomy = crate::taxonomy::build_taxonomy();
        let base = config.digest(&taxonomy);

        let mut reseeded = config.clone();
        reseeded.seed = 1;
        assert_ne!(base, reseeded.digest(&taxonomy));

        let mut rehoused = config.clone();
        rehoused.output_dir = PathBuf::from("elsewhere");
        rehoused.max_concurrency = 32;
        rehoused.cache_dir = Some(PathBuf::from("other-cache"));
        assert_eq!(base, rehoused.digest(&taxonomy));
    }

    #[test]
    fn canonical_strategy_names() {
        assert_eq!(canonical_strategy("sp"), Some("SP"));
        assert_eq!(canonical_strategy("CoT"), Some("CoT"));
        assert_eq!(canonical_strategy("FC"), Some("FC"));
        assert_eq!(canonical_strategy("zzz"), None);
    }
}
