use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::io::load_similarity;
use super::HarnessError;
use crate::analysis::{DEFAULT_C0, DEFAULT_C2};
use crate::backends::{Backend, DilutionOracleParams, HttpBackend, HttpConfig, OracleBackend};
use crate::engine::{EngineConfig, Grouping};
use crate::label_space::GroupSize;
use crate::prompting::{ParseMode, ParsePolicy, PromptTemplate};

fn default_k() -> usize {
    10
}
fn one() -> usize {
    1
}
fn default_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineSection {
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "one")]
    pub parallelism: usize,
    #[serde(default)]
    pub parse_mode: ParseMode,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub max_depth_override: Option<usize>,
    /// Text file with a custom prompt layout.
    #[serde(default)]
    pub template_path: Option<PathBuf>,
}

impl Default for EngineSection {
    fn default() -> Self {
        Self {
            k: default_k(),
            parallelism: 1,
            parse_mode: ParseMode::Strict,
            max_retries: default_retries(),
            max_depth_override: None,
            template_path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingStrategy {
    #[default]
    Sequential,
    Random,
    MostSimilar,
    LeastSimilar,
}

impl GroupingStrategy {
    pub const ALL_ABLATION: [GroupingStrategy; 3] =
        [Self::Random, Self::MostSimilar, Self::LeastSimilar];

    pub fn needs_similarity(self) -> bool {
        matches!(self, Self::MostSimilar | Self::LeastSimilar)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupingSection {
    #[serde(default)]
    pub strategy: GroupingStrategy,
    #[serde(default)]
    pub seed: u64,
    /// CSV similarity matrix, required by the similarity strategies.
    #[serde(default)]
    pub similarity_path: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Oracle,
    Http,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSection {
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub http: Option<HttpConfig>,
}

fn default_delta() -> f64 {
    99f64.ln()
}
fn default_p_none() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default = "default_delta")]
    pub signal_boost_delta: f64,
    #[serde(default = "default_p_none")]
    pub p_none_when_absent: f64,
    #[serde(default)]
    pub miss_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            signal_boost_delta: default_delta(),
            p_none_when_absent: default_p_none(),
            miss_rate: 0.0,
            seed: 0,
        }
    }
}

fn default_c0() -> f64 {
    DEFAULT_C0
}
fn default_c2() -> f64 {
    DEFAULT_C2
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModelSection {
    #[serde(default = "default_c0")]
    pub c0: f64,
    #[serde(default = "default_c2")]
    pub c2: f64,
}

impl Default for CostModelSection {
    fn default() -> Self {
        Self {
            c0: DEFAULT_C0,
            c2: DEFAULT_C2,
        }
    }
}

/// Run configuration, read from TOML. Every section is optional.
///
/// ```toml
/// [engine]
/// k = 10
/// parallelism = 8
///
/// [grouping]
/// strategy = "random"
/// seed = 7
///
/// [backend]
/// kind = "http"
/// http = { base_url = "http://localhost:8000/v1", model = "qwen3-vl-8b" }
///
/// [oracle]
/// signal_boost_delta = 4.595
///
/// [cost_model]
/// c0 = 1.0
/// c2 = 1e-6
/// ```
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Config {
    #[serde(default)]
    pub engine: EngineSection,
    #[serde(default)]
    pub grouping: GroupingSection,
    #[serde(default)]
    pub backend: BackendSection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub cost_model: CostModelSection,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
    }

    pub fn parse_policy(&self) -> Result<ParsePolicy, HarnessError> {
        Ok(ParsePolicy::new(self.engine.parse_mode, self.engine.max_retries)?)
    }

    pub fn template(&self) -> Result<PromptTemplate, HarnessError> {
        match &self.engine.template_path {
            None => Ok(PromptTemplate::default()),
            Some(p) => {
                let layout = std::fs::read_to_string(p).map_err(|e| HarnessError::io(p, e))?;
                Ok(PromptTemplate::with_layout(layout)?)
            }
        }
    }

    /// Grouping for `strategy`, reusing `sim` when it is already loaded.
    pub fn grouping_for(
        &self,
        strategy: GroupingStrategy,
        sim: Option<&Arc<crate::label_space::SimilarityMatrix>>,
    ) -> Result<Grouping, HarnessError> {
        let need_sim = || -> Result<Arc<_>, HarnessError> {
            if let Some(s) = sim {
                return Ok(s.clone());
            }
            let path = self.grouping.similarity_path.as_ref().ok_or_else(|| {
                HarnessError::Config("similarity grouping needs grouping.similarity_path".into())
            })?;
            Ok(Arc::new(load_similarity(path)?))
        };
        Ok(match strategy {
            GroupingStrategy::Sequential => Grouping::Sequential,
            GroupingStrategy::Random => Grouping::Random {
                seed: self.grouping.seed,
            },
            GroupingStrategy::MostSimilar => Grouping::MostSimilar(need_sim()?),
            GroupingStrategy::LeastSimilar => Grouping::LeastSimilar(need_sim()?),
        })
    }

    pub fn engine_config(&self) -> Result<EngineConfig, HarnessError> {
        let cfg = EngineConfig {
            k: GroupSize::new(self.engine.k)?,
            grouping: self.grouping_for(self.grouping.strategy, None)?,
            parallelism: self.engine.parallelism,
            parse_policy: self.parse_policy()?,
            max_depth_override: self.engine.max_depth_override,
            template: self.template()?,
        };
        cfg.validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn oracle_params(&self, true_label: &str, seed: u64) -> DilutionOracleParams {
        DilutionOracleParams {
            true_label: true_label.to_owned(),
            signal_boost_delta: self.oracle.signal_boost_delta,
            p_none_when_absent: self.oracle.p_none_when_absent,
            miss_rate: self.oracle.miss_rate,
            latency_c0: self.cost_model.c0,
            latency_c2: self.cost_model.c2,
            seed,
        }
    }

    /// Oracle for a known ground truth.
    pub fn oracle_backend(&self, true_label: &str) -> Result<OracleBackend, HarnessError> {
        Ok(OracleBackend::new(self.oracle_params(true_label, self.oracle.seed))?)
    }

    pub fn http_backend(&self) -> Result<HttpBackend, HarnessError> {
        let cfg = self
            .backend
            .http
            .clone()
            .ok_or_else(|| HarnessError::Config("backend.http section is missing".into()))?;
        Ok(HttpBackend::new(cfg)?)
    }

    /// Live backend as a trait object; the oracle needs a ground truth and is
    /// built per record instead.
    pub fn live_backend(&self) -> Result<Box<dyn Backend>, HarnessError> {
        match self.backend.kind {
            BackendKind::Http => Ok(Box::new(self.http_backend()?)),
            BackendKind::Oracle => Err(HarnessError::Config(
                "the oracle backend needs a ground-truth label per image".into(),
            )),
        }
    }
}
