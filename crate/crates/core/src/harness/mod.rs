//! Experiment machinery: file loaders, sweep drivers and report emission.
//!
//! Sweeps run against the dilution oracle with synthetic instances, so every
//! report is a pure function of its [`ExperimentSpec`]. The dataset path runs
//! real JSONL records through any backend.

mod config;
mod experiments;
mod io;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use config::{
    BackendKind, BackendSection, Config, CostModelSection, EngineSection, GroupingSection,
    GroupingStrategy, OracleSection,
};
pub use experiments::{
    evaluate_dataset, run_experiment, run_grouping_ablation, run_k_ablation, run_pclsr_sweep,
    synthetic_labels, ExperimentKind, ExperimentSection, ExperimentSpec,
};
pub use io::{
    emit_report, load_dataset, load_labels, load_report_json, load_similarity, parse_labels,
    parse_similarity, render_csv, render_json, DatasetRecord, ReportFormat, UnknownLabelPolicy,
    REPORT_CSV_HEADER,
};

use crate::backends::{BackendError, OracleError};
use crate::engine::EngineError;
use crate::label_space::LabelError;
use crate::prompting::PromptError;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}, line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("line {line}: label {label:?} is not in the label set")]
    UnknownLabel { line: usize, label: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    /// An engine failure stopped the run; `partial` holds the completed rows.
    #[error("run aborted: {source}")]
    Aborted {
        source: EngineError,
        partial: Box<EvalReport>,
    },
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn partial_report(&self) -> Option<&EvalReport> {
        match self {
            Self::Aborted { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Flat,
    Dci,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Flat => "flat",
            Self::Dci => "dci",
        }
    }
}

/// One aggregated configuration. Accuracy is a fraction in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub n: usize,
    /// `None` for the flat baseline.
    pub k: Option<usize>,
    pub method: Method,
    pub grouping: Option<String>,
    pub trials: usize,
    pub accuracy: f64,
    pub mean_calls: f64,
    pub mean_sim_latency_s: f64,
    pub mean_wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub experiment: String,
    /// Truncated SHA-256 of the canonical JSON form of the experiment file.
    pub config_hash: String,
    pub seed: u64,
    pub oracle_seed: u64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Copy with wall-clock means zeroed, for determinism checks.
    pub fn without_wall_clock(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.mean_wall_s = 0.0;
        }
        r
    }

    pub fn find(&self, n: usize, k: Option<usize>, method: Method) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.k == k && r.method == method)
    }
}
