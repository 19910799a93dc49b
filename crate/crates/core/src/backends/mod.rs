//! Model backends: one image plus one prompt in, raw answer text out.
//!
//! Two implementations ship with the crate: [`HttpBackend`] talks to a
//! chat-completion style endpoint, [`OracleBackend`] is a deterministic
//! softmax simulator used for offline experiments. [`scripted`] holds small
//! fixed-behaviour backends for tests.

use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::label_space::LabelSet;

mod http;
mod oracle;
pub mod scripted;

pub use http::{HttpBackend, HttpConfig, DEFAULT_API_KEY_ENV};
pub use oracle::{oracle_answer, oracle_latency, DilutionOracleParams, OracleBackend, OracleError};

/// Opaque image handle.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRef {
    Path(PathBuf),
    Url(String),
    Bytes { mime: String, data: Vec<u8> },
}

impl ImageRef {
    /// Stable textual identity, used for seeding and trace records.
    pub fn identity(&self) -> String {
        match self {
            Self::Path(p) => format!("path:{}", p.display()),
            Self::Url(u) => format!("url:{u}"),
            Self::Bytes { data, .. } => {
                let digest = Sha256::digest(data);
                let mut hex = String::with_capacity(64);
                for b in digest.iter() {
                    hex.push_str(&format!("{b:02x}"));
                }
                format!("sha256:{hex}")
            }
        }
    }
}

impl fmt::Display for ImageRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.identity())
    }
}

/// One Conquer-phase sub-query. `iteration` and `group_index` are 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct Query {
    pub image: ImageRef,
    pub prompt: String,
    pub group: LabelSet,
    pub iteration: u32,
    pub group_index: u32,
}

impl Query {
    pub fn new(
        image: ImageRef,
        prompt: String,
        group: LabelSet,
        iteration: u32,
        group_index: u32,
    ) -> Result<Self, BackendError> {
        if group.is_empty() {
            return Err(BackendError::InvalidQuery("empty candidate group".into()));
        }
        if iteration == 0 || group_index == 0 {
            return Err(BackendError::InvalidQuery(
                "iteration and group index are 1-based".into(),
            ));
        }
        Ok(Self {
            image,
            prompt,
            group,
            iteration,
            group_index,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResult {
    pub raw_text: String,
    /// Wall-clock seconds for live backends, modelled seconds for the oracle.
    pub latency_s: f64,
    pub token_estimate: u64,
    /// Transport attempts spent, including the successful one.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out after {0:.1} s")]
    Timeout(f64),
    #[error("endpoint returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed endpoint reply: {0}")]
    Malformed(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("giving up after {attempts} attempts: {last}")]
    Exhausted {
        attempts: u32,
        last: Box<BackendError>,
    },
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        match self {
            Self::Timeout(_) | Self::Transport(_) | Self::Malformed(_) => true,
            Self::Status { status, .. } => matches!(status, 408 | 429 | 500..=599),
            _ => false,
        }
    }

    /// The underlying failure, looking through retry exhaustion.
    pub fn root(&self) -> &BackendError {
        match self {
            Self::Exhausted { last, .. } => last.root(),
            other => other,
        }
    }
}

/// Contract shared by every backend. Implementations must tolerate
/// concurrent calls.
pub trait Backend: Send + Sync {
    fn infer(&self, q: &Query) -> Result<BackendResult, BackendError>;
}

impl<B: Backend + ?Sized> Backend for &B {
    fn infer(&self, q: &Query) -> Result<BackendResult, BackendError> {
        (**self).infer(q)
    }
}

impl<B: Backend + ?Sized> Backend for Box<B> {
    fn infer(&self, q: &Query) -> Result<BackendResult, BackendError> {
        (**self).infer(q)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn infer(&self, q: &Query) -> Result<BackendResult, BackendError> {
        (**self).infer(q)
    }
}

/// Rough token count: four bytes per token.
pub(crate) fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}
