//! Simulated "attention dilution" backend.
//!
//! When the true label is in the group the answer is drawn from a softmax over
//! logits `delta` (true label) and `0` (every distractor), so the true label
//! wins with probability `e^delta / (e^delta + k - 1)`. When it is absent the
//! oracle answers `None` with probability `p_none_when_absent`, otherwise a
//! uniformly chosen distractor.
//!
//! All randomness comes from a ChaCha8 stream seeded by a SHA-256 digest of
//! `(seed, image identity, iteration, group index, sorted group)`, so an
//! answer never depends on the order queries are scheduled in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{estimate_tokens, Backend, BackendError, BackendResult, Query};
use crate::prompting::NONE_TOKEN;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OracleError {
    #[error("{name} must be a probability in [0, 1], got {value}")]
    Probability { name: &'static str, value: f64 },
    #[error("{name} must be non-negative, got {value}")]
    Negative { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DilutionOracleParams {
    pub true_label: String,
    /// Logit advantage of the true label. `f64::INFINITY` makes it always win.
    pub signal_boost_delta: f64,
    pub p_none_when_absent: f64,
    /// Probability of answering `None` even though the true label is present.
    #[serde(default)]
    pub miss_rate: f64,
    pub latency_c0: f64,
    pub latency_c2: f64,
    pub seed: u64,
}

impl DilutionOracleParams {
    pub fn validate(&self) -> Result<(), OracleError> {
        for (name, value) in [
            ("p_none_when_absent", self.p_none_when_absent),
            ("miss_rate", self.miss_rate),
        ] {
            if !(0.0..=1.0).contains(&value) {
                return Err(OracleError::Probability { name, value });
            }
        }
        for (name, value) in [
            ("signal_boost_delta", self.signal_boost_delta),
            ("latency_c0", self.latency_c0),
            ("latency_c2", self.latency_c2),
        ] {
            if value.is_nan() || value < 0.0 {
                return Err(OracleError::Negative { name, value });
            }
        }
        Ok(())
    }

    /// Probability that the true label is returned from a group of `k`
    /// labels containing it.
    pub fn p_true_given_present(&self, k: usize) -> f64 {
        (1.0 - self.miss_rate) * softmax_top(self.signal_boost_delta, k)
    }
}

// e^d / (e^d + k - 1), written to stay finite for large d.
fn softmax_top(delta: f64, k: usize) -> f64 {
    if k <= 1 {
        return 1.0;
    }
    1.0 / (1.0 + (k - 1) as f64 * (-delta).exp())
}

fn query_seed(params: &DilutionOracleParams, q: &Query) -> u64 {
    let mut sorted: Vec<&str> = q.group.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    let mut h = Sha256::new();
    h.update(params.seed.to_le_bytes());
    let image = q.image.identity();
    h.update((image.len() as u64).to_le_bytes());
    h.update(image.as_bytes());
    h.update(q.iteration.to_le_bytes());
    h.update(q.group_index.to_le_bytes());
    for label in sorted {
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
    }
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(first)
}

/// Samples the oracle's answer for `q`.
pub fn oracle_answer(params: &DilutionOracleParams, q: &Query) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(query_seed(params, q));
    let mut distractors: Vec<&str> = q
        .group
        .iter()
        .map(String::as_str)
        .filter(|l| *l != params.true_label)
        .collect();
    distractors.sort_unstable();
    let present = distractors.len() < q.group.len();

    let pick_distractor = |rng: &mut ChaCha8Rng, d: &[&str]| -> String {
        d[rng.gen_range(0..d.len())].to_owned()
    };

    if present {
        if params.miss_rate > 0.0 && rng.gen::<f64>() < params.miss_rate {
            return NONE_TOKEN.to_owned();
        }
        let p_true = softmax_top(params.signal_boost_delta, q.group.len());
        if distractors.is_empty() || rng.gen::<f64>() < p_true {
            params.true_label.clone()
        } else {
            pick_distractor(&mut rng, &distractors)
        }
    } else if rng.gen::<f64>() < params.p_none_when_absent {
        NONE_TOKEN.to_owned()
    } else {
        pick_distractor(&mut rng, &distractors)
    }
}

/// Modelled latency of one call over `k` candidates: `c0 + c2 * k^2`.
pub fn oracle_latency(params: &DilutionOracleParams, k: usize) -> f64 {
    params.latency_c0 + params.latency_c2 * (k as f64).powi(2)
}

#[derive(Debug, Clone)]
pub struct OracleBackend {
    params: DilutionOracleParams,
}

impl OracleBackend {
    pub fn new(params: DilutionOracleParams) -> Result<Self, OracleError> {
        params.validate()?;
        Ok(Self { params })
    }

    pub fn params(&self) -> &DilutionOracleParams {
        &self.params
    }
}

impl Backend for OracleBackend {
    fn infer(&self, q: &Query) -> Result<BackendResult, BackendError> {
        let raw_text = oracle_answer(&self.params, q);
        Ok(BackendResult {
            latency_s: oracle_latency(&self.params, q.group.len()),
            token_estimate: estimate_tokens(&q.prompt) + estimate_tokens(&raw_text),
            raw_text,
            attempts: 1,
        })
    }
}
