//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use dci_core::harness::synthetic_labels;
use dci_core::{DilutionOracleParams, LabelSet, OracleBackend, SimilarityMatrix};

/// `n` synthetic labels and an oracle whose answer is the middle one.
pub fn oracle_fixture(n: usize, delta: f64) -> (LabelSet, OracleBackend) {
    let labels = synthetic_labels(n);
    let truth = labels.get(n / 2).expect("n > 0").to_owned();
    let backend = OracleBackend::new(DilutionOracleParams {
        true_label: truth,
        signal_boost_delta: delta,
        p_none_when_absent: 1.0,
        miss_rate: 0.0,
        latency_c0: 1.0,
        latency_c2: 1e-6,
        seed: 1,
    })
    .expect("valid oracle parameters");
    (labels, backend)
}

/// Deterministic pseudo-random symmetric similarity over `labels`.
#[allow(clippy::needless_range_loop)]
pub fn similarity_fixture(labels: &LabelSet) -> Arc<SimilarityMatrix> {
    let n = labels.len();
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let mut next = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };
    let mut rows = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let v = next();
            rows[i][j] = v;
            rows[j][i] = v;
        }
    }
    Arc::new(SimilarityMatrix::new(labels.clone(), rows).expect("square and symmetric"))
}
