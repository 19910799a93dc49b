#![allow(dead_code)]

use std::path::PathBuf;

use dci_core::harness::synthetic_labels;
use dci_core::{dci_classify, DilutionOracleParams, EngineConfig, GroupSize, ImageRef, OracleBackend, RunTrace};

pub const GOLDEN_TRUTH: &str = "class-00042";

pub fn golden_params() -> DilutionOracleParams {
    DilutionOracleParams {
        true_label: GOLDEN_TRUTH.into(),
        signal_boost_delta: 99f64.ln(),
        p_none_when_absent: 0.9,
        miss_rate: 0.0,
        latency_c0: 1.0,
        latency_c2: 1e-6,
        seed: 20_240_917,
    }
}

/// Fixed N = 100, K = 10 oracle run with wall-clock fields zeroed.
pub fn golden_run(parallelism: usize) -> RunTrace {
    let labels = synthetic_labels(100);
    let mut cfg = EngineConfig::new(GroupSize::new(10).unwrap());
    cfg.parallelism = parallelism;
    let backend = OracleBackend::new(golden_params()).unwrap();
    dci_classify(&ImageRef::Path("golden/0".into()), &labels, &cfg, &backend)
        .unwrap()
        .without_wall_clock()
}

pub fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/trace_n100_k10.json")
}
