//! Fixed-behaviour backends for tests and worst-case accounting.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{Backend, BackendError, BackendResult, Query};
use crate::prompting::NONE_TOKEN;

fn ok(raw: String, latency_s: f64) -> Result<BackendResult, BackendError> {
    Ok(BackendResult {
        raw_text: raw,
        latency_s,
        token_estimate: 0,
        attempts: 1,
    })
}

/// Every group answers with its first candidate, so nothing is ever pruned.
#[derive(Debug, Clone, Copy, Default)]
pub struct AllSurvive {
    pub latency_s: f64,
}

impl Backend for AllSurvive {
    fn infer(&self, q: &Query) -> Result<BackendResult, BackendError> {
        ok(q.group.as_slice()[0].clone(), self.latency_s)
    }
}

/// Every group answers `None`.
#[derive(Debug, Clone, Copy, Default)]
pub struct AlwaysNone {
    pub latency_s: f64,
}

impl Backend for AlwaysNone {
    fn infer(&self, _q: &Query) -> Result<BackendResult, BackendError> {
        ok(NONE_TOKEN.to_owned(), self.latency_s)
    }
}

/// Backend driven by a closure.
pub struct FnBackend<F>(pub F);

impl<F> Backend for FnBackend<F>
where
    F: Fn(&Query) -> Result<BackendResult, BackendError> + Send + Sync,
{
    fn infer(&self, q: &Query) -> Result<BackendResult, BackendError> {
        (self.0)(q)
    }
}

/// Wraps a backend and records every query it sees plus the peak number of
/// concurrent calls.
pub struct Recording<B> {
    inner: B,
    seen: Mutex<Vec<Query>>,
    in_flight: AtomicUsize,
    peak: AtomicUsize,
}

impl<B> Recording<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            seen: Mutex::new(Vec::new()),
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn queries(&self) -> Vec<Query> {
        self.seen.lock().expect("poisoned").clone()
    }

    pub fn peak_in_flight(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for Recording<B> {
    fn infer(&self, q: &Query) -> Result<BackendResult, BackendError> {
        let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
        self.seen.lock().expect("poisoned").push(q.clone());
        let out = self.inner.infer(q);
        self.in_flight.fetch_sub(1, Ordering::SeqCst);
        out
    }
}
