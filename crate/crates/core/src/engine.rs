//! Recursive Divide / Conquer / Combine classification.
//!
//! Each iteration partitions the current candidate set, asks the backend once
//! per group, and keeps only the labels that came back as matches. The loop
//! stops when a single candidate survives, when nothing survives, or after a
//! final direct query once the set fits in one group. Since the survivor set
//! of an iteration is never larger than its group count, an `n`-label input
//! needs at most `max(1, ceil(log_k n))` iterations.

use std::collections::HashSet;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::ceil_log;
use crate::backends::{Backend, BackendError, ImageRef, Query};
use crate::label_space::{
    group_least_similar, group_most_similar, group_random, partition_sequential, GroupSize,
    LabelError, LabelSet, Partition, SimilarityMatrix,
};
use crate::prompting::{build_prompt, parse_response, InferenceOutcome, ParsePolicy, PromptError, PromptTemplate};

pub const TRACE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Grouping {
    Sequential,
    Random { seed: u64 },
    MostSimilar(Arc<SimilarityMatrix>),
    LeastSimilar(Arc<SimilarityMatrix>),
}

impl Grouping {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Sequential => "sequential",
            Self::Random { .. } => "random",
            Self::MostSimilar(_) => "most_similar",
            Self::LeastSimilar(_) => "least_similar",
        }
    }

    pub fn partition(&self, c: &LabelSet, k: GroupSize) -> Result<Partition, LabelError> {
        match self {
            Self::Sequential => Ok(partition_sequential(c, k)),
            Self::Random { seed } => Ok(group_random(c, k, *seed)),
            Self::MostSimilar(sim) => group_most_similar(c, k, &restrict(sim, c)?),
            Self::LeastSimilar(sim) => group_least_similar(c, k, &restrict(sim, c)?),
        }
    }
}

fn restrict(sim: &SimilarityMatrix, c: &LabelSet) -> Result<SimilarityMatrix, LabelError> {
    if sim.labels() == c {
        Ok(sim.clone())
    } else {
        sim.restrict(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub k: GroupSize,
    pub grouping: Grouping,
    pub parallelism: usize,
    pub parse_policy: ParsePolicy,
    pub max_depth_override: Option<usize>,
    pub template: PromptTemplate,
}

impl EngineConfig {
    pub fn new(k: GroupSize) -> Self {
        Self {
            k,
            grouping: Grouping::Sequential,
            parallelism: 1,
            parse_policy: ParsePolicy::default(),
            max_depth_override: None,
            template: PromptTemplate::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.parallelism == 0 {
            return Err(EngineError::Config("parallelism must be at least 1".into()));
        }
        if self.max_depth_override == Some(0) {
            return Err(EngineError::Config("max_depth_override must be at least 1".into()));
        }
        self.template.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "label", rename_all = "snake_case")]
pub enum FinalPrediction {
    Predicted(String),
    NonePrediction,
}

impl FinalPrediction {
    pub fn label(&self) -> Option<&str> {
        match self {
            Self::Predicted(l) => Some(l),
            Self::NonePrediction => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: u32,
    pub input_set: LabelSet,
    pub partition: Partition,
    /// One per group, in group order. Invalid answers that exhausted their
    /// retries are recorded as `NoneAnswer`.
    pub outcomes: Vec<InferenceOutcome>,
    /// Raw text of every attempt, per group.
    pub responses: Vec<Vec<String>>,
    pub survivors: LabelSet,
    pub calls_made: usize,
    pub wall_time_s: f64,
    pub simulated_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub schema_version: u32,
    pub method: String,
    pub image: String,
    pub k: Option<usize>,
    pub iterations: Vec<IterationRecord>,
    #[serde(rename = "final")]
    pub final_prediction: FinalPrediction,
    pub total_calls: usize,
    pub total_wall_s: f64,
    pub total_sim_s: f64,
}

impl RunTrace {
    fn new(method: &str, image: &ImageRef, k: Option<usize>) -> Self {
        Self {
            schema_version: TRACE_SCHEMA_VERSION,
            method: method.into(),
            image: image.identity(),
            k,
            iterations: Vec::new(),
            final_prediction: FinalPrediction::NonePrediction,
            total_calls: 0,
            total_wall_s: 0.0,
            total_sim_s: 0.0,
        }
    }

    fn push(&mut self, rec: IterationRecord) {
        self.total_calls += rec.calls_made;
        self.total_wall_s += rec.wall_time_s;
        self.total_sim_s += rec.simulated_time_s;
        self.iterations.push(rec);
    }

    /// Copy with every wall-clock field zeroed, for byte-level comparisons.
    pub fn without_wall_clock(&self) -> Self {
        let mut t = self.clone();
        t.total_wall_s = 0.0;
        for it in &mut t.iterations {
            it.wall_time_s = 0.0;
        }
        t
    }

    /// Copy with wall-clock and simulated times zeroed. Simulated time depends
    /// on `parallelism`; everything else in a trace must not.
    pub fn without_timing(&self) -> Self {
        let mut t = self.without_wall_clock();
        t.total_sim_s = 0.0;
        for it in &mut t.iterations {
            it.simulated_time_s = 0.0;
        }
        t
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn depth(&self) -> usize {
        self.iterations.len()
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("candidate label set is empty")]
    EmptyLabels,
    #[error("invalid engine configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Partition(#[from] LabelError),
    #[error("recursion exceeded {limit} iterations")]
    MaxDepthExceeded { limit: usize, partial: Box<RunTrace> },
    #[error("backend failed at iteration {iteration}: {source}")]
    Backend {
        iteration: u32,
        source: BackendError,
        partial: Box<RunTrace>,
    },
}

impl EngineError {
    pub fn partial_trace(&self) -> Option<&RunTrace> {
        match self {
            Self::MaxDepthExceeded { partial, .. } | Self::Backend { partial, .. } => Some(partial),
            _ => None,
        }
    }
}

/// Result of querying one group, including prompt-level retries.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub outcome: InferenceOutcome,
    pub responses: Vec<String>,
    pub calls: usize,
    pub latency_s: f64,
}

fn query_group<B: Backend + ?Sized>(
    q: &Query,
    backend: &B,
    policy: &ParsePolicy,
) -> Result<GroupResult, BackendError> {
    let mut responses = Vec::new();
    let mut latency_s = 0.0;
    for attempt in 0..=policy.max_retries() {
        let res = backend.infer(q)?;
        latency_s += res.latency_s;
        let outcome = parse_response(&res.raw_text, &q.group, policy);
        responses.push(res.raw_text);
        match outcome {
            InferenceOutcome::Invalid(_) if attempt < policy.max_retries() => continue,
            InferenceOutcome::Invalid(_) => break,
            outcome => {
                return Ok(GroupResult {
                    outcome,
                    calls: responses.len(),
                    responses,
                    latency_s,
                })
            }
        }
    }
    Ok(GroupResult {
        outcome: InferenceOutcome::NoneAnswer,
        calls: responses.len(),
        responses,
        latency_s,
    })
}

/// Issues every query with at most `parallelism` in flight and returns the
/// results in query order. On failure the remaining queued work is skipped,
/// in-flight calls are allowed to finish, and the error of the lowest failing
/// query index is returned.
pub fn run_parallel_conquer<B: Backend + ?Sized>(
    queries: &[Query],
    parallelism: usize,
    backend: &B,
    policy: &ParsePolicy,
) -> Result<Vec<GroupResult>, BackendError> {
    let parallelism = parallelism.max(1);
    if parallelism == 1 || queries.len() <= 1 {
        return queries
            .iter()
            .map(|q| query_group(q, backend, policy))
            .collect();
    }

    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let slots: Vec<Mutex<Option<Result<GroupResult, BackendError>>>> =
        queries.iter().map(|_| Mutex::new(None)).collect();

    std::thread::scope(|s| {
        for _ in 0..parallelism.min(queries.len()) {
            s.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(q) = queries.get(i) else { break };
                let r = query_group(q, backend, policy);
                if r.is_err() {
                    failed.store(true, Ordering::SeqCst);
                }
                *slots[i].lock().expect("poisoned") = Some(r);
            });
        }
    });

    let results: Vec<_> = slots
        .into_iter()
        .map(|s| s.into_inner().expect("poisoned"))
        .collect();
    if let Some(e) = results.iter().flatten().find_map(|r| r.as_ref().err()) {
        return Err(e.clone());
    }
    // no failure means nothing was skipped
    Ok(results.into_iter().flatten().map(|r| r.expect("checked")).collect())
}

/// Simulated wall time of a level: queries run in waves of `parallelism`
/// in group order, each wave costing its slowest member.
pub fn wave_time(latencies: &[f64], parallelism: usize) -> f64 {
    latencies
        .chunks(parallelism.max(1))
        .map(|w| w.iter().copied().fold(0.0, f64::max))
        .sum()
}

fn make_queries(
    image: &ImageRef,
    partition: &Partition,
    template: &PromptTemplate,
    t: u32,
) -> Result<Vec<Query>, EngineError> {
    partition
        .groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let prompt = build_prompt(template, g)?;
            Ok(Query {
                image: image.clone(),
                prompt,
                group: g.clone(),
                iteration: t,
                group_index: i as u32 + 1,
            })
        })
        .collect()
}

fn survivors_of(outcomes: &[InferenceOutcome]) -> LabelSet {
    let mut seen = HashSet::new();
    let labels: Vec<String> = outcomes
        .iter()
        .filter_map(InferenceOutcome::label)
        .filter(|l| seen.insert(*l))
        .map(str::to_owned)
        .collect();
    LabelSet::new(labels).expect("match labels are non-empty and deduplicated")
}

enum LevelError {
    Build(EngineError),
    Backend(BackendError),
}

#[allow(clippy::too_many_arguments)]
fn run_level<B: Backend + ?Sized>(
    image: &ImageRef,
    input: &LabelSet,
    partition: Partition,
    t: u32,
    parallelism: usize,
    policy: &ParsePolicy,
    template: &PromptTemplate,
    backend: &B,
) -> Result<IterationRecord, LevelError> {
    let queries = make_queries(image, &partition, template, t).map_err(LevelError::Build)?;
    let start = Instant::now();
    let results =
        run_parallel_conquer(&queries, parallelism, backend, policy).map_err(LevelError::Backend)?;
    let wall_time_s = start.elapsed().as_secs_f64();
    let latencies: Vec<f64> = results.iter().map(|r| r.latency_s).collect();
    let outcomes: Vec<InferenceOutcome> = results.iter().map(|r| r.outcome.clone()).collect();
    Ok(IterationRecord {
        t,
        input_set: input.clone(),
        survivors: survivors_of(&outcomes),
        calls_made: results.iter().map(|r| r.calls).sum(),
        responses: results.into_iter().map(|r| r.responses).collect(),
        outcomes,
        partition,
        wall_time_s,
        simulated_time_s: wave_time(&latencies, parallelism),
    })
}

fn abort(trace: &RunTrace, t: u32) -> impl FnOnce(LevelError) -> EngineError + '_ {
    move |e| match e {
        LevelError::Build(e) => e,
        LevelError::Backend(source) => EngineError::Backend {
            iteration: t,
            source,
            partial: Box::new(trace.clone()),
        },
    }
}

/// Divide-and-conquer classification of `image` over `labels`.
pub fn dci_classify<B: Backend + ?Sized>(
    image: &ImageRef,
    labels: &LabelSet,
    cfg: &EngineConfig,
    backend: &B,
) -> Result<RunTrace, EngineError> {
    if labels.is_empty() {
        return Err(EngineError::EmptyLabels);
    }
    cfg.validate()?;
    let k = cfg.k;
    let limit = cfg
        .max_depth_override
        .unwrap_or_else(|| ceil_log(labels.len() as u64, k.get() as u64).max(1) as usize);

    let mut trace = RunTrace::new("dci", image, Some(k.get()));
    let mut current = labels.clone();
    let mut t: u32 = 1;
    loop {
        if trace.iterations.len() >= limit {
            return Err(EngineError::MaxDepthExceeded {
                limit,
                partial: Box::new(trace),
            });
        }
        let base_case = current.len() <= k.get();
        let partition = if base_case {
            Partition {
                groups: vec![current.clone()],
                source_size: current.len(),
            }
        } else {
            cfg.grouping.partition(&current, k)?
        };
        let rec = run_level(
            image,
            &current,
            partition,
            t,
            cfg.parallelism,
            &cfg.parse_policy,
            &cfg.template,
            backend,
        )
        .map_err(abort(&trace, t))?;
        let survivors = rec.survivors.clone();
        trace.push(rec);

        match survivors.len() {
            0 => {
                trace.final_prediction = FinalPrediction::NonePrediction;
                break;
            }
            1 => {
                trace.final_prediction =
                    FinalPrediction::Predicted(survivors.as_slice()[0].clone());
                break;
            }
            // base case queries a single group, so at most one survivor
            _ => {
                debug_assert!(!base_case);
                current = survivors;
                t += 1;
            }
        }
    }
    Ok(trace)
}

/// Baseline: every label in one prompt, one query.
pub fn flat_classify<B: Backend + ?Sized>(
    image: &ImageRef,
    labels: &LabelSet,
    backend: &B,
    policy: &ParsePolicy,
    template: &PromptTemplate,
) -> Result<RunTrace, EngineError> {
    if labels.is_empty() {
        return Err(EngineError::EmptyLabels);
    }
    let mut trace = RunTrace::new("flat", image, None);
    let partition = Partition {
        groups: vec![labels.clone()],
        source_size: labels.len(),
    };
    let rec = run_level(image, labels, partition, 1, 1, policy, template, backend)
        .map_err(abort(&trace, 1))?;
    trace.final_prediction = match rec.survivors.get(0) {
        Some(l) => FinalPrediction::Predicted(l.to_owned()),
        None => FinalPrediction::NonePrediction,
    };
    trace.push(rec);
    Ok(trace)
}
