use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::info;

use super::config::{BackendKind, Config, GroupingStrategy};
use super::io::{load_dataset, load_labels, load_similarity, DatasetRecord, UnknownLabelPolicy};
use super::{EvalReport, EvalRow, HarnessError, Method, REPORT_SCHEMA_VERSION};
use crate::backends::{Backend, ImageRef, OracleBackend};
use crate::engine::{dci_classify, flat_classify, EngineConfig, EngineError, Grouping, RunTrace};
use crate::label_space::{GroupSize, LabelSet, SimilarityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    /// Flat vs DCI accuracy as the label space grows.
    Pclsr,
    /// Fixed N, sweep K, plus the flat baseline.
    KAblation,
    /// Random, most-similar and least-similar grouping at each (N, K).
    GroupingAblation,
    /// Real JSONL records through the configured backend.
    Dataset,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub label_space_sizes: Vec<usize>,
    #[serde(default)]
    pub k_values: Vec<usize>,
    #[serde(default = "one")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Worker threads for independent trials; 0 picks the number of CPUs.
    #[serde(default)]
    pub workers: usize,
    /// Label universe. Synthetic labels are generated when absent.
    #[serde(default)]
    pub labels_path: Option<PathBuf>,
    #[serde(default)]
    pub dataset_path: Option<PathBuf>,
    #[serde(default)]
    pub unknown_labels: UnknownLabelPolicy,
}

/// An experiment file: an `[experiment]` table plus the usual config sections.
///
/// ```toml
/// [experiment]
/// kind = "pclsr"
/// label_space_sizes = [10, 100, 1000]
/// k_values = [10]
/// trials = 10000
/// seed = 42
///
/// [oracle]
/// signal_boost_delta = 4.59512
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub experiment: ExperimentSection,
    #[serde(flatten)]
    pub config: Config,
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let spec: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let e = &self.experiment;
        if e.trials == 0 {
            return Err(HarnessError::Config("trials must be at least 1".into()));
        }
        for &k in &e.k_values {
            GroupSize::new(k)?;
        }
        if e.label_space_sizes.contains(&0) {
            return Err(HarnessError::Config("label space sizes must be positive".into()));
        }
        let needs_sizes = e.kind != ExperimentKind::Dataset;
        if needs_sizes && e.label_space_sizes.is_empty() {
            return Err(HarnessError::Config("label_space_sizes is empty".into()));
        }
        if e.k_values.is_empty() {
            return Err(HarnessError::Config("k_values is empty".into()));
        }
        if needs_sizes && self.config.backend.kind != BackendKind::Oracle {
            return Err(HarnessError::Config(
                "synthetic sweeps require the oracle backend".into(),
            ));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("spec serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    fn empty_report(&self, name: &str) -> EvalReport {
        EvalReport {
            schema_version: REPORT_SCHEMA_VERSION,
            experiment: name.into(),
            config_hash: self.config_hash(),
            seed: self.experiment.seed,
            oracle_seed: self.config.oracle.seed,
            rows: Vec::new(),
        }
    }
}

/// `n` generated labels, `class-00000` onwards.
pub fn synthetic_labels(n: usize) -> LabelSet {
    LabelSet::new((0..n).map(|i| format!("class-{i:05}"))).expect("generated labels are unique")
}

fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

struct Trial {
    image: ImageRef,
    subset: LabelSet,
    truth: String,
    oracle_seed: u64,
}

// Trial `i` at size `n` depends only on the seeds, so every method and K in a
// sweep sees the same instances.
fn make_trial(spec: &ExperimentSpec, universe: &LabelSet, n: usize, i: usize) -> Trial {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.experiment.seed, n as u64, i as u64]));
    let subset = if n == universe.len() {
        universe.clone()
    } else {
        let mut idx = sample(&mut rng, universe.len(), n).into_vec();
        idx.sort_unstable();
        LabelSet::from_unique(idx.into_iter().map(|j| universe.as_slice()[j].clone()).collect())
    };
    let truth = subset.as_slice()[rng.gen_range(0..n)].clone();
    Trial {
        image: ImageRef::Path(format!("synthetic/{n}/{i}").into()),
        subset,
        truth,
        oracle_seed: derive_seed(&[spec.config.oracle.seed, n as u64, i as u64]),
    }
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    correct: bool,
    calls: usize,
    sim_s: f64,
    wall_s: f64,
}

fn outcome(trace: &RunTrace, truth: &str, wall_s: f64) -> Outcome {
    Outcome {
        correct: trace.final_prediction.label() == Some(truth),
        calls: trace.total_calls,
        sim_s: trace.total_sim_s,
        wall_s,
    }
}

#[derive(Clone)]
enum Cell {
    Flat,
    Dci(EngineConfig),
}

impl Cell {
    fn run<B: Backend + ?Sized>(
        &self,
        image: &ImageRef,
        labels: &LabelSet,
        base: &EngineConfig,
        backend: &B,
    ) -> Result<RunTrace, EngineError> {
        match self {
            Cell::Flat => flat_classify(image, labels, backend, &base.parse_policy, &base.template),
            Cell::Dci(cfg) => dci_classify(image, labels, cfg, backend),
        }
    }

    fn method(&self) -> Method {
        match self {
            Cell::Flat => Method::Flat,
            Cell::Dci(_) => Method::Dci,
        }
    }
}

fn aggregate(n: usize, cell: &Cell, outcomes: &[Outcome]) -> EvalRow {
    let t = outcomes.len() as f64;
    let (k, grouping) = match cell {
        Cell::Flat => (None, None),
        Cell::Dci(cfg) => (Some(cfg.k.get()), Some(cfg.grouping.name().to_owned())),
    };
    EvalRow {
        n,
        k,
        method: cell.method(),
        grouping,
        trials: outcomes.len(),
        accuracy: outcomes.iter().filter(|o| o.correct).count() as f64 / t,
        mean_calls: outcomes.iter().map(|o| o.calls as f64).sum::<f64>() / t,
        mean_sim_latency_s: outcomes.iter().map(|o| o.sim_s).sum::<f64>() / t,
        mean_wall_s: outcomes.iter().map(|o| o.wall_s).sum::<f64>() / t,
    }
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, HarnessError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| HarnessError::Config(e.to_string()))
}

struct Runner<'a> {
    spec: &'a ExperimentSpec,
    universe: LabelSet,
    base: EngineConfig,
    pool: rayon::ThreadPool,
    report: EvalReport,
}

impl<'a> Runner<'a> {
    fn new(spec: &'a ExperimentSpec, name: &str, universe: LabelSet) -> Result<Self, HarnessError> {
        spec.validate()?;
        if let Some(&n) = spec
            .experiment
            .label_space_sizes
            .iter()
            .find(|&&n| n > universe.len())
        {
            return Err(HarnessError::Config(format!(
                "label space size {n} exceeds the {} available labels",
                universe.len()
            )));
        }
        let mut base_cfg = spec.config.clone();
        base_cfg.grouping.strategy = GroupingStrategy::Sequential;
        Ok(Self {
            base: base_cfg.engine_config()?,
            universe,
            pool: pool(spec.experiment.workers)?,
            report: spec.empty_report(name),
            spec,
        })
    }

    fn dci_cell(&self, k: usize, grouping: Grouping) -> Result<Cell, HarnessError> {
        Ok(Cell::Dci(EngineConfig {
            k: GroupSize::new(k)?,
            grouping,
            ..self.base.clone()
        }))
    }

    fn run_cell(&mut self, n: usize, cell: &Cell) -> Result<(), HarnessError> {
        let spec = self.spec;
        let universe = &self.universe;
        let base = &self.base;
        let results: Vec<Result<Outcome, EngineError>> = self.pool.install(|| {
            (0..spec.experiment.trials)
                .into_par_iter()
                .map(|i| {
                    let trial = make_trial(spec, universe, n, i);
                    let params = spec.config.oracle_params(&trial.truth, trial.oracle_seed);
                    let backend = OracleBackend::new(params).map_err(|e| {
                        EngineError::Config(format!("oracle parameters: {e}"))
                    })?;
                    let start = Instant::now();
                    let trace = cell.run(&trial.image, &trial.subset, base, &backend)?;
                    Ok(outcome(&trace, &trial.truth, start.elapsed().as_secs_f64()))
                })
                .collect()
        });
        let outcomes = match results.into_iter().collect::<Result<Vec<_>, _>>() {
            Ok(o) => o,
            Err(source) => {
                return Err(HarnessError::Aborted {
                    source,
                    partial: Box::new(self.report.clone()),
                })
            }
        };
        let row = aggregate(n, cell, &outcomes);
        info!(n, k = ?row.k, method = row.method.as_str(), accuracy = row.accuracy, "row done");
        self.report.rows.push(row);
        Ok(())
    }
}

fn universe_for(spec: &ExperimentSpec) -> Result<LabelSet, HarnessError> {
    match &spec.experiment.labels_path {
        Some(p) => load_labels(p),
        None => Ok(synthetic_labels(
            spec.experiment.label_space_sizes.iter().copied().max().unwrap_or(0),
        )),
    }
}

fn base_grouping(spec: &ExperimentSpec) -> Result<Grouping, HarnessError> {
    spec.config.grouping_for(spec.config.grouping.strategy, None)
}

/// Flat and DCI rows for every N, using the first configured K.
pub fn run_pclsr_sweep(spec: &ExperimentSpec) -> Result<EvalReport, HarnessError> {
    let mut r = Runner::new(spec, "pclsr", universe_for(spec)?)?;
    let k = spec.experiment.k_values[0];
    let dci = r.dci_cell(k, base_grouping(spec)?)?;
    for &n in &spec.experiment.label_space_sizes {
        r.run_cell(n, &Cell::Flat)?;
        r.run_cell(n, &dci)?;
    }
    Ok(r.report)
}

/// For each N: the flat baseline, then one DCI row per K.
pub fn run_k_ablation(spec: &ExperimentSpec) -> Result<EvalReport, HarnessError> {
    let mut r = Runner::new(spec, "k_ablation", universe_for(spec)?)?;
    let grouping = base_grouping(spec)?;
    for &n in &spec.experiment.label_space_sizes {
        r.run_cell(n, &Cell::Flat)?;
        for &k in &spec.experiment.k_values {
            let cell = r.dci_cell(k, grouping.clone())?;
            r.run_cell(n, &cell)?;
        }
    }
    Ok(r.report)
}

/// Random, most-similar and least-similar rows at every (N, K). The matrix
/// must cover exactly the label universe; it is checked before any trial runs.
pub fn run_grouping_ablation(
    spec: &ExperimentSpec,
    sim_matrix_path: Option<&std::path::Path>,
) -> Result<EvalReport, HarnessError> {
    let path = sim_matrix_path
        .map(PathBuf::from)
        .or_else(|| spec.config.grouping.similarity_path.clone())
        .ok_or_else(|| HarnessError::Config("grouping ablation needs a similarity matrix".into()))?;
    let sim = Arc::new(load_similarity(&path)?);
    let universe = match &spec.experiment.labels_path {
        Some(p) => {
            let labels = load_labels(p)?;
            check_matrix_covers(&sim, &labels)?;
            labels
        }
        None => sim.labels().clone(),
    };
    let mut r = Runner::new(spec, "grouping_ablation", universe)?;
    for &n in &spec.experiment.label_space_sizes {
        for &k in &spec.experiment.k_values {
            for strategy in GroupingStrategy::ALL_ABLATION {
                let grouping = spec.config.grouping_for(strategy, Some(&sim))?;
                let cell = r.dci_cell(k, grouping)?;
                r.run_cell(n, &cell)?;
            }
        }
    }
    Ok(r.report)
}

fn check_matrix_covers(sim: &SimilarityMatrix, labels: &LabelSet) -> Result<(), HarnessError> {
    if sim.dim() != labels.len() || labels.iter().any(|l| !sim.labels().contains(l)) {
        return Err(HarnessError::Config(format!(
            "similarity matrix covers {} labels, label set has {} (or names differ)",
            sim.dim(),
            labels.len()
        )));
    }
    Ok(())
}

/// Flat and DCI (one row per K) over real records. With the oracle backend
/// each record's label seeds its own oracle; otherwise `backend` is shared.
pub fn evaluate_dataset(
    spec: &ExperimentSpec,
    labels: &LabelSet,
    records: &[DatasetRecord],
    backend: Option<&dyn Backend>,
) -> Result<EvalReport, HarnessError> {
    if labels.is_empty() {
        return Err(HarnessError::Config("label set is empty".into()));
    }
    if backend.is_none() && spec.config.backend.kind != BackendKind::Oracle {
        return Err(HarnessError::Config("no backend supplied".into()));
    }
    let base = spec.config.engine_config()?;
    let pool = pool(spec.experiment.workers)?;
    let mut report = spec.empty_report("dataset");
    let n = labels.len();

    let mut cells = vec![Cell::Flat];
    for &k in &spec.experiment.k_values {
        cells.push(Cell::Dci(EngineConfig {
            k: GroupSize::new(k)?,
            ..base.clone()
        }));
    }
    for cell in &cells {
        let results: Vec<Result<Outcome, EngineError>> = pool.install(|| {
            records
                .par_iter()
                .enumerate()
                .map(|(i, rec)| {
                    let image = rec.image_ref();
                    let start = Instant::now();
                    let trace = match backend {
                        Some(b) => cell.run(&image, labels, &base, b)?,
                        None => {
                            let seed = derive_seed(&[spec.config.oracle.seed, i as u64]);
                            let o = OracleBackend::new(spec.config.oracle_params(&rec.label, seed))
                                .map_err(|e| EngineError::Config(format!("oracle parameters: {e}")))?;
                            cell.run(&image, labels, &base, &o)?
                        }
                    };
                    Ok(outcome(&trace, &rec.label, start.elapsed().as_secs_f64()))
                })
                .collect()
        });
        match results.into_iter().collect::<Result<Vec<_>, _>>() {
            Ok(o) if o.is_empty() => {}
            Ok(o) => report.rows.push(aggregate(n, cell, &o)),
            Err(source) => {
                return Err(HarnessError::Aborted {
                    source,
                    partial: Box::new(report),
                })
            }
        }
    }
    Ok(report)
}

/// Dispatches on the experiment kind. The dataset kind loads its labels and
/// records from the paths in the experiment file.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<EvalReport, HarnessError> {
    spec.validate()?;
    match spec.experiment.kind {
        ExperimentKind::Pclsr => run_pclsr_sweep(spec),
        ExperimentKind::KAblation => run_k_ablation(spec),
        ExperimentKind::GroupingAblation => run_grouping_ablation(spec, None),
        ExperimentKind::Dataset => {
            let e = &spec.experiment;
            let labels_path = e
                .labels_path
                .as_ref()
                .ok_or_else(|| HarnessError::Config("dataset runs need labels_path".into()))?;
            let data_path = e
                .dataset_path
                .as_ref()
                .ok_or_else(|| HarnessError::Config("dataset runs need dataset_path".into()))?;
            let labels = load_labels(labels_path)?;
            let records = load_dataset(data_path, Some(&labels), e.unknown_labels)?;
            match spec.config.backend.kind {
                BackendKind::Oracle => evaluate_dataset(spec, &labels, &records, None),
                BackendKind::Http => {
                    let b = spec.config.http_backend()?;
                    evaluate_dataset(spec, &labels, &records, Some(&b))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{best_case_calls, worst_case_calls};

    fn spec(kind: &str, sizes: &str, ks: &str, trials: usize) -> ExperimentSpec {
        ExperimentSpec::from_toml(&format!(
            "[experiment]\nkind = \"{kind}\"\nlabel_space_sizes = {sizes}\nk_values = {ks}\ntrials = {trials}\nseed = 5\n[oracle]\nseed = 11\n"
        ))
        .unwrap()
    }

    #[test]
    fn spec_validation() {
        assert!(ExperimentSpec::from_toml("[experiment]\nkind = \"pclsr\"\nlabel_space_sizes = [10]\nk_values = [1]").is_err());
        assert!(ExperimentSpec::from_toml("[experiment]\nkind = \"pclsr\"\nlabel_space_sizes = [10]\nk_values = [10]\ntrials = 0").is_err());
        assert!(ExperimentSpec::from_toml("[experiment]\nkind = \"pclsr\"\nk_values = [10]").is_err());
        assert!(ExperimentSpec::from_toml("[experiment]\nkind = \"other\"").is_err());
        let s = spec("pclsr", "[10]", "[10]", 3);
        assert_eq!(s.config_hash().len(), 16);
        let mut t = s.clone();
        t.experiment.seed = 6;
        assert_ne!(s.config_hash(), t.config_hash());
    }

    #[test]
    fn trials_are_deterministic_and_closed_set() {
        let s = spec("pclsr", "[50]", "[10]", 1);
        let u = synthetic_labels(200);
        for i in 0..50 {
            let a = make_trial(&s, &u, 50, i);
            let b = make_trial(&s, &u, 50, i);
            assert_eq!(a.subset, b.subset);
            assert_eq!(a.truth, b.truth);
            assert_eq!(a.subset.len(), 50);
            assert!(a.subset.contains(&a.truth));
        }
        assert_ne!(make_trial(&s, &u, 50, 0).subset, make_trial(&s, &u, 50, 1).subset);
    }

    #[test]
    fn pclsr_rows_and_determinism() {
        let s = spec("pclsr", "[10, 100]", "[10]", 200);
        let a = run_pclsr_sweep(&s).unwrap();
        assert_eq!(a.rows.len(), 4);
        let b = run_pclsr_sweep(&s).unwrap();
        assert_eq!(a.without_wall_clock(), b.without_wall_clock());
        // N = K: both methods issue a single identical query
        let f = a.find(10, None, Method::Flat).unwrap();
        let d = a.find(10, Some(10), Method::Dci).unwrap();
        assert_eq!(f.accuracy, d.accuracy);
        assert_eq!(d.mean_calls, 1.0);
        for row in &a.rows {
            assert!((0.0..=1.0).contains(&row.accuracy));
            assert!(row.mean_calls >= 1.0);
            if let Some(k) = row.k {
                let k = GroupSize::new(k).unwrap();
                assert!(row.mean_calls >= best_case_calls(row.n as u64, k) as f64);
                assert!(row.mean_calls <= worst_case_calls(row.n as u64, k));
            }
        }
    }

    #[test]
    fn k_ablation_has_flat_row_per_n() {
        let s = spec("k_ablation", "[60]", "[2, 5, 10]", 20);
        let r = run_k_ablation(&s).unwrap();
        let methods: Vec<_> = r.rows.iter().map(|r| (r.method, r.k)).collect();
        assert_eq!(
            methods,
            vec![
                (Method::Flat, None),
                (Method::Dci, Some(2)),
                (Method::Dci, Some(5)),
                (Method::Dci, Some(10))
            ]
        );
    }

    #[test]
    fn too_large_n_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.txt");
        std::fs::write(&p, "a\nb\nc\n").unwrap();
        let mut s = spec("pclsr", "[5]", "[2]", 1);
        s.experiment.labels_path = Some(p);
        assert!(matches!(run_pclsr_sweep(&s), Err(HarnessError::Config(_))));
    }

    #[test]
    fn grouping_ablation_checks_matrix_first() {
        let dir = tempfile::tempdir().unwrap();
        let labels = dir.path().join("labels.txt");
        std::fs::write(&labels, "a\nb\nc\n").unwrap();
        let sim = dir.path().join("sim.csv");
        std::fs::write(&sim, "a,b\n1,0.5\n0.5,1\n").unwrap();
        let mut s = spec("grouping_ablation", "[3]", "[2]", 1);
        s.experiment.labels_path = Some(labels);
        assert!(matches!(
            run_grouping_ablation(&s, Some(&sim)),
            Err(HarnessError::Config(_))
        ));
        assert!(matches!(run_grouping_ablation(&s, None), Err(HarnessError::Config(_))));
    }

    #[test]
    fn dataset_with_oracle() {
        let labels = synthetic_labels(30);
        let records: Vec<_> = (0..20)
            .map(|i| DatasetRecord {
                image: format!("img{i}.png"),
                label: labels.as_slice()[i].clone(),
            })
            .collect();
        let mut s = spec("dataset", "[]", "[5]", 1);
        s.config.oracle.signal_boost_delta = f64::INFINITY;
        let r = evaluate_dataset(&s, &labels, &records, None).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert!(r.rows.iter().all(|row| row.accuracy == 1.0 && row.trials == 20));
    }
}
