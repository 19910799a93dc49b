//! Closed-form cost model and information-theoretic bounds.
//!
//! Cost quantities use a per-call latency model `L(k) = c0 + c2 * k^2`.
//! With `c0 = 0, c2 = 1` they reduce to the plain `K^2` attention cost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::label_space::GroupSize;

/// Default fixed cost per call, in seconds.
pub const DEFAULT_C0: f64 = 1.0;
/// Default quadratic coefficient, in seconds per squared candidate.
pub const DEFAULT_C2: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(u64),
    #[error("bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error("beta must be >= 1, got {0}")]
    Beta(f64),
    #[error("i_max must be non-negative, got {0}")]
    InfoCap(f64),
    #[error("{0} must be non-negative")]
    NegativeCost(&'static str),
    #[error("n must be at least 1")]
    EmptyLabelSpace,
    #[error("trials must be at least 1")]
    NoTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogBase {
    #[default]
    Natural,
    Base2,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            Self::Natural => x.ln(),
            Self::Base2 => x.log2(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    /// Label-space size.
    pub k_labels: u64,
    /// Prior dispersion constant: every class prior is at most `beta / k`.
    pub beta: f64,
    /// Information cap of the attention channel, in units of `log_base`.
    pub i_max: f64,
    pub w_bandwidth: f64,
    #[serde(default)]
    pub log_base: LogBase,
}

impl TheoryParams {
    pub fn new(k_labels: u64, beta: f64, i_max: f64) -> Result<Self, AnalysisError> {
        let p = Self {
            k_labels,
            beta,
            i_max,
            w_bandwidth: 1.0,
            log_base: LogBase::Natural,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        if self.k_labels < 2 {
            return Err(AnalysisError::GroupTooSmall(self.k_labels));
        }
        if !(self.beta >= 1.0) {
            return Err(AnalysisError::Beta(self.beta));
        }
        if !(self.i_max >= 0.0) {
            return Err(AnalysisError::InfoCap(self.i_max));
        }
        if !(self.w_bandwidth > 0.0) {
            return Err(AnalysisError::Bandwidth(self.w_bandwidth));
        }
        Ok(())
    }
}

/// Lower bound on label entropy: `log k - log beta`.
pub fn entropy_demand(p: &TheoryParams) -> f64 {
    p.log_base.log(p.k_labels as f64) - p.log_base.log(p.beta)
}

/// Expected signal-to-noise ratio of one candidate's attention weight among
/// `k`: `1 / (k - 1)`.
pub fn attention_snr(k: u64) -> Result<f64, AnalysisError> {
    if k < 2 {
        return Err(AnalysisError::GroupTooSmall(k));
    }
    let d = (k - 1) as f64;
    let r = 1.0 / d;
    // The correctly rounded reciprocal can miss `r * d == 1` by one ulp; the
    // adjacent float then satisfies it.
    Ok([r, r.next_up(), r.next_down()]
        .into_iter()
        .find(|x| x * d == 1.0)
        .unwrap_or(r))
}

/// Capacity of the attention channel in bits: `w * log2(1 + 1/(k - 1))`.
pub fn capacity_bound(w: f64, k: u64) -> Result<f64, AnalysisError> {
    if !(w > 0.0) {
        return Err(AnalysisError::Bandwidth(w));
    }
    let snr = attention_snr(k)?;
    Ok(w * snr.ln_1p() / std::f64::consts::LN_2)
}

/// Fano-style lower bound on flat classification error:
/// `max(0, 1 - (i_max + log(2 beta)) / log k)`.
pub fn fano_error_bound(p: &TheoryParams) -> f64 {
    let b = p.log_base;
    let bound = 1.0 - (p.i_max + b.log(2.0 * p.beta)) / b.log(p.k_labels as f64);
    bound.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DilutionStats {
    pub k: usize,
    pub trials: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Monte Carlo estimate of the softmax weight of a fixed candidate when all
/// `k` logits are drawn i.i.d. from U[0, 1]. Returns the mean and the
/// (population) variance of that weight over `trials` draws.
pub fn dilution_monte_carlo(k: usize, trials: usize, seed: u64) -> Result<DilutionStats, AnalysisError> {
    if trials == 0 {
        return Err(AnalysisError::NoTrials);
    }
    if k <= 1 {
        return Ok(DilutionStats {
            k,
            trials,
            mean: 1.0,
            variance: 0.0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut mean, mut m2) = (0.0, 0.0);
    for n in 1..=trials {
        let own = rng.gen::<f64>().exp();
        let mut total = own;
        for _ in 1..k {
            total += rng.gen::<f64>().exp();
        }
        let alpha = own / total;
        let delta = alpha - mean;
        mean += delta / n as f64;
        m2 += delta * (alpha - mean);
    }
    Ok(DilutionStats {
        k,
        trials,
        mean,
        variance: m2 / trials as f64,
    })
}

/// Smallest `m >= 0` with `k^m >= n`.
pub fn ceil_log(n: u64, k: u64) -> u32 {
    assert!(k >= 2, "ceil_log base must be >= 2");
    let (n, k) = (n as u128, k as u128);
    let mut m = 0;
    let mut p: u128 = 1;
    while p < n {
        p *= k;
        m += 1;
    }
    m
}

/// `log_k n` as a real number, exact when `n` is a power of `k`.
pub fn log_base_k(n: u64, k: u64) -> f64 {
    let m = ceil_log(n, k);
    if (k as u128).pow(m) == n as u128 {
        m as f64
    } else {
        (n as f64).ln() / (k as f64).ln()
    }
}

/// Upper bound on backend calls: `n/(k-1) + ceil(log_k n)`, or 1 when `n <= k`.
pub fn worst_case_calls(n: u64, k: GroupSize) -> f64 {
    let k = k.get() as u64;
    if n <= k {
        return 1.0;
    }
    n as f64 / (k - 1) as f64 + ceil_log(n, k) as f64
}

/// Calls when only the true group answers: `ceil(n/k)`.
pub fn best_case_calls(n: u64, k: GroupSize) -> u64 {
    n.div_ceil(k.get() as u64).max(1)
}

/// Calls when every group answers with a candidate: one per group at every
/// level, `sum_i ceil(n / k^i)` with layered ceilings.
pub fn exact_all_survive_calls(n: u64, k: GroupSize) -> u64 {
    let k = k.get() as u64;
    if n <= k {
        return 1;
    }
    let mut total = 0;
    let mut size = n;
    while size > k {
        size = size.div_ceil(k);
        total += size;
    }
    total + 1
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub n: u64,
    pub k: GroupSize,
    pub c0: f64,
    pub c2: f64,
}

impl CostParams {
    pub fn new(n: u64, k: GroupSize, c0: f64, c2: f64) -> Result<Self, AnalysisError> {
        if n == 0 {
            return Err(AnalysisError::EmptyLabelSpace);
        }
        if !(c0 >= 0.0) {
            return Err(AnalysisError::NegativeCost("c0"));
        }
        if !(c2 >= 0.0) {
            return Err(AnalysisError::NegativeCost("c2"));
        }
        Ok(Self { n, k, c0, c2 })
    }

    /// Per-call cost over `len` candidates.
    pub fn latency(&self, len: u64) -> f64 {
        self.c0 + self.c2 * (len as f64).powi(2)
    }

    fn kk(&self) -> u64 {
        self.k.get() as u64
    }
}

/// Exact unrolling of `T(n) = ceil(n/k) L(k) + T(ceil(n/k))`, `T(n) = L(n)` for `n <= k`.
pub fn cost_recurrence(p: &CostParams) -> f64 {
    let k = p.kk();
    let lk = p.latency(k);
    let mut size = p.n;
    let mut total = 0.0;
    while size > k {
        size = size.div_ceil(k);
        total += size as f64 * lk;
    }
    total + p.latency(size)
}

/// `(n/k + log_k n - 1) * L(k)`; a single flat call `L(n)` when `k >= n`.
pub fn cost_closed_form(p: &CostParams) -> f64 {
    let k = p.kk();
    if k >= p.n {
        return p.latency(p.n);
    }
    (p.n as f64 / k as f64 + log_base_k(p.n, k) - 1.0) * p.latency(k)
}

/// Fully parallel variant: one `L(k)` per level, `log_k n * L(k)`.
pub fn cost_parallel_ideal(p: &CostParams) -> f64 {
    let k = p.kk();
    if k >= p.n {
        return p.latency(p.n);
    }
    log_base_k(p.n, k) * p.latency(k)
}

/// Flat inference over all `n` labels in one call.
pub fn flat_cost(n: u64, c0: f64, c2: f64) -> f64 {
    c0 + c2 * (n as f64).powi(2)
}

/// The group sizes in `ks` whose closed-form cost is strictly below flat
/// inference, in input order.
pub fn advantage_region(
    n: u64,
    ks: impl IntoIterator<Item = GroupSize>,
    c0: f64,
    c2: f64,
) -> Result<Vec<GroupSize>, AnalysisError> {
    let flat = flat_cost(n, c0, c2);
    let mut region = Vec::new();
    for k in ks {
        if cost_closed_form(&CostParams::new(n, k, c0, c2)?) < flat {
            region.push(k);
        }
    }
    Ok(region)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub n: u64,
    pub k: usize,
    pub cost: f64,
    pub flat_cost: f64,
    pub in_region: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub formula: String,
    pub c0: f64,
    pub c2: f64,
    pub rows: Vec<CostRow>,
}

/// Evaluates the closed-form cost over every `(n, k)` pair.
pub fn cost_grid(ns: &[u64], ks: &[GroupSize], c0: f64, c2: f64) -> Result<CostReport, AnalysisError> {
    let mut rows = Vec::with_capacity(ns.len() * ks.len());
    for &n in ns {
        let flat = flat_cost(n, c0, c2);
        for &k in ks {
            let cost = cost_closed_form(&CostParams::new(n, k, c0, c2)?);
            rows.push(CostRow {
                n,
                k: k.get(),
                cost,
                flat_cost: flat,
                in_region: cost < flat,
            });
        }
    }
    Ok(CostReport {
        formula: "(n/k + log_k(n) - 1) * (c0 + c2*k^2)".into(),
        c0,
        c2,
        rows,
    })
}

impl CostReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,k,cost,flat_cost,in_region\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{:.4},{:.4},{}\n",
                r.n, r.k, r.cost, r.flat_cost, r.in_region
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsRow {
    pub k: u64,
    pub entropy_demand: f64,
    pub attention_snr: f64,
    pub capacity_bits: f64,
    pub fano_error_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub beta: f64,
    pub i_max: f64,
    pub w_bandwidth: f64,
    pub log_base: LogBase,
    pub rows: Vec<BoundsRow>,
}

/// Evaluates every bound of `base` at each label-space size in `ks`.
pub fn bounds_grid(base: &TheoryParams, ks: &[u64]) -> Result<BoundsReport, AnalysisError> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let p = TheoryParams { k_labels: k, ..*base };
        p.validate()?;
        rows.push(BoundsRow {
            k,
            entropy_demand: entropy_demand(&p),
            attention_snr: attention_snr(k)?,
            capacity_bits: capacity_bound(p.w_bandwidth, k)?,
            fano_error_bound: fano_error_bound(&p),
        });
    }
    Ok(BoundsReport {
        beta: base.beta,
        i_max: base.i_max,
        w_bandwidth: base.w_bandwidth,
        log_base: base.log_base,
        rows,
    })
}

impl BoundsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,entropy_demand,attention_snr,capacity_bits,fano_error_bound\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                r.k, r.entropy_demand, r.attention_snr, r.capacity_bits, r.fano_error_bound
            ));
        }
        out
    }
}
