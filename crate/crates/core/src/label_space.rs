//! Candidate label sets and the partitioning strategies used by the Divide phase.
//!
//! Every strategy returns a [`Partition`] whose groups are pairwise disjoint,
//! cover the source set, number `ceil(n / k)`, and hold exactly `k` labels
//! except possibly the last one. Tie-breaking is lexicographic on the label
//! string throughout.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LabelError {
    #[error("label at position {0} is empty after trimming")]
    EmptyLabel(usize),
    #[error("duplicate label {0:?}")]
    Duplicate(String),
    #[error("group size must be at least 2, got {0}")]
    GroupSizeTooSmall(usize),
    #[error("similarity matrix has {matrix} labels but the label set has {labels}")]
    DimensionMismatch { matrix: usize, labels: usize },
    #[error("label {0:?} is not covered by the similarity matrix")]
    UnknownLabel(String),
    #[error("similarity matrix is malformed: {0}")]
    MalformedMatrix(String),
}

/// Ordered, duplicate-free list of trimmed, non-empty category names.
/// Clones share storage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LabelSet(Arc<[String]>);

impl LabelSet {
    /// Builds a set, rejecting empty strings and duplicates.
    pub fn new<I, S>(labels: I) -> Result<Self, LabelError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        for (i, raw) in labels.into_iter().enumerate() {
            let label = raw.as_ref().trim();
            if label.is_empty() {
                return Err(LabelError::EmptyLabel(i));
            }
            if !seen.insert(label.to_owned()) {
                return Err(LabelError::Duplicate(label.to_owned()));
            }
            out.push(label.to_owned());
        }
        Ok(Self(out.into()))
    }

    /// Builds a set keeping the first occurrence of each label. Blank entries
    /// are skipped. Returns the dropped duplicates alongside the set.
    pub fn dedup_from<I, S>(labels: I) -> (Self, Vec<String>)
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        let mut dropped = Vec::new();
        for raw in labels {
            let label = raw.as_ref().trim();
            if label.is_empty() {
                continue;
            }
            if seen.insert(label.to_owned()) {
                out.push(label.to_owned());
            } else {
                dropped.push(label.to_owned());
            }
        }
        (Self(out.into()), dropped)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, String> {
        self.0.iter()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.0.iter().any(|l| l == label)
    }

    pub fn get(&self, index: usize) -> Option<&str> {
        self.0.get(index).map(String::as_str)
    }

    // Callers guarantee uniqueness; used when slicing an existing set.
    pub(crate) fn from_unique(labels: Vec<String>) -> Self {
        debug_assert_eq!(
            labels.iter().collect::<HashSet<_>>().len(),
            labels.len(),
            "from_unique called with duplicates"
        );
        Self(labels.into())
    }
}

impl TryFrom<Vec<String>> for LabelSet {
    type Error = LabelError;

    fn try_from(value: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<LabelSet> for Vec<String> {
    fn from(value: LabelSet) -> Self {
        value.0.to_vec()
    }
}

impl<'a> IntoIterator for &'a LabelSet {
    type Item = &'a String;
    type IntoIter = std::slice::Iter<'a, String>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}

impl fmt::Display for LabelSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}]", self.0.join(", "))
    }
}

/// Maximum number of candidates per sub-query. Always at least 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct GroupSize(usize);

impl GroupSize {
    pub fn new(k: usize) -> Result<Self, LabelError> {
        if k < 2 {
            return Err(LabelError::GroupSizeTooSmall(k));
        }
        Ok(Self(k))
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl TryFrom<usize> for GroupSize {
    type Error = LabelError;

    fn try_from(value: usize) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<GroupSize> for usize {
    fn from(value: GroupSize) -> Self {
        value.0
    }
}

impl fmt::Display for GroupSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub groups: Vec<LabelSet>,
    pub source_size: usize,
}

impl Partition {
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    /// Checks the partition laws against `source` and `k`.
    pub fn check(&self, source: &LabelSet, k: GroupSize) -> Result<(), String> {
        let k = k.get();
        if self.source_size != source.len() {
            return Err(format!(
                "source_size {} != {}",
                self.source_size,
                source.len()
            ));
        }
        let expected_groups = source.len().div_ceil(k);
        if self.groups.len() != expected_groups {
            return Err(format!(
                "{} groups, expected {expected_groups}",
                self.groups.len()
            ));
        }
        let last = self.groups.len().saturating_sub(1);
        for (i, g) in self.groups.iter().enumerate() {
            if g.is_empty() || g.len() > k {
                return Err(format!("group {i} has size {}", g.len()));
            }
            if i < last && g.len() != k {
                return Err(format!("non-final group {i} has size {} != {k}", g.len()));
            }
        }
        let mut seen = HashSet::new();
        for label in self.groups.iter().flat_map(|g| g.iter()) {
            if !seen.insert(label.as_str()) {
                return Err(format!("label {label:?} appears in two groups"));
            }
            if !source.contains(label) {
                return Err(format!("label {label:?} not in source"));
            }
        }
        if seen.len() != source.len() {
            return Err("groups do not cover the source".into());
        }
        Ok(())
    }
}

/// Splits `c` into consecutive groups of `k`, the last holding the remainder.
pub fn partition_sequential(c: &LabelSet, k: GroupSize) -> Partition {
    let groups = c
        .as_slice()
        .chunks(k.get())
        .map(|chunk| LabelSet::from_unique(chunk.to_vec()))
        .collect();
    Partition {
        groups,
        source_size: c.len(),
    }
}

/// Fisher-Yates shuffle driven by `ChaCha8Rng::seed_from_u64(seed)`, then
/// sequential partitioning.
pub fn group_random(c: &LabelSet, k: GroupSize, seed: u64) -> Partition {
    let mut labels = c.as_slice().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    partition_sequential(&LabelSet::from_unique(labels), k)
}

/// Greedy coherence clustering: the lexicographically smallest unassigned
/// label seeds each group, which is filled with the `k - 1` unassigned labels
/// most similar to the seed.
pub fn group_most_similar(
    c: &LabelSet,
    k: GroupSize,
    sim: &SimilarityMatrix,
) -> Result<Partition, LabelError> {
    let index = sim.index_for(c)?;
    let mut unassigned: Vec<&str> = c.iter().map(String::as_str).collect();
    unassigned.sort_unstable();
    let mut groups = Vec::with_capacity(c.len().div_ceil(k.get()));

    while !unassigned.is_empty() {
        let seed = unassigned.remove(0);
        let si = index[seed];
        let mut ranked: Vec<(usize, f64)> = unassigned
            .iter()
            .enumerate()
            .map(|(pos, l)| (pos, sim.score(si, index[l])))
            .collect();
        // unassigned is sorted, so a stable sort on score keeps lexicographic ties
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        let mut picked: Vec<usize> = ranked
            .iter()
            .take(k.get() - 1)
            .map(|&(pos, _)| pos)
            .collect();

        let mut group = Vec::with_capacity(k.get());
        group.push(seed.to_owned());
        group.extend(picked.iter().map(|&pos| unassigned[pos].to_owned()));
        picked.sort_unstable_by(|a, b| b.cmp(a));
        for pos in picked {
            unassigned.remove(pos);
        }
        groups.push(LabelSet::from_unique(group));
    }

    Ok(Partition {
        groups,
        source_size: c.len(),
    })
}

/// Builds coherent clusters with [`group_most_similar`], then deals their
/// members round-robin across the output groups so each group mixes clusters.
/// Full groups are skipped while dealing, keeping the `k, k, ..., remainder`
/// size profile.
pub fn group_least_similar(
    c: &LabelSet,
    k: GroupSize,
    sim: &SimilarityMatrix,
) -> Result<Partition, LabelError> {
    let clusters = group_most_similar(c, k, sim)?;
    let n = c.len();
    let m = n.div_ceil(k.get());
    if m == 0 {
        return Ok(clusters);
    }
    let mut capacity = vec![k.get(); m];
    capacity[m - 1] = n - (m - 1) * k.get();
    let mut out: Vec<Vec<String>> = capacity.iter().map(|&c| Vec::with_capacity(c)).collect();

    let mut cursor = 0;
    for label in clusters.groups.into_iter().flat_map(Vec::<String>::from) {
        while out[cursor].len() == capacity[cursor] {
            cursor = (cursor + 1) % m;
        }
        out[cursor].push(label);
        cursor = (cursor + 1) % m;
    }

    Ok(Partition {
        groups: out.into_iter().map(LabelSet::from_unique).collect(),
        source_size: n,
    })
}

/// Pairwise label similarity. Square, symmetric, unit diagonal, entries in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    labels: LabelSet,
    scores: Vec<f64>,
    lookup: HashMap<String, usize>,
}

impl SimilarityMatrix {
    pub fn new(labels: LabelSet, rows: Vec<Vec<f64>>) -> Result<Self, LabelError> {
        let n = labels.len();
        if rows.len() != n {
            return Err(LabelError::DimensionMismatch {
                matrix: rows.len(),
                labels: n,
            });
        }
        let mut scores = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(LabelError::MalformedMatrix(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            scores.extend_from_slice(row);
        }
        const TOL: f64 = 1e-9;
        for i in 0..n {
            if (scores[i * n + i] - 1.0).abs() > TOL {
                return Err(LabelError::MalformedMatrix(format!(
                    "diagonal entry {i} is {}",
                    scores[i * n + i]
                )));
            }
            for j in 0..n {
                let v = scores[i * n + j];
                if !v.is_finite() || !(-1.0 - TOL..=1.0 + TOL).contains(&v) {
                    return Err(LabelError::MalformedMatrix(format!(
                        "entry ({i}, {j}) = {v} outside [-1, 1]"
                    )));
                }
                if (v - scores[j * n + i]).abs() > TOL {
                    return Err(LabelError::MalformedMatrix(format!(
                        "entry ({i}, {j}) is not symmetric"
                    )));
                }
            }
        }
        let lookup = labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
        Ok(Self {
            labels,
            scores,
            lookup,
        })
    }

    pub fn identity(labels: LabelSet) -> Self {
        let n = labels.len();
        let rows = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::new(labels, rows).expect("identity matrix is valid")
    }

    pub fn labels(&self) -> &LabelSet {
        &self.labels
    }

    pub fn dim(&self) -> usize {
        self.labels.len()
    }

    fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.dim() + j]
    }

    pub fn get(&self, a: &str, b: &str) -> Option<f64> {
        let i = *self.lookup.get(a)?;
        let j = *self.lookup.get(b)?;
        Some(self.score(i, j))
    }

    /// Sub-matrix over `subset`, in the subset's order.
    pub fn restrict(&self, subset: &LabelSet) -> Result<Self, LabelError> {
        let idx: Vec<usize> = subset
            .iter()
            .map(|l| {
                self.lookup
                    .get(l)
                    .copied()
                    .ok_or_else(|| LabelError::UnknownLabel(l.clone()))
            })
            .collect::<Result<_, _>>()?;
        let rows = idx
            .iter()
            .map(|&i| idx.iter().map(|&j| self.score(i, j)).collect())
            .collect();
        Self::new(subset.clone(), rows)
    }

    // Checks the matrix covers exactly the labels of `c`.
    fn index_for<'a>(&'a self, c: &LabelSet) -> Result<HashMap<&'a str, usize>, LabelError> {
        if c.len() != self.dim() {
            return Err(LabelError::DimensionMismatch {
                matrix: self.dim(),
                labels: c.len(),
            });
        }
        for l in c {
            if !self.lookup.contains_key(l) {
                return Err(LabelError::UnknownLabel(l.clone()));
            }
        }
        Ok(self.lookup.iter().map(|(l, &i)| (l.as_str(), i)).collect())
    }
}

/// Mean over groups of the mean pairwise similarity inside each group.
/// Singleton groups are skipped.
pub fn mean_intra_group_similarity(p: &Partition, sim: &SimilarityMatrix) -> f64 {
    let mut total = 0.0;
    let mut counted = 0usize;
    for g in &p.groups {
        if g.len() < 2 {
            continue;
        }
        let mut s = 0.0;
        let mut pairs = 0usize;
        for (i, a) in g.iter().enumerate() {
            for b in g.iter().skip(i + 1) {
                s += sim.get(a, b).unwrap_or(0.0);
                pairs += 1;
            }
        }
        total += s / pairs as f64;
        counted += 1;
    }
    if counted == 0 {
        0.0
    } else {
        total / counted as f64
    }
}
