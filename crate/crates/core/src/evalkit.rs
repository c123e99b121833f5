//! Retrieval evaluation: global ranking, pairwise reranking, R@K, mAP,
//! precision-recall curves, and recall broken down by view overlap.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::model::ModelError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("query {0:?} is not in the index")]
    UnknownQuery(String),
    #[error("image {0:?} has no local features loaded")]
    MissingFeatures(String),
    #[error("no queries to evaluate")]
    EmptyQuerySet,
    #[error("query {0:?} has no positives")]
    NoPositives(String),
    #[error("duplicate image id {0:?}")]
    DuplicateId(String),
    #[error("descriptor of {0:?} is not finite")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Arithmetic mean of the local features over all cells.
pub fn global_descriptor<T: Scalar>(features: &Matrix<T>) -> Vec<T> {
    let n = T::from_usize_lossy(features.rows().max(1));
    let mut out = vec![T::zero(); features.cols()];
    for r in 0..features.rows() {
        for (o, &v) in out.iter_mut().zip(features.row(r)) {
            *o = *o + v;
        }
    }
    out.iter_mut().for_each(|v| *v = *v / n);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry<T> {
    pub image_id: String,
    pub instance_id: u64,
    pub descriptor: Vec<T>,
    pub features: Option<Arc<Matrix<T>>>,
    pub overlaps: Option<BTreeMap<String, f64>>,
}

impl<T: Scalar> IndexEntry<T> {
    /// Entry whose descriptor is the mean of `features`.
    pub fn from_features(image_id: impl Into<String>, instance_id: u64, features: Matrix<T>) -> Self {
        Self {
            image_id: image_id.into(),
            instance_id,
            descriptor: global_descriptor(&features),
            features: Some(Arc::new(features)),
            overlaps: None,
        }
    }
}

/// Image database. Entries are kept sorted by id, so insertion order never
/// affects results.
#[derive(Debug, Clone, Default)]
pub struct RetrievalIndex<T> {
    entries: Vec<IndexEntry<T>>,
    by_id: HashMap<String, usize>,
}

impl<T: Scalar> RetrievalIndex<T> {
    pub fn new(mut entries: Vec<IndexEntry<T>>) -> Result<Self, EvalError> {
        entries.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let mut by_id = HashMap::with_capacity(entries.len());
        for (k, e) in entries.iter().enumerate() {
            if !e.descriptor.iter().all(|v| v.is_finite()) {
                return Err(EvalError::NonFinite(e.image_id.clone()));
            }
            if by_id.insert(e.image_id.clone(), k).is_some() {
                return Err(EvalError::DuplicateId(e.image_id.clone()));
            }
        }
        Ok(Self { entries, by_id })
    }

    pub fn entries(&self) -> &[IndexEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&IndexEntry<T>> {
        self.by_id.get(id).map(|&k| &self.entries[k])
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Other images of the same instance.
    pub fn ground_truth(&self) -> GroundTruth {
        let mut by_instance: BTreeMap<u64, Vec<&str>> = BTreeMap::new();
        for e in &self.entries {
            by_instance.entry(e.instance_id).or_default().push(&e.image_id);
        }
        let mut positives = HashMap::new();
        for e in &self.entries {
            let set = by_instance[&e.instance_id].iter().filter(|&&id| id != e.image_id).map(|s| s.to_string()).collect();
            positives.insert(e.image_id.clone(), set);
        }
        GroundTruth { positives }
    }

    /// Mean overlap score of the query with its positives that carry one.
    pub fn query_overlap(&self, query: &str, gt: &GroundTruth) -> Option<f64> {
        let e = self.get(query)?;
        let o = e.overlaps.as_ref()?;
        let vals: Vec<f64> = o.iter().filter(|(p, _)| gt.is_positive(query, p)).map(|(_, &v)| v).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

/// Positive sets per query id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    positives: HashMap<String, HashSet<String>>,
}

impl GroundTruth {
    pub fn from_sets(positives: HashMap<String, HashSet<String>>) -> Self {
        Self { positives }
    }

    pub fn positives(&self, query: &str) -> HashSet<String> {
        self.positives.get(query).cloned().unwrap_or_default()
    }

    pub fn is_positive(&self, query: &str, id: &str) -> bool {
        self.positives.get(query).is_some_and(|s| s.contains(id))
    }

    pub fn count(&self, query: &str) -> usize {
        self.positives.get(query).map_or(0, HashSet::len)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query: String,
    pub items: Vec<RankedItem>,
}

fn rank_order(a: &RankedItem, b: &RankedItem) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal).then_with(|| a.id.cmp(&b.id))
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// Every other image by descending cosine similarity (ties: ascending id).
pub fn rank_by_global<T: Scalar>(index: &RetrievalIndex<T>, query: &str) -> Result<RankedList, EvalError> {
    let q = index.get(query).ok_or_else(|| EvalError::UnknownQuery(query.to_string()))?;
    let mut items: Vec<RankedItem> = index
        .entries()
        .iter()
        .filter(|e| e.image_id != query)
        .map(|e| RankedItem { id: e.image_id.clone(), score: cosine(&q.descriptor, &e.descriptor) })
        .collect();
    items.sort_by(rank_order);
    Ok(RankedList { query: query.to_string(), items })
}

/// Scores an ordered (query, candidate) pair; higher means more likely a match.
pub trait PairScorer<T>: Sync {
    fn score(&self, query: &IndexEntry<T>, candidate: &IndexEntry<T>) -> Result<f64, EvalError>;
}

impl<T, F> PairScorer<T> for F
where
    F: Fn(&IndexEntry<T>, &IndexEntry<T>) -> Result<f64, EvalError> + Sync,
{
    fn score(&self, query: &IndexEntry<T>, candidate: &IndexEntry<T>) -> Result<f64, EvalError> {
        self(query, candidate)
    }
}

/// Re-sorts the first `min(k, len)` entries by scorer output; ties keep their
/// previous order, as does the tail.
pub fn rerank_topk<T: Scalar>(
    ranked: &RankedList,
    k: usize,
    scorer: &dyn PairScorer<T>,
    index: &RetrievalIndex<T>,
) -> Result<RankedList, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidArgument("k must be at least 1".into()));
    }
    let q = index.get(&ranked.query).ok_or_else(|| EvalError::UnknownQuery(ranked.query.clone()))?;
    let need_features = |e: &IndexEntry<T>| {
        if e.features.is_none() {
            Err(EvalError::MissingFeatures(e.image_id.clone()))
        } else {
            Ok(())
        }
    };
    need_features(q)?;
    let top = k.min(ranked.items.len());
    let mut head = Vec::with_capacity(top);
    for item in &ranked.items[..top] {
        let c = index.get(&item.id).ok_or_else(|| EvalError::UnknownQuery(item.id.clone()))?;
        need_features(c)?;
        head.push(RankedItem { id: item.id.clone(), score: scorer.score(q, c)? });
    }
    head.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    head.extend(ranked.items[top..].iter().cloned());
    Ok(RankedList { query: ranked.query.clone(), items: head })
}

/// Global rankings of many queries, computed in parallel, returned in query order.
pub fn rank_all<T: Scalar>(index: &RetrievalIndex<T>, queries: &[String]) -> Result<Vec<RankedList>, EvalError> {
    queries.par_iter().map(|q| rank_by_global(index, q)).collect()
}

/// Reranks many lists in parallel, preserving their order.
pub fn rerank_all<T: Scalar>(
    rankings: &[RankedList],
    k: usize,
    scorer: &dyn PairScorer<T>,
    index: &RetrievalIndex<T>,
) -> Result<Vec<RankedList>, EvalError> {
    rankings.par_iter().map(|r| rerank_topk(r, k, scorer, index)).collect()
}

/// Fraction of queries with a positive among their first `k` results.
pub fn recall_at_k(rankings: &[RankedList], gt: &GroundTruth, k: usize) -> Result<f64, EvalError> {
    if rankings.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    if k == 0 {
        return Err(EvalError::InvalidArgument("k must be at least 1".into()));
    }
    let hits = rankings.iter().filter(|r| r.items.iter().take(k).any(|it| gt.is_positive(&r.query, &it.id))).count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Non-interpolated average precision of one ranking. Positives absent from
/// the list contribute zero precision.
pub fn average_precision(ranking: &RankedList, gt: &GroundTruth) -> Result<f64, EvalError> {
    let total = gt.count(&ranking.query);
    if total == 0 {
        return Err(EvalError::NoPositives(ranking.query.clone()));
    }
    let (mut found, mut sum) = (0usize, 0.0);
    for (r, it) in ranking.items.iter().enumerate() {
        if gt.is_positive(&ranking.query, &it.id) {
            found += 1;
            sum += found as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / total as f64)
}

pub fn mean_average_precision(rankings: &[RankedList], gt: &GroundTruth) -> Result<f64, EvalError> {
    if rankings.is_empty() {
        return Err(EvalError::EmptyQuerySet);
    }
    let mut sum = 0.0;
    for r in rankings {
        sum += average_precision(r, gt)?;
    }
    Ok(sum / rankings.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub rank: usize,
    pub recall: f64,
    pub precision: f64,
}

/// Precision and recall after each rank of one list.
pub fn pr_curve(ranking: &RankedList, gt: &GroundTruth) -> Vec<PrPoint> {
    let total = gt.count(&ranking.query).max(1) as f64;
    let mut found = 0usize;
    ranking
        .items
        .iter()
        .enumerate()
        .map(|(r, it)| {
            found += gt.is_positive(&ranking.query, &it.id) as usize;
            PrPoint { rank: r + 1, recall: found as f64 / total, precision: found as f64 / (r + 1) as f64 }
        })
        .collect()
}

/// Precision-recall averaged over queries at each rank.
pub fn mean_pr_curve(rankings: &[RankedList], gt: &GroundTruth) -> Vec<PrPoint> {
    let curves: Vec<Vec<PrPoint>> = rankings.iter().map(|r| pr_curve(r, gt)).collect();
    let len = curves.iter().map(Vec::len).min().unwrap_or(0);
    let n = curves.len().max(1) as f64;
    (0..len)
        .map(|k| PrPoint {
            rank: k + 1,
            recall: curves.iter().map(|c| c[k].recall).sum::<f64>() / n,
            precision: curves.iter().map(|c| c[k].precision).sum::<f64>() / n,
        })
        .collect()
}

pub fn pr_curve_csv(points: &[PrPoint]) -> String {
    let mut out = String::from("rank,recall,precision\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.rank, p.recall, p.precision));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapBin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
    /// `None` for an empty bin.
    pub recall_at_1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapBreakdown {
    pub bins: Vec<OverlapBin>,
    /// Queries without an overlap value or outside the range.
    pub excluded: usize,
}

impl OverlapBreakdown {
    /// R@1 of the highest non-empty bin minus that of the lowest.
    pub fn high_low_drop(&self) -> Option<f64> {
        let filled: Vec<f64> = self.bins.iter().filter_map(|b| b.recall_at_1).collect();
        Some(filled.last()? - filled.first()?)
    }
}

/// Bin index of `v` in `bins` equal bins over `[low, high]`; half-open except
/// the last, which includes `high`.
pub fn overlap_bin(v: f64, bins: usize, low: f64, high: f64) -> Option<usize> {
    if !(v >= low && v <= high) {
        return None;
    }
    if v == high {
        return Some(bins - 1);
    }
    let width = (high - low) / bins as f64;
    Some((((v - low) / width).floor() as usize).min(bins - 1))
}

/// Per-bin R@1 with queries grouped by their overlap value.
pub fn overlap_breakdown(
    rankings: &[RankedList],
    gt: &GroundTruth,
    overlaps: &HashMap<String, f64>,
    bins: usize,
    range: (f64, f64),
) -> Result<OverlapBreakdown, EvalError> {
    let (low, high) = range;
    if bins == 0 || !(low < high) {
        return Err(EvalError::InvalidArgument(format!("need bins >= 1 and low < high, got {bins} over {range:?}")));
    }
    let mut members: Vec<Vec<&RankedList>> = vec![Vec::new(); bins];
    let mut excluded = 0;
    for r in rankings {
        match overlaps.get(&r.query).and_then(|&v| overlap_bin(v, bins, low, high)) {
            Some(b) => members[b].push(r),
            None => excluded += 1,
        }
    }
    let width = (high - low) / bins as f64;
    let out = members
        .iter()
        .enumerate()
        .map(|(b, m)| {
            let hits = m.iter().filter(|r| r.items.first().is_some_and(|it| gt.is_positive(&r.query, &it.id))).count();
            OverlapBin {
                low: low + b as f64 * width,
                high: if b + 1 == bins { high } else { low + (b + 1) as f64 * width },
                count: m.len(),
                recall_at_1: (!m.is_empty()).then(|| hits as f64 / m.len() as f64),
            }
        })
        .collect();
    Ok(OverlapBreakdown { bins: out, excluded })
}
