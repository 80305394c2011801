//! Split ranker: partitions a sequence into splits of `S` tokens, scores the
//! preceding splits against the current one with MaxSim, keeps the top `k`
//! and weights them by their score relative to the best of them.

use std::cmp::Ordering;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instrument::RankerCounters;
use crate::numerics::{l2_normalize_rows, maxsim_normalized, Scalar, Tensor};

#[cfg(test)]
mod tests;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Every split is complete; lengths must divide evenly.
    Training,
    /// The last split may be partial.
    Inference,
}

/// Which rows query the preceding splits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Query {
    /// The current split itself, including positions it will later predict.
    #[default]
    CurrentSplit,
    /// The last complete split before the current one, which is then always
    /// a candidate. Selection never sees tokens of the current split.
    PreviousSplit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankerConfig {
    pub split: usize,
    pub top_k: usize,
    pub query: Query,
}

/// Token ranges of the splits covering `len` positions.
pub fn partition(len: usize, split: usize, mode: Mode) -> Result<Vec<Range<usize>>> {
    if split == 0 {
        return Err(Error::Contract("split size must be at least 1".into()));
    }
    if mode == Mode::Training && len % split != 0 {
        return Err(Error::Contract(format!(
            "sequence length {len} is not a multiple of split size {split}; pad or truncate"
        )));
    }
    Ok((0..len.div_ceil(split))
        .map(|i| i * split..((i + 1) * split).min(len))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Selected<T> {
    pub split: usize,
    pub score: T,
    pub weight: T,
}

/// Splits chosen for one current split, ascending by index.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RankedSelection<T> {
    pub current: usize,
    pub selected: Vec<Selected<T>>,
    /// MaxSim of the query against itself; diagnostic only.
    pub self_score: Option<T>,
}

impl<T: Scalar> RankedSelection<T> {
    pub fn empty(current: usize) -> Self {
        Self {
            current,
            selected: Vec::new(),
            self_score: None,
        }
    }

    pub fn k_effective(&self) -> usize {
        self.selected.len()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.selected.iter().map(|s| s.split).collect()
    }

    pub fn weights(&self) -> Vec<T> {
        self.selected.iter().map(|s| s.weight).collect()
    }

    /// Same splits with every weight forced to 1.
    pub fn unweighted(&self) -> Self {
        let mut out = self.clone();
        out.selected.iter_mut().for_each(|s| s.weight = T::one());
        out
    }
}

/// MaxSim of two blocks of `d`-wide raw rows.
pub fn maxsim_score<T: Scalar>(current: &[T], candidate: &[T], d: usize) -> T {
    let q = l2_normalize_rows(current, d);
    let p = l2_normalize_rows(candidate, d);
    maxsim_normalized(&q, &p, d).0
}

/// Top `k` of `scores` (one per preceding split), ties going to the more
/// recent split, returned ascending by split index with unit weights.
pub fn select_topk<T: Scalar>(current: usize, scores: &[T], k: usize) -> RankedSelection<T> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(b.cmp(&a))
    });
    order.truncate(k);
    order.sort_unstable();
    RankedSelection {
        current,
        selected: order
            .into_iter()
            .map(|i| Selected {
                split: i,
                score: scores[i],
                weight: T::one(),
            })
            .collect(),
        self_score: None,
    }
}

/// `score / max score`; the argmax gets exactly 1. A non-positive maximum
/// leaves every weight at 1.
pub fn normalized_weights<T: Scalar>(scores: &[T]) -> Vec<T> {
    let argmax = scores
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, T)>, (i, &s)| match best {
            Some((_, b)) if b >= s => best,
            _ => Some((i, s)),
        })
        .filter(|&(_, m)| m > T::zero());
    match argmax {
        Some((i, m)) => scores
            .iter()
            .enumerate()
            .map(|(j, &s)| if j == i { T::one() } else { s / m })
            .collect(),
        None => vec![T::one(); scores.len()],
    }
}

pub fn normalize_and_weight<T: Scalar>(mut selection: RankedSelection<T>) -> RankedSelection<T> {
    let scores: Vec<T> = selection.selected.iter().map(|s| s.score).collect();
    for (s, w) in selection
        .selected
        .iter_mut()
        .zip(normalized_weights(&scores))
    {
        s.weight = w;
    }
    selection
}

/// Rows handed to the processor for one current split.
#[derive(Clone, Debug, PartialEq)]
pub struct Window<T> {
    pub rows: Tensor<T>,
    /// Absolute sequence position of every row.
    pub positions: Vec<usize>,
}

/// Weighted selected splits followed by the current split, in sequence
/// order.
pub fn assemble_window<T: Scalar>(
    selection: &RankedSelection<T>,
    current: Range<usize>,
    embeddings: &Tensor<T>,
    split: usize,
) -> Window<T> {
    let d = embeddings.cols();
    let mut data = Vec::new();
    let mut positions = Vec::new();
    for s in &selection.selected {
        let r = s.split * split..(s.split + 1) * split;
        for p in r {
            data.extend(embeddings.row(p).iter().map(|&x| x * s.weight));
            positions.push(p);
        }
    }
    for p in current {
        data.extend_from_slice(embeddings.row(p));
        positions.push(p);
    }
    Window {
        rows: Tensor::matrix(positions.len(), d, data),
        positions,
    }
}

/// Rank every split listed in `ranges` against the complete splits before
/// it. Works on partial trailing splits, which inference prefill needs.
pub fn rank_splits<T: Scalar>(
    embeddings: &Tensor<T>,
    ranges: &[Range<usize>],
    cfg: RankerConfig,
    counters: &mut RankerCounters,
) -> Vec<RankedSelection<T>> {
    let d = embeddings.cols();
    let end = ranges.last().map_or(0, |r| r.end);
    let normalized = l2_normalize_rows(&embeddings.data()[..end * d], d);
    let block = |r: &Range<usize>| &normalized[r.start * d..r.end * d];
    (0..ranges.len())
        .map(|i| rank_one(i, |j| block(&ranges[j]), d, cfg, counters))
        .collect()
}

/// Score split `current` against its predecessors; `rows(j)` yields the
/// normalized rows of split `j`, partial for the current one.
fn rank_one<'a, T: Scalar>(
    current: usize,
    rows: impl Fn(usize) -> &'a [T],
    d: usize,
    cfg: RankerConfig,
    counters: &mut RankerCounters,
) -> RankedSelection<T> {
    let (query_index, candidates) = match cfg.query {
        Query::CurrentSplit => (current, current),
        Query::PreviousSplit if current == 0 => return RankedSelection::empty(current),
        Query::PreviousSplit => (current - 1, current),
    };
    let query = rows(query_index);
    let mut scores = Vec::with_capacity(candidates);
    for j in 0..candidates {
        let cand = if j == query_index { query } else { rows(j) };
        let (s, _) = maxsim_normalized(query, cand, d);
        counters.record(query.len() / d, cand.len() / d, d);
        scores.push(s);
    }
    let self_score = if query_index < candidates {
        Some(scores[query_index])
    } else {
        let (s, _) = maxsim_normalized(query, query, d);
        counters.record(query.len() / d, query.len() / d, d);
        Some(s)
    };
    let mut selection = normalize_and_weight(select_topk(current, &scores, cfg.top_k));
    selection.self_score = self_score;
    selection
}

/// One selection per split of a training sequence; split 0's is empty.
pub fn rank_all<T: Scalar>(
    embeddings: &Tensor<T>,
    cfg: RankerConfig,
    counters: &mut RankerCounters,
) -> Result<Vec<RankedSelection<T>>> {
    let ranges = partition(embeddings.rows(), cfg.split, Mode::Training)?;
    Ok(rank_splits(embeddings, &ranges, cfg, counters))
}

/// Ranker state for token-by-token generation: normalized rows of every
/// position seen so far.
#[derive(Clone, Debug)]
pub struct IncrementalRanker<T> {
    cfg: RankerConfig,
    d: usize,
    normalized: Vec<T>,
    pub counters: RankerCounters,
}

impl<T: Scalar> IncrementalRanker<T> {
    pub fn new(cfg: RankerConfig, d: usize) -> Self {
        Self {
            cfg,
            d,
            normalized: Vec::new(),
            counters: RankerCounters::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.normalized.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }

    /// Append raw embedding rows.
    pub fn extend(&mut self, rows: &[T]) {
        self.normalized.extend(l2_normalize_rows(rows, self.d));
    }

    /// Index and token range of the split holding the newest position.
    pub fn current(&self) -> (usize, Range<usize>) {
        let s = self.cfg.split;
        let i = self.len().saturating_sub(1) / s;
        (i, i * s..self.len().min((i + 1) * s))
    }

    /// Re-score the current (possibly partial) split against every complete
    /// split before it.
    pub fn select(&mut self) -> RankedSelection<T> {
        let (current, range) = self.current();
        let (s, d) = (self.cfg.split, self.d);
        let normalized = &self.normalized;
        let rows = |j: usize| {
            if j == current {
                &normalized[range.start * d..range.end * d]
            } else {
                &normalized[j * s * d..(j + 1) * s * d]
            }
        };
        rank_one(current, rows, d, self.cfg, &mut self.counters)
    }
}
