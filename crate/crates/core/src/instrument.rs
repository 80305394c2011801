//! Operation counters filled in by the ranker and the processor.
//!
//! A product with inner dimension `k` is counted as `k - 1` multiply-adds per
//! output element, the convention of the closed forms reproduced by
//! `eval::flop_audit`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankerCounters {
    /// Split pairs whose MaxSim was evaluated, self-pairs included.
    pub split_pairs_scored: u64,
    /// Query-row by candidate-row cosines.
    pub cosine_cells: u64,
    /// `cosine_cells * d`.
    pub maxsim_flops: u64,
}

impl RankerCounters {
    pub fn record(&mut self, query_rows: usize, candidate_rows: usize, d: usize) {
        let cells = (query_rows * candidate_rows) as u64;
        self.split_pairs_scored += 1;
        self.cosine_cells += cells;
        self.maxsim_flops += cells * d as u64;
    }
}

impl std::ops::AddAssign for RankerCounters {
    fn add_assign(&mut self, o: Self) {
        self.split_pairs_scored += o.split_pairs_scored;
        self.cosine_cells += o.cosine_cells;
        self.maxsim_flops += o.maxsim_flops;
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub ranker: RankerCounters,
    /// Enricher work on the rows each window owns (its current split).
    pub enricher_flops: u64,
    /// Mixing product `Mix * Z_tr` over every window row.
    pub contextualizer_flops: u64,
    /// Fuser work on owned rows.
    pub fuser_flops: u64,
    /// Enricher and fuser work spent recomputing selected splits and
    /// padding rows inside windows.
    pub recompute_flops: u64,
    /// Output projection onto the vocabulary.
    pub head_flops: u64,
}

impl Counters {
    pub fn processor_flops(&self) -> u64 {
        self.enricher_flops + self.contextualizer_flops + self.fuser_flops + self.recompute_flops
    }

    pub fn total(&self) -> u64 {
        self.ranker.maxsim_flops + self.processor_flops() + self.head_flops
    }
}

impl std::ops::AddAssign for Counters {
    fn add_assign(&mut self, o: Self) {
        self.ranker += o.ranker;
        self.enricher_flops += o.enricher_flops;
        self.contextualizer_flops += o.contextualizer_flops;
        self.fuser_flops += o.fuser_flops;
        self.recompute_flops += o.recompute_flops;
        self.head_flops += o.head_flops;
    }
}
