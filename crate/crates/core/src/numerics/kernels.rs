//! Row kernels shared by the tape and the ranker. Every MaxSim score in the
//! crate goes through [`maxsim_normalized`], so batch and incremental ranking
//! agree bit for bit.

use super::{dot, Scalar};

/// Divide each `d`-wide row by its L2 norm; zero rows stay zero.
pub fn l2_normalize_rows<T: Scalar>(rows: &[T], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows.chunks(d.max(1)) {
        let norm = dot(row, row).sqrt();
        if norm > T::zero() {
            out.extend(row.iter().map(|&v| v / norm));
        } else {
            out.extend(row.iter().map(|_| T::zero()));
        }
    }
    out
}

fn is_zero<T: Scalar>(row: &[T]) -> bool {
    row.iter().all(|&v| v == T::zero())
}

/// MaxSim between row-normalized `query` and `candidate` blocks.
///
/// Returns the score and, per query row, the index of the candidate row
/// that attained the maximum when both rows are nonzero (`None` otherwise).
/// Cosine against a zero row counts as 0.
pub fn maxsim_normalized<T: Scalar>(
    query: &[T],
    candidate: &[T],
    d: usize,
) -> (T, Vec<Option<usize>>) {
    let (nq, np) = (query.len() / d, candidate.len() / d);
    let mut cos = vec![T::zero(); nq * np];
    T::gemm(nq, d, np, query, false, candidate, true, &mut cos, false);
    let mut total = T::zero();
    let mut matches = Vec::with_capacity(nq);
    for q in 0..nq {
        let row = &cos[q * np..(q + 1) * np];
        let mut best = (0, T::neg_infinity());
        for (p, &c) in row.iter().enumerate() {
            if c > best.1 {
                best = (p, c);
            }
        }
        if np == 0 {
            matches.push(None);
            continue;
        }
        total += best.1;
        let live = !is_zero(&query[q * d..(q + 1) * d])
            && !is_zero(&candidate[best.0 * d..(best.0 + 1) * d]);
        matches.push(live.then_some(best.0));
    }
    (total, matches)
}
