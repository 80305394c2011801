use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn cfg(split: usize, top_k: usize) -> RankerConfig {
    RankerConfig {
        split,
        top_k,
        query: Query::CurrentSplit,
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    )
}

/// Pairwise cosines with the zero-vector convention, row maxima, sum.
fn brute_maxsim(q: &[f64], p: &[f64], d: usize) -> f64 {
    let norm = |r: &[f64]| r.iter().map(|x| x * x).sum::<f64>().sqrt();
    q.chunks(d)
        .map(|qr| {
            p.chunks(d)
                .map(|pr| {
                    let (a, b) = (norm(qr), norm(pr));
                    if a == 0.0 || b == 0.0 {
                        0.0
                    } else {
                        qr.iter().zip(pr).map(|(x, y)| x * y).sum::<f64>() / (a * b)
                    }
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum()
}

/// Repeated extraction of the best remaining index (later index on ties).
fn brute_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut taken = vec![false; scores.len()];
    let mut out = Vec::new();
    for _ in 0..k.min(scores.len()) {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if taken[i] {
                continue;
            }
            if best.is_none_or(|b| scores[i] >= scores[b]) {
                best = Some(i);
            }
        }
        taken[best.unwrap()] = true;
        out.push(best.unwrap());
    }
    out.sort();
    out
}

#[test]
fn partition_examples() {
    let r = partition(512, 64, Mode::Training).unwrap();
    assert_eq!(r.len(), 8);
    assert!(r.iter().all(|x| x.len() == 64));
    assert_eq!(partition(1, 64, Mode::Inference).unwrap(), vec![0..1]);
    assert_eq!(
        partition(130, 64, Mode::Inference).unwrap(),
        vec![0..64, 64..128, 128..130]
    );
    let err = partition(130, 64, Mode::Training).unwrap_err().to_string();
    assert!(err.contains("pad or truncate"), "{err}");
}

#[test]
fn maxsim_examples() {
    let e = [0.6, 0.8];
    assert_eq!(maxsim_score(&e, &[1.0, 0.0, 0.6, 0.8], 2), 1.0);
    let a = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(maxsim_score(&a, &a, 2), 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let d = rng.random_range(1..9);
        let q = random(&mut rng, 4, d);
        let p = random(&mut rng, 4, d);
        let got = maxsim_score(q.data(), p.data(), d);
        assert!((got - brute_maxsim(q.data(), p.data(), d)).abs() < 1e-10);
    }
}

#[test]
fn maxsim_self_equals_nonzero_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let mut a = random(&mut rng, 6, 5);
        let zeroed = rng.random_range(0..4);
        for r in 0..zeroed {
            a.data_mut()[r * 5..(r + 1) * 5].fill(0.0);
        }
        let s = maxsim_score(a.data(), a.data(), 5);
        assert!((s - (6 - zeroed) as f64).abs() < 1e-12);
    }
}

#[test]
fn select_topk_examples() {
    // splits 1 and 3 win for k = 2
    let scores = [0.2, 1.6, 0.5, 0.8];
    let sel = normalize_and_weight(select_topk(4, &scores, 2));
    assert_eq!(sel.indices(), vec![1, 3]);
    assert_eq!(sel.weights(), vec![1.0, 0.5]);
    assert_eq!(select_topk::<f64>(0, &[], 7).k_effective(), 0);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scores: Vec<f64> = (0..64).map(|_| rng.random_range(0.0..10.0)).collect();
    let mut sorted: Vec<usize> = (0..64).collect();
    sorted.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut want = sorted[..7].to_vec();
    want.sort();
    assert_eq!(select_topk(64, &scores, 7).indices(), want);
}

#[test]
fn select_topk_ties_prefer_recent() {
    let sel = select_topk(5, &[1.0, 1.0, 1.0, 1.0, 1.0], 2);
    assert_eq!(sel.indices(), vec![3, 4]);
}

#[test]
fn select_topk_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..2000 {
        let n = rng.random_range(0..20);
        let k = rng.random_range(0..9);
        // coarse values so ties are frequent
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0..6) as f64 * 0.5)
            .collect();
        assert_eq!(select_topk(n, &scores, k).indices(), brute_topk(&scores, k));
    }
}

#[test]
fn normalization_examples() {
    assert_eq!(normalized_weights(&[1.6, 0.8]), vec![1.0, 0.5]);
    assert_eq!(normalized_weights(&[0.37]), vec![1.0]);
    assert_eq!(normalized_weights(&[2.0, 1.0, 0.5]), vec![1.0, 0.5, 0.25]);
    assert_eq!(normalized_weights(&[-1.0, 0.0]), vec![1.0, 1.0]);
}

#[test]
fn assemble_window_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let emb = random(&mut rng, 8, 3);
    let sel = RankedSelection {
        current: 3,
        selected: vec![Selected {
            split: 1,
            score: 0.8,
            weight: 0.5,
        }],
        self_score: None,
    };
    let w = assemble_window(&sel, 6..8, &emb, 2);
    assert_eq!(w.positions, vec![2, 3, 6, 7]);
    for (i, &p) in w.positions.iter().enumerate() {
        let scale = if i < 2 { 0.5 } else { 1.0 };
        for j in 0..3 {
            assert_eq!(w.rows.at(i, j), emb.at(p, j) * scale);
        }
    }
    let w = assemble_window(&RankedSelection::empty(3), 6..8, &emb, 2);
    assert_eq!(w.rows, emb.slice_rows(6, 2));

    // full selection at the default geometry
    let emb = random(&mut rng, 512, 4);
    let sels = rank_all(&emb, cfg(64, 7), &mut RankerCounters::default()).unwrap();
    let w = assemble_window(&sels[7], 448..512, &emb, 64);
    assert_eq!(w.rows.rows(), 512);
}

#[test]
fn rank_all_shape_and_pair_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let emb = random(&mut rng, 512, 8);
    let mut counters = RankerCounters::default();
    let sels = rank_all(&emb, cfg(64, 7), &mut counters).unwrap();
    assert_eq!(sels.len(), 8);
    assert_eq!(sels[0].k_effective(), 0);
    for (i, s) in sels.iter().enumerate() {
        assert_eq!(s.k_effective(), i.min(7));
        assert!(s.indices().iter().all(|&j| j < i));
        let max = s.weights().into_iter().fold(0.0, f64::max);
        assert!(s.k_effective() == 0 || max == 1.0);
    }
    let m = 512 / 64;
    assert_eq!(counters.split_pairs_scored, m * (m + 1) / 2);
    assert_eq!(counters.split_pairs_scored, 36);
    assert_eq!(counters.cosine_cells, 36 * 64 * 64);
    assert_eq!(counters.maxsim_flops, 36 * 64 * 64 * 8);
}

#[test]
fn rank_all_scores_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let emb = random(&mut rng, 40, 5);
    let sels = rank_all(&emb, cfg(8, 2), &mut RankerCounters::default()).unwrap();
    for s in &sels {
        let i = s.current;
        let scores: Vec<f64> = (0..i)
            .map(|j| {
                brute_maxsim(
                    &emb.data()[i * 40..(i + 1) * 40],
                    &emb.data()[j * 40..(j + 1) * 40],
                    5,
                )
            })
            .collect();
        assert_eq!(s.indices(), brute_topk(&scores, 2));
        for sel in &s.selected {
            assert!((sel.score - scores[sel.split]).abs() < 1e-10);
        }
    }
}

#[test]
fn identical_splits_tie_toward_recent() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let block = random(&mut rng, 4, 3);
    let mut data = Vec::new();
    for _ in 0..5 {
        data.extend_from_slice(block.data());
    }
    let emb = Tensor::matrix(20, 3, data);
    let sels = rank_all(&emb, cfg(4, 2), &mut RankerCounters::default()).unwrap();
    assert_eq!(sels[4].indices(), vec![2, 3]);
    assert_eq!(sels[4].weights(), vec![1.0, 1.0]);
}

#[test]
fn scaling_embeddings_preserves_selection() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let emb = random(&mut rng, 48, 6);
        let c = rng.random_range(0.1..10.0);
        let scaled = emb.map(|x| x * c);
        let a = rank_all(&emb, cfg(6, 3), &mut RankerCounters::default()).unwrap();
        let b = rank_all(&scaled, cfg(6, 3), &mut RankerCounters::default()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.indices(), y.indices());
            for (u, v) in x.weights().iter().zip(y.weights()) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn window_positions_ascend() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let emb = random(&mut rng, 64, 4);
    let sels = rank_all(&emb, cfg(4, 5), &mut RankerCounters::default()).unwrap();
    for s in &sels {
        let r = s.current * 4..s.current * 4 + 4;
        let w = assemble_window(s, r, &emb, 4);
        assert!(w.positions.windows(2).all(|p| p[0] < p[1]));
        assert_eq!(w.rows.rows(), 4 * (s.k_effective() + 1));
    }
}

#[test]
fn incremental_short_prompt_selects_nothing() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let emb = random(&mut rng, 7, 4);
    let mut r = IncrementalRanker::new(cfg(8, 3), 4);
    for t in 0..7 {
        r.extend(emb.row(t));
        assert_eq!(r.select().k_effective(), 0);
    }
}

#[test]
fn incremental_matches_batch_at_split_boundaries() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for query in [Query::CurrentSplit, Query::PreviousSplit] {
        let c = RankerConfig {
            split: 4,
            top_k: 2,
            query,
        };
        let emb = random(&mut rng, 32, 5);
        let batch = rank_all(&emb, c, &mut RankerCounters::default()).unwrap();
        let mut inc = IncrementalRanker::new(c, 5);
        for t in 0..32 {
            inc.extend(emb.row(t));
            let sel = inc.select();
            if (t + 1) % 4 == 0 {
                assert_eq!(sel, batch[t / 4], "split {}", t / 4);
            }
        }
    }
}

#[test]
fn incremental_cells_grow_linearly() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (s, d) = (4, 3);
    let emb = random(&mut rng, 40, d);
    let mut inc = IncrementalRanker::new(cfg(s, 2), d);
    for t in 0..40 {
        inc.extend(emb.row(t));
        let before = inc.counters.cosine_cells;
        inc.select();
        let cells = inc.counters.cosine_cells - before;
        // each complete predecessor costs len * S cells, plus the self-pair
        let (i, len) = (t / s, t % s + 1);
        assert_eq!(cells, (i * len * s + len * len) as u64);
    }
}

#[test]
fn previous_split_query_never_reads_current_split() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let c = RankerConfig {
        split: 4,
        top_k: 2,
        query: Query::PreviousSplit,
    };
    let emb = random(&mut rng, 24, 3);
    let a = rank_all(&emb, c, &mut RankerCounters::default()).unwrap();
    let mut changed = emb.clone();
    changed.data_mut()[20 * 3..24 * 3]
        .iter_mut()
        .for_each(|x| *x = -*x * 3.0);
    let b = rank_all(&changed, c, &mut RankerCounters::default()).unwrap();
    assert_eq!(a[5], b[5]);
    // the previous split self-scores highest, so it is always selected
    assert!(a[5].indices().contains(&4));
    let mut counters = RankerCounters::default();
    rank_all(&emb, c, &mut counters).unwrap();
    assert_eq!(counters.split_pairs_scored, 6 * 5 / 2);
}

mod props {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest, ProptestConfig};

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn topk_is_sorted_unique_and_bounded(
            scores in proptest::collection::vec(-5.0f64..5.0, 0..40),
            k in 0usize..10,
        ) {
            let sel = select_topk(scores.len(), &scores, k);
            prop_assert_eq!(sel.k_effective(), k.min(scores.len()));
            prop_assert_eq!(sel.indices(), brute_topk(&scores, k));
            let w = normalize_and_weight(sel).weights();
            if !w.is_empty() {
                let mx = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert_eq!(mx, 1.0);
            }
        }
    }
}
