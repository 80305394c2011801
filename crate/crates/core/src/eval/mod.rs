//! Perplexity, passkey recall sweeps, operation-count audits and
//! time-to-first-token scaling.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{byte_decode, gen_niah, score_niah, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::instrument::Counters;
use crate::model::{forward_train, greedy, Generator, ModelConfig, ModelParams, ParamVars};
use crate::numerics::{Scalar, Tape};
use crate::trainer::batch_loss;


/// `exp` of the mean next-token loss over `blocks` of `N + 1` tokens.
pub fn perplexity<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    blocks: &[Vec<usize>],
) -> Result<f64> {
    if blocks.is_empty() {
        return Err(Error::Contract(
            "perplexity needs at least one block".into(),
        ));
    }
    let mut total = 0.0;
    for b in blocks {
        total += batch_loss(params, cfg, std::slice::from_ref(b), false)?.0;
    }
    Ok((total / blocks.len() as f64).exp())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: TaskKind,
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    pub n_per_cell: usize,
    pub value_digits: usize,
    /// Tokens generated per instance; the answer must appear within them.
    pub max_new: usize,
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::PasskeyKv,
            lengths: vec![256, 512, 1024, 2048],
            depths: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            n_per_cell: 20,
            value_digits: 9,
            max_new: 64,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub haystack_len: usize,
    pub depth: f64,
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Instances whose needle split was in the window of the first
    /// generated token (selected, or the current split itself).
    pub needle_in_window: usize,
    /// Correct answers among instances with the needle outside the window.
    pub correct_outside_window: usize,
    pub mean_k_effective: f64,
    pub mean_prompt_len: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub tag: String,
    pub config: ModelConfig,
    pub spec: SweepSpec,
    /// Row-major: one row per depth, one column per length.
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    pub fn cell(&self, depth: usize, length: usize) -> &SweepCell {
        &self.cells[depth * self.spec.lengths.len() + length]
    }

    pub fn min_accuracy(&self) -> f64 {
        self.cells
            .iter()
            .map(|c| c.accuracy)
            .fold(f64::INFINITY, f64::min)
    }

    /// Accuracy over every instance whose needle fell outside the window,
    /// with the number of such instances.
    pub fn outside_window_accuracy(&self) -> (f64, usize) {
        let n: usize = self.cells.iter().map(|c| c.n - c.needle_in_window).sum();
        let k: usize = self.cells.iter().map(|c| c.correct_outside_window).sum();
        (if n == 0 { 0.0 } else { k as f64 / n as f64 }, n)
    }

    /// Tab-separated grid, depths down, lengths across.
    pub fn grid(&self) -> String {
        let mut s = String::from("depth");
        for l in &self.spec.lengths {
            let _ = write!(s, "\t{l}");
        }
        s.push('\n');
        for (i, d) in self.spec.depths.iter().enumerate() {
            let _ = write!(s, "{d}");
            for j in 0..self.spec.lengths.len() {
                let _ = write!(s, "\t{:.2}", self.cell(i, j).accuracy);
            }
            s.push('\n');
        }
        s
    }

    /// One character per cell, from ' ' (0) to '#' (1).
    pub fn heatmap(&self) -> String {
        const RAMP: &[u8] = b" .:-=+*%#";
        let mut s = format!("{} (rows: depth, cols: length)\n", self.tag);
        for (i, d) in self.spec.depths.iter().enumerate() {
            let _ = write!(s, "{d:>5.2} |");
            for j in 0..self.spec.lengths.len() {
                let a = self.cell(i, j).accuracy.clamp(0.0, 1.0);
                let c = RAMP[(a * (RAMP.len() - 1) as f64).round() as usize] as char;
                let _ = write!(s, "{c}{c}");
            }
            s.push_str("|\n");
        }
        s
    }
}

/// Greedy continuation of `prompt`; also reports whether split `needle` was
/// in the window of the first prediction and how many splits were selected.
fn answer<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    prompt: &[usize],
    needle_splits: std::ops::RangeInclusive<usize>,
    max_new: usize,
) -> Result<(Vec<usize>, bool, usize)> {
    let mut g = Generator::new(params, cfg)?;
    let mut logits = g.prefill(prompt)?;
    let sel = g
        .last_selection
        .clone()
        .expect("prefill records a selection");
    let visible = |s: usize| s == sel.current || sel.indices().contains(&s);
    let in_window = needle_splits.clone().all(visible);
    let mut out = Vec::with_capacity(max_new);
    for i in 0..max_new {
        let t = greedy(&logits, cfg.vocab);
        out.push(t);
        if i + 1 < max_new {
            logits = g.push(t)?;
        }
    }
    Ok((out, in_window, sel.k_effective()))
}

pub fn niah_sweep<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    spec: &SweepSpec,
    tag: &str,
) -> Result<SweepResult> {
    let mut cells = Vec::with_capacity(spec.depths.len() * spec.lengths.len());
    for (di, &depth) in spec.depths.iter().enumerate() {
        for (li, &len) in spec.lengths.iter().enumerate() {
            let mut cell = SweepCell {
                haystack_len: len,
                depth,
                n: spec.n_per_cell,
                correct: 0,
                accuracy: 0.0,
                needle_in_window: 0,
                correct_outside_window: 0,
                mean_k_effective: 0.0,
                mean_prompt_len: 0.0,
            };
            for i in 0..spec.n_per_cell {
                let seed = spec.seed ^ ((di as u64) << 48) ^ ((li as u64) << 32) ^ i as u64;
                let task = TaskSpec {
                    kind: spec.kind,
                    haystack_len: len,
                    needle_depth: depth,
                    value_digits: spec.value_digits,
                    key_len: 4,
                    seed,
                };
                let inst = gen_niah(&task);
                let needle_len = crate::data::needle_line("KKKK", &inst.answer).len();
                let splits = inst.needle_offset / cfg.split
                    ..=(inst.needle_offset + needle_len - 1) / cfg.split;
                let (out, in_window, k) = answer(params, cfg, &inst.prompt, splits, spec.max_new)?;
                let hit = score_niah(&byte_decode(&out), &inst.answer) == 1.0;
                cell.correct += hit as usize;
                cell.needle_in_window += in_window as usize;
                cell.correct_outside_window += (hit && !in_window) as usize;
                cell.mean_k_effective += k as f64;
                cell.mean_prompt_len += inst.prompt.len() as f64;
            }
            let n = spec.n_per_cell.max(1) as f64;
            cell.accuracy = cell.correct as f64 / n;
            cell.mean_k_effective /= n;
            cell.mean_prompt_len /= n;
            cells.push(cell);
        }
    }
    Ok(SweepResult {
        tag: tag.to_string(),
        config: cfg.clone(),
        spec: spec.clone(),
        cells,
    })
}

/// One audited counter: closed form against the instrumented count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditLine {
    pub component: String,
    pub expected: u64,
    pub measured: u64,
}

impl AuditLine {
    pub fn delta(&self) -> i128 {
        self.measured as i128 - self.expected as i128
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopAudit {
    pub config: ModelConfig,
    pub lines: Vec<AuditLine>,
    pub counters: Counters,
}

impl FlopAudit {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.delta() == 0)
    }

    /// Error naming every mismatching component and its delta.
    pub fn check(&self) -> Result<()> {
        let bad: Vec<String> = self
            .lines
            .iter()
            .filter(|l| l.delta() != 0)
            .map(|l| {
                format!(
                    "{} off by {} ({} vs {})",
                    l.component,
                    l.delta(),
                    l.measured,
                    l.expected
                )
            })
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Contract(format!("flop audit: {}", bad.join("; "))))
        }
    }

    pub fn report(&self) -> String {
        let mut s = String::from("component\texpected\tmeasured\tdelta\n");
        for l in &self.lines {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                l.component,
                l.expected,
                l.measured,
                l.delta()
            );
        }
        let _ = writeln!(s, "{}", if self.passed() { "PASS" } else { "FAIL" });
        s
    }
}

/// Closed-form costs of one training pass over `N = cfg.seq_len` tokens,
/// summed over layers.
pub fn closed_forms(cfg: &ModelConfig) -> Vec<AuditLine> {
    let (n, d, m) = (cfg.seq_len as u64, cfg.d as u64, cfg.m() as u64);
    let (s, k, l) = (
        cfg.split as u64,
        cfg.effective_top_k() as u64,
        cfg.layers as u64,
    );
    let (mt, mh) = (cfg.m_t() as u64, cfg.m_h() as u64);
    let c = s * (k + 1);
    let splits = n / s;
    let pairs = if cfg.ablations.no_ranker {
        0
    } else if cfg.causal_rank {
        splits * (splits - 1) / 2
    } else {
        splits * (splits + 1) / 2
    };
    let line = |name: &str, expected| AuditLine {
        component: name.into(),
        expected,
        measured: 0,
    };
    vec![
        line("ranker_split_pairs", pairs),
        line("ranker_maxsim_flops", pairs * s * s * d),
        line("enricher_flops", l * n * m * (d - 1)),
        line("contextualizer_flops", l * n * (k + 1) * (c - 1) * (mt / 2)),
        line("fuser_flops", l * n * d * (mh + mt / 2 - 1)),
    ]
}

/// One instrumented training pass on random tokens, compared with
/// [`closed_forms`].
pub fn flop_audit(cfg: &ModelConfig, seed: u64) -> Result<FlopAudit> {
    cfg.validate()?;
    let params = ModelParams::<f32>::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..cfg.seq_len)
        .map(|_| rng.random_range(0..cfg.vocab))
        .collect();
    let mut tape = Tape::new();
    let pv = ParamVars::load(&mut tape, &params, false);
    let counters = forward_train(&mut tape, &pv, &tokens, cfg, None)?.counters;
    let mut lines = closed_forms(cfg);
    let measured = [
        counters.ranker.split_pairs_scored,
        counters.ranker.maxsim_flops,
        counters.enricher_flops,
        counters.contextualizer_flops,
        counters.fuser_flops,
    ];
    for (line, m) in lines.iter_mut().zip(measured) {
        line.measured = m;
    }
    Ok(FlopAudit {
        config: cfg.clone(),
        lines,
        counters,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtftRow {
    pub n: usize,
    pub flops: u64,
    pub ms_median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtftReport {
    pub rows: Vec<TtftRow>,
    /// Least-squares slope of log(counted flops) against log(N).
    pub flop_slope: f64,
    pub time_slope: f64,
}

impl TtftReport {
    pub fn tsv(&self) -> String {
        let mut s = String::from("N\tflops\tms_median\n");
        for r in &self.rows {
            let _ = writeln!(s, "{}\t{}\t{:.3}", r.n, r.flops, r.ms_median);
        }
        s
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Cost of producing the first token after prompts of each length: the
/// counted operations of the prefill pass and its median wall time.
pub fn ttft_bench<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    lengths: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<TtftReport> {
    if lengths.len() < 3 {
        return Err(Error::Contract(format!(
            "ttft_bench needs at least 3 lengths, got {}",
            lengths.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(lengths.len());
    for &n in lengths {
        let prompt: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.vocab)).collect();
        let mut times = Vec::with_capacity(repeats.max(1));
        let mut flops = 0;
        for _ in 0..repeats.max(1) {
            let mut g = Generator::new(params, cfg)?;
            let start = Instant::now();
            let logits = g.prefill(&prompt)?;
            let _first = greedy(&logits, cfg.vocab);
            times.push(start.elapsed().as_secs_f64() * 1e3);
            flops = g.counters.total();
        }
        rows.push(TtftRow {
            n,
            flops,
            ms_median: median(&mut times),
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let fl: Vec<f64> = rows.iter().map(|r| r.flops as f64).collect();
    let tm: Vec<f64> = rows.iter().map(|r| r.ms_median.max(1e-6)).collect();
    Ok(TtftReport {
        flop_slope: loglog_slope(&xs, &fl),
        time_slope: loglog_slope(&xs, &tm),
        rows,
    })
}
