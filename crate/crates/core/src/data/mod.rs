//! Byte-level tokenization, corpus batching and synthetic passkey retrieval
//! tasks.

use std::io::Write;
use std::ops::Range;
use std::path::Path;

use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};


/// Beginning-of-sequence marker, the first id above the byte range.
pub const BOS: usize = 256;
/// Ids in use: 256 bytes plus [`BOS`].
pub const VOCAB: usize = 257;

pub fn byte_encode(text: impl AsRef<[u8]>) -> Vec<usize> {
    text.as_ref().iter().map(|&b| b as usize).collect()
}

/// Inverse of [`byte_encode`]; reserved ids decode to U+FFFD.
pub fn byte_decode(tokens: &[usize]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    for &t in tokens {
        if t < 256 {
            bytes.push(t as u8);
        } else {
            out.push_str(&String::from_utf8_lossy(&bytes));
            bytes.clear();
            out.push(char::REPLACEMENT_CHARACTER);
        }
    }
    out.push_str(&String::from_utf8_lossy(&bytes));
    out
}

/// Source of training blocks of `N + 1` tokens, resumable from a cursor.
pub trait BlockStream {
    fn next_block(&mut self) -> Vec<usize>;
    fn cursor(&self) -> u64;
    fn seek(&mut self, cursor: u64);
}

/// Non-overlapping blocks of `N + 1` tokens, visited in a fresh seeded
/// order every epoch. The position in the stream is a single cursor, so a
/// stream resumes exactly from `(seed, cursor)`.
#[derive(Clone, Debug)]
pub struct CorpusBatches {
    tokens: Vec<usize>,
    blocks: Vec<Range<usize>>,
    seed: u64,
    cursor: u64,
    order: Vec<usize>,
    order_epoch: Option<u64>,
}

impl CorpusBatches {
    pub fn new(bytes: &[u8], seq_len: usize, seed: u64) -> Result<Self> {
        let block = seq_len + 1;
        if bytes.len() < block {
            return Err(Error::Contract(format!(
                "corpus of {} bytes is shorter than one block of {block}",
                bytes.len()
            )));
        }
        let blocks = (0..bytes.len() / block)
            .map(|i| i * block..(i + 1) * block)
            .collect();
        Ok(Self {
            tokens: byte_encode(bytes),
            blocks,
            seed,
            cursor: 0,
            order: Vec::new(),
            order_epoch: None,
        })
    }

    pub fn open(path: &Path, seq_len: usize, seed: u64) -> Result<Self> {
        Self::new(&std::fs::read(path)?, seq_len, seed)
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.order_epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch);
            self.order = (0..self.blocks.len()).collect();
            self.order.shuffle(&mut rng);
            self.order_epoch = Some(epoch);
        }
        &self.order
    }

    pub fn next_batch(&mut self, batch: usize) -> Vec<Vec<usize>> {
        (0..batch).map(|_| self.next_block()).collect()
    }
}

impl BlockStream for CorpusBatches {
    fn next_block(&mut self) -> Vec<usize> {
        let n = self.blocks.len() as u64;
        let (epoch, i) = (self.cursor / n, (self.cursor % n) as usize);
        let b = self.epoch_order(epoch)[i];
        self.cursor += 1;
        self.tokens[self.blocks[b].clone()].to_vec()
    }

    fn cursor(&self) -> u64 {
        self.cursor
    }

    fn seek(&mut self, cursor: u64) {
        self.cursor = cursor;
    }
}

/// Block stream over the bytes of `path`.
pub fn corpus_batches(path: &Path, seq_len: usize, seed: u64) -> Result<CorpusBatches> {
    CorpusBatches::open(path, seq_len, seed)
}

/// Order-0 entropy of a byte string in nats; `exp` of it is the perplexity
/// of the best context-free byte model.
pub fn byte_entropy(bytes: &[u8]) -> f64 {
    let mut counts = [0u64; 256];
    bytes.iter().for_each(|&b| counts[b as usize] += 1);
    let n = bytes.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Haystack of key-value lines; one of them is asked for.
    PasskeyKv,
    /// Essay-like filler with a single numeric needle.
    PasskeyNumeric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Target prompt length in tokens.
    pub haystack_len: usize,
    /// Relative position of the needle, 0 = first line, 1 = last.
    pub needle_depth: f64,
    pub value_digits: usize,
    pub key_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, haystack_len: usize, needle_depth: f64, seed: u64) -> Self {
        Self {
            kind,
            haystack_len,
            needle_depth,
            value_digits: 9,
            key_len: 4,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NiahInstance {
    pub prompt: Vec<usize>,
    pub answer: String,
    /// Line index of the needle and its byte offset in the prompt.
    pub needle_line: usize,
    pub needle_offset: usize,
    pub depth: f64,
}

const FILLER: [&str; 6] = [
    "The grass is green.",
    "The sky is blue.",
    "The sun is yellow.",
    "Here we go.",
    "There and back again.",
    "The river runs to the sea.",
];

fn random_key(rng: &mut ChaCha8Rng, len: usize) -> String {
    (0..len)
        .map(|_| rng.random_range(b'A'..=b'Z') as char)
        .collect()
}

fn random_value(rng: &mut ChaCha8Rng, digits: usize) -> String {
    (0..digits)
        .map(|_| rng.random_range(b'0'..=b'9') as char)
        .collect()
}

pub fn needle_line(key: &str, value: &str) -> String {
    format!("The pass key for {key} is {value}.\n")
}

/// The retrieval question; the answer is its continuation.
pub fn question(key: &str) -> String {
    format!("The pass key for {key} is ")
}

/// Distinct random keys.
fn keys(rng: &mut ChaCha8Rng, count: usize, len: usize) -> Vec<String> {
    let mut out: Vec<String> = Vec::with_capacity(count);
    while out.len() < count {
        let k = random_key(rng, len);
        if !out.contains(&k) {
            out.push(k);
        }
    }
    out
}

/// Haystack lines (needle included) plus the needle index, key and value.
fn haystack(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> (Vec<String>, usize, String, String) {
    let kl = spec.key_len;
    let line_len = needle_line(&"K".repeat(kl), &"0".repeat(spec.value_digits)).len();
    let room = spec
        .haystack_len
        .saturating_sub(question(&"K".repeat(kl)).len());
    match spec.kind {
        TaskKind::PasskeyKv => {
            let n = ((room as f64 / line_len as f64).round() as usize).max(1);
            let ks = keys(rng, n, kl);
            let lines: Vec<String> = ks
                .iter()
                .map(|k| needle_line(k, &random_value(rng, spec.value_digits)))
                .collect();
            let at = needle_index(spec.needle_depth, n);
            let value = lines[at][kl + 21..kl + 21 + spec.value_digits].to_string();
            (lines, at, ks[at].clone(), value)
        }
        TaskKind::PasskeyNumeric => {
            let key = random_key(rng, kl);
            let value = random_value(rng, spec.value_digits);
            let mut lines = Vec::new();
            let mut used = line_len;
            while used < room {
                let mut l = String::new();
                while l.len() < 40 {
                    l.push_str(FILLER[rng.random_range(0..FILLER.len())]);
                    l.push(' ');
                }
                l.pop();
                l.push('\n');
                used += l.len();
                lines.push(l);
            }
            let at = needle_index(spec.needle_depth, lines.len() + 1);
            lines.insert(at, needle_line(&key, &value));
            (lines, at, key, value)
        }
    }
}

fn needle_index(depth: f64, lines: usize) -> usize {
    ((depth.clamp(0.0, 1.0) * lines as f64).floor() as usize).min(lines - 1)
}

/// One retrieval instance, reproducible from `spec`.
pub fn gen_niah(spec: &TaskSpec) -> NiahInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lines, at, key, value) = haystack(spec, &mut rng);
    let needle_offset = lines[..at].iter().map(|l| l.len()).sum();
    let mut text: String = lines.concat();
    text.push_str(&question(&key));
    NiahInstance {
        prompt: byte_encode(&text),
        answer: value,
        needle_line: at,
        needle_offset,
        depth: spec.needle_depth,
    }
}

/// Exact recall: 1 iff `answer` appears within the first 64 generated
/// tokens.
pub fn score_niah(output: &str, answer: &str) -> f64 {
    let head = &output.as_bytes()[..output.len().min(64)];
    let hit = !answer.is_empty() && head.windows(answer.len()).any(|w| w == answer.as_bytes());
    if hit {
        1.0
    } else {
        0.0
    }
}

/// Training stream of passkey instances. Each block holds between one and
/// `floor((N + 1 - L) / L)` haystack lines of length `L`, then question lines
/// that repeat a random haystack line with its answer, cut to `N + 1` tokens.
/// Small haystacks leave every selected split a valid source, which is what
/// gets the copy behaviour started. Block `i` depends only on `(seed, i)`.
#[derive(Clone, Debug)]
pub struct PasskeyStream {
    pub seq_len: usize,
    pub value_digits: usize,
    pub key_len: usize,
    seed: u64,
    cursor: u64,
}

impl PasskeyStream {
    pub fn new(seq_len: usize, value_digits: usize, seed: u64) -> Self {
        Self {
            seq_len,
            value_digits,
            key_len: 4,
            seed,
            cursor: 0,
        }
    }

    pub fn block(&self, index: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let total = self.seq_len + 1;
        let line_len = needle_line(&"K".repeat(self.key_len), &"0".repeat(self.value_digits)).len();
        let most = (total.saturating_sub(line_len) / line_len).max(1);
        let n = rng.random_range(1..=most);
        let ks = keys(&mut rng, n, self.key_len);
        let values: Vec<String> = (0..n)
            .map(|_| random_value(&mut rng, self.value_digits))
            .collect();
        let mut text = String::new();
        for (k, v) in ks.iter().zip(&values) {
            text.push_str(&needle_line(k, v));
        }
        while text.len() < total {
            let asked = rng.random_range(0..n);
            text.push_str(&needle_line(&ks[asked], &values[asked]));
        }
        let mut tokens = byte_encode(&text);
        tokens.truncate(total);
        tokens
    }
}

impl BlockStream for PasskeyStream {
    fn next_block(&mut self) -> Vec<usize> {
        let b = self.block(self.cursor);
        self.cursor += 1;
        b
    }

    fn cursor(&self) -> u64 {
        self.cursor
    }

    fn seek(&mut self, cursor: u64) {
        self.cursor = cursor;
    }
}

#[derive(Serialize, Deserialize)]
struct DumpLine {
    prompt_b64: String,
    answer: String,
    depth: f64,
    len: usize,
}

/// Write instances one JSON object per line.
pub fn dump_tasks(out: &mut impl Write, instances: &[NiahInstance]) -> Result<()> {
    let engine = base64::engine::general_purpose::STANDARD;
    for inst in instances {
        let bytes: Vec<u8> = inst.prompt.iter().map(|&t| t as u8).collect();
        let line = DumpLine {
            prompt_b64: engine.encode(&bytes),
            answer: inst.answer.clone(),
            depth: inst.depth,
            len: inst.prompt.len(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

/// Read back a dump written by [`dump_tasks`] as (prompt, answer, depth).
pub fn load_tasks(text: &str) -> Result<Vec<(Vec<usize>, String, f64)>> {
    let engine = base64::engine::general_purpose::STANDARD;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let d: DumpLine = serde_json::from_str(l)?;
            let bytes = engine
                .decode(d.prompt_b64)
                .map_err(|e| Error::Contract(format!("bad prompt encoding: {e}")))?;
            Ok((byte_encode(bytes), d.answer, d.depth))
        })
        .collect()
}
