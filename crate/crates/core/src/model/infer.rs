use super::forward::Processor;
use super::{ModelConfig, ModelParams, ParamVars};
use crate::error::{Error, Result};
use crate::instrument::Counters;
use crate::numerics::{Mark, Scalar, Tape, Tensor};
use crate::ranker::{
    assemble_window, partition, rank_splits, IncrementalRanker, Mode, RankedSelection,
};

/// Logits for every position of an arbitrary-length sequence.
#[derive(Debug)]
pub struct InferForward<T> {
    pub logits: Tensor<T>,
    pub selections: Vec<RankedSelection<T>>,
    pub counters: Counters,
}

fn selection_for<T: Scalar>(sel: RankedSelection<T>, cfg: &ModelConfig) -> RankedSelection<T> {
    if cfg.ablations.no_weighting {
        sel.unweighted()
    } else {
        sel
    }
}

/// Full forward pass without gradients. The ranker runs once over the whole
/// sequence; the last split may be partial and windows are not padded.
pub fn forward_infer<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    tokens: &[usize],
    cfg: &ModelConfig,
) -> Result<InferForward<T>> {
    if tokens.is_empty() {
        return Err(Error::Contract("empty sequence".into()));
    }
    let mark = tape.mark();
    let emb_var = tape.embed(pv.embedding, tokens)?;
    let emb = tape.value(emb_var).clone();
    let ranges = partition(tokens.len(), cfg.split, Mode::Inference)?;
    let mut proc = Processor::new(pv, cfg);
    let selections: Vec<_> = if cfg.ablations.no_ranker {
        (0..ranges.len()).map(RankedSelection::empty).collect()
    } else {
        rank_splits(&emb, &ranges, cfg.ranker(), &mut proc.counters.ranker)
            .into_iter()
            .map(|s| selection_for(s, cfg))
            .collect()
    };
    // only the owned rows of each window outlive it, so long prompts stay
    // within memory
    let mut hidden = Vec::with_capacity(tokens.len() * cfg.d);
    for (sel, range) in selections.iter().zip(&ranges) {
        let w = assemble_window(sel, range.clone(), &emb, cfg.split);
        let positions: Vec<_> = w.positions.iter().map(|&p| Some(p)).collect();
        let real = positions.len();
        let window_mark = tape.mark();
        let x = tape.constant(w.rows);
        let out = proc.window(tape, x, &positions, range.len())?;
        hidden.extend_from_slice(
            tape.value(out)
                .slice_rows(real - range.len(), range.len())
                .data(),
        );
        proc.forget_blocks();
        tape.truncate(window_mark);
    }
    let h = tape.constant(Tensor::matrix(tokens.len(), cfg.d, hidden));
    let logits = proc.head(tape, h)?;
    let logits = tape.value(logits).clone();
    tape.truncate(mark);
    Ok(InferForward {
        logits,
        selections,
        counters: proc.counters,
    })
}

/// Index of the largest logit among the first `vocab` entries.
pub fn greedy<T: Scalar>(logits: &[T], vocab: usize) -> usize {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate().take(vocab) {
        if x > logits[best] {
            best = i;
        }
    }
    best
}

/// Token-by-token decoder. The prompt is processed in one full pass; every
/// later token re-ranks the current split and recomputes its window.
pub struct Generator<T> {
    cfg: ModelConfig,
    tape: Tape<T>,
    pv: ParamVars,
    base: Mark,
    ranker: IncrementalRanker<T>,
    tokens: Vec<usize>,
    emb: Vec<T>,
    pub counters: Counters,
    pub last_selection: Option<RankedSelection<T>>,
}

impl<T: Scalar> Generator<T> {
    pub fn new(params: &ModelParams<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut tape = Tape::new();
        let pv = ParamVars::load(&mut tape, params, false);
        let base = tape.mark();
        Ok(Self {
            cfg: cfg.clone(),
            tape,
            pv,
            base,
            ranker: IncrementalRanker::new(cfg.ranker(), cfg.d),
            tokens: Vec::new(),
            emb: Vec::new(),
            counters: Counters::default(),
            last_selection: None,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    fn ingest(&mut self, tokens: &[usize]) -> Result<()> {
        let table = self.tape.value(self.pv.embedding);
        let d = self.cfg.d;
        let start = self.emb.len();
        for &t in tokens {
            if t >= table.rows() {
                return Err(Error::Contract(format!("token id {t} outside vocabulary")));
            }
            self.emb.extend_from_slice(table.row(t));
        }
        self.ranker.extend(&self.emb[start..]);
        self.tokens.extend_from_slice(tokens);
        debug_assert_eq!(self.emb.len(), self.tokens.len() * d);
        Ok(())
    }

    /// Feed the prompt; returns the logits for the first new token.
    pub fn prefill(&mut self, prompt: &[usize]) -> Result<Vec<T>> {
        if !self.tokens.is_empty() {
            return Err(Error::Contract("prefill on a non-empty generator".into()));
        }
        self.ingest(prompt)?;
        let out = forward_infer(&mut self.tape, &self.pv, prompt, &self.cfg)?;
        self.counters += out.counters;
        self.last_selection = out.selections.last().cloned();
        Ok(out.logits.row(out.logits.rows() - 1).to_vec())
    }

    /// Append one token; returns the logits for the next.
    pub fn push(&mut self, token: usize) -> Result<Vec<T>> {
        self.ingest(&[token])?;
        self.step()
    }

    fn step(&mut self) -> Result<Vec<T>> {
        let cfg = &self.cfg;
        let (_, range) = self.ranker.current();
        let sel = if cfg.ablations.no_ranker {
            RankedSelection::empty(range.start / cfg.split)
        } else {
            self.ranker.counters = Default::default();
            let sel = selection_for(self.ranker.select(), cfg);
            self.counters.ranker += self.ranker.counters;
            sel
        };
        let emb = Tensor::matrix(self.tokens.len(), cfg.d, self.emb.clone());
        let w = assemble_window(&sel, range.clone(), &emb, cfg.split);
        let positions: Vec<_> = w.positions.iter().map(|&p| Some(p)).collect();
        let mut proc = Processor::new(&self.pv, cfg);
        let x = self.tape.constant(w.rows);
        let out = proc.window(&mut self.tape, x, &positions, range.len())?;
        let last = self.tape.slice_rows(out, positions.len() - 1, 1)?;
        let logits = proc.head(&mut self.tape, last)?;
        let row = self.tape.value(logits).data().to_vec();
        self.counters += proc.counters;
        self.tape.truncate(self.base);
        self.last_selection = Some(sel);
        Ok(row)
    }
}

/// Greedy continuation of `prompt` by `max_new` tokens; returns prompt plus
/// the new tokens.
pub fn generate<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    prompt: &[usize],
    max_new: usize,
) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::Contract("generate needs a non-empty prompt".into()));
    }
    if max_new == 0 {
        return Ok(prompt.to_vec());
    }
    let mut g = Generator::new(params, cfg)?;
    let mut logits = g.prefill(prompt)?;
    for i in 0..max_new {
        let t = greedy(&logits, cfg.vocab);
        if i + 1 == max_new {
            g.tokens.push(t);
            break;
        }
        logits = g.push(t)?;
    }
    Ok(g.tokens)
}
