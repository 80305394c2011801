//! AdamW with cosine decay, global-norm clipping and seeded, resumable data
//! order.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::BlockStream;
use crate::error::{Error, Result};
use crate::instrument::Counters;
use crate::model::{forward_train, ModelConfig, ModelParams, ParamVars};
use crate::numerics::{Scalar, Tape};


#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Schedule {
    /// Cosine from the peak down to 10% of it at the last step.
    #[default]
    #[serde(rename = "cosine_to_10pct")]
    Cosine,
    #[serde(rename = "constant")]
    Constant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub peak_lr: f64,
    pub schedule: Schedule,
    pub total_steps: usize,
    pub batch_sequences: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Steps between checkpoints; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-3,
            schedule: Schedule::Cosine,
            total_steps: 1000,
            batch_sequences: 4,
            betas: (0.9, 0.95),
            eps: 1e-12,
            weight_decay: 0.1,
            clip_norm: 1.0,
            seed: 11,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.batch_sequences == 0 {
            return Err(Error::Config(
                "total_steps and batch_sequences must be positive".into(),
            ));
        }
        if !(self.peak_lr > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::Config(
                "peak_lr and clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let p = cfg.peak_lr;
    match cfg.schedule {
        Schedule::Constant => p,
        Schedule::Cosine if cfg.total_steps <= 1 => p,
        Schedule::Cosine => {
            let t = step.min(cfg.total_steps - 1) as f64 / (cfg.total_steps - 1) as f64;
            0.1 * p + 0.45 * p * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

/// Scales every gradient by `max_norm / g` when the global norm `g` exceeds
/// `max_norm`; returns the factor applied.
pub fn clip_global_norm<T: Scalar>(
    grads: &mut ModelParams<T>,
    max_norm: f64,
    step: usize,
) -> Result<f64> {
    let mut sq = 0.0f64;
    for t in grads.tensors_mut() {
        for &x in t.data() {
            let x = x.as_f64();
            sq += x * x;
        }
    }
    if !sq.is_finite() {
        return Err(Error::NonFinite {
            what: "gradient",
            step,
        });
    }
    let g = sq.sqrt();
    if g <= max_norm {
        return Ok(1.0);
    }
    let scale = max_norm / g;
    let s = T::of(scale);
    for t in grads.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x *= s);
    }
    Ok(scale)
}

/// Position in the data stream; together with the config it fixes every
/// future batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub cursor: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T> {
    /// Completed optimizer steps.
    pub step: usize,
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
    pub rng: RngState,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(params: &ModelParams<T>, seed: u64) -> Self {
        Self {
            step: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
            rng: RngState { seed, cursor: 0 },
        }
    }
}

/// One decoupled-decay AdamW update with bias correction. Decay touches
/// matrices only; vectors (biases, norm gains) are exempt.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut TrainState<T>,
    lr: f64,
    cfg: &TrainConfig,
) {
    let t = (state.step + 1) as i32;
    let (b1, b2) = cfg.betas;
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let g_named = grads.named();
    let (mut ps, mut ms, mut vs) = (
        params.tensors_mut(),
        state.m.tensors_mut(),
        state.v.tensors_mut(),
    );
    for i in 0..ps.len() {
        let decay = if ps[i].rank() == 2 {
            1.0 - lr * cfg.weight_decay
        } else {
            1.0
        };
        let g = g_named[i].1.data();
        let (p, m, v) = (ps[i].data_mut(), ms[i].data_mut(), vs[i].data_mut());
        for j in 0..p.len() {
            let gj = g[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::of(mj);
            v[j] = T::of(vj);
            let update = (mj / c1) / ((vj / c2).sqrt() + cfg.eps);
            p[j] = T::of(p[j].as_f64() * decay - lr * update);
        }
    }
    state.step += 1;
}

/// Names of the tensors that receive weight decay.
pub fn decayed_parameters<T: Scalar>(params: &ModelParams<T>) -> Vec<String> {
    params
        .named()
        .into_iter()
        .filter(|(_, t)| t.rank() == 2)
        .map(|(n, _)| n)
        .collect()
}

/// Mean next-token loss of `blocks` (each `N + 1` tokens) and, when
/// `with_grads`, the averaged gradients.
pub fn batch_loss<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    blocks: &[Vec<usize>],
    with_grads: bool,
) -> Result<(f64, Option<ModelParams<T>>, Counters)> {
    let mut total = 0.0;
    let mut grads: Option<ModelParams<T>> = None;
    let mut counters = Counters::default();
    let mut tape = Tape::new();
    let inv = T::of(1.0 / blocks.len() as f64);
    for block in blocks {
        if block.len() != cfg.seq_len + 1 {
            return Err(Error::Contract(format!(
                "block of {} tokens, expected {}",
                block.len(),
                cfg.seq_len + 1
            )));
        }
        tape.clear();
        let pv = ParamVars::load(&mut tape, params, with_grads);
        let out = forward_train(&mut tape, &pv, &block[..cfg.seq_len], cfg, None)?;
        let loss = tape.softmax_cross_entropy(out.logits, &block[1..])?;
        total += tape.value(loss).data()[0].as_f64();
        counters += out.counters;
        if with_grads {
            tape.backward(loss)?;
            let g = pv.grads(&tape, params);
            match &mut grads {
                None => {
                    let mut g = g;
                    g.tensors_mut()
                        .into_iter()
                        .for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= inv));
                    grads = Some(g);
                }
                Some(acc) => {
                    for (a, b) in acc.tensors_mut().into_iter().zip(g.named()) {
                        a.data_mut()
                            .iter_mut()
                            .zip(b.1.data())
                            .for_each(|(x, y)| *x += *y * inv);
                    }
                }
            }
        }
    }
    Ok((total / blocks.len() as f64, grads, counters))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub ppl: f64,
    pub tok_per_s: f64,
    pub grad_scale: f64,
    pub counters: Counters,
}

pub const METRICS_HEADER: &str = "step\tlr\tloss\tppl\ttok_per_s\tflops";

impl StepLog {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{:.6e}\t{:.6}\t{:.4}\t{:.1}\t{}",
            self.step,
            self.lr,
            self.loss,
            self.ppl,
            self.tok_per_s,
            self.counters.total()
        )
    }
}

/// Parameters, optimizer state and both configs of one run.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: ModelConfig,
    pub cfg: TrainConfig,
    pub params: ModelParams<T>,
    pub state: TrainState<T>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run; parameters are initialised from `cfg.seed`.
    pub fn new(model: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        let params = ModelParams::init(&model, cfg.seed)?;
        let state = TrainState::new(&params, cfg.seed);
        Ok(Self {
            model,
            cfg,
            params,
            state,
        })
    }

    pub fn done(&self) -> bool {
        self.state.step >= self.cfg.total_steps
    }

    /// One optimizer step on the next batch of `stream`. On a non-finite
    /// loss or gradient nothing is modified.
    pub fn step(&mut self, stream: &mut dyn BlockStream) -> Result<StepLog> {
        let started = Instant::now();
        stream.seek(self.state.rng.cursor);
        let blocks: Vec<_> = (0..self.cfg.batch_sequences)
            .map(|_| stream.next_block())
            .collect();
        let step = self.state.step;
        let (loss, grads, counters) = batch_loss(&self.params, &self.model, &blocks, true)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "loss", step });
        }
        let mut grads = grads.expect("gradients requested");
        let grad_scale = clip_global_norm(&mut grads, self.cfg.clip_norm, step)?;
        let lr = lr_at(step, &self.cfg);
        adamw_step(&mut self.params, &grads, &mut self.state, lr, &self.cfg);
        self.state.rng.cursor = stream.cursor();
        let secs = started.elapsed().as_secs_f64().max(1e-9);
        Ok(StepLog {
            step,
            lr,
            loss,
            ppl: loss.exp(),
            tok_per_s: (blocks.len() * self.model.seq_len) as f64 / secs,
            grad_scale,
            counters,
        })
    }
}

/// Run until `total_steps` (or `max_steps` more steps), writing one metrics
/// line per step. `on_step` sees the trainer after every successful step,
/// e.g. to checkpoint; a failing step leaves the trainer at its last good
/// state and ends the run with the error.
pub fn train<T: Scalar>(
    trainer: &mut Trainer<T>,
    stream: &mut dyn BlockStream,
    max_steps: Option<usize>,
    metrics: &mut dyn Write,
    mut on_step: impl FnMut(&Trainer<T>, &StepLog) -> Result<()>,
) -> Result<Vec<StepLog>> {
    let mut logs = Vec::new();
    if trainer.state.step == 0 {
        writeln!(metrics, "{METRICS_HEADER}")?;
    }
    let end = match max_steps {
        Some(n) => (trainer.state.step + n).min(trainer.cfg.total_steps),
        None => trainer.cfg.total_steps,
    };
    while trainer.state.step < end {
        let log = trainer.step(stream)?;
        writeln!(metrics, "{}", log.tsv())?;
        on_step(trainer, &log)?;
        logs.push(log);
    }
    metrics.flush()?;
    Ok(logs)
}
