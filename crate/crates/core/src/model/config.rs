use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ranker::{Query, RankerConfig};

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
    Relu2,
}

/// Switches that remove one mechanism each.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablations {
    /// Windows hold only the current split.
    pub no_ranker: bool,
    /// Selected splits enter the window unscaled.
    pub no_weighting: bool,
    /// The enricher head is zeroed before fusing.
    pub no_bypass: bool,
    /// The cosine factor in the contextualizer is replaced by ones.
    pub static_parameterization: bool,
    /// `m = d`.
    pub no_expansion: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// `m = expansion * d`.
    pub expansion: usize,
    /// Share of `m` routed through the contextualizer.
    pub tail_fraction: f64,
    pub layers: usize,
    /// Tokens per split (`S`).
    pub split: usize,
    /// Preceding splits contextualized with the current one (`k`).
    pub top_k: usize,
    /// Training sequence length (`N`).
    pub seq_len: usize,
    /// Token ids in use; the table is padded up to `vocab_multiple`.
    pub vocab: usize,
    pub vocab_multiple: usize,
    pub enricher_activation: Activation,
    pub contextualizer_activation: Activation,
    pub contextualizer_bias: bool,
    pub tie_embeddings: bool,
    /// Rank with the previous complete split instead of the current one.
    pub causal_rank: bool,
    pub ablations: Ablations,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            expansion: 4,
            tail_fraction: 0.5,
            layers: 4,
            split: 64,
            top_k: 7,
            seq_len: 512,
            vocab: crate::data::VOCAB,
            vocab_multiple: 64,
            enricher_activation: Activation::Relu2,
            contextualizer_activation: Activation::Identity,
            contextualizer_bias: true,
            tie_embeddings: true,
            causal_rank: false,
            ablations: Ablations::default(),
        }
    }
}

impl ModelConfig {
    pub fn m(&self) -> usize {
        if self.ablations.no_expansion {
            self.d
        } else {
            self.expansion * self.d
        }
    }

    /// Tail width, rounded to the nearest even count.
    pub fn m_t(&self) -> usize {
        2 * (self.tail_fraction * self.m() as f64 / 2.0).round() as usize
    }

    pub fn m_h(&self) -> usize {
        self.m() - self.m_t()
    }

    /// Width of the contextualizer output.
    pub fn m_c(&self) -> usize {
        self.m_t() / 2
    }

    /// Splits contextualized with the current one after ablations.
    pub fn effective_top_k(&self) -> usize {
        if self.ablations.no_ranker {
            0
        } else {
            self.top_k
        }
    }

    /// Largest window, `S * (k + 1)`; the size `V` is stored at.
    pub fn context(&self) -> usize {
        self.split * (self.top_k + 1)
    }

    /// Training window size after ablations.
    pub fn window(&self) -> usize {
        self.split * (self.effective_top_k() + 1)
    }

    pub fn padded_vocab(&self) -> usize {
        self.vocab.div_ceil(self.vocab_multiple.max(1)) * self.vocab_multiple.max(1)
    }

    pub fn ranker(&self) -> RankerConfig {
        RankerConfig {
            split: self.split,
            top_k: self.effective_top_k(),
            query: if self.causal_rank {
                Query::PreviousSplit
            } else {
                Query::CurrentSplit
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.d == 0 || self.layers == 0 || self.split == 0 || self.vocab == 0 {
            return fail("d, layers, split and vocab must be positive".into());
        }
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return fail(format!(
                "tail_fraction {} outside (0, 1]",
                self.tail_fraction
            ));
        }
        if self.expansion == 0 || (!self.ablations.no_expansion && self.m() <= self.d) {
            return fail(format!("expansion {} must give m > d", self.expansion));
        }
        if self.m_t() == 0 || self.m_t() > self.m() {
            return fail(format!(
                "tail width {} invalid for m = {}",
                self.m_t(),
                self.m()
            ));
        }
        if self.seq_len == 0 || self.seq_len % self.split != 0 {
            return fail(format!(
                "seq_len {} must be a positive multiple of split {}",
                self.seq_len, self.split
            ));
        }
        Ok(())
    }
}
