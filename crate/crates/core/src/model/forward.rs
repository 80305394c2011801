use std::collections::HashMap;

use super::{Activation, LayerVars, ModelConfig, ParamVars};
use crate::error::{Error, Result};
use crate::instrument::Counters;
use crate::numerics::{Scalar, Tape, Tensor, Var};
use crate::ranker::{partition, rank_splits, Mode, RankedSelection};

pub(crate) fn activate<T: Scalar>(tape: &mut Tape<T>, x: Var, act: Activation) -> Var {
    match act {
        Activation::Identity => x,
        Activation::Relu => tape.relu(x),
        Activation::Relu2 => tape.relu2(x),
    }
}

/// `Z = act(X U + b)`, split into the head `Z_h` (first `m_h` columns) and
/// the tail `Z_t` (last `m_t`).
pub fn enrich<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &LayerVars,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let xu = tape.matmul(x, layer.u)?;
    let z = tape.add_row(xu, layer.b)?;
    let z = activate(tape, z, cfg.enricher_activation);
    let zh = tape.slice_cols(z, 0, cfg.m_h())?;
    let zt = tape.slice_cols(z, cfg.m_h(), cfg.m_t())?;
    Ok((zh, zt))
}

/// Gated mixing across the window:
/// `Z_tl * act((V * cos(Z_tr) * mask) Z_tr + b')`, where `v` is already the
/// `C x C` block for this window and `mask` is 1 where a row may read
/// another.
pub fn contextualize<T: Scalar>(
    tape: &mut Tape<T>,
    zt: Var,
    v: Var,
    b_prime: Option<Var>,
    mask: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let c = tape.value(zt).rows();
    let (vm, mm) = (
        tape.value(v).shape().to_vec(),
        tape.value(mask).shape().to_vec(),
    );
    if vm != [c, c] || mm != [c, c] {
        return Err(Error::Shape {
            op: "contextualize",
            left: vm,
            right: mm,
        });
    }
    let half = cfg.m_c();
    let ztl = tape.slice_cols(zt, 0, half)?;
    let ztr = tape.slice_cols(zt, half, half)?;
    let weights = if cfg.ablations.static_parameterization {
        v
    } else {
        let n = tape.row_l2_normalize(ztr);
        let sim = tape.matmul_t(n, false, n, true)?;
        tape.hadamard(v, sim)?
    };
    let mix = tape.hadamard(weights, mask)?;
    let mut y = tape.matmul(mix, ztr)?;
    if let Some(bp) = b_prime {
        y = tape.add_row(y, bp)?;
    }
    let y = activate(tape, y, cfg.contextualizer_activation);
    tape.hadamard(ztl, y)
}

/// `[Z_h | ctx] O`.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, zh: Var, ctx: Var, o: Var) -> Result<Var> {
    let cat = tape.concat_cols(&[zh, ctx])?;
    tape.matmul(cat, o)
}

/// One residual layer: `x + fuse(enrich(rmsnorm(x)), contextualize(..))`.
pub fn layer_forward<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    layer: &LayerVars,
    v: Var,
    mask: Var,
    cfg: &ModelConfig,
) -> Result<Var> {
    let xn = tape.rmsnorm(x, layer.norm_gain)?;
    let (zh, zt) = enrich(tape, xn, layer, cfg)?;
    let ctx = contextualize(tape, zt, v, layer.b_prime, mask, cfg)?;
    let zh = if cfg.ablations.no_bypass {
        let shape = tape.value(zh).shape().to_vec();
        tape.constant(Tensor::zeros(&shape))
    } else {
        zh
    };
    let f = fuse(tape, zh, ctx, layer.o)?;
    tape.add(x, f)
}

/// Mask entry `(i, j)` is 1 iff both rows are real and `positions[j] <=
/// positions[i]`. Padding rows carry `None`.
pub fn causal_mask<T: Scalar>(positions: &[Option<usize>]) -> Tensor<T> {
    let c = positions.len();
    let mut data = vec![T::zero(); c * c];
    for (i, pi) in positions.iter().enumerate() {
        for (j, pj) in positions.iter().enumerate() {
            if let (Some(pi), Some(pj)) = (pi, pj) {
                if pj <= pi {
                    data[i * c + j] = T::one();
                }
            }
        }
    }
    Tensor::matrix(c, c, data)
}

/// Per-pass helper that runs windows through the layer stack, caching the
/// `V` blocks sliced for each window size.
pub(crate) struct Processor<'a> {
    pub pv: &'a ParamVars,
    pub cfg: &'a ModelConfig,
    v_blocks: HashMap<(usize, usize), Var>,
    pub counters: Counters,
}

impl<'a> Processor<'a> {
    pub fn new(pv: &'a ParamVars, cfg: &'a ModelConfig) -> Self {
        Self {
            pv,
            cfg,
            v_blocks: HashMap::new(),
            counters: Counters::default(),
        }
    }

    fn v_block<T: Scalar>(&mut self, tape: &mut Tape<T>, layer: usize, c: usize) -> Result<Var> {
        let v = self.pv.layers[layer].v;
        let full = tape.value(v).rows();
        if c > full {
            return Err(Error::Contract(format!(
                "window of {c} rows exceeds V of {full}"
            )));
        }
        if c == full {
            return Ok(v);
        }
        if let Some(&b) = self.v_blocks.get(&(layer, c)) {
            return Ok(b);
        }
        let b = tape.slice_block(v, 0, 0, c, c)?;
        self.v_blocks.insert((layer, c), b);
        Ok(b)
    }

    /// Drop cached `V` blocks before the tape is truncated under them.
    pub fn forget_blocks(&mut self) {
        self.v_blocks.clear();
    }

    /// Run the stack over a window whose last `owned` real rows belong to
    /// the current split; returns all rows of the final layer.
    pub fn window<T: Scalar>(
        &mut self,
        tape: &mut Tape<T>,
        x: Var,
        positions: &[Option<usize>],
        owned: usize,
    ) -> Result<Var> {
        let c = positions.len();
        let mask = tape.constant(causal_mask(positions));
        let mut x = x;
        for i in 0..self.pv.layers.len() {
            let v = self.v_block(tape, i, c)?;
            x = layer_forward(tape, x, &self.pv.layers[i], v, mask, self.cfg)?;
        }
        self.count_window(c, owned);
        Ok(x)
    }

    fn count_window(&mut self, c: usize, owned: usize) {
        let cfg = self.cfg;
        let l = cfg.layers as u64;
        let (d, m) = (cfg.d as u64, cfg.m() as u64);
        let (c, owned) = (c as u64, owned as u64);
        let enrich_row = m * (d - 1);
        let fuse_row = d * ((cfg.m_h() + cfg.m_c()) as u64 - 1);
        let k = &mut self.counters;
        k.enricher_flops += l * owned * enrich_row;
        k.fuser_flops += l * owned * fuse_row;
        k.recompute_flops += l * (c - owned) * (enrich_row + fuse_row);
        k.contextualizer_flops += l * c * (c - 1) * cfg.m_c() as u64;
    }

    /// Final norm and vocabulary projection of `h`.
    pub fn head<T: Scalar>(&mut self, tape: &mut Tape<T>, h: Var) -> Result<Var> {
        let hn = tape.rmsnorm(h, self.pv.final_norm_gain)?;
        let rows = tape.value(hn).rows() as u64;
        let logits = match self.pv.head {
            Some(w) => tape.matmul(hn, w)?,
            None => tape.matmul_t(hn, false, self.pv.embedding, true)?,
        };
        let vocab = tape.value(logits).cols() as u64;
        self.counters.head_flops += rows * vocab * (self.cfg.d as u64 - 1);
        Ok(logits)
    }
}

/// Output of [`forward_train`].
#[derive(Debug)]
pub struct TrainForward<T> {
    /// `N x vocab`; row `t` predicts token `t + 1`.
    pub logits: Var,
    pub selections: Vec<RankedSelection<T>>,
    pub counters: Counters,
}

/// Training pass over `N` tokens (N divisible by S).
///
/// The ranker runs once on the raw embeddings. Each current split is
/// contextualized in a window of the weighted selected splits, the split
/// itself and zero padding up to `S (k + 1)` rows; padding is masked out,
/// so real rows equal those of an unpadded window. Weights stay on the tape
/// so gradients reach the cosines behind them; the discrete choice does not.
///
/// `pinned` replaces both the selection and its weights with constants.
pub fn forward_train<T: Scalar>(
    tape: &mut Tape<T>,
    pv: &ParamVars,
    tokens: &[usize],
    cfg: &ModelConfig,
    pinned: Option<&[RankedSelection<T>]>,
) -> Result<TrainForward<T>> {
    let s = cfg.split;
    let ranges = partition(tokens.len(), s, Mode::Training)?;
    let emb = tape.embed(pv.embedding, tokens)?;
    let mut proc = Processor::new(pv, cfg);
    let selections = match pinned {
        Some(p) if p.len() == ranges.len() => p.to_vec(),
        Some(p) => {
            return Err(Error::Contract(format!(
                "{} pinned selections for {} splits",
                p.len(),
                ranges.len()
            )))
        }
        None if cfg.ablations.no_ranker => (0..ranges.len()).map(RankedSelection::empty).collect(),
        None => rank_splits(
            tape.value(emb),
            &ranges,
            cfg.ranker(),
            &mut proc.counters.ranker,
        ),
    };
    let width = cfg.window();
    let d = cfg.d;
    let mut owned_rows = Vec::with_capacity(ranges.len());
    for (sel, range) in selections.iter().zip(&ranges) {
        let weights = window_weights(tape, emb, sel, cfg, pinned.is_some())?;
        let mut parts = Vec::with_capacity(sel.k_effective() + 2);
        let mut positions = Vec::with_capacity(width);
        for (chosen, w) in sel.selected.iter().zip(&weights) {
            let rows = tape.slice_rows(emb, chosen.split * s, s)?;
            parts.push(match w {
                Some(w) => tape.scale_by(rows, *w)?,
                None => rows,
            });
            positions.extend((chosen.split * s..(chosen.split + 1) * s).map(Some));
        }
        parts.push(tape.slice_rows(emb, range.start, s)?);
        positions.extend(range.clone().map(Some));
        let real = positions.len();
        if real > width {
            return Err(Error::Contract(format!(
                "window of {real} rows exceeds {width}"
            )));
        }
        if real < width {
            parts.push(tape.constant(Tensor::zeros(&[width - real, d])));
            positions.resize(width, None);
        }
        let x = tape.concat_rows(&parts)?;
        let out = proc.window(tape, x, &positions, s)?;
        owned_rows.push(tape.slice_rows(out, real - s, s)?);
    }
    let h = tape.concat_rows(&owned_rows)?;
    let logits = proc.head(tape, h)?;
    Ok(TrainForward {
        logits,
        selections,
        counters: proc.counters,
    })
}

/// Per selected split, the tape scalar scaling its rows (`None` = unscaled).
fn window_weights<T: Scalar>(
    tape: &mut Tape<T>,
    emb: Var,
    sel: &RankedSelection<T>,
    cfg: &ModelConfig,
    pinned: bool,
) -> Result<Vec<Option<Var>>> {
    let k = sel.k_effective();
    if k == 0 {
        return Ok(Vec::new());
    }
    if cfg.ablations.no_weighting {
        return Ok(vec![None; k]);
    }
    if pinned {
        return Ok(sel
            .selected
            .iter()
            .map(|c| Some(tape.constant(Tensor::scalar(c.weight))))
            .collect());
    }
    let s = cfg.split;
    let q = match cfg.ranker().query {
        crate::ranker::Query::CurrentSplit => sel.current,
        crate::ranker::Query::PreviousSplit => sel.current - 1,
    };
    let scores = sel
        .selected
        .iter()
        .map(|c| tape.maxsim(emb, q * s..(q + 1) * s, c.split * s..(c.split + 1) * s))
        .collect::<Result<Vec<_>>>()?;
    let row = tape.concat_cols(&scores)?;
    let w = tape.normalize_by_max(row);
    (0..k).map(|i| tape.slice_cols(w, i, 1).map(Some)).collect()
}
