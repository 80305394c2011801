use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub norm_gain: Tensor<T>,
    /// `d x m`.
    pub u: Tensor<T>,
    /// `m`.
    pub b: Tensor<T>,
    /// `C_max x C_max`, sliced top-left for smaller windows.
    pub v: Tensor<T>,
    /// `m_t / 2`.
    pub b_prime: Option<Tensor<T>>,
    /// `(m_h + m_t / 2) x d`.
    pub o: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    /// `vocab x d`; doubles as the output projection when tied.
    pub embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm_gain: Tensor<T>,
    /// `d x vocab`, present only when untied.
    pub head: Option<Tensor<T>>,
}

fn normal<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| T::of(dist.sample(rng))).collect(),
    )
    .expect("shape matches")
}

impl<T: Scalar> ModelParams<T> {
    /// Draws in a fixed order from one seeded stream, so equal seeds give
    /// bitwise-equal parameters.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, m, c) = (cfg.d, cfg.m(), cfg.context());
        let embedding = normal(&mut rng, &[cfg.padded_vocab(), d], 0.02);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                norm_gain: Tensor::filled(&[d], T::one()),
                u: normal(&mut rng, &[d, m], 0.02),
                b: Tensor::zeros(&[m]),
                v: normal(&mut rng, &[c, c], 1e-3),
                b_prime: cfg.contextualizer_bias.then(|| Tensor::zeros(&[cfg.m_c()])),
                o: normal(&mut rng, &[cfg.m_h() + cfg.m_c(), d], 0.02),
            })
            .collect();
        let head = (!cfg.tie_embeddings).then(|| normal(&mut rng, &[d, cfg.padded_vocab()], 0.02));
        Ok(Self {
            embedding,
            layers,
            final_norm_gain: Tensor::filled(&[d], T::one()),
            head,
        })
    }

    /// Same structure, every entry zero.
    pub fn zeros_like(&self) -> Self {
        let z = |t: &Tensor<T>| Tensor::zeros(t.shape());
        Self {
            embedding: z(&self.embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    norm_gain: z(&l.norm_gain),
                    u: z(&l.u),
                    b: z(&l.b),
                    v: z(&l.v),
                    b_prime: l.b_prime.as_ref().map(z),
                    o: z(&l.o),
                })
                .collect(),
            final_norm_gain: z(&self.final_norm_gain),
            head: self.head.as_ref().map(z),
        }
    }

    /// Output projection: the untied head or the embedding table itself.
    pub fn output_table(&self) -> &Tensor<T> {
        self.head.as_ref().unwrap_or(&self.embedding)
    }

    /// Every tensor with its stable name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.norm_gain"), &l.norm_gain));
            out.push((format!("layers.{i}.U"), &l.u));
            out.push((format!("layers.{i}.b"), &l.b));
            out.push((format!("layers.{i}.V"), &l.v));
            if let Some(bp) = &l.b_prime {
                out.push((format!("layers.{i}.b_prime"), bp));
            }
            out.push((format!("layers.{i}.O"), &l.o));
        }
        out.push(("final_norm_gain".to_string(), &self.final_norm_gain));
        if let Some(h) = &self.head {
            out.push(("head".to_string(), h));
        }
        out
    }

    /// Mutable counterpart of [`named`](Self::named), same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.embedding];
        for l in &mut self.layers {
            out.push(&mut l.norm_gain);
            out.push(&mut l.u);
            out.push(&mut l.b);
            out.push(&mut l.v);
            if let Some(bp) = &mut l.b_prime {
                out.push(bp);
            }
            out.push(&mut l.o);
        }
        out.push(&mut self.final_norm_gain);
        if let Some(h) = &mut self.head {
            out.push(h);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            embedding: self.embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    norm_gain: l.norm_gain.cast(),
                    u: l.u.cast(),
                    b: l.b.cast(),
                    v: l.v.cast(),
                    b_prime: l.b_prime.as_ref().map(|t| t.cast()),
                    o: l.o.cast(),
                })
                .collect(),
            final_norm_gain: self.final_norm_gain.cast(),
            head: self.head.as_ref().map(|t| t.cast()),
        }
    }

    /// Rebuild from named tensors in [`named`](Self::named) order, checking
    /// names and shapes against `template`.
    pub fn from_named(template: &Self, tensors: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let mut out = template.clone();
        let expected: Vec<(String, Vec<usize>)> = template
            .named()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if expected.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                tensors.len()
            )));
        }
        for ((slot, (name, shape)), (got_name, t)) in
            out.tensors_mut().into_iter().zip(&expected).zip(tensors)
        {
            if *name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {got_name} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(out)
    }
}

/// Parameters placed on a tape.
#[derive(Clone, Debug)]
pub struct LayerVars {
    pub norm_gain: Var,
    pub u: Var,
    pub b: Var,
    pub v: Var,
    pub b_prime: Option<Var>,
    pub o: Var,
}

#[derive(Clone, Debug)]
pub struct ParamVars {
    pub embedding: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm_gain: Var,
    pub head: Option<Var>,
}

impl ParamVars {
    pub fn load<T: Scalar>(tape: &mut Tape<T>, p: &ModelParams<T>, requires_grad: bool) -> Self {
        let mut leaf = |t: &Tensor<T>| tape.leaf(t.clone(), requires_grad);
        let embedding = leaf(&p.embedding);
        let layers = p
            .layers
            .iter()
            .map(|l| LayerVars {
                norm_gain: leaf(&l.norm_gain),
                u: leaf(&l.u),
                b: leaf(&l.b),
                v: leaf(&l.v),
                b_prime: l.b_prime.as_ref().map(&mut leaf),
                o: leaf(&l.o),
            })
            .collect();
        let final_norm_gain = leaf(&p.final_norm_gain);
        let head = p.head.as_ref().map(&mut leaf);
        Self {
            embedding,
            layers,
            final_norm_gain,
            head,
        }
    }

    /// Vars in [`ModelParams::named`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        for l in &self.layers {
            out.extend([l.norm_gain, l.u, l.b, l.v]);
            out.extend(l.b_prime);
            out.push(l.o);
        }
        out.push(self.final_norm_gain);
        out.extend(self.head);
        out
    }

    /// Gradients accumulated on `tape`, shaped like `template`.
    pub fn grads<T: Scalar>(&self, tape: &Tape<T>, template: &ModelParams<T>) -> ModelParams<T> {
        let mut out = template.zeros_like();
        for (slot, v) in out.tensors_mut().into_iter().zip(self.vars()) {
            slot.data_mut().copy_from_slice(&tape.grad(v));
        }
        out
    }
}
