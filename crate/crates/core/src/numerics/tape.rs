//! Wengert tape: operations are recorded in execution order and replayed
//! backwards to accumulate gradients.
//!
//! Tensors live in an arena owned by the tape and are addressed by [`Var`].
//! An operation is recorded only when at least one operand requires a
//! gradient, so inference reuses the same code paths without building a
//! graph.

use super::{dot, l2_normalize_rows, maxsim_normalized, Scalar, Tensor};
use crate::error::{Error, Result};

const RMS_EPS: f64 = 1e-6;

/// Handle to a tensor stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Borrowed view of one arena slot: value, accumulated gradient (if any was
/// allocated) and the requires-grad flag.
#[derive(Debug)]
pub struct DualTensor<'a, T> {
    pub value: &'a Tensor<T>,
    pub grad: Option<&'a [T]>,
    pub requires_grad: bool,
}

#[derive(Debug)]
enum Op<T> {
    Matmul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    Hadamard {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        c: T,
    },
    ScaleBy {
        a: Var,
        s: Var,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    SliceBlock {
        a: Var,
        r0: usize,
        c0: usize,
    },
    Transpose {
        a: Var,
    },
    Relu {
        a: Var,
    },
    Relu2 {
        a: Var,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    RowL2Normalize {
        a: Var,
        inv_norm: Vec<T>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    MaxSim {
        emb: Var,
        matches: Vec<(usize, usize)>,
    },
    NormalizeByMax {
        scores: Var,
        argmax: Option<usize>,
    },
    Sum {
        a: Var,
    },
}

#[derive(Debug)]
struct Record<T> {
    out: Var,
    op: Op<T>,
}

/// Arena of tensors plus the ordered list of differentiable operations that
/// produced them.
#[derive(Debug, Default)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    requires: Vec<bool>,
    records: Vec<Record<T>>,
    macs: u64,
}

/// Arena position that [`Tape::truncate`] can roll back to.
#[derive(Clone, Copy, Debug)]
pub struct Mark {
    nodes: usize,
    records: usize,
}

fn shape_err<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn grad_slot<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    requires: &[bool],
    v: Var,
    len: usize,
) -> Option<&'g mut Vec<T>> {
    if !requires[v.0] {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            grads: Vec::new(),
            requires: Vec::new(),
            records: Vec::new(),
            macs: 0,
        }
    }

    fn alloc(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires_grad);
        Var(self.values.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, inputs: &[Var], op: impl FnOnce() -> Op<T>) -> Var {
        let requires = inputs.iter().any(|v| self.requires[v.0]);
        let out = self.alloc(value, requires);
        if requires {
            self.records.push(Record { out, op: op() });
        }
        out
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.alloc(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.alloc(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.alloc(value, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn node(&self, v: Var) -> DualTensor<'_, T> {
        DualTensor {
            value: &self.values[v.0],
            grad: self.grads[v.0].as_deref(),
            requires_grad: self.requires[v.0],
        }
    }

    /// Accumulated gradient, all-zero when nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Vec<T> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![T::zero(); self.values[v.0].len()])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn recorded_ops(&self) -> usize {
        self.records.len()
    }

    /// Multiply-adds performed by matrix products since creation.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn mark(&self) -> Mark {
        Mark {
            nodes: self.values.len(),
            records: self.records.len(),
        }
    }

    /// Drop every tensor and record created after `mark`.
    pub fn truncate(&mut self, mark: Mark) {
        self.values.truncate(mark.nodes);
        self.grads.truncate(mark.nodes);
        self.requires.truncate(mark.nodes);
        self.records.truncate(mark.records);
    }

    pub fn clear(&mut self) {
        self.values.clear();
        self.grads.clear();
        self.requires.clear();
        self.records.clear();
        self.macs = 0;
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- algebra

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let (m, k) = if ta {
            (va.cols(), va.rows())
        } else {
            (va.rows(), va.cols())
        };
        let (k2, n) = if tb {
            (vb.cols(), vb.rows())
        } else {
            (vb.rows(), vb.cols())
        };
        if k != k2 {
            return Err(shape_err("matmul", va, vb));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, va.data(), ta, vb.data(), tb, &mut out, false);
        self.macs += (m * k * n) as u64;
        Ok(
            self.push(Tensor::matrix(m, n, out), &[a, b], || Op::Matmul {
                a,
                b,
                ta,
                tb,
            }),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(shape_err("add", va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], || Op::Add { a, b }))
    }

    /// Add a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (&self.values[a.0], &self.values[row.0]);
        let c = va.cols();
        if vr.len() != c {
            return Err(shape_err("add_row", va, vr));
        }
        let mut data = va.data().to_vec();
        for r in data.chunks_mut(c.max(1)) {
            r.iter_mut().zip(vr.data()).for_each(|(x, &b)| *x += b);
        }
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, row], || Op::AddRow { a, row }))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        if va.shape() != vb.shape() {
            return Err(shape_err("hadamard", va, vb));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(value, &[a, b], || Op::Hadamard { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.values[a.0].map(|x| x * c);
        self.push(value, &[a], || Op::Scale { a, c })
    }

    /// Multiply every element of `a` by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        let (va, vs) = (&self.values[a.0], &self.values[s.0]);
        if vs.len() != 1 {
            return Err(shape_err("scale_by", va, vs));
        }
        let c = vs.data()[0];
        let value = va.map(|x| x * c);
        Ok(self.push(value, &[a, s], || Op::ScaleBy { a, s }))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let va = &self.values[a.0];
        let (r, c) = (va.rows(), va.cols());
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = va.data()[i * c + j];
            }
        }
        self.push(Tensor::matrix(c, r, data), &[a], || Op::Transpose { a })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.values[parts[0].0].rows();
        let mut width = 0;
        for p in parts {
            let v = &self.values[p.0];
            if v.rows() != rows {
                return Err(shape_err("concat_cols", &self.values[parts[0].0], v));
            }
            width += v.cols();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.values[p.0].row(r));
            }
        }
        let parts = parts.to_vec();
        let inputs = parts.clone();
        Ok(self.push(Tensor::matrix(rows, width, data), &inputs, || {
            Op::ConcatCols { parts }
        }))
    }

    /// Columns `start..start + width`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let va = &self.values[a.0];
        if start + width > va.cols() {
            return Err(Error::Contract(format!(
                "slice_cols {start}..{} out of {} columns",
                start + width,
                va.cols()
            )));
        }
        let data = (0..va.rows())
            .flat_map(|r| va.row(r)[start..start + width].iter().copied())
            .collect();
        let value = Tensor::matrix(va.rows(), width, data);
        Ok(self.push(value, &[a], || Op::SliceCols { a, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.values[parts[0].0].cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let v = &self.values[p.0];
            if v.cols() != cols {
                return Err(shape_err("concat_rows", &self.values[parts[0].0], v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let parts = parts.to_vec();
        let inputs = parts.clone();
        Ok(self.push(Tensor::matrix(rows, cols, data), &inputs, || {
            Op::ConcatRows { parts }
        }))
    }

    /// Rows `start..start + count`.
    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let va = &self.values[a.0];
        if start + count > va.rows() {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of {} rows",
                start + count,
                va.rows()
            )));
        }
        let value = va.slice_rows(start, count);
        Ok(self.push(value, &[a], || Op::SliceRows { a, start }))
    }

    /// Block `[r0, r0 + rows) x [c0, c0 + cols)`.
    pub fn slice_block(
        &mut self,
        a: Var,
        r0: usize,
        c0: usize,
        rows: usize,
        cols: usize,
    ) -> Result<Var> {
        let va = &self.values[a.0];
        if r0 + rows > va.rows() || c0 + cols > va.cols() {
            return Err(Error::Contract(format!(
                "slice_block {rows}x{cols} at ({r0},{c0}) exceeds {:?}",
                va.shape()
            )));
        }
        let data = (r0..r0 + rows)
            .flat_map(|r| va.row(r)[c0..c0 + cols].iter().copied())
            .collect();
        let value = Tensor::matrix(rows, cols, data);
        Ok(self.push(value, &[a], || Op::SliceBlock { a, r0, c0 }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.values[a.0].data().iter().copied().sum();
        self.push(Tensor::scalar(s), &[a], || Op::Sum { a })
    }

    // ---------------------------------------------------------------- kernels

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|x| x.max(T::zero()));
        self.push(value, &[a], || Op::Relu { a })
    }

    /// Elementwise `max(0, x)^2`.
    pub fn relu2(&mut self, a: Var) -> Var {
        let value = self.values[a.0].map(|x| {
            let r = x.max(T::zero());
            r * r
        });
        self.push(value, &[a], || Op::Relu2 { a })
    }

    /// Row-wise RMS normalization with a learned gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (vx, vg) = (&self.values[x.0], &self.values[gain.0]);
        let c = vx.cols();
        if vg.len() != c {
            return Err(shape_err("rmsnorm", vx, vg));
        }
        let eps = T::of(RMS_EPS);
        let n = T::of(c as f64);
        let mut inv_rms = Vec::with_capacity(vx.rows());
        let mut data = Vec::with_capacity(vx.len());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let ms = dot(row, row) / n;
            let inv = (ms + eps).sqrt().recip();
            inv_rms.push(inv);
            data.extend(row.iter().zip(vg.data()).map(|(&v, &g)| v * inv * g));
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        Ok(self.push(value, &[x, gain], || Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Divide each row by its L2 norm; all-zero rows stay zero.
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let va = &self.values[a.0];
        let c = va.cols();
        let inv_norm = (0..va.rows())
            .map(|r| {
                let norm = dot(va.row(r), va.row(r)).sqrt();
                if norm > T::zero() {
                    norm.recip()
                } else {
                    T::zero()
                }
            })
            .collect();
        let value = Tensor::new(va.shape().to_vec(), l2_normalize_rows(va.data(), c))
            .expect("shape preserved");
        self.push(value, &[a], || Op::RowL2Normalize { a, inv_norm })
    }

    /// Mean next-token negative log-likelihood over the rows of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let vl = &self.values[logits.0];
        let (rows, vocab) = (vl.rows(), vl.cols());
        if targets.len() != rows {
            return Err(Error::Contract(format!(
                "{} targets for {rows} logit rows",
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Contract(format!("target id {bad} >= vocab {vocab}")));
        }
        let mut probs = Vec::with_capacity(vl.len());
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let row = vl.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut z = T::zero();
            let start = probs.len();
            for &x in row {
                let e = (x - mx).exp();
                z += e;
                probs.push(e);
            }
            let inv = z.recip();
            probs[start..].iter_mut().for_each(|p| *p *= inv);
            total += (z.ln() + mx - row[t]).as_f64();
        }
        let loss = T::of(total / rows.max(1) as f64);
        let targets = targets.to_vec();
        Ok(self.push(Tensor::scalar(loss), &[logits], || {
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            }
        }))
    }

    /// Gather rows of `table` by id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let vt = &self.values[table.0];
        if let Some(&bad) = ids.iter().find(|&&i| i >= vt.rows()) {
            return Err(Error::Contract(format!(
                "token id {bad} outside table of {} rows",
                vt.rows()
            )));
        }
        let d = vt.cols();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(vt.row(i));
        }
        let ids = ids.to_vec();
        let value = Tensor::matrix(ids.len(), d, data);
        Ok(self.push(value, &[table], || Op::Embed { table, ids }))
    }

    /// MaxSim between two row ranges of the same matrix: for every row of
    /// `query` the best cosine against `candidate`, summed. Cosine against a
    /// zero row is 0.
    pub fn maxsim(
        &mut self,
        emb: Var,
        query: std::ops::Range<usize>,
        candidate: std::ops::Range<usize>,
    ) -> Result<Var> {
        let ve = &self.values[emb.0];
        if query.end > ve.rows() || candidate.end > ve.rows() || query.is_empty() {
            return Err(Error::Contract("maxsim range outside matrix".into()));
        }
        let d = ve.cols();
        let rows = |r: &std::ops::Range<usize>| &ve.data()[r.start * d..r.end * d];
        let qn = l2_normalize_rows(rows(&query), d);
        let pn = l2_normalize_rows(rows(&candidate), d);
        let (total, best) = maxsim_normalized(&qn, &pn, d);
        let matches = best
            .iter()
            .enumerate()
            .filter_map(|(q, p)| p.map(|p| (query.start + q, candidate.start + p)))
            .collect();
        Ok(self.push(Tensor::scalar(total), &[emb], || Op::MaxSim {
            emb,
            matches,
        }))
    }

    /// Divide every score by the largest; a non-positive maximum yields all
    /// ones.
    pub fn normalize_by_max(&mut self, scores: Var) -> Var {
        let vs = &self.values[scores.0];
        let argmax = vs
            .data()
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, T)>, (i, &s)| match best {
                Some((_, b)) if b >= s => best,
                _ => Some((i, s)),
            })
            .filter(|&(_, m)| m > T::zero());
        let data = match argmax {
            Some((i, m)) => vs
                .data()
                .iter()
                .enumerate()
                .map(|(j, &s)| if j == i { T::one() } else { s / m })
                .collect(),
            None => vec![T::one(); vs.len()],
        };
        let value = Tensor::new(vs.shape().to_vec(), data).expect("shape preserved");
        let argmax = argmax.map(|(i, _)| i);
        self.push(value, &[scores], || Op::NormalizeByMax { scores, argmax })
    }

    // --------------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`; gradients accumulate into
    /// every reachable tensor that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        if self.records.is_empty() || !self.requires[loss.0] {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        {
            let g = self.grads[loss.0].get_or_insert_with(|| vec![T::zero()]);
            g[0] += T::one();
        }
        let records = std::mem::take(&mut self.records);
        for rec in records.iter().rev() {
            if rec.out.0 > loss.0 {
                continue;
            }
            let Some(gout) = self.grads[rec.out.0].take() else {
                continue;
            };
            self.backprop(&rec.op, rec.out, &gout);
            self.grads[rec.out.0] = Some(gout);
        }
        self.records = records;
        Ok(())
    }

    fn backprop(&mut self, op: &Op<T>, out: Var, g: &[T]) {
        let values = &self.values;
        let grads = &mut self.grads;
        let req = &self.requires;
        let out_shape = (values[out.0].rows(), values[out.0].cols());
        match op {
            Op::Matmul { a, b, ta, tb } => {
                let (va, vb) = (&values[a.0], &values[b.0]);
                let (m, n) = out_shape;
                let k = if *ta { va.rows() } else { va.cols() };
                if let Some(ga) = grad_slot(grads, req, *a, va.len()) {
                    if *ta {
                        T::gemm(k, n, m, vb.data(), *tb, g, true, ga, true);
                    } else {
                        T::gemm(m, n, k, g, false, vb.data(), !*tb, ga, true);
                    }
                }
                if let Some(gb) = grad_slot(grads, req, *b, vb.len()) {
                    if *tb {
                        T::gemm(n, m, k, g, true, va.data(), *ta, gb, true);
                    } else {
                        T::gemm(k, m, n, va.data(), !*ta, g, false, gb, true);
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = grad_slot(grads, req, *v, g.len()) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::AddRow { a, row } => {
                if let Some(ga) = grad_slot(grads, req, *a, g.len()) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                let c = out_shape.1;
                if let Some(gr) = grad_slot(grads, req, *row, c) {
                    for r in g.chunks(c.max(1)) {
                        gr.iter_mut().zip(r).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Hadamard { a, b } => {
                let (va, vb) = (values[a.0].data(), values[b.0].data());
                if let Some(ga) = grad_slot(grads, req, *a, g.len()) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = grad_slot(grads, req, *b, g.len()) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale { a, c } => {
                if let Some(ga) = grad_slot(grads, req, *a, g.len()) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += *c * y);
                }
            }
            Op::ScaleBy { a, s } => {
                let va = values[a.0].data();
                let c = values[s.0].data()[0];
                if let Some(ga) = grad_slot(grads, req, *a, g.len()) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += c * y);
                }
                if let Some(gs) = grad_slot(grads, req, *s, 1) {
                    gs[0] += dot(g, va);
                }
            }
            Op::ConcatCols { parts } => {
                let (rows, width) = out_shape;
                let mut offset = 0;
                for p in parts {
                    let w = values[p.0].cols();
                    if let Some(gp) = grad_slot(grads, req, *p, rows * w) {
                        for r in 0..rows {
                            let src = &g[r * width + offset..r * width + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, &y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { a, start } => {
                let va = &values[a.0];
                let (rows, w) = out_shape;
                let c = va.cols();
                if let Some(ga) = grad_slot(grads, req, *a, va.len()) {
                    for r in 0..rows {
                        ga[r * c + start..r * c + start + w]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = values[p.0].len();
                    if let Some(gp) = grad_slot(grads, req, *p, len) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, &y)| *x += y);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { a, start } => {
                let va = &values[a.0];
                let c = va.cols();
                if let Some(ga) = grad_slot(grads, req, *a, va.len()) {
                    ga[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y);
                }
            }
            Op::SliceBlock { a, r0, c0 } => {
                let va = &values[a.0];
                let c = va.cols();
                let (rows, w) = out_shape;
                if let Some(ga) = grad_slot(grads, req, *a, va.len()) {
                    for r in 0..rows {
                        let dst = (r0 + r) * c + c0;
                        ga[dst..dst + w]
                            .iter_mut()
                            .zip(&g[r * w..(r + 1) * w])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Transpose { a } => {
                let va = &values[a.0];
                let (r, c) = (va.rows(), va.cols());
                if let Some(ga) = grad_slot(grads, req, *a, va.len()) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Relu { a } => {
                let va = values[a.0].data();
                if let Some(ga) = grad_slot(grads, req, *a, g.len()) {
                    for i in 0..g.len() {
                        if va[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Relu2 { a } => {
                let va = values[a.0].data();
                let two = T::of(2.0);
                if let Some(ga) = grad_slot(grads, req, *a, g.len()) {
                    for i in 0..g.len() {
                        if va[i] > T::zero() {
                            ga[i] += two * va[i] * g[i];
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (vx, vg) = (&values[x.0], values[gain.0].data());
                let c = vx.cols();
                let n = T::of(c as f64);
                if let Some(gx) = grad_slot(grads, req, *x, vx.len()) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = vx.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let mut proj = T::zero();
                        for j in 0..c {
                            proj += vg[j] * gr[j] * row[j];
                        }
                        let coef = inv * inv * inv * proj / n;
                        for j in 0..c {
                            gx[r * c + j] += inv * vg[j] * gr[j] - coef * row[j];
                        }
                    }
                }
                if let Some(gg) = grad_slot(grads, req, *gain, c) {
                    for (r, &inv) in inv_rms.iter().enumerate() {
                        let row = vx.row(r);
                        for j in 0..c {
                            gg[j] += g[r * c + j] * row[j] * inv;
                        }
                    }
                }
            }
            Op::RowL2Normalize { a, inv_norm } => {
                let y = &values[out.0];
                let c = y.cols();
                if let Some(ga) = grad_slot(grads, req, *a, y.len()) {
                    for (r, &inv) in inv_norm.iter().enumerate() {
                        if inv == T::zero() {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let proj = dot(yr, gr);
                        for j in 0..c {
                            ga[r * c + j] += inv * (gr[j] - yr[j] * proj);
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let vocab = values[logits.0].cols();
                let scale = g[0] / T::of(targets.len().max(1) as f64);
                if let Some(gl) = grad_slot(grads, req, *logits, probs.len()) {
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..vocab {
                            let onehot = if j == t { T::one() } else { T::zero() };
                            gl[r * vocab + j] += scale * (probs[r * vocab + j] - onehot);
                        }
                    }
                }
            }
            Op::Embed { table, ids } => {
                let vt = &values[table.0];
                let d = vt.cols();
                if let Some(gt) = grad_slot(grads, req, *table, vt.len()) {
                    for (r, &id) in ids.iter().enumerate() {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::MaxSim { emb, matches } => {
                let ve = &values[emb.0];
                let d = ve.cols();
                if let Some(ge) = grad_slot(grads, req, *emb, ve.len()) {
                    for &(q, p) in matches {
                        let (xq, xp) = (ve.row(q), ve.row(p));
                        let nq = dot(xq, xq).sqrt();
                        let np = dot(xp, xp).sqrt();
                        let cos = dot(xq, xp) / (nq * np);
                        // d cos / d q = (p_hat - cos q_hat) / |q|
                        for j in 0..d {
                            let qh = xq[j] / nq;
                            let ph = xp[j] / np;
                            ge[q * d + j] += g[0] * (ph - cos * qh) / nq;
                            ge[p * d + j] += g[0] * (qh - cos * ph) / np;
                        }
                    }
                }
            }
            Op::NormalizeByMax { scores, argmax } => {
                let vs = values[scores.0].data();
                if let (Some(m), Some(gs)) = (argmax, grad_slot(grads, req, *scores, vs.len())) {
                    let mx = vs[*m];
                    for j in 0..vs.len() {
                        if j == *m {
                            continue;
                        }
                        gs[j] += g[j] / mx;
                        gs[*m] -= g[j] * vs[j] / (mx * mx);
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = grad_slot(grads, req, *a, values[a.0].len()) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
        }
    }
}
