//! Reverse-mode differentiation over a fixed primitive catalog.
//!
//! A [`Tape`] records primitives as they execute (forward values are
//! computed eagerly) and replays them in reverse to accumulate parameter
//! gradients. Parameters live in a [`ParamStore`] outside the tape and are
//! borrowed, never copied, so large embedding tables cost nothing per pass.
//!
//! Gradient buffers are dense except for row-gathered tables, whose
//! gradients stay as per-row entries ([`RowGrad`]) unless something forces
//! a dense view.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Handle to a value node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ValueId(usize);

/// Named registry of trainable tensors.
///
/// Registration order is the order gradients are reported and updates are
/// applied in, which keeps training deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push((name.to_string(), tensor));
        ParamId(id)
    }

    /// Glorot-style uniform init in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn add_uniform(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        self.add(name, Tensor::from_vec(shape, data))
    }

    pub fn add_zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameter values.
    pub fn value_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Sparse per-row gradient of a 2-D table.
#[derive(Clone, Debug)]
pub struct RowGrad {
    rows: usize,
    width: usize,
    ids: Vec<u32>,
    slot: HashMap<u32, usize>,
    data: Vec<f64>,
}

impl RowGrad {
    fn new(rows: usize, width: usize) -> Self {
        RowGrad {
            rows,
            width,
            ids: Vec::new(),
            slot: HashMap::new(),
            data: Vec::new(),
        }
    }

    fn add_row(&mut self, row: u32, values: &[f64]) {
        debug_assert_eq!(values.len(), self.width);
        let slot = match self.slot.get(&row) {
            Some(&s) => s,
            None => {
                let s = self.ids.len();
                self.ids.push(row);
                self.slot.insert(row, s);
                self.data.extend(std::iter::repeat_n(0.0, self.width));
                s
            }
        };
        let dst = &mut self.data[slot * self.width..(slot + 1) * self.width];
        for (d, v) in dst.iter_mut().zip(values) {
            *d += v;
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Touched rows in first-touch order.
    pub fn row_ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, row: u32) -> Option<&[f64]> {
        self.slot
            .get(&row)
            .map(|&s| &self.data[s * self.width..(s + 1) * self.width])
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.ids
            .iter()
            .enumerate()
            .map(move |(s, &r)| (r, &self.data[s * self.width..(s + 1) * self.width]))
    }

    #[cfg(test)]
    pub(crate) fn new_for_tests(rows: usize, width: usize) -> Self {
        Self::new(rows, width)
    }

    #[cfg(test)]
    pub(crate) fn add_row_for_tests(&mut self, row: u32, values: &[f64]) {
        self.add_row(row, values)
    }

    fn to_dense(&self) -> Tensor {
        let mut t = Tensor::zeros(&[self.rows, self.width]);
        for (r, vals) in self.iter() {
            let dst = t.row_mut(r as usize);
            for (d, v) in dst.iter_mut().zip(vals) {
                *d += v;
            }
        }
        t
    }
}

/// A parameter gradient: dense, or restricted to the rows a pass touched.
#[derive(Clone, Debug)]
pub enum Grad {
    Dense(Tensor),
    Rows(RowGrad),
}

impl Grad {
    pub fn to_dense(&self) -> Tensor {
        match self {
            Grad::Dense(t) => t.clone(),
            Grad::Rows(r) => r.to_dense(),
        }
    }
}

/// Gradients for every registered parameter, indexed by [`ParamId`].
///
/// Parameters the pass never touched have no entry (gradient zero).
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Grad>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Grad> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    #[cfg(test)]
    pub(crate) fn set_for_tests(&mut self, id: ParamId, grad: Grad) {
        if self.grads.len() <= id.0 {
            self.grads.resize_with(id.0 + 1, || None);
        }
        self.grads[id.0] = Some(grad);
    }

    pub fn dense(&self, id: ParamId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.to_dense(),
            None => Tensor::zeros(shape),
        }
    }
}

enum NodeVal {
    Owned(Tensor),
    Param(ParamId),
}

enum GradBuf {
    Dense(Tensor),
    Rows(RowGrad),
}

impl GradBuf {
    fn densify(&mut self) {
        if let GradBuf::Rows(r) = self {
            *self = GradBuf::Dense(r.to_dense());
        }
    }

    fn dense_mut(&mut self) -> &mut Tensor {
        self.densify();
        match self {
            GradBuf::Dense(t) => t,
            GradBuf::Rows(_) => unreachable!(),
        }
    }
}

struct Segments(Vec<usize>);

impl Segments {
    fn validate(offsets: &[usize], total: usize) {
        assert!(offsets.len() >= 2, "segment offsets need at least one segment");
        assert_eq!(offsets[0], 0, "segment offsets must start at 0");
        assert_eq!(
            *offsets.last().unwrap(),
            total,
            "segment offsets must cover the whole tensor"
        );
        assert!(
            offsets.windows(2).all(|w| w[0] < w[1]),
            "segment offsets must be strictly increasing"
        );
    }

    fn count(&self) -> usize {
        self.0.len() - 1
    }

    fn range(&self, s: usize) -> std::ops::Range<usize> {
        self.0[s]..self.0[s + 1]
    }
}

enum Step {
    Matmul { a: ValueId, b: ValueId, out: ValueId },
    Matvec { a: ValueId, v: ValueId, out: ValueId },
    Affine { x: ValueId, b: ValueId, out: ValueId },
    Add { a: ValueId, b: ValueId, out: ValueId },
    Scale { x: ValueId, c: f64, out: ValueId },
    ConcatCols { parts: Vec<ValueId>, out: ValueId },
    LeakyRelu { x: ValueId, slope: f64, out: ValueId },
    Elu { x: ValueId, out: ValueId },
    MaskedSoftmax { segments: Segments, out: ValueId, x: ValueId },
    ApplyMask { x: ValueId, mask: Vec<f64>, rowwise: bool, out: ValueId },
    WeightedSum { parts: Vec<ValueId>, coeffs: Vec<f64>, out: ValueId },
    GatherRows { x: ValueId, ids: Vec<u32>, out: ValueId },
    SegmentWeightedSum {
        weights: ValueId,
        rows: ValueId,
        segments: Segments,
        out: ValueId,
    },
    CrossEntropy {
        logits: ValueId,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Tensor,
        out: ValueId,
    },
    L2Penalty { params: Vec<ValueId>, lambda: f64, out: ValueId },
}

/// Records a forward pass and replays it backward.
///
/// One tape supports exactly one backward pass; gradient accumulation
/// order follows tape order, so results are deterministic.
pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<NodeVal>,
    steps: Vec<Step>,
    param_nodes: HashMap<ParamId, ValueId>,
    train_mode: bool,
    rng: ChaCha8Rng,
    backward_done: bool,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore, train_mode: bool, dropout_seed: u64) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            steps: Vec::new(),
            param_nodes: HashMap::new(),
            train_mode,
            rng: ChaCha8Rng::seed_from_u64(dropout_seed),
            backward_done: false,
        }
    }

    /// Evaluation-mode tape: dropout is the identity.
    pub fn eval(store: &'p ParamStore) -> Self {
        Tape::new(store, false, 0)
    }

    pub fn train_mode(&self) -> bool {
        self.train_mode
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        match &self.nodes[id.0] {
            NodeVal::Owned(t) => t,
            NodeVal::Param(pid) => self.store.get(*pid),
        }
    }

    fn push(&mut self, t: Tensor) -> ValueId {
        debug_assert!(t.all_finite(), "non-finite intermediate on tape");
        self.nodes.push(NodeVal::Owned(t));
        ValueId(self.nodes.len() - 1)
    }

    /// A constant or externally supplied tensor (no gradient tracked past it).
    pub fn input(&mut self, t: Tensor) -> ValueId {
        self.push(t)
    }

    /// Leaf node for a registered parameter. Memoized so each parameter has
    /// exactly one node and its gradient accumulates in one buffer.
    pub fn param(&mut self, id: ParamId) -> ValueId {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(NodeVal::Param(id));
        let v = ValueId(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.rows(), av.cols());
        let (k2, n) = (bv.rows(), bv.cols());
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            let arow = av.row(i);
            let orow = out.row_mut(i);
            for (p, &aip) in arow.iter().enumerate() {
                if aip == 0.0 {
                    continue;
                }
                let brow = bv.row(p);
                for (o, &bpn) in orow.iter_mut().zip(brow) {
                    *o += aip * bpn;
                }
            }
        }
        let out = self.push(out);
        self.steps.push(Step::Matmul { a, b, out });
        out
    }

    pub fn matvec(&mut self, a: ValueId, v: ValueId) -> ValueId {
        let (av, vv) = (self.value(a), self.value(v));
        assert_eq!(av.cols(), vv.len(), "matvec dims {} vs {}", av.cols(), vv.len());
        let m = av.rows();
        let mut out = vec![0.0; m];
        for (i, o) in out.iter_mut().enumerate() {
            *o = av.row(i).iter().zip(vv.data()).map(|(x, y)| x * y).sum();
        }
        let out = self.push(Tensor::from_vec(&[m], out));
        self.steps.push(Step::Matvec { a, v, out });
        out
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: ValueId, w: ValueId, b: ValueId) -> ValueId {
        let xw = self.matmul(x, w);
        let (xwv, bv) = (self.value(xw), self.value(b));
        let (m, n) = (xwv.rows(), xwv.cols());
        assert_eq!(bv.len(), n, "affine bias length {} vs {}", bv.len(), n);
        let mut out = xwv.clone();
        for i in 0..m {
            let row = out.row_mut(i);
            for (o, &bj) in row.iter_mut().zip(bv.data()) {
                *o += bj;
            }
        }
        let out = self.push(out);
        self.steps.push(Step::Affine { x: xw, b, out });
        out
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let out = self.push(Tensor::from_vec(av.shape(), data));
        self.steps.push(Step::Add { a, b, out });
        out
    }

    pub fn scale(&mut self, x: ValueId, c: f64) -> ValueId {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| c * v).collect();
        let out = self.push(Tensor::from_vec(xv.shape(), data));
        self.steps.push(Step::Scale { x, c, out });
        out
    }

    /// Concatenation along the last axis.
    pub fn concat_cols(&mut self, parts: &[ValueId]) -> ValueId {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let m = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(&[m, total]);
        for i in 0..m {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), m, "concat row mismatch");
                let w = pv.cols();
                out.row_mut(i)[off..off + w].copy_from_slice(pv.row(i));
                off += w;
            }
        }
        let out_id = self.push(out);
        self.steps.push(Step::ConcatCols { parts: parts.to_vec(), out: out_id });
        out_id
    }

    pub fn leaky_relu(&mut self, x: ValueId, slope: f64) -> ValueId {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let out = self.push(Tensor::from_vec(xv.shape(), data));
        self.steps.push(Step::LeakyRelu { x, slope, out });
        out
    }

    pub fn elu(&mut self, x: ValueId) -> ValueId {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v } else { v.exp() - 1.0 })
            .collect();
        let out = self.push(Tensor::from_vec(xv.shape(), data));
        self.steps.push(Step::Elu { x, out });
        out
    }

    /// Softmax within each contiguous index segment of a 1-D tensor.
    ///
    /// `offsets` are segment boundaries: `[0, f, 2f, ..., len]`.
    pub fn masked_softmax(&mut self, x: ValueId, offsets: &[usize]) -> ValueId {
        let xv = self.value(x);
        assert_eq!(xv.shape().len(), 1, "masked_softmax expects a 1-D tensor");
        Segments::validate(offsets, xv.len());
        let mut data = xv.data().to_vec();
        for w in offsets.windows(2) {
            let seg = &mut data[w[0]..w[1]];
            let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in seg.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in seg.iter_mut() {
                *v /= sum;
            }
        }
        let out = self.push(Tensor::from_vec(xv.shape(), data));
        self.steps.push(Step::MaskedSoftmax {
            segments: Segments(offsets.to_vec()),
            out,
            x,
        });
        out
    }

    /// Bernoulli dropout mask scaled by `1/keep`, one entry per element.
    pub fn sample_mask(&mut self, len: usize, p: f64) -> Vec<f64> {
        assert!((0.0..1.0).contains(&p), "dropout rate {p} outside [0,1)");
        let keep = 1.0 - p;
        (0..len)
            .map(|_| {
                if self.rng.gen::<f64>() < p {
                    0.0
                } else {
                    1.0 / keep
                }
            })
            .collect()
    }

    /// Inverted-scaling dropout. Identity in evaluation mode.
    pub fn dropout(&mut self, x: ValueId, p: f64) -> ValueId {
        if !self.train_mode || p == 0.0 {
            return x;
        }
        let mask = self.sample_mask(self.value(x).len(), p);
        self.apply_mask(x, mask, false)
    }

    /// Dropout with one mask entry per row, zeroing whole rows.
    pub fn dropout_rows(&mut self, x: ValueId, p: f64) -> ValueId {
        if !self.train_mode || p == 0.0 {
            return x;
        }
        let mask = self.sample_mask(self.value(x).rows(), p);
        self.apply_mask(x, mask, true)
    }

    /// Multiply by a fixed mask, elementwise or broadcast per row.
    ///
    /// Exposed so one sampled mask can be shared across several tensors.
    pub fn apply_mask(&mut self, x: ValueId, mask: Vec<f64>, rowwise: bool) -> ValueId {
        let xv = self.value(x);
        let mut out = xv.clone();
        if rowwise {
            assert_eq!(mask.len(), xv.rows(), "row mask length mismatch");
            for (i, &m) in mask.iter().enumerate() {
                for v in out.row_mut(i) {
                    *v *= m;
                }
            }
        } else {
            assert_eq!(mask.len(), xv.len(), "mask length mismatch");
            for (v, &m) in out.data_mut().iter_mut().zip(&mask) {
                *v *= m;
            }
        }
        let out = self.push(out);
        self.steps.push(Step::ApplyMask { x, mask, rowwise, out });
        out
    }

    /// `Σ coeffs[i] · parts[i]` with fixed coefficients.
    pub fn weighted_sum(&mut self, parts: &[ValueId], coeffs: &[f64]) -> ValueId {
        assert_eq!(parts.len(), coeffs.len(), "weighted_sum arity mismatch");
        assert!(!parts.is_empty(), "weighted_sum of zero tensors");
        let shape = self.value(parts[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(parts[0]).len()];
        for (&p, &c) in parts.iter().zip(coeffs) {
            let pv = self.value(p);
            assert_eq!(pv.shape(), &shape[..], "weighted_sum shape mismatch");
            for (d, &v) in data.iter_mut().zip(pv.data()) {
                *d += c * v;
            }
        }
        let out = self.push(Tensor::from_vec(&shape, data));
        self.steps.push(Step::WeightedSum {
            parts: parts.to_vec(),
            coeffs: coeffs.to_vec(),
            out,
        });
        out
    }

    /// Select rows of a 2-D tensor by index; repeats allowed.
    pub fn gather_rows(&mut self, x: ValueId, ids: &[u32]) -> ValueId {
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let mut out = Tensor::zeros(&[ids.len(), d]);
        for (r, &id) in ids.iter().enumerate() {
            assert!((id as usize) < n, "gather id {id} out of range {n}");
            out.row_mut(r).copy_from_slice(xv.row(id as usize));
        }
        let out = self.push(out);
        self.steps.push(Step::GatherRows { x, ids: ids.to_vec(), out });
        out
    }

    /// Per-segment weighted sum of rows: `out[s] = Σ_{p ∈ seg s} w[p]·rows[p]`.
    pub fn segment_weighted_sum(
        &mut self,
        weights: ValueId,
        rows: ValueId,
        offsets: &[usize],
    ) -> ValueId {
        let (wv, rv) = (self.value(weights), self.value(rows));
        assert_eq!(wv.shape().len(), 1, "segment weights must be 1-D");
        assert_eq!(wv.len(), rv.rows(), "segment weights/rows mismatch");
        Segments::validate(offsets, wv.len());
        let d = rv.cols();
        let nseg = offsets.len() - 1;
        let mut out = Tensor::zeros(&[nseg, d]);
        for s in 0..nseg {
            let orow = out.row_mut(s);
            for p in offsets[s]..offsets[s + 1] {
                let w = wv.data()[p];
                for (o, &v) in orow.iter_mut().zip(rv.row(p)) {
                    *o += w * v;
                }
            }
        }
        let out = self.push(out);
        self.steps.push(Step::SegmentWeightedSum {
            weights,
            rows,
            segments: Segments(offsets.to_vec()),
            out,
        });
        out
    }

    /// Summed cross-entropy of row-softmaxed logits against integer targets,
    /// restricted to masked rows. Stable via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: ValueId, targets: &[usize], mask: &[bool]) -> ValueId {
        let lv = self.value(logits);
        let (n, f) = (lv.rows(), lv.cols());
        assert_eq!(targets.len(), n, "targets length mismatch");
        assert_eq!(mask.len(), n, "mask length mismatch");
        assert!(mask.iter().any(|&m| m), "cross_entropy with empty mask");
        let mut probs = Tensor::zeros(&[n, f]);
        let mut total = 0.0;
        for r in 0..n {
            if !mask[r] {
                continue;
            }
            assert!(targets[r] < f, "target {} out of range {f}", targets[r]);
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for &v in row {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            total += lse - row[targets[r]];
            let prow = probs.row_mut(r);
            for (p, &v) in prow.iter_mut().zip(row) {
                *p = (v - max).exp() / sum;
            }
        }
        let out = self.push(Tensor::scalar(total));
        self.steps.push(Step::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            out,
        });
        out
    }

    /// `λ · Σ θ²` over the given parameter nodes.
    pub fn l2_penalty(&mut self, params: &[ValueId], lambda: f64) -> ValueId {
        let total: f64 = params.iter().map(|&p| self.value(p).sum_squares()).sum();
        let out = self.push(Tensor::scalar(lambda * total));
        self.steps.push(Step::L2Penalty {
            params: params.to_vec(),
            lambda,
            out,
        });
        out
    }

    /// Backpropagate from `output`, seeding its gradient with 1.
    pub fn backward(&mut self, output: ValueId) -> Gradients {
        let seed = Tensor::from_vec(
            self.value(output).shape(),
            vec![1.0; self.value(output).len()],
        );
        self.backward_with(output, seed)
    }

    /// Backpropagate from `output` with an explicit upstream gradient.
    pub fn backward_with(&mut self, output: ValueId, output_gradient: Tensor) -> Gradients {
        assert!(!self.backward_done, "backward called twice on one tape");
        assert!(!self.steps.is_empty(), "backward on a tape with no forward steps");
        self.backward_done = true;
        assert_eq!(
            output_gradient.shape(),
            self.value(output).shape(),
            "output gradient shape mismatch"
        );

        let mut bufs: Vec<Option<GradBuf>> = (0..self.nodes.len()).map(|_| None).collect();
        bufs[output.0] = Some(GradBuf::Dense(output_gradient));

        for step in self.steps.iter().rev() {
            let out = step_output(step);
            // Take the output buffer; untouched outputs contribute nothing.
            let mut gbuf = match bufs[out.0].take() {
                Some(g) => g,
                None => continue,
            };
            let g = gbuf.dense_mut().clone();
            self.apply_step_backward(step, &g, &mut bufs);
        }

        let mut grads = Gradients {
            grads: (0..self.store.len()).map(|_| None).collect(),
        };
        for (&pid, &vid) in &self.param_nodes {
            if let Some(buf) = bufs[vid.0].take() {
                grads.grads[pid.0] = Some(match buf {
                    GradBuf::Dense(t) => Grad::Dense(t),
                    GradBuf::Rows(r) => Grad::Rows(r),
                });
            }
        }
        grads
    }

    fn add_dense(&self, bufs: &mut [Option<GradBuf>], id: ValueId, contrib: &Tensor) {
        match &mut bufs[id.0] {
            Some(buf) => {
                let t = buf.dense_mut();
                debug_assert_eq!(t.shape(), contrib.shape());
                for (d, &v) in t.data_mut().iter_mut().zip(contrib.data()) {
                    *d += v;
                }
            }
            slot @ None => *slot = Some(GradBuf::Dense(contrib.clone())),
        }
    }

    fn add_row(&self, bufs: &mut [Option<GradBuf>], id: ValueId, row: u32, values: &[f64]) {
        let (rows, width) = {
            let v = self.value(id);
            (v.rows(), v.cols())
        };
        match &mut bufs[id.0] {
            Some(GradBuf::Dense(t)) => {
                let dst = t.row_mut(row as usize);
                for (d, v) in dst.iter_mut().zip(values) {
                    *d += v;
                }
            }
            Some(GradBuf::Rows(r)) => r.add_row(row, values),
            slot @ None => {
                let mut r = RowGrad::new(rows, width);
                r.add_row(row, values);
                *slot = Some(GradBuf::Rows(r));
            }
        }
    }

    fn apply_step_backward(&self, step: &Step, g: &Tensor, bufs: &mut [Option<GradBuf>]) {
        match step {
            Step::Matmul { a, b, out: _ } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                let mut da = Tensor::zeros(&[m, k]);
                for i in 0..m {
                    let grow = g.row(i);
                    let darow = da.row_mut(i);
                    for (p, dv) in darow.iter_mut().enumerate() {
                        *dv = bv.row(p).iter().zip(grow).map(|(x, y)| x * y).sum();
                    }
                }
                self.add_dense(bufs, *a, &da);
                let mut db = Tensor::zeros(&[k, n]);
                for i in 0..m {
                    let arow = av.row(i);
                    let grow = g.row(i);
                    for (p, &aip) in arow.iter().enumerate() {
                        if aip == 0.0 {
                            continue;
                        }
                        let dbrow = db.row_mut(p);
                        for (d, &gv) in dbrow.iter_mut().zip(grow) {
                            *d += aip * gv;
                        }
                    }
                }
                self.add_dense(bufs, *b, &db);
            }
            Step::Matvec { a, v, out: _ } => {
                let (av, vv) = (self.value(*a), self.value(*v));
                let (m, k) = (av.rows(), av.cols());
                let mut da = Tensor::zeros(&[m, k]);
                let mut dv = vec![0.0; k];
                for i in 0..m {
                    let gi = g.data()[i];
                    let arow = av.row(i);
                    let darow = da.row_mut(i);
                    for p in 0..k {
                        darow[p] = gi * vv.data()[p];
                        dv[p] += gi * arow[p];
                    }
                }
                self.add_dense(bufs, *a, &da);
                self.add_dense(bufs, *v, &Tensor::from_vec(&[k], dv));
            }
            Step::Affine { x, b, out: _ } => {
                // x here is the matmul output node; bias gets the column sums.
                self.add_dense(bufs, *x, g);
                let n = g.cols();
                let mut db = vec![0.0; n];
                for i in 0..g.rows() {
                    for (d, &gv) in db.iter_mut().zip(g.row(i)) {
                        *d += gv;
                    }
                }
                self.add_dense(bufs, *b, &Tensor::from_vec(&[n], db));
            }
            Step::Add { a, b, out: _ } => {
                self.add_dense(bufs, *a, g);
                self.add_dense(bufs, *b, g);
            }
            Step::Scale { x, c, out: _ } => {
                let data = g.data().iter().map(|v| c * v).collect();
                self.add_dense(bufs, *x, &Tensor::from_vec(g.shape(), data));
            }
            Step::ConcatCols { parts, out: _ } => {
                let m = g.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    let mut dp = Tensor::zeros(&[m, w]);
                    for i in 0..m {
                        dp.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                    }
                    self.add_dense(bufs, p, &dp);
                    off += w;
                }
            }
            Step::LeakyRelu { x, slope, out: _ } => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { slope * gv })
                    .collect();
                self.add_dense(bufs, *x, &Tensor::from_vec(g.shape(), data));
            }
            Step::Elu { x, out } => {
                let (xv, yv) = (self.value(*x), self.value(*out));
                let data = xv
                    .data()
                    .iter()
                    .zip(yv.data())
                    .zip(g.data())
                    .map(|((&v, &y), &gv)| if v > 0.0 { gv } else { gv * (y + 1.0) })
                    .collect();
                self.add_dense(bufs, *x, &Tensor::from_vec(g.shape(), data));
            }
            Step::MaskedSoftmax { segments, out, x } => {
                let yv = self.value(*out);
                let mut dx = vec![0.0; yv.len()];
                for s in 0..segments.count() {
                    let r = segments.range(s);
                    let dot: f64 = r
                        .clone()
                        .map(|i| yv.data()[i] * g.data()[i])
                        .sum();
                    for i in r {
                        dx[i] = yv.data()[i] * (g.data()[i] - dot);
                    }
                }
                self.add_dense(bufs, *x, &Tensor::from_vec(yv.shape(), dx));
            }
            Step::ApplyMask { x, mask, rowwise, out: _ } => {
                let mut dx = g.clone();
                if *rowwise {
                    for (i, &m) in mask.iter().enumerate() {
                        for v in dx.row_mut(i) {
                            *v *= m;
                        }
                    }
                } else {
                    for (v, &m) in dx.data_mut().iter_mut().zip(mask) {
                        *v *= m;
                    }
                }
                self.add_dense(bufs, *x, &dx);
            }
            Step::WeightedSum { parts, coeffs, out: _ } => {
                for (&p, &c) in parts.iter().zip(coeffs) {
                    let data = g.data().iter().map(|v| c * v).collect();
                    self.add_dense(bufs, p, &Tensor::from_vec(g.shape(), data));
                }
            }
            Step::GatherRows { x, ids, out: _ } => {
                for (r, &id) in ids.iter().enumerate() {
                    self.add_row(bufs, *x, id, g.row(r));
                }
            }
            Step::SegmentWeightedSum { weights, rows, segments, out: _ } => {
                let (wv, rv) = (self.value(*weights), self.value(*rows));
                let d = rv.cols();
                let mut dw = vec![0.0; wv.len()];
                let mut drows = Tensor::zeros(&[rv.rows(), d]);
                for s in 0..segments.count() {
                    let gs = g.row(s);
                    for p in segments.range(s) {
                        dw[p] = rv.row(p).iter().zip(gs).map(|(x, y)| x * y).sum();
                        let dst = drows.row_mut(p);
                        let w = wv.data()[p];
                        for (dv, &gv) in dst.iter_mut().zip(gs) {
                            *dv += w * gv;
                        }
                    }
                }
                self.add_dense(bufs, *weights, &Tensor::from_vec(&[wv.len()], dw));
                self.add_dense(bufs, *rows, &drows);
            }
            Step::CrossEntropy { logits, targets, mask, probs, out: _ } => {
                let gs = g.item();
                let lv = self.value(*logits);
                let (n, f) = (lv.rows(), lv.cols());
                let mut dl = Tensor::zeros(&[n, f]);
                for r in 0..n {
                    if !mask[r] {
                        continue;
                    }
                    let drow = dl.row_mut(r);
                    for (c, d) in drow.iter_mut().enumerate() {
                        let indicator = if c == targets[r] { 1.0 } else { 0.0 };
                        *d = gs * (probs.at(r, c) - indicator);
                    }
                }
                self.add_dense(bufs, *logits, &dl);
            }
            Step::L2Penalty { params, lambda, out: _ } => {
                let gs = g.item();
                for &p in params {
                    let pv = self.value(p);
                    let data = pv.data().iter().map(|&v| gs * 2.0 * lambda * v).collect();
                    self.add_dense(bufs, p, &Tensor::from_vec(pv.shape(), data));
                }
            }
        }
    }
}

fn step_output(step: &Step) -> ValueId {
    match step {
        Step::Matmul { out, .. }
        | Step::Matvec { out, .. }
        | Step::Affine { out, .. }
        | Step::Add { out, .. }
        | Step::Scale { out, .. }
        | Step::ConcatCols { out, .. }
        | Step::LeakyRelu { out, .. }
        | Step::Elu { out, .. }
        | Step::MaskedSoftmax { out, .. }
        | Step::ApplyMask { out, .. }
        | Step::WeightedSum { out, .. }
        | Step::GatherRows { out, .. }
        | Step::SegmentWeightedSum { out, .. }
        | Step::CrossEntropy { out, .. }
        | Step::L2Penalty { out, .. } => *out,
    }
}

/// Max relative error between analytic gradients and central differences.
///
/// `build` must construct the same scalar-valued forward pass every call;
/// it runs once for the analytic pass and twice per parameter component.
/// Dropout never fires (tapes are built in evaluation mode). The error for
/// each component is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`;
/// a store with no parameters vacuously reports 0.
pub fn grad_check<F>(store: &mut ParamStore, epsilon: f64, build: F) -> f64
where
    F: Fn(&mut Tape) -> ValueId,
{
    assert!(
        (1e-6..=1e-3).contains(&epsilon),
        "epsilon {epsilon} outside [1e-6, 1e-3]"
    );
    let analytic = {
        let mut tape = Tape::eval(store);
        let out = build(&mut tape);
        assert_eq!(tape.value(out).len(), 1, "grad_check output must be scalar");
        tape.backward(out)
    };

    let eval_loss = |store: &ParamStore| -> f64 {
        let mut tape = Tape::eval(store);
        let out = build(&mut tape);
        tape.value(out).item()
    };

    let mut max_err: f64 = 0.0;
    for pid in 0..store.len() {
        let pid = ParamId(pid);
        let shape = store.get(pid).shape().to_vec();
        let dense = analytic.dense(pid, &shape);
        for i in 0..dense.len() {
            let orig = store.get(pid).data()[i];
            store.get_mut(pid).data_mut()[i] = orig + epsilon;
            let plus = eval_loss(store);
            store.get_mut(pid).data_mut()[i] = orig - epsilon;
            let minus = eval_loss(store);
            store.get_mut(pid).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = dense.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
    }
    max_err
}
