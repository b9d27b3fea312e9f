//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Ops are recorded on a [`Tape`]; `backward` walks the tape in reverse
//! creation order, which is a reverse topological order because every op's
//! inputs exist before its output. The walk visits each node exactly once
//! and accumulates gradients in a fixed order, so results are bit-identical
//! across runs.

pub mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type NodeId = usize;

/// Additive mask value for causally-masked attention scores. Large enough to
/// underflow to zero probability after max-subtracted softmax, small enough
/// to stay finite in f32.
const MASK_NEG: f64 = -1e9;

/// A dense row-major tensor, immutable after creation. When produced by a
/// [`Tape`] op it carries the id of its node in the backward graph.
#[derive(Debug, Clone)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    node: Option<NodeId>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(data: Vec<T>, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                left: vec![data.len()],
                right: shape,
            });
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: Arc::new(vec![T::zero(); numel]),
            node: None,
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![v]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Row/column view for 2-D tensors.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs a 2-D tensor");
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs a 2-D tensor");
        self.shape[1]
    }

    pub fn at(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols() + j]
    }

    /// Extracts the single element of a scalar tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() needs a scalar tensor");
        self.data[0]
    }

    fn shared(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.data)
    }
}

enum Op<T> {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddRows {
        x: NodeId,
        bias: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    MulRows {
        x: NodeId,
        gain: NodeId,
    },
    Scale {
        x: NodeId,
        c: T,
    },
    Gelu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        // (mean, inv_std) per row, cached at forward time
        stats: Vec<(T, T)>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<u32>,
    },
    SoftmaxRows {
        x: NodeId,
    },
    GatherLogSoftmax {
        logits: NodeId,
        targets: Vec<u32>,
        probs: Arc<Vec<T>>,
    },
    WeightedSum {
        x: NodeId,
        weights: Arc<Vec<T>>,
    },
    Sum {
        x: NodeId,
    },
    SliceCols {
        x: NodeId,
        lo: usize,
        hi: usize,
    },
    ConcatCols {
        xs: Vec<NodeId>,
    },
    CausalMask {
        x: NodeId,
    },
    Dropout {
        x: NodeId,
        mask: Vec<bool>,
        keep_scale: T,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    data: Arc<Vec<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by tape node.
pub struct Grads<T> {
    by_node: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient slice for a tensor produced by (or leased onto) the tape.
    pub fn of(&self, t: &Tensor<T>) -> Option<&[T]> {
        t.node.and_then(|id| self.by_node[id].as_deref())
    }

    /// Gradient as a detached tensor with the tensor's shape.
    pub fn tensor_of(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        self.of(t).map(|g| Tensor {
            shape: t.shape.clone(),
            data: Arc::new(g.to_vec()),
            node: None,
        })
    }
}

/// Records ops during a forward pass and replays them in reverse for
/// gradients. Single-threaded by design; build one tape per training example.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Registers an input tensor. `requires_grad` marks trainable leaves.
    pub fn leaf(&mut self, t: &Tensor<T>, requires_grad: bool) -> Tensor<T> {
        let id = self.push(t.shape.clone(), t.shared(), Op::Leaf, requires_grad);
        Tensor {
            shape: t.shape.clone(),
            data: t.shared(),
            node: Some(id),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Arc<Vec<T>>, op: Op<T>, needs_grad: bool) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node {
            shape,
            data,
            op,
            needs_grad,
        });
        id
    }

    fn input(&mut self, t: &Tensor<T>) -> NodeId {
        match t.node {
            Some(id) => {
                debug_assert!(id < self.nodes.len(), "tensor from another tape");
                id
            }
            None => self.push(t.shape.clone(), t.shared(), Op::Leaf, false),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs: bool) -> Tensor<T> {
        let data = Arc::new(data);
        let id = self.push(shape.clone(), Arc::clone(&data), op, needs);
        Tensor {
            shape,
            data,
            node: Some(id),
        }
    }

    fn dims2(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
        if t.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: t.shape.clone(),
                right: vec![],
            });
        }
        Ok((t.shape[0], t.shape[1]))
    }

    /// C = A·B with backward dA = G·Bᵀ, dB = Aᵀ·G.
    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, k) = Self::dims2(a, "matmul")?;
        let (k2, n) = Self::dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        let (ia, ib) = (self.input(a), self.input(b));
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.out(vec![m, n], data, Op::Matmul { a: ia, b: ib }, needs))
    }

    pub fn transpose(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = Self::dims2(x, "transpose")?;
        let xd = x.data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        let ix = self.input(x);
        let needs = self.needs(ix);
        Ok(self.out(vec![n, m], data, Op::Transpose { x: ix }, needs))
    }

    pub fn reshape(&mut self, x: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != x.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: x.shape.clone(),
                right: shape,
            });
        }
        let ix = self.input(x);
        let needs = self.needs(ix);
        Ok(self.out(shape, x.data().to_vec(), Op::Reshape { x: ix }, needs))
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch {
                op: "add",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
        let (ia, ib) = (self.input(a), self.input(b));
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.out(a.shape.clone(), data, Op::Add { a: ia, b: ib }, needs))
    }

    /// Adds a length-n bias vector to every row of an m×n tensor.
    pub fn add_rows(&mut self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = Self::dims2(x, "add_rows")?;
        if bias.shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_rows",
                left: x.shape.clone(),
                right: bias.shape.clone(),
            });
        }
        let bd = bias.data();
        let mut data = x.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bd[j];
            }
        }
        let (ix, ib) = (self.input(x), self.input(bias));
        let needs = self.needs(ix) || self.needs(ib);
        Ok(self.out(vec![m, n], data, Op::AddRows { x: ix, bias: ib }, needs))
    }

    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch {
                op: "mul",
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
        let (ia, ib) = (self.input(a), self.input(b));
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.out(a.shape.clone(), data, Op::Mul { a: ia, b: ib }, needs))
    }

    /// Multiplies every row of an m×n tensor by a length-n gain vector.
    pub fn mul_rows(&mut self, x: &Tensor<T>, gain: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = Self::dims2(x, "mul_rows")?;
        if gain.shape != [n] {
            return Err(Error::ShapeMismatch {
                op: "mul_rows",
                left: x.shape.clone(),
                right: gain.shape.clone(),
            });
        }
        let gd = gain.data();
        let mut data = x.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] *= gd[j];
            }
        }
        let (ix, ig) = (self.input(x), self.input(gain));
        let needs = self.needs(ix) || self.needs(ig);
        Ok(self.out(vec![m, n], data, Op::MulRows { x: ix, gain: ig }, needs))
    }

    pub fn scale(&mut self, x: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        let data = x.data().iter().map(|&v| v * c).collect();
        let ix = self.input(x);
        let needs = self.needs(ix);
        Ok(self.out(x.shape.clone(), data, Op::Scale { x: ix, c }, needs))
    }

    pub fn gelu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let data = x.data().iter().map(|&v| kernels::gelu(v)).collect();
        let ix = self.input(x);
        let needs = self.needs(ix);
        Ok(self.out(x.shape.clone(), data, Op::Gelu { x: ix }, needs))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let (m, n) = Self::dims2(x, "layer_norm")?;
        let mut data = x.data().to_vec();
        let mut stats = Vec::with_capacity(m);
        for i in 0..m {
            stats.push(kernels::layer_norm_row(&mut data[i * n..(i + 1) * n], eps));
        }
        let ix = self.input(x);
        let needs = self.needs(ix);
        Ok(self.out(vec![m, n], data, Op::LayerNorm { x: ix, stats }, needs))
    }

    /// Gathers rows of `table` by token id.
    pub fn embedding(&mut self, table: &Tensor<T>, ids: &[u32]) -> Result<Tensor<T>> {
        let (v, d) = Self::dims2(table, "embedding")?;
        for &id in ids {
            if id as usize >= v {
                return Err(Error::VocabIndex { id, vocab: v });
            }
        }
        let td = table.data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let r = id as usize;
            data.extend_from_slice(&td[r * d..(r + 1) * d]);
        }
        let it = self.input(table);
        let needs = self.needs(it);
        Ok(self.out(
            vec![ids.len(), d],
            data,
            Op::Embedding {
                table: it,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Stable row-wise softmax; each output row sums to one.
    pub fn softmax_rows(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = Self::dims2(x, "softmax_rows")?;
        if x.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax_rows input".into()));
        }
        let mut data = x.data().to_vec();
        for i in 0..m {
            kernels::softmax_row(&mut data[i * n..(i + 1) * n]);
        }
        let ix = self.input(x);
        let needs = self.needs(ix);
        Ok(self.out(vec![m, n], data, Op::SoftmaxRows { x: ix }, needs))
    }

    /// Per-row log-softmax gathered at the target id: out[i] = log p(targets[i]).
    pub fn gather_log_softmax(&mut self, logits: &Tensor<T>, targets: &[u32]) -> Result<Tensor<T>> {
        let (m, n) = Self::dims2(logits, "gather_log_softmax")?;
        if targets.len() != m {
            return Err(Error::LengthMismatch {
                left: m,
                right: targets.len(),
            });
        }
        for &t in targets {
            if t as usize >= n {
                return Err(Error::VocabIndex { id: t, vocab: n });
            }
        }
        if logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("gather_log_softmax logits".into()));
        }
        let ld = logits.data();
        let mut probs = ld.to_vec();
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut probs[i * n..(i + 1) * n];
            let logp = kernels::log_softmax_row(row);
            out.push(logp[targets[i] as usize]);
            for (dst, &lp) in row.iter_mut().zip(logp.iter()) {
                *dst = lp.exp();
            }
        }
        let il = self.input(logits);
        let needs = self.needs(il);
        Ok(self.out(
            vec![m],
            out,
            Op::GatherLogSoftmax {
                logits: il,
                targets: targets.to_vec(),
                probs: Arc::new(probs),
            },
            needs,
        ))
    }

    /// Dot product with a constant weight vector; gradient flows only into x.
    pub fn weighted_sum(&mut self, x: &Tensor<T>, weights: &[T]) -> Result<Tensor<T>> {
        if x.len() != weights.len() {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: weights.len(),
            });
        }
        let mut acc = T::zero();
        for (&v, &w) in x.data().iter().zip(weights) {
            acc += v * w;
        }
        let ix = self.input(x);
        let needs = self.needs(ix);
        Ok(self.out(
            vec![1],
            vec![acc],
            Op::WeightedSum {
                x: ix,
                weights: Arc::new(weights.to_vec()),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc = T::zero();
        for &v in x.data() {
            acc += v;
        }
        let ix = self.input(x);
        let needs = self.needs(ix);
        Ok(self.out(vec![1], vec![acc], Op::Sum { x: ix }, needs))
    }

    /// Column slice [lo, hi) of an m×n tensor.
    pub fn slice_cols(&mut self, x: &Tensor<T>, lo: usize, hi: usize) -> Result<Tensor<T>> {
        let (m, n) = Self::dims2(x, "slice_cols")?;
        if lo >= hi || hi > n {
            return Err(Error::ShapeMismatch {
                op: "slice_cols",
                left: x.shape.clone(),
                right: vec![lo, hi],
            });
        }
        let w = hi - lo;
        let xd = x.data();
        let mut data = Vec::with_capacity(m * w);
        for i in 0..m {
            data.extend_from_slice(&xd[i * n + lo..i * n + hi]);
        }
        let ix = self.input(x);
        let needs = self.needs(ix);
        Ok(self.out(vec![m, w], data, Op::SliceCols { x: ix, lo, hi }, needs))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if xs.is_empty() {
            return Err(Error::EmptySequence);
        }
        let m = Self::dims2(xs[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(xs.len());
        for x in xs {
            let (mi, ni) = Self::dims2(x, "concat_cols")?;
            if mi != m {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: xs[0].shape.clone(),
                    right: x.shape.clone(),
                });
            }
            widths.push(ni);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for (x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<NodeId> = xs.iter().map(|x| self.input(x)).collect();
        let needs = ids.iter().any(|&i| self.needs(i));
        Ok(self.out(vec![m, n], data, Op::ConcatCols { xs: ids }, needs))
    }

    /// Masks attention scores so row i only attends to columns 0..=i.
    pub fn causal_mask(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (m, n) = Self::dims2(x, "causal_mask")?;
        if m != n {
            return Err(Error::ShapeMismatch {
                op: "causal_mask",
                left: x.shape.clone(),
                right: vec![n, n],
            });
        }
        let neg = T::from_f64(MASK_NEG);
        let mut data = x.data().to_vec();
        for i in 0..m {
            for j in (i + 1)..n {
                data[i * n + j] = neg;
            }
        }
        let ix = self.input(x);
        let needs = self.needs(ix);
        Ok(self.out(vec![m, n], data, Op::CausalMask { x: ix }, needs))
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout(&mut self, x: &Tensor<T>, mask: Vec<bool>, rate: f64) -> Result<Tensor<T>> {
        if mask.len() != x.len() {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: mask.len(),
            });
        }
        let keep_scale = T::from_f64(1.0 / (1.0 - rate));
        let data = x
            .data()
            .iter()
            .zip(&mask)
            .map(|(&v, &keep)| if keep { v * keep_scale } else { T::zero() })
            .collect();
        let ix = self.input(x);
        let needs = self.needs(ix);
        Ok(self.out(
            x.shape.clone(),
            data,
            Op::Dropout {
                x: ix,
                mask,
                keep_scale,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar loss. Returns per-node gradients; the tape
    /// itself is left untouched so several backward passes may run.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<Grads<T>> {
        let root = loss
            .node
            .ok_or_else(|| Error::Numeric("backward root is not on the tape".into()))?;
        if loss.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: loss.shape.clone(),
                right: vec![1],
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![T::one()]);

        for id in (0..=root).rev() {
            if grads[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.step_back(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Grads { by_node: grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], id: NodeId, update: impl FnOnce(&mut [T])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![T::zero(); self.nodes[id].data.len()]);
        update(slot);
    }

    fn step_back(&self, id: NodeId, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                self.accum(grads, *a, |ga| {
                    let da = kernels::matmul_nt(g, bd, m, n, k);
                    for (dst, src) in ga.iter_mut().zip(da) {
                        *dst += src;
                    }
                });
                self.accum(grads, *b, |gb| {
                    let db = kernels::matmul_tn(ad, g, m, k, n);
                    for (dst, src) in gb.iter_mut().zip(db) {
                        *dst += src;
                    }
                });
            }
            Op::Transpose { x } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                self.accum(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.accum(grads, *x, |gx| {
                    for (dst, &src) in gx.iter_mut().zip(g) {
                        *dst += src;
                    }
                });
            }
            Op::Add { a, b } => {
                for id in [*a, *b] {
                    self.accum(grads, id, |gi| {
                        for (dst, &src) in gi.iter_mut().zip(g) {
                            *dst += src;
                        }
                    });
                }
            }
            Op::AddRows { x, bias } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                self.accum(grads, *x, |gx| {
                    for (dst, &src) in gx.iter_mut().zip(g) {
                        *dst += src;
                    }
                });
                self.accum(grads, *bias, |gb| {
                    for i in 0..m {
                        for j in 0..n {
                            gb[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ad, bd) = (&self.nodes[*a].data, &self.nodes[*b].data);
                self.accum(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
                self.accum(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
            Op::MulRows { x, gain } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let (xd, gd) = (&self.nodes[*x].data, &self.nodes[*gain].data);
                self.accum(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..n {
                            gx[i * n + j] += g[i * n + j] * gd[j];
                        }
                    }
                });
                self.accum(grads, *gain, |gg| {
                    for i in 0..m {
                        for j in 0..n {
                            gg[j] += g[i * n + j] * xd[i * n + j];
                        }
                    }
                });
            }
            Op::Scale { x, c } => {
                self.accum(grads, *x, |gx| {
                    for (dst, &src) in gx.iter_mut().zip(g) {
                        *dst += src * *c;
                    }
                });
            }
            Op::Gelu { x } => {
                let xd = &self.nodes[*x].data;
                self.accum(grads, *x, |gx| {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xd[i]);
                    }
                });
            }
            Op::LayerNorm { x, stats } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let y = &node.data; // normalized output
                let nf = T::from_usize(n);
                self.accum(grads, *x, |gx| {
                    for i in 0..m {
                        let (_, inv_std) = stats[i];
                        let gr = &g[i * n..(i + 1) * n];
                        let yr = &y[i * n..(i + 1) * n];
                        let mut mean_g = T::zero();
                        let mut mean_gy = T::zero();
                        for j in 0..n {
                            mean_g += gr[j];
                            mean_gy += gr[j] * yr[j];
                        }
                        mean_g /= nf;
                        mean_gy /= nf;
                        let row = &mut gx[i * n..(i + 1) * n];
                        for j in 0..n {
                            row[j] += inv_std * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let d = node.shape[1];
                self.accum(grads, *table, |gt| {
                    for (pos, &id) in ids.iter().enumerate() {
                        let r = id as usize;
                        for j in 0..d {
                            gt[r * d + j] += g[pos * d + j];
                        }
                    }
                });
            }
            Op::SoftmaxRows { x } => {
                let (m, n) = (node.shape[0], node.shape[1]);
                let y = &node.data;
                self.accum(grads, *x, |gx| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let mut dot = T::zero();
                        for j in 0..n {
                            dot += yr[j] * gr[j];
                        }
                        let row = &mut gx[i * n..(i + 1) * n];
                        for j in 0..n {
                            row[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::GatherLogSoftmax {
                logits,
                targets,
                probs,
            } => {
                let n = self.nodes[*logits].shape[1];
                self.accum(grads, *logits, |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        let gi = g[i];
                        if gi == T::zero() {
                            continue;
                        }
                        let pr = &probs[i * n..(i + 1) * n];
                        let row = &mut gl[i * n..(i + 1) * n];
                        for j in 0..n {
                            row[j] -= gi * pr[j];
                        }
                        row[t as usize] += gi;
                    }
                });
            }
            Op::WeightedSum { x, weights } => {
                let g0 = g[0];
                self.accum(grads, *x, |gx| {
                    for (dst, &w) in gx.iter_mut().zip(weights.iter()) {
                        *dst += g0 * w;
                    }
                });
            }
            Op::Sum { x } => {
                let g0 = g[0];
                self.accum(grads, *x, |gx| {
                    for dst in gx.iter_mut() {
                        *dst += g0;
                    }
                });
            }
            Op::SliceCols { x, lo, hi } => {
                let m = node.shape[0];
                let w = hi - lo;
                let n = self.nodes[*x].shape[1];
                self.accum(grads, *x, |gx| {
                    for i in 0..m {
                        for j in 0..w {
                            gx[i * n + lo + j] += g[i * w + j];
                        }
                    }
                });
            }
            Op::ConcatCols { xs } => {
                let m = node.shape[0];
                let n = node.shape[1];
                let mut off = 0;
                for &xid in xs {
                    let w = self.nodes[xid].shape[1];
                    self.accum(grads, xid, |gx| {
                        for i in 0..m {
                            for j in 0..w {
                                gx[i * w + j] += g[i * n + off + j];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::CausalMask { x } => {
                let n = node.shape[0];
                self.accum(grads, *x, |gx| {
                    for i in 0..n {
                        for j in 0..=i {
                            gx[i * n + j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Dropout {
                x,
                mask,
                keep_scale,
            } => {
                self.accum(grads, *x, |gx| {
                    for i in 0..g.len() {
                        if mask[i] {
                            gx[i] += g[i] * *keep_scale;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t64(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i = t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = t64(&[2.0, 3.0, 4.0, 5.0], &[2, 2]);
        let c = tape.matmul(&i, &b).unwrap();
        assert_eq!(c.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut tape = Tape::new();
        let a = t64(&[1.0, 2.0], &[1, 2]);
        let b = t64(&[3.0, 4.0], &[2, 1]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // independent naive oracle in i-j-p order
        let mut expect = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                expect[i * n + j] = acc;
            }
        }

        let mut tape = Tape::new();
        let c = tape
            .matmul(&t64(&a, &[m, k]), &t64(&b, &[k, n]))
            .unwrap();
        for (got, want) in c.data().iter().zip(&expect) {
            let rel = (got - want).abs() / want.abs().max(1e-12);
            assert!(rel < 1e-6, "rel err {rel}");
        }
    }

    #[test]
    fn matmul_shape_mismatch_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = t64(&[1.0, 2.0], &[1, 2]);
        let b = t64(&[1.0, 2.0, 3.0], &[3, 1]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[1, 2]") && msg.contains("[3, 1]"), "{msg}");
    }

    #[test]
    fn softmax_symmetric_row() {
        let mut tape = Tape::new();
        let x = t64(&[0.0, 0.0], &[1, 2]);
        let y = tape.softmax_rows(&x).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_no_overflow_on_large_inputs() {
        let mut tape = Tape::new();
        let x = t64(&[1000.0, 0.0], &[1, 2]);
        let y = tape.softmax_rows(&x).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1] >= 0.0 && y.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_frozen_example() {
        // exp/normalize oracle at f64: softmax([1,2,3])
        let mut tape = Tape::new();
        let y = tape.softmax_rows(&t64(&[1.0, 2.0, 3.0], &[1, 3])).unwrap();
        let expect = [0.0900, 0.2447, 0.6652];
        for (got, want) in y.data().iter().zip(&expect) {
            assert!((got - want).abs() < 1e-4, "{got} vs {want}");
        }
        let sum: f64 = y.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = t64(&[f64::NAN, 0.0], &[1, 2]);
        assert!(matches!(
            tape.softmax_rows(&x),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = t64(&[3.5, 3.5, 3.5, 3.5], &[1, 4]);
        let y = tape.layer_norm(&x, 1e-5).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn gelu_zero_is_zero() {
        let mut tape = Tape::new();
        let y = tape.gelu(&t64(&[0.0], &[1, 1])).unwrap();
        assert_eq!(y.data()[0], 0.0);
    }

    #[test]
    fn embedding_rejects_out_of_range_ids() {
        let mut tape = Tape::new();
        let table = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert!(matches!(
            tape.embedding(&table, &[0, 2]),
            Err(Error::VocabIndex { id: 2, vocab: 2 })
        ));
    }

    #[test]
    fn transpose_roundtrip() {
        let mut tape = Tape::new();
        let x = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let xt = tape.transpose(&x).unwrap();
        let xtt = tape.transpose(&xt).unwrap();
        assert_eq!(xtt.data(), x.data());
        assert_eq!(xt.shape(), &[3, 2]);
    }

    #[test]
    fn backward_is_linear_and_deterministic() {
        use rand::{Rng, SeedableRng};
        // two losses over disjoint op paths sharing one leaf: the leaf's
        // gradient accumulates exactly one contribution per path, so the
        // fixed reverse-topological accumulation makes linearity bit-exact
        let run = || {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
            let a: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let m: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let ta = tape.leaf(&t64(&a, &[2, 3]), true);
            let tb = tape.leaf(&t64(&b, &[3, 2]), true);
            let tm = tape.leaf(&t64(&m, &[2, 3]), true);
            let c = tape.matmul(&ta, &tb).unwrap();
            let l1 = tape.sum(&c).unwrap();
            let p = tape.mul(&ta, &tm).unwrap();
            let l2 = tape.sum(&p).unwrap();
            let both = tape.add(&l1, &l2).unwrap();

            let g1 = tape.backward(&l1).unwrap();
            let g2 = tape.backward(&l2).unwrap();
            let gb = tape.backward(&both).unwrap();
            (
                g1.of(&ta).unwrap().to_vec(),
                g2.of(&ta).unwrap().to_vec(),
                gb.of(&ta).unwrap().to_vec(),
            )
        };
        let (g1, g2, gb) = run();
        // sum of backwards equals backward of sum, bit-exact
        for i in 0..g1.len() {
            assert_eq!(gb[i], g1[i] + g2[i]);
        }
        // bit-identical across runs
        let (h1, h2, hb) = run();
        assert_eq!(g1, h1);
        assert_eq!(g2, h2);
        assert_eq!(gb, hb);
    }

    #[test]
    fn causal_mask_zeroes_upper_triangle_softmax() {
        let mut tape = Tape::new();
        let x = t64(&[1.0, 5.0, 2.0, 3.0], &[2, 2]);
        let masked = tape.causal_mask(&x).unwrap();
        let sm = tape.softmax_rows(&masked).unwrap();
        assert_eq!(sm.at(0, 0), 1.0);
        assert_eq!(sm.at(0, 1), 0.0);
        let row1: f64 = sm.data()[2..].iter().sum();
        assert!((row1 - 1.0).abs() < 1e-12);
    }
}
