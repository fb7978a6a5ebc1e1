//! Reverse-mode differentiation tape.
//!
//! Operations record themselves when any input is already on the tape;
//! pure-constant expressions stay off it. Backward replays the recorded
//! operations in exact reverse order, accumulating gradients by summation
//! over all uses.
//!
//! Tensors passed into an op without a node are captured as constants:
//! they contribute values but are not differentiated through. Call
//! [`Tape::watch`] to mark a tensor as a differentiable leaf.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::scalar::Scalar;

use super::tensor::{NodeRef, Tensor};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

type Id = usize;

/// Recorded primitive with the node ids of its inputs.
#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    /// `a` is [m, k]; `b` is [k] when `b_vec` else [k, n].
    Matmul { a: Id, b: Id, m: usize, k: usize, n: usize, b_vec: bool },
    Concat(Vec<Id>),
    Slice { input: Id, start: usize },
    Tanh(Id),
    Relu(Id),
    Sigmoid(Id),
    Softplus(Id),
    Exp(Id),
    Log(Id),
    Square(Id),
    Symlog(Id),
    Symexp(Id),
    Clamp { input: Id, lo: F, hi: F },
    Softmax(Id),
    LogSoftmax(Id),
    Sum(Id),
    Mean(Id),
    Affine { input: Id, mul: F, add: F },
}

#[derive(Debug)]
struct Node<F> {
    op: Op<F>,
    values: Arc<Vec<F>>,
    /// True when a watched leaf is an ancestor; constants are skipped.
    grad: bool,
}

/// Gradient of a scalar root with respect to every differentiable node.
pub struct Gradients<F> {
    tape_id: u64,
    by_node: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub(crate) fn node_slice(&self, idx: usize) -> Option<&[F]> {
        self.by_node.get(idx).and_then(|o| o.as_deref())
    }

    /// Gradient for a tensor recorded on the originating tape, if any
    /// gradient reached it.
    pub fn get(&self, t: &Tensor<F>) -> Option<&[F]> {
        let node = t.node()?;
        assert!(node.tape == self.tape_id, "tensor belongs to another tape");
        self.by_node[node.idx].as_deref()
    }

    /// Gradient as a tensor, zeros when no gradient reached the node.
    pub fn wrt(&self, t: &Tensor<F>) -> Tensor<F> {
        match self.get(t) {
            Some(g) => Tensor::new(t.shape().to_vec(), g.to_vec()),
            None => Tensor::zeros(t.shape().to_vec()),
        }
    }
}

/// Recording tape. Single owner during recording; see module docs.
pub struct Tape<F> {
    id: u64,
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { id: TAPE_IDS.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a tensor as a differentiable leaf and return the recorded copy.
    pub fn watch(&mut self, t: &Tensor<F>) -> Tensor<F> {
        let idx = self.push(Op::Leaf, t.shared_values(), true);
        Tensor::with_node(t.shape().to_vec(), self.nodes[idx].values.clone(), self.node_ref(idx))
    }

    fn node_ref(&self, idx: Id) -> NodeRef {
        NodeRef { tape: self.id, idx }
    }

    fn push(&mut self, op: Op<F>, values: Arc<Vec<F>>, grad: bool) -> Id {
        self.nodes.push(Node { op, values, grad });
        self.nodes.len() - 1
    }

    /// Node id for an input tensor: its own node, or a constant leaf.
    fn capture(&mut self, t: &Tensor<F>) -> (Id, bool) {
        match t.node() {
            Some(node) => {
                assert!(node.tape == self.id, "input tensor belongs to another tape");
                (node.idx, self.nodes[node.idx].grad)
            }
            None => (self.push(Op::Leaf, t.shared_values(), false), false),
        }
    }

    fn any_recorded(inputs: &[&Tensor<F>]) -> bool {
        inputs.iter().any(|t| t.node().is_some())
    }

    /// Wrap computed values, recording `make_op` when any input is recorded.
    fn emit(
        &mut self,
        inputs: &[&Tensor<F>],
        shape: Vec<usize>,
        values: Vec<F>,
        make_op: impl FnOnce(&mut Vec<Id>) -> Op<F>,
    ) -> Tensor<F> {
        if !Self::any_recorded(inputs) {
            return Tensor::new(shape, values);
        }
        let mut ids = Vec::with_capacity(inputs.len());
        let mut grad = false;
        for t in inputs {
            let (id, g) = self.capture(t);
            ids.push(id);
            grad |= g;
        }
        let op = make_op(&mut ids);
        let values = Arc::new(values);
        let idx = self.push(op, Arc::clone(&values), grad);
        Tensor::with_node(shape, values, self.node_ref(idx))
    }

    fn check_same_shape(name: &str, a: &Tensor<F>, b: &Tensor<F>) {
        assert!(
            a.shape() == b.shape(),
            "{name}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        );
    }

    pub fn add(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        Self::check_same_shape("add", a, b);
        let values = a.values().iter().zip(b.values()).map(|(&x, &y)| x + y).collect();
        self.emit(&[a, b], a.shape().to_vec(), values, |ids| Op::Add(ids[0], ids[1]))
    }

    pub fn sub(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        Self::check_same_shape("sub", a, b);
        let values = a.values().iter().zip(b.values()).map(|(&x, &y)| x - y).collect();
        self.emit(&[a, b], a.shape().to_vec(), values, |ids| Op::Sub(ids[0], ids[1]))
    }

    pub fn mul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        Self::check_same_shape("mul", a, b);
        let values = a.values().iter().zip(b.values()).map(|(&x, &y)| x * y).collect();
        self.emit(&[a, b], a.shape().to_vec(), values, |ids| Op::Mul(ids[0], ids[1]))
    }

    /// `[m, k] x [k] -> [m]` or `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        let (m, k) = match a.shape() {
            [m, k] => (*m, *k),
            other => panic!("matmul: left operand must be a matrix, got shape {other:?}"),
        };
        let (n, b_vec) = match b.shape() {
            [kb] => {
                assert!(*kb == k, "matmul: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
                (1, true)
            }
            [kb, n] => {
                assert!(*kb == k, "matmul: shape mismatch {:?} vs {:?}", a.shape(), b.shape());
                (*n, false)
            }
            other => panic!("matmul: right operand must be 1-D or 2-D, got shape {other:?}"),
        };
        let av = a.values();
        let bv = b.values();
        let mut out = vec![F::zero(); m * n];
        if b_vec {
            for i in 0..m {
                let row = &av[i * k..(i + 1) * k];
                let mut acc = F::zero();
                for (x, y) in row.iter().zip(bv.iter()) {
                    acc = acc + *x * *y;
                }
                out[i] = acc;
            }
        } else {
            for i in 0..m {
                let row = &av[i * k..(i + 1) * k];
                let orow = &mut out[i * n..(i + 1) * n];
                for (l, &x) in row.iter().enumerate() {
                    let brow = &bv[l * n..(l + 1) * n];
                    for (o, &y) in orow.iter_mut().zip(brow.iter()) {
                        *o = *o + x * y;
                    }
                }
            }
        }
        let shape = if b_vec { vec![m] } else { vec![m, n] };
        self.emit(&[a, b], shape, out, |ids| Op::Matmul { a: ids[0], b: ids[1], m, k, n, b_vec })
    }

    /// Concatenate 1-D tensors.
    pub fn concat(&mut self, parts: &[&Tensor<F>]) -> Tensor<F> {
        assert!(!parts.is_empty(), "concat: no inputs");
        for p in parts {
            assert!(p.shape().len() == 1, "concat: expects 1-D inputs, got shape {:?}", p.shape());
        }
        let total: usize = parts.iter().map(|p| p.len()).sum();
        let mut values = Vec::with_capacity(total);
        for p in parts {
            values.extend_from_slice(p.values());
        }
        self.emit(parts, vec![total], values, |ids| Op::Concat(std::mem::take(ids)))
    }

    /// Contiguous slice of a 1-D tensor.
    pub fn slice(&mut self, t: &Tensor<F>, start: usize, len: usize) -> Tensor<F> {
        assert!(t.shape().len() == 1, "slice: expects 1-D input, got shape {:?}", t.shape());
        assert!(
            start + len <= t.len(),
            "slice: range {}..{} out of bounds for shape {:?}",
            start,
            start + len,
            t.shape()
        );
        let values = t.values()[start..start + len].to_vec();
        self.emit(&[t], vec![len], values, |ids| Op::Slice { input: ids[0], start })
    }

    fn unary(&mut self, t: &Tensor<F>, f: impl Fn(F) -> F, op: impl FnOnce(Id) -> Op<F>) -> Tensor<F> {
        let values = t.values().iter().map(|&x| f(x)).collect();
        self.emit(&[t], t.shape().to_vec(), values, |ids| op(ids[0]))
    }

    pub fn tanh(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.unary(t, |x| x.tanh(), Op::Tanh)
    }

    pub fn relu(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.unary(t, |x| if x > F::zero() { x } else { F::zero() }, Op::Relu)
    }

    pub fn sigmoid(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.unary(t, sigmoid_scalar, Op::Sigmoid)
    }

    /// ln(1 + e^x), computed stably.
    pub fn softplus(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.unary(
            t,
            |x| {
                let m = x.max(F::zero());
                m + ((x - m).exp() + (-m).exp()).ln()
            },
            Op::Softplus,
        )
    }

    pub fn exp(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.unary(t, |x| x.exp(), Op::Exp)
    }

    pub fn log(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.unary(t, |x| x.ln(), Op::Log)
    }

    pub fn square(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.unary(t, |x| x * x, Op::Square)
    }

    /// sign(x) * ln(1 + |x|).
    pub fn symlog(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.unary(t, symlog_scalar, Op::Symlog)
    }

    /// sign(x) * (e^|x| - 1); inverse of [`Tape::symlog`].
    pub fn symexp(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.unary(t, symexp_scalar, Op::Symexp)
    }

    pub fn clamp(&mut self, t: &Tensor<F>, lo: F, hi: F) -> Tensor<F> {
        assert!(lo <= hi, "clamp: lo {lo} > hi {hi}");
        let values = t.values().iter().map(|&x| x.max(lo).min(hi)).collect();
        self.emit(&[t], t.shape().to_vec(), values, |ids| Op::Clamp { input: ids[0], lo, hi })
    }

    /// Softmax over a 1-D tensor.
    pub fn softmax(&mut self, t: &Tensor<F>) -> Tensor<F> {
        assert!(t.shape().len() == 1, "softmax: expects 1-D input, got shape {:?}", t.shape());
        let max = t.values().iter().cloned().fold(F::neg_infinity(), F::max);
        let exps: Vec<F> = t.values().iter().map(|&x| (x - max).exp()).collect();
        let z = exps.iter().fold(F::zero(), |acc, &e| acc + e);
        let values = exps.iter().map(|&e| e / z).collect();
        self.emit(&[t], t.shape().to_vec(), values, |ids| Op::Softmax(ids[0]))
    }

    /// Log-softmax over a 1-D tensor.
    pub fn log_softmax(&mut self, t: &Tensor<F>) -> Tensor<F> {
        assert!(t.shape().len() == 1, "log_softmax: expects 1-D input, got shape {:?}", t.shape());
        let max = t.values().iter().cloned().fold(F::neg_infinity(), F::max);
        let z = t
            .values()
            .iter()
            .map(|&x| (x - max).exp())
            .fold(F::zero(), |acc, e| acc + e)
            .ln()
            + max;
        let values = t.values().iter().map(|&x| x - z).collect();
        self.emit(&[t], t.shape().to_vec(), values, |ids| Op::LogSoftmax(ids[0]))
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, t: &Tensor<F>) -> Tensor<F> {
        let s = t.values().iter().fold(F::zero(), |acc, &x| acc + x);
        self.emit(&[t], vec![1], vec![s], |ids| Op::Sum(ids[0]))
    }

    /// Mean of all entries, shape `[1]`.
    pub fn mean(&mut self, t: &Tensor<F>) -> Tensor<F> {
        assert!(!t.is_empty(), "mean: empty tensor");
        let n = F::from_usize(t.len()).unwrap();
        let s = t.values().iter().fold(F::zero(), |acc, &x| acc + x) / n;
        self.emit(&[t], vec![1], vec![s], |ids| Op::Mean(ids[0]))
    }

    /// Elementwise `mul * x + add` with scalar constants.
    pub fn affine(&mut self, t: &Tensor<F>, mul: F, add: F) -> Tensor<F> {
        let values = t.values().iter().map(|&x| mul * x + add).collect();
        self.emit(&[t], t.shape().to_vec(), values, |ids| Op::Affine { input: ids[0], mul, add })
    }

    pub fn neg(&mut self, t: &Tensor<F>) -> Tensor<F> {
        self.affine(t, -F::one(), F::zero())
    }

    /// Reparameterized Gaussian sample: `mean + exp(log_std) * noise`.
    ///
    /// Noise is supplied externally (standard normal) so reruns with the same
    /// noise are reproducible and gradients flow into mean and log_std.
    pub fn gaussian_sample_reparam(
        &mut self,
        mean: &Tensor<F>,
        log_std: &Tensor<F>,
        noise: &Tensor<F>,
    ) -> Tensor<F> {
        Self::check_same_shape("gaussian_sample_reparam", mean, log_std);
        Self::check_same_shape("gaussian_sample_reparam", mean, noise);
        let std = self.exp(log_std);
        let scaled = self.mul(&std, noise);
        self.add(mean, &scaled)
    }

    /// Gradient of a scalar root with respect to every differentiable node.
    ///
    /// Accumulation is summation over all uses. Constant captures (inputs
    /// never passed through [`Tape::watch`]) are treated as constants and
    /// receive no gradient.
    pub fn backward(&self, root: &Tensor<F>) -> Gradients<F> {
        let node = root.node().expect("backward: root is not recorded on any tape");
        assert!(node.tape == self.id, "backward: root belongs to another tape");
        assert!(root.len() == 1, "backward: root must be scalar, got shape {:?}", root.shape());

        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[node.idx] = Some(vec![F::one()]);

        for idx in (0..=node.idx).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.accumulate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { tape_id: self.id, by_node: grads }
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<F>>], id: Id) -> Option<&'a mut [F]> {
        if !self.nodes[id].grad {
            return None;
        }
        let len = self.nodes[id].values.len();
        Some(grads[id].get_or_insert_with(|| vec![F::zero(); len]))
    }

    #[allow(clippy::needless_range_loop)]
    fn accumulate(&self, idx: Id, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        if !node.grad {
            return;
        }
        let out = node.values.as_slice();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(ga, g, F::one());
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    axpy(gb, g, F::one());
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_buf(grads, *a) {
                    axpy(ga, g, F::one());
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    axpy(gb, g, -F::one());
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].values.clone(), self.nodes[*b].values.clone());
                if let Some(ga) = self.grad_buf(grads, *a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(bv.iter()) {
                        *d = *d + gi * y;
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    for ((d, &gi), &x) in gb.iter_mut().zip(g).zip(av.iter()) {
                        *d = *d + gi * x;
                    }
                }
            }
            Op::Matmul { a, b, m, k, n, b_vec } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.nodes[*a].values.clone();
                let bv = self.nodes[*b].values.clone();
                if let Some(ga) = self.grad_buf(grads, *a) {
                    if *b_vec {
                        // dA[i, l] += g[i] * b[l]
                        for i in 0..m {
                            let gi = g[i];
                            if gi != F::zero() {
                                axpy(&mut ga[i * k..(i + 1) * k], &bv, gi);
                            }
                        }
                    } else {
                        // dA[i, l] += dot(g[i, :], B[l, :])
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let garow = &mut ga[i * k..(i + 1) * k];
                            for l in 0..k {
                                let brow = &bv[l * n..(l + 1) * n];
                                let mut acc = F::zero();
                                for (x, y) in grow.iter().zip(brow.iter()) {
                                    acc = acc + *x * *y;
                                }
                                garow[l] = garow[l] + acc;
                            }
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(grads, *b) {
                    if *b_vec {
                        // dB[l] += sum_i A[i, l] * g[i]
                        for i in 0..m {
                            let gi = g[i];
                            if gi != F::zero() {
                                axpy(gb, &av[i * k..(i + 1) * k], gi);
                            }
                        }
                    } else {
                        // dB[l, :] += A[i, l] * g[i, :]
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for l in 0..k {
                                let x = av[i * k + l];
                                if x != F::zero() {
                                    axpy(&mut gb[l * n..(l + 1) * n], grow, x);
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p].values.len();
                    if let Some(gp) = self.grad_buf(grads, p) {
                        axpy(gp, &g[offset..offset + len], F::one());
                    }
                    offset += len;
                }
            }
            Op::Slice { input, start } => {
                let (input, start) = (*input, *start);
                if let Some(gi) = self.grad_buf(grads, input) {
                    axpy(&mut gi[start..start + g.len()], g, F::one());
                }
            }
            Op::Tanh(a) => self.unary_backward(grads, *a, g, |_, y| F::one() - y * y, out),
            Op::Relu(a) => {
                let a = *a;
                let av = self.nodes[a].values.clone();
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av.iter()) {
                        if x > F::zero() {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => self.unary_backward(grads, *a, g, |_, y| y * (F::one() - y), out),
            Op::Softplus(a) => {
                let a = *a;
                let av = self.nodes[a].values.clone();
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av.iter()) {
                        *d = *d + gi * sigmoid_scalar(x);
                    }
                }
            }
            Op::Exp(a) => self.unary_backward(grads, *a, g, |_, y| y, out),
            Op::Log(a) => {
                let a = *a;
                let av = self.nodes[a].values.clone();
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av.iter()) {
                        *d = *d + gi / x;
                    }
                }
            }
            Op::Square(a) => {
                let a = *a;
                let av = self.nodes[a].values.clone();
                let two = F::from_f64_lossy(2.0);
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av.iter()) {
                        *d = *d + gi * two * x;
                    }
                }
            }
            Op::Symlog(a) => {
                let a = *a;
                let av = self.nodes[a].values.clone();
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av.iter()) {
                        *d = *d + gi / (F::one() + x.abs());
                    }
                }
            }
            Op::Symexp(a) => {
                let a = *a;
                let av = self.nodes[a].values.clone();
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av.iter()) {
                        *d = *d + gi * x.abs().exp();
                    }
                }
            }
            Op::Clamp { input, lo, hi } => {
                let (input, lo, hi) = (*input, *lo, *hi);
                let av = self.nodes[input].values.clone();
                if let Some(ga) = self.grad_buf(grads, input) {
                    for ((d, &gi), &x) in ga.iter_mut().zip(g).zip(av.iter()) {
                        if x > lo && x < hi {
                            *d = *d + gi;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let a = *a;
                let dot = g.iter().zip(out.iter()).fold(F::zero(), |acc, (&gi, &y)| acc + gi * y);
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out.iter()) {
                        *d = *d + y * (gi - dot);
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let a = *a;
                let gsum = g.iter().fold(F::zero(), |acc, &gi| acc + gi);
                if let Some(ga) = self.grad_buf(grads, a) {
                    for ((d, &gi), &y) in ga.iter_mut().zip(g).zip(out.iter()) {
                        *d = *d + gi - y.exp() * gsum;
                    }
                }
            }
            Op::Sum(a) => {
                let a = *a;
                let gi = g[0];
                if let Some(ga) = self.grad_buf(grads, a) {
                    for d in ga.iter_mut() {
                        *d = *d + gi;
                    }
                }
            }
            Op::Mean(a) => {
                let a = *a;
                let n = F::from_usize(self.nodes[a].values.len()).unwrap();
                let gi = g[0] / n;
                if let Some(ga) = self.grad_buf(grads, a) {
                    for d in ga.iter_mut() {
                        *d = *d + gi;
                    }
                }
            }
            Op::Affine { input, mul, .. } => {
                let (input, mul) = (*input, *mul);
                if let Some(ga) = self.grad_buf(grads, input) {
                    axpy(ga, g, mul);
                }
            }
        }
    }

    fn unary_backward(
        &self,
        grads: &mut [Option<Vec<F>>],
        a: Id,
        g: &[F],
        dfn: impl Fn(F, F) -> F,
        out: &[F],
    ) -> () {
        let av = self.nodes[a].values.clone();
        if let Some(ga) = self.grad_buf(grads, a) {
            for (((d, &gi), &x), &y) in ga.iter_mut().zip(g).zip(av.iter()).zip(out.iter()) {
                *d = *d + gi * dfn(x, y);
            }
        }
    }
}

#[inline]
fn axpy<F: Scalar>(dst: &mut [F], src: &[F], scale: F) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + scale * s;
    }
}

#[inline]
fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    // Stable in both tails.
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn symlog_scalar<F: Scalar>(x: F) -> F {
    x.signum() * (F::one() + x.abs()).ln()
}

pub(crate) fn symexp_scalar<F: Scalar>(x: F) -> F {
    x.signum() * (x.abs().exp() - F::one())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = Tensor::from_vec(vec![0.0f64]);
        let y = tape.sigmoid(&x);
        assert_eq!(y.values(), &[0.5]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64 * 0.3 - 1.0).collect());
        let out = tape.matmul(&eye, &a);
        assert_eq!(out.shape(), &[3, 4]);
        assert_eq!(out.values(), a.values());
    }

    #[test]
    fn reparam_formula() {
        let mut tape = Tape::new();
        let mean = Tensor::from_vec(vec![1.0f64]);
        let log_std = Tensor::from_vec(vec![0.0f64]);
        let noise = Tensor::from_vec(vec![0.7f64]);
        let s = tape.gaussian_sample_reparam(&mean, &log_std, &noise);
        assert!((s.item() - 1.7).abs() < 1e-15);
    }

    #[test]
    fn symlog_fixed_points() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::from_vec(vec![0.0, std::f64::consts::E - 1.0, -12.5]);
        let y = tape.symlog(&x);
        assert_eq!(y.values()[0], 0.0);
        assert!((y.values()[1] - 1.0).abs() < 1e-12);
        let back = tape.symexp(&y);
        assert!((back.values()[2] - (-12.5)).abs() < 1e-12);
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![3.0f64]));
        let y = tape.square(&x);
        let grads = tape.backward(&y);
        assert_eq!(grads.get(&x).unwrap(), &[6.0]);
    }

    #[test]
    fn backward_constant_independence() {
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![3.0f64]));
        let w = tape.watch(&Tensor::from_vec(vec![2.0f64]));
        let y = tape.square(&w); // independent of x
        let grads = tape.backward(&y);
        assert!(grads.get(&x).is_none());
        assert_eq!(grads.wrt(&x).values(), &[0.0]);
    }

    #[test]
    fn accumulation_sums_over_uses() {
        let mut tape = Tape::new();
        let x = tape.watch(&Tensor::from_vec(vec![2.0f64]));
        let y = tape.mul(&x, &x); // x^2, both uses of the same node
        let grads = tape.backward(&y);
        assert_eq!(grads.get(&x).unwrap(), &[4.0]);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_shape_mismatch_panics() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let _ = tape.add(&a, &b);
    }

    #[test]
    #[should_panic(expected = "not recorded")]
    fn backward_unrecorded_root_panics() {
        let tape = Tape::<f64>::new();
        let root = Tensor::scalar(1.0);
        let _ = tape.backward(&root);
    }

    #[test]
    fn replay_is_bitwise_identical() {
        let run = || {
            let mut tape = Tape::new();
            let x = tape.watch(&Tensor::from_vec(vec![0.3f64, -1.2, 2.5]));
            let noise = Tensor::from_vec(vec![0.17, -0.4, 1.1]);
            let ls = Tensor::from_vec(vec![-0.5, 0.1, 0.9]);
            let s = tape.gaussian_sample_reparam(&x, &ls, &noise);
            let t = tape.tanh(&s);
            let m = tape.mean(&t);
            m.item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
