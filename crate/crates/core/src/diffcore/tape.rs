//! Reverse-mode differentiation over a recorded sequence of kernels.
//!
//! Every call on [`Tape`] evaluates one kernel eagerly, stores its output and
//! enough context to apply the kernel's backward rule. [`Tape::backward`]
//! replays the record in reverse.

use std::sync::Arc;

use super::kernels;
use super::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{matmul_raw, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Deliberate backward-rule corruptions, used to prove the gradient checker
/// catches broken kernels.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    SigmoidBackwardSign,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { param: Option<ParamId> },
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    Linear1x1 { x: Var, w: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, smoothing: f64, probs: Tensor },
    BlockGram { a: Var, b: Var, block: usize },
    ConcatRows(Vec<Var>),
    BlockMeanCols { x: Var, block: usize },
    SplitChannels { x: Var, positions: usize },
    WeightedSum(Vec<(Var, f64)>),
    Dot { x: Var, weights: Tensor },
    AugmentedCe(Box<AugmentedCeCtx>),
}

#[derive(Debug, Clone)]
struct AugmentedCeCtx {
    x: Var,
    w: Var,
    b: Var,
    labels: Vec<usize>,
    covs: Arc<Vec<Tensor>>,
    lambda: f64,
    probs: Tensor,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

/// Gradients of one scalar with respect to every recorded value.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a constant; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, false)
    }

    /// Records a free input that receives a gradient.
    pub fn watch(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: None }, true)
    }

    /// Records the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Leaf { param: Some(id) }, true)
    }

    /// Records a parameter's value as a constant (frozen).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.value(id).clone())
    }

    /// Copies `v` into a fresh constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn matrix(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if !t.is_matrix() {
            return Err(Error::shape(op, format!("expected matrix, got {:?}", t.shape())));
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.matrix(a, "transpose")?;
        let value = self.value(a).transpose();
        let ng = self.ng(a);
        Ok(self.push(value, Op::Transpose(a), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut value = self.value(a).clone();
        value.axpy(1.0, self.value(b));
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v * c);
        let ng = self.ng(a);
        self.push(value, Op::Scale(a, c), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(kernels::sigmoid);
        let ng = self.ng(x);
        self.push(value, Op::Sigmoid(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let ng = self.ng(x);
        self.push(value, Op::Relu(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = kernels::softmax(self.value(x), axis)?;
        let ng = self.ng(x);
        Ok(self.push(value, Op::Softmax { x, axis }, ng))
    }

    /// Per-position affine map `w·x + b` over the columns of `x` (a 1×1
    /// convolution with `x` laid out as channels × positions).
    pub fn linear_1x1(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (d_in, p) = self.matrix(x, "linear_1x1")?;
        let (d_out, wd) = self.matrix(w, "linear_1x1")?;
        let bias = self.value(b);
        if wd != d_in || bias.numel() != d_out {
            return Err(Error::shape(
                "linear_1x1",
                format!(
                    "x {:?}, w {:?}, b {:?}",
                    self.value(x).shape(),
                    self.value(w).shape(),
                    bias.shape()
                ),
            ));
        }
        let mut value = self.value(w).matmul(self.value(x))?;
        let bias = self.value(b).data().to_vec();
        for (r, &bv) in bias.iter().enumerate() {
            for c in 0..p {
                value.data_mut()[r * p + c] += bv;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(value, Op::Linear1x1 { x, w, b }, ng))
    }

    /// Mean cross-entropy of row-wise logits against target indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_smoothed(logits, targets, 0.0)
    }

    /// Cross-entropy against `(1-ε)·onehot + ε/c` targets.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        let (loss, probs) = kernels::cross_entropy(self.value(logits), targets, smoothing)?;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                probs,
            },
            ng,
        ))
    }

    /// Per-block Gram products. `a` and `b` are `D × (B·P)`; the output stacks
    /// the `B` blocks `a_βᵀ b_β` (each `P × P`) into a `(B·P) × P` matrix.
    pub fn block_gram(&mut self, a: Var, b: Var, block: usize) -> Result<Var> {
        let (d, n) = self.matrix(a, "block_gram")?;
        if self.value(b).shape() != [d, n] || block == 0 || n % block != 0 {
            return Err(Error::shape(
                "block_gram",
                format!(
                    "a {:?}, b {:?}, block {block}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            ));
        }
        let value = kernels::block_gram(self.value(a), self.value(b), block);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::BlockGram { a, b, block }, ng))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, cols) = self.matrix(*first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.matrix(p, "concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", format!("{c} vs {cols} columns")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Averages each run of `block` consecutive columns: `R × (B·P)` → `R × B`.
    pub fn block_mean_cols(&mut self, x: Var, block: usize) -> Result<Var> {
        let (r, n) = self.matrix(x, "block_mean_cols")?;
        if block == 0 || n % block != 0 {
            return Err(Error::shape("block_mean_cols", format!("{n} columns, block {block}")));
        }
        let nb = n / block;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * nb];
        for i in 0..r {
            for j in 0..nb {
                let s: f64 = src[i * n + j * block..i * n + (j + 1) * block].iter().sum();
                out[i * nb + j] = s / block as f64;
            }
        }
        let ng = self.ng(x);
        let value = Tensor::new(vec![r, nb], out)?;
        Ok(self.push(value, Op::BlockMeanCols { x, block }, ng))
    }

    /// Regroups a `(D·P) × B` matrix of per-sample channel stacks into the
    /// `D × (B·P)` channels-by-positions layout.
    pub fn split_channels(&mut self, x: Var, positions: usize) -> Result<Var> {
        let (dp, b) = self.matrix(x, "split_channels")?;
        if positions == 0 || dp % positions != 0 {
            return Err(Error::shape("split_channels", format!("{dp} rows, {positions} positions")));
        }
        let d = dp / positions;
        let src = self.value(x).data();
        let mut out = vec![0.0; dp * b];
        for ch in 0..d {
            for p in 0..positions {
                for s in 0..b {
                    out[ch * b * positions + s * positions + p] = src[(ch * positions + p) * b + s];
                }
            }
        }
        let ng = self.ng(x);
        let value = Tensor::new(vec![d, b * positions], out)?;
        Ok(self.push(value, Op::SplitChannels { x, positions }, ng))
    }

    /// `Σ cᵢ·xᵢ` over equally shaped values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let first = terms
            .first()
            .ok_or_else(|| Error::shape("weighted_sum", "no inputs"))?;
        let mut value = Tensor::zeros(self.value(first.0).shape());
        for &(v, c) in terms {
            if self.value(v).shape() != value.shape() {
                return Err(Error::shape("weighted_sum", "mismatched shapes"));
            }
            value.axpy(c, self.value(v));
        }
        let ng = terms.iter().any(|&(v, _)| self.ng(v));
        Ok(self.push(value, Op::WeightedSum(terms.to_vec()), ng))
    }

    /// Scalar `Σ wᵢ·xᵢ` against constant weights.
    pub fn dot(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        if weights.numel() != self.value(x).numel() {
            return Err(Error::shape("dot", "weights do not match input"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        let ng = self.ng(x);
        Ok(self.push(Tensor::scalar(s), Op::Dot { x, weights }, ng))
    }

    /// Closed-form upper bound of the expected cross-entropy under Gaussian
    /// feature perturbations `N(0, λ·Σ_y)`, averaged over the rows of `x`.
    ///
    /// `x` is `N × D`, `w` is `K × D`, `b` has `K` entries and `covs[k]` is
    /// the `D × D` covariance of class `k`. Covariances are constants.
    pub fn augmented_cross_entropy(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        labels: &[usize],
        covs: Arc<Vec<Tensor>>,
        lambda: f64,
    ) -> Result<Var> {
        let (loss, probs) = kernels::augmented_ce_forward(
            self.value(x),
            self.value(w),
            self.value(b),
            labels,
            &covs,
            lambda,
        )?;
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::AugmentedCe(Box::new(AugmentedCeCtx {
                x,
                w,
                b,
                labels: labels.to_vec(),
                covs,
                lambda,
                probs,
            })),
            ng,
        ))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Gradients {
        let grads = self.backward(loss);
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Leaf { param: Some(id) }, Some(g)) = (&node.op, g) {
                store.get_mut(*id).grad.axpy(1.0, g);
            }
        }
        grads
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.axpy(1.0, &delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let y = &node.value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.ng(*a) {
                    acc(*a, matmul_raw(g.data(), bv.transpose().data(), m, n, k));
                }
                if self.ng(*b) {
                    acc(*b, matmul_raw(av.transpose().data(), g.data(), k, m, n));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Scale(a, c) => acc(*a, g.map(|v| v * c)),
            Op::Sigmoid(x) => {
                let sign = if self.fault == Some(Fault::SigmoidBackwardSign) {
                    -1.0
                } else {
                    1.0
                };
                let mut dx = g.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(y.data()) {
                    *d *= sign * s * (1.0 - s);
                }
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let mut dx = g.clone();
                for (d, &xv) in dx.data_mut().iter_mut().zip(self.value(*x).data()) {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax { x, axis } => acc(*x, kernels::softmax_backward(y, g, *axis)),
            Op::Linear1x1 { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (d_in, p) = (xv.rows(), xv.cols());
                let d_out = wv.rows();
                if self.ng(*x) {
                    acc(*x, matmul_raw(wv.transpose().data(), g.data(), d_in, d_out, p));
                }
                if self.ng(*w) {
                    acc(*w, matmul_raw(g.data(), xv.transpose().data(), d_out, p, d_in));
                }
                if self.ng(*b) {
                    let db: Vec<f64> = (0..d_out).map(|r| g.row(r).iter().sum()).collect();
                    let shape = self.value(*b).shape().to_vec();
                    acc(*b, Tensor::new(shape, db).expect("bias shape"));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                probs,
            } => {
                let dl = kernels::cross_entropy_backward(probs, targets, *smoothing, g.item());
                acc(*logits, dl);
            }
            Op::BlockGram { a, b, block } => {
                let (da, db) =
                    kernels::block_gram_backward(self.value(*a), self.value(*b), g, *block);
                acc(*a, da);
                acc(*b, db);
            }
            Op::ConcatRows(parts) => {
                let cols = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let r = self.value(p).rows();
                    let slice = g.data()[offset * cols..(offset + r) * cols].to_vec();
                    acc(p, Tensor::new(vec![r, cols], slice).expect("concat slice"));
                    offset += r;
                }
            }
            Op::BlockMeanCols { x, block } => {
                let (r, n) = (self.value(*x).rows(), self.value(*x).cols());
                let nb = n / block;
                let mut dx = vec![0.0; r * n];
                for i in 0..r {
                    for j in 0..nb {
                        let gv = g.data()[i * nb + j] / *block as f64;
                        dx[i * n + j * block..i * n + (j + 1) * block].fill(gv);
                    }
                }
                acc(*x, Tensor::new(vec![r, n], dx).expect("block mean grad"));
            }
            Op::SplitChannels { x, positions } => {
                let (dp, b) = (self.value(*x).rows(), self.value(*x).cols());
                let d = dp / positions;
                let mut dx = vec![0.0; dp * b];
                for ch in 0..d {
                    for p in 0..*positions {
                        for s in 0..b {
                            dx[(ch * positions + p) * b + s] =
                                g.data()[ch * b * positions + s * positions + p];
                        }
                    }
                }
                acc(*x, Tensor::new(vec![dp, b], dx).expect("split grad"));
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    acc(v, g.map(|gv| gv * c));
                }
            }
            Op::Dot { x, weights } => {
                let gv = g.item();
                let shape = self.value(*x).shape().to_vec();
                let dx = weights.data().iter().map(|w| w * gv).collect();
                acc(*x, Tensor::new(shape, dx).expect("dot grad"));
            }
            Op::AugmentedCe(ctx) => {
                let (dx, dw, db) = kernels::augmented_ce_backward(
                    self.value(ctx.x),
                    self.value(ctx.w),
                    &ctx.labels,
                    &ctx.covs,
                    ctx.lambda,
                    &ctx.probs,
                    g.item(),
                );
                acc(ctx.x, dx);
                acc(ctx.w, dw);
                let shape = self.value(ctx.b).shape().to_vec();
                acc(ctx.b, db.reshape(shape).expect("bias grad"));
            }
        }
    }
}
