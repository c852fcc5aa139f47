//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass: leaves are registered with
//! [`Graph::input`] (no gradient) or [`Graph::param`] (gradient required),
//! ops append nodes in topological order, and [`Graph::backward`] replays
//! the tape in reverse. The graph is not mutated by `backward`, so values
//! can still be read afterwards.
//!
//! Every op validates shapes up front and checks its output for NaN/Inf;
//! a non-finite value is an error, never a silent result.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, ConvDims, LstmSaved};
use super::{Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Per-feature batch statistics produced by a train-mode batch-norm op,
/// used by the owner to update running statistics.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Tensor,
    pub var: Tensor,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Relu { x: usize },
    AddBias { x: usize, bias: usize },
    Matmul { a: usize, b: usize },
    BatchMatmul { a: usize, b: usize },
    TransposeLast { x: usize },
    Softmax { x: usize, axis: usize },
    Reshape { x: usize },
    Concat { xs: Vec<usize>, axis: usize },
    SelectStep { x: usize, step: usize },
    Sum { x: usize },
    Conv1d { x: usize, kernel: usize, bias: usize, stride: usize, dims: ConvDims },
    Lstm { x: usize, w: usize, u: usize, bias: usize, hidden: usize, saved: Box<LstmSaved> },
    BatchNorm { x: usize, gamma: usize, beta: usize, eps: f64, xhat: Vec<f64>, var: Vec<f64>, rows: usize },
    Dropout { x: usize, mask: Tensor },
    MaxPool { x: usize, width: usize, arg: Vec<u32> },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients per graph node after a backward pass. Indexed by [`Var`];
/// leaves registered via [`Graph::param`] are always populated when they
/// participate in the loss.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Reverse-mode autodiff tape. Single-threaded by construction; build one
/// per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value computed at `v` during the forward pass.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Registers a leaf that does not require a gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.leaf(value, false)
    }

    /// Registers a parameter leaf; `backward` will produce its gradient.
    pub fn param(&mut self, value: Tensor) -> Result<Var, TensorError> {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(op_name, value, op, &[a.0, b.0])
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(op_name, value, op, &[x.0])
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// Multiplication by a compile-time-constant scalar (the one permitted
    /// broadcast besides [`Graph::add_bias`]).
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        self.unary("scale", x, |v| v * c, Op::Scale { x: x.0, c })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("sigmoid", x, kernels::sigmoid, Op::Sigmoid { x: x.0 })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("tanh", x, f64::tanh, Op::Tanh { x: x.0 })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu { x: x.0 })
    }

    /// Adds a rank-1 bias along the trailing axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap_or(&0);
        if tb.rank() != 1 || tb.shape()[0] != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; tx.numel()];
        kernels::add_bias(tx.data(), tb.data(), &mut out);
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("add_bias", value, Op::AddBias { x: x.0, bias: bias.0 }, &[x.0, bias.0])
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = kernels::matmul2d(ta.data(), tb.data(), m, k, n);
        let value = Tensor::from_parts(vec![m, n], out);
        self.push("matmul", value, Op::Matmul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Per-item matmul over a shared leading batch axis.
    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ok = ta.rank() == 3
            && tb.rank() == 3
            && ta.shape()[0] == tb.shape()[0]
            && ta.shape()[2] == tb.shape()[1];
        if !ok {
            return Err(TensorError::ShapeMismatch {
                op: "batch_matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
        let out = kernels::batch_matmul(ta.data(), tb.data(), bs, m, k, n);
        let value = Tensor::from_parts(vec![bs, m, n], out);
        self.push("batch_matmul", value, Op::BatchMatmul { a: a.0, b: b.0 }, &[a.0, b.0])
    }

    /// Swaps the two trailing axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.rank() < 2 {
            return Err(TensorError::RankMismatch {
                op: "transpose_last",
                expected: 2,
                shape: tx.shape().to_vec(),
            });
        }
        let r = tx.rank();
        let (m, n) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        let batch: usize = tx.shape()[..r - 2].iter().product();
        let out = kernels::transpose_last(tx.data(), batch, m, n);
        let mut shape = tx.shape().to_vec();
        shape.swap(r - 2, r - 1);
        let value = Tensor::from_parts(shape, out);
        self.push("transpose_last", value, Op::TransposeLast { x: x.0 }, &[x.0])
    }

    // ── shape ops ───────────────────────────────────────────────────────

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var, TensorError> {
        let value = self.value(x).reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { x: x.0 }, &[x.0])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::Contract {
                op: "concat",
                msg: "no inputs".into(),
            });
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange {
                op: "concat",
                axis,
                shape: first,
            });
        }
        for &v in &xs[1..] {
            let s = self.value(v).shape();
            let agrees = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
        }
        let parts: Vec<&[f64]> = xs.iter().map(|&v| self.value(v).data()).collect();
        let shapes: Vec<&[usize]> = xs.iter().map(|&v| self.value(v).shape()).collect();
        let (out, shape) = kernels::concat(&parts, &shapes, axis);
        let value = Tensor::from_parts(shape, out);
        let ids: Vec<usize> = xs.iter().map(|v| v.0).collect();
        self.push("concat", value, Op::Concat { xs: ids.clone(), axis }, &ids)
    }

    /// Extracts one time step from a `[b×s×f]` sequence as `[b×f]`.
    pub fn select_step(&mut self, x: Var, step: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "select_step",
                expected: 3,
                shape: tx.shape().to_vec(),
            });
        }
        let (b, s, f) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if step >= s {
            return Err(TensorError::AxisOutOfRange {
                op: "select_step",
                axis: step,
                shape: tx.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; b * f];
        for item in 0..b {
            let src = (item * s + step) * f;
            out[item * f..(item + 1) * f].copy_from_slice(&tx.data()[src..src + f]);
        }
        let value = Tensor::from_parts(vec![b, f], out);
        self.push("select_step", value, Op::SelectStep { x: x.0, step }, &[x.0])
    }

    /// Reduces a tensor to its scalar element sum.
    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let total: f64 = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { x: x.0 }, &[x.0])
    }

    // ── nonlinear blocks ────────────────────────────────────────────────

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(TensorError::AxisOutOfRange {
                op: "softmax",
                axis,
                shape: tx.shape().to_vec(),
            });
        }
        let outer: usize = tx.shape()[..axis].iter().product();
        let len = tx.shape()[axis];
        let inner: usize = tx.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0; tx.numel()];
        kernels::softmax_slices(tx.data(), outer, len, inner, &mut out);
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax { x: x.0, axis }, &[x.0])
    }

    /// 1-D convolution: `x[b×s×ci]`, `kernel[w×ci×co]`, `bias[co]`.
    pub fn conv1d(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Var,
        stride: usize,
        same_padding: bool,
    ) -> Result<Var, TensorError> {
        let (tx, tk, tb) = (self.value(x), self.value(kernel), self.value(bias));
        if tx.rank() != 3 || tk.rank() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        let (b, s, ci) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let (w, kci, co) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
        if kci != ci || tb.shape() != [co] {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: tx.shape().to_vec(),
                rhs: tk.shape().to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Contract {
                op: "conv1d",
                msg: "stride must be >= 1".into(),
            });
        }
        let dims = kernels::conv1d_dims(s, w, stride, same_padding).ok_or_else(|| {
            TensorError::Contract {
                op: "conv1d",
                msg: format!("input of {s} steps is too short for a width-{w} kernel with valid padding"),
            }
        })?;
        let out = kernels::conv1d_fwd(tx.data(), b, s, ci, tk.data(), w, co, tb.data(), stride, dims);
        let value = Tensor::from_parts(vec![b, dims.steps_out, co], out);
        self.push(
            "conv1d",
            value,
            Op::Conv1d { x: x.0, kernel: kernel.0, bias: bias.0, stride, dims },
            &[x.0, kernel.0, bias.0],
        )
    }

    /// Full-sequence LSTM; returns the hidden sequence `[b×s×H]`.
    /// `w: [in×4H]`, `u: [H×4H]`, `bias: [4H]`, gate order `[i|f|g|o]`.
    pub fn lstm(&mut self, x: Var, w: Var, u: Var, bias: Var, hidden: usize) -> Result<Var, TensorError> {
        let (tx, tw, tu, tb) = (self.value(x), self.value(w), self.value(u), self.value(bias));
        if tx.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "lstm",
                expected: 3,
                shape: tx.shape().to_vec(),
            });
        }
        let (b, s, input) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        let g4 = 4 * hidden;
        if tw.shape() != [input, g4] || tu.shape() != [hidden, g4] || tb.shape() != [g4] {
            return Err(TensorError::ShapeMismatch {
                op: "lstm",
                lhs: tx.shape().to_vec(),
                rhs: tw.shape().to_vec(),
            });
        }
        let (h_seq, saved) =
            kernels::lstm_fwd(tx.data(), b, s, input, hidden, tw.data(), tu.data(), tb.data(), true);
        let value = Tensor::from_parts(vec![b, s, hidden], h_seq);
        self.push(
            "lstm",
            value,
            Op::Lstm {
                x: x.0,
                w: w.0,
                u: u.0,
                bias: bias.0,
                hidden,
                saved: Box::new(saved.expect("saved activations requested")),
            },
            &[x.0, w.0, u.0, bias.0],
        )
    }

    /// Train-mode batch normalization over the trailing feature axis, using
    /// the statistics of the current batch. Also returns those statistics so
    /// the caller can fold them into running estimates.
    pub fn batchnorm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), TensorError> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let feat = *tx.shape().last().unwrap_or(&0);
        if tx.rank() < 2 || tg.shape() != [feat] || tb.shape() != [feat] {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.numel() / feat;
        if rows < 2 {
            return Err(TensorError::Contract {
                op: "batchnorm",
                msg: "needs at least 2 rows to estimate batch variance".into(),
            });
        }
        let (mean, var) = kernels::feature_mean_var(tx.data(), rows, feat);
        let (y, xhat) = kernels::batchnorm_apply(tx.data(), &mean, &var, tg.data(), tb.data(), eps, true);
        let stats = BatchStats {
            mean: Tensor::from_parts(vec![feat], mean),
            var: Tensor::from_parts(vec![feat], var.clone()),
        };
        let value = Tensor::from_parts(tx.shape().to_vec(), y);
        let v = self.push(
            "batchnorm",
            value,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
                xhat: xhat.expect("xhat requested"),
                var,
                rows,
            },
            &[x.0, gamma.0, beta.0],
        )?;
        Ok((v, stats))
    }

    /// Inverted dropout with a freshly sampled mask: elements are zeroed
    /// with probability `rate`, survivors scaled by `1/(1−rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Contract {
                op: "dropout",
                msg: format!("rate must be in [0, 1), got {rate}"),
            });
        }
        let keep = 1.0 - rate;
        let mask_data: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let mask = Tensor::from_parts(self.value(x).shape().to_vec(), mask_data);
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with a caller-provided mask (used to freeze masks in tests).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Tensor) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if mask.shape() != tx.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                lhs: tx.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        let data = tx.data().iter().zip(mask.data()).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push("dropout", value, Op::Dropout { x: x.0, mask }, &[x.0])
    }

    /// Non-overlapping max pooling over the step axis of `[b×s×c]`.
    pub fn maxpool1d(&mut self, x: Var, width: usize) -> Result<Var, TensorError> {
        let tx = self.value(x);
        if tx.rank() != 3 {
            return Err(TensorError::RankMismatch {
                op: "maxpool1d",
                expected: 3,
                shape: tx.shape().to_vec(),
            });
        }
        let (b, s, c) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
        if width == 0 || s < width {
            return Err(TensorError::Contract {
                op: "maxpool1d",
                msg: format!("pool width {width} invalid for {s} steps"),
            });
        }
        let (out, arg) = kernels::maxpool1d_fwd(tx.data(), b, s, c, width);
        let value = Tensor::from_parts(vec![b, s / width, c], out);
        self.push("maxpool1d", value, Op::MaxPool { x: x.0, width, arg }, &[x.0])
    }

    /// Weighted categorical cross-entropy over a batch of logits, computed
    /// in the log-sum-exp stable form: `mean_n w[y_n]·(LSE(z_n) − z_n[y_n])`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        if tl.rank() != 2 {
            return Err(TensorError::RankMismatch {
                op: "cross_entropy",
                expected: 2,
                shape: tl.shape().to_vec(),
            });
        }
        let (b, k) = (tl.shape()[0], tl.shape()[1]);
        if targets.len() != b || weights.len() != k {
            return Err(TensorError::Contract {
                op: "cross_entropy",
                msg: format!(
                    "batch {b} with {k} classes got {} targets and {} weights",
                    targets.len(),
                    weights.len()
                ),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Contract {
                op: "cross_entropy",
                msg: format!("target {bad} out of range for {k} classes"),
            });
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for (n, row) in tl.data().chunks(k).enumerate() {
            let maxv = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let e = (z - maxv).exp();
                probs[n * k + j] = e;
                denom += e;
            }
            for p in &mut probs[n * k..(n + 1) * k] {
                *p /= denom;
            }
            let lse = maxv + denom.ln();
            loss += weights[targets[n]] * (lse - row[targets[n]]);
        }
        loss /= b as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits.0],
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss node. The graph itself is left
    /// untouched and can still be inspected afterwards.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let loss_t = self.value(loss);
        if loss_t.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: loss_t.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(loss_t.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], idx: usize, shape: &[usize], delta: Vec<f64>) {
        match &mut grads[idx] {
            Some(existing) => {
                let sum: Vec<f64> = existing.data().iter().zip(&delta).map(|(a, b)| a + b).collect();
                *existing = Tensor::from_parts(shape.to_vec(), sum);
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts(shape.to_vec(), delta));
            }
        }
    }

    fn backprop_node(
        &self,
        idx: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<(), TensorError> {
        let node = &self.nodes[idx];
        let val = |i: usize| self.nodes[i].value.data();
        let shape = |i: usize| self.nodes[i].value.shape();
        let gd = g.data();

        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                Self::accumulate(grads, *a, shape(*a), gd.to_vec());
                Self::accumulate(grads, *b, shape(*b), gd.to_vec());
            }
            Op::Sub { a, b } => {
                Self::accumulate(grads, *a, shape(*a), gd.to_vec());
                Self::accumulate(grads, *b, shape(*b), gd.iter().map(|v| -v).collect());
            }
            Op::Mul { a, b } => {
                let da = gd.iter().zip(val(*b)).map(|(&g, &y)| g * y).collect();
                let db = gd.iter().zip(val(*a)).map(|(&g, &x)| g * x).collect();
                Self::accumulate(grads, *a, shape(*a), da);
                Self::accumulate(grads, *b, shape(*b), db);
            }
            Op::Scale { x, c } => {
                Self::accumulate(grads, *x, shape(*x), gd.iter().map(|v| v * c).collect());
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(&g, &y)| g * y * (1.0 - y)).collect();
                Self::accumulate(grads, *x, shape(*x), dx);
            }
            Op::Tanh { x } => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(&g, &y)| g * (1.0 - y * y)).collect();
                Self::accumulate(grads, *x, shape(*x), dx);
            }
            Op::Relu { x } => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(&g, &y)| if y > 0.0 { g } else { 0.0 }).collect();
                Self::accumulate(grads, *x, shape(*x), dx);
            }
            Op::AddBias { x, bias } => {
                let n = shape(*bias)[0];
                Self::accumulate(grads, *x, shape(*x), gd.to_vec());
                Self::accumulate(grads, *bias, shape(*bias), kernels::column_sums(gd, n));
            }
            Op::Matmul { a, b } => {
                let (m, k) = (shape(*a)[0], shape(*a)[1]);
                let n = shape(*b)[1];
                let bt = kernels::transpose_last(val(*b), 1, k, n);
                let da = kernels::matmul2d(gd, &bt, m, n, k);
                let at = kernels::transpose_last(val(*a), 1, m, k);
                let db = kernels::matmul2d(&at, gd, k, m, n);
                Self::accumulate(grads, *a, shape(*a), da);
                Self::accumulate(grads, *b, shape(*b), db);
            }
            Op::BatchMatmul { a, b } => {
                let (bs, m, k) = (shape(*a)[0], shape(*a)[1], shape(*a)[2]);
                let n = shape(*b)[2];
                let bt = kernels::transpose_last(val(*b), bs, k, n);
                let da = kernels::batch_matmul(gd, &bt, bs, m, n, k);
                let at = kernels::transpose_last(val(*a), bs, m, k);
                let db = kernels::batch_matmul(&at, gd, bs, k, m, n);
                Self::accumulate(grads, *a, shape(*a), da);
                Self::accumulate(grads, *b, shape(*b), db);
            }
            Op::TransposeLast { x } => {
                let r = g.rank();
                let (m, n) = (g.shape()[r - 2], g.shape()[r - 1]);
                let batch: usize = g.shape()[..r - 2].iter().product();
                let dx = kernels::transpose_last(gd, batch, m, n);
                Self::accumulate(grads, *x, shape(*x), dx);
            }
            Op::Softmax { x, axis } => {
                let sx = shape(*x);
                let outer: usize = sx[..*axis].iter().product();
                let len = sx[*axis];
                let inner: usize = sx[*axis + 1..].iter().product();
                let dx = kernels::softmax_backward(node.value.data(), gd, outer, len, inner);
                Self::accumulate(grads, *x, sx, dx);
            }
            Op::Reshape { x } => {
                Self::accumulate(grads, *x, shape(*x), gd.to_vec());
            }
            Op::Concat { xs, axis } => {
                let shapes: Vec<&[usize]> = xs.iter().map(|&i| shape(i)).collect();
                let parts = kernels::concat_split(gd, &shapes, *axis);
                for (&i, part) in xs.iter().zip(parts) {
                    Self::accumulate(grads, i, shape(i), part);
                }
            }
            Op::SelectStep { x, step } => {
                let sx = shape(*x);
                let (b, s, f) = (sx[0], sx[1], sx[2]);
                let mut dx = vec![0.0; b * s * f];
                for item in 0..b {
                    let dst = (item * s + step) * f;
                    dx[dst..dst + f].copy_from_slice(&gd[item * f..(item + 1) * f]);
                }
                Self::accumulate(grads, *x, sx, dx);
            }
            Op::Sum { x } => {
                let seed = gd[0];
                Self::accumulate(grads, *x, shape(*x), vec![seed; self.nodes[*x].value.numel()]);
            }
            Op::Conv1d { x, kernel, bias, stride, dims } => {
                let sx = shape(*x);
                let sk = shape(*kernel);
                let (b, s, ci) = (sx[0], sx[1], sx[2]);
                let (w, co) = (sk[0], sk[2]);
                let (dx, dk, db) =
                    kernels::conv1d_bwd(val(*x), gd, b, s, ci, val(*kernel), w, co, *stride, *dims);
                Self::accumulate(grads, *x, sx, dx);
                Self::accumulate(grads, *kernel, sk, dk);
                Self::accumulate(grads, *bias, shape(*bias), db);
            }
            Op::Lstm { x, w, u, bias, hidden, saved } => {
                let sx = shape(*x);
                let (b, s, input) = (sx[0], sx[1], sx[2]);
                let (dx, dw, du, db) = kernels::lstm_bwd(
                    val(*x),
                    node.value.data(),
                    saved,
                    gd,
                    b,
                    s,
                    input,
                    *hidden,
                    val(*w),
                    val(*u),
                );
                Self::accumulate(grads, *x, sx, dx);
                Self::accumulate(grads, *w, shape(*w), dw);
                Self::accumulate(grads, *u, shape(*u), du);
                Self::accumulate(grads, *bias, shape(*bias), db);
            }
            Op::BatchNorm { x, gamma, beta, eps, xhat, var, rows } => {
                let (dx, dgamma, dbeta) =
                    kernels::batchnorm_bwd(gd, xhat, var, val(*gamma), *eps, *rows);
                Self::accumulate(grads, *x, shape(*x), dx);
                Self::accumulate(grads, *gamma, shape(*gamma), dgamma);
                Self::accumulate(grads, *beta, shape(*beta), dbeta);
            }
            Op::Dropout { x, mask } => {
                let dx = gd.iter().zip(mask.data()).map(|(&g, &m)| g * m).collect();
                Self::accumulate(grads, *x, shape(*x), dx);
            }
            Op::MaxPool { x, width, arg } => {
                let sx = shape(*x);
                let (b, s, c) = (sx[0], sx[1], sx[2]);
                let dx = kernels::maxpool1d_bwd(gd, arg, b, s, c, s / width);
                Self::accumulate(grads, *x, sx, dx);
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let sl = shape(*logits);
                let (b, k) = (sl[0], sl[1]);
                let scale = gd[0] / b as f64;
                let mut dl = vec![0.0; b * k];
                for n in 0..b {
                    let wn = weights[targets[n]] * scale;
                    for j in 0..k {
                        let indicator = if j == targets[n] { 1.0 } else { 0.0 };
                        dl[n * k + j] = wn * (probs[n * k + j] - indicator);
                    }
                }
                Self::accumulate(grads, *logits, sl, dl);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let eye = g.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap();
        let m = g.input(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0])).unwrap();
        let y = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 4.0, 5.0, 6.0]);

        let a = g.input(t(&[1, 2], &[1.0, 2.0])).unwrap();
        let b = g.input(t(&[2, 1], &[3.0, 4.0])).unwrap();
        let y = g.matmul(a, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(vec![2, 3])).unwrap();
        let b = g.input(Tensor::zeros(vec![4, 2])).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "bad message: {msg}");
    }

    #[test]
    fn softmax_analytic_cases() {
        let mut g = Graph::new();
        let x = g.input(t(&[2], &[0.0, 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.input(t(&[2], &[(2.0f64).ln(), 0.0])).unwrap();
        let y = g.softmax(x, 0).unwrap();
        let got = g.value(y).data();
        assert!((got[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((got[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn elementwise_analytic_cases() {
        let mut g = Graph::new();
        let x = g.input(t(&[3], &[0.0, -3.0, 3.0])).unwrap();
        let s = g.sigmoid(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 3.0]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_through_softmax_sum_is_zero() {
        // f(x) = sum(softmax(x)) is constant 1, so the gradient vanishes.
        let mut g = Graph::new();
        let x = g
            .param(t(&[4], &[0.3, -1.2, 0.7, 2.0]))
            .unwrap();
        let sm = g.softmax(x, 0).unwrap();
        let loss = g.sum(sm).unwrap();
        let grads = g.backward(loss).unwrap();
        for &v in grads.get(x).unwrap().data() {
            assert!(v.abs() < 1e-15, "expected zero gradient, got {v}");
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[1.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn nan_input_is_rejected_at_the_leaf() {
        let mut g = Graph::new();
        assert!(matches!(
            g.input(Tensor::from_parts(vec![1], vec![f64::NAN])),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn graph_is_reusable_after_backward() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0)).unwrap();
        let y = g.mul(x, x).unwrap();
        let _ = g.backward(y).unwrap();
        // Values unchanged, and more ops can still be appended.
        assert_eq!(g.value(y).item(), 4.0);
        let z = g.mul(y, y).unwrap();
        assert_eq!(g.value(z).item(), 16.0);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_k() {
        let mut g = Graph::new();
        let logits = g.input(Tensor::zeros(vec![4, 6])).unwrap();
        let loss = g.cross_entropy(logits, &[0, 1, 2, 3], &[1.0; 6]).unwrap();
        assert!((g.value(loss).item() - (6.0f64).ln()).abs() < 1e-12);
    }
}
