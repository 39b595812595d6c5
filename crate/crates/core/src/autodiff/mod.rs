//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every primitive in execution order. [`Graph::backward`]
//! walks the tape in exact reverse order and sums the contribution of every
//! consumer into each node's gradient.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{gradcheck, GradCheckReport, GradCheckSpec, REL_ERR_FLOOR};

use crate::error::{Error, Result};
use crate::tensor::{as_dims4, Scalar, Tensor};
use kernels::{ConvDims, UpDims};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    /// Exponential moving average update: `r ← (1 − m)·r + m·batch`.
    pub fn update(&mut self, batch: &BatchStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for (r, &b) in self.mean.iter_mut().zip(&batch.mean) {
            *r = keep * *r + momentum * b;
        }
        for (r, &b) in self.var.iter_mut().zip(&batch.var) {
            *r = keep * *r + momentum * b;
        }
    }
}

/// Batch statistics observed by a train-mode batch norm.
/// `var` is the unbiased estimate used for running-stat updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Loss target: a 0/1 mask where any other value (255 by convention) is nodata.
#[derive(Clone, Debug)]
pub(crate) struct LossTarget<T> {
    pub y: Vec<T>,
    pub valid: Vec<bool>,
}

impl<T: Scalar> LossTarget<T> {
    pub fn from_mask(mask: &[u8]) -> Self {
        LossTarget {
            y: mask
                .iter()
                .map(|&m| if m == 1 { T::one() } else { T::zero() })
                .collect(),
            valid: mask.iter().map(|&m| m <= 1).collect(),
        }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        dims: ConvDims,
    },
    UpConv {
        input: Var,
        weight: Var,
        bias: Var,
        dims: UpDims,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
    },
    ConcatBatch {
        a: Var,
        b: Var,
    },
    SliceBatch {
        input: Var,
        start: usize,
    },
    Sub(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Sum(Var),
    WeightedSum {
        input: Var,
        coeffs: Vec<T>,
    },
    Bce {
        probs: Var,
        target: LossTarget<T>,
        pos_weight: T,
        valid_count: usize,
    },
    Dice {
        probs: Var,
        target: LossTarget<T>,
        eps: T,
        intersection: T,
        denominator: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Execution tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

/// Clamp applied to probabilities inside cross-entropy logarithms.
pub(crate) const PROB_CLAMP: f64 = 1e-7;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Records a copy of `t` as a leaf. It participates in differentiation iff
    /// `t.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies a node's value into a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("graph nodes hold consistent shapes")
    }

    /// Gradient of the last `backward` loss with respect to `v`.
    ///
    /// Returns `None` before `backward` or for nodes that do not require grad.
    /// Nodes that require grad but were unreachable from the loss hold zeros.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Stores the gradient of `v` into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor<T>) {
        match self.grad(v) {
            Some(g) => t.set_grad(g.to_vec()),
            None => t.set_grad(vec![T::zero(); t.numel()]),
        }
    }

    // ---- primitives -------------------------------------------------------

    /// Same-size convolution: `weight` is C_out×C_in×k×k with odd k, zero padding k/2.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, c_in, h, w] = as_dims4("conv2d", self.shape(input))?;
        let ws = self.shape(weight).to_vec();
        let [c_out, wc_in, kh, kw] = as_dims4("conv2d", &ws)?;
        if wc_in != c_in {
            return Err(Error::mismatch("conv2d", self.shape(input), &ws));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be odd and square, got {kh}×{kw}"),
            ));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::mismatch("conv2d bias", self.shape(bias), &[c_out]));
        }
        let dims = ConvDims {
            n,
            c_in,
            c_out,
            h,
            w,
            k: kh,
        };
        let out = kernels::conv2d_forward(
            dims,
            self.value(input),
            self.value(weight),
            self.value(bias),
        );
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            vec![n, c_out, h, w],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
            rg,
        ))
    }

    /// Stride-2 2×2 transposed convolution; `weight` is C_in×C_out×2×2.
    pub fn upconv2x2(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let [n, c_in, h, w] = as_dims4("upconv2x2", self.shape(input))?;
        let ws = self.shape(weight).to_vec();
        let [wc_in, c_out, kh, kw] = as_dims4("upconv2x2", &ws)?;
        if wc_in != c_in {
            return Err(Error::mismatch("upconv2x2", self.shape(input), &ws));
        }
        if (kh, kw) != (2, 2) {
            return Err(Error::shape(
                "upconv2x2",
                format!("kernel must be 2×2, got {kh}×{kw}"),
            ));
        }
        if self.shape(bias) != [c_out] {
            return Err(Error::mismatch(
                "upconv2x2 bias",
                self.shape(bias),
                &[c_out],
            ));
        }
        let dims = UpDims {
            n,
            c_in,
            c_out,
            h,
            w,
        };
        let out = kernels::upconv_forward(
            dims,
            self.value(input),
            self.value(weight),
            self.value(bias),
        );
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            vec![n, c_out, 2 * h, 2 * w],
            out,
            Op::UpConv {
                input,
                weight,
                bias,
                dims,
            },
            rg,
        ))
    }

    /// Batch normalization over N×H×W per channel.
    ///
    /// Train mode normalizes with batch statistics and returns them for the
    /// caller's running-stat update. Eval mode requires `running`.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: Option<&RunningStats<T>>,
        mode: Mode,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        if eps.is_nan() || eps <= T::zero() {
            return Err(Error::Config("batch-norm eps must be positive".into()));
        }
        let shape = self.shape(input).to_vec();
        let [n, c, h, w] = as_dims4("batchnorm2d", &shape)?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::mismatch("batchnorm2d", self.shape(p), &[c]));
            }
        }
        let hw = h * w;
        let m = n * hw;
        let x = self.value(input);
        let (mean, var_biased, batch) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mf = T::from_usize(m).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s = x[(b * c + ch) * hw..][..hw].iter().fold(s, |a, &v| a + v);
                    }
                    let mu = s / mf;
                    let mut ss = T::zero();
                    for b in 0..n {
                        ss = x[(b * c + ch) * hw..][..hw]
                            .iter()
                            .fold(ss, |a, &v| a + (v - mu) * (v - mu));
                    }
                    mean[ch] = mu;
                    var[ch] = ss / mf;
                }
                let unbiased = if m > 1 {
                    let scale = mf / T::from_usize(m - 1).unwrap();
                    var.iter().map(|&v| v * scale).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            Mode::Eval => {
                let r = running.ok_or_else(|| {
                    Error::Config("batch norm in eval mode needs running statistics".into())
                })?;
                if r.mean.len() != c || r.var.len() != c {
                    return Err(Error::mismatch(
                        "batchnorm2d running stats",
                        &[r.mean.len()],
                        &[c],
                    ));
                }
                (r.mean.clone(), r.var.clone(), None)
            }
        };
        let inv_std: Vec<T> = var_biased
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let g = self.value(gamma);
        let be = self.value(beta);
        let mut xhat = vec![T::zero(); x.len()];
        let mut out = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for k in base..base + hw {
                    let xh = (x[k] - mean[ch]) * inv_std[ch];
                    xhat[k] = xh;
                    out[k] = g[ch] * xh + be[ch];
                }
            }
        }
        let rg = self.needs(&[input, gamma, beta]);
        let v = self.push(
            shape,
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            rg,
        );
        Ok((v, batch))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self
            .value(input)
            .iter()
            .map(|&v| if v <= T::zero() { T::zero() } else { v })
            .collect();
        let rg = self.needs(&[input]);
        self.push(self.shape(input).to_vec(), out, Op::Relu(input), rg)
    }

    pub fn maxpool2x2(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = as_dims4("maxpool2x2", self.shape(input))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                "maxpool2x2",
                format!("spatial dims must be even, got {h}×{w}"),
            ));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(input), n * c, h, w);
        let rg = self.needs(&[input]);
        Ok(self.push(
            vec![n, c, h / 2, w / 2],
            out,
            Op::MaxPool { input, argmax },
            rg,
        ))
    }

    /// Concatenates along channels: `a` fills `[0, C1)`, `b` fills `[C1, C1+C2)`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = as_dims4("concat_channels", self.shape(a))?;
        let [nb, cb, hb, wb] = as_dims4("concat_channels", self.shape(b))?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::mismatch(
                "concat_channels",
                self.shape(a),
                self.shape(b),
            ));
        }
        let hw = ha * wa;
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(na * (ca + cb) * hw);
        for n in 0..na {
            out.extend_from_slice(&va[n * ca * hw..(n + 1) * ca * hw]);
            out.extend_from_slice(&vb[n * cb * hw..(n + 1) * cb * hw]);
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![na, ca + cb, ha, wa], out, Op::Concat { a, b }, rg))
    }

    /// Stacks `a` and `b` along the batch axis.
    pub fn concat_batch(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, c, h, w] = as_dims4("concat_batch", self.shape(a))?;
        let [nb, cb, hb, wb] = as_dims4("concat_batch", self.shape(b))?;
        if (c, h, w) != (cb, hb, wb) {
            return Err(Error::mismatch(
                "concat_batch",
                self.shape(a),
                self.shape(b),
            ));
        }
        let mut out = Vec::with_capacity((na + nb) * c * h * w);
        out.extend_from_slice(self.value(a));
        out.extend_from_slice(self.value(b));
        let rg = self.needs(&[a, b]);
        Ok(self.push(vec![na + nb, c, h, w], out, Op::ConcatBatch { a, b }, rg))
    }

    /// Samples `[start, end)` of the batch axis.
    pub fn slice_batch(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let [n, c, h, w] = as_dims4("slice_batch", self.shape(input))?;
        if start >= end || end > n {
            return Err(Error::shape(
                "slice_batch",
                format!("range {start}..{end} outside batch of {n}"),
            ));
        }
        let item = c * h * w;
        let out = self.value(input)[start * item..end * item].to_vec();
        let rg = self.needs(&[input]);
        Ok(self.push(
            vec![end - start, c, h, w],
            out,
            Op::SliceBatch { input, start },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::mismatch(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.needs(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * k).collect();
        let rg = self.needs(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, k), rg)
    }

    /// Logistic function, stable for large |x|. Outputs are clamped into the
    /// open interval so they never round to exactly 0 or 1.
    pub fn sigmoid(&mut self, input: Var) -> Var {
        let lo = T::min_positive_value();
        let hi = T::one() - T::epsilon();
        let out = self
            .value(input)
            .iter()
            .map(|&x| {
                let s = if x >= T::zero() {
                    T::one() / (T::one() + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (T::one() + e)
                };
                clamp(s, lo, hi)
            })
            .collect();
        let rg = self.needs(&[input]);
        self.push(self.shape(input).to_vec(), out, Op::Sigmoid(input), rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.needs(&[input]);
        self.push(vec![1], vec![s], Op::Sum(input), rg)
    }

    /// Scalar `Σ coeffs[i]·input[i]`.
    pub fn weighted_sum(&mut self, input: Var, coeffs: Vec<T>) -> Result<Var> {
        if coeffs.len() != self.value(input).len() {
            return Err(Error::mismatch(
                "weighted_sum",
                self.shape(input),
                &[coeffs.len()],
            ));
        }
        let s = self
            .value(input)
            .iter()
            .zip(&coeffs)
            .fold(T::zero(), |a, (&v, &c)| a + v * c);
        let rg = self.needs(&[input]);
        Ok(self.push(vec![1], vec![s], Op::WeightedSum { input, coeffs }, rg))
    }

    pub(crate) fn bce(&mut self, probs: Var, target: LossTarget<T>, pos_weight: T) -> Result<Var> {
        if target.y.len() != self.value(probs).len() {
            return Err(Error::mismatch(
                "weighted_bce",
                self.shape(probs),
                &[target.y.len()],
            ));
        }
        let lo = T::from_f64_lossy(PROB_CLAMP);
        let hi = T::one() - lo;
        let mut total = T::zero();
        let mut count = 0usize;
        for ((&p, &y), &ok) in self.value(probs).iter().zip(&target.y).zip(&target.valid) {
            if !ok {
                continue;
            }
            let p = clamp(p, lo, hi);
            total = total - (pos_weight * y * p.ln() + (T::one() - y) * (T::one() - p).ln());
            count += 1;
        }
        let value = if count > 0 {
            total / T::from_usize(count).unwrap()
        } else {
            T::zero()
        };
        let rg = self.needs(&[probs]);
        Ok(self.push(
            vec![1],
            vec![value],
            Op::Bce {
                probs,
                target,
                pos_weight,
                valid_count: count,
            },
            rg,
        ))
    }

    pub(crate) fn dice(&mut self, probs: Var, target: LossTarget<T>, eps: T) -> Result<Var> {
        if target.y.len() != self.value(probs).len() {
            return Err(Error::mismatch(
                "dice_loss",
                self.shape(probs),
                &[target.y.len()],
            ));
        }
        let mut inter = T::zero();
        let mut sp = T::zero();
        let mut sy = T::zero();
        for ((&p, &y), &ok) in self.value(probs).iter().zip(&target.y).zip(&target.valid) {
            if ok {
                inter = inter + p * y;
                sp = sp + p;
                sy = sy + y;
            }
        }
        let two = T::from_f64_lossy(2.0);
        let denominator = sp + sy + eps;
        let value = T::one() - (two * inter + eps) / denominator;
        let rg = self.needs(&[probs]);
        Ok(self.push(
            vec![1],
            vec![value],
            Op::Dice {
                probs,
                target,
                eps,
                intersection: inter,
                denominator,
            },
            rg,
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates gradients from the scalar `loss` to every node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(gout) = upper[0].as_deref() else {
                continue;
            };
            self.backward_node(node, gout, lower);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && g.is_none() {
                *g = Some(vec![T::zero(); node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, contrib: Vec<T>| accumulate(grads, v, contrib);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                if wants(*input) {
                    acc(
                        *input,
                        kernels::conv2d_backward_input(*dims, gout, &nodes[weight.0].value),
                    );
                }
                if wants(*weight) || wants(*bias) {
                    let (gw, gb) =
                        kernels::conv2d_backward_params(*dims, gout, &nodes[input.0].value);
                    if wants(*weight) {
                        acc(*weight, gw);
                    }
                    if wants(*bias) {
                        acc(*bias, gb);
                    }
                }
            }
            Op::UpConv {
                input,
                weight,
                bias,
                dims,
            } => {
                if wants(*input) {
                    acc(
                        *input,
                        kernels::upconv_backward_input(*dims, gout, &nodes[weight.0].value),
                    );
                }
                if wants(*weight) || wants(*bias) {
                    let (gw, gb) =
                        kernels::upconv_backward_params(*dims, gout, &nodes[input.0].value);
                    if wants(*weight) {
                        acc(*weight, gw);
                    }
                    if wants(*bias) {
                        acc(*bias, gb);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [n, c, h, w] =
                    as_dims4("batchnorm2d", &node.shape).expect("checked in forward");
                let hw = h * w;
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let base = (b * c + ch) * hw;
                        for k in base..base + hw {
                            sum_g[ch] = sum_g[ch] + gout[k];
                            sum_gx[ch] = sum_gx[ch] + gout[k] * xhat[k];
                        }
                    }
                }
                if wants(*input) {
                    let g = &nodes[gamma.0].value;
                    let mut gx = vec![T::zero(); gout.len()];
                    let mf = T::from_usize(n * hw).unwrap();
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * hw;
                            let k_scale = g[ch] * inv_std[ch];
                            for k in base..base + hw {
                                gx[k] = if *train {
                                    k_scale * (gout[k] - sum_g[ch] / mf - xhat[k] * sum_gx[ch] / mf)
                                } else {
                                    k_scale * gout[k]
                                };
                            }
                        }
                    }
                    acc(*input, gx);
                }
                if wants(*gamma) {
                    acc(*gamma, sum_gx);
                }
                if wants(*beta) {
                    acc(*beta, sum_g);
                }
            }
            Op::Relu(input) => {
                let x = &nodes[input.0].value;
                let g = gout
                    .iter()
                    .zip(x)
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*input, g);
            }
            Op::MaxPool { input, argmax } => {
                let mut g = vec![T::zero(); nodes[input.0].value.len()];
                for (&src, &gv) in argmax.iter().zip(gout) {
                    g[src] = g[src] + gv;
                }
                acc(*input, g);
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = as_dims4("concat", &nodes[a.0].shape).expect("checked");
                let cb = nodes[b.0].shape[1];
                let hw = h * w;
                let ct = ca + cb;
                if wants(*a) {
                    let mut g = Vec::with_capacity(n * ca * hw);
                    for i in 0..n {
                        g.extend_from_slice(&gout[i * ct * hw..(i * ct + ca) * hw]);
                    }
                    acc(*a, g);
                }
                if wants(*b) {
                    let mut g = Vec::with_capacity(n * cb * hw);
                    for i in 0..n {
                        g.extend_from_slice(&gout[(i * ct + ca) * hw..(i + 1) * ct * hw]);
                    }
                    acc(*b, g);
                }
            }
            Op::ConcatBatch { a, b } => {
                let split = nodes[a.0].value.len();
                if wants(*a) {
                    acc(*a, gout[..split].to_vec());
                }
                if wants(*b) {
                    acc(*b, gout[split..].to_vec());
                }
            }
            Op::SliceBatch { input, start } => {
                if wants(*input) {
                    let mut g = vec![T::zero(); nodes[input.0].value.len()];
                    let offset = start * gout.len() / node.shape[0];
                    g[offset..offset + gout.len()].copy_from_slice(gout);
                    acc(*input, g);
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, gout.to_vec());
                }
                if wants(*b) {
                    acc(*b, gout.iter().map(|&g| -g).collect());
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, gout.to_vec());
                }
                if wants(*b) {
                    acc(*b, gout.to_vec());
                }
            }
            Op::Scale(a, k) => acc(*a, gout.iter().map(|&g| g * *k).collect()),
            Op::Sigmoid(input) => {
                let g = gout
                    .iter()
                    .zip(&node.value)
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                acc(*input, g);
            }
            Op::Sum(input) => acc(*input, vec![gout[0]; nodes[input.0].value.len()]),
            Op::WeightedSum { input, coeffs } => {
                acc(*input, coeffs.iter().map(|&c| c * gout[0]).collect())
            }
            Op::Bce {
                probs,
                target,
                pos_weight,
                valid_count,
            } => {
                let p_all = &nodes[probs.0].value;
                let mut g = vec![T::zero(); p_all.len()];
                if *valid_count > 0 {
                    let lo = T::from_f64_lossy(PROB_CLAMP);
                    let hi = T::one() - lo;
                    let scale = gout[0] / T::from_usize(*valid_count).unwrap();
                    for (i, gi) in g.iter_mut().enumerate() {
                        if !target.valid[i] {
                            continue;
                        }
                        let p = clamp(p_all[i], lo, hi);
                        let y = target.y[i];
                        *gi = scale * (-*pos_weight * y / p + (T::one() - y) / (T::one() - p));
                    }
                }
                acc(*probs, g);
            }
            Op::Dice {
                probs,
                target,
                eps,
                intersection,
                denominator,
            } => {
                let two = T::from_f64_lossy(2.0);
                let numer = two * *intersection + *eps;
                let d2 = *denominator * *denominator;
                let g = target
                    .y
                    .iter()
                    .zip(&target.valid)
                    .map(|(&y, &ok)| {
                        if ok {
                            -gout[0] * (two * y * *denominator - numer) / d2
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(*probs, g);
            }
        }
    }
}

/// Like `Float::clamp` but NaN passes through instead of becoming a bound.
fn clamp<T: Scalar>(v: T, lo: T, hi: T) -> T {
    if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, c) in g.iter_mut().zip(contrib) {
                *a = *a + c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}
