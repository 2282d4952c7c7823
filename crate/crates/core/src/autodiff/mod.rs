//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! A [`Tape`] records every forward operation as a [`Record`] holding the op
//! kind, the handles of its inputs and whatever context the backward rule
//! needs. Node ids are allocated in execution order, so the records always
//! form a DAG and a single reverse sweep visits every node after all of its
//! consumers.

pub(crate) mod kernels;
mod param;

use std::collections::HashMap;

pub use param::{LrGroup, ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeometry;

/// Epsilon added to the Euclidean norm by [`Tape::l2_normalize`].
pub const L2_EPS: f32 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
    GlobalAvg,
}

/// Batch statistics produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance, the estimator used for running statistics.
    pub var: Vec<f32>,
}

/// One operation on the tape plus the context saved for its backward rule.
#[derive(Clone, Debug)]
pub enum Record {
    Leaf,
    Param(ParamId),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometryRecord },
    MaxPool { input: Var, argmax: Vec<usize> },
    AvgPool { input: Var, window: (usize, usize), stride: (usize, usize) },
    GlobalAvgPool { input: Var },
    Affine { input: Var, weight: Var, bias: Option<Var> },
    BatchNorm { input: Var, gamma: Var, beta: Var, x_hat: Vec<f32>, inv_std: Vec<f32>, train: bool },
    Relu { input: Var, frozen: Option<Vec<bool>> },
    Tanh { input: Var },
    TanhPlusOne { input: Var },
    AddScalar { input: Var },
    Scale { input: Var, factor: f32 },
    Mul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { input: Var, axis: usize, start: usize },
    Reshape { input: Var },
    L2Normalize { input: Var, norms: Vec<f32> },
    LogSoftmax { input: Var },
    Sum { input: Var },
    Mean { input: Var },
    PairwiseDistance { input: Var },
    Gather { input: Var, indices: Vec<usize> },
}

/// Opaque wrapper so the kernel geometry type stays crate-private.
#[derive(Clone, Copy, Debug)]
pub struct ConvGeometryRecord(ConvGeometry);

impl Record {
    pub fn kind(&self) -> &'static str {
        match self {
            Record::Leaf => "leaf",
            Record::Param(_) => "param",
            Record::Conv2d { .. } => "conv2d",
            Record::MaxPool { .. } => "max_pool",
            Record::AvgPool { .. } => "avg_pool",
            Record::GlobalAvgPool { .. } => "global_avg_pool",
            Record::Affine { .. } => "affine",
            Record::BatchNorm { .. } => "batch_norm",
            Record::Relu { .. } => "relu",
            Record::Tanh { .. } => "tanh",
            Record::TanhPlusOne { .. } => "tanh_plus_one",
            Record::AddScalar { .. } => "add_scalar",
            Record::Scale { .. } => "scale",
            Record::Mul { .. } => "mul",
            Record::Add { .. } => "add",
            Record::Sub { .. } => "sub",
            Record::Concat { .. } => "concat",
            Record::Narrow { .. } => "narrow",
            Record::Reshape { .. } => "reshape",
            Record::L2Normalize { .. } => "l2_normalize",
            Record::LogSoftmax { .. } => "log_softmax",
            Record::Sum { .. } => "sum",
            Record::Mean { .. } => "mean",
            Record::PairwiseDistance { .. } => "pairwise_distance",
            Record::Gather { .. } => "gather",
        }
    }
}

struct Node {
    value: Tensor,
    record: Record,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<Var, Tensor>,
    params: Vec<(ParamId, Vec<f32>)>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::leaf`].
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var)
    }

    pub fn param_grads(&self) -> &[(ParamId, Vec<f32>)] {
        &self.params
    }

    /// Adds the parameter gradients into the store's gradient buffers.
    pub fn apply_to(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}

/// Branch decisions of one forward pass: ReLU activity, max-pool winners and
/// index choices made through [`Tape::choose`]. A tape replaying a pattern
/// evaluates the piecewise-linear function of the recorded pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pattern {
    relu: Vec<Vec<bool>>,
    argmax: Vec<Vec<usize>>,
    choices: Vec<Vec<usize>>,
}

#[derive(Debug, Default)]
enum PatternMode {
    #[default]
    Off,
    Record(Pattern),
    Replay { pattern: Pattern, relu: usize, argmax: usize, choices: usize, error: Option<String> },
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    pattern: PatternMode,
}

/// Largest f32 below 2.
const BELOW_TWO: f32 = 2.0 - f32::EPSILON;

fn tanh_plus_one(x: f32) -> f32 {
    let y = if x < 0.0 {
        let e = (2.0 * x).exp();
        2.0 * e / (1.0 + e)
    } else {
        1.0 + x.tanh()
    };
    y.clamp(f32::MIN_POSITIVE, BELOW_TWO)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn acc(grads: &mut [Option<Vec<f32>>], v: Var, delta: Vec<f32>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records its branch decisions.
    pub fn recording() -> Self {
        Tape { pattern: PatternMode::Record(Pattern::default()), ..Self::default() }
    }

    /// A tape that reuses the branch decisions of `pattern`.
    pub fn replaying(pattern: Pattern) -> Self {
        Tape {
            pattern: PatternMode::Replay { pattern, relu: 0, argmax: 0, choices: 0, error: None },
            ..Self::default()
        }
    }

    /// The recorded pattern, or an error if a replay diverged from it.
    pub fn take_pattern(&mut self) -> Result<Option<Pattern>> {
        match std::mem::take(&mut self.pattern) {
            PatternMode::Off => Ok(None),
            PatternMode::Record(p) => Ok(Some(p)),
            PatternMode::Replay { error: Some(e), .. } => Err(Error::Contract(e)),
            PatternMode::Replay { pattern, relu, argmax, choices, .. } => {
                if relu != pattern.relu.len() || argmax != pattern.argmax.len() || choices != pattern.choices.len() {
                    return Err(Error::Contract("replayed pass made fewer decisions than the recorded one".into()));
                }
                Ok(Some(pattern))
            }
        }
    }

    /// Indices computed by `compute` from the current tape, or the next
    /// recorded choice when replaying.
    pub fn choose(&mut self, compute: impl FnOnce(&Tape) -> Vec<usize>) -> Vec<usize> {
        if let PatternMode::Replay { pattern, choices, error, .. } = &mut self.pattern {
            if let Some(c) = pattern.choices.get(*choices) {
                *choices += 1;
                return c.clone();
            }
            error.get_or_insert_with(|| "replay requested more index choices than were recorded".into());
        }
        let c = compute(self);
        if let PatternMode::Record(p) = &mut self.pattern {
            p.choices.push(c.clone());
        }
        c
    }

    fn replay_relu(&mut self, len: usize) -> Option<Vec<bool>> {
        let PatternMode::Replay { pattern, relu, error, .. } = &mut self.pattern else { return None };
        match pattern.relu.get(*relu) {
            Some(m) if m.len() == len => {
                *relu += 1;
                Some(m.clone())
            }
            _ => {
                error.get_or_insert_with(|| format!("relu {} does not match the recorded pass", *relu));
                None
            }
        }
    }

    fn replay_argmax(&mut self, len: usize) -> Option<Vec<usize>> {
        let PatternMode::Replay { pattern, argmax, error, .. } = &mut self.pattern else { return None };
        match pattern.argmax.get(*argmax) {
            Some(a) if a.len() == len => {
                *argmax += 1;
                Some(a.clone())
            }
            _ => {
                error.get_or_insert_with(|| format!("max pool {} does not match the recorded pass", *argmax));
                None
            }
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

    pub fn record(&self, v: Var) -> &Record {
        &self.nodes[v.0].record
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, record: Record, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, record, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Record::Leaf, false)
    }

    /// Records a free variable whose gradient is reported in [`Gradients`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Record::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Record::Param(id), p.trainable)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, c, h, wd) = x.dims4("conv2d")?;
        let (o, wc, kh, kw) = match w.shape()[..] {
            [o, c, kh, kw] => (o, c, kh, kw),
            _ => return Err(Error::dim("conv2d", format!("weight must be OxCxKhxKw, got {:?}", w.shape()))),
        };
        if wc != c {
            return Err(Error::dim(
                "conv2d",
                format!("input channel axis (1) has {c}, weight channel axis (1) has {wc}"),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::dim("conv2d", "stride must be positive"));
        }
        if h + 2 * pad.0 < kh || wd + 2 * pad.1 < kw {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad.0, wd + 2 * pad.1),
            ));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [o] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias axis 0 must be {o}, got {:?}", self.value(b).shape()),
                ));
            }
        }
        let geom = ConvGeometry {
            channels: c,
            height: h,
            width: wd,
            kernel: (kh, kw),
            stride,
            pad,
            out_h: (h + 2 * pad.0 - kh) / stride.0 + 1,
            out_w: (wd + 2 * pad.1 - kw) / stride.1 + 1,
        };
        let out = kernels::conv2d_forward(
            x.data(),
            n,
            &geom,
            w.data(),
            o,
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![n, o, geom.out_h, geom.out_w], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(value, Record::Conv2d { input, weight, bias, geom: ConvGeometryRecord(geom) }, rg))
    }

    pub fn pool2d(
        &mut self,
        input: Var,
        mode: PoolMode,
        window: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var> {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4("pool2d")?;
        let rg = self.rg(&[input]);
        if mode == PoolMode::GlobalAvg {
            let hw = (h * w) as f32;
            let data: Vec<f32> = x.data().chunks(h * w).map(|p| p.iter().sum::<f32>() / hw).collect();
            let value = Tensor::new(vec![n, c, 1, 1], data)?;
            return Ok(self.push(value, Record::GlobalAvgPool { input }, rg));
        }
        let (wh, ww) = window;
        let (sh, sw) = stride;
        if wh == 0 || ww == 0 || sh == 0 || sw == 0 || wh > h || ww > w {
            return Err(Error::dim("pool2d", format!("window {window:?} / stride {stride:?} invalid for {h}x{w}")));
        }
        if (h - wh) % sh != 0 || (w - ww) % sw != 0 {
            return Err(Error::dim(
                "pool2d",
                format!("window {window:?} with stride {stride:?} does not tile {h}x{w} exactly"),
            ));
        }
        let (oh, ow) = ((h - wh) / sh + 1, (w - ww) / sw + 1);
        let xd = x.data();
        let mut out = vec![0.0f32; n * c * oh * ow];
        let mut argmax = if mode == PoolMode::Max { vec![0usize; out.len()] } else { Vec::new() };
        let inv = 1.0 / (wh * ww) as f32;
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let oi = (plane * oh + oy) * ow + ox;
                    match mode {
                        PoolMode::Max => {
                            let mut best = f32::NEG_INFINITY;
                            let mut best_i = base + oy * sh * w + ox * sw;
                            for ky in 0..wh {
                                for kx in 0..ww {
                                    let i = base + (oy * sh + ky) * w + ox * sw + kx;
                                    // strict `>` keeps the first index in row-major order on ties
                                    if xd[i] > best {
                                        best = xd[i];
                                        best_i = i;
                                    }
                                }
                            }
                            out[oi] = best;
                            argmax[oi] = best_i;
                        }
                        _ => {
                            let mut s = 0.0;
                            for ky in 0..wh {
                                let row = base + (oy * sh + ky) * w + ox * sw;
                                s += xd[row..row + ww].iter().sum::<f32>();
                            }
                            out[oi] = s * inv;
                        }
                    }
                }
            }
        }
        if mode == PoolMode::Max {
            if let Some(frozen) = self.replay_argmax(argmax.len()) {
                let xd = self.value(input).data();
                out = frozen.iter().map(|&i| xd[i]).collect();
                argmax = frozen;
            } else if let PatternMode::Record(p) = &mut self.pattern {
                p.argmax.push(argmax.clone());
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let record = match mode {
            PoolMode::Max => Record::MaxPool { input, argmax },
            _ => Record::AvgPool { input, window, stride },
        };
        Ok(self.push(value, record, rg))
    }

    /// `input . weight^T + bias` for `input: N x D`, `weight: M x D`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (n, d) = self.value(input).dims2("affine")?;
        let (m, wd) = self.value(weight).dims2("affine")?;
        if d != wd {
            return Err(Error::dim("affine", format!("input has {d} features, weight expects {wd}")));
        }
        let mut out = vec![0.0f32; n * m];
        kernels::gemm(n, d, m, self.value(input).data(), false, self.value(weight).data(), true, &mut out, 0.0);
        if let Some(b) = bias {
            let bv = self.value(b);
            if bv.shape() != [m] {
                return Err(Error::dim("affine", format!("bias must have {m} entries, got {:?}", bv.shape())));
            }
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(value, Record::Affine { input, weight, bias }, rg))
    }

    fn bn_layout(&self, input: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.value(input).shape();
        if shape.len() < 2 {
            return Err(Error::dim("batch_norm", format!("need at least NxC, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let spatial: usize = shape[2..].iter().product();
        for (what, v) in [("gamma", gamma), ("beta", beta)] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(
                    "batch_norm",
                    format!("{what} must have {c} entries, got {:?}", self.value(v).shape()),
                ));
            }
        }
        Ok((n, c, spatial))
    }

    /// Train-mode batch norm over every axis except the channel axis (1).
    pub fn batch_norm_train(&mut self, input: Var, gamma: Var, beta: Var, eps: f32) -> Result<(Var, BatchStats)> {
        let (n, c, s) = self.bn_layout(input, gamma, beta)?;
        let count = n * s;
        if count < 2 {
            return Err(Error::DegenerateBatch { op: "batch_norm", count });
        }
        let x = self.value(input).data();
        let mut mean = vec![0.0f32; c];
        let mut var = vec![0.0f32; c];
        for ch in 0..c {
            let mut sum = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * s;
                sum += x[off..off + s].iter().map(|&v| v as f64).sum::<f64>();
            }
            let mu = sum / count as f64;
            let mut sq = 0.0f64;
            for b in 0..n {
                let off = (b * c + ch) * s;
                sq += x[off..off + s].iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
            }
            mean[ch] = mu as f32;
            var[ch] = (sq / count as f64) as f32;
        }
        let inv_std: Vec<f32> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let unbiased: Vec<f32> = var.iter().map(|v| v * count as f32 / (count - 1) as f32).collect();
        let out = self.bn_apply(input, gamma, beta, &mean, &inv_std, true, n, c, s)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Eval-mode batch norm using supplied running statistics.
    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
        eps: f32,
    ) -> Result<Var> {
        let (n, c, s) = self.bn_layout(input, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm", "running statistics do not match channel count"));
        }
        let inv_std: Vec<f32> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(input, gamma, beta, running_mean, &inv_std, false, n, c, s)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_apply(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mean: &[f32],
        inv_std: &[f32],
        train: bool,
        n: usize,
        c: usize,
        s: usize,
    ) -> Result<Var> {
        let x = self.value(input);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut x_hat = vec![0.0f32; x.numel()];
        let mut out = vec![0.0f32; x.numel()];
        for bi in 0..n {
            for ch in 0..c {
                let off = (bi * c + ch) * s;
                for i in off..off + s {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    x_hat[i] = xh;
                    out[i] = g[ch] * xh + b[ch];
                }
            }
        }
        let value = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input, gamma, beta]);
        Ok(self.push(
            value,
            Record::BatchNorm { input, gamma, beta, x_hat, inv_std: inv_std.to_vec(), train },
            rg,
        ))
    }

    fn unary(&mut self, input: Var, f: impl Fn(f32) -> f32, record: Record) -> Var {
        let value = self.value(input).map(f);
        let rg = self.rg(&[input]);
        self.push(value, record, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let frozen = self.replay_relu(self.value(input).numel());
        if let Some(mask) = frozen {
            let x = self.value(input);
            let data = x.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
            let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
            let rg = self.rg(&[input]);
            return self.push(value, Record::Relu { input, frozen: Some(mask) }, rg);
        }
        if let PatternMode::Record(p) = &mut self.pattern {
            p.relu.push(self.nodes[input.0].value.data().iter().map(|&v| v > 0.0).collect());
        }
        self.unary(input, |v| v.max(0.0), Record::Relu { input, frozen: None })
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.unary(input, f32::tanh, Record::Tanh { input })
    }

    /// `tanh(x) + 1`, kept strictly inside `(0, 2)`: negative inputs use
    /// `2e^{2x} / (1 + e^{2x})`, and results are clamped to
    /// `[f32::MIN_POSITIVE, 2 - 2^-23]` where f32 rounding would reach a bound.
    pub fn tanh_plus_one(&mut self, input: Var) -> Var {
        self.unary(input, tanh_plus_one, Record::TanhPlusOne { input })
    }

    pub fn add_scalar(&mut self, input: Var, c: f32) -> Var {
        self.unary(input, |v| v + c, Record::AddScalar { input })
    }

    pub fn scale(&mut self, input: Var, factor: f32) -> Var {
        self.unary(input, |v| v * factor, Record::Scale { input, factor })
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, record: Record) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(op, format!("operand shapes {:?} and {:?} differ", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, record, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Record::Mul { a, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Record::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Record::Sub { a, b })
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*inputs.first().ok_or_else(|| Error::dim("concat", "no inputs"))?).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let agrees = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::dim("concat", format!("shape {s:?} incompatible with {first:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, Record::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Slice `[start, start + len)` of `axis`.
    pub fn narrow(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.value(input).shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("narrow", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, size, inner) = axis_split(&shape, axis);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * size + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Record::Narrow { input, axis, start }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Record::Reshape { input }, rg))
    }

    /// Divides each row (last axis) by its Euclidean norm plus [`L2_EPS`].
    pub fn l2_normalize(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let d = *x.shape().last().unwrap();
        let mut norms = Vec::with_capacity(x.numel() / d);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            norms.push(n);
            out.extend(row.iter().map(|v| v / (n + L2_EPS)));
        }
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[input]);
        self.push(value, Record::L2Normalize { input, norms }, rg)
    }

    /// Log-softmax along the last axis, stabilized by max subtraction.
    pub fn log_softmax(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let d = *x.shape().last().unwrap();
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(d) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|v| (v - m).exp()).sum::<f32>().ln();
            out.extend(row.iter().map(|v| v - m - lse));
        }
        let value = Tensor::new(x.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(&[input]);
        self.push(value, Record::LogSoftmax { input }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s = self.value(input).data().iter().sum::<f32>();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Record::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let s = x.data().iter().sum::<f32>() / x.numel() as f32;
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(s), Record::Mean { input }, rg)
    }

    /// Euclidean distances between all rows of an `N x D` matrix. The squared
    /// distance is clamped at zero before the square root.
    pub fn pairwise_distance(&mut self, input: Var) -> Result<Var> {
        let (n, d) = self.value(input).dims2("pairwise_distance")?;
        let x = self.value(input).data();
        let mut out = vec![0.0f32; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let sq: f32 = x[i * d..(i + 1) * d]
                    .iter()
                    .zip(&x[j * d..(j + 1) * d])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let dist = sq.max(0.0).sqrt();
                out[i * n + j] = dist;
                out[j * n + i] = dist;
            }
        }
        let value = Tensor::new(vec![n, n], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Record::PairwiseDistance { input }, rg))
    }

    /// Picks flat-indexed elements into a 1-D tensor.
    pub fn gather(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let numel = self.value(input).numel();
        if indices.is_empty() {
            return Err(Error::dim("gather", "empty index list"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= numel) {
            return Err(Error::dim("gather", format!("index {bad} out of range for {numel} elements")));
        }
        let src = self.value(input).data();
        let data = indices.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(vec![indices.len()], data)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, Record::Gather { input, indices: indices.to_vec() }, rg))
    }

    /// Propagates d(root)/d(node) back through the tape. The tape can only be
    /// swept once; record a new forward pass to differentiate again.
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeReuse);
        }
        if !self.value(root).is_scalar() {
            return Err(Error::Contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        self.consumed = true;
        let mut out = Gradients::default();
        if !self.nodes[root.0].requires_grad {
            return Ok(out);
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(Var(i), g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    /// Runs [`Tape::backward`] and accumulates parameter gradients into `store`.
    pub fn backward_into(&mut self, root: Var, store: &mut ParamStore) -> Result<()> {
        self.backward(root)?.apply_to(store);
        Ok(())
    }

    fn backward_node(
        &self,
        var: Var,
        g: Vec<f32>,
        grads: &mut [Option<Vec<f32>>],
        out: &mut Gradients,
    ) -> Result<()> {
        let node = &self.nodes[var.0];
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.record {
            Record::Leaf => {
                out.leaves.insert(var, Tensor::new(node.value.shape().to_vec(), g)?);
            }
            Record::Param(id) => out.params.push((*id, g)),
            Record::Conv2d { input, weight, bias, geom } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let cg = kernels::conv2d_backward(
                    x.data(),
                    x.shape()[0],
                    &geom.0,
                    w.data(),
                    w.shape()[0],
                    &g,
                    wants(*input),
                    wants(*weight),
                    bias.is_some_and(wants),
                );
                if let Some(dx) = cg.input {
                    acc(grads, *input, dx);
                }
                if let Some(dw) = cg.weight {
                    acc(grads, *weight, dw);
                }
                if let (Some(b), Some(db)) = (bias, cg.bias) {
                    acc(grads, *b, db);
                }
            }
            Record::MaxPool { input, argmax } => {
                let mut dx = vec![0.0f32; self.value(*input).numel()];
                for (gi, &src) in g.iter().zip(argmax) {
                    dx[src] += gi;
                }
                acc(grads, *input, dx);
            }
            Record::AvgPool { input, window, stride } => {
                let x = self.value(*input);
                let (n, c, h, w) = x.dims4("pool2d")?;
                let (oh, ow) = (node.value.shape()[2], node.value.shape()[3]);
                let inv = 1.0 / (window.0 * window.1) as f32;
                let mut dx = vec![0.0f32; x.numel()];
                for plane in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(plane * oh + oy) * ow + ox] * inv;
                            for ky in 0..window.0 {
                                let row = plane * h * w + (oy * stride.0 + ky) * w + ox * stride.1;
                                dx[row..row + window.1].iter_mut().for_each(|d| *d += gv);
                            }
                        }
                    }
                }
                acc(grads, *input, dx);
            }
            Record::GlobalAvgPool { input } => {
                let x = self.value(*input);
                let (_, _, h, w) = x.dims4("pool2d")?;
                let inv = 1.0 / (h * w) as f32;
                let dx = g.iter().flat_map(|&gv| std::iter::repeat_n(gv * inv, h * w)).collect();
                acc(grads, *input, dx);
            }
            Record::Affine { input, weight, bias } => {
                let (n, d) = self.value(*input).dims2("affine")?;
                let m = self.value(*weight).shape()[0];
                if wants(*input) {
                    let mut dx = vec![0.0f32; n * d];
                    kernels::gemm(n, m, d, &g, false, self.value(*weight).data(), false, &mut dx, 0.0);
                    acc(grads, *input, dx);
                }
                if wants(*weight) {
                    let mut dw = vec![0.0f32; m * d];
                    kernels::gemm(m, n, d, &g, true, self.value(*input).data(), false, &mut dw, 0.0);
                    acc(grads, *weight, dw);
                }
                if let Some(b) = bias.filter(|&b| wants(b)) {
                    let mut db = vec![0.0f32; m];
                    for row in g.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    acc(grads, b, db);
                }
            }
            Record::BatchNorm { input, gamma, beta, x_hat, inv_std, train } => {
                let shape = self.value(*input).shape();
                let (n, c) = (shape[0], shape[1]);
                let s: usize = shape[2..].iter().product();
                let count = (n * s) as f32;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0f32; c];
                let mut dbeta = vec![0.0f32; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * s;
                        for i in off..off + s {
                            dbeta[ch] += g[i];
                            dgamma[ch] += g[i] * x_hat[i];
                        }
                    }
                }
                if wants(*input) {
                    let mut dx = vec![0.0f32; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * s;
                            let k = gm[ch] * inv_std[ch];
                            for i in off..off + s {
                                dx[i] = if *train {
                                    k / count * (count * g[i] - dbeta[ch] - x_hat[i] * dgamma[ch])
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                    acc(grads, *input, dx);
                }
                if wants(*gamma) {
                    acc(grads, *gamma, dgamma);
                }
                if wants(*beta) {
                    acc(grads, *beta, dbeta);
                }
            }
            Record::Relu { input, frozen } => {
                let x = self.value(*input).data();
                let dx = match frozen {
                    Some(m) => g.iter().zip(m).map(|(&gv, &on)| if on { gv } else { 0.0 }).collect(),
                    None => g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect(),
                };
                acc(grads, *input, dx);
            }
            Record::Tanh { input } => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(&gv, &yv)| gv * (1.0 - yv * yv)).collect();
                acc(grads, *input, dx);
            }
            Record::TanhPlusOne { input } => {
                let y = node.value.data();
                let dx = g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (2.0 - yv)).collect();
                acc(grads, *input, dx);
            }
            Record::AddScalar { input } | Record::Reshape { input } => acc(grads, *input, g),
            Record::Scale { input, factor } => {
                acc(grads, *input, g.iter().map(|v| v * factor).collect());
            }
            Record::Mul { a, b } => {
                if wants(*a) {
                    let bv = self.value(*b).data();
                    acc(grads, *a, g.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if wants(*b) {
                    let av = self.value(*a).data();
                    acc(grads, *b, g.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Record::Add { a, b } => {
                if wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if wants(*b) {
                    acc(grads, *b, g);
                }
            }
            Record::Sub { a, b } => {
                if wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if wants(*b) {
                    acc(grads, *b, g.iter().map(|v| -v).collect());
                }
            }
            Record::Concat { inputs, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.value(v).shape()[*axis];
                    if wants(v) {
                        let mut dv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            dv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        acc(grads, v, dv);
                    }
                    offset += len;
                }
            }
            Record::Narrow { input, axis, start } => {
                let shape = self.value(*input).shape();
                let (outer, size, inner) = axis_split(shape, *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0f32; self.value(*input).numel()];
                for o in 0..outer {
                    let dst = (o * size + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(grads, *input, dx);
            }
            Record::L2Normalize { input, norms } => {
                let x = self.value(*input).data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0f32; x.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let (xs, gs) = (&x[r * d..(r + 1) * d], &g[r * d..(r + 1) * d]);
                    let den = n + L2_EPS;
                    let dot: f32 = xs.iter().zip(gs).map(|(a, b)| a * b).sum();
                    let corr = if n > 0.0 { dot / (den * den * n) } else { 0.0 };
                    for k in 0..d {
                        dx[r * d + k] = gs[k] / den - xs[k] * corr;
                    }
                }
                acc(grads, *input, dx);
            }
            Record::LogSoftmax { input } => {
                let y = node.value.data();
                let d = *node.value.shape().last().unwrap();
                let mut dx = vec![0.0f32; y.len()];
                for r in 0..y.len() / d {
                    let gs = &g[r * d..(r + 1) * d];
                    let total: f32 = gs.iter().sum();
                    for k in 0..d {
                        dx[r * d + k] = gs[k] - y[r * d + k].exp() * total;
                    }
                }
                acc(grads, *input, dx);
            }
            Record::Sum { input } => {
                acc(grads, *input, vec![g[0]; self.value(*input).numel()]);
            }
            Record::Mean { input } => {
                let n = self.value(*input).numel();
                acc(grads, *input, vec![g[0] / n as f32; n]);
            }
            Record::PairwiseDistance { input } => {
                let (n, d) = self.value(*input).dims2("pairwise_distance")?;
                let x = self.value(*input).data();
                let dist = node.value.data();
                let mut dx = vec![0.0f32; n * d];
                for i in 0..n {
                    for j in 0..n {
                        let dij = dist[i * n + j];
                        let coef = g[i * n + j];
                        if i == j || dij <= 0.0 || coef == 0.0 {
                            continue;
                        }
                        let k = coef / dij;
                        for t in 0..d {
                            let diff = (x[i * d + t] - x[j * d + t]) * k;
                            dx[i * d + t] += diff;
                            dx[j * d + t] -= diff;
                        }
                    }
                }
                acc(grads, *input, dx);
            }
            Record::Gather { input, indices } => {
                let mut dx = vec![0.0f32; self.value(*input).numel()];
                for (&i, &gv) in indices.iter().zip(&g) {
                    dx[i] += gv;
                }
                acc(grads, *input, dx);
            }
        }
        Ok(())
    }
}
