//! Reverse-mode differentiation over dense tensors.
//!
//! Every operation is recorded on a [`Tape`] in execution order together with
//! whatever it needs for its backward rule. [`Tape::backward`] walks the record
//! in exact reverse order from the loss node and returns a [`Gradients`] table
//! that covers every recorded node, so intermediate sensitivities (for example
//! the gradient with respect to a membrane potential at some step) can be
//! inspected, not only leaf gradients.

use log::warn;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Slope of the surrogate derivative used by [`Tape::spike`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurrogateConfig {
    alpha: f64,
}

impl SurrogateConfig {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "surrogate alpha must be positive, got {alpha}"
            )));
        }
        Ok(Self { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `alpha / (alpha * |x| + 1)^2`
    pub fn derivative(&self, x: f64) -> f64 {
        let d = self.alpha * x.abs() + 1.0;
        self.alpha / (d * d)
    }
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { alpha: 1.0 }
    }
}

/// Forward behaviour of the spike primitive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeMode {
    /// Heaviside forward, surrogate backward.
    #[default]
    Hard,
    /// Logistic forward `1 / (1 + exp(-alpha x))` with its exact derivative.
    /// Only meant for finite-difference harnesses.
    Soft,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { input: Var, inv_std: Vec<f64> },
    Relu(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Reciprocal(Var),
    Sum(Var),
    Mean(Var),
    L2Normalize { input: Var, norms: Vec<f64> },
    MaskMul { input: Var, mask: Vec<f64> },
    GatherRows { input: Var, index: Vec<usize> },
    Pick { input: Var, index: Vec<usize> },
    Spike { input: Var, cfg: SurrogateConfig, mode: SpikeMode },
    Reset { membrane: Var },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    consumed: bool,
    macs: u64,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros when the loss does not
    /// depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn get_ref(&self, var: Var) -> Option<&Tensor> {
        self.grads[var.0].as_ref()
    }
}

fn suffix_repeat(a: &[usize], b: &[usize]) -> Option<usize> {
    if b.len() > a.len() || a[a.len() - b.len()..] != *b {
        return None;
    }
    Some(a[..a.len() - b.len()].iter().product())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `a[m,k] * b[k,n]` into a fresh buffer.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k] * b[n,k]^T`
fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a[k,m]^T * b[k,n]`
fn matmul_tn(a: &[f64], b: &[f64], k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
            macs: 0,
        }
    }

    /// A tape that only evaluates; [`Tape::backward`] is rejected.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations executed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let rg = self.grad_enabled;
        self.push_node(value, Op::Leaf, rg)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_node(value, op, rg))
    }

    fn shapes_of(&self, vars: &[Var]) -> String {
        vars.iter()
            .map(|v| format!("{:?}", self.shape(*v)))
            .collect::<Vec<_>>()
            .join(" vs ")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", self.shapes_of(&[a, b])));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.macs += (m * k * n) as u64;
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// Batched product `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::shape("bmm", self.shapes_of(&[a, b])));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            out.extend(matmul_raw(
                &ad[i * m * k..(i + 1) * m * k],
                &bd[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        self.macs += (bs * m * k * n) as u64;
        self.push("bmm", Tensor::new(vec![bs, m, n], out)?, Op::BatchMatMul(a, b), &[a, b])
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b);
        if suffix_repeat(&sa, sb).is_none() {
            return Err(Error::shape(name, self.shapes_of(&[a, b])));
        }
        let bd = self.value(b).data();
        let nb = bd.len().max(1);
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        self.push(name, Tensor::new(sa, out)?, op, &[a, b])
    }

    /// Elementwise sum; `b` may have a suffix shape of `a` and is broadcast
    /// over the leading dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x * c)?;
        self.push("scale", t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.map(a, |x| x + c)?;
        self.push("add_scalar", t, Op::AddScalar(a), &[a])
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let v = self.value(a);
        Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (x, y))| i != axis && x != y)
            {
                return Err(Error::shape("concat", self.shapes_of(inputs)));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.value(*v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `input[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("{shape:?} axis {axis} range {start}..{end}"),
            ));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let data = self.value(input).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            out.extend_from_slice(&data[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        self.push(
            "slice",
            Tensor::new(new_shape, out)?,
            Op::Slice { input, axis, start },
            &[input],
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshaped(shape)?;
        self.push("reshape", t, Op::Reshape(input), &[input])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("transpose", format!("{shape:?}")));
        }
        let out = transpose_last2(self.value(input).data(), &shape);
        let mut ns = shape;
        let n = ns.len();
        ns.swap(n - 1, n - 2);
        self.push("transpose", Tensor::new(ns, out)?, Op::Transpose(input), &[input])
    }

    pub fn softmax_lastdim(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("softmax_lastdim", t, Op::Softmax(input), &[input])
    }

    pub fn log_softmax_lastdim(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("log_softmax_lastdim", t, Op::LogSoftmax(input), &[input])
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, input: Var, eps: f64) -> Result<Var> {
        let v = self.value(input);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("layernorm", t, Op::LayerNorm { input, inv_std }, &[input])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| x.max(0.0))?;
        self.push("relu", t, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::exp)?;
        self.push("exp", t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, f64::ln)?;
        self.push("log", t, Op::Log(a), &[a])
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, softplus)?;
        self.push("softplus", t, Op::Softplus(a), &[a])
    }

    pub fn reciprocal(&mut self, a: Var) -> Result<Var> {
        let t = self.map(a, |x| 1.0 / x)?;
        self.push("reciprocal", t, Op::Reciprocal(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.sum() / v.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Divides each last-axis row by its Euclidean norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let d = v.last_dim();
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(L2_FLOOR);
            for x in row.iter_mut() {
                *x /= n;
            }
            norms.push(n);
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("l2_normalize", t, Op::L2Normalize { input, norms }, &[input])
    }

    /// Multiplies by a fixed, pre-drawn mask (dropout).
    pub fn dropout_mask_apply(&mut self, input: Var, mask: Vec<f64>) -> Result<Var> {
        let v = self.value(input);
        if mask.len() != v.numel() {
            return Err(Error::shape(
                "dropout_mask_apply",
                format!("{:?} vs mask of {}", v.shape(), mask.len()),
            ));
        }
        let out = v.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let t = Tensor::new(v.shape().to_vec(), out)?;
        self.push("dropout_mask_apply", t, Op::MaskMul { input, mask }, &[input])
    }

    /// Selects rows of a 2-d tensor; indices may repeat.
    pub fn gather_rows(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 || index.iter().any(|&i| i >= shape[0]) {
            return Err(Error::shape(
                "gather_rows",
                format!("{shape:?} with index up to {:?}", index.iter().max()),
            ));
        }
        let v = self.value(input);
        let mut out = Vec::with_capacity(index.len() * shape[1]);
        for &i in index {
            out.extend_from_slice(v.row(i));
        }
        let t = Tensor::new(vec![index.len(), shape[1]], out)?;
        self.push(
            "gather_rows",
            t,
            Op::GatherRows {
                input,
                index: index.to_vec(),
            },
            &[input],
        )
    }

    /// `out[r] = input[r, index[r]]` for a 2-d input.
    pub fn pick(&mut self, input: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() != 2 || shape[0] != index.len() || index.iter().any(|&c| c >= shape[1]) {
            return Err(Error::shape(
                "pick",
                format!("{shape:?} with {} indices", index.len()),
            ));
        }
        let v = self.value(input);
        let out = index.iter().enumerate().map(|(r, &c)| v.get2(r, c)).collect();
        self.push(
            "pick",
            Tensor::vector(out),
            Op::Pick {
                input,
                index: index.to_vec(),
            },
            &[input],
        )
    }

    /// Spike nonlinearity on `u - V_th`. Hard mode fires at `x >= 0`.
    pub fn spike(&mut self, input: Var, cfg: SurrogateConfig, mode: SpikeMode) -> Result<Var> {
        let t = match mode {
            SpikeMode::Hard => self.map(input, |x| if x >= 0.0 { 1.0 } else { 0.0 })?,
            SpikeMode::Soft => self.map(input, |x| sigmoid(cfg.alpha * x))?,
        };
        self.push("spike", t, Op::Spike { input, cfg, mode }, &[input])
    }

    /// Post-spike reset `(1 - s) u + s u_reset`. The backward pass treats the
    /// reset as transparent: the gradient flows to `membrane` unchanged and
    /// nothing flows into `spikes`.
    pub fn reset(&mut self, membrane: Var, spikes: Var, u_reset: f64) -> Result<Var> {
        let (u, s) = (self.value(membrane), self.value(spikes));
        if u.shape() != s.shape() {
            return Err(Error::shape("reset", self.shapes_of(&[membrane, spikes])));
        }
        let out = u
            .data()
            .iter()
            .zip(s.data())
            .map(|(&u, &s)| (1.0 - s) * u + s * u_reset)
            .collect();
        let t = Tensor::new(u.shape().to_vec(), out)?;
        self.push("reset", t, Op::Reset { membrane }, &[membrane])
    }

    /// Reverse pass from a scalar `loss`. A tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::Backward("tape was created without gradients".into()));
        }
        if self.consumed {
            return Err(Error::Backward(
                "tape already differentiated; record a new forward pass".into(),
            ));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if loss.0 + 1 < self.nodes.len() {
            warn!(
                "backward: ignoring {} node(s) recorded after the loss",
                self.nodes.len() - loss.0 - 1
            );
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut grads[v.0], delta);
        }
    }

    fn reduce_broadcast(&self, g: &[f64], target: Var) -> Result<Tensor> {
        let shape = self.shape(target).to_vec();
        let n = shape.iter().product::<usize>().max(1);
        let mut out = vec![0.0; n];
        for (i, x) in g.iter().enumerate() {
            out[i % n] += x;
        }
        Tensor::new(shape, out)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.shape(v).to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let da = matmul_nt(gd, self.value(*b).data(), m, n, k);
                    self.send(grads, *a, like(*a, da)?);
                }
                if self.nodes[b.0].requires_grad {
                    let db = matmul_tn(self.value(*a).data(), gd, m, k, n);
                    self.send(grads, *b, like(*b, db)?);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.nodes[a.0].requires_grad {
                    let mut da = Vec::with_capacity(bs * m * k);
                    for t in 0..bs {
                        da.extend(matmul_nt(
                            &gd[t * m * n..(t + 1) * m * n],
                            &bd[t * k * n..(t + 1) * k * n],
                            m,
                            n,
                            k,
                        ));
                    }
                    self.send(grads, *a, like(*a, da)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = Vec::with_capacity(bs * k * n);
                    for t in 0..bs {
                        db.extend(matmul_tn(
                            &ad[t * m * k..(t + 1) * m * k],
                            &gd[t * m * n..(t + 1) * m * n],
                            m,
                            k,
                            n,
                        ));
                    }
                    self.send(grads, *b, like(*b, db)?);
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                if self.nodes[b.0].requires_grad {
                    let db = self.reduce_broadcast(gd, *b)?;
                    self.send(grads, *b, db);
                }
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.clone());
                if self.nodes[b.0].requires_grad {
                    let neg: Vec<f64> = gd.iter().map(|x| -x).collect();
                    let db = self.reduce_broadcast(&neg, *b)?;
                    self.send(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let nb = bv.len().max(1);
                if self.nodes[a.0].requires_grad {
                    let da = gd.iter().enumerate().map(|(j, x)| x * bv[j % nb]).collect();
                    self.send(grads, *a, like(*a, da)?);
                }
                if self.nodes[b.0].requires_grad {
                    let prod: Vec<f64> = gd.iter().zip(av).map(|(x, y)| x * y).collect();
                    let db = self.reduce_broadcast(&prod, *b)?;
                    self.send(grads, *b, db);
                }
            }
            Op::Scale(a, c) => {
                let da = gd.iter().map(|x| x * c).collect();
                self.send(grads, *a, like(*a, da)?);
            }
            Op::AddScalar(a) => self.send(grads, *a, g.clone()),
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let width = self.shape(*v)[*axis];
                    if self.nodes[v.0].requires_grad {
                        let mut d = Vec::with_capacity(outer * width * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            d.extend_from_slice(&gd[base..base + width * inner]);
                        }
                        self.send(grads, *v, like(*v, d)?);
                    }
                    offset += width;
                }
            }
            Op::Slice { input, axis, start } => {
                let full = self.shape(*input).to_vec();
                let (outer, dim, inner) = split_axis(&full, *axis);
                let width = y.shape()[*axis];
                let mut d = vec![0.0; full.iter().product()];
                for o in 0..outer {
                    let dst = o * dim * inner + start * inner;
                    let src = o * width * inner;
                    d[dst..dst + width * inner].copy_from_slice(&gd[src..src + width * inner]);
                }
                self.send(grads, *input, Tensor::new(full, d)?);
            }
            Op::Reshape(a) => self.send(grads, *a, like(*a, gd.to_vec())?),
            Op::Transpose(a) => {
                let d = transpose_last2(gd, y.shape());
                self.send(grads, *a, like(*a, d)?);
            }
            Op::Softmax(a) => {
                let dim = y.last_dim();
                let mut d = vec![0.0; gd.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(dim)
                    .zip(y.data().chunks(dim))
                    .zip(gd.chunks(dim))
                {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.send(grads, *a, like(*a, d)?);
            }
            Op::LogSoftmax(a) => {
                let dim = y.last_dim();
                let mut d = vec![0.0; gd.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(dim)
                    .zip(y.data().chunks(dim))
                    .zip(gd.chunks(dim))
                {
                    let total: f64 = gr.iter().sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                self.send(grads, *a, like(*a, d)?);
            }
            Op::LayerNorm { input, inv_std } => {
                let dim = y.last_dim();
                let mut d = vec![0.0; gd.len()];
                for (r, ((dr, yr), gr)) in d
                    .chunks_mut(dim)
                    .zip(y.data().chunks(dim))
                    .zip(gd.chunks(dim))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / dim as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                self.send(grads, *input, like(*input, d)?);
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd
                    .iter()
                    .zip(x)
                    .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.send(grads, *a, like(*a, d)?);
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, y)| g * y).collect();
                self.send(grads, *a, like(*a, d)?);
            }
            Op::Log(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g / x).collect();
                self.send(grads, *a, like(*a, d)?);
            }
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| g * sigmoid(*x)).collect();
                self.send(grads, *a, like(*a, d)?);
            }
            Op::Reciprocal(a) => {
                let d = gd.iter().zip(y.data()).map(|(g, y)| -g * y * y).collect();
                self.send(grads, *a, like(*a, d)?);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.send(grads, *a, like(*a, vec![gd[0]; n])?);
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                self.send(grads, *a, like(*a, vec![gd[0] / n as f64; n])?);
            }
            Op::L2Normalize { input, norms } => {
                let dim = y.last_dim();
                let mut d = vec![0.0; gd.len()];
                for (r, ((dr, yr), gr)) in d
                    .chunks_mut(dim)
                    .zip(y.data().chunks(dim))
                    .zip(gd.chunks(dim))
                    .enumerate()
                {
                    if norms[r] <= L2_FLOOR {
                        for (o, gv) in dr.iter_mut().zip(gr) {
                            *o = gv / norms[r];
                        }
                        continue;
                    }
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / norms[r];
                    }
                }
                self.send(grads, *input, like(*input, d)?);
            }
            Op::MaskMul { input, mask } => {
                let d = gd.iter().zip(mask).map(|(g, m)| g * m).collect();
                self.send(grads, *input, like(*input, d)?);
            }
            Op::GatherRows { input, index } => {
                let shape = self.shape(*input).to_vec();
                let cols = shape[1];
                let mut d = vec![0.0; shape[0] * cols];
                for (r, &src) in index.iter().enumerate() {
                    for c in 0..cols {
                        d[src * cols + c] += gd[r * cols + c];
                    }
                }
                self.send(grads, *input, Tensor::new(shape, d)?);
            }
            Op::Pick { input, index } => {
                let shape = self.shape(*input).to_vec();
                let cols = shape[1];
                let mut d = vec![0.0; shape[0] * cols];
                for (r, &c) in index.iter().enumerate() {
                    d[r * cols + c] = gd[r];
                }
                self.send(grads, *input, Tensor::new(shape, d)?);
            }
            Op::Spike { input, cfg, mode } => {
                let x = self.value(*input).data();
                let d = match mode {
                    SpikeMode::Hard => gd
                        .iter()
                        .zip(x)
                        .map(|(g, x)| g * cfg.derivative(*x))
                        .collect(),
                    SpikeMode::Soft => gd
                        .iter()
                        .zip(y.data())
                        .map(|(g, s)| g * cfg.alpha * s * (1.0 - s))
                        .collect(),
                };
                self.send(grads, *input, like(*input, d)?);
            }
            Op::Reset { membrane } => self.send(grads, *membrane, g.clone()),
        }
        Ok(())
    }
}

const L2_FLOOR: f64 = 1e-12;

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn transpose_last2(data: &[f64], shape: &[usize]) -> Vec<f64> {
    let n = shape.len();
    let (r, c) = (shape[n - 2], shape[n - 1]);
    let batch: usize = shape[..n - 2].iter().product();
    let mut out = vec![0.0; data.len()];
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = data[off + i * c + j];
            }
        }
    }
    out
}
