use super::conv::{self, ConvGeometry};
use super::{ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Variable,
    Param(ParamId),
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeometry },
    Relu(Var),
    Sigmoid(Var),
    Upsample2x(Var),
    Concat(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Sum(Var),
    Mean(Var),
    BceDice { pred: Var, target: Tensor },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of operations for a single forward pass.
///
/// Nodes are appended in evaluation order, so the tape index is a valid
/// topological order and the backward pass simply walks it in reverse.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`, or `None` when `var` does
    /// not require gradients or is unreachable from the root.
    pub fn get(&self, var: Var) -> Option<Tensor> {
        self.grads[var.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[var.0].clone(), g.clone()).expect("gradient shape"))
    }
}

/// Soft-Dice smoothing constant.
pub const DICE_SMOOTH: f64 = 1.0;
/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside the log terms.
const PROB_EPS: f64 = 1e-12;

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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Which ReLU inputs are strictly positive, over every ReLU node in
    /// graph order. Two forwards with equal patterns lie on the same smooth
    /// piece, so a finite difference between them is meaningful.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                out.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Detached input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Leaf that requires a gradient, readable from [`Gradients`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Variable, true)
    }

    /// Leaf bound to a stored parameter; backward accumulates into its grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        const OP: &str = "conv2d";
        let (c_in, h, w) = self.value(input).chw().ok_or_else(|| TensorError::Shape {
            op: OP,
            detail: format!("input must be [C,H,W], got {:?}", self.value(input).shape()),
        })?;
        let (c_out, wc, k) = match self.value(weight).shape() {
            &[o, c, kh, kw] if kh == kw => (o, c, kh),
            s => {
                return Err(TensorError::Shape {
                    op: OP,
                    detail: format!("weight must be [C_out,C_in,k,k], got {s:?}"),
                })
            }
        };
        if wc != c_in {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("input has {c_in} channels but weight expects C_in = {wc}"),
            });
        }
        if self.value(bias).shape() != [c_out] {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("bias must be [{c_out}], got {:?}", self.value(bias).shape()),
            });
        }
        if k % 2 == 0 || stride == 0 {
            return Err(TensorError::Argument {
                op: OP,
                detail: format!("kernel size must be odd and stride positive (k = {k}, stride = {stride})"),
            });
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("kernel {k} larger than padded input {h}x{w} (padding {padding})"),
            });
        }
        let out_h = (h + 2 * padding - k) / stride + 1;
        let out_w = (w + 2 * padding - k) / stride + 1;
        let geom = ConvGeometry { c_in, c_out, h, w, k, stride, padding, out_h, out_w };
        let data = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![c_out, out_h, out_w], data)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, Op::Conv2d { input, weight, bias, geom }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| sigmoid(a)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Nearest-neighbour 2x upsampling of a `[C,H,W]` tensor.
    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (c, h, w) = v.chw().ok_or_else(|| TensorError::Shape {
            op: "upsample_nearest2x",
            detail: format!("input must be [C,H,W], got {:?}", v.shape()),
        })?;
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; c * oh * ow];
        let src = v.data();
        for ch in 0..c {
            for y in 0..oh {
                let row_in = &src[(ch * h + y / 2) * w..][..w];
                let row_out = &mut out[(ch * oh + y) * ow..][..ow];
                for (x2, dst) in row_out.chunks_exact_mut(2).enumerate() {
                    dst[0] = row_in[x2];
                    dst[1] = row_in[x2];
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Upsample2x(x), rg))
    }

    /// Stacks the channels of `a` followed by those of `b`.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (ca, ha, wa) = va.chw().ok_or_else(|| concat_err(va.shape(), vb.shape()))?;
        let (cb, hb, wb) = vb.chw().ok_or_else(|| concat_err(va.shape(), vb.shape()))?;
        if (ha, wa) != (hb, wb) {
            return Err(concat_err(va.shape(), vb.shape()));
        }
        let mut data = Vec::with_capacity(va.len() + vb.len());
        data.extend_from_slice(va.data());
        data.extend_from_slice(vb.data());
        let value = Tensor::new(vec![ca + cb, ha, wa], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Concat(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_values("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_values("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    fn zip_values(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(TensorError::Shape {
                op,
                detail: format!("{:?} vs {:?} (no broadcasting)", va.shape(), vb.shape()),
            });
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: f64 = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// `0.5 * BCE + 0.5 * (1 - softDice)` between a probability map and a
    /// binary target of the same shape.
    pub fn bce_dice_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        const OP: &str = "bce_dice_loss";
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(TensorError::Shape {
                op: OP,
                detail: format!("prediction {:?} vs target {:?}", p.shape(), target.shape()),
            });
        }
        if let Some(bad) = target.data().iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::Argument { op: OP, detail: format!("target value {bad} not in {{0,1}}") });
        }
        let loss = bce_dice_value(p.data(), target.data());
        let rg = self.rg(&[pred]);
        Ok(self.push(Tensor::scalar(loss), Op::BceDice { pred, target: target.clone() }, rg))
    }

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Gradients of parameter leaves are added to the store's `grad`
    /// buffers, so calling this twice without zeroing doubles them.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(root)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                for (acc, gv) in store.get_mut(*id).grad.data_mut().iter_mut().zip(g) {
                    *acc += gv;
                }
            }
        }
        Ok(grads)
    }

    /// Like [`Graph::backward`] but leaves every parameter store untouched.
    pub fn gradients(&self, root: Var) -> Result<Gradients> {
        let root_value = self.value(root);
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![1.0]);
        }
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Constant | Op::Variable | Op::Param(_) => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let mut gi = self.wants(*input).then(|| vec![0.0; self.value(*input).len()]);
                let mut gw = self.wants(*weight).then(|| vec![0.0; self.value(*weight).len()]);
                let mut gb = self.wants(*bias).then(|| vec![0.0; self.value(*bias).len()]);
                conv::backward(
                    geom,
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g,
                    gi.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                for (var, buf) in [(*input, gi), (*weight, gw), (*bias, gb)] {
                    if let Some(buf) = buf {
                        self.accumulate(var, grads, |acc| add_into(acc, &buf));
                    }
                }
            }
            Op::Relu(x) => {
                let xs = self.value(*x).data();
                self.accumulate(*x, grads, |acc| {
                    for ((a, &gv), &xv) in acc.iter_mut().zip(g).zip(xs) {
                        if xv > 0.0 {
                            *a += gv;
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let ys = node.value.data();
                self.accumulate(*x, grads, |acc| {
                    for ((a, &gv), &y) in acc.iter_mut().zip(g).zip(ys) {
                        *a += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Upsample2x(x) => {
                let (c, h, w) = self.value(*x).chw().expect("rank 3");
                let ow = 2 * w;
                self.accumulate(*x, grads, |acc| {
                    for ch in 0..c {
                        for y in 0..h {
                            let r0 = &g[(ch * 2 * h + 2 * y) * ow..][..ow];
                            let r1 = &g[(ch * 2 * h + 2 * y + 1) * ow..][..ow];
                            let dst = &mut acc[(ch * h + y) * w..][..w];
                            for (xi, d) in dst.iter_mut().enumerate() {
                                *d += (r0[2 * xi] + r0[2 * xi + 1]) + (r1[2 * xi] + r1[2 * xi + 1]);
                            }
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let split = self.value(*a).len();
                self.accumulate(*a, grads, |acc| add_into(acc, &g[..split]));
                self.accumulate(*b, grads, |acc| add_into(acc, &g[split..]));
            }
            Op::Add(a, b) => {
                self.accumulate(*a, grads, |acc| add_into(acc, g));
                self.accumulate(*b, grads, |acc| add_into(acc, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(*a, grads, |acc| {
                    for ((d, &gv), &y) in acc.iter_mut().zip(g).zip(vb) {
                        *d += gv * y;
                    }
                });
                self.accumulate(*b, grads, |acc| {
                    for ((d, &gv), &x) in acc.iter_mut().zip(g).zip(va) {
                        *d += gv * x;
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(*x, grads, |acc| acc.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean(x) => {
                let scale = g[0] / self.value(*x).len() as f64;
                self.accumulate(*x, grads, |acc| acc.iter_mut().for_each(|d| *d += scale));
            }
            Op::BceDice { pred, target } => {
                let ps = self.value(*pred).data();
                let dl = bce_dice_grad(ps, target.data());
                self.accumulate(*pred, grads, |acc| {
                    for (d, v) in acc.iter_mut().zip(dl) {
                        *d += g[0] * v;
                    }
                });
            }
        }
    }

    fn wants(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn accumulate(&self, var: Var, grads: &mut [Option<Vec<f64>>], f: impl FnOnce(&mut [f64])) {
        if !self.wants(var) {
            return;
        }
        let buf = grads[var.0].get_or_insert_with(|| vec![0.0; self.nodes[var.0].value.len()]);
        f(buf);
    }
}

fn concat_err(a: &[usize], b: &[usize]) -> TensorError {
    TensorError::Shape {
        op: "concat_channels",
        detail: format!("inputs must be [C,H,W] with equal H,W; got {a:?} and {b:?}"),
    }
}

fn add_into(acc: &mut [f64], g: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(g) {
        *a += b;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn bce_dice_value(p: &[f64], t: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mut bce = 0.0;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&pv, &tv) in p.iter().zip(t) {
        let pc = clamp_prob(pv);
        bce -= tv * pc.ln() + (1.0 - tv) * (1.0 - pc).ln();
        inter += pv * tv;
        sp += pv;
        st += tv;
    }
    let dice = (2.0 * inter + DICE_SMOOTH) / (sp + st + DICE_SMOOTH);
    0.5 * bce / n + 0.5 * (1.0 - dice)
}

fn bce_dice_grad(p: &[f64], t: &[f64]) -> Vec<f64> {
    let n = p.len() as f64;
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&pv, &tv) in p.iter().zip(t) {
        inter += pv * tv;
        sp += pv;
        st += tv;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sp + st + DICE_SMOOTH;
    p.iter()
        .zip(t)
        .map(|(&pv, &tv)| {
            let d_bce = if pv > PROB_EPS && pv < 1.0 - PROB_EPS {
                (-tv / pv + (1.0 - tv) / (1.0 - pv)) / n
            } else {
                0.0
            };
            let d_dice = (2.0 * tv * den - num) / (den * den);
            0.5 * d_bce - 0.5 * d_dice
        })
        .collect()
}
