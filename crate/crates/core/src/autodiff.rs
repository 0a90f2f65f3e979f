//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, so the node list is topologically sorted by construction.
//! [`Tape::backward`] walks it in reverse from a scalar root and returns the
//! gradient of every node, accumulated over fan-out.
//!
//! ```
//! use sdcm_core::autodiff::Tape;
//! use sdcm_core::tensor::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let y = tape.leaf(Tensor::scalar(4.0));
//! let z = x.mul(y).unwrap();
//! let grads = tape.backward(z).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[4.0]);
//! assert_eq!(grads.wrt(y).data(), &[3.0]);
//! ```

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{dim_err, param_err, Error, Result};
use crate::tensor::{
    self, add_macs, broadcast_index_map, broadcast_shape, conv2d_backward, dims2, dims4,
    inverse_permutation, matmul_nt_raw, matmul_tn_raw, permute_raw, sigmoid, Tensor,
};

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    Shift,
    Exp,
    Ln,
    Sigmoid,
    Silu,
    Square,
    SmoothL1,
    ClampMin(f64),
    SumAxes,
    SumAll,
    Reshape,
    Permute(Vec<usize>),
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    MatMul,
    Softmax,
    MaskFill(Rc<Vec<bool>>),
    MaskedMatMul(Rc<Vec<bool>>),
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    BatchNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { stride: usize, pad: usize },
    Upsample(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    inputs: Vec<usize>,
}

/// Records operations for one forward pass. Single-writer: not `Sync`.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of a scalar root with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zeros when the root does not depend on it.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.id].clone()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, vec![])
    }

    fn push(&self, value: Tensor, op: Op, inputs: Vec<usize>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, inputs });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn value_of(&self, id: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let Some(first) = parts.first() else {
            return dim_err("concat of zero tensors");
        };
        let nodes = self.nodes.borrow();
        let base = nodes[first.id].value.shape().to_vec();
        if axis >= base.len() {
            return dim_err(format!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for p in parts {
            let s = nodes[p.id].value.shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return dim_err(format!("concat shapes {base:?} and {s:?} differ off axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let v = &nodes[p.id].value;
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids = parts.iter().map(|p| p.id).collect();
        drop(nodes);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { axis }, ids))
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[root.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[root.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[root.id] = Some(Tensor::ones(nodes[root.id].value.shape().to_vec()));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            for (input, contribution) in node_backward(&nodes, node, &g) {
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&contribution),
                    slot @ None => *slot = Some(contribution),
                }
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn reduce_broadcast(g: &Tensor, factor: impl Fn(usize) -> f64, in_shape: &[usize]) -> Tensor {
    let map = broadcast_index_map(in_shape, g.shape());
    let mut out = Tensor::zeros(in_shape.to_vec());
    let od = out.data_mut();
    for (i, (&gv, &m)) in g.data().iter().zip(&map).enumerate() {
        od[m] += gv * factor(i);
    }
    out
}

fn node_backward(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<(usize, Tensor)> {
    let inp = |k: usize| &nodes[node.inputs[k]].value;
    let id = |k: usize| node.inputs[k];
    let y = &node.value;
    match &node.op {
        Op::Leaf => vec![],
        Op::Add | Op::Sub | Op::Mul | Op::Div => {
            let (a, b) = (inp(0), inp(1));
            let amap = broadcast_index_map(a.shape(), g.shape());
            let bmap = broadcast_index_map(b.shape(), g.shape());
            let (ad, bd) = (a.data(), b.data());
            let ga = match node.op {
                Op::Add | Op::Sub => reduce_broadcast(g, |_| 1.0, a.shape()),
                Op::Mul => reduce_broadcast(g, |i| bd[bmap[i]], a.shape()),
                _ => reduce_broadcast(g, |i| 1.0 / bd[bmap[i]], a.shape()),
            };
            let gb = match node.op {
                Op::Add => reduce_broadcast(g, |_| 1.0, b.shape()),
                Op::Sub => reduce_broadcast(g, |_| -1.0, b.shape()),
                Op::Mul => reduce_broadcast(g, |i| ad[amap[i]], b.shape()),
                _ => reduce_broadcast(
                    g,
                    |i| {
                        let bv = bd[bmap[i]];
                        -ad[amap[i]] / (bv * bv)
                    },
                    b.shape(),
                ),
            };
            vec![(id(0), ga), (id(1), gb)]
        }
        Op::Scale(s) => vec![(id(0), g.map(|v| v * s))],
        Op::Shift => vec![(id(0), g.clone())],
        Op::Exp => vec![(id(0), g.zip_map(y, |a, b| a * b).unwrap())],
        Op::Ln => vec![(id(0), g.zip_map(inp(0), |a, b| a / b).unwrap())],
        Op::Sigmoid => vec![(id(0), g.zip_map(y, |a, s| a * s * (1.0 - s)).unwrap())],
        Op::Silu => vec![(
            id(0),
            g.zip_map(inp(0), |a, x| {
                let s = sigmoid(x);
                a * (s + x * s * (1.0 - s))
            })
            .unwrap(),
        )],
        Op::Square => vec![(id(0), g.zip_map(inp(0), |a, x| 2.0 * a * x).unwrap())],
        Op::SmoothL1 => vec![(
            id(0),
            g.zip_map(inp(0), |a, x| if x.abs() < 1.0 { a * x } else { a * x.signum() })
                .unwrap(),
        )],
        Op::ClampMin(lo) => vec![(
            id(0),
            g.zip_map(inp(0), |a, x| if x > *lo { a } else { 0.0 }).unwrap(),
        )],
        Op::SumAxes => {
            let x = inp(0);
            let map = broadcast_index_map(g.shape(), x.shape());
            let gd = g.data();
            vec![(id(0), Tensor::from_fn(x.shape().to_vec(), |i| gd[map[i]]))]
        }
        Op::SumAll => {
            let gv = g.data()[0];
            vec![(id(0), Tensor::full(inp(0).shape().to_vec(), gv))]
        }
        Op::Reshape => vec![(id(0), g.reshape(inp(0).shape().to_vec()).unwrap())],
        Op::Permute(axes) => {
            let inv = inverse_permutation(axes);
            vec![(id(0), g.permute(&inv).unwrap())]
        }
        Op::Concat { axis } => {
            let shape = y.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            let mut out = Vec::new();
            for k in 0..node.inputs.len() {
                let s = inp(k).shape();
                let chunk = s[*axis] * inner;
                let mut data = Vec::with_capacity(outer * chunk);
                for o in 0..outer {
                    let start = o * total * inner + offset * inner;
                    data.extend_from_slice(&g.data()[start..start + chunk]);
                }
                offset += s[*axis];
                out.push((id(k), Tensor::new(s.to_vec(), data).unwrap()));
            }
            out
        }
        Op::Slice { axis, start } => {
            let x = inp(0);
            let xs = x.shape();
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let len = y.shape()[*axis];
            let mut gx = Tensor::zeros(xs.to_vec());
            let gxd = gx.data_mut();
            for o in 0..outer {
                let src = o * len * inner;
                let dst = (o * xs[*axis] + start) * inner;
                gxd[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
            }
            vec![(id(0), gx)]
        }
        Op::MatMul => {
            let (a, b) = (inp(0), inp(1));
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let ga = matmul_nt_raw(g.data(), b.data(), m, n, k);
            let gb = matmul_tn_raw(a.data(), g.data(), m, k, n);
            vec![
                (id(0), Tensor::new([m, k], ga).unwrap()),
                (id(1), Tensor::new([k, n], gb).unwrap()),
            ]
        }
        Op::Softmax => {
            let c = *y.shape().last().unwrap();
            let mut gx = vec![0.0; y.len()];
            for ((yr, gr), out) in y.data().chunks(c).zip(g.data().chunks(c)).zip(gx.chunks_mut(c)) {
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![(id(0), Tensor::new(y.shape().to_vec(), gx).unwrap())]
        }
        Op::MaskFill(keep) => vec![(
            id(0),
            Tensor::from_fn(y.shape().to_vec(), |i| if keep[i] { g.data()[i] } else { 0.0 }),
        )],
        Op::MaskedMatMul(keep) => {
            let (p, v) = (inp(0), inp(1));
            let (m, n) = (p.shape()[0], p.shape()[1]);
            let c = v.shape()[1];
            let mut gp = vec![0.0; m * n];
            let mut gv = vec![0.0; n * c];
            for i in 0..m {
                let grow = &g.data()[i * c..(i + 1) * c];
                for j in 0..n {
                    if !keep[i * n + j] {
                        continue;
                    }
                    let vrow = &v.data()[j * c..(j + 1) * c];
                    gp[i * n + j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                    let pij = p.data()[i * n + j];
                    for (o, &gval) in gv[j * c..(j + 1) * c].iter_mut().zip(grow) {
                        *o += pij * gval;
                    }
                }
            }
            vec![
                (id(0), Tensor::new([m, n], gp).unwrap()),
                (id(1), Tensor::new([n, c], gv).unwrap()),
            ]
        }
        Op::LayerNorm { xhat, rstd } => {
            let gain = inp(1);
            let c = gain.len();
            let mut gx = vec![0.0; xhat.len()];
            let mut ggain = vec![0.0; c];
            let mut gbias = vec![0.0; c];
            for (r, ((xr, gr), out)) in xhat
                .chunks(c)
                .zip(g.data().chunks(c))
                .zip(gx.chunks_mut(c))
                .enumerate()
            {
                let mut mean_g = 0.0;
                let mut mean_gx = 0.0;
                for j in 0..c {
                    ggain[j] += gr[j] * xr[j];
                    gbias[j] += gr[j];
                    let gh = gr[j] * gain.data()[j];
                    mean_g += gh;
                    mean_gx += gh * xr[j];
                }
                mean_g /= c as f64;
                mean_gx /= c as f64;
                for j in 0..c {
                    let gh = gr[j] * gain.data()[j];
                    out[j] = rstd[r] * (gh - mean_g - xr[j] * mean_gx);
                }
            }
            vec![
                (id(0), Tensor::new(y.shape().to_vec(), gx).unwrap()),
                (id(1), Tensor::new([c], ggain).unwrap()),
                (id(2), Tensor::new([c], gbias).unwrap()),
            ]
        }
        Op::BatchNorm { xhat, rstd } => {
            let gamma = inp(1);
            let shape = y.shape();
            let (n, c) = (shape[0], shape[1]);
            let inner: usize = shape[2..].iter().product();
            let count = (n * inner) as f64;
            let mut gx = vec![0.0; xhat.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let gm = gamma.data()[ch];
                let mut mean_g = 0.0;
                let mut mean_gx = 0.0;
                for b in 0..n {
                    let base = (b * c + ch) * inner;
                    for i in base..base + inner {
                        ggamma[ch] += g.data()[i] * xhat[i];
                        gbeta[ch] += g.data()[i];
                        mean_g += g.data()[i] * gm;
                        mean_gx += g.data()[i] * gm * xhat[i];
                    }
                }
                mean_g /= count;
                mean_gx /= count;
                for b in 0..n {
                    let base = (b * c + ch) * inner;
                    for i in base..base + inner {
                        gx[i] = rstd[ch] * (g.data()[i] * gm - mean_g - xhat[i] * mean_gx);
                    }
                }
            }
            vec![
                (id(0), Tensor::new(shape.to_vec(), gx).unwrap()),
                (id(1), Tensor::new([c], ggamma).unwrap()),
                (id(2), Tensor::new([c], gbeta).unwrap()),
            ]
        }
        Op::Conv2d { stride, pad } => {
            let (gx, gk) = conv2d_backward(inp(0), inp(1), g, *stride, *pad);
            vec![(id(0), gx), (id(1), gk)]
        }
        Op::Upsample(f) => {
            let x = inp(0);
            let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (oh, ow) = (h * f, w * f);
            let mut gx = Tensor::zeros(x.shape().to_vec());
            let gxd = gx.data_mut();
            for p in 0..n * c {
                for i in 0..oh {
                    for j in 0..ow {
                        gxd[p * h * w + (i / f) * w + j / f] += g.data()[p * oh * ow + i * ow + j];
                    }
                }
            }
            vec![(id(0), gx)]
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value_of(self.id).shape().to_vec()
    }

    fn unary(self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.tape.value_of(self.id).map(f);
        self.tape.push(out, op, vec![self.id])
    }

    fn binary(self, other: Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let out = {
            let a = self.tape.value_of(self.id);
            let b = self.tape.value_of(other.id);
            let shape = broadcast_shape(a.shape(), b.shape())?;
            let amap = broadcast_index_map(a.shape(), &shape);
            let bmap = broadcast_index_map(b.shape(), &shape);
            let (ad, bd) = (a.data(), b.data());
            Tensor::from_fn(shape, |i| f(ad[amap[i]], bd[bmap[i]]))
        };
        Ok(self.tape.push(out, op, vec![self.id, other.id]))
    }

    /// Broadcasting addition.
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul, |a, b| a * b)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Div, |a, b| a / b)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.unary(Op::Scale(s), |v| v * s)
    }

    pub fn shift(self, s: f64) -> Var<'t> {
        self.unary(Op::Shift, |v| v + s)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Ln, f64::ln)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid, sigmoid)
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Var<'t> {
        self.unary(Op::Silu, |x| x * sigmoid(x))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square, |x| x * x)
    }

    /// Elementwise Smooth-L1: `0.5 x²` for `|x| < 1`, `|x| - 0.5` otherwise.
    pub fn smooth_l1(self) -> Var<'t> {
        self.unary(Op::SmoothL1, smooth_l1)
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.unary(Op::ClampMin(lo), move |x| x.max(lo))
    }

    /// Sum over `axes`, keeping them as extent-1 axes.
    pub fn sum_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_of(self.id);
            let shape = x.shape();
            if let Some(&bad) = axes.iter().find(|&&a| a >= shape.len()) {
                return dim_err(format!("sum axis {bad} out of range for {shape:?}"));
            }
            let mut oshape = shape.to_vec();
            for &a in axes {
                oshape[a] = 1;
            }
            let map = broadcast_index_map(&oshape, shape);
            let mut out = Tensor::zeros(oshape);
            let od = out.data_mut();
            for (&v, &m) in x.data().iter().zip(&map) {
                od[m] += v;
            }
            out
        };
        Ok(self.tape.push(out, Op::SumAxes, vec![self.id]))
    }

    pub fn mean_axes(self, axes: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let count: usize = axes.iter().filter_map(|&a| shape.get(a)).product();
        Ok(self.sum_axes(axes)?.scale(1.0 / count as f64))
    }

    /// Sum of every entry, as a one-element tensor.
    pub fn sum(self) -> Var<'t> {
        let s = self.tape.value_of(self.id).sum();
        self.tape.push(Tensor::scalar(s), Op::SumAll, vec![self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.tape.value_of(self.id).len();
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let out = self.tape.value_of(self.id).reshape(shape)?;
        Ok(self.tape.push(out, Op::Reshape, vec![self.id]))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_of(self.id);
            let (shape, data) = permute_raw(x.shape(), x.data(), axes)?;
            Tensor::new(shape, data)?
        };
        Ok(self.tape.push(out, Op::Permute(axes.to_vec()), vec![self.id]))
    }

    /// Transpose of a 2-D tensor.
    pub fn t(self) -> Result<Var<'t>> {
        dims2(&self.tape.value_of(self.id), "transpose")?;
        self.permute(&[1, 0])
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_of(self.id);
            let xs = x.shape();
            if axis >= xs.len() || len == 0 || start + len > xs[axis] {
                return dim_err(format!("slice {start}..{} on axis {axis} of {xs:?}", start + len));
            }
            let outer: usize = xs[..axis].iter().product();
            let inner: usize = xs[axis + 1..].iter().product();
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let src = (o * xs[axis] + start) * inner;
                data.extend_from_slice(&x.data()[src..src + len * inner]);
            }
            let mut shape = xs.to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        Ok(self.tape.push(out, Op::Slice { axis, start }, vec![self.id]))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = self.tape.value_of(self.id).matmul(&self.tape.value_of(other.id))?;
        Ok(self.tape.push(out, Op::MatMul, vec![self.id, other.id]))
    }

    /// Softmax over the last axis; `-inf` entries receive weight 0.
    pub fn softmax(self) -> Result<Var<'t>> {
        let out = tensor::softmax_lastdim(&self.tape.value_of(self.id))?;
        Ok(self.tape.push(out, Op::Softmax, vec![self.id]))
    }

    /// Replaces entries whose `keep` flag is false with `-inf`.
    pub fn mask_fill(self, keep: Rc<Vec<bool>>) -> Result<Var<'t>> {
        let out = {
            let x = self.tape.value_of(self.id);
            if keep.len() != x.len() {
                return dim_err(format!("mask of {} entries for shape {:?}", keep.len(), x.shape()));
            }
            Tensor::from_fn(x.shape().to_vec(), |i| if keep[i] { x.data()[i] } else { f64::NEG_INFINITY })
        };
        Ok(self.tape.push(out, Op::MaskFill(keep), vec![self.id]))
    }

    /// `self · v` restricted to the kept entries of `self`; skipped entries
    /// cost nothing and contribute nothing.
    pub fn masked_matmul(self, v: Var<'t>, keep: Rc<Vec<bool>>) -> Result<Var<'t>> {
        let out = {
            let p = self.tape.value_of(self.id);
            let vv = self.tape.value_of(v.id);
            let (m, n) = dims2(&p, "masked_matmul lhs")?;
            let (n2, c) = dims2(&vv, "masked_matmul rhs")?;
            if n != n2 || keep.len() != m * n {
                return dim_err(format!(
                    "masked_matmul shapes {:?} x {:?} with mask of {}",
                    p.shape(),
                    vv.shape(),
                    keep.len()
                ));
            }
            let mut out = vec![0.0; m * c];
            let mut macs = 0u64;
            for i in 0..m {
                let orow = &mut out[i * c..(i + 1) * c];
                for j in 0..n {
                    if !keep[i * n + j] {
                        continue;
                    }
                    let pij = p.data()[i * n + j];
                    for (o, &x) in orow.iter_mut().zip(&vv.data()[j * c..(j + 1) * c]) {
                        *o += pij * x;
                    }
                    macs += c as u64;
                }
            }
            add_macs(macs);
            Tensor::new([m, c], out)?
        };
        Ok(self.tape.push(out, Op::MaskedMatMul(keep), vec![self.id, v.id]))
    }

    /// Normalizes each last-axis slice, then applies `gain`/`bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps.is_nan() || eps <= 0.0 {
            return param_err(format!("layer_norm eps must be > 0, got {eps}"));
        }
        let (out, xhat, rstd) = {
            let x = self.tape.value_of(self.id);
            let gn = self.tape.value_of(gain.id);
            let bs = self.tape.value_of(bias.id);
            let c = *x.shape().last().unwrap();
            if gn.shape() != [c] || bs.shape() != [c] {
                return dim_err(format!(
                    "layer_norm gain {:?}/bias {:?} do not match last extent of {:?}",
                    gn.shape(),
                    bs.shape(),
                    x.shape()
                ));
            }
            let mut xhat = vec![0.0; x.len()];
            let mut out = vec![0.0; x.len()];
            let mut rstd = Vec::with_capacity(x.len() / c);
            for ((row, xh), o) in x.data().chunks(c).zip(xhat.chunks_mut(c)).zip(out.chunks_mut(c)) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let r = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    xh[j] = (row[j] - mean) * r;
                    o[j] = xh[j] * gn.data()[j] + bs.data()[j];
                }
                rstd.push(r);
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, rstd)
        };
        Ok(self.tape.push(out, Op::LayerNorm { xhat, rstd }, vec![self.id, gain.id, bias.id]))
    }

    /// Training-mode batch normalization of `[N×C×…]` with per-channel
    /// statistics over every non-channel axis.
    pub fn batch_norm(self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        if eps.is_nan() || eps < 0.0 {
            return param_err(format!("batch_norm eps must be >= 0, got {eps}"));
        }
        let (out, xhat, rstd) = {
            let x = self.tape.value_of(self.id);
            let gm = self.tape.value_of(gamma.id);
            let bt = self.tape.value_of(beta.id);
            let shape = x.shape();
            if shape.len() < 2 {
                return dim_err(format!("batch_norm needs [N×C×…], got {shape:?}"));
            }
            let (n, c) = (shape[0], shape[1]);
            if gm.shape() != [c] || bt.shape() != [c] {
                return dim_err(format!(
                    "batch_norm gamma {:?}/beta {:?} do not match channels of {shape:?}",
                    gm.shape(),
                    bt.shape()
                ));
            }
            let inner: usize = shape[2..].iter().product();
            let count = (n * inner) as f64;
            let xd = x.data();
            let mut xhat = vec![0.0; x.len()];
            let mut out = vec![0.0; x.len()];
            let mut rstd = vec![0.0; c];
            for ch in 0..c {
                let idx = || (0..n).flat_map(move |b| (b * c + ch) * inner..(b * c + ch + 1) * inner);
                let mean = idx().map(|i| xd[i]).sum::<f64>() / count;
                let var = idx().map(|i| (xd[i] - mean) * (xd[i] - mean)).sum::<f64>() / count;
                if var + eps == 0.0 {
                    return param_err(format!(
                        "batch_norm channel {ch} has zero variance over {count} values and eps = 0"
                    ));
                }
                let r = 1.0 / (var + eps).sqrt();
                rstd[ch] = r;
                for i in idx() {
                    xhat[i] = (xd[i] - mean) * r;
                    out[i] = xhat[i] * gm.data()[ch] + bt.data()[ch];
                }
            }
            (Tensor::new(shape.to_vec(), out)?, xhat, rstd)
        };
        Ok(self.tape.push(out, Op::BatchNorm { xhat, rstd }, vec![self.id, gamma.id, beta.id]))
    }

    pub fn conv2d(self, kernel: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>> {
        let out = tensor::conv2d(&self.tape.value_of(self.id), &self.tape.value_of(kernel.id), stride, pad)?;
        Ok(self.tape.push(out, Op::Conv2d { stride, pad }, vec![self.id, kernel.id]))
    }

    /// Nearest-neighbour spatial upsampling of `[N×C×H×W]` by `factor`.
    pub fn upsample(self, factor: usize) -> Result<Var<'t>> {
        if factor == 0 {
            return param_err("upsample factor must be >= 1");
        }
        let out = {
            let x = self.tape.value_of(self.id);
            let (n, c, h, w) = dims4(&x, "upsample")?;
            let (oh, ow) = (h * factor, w * factor);
            let xd = x.data();
            let mut out = vec![0.0; n * c * oh * ow];
            for p in 0..n * c {
                for i in 0..oh {
                    for j in 0..ow {
                        out[p * oh * ow + i * ow + j] = xd[p * h * w + (i / factor) * w + j / factor];
                    }
                }
            }
            Tensor::new([n, c, oh, ow], out)?
        };
        Ok(self.tape.push(out, Op::Upsample(factor), vec![self.id]))
    }
}

pub fn smooth_l1(x: f64) -> f64 {
    if x.abs() < 1.0 {
        0.5 * x * x
    } else {
        x.abs() - 0.5
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_root_gives_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([2, 3], |i| i as f64));
        let grads = tape.backward(x.sum()).unwrap();
        assert_eq!(grads.wrt(x), Tensor::ones([2, 3]));
    }

    #[test]
    fn product_of_scalars() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.5));
        let y = tape.leaf(Tensor::scalar(-4.0));
        let grads = tape.backward(x.mul(y).unwrap()).unwrap();
        assert_eq!(grads.wrt(x).data(), &[-4.0]);
        assert_eq!(grads.wrt(y).data(), &[2.5]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = x.mul(x).unwrap().add(x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.wrt(x).data(), &[7.0]);
    }

    #[test]
    fn non_scalar_root_is_contract_error() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones([2]));
        let y = tape.leaf(Tensor::ones([3]));
        let grads = tape.backward(x.sum()).unwrap();
        assert!(grads.get(y).is_none());
        assert_eq!(grads.wrt(y), Tensor::zeros([3]));
    }

    #[test]
    fn layer_norm_rejects_nonpositive_eps() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones([1, 2]));
        let g = tape.leaf(Tensor::ones([2]));
        let b = tape.leaf(Tensor::zeros([2]));
        assert!(matches!(x.layer_norm(g, b, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn batch_norm_single_element_without_eps() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones([1, 1, 1, 1]));
        let g = tape.leaf(Tensor::ones([1]));
        let b = tape.leaf(Tensor::zeros([1]));
        assert!(matches!(x.batch_norm(g, b, 0.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn masked_softmax_zero_gradient_on_masked() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::new([1, 3], vec![0.3, -1.0, 2.0]).unwrap());
        let keep = Rc::new(vec![true, false, true]);
        let s = x.mask_fill(keep).unwrap().softmax().unwrap();
        let w = tape.leaf(Tensor::new([1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let grads = tape.backward(s.mul(w).unwrap().sum()).unwrap();
        let g = grads.wrt(x);
        assert_eq!(g.data()[1], 0.0);
        assert!(g.data()[0] != 0.0);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_fn([2, 3], |i| i as f64));
        let b = tape.leaf(Tensor::from_fn([2, 2], |i| 10.0 + i as f64));
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 5]);
        assert_eq!(c.slice(1, 0, 3).unwrap().value(), a.value());
        assert_eq!(c.slice(1, 3, 2).unwrap().value(), b.value());
        assert!(c.slice(1, 4, 2).is_err());
    }
}
