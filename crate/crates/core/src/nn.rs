//! Small layer building blocks shared by the detector modules, plus the
//! glue that puts parameter tensors on a tape.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::Tensor;

/// Binds parameter tensors to tape leaves, once per tensor.
///
/// Binding the same tensor twice returns the same [`Var`], so a weight used
/// by several branches accumulates one gradient.
pub struct Binder<'t> {
    tape: &'t Tape,
    bound: RefCell<HashMap<usize, Var<'t>>>,
}

impl<'t> Binder<'t> {
    pub fn new(tape: &'t Tape) -> Self {
        Self { tape, bound: RefCell::new(HashMap::new()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn param(&self, t: &Tensor) -> Var<'t> {
        let key = t as *const Tensor as usize;
        *self
            .bound
            .borrow_mut()
            .entry(key)
            .or_insert_with(|| self.tape.leaf(t.clone()))
    }

    /// Input data or other non-trainable values.
    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.leaf(t)
    }

    /// Gradient of a previously bound tensor; zeros if it was never bound.
    pub fn grad(&self, grads: &Gradients, t: &Tensor) -> Tensor {
        let key = t as *const Tensor as usize;
        match self.bound.borrow().get(&key) {
            Some(v) => grads.wrt(*v),
            None => Tensor::zeros(t.shape().to_vec()),
        }
    }
}

/// Enumerates trainable tensors in a fixed order.
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>);

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        self.visit_mut(&mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Glorot-uniform `[fan_in × fan_out]` matrix.
pub fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform([fan_in, fan_out], -a, a, rng)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[in × out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self { weight: glorot(rng, fan_in, fan_out), bias: Tensor::zeros([fan_out]) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { weight: Tensor::zeros([fan_in, fan_out]), bias: Tensor::zeros([fan_out]) }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(b.param(&self.weight))?.add(b.param(&self.bias))
    }
}

impl Parameters for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Two affine layers with a SiLU in between.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub inner: Linear,
    pub outer: Linear,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, width: usize, hidden: usize) -> Self {
        Self { inner: Linear::new(rng, width, hidden), outer: Linear::new(rng, hidden, width) }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.outer.forward(b, self.inner.forward(b, x)?.silu())
    }

    /// Zeroes the output layer so the block contributes nothing.
    pub fn zero_output(&mut self) {
        self.outer.weight.data_mut().fill(0.0);
        self.outer.bias.data_mut().fill(0.0);
    }
}

impl Parameters for Ffn {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.inner.visit(&join(prefix, "inner"), out);
        self.outer.visit(&join(prefix, "outer"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.inner.visit_mut(out);
        self.outer.visit_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

pub const LN_EPS: f64 = 1e-5;

impl LayerNormParams {
    pub fn new(width: usize) -> Self {
        Self { gain: Tensor::ones([width]), bias: Tensor::zeros([width]) }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(b.param(&self.gain), b.param(&self.bias), LN_EPS)
    }
}

impl Parameters for LayerNormParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "gain"), &self.gain));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

/// Convolution kernel plus per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    /// `[out × in × kh × kw]`
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        let fan_in = cin * kernel * kernel;
        let a = (3.0 / fan_in as f64).sqrt();
        Self {
            weight: Tensor::uniform([cout, cin, kernel, kernel], -a, a, rng),
            bias: Tensor::zeros([cout]),
            stride,
            pad,
        }
    }

    pub fn forward<'t>(&self, b: &Binder<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let cout = self.bias.len();
        let y = x.conv2d(b.param(&self.weight), self.stride, self.pad)?;
        y.add(b.param(&self.bias).reshape([1, cout, 1, 1])?)
    }
}

impl Parameters for Conv {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        for p in self.iter_mut() {
            p.visit_mut(out);
        }
    }
}

/// Row-wise `softmax(q·kᵀ·scale)·v` with no masking.
pub fn dense_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, scale: f64) -> Result<(Var<'t>, Var<'t>)> {
    let weights = q.matmul(k.t()?)?.scale(scale).softmax()?;
    Ok((weights.matmul(v)?, weights))
}

/// `[1×C×H×W]` feature map to `[H·W × C]` tokens.
pub fn nchw_to_tokens<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let [1, c, h, w] = s[..] else {
        return dim_err(format!("expected a single-sample [1×C×H×W] map, got {s:?}"));
    };
    x.permute(&[0, 2, 3, 1])?.reshape([h * w, c])
}

/// Inverse of [`nchw_to_tokens`].
pub fn tokens_to_nchw<'t>(x: Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let [n, c] = s[..] else {
        return dim_err(format!("expected [n×c] tokens, got {s:?}"));
    };
    if n != h * w {
        return dim_err(format!("{n} tokens cannot fill a {h}x{w} grid"));
    }
    x.reshape([1, h, w, c])?.permute(&[0, 3, 1, 2])
}

/// Fixed sinusoidal position table `[rows × width]`.
pub fn sinusoidal_table(rows: usize, width: usize) -> Tensor {
    Tensor::from_fn([rows, width], |i| {
        let (pos, j) = ((i / width) as f64, i % width);
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / width as f64);
        if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binder_dedupes_same_tensor() {
        let tape = Tape::new();
        let b = Binder::new(&tape);
        let w = Tensor::ones([2]);
        let v1 = b.param(&w);
        let v2 = b.param(&w);
        let y = v1.mul(v2).unwrap().sum();
        let grads = tape.backward(y).unwrap();
        assert_eq!(b.grad(&grads, &w).data(), &[2.0, 2.0]);
        assert_eq!(tape.len(), 3);
    }

    #[test]
    fn token_round_trip() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn([1, 3, 2, 4], |i| i as f64));
        let t = nchw_to_tokens(x).unwrap();
        assert_eq!(t.shape(), vec![8, 3]);
        // token (row 0, col 1) holds channel values at spatial index 1
        assert_eq!(t.value().row(1), &[1.0, 9.0, 17.0]);
        let back = tokens_to_nchw(t, 2, 4).unwrap();
        assert_eq!(back.value(), x.value());
        assert!(tokens_to_nchw(t, 3, 3).is_err());
    }

    #[test]
    fn sinusoid_first_row() {
        let p = sinusoidal_table(3, 4);
        assert_eq!(p.row(0), &[0.0, 1.0, 0.0, 1.0]);
        assert!((p.row(1)[0] - 1f64.sin()).abs() < 1e-15);
    }
}
