//! Spectral gated generator: a BatchNorm-scale channel gate followed by a
//! parameter-free energy attenuation.
//!
//! For every channel the energy of a value `t` is
//!
//! ```text
//! e(t) = 4(σ² + λ) / ((t − μ)² + 2σ² + 2λ)
//! ```
//!
//! with `μ`, `σ²` the channel's mean and (biased) variance over spatial
//! positions of one sample. `e` peaks at 2 when `t = μ`; `1/e` is the
//! importance of the value.

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, param_err, Error, Result};
use crate::hsi_io::HsiCube;
use crate::nn::{join, Binder, Parameters};
use crate::tensor::{dims4, Tensor};

pub const DEFAULT_LAMBDA: f64 = 1e-4;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct SggParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub lambda: f64,
}

impl SggParams {
    /// `γ = 1`, `β = 0`.
    pub fn new(channels: usize, lambda: f64) -> Self {
        Self { gamma: Tensor::ones([channels]), beta: Tensor::zeros([channels]), lambda }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda)?;
        if self.gamma.sum() == 0.0 {
            return Err(Error::Invariant("sum of SGG gamma is zero".into()));
        }
        Ok(())
    }
}

impl Parameters for SggParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((join(prefix, "gamma"), &self.gamma));
        out.push((join(prefix, "beta"), &self.beta));
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        out.push(&mut self.gamma);
        out.push(&mut self.beta);
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return param_err(format!("lambda must be > 0, got {lambda}"));
    }
    Ok(())
}

/// `sigmoid((γ_i / Σγ) · BN(s)_i)` per channel.
pub fn channel_gate_var<'t>(b: &Binder<'t>, s: Var<'t>, params: &SggParams) -> Result<Var<'t>> {
    params.validate()?;
    let shape = s.shape();
    let c = params.channels();
    if shape.len() != 4 || shape[1] != c {
        return dim_err(format!("channel gate for {c} channels got input {shape:?}"));
    }
    let gamma = b.param(&params.gamma);
    let beta = b.param(&params.beta);
    let weights = gamma.div(gamma.sum())?.reshape([1, c, 1, 1])?;
    s.batch_norm(gamma, beta, BN_EPS)?.mul(weights).map(|v| v.sigmoid())
}

/// Energy of every value of `x` `[N×C×H×W]` against its channel's
/// per-sample spatial statistics.
pub fn energy_var<'t>(x: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    check_lambda(lambda)?;
    let shape = x.shape();
    if shape.len() != 4 {
        return dim_err(format!("energy map needs [N×C×H×W], got {shape:?}"));
    }
    let mu = x.mean_axes(&[2, 3])?;
    let dev2 = x.sub(mu)?.square();
    let var_plus = dev2.mean_axes(&[2, 3])?.shift(lambda);
    let den = dev2.add(var_plus.scale(2.0))?;
    var_plus.scale(4.0).div(den)
}

/// `sigmoid(1/E) ⊙ s̃` where `s̃` is the channel-gated input and `E` its
/// energy map.
pub fn sgg_forward_var<'t>(b: &Binder<'t>, s: Var<'t>, params: &SggParams) -> Result<Var<'t>> {
    let gated = channel_gate_var(b, s, params)?;
    let energy = energy_var(gated, params.lambda)?;
    let one = b.constant(Tensor::scalar(1.0));
    one.div(energy)?.sigmoid().mul(gated)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnergyMap {
    pub values: Tensor,
    /// `[N×C]`
    pub mu_hat: Tensor,
    /// `[N×C]`, biased.
    pub sigma2_hat: Tensor,
}

impl EnergyMap {
    pub fn importance(&self) -> Tensor {
        self.values.map(|e| 1.0 / e)
    }
}

pub fn energy_map(x: &Tensor, lambda: f64) -> Result<EnergyMap> {
    check_lambda(lambda)?;
    let (n, c, h, w) = dims4(x, "energy map")?;
    let m = h * w;
    let mut mu = vec![0.0; n * c];
    let mut var = vec![0.0; n * c];
    let mut values = vec![0.0; x.len()];
    for (p, chunk) in x.data().chunks(m).enumerate() {
        let mean = chunk.iter().sum::<f64>() / m as f64;
        let v = chunk.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / m as f64;
        for (o, &t) in values[p * m..(p + 1) * m].iter_mut().zip(chunk) {
            *o = 4.0 * (v + lambda) / ((t - mean) * (t - mean) + 2.0 * v + 2.0 * lambda);
        }
        mu[p] = mean;
        var[p] = v;
    }
    Ok(EnergyMap {
        values: Tensor::new(x.shape().to_vec(), values)?,
        mu_hat: Tensor::new([n, c], mu)?,
        sigma2_hat: Tensor::new([n, c], var)?,
    })
}

pub fn channel_gate(s: &Tensor, params: &SggParams) -> Result<Tensor> {
    let tape = Tape::new();
    let b = Binder::new(&tape);
    Ok(channel_gate_var(&b, b.constant(s.clone()), params)?.value())
}

pub fn sgg_forward(s: &Tensor, params: &SggParams) -> Result<Tensor> {
    let tape = Tape::new();
    let b = Binder::new(&tape);
    Ok(sgg_forward_var(&b, b.constant(s.clone()), params)?.value())
}

/// Per-band importance of a cube.
#[derive(Debug, Clone, PartialEq)]
pub struct BandImportance {
    /// Min-max normalized per-band mean importance.
    pub normalized: Vec<f64>,
    /// Mean of `1/e` over the band's pixels.
    pub raw: Vec<f64>,
    /// `1/e` per band as row-major `H·W` images.
    pub maps: Vec<Vec<f64>>,
    pub height: usize,
    pub width: usize,
}

/// Importance of each band of an `[H×W×B]` array.
pub fn band_importance_of(data: &Tensor, lambda: f64) -> Result<BandImportance> {
    let [h, w, bands] = data.shape() else {
        return dim_err(format!("band importance needs H×W×B data, got {:?}", data.shape()));
    };
    let (h, w, bands) = (*h, *w, *bands);
    let nchw = data.permute(&[2, 0, 1])?.reshape([1, bands, h, w])?;
    let importance = energy_map(&nchw, lambda)?.importance();
    let maps: Vec<Vec<f64>> = importance.data().chunks(h * w).map(|c| c.to_vec()).collect();
    let raw: Vec<f64> = maps.iter().map(|m| m.iter().sum::<f64>() / m.len() as f64).collect();
    Ok(BandImportance { normalized: min_max_normalize(&raw), raw, maps, height: h, width: w })
}

pub fn band_importance(cube: &HsiCube, lambda: f64) -> Result<BandImportance> {
    band_importance_of(cube.data(), lambda)
}

/// Maps values onto `[0, 1]`; a constant vector maps to all ones.
pub fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![1.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_gamma_weights() {
        let p = SggParams { gamma: Tensor::full([4], 2.5), beta: Tensor::zeros([4]), lambda: 1e-4 };
        let w: Vec<f64> = p.gamma.data().iter().map(|g| g / p.gamma.sum()).collect();
        assert_eq!(w, vec![0.25; 4]);
    }

    #[test]
    fn zero_gamma_sum_is_invariant_error() {
        let p = SggParams {
            gamma: Tensor::new([2], vec![1.0, -1.0]).unwrap(),
            beta: Tensor::zeros([2]),
            lambda: 1e-4,
        };
        let x = Tensor::from_fn([1, 2, 2, 2], |i| i as f64);
        assert!(matches!(channel_gate(&x, &p), Err(Error::Invariant(_))));
    }

    #[test]
    fn zero_normalized_value_gates_to_half() {
        // channel values symmetric around the mean: the middle one normalizes to 0
        let x = Tensor::new([1, 1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let out = channel_gate(&x, &SggParams::new(1, 1e-4)).unwrap();
        assert_eq!(out.data()[1], 0.5);
    }

    #[test]
    fn energy_at_mean_is_two() {
        let x = Tensor::new([1, 1, 1, 3], vec![-1.0, 0.0, 1.0]).unwrap();
        let e = energy_map(&x, 1e-4).unwrap();
        assert_eq!(e.values.data()[1], 2.0);
    }

    #[test]
    fn constant_channel_energy() {
        let x = Tensor::full([1, 2, 3, 3], 0.7);
        let e = energy_map(&x, 0.3).unwrap();
        assert!(e.values.data().iter().all(|&v| (v - 2.0).abs() < 1e-15));
    }

    #[test]
    fn hand_evaluated_energy() {
        let x = Tensor::new([1, 1, 1, 2], vec![0.0, 2.0]).unwrap();
        let e = energy_map(&x, 1.0).unwrap();
        assert_eq!(e.mu_hat.data(), &[1.0]);
        assert_eq!(e.sigma2_hat.data(), &[1.0]);
        assert!((e.values.data()[0] - 1.6).abs() < 1e-15);
    }

    #[test]
    fn lambda_must_be_positive() {
        let x = Tensor::zeros([1, 1, 2, 2]);
        assert!(energy_map(&x, 0.0).is_err());
        assert!(energy_map(&x, f64::NAN).is_err());
    }

    #[test]
    fn constant_input_uniform_attenuation() {
        let x = Tensor::full([1, 3, 4, 4], 1.3);
        let p = SggParams::new(3, DEFAULT_LAMBDA);
        let gated = channel_gate(&x, &p).unwrap();
        let out = sgg_forward(&x, &p).unwrap();
        let factor = 1.0 / (1.0 + (-0.5f64).exp());
        for (o, g) in out.data().iter().zip(gated.data()) {
            assert!((o - factor * g).abs() < 1e-15);
        }
        assert!((factor - 0.6225).abs() < 1e-4);
    }

    #[test]
    fn single_band_normalizes_to_one() {
        let data = Tensor::from_fn([3, 3, 1], |i| (i as f64).sin());
        let imp = band_importance_of(&data, DEFAULT_LAMBDA).unwrap();
        assert_eq!(imp.normalized, vec![1.0]);
    }

    #[test]
    fn identical_bands_equal_importance() {
        let data = Tensor::from_fn([4, 4, 2], |i| ((i / 2) as f64 * 1.3).cos());
        let imp = band_importance_of(&data, DEFAULT_LAMBDA).unwrap();
        assert_eq!(imp.raw[0], imp.raw[1]);
    }
}
