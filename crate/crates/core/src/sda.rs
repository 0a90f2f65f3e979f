//! Spectral discrepancy aware refinement: a PCA spectral filter, a strided
//! conv extractor, cross-attention from spectral queries onto the deepest
//! spatial features, and a positional self-attention decoder.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{dim_err, param_err, Result};
use crate::hsi_io::HsiCube;
use crate::nn::{
    dense_attention, join, nchw_to_tokens, sinusoidal_table, Binder, Conv, Ffn, LayerNormParams, Parameters,
};
use crate::scl::{summarize, AttentionSummary, TokenGrid};
use crate::tensor::Tensor;

pub const DEFAULT_PCA_COMPONENTS: usize = 3;
pub const DEFAULT_DECODER_BLOCKS: usize = 1;

/// PCA projection of a cube's pixel spectra.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFeatures {
    /// `[H×W×d]`
    pub components: Tensor,
    /// `[b×d]`, orthonormal columns.
    pub basis: Tensor,
    /// Eigenvalues of the kept components, non-increasing.
    pub explained_variance: Vec<f64>,
    /// Sum of all eigenvalues.
    pub total_variance: f64,
    /// Per-band mean removed before projecting.
    pub mean: Vec<f64>,
}

impl SpectralFeatures {
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        self.explained_variance
            .iter()
            .map(|v| if self.total_variance > 0.0 { v / self.total_variance } else { 0.0 })
            .collect()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.components.shape();
        (s[0], s[1], s[2])
    }

    /// Components as a `[1×d×H×W]` map.
    pub fn to_nchw(&self) -> Tensor {
        let (h, w, d) = self.dims();
        self.components
            .permute(&[2, 0, 1])
            .and_then(|t| t.reshape([1, d, h, w]))
            .expect("component layout")
    }

    /// Maps the components back to (centered) band space.
    pub fn back_project(&self) -> Result<Tensor> {
        let (h, w, d) = self.dims();
        let flat = self.components.reshape([h * w, d])?;
        flat.matmul(&self.basis.transpose()?)?.reshape([h, w, self.basis.shape()[0]])
    }
}

/// Sample covariance (divided by the pixel count) of the pixel spectra.
pub fn spectral_covariance(cube: &HsiCube) -> (DMatrix<f64>, Vec<f64>) {
    let (n, b) = (cube.height() * cube.width(), cube.bands());
    let data = cube.data().data();
    let mut mean = vec![0.0; b];
    for px in data.chunks(b) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::<f64>::zeros(b, b);
    for px in data.chunks(b) {
        for i in 0..b {
            let di = px[i] - mean[i];
            for j in i..b {
                cov[(i, j)] += di * (px[j] - mean[j]);
            }
        }
    }
    for i in 0..b {
        for j in i..b {
            let v = cov[(i, j)] / n as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    (cov, mean)
}

/// Flips `v` so its largest-magnitude entry (lowest index on ties) is positive.
pub fn canonical_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Projects each pixel spectrum onto the top-`d` principal directions.
pub fn spectral_filter_pca(cube: &HsiCube, d: usize) -> Result<SpectralFeatures> {
    let b = cube.bands();
    if d == 0 || d > b {
        return param_err(format!("PCA components must be in 1..={b}, got {d}"));
    }
    let (cov, mean) = spectral_covariance(cube);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let total_variance = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut basis = vec![0.0; b * d];
    let mut explained_variance = Vec::with_capacity(d);
    for (col, &k) in order[..d].iter().enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        canonical_sign(&mut v);
        for (row, x) in v.iter().enumerate() {
            basis[row * d + col] = *x;
        }
        explained_variance.push(eig.eigenvalues[k].max(0.0));
    }
    let basis = Tensor::new([b, d], basis)?;
    let (h, w) = (cube.height(), cube.width());
    let centered = Tensor::from_fn([h * w, b], |i| cube.data().data()[i] - mean[i % b]);
    let components = centered.matmul(&basis)?.reshape([h, w, d])?;
    Ok(SpectralFeatures { components, basis, explained_variance, total_variance, mean })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlock {
    pub norm_attn: LayerNormParams,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub norm_ffn: LayerNormParams,
    pub ffn: Ffn,
}

impl DecoderBlock {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, width: usize) -> Self {
        let std = 1.0 / (width as f64).sqrt();
        Self {
            norm_attn: LayerNormParams::new(width),
            w_q: Tensor::randn([width, width], std, rng),
            w_k: Tensor::randn([width, width], std, rng),
            w_v: Tensor::randn([width, width], std, rng),
            norm_ffn: LayerNormParams::new(width),
            ffn: Ffn::new(rng, width, 4 * width),
        }
    }

    pub fn zero_outputs(&mut self) {
        self.w_v.data_mut().fill(0.0);
        self.ffn.zero_output();
    }
}

impl Parameters for DecoderBlock {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.norm_attn.visit(&join(prefix, "norm_attn"), out);
        out.push((join(prefix, "w_q"), &self.w_q));
        out.push((join(prefix, "w_k"), &self.w_k));
        out.push((join(prefix, "w_v"), &self.w_v));
        self.norm_ffn.visit(&join(prefix, "norm_ffn"), out);
        self.ffn.visit(&join(prefix, "ffn"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.norm_attn.visit_mut(out);
        out.push(&mut self.w_q);
        out.push(&mut self.w_k);
        out.push(&mut self.w_v);
        self.norm_ffn.visit_mut(out);
        self.ffn.visit_mut(out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdaParams {
    /// 2×2 stride-2 convolutions; the first maps `d` components to the
    /// extractor width.
    pub extractor: Vec<Conv>,
    /// `[extractor width × c]`
    pub w_q: Tensor,
    /// `[c×c]`
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub decoder: Vec<DecoderBlock>,
    /// Fixed sinusoidal table `[max tokens × c]`.
    pub positions: Tensor,
}

impl SdaParams {
    /// `levels` stride-2 extractor layers take `d` PCA maps down to the
    /// high-level grid; `width` is the high-level feature width.
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        d: usize,
        extractor_width: usize,
        levels: usize,
        width: usize,
        decoder_blocks: usize,
        max_tokens: usize,
    ) -> Self {
        let extractor = (0..levels)
            .map(|i| Conv::new(rng, if i == 0 { d } else { extractor_width }, extractor_width, 2, 2, 0))
            .collect();
        let std_q = 1.0 / (extractor_width as f64).sqrt();
        let std = 1.0 / (width as f64).sqrt();
        Self {
            extractor,
            w_q: Tensor::randn([extractor_width, width], std_q, rng),
            w_k: Tensor::randn([width, width], std, rng),
            w_v: Tensor::randn([width, width], std, rng),
            decoder: (0..decoder_blocks).map(|_| DecoderBlock::new(rng, width)).collect(),
            positions: sinusoidal_table(max_tokens, width),
        }
    }

    pub fn width(&self) -> usize {
        self.w_k.shape()[0]
    }

    pub fn extractor_width(&self) -> usize {
        self.w_q.shape()[0]
    }
}

impl Parameters for SdaParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.extractor.visit(&join(prefix, "extractor"), out);
        out.push((join(prefix, "w_q"), &self.w_q));
        out.push((join(prefix, "w_k"), &self.w_k));
        out.push((join(prefix, "w_v"), &self.w_v));
        self.decoder.visit(&join(prefix, "decoder"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.extractor.visit_mut(out);
        out.push(&mut self.w_q);
        out.push(&mut self.w_k);
        out.push(&mut self.w_v);
        self.decoder.visit_mut(out);
    }
}

/// Runs the extractor convolutions on `[1×d×H×W]` maps, returning the
/// `[1×e×h×w]` output.
pub fn spectral_extractor_var<'t>(b: &Binder<'t>, maps: Var<'t>, params: &SdaParams) -> Result<Var<'t>> {
    let mut x = maps;
    for conv in &params.extractor {
        x = conv.forward(b, x)?;
    }
    Ok(x)
}

/// Extractor output as tokens; the grid must match `target` `(h, w)`.
pub fn spectral_extractor(maps: &SpectralFeatures, params: &SdaParams, target: (usize, usize)) -> Result<TokenGrid> {
    let (_, _, d) = maps.dims();
    let expected = params.extractor.first().map(|c| c.weight.shape()[1]);
    if expected != Some(d) {
        return dim_err(format!("extractor expects {expected:?} components, got {d}"));
    }
    let tape = Tape::new();
    let b = Binder::new(&tape);
    let out = spectral_extractor_var(&b, b.constant(maps.to_nchw()), params)?;
    let s = out.shape();
    if (s[2], s[3]) != target {
        return dim_err(format!(
            "extractor output grid {}x{} does not match high-level grid {}x{}",
            s[2], s[3], target.0, target.1
        ));
    }
    TokenGrid::new(nchw_to_tokens(out)?.value(), s[2], s[3])
}

/// `softmax((f_spe·W_Q)(s5·W_K)ᵀ/√c)·(s5·W_V)`.
pub fn cross_att_var<'t>(
    b: &Binder<'t>,
    f_spe: Var<'t>,
    s5: Var<'t>,
    params: &SdaParams,
) -> Result<(Var<'t>, Var<'t>)> {
    let (qs, ks) = (f_spe.shape(), s5.shape());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != params.extractor_width() || ks[1] != params.width() {
        return dim_err(format!(
            "cross attention: queries {qs:?} need width {}, keys {ks:?} need width {}",
            params.extractor_width(),
            params.width()
        ));
    }
    let q = f_spe.matmul(b.param(&params.w_q))?;
    let k = s5.matmul(b.param(&params.w_k))?;
    let v = s5.matmul(b.param(&params.w_v))?;
    dense_attention(q, k, v, 1.0 / (params.width() as f64).sqrt())
}

pub fn cross_att(f_spe: &TokenGrid, s5: &TokenGrid, params: &SdaParams) -> Result<TokenGrid> {
    let tape = Tape::new();
    let b = Binder::new(&tape);
    let (out, _) = cross_att_var(&b, b.constant(f_spe.tokens.clone()), b.constant(s5.tokens.clone()), params)?;
    TokenGrid::new(out.value(), f_spe.h, f_spe.w)
}

/// Positional rows `0..n`.
pub fn positions_for(params: &SdaParams, n: usize) -> Result<Tensor> {
    let max = params.positions.shape()[0];
    if n > max {
        return param_err(format!("{n} tokens exceed the positional table of {max} rows"));
    }
    Tensor::new([n, params.width()], params.positions.data()[..n * params.width()].to_vec())
}

/// Decoder with an explicit positional table `[n×c]`. Positions enter the
/// queries and keys only, so zeroed sublayer outputs leave the residual
/// stream untouched.
pub fn decode_with_positions_var<'t>(
    b: &Binder<'t>,
    r_ref: Var<'t>,
    pos: Var<'t>,
    blocks: &[DecoderBlock],
    summaries: &mut Vec<AttentionSummary>,
) -> Result<Var<'t>> {
    let (rs, ps) = (r_ref.shape(), pos.shape());
    if rs != ps {
        return dim_err(format!("decoder tokens {rs:?} vs positions {ps:?}"));
    }
    let scale = 1.0 / (rs[1] as f64).sqrt();
    let mut x = r_ref;
    for block in blocks {
        let normed = block.norm_attn.forward(b, x)?;
        let with_pos = normed.add(pos)?;
        let q = with_pos.matmul(b.param(&block.w_q))?;
        let k = with_pos.matmul(b.param(&block.w_k))?;
        let v = normed.matmul(b.param(&block.w_v))?;
        let (att, weights) = dense_attention(q, k, v, scale)?;
        summaries.push(summarize(&weights.value(), rs[0]));
        x = x.add(att)?;
        x = x.add(block.ffn.forward(b, block.norm_ffn.forward(b, x)?)?)?;
    }
    Ok(x)
}

pub fn decode_var<'t>(
    b: &Binder<'t>,
    r_ref: Var<'t>,
    params: &SdaParams,
    summaries: &mut Vec<AttentionSummary>,
) -> Result<Var<'t>> {
    let shape = r_ref.shape();
    if shape.len() != 2 || shape[1] != params.width() {
        return dim_err(format!("decoder expects [n×{}] tokens, got {shape:?}", params.width()));
    }
    let pos = b.constant(positions_for(params, shape[0])?);
    decode_with_positions_var(b, r_ref, pos, &params.decoder, summaries)
}

pub fn decode(r_ref: &TokenGrid, params: &SdaParams) -> Result<TokenGrid> {
    let tape = Tape::new();
    let b = Binder::new(&tape);
    let out = decode_var(&b, b.constant(r_ref.tokens.clone()), params, &mut Vec::new())?;
    TokenGrid::new(out.value(), r_ref.h, r_ref.w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params(d: usize, e: usize, c: usize) -> SdaParams {
        SdaParams::new(&mut ChaCha8Rng::seed_from_u64(9), d, e, 2, c, 1, 16)
    }

    fn cube(b: usize, seed: u64) -> HsiCube {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wl = (0..b).map(|i| 400.0 + 50.0 * i as f64).collect();
        HsiCube::new(wl, Tensor::randn([6, 5, b], 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn too_many_components() {
        assert!(spectral_filter_pca(&cube(4, 0), 5).is_err());
        assert!(spectral_filter_pca(&cube(4, 0), 0).is_err());
    }

    #[test]
    fn sign_convention() {
        let mut v = vec![0.1, -0.9, 0.3];
        canonical_sign(&mut v);
        assert_eq!(v, vec![-0.1, 0.9, -0.3]);
        let mut tie = vec![-0.5, 0.5];
        canonical_sign(&mut tie);
        assert_eq!(tie, vec![0.5, -0.5]);
    }

    #[test]
    fn explained_variance_sorted() {
        let f = spectral_filter_pca(&cube(6, 1), 6).unwrap();
        assert!(f.explained_variance.windows(2).all(|w| w[0] >= w[1]));
        let sum: f64 = f.explained_variance_ratio().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn one_query_one_key() {
        let p = params(2, 3, 4);
        let q = TokenGrid::from_rows(Tensor::new([1, 3], vec![0.2, -0.4, 1.0]).unwrap()).unwrap();
        let k = TokenGrid::from_rows(Tensor::new([1, 4], vec![1.0, 2.0, -1.0, 0.5]).unwrap()).unwrap();
        let out = cross_att(&q, &k, &p).unwrap();
        let expected = k.tokens.matmul(&p.w_v).unwrap();
        assert!(out.tokens.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn zero_queries_and_keys_average_values() {
        let p = params(2, 3, 4);
        let q = TokenGrid::from_rows(Tensor::zeros([2, 3])).unwrap();
        let mut keys = Tensor::zeros([3, 4]);
        let k = TokenGrid::from_rows(keys.clone()).unwrap();
        let out = cross_att(&q, &k, &p).unwrap();
        assert!(out.tokens.max_abs() == 0.0);
        // zero W_K makes every score 0 regardless of key content
        let mut p2 = p.clone();
        p2.w_k.data_mut().fill(0.0);
        keys = Tensor::from_fn([3, 4], |i| i as f64);
        let k = TokenGrid::from_rows(keys.clone()).unwrap();
        let out = cross_att(&q, &k, &p2).unwrap();
        let v = keys.matmul(&p2.w_v).unwrap();
        for j in 0..4 {
            let mean = (0..3).map(|i| v.get(&[i, j])).sum::<f64>() / 3.0;
            assert!((out.tokens.get(&[0, j]) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_att_width_mismatch() {
        let p = params(2, 3, 4);
        let q = TokenGrid::from_rows(Tensor::zeros([2, 4])).unwrap();
        let k = TokenGrid::from_rows(Tensor::zeros([3, 4])).unwrap();
        assert!(cross_att(&q, &k, &p).is_err());
    }

    #[test]
    fn decoder_position_table_limit() {
        let p = params(2, 3, 4);
        let r = TokenGrid::from_rows(Tensor::zeros([17, 4])).unwrap();
        assert!(matches!(decode(&r, &p), Err(crate::Error::Parameter(_))));
    }

    #[test]
    fn decoder_identity_with_zeroed_outputs() {
        let mut p = params(2, 3, 4);
        p.decoder.iter_mut().for_each(DecoderBlock::zero_outputs);
        let r = TokenGrid::from_rows(Tensor::from_fn([5, 4], |i| (i as f64 * 0.37).sin())).unwrap();
        assert_eq!(decode(&r, &p).unwrap(), r);
    }

    #[test]
    fn extractor_zero_weights() {
        let mut p = params(3, 3, 4);
        for conv in p.extractor.iter_mut() {
            conv.weight.data_mut().fill(0.0);
        }
        let maps = spectral_filter_pca(&cube(5, 3), 3).unwrap();
        // 6x5 map through two stride-2 layers -> 1x1
        let out = spectral_extractor(&maps, &p, (1, 1)).unwrap();
        assert_eq!(out.tokens.max_abs(), 0.0);
        assert!(spectral_extractor(&maps, &p, (2, 2)).is_err());
    }
}
