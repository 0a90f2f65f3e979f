//! The full detector: band selection, two conv streams, SCL on the top
//! three pyramid levels, SGG gating, the SDA refinement of `s5` and the
//! grid head.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::band_select::{select_representative, split_spectrum, Side};
use crate::config::{RunConfig, PYRAMID_LEVELS};
use crate::detect::{decode_predictions, nms, predict_var, Detection, FeaturePyramid, HeadParams};
use crate::error::{dim_err, Error, Result, StageContext};
use crate::hsi_io::HsiCube;
use crate::nn::{join, nchw_to_tokens, tokens_to_nchw, Binder, Conv, Parameters};
use crate::scl::{scl_block_var, AttentionSummary, SclParams};
use crate::sda::{cross_att_var, decode_var, spectral_extractor_var, spectral_filter_pca, SdaParams};
use crate::sgg::{sgg_forward_var, SggParams};
use crate::tensor::Tensor;

/// First pyramid level (1-based) that goes through SCL.
pub const FIRST_SCL_LEVEL: usize = 3;

/// Per-cube preprocessing that stays off the tape.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedInput {
    /// `[1×c×H×W]` selected visible bands.
    pub vi: Tensor,
    pub ir: Tensor,
    /// `[1×d×H×W]` PCA component maps.
    pub spectral: Tensor,
    pub vi_bands: Vec<usize>,
    pub ir_bands: Vec<usize>,
    pub explained_variance_ratio: Vec<f64>,
}

pub fn prepare_input(cube: &HsiCube, cfg: &RunConfig) -> Result<PreparedInput> {
    let stride = 1 << PYRAMID_LEVELS;
    if cube.height() % stride != 0 || cube.width() % stride != 0 {
        return dim_err(format!(
            "cube of {}x{} pixels is not a multiple of the encoder stride {stride}",
            cube.height(),
            cube.width()
        ))
        .stage("encoder");
    }
    let split = split_spectrum(cube, cfg.band_threshold_nm).stage("band_select")?;
    let vi_bands = select_representative(cube, &split, Side::Visible, cfg.bands_per_side).stage("band_select")?;
    let ir_bands = select_representative(cube, &split, Side::Infrared, cfg.bands_per_side).stage("band_select")?;
    let pca = spectral_filter_pca(cube, cfg.pca_components).stage("sda")?;
    Ok(PreparedInput {
        vi: standardize_channels(cube.bands_nchw(&vi_bands)),
        ir: standardize_channels(cube.bands_nchw(&ir_bands)),
        spectral: pca.to_nchw(),
        explained_variance_ratio: pca.explained_variance_ratio(),
        vi_bands,
        ir_bands,
    })
}

/// Zero mean, unit variance per channel of a `[1×C×H×W]` map; constant
/// channels are only centered.
pub fn standardize_channels(mut x: Tensor) -> Tensor {
    let m = x.shape()[2] * x.shape()[3];
    for ch in x.data_mut().chunks_mut(m) {
        let mean = ch.iter().sum::<f64>() / m as f64;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let scale = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
        ch.iter_mut().for_each(|v| *v = (*v - mean) * scale);
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageShape {
    pub name: String,
    pub shape: Vec<usize>,
    /// Spatial stride relative to the input cube, when the stage is a map.
    pub stride: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedSummary {
    pub name: String,
    #[serde(flatten)]
    pub summary: AttentionSummary,
}

/// Shapes and attention diagnostics collected during one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ForwardTrace {
    pub vi_bands: Vec<usize>,
    pub ir_bands: Vec<usize>,
    pub explained_variance_ratio: Vec<f64>,
    pub shapes: Vec<StageShape>,
    pub attention: Vec<NamedSummary>,
}

impl ForwardTrace {
    fn shape(&mut self, name: impl Into<String>, shape: Vec<usize>, stride: Option<usize>) {
        self.shapes.push(StageShape { name: name.into(), shape, stride });
    }

    fn attention(&mut self, name: &str, summaries: Vec<AttentionSummary>) {
        for (i, summary) in summaries.into_iter().enumerate() {
            self.attention.push(NamedSummary { name: format!("{name}.{i}"), summary });
        }
    }
}

pub struct ForwardOutput<'t> {
    /// `[G×(5+K)]` raw head outputs.
    pub raw: Var<'t>,
    pub grid: (usize, usize),
    pub trace: ForwardTrace,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdcmModel {
    pub config: RunConfig,
    /// Per level: a 3×3 stride-2 conv followed by `encoder_depth − 1`
    /// stride-1 convs.
    pub encoder_vi: Vec<Vec<Conv>>,
    pub encoder_ir: Vec<Vec<Conv>>,
    /// One SCL block per level `s3..s5`.
    pub scl: Vec<SclParams>,
    /// One gate per SCL level, over the concatenated branches.
    pub sgg_levels: Vec<SggParams>,
    pub sgg_spectral: SggParams,
    pub sda: SdaParams,
    pub head: HeadParams,
}

impl SdcmModel {
    /// Builds a freshly initialized model; every weight comes from a
    /// generator seeded with `cfg.seed`.
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let w = &cfg.encoder_widths;
        let stream = |rng: &mut ChaCha8Rng| -> Vec<Vec<Conv>> {
            (0..PYRAMID_LEVELS)
                .map(|i| {
                    let cin = if i == 0 { cfg.bands_per_side } else { w[i - 1] };
                    (0..cfg.encoder_depth)
                        .map(|j| if j == 0 { Conv::new(rng, cin, w[i], 3, 2, 1) } else { Conv::new(rng, w[i], w[i], 3, 1, 1) })
                        .collect()
                })
                .collect()
        };
        let encoder_vi = stream(&mut rng);
        let encoder_ir = stream(&mut rng);
        let scl = (FIRST_SCL_LEVEL..=PYRAMID_LEVELS)
            .map(|level| SclParams::new(&mut rng, w[level - 1], cfg.scl_stages, cfg.topk_ratio, cfg.heads))
            .collect::<Result<Vec<_>>>()?;
        let sgg_levels = (FIRST_SCL_LEVEL..=PYRAMID_LEVELS)
            .map(|level| SggParams::new(2 * w[level - 1], cfg.sgg_lambda))
            .collect();
        let top = 2 * w[PYRAMID_LEVELS - 1];
        let stride = 1 << PYRAMID_LEVELS;
        let max_tokens = (cfg.scene.height / stride) * (cfg.scene.width / stride);
        let sda = SdaParams::new(
            &mut rng,
            cfg.pca_components,
            cfg.extractor_width,
            PYRAMID_LEVELS,
            top,
            cfg.decoder_blocks,
            max_tokens,
        );
        let fused = 2 * (w[2] + w[3]) + top;
        let head = HeadParams::new(&mut rng, fused, cfg.head_hidden, cfg.num_classes());
        Ok(Self {
            config: cfg.clone(),
            encoder_vi,
            encoder_ir,
            scl,
            sgg_levels,
            sgg_spectral: SggParams::new(cfg.extractor_width, cfg.sgg_lambda),
            sda,
            head,
        })
    }

    pub fn prepare(&self, cube: &HsiCube) -> Result<PreparedInput> {
        prepare_input(cube, &self.config)
    }

    pub fn forward_var<'t>(&self, b: &Binder<'t>, input: &PreparedInput) -> Result<ForwardOutput<'t>> {
        let cfg = &self.config;
        let mut trace = ForwardTrace {
            vi_bands: input.vi_bands.clone(),
            ir_bands: input.ir_bands.clone(),
            explained_variance_ratio: input.explained_variance_ratio.clone(),
            ..ForwardTrace::default()
        };
        if input.vi.shape() != input.ir.shape() || input.vi.shape()[1] != cfg.bands_per_side {
            return dim_err(format!(
                "stream inputs {:?} / {:?} do not match {} bands per side",
                input.vi.shape(),
                input.ir.shape(),
                cfg.bands_per_side
            ))
            .stage("encoder");
        }
        trace.shape("input.vi", input.vi.shape().to_vec(), Some(1));
        trace.shape("input.ir", input.ir.shape().to_vec(), Some(1));

        let mut vi = b.constant(input.vi.clone());
        let mut ir = b.constant(input.ir.clone());
        let mut levels: [Option<Var<'t>>; 5] = [None; 5];
        let mut s5_tokens = None;
        for level in 1..=PYRAMID_LEVELS {
            for (cv, ci) in self.encoder_vi[level - 1].iter().zip(&self.encoder_ir[level - 1]) {
                vi = cv.forward(b, vi).stage("encoder")?.silu();
                ir = ci.forward(b, ir).stage("encoder")?.silu();
            }
            let stride = 1 << level;
            let shape = vi.shape();
            let (h, w) = (shape[2], shape[3]);
            if level < FIRST_SCL_LEVEL {
                levels[level - 1] = Some(b.tape().concat(&[vi, ir], 1)?);
                trace.shape(format!("s{level}"), vec![shape[0], 2 * shape[1], h, w], Some(stride));
                continue;
            }
            let params = &self.scl[level - FIRST_SCL_LEVEL];
            let mut summaries = Vec::new();
            let (tv, ti) = scl_block_var(b, nchw_to_tokens(vi)?, nchw_to_tokens(ir)?, params, &mut summaries)
                .stage("scl")?;
            trace.attention(&format!("scl.s{level}"), summaries);
            let fused = b.tape().concat(&[tokens_to_nchw(tv, h, w)?, tokens_to_nchw(ti, h, w)?], 1)?;
            let fused = if cfg.sgg_after_scl {
                sgg_forward_var(b, fused, &self.sgg_levels[level - FIRST_SCL_LEVEL]).stage("sgg")?
            } else {
                fused
            };
            trace.shape(format!("s{level}"), fused.shape(), Some(stride));
            if level == PYRAMID_LEVELS {
                s5_tokens = Some((nchw_to_tokens(fused)?, (h, w)));
            }
            levels[level - 1] = Some(fused);
        }
        let (s5, s5_grid) = s5_tokens.expect("encoder has a top level");

        let maps = b.constant(input.spectral.clone());
        let extracted = spectral_extractor_var(b, maps, &self.sda).stage("sda")?;
        let es = extracted.shape();
        if (es[2], es[3]) != s5_grid {
            return dim_err(format!(
                "spectral extractor grid {}x{} does not match s5 grid {}x{}",
                es[2], es[3], s5_grid.0, s5_grid.1
            ))
            .stage("sda");
        }
        let extracted = if cfg.sgg_on_spectral {
            sgg_forward_var(b, extracted, &self.sgg_spectral).stage("sgg")?
        } else {
            extracted
        };
        let f_spe = nchw_to_tokens(extracted)?;
        trace.shape("f_spe", f_spe.shape(), Some(1 << PYRAMID_LEVELS));
        let (r_ref, weights) = cross_att_var(b, f_spe, s5, &self.sda).stage("sda")?;
        trace.attention(
            "sda.cross",
            vec![crate::scl::summarize(&weights.value(), s5.shape()[0])],
        );
        trace.shape("r_ref", r_ref.shape(), None);
        let mut summaries = Vec::new();
        let s_out = decode_var(b, r_ref, &self.sda, &mut summaries).stage("sda")?;
        trace.attention("sda.decoder", summaries);
        trace.shape("s_out", s_out.shape(), None);

        let pyramid = FeaturePyramid { levels };
        let (raw, grid) = predict_var(b, &pyramid, s_out, s5_grid, &self.head).stage("detect")?;
        trace.shape("head", raw.shape(), Some(1 << FIRST_SCL_LEVEL));
        Ok(ForwardOutput { raw, grid, trace })
    }

    /// One decoded detection per grid cell, before suppression.
    pub fn forward(&self, input: &PreparedInput) -> Result<(Vec<Detection>, ForwardTrace)> {
        let tape = Tape::new();
        let b = Binder::new(&tape);
        let out = self.forward_var(&b, input)?;
        let dets = decode_predictions(&out.raw.value(), out.grid, self.head.num_classes).stage("detect")?;
        Ok((dets, out.trace))
    }

    /// Suppressed detections at or above the configured score threshold.
    pub fn detect(&self, input: &PreparedInput) -> Result<(Vec<Detection>, ForwardTrace)> {
        let (dets, trace) = self.forward(input)?;
        let kept = nms(&dets, self.config.nms_iou).stage("detect")?;
        Ok((kept.into_iter().filter(|d| d.confidence >= self.config.score_threshold).collect(), trace))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(&self.checkpoint_bytes()?)?;
        f.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    /// `SDCK`, version, the TOML config, then every parameter tensor in
    /// visiting order as name, rank, extents and little-endian values.
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let cfg = self.config.to_toml()?;
        out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        let params = self.named_params();
        out.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for (name, t) in params {
            out.extend_from_slice(&(name.len() as u64).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u64).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4, "magic")? != CHECKPOINT_MAGIC {
            return Err(Error::Format { field: "magic", message: "not a checkpoint".into() });
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format { field: "version", message: format!("unsupported version {version}") });
        }
        let n = r.u64("config")? as usize;
        let text = std::str::from_utf8(r.take(n, "config")?)
            .map_err(|e| Error::Format { field: "config", message: e.to_string() })?;
        let cfg = RunConfig::from_toml(text)?;
        let mut model = Self::new(&cfg)?;
        let names: Vec<(String, Vec<usize>)> =
            model.named_params().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        let count = r.u64("parameters")? as usize;
        if count != names.len() {
            return Err(Error::Format {
                field: "parameters",
                message: format!("{count} tensors stored, model has {}", names.len()),
            });
        }
        for (t, (name, shape)) in model.params_mut().into_iter().zip(names) {
            let len = r.u64("parameters")? as usize;
            let stored = r.take(len, "parameters")?;
            if stored != name.as_bytes() {
                return Err(Error::Format { field: "parameters", message: format!("expected tensor {name}") });
            }
            let rank = r.u64("parameters")? as usize;
            let dims = (0..rank).map(|_| r.u64("parameters").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if dims != shape {
                return Err(Error::Format {
                    field: "parameters",
                    message: format!("{name} stored as {dims:?}, expected {shape:?}"),
                });
            }
            for v in t.data_mut() {
                *v = f64::from_le_bytes(r.take(8, "parameters")?.try_into().unwrap());
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { field: "parameters", message: "trailing bytes".into() });
        }
        Ok(model)
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SDCK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format { field, message: "truncated".into() })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

impl Parameters for SdcmModel {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.encoder_vi.visit(&join(prefix, "encoder_vi"), out);
        self.encoder_ir.visit(&join(prefix, "encoder_ir"), out);
        self.scl.visit(&join(prefix, "scl"), out);
        self.sgg_levels.visit(&join(prefix, "sgg_levels"), out);
        self.sgg_spectral.visit(&join(prefix, "sgg_spectral"), out);
        self.sda.visit(&join(prefix, "sda"), out);
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Tensor>) {
        self.encoder_vi.visit_mut(out);
        self.encoder_ir.visit_mut(out);
        self.scl.visit_mut(out);
        self.sgg_levels.visit_mut(out);
        self.sgg_spectral.visit_mut(out);
        self.sda.visit_mut(out);
        self.head.visit_mut(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hsi_io::gen_synthetic_cube;

    fn small() -> (SdcmModel, PreparedInput) {
        let cfg = RunConfig::default();
        let (cube, _) = gen_synthetic_cube(0, &cfg.scene).unwrap();
        let model = SdcmModel::new(&cfg).unwrap();
        let input = model.prepare(&cube).unwrap();
        (model, input)
    }

    #[test]
    fn pyramid_strides() {
        let (model, input) = small();
        let (dets, trace) = model.forward(&input).unwrap();
        assert_eq!(dets.len(), 64);
        let stride = |n: &str| trace.shapes.iter().find(|s| s.name == n).unwrap().stride;
        assert_eq!(stride("s3"), Some(8));
        assert_eq!(stride("s4"), Some(16));
        assert_eq!(stride("s5"), Some(32));
        for d in &dets {
            assert!((d.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let (model, input) = small();
        let back = SdcmModel::from_checkpoint_bytes(&model.checkpoint_bytes().unwrap()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.forward(&input).unwrap().0, model.forward(&input).unwrap().0);
    }

    #[test]
    fn truncated_checkpoint() {
        let (model, _) = small();
        let bytes = model.checkpoint_bytes().unwrap();
        assert!(matches!(
            SdcmModel::from_checkpoint_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Format { field: "parameters", .. })
        ));
    }
}
