//! Hyperspectral cubes: the binary cube format, annotations, and a seeded
//! synthetic scene generator.
//!
//! Cube file layout (all little-endian):
//!
//! | bytes        | content                                 |
//! |--------------|-----------------------------------------|
//! | 4            | magic `HSIC`                            |
//! | 4            | version `u32` = 1                       |
//! | 12           | height, width, bands as `u32`           |
//! | 8·B          | band wavelengths in nm, `f64`           |
//! | 8·H·W·B      | values, `f64`, (row, col, band) order   |

use std::f64::consts::FRAC_PI_2;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CUBE_MAGIC: &[u8; 4] = b"HSIC";
pub const CUBE_VERSION: u32 = 1;
pub const MIN_WAVELENGTH_NM: f64 = 380.0;
pub const MAX_WAVELENGTH_NM: f64 = 2600.0;

/// An `H×W×B` cube with per-band centre wavelengths.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    wavelengths: Vec<f64>,
    data: Tensor,
}

fn check_wavelengths(wl: &[f64]) -> std::result::Result<(), String> {
    if let Some(w) = wl
        .iter()
        .find(|w| !(MIN_WAVELENGTH_NM..=MAX_WAVELENGTH_NM).contains(*w))
    {
        return Err(format!(
            "wavelength {w} nm outside [{MIN_WAVELENGTH_NM}, {MAX_WAVELENGTH_NM}]"
        ));
    }
    if let Some(i) = wl.windows(2).position(|p| p[1] <= p[0]) {
        return Err(format!(
            "wavelengths not strictly increasing at band {}: {} then {}",
            i + 1,
            wl[i],
            wl[i + 1]
        ));
    }
    Ok(())
}

impl HsiCube {
    pub fn new(wavelengths: Vec<f64>, data: Tensor) -> Result<Self> {
        let [_, _, b] = data.shape() else {
            return Err(Error::Dimension(format!(
                "cube data must be H×W×B, got {:?}",
                data.shape()
            )));
        };
        if *b != wavelengths.len() {
            return Err(Error::Dimension(format!(
                "{} wavelengths for {b} bands",
                wavelengths.len()
            )));
        }
        if *b < 2 {
            return Err(Error::Invariant(format!("cube needs at least 2 bands, got {b}")));
        }
        check_wavelengths(&wavelengths).map_err(Error::Invariant)?;
        Ok(Self { wavelengths, data })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn bands(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn value(&self, row: usize, col: usize, band: usize) -> f64 {
        self.data.data()[(row * self.width() + col) * self.bands() + band]
    }

    /// Spatial image of one band, row-major `H·W`.
    pub fn band_image(&self, band: usize) -> Vec<f64> {
        let b = self.bands();
        self.data.data().iter().skip(band).step_by(b).copied().collect()
    }

    /// Selected bands as a `[1×C×H×W]` tensor, in the given order.
    pub fn bands_nchw(&self, indices: &[usize]) -> Tensor {
        let (h, w) = (self.height(), self.width());
        let mut out = Vec::with_capacity(indices.len() * h * w);
        for &b in indices {
            out.extend(self.band_image(b));
        }
        Tensor::new([1, indices.len(), h, w], out).expect("band selection shape")
    }

    /// Same cube with `f` applied to every value.
    pub fn map_values(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { wavelengths: self.wavelengths.clone(), data: self.data.map(f) }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(20 + 8 * (self.bands() + self.data.len()));
        out.extend_from_slice(CUBE_MAGIC);
        out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
        for d in [self.height(), self.width(), self.bands()] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for w in &self.wavelengths {
            out.extend_from_slice(&w.to_le_bytes());
        }
        for v in self.data.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != CUBE_MAGIC {
            return Err(Error::Format { field: "magic", message: "expected \"HSIC\"".into() });
        }
        let version = r.u32("version")?;
        if version != CUBE_VERSION {
            return Err(Error::Format {
                field: "version",
                message: format!("unsupported version {version}"),
            });
        }
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let b = r.u32("bands")? as usize;
        for (name, v) in [("height", h), ("width", w), ("bands", b)] {
            if v == 0 {
                return Err(Error::Format { field: name, message: "must be positive".into() });
            }
        }
        let wavelengths = (0..b).map(|_| r.f64("wavelengths")).collect::<Result<Vec<_>>>()?;
        if b < 2 {
            return Err(Error::Format {
                field: "bands",
                message: format!("invariant violation: need at least 2 bands, got {b}"),
            });
        }
        check_wavelengths(&wavelengths).map_err(|m| Error::Format {
            field: "wavelengths",
            message: format!("invariant violation: {m}"),
        })?;
        let n = h
            .checked_mul(w)
            .and_then(|v| v.checked_mul(b))
            .ok_or_else(|| Error::Format { field: "payload", message: "size overflow".into() })?;
        if r.remaining() != n * 8 {
            return Err(Error::Format {
                field: "payload",
                message: format!("expected {} bytes of values, found {}", n * 8, r.remaining()),
            });
        }
        let data = (0..n).map(|_| r.f64("payload")).collect::<Result<Vec<_>>>()?;
        Self::new(wavelengths, Tensor::new([h, w, b], data)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format { field, message: "truncated".into() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

pub fn write_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&cube.to_bytes())?;
    Ok(())
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    HsiCube::from_bytes(&fs::read(path)?)
}

/// Ground truth for one scene. Boxes are `[cx, cy, w, h]` normalized to
/// the unit square.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneAnnotation {
    pub image_id: String,
    pub boxes: Vec<[f64; 4]>,
    pub class_ids: Vec<usize>,
}

impl SceneAnnotation {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.boxes.len() != self.class_ids.len() {
            return Err(Error::Invariant(format!(
                "{} boxes but {} class ids",
                self.boxes.len(),
                self.class_ids.len()
            )));
        }
        for (i, b) in self.boxes.iter().enumerate() {
            let [cx, cy, w, h] = *b;
            let inside = w > 0.0
                && h > 0.0
                && cx - w / 2.0 >= -1e-9
                && cy - h / 2.0 >= -1e-9
                && cx + w / 2.0 <= 1.0 + 1e-9
                && cy + h / 2.0 <= 1.0 + 1e-9;
            if !inside {
                return Err(Error::Invariant(format!("box {i} {b:?} leaves the unit square")));
            }
        }
        if let Some(c) = self.class_ids.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Invariant(format!("class id {c} >= {num_classes}")));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// One Gaussian bump of a class reflectance signature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralBump {
    pub center_nm: f64,
    pub width_nm: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSignature {
    pub bumps: Vec<SpectralBump>,
}

impl ClassSignature {
    pub fn at(&self, wavelength_nm: f64) -> f64 {
        self.bumps
            .iter()
            .map(|b| {
                let z = (wavelength_nm - b.center_nm) / b.width_nm;
                b.amplitude * (-0.5 * z * z).exp()
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub wavelength_min_nm: f64,
    pub wavelength_max_nm: f64,
    pub objects: usize,
    pub classes: Vec<ClassSignature>,
    /// Gaussian sensor noise, as a fraction of the unit object amplitude.
    pub noise_sigma: f64,
    pub background_level: f64,
    pub texture_amplitude: f64,
    /// Object half-extent range in pixels (inclusive).
    pub object_radius_px: [usize; 2],
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            bands: 16,
            wavelength_min_nm: 400.0,
            wavelength_max_nm: 1000.0,
            objects: 3,
            classes: vec![
                ClassSignature {
                    bumps: vec![SpectralBump { center_nm: 520.0, width_nm: 60.0, amplitude: 1.0 }],
                },
                ClassSignature {
                    bumps: vec![SpectralBump { center_nm: 880.0, width_nm: 60.0, amplitude: 1.0 }],
                },
            ],
            noise_sigma: 0.01,
            background_level: 0.2,
            texture_amplitude: 0.1,
            object_radius_px: [5, 9],
        }
    }
}

impl SceneSpec {
    pub fn wavelengths(&self) -> Vec<f64> {
        let b = self.bands;
        if b == 1 {
            return vec![self.wavelength_min_nm];
        }
        let step = (self.wavelength_max_nm - self.wavelength_min_nm) / (b - 1) as f64;
        (0..b).map(|i| self.wavelength_min_nm + step * i as f64).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Config { field: format!("scene.{field}"), message })
        };
        if self.height < 8 || self.width < 8 {
            return bad("height", format!("scene must be at least 8x8, got {}x{}", self.height, self.width));
        }
        if self.bands < 2 {
            return bad("bands", format!("need at least 2 bands, got {}", self.bands));
        }
        if self.classes.is_empty() {
            return bad("classes", "at least one class signature required".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma", format!("must be >= 0, got {}", self.noise_sigma));
        }
        let [lo, hi] = self.object_radius_px;
        if lo == 0 || lo > hi || 2 * hi + 1 > self.height.min(self.width) {
            return bad("object_radius_px", format!("invalid radius range {lo}..={hi}"));
        }
        if !(self.wavelength_max_nm > self.wavelength_min_nm) {
            return bad("wavelength_max_nm", "range must be increasing".into());
        }
        check_wavelengths(&self.wavelengths()).or_else(|m| bad("wavelength_min_nm", m))
    }
}

/// A smooth zero-mean, unit-variance random field built from a handful of
/// random plane waves.
fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| {
            let fy = rng.random_range(0.5..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let fx = rng.random_range(0.5..3.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (fy, fx, phase)
        })
        .collect();
    let mut f: Vec<f64> = (0..h * w)
        .map(|p| {
            let (y, x) = ((p / w) as f64 / h as f64, (p % w) as f64 / w as f64);
            waves
                .iter()
                .map(|(fy, fx, ph)| (std::f64::consts::TAU * (fy * y + fx * x) + ph).cos())
                .sum()
        })
        .collect();
    standardize(&mut f);
    f
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    for x in v.iter_mut() {
        *x = (*x - mean) / sd;
    }
}

/// Placed object in pixel units.
struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    class: usize,
}

impl Blob {
    fn iou(&self, o: &Blob) -> f64 {
        let ix = ((self.cx + self.rx).min(o.cx + o.rx) - (self.cx - self.rx).max(o.cx - o.rx)).max(0.0);
        let iy = ((self.cy + self.ry).min(o.cy + o.ry) - (self.cy - self.ry).max(o.cy - o.ry)).max(0.0);
        let inter = ix * iy;
        inter / (4.0 * self.rx * self.ry + 4.0 * o.rx * o.ry - inter)
    }

    /// Flat-topped elliptical footprint in [0, 1].
    fn mask(&self, y: f64, x: f64) -> f64 {
        let r2 = ((x - self.cx) / self.rx).powi(2) + ((y - self.cy) / self.ry).powi(2);
        (-r2.powi(3)).exp()
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 2000;
const MAX_OBJECT_IOU: f64 = 0.1;

/// Generates one scene: a textured background whose spatial pattern drifts
/// from a "visible" texture to an unrelated "infrared" texture with
/// wavelength, opaque objects carrying their class signature, and i.i.d.
/// Gaussian noise.
pub fn gen_synthetic_cube(seed: u64, spec: &SceneSpec) -> Result<(HsiCube, SceneAnnotation)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, b) = (spec.height, spec.width, spec.bands);
    let wavelengths = spec.wavelengths();

    let vis = smooth_field(&mut rng, h, w);
    let mut ir = smooth_field(&mut rng, h, w);
    // Orthogonalize so the two textures are exactly uncorrelated.
    let proj = vis.iter().zip(&ir).map(|(a, b)| a * b).sum::<f64>() / (h * w) as f64;
    for (i, v) in ir.iter_mut().zip(&vis) {
        *i -= proj * v;
    }
    standardize(&mut ir);

    let [rlo, rhi] = spec.object_radius_px;
    let min_area = (4 * rlo * rlo) as f64;
    if spec.objects as f64 * min_area * (1.0 - MAX_OBJECT_IOU) > (h * w) as f64 {
        return Err(Error::Generation(format!(
            "{} objects of radius >= {rlo} px cannot fit in {h}x{w}",
            spec.objects
        )));
    }
    let n_classes = spec.classes.len();
    let class_offset = rng.random_range(0..n_classes);
    let mut blobs: Vec<Blob> = Vec::with_capacity(spec.objects);
    for k in 0..spec.objects {
        let class = (class_offset + k) % n_classes;
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let ry = rng.random_range(rlo..=rhi) as f64;
            let rx = rng.random_range(rlo..=rhi) as f64;
            let cy = rng.random_range(ry..=(h as f64 - ry));
            let cx = rng.random_range(rx..=(w as f64 - rx));
            let cand = Blob { cy, cx, ry, rx, class };
            if blobs.iter().all(|o| cand.iou(o) <= MAX_OBJECT_IOU) {
                blobs.push(cand);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {k} of {} without overlap",
                spec.objects
            )));
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("finite sigma");
    let (wl_lo, wl_hi) = (spec.wavelength_min_nm, spec.wavelength_max_nm);
    // Mixing weights (cos a, sin a) for a in [0, π/2]. The sine is taken
    // from the cosine so that optimized builds cannot fuse the pair into a
    // differently rounded sincos call.
    let mix: Vec<(f64, f64)> = wavelengths
        .iter()
        .map(|l| {
            let c = (FRAC_PI_2 * (l - wl_lo) / (wl_hi - wl_lo)).cos();
            (c, (1.0 - c * c).max(0.0).sqrt())
        })
        .collect();
    let signatures: Vec<Vec<f64>> = spec
        .classes
        .iter()
        .map(|c| wavelengths.iter().map(|&l| c.at(l)).collect())
        .collect();
    let mut data = vec![0.0; h * w * b];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let (mut cover, mut obj) = (0.0f64, None);
            for blob in &blobs {
                let m = blob.mask(py, px);
                if m > cover {
                    cover = m;
                    obj = Some(blob.class);
                }
            }
            for band in 0..b {
                let bg = spec.background_level
                    + spec.texture_amplitude * (mix[band].0 * vis[p] + mix[band].1 * ir[p]);
                let fg = obj.map_or(0.0, |c| spec.background_level + signatures[c][band]);
                let clean = (1.0 - cover) * bg + cover * fg;
                let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data[p * b + band] = clean + n;
            }
        }
    }

    let cube = HsiCube::new(wavelengths, Tensor::new([h, w, b], data)?)?;
    let annotation = SceneAnnotation {
        image_id: format!("synthetic-{seed}"),
        boxes: blobs
            .iter()
            .map(|o| [o.cx / w as f64, o.cy / h as f64, 2.0 * o.rx / w as f64, 2.0 * o.ry / h as f64])
            .collect(),
        class_ids: blobs.iter().map(|o| o.class).collect(),
    };
    Ok((cube, annotation))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cube() -> HsiCube {
        let data = Tensor::from_fn([2, 3, 2], |i| i as f64 * 0.5);
        HsiCube::new(vec![500.0, 900.0], data).unwrap()
    }

    #[test]
    fn cube_constructor_checks_invariants() {
        let data = Tensor::zeros([2, 2, 2]);
        assert!(HsiCube::new(vec![500.0, 500.0], data.clone()).is_err());
        assert!(HsiCube::new(vec![300.0, 500.0], data.clone()).is_err());
        assert!(HsiCube::new(vec![500.0], Tensor::zeros([2, 2, 1])).is_err());
        assert!(HsiCube::new(vec![500.0, 600.0, 700.0], data).is_err());
    }

    #[test]
    fn bytes_header_layout() {
        let bytes = small_cube().to_bytes();
        assert_eq!(&bytes[..4], b"HSIC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 2);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 500.0);
        assert_eq!(bytes.len(), 20 + 16 + 12 * 8);
    }

    #[test]
    fn truncated_payload_names_field() {
        let bytes = small_cube().to_bytes();
        let err = HsiCube::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { field: "payload", .. }), "{err}");
        let err = HsiCube::from_bytes(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::Format { field: "height", .. }), "{err}");
    }

    #[test]
    fn bad_version() {
        let mut bytes = small_cube().to_bytes();
        bytes[4] = 7;
        assert!(matches!(HsiCube::from_bytes(&bytes), Err(Error::Format { field: "version", .. })));
    }

    #[test]
    fn annotation_validation() {
        let mut a = SceneAnnotation {
            image_id: "x".into(),
            boxes: vec![[0.5, 0.5, 0.2, 0.2]],
            class_ids: vec![1],
        };
        assert!(a.validate(2).is_ok());
        assert!(a.validate(1).is_err());
        a.boxes[0] = [0.95, 0.5, 0.2, 0.2];
        assert!(a.validate(2).is_err());
    }

    #[test]
    fn annotation_json_rejects_unknown_keys() {
        let s = r#"{"image_id":"a","boxes":[],"class_ids":[],"extra":1}"#;
        assert!(SceneAnnotation::from_json(s).is_err());
    }

    #[test]
    fn too_many_objects_is_generation_error() {
        let spec = SceneSpec { objects: 40, ..SceneSpec::default() };
        assert!(matches!(gen_synthetic_cube(0, &spec), Err(Error::Generation(_))));
    }
}
