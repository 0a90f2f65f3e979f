//! Python bindings for the detector core.

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use sdcm_core::config::RunConfig;
use sdcm_core::detect::Detection;
use sdcm_core::gradcheck::{run_suite, SuiteOptions};
use sdcm_core::hsi_io::{gen_synthetic_cube, read_cube, write_cube, HsiCube};
use sdcm_core::model::SdcmModel;
use sdcm_core::tensor::Tensor;
use sdcm_core::train::{evaluate_ap, make_scenes, train_toy as core_train_toy, Split};

fn err(e: sdcm_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Run configuration; build from TOML or take the defaults.
#[pyclass(name = "Config", module = "sdcm")]
#[derive(Clone)]
pub struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(text) => RunConfig::from_toml(text).map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(err)
    }

    /// Returns a copy with `key = value` lines applied on top of this config.
    fn with_overrides(&self, toml: &str) -> PyResult<Self> {
        let mut table: toml::Table = self.to_toml()?.parse().map_err(to_py)?;
        let extra: toml::Table = toml.parse().map_err(to_py)?;
        table.extend(extra);
        Self::new(Some(&table.to_string()))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps
    }

    #[getter]
    fn topk_ratio(&self) -> f64 {
        self.inner.topk_ratio
    }

    #[getter]
    fn learning_rate(&self) -> f64 {
        self.inner.learning_rate
    }

    fn __repr__(&self) -> String {
        format!("Config(seed={}, steps={}, topk_ratio={})", self.inner.seed, self.inner.steps, self.inner.topk_ratio)
    }
}

fn to_py(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A hyperspectral cube stored row-major as height × width × bands.
#[pyclass(name = "Cube", module = "sdcm")]
#[derive(Clone)]
pub struct PyCube {
    inner: HsiCube,
}

#[pymethods]
impl PyCube {
    #[new]
    fn new(wavelengths: Vec<f64>, data: Vec<f64>, shape: (usize, usize, usize)) -> PyResult<Self> {
        let (h, w, b) = shape;
        let t = Tensor::new([h, w, b], data).map_err(err)?;
        Ok(Self { inner: HsiCube::new(wavelengths, t).map_err(err)? })
    }

    /// Generates a synthetic scene; returns `(cube, boxes, class_ids)`.
    #[staticmethod]
    #[pyo3(signature = (seed, config = None))]
    fn synthetic(seed: u64, config: Option<&PyConfig>) -> PyResult<(Self, Vec<[f64; 4]>, Vec<usize>)> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        let (cube, ann) = gen_synthetic_cube(seed, &cfg.scene).map_err(err)?;
        Ok((Self { inner: cube }, ann.boxes, ann.class_ids))
    }

    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        Ok(Self { inner: read_cube(path).map_err(err)? })
    }

    fn write(&self, path: &str) -> PyResult<()> {
        write_cube(&self.inner, path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.height(), self.inner.width(), self.inner.bands())
    }

    #[getter]
    fn wavelengths(&self) -> Vec<f64> {
        self.inner.wavelengths().to_vec()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.data().data().to_vec()
    }

    fn band_image(&self, band: usize) -> PyResult<Vec<f64>> {
        if band >= self.inner.bands() {
            return Err(PyValueError::new_err(format!("band {band} out of range")));
        }
        Ok(self.inner.band_image(band))
    }

    fn __repr__(&self) -> String {
        let (h, w, b) = self.shape();
        format!("Cube({h}x{w}x{b})")
    }
}

fn detection_dict<'py>(py: Python<'py>, d: &Detection) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    out.set_item("box", d.bbox.to_vec())?;
    out.set_item("class_id", d.class_id())?;
    out.set_item("class_probs", d.class_probs.clone())?;
    out.set_item("confidence", d.confidence)?;
    Ok(out)
}

/// The full detector with its parameters.
#[pyclass(name = "Model", module = "sdcm")]
pub struct PyModel {
    inner: SdcmModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config = None))]
    fn new(config: Option<&PyConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
        Ok(Self { inner: SdcmModel::new(&cfg).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: SdcmModel::load_checkpoint(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save_checkpoint(path).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyConfig {
        PyConfig { inner: self.inner.config.clone() }
    }

    /// Detections after suppression and score thresholding. With
    /// `raw=True`, one detection per grid cell instead.
    #[pyo3(signature = (cube, raw = false))]
    fn detect<'py>(&self, py: Python<'py>, cube: &PyCube, raw: bool) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let input = self.inner.prepare(&cube.inner).map_err(err)?;
        let (dets, _) = if raw { self.inner.forward(&input) } else { self.inner.detect(&input) }.map_err(err)?;
        dets.iter().map(|d| detection_dict(py, d)).collect()
    }

    /// Feature-map shapes per pipeline stage as `(name, shape, stride)`.
    fn stage_shapes(&self, cube: &PyCube) -> PyResult<Vec<(String, Vec<usize>, Option<usize>)>> {
        let input = self.inner.prepare(&cube.inner).map_err(err)?;
        let (_, trace) = self.inner.forward(&input).map_err(err)?;
        Ok(trace.shapes.into_iter().map(|s| (s.name, s.shape, s.stride)).collect())
    }

    /// AP@0.5 on `count` held-out synthetic scenes.
    #[pyo3(signature = (count = 20))]
    fn evaluate(&self, count: usize) -> PyResult<f64> {
        let scenes = make_scenes(&self.inner.config, Split::Eval, count).map_err(err)?;
        evaluate_ap(&self.inner, &scenes).map_err(err)
    }
}

/// Trains on synthetic scenes; returns the model and the loss curve as
/// `(step, cls, conf, box, total)` tuples.
#[pyfunction]
#[pyo3(signature = (config = None))]
fn train_toy(py: Python<'_>, config: Option<&PyConfig>) -> PyResult<(PyModel, Vec<(usize, f64, f64, f64, f64)>)> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let out = py.allow_threads(|| core_train_toy(&cfg, |_| {})).map_err(err)?;
    let curve = out.curve.iter().map(|r| (r.step, r.loss_cls, r.loss_conf, r.loss_box, r.loss_total)).collect();
    Ok((PyModel { inner: out.model }, curve))
}

/// Min-max normalized per-band importance of a cube.
#[pyfunction]
#[pyo3(signature = (cube, lam = sdcm_core::sgg::DEFAULT_LAMBDA))]
fn band_importance(cube: &PyCube, lam: f64) -> PyResult<Vec<f64>> {
    Ok(sdcm_core::sgg::band_importance(&cube.inner, lam).map_err(err)?.normalized)
}

/// Per-element energy of a `(batch, channels, height, width)` array.
#[pyfunction]
#[pyo3(signature = (values, shape, lam = sdcm_core::sgg::DEFAULT_LAMBDA))]
fn energy_map(values: Vec<f64>, shape: (usize, usize, usize, usize), lam: f64) -> PyResult<Vec<f64>> {
    let (n, c, h, w) = shape;
    let x = Tensor::new([n, c, h, w], values).map_err(err)?;
    Ok(sdcm_core::sgg::energy_map(&x, lam).map_err(err)?.values.data().to_vec())
}

/// Multiply-accumulate count of one attention call, next to the closed forms.
#[pyfunction]
fn flops_cmatt<'py>(py: Python<'py>, n_hat: usize, c: usize, k: f64) -> PyResult<Bound<'py, PyDict>> {
    let f = sdcm_core::scl::flops_cmatt(n_hat, c, k).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("measured", f.measured)?;
    out.set_item("formula_topk", f.formula_topk)?;
    out.set_item("formula_full", f.formula_full)?;
    Ok(out)
}

#[pyfunction]
fn topk_count(k: f64, n: usize) -> usize {
    sdcm_core::scl::topk_count(k, n)
}

#[pyfunction]
fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    sdcm_core::detect::iou(&a, &b)
}

/// Finite-difference gradient checks; returns `(op, worst error, passed)`.
#[pyfunction]
#[pyo3(signature = (seeds = 20, only = None))]
fn grad_check(py: Python<'_>, seeds: usize, only: Option<Vec<String>>) -> PyResult<Vec<(String, f64, bool)>> {
    let opts = SuiteOptions { seeds, only, ..SuiteOptions::default() };
    let reports = py.allow_threads(|| run_suite(&opts)).map_err(err)?;
    Ok(reports.iter().map(|r| (r.op.to_string(), r.worst_relative_error, r.passed())).collect())
}

#[pymodule]
fn sdcm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCube>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_toy, m)?)?;
    m.add_function(wrap_pyfunction!(band_importance, m)?)?;
    m.add_function(wrap_pyfunction!(energy_map, m)?)?;
    m.add_function(wrap_pyfunction!(flops_cmatt, m)?)?;
    m.add_function(wrap_pyfunction!(topk_count, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}
