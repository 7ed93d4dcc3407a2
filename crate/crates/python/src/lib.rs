//! Python bindings. Images cross the boundary as `float64` arrays of shape
//! `(height, width, 3)` with values in `[0, 1]`; masks as `bool` arrays of
//! shape `(height, width)`.

use std::path::PathBuf;

use numpy::ndarray::{Array2, Array3};
use numpy::{Complex64, IntoPyArray, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use retarget::checkpoint::{load_checkpoint, save_generator, Metadata};
use retarget::dataset::{load_dataset_with_canvas, ObjectAnnotation, ProviderRegistry, DEFAULT_CANVAS};
use retarget::eval;
use retarget::ffc;
use retarget::generator::{init_generator, GeneratorConfig};
use retarget::inference::{prepare_input, proportional_spec, retarget};
use retarget::mask::RetargetSpec;
use retarget::raster::{BinaryMask, ImageTensor, Rect};
use retarget::seam::seam_retarget;
use retarget::tensor::Tensor;
use retarget::trainer::{init_train_state, run_training, TrainConfig};
use retarget::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(format!("{}: {e}", e.module())),
        _ => PyValueError::new_err(format!("{}: {e}", e.module())),
    }
}

fn to_image(a: &PyReadonlyArray3<'_, f64>) -> PyResult<ImageTensor> {
    let a = a.as_array();
    let (h, w, c) = a.dim();
    if c != 3 {
        return Err(PyValueError::new_err(format!("expected shape (height, width, 3), got ({h}, {w}, {c})")));
    }
    Ok(ImageTensor::from_fn(3, h, w, |ch, y, x| a[[y, x, ch]]))
}

fn from_image<'py>(py: Python<'py>, img: &ImageTensor) -> Bound<'py, PyArray3<f64>> {
    let (h, w) = img.dims();
    Array3::from_shape_fn((h, w, img.channels()), |(y, x, c)| img.get(c, y, x)).into_pyarray(py)
}

fn to_mask(m: &PyReadonlyArray2<'_, bool>) -> PyResult<BinaryMask> {
    let m = m.as_array();
    let (h, w) = m.dim();
    Ok(BinaryMask::from_fn(h, w, |y, x| m[[y, x]]))
}

fn to_rect(r: (usize, usize, usize, usize)) -> Rect {
    Rect::new(r.0, r.1, r.2, r.3)
}

fn annotation(image: &ImageTensor, bbox: Option<(usize, usize, usize, usize)>, mask: Option<PyReadonlyArray2<'_, bool>>) -> PyResult<ObjectAnnotation> {
    let (h, w) = image.dims();
    match (bbox, mask) {
        (Some(b), None) => ObjectAnnotation::from_bbox(h, w, to_rect(b)).map_err(py_err),
        (None, Some(m)) => ObjectAnnotation::from_segmentation(to_mask(&m)?).map_err(py_err),
        _ => Err(PyValueError::new_err("pass exactly one of bbox=(left, top, width, height) or mask=")),
    }
}

/// Trained or freshly initialized generator.
#[pyclass(unsendable)]
struct Generator {
    inner: retarget::generator::Generator,
    canvas: usize,
}

#[pymethods]
impl Generator {
    /// Loads the generator of a training or generator-only checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = load_checkpoint(&path).map_err(py_err)?;
        let canvas = ckpt.train.as_ref().map_or(DEFAULT_CANVAS, |t| t.canvas);
        Ok(Generator { inner: ckpt.generator, canvas })
    }

    /// Random initialization.
    #[new]
    #[pyo3(signature = (seed=0, base_width=64, max_width=256, n_down=3, n_residual=9, global_ratio=0.75, canvas=DEFAULT_CANVAS))]
    fn new(seed: u64, base_width: usize, max_width: usize, n_down: usize, n_residual: usize, global_ratio: f64, canvas: usize) -> PyResult<Self> {
        let cfg = GeneratorConfig { base_width, max_width, n_down, n_up: n_down, n_residual, global_ratio, ..GeneratorConfig::default() };
        Ok(Generator { inner: init_generator(cfg, seed).map_err(py_err)?, canvas })
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Canvas side used when `retarget` is called without one.
    #[getter]
    fn canvas(&self) -> usize {
        self.canvas
    }

    /// Hex digest of the parameter values.
    fn param_hash(&self) -> String {
        self.inner.params.hash()
    }

    /// Writes a generator-only checkpoint.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        let metadata = Metadata {
            step: 0,
            epoch: 0,
            seed: 0,
            generator_params: self.inner.param_count(),
            discriminator_params: None,
            adam_steps_generator: None,
            adam_steps_discriminator: None,
        };
        save_generator(&self.inner, metadata, &path).map_err(py_err)
    }

    /// Retargets `image` to `width x height`. The object is given by `bbox`
    /// or `mask`; `object_rect` places it on the output, by default
    /// proportionally.
    #[pyo3(signature = (image, width, height, bbox=None, mask=None, object_rect=None, canvas=None))]
    #[allow(clippy::too_many_arguments)]
    fn retarget<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f64>,
        width: usize,
        height: usize,
        bbox: Option<(usize, usize, usize, usize)>,
        mask: Option<PyReadonlyArray2<'py, bool>>,
        object_rect: Option<(usize, usize, usize, usize)>,
        canvas: Option<usize>,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let img = to_image(&image)?;
        let ann = annotation(&img, bbox, mask)?;
        let spec = match object_rect {
            Some(r) => RetargetSpec::new(width, height, to_rect(r)),
            None => proportional_spec(img.dims(), ann.bbox, width, height).map_err(py_err)?,
        };
        let out = retarget(&img, &ann, &spec, &self.inner, canvas.unwrap_or(self.canvas)).map_err(py_err)?;
        Ok(from_image(py, &out))
    }

    /// Six-channel model input `(canvas, canvas, 6)` for a request.
    #[pyo3(signature = (image, width, height, object_rect, bbox=None, mask=None, canvas=None))]
    #[allow(clippy::too_many_arguments)]
    fn model_input<'py>(
        &self,
        py: Python<'py>,
        image: PyReadonlyArray3<'py, f64>,
        width: usize,
        height: usize,
        object_rect: (usize, usize, usize, usize),
        bbox: Option<(usize, usize, usize, usize)>,
        mask: Option<PyReadonlyArray2<'py, bool>>,
        canvas: Option<usize>,
    ) -> PyResult<Bound<'py, PyArray3<f64>>> {
        let img = to_image(&image)?;
        let ann = annotation(&img, bbox, mask)?;
        let spec = RetargetSpec::new(width, height, to_rect(object_rect));
        let p = prepare_input(&img, &ann, &spec, canvas.unwrap_or(self.canvas)).map_err(py_err)?;
        Ok(from_image(py, &p.model_input))
    }
}

/// Seam-carving baseline.
#[pyfunction]
fn seam_carve<'py>(py: Python<'py>, image: PyReadonlyArray3<'py, f64>, width: usize, height: usize) -> PyResult<Bound<'py, PyArray3<f64>>> {
    let out = seam_retarget(&to_image(&image)?, width, height).map_err(py_err)?;
    Ok(from_image(py, &out))
}

#[pyfunction]
fn psnr(a: PyReadonlyArray3<'_, f64>, b: PyReadonlyArray3<'_, f64>) -> PyResult<f64> {
    eval::psnr(&to_image(&a)?, &to_image(&b)?).map_err(py_err)
}

#[pyfunction]
fn ssim(a: PyReadonlyArray3<'_, f64>, b: PyReadonlyArray3<'_, f64>) -> PyResult<f64> {
    eval::ssim(&to_image(&a)?, &to_image(&b)?).map_err(py_err)
}

/// Half spectrum `(C, H, W // 2 + 1)` of a real `(C, H, W)` array.
#[pyfunction]
fn real_fft2d<'py>(py: Python<'py>, x: PyReadonlyArray3<'py, f64>) -> PyResult<Bound<'py, PyArray3<Complex64>>> {
    let a = x.as_array();
    let (c, h, w) = a.dim();
    let t = Tensor::new(&[c, h, w], a.iter().copied().collect());
    let spec = ffc::real_fft2d(&t).map_err(py_err)?;
    let [c, h, bins] = spec.shape();
    Ok(Array3::from_shape_vec((c, h, bins), spec.data).expect("spectrum shape").into_pyarray(py))
}

/// Segmentation-free helper: boolean mask of `bbox` on a `height x width` image.
#[pyfunction]
fn box_mask(py: Python<'_>, height: usize, width: usize, bbox: (usize, usize, usize, usize)) -> Bound<'_, PyArray2<bool>> {
    let m = BinaryMask::from_rect(height, width, to_rect(bbox));
    Array2::from_shape_fn((height, width), |(y, x)| m.get(y, x)).into_pyarray(py)
}

/// Trains on a dataset directory. `config` holds `key = value` lines as in
/// `retarget train --config`; returns the last checkpoint path.
#[pyfunction]
#[pyo3(signature = (config="", max_steps=None))]
fn train(config: &str, max_steps: Option<u64>) -> PyResult<PathBuf> {
    let mut cfg = TrainConfig::default();
    cfg.apply_text(config).map_err(py_err)?;
    let index = load_dataset_with_canvas(PathBuf::from(&cfg.dataset_root).as_path(), &cfg.provider, &ProviderRegistry::new(), cfg.canvas)
        .map_err(py_err)?;
    let state = init_train_state(cfg).map_err(py_err)?;
    Ok(run_training(&index, state, max_steps).map_err(py_err)?.0)
}

#[pymodule]
fn pyretarget(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Generator>()?;
    m.add_function(wrap_pyfunction!(seam_carve, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(real_fft2d, m)?)?;
    m.add_function(wrap_pyfunction!(box_mask, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
