//! Python bindings. Images cross the boundary as NumPy arrays in `N×H×W×C`
//! (float32 in `[0, 1]`) or `H×W×3` (uint8) layout; masks as `H×W` arrays.

use std::collections::BTreeMap;
use std::path::PathBuf;

use numpy::ndarray::{Array2, Array3, Array4};
use numpy::{IntoPyArray, PyArray2, PyArray3, PyArray4, PyReadonlyArray2, PyReadonlyArray3, PyReadonlyArray4, PyUntypedArrayMethods};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use stack_unet::checkpoint::{self, KEY_RESOLUTION};
use stack_unet::data::{grouped_split as core_grouped_split, DatasetManifest, SampleRecord, Split};
use stack_unet::metrics::{self, BinaryMask, ProbabilityMap};
use stack_unet::model::{BlockKind, BlockSpec, CascadeSpec, StackUNet};
use stack_unet::preprocess::{self, ClaheMode, ClaheParams};
use stack_unet::tensor::Tensor;

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn prob_map(a: &PyReadonlyArray2<'_, f64>) -> PyResult<ProbabilityMap> {
    let [h, w] = [a.shape()[0], a.shape()[1]];
    ProbabilityMap::new(h, w, a.as_array().iter().copied().collect()).map_err(err)
}

fn binary_mask(a: &PyReadonlyArray2<'_, bool>) -> PyResult<BinaryMask> {
    let [h, w] = [a.shape()[0], a.shape()[1]];
    BinaryMask::new(h, w, a.as_array().iter().copied().collect()).map_err(err)
}

/// A Stack-U-Net cascade with its weights.
#[pyclass(name = "StackUNet", module = "stack_unet_py")]
struct PyStackUNet {
    inner: StackUNet,
}

#[pymethods]
impl PyStackUNet {
    #[new]
    #[pyo3(signature = (n_blocks=15, kind="unet", depth=4, base_channels=32, long_skip=true, input_channels=3, batch_norm=true, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_blocks: usize,
        kind: &str,
        depth: usize,
        base_channels: usize,
        long_skip: bool,
        input_channels: usize,
        batch_norm: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let kind: BlockKind = kind.parse().map_err(err)?;
        let spec = CascadeSpec {
            n_blocks,
            block: BlockSpec { kind, depth, base_channels, batch_norm, ..BlockSpec::default() },
            long_skip,
            input_channels,
            ..CascadeSpec::default()
        };
        Ok(Self { inner: StackUNet::new(spec, seed).map_err(err)? })
    }

    /// Inference on an `N×H×W×C` float32 batch; returns `N×H×W×1` probabilities.
    fn forward<'py>(&self, py: Python<'py>, x: PyReadonlyArray4<'py, f32>) -> PyResult<Bound<'py, PyArray4<f32>>> {
        let v = x.as_array();
        let (n, h, w, c) = v.dim();
        let mut data = vec![0.0f32; n * c * h * w];
        for ((i, y, xx, ch), &val) in v.indexed_iter() {
            data[((i * c + ch) * h + y) * w + xx] = val;
        }
        let input = Tensor::from_vec([n, c, h, w], data);
        let out = py.detach(|| self.inner.forward(&input)).map_err(err)?;
        let arr = Array4::from_shape_vec((n, h, w, 1), out.into_vec()).map_err(err)?;
        Ok(arr.into_pyarray(py))
    }

    /// `{"per_block": [...], "total": int}` over trainable parameters.
    fn count_parameters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.inner.count_parameters();
        let d = PyDict::new(py);
        d.set_item("per_block", c.per_block)?;
        d.set_item("total", c.total)?;
        Ok(d)
    }

    fn block_input_channels(&self) -> Vec<usize> {
        self.inner.block_input_channels()
    }

    #[getter]
    fn n_blocks(&self) -> usize {
        self.inner.spec().n_blocks
    }

    #[getter]
    fn spec_toml(&self) -> String {
        self.inner.spec().to_toml()
    }

    /// Saves a checkpoint; `resolution` is `(height, width)` used for training.
    #[pyo3(signature = (path, resolution=None))]
    fn save(&self, path: PathBuf, resolution: Option<(usize, usize)>) -> PyResult<()> {
        let mut extra = BTreeMap::new();
        if let Some((h, w)) = resolution {
            extra.insert(KEY_RESOLUTION.to_string(), format!("{h}x{w}"));
        }
        checkpoint::save(&path, &self.inner, &extra).map_err(err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: checkpoint::load(&path).map_err(err)?.model })
    }
}

#[pyfunction]
#[pyo3(signature = (a, b, eps=1.0))]
fn soft_dice(a: PyReadonlyArray2<'_, f64>, b: PyReadonlyArray2<'_, bool>, eps: f64) -> PyResult<f64> {
    metrics::soft_dice(&prob_map(&a)?, &binary_mask(&b)?, eps).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, eps=1.0))]
fn log_dice_loss(a: PyReadonlyArray2<'_, f64>, b: PyReadonlyArray2<'_, bool>, eps: f64) -> PyResult<f64> {
    metrics::log_dice_loss(&prob_map(&a)?, &binary_mask(&b)?, eps).map_err(err)
}

#[pyfunction]
fn binary_dice(a: PyReadonlyArray2<'_, bool>, b: PyReadonlyArray2<'_, bool>) -> PyResult<f64> {
    metrics::binary_dice(&binary_mask(&a)?, &binary_mask(&b)?).map_err(err)
}

#[pyfunction]
fn iou(a: PyReadonlyArray2<'_, bool>, b: PyReadonlyArray2<'_, bool>) -> PyResult<f64> {
    metrics::iou(&binary_mask(&a)?, &binary_mask(&b)?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, threshold=0.5))]
fn binarize<'py>(py: Python<'py>, a: PyReadonlyArray2<'py, f64>, threshold: f64) -> PyResult<Bound<'py, PyArray2<bool>>> {
    let m = metrics::binarize(&prob_map(&a)?, threshold);
    let arr = Array2::from_shape_vec(m.dims(), m.values().to_vec()).map_err(err)?;
    Ok(arr.into_pyarray(py))
}

/// `{"disc_height", "cup_height", "cdr", "glaucoma_suspect"}`.
#[pyfunction]
#[pyo3(signature = (disc, cup, threshold=metrics::GLAUCOMA_CDR_THRESHOLD))]
fn cup_to_disc_ratio<'py>(
    py: Python<'py>,
    disc: PyReadonlyArray2<'py, bool>,
    cup: PyReadonlyArray2<'py, bool>,
    threshold: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let r = metrics::cup_to_disc_ratio(&binary_mask(&disc)?, &binary_mask(&cup)?, threshold).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("disc_height", r.disc_height)?;
    d.set_item("cup_height", r.cup_height)?;
    d.set_item("cdr", r.cdr)?;
    d.set_item("glaucoma_suspect", r.glaucoma_suspect)?;
    Ok(d)
}

/// CLAHE on an `H×W×3` uint8 image.
#[pyfunction]
#[pyo3(signature = (image, clip_limit=2.0, tile_grid=(8, 8), per_channel=false))]
fn clahe<'py>(
    py: Python<'py>,
    image: PyReadonlyArray3<'py, u8>,
    clip_limit: f64,
    tile_grid: (usize, usize),
    per_channel: bool,
) -> PyResult<Bound<'py, PyArray3<u8>>> {
    let v = image.as_array();
    let (h, w, c) = v.dim();
    if c != 3 {
        return Err(err(format!("expected H×W×3, got {h}×{w}×{c}")));
    }
    let raw: Vec<u8> = v.iter().copied().collect();
    let rgb = image::RgbImage::from_raw(w as u32, h as u32, raw).ok_or_else(|| err("image buffer size mismatch"))?;
    let mode = if per_channel { ClaheMode::PerChannel } else { ClaheMode::Lightness };
    let out = py.detach(|| preprocess::clahe(&rgb, &ClaheParams { clip_limit, tile_grid, mode }));
    let arr = Array3::from_shape_vec((h, w, 3), out.into_raw()).map_err(err)?;
    Ok(arr.into_pyarray(py))
}

/// Person-grouped train/val assignment: one `"train"`/`"val"` per entry.
#[pyfunction]
#[pyo3(signature = (person_ids, val_fraction=0.2, seed=0))]
fn grouped_split(person_ids: Vec<String>, val_fraction: f64, seed: u64) -> PyResult<Vec<String>> {
    let records = person_ids
        .into_iter()
        .enumerate()
        .map(|(i, person_id)| SampleRecord {
            image_path: format!("{i}"),
            disc_mask_paths: Vec::new(),
            cup_mask_paths: Vec::new(),
            person_id,
            dataset_tag: String::new(),
            split: None,
        })
        .collect();
    let split = core_grouped_split(&DatasetManifest::new(".", records), val_fraction, seed).map_err(err)?;
    Ok(split.records.iter().map(|r| r.split.unwrap_or(Split::Train).to_string()).collect())
}

#[pymodule]
fn stack_unet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyStackUNet>()?;
    m.add_function(wrap_pyfunction!(soft_dice, m)?)?;
    m.add_function(wrap_pyfunction!(log_dice_loss, m)?)?;
    m.add_function(wrap_pyfunction!(binary_dice, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(binarize, m)?)?;
    m.add_function(wrap_pyfunction!(cup_to_disc_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(clahe, m)?)?;
    m.add_function(wrap_pyfunction!(grouped_split, m)?)?;
    Ok(())
}
