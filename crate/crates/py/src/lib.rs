//! Python bindings: images cross the boundary as PNG bytes or flat float lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use semedit::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use semedit::data::{generate_synthetic, load_all, make_batches, SynthConfig};
use semedit::latent::{EditConfig, RoiId};
use semedit::networks::{AutoencoderParams, DiscriminatorParams, ModelConfig};
use semedit::training::{train_smn, train_smpn, InitWeights, Phase, TrainConfig};
use semedit::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Image { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn roi(name: &str) -> PyResult<RoiId> {
    name.parse().map_err(py_err)
}

/// RGB image in model range, row-major HWC.
#[pyclass(module = "semedit_py", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct Image {
    inner: semedit::image::ImageTensor,
}

#[pymethods]
impl Image {
    #[staticmethod]
    fn from_png(data: &[u8]) -> PyResult<Self> {
        let inner = semedit::image::ImageTensor::from_png_bytes(data, &Default::default()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        let inner = semedit::image::ImageTensor::read_png(&path, &Default::default()).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_values(height: usize, width: usize, values: Vec<f32>) -> PyResult<Self> {
        let inner = semedit::image::ImageTensor::new(height, width, values).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        let (h, w) = self.inner.dims();
        (h, w, 3)
    }

    fn values(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn to_png<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_png_bytes(&Default::default()))
    }

    fn mean_abs_diff(&self, other: &Image) -> PyResult<f64> {
        self.inner.mean_abs_diff(&other.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let (h, w) = self.inner.dims();
        format!("Image({h}x{w})")
    }
}

#[pyclass(module = "semedit_py", frozen)]
pub struct EditResult {
    inner: semedit::pipeline::EditResult,
}

#[pymethods]
impl EditResult {
    #[getter]
    fn edited(&self) -> Image {
        Image { inner: self.inner.edited.clone() }
    }

    #[getter]
    fn global_styled(&self) -> Image {
        Image { inner: self.inner.global_styled.clone() }
    }

    #[getter]
    fn mask(&self) -> Vec<bool> {
        self.inner.mask.data().to_vec()
    }

    #[getter]
    fn matte(&self) -> Vec<f32> {
        self.inner.matte.data.clone()
    }

    #[getter]
    fn encoder_calls(&self) -> usize {
        self.inner.passes.encodes
    }

    #[getter]
    fn decoder_calls(&self) -> usize {
        self.inner.passes.decodes
    }

    /// Largest deviation from `blur(x)` where the edit cannot reach.
    fn locality_leakage(&self, x: &Image) -> f64 {
        semedit::eval::locality_leakage(&x.inner, &self.inner)
    }
}

/// The SMN and SMPN autoencoders used by every edit.
#[pyclass(module = "semedit_py", frozen)]
pub struct Editor {
    smn: AutoencoderParams,
    smpn: AutoencoderParams,
}

#[pymethods]
impl Editor {
    /// Loads `<root>/smn` and `<root>/smpn`.
    #[staticmethod]
    fn load(root: PathBuf) -> PyResult<Self> {
        let smn = load_checkpoint(&root.join("smn")).map_err(py_err)?.autoencoder;
        let smpn = load_checkpoint(&root.join("smpn")).map_err(py_err)?.autoencoder;
        Ok(Self { smn, smpn })
    }

    /// Untrained weights; handy for shape checks.
    #[staticmethod]
    #[pyo3(signature = (image_size, base_channels, seed=0))]
    fn random(image_size: usize, base_channels: usize, seed: u64) -> PyResult<Self> {
        let cfg = ModelConfig::new(image_size, base_channels);
        cfg.validate().map_err(py_err)?;
        Ok(Self { smn: AutoencoderParams::init(&cfg, seed), smpn: AutoencoderParams::init(&cfg, seed.wrapping_add(1)) })
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.smn.config.image_size
    }

    #[pyo3(signature = (image, roi_name, mu=0.0, seed=0))]
    fn edit(&self, py: Python<'_>, image: &Image, roi_name: &str, mu: f64, seed: u64) -> PyResult<EditResult> {
        let cfg = EditConfig::new(roi(roi_name)?, mu, seed).map_err(py_err)?;
        let r = py.detach(|| semedit::pipeline::edit(&self.smn, &self.smpn, &image.inner, &cfg, &self.smpn.config.slice_scheme));
        Ok(EditResult { inner: r.map_err(py_err)? })
    }

    fn swap(&self, py: Python<'_>, image: &Image, style: &Image, roi_name: &str) -> PyResult<EditResult> {
        let roi = roi(roi_name)?;
        let r = py.detach(|| {
            semedit::pipeline::style_swap(&self.smn, &self.smpn, &image.inner, &style.inner, roi, &self.smpn.config.slice_scheme)
        });
        Ok(EditResult { inner: r.map_err(py_err)? })
    }

    #[pyo3(signature = (image, roi_name, mu=1.0, seed=0))]
    fn structure_edit(&self, py: Python<'_>, image: &Image, roi_name: &str, mu: f64, seed: u64) -> PyResult<Image> {
        let roi = roi(roi_name)?;
        let r = py.detach(|| semedit::pipeline::structure_edit(&self.smpn, &image.inner, roi, mu, seed, &self.smpn.config.slice_scheme));
        Ok(Image { inner: r.map_err(py_err)? })
    }

    /// Region name to flat boolean mask.
    fn segment<'py>(&self, py: Python<'py>, image: &Image) -> PyResult<Bound<'py, PyDict>> {
        let out = PyDict::new(py);
        for r in RoiId::ALL {
            let m = semedit::pipeline::predict_roi_mask(&self.smpn, &image.inner, r, &self.smpn.config.slice_scheme).map_err(py_err)?;
            out.set_item(r.name(), m.data().to_vec())?;
        }
        Ok(out)
    }
}

#[pyfunction]
#[pyo3(signature = (out, count, image_size=64, seed=0))]
fn make_synthetic(out: PathBuf, count: usize, image_size: usize, seed: u64) -> PyResult<usize> {
    Ok(generate_synthetic(&SynthConfig::new(count, image_size, seed), &out).map_err(py_err)?.count)
}

/// Trains one phase and writes its checkpoint to `out`. SMPN needs `init`,
/// an SMN checkpoint directory. Returns the per-step reconstruction loss.
#[pyfunction]
#[pyo3(signature = (phase, dataset, out, steps, batch_size=4, seed=0, init=None, image_size=64, base_channels=16))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    phase: &str,
    dataset: PathBuf,
    out: PathBuf,
    steps: usize,
    batch_size: usize,
    seed: u64,
    init: Option<PathBuf>,
    image_size: usize,
    base_channels: usize,
) -> PyResult<Vec<f64>> {
    let phase = match phase {
        "smn" => Phase::Smn,
        "smpn" => Phase::Smpn,
        other => return Err(PyValueError::new_err(format!("unknown phase {other:?}"))),
    };
    py.detach(|| {
        let init = init.map(|p| load_checkpoint(&p)).transpose()?;
        let batches = make_batches(load_all(&dataset)?, batch_size, seed)?;
        let cfg = TrainConfig { batch_size, seed, ..TrainConfig::new(phase, steps) };
        let outcome = match phase {
            Phase::Smn => {
                let weights = match &init {
                    Some(c) => InitWeights::From(&c.autoencoder),
                    None => InitWeights::Fresh(ModelConfig::new(image_size, base_channels)),
                };
                train_smn(batches, &cfg, weights)?
            }
            Phase::Smpn => train_smpn(batches, &cfg, init.as_ref().map(|c| &c.autoencoder))?,
        };
        save_checkpoint(
            &out,
            &outcome.autoencoder,
            &outcome.discriminator,
            &Manifest::new(outcome.autoencoder.config.clone(), phase, steps),
        )?;
        Ok(outcome.log.iter().map(|l| l.l_rec()).collect())
    })
    .map_err(py_err)
}

/// Saves untrained SMN and SMPN checkpoints under `root`.
#[pyfunction]
#[pyo3(signature = (root, image_size, base_channels, seed=0))]
fn save_random(root: PathBuf, image_size: usize, base_channels: usize, seed: u64) -> PyResult<()> {
    let cfg = ModelConfig::new(image_size, base_channels);
    cfg.validate().map_err(py_err)?;
    for (i, (dir, phase)) in [("smn", Phase::Smn), ("smpn", Phase::Smpn)].into_iter().enumerate() {
        let s = seed.wrapping_add(i as u64);
        let m = Manifest::new(cfg.clone(), phase, 0);
        save_checkpoint(&root.join(dir), &AutoencoderParams::init(&cfg, s), &DiscriminatorParams::init(&cfg, s), &m).map_err(py_err)?;
    }
    Ok(())
}

#[pyfunction]
fn roi_names() -> Vec<&'static str> {
    RoiId::ALL.iter().map(|r| r.name()).collect()
}

#[pymodule]
fn semedit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Image>()?;
    m.add_class::<EditResult>()?;
    m.add_class::<Editor>()?;
    m.add_function(wrap_pyfunction!(make_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(save_random, m)?)?;
    m.add_function(wrap_pyfunction!(roi_names, m)?)?;
    Ok(())
}
