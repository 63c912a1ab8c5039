//! Python bindings over `cvq_core`.

use std::path::PathBuf;

use cvq_core::distortion::{self, DistortionClass};
use cvq_core::error::Error;
use cvq_core::eval;
use cvq_core::features::{self, Scale};
use cvq_core::loss::{self, BatchItem, Label, LossConfig, LossMode};
use cvq_core::model;
use cvq_core::trainer;
use cvq_core::video::Fps;
use cvq_core::wavelet::{self, WaveletFamily};
use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::MissingFile(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_family(name: &str) -> PyResult<WaveletFamily> {
    WaveletFamily::ALL
        .into_iter()
        .find(|f| f.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown wavelet family {name:?}")))
}

fn parse_scale(name: &str) -> PyResult<Scale> {
    name.parse().map_err(to_py)
}

fn parse_mode(name: &str) -> PyResult<LossMode> {
    match name {
        "combined" => Ok(LossMode::Combined),
        "synthetic_only" => Ok(LossMode::SyntheticOnly),
        "ugc_only" => Ok(LossMode::UgcOnly),
        _ => Err(PyValueError::new_err(format!("unknown loss mode {name:?}"))),
    }
}

fn parse_label(kind: &str, id: u64) -> PyResult<Label> {
    match kind {
        "synthetic" => Ok(Label::Synthetic(id as usize)),
        "ugc" => Ok(Label::Ugc(id)),
        _ => Err(PyValueError::new_err(format!("unknown label kind {kind:?}"))),
    }
}

/// `(fps, scale, crf)` for a class id; `crf` is None for the uncompressed level.
#[pyfunction]
fn class_triple(class_id: usize) -> PyResult<(u32, usize, Option<u32>)> {
    let c = DistortionClass::from_id(class_id).map_err(to_py)?;
    Ok((c.fps(), c.scale(), c.crf()))
}

#[pyfunction]
fn class_id(fps_index: usize, scale_index: usize, crf_index: usize) -> PyResult<usize> {
    Ok(DistortionClass::new(fps_index, scale_index, crf_index).map_err(to_py)?.class_id())
}

#[pyfunction]
#[pyo3(signature = (num, den=1))]
fn admissible_fps(num: u32, den: u32) -> PyResult<Vec<u32>> {
    distortion::admissible_fps(Fps::new(num, den).map_err(to_py)?).map_err(to_py)
}

#[pyfunction]
fn admissible_scales(width: usize, height: usize) -> PyResult<Vec<usize>> {
    distortion::admissible_scales(width, height).map_err(to_py)
}

/// The eight depth-3 packet leaves in natural order.
#[pyfunction]
fn wpt_forward(signal: Vec<f64>, family: &str) -> PyResult<Vec<Vec<f64>>> {
    wavelet::wpt_forward(&signal, parse_family(family)?).map_err(to_py)
}

#[pyfunction]
fn wpt_inverse(leaves: Vec<Vec<f64>>, family: &str, length: usize) -> PyResult<Vec<f64>> {
    wavelet::wpt_inverse(&leaves, parse_family(family)?, length).map_err(to_py)
}

#[pyfunction]
fn srocc(pred: Vec<f64>, gt: Vec<f64>) -> PyResult<f64> {
    eval::srocc(&pred, &gt).map_err(to_py)
}

/// `(plcc, raw_plcc, beta)` after the four-parameter logistic fit.
#[pyfunction]
fn plcc(pred: Vec<f64>, gt: Vec<f64>) -> PyResult<(f64, f64, [f64; 4])> {
    let fit = eval::plcc_with_logistic(&pred, &gt).map_err(to_py)?;
    Ok((fit.plcc, fit.raw_plcc, fit.beta))
}

#[pyfunction]
fn cosine_sim(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    loss::cosine_sim(&a, &b).map_err(to_py)
}

#[pyfunction]
fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    trainer::lr_schedule(step, total_steps, warmup_steps, base_lr)
}

/// Contrastive batch loss and its gradient per `z`.
///
/// `labels` holds `("synthetic", class_id)` or `("ugc", source_id)` pairs.
#[pyfunction]
#[pyo3(signature = (zs, labels, view_ids, temperature=0.1, mode="combined"))]
fn batch_loss(
    zs: Vec<Vec<f64>>,
    labels: Vec<(String, u64)>,
    view_ids: Vec<usize>,
    temperature: f64,
    mode: &str,
) -> PyResult<(f64, Vec<Vec<f64>>)> {
    if zs.len() != labels.len() || zs.len() != view_ids.len() {
        return Err(PyValueError::new_err("zs, labels and view_ids must have equal length"));
    }
    let batch = zs
        .into_iter()
        .zip(labels)
        .zip(view_ids)
        .map(|((z, (kind, id)), view_id)| Ok(BatchItem { z, label: parse_label(&kind, id)?, view_id }))
        .collect::<PyResult<Vec<_>>>()?;
    let cfg = LossConfig { temperature, mode: parse_mode(mode)? };
    let out = loss::batch_loss(&batch, &cfg).map_err(to_py)?;
    Ok((out.loss, out.grad_z))
}

#[pyclass(name = "Ridge", frozen)]
struct PyRidge(eval::RidgeModel);

#[pymethods]
impl PyRidge {
    #[new]
    fn fit(xs: Vec<Vec<f64>>, y: Vec<f64>, lam: f64) -> PyResult<Self> {
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        Ok(Self(eval::ridge_fit(&rows, &y, lam).map_err(to_py)?))
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.0.weights.clone()
    }

    #[getter]
    fn intercept(&self) -> f64 {
        self.0.intercept
    }

    fn predict(&self, xs: Vec<Vec<f64>>) -> Vec<f64> {
        xs.iter().map(|x| self.0.predict(x)).collect()
    }
}

/// Per-frame feature vectors at one scale.
#[pyclass(name = "FeatureSequence", frozen)]
struct PyFeatures(features::FeatureSequence);

#[pymethods]
impl PyFeatures {
    #[new]
    #[pyo3(signature = (rows, scale="full"))]
    fn new(rows: Vec<Vec<f32>>, scale: &str) -> PyResult<Self> {
        Ok(Self(features::FeatureSequence::from_rows(&rows, parse_scale(scale)?).map_err(to_py)?))
    }

    #[staticmethod]
    #[pyo3(signature = (path, scale="full"))]
    fn load(path: PathBuf, scale: &str) -> PyResult<Self> {
        Ok(Self(features::load_features(path, parse_scale(scale)?).map_err(to_py)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        features::save_features(&self.0, path).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn frames(&self) -> usize {
        self.0.frames()
    }

    #[getter]
    fn scale(&self) -> &'static str {
        self.0.scale.name()
    }

    fn rows(&self) -> Vec<Vec<f32>> {
        (0..self.0.frames()).map(|t| self.0.row(t).to_vec()).collect()
    }
}

/// GRU encoder plus projector head.
#[pyclass(name = "Model", frozen)]
struct PyModel(model::SequenceModel);

#[pymethods]
impl PyModel {
    /// Randomly initialized model seeded by `seed`.
    #[staticmethod]
    #[pyo3(signature = (input_dim, hidden_dim, projector_hidden, output_dim, seed=0))]
    fn init(input_dim: usize, hidden_dim: usize, projector_hidden: usize, output_dim: usize, seed: u64) -> Self {
        let dims = model::ModelDims { input_dim, hidden_dim, projector_hidden, output_dim };
        Self(model::SequenceModel::init(dims, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(model::load_checkpoint(path).map_err(to_py)?))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.0, path).map_err(to_py)
    }

    /// `(input_dim, hidden_dim, projector_hidden, output_dim)`.
    #[getter]
    fn dims(&self) -> (usize, usize, usize, usize) {
        let d = self.0.dims();
        (d.input_dim, d.hidden_dim, d.projector_hidden, d.output_dim)
    }

    /// `(h, z)` for one sequence.
    fn embed(&self, features: &PyFeatures) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let e = self.0.embed(&features.0).map_err(to_py)?;
        Ok((e.h, e.z))
    }

    /// Mean `h` over non-overlapping clips, full scale then half scale.
    fn video_embedding(&self, full: &PyFeatures, half: &PyFeatures, clip_len: usize) -> PyResult<Vec<f64>> {
        eval::video_embedding(&self.0, &full.0, &half.0, clip_len).map_err(to_py)
    }
}

#[pymodule]
fn cvq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(class_triple, m)?)?;
    m.add_function(wrap_pyfunction!(class_id, m)?)?;
    m.add_function(wrap_pyfunction!(admissible_fps, m)?)?;
    m.add_function(wrap_pyfunction!(admissible_scales, m)?)?;
    m.add_function(wrap_pyfunction!(wpt_forward, m)?)?;
    m.add_function(wrap_pyfunction!(wpt_inverse, m)?)?;
    m.add_function(wrap_pyfunction!(srocc, m)?)?;
    m.add_function(wrap_pyfunction!(plcc, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_sim, m)?)?;
    m.add_function(wrap_pyfunction!(lr_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(batch_loss, m)?)?;
    m.add_class::<PyRidge>()?;
    m.add_class::<PyFeatures>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}
