//! Python module `ctmr`: phantoms, settings, models, training, losses and metrics.
//!
//! Images cross the boundary as lists of rows of floats.

// The pyo3 0.22 function macros trip this lint on every `PyResult` return.
#![allow(clippy::useless_conversion)]

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ctmr_core::config::Settings;
use ctmr_core::losses::{self, GeneratorTerms, LossWeights, SsimConstants};
use ctmr_core::metrics::{self, EmbeddingExtractor, EvalOptions};
use ctmr_core::networks::{Direction, ModelBundle};
use ctmr_core::phantom;
use ctmr_core::pipeline::UnpairedLoader;
use ctmr_core::{report, trainer, volume, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

type Rows = Vec<Vec<f64>>;

fn to_array(rows: &Rows) -> PyResult<Array2<f64>> {
    let h = rows.len();
    let w = rows.first().map_or(0, Vec::len);
    if h == 0 || w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(PyValueError::new_err("image must be a non-empty list of equal-length rows"));
    }
    Ok(Array2::from_shape_vec((h, w), rows.concat()).expect("checked"))
}

fn to_rows(a: &Array2<f64>) -> Rows {
    a.outer_iter().map(|r| r.to_vec()).collect()
}

fn to_tensor(rows: &Rows) -> PyResult<Tensor> {
    let a = to_array(rows)?;
    let (h, w) = a.dim();
    Tensor::from_image(h, w, a.into_raw_vec_and_offset().0).map_err(py_err)
}

#[pyclass(name = "PhantomSpec")]
#[derive(Clone)]
struct PyPhantomSpec {
    inner: phantom::PhantomSpec,
}

#[pymethods]
impl PyPhantomSpec {
    #[new]
    #[pyo3(signature = (image_size=256, n_structures=4, noise_sigma=0.02, seed=0))]
    fn new(image_size: usize, n_structures: usize, noise_sigma: f64, seed: u64) -> PyResult<Self> {
        let inner = phantom::PhantomSpec {
            image_size,
            n_structures,
            noise_sigma,
            seed,
            ..Default::default()
        };
        inner.validate().map_err(py_err)?;
        Ok(PyPhantomSpec { inner })
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.inner)
    }
}

/// Returns a dict with `id`, `ct`, `mr` and `labels`.
#[pyfunction]
fn generate_phantom<'py>(py: Python<'py>, spec: &PyPhantomSpec, index: u64) -> PyResult<Bound<'py, PyDict>> {
    let p = phantom::generate_phantom(&spec.inner, index).map_err(py_err)?;
    let d = PyDict::new_bound(py);
    d.set_item("id", p.id)?;
    d.set_item("ct", to_rows(&p.ct_image))?;
    d.set_item("mr", to_rows(&p.mr_image))?;
    let labels: Vec<Vec<u8>> = p.structure_map.outer_iter().map(|r| r.to_vec()).collect();
    d.set_item("labels", labels)?;
    Ok(d)
}

/// Writes the dataset and returns the manifest as (id, ct_path, mr_path) tuples.
#[pyfunction]
fn export_phantom_dataset(spec: &PyPhantomSpec, n: usize, out_dir: PathBuf) -> PyResult<Vec<(String, String, String)>> {
    let entries = phantom::export_phantom_dataset(&spec.inner, n, &out_dir).map_err(py_err)?;
    Ok(entries
        .into_iter()
        .map(|e| (e.id, e.ct_path.display().to_string(), e.mr_path.display().to_string()))
        .collect())
}

#[pyclass(name = "Settings")]
#[derive(Clone)]
struct PySettings {
    inner: Settings,
}

#[pymethods]
impl PySettings {
    /// Defaults overlaid with an optional flat `key = value` text.
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PySettings {
            inner: Settings::default().apply_toml(text).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.train.seed
    }

    fn __repr__(&self) -> String {
        format!("Settings(\n{})", self.inner.to_toml())
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    bundle: ModelBundle,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized networks for `settings`.
    #[staticmethod]
    fn build(settings: &PySettings) -> PyResult<Self> {
        let s = &settings.inner;
        Ok(PyModel {
            bundle: ModelBundle::build(s.generator, s.discriminator, s.train.seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let ck = trainer::load_checkpoint(&checkpoint).map_err(py_err)?;
        Ok(PyModel { bundle: ck.state.bundle })
    }

    /// Swaps both generators for the identity map.
    fn identity(&self) -> Self {
        PyModel {
            bundle: self.bundle.clone().with_identity_generators(),
        }
    }

    /// Translates one [-1, 1] image; `direction` is "ct2mr" or "mr2ct".
    fn translate(&self, image: Rows, direction: &str) -> PyResult<Rows> {
        let d = Direction::parse(direction).map_err(py_err)?;
        let x = to_tensor(&image)?;
        let y = self.bundle.generator_to(d.target()).translate(&x).map_err(py_err)?;
        let w = image[0].len();
        Ok(y.data().chunks(w).map(<[f64]>::to_vec).collect())
    }

    /// Parameter counts keyed by network name.
    fn num_params<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new_bound(py);
        d.set_item("g_ct", self.bundle.g_ct.num_params())?;
        d.set_item("g_mr", self.bundle.g_mr.num_params())?;
        d.set_item("d_ct", self.bundle.d_ct.num_params())?;
        d.set_item("d_mr", self.bundle.d_mr.num_params())?;
        Ok(d)
    }
}

/// Trains and returns the per-step loss rows as dicts.
#[pyfunction]
#[pyo3(signature = (settings, ct_dir, mr_dir, out_dir, resume=None))]
fn train<'py>(
    py: Python<'py>,
    settings: &PySettings,
    ct_dir: PathBuf,
    mr_dir: PathBuf,
    out_dir: PathBuf,
    resume: Option<PathBuf>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let s = &settings.inner;
    let resume = resume.map(|p| trainer::load_checkpoint(&p)).transpose().map_err(py_err)?;
    let loader = UnpairedLoader::from_dirs(&ct_dir, &mr_dir, s.preprocess.clone()).map_err(py_err)?;
    let outcome = py
        .allow_threads(|| trainer::fit(s, &loader, &out_dir, resume))
        .map_err(py_err)?;
    outcome
        .log
        .iter()
        .map(|(step, r)| {
            let d = PyDict::new_bound(py);
            d.set_item("step", step)?;
            for (k, v) in [
                ("gan", r.gan),
                ("cycle", r.cycle),
                ("identity", r.identity),
                ("ssim", r.ssim),
                ("generator_total", r.generator_total),
                ("dis_ct", r.dis_ct),
                ("dis_mr", r.dis_mr),
            ] {
                d.set_item(k, v)?;
            }
            Ok(d)
        })
        .collect()
}

/// Evaluates named checkpoints, writes the report files and returns the metric rows.
#[pyfunction]
#[pyo3(signature = (checkpoints, ct_dir, mr_dir, out_dir, settings=None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoints: Vec<(String, PathBuf)>,
    ct_dir: PathBuf,
    mr_dir: PathBuf,
    out_dir: PathBuf,
    settings: Option<&PySettings>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let first = checkpoints
        .first()
        .ok_or_else(|| PyValueError::new_err("at least one checkpoint is required"))?;
    let s = match settings {
        Some(s) => s.inner.clone(),
        None => trainer::load_checkpoint(&first.1).map_err(py_err)?.settings,
    };
    let load = |dir: &PathBuf, m| -> ctmr_core::Result<Vec<_>> {
        volume::list_volumes(dir)?.iter().map(|p| volume::load_volume(p, m)).collect()
    };
    let ct = load(&ct_dir, volume::Modality::Ct).map_err(py_err)?;
    let mr = load(&mr_dir, volume::Modality::Mr).map_err(py_err)?;
    let ex = EmbeddingExtractor::default_projection();
    let opts = EvalOptions {
        ssim_constants: s.ssim_constants,
        ..EvalOptions::default()
    };
    let (rows, failures) =
        report::evaluate_checkpoints(&checkpoints, &ct, &mr, &s.preprocess, &ex, &opts).map_err(py_err)?;
    if let Some((name, e)) = failures.into_iter().next() {
        return Err(PyRuntimeError::new_err(format!("model {name}: {e}")));
    }
    report::write_report(&rows, &out_dir).map_err(py_err)?;
    let mut out = Vec::new();
    for m in &rows {
        for r in &m.evaluation.reports {
            let d = PyDict::new_bound(py);
            d.set_item("model", &m.name)?;
            d.set_item("direction", r.direction.label())?;
            d.set_item("fid", r.fid)?;
            d.set_item("ssim", r.ssim)?;
            d.set_item("mi", r.mi)?;
            d.set_item("pixacc", r.pixacc)?;
            d.set_item("n_slices", r.n_slices)?;
            out.push(d);
        }
    }
    Ok(out)
}

#[pyfunction]
fn ssim_index(a: Rows, b: Rows) -> PyResult<f64> {
    metrics::ssim_index(&to_array(&a)?, &to_array(&b)?, SsimConstants::default()).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, bins=metrics::DEFAULT_MI_BINS))]
fn mutual_information(a: Rows, b: Rows, bins: usize) -> PyResult<f64> {
    metrics::mutual_information(&to_array(&a)?, &to_array(&b)?, bins).map_err(py_err)
}

#[pyfunction]
fn pixacc(a: Rows, b: Rows) -> PyResult<f64> {
    metrics::pixacc(&to_array(&a)?, &to_array(&b)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (generated, real, seed=0))]
fn fid_similarity(generated: Vec<Rows>, real: Vec<Rows>, seed: u64) -> PyResult<f64> {
    let g = generated.iter().map(to_array).collect::<PyResult<Vec<_>>>()?;
    let r = real.iter().map(to_array).collect::<PyResult<Vec<_>>>()?;
    let ex = EmbeddingExtractor::fixed_random_projection(seed, 256).map_err(py_err)?;
    metrics::fid_similarity(&g, &r, &ex, seed).map_err(py_err)
}

#[pyfunction]
fn gan_loss(scores_mr: Rows, scores_ct: Rows) -> PyResult<f64> {
    Ok(losses::gan_loss(&to_tensor(&scores_mr)?, &to_tensor(&scores_ct)?))
}

#[pyfunction]
fn cycle_loss(x_mr: Rows, recovered_mr: Rows, x_ct: Rows, recovered_ct: Rows) -> PyResult<f64> {
    losses::cycle_loss(&to_tensor(&x_mr)?, &to_tensor(&recovered_mr)?, &to_tensor(&x_ct)?, &to_tensor(&recovered_ct)?)
        .map_err(py_err)
}

#[pyfunction]
fn identity_loss(g_ct_on_ct: Rows, x_ct: Rows, g_mr_on_mr: Rows, x_mr: Rows) -> PyResult<f64> {
    losses::identity_loss(&to_tensor(&g_ct_on_ct)?, &to_tensor(&x_ct)?, &to_tensor(&g_mr_on_mr)?, &to_tensor(&x_mr)?)
        .map_err(py_err)
}

#[pyfunction]
fn ssim_loss(x: Rows, y: Rows) -> PyResult<f64> {
    losses::ssim_loss(&to_tensor(&x)?, &to_tensor(&y)?, SsimConstants::default()).map_err(py_err)
}

#[pyfunction]
fn discriminator_loss(on_real: Rows, on_translated: Rows) -> PyResult<f64> {
    Ok(losses::discriminator_loss(&to_tensor(&on_real)?, &to_tensor(&on_translated)?))
}

/// `parts` is (gan, cycle, identity, ssim); `weights` is (cycle, identity, ssim).
#[pyfunction]
#[pyo3(signature = (parts, weights=(10.0, 5.0, 1.0)))]
fn generator_total_loss(parts: (f64, f64, f64, f64), weights: (f64, f64, f64)) -> PyResult<f64> {
    let w = LossWeights {
        lambda_cyc: weights.0,
        lambda_id: weights.1,
        lambda_ssim: weights.2,
    };
    w.validate().map_err(py_err)?;
    Ok(losses::generator_total_loss(
        GeneratorTerms {
            gan: parts.0,
            cycle: parts.1,
            identity: parts.2,
            ssim: parts.3,
        },
        w,
    ))
}

#[pymodule]
fn ctmr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPhantomSpec>()?;
    m.add_class::<PySettings>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(export_phantom_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(ssim_index, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(pixacc, m)?)?;
    m.add_function(wrap_pyfunction!(fid_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(gan_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cycle_loss, m)?)?;
    m.add_function(wrap_pyfunction!(identity_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ssim_loss, m)?)?;
    m.add_function(wrap_pyfunction!(discriminator_loss, m)?)?;
    m.add_function(wrap_pyfunction!(generator_total_loss, m)?)?;
    Ok(())
}
