//! Python bindings. Arrays cross the boundary as nested lists; reports
//! come back as JSON strings.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use lidkit::cli::{self, PipelineConfig, Workdir};
use lidkit::corpus::{self, AudioSegment, SyntheticSpec};
use lidkit::features::{FeatureExtractor, FeatureMatrix, MfccConfig};
use lidkit::nn::{self, Mode, Tdnn};
use lidkit::openset::{decide_with_top, ThresholdPolicy};
use lidkit::LidError;

pyo3::create_exception!(lidkit, LidkitError, PyException);

fn err(e: LidError) -> PyErr {
    LidkitError::new_err(format!("[exit {}] {e}", e.exit_code()))
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| LidkitError::new_err(e.to_string()))
}

fn rows<T: Copy + Into<f64>>(a: &Array2<T>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.iter().map(|&v| v.into()).collect()).collect()
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<Array2<f32>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(LidkitError::new_err("ragged frame matrix"));
    }
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((flat.len() / cols.max(1), cols), flat)
        .map_err(|e| LidkitError::new_err(e.to_string()))
}

#[pyclass(name = "LanguageRegistry", from_py_object)]
#[derive(Clone)]
struct PyRegistry {
    inner: corpus::LanguageRegistry,
}

#[pymethods]
impl PyRegistry {
    #[new]
    fn new(in_set: Vec<String>, out_of_set: Vec<String>) -> PyResult<Self> {
        Ok(PyRegistry {
            inner: corpus::LanguageRegistry::new(in_set, out_of_set).map_err(err)?,
        })
    }

    /// The 32 in-set / 19 out-of-set language list.
    #[staticmethod]
    fn default() -> Self {
        PyRegistry {
            inner: corpus::LanguageRegistry::builtin(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRegistry {
            inner: corpus::LanguageRegistry::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn in_set(&self) -> Vec<String> {
        self.inner.in_set().to_vec()
    }

    #[getter]
    fn out_of_set(&self) -> Vec<String> {
        self.inner.out_of_set().to_vec()
    }

    #[getter]
    fn enrolled(&self) -> Vec<String> {
        self.inner.enrolled().to_vec()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

#[pyclass(name = "TdnnModel")]
struct PyModel {
    inner: nn::TdnnModel,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (path, registry=None))]
    fn load(path: PathBuf, registry: Option<PyRegistry>) -> PyResult<Self> {
        let reg = registry.map(|r| r.inner);
        Ok(PyModel {
            inner: nn::load_model(&path, reg.as_ref()).map_err(err)?,
        })
    }

    /// Untrained network sized for `registry`.
    #[staticmethod]
    #[pyo3(signature = (registry, seed=0))]
    fn random(registry: PyRegistry, seed: u64) -> PyResult<Self> {
        let cfg = nn::TdnnConfig::for_classes(registry.inner.in_set().len());
        let net = Tdnn::init(cfg, seed).map_err(err)?;
        Ok(PyModel {
            inner: nn::TdnnModel::new(net, &registry.inner).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        nn::save_model(&self.inner, &path).map_err(err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// Eval-mode pass over a T × 16 frame matrix. Returns frame posteriors
    /// and frame representations.
    fn forward(&self, frames: Vec<Vec<f32>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let x = matrix(frames)?;
        let out = self.inner.net.forward(x.view(), Mode::Eval).map_err(err)?;
        Ok((rows(&out.posterior()), rows(&out.representation)))
    }

    /// Time-averaged posterior of a frame matrix.
    fn posterior(&self, frames: Vec<Vec<f32>>) -> PyResult<Vec<f64>> {
        let x = matrix(frames)?;
        let out = self.inner.net.forward(x.view(), Mode::Eval).map_err(err)?;
        Ok(nn::average_posterior(&out.posterior()).map_err(err)?.to_vec())
    }
}

/// T × 16 feature matrix of one mono segment.
#[pyfunction]
#[pyo3(signature = (samples, rate=16_000))]
fn extract_features(samples: Vec<f32>, rate: u32) -> PyResult<Vec<Vec<f64>>> {
    let ex = FeatureExtractor::new(&MfccConfig::default(), rate).map_err(err)?;
    let f: FeatureMatrix = ex.extract(&AudioSegment::detached(samples, rate)).map_err(err)?;
    Ok(rows(&f.frames))
}

/// Mono samples and sample rate of a 16-bit PCM file.
#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let a = corpus::read_wav(&path).map_err(err)?;
    Ok((corpus::downmix(&a), a.sample_rate))
}

/// Open-set decision on an averaged posterior: (accepted, prediction,
/// confidence, top-n list).
#[pyfunction]
#[pyo3(signature = (posterior, registry, tau=0.65, top_n=3))]
#[allow(clippy::type_complexity)]
fn decide(
    posterior: Vec<f64>,
    registry: PyRegistry,
    tau: f64,
    top_n: usize,
) -> PyResult<(bool, Option<String>, f64, Vec<(String, f64)>)> {
    let policy = ThresholdPolicy::new(tau).map_err(err)?;
    let p = ndarray::Array1::from(posterior);
    let d = decide_with_top(p.view(), &policy, &registry.inner, top_n).map_err(err)?;
    Ok((d.accepted, d.predicted_in_set, d.confidence, d.top_n))
}

/// Writes a synthetic corpus; returns its language codes.
#[pyfunction]
#[pyo3(signature = (root, languages=4, speakers=4, minutes=2.0, seed=0))]
fn generate_synthetic_corpus(
    root: PathBuf,
    languages: usize,
    speakers: usize,
    minutes: f64,
    seed: u64,
) -> PyResult<Vec<String>> {
    let spec = SyntheticSpec::new(languages, speakers, minutes, seed);
    Ok(corpus::generate_synthetic_corpus(&spec, &root).map_err(err)?.languages)
}

/// The command pipeline bound to one workdir.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    config: PipelineConfig,
    workdir: Workdir,
}

#[pymethods]
impl PyPipeline {
    /// `config_toml` uses the same schema as the `--config` file.
    #[new]
    #[pyo3(signature = (workdir, config_toml=None))]
    fn new(workdir: PathBuf, config_toml: Option<&str>) -> PyResult<Self> {
        let config = match config_toml {
            Some(t) => PipelineConfig::from_toml(t).map_err(err)?,
            None => PipelineConfig::default(),
        };
        Ok(PyPipeline {
            config: config.resolve().map_err(err)?,
            workdir: Workdir::new(workdir),
        })
    }

    fn config_toml(&self) -> String {
        self.config.to_toml()
    }

    fn prepare(&self) -> PyResult<String> {
        json(&cli::prepare(&self.config, &self.workdir).map_err(err)?)
    }

    fn train(&self) -> PyResult<String> {
        json(&cli::train(&self.config, &self.workdir).map_err(err)?)
    }

    fn fit_backend(&self) -> PyResult<String> {
        json(&cli::fit_backend(&self.config, &self.workdir).map_err(err)?)
    }

    #[pyo3(signature = (paths, ensemble=None))]
    fn identify(&self, paths: Vec<PathBuf>, ensemble: Option<PathBuf>) -> PyResult<String> {
        json(&cli::identify(&self.config, &self.workdir, &paths, ensemble.as_deref()).map_err(err)?)
    }

    fn enroll(&self, code: &str, audio_dir: PathBuf) -> PyResult<String> {
        json(&cli::enroll(&self.config, &self.workdir, code, &audio_dir).map_err(err)?)
    }

    #[pyo3(signature = (ensemble=None))]
    fn evaluate(&self, ensemble: Option<PathBuf>) -> PyResult<String> {
        json(&cli::evaluate(&self.config, &self.workdir, ensemble.as_deref()).map_err(err)?)
    }
}

#[pymodule]
#[pyo3(name = "lidkit")]
fn lidkit_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LidkitError", m.py().get_type::<LidkitError>())?;
    m.add_class::<PyRegistry>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(decide, m)?)?;
    m.add_function(wrap_pyfunction!(generate_synthetic_corpus, m)?)?;
    Ok(())
}
