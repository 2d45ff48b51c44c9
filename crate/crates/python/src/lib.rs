//! Python bindings: configuration, feature extraction, the embedding model,
//! scoring and the corpus commands.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dsae::cli::{self, ScoreSource, TrainPaths};
use dsae::evaluator::{self, Pooling};
use dsae::features::{AudioClip, FeatureExtractor, FeatureMatrix};
use dsae::model::{self, ModelParams};
use dsae::numcore::Matrix;
use dsae::segmenter::{WindowMode, WindowPolicy};

create_exception!(pydsae, DsaeError, PyException, "Data, compatibility or numeric failure.");

fn to_py(e: dsae::Error) -> PyErr {
    match e {
        dsae::Error::Io { .. } => PyOSError::new_err(e.to_string()),
        dsae::Error::Config(_) | dsae::Error::Contract(_) => PyValueError::new_err(e.to_string()),
        other => DsaeError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> dsae::Result<Matrix> {
    if rows.is_empty() {
        return Err(dsae::Error::EmptyFeatures("no frames".into()));
    }
    Matrix::from_rows(&rows)
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

fn pooling(name: &str) -> PyResult<Pooling> {
    Pooling::parse(name).ok_or_else(|| PyValueError::new_err(format!("pooling {name:?}: expected attentive or average")))
}

/// Flat `key = value` configuration with every key defaulted.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: dsae::config::Config,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None))]
    fn new(path: Option<PathBuf>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => dsae::config::Config::load(Some(&p)),
            None => Ok(dsae::config::Config::default()),
        }
        .map_err(to_py)?;
        Ok(PyConfig { inner })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: dsae::config::Config::parse(text).map_err(to_py)?,
        })
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .get(key)
            .map(str::to_string)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key `{key}`")))
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)
    }

    fn digest(&self) -> String {
        self.inner.digest()
    }

    fn model_digest(&self) -> String {
        self.inner.model_digest()
    }

    fn canonical_text(&self) -> String {
        self.inner.canonical_text()
    }

    fn __repr__(&self) -> String {
        format!("Config(digest={})", &self.inner.digest()[..12])
    }
}

fn config_or_default(config: Option<&PyConfig>) -> dsae::config::Config {
    config.map(|c| c.inner.clone()).unwrap_or_default()
}

/// Log-mel features (frames × n_mels) of 16 kHz mono samples, before
/// normalization.
#[pyfunction]
#[pyo3(signature = (samples, config=None))]
fn extract_features(samples: Vec<f64>, config: Option<&PyConfig>) -> PyResult<Vec<Vec<f64>>> {
    let cfg = config_or_default(config);
    let run = || {
        let extractor = FeatureExtractor::new(cfg.feature_config()?)?;
        let clip = AudioClip::new(samples, dsae::features::SAMPLE_RATE)?;
        extractor.extract(&clip)
    };
    Ok(rows(run().map_err(to_py)?.values()))
}

#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<Vec<f64>> {
    Ok(dsae::features::wav::read_wav(&path).map_err(to_py)?.samples().to_vec())
}

/// Normalized features as written by `extract`.
#[pyfunction]
fn read_features(features_dir: PathBuf, utterance: &str) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(cli::read_normalized(&features_dir, utterance).map_err(to_py)?.values()))
}

/// LSTM segment encoder with attentive pooling.
#[pyclass(name = "Model")]
struct PyModel {
    params: ModelParams,
    policy: WindowPolicy,
}

impl PyModel {
    fn features(&self, frames: Vec<Vec<f64>>) -> dsae::Result<FeatureMatrix> {
        FeatureMatrix::new(matrix(frames)?, true)
    }
}

#[pymethods]
impl PyModel {
    /// Randomly initialized model for the configuration's shape.
    #[staticmethod]
    #[pyo3(signature = (config=None, seed=0))]
    fn init(config: Option<&PyConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config_or_default(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(PyModel {
            params: ModelParams::init(&cfg.model_config(), &mut rng).map_err(to_py)?,
            policy: cfg.window_policy().with_mode(WindowMode::Test),
        })
    }

    /// Model from a checkpoint; the configuration's model digest must match.
    #[staticmethod]
    #[pyo3(signature = (checkpoint, config=None))]
    fn load(checkpoint: PathBuf, config: Option<&PyConfig>) -> PyResult<Self> {
        let cfg = config_or_default(config);
        Ok(PyModel {
            params: cli::load_model(&cfg, &checkpoint).map_err(to_py)?,
            policy: cfg.window_policy().with_mode(WindowMode::Test),
        })
    }

    /// Utterance embedding of normalized features (frames × n_mels).
    #[pyo3(signature = (features, pooling="attentive"))]
    fn embed(&self, features: Vec<Vec<f64>>, pooling: &str) -> PyResult<Vec<f64>> {
        let pooling = self::pooling(pooling)?;
        let f = self.features(features).map_err(to_py)?;
        evaluator::embed(&f, &self.params, &self.policy, pooling).map_err(to_py)
    }

    /// `(segment embeddings N × d_e, attention N × d_r)` for one utterance.
    fn segments(&self, features: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let f = self.features(features).map_err(to_py)?;
        let out = model::utterance_embed(&f, &self.params, &self.policy).map_err(to_py)?;
        Ok((rows(&out.segments), rows(&out.attention)))
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.params.config.embed_dim
    }

    #[getter]
    fn heads(&self) -> usize {
        self.params.config.heads
    }

    /// `(w, b)` of the scaled cosine similarity.
    #[getter]
    fn similarity(&self) -> (f64, f64) {
        (self.params.sim_w, self.params.sim_b)
    }
}

#[pyfunction]
fn cosine_score(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    evaluator::score_trial(&a, &b).map_err(to_py)
}

/// `(eer, threshold)`; targets are the labels of same-speaker trials.
#[pyfunction]
fn compute_eer(scores: Vec<f64>, targets: Vec<bool>) -> PyResult<(f64, f64)> {
    let e = evaluator::compute_eer(&scores, &targets).map_err(to_py)?;
    Ok((e.eer, e.threshold))
}

/// Write a synthetic corpus; returns `(manifest path, trials path)`.
#[pyfunction]
fn synth(config: &PyConfig, out: PathBuf) -> PyResult<(PathBuf, PathBuf)> {
    let o = cli::cmd_synth(&config.inner, &out).map_err(to_py)?;
    Ok((o.manifest_path, o.trials_path))
}

/// Extract features; returns `(written, skipped)` file counts.
#[pyfunction]
fn extract(py: Python<'_>, config: &PyConfig, manifest: PathBuf, out: PathBuf) -> PyResult<(usize, usize)> {
    let cfg = config.inner.clone();
    let s = py.detach(move || cli::cmd_extract(&cfg, &manifest, &out)).map_err(to_py)?;
    Ok((s.written, s.skipped))
}

/// Train and return the number of completed steps.
#[pyfunction]
#[pyo3(signature = (config, manifest, features, checkpoints, metrics, resume=false))]
fn train(
    py: Python<'_>,
    config: &PyConfig,
    manifest: PathBuf,
    features: PathBuf,
    checkpoints: PathBuf,
    metrics: PathBuf,
    resume: bool,
) -> PyResult<u64> {
    let cfg = config.inner.clone();
    let paths = TrainPaths {
        manifest: &manifest,
        features: &features,
        checkpoints: &checkpoints,
        metrics: &metrics,
    };
    let s = py.detach(|| cli::cmd_train(&cfg, &paths, resume)).map_err(to_py)?;
    Ok(s.steps)
}

/// Score a trial list with a checkpoint. Returns `(eer, threshold, scores)`
/// with one `(target, a, b, score)` tuple per scored trial.
#[pyfunction]
#[pyo3(signature = (config, checkpoint, features, trials, pooling="attentive"))]
#[allow(clippy::type_complexity)]
fn score(
    py: Python<'_>,
    config: &PyConfig,
    checkpoint: PathBuf,
    features: PathBuf,
    trials: PathBuf,
    pooling: &str,
) -> PyResult<(f64, f64, Vec<(bool, String, String, f64)>)> {
    let pooling = self::pooling(pooling)?;
    let cfg = config.inner.clone();
    let report = py
        .detach(|| {
            let source = ScoreSource::Checkpoint {
                checkpoint: &checkpoint,
                features: &features,
            };
            cli::cmd_score(&cfg, source, &trials, pooling)
        })
        .map_err(to_py)?;
    let scores = report
        .scores
        .into_iter()
        .map(|s| (s.trial.target, s.trial.a, s.trial.b, s.score))
        .collect();
    Ok((report.eer, report.threshold, scores))
}

#[pymodule]
fn pydsae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add("DsaeError", m.py().get_type::<DsaeError>())?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_score, m)?)?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(extract, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    Ok(())
}
