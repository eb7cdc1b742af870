//! Python bindings: experiment configs and runs, checkpoints, metrics and CKA.

use std::path::{Path, PathBuf};

use mesa::cka_probe::{self, model_from_checkpoint, CkaSettings};
use mesa::data::{DepthMap, Image};
use mesa::finetune_eval::{self, Better, EvalConfig, ScalingMode};
use mesa::networks::{self, Stage};
use mesa::pipeline::{self, DatasetSpec, SyntheticCorpus};
use mesa::supervised_pretrain::NoiseSpec;
use nalgebra::DMatrix;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(mesa_py, MesaError, PyException, "Raised with args `(kind, message)`.");

fn err(e: mesa::error::MesaError) -> PyErr {
    MesaError::new_err((e.kind(), e.to_string()))
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| MesaError::new_err(("serialization", e.to_string())))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_value(v).map_err(|e| MesaError::new_err(("serialization", e.to_string())))?)
}

fn parse_stages(names: &[String]) -> PyResult<Vec<Stage>> {
    names.iter().map(|s| s.parse::<Stage>().map_err(err)).collect()
}

/// An experiment loaded from TOML.
#[pyclass(name = "Experiment", module = "mesa_py")]
struct PyExperiment {
    inner: pipeline::ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: pipeline::ExperimentConfig::load(&path).map_err(err)? })
    }

    #[staticmethod]
    #[pyo3(signature = (text, base_dir = PathBuf::from(".")))]
    fn from_toml(text: &str, base_dir: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: pipeline::ExperimentConfig::from_toml(text, &base_dir).map_err(err)? })
    }

    #[getter]
    fn stages(&self) -> Vec<String> {
        self.inner.stages.iter().map(|s| s.to_string()).collect()
    }

    #[setter]
    fn set_stages(&mut self, names: Vec<String>) -> PyResult<()> {
        self.inner.stages = parse_stages(&names)?;
        Ok(())
    }

    #[getter]
    fn output(&self) -> PathBuf {
        self.inner.output.clone()
    }

    #[setter]
    fn set_output(&mut self, path: PathBuf) {
        self.inner.output = path;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    /// Full config as a dict.
    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    /// Runs the stage list with caching; returns executed and reused stages and the final chain.
    fn run<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let run = pipeline::run_pipeline(&self.inner).map_err(err)?;
        json_to_py(
            py,
            &serde_json::json!({
                "output": self.inner.output_dir(),
                "executed": run.executed,
                "reused": run.reused,
                "chain": run.last.as_ref().map(|l| &l.checkpoint.meta.chain),
                "final_dir": run.last.as_ref().map(|l| &l.dir),
            }),
        )
    }

    /// Runs the configured ablation and returns the report as a dict.
    fn ablate<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let report = pipeline::run_ablation(&self.inner).map_err(err)?;
        to_py(py, &report)
    }

    fn __repr__(&self) -> String {
        format!("Experiment(stages={:?}, output={:?})", self.stages(), self.inner.output)
    }
}

/// Weights plus stage provenance.
#[pyclass(name = "Checkpoint", module = "mesa_py")]
struct PyCheckpoint {
    inner: networks::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// Accepts a checkpoint file or a stage directory.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: networks::Checkpoint::load(&pipeline::checkpoint_file(&path)).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn stage(&self) -> String {
        self.inner.meta.stage.to_string()
    }

    #[getter]
    fn chain(&self) -> Vec<String> {
        self.inner.meta.chain.iter().map(|s| s.to_string()).collect()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.meta.seed
    }

    #[getter]
    fn fingerprint(&self) -> String {
        self.inner.meta.fingerprint.clone()
    }

    /// Depth for a channel-first RGB image given as a flat list of `3·height·width` values in [0, 1].
    fn predict_depth(&self, py: Python<'_>, image: Vec<f64>, height: usize, width: usize) -> PyResult<Vec<f64>> {
        let img = Image::new(height, width, image).map_err(err)?;
        let ck = self.inner.clone();
        py.detach(move || {
            let model = model_from_checkpoint(&ck)?;
            model.predict_depth(&img)
        })
        .map(|d| d.depth().to_vec())
        .map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Checkpoint(stage={:?}, chain={:?})", self.stage(), self.chain())
    }
}

/// Linear CKA between two activation matrices given as lists of rows.
#[pyfunction]
fn linear_cka(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
    let to_matrix = |rows: &[Vec<f64>]| -> PyResult<DMatrix<f64>> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(MesaError::new_err(("shape", "rows have different lengths")));
        }
        Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
    };
    cka_probe::linear_cka(&to_matrix(&x)?, &to_matrix(&y)?).map_err(err)
}

/// RMSE, delta1..3, REL and log10 between flat row-major depth maps.
#[pyfunction]
#[pyo3(signature = (pred, gt, height, width, median = false))]
fn nyu_metrics<'py>(py: Python<'py>, pred: Vec<f64>, gt: Vec<f64>, height: usize, width: usize, median: bool) -> PyResult<Bound<'py, PyDict>> {
    let pred = DepthMap::dense(height, width, pred).map_err(err)?;
    let gt = DepthMap::new(height, width, gt.clone(), gt.iter().map(|&d| d > 0.0).collect()).map_err(err)?;
    let cfg = EvalConfig { scaling: if median { ScalingMode::Median } else { ScalingMode::None }, ..EvalConfig::default() };
    let m = finetune_eval::nyu_metrics(&pred, &gt, &cfg).map_err(err)?;
    let d = PyDict::new(py);
    for (k, v) in finetune_eval::DepthMetrics::COLUMNS.iter().zip(m.as_array()) {
        d.set_item(k, v)?;
    }
    Ok(d)
}

/// Percent improvement of `improved` over `baseline`.
#[pyfunction]
#[pyo3(signature = (baseline, improved, higher_is_better = false))]
fn relative_improvement(baseline: f64, improved: f64, higher_is_better: bool) -> PyResult<f64> {
    let better = if higher_is_better { Better::Higher } else { Better::Lower };
    finetune_eval::relative_improvement(baseline, improved, better).map_err(err)
}

#[pyfunction]
fn validate_stage_order(stages: Vec<String>) -> PyResult<()> {
    pipeline::validate_stage_order(&parse_stages(&stages)?).map_err(err)
}

/// Renders a synthetic corpus (frames, depth, poses, pseudo-depth, annotations) to `out`.
#[pyfunction]
#[pyo3(signature = (out, scenes = 20, frames = 10, size = 32, seed = 0, noise_sigma = 0.05))]
fn gen_scenes(py: Python<'_>, out: PathBuf, scenes: usize, frames: usize, size: usize, seed: u64, noise_sigma: f64) -> PyResult<usize> {
    let corpus = SyntheticCorpus { scenes, frames, width: size, height: size, seed };
    let noise = NoiseSpec { sigma: noise_sigma, seed, ..NoiseSpec::default() };
    py.detach(|| corpus.write(&out, &noise)).map(|dirs| dirs.len()).map_err(err)
}

/// Layer-wise CKA between two checkpoints on a dataset directory, or on rendered rooms when `dataset` is None.
#[pyfunction]
#[pyo3(signature = (a, b, out, dataset = None, images = 128, tokens = 64, size = 32, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn analyze_cka<'py>(
    py: Python<'py>,
    a: PathBuf,
    b: PathBuf,
    out: PathBuf,
    dataset: Option<PathBuf>,
    images: usize,
    tokens: usize,
    size: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let report = py
        .detach(|| -> mesa::error::Result<_> {
            let ca = networks::Checkpoint::load(&pipeline::checkpoint_file(&a))?;
            let cb = networks::Checkpoint::load(&pipeline::checkpoint_file(&b))?;
            let ds = match dataset {
                Some(d) => DatasetSpec::Dir { dir: d }.load()?,
                None => DatasetSpec::Synthetic {
                    synthetic: SyntheticCorpus { scenes: images.div_ceil(2), frames: 2, width: size, height: size, seed },
                }
                .load()?,
            };
            let named: Vec<(String, &Image)> = ds
                .sequences
                .iter()
                .enumerate()
                .flat_map(|(s, seq)| seq.frames().iter().enumerate().map(move |(f, img)| (format!("s{s:03}_f{f:05}"), img)))
                .collect();
            let settings = CkaSettings { n_images: images, tokens_per_image: tokens, seed };
            cka_probe::analyze_cka(&ca, &cb, &named, &settings, Path::new(&out))
        })
        .map_err(err)?;
    to_py(py, &report)
}

/// Runs the `mesa` command line with `argv` (without the program name); returns the exit code.
#[pyfunction]
fn cli(py: Python<'_>, argv: Vec<String>) -> i32 {
    py.detach(|| mesa::cli::main_with(std::iter::once("mesa".to_string()).chain(argv)))
}

#[pymodule]
fn mesa_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MesaError", m.py().get_type::<MesaError>())?;
    m.add_class::<PyExperiment>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(linear_cka, m)?)?;
    m.add_function(wrap_pyfunction!(nyu_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(relative_improvement, m)?)?;
    m.add_function(wrap_pyfunction!(validate_stage_order, m)?)?;
    m.add_function(wrap_pyfunction!(gen_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(analyze_cka, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
