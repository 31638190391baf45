//! Python bindings. Build with `maturin develop --features extension-module`
//! or `cargo build -p dadapt-py --features extension-module` and copy the
//! shared library to `dadapt_py.so`.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use dadapt::cli::{self, CliError, RunOptions};
use dadapt::eval::{self, ConfusionCounts};
use dadapt::geometry::{self, BBox, GeometryError, Offsets};
use dadapt::synthworld::WorldConfig;

fn err(e: CliError) -> PyErr {
    match e {
        CliError::Config(m) => PyValueError::new_err(m),
        CliError::Divergence(m) | CliError::Training(m) => PyRuntimeError::new_err(m),
        CliError::Io(m) => PyOSError::new_err(m),
    }
}

fn geom_err(e: GeometryError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Round-trips a serde value into plain Python objects through `json`.
fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pyclass(name = "BBox", from_py_object)]
#[derive(Clone, Copy)]
struct PyBBox(BBox);

#[pymethods]
impl PyBBox {
    #[new]
    fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self(BBox::new(x1, y1, x2, y2))
    }

    #[getter]
    fn x1(&self) -> f64 {
        self.0.x1
    }
    #[getter]
    fn y1(&self) -> f64 {
        self.0.y1
    }
    #[getter]
    fn x2(&self) -> f64 {
        self.0.x2
    }
    #[getter]
    fn y2(&self) -> f64 {
        self.0.y2
    }

    fn area(&self) -> f64 {
        self.0.area()
    }

    fn to_tuple(&self) -> (f64, f64, f64, f64) {
        (self.0.x1, self.0.y1, self.0.x2, self.0.y2)
    }

    fn __repr__(&self) -> String {
        format!("BBox({}, {}, {}, {})", self.0.x1, self.0.y1, self.0.x2, self.0.y2)
    }
}

#[pyfunction]
fn iou(a: PyBBox, b: PyBBox) -> f64 {
    geometry::iou(&a.0, &b.0)
}

/// Regression targets `(tx, ty, tw, th)` of `gt` relative to `anchor`.
#[pyfunction]
fn encode_offsets(anchor: PyBBox, gt: PyBBox) -> PyResult<(f64, f64, f64, f64)> {
    let t = geometry::encode_offsets(&anchor.0, &gt.0).map_err(geom_err)?;
    Ok((t.tx, t.ty, t.tw, t.th))
}

#[pyfunction]
#[pyo3(signature = (anchor, offsets, scene=None))]
fn decode_offsets(anchor: PyBBox, offsets: (f64, f64, f64, f64), scene: Option<(f64, f64)>) -> PyResult<PyBBox> {
    let t = Offsets::from_slice(&[offsets.0, offsets.1, offsets.2, offsets.3]);
    geometry::decode_offsets(&anchor.0, &t, scene).map(PyBBox).map_err(geom_err)
}

/// AP from true-positive flags sorted by descending score.
#[pyfunction]
fn average_precision(tp: Vec<bool>, num_gt: usize) -> f64 {
    eval::ap_from_flags(&tp, num_gt)
}

/// `matrix[i][j]` counts items of true class `i` predicted as `j`.
#[pyfunction]
fn miou_cls(matrix: Vec<Vec<u64>>) -> PyResult<f64> {
    if matrix.iter().any(|r| r.len() != matrix.len()) {
        return Err(PyValueError::new_err("confusion matrix must be square"));
    }
    Ok(eval::miou_cls(&ConfusionCounts::from_matrix(matrix)))
}

#[pyfunction]
fn miou_reg(pred: Vec<PyBBox>, gt: Vec<PyBBox>) -> PyResult<f64> {
    let p: Vec<BBox> = pred.iter().map(|b| b.0).collect();
    let g: Vec<BBox> = gt.iter().map(|b| b.0).collect();
    eval::miou_reg(&p, &g).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// The reference world as TOML text.
#[pyfunction]
fn reference_world() -> String {
    WorldConfig::reference().to_toml()
}

#[pyfunction]
#[pyo3(signature = (out, seed=None, config=None))]
fn generate<'py>(
    py: Python<'py>,
    out: PathBuf,
    seed: Option<u64>,
    config: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let m = py
        .detach(|| cli::cmd_generate(config.as_deref(), seed, &out))
        .map_err(err)?;
    to_py(py, &m)
}

/// Runs pretraining and the adaptation rounds; returns the run summary.
#[pyfunction]
#[pyo3(signature = (data, out, config=None, seed=None, ablations=Vec::new(), rounds=None, resume=false))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    data: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
    seed: Option<u64>,
    ablations: Vec<String>,
    rounds: Option<usize>,
    resume: bool,
) -> PyResult<Bound<'py, PyAny>> {
    let opts = RunOptions {
        seed,
        ablations,
        rounds,
        resume,
    };
    py.detach(|| cli::cmd_run(config.as_deref(), &data, &out, &opts))
        .map_err(err)?;
    let summary: cli::RunSummary =
        dadapt::pipeline::read_json(&out.join("summary.json")).map_err(|e| err(e.into()))?;
    to_py(py, &summary)
}

#[pyfunction]
#[pyo3(signature = (checkpoint, data, out, config=None))]
fn evaluate<'py>(
    py: Python<'py>,
    checkpoint: PathBuf,
    data: PathBuf,
    out: PathBuf,
    config: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let m = py
        .detach(|| cli::cmd_eval(&checkpoint, &data, config.as_deref(), &out))
        .map_err(err)?;
    to_py(py, &m)
}

#[pyfunction]
fn report(run: PathBuf) -> PyResult<Vec<PathBuf>> {
    cli::cmd_report(&run).map_err(err)
}

#[pymodule]
fn dadapt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBBox>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(encode_offsets, m)?)?;
    m.add_function(wrap_pyfunction!(decode_offsets, m)?)?;
    m.add_function(wrap_pyfunction!(average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(miou_cls, m)?)?;
    m.add_function(wrap_pyfunction!(miou_reg, m)?)?;
    m.add_function(wrap_pyfunction!(reference_world, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
