//! Python bindings: model runs, calibration, the drift harness, and the
//! linear-algebra and metric helpers underneath them.

use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use unicp::container::{decode_state, encode_state};
use unicp::dws::{
    capture_baseline, default_calib_ticks, dws_calibrate, run_dispatched, Aggregation, CacheMap,
    Calibration, CalibrationOptions, DispatchMode, Dispatcher, RatioBounds,
};
use unicp::edcw::SchedulerConfig;
use unicp::harness::{run_scheduler_on_profile, DriftProfile, HarnessRun};
use unicp::linalg::{self, Mat};
use unicp::metrics::{QualityReport, RunTrace};
use unicp::model::{init_model, FullDispatch, LatentState, Model, ModelConfig, UnitId};
use unicp::pcas::{compute_basis, reconstruction_error};

fn err(e: unicp::Error) -> PyErr {
    match e {
        unicp::Error::NonFinite { .. } | unicp::Error::NoConvergence { .. } => {
            PyArithmeticError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_mat(rows: &[Vec<f64>]) -> PyResult<Mat> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Mat::from_vec(rows.len(), cols, rows.concat()).map_err(err)
}

fn from_mat(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

#[pyclass(name = "ModelConfig", module = "unicp", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// Defaults to the desk configuration.
    #[new]
    #[pyo3(signature = (num_blocks=None, model_dim=None, tokens_per_frame=None, num_frames=None, num_steps=None, seed=None))]
    fn new(
        num_blocks: Option<usize>,
        model_dim: Option<usize>,
        tokens_per_frame: Option<usize>,
        num_frames: Option<usize>,
        num_steps: Option<usize>,
        seed: Option<u64>,
    ) -> PyResult<Self> {
        let d = ModelConfig::default();
        let inner = ModelConfig {
            num_blocks: num_blocks.unwrap_or(d.num_blocks),
            model_dim: model_dim.unwrap_or(d.model_dim),
            tokens_per_frame: tokens_per_frame.unwrap_or(d.tokens_per_frame),
            num_frames: num_frames.unwrap_or(d.num_frames),
            num_steps: num_steps.unwrap_or(d.num_steps),
            seed: seed.unwrap_or(d.seed),
            ..d
        };
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_blocks(&self) -> usize {
        self.inner.num_blocks
    }

    #[getter]
    fn model_dim(&self) -> usize {
        self.inner.model_dim
    }

    #[getter]
    fn num_steps(&self) -> usize {
        self.inner.num_steps
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ModelConfig(num_blocks={}, model_dim={}, tokens_per_frame={}, num_frames={}, num_steps={}, seed={})",
            c.num_blocks, c.model_dim, c.tokens_per_frame, c.num_frames, c.num_steps, c.seed
        )
    }
}

#[pyclass(name = "State", module = "unicp", from_py_object)]
#[derive(Clone)]
struct PyState {
    inner: LatentState,
}

#[pymethods]
impl PyState {
    #[getter]
    fn frames(&self) -> usize {
        self.inner.frames
    }

    #[getter]
    fn tokens(&self) -> usize {
        self.inner.tokens
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// `(frames * tokens) x dim` values as nested lists.
    fn values(&self) -> Vec<Vec<f64>> {
        from_mat(&self.inner.values)
    }

    /// Binary container, the same bytes the CLI writes.
    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &encode_state(&self.inner, ""))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let (inner, _) = decode_state(data).map_err(err)?;
        Ok(Self { inner })
    }

    fn __eq__(&self, other: &PyState) -> bool {
        self.inner == other.inner
    }
}

#[pyclass(name = "Trace", module = "unicp", from_py_object)]
#[derive(Clone)]
struct PyTrace {
    inner: RunTrace,
}

#[pymethods]
impl PyTrace {
    #[getter]
    fn macs_total(&self) -> u64 {
        self.inner.totals().macs_total
    }

    /// Attention cells as `{"F": .., "O": .., "M": .., "P": ..}`.
    fn attention_counts<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (sym, n) in ["F", "O", "M", "P"].into_iter().zip(self.inner.attention_counts()) {
            d.set_item(sym, n)?;
        }
        Ok(d)
    }

    fn __len__(&self) -> usize {
        self.inner.rows.len()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    #[staticmethod]
    fn from_csv(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunTrace::from_csv(text).map_err(err)?,
        })
    }
}

#[pyclass(name = "Calibration", module = "unicp", from_py_object)]
#[derive(Clone)]
struct PyCalibration {
    inner: Calibration,
    num_blocks: usize,
}

#[pymethods]
impl PyCalibration {
    /// `(block, kind, final_n)` per attention unit.
    fn final_n(&self) -> Vec<(usize, String, usize)> {
        let m = self.inner.cache_map.header.model.model_dim;
        UnitId::all(self.num_blocks)
            .map(|u| {
                let n = self.inner.cache_map.final_n[u.index()].unwrap_or(m);
                (u.block, u.kind.as_str().to_owned(), n)
            })
            .collect()
    }

    /// `(block, kind, step, candidate_n, measured_error, accepted)` per sweep point.
    fn records(&self) -> Vec<(usize, String, usize, usize, f64, bool)> {
        self.inner
            .records
            .iter()
            .map(|r| (r.block, r.kind.as_str().to_owned(), r.step, r.candidate_n, r.measured_error, r.accepted))
            .collect()
    }

    fn cache_map(&self) -> String {
        self.inner.cache_map.to_text()
    }
}

#[pyclass(name = "Run", module = "unicp", skip_from_py_object)]
struct PyRun {
    #[pyo3(get)]
    state: PyState,
    #[pyo3(get)]
    trace: PyTrace,
    map: CacheMap,
}

#[pymethods]
impl PyRun {
    fn cache_map(&self) -> String {
        self.map.to_text()
    }
}

#[pyclass(name = "Model", module = "unicp", skip_from_py_object)]
struct PyModel {
    inner: Model,
}

fn aggregation(name: &str) -> PyResult<Aggregation> {
    Aggregation::parse(name).ok_or_else(|| PyValueError::new_err(format!("unknown aggregation `{name}`")))
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<PyModelConfig>) -> PyResult<Self> {
        let cfg = config.map(|c| c.inner).unwrap_or_default();
        Ok(Self {
            inner: init_model(&cfg).map_err(err)?,
        })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.cfg.clone(),
        }
    }

    /// Full-compute run.
    fn baseline(&self, py: Python<'_>) -> PyResult<(PyState, PyTrace)> {
        let (state, trace) = py.detach(|| self.inner.denoise(&mut FullDispatch)).map_err(err)?;
        Ok((PyState { inner: state }, PyTrace { inner: trace }))
    }

    /// Retained dimension per unit at threshold `delta`.
    #[pyo3(signature = (delta, window=4, ratio_lo=0.1, ratio_hi=0.4, aggregation="conservative", threads=1))]
    fn calibrate(
        &self,
        py: Python<'_>,
        delta: f64,
        window: usize,
        ratio_lo: f64,
        ratio_hi: f64,
        aggregation: &str,
        threads: usize,
    ) -> PyResult<PyCalibration> {
        let bounds = RatioBounds::new(ratio_lo, ratio_hi).map_err(err)?;
        let opts = CalibrationOptions {
            bounds,
            aggregation: self::aggregation(aggregation)?,
            threads,
        };
        let sched = SchedulerConfig::new(delta, window);
        sched.validate(self.inner.cfg.num_steps).map_err(err)?;
        let cal = py
            .detach(|| {
                let ticks = default_calib_ticks(self.inner.cfg.num_steps);
                let capture = capture_baseline(&self.inner, window, &ticks)?;
                dws_calibrate(&self.inner, &capture, &sched, &opts)
            })
            .map_err(err)?;
        Ok(PyCalibration {
            inner: cal,
            num_blocks: self.inner.cfg.num_blocks,
        })
    }

    /// Dispatched run. Without a calibration, online mode runs unsliced;
    /// replay needs one.
    #[pyo3(signature = (delta, window=4, calibration=None, mode="online"))]
    fn run(
        &self,
        py: Python<'_>,
        delta: f64,
        window: usize,
        calibration: Option<PyCalibration>,
        mode: &str,
    ) -> PyResult<PyRun> {
        let mode = DispatchMode::parse(mode).ok_or_else(|| PyValueError::new_err(format!("unknown mode `{mode}`")))?;
        let cfg = &self.inner.cfg;
        let sched = SchedulerConfig::new(delta, window);
        sched.validate(cfg.num_steps).map_err(err)?;
        let (mut dispatcher, bounds, agg) = match (mode, calibration) {
            (DispatchMode::Online, None) => (
                Dispatcher::online(cfg, sched, Vec::new()).map_err(err)?,
                RatioBounds::default(),
                Aggregation::default(),
            ),
            (DispatchMode::Replay, None) => {
                return Err(PyValueError::new_err("replay needs a calibration"));
            }
            (mode, Some(cal)) => {
                let h = &cal.inner.cache_map.header;
                if h.model != *cfg || h.delta != delta {
                    return Err(PyValueError::new_err("calibration was made for another model or delta"));
                }
                let d = match mode {
                    DispatchMode::Online => Dispatcher::online(cfg, sched, cal.inner.sliced_for_dispatch()),
                    DispatchMode::Replay => {
                        Dispatcher::replay(cfg, &cal.inner.cache_map, cal.inner.sliced_for_dispatch())
                    }
                }
                .map_err(err)?;
                (d, h.bounds, h.aggregation)
            }
        };
        let run = py
            .detach(|| run_dispatched(&self.inner, &mut dispatcher, bounds, agg))
            .map_err(err)?;
        Ok(PyRun {
            state: PyState { inner: run.final_state },
            trace: PyTrace { inner: run.trace },
            map: run.cache_map,
        })
    }
}

/// PSNR, SSIM, relative L2 and MSE of `candidate` against `reference`.
#[pyfunction]
fn compare<'py>(py: Python<'py>, reference: &PyState, candidate: &PyState) -> PyResult<Bound<'py, PyDict>> {
    let r = QualityReport::compute(&reference.inner, &candidate.inner).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("psnr_db", r.psnr_db)?;
    d.set_item("ssim", r.ssim)?;
    d.set_item("rel_l2", r.rel_l2)?;
    d.set_item("mse", r.mse)?;
    d.set_item("peak", r.peak)?;
    Ok(d)
}

/// Eigenvalues (descending) and eigenvector columns of a symmetric matrix.
#[pyfunction]
fn sym_eig(a: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let e = linalg::sym_eig(&to_mat(&a)?).map_err(err)?;
    Ok((e.eigenvalues, from_mat(&e.eigenvectors)))
}

#[pyfunction]
fn softmax_rows(a: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(from_mat(&linalg::softmax_rows(&to_mat(&a)?)))
}

/// `‖a − b‖ / ‖b‖`.
#[pyfunction]
fn rel_l2(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    linalg::rel_l2(&to_mat(&a)?, &to_mat(&b)?).map_err(err)
}

/// Eigenvalues and basis of `Σ XᵀX` over `inputs`.
#[pyfunction]
fn pca_basis(inputs: Vec<Vec<Vec<f64>>>) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let mats = inputs.iter().map(|x| to_mat(x)).collect::<PyResult<Vec<_>>>()?;
    let b = compute_basis(&mats).map_err(err)?;
    Ok((b.eigenvalues.clone(), from_mat(&b.r)))
}

/// `‖X − X·R_n·R_nᵀ‖_F` with the basis computed from `x` itself.
#[pyfunction]
fn projection_error(x: Vec<Vec<f64>>, n: usize) -> PyResult<f64> {
    let x = to_mat(&x)?;
    let b = compute_basis(std::slice::from_ref(&x)).map_err(err)?;
    reconstruction_error(&x, &b, n).map_err(err)
}

fn harness_dict<'py>(py: Python<'py>, run: &HarnessRun) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("accumulated_error", run.accumulated_error)?;
    let cells: String = run.steps.iter().map(|s| s.cell.symbol()).collect();
    d.set_item("cells", cells)?;
    d.set_item("errors", run.steps.iter().map(|s| s.reuse_error).collect::<Vec<_>>())?;
    d.set_item("armed", run.armed_windows())?;
    Ok(d)
}

/// Scheduler and fixed-window comparators on a synthetic drift profile.
#[pyfunction]
#[pyo3(signature = (drifts, spikes=Vec::new(), delta=0.05, window=4, fixed=vec![2, 3, 4], shape=(8, 8), seed=0))]
fn run_profile<'py>(
    py: Python<'py>,
    drifts: Vec<f64>,
    spikes: Vec<(usize, f64)>,
    delta: f64,
    window: usize,
    fixed: Vec<usize>,
    shape: (usize, usize),
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let profile = DriftProfile::new(drifts, spikes).map_err(err)?;
    let sched = SchedulerConfig::new(delta, window);
    sched.validate(profile.len()).map_err(err)?;
    let cmp = run_scheduler_on_profile(&profile, &sched, &fixed, shape, seed).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("edcw", harness_dict(py, &cmp.edcw)?)?;
    let f = PyDict::new(py);
    for (k, run) in &cmp.fixed {
        f.set_item(k, harness_dict(py, run)?)?;
    }
    out.set_item("fixed", f)?;
    Ok(out)
}

#[pymodule]
#[pyo3(name = "unicp")]
fn unicp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyState>()?;
    m.add_class::<PyTrace>()?;
    m.add_class::<PyCalibration>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(compare, m)?)?;
    m.add_function(wrap_pyfunction!(sym_eig, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_rows, m)?)?;
    m.add_function(wrap_pyfunction!(rel_l2, m)?)?;
    m.add_function(wrap_pyfunction!(pca_basis, m)?)?;
    m.add_function(wrap_pyfunction!(projection_error, m)?)?;
    m.add_function(wrap_pyfunction!(run_profile, m)?)?;
    Ok(())
}
