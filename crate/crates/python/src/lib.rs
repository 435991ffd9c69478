//! Python bindings: dataset simulation, training, checkpoints, BER sweeps,
//! complexity counts and the quantizer and kernel primitives.

use kaq_core::eval::{self, ComplexityReport};
use kaq_core::io::{self, Checkpoint};
use kaq_core::kernel::{self, ActivationBatch, Bandwidths};
use kaq_core::mimo::{self, db_to_linear, ComplexSystem, DatasetConfig, MimoInstance, SnrConvention};
use kaq_core::training::{self, EpochStats, QuantMode};
use kaq_core::unfolded::{self, Variant};
use kaq_core::{BerRow, Detector, RunConfig};
use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(kaq, KaqError, PyValueError);

fn py_err(e: kaq_core::KaqError) -> PyErr {
    KaqError::new_err(e.to_string())
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for kaq_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn parse_mode(s: &str) -> PyResult<QuantMode> {
    s.parse().map_err(py_err)
}

fn parse_variant(s: &str) -> PyResult<Variant> {
    match s {
        "pgd" => Ok(Variant::Pgd),
        "admm" => Ok(Variant::Admm),
        _ => Err(KaqError::new_err(format!("unknown variant {s:?}; expected \"pgd\" or \"admm\""))),
    }
}

fn parse_convention(s: &str) -> PyResult<SnrConvention> {
    match s {
        "received-total" => Ok(SnrConvention::ReceivedTotal),
        "transmit-per-symbol" => Ok(SnrConvention::TransmitPerSymbol),
        _ => Err(KaqError::new_err(format!(
            "unknown SNR convention {s:?}; expected \"received-total\" or \"transmit-per-symbol\""
        ))),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let m = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    if m == 0 || n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(KaqError::new_err("matrix must be a nonempty list of equal-length rows"));
    }
    Ok(DMatrix::from_fn(m, n, |i, j| rows[i][j]))
}

fn rows_of(h: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..h.nrows()).map(|i| h.row(i).iter().copied().collect()).collect()
}

fn system_check(h: &DMatrix<f64>, y: &[f64]) -> PyResult<DVector<f64>> {
    if y.len() != h.nrows() {
        return Err(KaqError::new_err(format!("y has {} entries, H has {} rows", y.len(), h.nrows())));
    }
    Ok(DVector::from_column_slice(y))
}

/// Simulated MIMO instances in the real-valued embedding.
#[pyclass(module = "kaq", frozen)]
struct Dataset {
    inner: mimo::Dataset,
}

#[pymethods]
impl Dataset {
    #[staticmethod]
    #[pyo3(signature = (nt, nr, snr_db, count, seed=0, constellation=None, snr_convention="received-total"))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        py: Python<'_>,
        nt: usize,
        nr: usize,
        snr_db: Vec<f64>,
        count: usize,
        seed: u64,
        constellation: Option<Vec<f64>>,
        snr_convention: &str,
    ) -> PyResult<Self> {
        let mut system = match constellation {
            Some(c) => ComplexSystem::new(nt, nr, c).py()?,
            None => ComplexSystem::qam16(nt, nr),
        };
        system.snr_convention = parse_convention(snr_convention)?;
        let cfg = DatasetConfig { system, snr_db, count };
        let inner = py.detach(|| mimo::build_dataset(&cfg, seed)).py()?;
        Ok(Self { inner })
    }

    /// Generates the dataset described by the `[system]` section of a TOML run config.
    #[staticmethod]
    fn from_config(py: Python<'_>, path: &str) -> PyResult<Self> {
        let run = RunConfig::load(path).py()?;
        let cfg = run.dataset_config().py()?;
        let inner = py.detach(|| mimo::build_dataset(&cfg, run.system.seed)).py()?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_dataset(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_dataset(path, &self.inner).py()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, pyo3::types::PyBytes>> {
        let b = io::dataset_to_bytes(&self.inner).py()?;
        Ok(pyo3::types::PyBytes::new(py, &b))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.config.system;
        format!(
            "Dataset(nt={}, nr={}, levels={}, snr_db={:?}, count={}, seed={})",
            s.nt,
            s.nr,
            s.constellation.len(),
            self.inner.config.snr_db,
            self.inner.len(),
            self.inner.seed
        )
    }

    #[getter]
    fn nt(&self) -> usize {
        self.inner.config.system.nt
    }

    #[getter]
    fn nr(&self) -> usize {
        self.inner.config.system.nr
    }

    /// Rows of the real channel matrix, `2·nr`.
    #[getter]
    fn m(&self) -> usize {
        self.inner.config.system.m()
    }

    /// Columns of the real channel matrix, `2·nt`.
    #[getter]
    fn n(&self) -> usize {
        self.inner.config.system.n()
    }

    #[getter]
    fn snr_db(&self) -> Vec<f64> {
        self.inner.config.snr_db.clone()
    }

    #[getter]
    fn constellation(&self) -> Vec<f64> {
        self.inner.config.system.constellation.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    /// Instance `i` as a dict with `h` (rows), `y`, `x` and `snr_db`.
    fn instance<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyDict>> {
        let inst = self
            .inner
            .instances
            .get(i)
            .ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(format!("instance {i} out of range")))?;
        let d = PyDict::new(py);
        d.set_item("h", rows_of(&inst.h))?;
        d.set_item("y", inst.y.as_slice().to_vec())?;
        d.set_item("x", inst.x_true.as_slice().to_vec())?;
        d.set_item("snr_db", inst.snr_db)?;
        Ok(d)
    }
}

/// Training hyperparameters.
#[pyclass(module = "kaq", from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: training::TrainConfig,
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (
        mode="kaq", variant="pgd", layers=5, epochs=50, batch_size=128, lr=1e-3,
        lr_halving_period=10, seed=0, bits=8, epsilon=0.1, dynamic=None
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        mode: &str,
        variant: &str,
        layers: usize,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        lr_halving_period: usize,
        seed: u64,
        bits: u32,
        epsilon: f64,
        dynamic: Option<bool>,
    ) -> PyResult<Self> {
        let mut c = training::TrainConfig::default();
        c.quant.mode = parse_mode(mode)?;
        c.net.variant = parse_variant(variant)?;
        c.net.layers = layers;
        c.epochs = epochs;
        c.batch_size = batch_size;
        c.lr = lr;
        c.lr_halving_period = lr_halving_period;
        c.seed = seed;
        c.quant.bits = bits;
        c.kernel.epsilon = epsilon;
        c.quant.dynamic = dynamic;
        c.validate().py()?;
        Ok(Self { inner: c })
    }

    /// Training settings of a TOML run config.
    #[staticmethod]
    fn from_toml(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(path).py()?.train_config(),
        })
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "TrainConfig(mode={:?}, variant={:?}, layers={}, epochs={}, batch_size={}, lr={}, seed={}, bits={})",
            c.quant.mode.name(),
            c.net.variant.to_string(),
            c.net.layers,
            c.epochs,
            c.batch_size,
            c.lr,
            c.seed,
            c.quant.bits
        )
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.quant.mode.name()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.net.variant.to_string()
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.net.layers
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.epochs
    }

    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.epochs = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn lr(&self) -> f64 {
        self.inner.lr
    }

    #[getter]
    fn bits(&self) -> u32 {
        self.inner.quant.bits
    }
}

fn history_dicts<'py>(py: Python<'py>, history: &[EpochStats]) -> PyResult<Vec<Bound<'py, PyDict>>> {
    history
        .iter()
        .map(|h| {
            let d = PyDict::new(py);
            d.set_item("epoch", h.epoch)?;
            d.set_item("lr", h.lr)?;
            d.set_item("loss", h.loss)?;
            d.set_item("mse", h.mse)?;
            d.set_item("mmd", h.mmd)?;
            d.set_item("accuracy", h.accuracy)?;
            Ok(d)
        })
        .collect()
}

fn complexity_dict<'py>(py: Python<'py>, r: &ComplexityReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("detector", &r.detector)?;
    d.set_item("mult_adds", r.mult_adds)?;
    d.set_item("activation_bytes", r.activation_bytes)?;
    d.set_item("param_bytes", r.param_bytes)?;
    Ok(d)
}

/// A trained (or training) unfolded detector with its optimizer state and history.
#[pyclass(module = "kaq")]
struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_checkpoint(path).py()?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        io::save_checkpoint(path, &self.inner).py()
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, pyo3::types::PyBytes>> {
        let b = io::checkpoint_to_bytes(&self.inner).py()?;
        Ok(pyo3::types::PyBytes::new(py, &b))
    }

    /// Trains further until `epochs` epochs are complete; returns the new history rows.
    fn resume<'py>(&mut self, py: Python<'py>, dataset: &Dataset, epochs: usize) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let mut cfg = self.inner.config.clone();
        cfg.epochs = epochs;
        let state = &mut self.inner.state;
        let ds = &dataset.inner;
        let new = py.detach(|| training::resume(state, ds, &cfg)).py()?;
        self.inner.config = cfg;
        self.inner.history.extend_from_slice(&new);
        history_dicts(py, &new)
    }

    fn __repr__(&self) -> String {
        let s = &self.inner.state;
        format!(
            "Model(mode={:?}, variant={:?}, layers={}, epoch={})",
            s.mode().name(),
            s.params.variant.to_string(),
            s.params.layers(),
            s.epoch
        )
    }

    #[getter]
    fn mode(&self) -> &'static str {
        self.inner.state.mode().name()
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.state.params.variant.to_string()
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.state.params.layers()
    }

    #[getter]
    fn epoch(&self) -> usize {
        self.inner.state.epoch
    }

    #[getter]
    fn config(&self) -> TrainConfig {
        TrainConfig {
            inner: self.inner.config.clone(),
        }
    }

    #[getter]
    fn history<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        history_dicts(py, &self.inner.history)
    }

    /// Learned scalars: `eta` or `rho`, `lambda`, and where present
    /// `alpha`/`gamma` or `delta`, and `sigma1..3`.
    fn parameters<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let s = &self.inner.state;
        let d = PyDict::new(py);
        match s.params.variant {
            Variant::Pgd => d.set_item("eta", s.params.eta.clone())?,
            Variant::Admm => d.set_item("rho", s.params.rho.clone())?,
        }
        d.set_item("lambda", s.params.lambda.clone())?;
        if let Some(q) = &s.quant {
            d.set_item("bits", q.bits)?;
            match (q.alpha(), q.gamma()) {
                (Some(a), Some(g)) => {
                    d.set_item("alpha", a)?;
                    d.set_item("gamma", g)?;
                }
                _ => d.set_item("delta", q.layer_steps(1.0).py()?.deltas)?,
            }
        }
        if let Some(k) = &s.kernel {
            let exp = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
            d.set_item("sigma1", exp(&k.log_sigma1))?;
            d.set_item("sigma2", exp(&k.log_sigma2))?;
            d.set_item("sigma3", exp(&k.log_sigma3))?;
        }
        Ok(d)
    }

    /// Per-layer quantizer steps at `snr_db`; `None` for a full-precision model.
    fn step_sizes(&self, snr_db: f64) -> PyResult<Option<Vec<f64>>> {
        match &self.inner.state.quant {
            Some(q) => Ok(Some(q.layer_steps(db_to_linear(snr_db)).py()?.deltas)),
            None => Ok(None),
        }
    }

    /// Soft estimate of `x` for one real-valued system `y = Hx + n`.
    fn detect(&self, h: Vec<Vec<f64>>, y: Vec<f64>, snr_db: f64) -> PyResult<Vec<f64>> {
        let h = matrix(&h)?;
        let y = system_check(&h, &y)?;
        let n = h.ncols();
        let inst = MimoInstance {
            h,
            y,
            x_true: DVector::zeros(n),
            snr_db,
            snr_linear: db_to_linear(snr_db),
        };
        Ok(self.inner.state.forward(&inst).py()?.output().as_slice().to_vec())
    }

    /// Operation and storage counts for an `m × n` real system.
    fn complexity<'py>(&self, py: Python<'py>, m: usize, n: usize) -> PyResult<Bound<'py, PyDict>> {
        complexity_dict(py, &eval::state_complexity(self.mode(), &self.inner.state, m, n))
    }
}

/// Calibrates and trains a detector on `dataset`.
#[pyfunction]
fn train(py: Python<'_>, dataset: &Dataset, config: &TrainConfig) -> PyResult<Model> {
    let ds = &dataset.inner;
    let cfg = config.inner.clone();
    let (state, history) = py.detach(|| training::train(ds, &cfg)).py()?;
    Ok(Model {
        inner: Checkpoint {
            state,
            config: cfg,
            history,
            system: Some(ds.config.system.clone()),
        },
    })
}

fn ber_dict<'py>(py: Python<'py>, label: &str, r: &BerRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("detector", label)?;
    d.set_item("snr_db", r.snr_db)?;
    d.set_item("ber", r.ber)?;
    d.set_item("ser", r.ser)?;
    d.set_item("bits", r.bits_total)?;
    d.set_item("bit_errors", r.bit_errors)?;
    d.set_item("symbol_errors", r.symbol_errors)?;
    Ok(d)
}

/// Per-SNR BER of a `Model` or a baseline (`"zf"`, `"mmse"`, `"ml"`, `"random"`).
#[pyfunction]
#[pyo3(signature = (detector, dataset, label=None))]
fn evaluate_ber<'py>(
    py: Python<'py>,
    detector: &Bound<'py, PyAny>,
    dataset: &Dataset,
    label: Option<String>,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let ds = &dataset.inner;
    let model;
    let det = if let Ok(m) = detector.cast::<Model>() {
        model = m.borrow();
        Detector::Unfolded {
            label: label.unwrap_or_else(|| model.mode().to_string()),
            state: &model.inner.state,
        }
    } else {
        match detector.extract::<String>()?.as_str() {
            "zf" => Detector::ZeroForcing,
            "mmse" => Detector::Mmse,
            "ml" => Detector::MaximumLikelihood,
            "random" => Detector::RandomGuess { seed: ds.seed },
            other => return Err(KaqError::new_err(format!("unknown detector {other:?}"))),
        }
    };
    let report = py.detach(|| eval::evaluate_ber(&det, ds)).py()?;
    report.rows.iter().map(|r| ber_dict(py, &report.detector, r)).collect()
}

/// Symmetric uniform quantizer with `2^(bits−1) − 1` positive levels.
#[pyfunction]
fn quantize(x: Vec<f64>, delta: f64, bits: u32) -> PyResult<Vec<f64>> {
    kaq_core::quantizer::quantize(&x, delta, bits).py()
}

/// `Δ = α / √snr + γ` with `snr_db` converted to linear scale.
#[pyfunction]
fn dynamic_step_size(alpha: f64, gamma: f64, snr_db: f64) -> PyResult<f64> {
    kaq_core::quantizer::dynamic_step_size(alpha, gamma, db_to_linear(snr_db)).py()
}

#[pyfunction]
fn soft_threshold(r: Vec<f64>, lam: f64) -> PyResult<Vec<f64>> {
    unfolded::soft_threshold(&r, lam).py()
}

/// Biased squared MMD between two batches of equal-length rows.
#[pyfunction]
#[pyo3(signature = (fp, q, sigma1, sigma2=None, sigma3=None))]
fn mmd2(fp: Vec<Vec<f64>>, q: Vec<Vec<f64>>, sigma1: f64, sigma2: Option<f64>, sigma3: Option<f64>) -> PyResult<f64> {
    let bw = Bandwidths {
        s1: sigma1,
        s2: sigma2.unwrap_or(sigma1),
        s3: sigma3.unwrap_or(sigma1),
    };
    let a = ActivationBatch::from_rows(&fp).py()?;
    let b = ActivationBatch::from_rows(&q).py()?;
    kernel::mmd2(&a, &b, bw).py()
}

#[pyfunction]
fn zero_forcing(h: Vec<Vec<f64>>, y: Vec<f64>) -> PyResult<Vec<f64>> {
    let h = matrix(&h)?;
    let y = system_check(&h, &y)?;
    Ok(eval::zero_forcing(&h, &y).py()?.as_slice().to_vec())
}

#[pyfunction]
fn mmse(h: Vec<Vec<f64>>, y: Vec<f64>, noise_to_signal: f64) -> PyResult<Vec<f64>> {
    let h = matrix(&h)?;
    let y = system_check(&h, &y)?;
    Ok(eval::mmse(&h, &y, noise_to_signal).py()?.as_slice().to_vec())
}

/// Exhaustive maximum-likelihood detection over the per-axis `constellation`.
#[pyfunction]
fn ml_detect(h: Vec<Vec<f64>>, y: Vec<f64>, constellation: Vec<f64>) -> PyResult<Vec<f64>> {
    let h = matrix(&h)?;
    let y = system_check(&h, &y)?;
    Ok(eval::ml_oracle(&h, &y, &constellation).py()?.as_slice().to_vec())
}

/// Nearest constellation points and their Gray-coded bits.
#[pyfunction]
fn demap(x_hat: Vec<f64>, constellation: Vec<f64>) -> (Vec<f64>, Vec<u8>) {
    eval::demap(&x_hat, &constellation)
}

/// Counts for a `layers`-layer network on an `m × n` real system; `bits=None` is float32.
#[pyfunction]
#[pyo3(signature = (variant, layers, m, n, bits=None, label="net"))]
fn count_complexity<'py>(
    py: Python<'py>,
    variant: &str,
    layers: usize,
    m: usize,
    n: usize,
    bits: Option<u32>,
    label: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let r = eval::count_complexity(label, parse_variant(variant)?, layers, bits, m, n);
    complexity_dict(py, &r)
}

#[pymodule]
fn kaq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("KaqError", m.py().get_type::<KaqError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<TrainConfig>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_ber, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(dynamic_step_size, m)?)?;
    m.add_function(wrap_pyfunction!(soft_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(mmd2, m)?)?;
    m.add_function(wrap_pyfunction!(zero_forcing, m)?)?;
    m.add_function(wrap_pyfunction!(mmse, m)?)?;
    m.add_function(wrap_pyfunction!(ml_detect, m)?)?;
    m.add_function(wrap_pyfunction!(demap, m)?)?;
    m.add_function(wrap_pyfunction!(count_complexity, m)?)?;
    Ok(())
}
