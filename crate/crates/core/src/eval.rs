//! Detection quality and cost accounting.
//!
//! Estimates are sliced per real axis to the nearest constellation level
//! (ties go to the smaller level) and labeled with a Gray code over the
//! sorted levels, so `{−3, −1, 1, 3}` maps to `00, 01, 11, 10`.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{KaqError, Result};
use crate::mimo::{instance_rng, Dataset, DatasetConfig, MimoInstance};
use crate::training::TrainState;
use crate::unfolded::Variant;

/// Exhaustive search is refused above this many candidates.
pub const ML_SEARCH_LIMIT: f64 = 1e6;

/// Nearest level; `levels` must be sorted ascending.
pub fn nearest_level(v: f64, levels: &[f64]) -> f64 {
    levels[nearest_index(v, levels)]
}

fn nearest_index(v: f64, levels: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, l) in levels.iter().enumerate() {
        let d = (v - l).abs();
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Bits per real axis.
pub fn bits_per_level(levels: usize) -> usize {
    (usize::BITS - (levels.max(1) - 1).leading_zeros()) as usize
}

/// Gray label of level index `i`, most significant bit first.
pub fn gray_bits(i: usize, width: usize) -> Vec<u8> {
    let g = i ^ (i >> 1);
    (0..width).rev().map(|b| ((g >> b) & 1) as u8).collect()
}

fn sorted(constellation: &[f64]) -> Vec<f64> {
    let mut levels = constellation.to_vec();
    levels.sort_by(f64::total_cmp);
    levels
}

/// Slices each coordinate and returns the levels with their concatenated Gray bits.
pub fn demap(x_hat: &[f64], constellation: &[f64]) -> (Vec<f64>, Vec<u8>) {
    let levels = sorted(constellation);
    let width = bits_per_level(levels.len());
    let mut symbols = Vec::with_capacity(x_hat.len());
    let mut bits = Vec::with_capacity(x_hat.len() * width);
    for &v in x_hat {
        let i = nearest_index(v, &levels);
        symbols.push(levels[i]);
        bits.extend(gray_bits(i, width));
    }
    (symbols, bits)
}

/// Exact minimizer of `‖y − Hx‖²` over `constellation^N`; among equal
/// residuals the lexicographically smallest `x` wins.
pub fn ml_oracle(h: &DMatrix<f64>, y: &DVector<f64>, constellation: &[f64]) -> Result<DVector<f64>> {
    let n = h.ncols();
    if h.nrows() != y.len() {
        return Err(KaqError::Dimension(format!("H has {} rows, y has {}", h.nrows(), y.len())));
    }
    if constellation.is_empty() {
        return Err(KaqError::InvalidArgument("empty constellation".into()));
    }
    let levels = sorted(constellation);
    let size = (levels.len() as f64).powi(n as i32);
    if size > ML_SEARCH_LIMIT {
        return Err(KaqError::SearchSpace {
            size,
            limit: ML_SEARCH_LIMIT,
        });
    }
    let mut idx = vec![0usize; n];
    let mut x = DVector::from_element(n, levels[0]);
    let mut best = x.clone();
    let mut best_cost = f64::INFINITY;
    loop {
        let cost = (y - h * &x).norm_squared();
        if cost < best_cost {
            best_cost = cost;
            best.copy_from(&x);
        }
        // odometer with the first coordinate most significant
        let mut pos = n;
        loop {
            if pos == 0 {
                return Ok(best);
            }
            pos -= 1;
            if idx[pos] + 1 < levels.len() {
                idx[pos] += 1;
                x[pos] = levels[idx[pos]];
                break;
            }
            idx[pos] = 0;
            x[pos] = levels[0];
        }
    }
}

/// Zero-forcing: least-squares solve, refused when `H` lacks full column rank.
pub fn zero_forcing(h: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let n = h.ncols();
    if h.nrows() < n {
        return Err(KaqError::Singular("zero forcing needs at least as many rows as columns".into()));
    }
    let svd = h.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * (h.nrows().max(n) as f64) * f64::EPSILON;
    if smax == 0.0 || svd.rank(tol) < n {
        return Err(KaqError::Singular("channel is rank deficient".into()));
    }
    svd.solve(y, tol).map_err(|e| KaqError::Singular(e.to_string()))
}

/// Linear MMSE: `(HᵀH + (σ²/Es)·I)⁻¹Hᵀy`.
pub fn mmse(h: &DMatrix<f64>, y: &DVector<f64>, noise_to_signal: f64) -> Result<DVector<f64>> {
    let n = h.ncols();
    let a = h.tr_mul(h) + DMatrix::identity(n, n) * noise_to_signal;
    let rhs = h.tr_mul(y);
    match a.clone().cholesky() {
        Some(c) => Ok(c.solve(&rhs)),
        None => a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| KaqError::Singular("MMSE system is singular".into())),
    }
}

pub enum Detector<'a> {
    Unfolded { label: String, state: &'a TrainState },
    ZeroForcing,
    Mmse,
    MaximumLikelihood,
    RandomGuess { seed: u64 },
}

impl Detector<'_> {
    pub fn label(&self) -> String {
        match self {
            Detector::Unfolded { label, .. } => label.clone(),
            Detector::ZeroForcing => "zf".into(),
            Detector::Mmse => "mmse".into(),
            Detector::MaximumLikelihood => "ml".into(),
            Detector::RandomGuess { .. } => "random".into(),
        }
    }

    /// Checks that the detector can run on `config` without doing any work.
    pub fn check(&self, config: &DatasetConfig) -> Result<()> {
        match self {
            Detector::MaximumLikelihood => {
                let size = (config.system.constellation.len() as f64).powi(config.system.n() as i32);
                if size > ML_SEARCH_LIMIT {
                    return Err(KaqError::SearchSpace {
                        size,
                        limit: ML_SEARCH_LIMIT,
                    });
                }
            }
            Detector::Unfolded { .. } | Detector::ZeroForcing | Detector::Mmse | Detector::RandomGuess { .. } => {}
        }
        Ok(())
    }

    pub fn detect(&self, inst: &MimoInstance, index: usize, config: &DatasetConfig) -> Result<DVector<f64>> {
        match self {
            Detector::Unfolded { state, .. } => Ok(state.forward(inst)?.output().clone()),
            Detector::ZeroForcing => zero_forcing(&inst.h, &inst.y),
            Detector::Mmse => mmse(&inst.h, &inst.y, config.system.noise_to_signal(inst.snr_linear)),
            Detector::MaximumLikelihood => ml_oracle(&inst.h, &inst.y, &config.system.constellation),
            Detector::RandomGuess { seed } => {
                let mut rng = instance_rng(*seed, index as u64);
                let c = &config.system.constellation;
                Ok(DVector::from_fn(inst.n(), |_, _| c[rng.random_range(0..c.len())]))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BerRow {
    pub snr_db: f64,
    pub bit_errors: u64,
    pub bits_total: u64,
    pub ber: f64,
    /// Complex symbols with an error on either axis.
    pub symbol_errors: u64,
    pub symbols_total: u64,
    pub ser: f64,
}

impl BerRow {
    /// Binomial standard error of the BER estimate.
    pub fn std_error(&self) -> f64 {
        (self.ber * (1.0 - self.ber) / self.bits_total as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerReport {
    pub detector: String,
    pub rows: Vec<BerRow>,
    pub config: DatasetConfig,
}

impl BerReport {
    pub fn row(&self, snr_db: f64) -> Option<&BerRow> {
        self.rows.iter().find(|r| r.snr_db == snr_db)
    }
}

/// `(bit errors, bits, symbol errors, symbols)` of one estimate.
fn count_errors(x_hat: &[f64], x_true: &[f64], levels: &[f64]) -> (u64, u64, u64, u64) {
    let (_, bits_hat) = demap(x_hat, levels);
    let (_, bits_true) = demap(x_true, levels);
    let bit_errors = bits_hat.iter().zip(&bits_true).filter(|(a, b)| a != b).count() as u64;
    let n = x_true.len();
    let half = n / 2;
    let sym_errors = (0..half)
        .filter(|&i| {
            nearest_level(x_hat[i], levels) != x_true[i] || nearest_level(x_hat[i + half], levels) != x_true[i + half]
        })
        .count() as u64;
    (bit_errors, bits_true.len() as u64, sym_errors, half as u64)
}

/// Runs the detector on every instance and aggregates errors per SNR tag.
pub fn evaluate_ber(detector: &Detector<'_>, dataset: &Dataset) -> Result<BerReport> {
    detector.check(&dataset.config)?;
    let levels = sorted(&dataset.config.system.constellation);
    if levels.len() < 2 {
        return Err(KaqError::InvalidArgument("BER needs at least two levels".into()));
    }
    let counts = dataset
        .instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let x_hat = detector.detect(inst, i, &dataset.config)?;
            Ok(count_errors(x_hat.as_slice(), inst.x_true.as_slice(), &levels))
        })
        .collect::<Result<Vec<_>>>()?;

    let rows = dataset
        .snr_groups()
        .into_iter()
        .map(|(snr_db, idx)| {
            let (mut be, mut bt, mut se, mut st) = (0, 0, 0, 0);
            for i in idx {
                let c = counts[i];
                be += c.0;
                bt += c.1;
                se += c.2;
                st += c.3;
            }
            BerRow {
                snr_db,
                bit_errors: be,
                bits_total: bt,
                ber: be as f64 / bt as f64,
                symbol_errors: se,
                symbols_total: st,
                ser: se as f64 / st.max(1) as f64,
            }
        })
        .collect();
    Ok(BerReport {
        detector: detector.label(),
        rows,
        config: dataset.config.clone(),
    })
}

/// Wall-clock time of running the detector over the dataset (host only).
pub fn time_detector(detector: &Detector<'_>, dataset: &Dataset) -> Result<Duration> {
    detector.check(&dataset.config)?;
    let start = Instant::now();
    for (i, inst) in dataset.instances.iter().enumerate() {
        std::hint::black_box(detector.detect(inst, i, &dataset.config)?);
    }
    Ok(start.elapsed())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub detector: String,
    /// Multiply-adds per forward pass of one instance.
    pub mult_adds: u64,
    /// Bytes of the layer outputs passed between layers.
    pub activation_bytes: u64,
    /// Bytes of the inference-time scalars, stored as float32.
    pub param_bytes: u64,
}

/// PGD layer cost: `Hx` and `Hᵀr` (`MN` each), the residual (`M`), the
/// step `x − ηg` (`N`) and the shrinkage (`N`): `2MN + M + 2N`.
pub fn pgd_layer_ops(m: u64, n: u64) -> u64 {
    2 * m * n + m + 2 * n
}

/// ADMM per-instance setup: `HᵀH` (`MN²`) and `Hᵀy` (`MN`).
pub fn admm_setup_ops(m: u64, n: u64) -> u64 {
    m * n * n + m * n
}

/// ADMM layer cost: Cholesky of `HᵀH + ρI` (`N(N²−1)/6` multiply-adds plus
/// `N(N+1)/2` divisions and square roots), two triangular solves (`N(N+1)`)
/// and six vector passes (`6N`).
pub fn admm_layer_ops(n: u64) -> u64 {
    n * (n * n - 1) / 6 + n * (n + 1) / 2 + n * (n + 1) + 6 * n
}

/// Operation and storage counts of a `layers`-layer network; `bits` is the
/// activation width (`None` for the float32 reference). Quantization
/// changes storage width only, never the operation count.
pub fn count_complexity(
    label: &str,
    variant: Variant,
    layers: usize,
    bits: Option<u32>,
    m: usize,
    n: usize,
) -> ComplexityReport {
    let (k, m64, n64) = (layers as u64, m as u64, n as u64);
    let width = bits.unwrap_or(32) as u64;
    let (mult_adds, act_bits, scalars) = match variant {
        Variant::Pgd => (k * pgd_layer_ops(m64, n64), k * n64 * width, 2 * k),
        // z is quantized, the scaled dual u stays float32
        Variant::Admm => (
            if k == 0 { 0 } else { admm_setup_ops(m64, n64) + k * admm_layer_ops(n64) },
            k * n64 * (width + 32),
            2 * k,
        ),
    };
    let step_scalars = if bits.is_some() { k } else { 0 };
    ComplexityReport {
        detector: label.to_string(),
        mult_adds,
        activation_bytes: act_bits.div_ceil(8),
        param_bytes: 4 * (scalars + step_scalars),
    }
}

/// Complexity of a trained network at its own quantization width.
pub fn state_complexity(label: &str, state: &TrainState, m: usize, n: usize) -> ComplexityReport {
    count_complexity(
        label,
        state.params.variant,
        state.params.layers(),
        state.quant.as_ref().map(|q| q.bits),
        m,
        n,
    )
}
