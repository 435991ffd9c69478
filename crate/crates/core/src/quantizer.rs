//! Symmetric uniform fake quantization of layer activations.
//!
//! A value is mapped to `Δ·clamp(round(x/Δ), −q, q)` with `q = 2^(b−1) − 1`
//! and rounding half away from zero, which keeps the quantizer odd. The
//! straight-through mask is 1 on the closed interval `[−qΔ, qΔ]` and 0 where
//! the clamp saturates.
//!
//! Step sizes are either free per-layer values ([`StepSize::Static`]) or the
//! SNR-driven model `Δ = α·snr^(−1/2) + γ` ([`StepSize::Dynamic`]). All of
//! them are stored as logarithms so that they stay positive under gradient
//! updates; the natural values are recovered with `exp` on every use.

use serde::{Deserialize, Serialize};

use crate::error::{KaqError, Result};

/// Lower bound used when the calibration activations are all zero.
pub const STEP_FLOOR: f64 = 1e-6;

pub const DEFAULT_BITS: u32 = 8;

/// Largest representable integer code, `2^(b−1) − 1`.
pub fn max_code(bits: u32) -> f64 {
    ((1u64 << (bits - 1)) - 1) as f64
}

fn check_bits(bits: u32) -> Result<()> {
    if !(2..=32).contains(&bits) {
        return Err(KaqError::InvalidArgument(format!(
            "bit width must lie in 2..=32, got {bits}"
        )));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(KaqError::InvalidArgument(format!(
            "quantization step must be positive and finite, got {delta}"
        )));
    }
    Ok(())
}

/// Integer code of one value (clamped).
#[inline]
pub fn quantize_code(x: f64, delta: f64, qmax: f64) -> f64 {
    (x / delta).round().clamp(-qmax, qmax)
}

pub fn quantize(x: &[f64], delta: f64, bits: u32) -> Result<Vec<f64>> {
    check_bits(bits)?;
    check_delta(delta)?;
    let qmax = max_code(bits);
    Ok(x.iter().map(|&v| delta * quantize_code(v, delta, qmax)).collect())
}

/// `max|x| / (2^(b−1) − 1)`, or [`STEP_FLOOR`] for an all-zero input.
pub fn initial_step_size(x: &[f64], bits: u32) -> Result<f64> {
    check_bits(bits)?;
    if x.is_empty() {
        return Err(KaqError::InvalidArgument(
            "cannot calibrate a step size from an empty activation set".into(),
        ));
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak == 0.0 {
        return Ok(STEP_FLOOR);
    }
    Ok(peak / max_code(bits))
}

/// `α·snr^(−1/2) + γ` with a linear SNR.
pub fn dynamic_step_size(alpha: f64, gamma: f64, snr_linear: f64) -> Result<f64> {
    if !(snr_linear > 0.0) {
        return Err(KaqError::InvalidArgument(format!(
            "SNR must be positive, got {snr_linear}"
        )));
    }
    let delta = alpha / snr_linear.sqrt() + gamma;
    if !(delta > 0.0) {
        return Err(KaqError::Config(format!(
            "step size α·snr^(-1/2)+γ = {delta} is not positive at snr {snr_linear}"
        )));
    }
    Ok(delta)
}

/// 1 where the quantizer passes gradients straight through, 0 where it saturates.
pub fn ste_mask(x: &[f64], delta: f64, bits: u32) -> Result<Vec<f64>> {
    check_bits(bits)?;
    check_delta(delta)?;
    let limit = delta * max_code(bits);
    Ok(x.iter().map(|&v| ste_pass(v, limit)).collect())
}

#[inline]
pub(crate) fn ste_pass(v: f64, limit: f64) -> f64 {
    if v.abs() <= limit {
        1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSize {
    /// Free per-layer steps, `log Δ^(k)`.
    Static { log_delta: Vec<f64> },
    /// Per-layer coefficients of `Δ^(k) = α_k·snr^(−1/2) + γ_k`, as logarithms.
    Dynamic {
        log_alpha: Vec<f64>,
        log_gamma: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub step: StepSize,
}

impl QuantConfig {
    pub fn new_static(bits: u32, delta: &[f64]) -> Result<Self> {
        check_bits(bits)?;
        for &d in delta {
            check_delta(d)?;
        }
        Ok(Self {
            bits,
            step: StepSize::Static {
                log_delta: delta.iter().map(|d| d.ln()).collect(),
            },
        })
    }

    pub fn new_dynamic(bits: u32, alpha: &[f64], gamma: &[f64]) -> Result<Self> {
        check_bits(bits)?;
        if alpha.len() != gamma.len() {
            return Err(KaqError::Dimension(format!(
                "{} α coefficients but {} γ coefficients",
                alpha.len(),
                gamma.len()
            )));
        }
        if alpha.iter().chain(gamma).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(KaqError::Config(
                "dynamic step coefficients α and γ must be positive".into(),
            ));
        }
        Ok(Self {
            bits,
            step: StepSize::Dynamic {
                log_alpha: alpha.iter().map(|a| a.ln()).collect(),
                log_gamma: gamma.iter().map(|g| g.ln()).collect(),
            },
        })
    }

    pub fn layers(&self) -> usize {
        match &self.step {
            StepSize::Static { log_delta } => log_delta.len(),
            StepSize::Dynamic { log_alpha, .. } => log_alpha.len(),
        }
    }

    pub fn is_dynamic(&self) -> bool {
        matches!(self.step, StepSize::Dynamic { .. })
    }

    pub fn alpha(&self) -> Option<Vec<f64>> {
        match &self.step {
            StepSize::Dynamic { log_alpha, .. } => Some(log_alpha.iter().map(|v| v.exp()).collect()),
            StepSize::Static { .. } => None,
        }
    }

    pub fn gamma(&self) -> Option<Vec<f64>> {
        match &self.step {
            StepSize::Dynamic { log_gamma, .. } => Some(log_gamma.iter().map(|v| v.exp()).collect()),
            StepSize::Static { .. } => None,
        }
    }

    /// Per-layer step sizes in effect for an instance at `snr_linear`.
    pub fn layer_steps(&self, snr_linear: f64) -> Result<LayerQuant> {
        let deltas = match &self.step {
            StepSize::Static { log_delta } => log_delta.iter().map(|v| v.exp()).collect(),
            StepSize::Dynamic {
                log_alpha,
                log_gamma,
            } => log_alpha
                .iter()
                .zip(log_gamma)
                .map(|(a, g)| dynamic_step_size(a.exp(), g.exp(), snr_linear))
                .collect::<Result<Vec<_>>>()?,
        };
        Ok(LayerQuant {
            bits: self.bits,
            deltas,
        })
    }
}

/// Quantization resolved for one forward pass: bit width and one step per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerQuant {
    pub bits: u32,
    pub deltas: Vec<f64>,
}

impl LayerQuant {
    pub fn new(bits: u32, deltas: Vec<f64>) -> Result<Self> {
        check_bits(bits)?;
        for &d in &deltas {
            check_delta(d)?;
        }
        Ok(Self { bits, deltas })
    }
}
