//! Kernel-based adaptive quantization for deep-unfolded MIMO detectors.
//!
//! The crate simulates real-embedded Rayleigh MIMO detection problems,
//! runs unrolled PGD and ADMM detectors with fake-quantized layer outputs,
//! trains them with an MSE plus Gaussian-kernel MMD objective and an
//! SNR-driven step size, and measures BER and cost against full-precision
//! and MSE-only baselines.

// NaN-rejecting comparisons like `!(x > 0.0)` are intentional.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod kernel;
pub mod mimo;
pub mod quantizer;
pub mod training;
pub mod unfolded;

pub use config::RunConfig;
pub use error::{KaqError, Result};
pub use eval::{evaluate_ber, BerReport, BerRow, ComplexityReport, Detector};
pub use io::Checkpoint;
pub use kernel::{ActivationBatch, Bandwidths, GradientForm, KernelParams};
pub use mimo::{build_dataset, ComplexSystem, Dataset, DatasetConfig, MimoInstance, SnrConvention};
pub use quantizer::{LayerQuant, QuantConfig, StepSize};
pub use training::{train, EpochStats, QuantMode, TrainConfig, TrainState};
pub use unfolded::{forward, ForwardTrace, UnfoldedParams, Variant};
