//! Quantization-aware training of the unrolled detectors.
//!
//! One optimization step runs the fake-quantized forward pass over a
//! mini-batch, evaluates
//!
//! ```text
//! L = (1/B)·Σ_b ‖x_true,b − x_S,b^(K)‖² + ε·Σ_k MMD²_k
//! ```
//! backpropagates it by hand through the unrolled layers, and applies Adam.
//! Mini-batches never mix SNR tags, so the SNR-driven step sizes are
//! well defined per batch.
//!
//! Positive scalars of the quantizer and kernel (`Δ`, `α`, `γ`, `σ`) are
//! optimized in log space. Network scalars are optimized directly and
//! projected back onto `η, ρ ≥ 1e-6`, `λ ≥ 0` after every step.

mod adam;
mod backprop;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use adam::{AdamState, BETA1, BETA2, EPS as ADAM_EPS};

use crate::error::{KaqError, Result};
use crate::eval::nearest_level;
use crate::kernel::{median_heuristic, mmd2_with_grad, ActivationBatch, GradientForm, KernelParams};
use crate::mimo::{db_to_linear, Dataset, MimoInstance};
use crate::quantizer::{initial_step_size, QuantConfig, StepSize, DEFAULT_BITS};
use crate::unfolded::{forward, ForwardTrace, UnfoldedParams, Variant};
use backprop::{reverse, InstanceGrads, Injected};

/// Floor applied to `η` and `ρ` after each update.
pub const PARAM_FLOOR: f64 = 1e-6;

const SHUFFLE_DOMAIN: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuantMode {
    /// Full precision, MSE only.
    Fp,
    /// Static per-layer steps, MSE only.
    QatMse,
    /// MSE plus the kernel MMD term, SNR-driven steps by default.
    Kaq,
}

impl QuantMode {
    pub fn name(self) -> &'static str {
        match self {
            QuantMode::Fp => "fp",
            QuantMode::QatMse => "qat-mse",
            QuantMode::Kaq => "kaq",
        }
    }
}

impl std::fmt::Display for QuantMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for QuantMode {
    type Err = KaqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp" => Ok(QuantMode::Fp),
            "qat-mse" => Ok(QuantMode::QatMse),
            "kaq" => Ok(QuantMode::Kaq),
            other => Err(KaqError::Config(format!(
                "unknown mode '{other}' (expected fp, qat-mse or kaq)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub variant: Variant,
    pub layers: usize,
    pub eta_init: f64,
    pub lambda_init: f64,
    pub rho_init: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Pgd,
            layers: 5,
            eta_init: 0.1,
            lambda_init: 0.05,
            rho_init: 1.0,
        }
    }
}

impl NetConfig {
    pub fn init_params(&self) -> Result<UnfoldedParams> {
        let p = match self.variant {
            Variant::Pgd => UnfoldedParams::pgd(self.layers, self.eta_init, self.lambda_init),
            Variant::Admm => UnfoldedParams::admm(self.layers, self.rho_init, self.lambda_init),
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuantSettings {
    pub mode: QuantMode,
    pub bits: u32,
    /// SNR-driven steps; defaults to on for `kaq`. Not allowed for `qat-mse`.
    pub dynamic: Option<bool>,
    pub alpha_init: f64,
    /// Overrides the calibration-derived `γ`.
    pub gamma_init: Option<f64>,
}

impl Default for QuantSettings {
    fn default() -> Self {
        Self {
            mode: QuantMode::Kaq,
            bits: DEFAULT_BITS,
            dynamic: None,
            alpha_init: 0.01,
            gamma_init: None,
        }
    }
}

impl QuantSettings {
    pub fn is_dynamic(&self) -> bool {
        match self.mode {
            QuantMode::Fp | QuantMode::QatMse => false,
            QuantMode::Kaq => self.dynamic.unwrap_or(true),
        }
    }
}

/// Bandwidth initialization: median pairwise distance or a fixed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SigmaInit {
    Median,
    Fixed(f64),
}

impl TryFrom<String> for SigmaInit {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        if s == "median" {
            return Ok(SigmaInit::Median);
        }
        if let Some(v) = s.strip_prefix("fixed:") {
            let v: f64 = v.trim().parse().map_err(|e| format!("bad sigma_init value: {e}"))?;
            if v > 0.0 && v.is_finite() {
                return Ok(SigmaInit::Fixed(v));
            }
            return Err("sigma_init must be positive".into());
        }
        Err(format!("sigma_init must be 'median' or 'fixed:<value>', got '{s}'"))
    }
}

impl From<SigmaInit> for String {
    fn from(s: SigmaInit) -> String {
        match s {
            SigmaInit::Median => "median".into(),
            SigmaInit::Fixed(v) => format!("fixed:{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSettings {
    /// Weight of the MMD term.
    pub epsilon: f64,
    pub sigma_init: SigmaInit,
    pub gradient: GradientForm,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            sigma_init: SigmaInit::Median,
            gradient: GradientForm::Total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub net: NetConfig,
    pub quant: QuantSettings,
    pub kernel: KernelSettings,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_period: usize,
    pub seed: u64,
    pub calibration_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            quant: QuantSettings::default(),
            kernel: KernelSettings::default(),
            epochs: 50,
            batch_size: 128,
            lr: 1e-3,
            lr_halving_period: 10,
            seed: 0,
            calibration_samples: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(KaqError::Config("batch_size must be at least 2".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(KaqError::Config("lr must be positive".into()));
        }
        if self.lr_halving_period == 0 {
            return Err(KaqError::Config("lr_halving_period must be at least 1".into()));
        }
        if self.net.layers == 0 && self.quant.mode != QuantMode::Fp {
            return Err(KaqError::Config("quantized training needs at least one layer".into()));
        }
        if self.quant.mode == QuantMode::QatMse && self.quant.dynamic == Some(true) {
            return Err(KaqError::Config("qat-mse uses static step sizes".into()));
        }
        if !(self.kernel.epsilon >= 0.0 && self.kernel.epsilon.is_finite()) {
            return Err(KaqError::Config("epsilon must be nonnegative".into()));
        }
        if !(self.quant.alpha_init > 0.0 && self.quant.alpha_init.is_finite()) {
            return Err(KaqError::Config("alpha_init must be positive".into()));
        }
        if matches!(self.quant.gamma_init, Some(g) if !(g > 0.0 && g.is_finite())) {
            return Err(KaqError::Config("gamma_init must be positive".into()));
        }
        if self.calibration_samples == 0 {
            return Err(KaqError::Config("calibration_samples must be at least 1".into()));
        }
        self.net.init_params().map(|_| ())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let halvings = (epoch / self.lr_halving_period) as i32;
        self.lr * 0.5f64.powi(halvings)
    }
}

/// All learnables plus optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: UnfoldedParams,
    pub quant: Option<QuantConfig>,
    pub kernel: Option<KernelParams>,
    pub adam: AdamState,
    /// Number of completed epochs.
    pub epoch: usize,
}

/// Gradients with respect to the natural (not log-scaled) learnables.
/// Vectors of absent parameter classes are empty.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub eta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
    pub delta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub gamma: Vec<f64>,
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub sigma3: Vec<f64>,
}

impl TrainState {
    pub fn new(params: UnfoldedParams, quant: Option<QuantConfig>, kernel: Option<KernelParams>) -> Result<Self> {
        params.validate()?;
        let k = params.layers();
        if let Some(q) = &quant {
            if q.layers() != k {
                return Err(KaqError::Dimension(format!("quantizer has {} layers, network {k}", q.layers())));
            }
        }
        if let Some(kp) = &kernel {
            if quant.is_none() {
                return Err(KaqError::Config("the kernel loss needs quantized activations".into()));
            }
            if kp.layers() != k || kp.log_sigma2.len() != k || kp.log_sigma3.len() != k {
                return Err(KaqError::Dimension(format!("kernel has {} layers, network {k}", kp.layers())));
            }
        }
        let mut state = Self {
            params,
            quant,
            kernel,
            adam: AdamState::new(0),
            epoch: 0,
        };
        state.adam = AdamState::new(state.raw_params().len());
        Ok(state)
    }

    pub fn mode(&self) -> QuantMode {
        match (&self.quant, &self.kernel) {
            (None, _) => QuantMode::Fp,
            (Some(_), None) => QuantMode::QatMse,
            (Some(_), Some(_)) => QuantMode::Kaq,
        }
    }

    fn step_params(&self) -> &Vec<f64> {
        match self.params.variant {
            Variant::Pgd => &self.params.eta,
            Variant::Admm => &self.params.rho,
        }
    }

    /// Unconstrained parameter vector seen by the optimizer, in the order
    /// step (η or ρ), λ, quantizer logs, kernel logs.
    pub fn raw_params(&self) -> Vec<f64> {
        let mut out = self.step_params().clone();
        out.extend_from_slice(&self.params.lambda);
        match self.quant.as_ref().map(|q| &q.step) {
            Some(StepSize::Static { log_delta }) => out.extend_from_slice(log_delta),
            Some(StepSize::Dynamic { log_alpha, log_gamma }) => {
                out.extend_from_slice(log_alpha);
                out.extend_from_slice(log_gamma);
            }
            None => {}
        }
        if let Some(kp) = &self.kernel {
            out.extend_from_slice(&kp.log_sigma1);
            out.extend_from_slice(&kp.log_sigma2);
            out.extend_from_slice(&kp.log_sigma3);
        }
        out
    }

    pub fn set_raw_params(&mut self, raw: &[f64]) -> Result<()> {
        if raw.len() != self.raw_params().len() {
            return Err(KaqError::Dimension(format!(
                "expected {} raw parameters, got {}",
                self.raw_params().len(),
                raw.len()
            )));
        }
        let k = self.params.layers();
        let mut chunks = raw.chunks(k.max(1));
        let mut next = || -> Vec<f64> {
            if k == 0 {
                Vec::new()
            } else {
                chunks.next().unwrap().to_vec()
            }
        };
        match self.params.variant {
            Variant::Pgd => self.params.eta = next(),
            Variant::Admm => self.params.rho = next(),
        }
        self.params.lambda = next();
        if let Some(q) = &mut self.quant {
            match &mut q.step {
                StepSize::Static { log_delta } => *log_delta = next(),
                StepSize::Dynamic { log_alpha, log_gamma } => {
                    *log_alpha = next();
                    *log_gamma = next();
                }
            }
        }
        if let Some(kp) = &mut self.kernel {
            kp.log_sigma1 = next();
            kp.log_sigma2 = next();
            kp.log_sigma3 = next();
        }
        Ok(())
    }

    /// Chains natural-scale gradients onto the raw parameterization.
    pub fn raw_gradient(&self, g: &Gradients) -> Result<Vec<f64>> {
        let scaled = |grads: &[f64], logs: &[f64]| -> Vec<f64> {
            grads.iter().zip(logs).map(|(g, l)| g * l.exp()).collect()
        };
        let mut out = match self.params.variant {
            Variant::Pgd => g.eta.clone(),
            Variant::Admm => g.rho.clone(),
        };
        out.extend_from_slice(&g.lambda);
        match self.quant.as_ref().map(|q| &q.step) {
            Some(StepSize::Static { log_delta }) => out.extend(scaled(&g.delta, log_delta)),
            Some(StepSize::Dynamic { log_alpha, log_gamma }) => {
                out.extend(scaled(&g.alpha, log_alpha));
                out.extend(scaled(&g.gamma, log_gamma));
            }
            None => {}
        }
        if let Some(kp) = &self.kernel {
            out.extend(scaled(&g.sigma1, &kp.log_sigma1));
            out.extend(scaled(&g.sigma2, &kp.log_sigma2));
            out.extend(scaled(&g.sigma3, &kp.log_sigma3));
        }
        if out.len() != self.adam.m.len() {
            return Err(KaqError::Dimension("gradients do not match the learnables".into()));
        }
        Ok(out)
    }

    /// One Adam update of every learnable followed by the feasibility projection.
    pub fn adam_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        let g = self.raw_gradient(grads)?;
        let mut raw = self.raw_params();
        self.adam.update(&mut raw, &g, lr);
        self.set_raw_params(&raw)?;
        for v in self.params.eta.iter_mut().chain(self.params.rho.iter_mut()) {
            *v = v.max(PARAM_FLOOR);
        }
        for v in self.params.lambda.iter_mut() {
            *v = v.max(0.0);
        }
        Ok(())
    }

    /// Forward pass for one instance with the steps for its SNR.
    pub fn forward(&self, inst: &MimoInstance) -> Result<ForwardTrace> {
        let lq = match &self.quant {
            Some(q) => Some(q.layer_steps(inst.snr_linear)?),
            None => None,
        };
        forward(&self.params, &inst.h, &inst.y, lq.as_ref())
    }

    pub fn forward_batch(&self, batch: &[&MimoInstance]) -> Result<Vec<ForwardTrace>> {
        batch.par_iter().map(|inst| self.forward(inst)).collect()
    }
}

/// Terms of the total loss for one batch.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub loss: f64,
    pub mse: f64,
    /// `Σ_k MMD²_k`, before weighting.
    pub mmd: f64,
}

fn check_batch(batch: &[&MimoInstance], traces: &[ForwardTrace], state: &TrainState) -> Result<()> {
    if batch.is_empty() {
        return Err(KaqError::InvalidArgument("empty batch".into()));
    }
    if traces.len() != batch.len() {
        return Err(KaqError::InvalidArgument(format!(
            "{} forward traces recorded for a batch of {}",
            traces.len(),
            batch.len()
        )));
    }
    if state.kernel.is_some() && batch.len() < 2 {
        return Err(KaqError::InvalidArgument("the kernel loss needs a batch of at least 2".into()));
    }
    Ok(())
}

fn layer_batches(traces: &[ForwardTrace], k: usize) -> Result<(ActivationBatch, ActivationBatch)> {
    let fp: Vec<&[f64]> = traces.iter().map(|t| t.x[k + 1].as_slice()).collect();
    let q = traces
        .iter()
        .map(|t| {
            t.x_q
                .as_ref()
                .map(|xq| xq[k].as_slice())
                .ok_or_else(|| KaqError::InvalidArgument("trace has no quantized activations".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((ActivationBatch::from_rows(&fp)?, ActivationBatch::from_rows(&q)?))
}

fn batch_mse(batch: &[&MimoInstance], traces: &[ForwardTrace]) -> f64 {
    let b = batch.len() as f64;
    batch
        .iter()
        .zip(traces)
        .map(|(inst, t)| (t.output() - &inst.x_true).norm_squared())
        .sum::<f64>()
        / b
}

/// `(1/B)Σ‖x_true − x_S^(K)‖² + ε·Σ_k MMD²_k` over recorded traces.
pub fn total_loss(
    batch: &[&MimoInstance],
    traces: &[ForwardTrace],
    state: &TrainState,
    cfg: &KernelSettings,
) -> Result<LossTerms> {
    check_batch(batch, traces, state)?;
    let mse = batch_mse(batch, traces);
    let mut mmd = 0.0;
    if let Some(kp) = &state.kernel {
        for k in 0..state.params.layers() {
            let (fp, q) = layer_batches(traces, k)?;
            mmd += crate::kernel::mmd2(&fp, &q, kp.bandwidths(k))?;
        }
    }
    Ok(LossTerms {
        loss: mse + cfg.epsilon * mmd,
        mse,
        mmd,
    })
}

/// Reverse-mode gradients of [`total_loss`] over recorded traces.
pub fn backward(
    batch: &[&MimoInstance],
    traces: &[ForwardTrace],
    state: &TrainState,
    cfg: &KernelSettings,
) -> Result<(LossTerms, Gradients)> {
    check_batch(batch, traces, state)?;
    let k_layers = state.params.layers();
    let bsz = batch.len();
    let mse = batch_mse(batch, traces);

    let mut grads = Gradients {
        lambda: vec![0.0; k_layers],
        ..Default::default()
    };
    match state.params.variant {
        Variant::Pgd => grads.eta = vec![0.0; k_layers],
        Variant::Admm => grads.rho = vec![0.0; k_layers],
    }

    // kernel term: per-sample gradients at every layer's activations
    let mut mmd = 0.0;
    let mut inj_fp: Vec<Vec<DVector<f64>>> = Vec::new();
    let mut inj_q: Vec<Vec<DVector<f64>>> = Vec::new();
    if let Some(kp) = &state.kernel {
        let eps = cfg.epsilon;
        let n = batch[0].n();
        inj_fp = vec![Vec::with_capacity(k_layers); bsz];
        inj_q = vec![Vec::with_capacity(k_layers); bsz];
        grads.sigma1 = vec![0.0; k_layers];
        grads.sigma2 = vec![0.0; k_layers];
        grads.sigma3 = vec![0.0; k_layers];
        for k in 0..k_layers {
            let (fp, q) = layer_batches(traces, k)?;
            let bw = kp.bandwidths(k);
            let ev = mmd2_with_grad(&fp, &q, bw, cfg.gradient)?;
            mmd += ev.value;
            grads.sigma1[k] = eps * ev.grad_sigma[0];
            grads.sigma2[k] = eps * ev.grad_sigma[1];
            grads.sigma3[k] = eps * ev.grad_sigma[2];
            for b in 0..bsz {
                inj_fp[b].push(DVector::from_fn(n, |i, _| eps * ev.grad_fp[b * n + i]));
                inj_q[b].push(DVector::from_fn(n, |i, _| eps * ev.grad_q[b * n + i]));
            }
        }
    }

    let scale = 2.0 / bsz as f64;
    let per_instance: Vec<InstanceGrads> = (0..bsz)
        .into_par_iter()
        .map(|b| {
            let inst = batch[b];
            let t = &traces[b];
            let top = (t.output() - &inst.x_true) * scale;
            let inj = Injected {
                fp: inj_fp.get(b).map(|v| v.as_slice()),
                q: inj_q.get(b).map(|v| v.as_slice()),
            };
            reverse(&state.params, &inst.h, t, &top, &inj)
        })
        .collect::<Result<Vec<_>>>()?;

    let dynamic = state.quant.as_ref().map(|q| q.is_dynamic());
    match dynamic {
        Some(false) => grads.delta = vec![0.0; k_layers],
        Some(true) => {
            grads.alpha = vec![0.0; k_layers];
            grads.gamma = vec![0.0; k_layers];
        }
        None => {}
    }
    for (inst, g) in batch.iter().zip(&per_instance) {
        let step = match state.params.variant {
            Variant::Pgd => &mut grads.eta,
            Variant::Admm => &mut grads.rho,
        };
        for k in 0..k_layers {
            step[k] += g.step[k];
            grads.lambda[k] += g.lambda[k];
        }
        match dynamic {
            Some(false) => {
                for k in 0..k_layers {
                    grads.delta[k] += g.delta[k];
                }
            }
            Some(true) => {
                let s = 1.0 / inst.snr_linear.sqrt();
                for k in 0..k_layers {
                    grads.alpha[k] += g.delta[k] * s;
                    grads.gamma[k] += g.delta[k];
                }
            }
            None => {}
        }
    }

    Ok((
        LossTerms {
            loss: mse + cfg.epsilon * mmd,
            mse,
            mmd,
        },
        grads,
    ))
}

/// Forward pass, loss and gradients for one batch.
pub fn loss_and_grad(
    batch: &[&MimoInstance],
    state: &TrainState,
    cfg: &KernelSettings,
) -> Result<(LossTerms, Gradients, Vec<ForwardTrace>)> {
    let traces = state.forward_batch(batch)?;
    let (terms, grads) = backward(batch, &traces, state, cfg)?;
    Ok((terms, grads, traces))
}

/// Per-epoch training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    pub mmd: f64,
    /// Fraction of real symbol coordinates detected correctly.
    pub accuracy: f64,
}

/// Calibration subset: the first `limit` instances of the middle SNR tag.
fn calibration_indices(dataset: &Dataset, limit: usize) -> (f64, Vec<usize>) {
    let mut groups = dataset.snr_groups();
    groups.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (snr_db, idx) = groups.swap_remove(groups.len() / 2);
    (snr_db, idx.into_iter().take(limit).collect())
}

/// Builds the initial state: network scalars from the config, quantizer
/// steps from the calibration activations, bandwidths from their median
/// pairwise distance.
pub fn init_state(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(KaqError::InvalidArgument("empty training set".into()));
    }
    let params = cfg.net.init_params()?;
    let k_layers = params.layers();
    if cfg.quant.mode == QuantMode::Fp {
        return TrainState::new(params, None, None);
    }

    let (snr_db, idx) = calibration_indices(dataset, cfg.calibration_samples);
    let snr_mid = db_to_linear(snr_db);
    let traces = idx
        .par_iter()
        .map(|&i| {
            let inst = &dataset.instances[i];
            forward(&params, &inst.h, &inst.y, None)
        })
        .collect::<Result<Vec<_>>>()?;

    let bits = cfg.quant.bits;
    let mut deltas = Vec::with_capacity(k_layers);
    let mut sigmas = Vec::with_capacity(k_layers);
    for k in 1..=k_layers {
        let values: Vec<f64> = traces.iter().flat_map(|t| t.x[k].iter().copied()).collect();
        deltas.push(initial_step_size(&values, bits)?);
        sigmas.push(match cfg.kernel.sigma_init {
            SigmaInit::Fixed(v) => v,
            SigmaInit::Median => {
                let rows: Vec<&[f64]> = traces.iter().map(|t| t.x[k].as_slice()).collect();
                median_heuristic(&ActivationBatch::from_rows(&rows)?)
            }
        });
    }

    let quant = if cfg.quant.is_dynamic() {
        // match the calibration step at the middle SNR, keeping γ ≥ Δ/2
        let s = 1.0 / snr_mid.sqrt();
        let alpha: Vec<f64> = deltas.iter().map(|d| cfg.quant.alpha_init.min(0.5 * d / s)).collect();
        let gamma: Vec<f64> = match cfg.quant.gamma_init {
            Some(g) => vec![g; k_layers],
            None => deltas.iter().zip(&alpha).map(|(d, a)| d - a * s).collect(),
        };
        QuantConfig::new_dynamic(bits, &alpha, &gamma)?
    } else {
        QuantConfig::new_static(bits, &deltas)?
    };
    let kernel = match cfg.quant.mode {
        QuantMode::Kaq => Some(KernelParams::shared(&sigmas)?),
        _ => None,
    };
    TrainState::new(params, Some(quant), kernel)
}

/// SNR-homogeneous mini-batches for `epoch`, in shuffled order.
pub fn epoch_batches(dataset: &Dataset, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ SHUFFLE_DOMAIN);
    rng.set_stream(epoch as u64);
    let mut batches = Vec::new();
    for (_, mut idx) in dataset.snr_groups() {
        idx.shuffle(&mut rng);
        batches.extend(idx.chunks(batch_size).filter(|c| c.len() >= 2).map(|c| c.to_vec()));
    }
    batches.shuffle(&mut rng);
    batches
}

fn count_correct(batch: &[&MimoInstance], traces: &[ForwardTrace], levels: &[f64]) -> usize {
    batch
        .iter()
        .zip(traces)
        .map(|(inst, t)| {
            t.output()
                .iter()
                .zip(inst.x_true.iter())
                .filter(|(est, truth)| nearest_level(**est, levels) == **truth)
                .count()
        })
        .sum()
}

/// Runs one epoch and advances `state.epoch`.
pub fn run_epoch(state: &mut TrainState, dataset: &Dataset, cfg: &TrainConfig) -> Result<EpochStats> {
    let epoch = state.epoch;
    let lr = cfg.lr_at(epoch);
    let mut levels = dataset.config.system.constellation.clone();
    levels.sort_by(f64::total_cmp);

    let batches = epoch_batches(dataset, cfg.batch_size, cfg.seed, epoch);
    if batches.is_empty() {
        return Err(KaqError::InvalidArgument(
            "no SNR group has enough samples for a batch of 2".into(),
        ));
    }
    let (mut loss, mut mse, mut mmd) = (0.0, 0.0, 0.0);
    let (mut correct, mut total) = (0usize, 0usize);
    for idx in &batches {
        let batch: Vec<&MimoInstance> = idx.iter().map(|&i| &dataset.instances[i]).collect();
        let (terms, grads, traces) = loss_and_grad(&batch, state, &cfg.kernel)?;
        correct += count_correct(&batch, &traces, &levels);
        total += batch.len() * dataset.n();
        loss += terms.loss;
        mse += terms.mse;
        mmd += terms.mmd;
        state.adam_step(&grads, lr)?;
    }
    state.epoch += 1;
    let nb = batches.len() as f64;
    Ok(EpochStats {
        epoch,
        lr,
        loss: loss / nb,
        mse: mse / nb,
        mmd: mmd / nb,
        accuracy: correct as f64 / total as f64,
    })
}

/// Continues training until `cfg.epochs` epochs are complete.
pub fn resume(state: &mut TrainState, dataset: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    let mut history = Vec::new();
    while state.epoch < cfg.epochs {
        history.push(run_epoch(state, dataset, cfg)?);
    }
    Ok(history)
}

/// Calibrates and trains from scratch.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(TrainState, Vec<EpochStats>)> {
    let mut state = init_state(dataset, cfg)?;
    let history = resume(&mut state, dataset, cfg)?;
    Ok((state, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mimo::{build_dataset, ComplexSystem, DatasetConfig};

    fn small_dataset(count: usize) -> Dataset {
        build_dataset(
            &DatasetConfig {
                system: ComplexSystem::new(2, 2, vec![-1.0, 1.0]).unwrap(),
                snr_db: vec![5.0, 10.0, 15.0],
                count,
            },
            11,
        )
        .unwrap()
    }

    #[test]
    fn defaults_match_protocol() {
        let c = TrainConfig::default();
        assert_eq!(c.net.layers, 5);
        assert_eq!(c.net.eta_init, 0.1);
        assert_eq!(c.net.lambda_init, 0.05);
        assert_eq!(c.quant.bits, 8);
        assert_eq!((c.epochs, c.batch_size, c.lr, c.lr_halving_period), (50, 128, 1e-3, 10));
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        for e in 0..50 {
            assert_eq!(c.lr_at(e), 1e-3 * 2f64.powi(-((e / 10) as i32)));
        }
        assert_eq!(c.lr_at(10), 5e-4);
    }

    #[test]
    fn zero_epochs_returns_initial_state() {
        let ds = small_dataset(30);
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let (state, history) = train(&ds, &cfg).unwrap();
        assert!(history.is_empty());
        assert_eq!(state.epoch, 0);
        assert_eq!(state.params.eta, vec![0.1; 5]);
        assert_eq!(state.params.lambda, vec![0.05; 5]);
        assert!(state.quant.as_ref().unwrap().is_dynamic());
    }

    #[test]
    fn mode_structure() {
        let ds = small_dataset(30);
        for (mode, quant, kernel) in [
            (QuantMode::Fp, false, false),
            (QuantMode::QatMse, true, false),
            (QuantMode::Kaq, true, true),
        ] {
            let mut cfg = TrainConfig::default();
            cfg.quant.mode = mode;
            let s = init_state(&ds, &cfg).unwrap();
            assert_eq!(s.quant.is_some(), quant);
            assert_eq!(s.kernel.is_some(), kernel);
            assert_eq!(s.mode(), mode);
        }
    }

    #[test]
    fn raw_roundtrip() {
        let ds = small_dataset(30);
        let s = init_state(&ds, &TrainConfig::default()).unwrap();
        let mut t = s.clone();
        t.set_raw_params(&s.raw_params()).unwrap();
        assert_eq!(s, t);
        assert_eq!(s.raw_params().len(), 5 * 7);
    }

    #[test]
    fn backward_requires_traces() {
        let ds = small_dataset(6);
        let s = init_state(&ds, &TrainConfig::default()).unwrap();
        let batch: Vec<&MimoInstance> = ds.instances.iter().take(3).collect();
        let traces = s.forward_batch(&batch[..2]).unwrap();
        assert!(backward(&batch, &traces, &s, &KernelSettings::default()).is_err());
    }

    #[test]
    fn dead_zone_blocks_step_gradients() {
        let ds = small_dataset(6);
        let mut cfg = TrainConfig::default();
        cfg.quant.mode = QuantMode::Fp;
        cfg.net.lambda_init = 1e6;
        let s = init_state(&ds, &cfg).unwrap();
        let batch: Vec<&MimoInstance> = ds.instances.iter().collect();
        let (_, g, _) = loss_and_grad(&batch, &s, &cfg.kernel).unwrap();
        assert!(g.eta.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn batches_are_snr_homogeneous() {
        let ds = small_dataset(100);
        let batches = epoch_batches(&ds, 8, 3, 0);
        for b in &batches {
            let snr = ds.instances[b[0]].snr_db;
            assert!(b.iter().all(|&i| ds.instances[i].snr_db == snr));
            assert!(b.len() >= 2);
        }
        assert_eq!(batches, epoch_batches(&ds, 8, 3, 0));
        assert_ne!(batches, epoch_batches(&ds, 8, 3, 1));
    }

    #[test]
    fn qat_rejects_dynamic() {
        let mut cfg = TrainConfig::default();
        cfg.quant.mode = QuantMode::QatMse;
        cfg.quant.dynamic = Some(true);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sigma_init_parsing() {
        assert_eq!(SigmaInit::try_from("median".to_string()).unwrap(), SigmaInit::Median);
        assert_eq!(SigmaInit::try_from("fixed:2.5".to_string()).unwrap(), SigmaInit::Fixed(2.5));
        assert!(SigmaInit::try_from("fixed:-1".to_string()).is_err());
        assert!(SigmaInit::try_from("mean".to_string()).is_err());
    }
}
