//! Gaussian-kernel MMD² between full-precision and quantized activations.
//!
//! The statistic is the biased V-statistic: every sum runs over all index
//! pairs, including `i = j`. Each of the three terms has its own bandwidth
//! (`σ1` within full precision, `σ2` within quantized, `σ3` across), stored
//! per layer as logarithms.

use serde::{Deserialize, Serialize};

use crate::error::{KaqError, Result};

/// A batch of `B` activation vectors of equal length, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    dim: usize,
    data: Vec<f64>,
}

impl ActivationBatch {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(KaqError::Dimension(format!(
                "{} values cannot be split into rows of length {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(KaqError::Dimension("activation rows differ in length".into()));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::new(dim, data)
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(KaqError::InvalidArgument(format!(
            "kernel bandwidth must be positive, got {sigma}"
        )));
    }
    Ok(())
}

/// `exp(−‖a−b‖² / (2σ²))`.
pub fn gauss_kernel(a: &[f64], b: &[f64], sigma: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(KaqError::Dimension(format!(
            "kernel arguments have lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    check_sigma(sigma)?;
    Ok((-sq_dist(a, b) / (2.0 * sigma * sigma)).exp())
}

/// Bandwidths of the three MMD terms for one layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bandwidths {
    pub s1: f64,
    pub s2: f64,
    pub s3: f64,
}

impl Bandwidths {
    pub fn shared(sigma: f64) -> Self {
        Self {
            s1: sigma,
            s2: sigma,
            s3: sigma,
        }
    }

    fn check(&self) -> Result<()> {
        check_sigma(self.s1)?;
        check_sigma(self.s2)?;
        check_sigma(self.s3)
    }
}

fn check_pair(fp: &ActivationBatch, q: &ActivationBatch) -> Result<()> {
    if fp.len() != q.len() || fp.dim() != q.dim() {
        return Err(KaqError::Dimension(format!(
            "batches differ: {}×{} vs {}×{}",
            fp.len(),
            fp.dim(),
            q.len(),
            q.dim()
        )));
    }
    if fp.is_empty() {
        return Err(KaqError::Dimension("empty activation batch".into()));
    }
    Ok(())
}

/// Sums in ascending order, so the result does not depend on sample order.
fn ordered_sum(mut values: Vec<f64>) -> f64 {
    values.sort_unstable_by(f64::total_cmp);
    values.iter().sum()
}

/// Sum of `K_σ(a_i, b_j)` over all pairs.
fn kernel_sum(a: &ActivationBatch, b: &ActivationBatch, sigma: f64) -> f64 {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut values = Vec::with_capacity(a.len() * b.len());
    for i in 0..a.len() {
        let ai = a.row(i);
        for j in 0..b.len() {
            values.push((-sq_dist(ai, b.row(j)) * inv).exp());
        }
    }
    ordered_sum(values)
}

pub fn mmd2(fp: &ActivationBatch, q: &ActivationBatch, bw: Bandwidths) -> Result<f64> {
    check_pair(fp, q)?;
    bw.check()?;
    let b2 = (fp.len() * fp.len()) as f64;
    Ok((kernel_sum(fp, fp, bw.s1) + kernel_sum(q, q, bw.s2) - 2.0 * kernel_sum(fp, q, bw.s3)) / b2)
}

/// How the within-quantized term is differentiated with respect to `x_S,j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GradientForm {
    /// Both kernel slots that contain `x_S,j` are differentiated.
    #[default]
    Total,
    /// Only the first slot, as the per-sample partial is usually written.
    SingleSlot,
}

impl GradientForm {
    fn within_factor(self) -> f64 {
        match self {
            GradientForm::Total => 2.0,
            GradientForm::SingleSlot => 1.0,
        }
    }
}

/// `∂K(a, b)/∂a` accumulated into `out` with weight `w`: `−w·(a−b)/σ²·K`.
#[inline]
fn add_kernel_grad(out: &mut [f64], a: &[f64], b: &[f64], inv_two_s2: f64, w: f64) {
    let k = (-sq_dist(a, b) * inv_two_s2).exp();
    let c = -w * k * 2.0 * inv_two_s2;
    for ((o, x), y) in out.iter_mut().zip(a).zip(b) {
        *o += c * (x - y);
    }
}

/// Gradient of MMD² with respect to quantized sample `j`.
pub fn mmd2_grad_xq(
    fp: &ActivationBatch,
    q: &ActivationBatch,
    s2: f64,
    s3: f64,
    j: usize,
    form: GradientForm,
) -> Result<Vec<f64>> {
    check_pair(fp, q)?;
    check_sigma(s2)?;
    check_sigma(s3)?;
    if j >= q.len() {
        return Err(KaqError::InvalidArgument(format!(
            "sample index {j} out of range for batch of {}",
            q.len()
        )));
    }
    let b2 = (q.len() * q.len()) as f64;
    let mut g = vec![0.0; q.dim()];
    let qj = q.row(j);
    let within = form.within_factor() / b2;
    let inv2 = 1.0 / (2.0 * s2 * s2);
    for i in 0..q.len() {
        add_kernel_grad(&mut g, qj, q.row(i), inv2, within);
    }
    let inv3 = 1.0 / (2.0 * s3 * s3);
    for i in 0..fp.len() {
        add_kernel_grad(&mut g, qj, fp.row(i), inv3, -2.0 / b2);
    }
    Ok(g)
}

/// Derivatives of MMD² with respect to the three bandwidths.
pub fn mmd2_grad_sigma(fp: &ActivationBatch, q: &ActivationBatch, bw: Bandwidths) -> Result<[f64; 3]> {
    check_pair(fp, q)?;
    bw.check()?;
    let b2 = (fp.len() * fp.len()) as f64;
    Ok([
        sigma_sum(fp, fp, bw.s1) / b2,
        sigma_sum(q, q, bw.s2) / b2,
        -2.0 * sigma_sum(fp, q, bw.s3) / b2,
    ])
}

/// `Σ (d²/σ³)·K_σ` over all pairs.
fn sigma_sum(a: &ActivationBatch, b: &ActivationBatch, sigma: f64) -> f64 {
    let inv = 1.0 / (2.0 * sigma * sigma);
    let s3 = sigma * sigma * sigma;
    let mut total = 0.0;
    for i in 0..a.len() {
        let mut row = 0.0;
        for j in 0..b.len() {
            let d2 = sq_dist(a.row(i), b.row(j));
            row += d2 / s3 * (-d2 * inv).exp();
        }
        total += row;
    }
    total
}

/// MMD² together with its gradient with respect to every input.
#[derive(Debug, Clone, PartialEq)]
pub struct MmdEval {
    pub value: f64,
    /// `∂/∂x_i`, row-major like the batch.
    pub grad_fp: Vec<f64>,
    /// `∂/∂x_S,j`, row-major like the batch.
    pub grad_q: Vec<f64>,
    /// `∂/∂σ1, ∂/∂σ2, ∂/∂σ3`.
    pub grad_sigma: [f64; 3],
}

/// Single pass over the three pair sets producing the value and all gradients.
pub fn mmd2_with_grad(
    fp: &ActivationBatch,
    q: &ActivationBatch,
    bw: Bandwidths,
    form: GradientForm,
) -> Result<MmdEval> {
    check_pair(fp, q)?;
    bw.check()?;
    let (b, d) = (fp.len(), fp.dim());
    let b2 = (b * b) as f64;
    let mut grad_fp = vec![0.0; b * d];
    let mut grad_q = vec![0.0; b * d];

    // within-batch terms: K(a_i, a_j) with a_i in both slots
    let within = |batch: &ActivationBatch, sigma: f64, factor: f64, grad: &mut [f64]| -> (f64, f64) {
        let inv = 1.0 / (2.0 * sigma * sigma);
        let s3 = sigma * sigma * sigma;
        let mut values = Vec::with_capacity(b * b);
        let mut dsig = 0.0;
        for i in 0..b {
            let ai = batch.row(i);
            let gi = &mut grad[i * d..(i + 1) * d];
            for j in 0..b {
                let aj = batch.row(j);
                let d2 = sq_dist(ai, aj);
                let k = (-d2 * inv).exp();
                values.push(k);
                dsig += d2 / s3 * k;
                let c = -factor * k / (sigma * sigma) / b2;
                for t in 0..d {
                    gi[t] += c * (ai[t] - aj[t]);
                }
            }
        }
        (ordered_sum(values), dsig)
    };
    // fp samples always get the total derivative
    let (k1, ds1) = within(fp, bw.s1, 2.0, &mut grad_fp);
    let (k2, ds2) = within(q, bw.s2, form.within_factor(), &mut grad_q);

    let inv3 = 1.0 / (2.0 * bw.s3 * bw.s3);
    let s3c = bw.s3 * bw.s3 * bw.s3;
    let mut cross = Vec::with_capacity(b * b);
    let mut ds3 = 0.0;
    for i in 0..b {
        let xi = fp.row(i);
        for j in 0..b {
            let qj = q.row(j);
            let d2 = sq_dist(xi, qj);
            let k = (-d2 * inv3).exp();
            cross.push(k);
            ds3 += d2 / s3c * k;
            // −(2/B²)·K(x_i, q_j): ∂/∂x_i = (2/B²)(x_i−q_j)/σ²·K, ∂/∂q_j = (2/B²)(q_j−x_i)/σ²·K
            let c = 2.0 * k / (bw.s3 * bw.s3) / b2;
            for t in 0..d {
                let diff = xi[t] - qj[t];
                grad_fp[i * d + t] += c * diff;
                grad_q[j * d + t] -= c * diff;
            }
        }
    }
    let k3 = ordered_sum(cross);
    Ok(MmdEval {
        value: (k1 + k2 - 2.0 * k3) / b2,
        grad_fp,
        grad_q,
        grad_sigma: [ds1 / b2, ds2 / b2, -2.0 * ds3 / b2],
    })
}

/// Median pairwise Euclidean distance, or 1.0 when degenerate.
pub fn median_heuristic(batch: &ActivationBatch) -> f64 {
    let n = batch.len();
    let mut dists = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            dists.push(sq_dist(batch.row(i), batch.row(j)).sqrt());
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let m = dists.len();
    let med = if m % 2 == 1 {
        dists[m / 2]
    } else {
        0.5 * (dists[m / 2 - 1] + dists[m / 2])
    };
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}

/// Per-layer learnable bandwidths, stored as `log σ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub log_sigma1: Vec<f64>,
    pub log_sigma2: Vec<f64>,
    pub log_sigma3: Vec<f64>,
}

impl KernelParams {
    /// All three bandwidths of each layer set to `sigma[k]`.
    pub fn shared(sigma: &[f64]) -> Result<Self> {
        for &s in sigma {
            check_sigma(s)?;
        }
        let logs: Vec<f64> = sigma.iter().map(|s| s.ln()).collect();
        Ok(Self {
            log_sigma1: logs.clone(),
            log_sigma2: logs.clone(),
            log_sigma3: logs,
        })
    }

    pub fn layers(&self) -> usize {
        self.log_sigma1.len()
    }

    pub fn bandwidths(&self, k: usize) -> Bandwidths {
        Bandwidths {
            s1: self.log_sigma1[k].exp(),
            s2: self.log_sigma2[k].exp(),
            s3: self.log_sigma3[k].exp(),
        }
    }
}
