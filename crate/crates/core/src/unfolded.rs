//! K-layer unrolled PGD and ADMM detectors.
//!
//! Both networks solve `min ½‖y − Hx‖² + λ‖x‖₁` with one learnable set of
//! scalars per layer and start from the zero vector.
//!
//! PGD layer `k`:
//! ```text
//! r_k = x_{k-1} − η_k·Hᵀ(H·x_{k-1} − y)
//! x_k = S(r_k, λ_k)
//! ```
//! ADMM layer `k` (scaled form, state `(z, u)`):
//! ```text
//! x_k = (HᵀH + ρ_k I)⁻¹ (Hᵀy + ρ_k(z_{k-1} − u_{k-1}))
//! z_k = S(x_k + u_{k-1}, λ_k/ρ_k)
//! u_k = u_{k-1} + x_k − z_k
//! ```
//! When quantization is enabled the layer output (`x_k` for PGD, `z_k` for
//! ADMM) is replaced by its fake-quantized value before it is passed on.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, KaqError, Result};
use crate::quantizer::{max_code, quantize_code, LayerQuant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Pgd,
    Admm,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Pgd => "pgd",
            Variant::Admm => "admm",
        })
    }
}

/// Per-layer learnable scalars. `eta` is used by PGD and `rho` by ADMM; the
/// other vector is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnfoldedParams {
    pub variant: Variant,
    pub eta: Vec<f64>,
    pub lambda: Vec<f64>,
    pub rho: Vec<f64>,
}

impl UnfoldedParams {
    pub fn pgd(layers: usize, eta: f64, lambda: f64) -> Self {
        Self {
            variant: Variant::Pgd,
            eta: vec![eta; layers],
            lambda: vec![lambda; layers],
            rho: Vec::new(),
        }
    }

    pub fn admm(layers: usize, rho: f64, lambda: f64) -> Self {
        Self {
            variant: Variant::Admm,
            eta: Vec::new(),
            lambda: vec![lambda; layers],
            rho: vec![rho; layers],
        }
    }

    pub fn layers(&self) -> usize {
        self.lambda.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.layers();
        let (used, unused, name) = match self.variant {
            Variant::Pgd => (&self.eta, &self.rho, "eta"),
            Variant::Admm => (&self.rho, &self.eta, "rho"),
        };
        if used.len() != k || !unused.is_empty() {
            return Err(KaqError::Config(format!(
                "{} network needs {k} values of {name} and none of the other step parameter",
                self.variant
            )));
        }
        if used.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(KaqError::Config(format!("{name} must be positive")));
        }
        if self.lambda.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(KaqError::Config("lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn shrink(v: f64, lam: f64) -> f64 {
    if v > lam {
        v - lam
    } else if v < -lam {
        v + lam
    } else {
        0.0
    }
}

/// Proximal operator of `lam·‖·‖₁`.
pub fn soft_threshold(r: &[f64], lam: f64) -> Result<Vec<f64>> {
    if !(lam >= 0.0) {
        return Err(KaqError::InvalidArgument(format!(
            "threshold must be nonnegative, got {lam}"
        )));
    }
    Ok(r.iter().map(|&v| shrink(v, lam)).collect())
}

fn check_system(h: &DMatrix<f64>, y: &DVector<f64>, x_len: usize) -> Result<()> {
    if h.nrows() != y.len() || h.ncols() != x_len {
        return dim_err(format!(
            "H is {}×{}, y has {} entries, x has {}",
            h.nrows(),
            h.ncols(),
            y.len(),
            x_len
        ));
    }
    Ok(())
}

/// One PGD layer; returns `(r_k, x_k)`.
pub fn pgd_layer(
    x_prev: &DVector<f64>,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    eta: f64,
    lam: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    check_system(h, y, x_prev.len())?;
    if !(eta > 0.0) {
        return Err(KaqError::InvalidArgument(format!("step size must be positive, got {eta}")));
    }
    let g = data_gradient(h, y, x_prev);
    let r = x_prev - g * eta;
    let x = DVector::from_vec(soft_threshold(r.as_slice(), lam)?);
    Ok((r, x))
}

/// `Hᵀ(Hx − y)`.
#[inline]
pub(crate) fn data_gradient(h: &DMatrix<f64>, y: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    h.tr_mul(&(h * x - y))
}

/// Per-instance quantities shared by every ADMM layer.
#[derive(Debug, Clone)]
pub struct AdmmSystem {
    pub gram: DMatrix<f64>,
    pub hty: DVector<f64>,
}

impl AdmmSystem {
    pub fn new(h: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        check_system(h, y, h.ncols())?;
        Ok(Self {
            gram: h.tr_mul(h),
            hty: h.tr_mul(y),
        })
    }

    /// Cholesky factor of `HᵀH + ρI`.
    pub fn factor(&self, rho: f64) -> Result<Cholesky<f64, Dyn>> {
        if !(rho > 0.0) {
            return Err(KaqError::InvalidArgument(format!("penalty must be positive, got {rho}")));
        }
        let n = self.gram.nrows();
        let a = &self.gram + DMatrix::identity(n, n) * rho;
        Cholesky::new(a).ok_or_else(|| KaqError::Singular(format!("HᵀH + {rho}·I is not positive definite")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmmStep {
    pub x: DVector<f64>,
    /// Input of the shrinkage, `x_k + u_{k-1}`.
    pub v: DVector<f64>,
    pub z: DVector<f64>,
    pub u: DVector<f64>,
}

/// One unquantized ADMM layer using a factorization of `HᵀH + ρI`.
pub fn admm_layer(
    sys: &AdmmSystem,
    factor: &Cholesky<f64, Dyn>,
    z_prev: &DVector<f64>,
    u_prev: &DVector<f64>,
    rho: f64,
    lam: f64,
) -> Result<AdmmStep> {
    let n = sys.hty.len();
    if z_prev.len() != n || u_prev.len() != n || factor.l_dirty().nrows() != n {
        return dim_err(format!("ADMM state does not match system dimension {n}"));
    }
    let x = factor.solve(&(&sys.hty + (z_prev - u_prev) * rho));
    let v = &x + u_prev;
    let z = DVector::from_vec(soft_threshold(v.as_slice(), lam / rho)?);
    let u = u_prev + &x - &z;
    Ok(AdmmStep { x, v, z, u })
}

#[derive(Debug, Clone)]
pub struct AdmmTrace {
    /// x-updates, one per layer.
    pub x: Vec<DVector<f64>>,
    /// Scaled duals `u^(0..K)`.
    pub u: Vec<DVector<f64>>,
    pub factors: Vec<Cholesky<f64, Dyn>>,
}

#[derive(Debug, Clone)]
pub enum LayerAux {
    /// `Hᵀ(Hx_in − y)` per layer.
    Pgd { grad: Vec<DVector<f64>> },
    Admm(AdmmTrace),
}

/// Everything a forward pass produced. For ADMM, `x` holds the sparse
/// estimates `z^(k)`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Shrinkage inputs per layer (`r_k` for PGD, `x_k + u_{k-1}` for ADMM).
    pub r: Vec<DVector<f64>>,
    /// Layer outputs before quantization, `x^(0) = 0` first.
    pub x: Vec<DVector<f64>>,
    /// Quantized layer outputs, present iff quantization was enabled.
    pub x_q: Option<Vec<DVector<f64>>>,
    pub aux: LayerAux,
    pub(crate) quant: Option<QuantTrace>,
}

#[derive(Debug, Clone)]
pub(crate) struct QuantTrace {
    pub deltas: Vec<f64>,
    pub limits: Vec<f64>,
    /// Clamped integer codes per layer.
    pub codes: Vec<DVector<f64>>,
}

impl ForwardTrace {
    pub fn layers(&self) -> usize {
        self.r.len()
    }

    /// Network output: the last (quantized, if enabled) estimate.
    pub fn output(&self) -> &DVector<f64> {
        match &self.x_q {
            Some(q) if !q.is_empty() => q.last().unwrap(),
            _ => self.x.last().unwrap(),
        }
    }

    /// The estimate that entered layer `k` (0-based).
    pub fn layer_input(&self, k: usize) -> &DVector<f64> {
        match &self.x_q {
            Some(q) if k > 0 => &q[k - 1],
            _ => &self.x[k],
        }
    }

    pub fn deltas(&self) -> Option<&[f64]> {
        self.quant.as_ref().map(|q| q.deltas.as_slice())
    }
}

fn quantize_layer(v: &DVector<f64>, delta: f64, qmax: f64) -> (DVector<f64>, DVector<f64>) {
    let codes = v.map(|e| quantize_code(e, delta, qmax));
    let q = &codes * delta;
    (q, codes)
}

/// Runs all layers on one instance.
pub fn forward(
    params: &UnfoldedParams,
    h: &DMatrix<f64>,
    y: &DVector<f64>,
    quant: Option<&LayerQuant>,
) -> Result<ForwardTrace> {
    params.validate()?;
    let n = h.ncols();
    check_system(h, y, n)?;
    let k_layers = params.layers();
    if let Some(q) = quant {
        if q.deltas.len() != k_layers {
            return dim_err(format!(
                "{} quantization steps for {k_layers} layers",
                q.deltas.len()
            ));
        }
    }
    let qmax = quant.map(|q| max_code(q.bits));
    let mut qtrace = quant.map(|q| QuantTrace {
        deltas: q.deltas.clone(),
        limits: q.deltas.iter().map(|d| d * qmax.unwrap()).collect(),
        codes: Vec::with_capacity(k_layers),
    });
    let mut x_q = quant.map(|_| Vec::with_capacity(k_layers));
    let mut r = Vec::with_capacity(k_layers);
    let mut x = Vec::with_capacity(k_layers + 1);
    x.push(DVector::zeros(n));

    let aux = match params.variant {
        Variant::Pgd => {
            let mut grads = Vec::with_capacity(k_layers);
            let mut x_in = DVector::zeros(n);
            for k in 0..k_layers {
                let g = data_gradient(h, y, &x_in);
                let rk = &x_in - &g * params.eta[k];
                let xk = rk.map(|v| shrink(v, params.lambda[k]));
                x_in = match (&mut qtrace, &mut x_q) {
                    (Some(qt), Some(xq)) => {
                        let (q, codes) = quantize_layer(&xk, qt.deltas[k], qmax.unwrap());
                        qt.codes.push(codes);
                        xq.push(q.clone());
                        q
                    }
                    _ => xk.clone(),
                };
                grads.push(g);
                r.push(rk);
                x.push(xk);
            }
            LayerAux::Pgd { grad: grads }
        }
        Variant::Admm => {
            let sys = AdmmSystem::new(h, y)?;
            let mut trace = AdmmTrace {
                x: Vec::with_capacity(k_layers),
                u: vec![DVector::zeros(n)],
                factors: Vec::with_capacity(k_layers),
            };
            let mut z_in = DVector::zeros(n);
            for k in 0..k_layers {
                let rho = params.rho[k];
                let factor = sys.factor(rho)?;
                let u_prev = trace.u.last().unwrap();
                let step = admm_layer(&sys, &factor, &z_in, u_prev, rho, params.lambda[k])?;
                let z_out = match (&mut qtrace, &mut x_q) {
                    (Some(qt), Some(xq)) => {
                        let (q, codes) = quantize_layer(&step.z, qt.deltas[k], qmax.unwrap());
                        qt.codes.push(codes);
                        xq.push(q.clone());
                        q
                    }
                    _ => step.z.clone(),
                };
                let u = u_prev + &step.x - &z_out;
                trace.u.push(u);
                trace.x.push(step.x);
                trace.factors.push(factor);
                r.push(step.v);
                x.push(step.z);
                z_in = z_out;
            }
            LayerAux::Admm(trace)
        }
    };

    Ok(ForwardTrace {
        r,
        x,
        x_q,
        aux,
        quant: qtrace,
    })
}

/// Largest eigenvalue of `HᵀH`, the Lipschitz constant of the data term.
pub fn lipschitz(h: &DMatrix<f64>) -> f64 {
    let g = h.tr_mul(h);
    g.symmetric_eigenvalues().iter().fold(0.0f64, |m, &v| m.max(v))
}
