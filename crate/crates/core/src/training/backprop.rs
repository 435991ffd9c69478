//! Reverse pass through one recorded forward trace.
//!
//! Quantizer nodes use the straight-through rule: the incoming gradient is
//! multiplied by the saturation mask on its way to the pre-quantization
//! activation, and `∂Q/∂Δ` is the clamped integer code. The shrinkage
//! passes gradients where `|r| > λ` and blocks them on the closed dead zone.

use nalgebra::{DMatrix, DVector};

use crate::error::{dim_err, Result};
use crate::quantizer::ste_pass;
use crate::unfolded::{ForwardTrace, LayerAux, UnfoldedParams};

/// Gradients of one instance's share of the loss.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct InstanceGrads {
    /// `∂/∂η_k` for PGD, `∂/∂ρ_k` for ADMM.
    pub step: Vec<f64>,
    pub lambda: Vec<f64>,
    /// `∂/∂Δ_k` for the steps used on this instance.
    pub delta: Vec<f64>,
}

/// Extra gradients injected at the recorded activations of each layer.
pub(crate) struct Injected<'a> {
    /// At the pre-quantization output `x^(k)`.
    pub fp: Option<&'a [DVector<f64>]>,
    /// At the quantized output `x_S^(k)`.
    pub q: Option<&'a [DVector<f64>]>,
}

/// Splits `dL/d(quantized output)` into `dL/d(pre-quantization output)` and
/// accumulates `dL/dΔ`.
fn through_quantizer(
    trace: &ForwardTrace,
    k: usize,
    g_out: DVector<f64>,
    inj: &Injected<'_>,
    d_delta: &mut [f64],
) -> DVector<f64> {
    let mut g_pre = match &trace.quant {
        Some(qt) => {
            let mut gq = g_out;
            if let Some(extra) = inj.q {
                gq += &extra[k];
            }
            d_delta[k] = qt.codes[k].dot(&gq);
            let limit = qt.limits[k];
            let pre = &trace.x[k + 1];
            DVector::from_fn(gq.len(), |i, _| ste_pass(pre[i], limit) * gq[i])
        }
        None => g_out,
    };
    if let Some(extra) = inj.fp {
        g_pre += &extra[k];
    }
    g_pre
}

/// Backpropagates through the shrinkage `S(v, τ)`; returns `(dL/dv, dL/dτ)`.
fn through_shrink(v: &DVector<f64>, tau: f64, g: &DVector<f64>) -> (DVector<f64>, f64) {
    let mut d_tau = 0.0;
    let gv = DVector::from_fn(v.len(), |i, _| {
        if v[i] > tau {
            d_tau -= g[i];
            g[i]
        } else if v[i] < -tau {
            d_tau += g[i];
            g[i]
        } else {
            0.0
        }
    });
    (gv, d_tau)
}

pub(crate) fn reverse(
    params: &UnfoldedParams,
    h: &DMatrix<f64>,
    trace: &ForwardTrace,
    top: &DVector<f64>,
    inj: &Injected<'_>,
) -> Result<InstanceGrads> {
    let k_layers = params.layers();
    if trace.layers() != k_layers || top.len() != h.ncols() {
        return dim_err("forward trace does not match the network".to_string());
    }
    let mut out = InstanceGrads {
        step: vec![0.0; k_layers],
        lambda: vec![0.0; k_layers],
        delta: vec![0.0; k_layers],
    };

    match &trace.aux {
        LayerAux::Pgd { grad } => {
            let mut gx = top.clone();
            for k in (0..k_layers).rev() {
                let gxk = through_quantizer(trace, k, gx, inj, &mut out.delta);
                let (gr, d_lam) = through_shrink(&trace.r[k], params.lambda[k], &gxk);
                out.lambda[k] = d_lam;
                out.step[k] = -grad[k].dot(&gr);
                // (I − ηHᵀH)·gr
                let hg = h * &gr;
                gx = &gr - h.tr_mul(&hg) * params.eta[k];
            }
        }
        LayerAux::Admm(admm) => {
            let mut gz = top.clone();
            let mut gu = DVector::zeros(top.len());
            for k in (0..k_layers).rev() {
                let rho = params.rho[k];
                let lam = params.lambda[k];
                // u_k = u_{k-1} + x_k − z_out
                let mut gx = gu.clone();
                let mut gu_prev = gu.clone();
                let gz_out = &gz - &gu;
                let gzk = through_quantizer(trace, k, gz_out, inj, &mut out.delta);
                let (gv, d_tau) = through_shrink(&trace.r[k], lam / rho, &gzk);
                out.lambda[k] = d_tau / rho;
                out.step[k] = -d_tau * lam / (rho * rho);
                // v = x_k + u_{k-1}
                gx += &gv;
                gu_prev += &gv;
                // x_k = A⁻¹(Hᵀy + ρ(z_in − u_{k-1})), A = HᵀH + ρI
                let q = admm.factors[k].solve(&gx);
                let z_in = trace.layer_input(k);
                let w = z_in - &admm.u[k] - &admm.x[k];
                out.step[k] += q.dot(&w);
                gz = &q * rho;
                gu_prev -= &q * rho;
                gu = gu_prev;
            }
        }
    }
    Ok(out)
}
