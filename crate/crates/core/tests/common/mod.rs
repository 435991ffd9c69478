//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library's numerical kernels; only data types and the
//! dataset generator are shared.

#![allow(dead_code, clippy::needless_range_loop)]

use kaq_core::kernel::KernelParams;
use kaq_core::mimo::{build_dataset, ComplexSystem, DatasetConfig, MimoInstance};
use kaq_core::quantizer::{QuantConfig, StepSize};
use kaq_core::training::{loss_and_grad, Gradients, KernelSettings, TrainState};
use kaq_core::unfolded::{UnfoldedParams, Variant};
use kaq_core::GradientForm;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rows = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Gauss–Jordan elimination with partial pivoting on plain vectors.
pub fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.iter().zip(b).map(|(row, &bi)| {
        let mut r = row.clone();
        r.push(bi);
        r
    }).collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, piv);
        let p = m[col][col];
        for c in col..=n {
            m[col][c] /= p;
        }
        for r in 0..n {
            if r != col {
                let f = m[r][col];
                if f != 0.0 {
                    for c in col..=n {
                        m[r][c] -= f * m[col][c];
                    }
                }
            }
        }
    }
    m.iter().map(|r| r[n]).collect()
}

pub fn to_rows(h: &DMatrix<f64>) -> Rows {
    (0..h.nrows()).map(|i| h.row(i).iter().copied().collect()).collect()
}

/// `HᵀH` and `Hᵀy` by explicit loops.
pub fn normal_system(h: &Rows, y: &[f64]) -> (Rows, Vec<f64>) {
    let n = h[0].len();
    let mut g = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    for (row, &yi) in h.iter().zip(y) {
        for i in 0..n {
            b[i] += row[i] * yi;
            for j in 0..n {
                g[i][j] += row[i] * row[j];
            }
        }
    }
    (g, b)
}

/// Least-squares solution via the normal equations.
pub fn least_squares(h: &Rows, y: &[f64]) -> Vec<f64> {
    let (g, b) = normal_system(h, y);
    solve_dense(&g, &b)
}

pub fn matvec(h: &Rows, x: &[f64]) -> Vec<f64> {
    h.iter().map(|r| r.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

pub fn mat_t_vec(h: &Rows, v: &[f64]) -> Vec<f64> {
    let n = h[0].len();
    let mut out = vec![0.0; n];
    for (row, &vi) in h.iter().zip(v) {
        for j in 0..n {
            out[j] += row[j] * vi;
        }
    }
    out
}

/// Per-coordinate argmin of `½(z−r)² + λ|z|` over a grid of step `step`.
pub fn grid_prox(r: f64, lam: f64, step: f64) -> f64 {
    let lo = -(r.abs() + 1.0);
    let count = (2.0 * (r.abs() + 1.0) / step).ceil() as usize;
    let mut best = 0.0;
    let mut best_v = f64::INFINITY;
    for i in 0..=count {
        let z = lo + i as f64 * step;
        let v = 0.5 * (z - r) * (z - r) + lam * z.abs();
        if v < best_v {
            best_v = v;
            best = z;
        }
    }
    best
}

fn soft(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Biased MMD² by an explicit double loop per term.
pub fn brute_mmd2(fp: &Rows, q: &Rows, s1: f64, s2: f64, s3: f64) -> f64 {
    let k = |a: &[f64], b: &[f64], s: f64| {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
        (-d2 / (2.0 * s * s)).exp()
    };
    let b = fp.len() as f64;
    let mut t1 = 0.0;
    let mut t2 = 0.0;
    let mut t3 = 0.0;
    for i in 0..fp.len() {
        for j in 0..fp.len() {
            t1 += k(&fp[i], &fp[j], s1);
            t2 += k(&q[i], &q[j], s2);
            t3 += k(&fp[i], &q[j], s3);
        }
    }
    (t1 + t2 - 2.0 * t3) / (b * b)
}

/// Step model seen by the oracle, in natural scale.
#[derive(Debug, Clone)]
pub enum OracleStep {
    Static(Vec<f64>),
    Dynamic { alpha: Vec<f64>, gamma: Vec<f64> },
}

/// Every learnable of a network in natural scale.
#[derive(Debug, Clone)]
pub struct OracleParams {
    pub variant: Variant,
    pub step: Vec<f64>,
    pub lambda: Vec<f64>,
    pub bits: Option<u32>,
    pub quant: Option<OracleStep>,
    pub sigma: Option<[Vec<f64>; 3]>,
    pub epsilon: f64,
}

impl OracleParams {
    pub fn from_state(s: &TrainState, epsilon: f64) -> Self {
        let exp = |v: &[f64]| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
        Self {
            variant: s.params.variant,
            step: match s.params.variant {
                Variant::Pgd => s.params.eta.clone(),
                Variant::Admm => s.params.rho.clone(),
            },
            lambda: s.params.lambda.clone(),
            bits: s.quant.as_ref().map(|q| q.bits),
            quant: s.quant.as_ref().map(|q| match &q.step {
                StepSize::Static { log_delta } => OracleStep::Static(exp(log_delta)),
                StepSize::Dynamic { log_alpha, log_gamma } => OracleStep::Dynamic {
                    alpha: exp(log_alpha),
                    gamma: exp(log_gamma),
                },
            }),
            sigma: s
                .kernel
                .as_ref()
                .map(|k| [exp(&k.log_sigma1), exp(&k.log_sigma2), exp(&k.log_sigma3)]),
            epsilon,
        }
    }

    pub fn layers(&self) -> usize {
        self.lambda.len()
    }

    fn delta(&self, k: usize, snr_linear: f64) -> Option<f64> {
        self.quant.as_ref().map(|q| match q {
            OracleStep::Static(d) => d[k],
            OracleStep::Dynamic { alpha, gamma } => alpha[k] / snr_linear.sqrt() + gamma[k],
        })
    }

    /// Named scalar slots, in a fixed order, for finite differencing.
    pub fn slots(&self) -> Vec<(&'static str, usize)> {
        let k = self.layers();
        let mut out = Vec::new();
        let step_name = match self.variant {
            Variant::Pgd => "eta",
            Variant::Admm => "rho",
        };
        for i in 0..k {
            out.push((step_name, i));
            out.push(("lambda", i));
        }
        match &self.quant {
            Some(OracleStep::Static(_)) => (0..k).for_each(|i| out.push(("delta", i))),
            Some(OracleStep::Dynamic { .. }) => (0..k).for_each(|i| {
                out.push(("alpha", i));
                out.push(("gamma", i));
            }),
            None => {}
        }
        if self.sigma.is_some() {
            for name in ["sigma1", "sigma2", "sigma3"] {
                (0..k).for_each(|i| out.push((name, i)));
            }
        }
        out
    }

    pub fn get_mut(&mut self, name: &str, i: usize) -> &mut f64 {
        match (name, &mut self.quant, &mut self.sigma) {
            ("eta" | "rho", _, _) => &mut self.step[i],
            ("lambda", _, _) => &mut self.lambda[i],
            ("delta", Some(OracleStep::Static(d)), _) => &mut d[i],
            ("alpha", Some(OracleStep::Dynamic { alpha, .. }), _) => &mut alpha[i],
            ("gamma", Some(OracleStep::Dynamic { gamma, .. }), _) => &mut gamma[i],
            ("sigma1", _, Some(s)) => &mut s[0][i],
            ("sigma2", _, Some(s)) => &mut s[1][i],
            ("sigma3", _, Some(s)) => &mut s[2][i],
            _ => panic!("no slot {name}"),
        }
    }
}

pub fn analytic(g: &Gradients, name: &str, i: usize) -> f64 {
    let v = match name {
        "eta" => &g.eta,
        "rho" => &g.rho,
        "lambda" => &g.lambda,
        "delta" => &g.delta,
        "alpha" => &g.alpha,
        "gamma" => &g.gamma,
        "sigma1" => &g.sigma1,
        "sigma2" => &g.sigma2,
        "sigma3" => &g.sigma3,
        _ => panic!("no slot {name}"),
    };
    v[i]
}

/// Quantizer decisions at the base point: integer codes, pass-through mask
/// and the pre-quantization value, per layer.
#[derive(Debug, Clone)]
pub struct Frozen {
    pub codes: Vec<Vec<f64>>,
    pub mask: Vec<Vec<f64>>,
    pub x0: Vec<Vec<f64>>,
}

pub struct OracleRun {
    /// Pre-quantization layer outputs.
    pub fp: Vec<Vec<f64>>,
    /// Quantized (or surrogate) layer outputs; equal to `fp` without quantization.
    pub q: Vec<Vec<f64>>,
    pub output: Vec<f64>,
    /// Smallest distance of a shrinkage input to its threshold.
    pub kink_margin: f64,
    pub frozen: Frozen,
}

/// Naive unrolled forward pass. With `frozen`, quantization is replaced by
/// the smooth surrogate `Δ·n* + m*·(x − x*)`, whose derivatives are exactly
/// the straight-through ones and which equals the quantizer at the base point.
pub fn oracle_forward(p: &OracleParams, inst: &MimoInstance, frozen: Option<&Frozen>) -> OracleRun {
    let h = to_rows(&inst.h);
    let y: Vec<f64> = inst.y.iter().copied().collect();
    let n = h[0].len();
    let qmax = p.bits.map(|b| ((1u64 << (b - 1)) - 1) as f64);
    let mut fr = Frozen {
        codes: Vec::new(),
        mask: Vec::new(),
        x0: Vec::new(),
    };
    let mut fps = Vec::new();
    let mut qs = Vec::new();
    let mut margin = f64::INFINITY;

    let quantize = |k: usize, x: &[f64], fr: &mut Frozen| -> Vec<f64> {
        let Some(delta) = p.delta(k, inst.snr_linear) else {
            return x.to_vec();
        };
        let qm = qmax.unwrap();
        match frozen {
            Some(f) => (0..x.len())
                .map(|i| delta * f.codes[k][i] + f.mask[k][i] * (x[i] - f.x0[k][i]))
                .collect(),
            None => {
                let codes: Vec<f64> = x
                    .iter()
                    .map(|&v| {
                        let c = (v / delta).abs().floor() + if ((v / delta).abs().fract()) >= 0.5 { 1.0 } else { 0.0 };
                        (c * v.signum()).clamp(-qm, qm)
                    })
                    .collect();
                let mask = x.iter().map(|&v| if v.abs() <= qm * delta { 1.0 } else { 0.0 }).collect();
                let out = codes.iter().map(|c| c * delta).collect();
                fr.codes.push(codes);
                fr.mask.push(mask);
                fr.x0.push(x.to_vec());
                out
            }
        }
    };

    match p.variant {
        Variant::Pgd => {
            let mut x = vec![0.0; n];
            for k in 0..p.layers() {
                let res: Vec<f64> = matvec(&h, &x).iter().zip(&y).map(|(a, b)| a - b).collect();
                let g = mat_t_vec(&h, &res);
                let r: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - p.step[k] * gi).collect();
                for &ri in &r {
                    margin = margin.min((ri.abs() - p.lambda[k]).abs());
                }
                let xk: Vec<f64> = r.iter().map(|&ri| soft(ri, p.lambda[k])).collect();
                let xq = quantize(k, &xk, &mut fr);
                fps.push(xk);
                qs.push(xq.clone());
                x = xq;
            }
        }
        Variant::Admm => {
            let (gram, hty) = normal_system(&h, &y);
            let mut z = vec![0.0; n];
            let mut u = vec![0.0; n];
            for k in 0..p.layers() {
                let rho = p.step[k];
                let mut a = gram.clone();
                for (i, row) in a.iter_mut().enumerate() {
                    row[i] += rho;
                }
                let rhs: Vec<f64> = (0..n).map(|i| hty[i] + rho * (z[i] - u[i])).collect();
                let xk = solve_dense(&a, &rhs);
                let tau = p.lambda[k] / rho;
                let v: Vec<f64> = xk.iter().zip(&u).map(|(a, b)| a + b).collect();
                for &vi in &v {
                    margin = margin.min((vi.abs() - tau).abs());
                }
                let zk: Vec<f64> = v.iter().map(|&vi| soft(vi, tau)).collect();
                let zq = quantize(k, &zk, &mut fr);
                u = (0..n).map(|i| u[i] + xk[i] - zq[i]).collect();
                fps.push(zk);
                qs.push(zq.clone());
                z = zq;
            }
        }
    }
    let output = qs.last().cloned().unwrap_or_else(|| vec![0.0; n]);
    OracleRun {
        fp: fps,
        q: qs,
        output,
        kink_margin: margin,
        frozen: frozen.cloned().unwrap_or(fr),
    }
}

/// Total loss of a batch from the naive forward and the brute-force MMD.
pub fn oracle_loss(p: &OracleParams, batch: &[MimoInstance], frozen: Option<&[Frozen]>) -> f64 {
    let runs: Vec<OracleRun> = batch
        .iter()
        .enumerate()
        .map(|(b, inst)| oracle_forward(p, inst, frozen.map(|f| &f[b])))
        .collect();
    let bsz = batch.len() as f64;
    let mse: f64 = runs
        .iter()
        .zip(batch)
        .map(|(r, inst)| r.output.iter().zip(inst.x_true.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
        / bsz;
    let mut mmd = 0.0;
    if let Some(s) = &p.sigma {
        for k in 0..p.layers() {
            let fp: Rows = runs.iter().map(|r| r.fp[k].clone()).collect();
            let q: Rows = runs.iter().map(|r| r.q[k].clone()).collect();
            mmd += brute_mmd2(&fp, &q, s[0][k], s[1][k], s[2][k]);
        }
    }
    mse + p.epsilon * mmd
}

/// Central difference of `f` at `x` with step `h`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Relative error with a floor on the denominator so that two vanishing
/// gradients compare by their absolute difference.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor relative to the loss value. Central differences at
/// step 1e-5 carry roundoff of about `ε·|L|/h ≈ 2e-11·|L|`, so gradient
/// components below `1e-6·|L|` are compared by absolute difference.
pub const GRAD_FLOOR: f64 = 1e-6;
/// Base points whose shrinkage inputs lie this close to a kink are redrawn.
pub const KINK_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Structure {
    Fp,
    Static,
    Dynamic,
    Kernel,
    KernelStatic,
}

/// One randomized gradient-check problem.
pub struct GradCase {
    pub state: TrainState,
    pub batch: Vec<MimoInstance>,
    pub epsilon: f64,
}

pub fn random_case(r: &mut ChaCha8Rng, variant: Variant, structure: Structure) -> GradCase {
    let layers = r.random_range(1..=3usize);
    let nt = r.random_range(1..=3usize);
    let nr = r.random_range(nt..=3usize);
    let bsz = r.random_range(2..=4usize);
    let constellation = if r.random_bool(0.5) { vec![-1.0, 1.0] } else { vec![-3.0, -1.0, 1.0, 3.0] };
    let snr_db = r.random_range(0.0..20.0f64);
    let cfg = DatasetConfig {
        system: ComplexSystem::new(nt, nr, constellation).unwrap(),
        snr_db: vec![snr_db],
        count: bsz,
    };
    let ds = build_dataset(&cfg, r.random()).unwrap();
    let u = |r: &mut ChaCha8Rng, lo: f64, hi: f64| -> Vec<f64> { (0..layers).map(|_| r.random_range(lo..hi)).collect() };
    let lambda = u(r, 0.01, 0.3);
    let params = match variant {
        Variant::Pgd => UnfoldedParams {
            variant,
            eta: u(r, 0.05, 0.3),
            lambda,
            rho: Vec::new(),
        },
        Variant::Admm => UnfoldedParams {
            variant,
            eta: Vec::new(),
            lambda,
            rho: u(r, 0.3, 3.0),
        },
    };
    let bits = r.random_range(3..=8u32);
    let quant = match structure {
        Structure::Fp => None,
        Structure::Static | Structure::KernelStatic => Some(QuantConfig::new_static(bits, &u(r, 0.02, 0.3)).unwrap()),
        Structure::Dynamic | Structure::Kernel => {
            Some(QuantConfig::new_dynamic(bits, &u(r, 0.02, 0.4), &u(r, 0.01, 0.2)).unwrap())
        }
    };
    let kernel = match structure {
        Structure::Kernel | Structure::KernelStatic => {
            let ln = |v: Vec<f64>| v.into_iter().map(f64::ln).collect();
            Some(KernelParams {
                log_sigma1: ln(u(r, 0.3, 3.0)),
                log_sigma2: ln(u(r, 0.3, 3.0)),
                log_sigma3: ln(u(r, 0.3, 3.0)),
            })
        }
        _ => None,
    };
    GradCase {
        state: TrainState::new(params, quant, kernel).unwrap(),
        batch: ds.instances,
        epsilon: r.random_range(0.05..1.0),
    }
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: &'static str,
    pub layer: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel: f64,
}

/// Compares every analytic gradient of `case` with central differences of
/// the oracle loss. Returns `None` if the base point sits near a kink.
pub fn check_case(case: &GradCase) -> Option<Vec<GradCheck>> {
    let base = OracleParams::from_state(&case.state, case.epsilon);
    let runs: Vec<OracleRun> = case.batch.iter().map(|inst| oracle_forward(&base, inst, None)).collect();
    if runs.iter().any(|r| r.kink_margin < KINK_MARGIN) {
        return None;
    }
    let frozen: Vec<Frozen> = runs.into_iter().map(|r| r.frozen).collect();

    let settings = KernelSettings {
        epsilon: case.epsilon,
        gradient: GradientForm::Total,
        ..Default::default()
    };
    let refs: Vec<&MimoInstance> = case.batch.iter().collect();
    let (terms, grads, _) = loss_and_grad(&refs, &case.state, &settings).unwrap();

    let l_base = oracle_loss(&base, &case.batch, Some(&frozen));
    assert!(
        (terms.loss - l_base).abs() <= 1e-10 * l_base.abs().max(1.0),
        "loss mismatch: {} vs {l_base}",
        terms.loss
    );

    let mut out = Vec::new();
    for (name, i) in base.slots() {
        let x0 = {
            let mut p = base.clone();
            *p.get_mut(name, i)
        };
        let numeric = central_diff(
            |v| {
                let mut p = base.clone();
                *p.get_mut(name, i) = v;
                oracle_loss(&p, &case.batch, Some(&frozen))
            },
            x0,
            FD_STEP,
        );
        let a = analytic(&grads, name, i);
        out.push(GradCheck {
            name,
            layer: i,
            analytic: a,
            numeric,
            rel: rel_err(a, numeric, GRAD_FLOOR * l_base.abs().max(1.0)),
        });
    }
    Some(out)
}

/// All variant/structure combinations, cycled over the cases.
pub const COMBOS: [(Variant, Structure); 10] = [
    (Variant::Pgd, Structure::Fp),
    (Variant::Pgd, Structure::Static),
    (Variant::Pgd, Structure::Dynamic),
    (Variant::Pgd, Structure::Kernel),
    (Variant::Pgd, Structure::KernelStatic),
    (Variant::Admm, Structure::Fp),
    (Variant::Admm, Structure::Static),
    (Variant::Admm, Structure::Dynamic),
    (Variant::Admm, Structure::Kernel),
    (Variant::Admm, Structure::KernelStatic),
];

/// Worst relative error per learnable class over `count` random problems.
pub fn gradient_suite(count: usize, seed: u64) -> Vec<(&'static str, f64, usize)> {
    let mut r = rng(seed);
    let mut worst: Vec<(&'static str, f64, usize)> = Vec::new();
    let mut done = 0;
    while done < count {
        let (variant, structure) = COMBOS[done % COMBOS.len()];
        let case = random_case(&mut r, variant, structure);
        let Some(checks) = check_case(&case) else { continue };
        for c in checks {
            match worst.iter_mut().find(|w| w.0 == c.name) {
                Some(w) => {
                    w.1 = w.1.max(c.rel);
                    w.2 += 1;
                }
                None => worst.push((c.name, c.rel, 1)),
            }
        }
        done += 1;
    }
    worst
}

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(v)
}
