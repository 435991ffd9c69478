//! Synthetic MIMO detection data.
//!
//! Channels are i.i.d. Rayleigh (each real and imaginary part drawn from
//! `N(0, 1/Nr)`), symbols are drawn uniformly per I/Q axis from a real
//! constellation, and complex AWGN is scaled so that the ratio
//! `E‖Hx‖² / E‖n‖²` matches the requested SNR. Every instance is mapped to
//! its real-valued equivalent before it leaves this module.
//!
//! Reproducibility: instance `i` of a dataset draws from a ChaCha20 stream
//! seeded with the dataset seed and with stream id `i`, in the order
//! channel (row-major, real part then imaginary part), symbols (I then Q per
//! antenna), noise (real then imaginary per receive antenna). Serial and
//! parallel generation therefore produce identical datasets.

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, KaqError, Result};

pub type CMatrix = DMatrix<Complex<f64>>;
pub type CVector = DVector<Complex<f64>>;

/// Converts an SNR in dB to a linear power ratio.
pub fn db_to_linear(snr_db: f64) -> f64 {
    10f64.powf(snr_db / 10.0)
}

/// How the requested SNR is turned into a noise variance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SnrConvention {
    /// `E‖Hx‖² / E‖n‖²` over the generation distributions.
    #[default]
    ReceivedTotal,
    /// `Es / σ²`, the per-symbol transmit SNR.
    TransmitPerSymbol,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexSystem {
    pub nt: usize,
    pub nr: usize,
    /// Real levels used independently on each I/Q axis.
    pub constellation: Vec<f64>,
    #[serde(default)]
    pub snr_convention: SnrConvention,
}

impl ComplexSystem {
    pub fn new(nt: usize, nr: usize, constellation: Vec<f64>) -> Result<Self> {
        let sys = Self {
            nt,
            nr,
            constellation,
            snr_convention: SnrConvention::default(),
        };
        sys.validate()?;
        Ok(sys)
    }

    /// 16×16 with {±1, ±3} per axis.
    pub fn qam16(nt: usize, nr: usize) -> Self {
        Self {
            nt,
            nr,
            constellation: vec![-3.0, -1.0, 1.0, 3.0],
            snr_convention: SnrConvention::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nt == 0 || self.nr == 0 {
            return Err(KaqError::Config(
                "antenna counts must be at least 1".into(),
            ));
        }
        validate_constellation(&self.constellation)
    }

    /// Real dimension of the received vector (`2·Nr`).
    pub fn m(&self) -> usize {
        2 * self.nr
    }

    /// Real dimension of the symbol vector (`2·Nt`).
    pub fn n(&self) -> usize {
        2 * self.nt
    }

    /// Average complex symbol energy `E|x_i|²` (two independent axes).
    pub fn symbol_energy(&self) -> f64 {
        let c = &self.constellation;
        2.0 * c.iter().map(|l| l * l).sum::<f64>() / c.len() as f64
    }

    /// `E|H_ij|²` for the generated channel: two parts of variance `1/Nr`.
    pub fn channel_gain(&self) -> f64 {
        2.0 / self.nr as f64
    }

    /// Complex noise variance per receive antenna for a linear SNR.
    pub fn noise_variance(&self, snr_linear: f64) -> f64 {
        match self.snr_convention {
            SnrConvention::ReceivedTotal => {
                // E‖Hx‖² = Nr·Nt·E|h|²·Es, E‖n‖² = Nr·σ²
                self.nt as f64 * self.channel_gain() * self.symbol_energy() / snr_linear
            }
            SnrConvention::TransmitPerSymbol => self.symbol_energy() / snr_linear,
        }
    }

    /// `σ²/Es`, the regularizer of the real-valued MMSE detector.
    pub fn noise_to_signal(&self, snr_linear: f64) -> f64 {
        self.noise_variance(snr_linear) / self.symbol_energy()
    }
}

pub(crate) fn validate_constellation(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(KaqError::Config("constellation must be nonempty".into()));
    }
    if levels.iter().any(|l| !l.is_finite()) {
        return Err(KaqError::Config("constellation levels must be finite".into()));
    }
    let mut sorted = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    for i in 0..n {
        if sorted[i] != -sorted[n - 1 - i] {
            return Err(KaqError::Config(
                "constellation must be symmetric about 0".into(),
            ));
        }
    }
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(KaqError::Config("constellation levels must be distinct".into()));
    }
    Ok(())
}

/// One real-valued detection problem `y = Hx + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct MimoInstance {
    pub h: DMatrix<f64>,
    pub y: DVector<f64>,
    pub x_true: DVector<f64>,
    pub snr_db: f64,
    pub snr_linear: f64,
}

impl MimoInstance {
    pub fn m(&self) -> usize {
        self.h.nrows()
    }

    pub fn n(&self) -> usize {
        self.h.ncols()
    }
}

/// Maps `Hc`, `yc` to `[[Re, −Im], [Im, Re]]` and `[Re; Im]`.
pub fn embed_complex(hc: &CMatrix, yc: &CVector) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if hc.nrows() != yc.len() {
        return dim_err(format!(
            "channel has {} rows but received vector has {} entries",
            hc.nrows(),
            yc.len()
        ));
    }
    Ok((embed_matrix(hc), embed_vector(yc)))
}

pub fn embed_matrix(hc: &CMatrix) -> DMatrix<f64> {
    let (nr, nt) = hc.shape();
    DMatrix::from_fn(2 * nr, 2 * nt, |i, j| {
        let h = hc[(i % nr, j % nt)];
        match (i < nr, j < nt) {
            (true, true) | (false, false) => h.re,
            (true, false) => -h.im,
            (false, true) => h.im,
        }
    })
}

pub fn embed_vector(v: &CVector) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

/// Rayleigh channel with real and imaginary parts i.i.d. `N(0, 1/Nr)`.
pub fn generate_channel<R: Rng + ?Sized>(rng: &mut R, nr: usize, nt: usize) -> CMatrix {
    let std = (1.0 / nr as f64).sqrt();
    let mut h = CMatrix::zeros(nr, nt);
    for i in 0..nr {
        for j in 0..nt {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            h[(i, j)] = Complex::new(std * re, std * im);
        }
    }
    h
}

/// Draws each I and Q component uniformly from `constellation`.
pub fn generate_symbols<R: Rng + ?Sized>(rng: &mut R, nt: usize, constellation: &[f64]) -> CVector {
    CVector::from_fn(nt, |_, _| {
        let re = constellation[rng.random_range(0..constellation.len())];
        let im = constellation[rng.random_range(0..constellation.len())];
        Complex::new(re, im)
    })
}

/// Returns `Hc·xc + n` with `n ~ CN(0, σ²I)` where σ² comes from the system's
/// SNR convention, together with the linear SNR. `snr_db = +∞` is noiseless.
pub fn add_noise<R: Rng + ?Sized>(
    rng: &mut R,
    hc: &CMatrix,
    xc: &CVector,
    snr_db: f64,
    system: &ComplexSystem,
) -> Result<(CVector, f64)> {
    if hc.ncols() != xc.len() {
        return dim_err(format!(
            "channel has {} columns but symbol vector has {} entries",
            hc.ncols(),
            xc.len()
        ));
    }
    if snr_db.is_nan() {
        return Err(KaqError::InvalidArgument("SNR is NaN".into()));
    }
    let snr_linear = db_to_linear(snr_db);
    let sigma2 = system.noise_variance(snr_linear);
    let std = (sigma2 / 2.0).sqrt();
    let mut y = hc * xc;
    for v in y.iter_mut() {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        *v += Complex::new(std * re, std * im);
    }
    Ok((y, snr_linear))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub system: ComplexSystem,
    pub snr_db: Vec<f64>,
    pub count: usize,
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.count == 0 {
            return Err(KaqError::Config("count must be ≥ 1".into()));
        }
        if self.snr_db.is_empty() {
            return Err(KaqError::Config("SNR list must be nonempty".into()));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(KaqError::Config("SNR list entries must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub seed: u64,
    pub instances: Vec<MimoInstance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn m(&self) -> usize {
        self.config.system.m()
    }

    pub fn n(&self) -> usize {
        self.config.system.n()
    }

    /// Instance indices grouped by SNR tag, in the order of `config.snr_db`.
    pub fn snr_groups(&self) -> Vec<(f64, Vec<usize>)> {
        let mut groups: Vec<(f64, Vec<usize>)> =
            self.config.snr_db.iter().map(|&s| (s, Vec::new())).collect();
        for (i, inst) in self.instances.iter().enumerate() {
            if let Some(g) = groups.iter_mut().find(|g| g.0 == inst.snr_db) {
                g.1.push(i);
            } else {
                groups.push((inst.snr_db, vec![i]));
            }
        }
        groups.retain(|g| !g.1.is_empty());
        groups
    }
}

/// The RNG for instance `index` of a dataset seeded with `seed`.
pub fn instance_rng(seed: u64, index: u64) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates a single instance; SNR tags are assigned round-robin over the
/// configured list.
pub fn generate_instance(config: &DatasetConfig, seed: u64, index: usize) -> Result<MimoInstance> {
    let sys = &config.system;
    let snr_db = config.snr_db[index % config.snr_db.len()];
    let mut rng = instance_rng(seed, index as u64);
    let hc = generate_channel(&mut rng, sys.nr, sys.nt);
    let xc = generate_symbols(&mut rng, sys.nt, &sys.constellation);
    let (yc, snr_linear) = add_noise(&mut rng, &hc, &xc, snr_db, sys)?;
    let (h, y) = embed_complex(&hc, &yc)?;
    Ok(MimoInstance {
        h,
        y,
        x_true: embed_vector(&xc),
        snr_db,
        snr_linear,
    })
}

pub fn build_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let instances = (0..config.count)
        .into_par_iter()
        .map(|i| generate_instance(config, seed, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: config.clone(),
        seed,
        instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn embed_identity_channel() {
        let hc = CMatrix::from_element(1, 1, Complex::new(1.0, 0.0));
        let yc = CVector::from_element(1, Complex::new(2.0, 3.0));
        let (h, y) = embed_complex(&hc, &yc).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        assert_eq!(y.as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn embed_pure_imaginary() {
        let hc = CMatrix::from_element(1, 1, Complex::new(0.0, 1.0));
        let yc = CVector::from_element(1, Complex::new(0.0, 0.0));
        let (h, y) = embed_complex(&hc, &yc).unwrap();
        assert_eq!(h, DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 1.0, 0.0]));
        assert_eq!(y.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn embed_dimension_mismatch() {
        let hc = CMatrix::zeros(2, 2);
        let yc = CVector::zeros(3);
        assert!(matches!(embed_complex(&hc, &yc), Err(KaqError::Dimension(_))));
    }

    #[test]
    fn embedding_commutes_with_product() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let a = generate_channel(&mut rng, 2, 2);
            let x = CVector::from_fn(2, |_, _| {
                Complex::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
            });
            let direct = embed_vector(&(&a * &x));
            let via = embed_matrix(&a) * embed_vector(&x);
            let scale = direct.norm().max(1.0);
            assert!((direct - via).norm() <= 1e-12 * scale);
        }
    }

    #[test]
    fn channel_deterministic() {
        let a = generate_channel(&mut instance_rng(9, 0), 3, 2);
        let b = generate_channel(&mut instance_rng(9, 0), 3, 2);
        assert_eq!(a, b);
    }

    #[test]
    fn singleton_constellation() {
        let mut rng = instance_rng(1, 1);
        let x = generate_symbols(&mut rng, 5, &[1.0]);
        assert!(x.iter().all(|c| *c == Complex::new(1.0, 1.0)));
    }

    #[test]
    fn noiseless_limit() {
        let sys = ComplexSystem::qam16(2, 2);
        let mut rng = instance_rng(5, 0);
        let hc = generate_channel(&mut rng, 2, 2);
        let xc = generate_symbols(&mut rng, 2, &sys.constellation);
        let (yc, snr) = add_noise(&mut rng, &hc, &xc, f64::INFINITY, &sys).unwrap();
        assert!(snr.is_infinite());
        assert_eq!(yc, &hc * &xc);
    }

    #[test]
    fn db_conversion() {
        assert_eq!(db_to_linear(0.0), 1.0);
        assert!((db_to_linear(20.0) - 100.0).abs() < 1e-12);
    }

    #[test]
    fn constellation_validation() {
        assert!(ComplexSystem::new(1, 1, vec![]).is_err());
        assert!(ComplexSystem::new(1, 1, vec![1.0, 2.0]).is_err());
        assert!(ComplexSystem::new(0, 1, vec![1.0, -1.0]).is_err());
        assert!(ComplexSystem::new(1, 1, vec![-1.0, 1.0]).is_ok());
    }

    #[test]
    fn zero_count_rejected() {
        let cfg = DatasetConfig {
            system: ComplexSystem::qam16(2, 2),
            snr_db: vec![10.0],
            count: 0,
        };
        assert!(build_dataset(&cfg, 1).is_err());
    }
}
