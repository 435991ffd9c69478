//! Binary containers for datasets and checkpoints.
//!
//! Both share one layout:
//!
//! ```text
//! magic      8 bytes   "KAQDSET1" or "KAQCKPT1"
//! hlen       u64 LE    byte length of the header
//! header     hlen      UTF-8 JSON
//! payload    f64 LE    IEEE-754 doubles, count fixed by the header
//! ```
//!
//! Dataset payload, per instance in order: `snr_db`, `H` row-major (`M·N`),
//! `y` (`M`), `x` (`N`).
//!
//! Checkpoint payload: the raw learnables (step, `λ`, quantizer logs,
//! kernel logs), then the Adam first moments, then the second moments.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KaqError, Result};
use crate::kernel::KernelParams;
use crate::mimo::{db_to_linear, ComplexSystem, Dataset, DatasetConfig, MimoInstance};
use crate::quantizer::QuantConfig;
use crate::training::{AdamState, EpochStats, TrainConfig, TrainState};
use crate::unfolded::{UnfoldedParams, Variant};

pub const DATASET_MAGIC: &[u8; 8] = b"KAQDSET1";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KAQCKPT1";
pub const FORMAT_VERSION: u32 = 1;

/// Header JSON is capped to keep corrupt lengths from allocating wildly.
const MAX_HEADER: u64 = 1 << 30;

fn write_container<W: Write>(w: &mut W, magic: &[u8; 8], header: &[u8], payload: &[f64]) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header)?;
    let mut buf = Vec::with_capacity(payload.len() * 8);
    for v in payload {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Returns the header bytes and the remaining payload as doubles.
fn read_container<R: Read>(r: &mut R, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<f64>)> {
    let mut got = [0u8; 8];
    r.read_exact(&mut got)?;
    if &got != magic {
        return Err(KaqError::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&got)
        )));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let hlen = u64::from_le_bytes(len);
    if hlen > MAX_HEADER {
        return Err(KaqError::Format(format!("header length {hlen} is implausible")));
    }
    let mut header = vec![0u8; hlen as usize];
    r.read_exact(&mut header)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if rest.len() % 8 != 0 {
        return Err(KaqError::Format("payload is not a whole number of doubles".into()));
    }
    let payload = rest
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((header, payload))
}

/// Writes through a sibling temporary file so a failed write never leaves a
/// truncated target behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    version: u32,
    config: DatasetConfig,
    seed: u64,
    count: usize,
    m: usize,
    n: usize,
}

pub fn write_dataset<W: Write>(w: &mut W, ds: &Dataset) -> Result<()> {
    let (m, n) = (ds.m(), ds.n());
    let header = DatasetHeader {
        version: FORMAT_VERSION,
        config: ds.config.clone(),
        seed: ds.seed,
        count: ds.len(),
        m,
        n,
    };
    let mut payload = Vec::with_capacity(ds.len() * (1 + m * n + m + n));
    for inst in &ds.instances {
        if inst.m() != m || inst.n() != n {
            return Err(KaqError::Dimension("instance dimensions differ from the dataset".into()));
        }
        payload.push(inst.snr_db);
        for i in 0..m {
            payload.extend(inst.h.row(i).iter());
        }
        payload.extend(inst.y.iter());
        payload.extend(inst.x_true.iter());
    }
    write_container(w, DATASET_MAGIC, &serde_json::to_vec(&header)?, &payload)
}

pub fn read_dataset<R: Read>(r: &mut R) -> Result<Dataset> {
    let (header, payload) = read_container(r, DATASET_MAGIC)?;
    let h: DatasetHeader = serde_json::from_slice(&header)?;
    if h.version != FORMAT_VERSION {
        return Err(KaqError::Format(format!("unsupported dataset version {}", h.version)));
    }
    h.config.validate()?;
    if h.m != h.config.system.m() || h.n != h.config.system.n() {
        return Err(KaqError::Format("header dimensions disagree with the system".into()));
    }
    let (m, n) = (h.m, h.n);
    let stride = 1 + m * n + m + n;
    if payload.len() != h.count * stride {
        return Err(KaqError::Format(format!(
            "expected {} doubles for {} instances, found {}",
            h.count * stride,
            h.count,
            payload.len()
        )));
    }
    let instances = payload
        .chunks_exact(stride)
        .map(|c| {
            let snr_db = c[0];
            MimoInstance {
                h: DMatrix::from_row_slice(m, n, &c[1..1 + m * n]),
                y: DVector::from_column_slice(&c[1 + m * n..1 + m * n + m]),
                x_true: DVector::from_column_slice(&c[1 + m * n + m..]),
                snr_db,
                snr_linear: db_to_linear(snr_db),
            }
        })
        .collect();
    Ok(Dataset {
        config: h.config,
        seed: h.seed,
        instances,
    })
}

pub fn dataset_to_bytes(ds: &Dataset) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_dataset(&mut buf, ds)?;
    Ok(buf)
}

pub fn save_dataset(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_atomic(path.as_ref(), &dataset_to_bytes(ds)?)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    read_dataset(&mut bytes.as_slice())
}

/// A training run frozen between epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config: TrainConfig,
    pub history: Vec<EpochStats>,
    /// System the network was trained on, when known.
    pub system: Option<ComplexSystem>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantLayout {
    bits: u32,
    dynamic: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Layout {
    variant: Variant,
    layers: usize,
    quant: Option<QuantLayout>,
    kernel: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    version: u32,
    layout: Layout,
    /// Completed epochs; also the stream of the next shuffle.
    epoch: usize,
    adam_step: u64,
    raw_len: usize,
    config: TrainConfig,
    history: Vec<EpochStats>,
    #[serde(default)]
    system: Option<ComplexSystem>,
}

fn layout_of(state: &TrainState) -> Layout {
    Layout {
        variant: state.params.variant,
        layers: state.params.layers(),
        quant: state.quant.as_ref().map(|q| QuantLayout {
            bits: q.bits,
            dynamic: q.is_dynamic(),
        }),
        kernel: state.kernel.is_some(),
    }
}

/// A state with the given structure and placeholder values.
fn skeleton(layout: &Layout) -> Result<TrainState> {
    let k = layout.layers;
    let ones = vec![1.0; k];
    let params = match layout.variant {
        Variant::Pgd => UnfoldedParams::pgd(k, 1.0, 0.0),
        Variant::Admm => UnfoldedParams::admm(k, 1.0, 0.0),
    };
    let quant = match layout.quant {
        Some(QuantLayout { bits, dynamic: true }) => Some(QuantConfig::new_dynamic(bits, &ones, &ones)?),
        Some(QuantLayout { bits, dynamic: false }) => Some(QuantConfig::new_static(bits, &ones)?),
        None => None,
    };
    let kernel = if layout.kernel { Some(KernelParams::shared(&ones)?) } else { None };
    TrainState::new(params, quant, kernel)
}

pub fn write_checkpoint<W: Write>(w: &mut W, ckpt: &Checkpoint) -> Result<()> {
    let s = &ckpt.state;
    let raw = s.raw_params();
    if s.adam.m.len() != raw.len() || s.adam.v.len() != raw.len() {
        return Err(KaqError::Dimension("Adam moments do not match the learnables".into()));
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        layout: layout_of(s),
        epoch: s.epoch,
        adam_step: s.adam.step,
        raw_len: raw.len(),
        config: ckpt.config.clone(),
        history: ckpt.history.clone(),
        system: ckpt.system.clone(),
    };
    let mut payload = raw;
    payload.extend_from_slice(&s.adam.m);
    payload.extend_from_slice(&s.adam.v);
    write_container(w, CHECKPOINT_MAGIC, &serde_json::to_vec(&header)?, &payload)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    let (header, payload) = read_container(r, CHECKPOINT_MAGIC)?;
    let h: CheckpointHeader = serde_json::from_slice(&header)?;
    if h.version != FORMAT_VERSION {
        return Err(KaqError::Format(format!("unsupported checkpoint version {}", h.version)));
    }
    let mut state = skeleton(&h.layout)?;
    let n = state.raw_params().len();
    if h.raw_len != n || payload.len() != 3 * n {
        return Err(KaqError::Format(format!(
            "expected {} doubles for {n} learnables, found {}",
            3 * n,
            payload.len()
        )));
    }
    state.set_raw_params(&payload[..n])?;
    state.params.validate()?;
    state.adam = AdamState {
        m: payload[n..2 * n].to_vec(),
        v: payload[2 * n..].to_vec(),
        step: h.adam_step,
    };
    state.epoch = h.epoch;
    Ok(Checkpoint {
        state,
        config: h.config,
        history: h.history,
        system: h.system,
    })
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ckpt)?;
    Ok(buf)
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_to_bytes(ckpt)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    read_checkpoint(&mut bytes.as_slice())
}
