//! Binary little-endian checkpoint format.
//!
//! ```text
//! magic "SGDRFCKP" | u32 version | u8 kind | u32 hash_len, hash bytes
//! u64 K | u64 W | u64 m | u64 step_count | f64 noise_var
//! u64 n_params | n_params × f64
//! u8 has_optimizer [u64 step | u64 skipped | f64 lr, b1, b2, eps | n_params × f64 m1 | n_params × f64 m2]
//! "END\n"
//! ```

use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use crate::engine::{AdamConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::model::ModelHyperparams;
use crate::variational::{GaussianVarParams, VariationalState};
use crate::vgp::VgpState;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SGDRFCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const TRAILER: &[u8; 4] = b"END\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Sgdrf,
    Vgp,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Sgdrf => 0,
            ModelKind::Vgp => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub config_hash: String,
    /// Zero for models without communities.
    pub k: usize,
    pub w: usize,
    pub m: usize,
    pub step_count: u64,
}

impl CheckpointHeader {
    /// Compares stored dimensions with the ones implied by a configuration.
    pub fn check_dims(&self, hyper: &ModelHyperparams) -> Result<()> {
        let k = if self.kind == ModelKind::Vgp { 0 } else { hyper.k };
        let m = hyper.inducing.len();
        for (name, stored, expected) in [("K", self.k, k), ("W", self.w, hyper.w), ("m", self.m, m)] {
            if stored != expected {
                return Err(Error::DimensionMismatch {
                    what: format!("checkpoint {name} (checkpoint has {name} = {stored}, config has {name} = {expected})"),
                    expected,
                    found: stored,
                });
            }
        }
        Ok(())
    }
}

/// Variational state plus optimizer, as restored from disk.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub state: VariationalState,
    pub optimizer: Option<OptimizerState>,
}

fn encode(
    header: &CheckpointHeader,
    noise_var: f64,
    params: &[f64],
    opt: Option<&OptimizerState>,
) -> std::io::Result<Vec<u8>> {
    let mut b = Vec::with_capacity(64 + 24 * params.len());
    b.write_all(CHECKPOINT_MAGIC)?;
    b.write_u32::<LE>(CHECKPOINT_VERSION)?;
    b.write_u8(header.kind.tag())?;
    b.write_u32::<LE>(header.config_hash.len() as u32)?;
    b.write_all(header.config_hash.as_bytes())?;
    for v in [header.k, header.w, header.m] {
        b.write_u64::<LE>(v as u64)?;
    }
    b.write_u64::<LE>(header.step_count)?;
    b.write_f64::<LE>(noise_var)?;
    b.write_u64::<LE>(params.len() as u64)?;
    for &p in params {
        b.write_f64::<LE>(p)?;
    }
    match opt {
        None => b.write_u8(0)?,
        Some(o) => {
            b.write_u8(1)?;
            b.write_u64::<LE>(o.step)?;
            b.write_u64::<LE>(o.skipped)?;
            let c = o.config;
            for v in [c.learning_rate, c.moment_decay_1, c.moment_decay_2, c.epsilon] {
                b.write_f64::<LE>(v)?;
            }
            for &v in o.first_moment.iter().chain(&o.second_moment) {
                b.write_f64::<LE>(v)?;
            }
        }
    }
    b.write_all(TRAILER)?;
    Ok(b)
}

struct Decoded {
    header: CheckpointHeader,
    noise_var: f64,
    params: Vec<f64>,
    opt: Option<OptimizerState>,
}

fn read_f64s(c: &mut Cursor<&[u8]>, n: usize) -> std::io::Result<Vec<f64>> {
    // guard against absurd lengths in corrupt headers before allocating
    let remaining = c.get_ref().len() as u64 - c.position();
    if (n as u64).saturating_mul(8) > remaining {
        return Err(std::io::ErrorKind::UnexpectedEof.into());
    }
    (0..n).map(|_| c.read_f64::<LE>()).collect()
}

fn decode(path: &Path, bytes: &[u8]) -> Result<Decoded> {
    let corrupt = |message: String| Error::Corrupt {
        path: path.to_path_buf(),
        message,
    };
    let truncated = |e: std::io::Error| corrupt(format!("truncated checkpoint ({e})"));
    let mut c = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    c.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(corrupt("not a checkpoint file (bad magic)".into()));
    }
    let version = c.read_u32::<LE>().map_err(truncated)?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!(
            "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )));
    }
    let kind = match c.read_u8().map_err(truncated)? {
        0 => ModelKind::Sgdrf,
        1 => ModelKind::Vgp,
        t => return Err(corrupt(format!("unknown model kind tag {t}"))),
    };
    let hash_len = c.read_u32::<LE>().map_err(truncated)? as usize;
    if hash_len > 256 {
        return Err(corrupt(format!("implausible hash length {hash_len}")));
    }
    let mut hash = vec![0u8; hash_len];
    c.read_exact(&mut hash).map_err(truncated)?;
    let config_hash = String::from_utf8(hash).map_err(|_| corrupt("config hash is not UTF-8".into()))?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        *d = c.read_u64::<LE>().map_err(truncated)? as usize;
    }
    let step_count = c.read_u64::<LE>().map_err(truncated)?;
    let noise_var = c.read_f64::<LE>().map_err(truncated)?;
    let n = c.read_u64::<LE>().map_err(truncated)? as usize;
    let params = read_f64s(&mut c, n).map_err(truncated)?;
    let opt = match c.read_u8().map_err(truncated)? {
        0 => None,
        1 => {
            let step = c.read_u64::<LE>().map_err(truncated)?;
            let skipped = c.read_u64::<LE>().map_err(truncated)?;
            let cfg = read_f64s(&mut c, 4).map_err(truncated)?;
            let first_moment = read_f64s(&mut c, n).map_err(truncated)?;
            let second_moment = read_f64s(&mut c, n).map_err(truncated)?;
            Some(OptimizerState {
                config: AdamConfig {
                    learning_rate: cfg[0],
                    moment_decay_1: cfg[1],
                    moment_decay_2: cfg[2],
                    epsilon: cfg[3],
                },
                first_moment,
                second_moment,
                step,
                skipped,
            })
        }
        t => return Err(corrupt(format!("bad optimizer flag {t}"))),
    };
    let mut trailer = [0u8; 4];
    c.read_exact(&mut trailer).map_err(truncated)?;
    if &trailer != TRAILER {
        return Err(corrupt("missing end marker".into()));
    }
    if (c.position() as usize) != bytes.len() {
        return Err(corrupt("trailing bytes after end marker".into()));
    }
    Ok(Decoded {
        header: CheckpointHeader {
            kind,
            config_hash,
            k: dims[0],
            w: dims[1],
            m: dims[2],
            step_count,
        },
        noise_var,
        params,
        opt,
    })
}

fn read_file(path: &Path) -> Result<Decoded> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(path, &bytes)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, |out| out.write_all(bytes))
}

pub fn save_checkpoint(
    path: &Path,
    state: &VariationalState,
    opt: Option<&OptimizerState>,
    config_hash: &str,
) -> Result<()> {
    let params = state.to_flat();
    if let Some(o) = opt {
        crate::error::ensure_len("optimizer moments", params.len(), o.len())?;
    }
    let header = CheckpointHeader {
        kind: ModelKind::Sgdrf,
        config_hash: config_hash.to_string(),
        k: state.k(),
        w: state.w(),
        m: state.m(),
        step_count: state.step_count,
    };
    let bytes = encode(&header, 0.0, &params, opt).map_err(|e| Error::io(path, e))?;
    write_bytes(path, &bytes)
}

/// Reads only the header fields, e.g. to dispatch on model kind.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader> {
    Ok(read_file(path)?.header)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let d = read_file(path)?;
    if d.header.kind != ModelKind::Sgdrf {
        return Err(Error::InvalidArgument(format!(
            "{} holds a {:?} model, not an S-GDRF state",
            path.display(),
            d.header.kind
        )));
    }
    let h = &d.header;
    let state = VariationalState::from_flat(h.k, h.m, h.w, &d.params, h.step_count).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(Checkpoint {
        header: d.header,
        state,
        optimizer: d.opt,
    })
}

/// VGP states store per-category Gaussian parameters; the GP itself is rebuilt from configuration.
pub fn save_vgp_checkpoint(path: &Path, state: &VgpState, config_hash: &str) -> Result<()> {
    let mut params = Vec::with_capacity(state.w() * GaussianVarParams::num_params(state.m()));
    for p in &state.params {
        p.write_flat(&mut params);
    }
    let header = CheckpointHeader {
        kind: ModelKind::Vgp,
        config_hash: config_hash.to_string(),
        k: 0,
        w: state.w(),
        m: state.m(),
        step_count: 0,
    };
    let bytes = encode(&header, state.noise_var, &params, None).map_err(|e| Error::io(path, e))?;
    write_bytes(path, &bytes)
}

pub fn load_vgp_checkpoint(path: &Path, hyper: &ModelHyperparams) -> Result<(VgpState, CheckpointHeader)> {
    let d = read_file(path)?;
    if d.header.kind != ModelKind::Vgp {
        return Err(Error::InvalidArgument(format!("{} does not hold a VGP model", path.display())));
    }
    d.header.check_dims(hyper)?;
    let mut state = VgpState::prior(hyper, d.noise_var)?;
    let per = GaussianVarParams::num_params(state.m());
    crate::error::ensure_len("VGP parameter vector", per * state.w(), d.params.len())?;
    for (p, chunk) in state.params.iter_mut().zip(d.params.chunks(per)) {
        p.read_flat(chunk);
    }
    Ok((state, d.header))
}
