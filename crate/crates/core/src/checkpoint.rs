//! Versioned flat binary checkpoints.
//!
//! Layout, all little-endian:
//!
//! | field | type |
//! |---|---|
//! | magic `NMOE` | 4 bytes |
//! | version | u32 |
//! | N, M, D, H, k_max, layers | u32 each |
//! | ρ | f64 |
//! | variant (0 zero, 1 copy), shared expert flag, bytes per parameter | u8 each |
//! | parameters | row-major, layer by layer: router, experts (W_in, W_out), shared |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::expert::ExpertBank;
use crate::moe_layer::MoeLayer;
use crate::numerics::{Matrix, Real};
use crate::router::{NullVariant, RoutingConfig};
use crate::trainer::model::Model;

pub const MAGIC: &[u8; 4] = b"NMOE";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 6 * 4 + 8 + 3;
const REAL_BYTES: usize = std::mem::size_of::<Real>();

/// Checkpoint header fields.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Header {
    pub n_experts: u32,
    pub n_null: u32,
    pub d_model: u32,
    pub d_hidden: u32,
    pub k_max: u32,
    pub n_layers: u32,
    pub rho: f64,
    pub variant: NullVariant,
    pub use_shared_expert: bool,
}

impl Header {
    fn of(model: &Model) -> Self {
        let r = &model.routing;
        Self {
            n_experts: r.n_experts as u32,
            n_null: r.n_null as u32,
            d_model: model.d_model() as u32,
            d_hidden: model.d_hidden() as u32,
            k_max: r.k_max as u32,
            n_layers: model.layers.len() as u32,
            rho: r.rho as f64,
            variant: r.null_variant,
            use_shared_expert: r.use_shared_expert,
        }
    }

    fn param_count(&self) -> usize {
        let (n, d, h) = (self.n_experts as usize, self.d_model as usize, self.d_hidden as usize);
        self.n_layers as usize * ((n + 1) * d + (n + 1) * 2 * d * h)
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let h = Header::of(model);
    let mut out = Vec::with_capacity(HEADER_LEN + h.param_count() * REAL_BYTES);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [h.n_experts, h.n_null, h.d_model, h.d_hidden, h.k_max, h.n_layers] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&h.rho.to_le_bytes());
    out.push(match h.variant {
        NullVariant::Zero => 0,
        NullVariant::Copy => 1,
    });
    out.push(u8::from(h.use_shared_expert));
    out.push(REAL_BYTES as u8);
    for m in model.matrices() {
        for v in m.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4-byte slice"))
}

pub fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < HEADER_LEN {
        return Err(corrupt(format!("file is {} bytes, header needs {HEADER_LEN}", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let f = |i: usize| u32_at(bytes, 8 + 4 * i);
    let rho = f64::from_le_bytes(bytes[32..40].try_into().expect("8-byte slice"));
    let variant = match bytes[40] {
        0 => NullVariant::Zero,
        1 => NullVariant::Copy,
        b => return Err(corrupt(format!("unknown variant tag {b}"))),
    };
    let use_shared_expert = match bytes[41] {
        0 => false,
        1 => true,
        b => return Err(corrupt(format!("bad shared-expert flag {b}"))),
    };
    if bytes[42] as usize != REAL_BYTES {
        return Err(corrupt(format!(
            "parameters stored with {} bytes, this build uses {REAL_BYTES}",
            bytes[42]
        )));
    }
    let h = Header {
        n_experts: f(0),
        n_null: f(1),
        d_model: f(2),
        d_hidden: f(3),
        k_max: f(4),
        n_layers: f(5),
        rho,
        variant,
        use_shared_expert,
    };
    if h.n_experts == 0 || h.k_max == 0 || h.k_max > h.n_experts || h.n_layers == 0 || h.d_model == 0 {
        return Err(corrupt("header dimensions are inconsistent"));
    }
    Ok(h)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let h = read_header(bytes)?;
    let expected = h
        .param_count()
        .checked_mul(REAL_BYTES)
        .and_then(|p| p.checked_add(HEADER_LEN))
        .ok_or_else(|| corrupt("header dimensions overflow"))?;
    if bytes.len() != expected {
        return Err(corrupt(format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let routing = RoutingConfig::new(h.n_experts as usize, h.k_max as usize, h.rho as Real, h.variant)
        .map_err(|e| corrupt(e.to_string()))?
        .with_shared_expert(h.use_shared_expert)
        .with_null_copies(h.n_null as usize);
    let (n, d, hid) = (h.n_experts as usize, h.d_model as usize, h.d_hidden as usize);
    let mut layers: Vec<MoeLayer> = (0..h.n_layers)
        .map(|_| MoeLayer {
            router: Matrix::zeros(n + 1, d),
            bank: ExpertBank::zeros(n, d, hid),
        })
        .collect();
    let mut off = HEADER_LEN;
    for layer in &mut layers {
        for m in layer.matrices_mut() {
            for v in m.data_mut() {
                let raw = bytes[off..off + REAL_BYTES].try_into().expect("sized slice");
                *v = Real::from_le_bytes(raw);
                off += REAL_BYTES;
            }
        }
    }
    Ok(Model { routing, layers })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
