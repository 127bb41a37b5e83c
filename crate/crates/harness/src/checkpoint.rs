//! `BNCL` checkpoints: a backbone plus an optional consolidated head.
//!
//! All integers and reals are little-endian.
//!
//! ```text
//! "BNCL"                      magic
//! u32 version                 1
//! u32 flags                   bit 0: backbone frozen
//! u32 block count L
//! L × (u32 in_dim, u32 out_dim)
//! L × block payload:
//!     out_dim·in_dim × f32    shadow weights, row-major
//!     out_dim·W × u64         packed signs, W = ceil(in_dim / 64), padding bits zero
//!     out_dim × f32           scale
//!     out_dim × f32           shift
//! optional section:
//!     "CWRS"                  tag
//!     u32 payload length in bytes
//!     u8 lp, u8 hp            0 = float, otherwise the bit width
//!     u16 reserved (0)
//!     f64 learning rate
//!     u32 feature dim D, u32 class count M
//!     M × u32                 class ids in head-row order
//!     M·D × f64               cw
//!     M × f64                 cw bias
//!     M × u64                 past
//! ```

use std::fs;
use std::path::Path;

use bnncl_core::backbone::{BackboneModel, BinaryBlock};
use bnncl_core::bitcore::{words_for, BitTensor};
use bnncl_core::cwr::{CwrState, Precision, QuantConfig};
use bnncl_core::fixedpoint::Bits;

pub const MAGIC: [u8; 4] = *b"BNCL";
pub const CWRS_TAG: [u8; 4] = *b"CWRS";
pub const VERSION: u32 = 1;
const FLAG_FROZEN: u32 = 1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a BNCL checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated at byte {offset}: needed {needed} more bytes")]
    Truncated { offset: usize, needed: usize },
    #[error("unknown section tag {0:?}")]
    UnknownSection([u8; 4]),
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub backbone: BackboneModel,
    pub head: Option<CwrState>,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: n - rest });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length"))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn count(&self, n: usize, width: usize) -> Result<usize, CheckpointError> {
        // Reject absurd counts before allocating.
        let total = n.checked_mul(width).ok_or_else(|| CheckpointError::Inconsistent("size overflow".into()))?;
        let rest = self.bytes.len() - self.pos;
        if total > rest {
            return Err(CheckpointError::Truncated { offset: self.pos, needed: total - rest });
        }
        Ok(total)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CheckpointError> {
        let len = self.count(n, 4)?;
        Ok(self.take(len)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CheckpointError> {
        let len = self.count(n, 8)?;
        Ok(self.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect())
    }

    fn u64s(&mut self, n: usize) -> Result<Vec<u64>, CheckpointError> {
        let len = self.count(n, 8)?;
        Ok(self.take(len)?.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8"))).collect())
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>, CheckpointError> {
        let len = self.count(n, 4)?;
        Ok(self.take(len)?.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4"))).collect())
    }
}

fn precision_code(p: Precision) -> u8 {
    match p {
        Precision::Float => 0,
        Precision::Fixed(b) => b.width() as u8,
    }
}

fn precision_from_code(code: u8) -> Result<Precision, CheckpointError> {
    match code {
        0 => Ok(Precision::Float),
        w => Bits::from_width(w as u32)
            .map(Precision::Fixed)
            .ok_or_else(|| CheckpointError::Inconsistent(format!("unknown precision code {w}"))),
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

pub fn encode(backbone: &BackboneModel, head: Option<&CwrState>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if backbone.is_frozen() { FLAG_FROZEN } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    put_u32(&mut out, backbone.blocks().len());
    for b in backbone.blocks() {
        put_u32(&mut out, b.in_dim());
        put_u32(&mut out, b.out_dim());
    }
    for b in backbone.blocks() {
        b.shadow_weights().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        b.packed_weights().words().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        b.scale().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        b.shift().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    if let Some(state) = head {
        let mut body = Vec::new();
        let config = state.config();
        body.push(precision_code(config.lp()));
        body.push(precision_code(config.hp()));
        body.extend_from_slice(&0u16.to_le_bytes());
        body.extend_from_slice(&config.learning_rate().to_le_bytes());
        put_u32(&mut body, state.feature_dim());
        put_u32(&mut body, state.classes().len());
        state.classes().iter().for_each(|c| body.extend_from_slice(&c.to_le_bytes()));
        state.cw().iter().chain(state.cw_bias()).for_each(|v| body.extend_from_slice(&v.to_le_bytes()));
        state.past().iter().for_each(|v| body.extend_from_slice(&v.to_le_bytes()));
        out.extend_from_slice(&CWRS_TAG);
        put_u32(&mut out, body.len());
        out.extend_from_slice(&body);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.array::<4>()?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let flags = cur.u32()?;
    let count = cur.u32()? as usize;
    cur.count(count, 8)?;
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        dims.push((cur.u32()? as usize, cur.u32()? as usize));
    }
    let mut blocks = Vec::with_capacity(count);
    for (index, &(n_in, n_out)) in dims.iter().enumerate() {
        let shadow = cur.f32s(n_in * n_out)?;
        let words = cur.u64s(n_out * words_for(n_in))?;
        let scale = cur.f32s(n_out)?;
        let shift = cur.f32s(n_out)?;
        let bad = |what: String| CheckpointError::Inconsistent(format!("block {index}: {what}"));
        let packed = BitTensor::from_words(words, &[n_out, n_in]).map_err(|e| bad(e.to_string()))?;
        let block = BinaryBlock::from_raw_parts(n_in, n_out, shadow, packed, scale, shift).map_err(|e| bad(e.to_string()))?;
        blocks.push(block);
    }
    let backbone = BackboneModel::from_blocks(blocks, flags & FLAG_FROZEN != 0)
        .map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;

    let mut head = None;
    if cur.pos < bytes.len() {
        let tag = cur.array::<4>()?;
        if tag != CWRS_TAG {
            return Err(CheckpointError::UnknownSection(tag));
        }
        let len = cur.u32()? as usize;
        let body = cur.take(len)?;
        head = Some(decode_head(body)?);
    }
    if cur.pos < bytes.len() {
        return Err(CheckpointError::TrailingBytes(bytes.len() - cur.pos));
    }
    if let Some(h) = &head {
        if h.feature_dim() != backbone.feature_dim() {
            return Err(CheckpointError::Inconsistent(format!(
                "head expects {} features, backbone yields {}",
                h.feature_dim(),
                backbone.feature_dim()
            )));
        }
    }
    Ok(Checkpoint { backbone, head })
}

fn decode_head(body: &[u8]) -> Result<CwrState, CheckpointError> {
    let mut cur = Cursor { bytes: body, pos: 0 };
    let lp = precision_from_code(cur.u8()?)?;
    let hp = precision_from_code(cur.u8()?)?;
    cur.u16()?;
    let lr = cur.f64()?;
    let config = QuantConfig::new(lp, hp, lr).map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
    let d = cur.u32()? as usize;
    let m = cur.u32()? as usize;
    let classes = cur.u32s(m)?;
    let cw = cur.f64s(m * d)?;
    let bias = cur.f64s(m)?;
    let past = cur.u64s(m)?;
    if cur.pos != body.len() {
        return Err(CheckpointError::Inconsistent("CWRS length does not match its contents".into()));
    }
    CwrState::from_consolidated(d, config, classes, cw, bias, past).map_err(|e| CheckpointError::Inconsistent(e.to_string()))
}

pub fn save(path: &Path, backbone: &BackboneModel, head: Option<&CwrState>) -> Result<(), crate::HarnessError> {
    fs::write(path, encode(backbone, head))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, crate::HarnessError> {
    Ok(decode(&fs::read(path)?)?)
}
