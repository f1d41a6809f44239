//! The `CCT1` tensor container and the weights file built from it.
//!
//! Layout of one block, all integers little-endian:
//!
//! ```text
//! b"CCT1" | precision: u8 (4 or 8) | C: u32 | T: u32 | H: u32 | W: u32 | C*T*H*W scalars
//! ```
//!
//! Matrices are stored as blocks of dims `(rows, cols, 1, 1)` and scalars as
//! `(1, 1, 1, 1)`. A weights file is a single manifest line followed by the
//! blocks it names, in order.

use std::fs;
use std::path::Path;

use crate::criss_cross::CcaWeights;
use crate::error::{Error, Result};
use crate::rcca::{CcaWeightsC, ModuleWeights, Variant};
use crate::tensor::{FeatureMap4D, Grid, Matrix, Scalar};

pub const MAGIC: &[u8; 4] = b"CCT1";
const HEADER_LEN: usize = 4 + 1 + 16;
const WEIGHTS_TAG: &str = "CCTW1";

/// A decoded tensor whose precision was chosen by the file.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyFeatureMap {
    F32(FeatureMap4D<f32>),
    F64(FeatureMap4D<f64>),
}

impl AnyFeatureMap {
    pub fn dims(&self) -> [usize; 4] {
        match self {
            AnyFeatureMap::F32(x) => x.dims(),
            AnyFeatureMap::F64(x) => x.dims(),
        }
    }
}

fn header(dims: [usize; 4], precision: u8) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(MAGIC);
    out.push(precision);
    for d in dims {
        let d = u32::try_from(d)
            .map_err(|_| Error::Format(format!("dimension {d} does not fit in u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

fn encode_raw<S: Scalar>(dims: [usize; 4], data: &[S], out: &mut Vec<u8>) -> Result<()> {
    out.extend(header(dims, S::BYTES)?);
    out.reserve(data.len() * S::BYTES as usize);
    for &v in data {
        v.write_le(out);
    }
    Ok(())
}

pub fn encode_tensor<S: Scalar>(x: &FeatureMap4D<S>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    encode_raw(x.dims(), x.data(), &mut out)?;
    Ok(out)
}

struct RawBlock<'a> {
    precision: u8,
    dims: [usize; 4],
    payload: &'a [u8],
}

/// Parses one block from the front of `bytes`, returning it and the remaining input.
fn split_block(bytes: &[u8]) -> Result<(RawBlock<'_>, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing CCT1 magic bytes".into()));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format("truncated CCT1 header".into()));
    }
    let precision = bytes[4];
    if precision != 4 && precision != 8 {
        return Err(Error::Format(format!("unknown precision flag {precision}")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = 5 + 4 * i;
        *d = u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    }
    if dims.contains(&0) {
        return Err(Error::Format(format!("zero dimension in {dims:?}")));
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(precision as usize))
        .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
    let rest = &bytes[HEADER_LEN..];
    if rest.len() < count {
        return Err(Error::Format(format!(
            "truncated payload: expected {count} bytes, found {}",
            rest.len()
        )));
    }
    Ok((
        RawBlock {
            precision,
            dims,
            payload: &rest[..count],
        },
        &rest[count..],
    ))
}

fn decode_payload<S: Scalar>(block: &RawBlock<'_>) -> Vec<S> {
    block
        .payload
        .chunks_exact(block.precision as usize)
        .map(|chunk| match block.precision {
            4 => S::of(f32::read_le(chunk) as f64),
            _ => S::of(f64::read_le(chunk)),
        })
        .collect()
}

fn block_to_map<S: Scalar>(block: &RawBlock<'_>) -> Result<FeatureMap4D<S>> {
    let [c, t, h, w] = block.dims;
    FeatureMap4D::from_vec(c, Grid::new(t, h, w)?, decode_payload(block))
}

pub fn decode_tensor(bytes: &[u8]) -> Result<AnyFeatureMap> {
    let (block, rest) = split_block(bytes)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", rest.len())));
    }
    Ok(match block.precision {
        4 => AnyFeatureMap::F32(block_to_map(&block)?),
        _ => AnyFeatureMap::F64(block_to_map(&block)?),
    })
}

pub fn write_tensor<S: Scalar>(path: impl AsRef<Path>, x: &FeatureMap4D<S>) -> Result<()> {
    fs::write(path, encode_tensor(x)?)?;
    Ok(())
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyFeatureMap> {
    decode_tensor(&fs::read(path)?)
}

/// Reads a tensor and requires it to be stored at precision `S`.
pub fn read_tensor_as<S: Scalar>(path: impl AsRef<Path>) -> Result<FeatureMap4D<S>> {
    let bytes = fs::read(path)?;
    let (block, rest) = split_block(&bytes)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after tensor", rest.len())));
    }
    if block.precision != S::BYTES {
        return Err(Error::Format(format!(
            "expected precision {}, file has {}",
            S::BYTES,
            block.precision
        )));
    }
    block_to_map(&block)
}

/// Write-then-read through `path`.
pub fn tensor_roundtrip<S: Scalar>(x: &FeatureMap4D<S>, path: impl AsRef<Path>) -> Result<FeatureMap4D<S>> {
    write_tensor(&path, x)?;
    read_tensor_as(&path)
}

fn encode_matrix<S: Scalar>(m: &Matrix<S>, out: &mut Vec<u8>) -> Result<()> {
    encode_raw([m.rows(), m.cols(), 1, 1], m.data(), out)
}

fn take_matrix<'a, S: Scalar>(bytes: &'a [u8], name: &str) -> Result<(Matrix<S>, &'a [u8])> {
    let (block, rest) = split_block(bytes)?;
    if block.precision != S::BYTES {
        return Err(Error::Format(format!("block {name}: precision {} mismatch", block.precision)));
    }
    let [r, c, t, w] = block.dims;
    if t != 1 || w != 1 {
        return Err(Error::Format(format!("block {name}: expected (rows, cols, 1, 1), got {:?}", block.dims)));
    }
    Ok((Matrix::from_vec(r, c, decode_payload(&block))?, rest))
}

/// Serializes module weights: manifest line, then `wq, wk, wv, [wr,] gamma`.
pub fn encode_weights<S: Scalar>(weights: &ModuleWeights<S>) -> Result<Vec<u8>> {
    let (kind, blocks): (&str, Vec<&Matrix<S>>) = match weights {
        ModuleWeights::Full(w) => ("full", vec![&w.wq, &w.wk, &w.wv]),
        ModuleWeights::Reduced(w) => ("reduced", vec![&w.wq, &w.wk, &w.wv_reduced, &w.wr]),
    };
    let names = if blocks.len() == 4 { "wq,wk,wv,wr,gamma" } else { "wq,wk,wv,gamma" };
    let mut out = format!(
        "{WEIGHTS_TAG} kind={kind} precision={} blocks={names}\n",
        S::BYTES
    )
    .into_bytes();
    for m in blocks {
        encode_matrix(m, &mut out)?;
    }
    encode_matrix(&Matrix::from_vec(1, 1, vec![weights.gamma()])?, &mut out)?;
    Ok(out)
}

pub fn decode_weights<S: Scalar>(bytes: &[u8]) -> Result<ModuleWeights<S>> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("weights manifest line missing".into()))?;
    let manifest = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::Format("weights manifest is not UTF-8".into()))?;
    let mut fields = manifest.split_whitespace();
    if fields.next() != Some(WEIGHTS_TAG) {
        return Err(Error::Format(format!("weights manifest must start with {WEIGHTS_TAG}")));
    }
    let mut kind = None;
    for field in fields {
        if let Some(v) = field.strip_prefix("kind=") {
            kind = Some(v.to_string());
        }
    }
    let body = &bytes[newline + 1..];
    let (wq, body) = take_matrix::<S>(body, "wq")?;
    let (wk, body) = take_matrix::<S>(body, "wk")?;
    let (wv, body) = take_matrix::<S>(body, "wv")?;
    let weights = match kind.as_deref() {
        Some("full") => {
            let (g, body) = take_matrix::<S>(body, "gamma")?;
            ensure_consumed(body)?;
            ModuleWeights::Full(CcaWeights::new(wq, wk, wv, g.get(0, 0))?)
        }
        Some("reduced") => {
            let (wr, body) = take_matrix::<S>(body, "wr")?;
            let (g, body) = take_matrix::<S>(body, "gamma")?;
            ensure_consumed(body)?;
            ModuleWeights::Reduced(CcaWeightsC::new(wq, wk, wv, wr, g.get(0, 0))?)
        }
        other => return Err(Error::Format(format!("unknown weights kind {other:?}"))),
    };
    Ok(weights)
}

fn ensure_consumed(rest: &[u8]) -> Result<()> {
    if rest.is_empty() {
        Ok(())
    } else {
        Err(Error::Format(format!("{} trailing bytes after weights", rest.len())))
    }
}

pub fn write_weights<S: Scalar>(path: impl AsRef<Path>, weights: &ModuleWeights<S>) -> Result<()> {
    fs::write(path, encode_weights(weights)?)?;
    Ok(())
}

pub fn read_weights<S: Scalar>(path: impl AsRef<Path>) -> Result<ModuleWeights<S>> {
    decode_weights(&fs::read(path)?)
}

/// Checks that stored weights fit the requested structure.
pub fn weights_fit_variant<S: Scalar>(w: &ModuleWeights<S>, variant: Variant) -> Result<()> {
    match (w, variant) {
        (ModuleWeights::Reduced(_), Variant::C) | (ModuleWeights::Full(_), Variant::A | Variant::B | Variant::D) => Ok(()),
        _ => Err(Error::Config(format!(
            "weights kind does not match structure {variant}"
        ))),
    }
}
