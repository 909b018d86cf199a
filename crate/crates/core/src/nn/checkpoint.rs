//! Binary checkpoints.
//!
//! Extractor file:
//! ```text
//! magic "MMFM", version u32 = 1
//! n_tx, n_users, embed_dim, ffn_dim, n_heads, n_layers   u32 each
//! dropout, input_scale_db                                f64 each
//! tensor count u32, then per tensor: rows u32, cols u32, rows*cols f64
//! ```
//! Heads file:
//! ```text
//! magic "MMFH", version u32 = 1
//! n_tx, n_users, embed_dim, head count   u32 each
//! per head: env_id (u16 length + UTF-8), tensor count u32, tensors as above
//! ```
//! All values little-endian; tensors in declared parameter order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::model::{FeatureExtractor, ModelHyper, OutputHead, Parameters};
use super::tape::Tensor;
use crate::codec::{put_short_string, put_u32, Reader};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: [u8; 4] = *b"MMFM";
pub const HEADS_MAGIC: [u8; 4] = *b"MMFH";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_tensors(out: &mut Vec<u8>, tensors: &[&Tensor]) -> Result<()> {
    put_u32(out, tensors.len(), "tensor count")?;
    for t in tensors {
        put_u32(out, t.rows, "tensor rows")?;
        put_u32(out, t.cols, "tensor cols")?;
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn read_tensors_into(r: &mut Reader<'_>, dst: Vec<&mut Tensor>) -> Result<()> {
    let count = r.u32()? as usize;
    if count != dst.len() {
        return Err(Error::DimensionMismatch {
            context: "checkpoint tensor count",
            expected: dst.len(),
            got: count,
        });
    }
    for (i, t) in dst.into_iter().enumerate() {
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if (rows, cols) != (t.rows, t.cols) {
            return Err(Error::Malformed(format!(
                "tensor {i} stored as {rows}x{cols}, expected {}x{}",
                t.rows, t.cols
            )));
        }
        for v in t.data.iter_mut() {
            *v = r.f64()?;
        }
        if !t.is_finite() {
            return Err(Error::Malformed(format!(
                "tensor {i} holds non-finite values"
            )));
        }
    }
    Ok(())
}

pub fn encode_extractor(ext: &FeatureExtractor) -> Result<Vec<u8>> {
    let h = &ext.hyper;
    let mut out = Vec::with_capacity(64 + 8 * ext.n_params());
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (v, what) in [
        (h.n_tx, "n_tx"),
        (h.n_users, "n_users"),
        (h.embed_dim, "embed_dim"),
        (h.ffn_dim, "ffn_dim"),
        (h.n_heads, "n_heads"),
        (h.n_layers, "n_layers"),
    ] {
        put_u32(&mut out, v, what)?;
    }
    out.extend_from_slice(&h.dropout.to_le_bytes());
    out.extend_from_slice(&h.input_scale_db.to_le_bytes());
    put_tensors(&mut out, &ext.tensors())?;
    Ok(out)
}

pub fn decode_extractor(bytes: &[u8]) -> Result<FeatureExtractor> {
    let mut r = Reader::new(bytes);
    r.header(MODEL_MAGIC, CHECKPOINT_VERSION)?;
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let hyper = ModelHyper {
        n_tx: dims[0],
        n_users: dims[1],
        embed_dim: dims[2],
        ffn_dim: dims[3],
        n_heads: dims[4],
        n_layers: dims[5],
        dropout: r.f64()?,
        input_scale_db: r.f64()?,
    };
    hyper
        .validate()
        .map_err(|e| Error::Malformed(format!("checkpoint hyperparameters: {e}")))?;
    // Guard the allocation below against absurd headers.
    let expected_bytes =
        8 * (hyper.n_layers * (4 * hyper.embed_dim + 2 * hyper.ffn_dim) * hyper.embed_dim);
    if expected_bytes > r.remaining().saturating_mul(2) + (1 << 20) {
        return Err(Error::Truncated {
            offset: r.pos(),
            needed: expected_bytes,
            len: bytes.len(),
        });
    }
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    let mut ext = FeatureExtractor::new(hyper, &mut rng)?;
    read_tensors_into(&mut r, ext.tensors_mut())?;
    r.finish()?;
    Ok(ext)
}

pub fn encode_heads(hyper: &ModelHyper, heads: &BTreeMap<String, OutputHead>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&HEADS_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    put_u32(&mut out, hyper.n_tx, "n_tx")?;
    put_u32(&mut out, hyper.n_users, "n_users")?;
    put_u32(&mut out, hyper.embed_dim, "embed_dim")?;
    put_u32(&mut out, heads.len(), "head count")?;
    for (id, head) in heads {
        head.validate(hyper)?;
        put_short_string(&mut out, id)?;
        put_tensors(&mut out, &head.tensors())?;
    }
    Ok(out)
}

/// Decodes a heads file; `hyper` must match the extractor the heads belong to.
pub fn decode_heads(bytes: &[u8], hyper: &ModelHyper) -> Result<BTreeMap<String, OutputHead>> {
    let mut r = Reader::new(bytes);
    r.header(HEADS_MAGIC, CHECKPOINT_VERSION)?;
    for (what, expected) in [
        ("heads n_tx", hyper.n_tx),
        ("heads n_users", hyper.n_users),
        ("heads embed_dim", hyper.embed_dim),
    ] {
        let got = r.u32()? as usize;
        if got != expected {
            return Err(Error::DimensionMismatch {
                context: what,
                expected,
                got,
            });
        }
    }
    let count = r.u32()? as usize;
    let mut heads = BTreeMap::new();
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);
    for _ in 0..count {
        let id = r.short_string()?;
        let mut head = OutputHead::new(hyper, &mut rng);
        read_tensors_into(&mut r, head.tensors_mut())?;
        if heads.insert(id.clone(), head).is_some() {
            return Err(Error::Malformed(format!(
                "duplicate head for environment {id:?}"
            )));
        }
    }
    r.finish()?;
    Ok(heads)
}

pub fn save_extractor(ext: &FeatureExtractor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_extractor(ext)?)?;
    Ok(())
}

pub fn load_extractor(path: impl AsRef<Path>) -> Result<FeatureExtractor> {
    decode_extractor(&fs::read(path)?)
}

pub fn save_heads(
    hyper: &ModelHyper,
    heads: &BTreeMap<String, OutputHead>,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, encode_heads(hyper, heads)?)?;
    Ok(())
}

pub fn load_heads(
    path: impl AsRef<Path>,
    hyper: &ModelHyper,
) -> Result<BTreeMap<String, OutputHead>> {
    decode_heads(&fs::read(path)?, hyper)
}
