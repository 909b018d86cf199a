//! CSIF: little-endian channel dataset file.
//!
//! ```text
//! magic   "CSIF"            4 bytes
//! version u32 = 1
//! n_tx    u32
//! n       u32
//! los     u8
//! env_id  u16 length + UTF-8 bytes
//! payload n * n_tx * (re: f32, im: f32)
//! ```

use std::fs;
use std::path::Path;

use num_complex::Complex32;

use super::{EnvironmentDataset, EnvironmentSpec};
use crate::codec::Reader;
use crate::error::{Error, Result};

pub const CSIF_MAGIC: [u8; 4] = *b"CSIF";
pub const CSIF_VERSION: u32 = 1;

pub fn encode(dataset: &EnvironmentDataset) -> Result<Vec<u8>> {
    let id = dataset.spec.env_id.as_bytes();
    let id_len =
        u16::try_from(id.len()).map_err(|_| Error::invalid("env_id longer than 65535 bytes"))?;
    let n = u32::try_from(dataset.len()).map_err(|_| Error::invalid("too many channels"))?;
    let n_tx = u32::try_from(dataset.n_tx).map_err(|_| Error::invalid("too many antennas"))?;

    let mut out = Vec::with_capacity(19 + id.len() + dataset.len() * dataset.n_tx * 8);
    out.extend_from_slice(&CSIF_MAGIC);
    out.extend_from_slice(&CSIF_VERSION.to_le_bytes());
    out.extend_from_slice(&n_tx.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.push(dataset.spec.los as u8);
    out.extend_from_slice(&id_len.to_le_bytes());
    out.extend_from_slice(id);
    for h in &dataset.channels {
        if h.len() != dataset.n_tx {
            return Err(Error::DimensionMismatch {
                context: "stored channel",
                expected: dataset.n_tx,
                got: h.len(),
            });
        }
        for z in h {
            out.extend_from_slice(&z.re.to_le_bytes());
            out.extend_from_slice(&z.im.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<EnvironmentDataset> {
    let mut r = Reader::new(bytes);
    r.header(CSIF_MAGIC, CSIF_VERSION)?;
    let n_tx = r.u32()? as usize;
    let n = r.u32()? as usize;
    let los = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(Error::Malformed(format!("los flag {other}"))),
    };
    let env_id = r.short_string()?;

    let payload = n
        .checked_mul(n_tx)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Malformed("payload size overflows".into()))?;
    if r.remaining() < payload {
        return Err(Error::Truncated {
            offset: r.pos(),
            needed: payload,
            len: bytes.len(),
        });
    }
    let mut channels = Vec::with_capacity(n);
    for _ in 0..n {
        let mut h = Vec::with_capacity(n_tx);
        for _ in 0..n_tx {
            let re = r.f32()?;
            let im = r.f32()?;
            h.push(Complex32::new(re, im));
        }
        channels.push(h);
    }
    r.finish()?;
    Ok(EnvironmentDataset {
        spec: EnvironmentSpec {
            env_id,
            los,
            ..EnvironmentSpec::default()
        },
        n_tx,
        channels,
    })
}

pub fn write_dataset(dataset: &EnvironmentDataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(dataset)?)?;
    Ok(())
}

/// Reads a CSIF file. Only `env_id` and `los` of the returned spec come from
/// the file; use [`EnvironmentDataset::with_spec`] to reattach the rest.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<EnvironmentDataset> {
    decode(&fs::read(path)?)
}
