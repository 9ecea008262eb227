// SPDX-License-Identifier: MIT OR Apache-2.0

//! Bundle cache layout (all integers little-endian):
//!
//! ```text
//! "MMAB"            magic
//! u32               format version (1)
//! u64               source model config digest
//! u32               tap count, then tap count × u32 layer
//! u8 + u64          tap position (0 = last token, 1 = index; index value)
//! u32               bundle count
//! u32               vector width
//! bundle count × tap count × width × f32
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::nanoformer::{ActivationBundle, LayerTapSpec, TokenPosition};

pub const MAGIC: &[u8; 4] = b"MMAB";
pub const VERSION: u32 = 1;

/// Serializes bundles that share one source model and tap spec.
pub fn encode_bundles(bundles: &[ActivationBundle]) -> Result<Vec<u8>> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::Contract("no bundles to encode".into()))?;
    let width = first.width().unwrap_or(0);
    for b in bundles {
        if b.tap_spec != first.tap_spec || b.source_config_digest != first.source_config_digest {
            return Err(Error::Contract("bundles come from different models or taps".into()));
        }
        b.validate(width)?;
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&first.source_config_digest.to_le_bytes());
    buf.extend_from_slice(&(first.tap_spec.len() as u32).to_le_bytes());
    for &l in &first.tap_spec.layers {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    let (kind, index) = match first.tap_spec.position {
        TokenPosition::Last => (0u8, 0u64),
        TokenPosition::Index(i) => (1, i as u64),
    };
    buf.push(kind);
    buf.extend_from_slice(&index.to_le_bytes());
    buf.extend_from_slice(&(bundles.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    for v in bundles.iter().flat_map(|b| b.vectors.iter().flatten()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Format("bundle cache is truncated".into()));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_bundles(bytes: &[u8]) -> Result<Vec<ActivationBundle>> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a bundle cache (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported bundle cache version {version}")));
    }
    let digest = r.u64()?;
    let n_taps = r.u32()?;
    let layers = (0..n_taps).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let position = match r.take(1)?[0] {
        0 => {
            r.u64()?;
            TokenPosition::Last
        }
        1 => TokenPosition::Index(r.u64()? as usize),
        k => return Err(Error::Format(format!("unknown tap position kind {k}"))),
    };
    let tap_spec = LayerTapSpec { layers, position };
    let count = r.u32()?;
    let width = r.u32()?;
    let need = count
        .checked_mul(n_taps)
        .and_then(|x| x.checked_mul(width))
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| Error::Format("bundle cache sizes overflow".into()))?;
    let floats = r.take(need)?;
    if r.at != bytes.len() {
        return Err(Error::Format("trailing bytes after bundle cache".into()));
    }
    let mut values = floats
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let bundles = (0..count)
        .map(|_| ActivationBundle {
            vectors: (0..n_taps)
                .map(|_| values.by_ref().take(width).collect())
                .collect(),
            source_config_digest: digest,
            tap_spec: tap_spec.clone(),
        })
        .collect::<Vec<_>>();
    for b in &bundles {
        b.validate(width)?;
    }
    Ok(bundles)
}

pub fn save_bundles(path: &Path, bundles: &[ActivationBundle]) -> Result<()> {
    std::fs::write(path, encode_bundles(bundles)?).map_err(|e| Error::io(path, e))
}

pub fn load_bundles(path: &Path) -> Result<Vec<ActivationBundle>> {
    decode_bundles(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
