// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! "MMLB"            magic
//! u32               format version (1)
//! u32 + bytes       config record (UTF-8 TOML)
//! u32               tensor count
//!   u32 + bytes     tensor name
//!   u32             rank, then rank × u32 dims
//!   u32             element count, then count × f32
//! u8                optimizer flag (0 = absent, 1 = present)
//!   u64             step
//!   5 × f32         lr, beta1, beta2, eps, weight_decay
//!   f32             grad clip (NaN = none)
//!   u32             slot count, then per slot: u32 count, count × f32 m, count × f32 v
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensorkit::{AdamWConfig, OptState, Tensor};

pub const MAGIC: &[u8; 4] = b"MMLB";
pub const VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(buf: &mut Vec<u8>, vs: &[f32]) {
    put_u32(buf, vs.len());
    for v in vs {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(model: &Model, opt: Option<&OptState>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let record = model.config().to_record();
    put_u32(&mut buf, record.len());
    buf.extend_from_slice(record.as_bytes());
    put_u32(&mut buf, model.params().len());
    for (name, t) in model.param_names().iter().zip(model.params()) {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank());
        for &d in t.shape() {
            put_u32(&mut buf, d);
        }
        put_f32s(&mut buf, t.data());
    }
    match opt {
        None => buf.push(0),
        Some(st) => {
            buf.push(1);
            buf.extend_from_slice(&st.step().to_le_bytes());
            let c = st.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay, c.grad_clip.unwrap_or(f32::NAN)] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            let (m, v) = st.moments();
            put_u32(&mut buf, m.len());
            for (m, v) in m.iter().zip(v) {
                put_u32(&mut buf, m.len());
                for x in m.iter().chain(v) {
                    buf.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    buf
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let remaining = self.0.get_ref().len() as u64 - self.0.position();
        if n as u64 > remaining {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes, {remaining} left"
            )));
        }
        let mut b = vec![0; n];
        self.0.read_exact(&mut b).map_err(|e| Error::Format(e.to_string()))?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .bytes(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.bytes(n)?).map_err(|_| Error::Format("invalid UTF-8".into()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Model, Option<OptState>)> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(4)? != MAGIC {
        return Err(Error::Format("bad magic, not a model checkpoint".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = ModelConfig::from_record(&r.string()?)
        .map_err(|e| Error::Format(format!("config record: {e}")))?;
    let expected = config.param_shapes();
    let count = r.u32()?;
    if count != expected.len() {
        return Err(Error::Format(format!(
            "{count} tensors stored, config needs {}",
            expected.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for (want_name, want_shape) in &expected {
        let name = r.string()?;
        if &name != want_name {
            return Err(Error::Format(format!("expected tensor {want_name}, found {name}")));
        }
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = r.u32()?;
        if &shape != want_shape || shape.iter().product::<usize>() != n {
            return Err(Error::Format(format!(
                "{name}: declared shape {shape:?} with {n} values, config needs {want_shape:?}"
            )));
        }
        let data = r.f32s(n)?;
        params.push(Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?);
    }
    let opt = match r.bytes(1)?[0] {
        0 => None,
        1 => {
            let step = r.u64()?;
            let mut f = [0f32; 6];
            for v in &mut f {
                *v = r.f32()?;
            }
            let cfg = AdamWConfig {
                lr: f[0],
                beta1: f[1],
                beta2: f[2],
                eps: f[3],
                weight_decay: f[4],
                grad_clip: (!f[5].is_nan()).then_some(f[5]),
            };
            let slots = r.u32()?;
            if slots != params.len() {
                return Err(Error::Format(format!(
                    "{slots} optimizer slots for {} tensors",
                    params.len()
                )));
            }
            let mut m = Vec::with_capacity(slots);
            let mut v = Vec::with_capacity(slots);
            for p in &params {
                let n = r.u32()?;
                if n != p.numel() {
                    return Err(Error::Format("optimizer slot size mismatch".into()));
                }
                m.push(r.f32s(n)?);
                v.push(r.f32s(n)?);
            }
            Some(OptState::from_parts(cfg, step, m, v)?)
        }
        other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
    };
    if (r.0.position() as usize) != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    let model = Model::from_parts(config, params).map_err(|e| Error::Format(e.to_string()))?;
    Ok((model, opt))
}

pub fn save_checkpoint(model: &Model, opt: Option<&OptState>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model, opt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Option<OptState>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
