//! Binary checkpoint format.
//!
//! ```text
//! "BDIF" | version u32 | config: 10 × u64 | tensor count u32 |
//! per tensor: name len u32, name bytes, ndims u32, dims u32…, f32 LE data |
//! FNV-1a 64 of everything before the trailer, u64
//! ```
//! All integers are little-endian.

use std::fs;
use std::path::Path;

use super::params::{ModelConfig, Parameters, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BDIF";
pub const VERSION: u32 = 1;

fn config_fields(c: &ModelConfig) -> [u64; 10] {
    [
        c.d_model as u64,
        c.n_layers as u64,
        c.n_heads as u64,
        c.d_ff as u64,
        c.vocab_size as u64,
        c.max_text_len as u64,
        c.block_size as u64,
        c.visual_dim as u64,
        c.max_visual_len as u64,
        c.seed,
    ]
}

pub fn encode(params: &Parameters<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.n_params() * 4 + 1024);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for f in config_fields(&params.config) {
        out.extend_from_slice(&f.to_le_bytes());
    }
    out.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for t in &params.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.dims.len() as u32).to_le_bytes());
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = crate::fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Data("checkpoint truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Parameters<f32>> {
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if crate::fnv1a64(body) != stored {
        return Err(Error::Data("checkpoint checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let mut f = [0u64; 10];
    for v in &mut f {
        *v = r.u64()?;
    }
    let config = ModelConfig {
        d_model: f[0] as usize,
        n_layers: f[1] as usize,
        n_heads: f[2] as usize,
        d_ff: f[3] as usize,
        vocab_size: f[4] as usize,
        max_text_len: f[5] as usize,
        block_size: f[6] as usize,
        visual_dim: f[7] as usize,
        max_visual_len: f[8] as usize,
        seed: f[9],
    };
    config.validate().map_err(|e| Error::Data(format!("checkpoint config invalid: {e}")))?;
    let layout = config.layout();
    let count = r.u32()? as usize;
    if count != layout.len() {
        return Err(Error::Data(format!(
            "checkpoint has {count} tensors, config implies {}",
            layout.len()
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, dims) in layout {
        let len = r.u32()? as usize;
        let got = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Data("tensor name is not UTF-8".into()))?;
        if got != name {
            return Err(Error::Data(format!("expected tensor {name}, found {got}")));
        }
        let nd = r.u32()? as usize;
        let mut got_dims = Vec::with_capacity(nd);
        for _ in 0..nd {
            got_dims.push(r.u32()? as usize);
        }
        if got_dims != dims {
            return Err(Error::Data(format!("tensor {name} has dims {got_dims:?}, expected {dims:?}")));
        }
        let n: usize = dims.iter().product();
        let data: Vec<f32> = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("tensor {name} contains non-finite values")));
        }
        tensors.push(Tensor { name, dims, data });
    }
    if r.pos != body.len() {
        return Err(Error::Data("trailing bytes in checkpoint".into()));
    }
    Ok(Parameters { config, tensors })
}

pub fn save(params: &Parameters<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Parameters<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_parameters;

    fn tiny() -> Parameters<f32> {
        let cfg = ModelConfig { d_model: 8, n_heads: 2, d_ff: 16, n_layers: 1, max_text_len: 16, block_size: 4, ..Default::default() };
        init_parameters(&cfg).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let p = tiny();
        let bytes = encode(&p);
        assert_eq!(&bytes[..4], b"BDIF");
        assert_eq!(decode(&bytes).unwrap(), p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bdif");
        save(&p, &path).unwrap();
        assert_eq!(load(&path).unwrap(), p);
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&tiny());
        let n = bytes.len();
        bytes[n / 2] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Data(_))));
        assert!(matches!(decode(b"nope"), Err(Error::Data(_))));
        assert!(matches!(load(Path::new("/nonexistent/x")), Err(Error::Io { .. })));
    }
}
