//! Checkpoint container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic    8 bytes  "LADAPTCK"
//! version  u32      1
//! count    u32      number of sections
//! section* tag [u8; 4], length u64, payload
//! ```
//!
//! Sections, in canonical order:
//!
//! * `CONF` model config: d_model, d_ff, n_layers, n_q_heads, n_kv_heads,
//!   head_dim, vocab_size as u64; rope_theta, norm_eps as f64; tie flag u8.
//! * `TOKF` tokenizer fingerprint, UTF-8.
//! * `PARM` value count u64, then f32 values in [`Params::tensors`] order.
//! * `OPTM` optimizer state (optional).
//! * `LORA` low-rank adapters (optional).

use std::path::Path;

use crate::error::{Error, Result};

use super::{Checkpoint, ModelConfig, Params};

pub const MAGIC: &[u8; 8] = b"LADAPTCK";
pub const VERSION: u32 = 1;

pub type Tag = [u8; 4];
pub const TAG_CONFIG: Tag = *b"CONF";
pub const TAG_FINGERPRINT: Tag = *b"TOKF";
pub const TAG_PARAMS: Tag = *b"PARM";
pub const TAG_OPTIMIZER: Tag = *b"OPTM";
pub const TAG_LORA: Tag = *b"LORA";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub sections: Vec<(Tag, Vec<u8>)>,
}

impl Container {
    pub fn push(&mut self, tag: Tag, payload: Vec<u8>) {
        self.sections.push((tag, payload));
    }

    pub fn get(&self, tag: Tag) -> Option<&[u8]> {
        self.sections
            .iter()
            .find(|(t, _)| *t == tag)
            .map(|(_, p)| p.as_slice())
    }

    pub fn require(&self, tag: Tag) -> Result<&[u8]> {
        self.get(tag).ok_or_else(|| {
            Error::format(
                "checkpoint",
                format!("missing section {}", String::from_utf8_lossy(&tag)),
            )
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let total: usize = self.sections.iter().map(|(_, p)| p.len() + 12).sum();
        let mut buf = Vec::with_capacity(16 + total);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for (tag, payload) in &self.sections {
            buf.extend_from_slice(tag);
            buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            buf.extend_from_slice(payload);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(8)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let tag: Tag = r.take(4)?.try_into().unwrap();
            let len = r.u64()?;
            let len = usize::try_from(len).map_err(|_| Error::format("checkpoint", "section too large"))?;
            sections.push((tag, r.take(len)?.to_vec()));
        }
        r.finish()?;
        Ok(Container { sections })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::from(e).in_file(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
        Container::from_bytes(&bytes).map_err(|e| e.in_file(path))
    }
}

/// Bounds-checked little-endian reader.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated data"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f32s_into(&mut self, out: &mut [f32]) -> Result<()> {
        let raw = self.take(out.len() * 4)?;
        for (o, c) in out.iter_mut().zip(raw.chunks_exact(4)) {
            *o = f32::from_le_bytes(c.try_into().unwrap());
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(())
    }
}

pub fn put_f32s(buf: &mut Vec<u8>, xs: &[f32]) {
    buf.reserve(xs.len() * 4);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_config(cfg: &ModelConfig) -> Vec<u8> {
    let mut buf = Vec::with_capacity(7 * 8 + 17);
    for v in [
        cfg.d_model,
        cfg.d_ff,
        cfg.n_layers,
        cfg.n_q_heads,
        cfg.n_kv_heads,
        cfg.head_dim,
        cfg.vocab_size,
    ] {
        buf.extend_from_slice(&(v as u64).to_le_bytes());
    }
    buf.extend_from_slice(&cfg.rope_theta.to_le_bytes());
    buf.extend_from_slice(&cfg.norm_eps.to_le_bytes());
    buf.push(cfg.tie_embeddings as u8);
    buf
}

pub fn decode_config(bytes: &[u8]) -> Result<ModelConfig> {
    let mut r = Reader::new(bytes);
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = usize::try_from(r.u64()?).map_err(|_| Error::format("checkpoint", "dimension overflow"))?;
    }
    let cfg = ModelConfig {
        d_model: dims[0],
        d_ff: dims[1],
        n_layers: dims[2],
        n_q_heads: dims[3],
        n_kv_heads: dims[4],
        head_dim: dims[5],
        vocab_size: dims[6],
        rope_theta: r.f64()?,
        norm_eps: r.f64()?,
        tie_embeddings: r.u8()? != 0,
    };
    r.finish()?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn encode_params(params: &Params<f32>) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + params.len() * 4);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (_, t) in params.tensors() {
        put_f32s(&mut buf, t);
    }
    buf
}

pub fn decode_params(cfg: &ModelConfig, bytes: &[u8]) -> Result<Params<f32>> {
    let mut params = Params::<f32>::zeros(cfg);
    let mut r = Reader::new(bytes);
    let count = r.u64()?;
    if count != params.len() as u64 {
        return Err(Error::format(
            "checkpoint",
            format!("parameter count {count} does not match config ({})", params.len()),
        ));
    }
    for (_, t) in params.tensors_mut() {
        r.f32s_into(t)?;
    }
    r.finish()?;
    Ok(params)
}

impl Checkpoint<f32> {
    /// Container holding the config, fingerprint and parameter sections.
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.push(TAG_CONFIG, encode_config(&self.config));
        c.push(TAG_FINGERPRINT, self.tokenizer_fingerprint.as_bytes().to_vec());
        c.push(TAG_PARAMS, encode_params(&self.params));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = decode_config(c.require(TAG_CONFIG)?)?;
        let tokenizer_fingerprint = String::from_utf8(c.require(TAG_FINGERPRINT)?.to_vec())
            .map_err(|_| Error::format("checkpoint", "fingerprint is not UTF-8"))?;
        let params = decode_params(&config, c.require(TAG_PARAMS)?)?;
        Ok(Checkpoint {
            config,
            params,
            tokenizer_fingerprint,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_and_truncation() {
        let ckpt = Checkpoint::<f32>::init(ModelConfig::desk(40), 5, "abc").unwrap();
        let bytes = ckpt.to_container().to_bytes();
        let back = Checkpoint::from_container(&Container::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, ckpt);
        for cut in [0, 7, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(Container::from_bytes(&bytes[..cut]).is_err());
        }
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(Container::from_bytes(&wrong).is_err());
    }
}
