//! Binary checkpoints: parameters, optimizer moments and the step counter.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "USAMCKPT"  u32 version  u32 len + config fingerprint
//! u32 len + config text  u64 step  u64 adam t
//! u32 tensor count, then per tensor (sorted by name):
//!     u32 len + name  u8 trainable  u32 rank  u32 extents..  f32 values..
//! u32 moment count, then per trainable tensor:
//!     u32 len + name  f32 m..  f32 v..
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Values are written as `f32`; training keeps them `f32`-representable so
//! the round trip is exact.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use usam_numerics::{ParamStore, Tensor};

use crate::config::Config;
use crate::error::{Result, UsamError};
use crate::optim::{AdamW, Moments};

const MAGIC: &[u8; 8] = b"USAMCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    /// The training configuration in its `key = value` form.
    pub config_text: String,
    pub step: u64,
    pub store: ParamStore,
    pub adam_t: u64,
    pub moments: BTreeMap<String, Moments>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_values(out: &mut Vec<u8>, t: &Tensor) {
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(config: &Config, step: u64, store: &ParamStore, opt: &AdamW) -> Self {
        Self {
            fingerprint: config.fingerprint(),
            config_text: config.to_text(),
            step,
            store: store.clone(),
            adam_t: opt.t,
            moments: opt.moments.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        put_u32(&mut out, VERSION);
        put_str(&mut out, &self.fingerprint);
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.adam_t.to_le_bytes());
        put_u32(&mut out, self.store.len() as u32);
        for (name, p) in self.store.iter() {
            put_str(&mut out, name);
            out.push(u8::from(p.trainable));
            put_u32(&mut out, p.value.rank() as u32);
            for &e in p.value.shape() {
                put_u32(&mut out, e as u32);
            }
            put_values(&mut out, &p.value);
        }
        put_u32(&mut out, self.moments.len() as u32);
        for (name, m) in &self.moments {
            put_str(&mut out, name);
            put_values(&mut out, &m.m);
            put_values(&mut out, &m.v);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(UsamError::format("not a checkpoint (bad magic)"));
        }
        if bytes.len() < MAGIC.len() + 32 {
            return Err(UsamError::format("truncated checkpoint"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(UsamError::format("checkpoint checksum mismatch (truncated or corrupted)"));
        }
        let mut r = Reader { bytes: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != VERSION {
            return Err(UsamError::format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let fingerprint = r.string()?;
        let config_text = r.string()?;
        let step = r.u64()?;
        let adam_t = r.u64()?;
        let mut store = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let trainable = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(UsamError::format(format!("bad trainable flag {b}"))),
            };
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| Ok(r.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let value = r.tensor(shape)?;
            store.insert(name, value, trainable)?;
        }
        let mut moments = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let shape = store
                .value(&name)
                .map_err(|_| UsamError::format(format!("moments for unknown tensor `{name}`")))?
                .shape()
                .to_vec();
            let m = r.tensor(shape.clone())?;
            let v = r.tensor(shape)?;
            moments.insert(name, Moments { m, v });
        }
        if r.pos != body.len() {
            return Err(UsamError::format("trailing bytes in checkpoint"));
        }
        Ok(Self {
            fingerprint,
            config_text,
            step,
            store,
            adam_t,
            moments,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    /// Loads a checkpoint, refusing one written under another configuration
    /// unless `force` is set.
    pub fn load(path: &Path, fingerprint: Option<&str>, force: bool) -> Result<Self> {
        let ckpt = Self::from_bytes(&std::fs::read(path)?)?;
        if let Some(expected) = fingerprint {
            if !force && ckpt.fingerprint != expected {
                return Err(UsamError::Fingerprint {
                    expected: expected.to_string(),
                    found: ckpt.fingerprint,
                });
            }
        }
        Ok(ckpt)
    }

    pub fn config(&self) -> Result<Config> {
        let config = Config::parse_str(&self.config_text)?;
        if config.fingerprint() != self.fingerprint {
            return Err(UsamError::format("stored configuration does not match its fingerprint"));
        }
        Ok(config)
    }

    /// Optimizer state restored on top of a freshly configured optimizer.
    pub fn restore_optimizer(&self, opt: &mut AdamW) {
        opt.t = self.adam_t;
        opt.moments = self.moments.clone();
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| UsamError::format("truncated checkpoint"))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| UsamError::format("name is not UTF-8"))
    }

    fn tensor(&mut self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        Tensor::new(shape, data).map_err(|e| UsamError::format(e.to_string()))
    }
}
