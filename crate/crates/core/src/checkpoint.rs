//! `LAVA1` checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    5 bytes  "LAVA1"
//! version  u32
//! arch     str                       (str = u32 byte length + UTF-8)
//! meta     u32 count, then (key str, value str) pairs in key order
//! tensors  u32 count, then per tensor:
//!            name str, kind u8 (0 weight, 1 buffer), trainable u8,
//!            rank u8, rank x u64 dims, f32 values
//! ```
//!
//! Trailing bytes are an error.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::autoencoder::{decoder_spec, encoder_spec};
use crate::error::{Error, Result};
use crate::heads::{HeadSpec, Level};
use crate::kernel::{ParamKind, ParamStore, Tensor};

pub const MAGIC: &[u8; 5] = b"LAVA1";
pub const VERSION: u32 = 1;
pub const ARCH_AUTOENCODER: &str = "lava-autoencoder";
pub const ARCH_HEAD: &str = "lava-head";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn new(arch: &str, params: ParamStore<f32>) -> Self {
        Self {
            arch: arch.to_owned(),
            meta: BTreeMap::new(),
            params,
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::checkpoint(format!("meta.{key}"), "missing"))
    }

    pub fn meta_parsed<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::checkpoint(format!("meta.{key}"), format!("cannot parse `{raw}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.params.iter().map(|(_, p)| p.value.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.arch);
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, p) in self.params.iter() {
            put_str(&mut out, name);
            out.push(match p.kind {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            });
            out.push(u8::from(p.is_trainable()));
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(5, "magic")?;
        if magic != MAGIC {
            return Err(if magic.starts_with(b"LAVA") {
                Error::CheckpointVersion(format!(
                    "container `{}` is not supported, expected LAVA1",
                    String::from_utf8_lossy(magic)
                ))
            } else {
                Error::checkpoint("magic", "not a LAVA checkpoint")
            });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::CheckpointVersion(format!("format version {version}, expected {VERSION}")));
        }
        let arch = r.string("arch")?;
        let n_meta = r.u32("meta.count")?;
        let mut meta = BTreeMap::new();
        for _ in 0..n_meta {
            let k = r.string("meta.key")?;
            let v = r.string(&format!("meta.{k}"))?;
            meta.insert(k, v);
        }
        let n_tensors = r.u32("tensors.count")?;
        let mut params = ParamStore::new();
        for _ in 0..n_tensors {
            let name = r.string("tensor.name")?;
            let field = |s: &str| format!("tensor `{name}`.{s}");
            let kind = match r.u8(&field("kind"))? {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                k => return Err(Error::checkpoint(field("kind"), format!("unknown kind {k}"))),
            };
            let trainable = match r.u8(&field("trainable"))? {
                0 => false,
                1 => true,
                t => return Err(Error::checkpoint(field("trainable"), format!("flag {t}"))),
            };
            let rank = r.u8(&field("rank"))? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u64(&field("dims"))?;
                shape.push(usize::try_from(d).map_err(|_| Error::checkpoint(field("dims"), "dimension overflow"))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&c| c <= bytes.len() / 4)
                .ok_or_else(|| Error::checkpoint(field("values"), "truncated"))?;
            let raw = r.take(count * 4, &field("values"))?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            if params.contains(&name) {
                return Err(Error::checkpoint(field("name"), "duplicate tensor"));
            }
            params.insert(name, Tensor::from_vec(&shape, data)?, kind, trainable);
        }
        if r.pos != bytes.len() {
            return Err(Error::checkpoint("<end>", format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Self { arch, meta, params };
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Checks that every tensor the architecture needs is present.
    pub fn validate(&self) -> Result<()> {
        match self.arch.as_str() {
            ARCH_AUTOENCODER => {
                encoder_spec().validate_store(&self.params)?;
                if self.meta.get("parts").map(String::as_str) != Some("encoder") {
                    decoder_spec().validate_store(&self.params)?;
                }
                Ok(())
            }
            ARCH_HEAD => self.head_spec()?.validate_store(&self.params),
            other => Err(Error::checkpoint("arch", format!("unknown architecture `{other}`"))),
        }
    }

    pub fn head_spec(&self) -> Result<HeadSpec> {
        let level: Level = self.meta_parsed("level")?;
        let attention: bool = self.meta_parsed("attention")?;
        let vocab = self.meta("vocabulary")?;
        if vocab != level.vocab().join(",") {
            return Err(Error::checkpoint("meta.vocabulary", format!("`{vocab}` does not match level {}", level.as_str())));
        }
        Ok(HeadSpec::new(level, attention))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::checkpoint(field, format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self, field: &str) -> Result<String> {
        let n = self.u32(field)? as usize;
        let b = self.take(n, field)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::checkpoint(field, "invalid UTF-8"))
    }
}
