//! CPGW weight checkpoints: named f32 tensors plus a key/value metadata block.
//!
//! Layout (little-endian): magic `CPGW`, u32 version, u32 tensor count, then
//! per tensor a u16 name length, UTF-8 name, u8 rank, u32 extents and f32
//! data; finally a u32 entry count and per entry a u16 key length, key, u32
//! value length and value.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::numerics::{AdamW, ParamStore, Rng, RngState, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CPGW";
pub const VERSION: u32 = 1;

const OPT_M: &str = "opt.m/";
const OPT_V: &str = "opt.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    /// Parameters of `store`, plus optimizer moments and step when given.
    pub fn from_store(store: &ParamStore<f32>, opt: Option<&AdamW<f32>>) -> Self {
        let mut ck = Checkpoint::default();
        for (name, t) in store.iter() {
            ck.tensors.push(NamedTensor { name: name.to_string(), dims: t.dims().to_vec(), data: t.data().to_vec() });
        }
        if let Some(opt) = opt {
            for id in store.ids() {
                let (m, v) = (&opt.m[id.index()], &opt.v[id.index()]);
                if !m.is_empty() {
                    let dims = vec![m.len()];
                    let name = store.name(id);
                    ck.tensors.push(NamedTensor { name: format!("{OPT_M}{name}"), dims: dims.clone(), data: m.clone() });
                    ck.tensors.push(NamedTensor { name: format!("{OPT_V}{name}"), dims, data: v.clone() });
                }
            }
            ck.meta.insert("step".into(), opt.step.to_string());
        }
        ck
    }

    /// Copies every parameter of `store` from the checkpoint by name.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        let by_name: BTreeMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for id in store.ids().collect::<Vec<_>>() {
            let name = store.name(id).to_string();
            let t = by_name.get(name.as_str()).ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
            if t.dims != store.get(id).dims() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("`{name}` stored as {:?}, model expects {:?}", t.dims, store.get(id).dims()),
                ));
            }
            *store.get_mut(id) = Tensor::new(t.dims.clone(), t.data.clone())?;
        }
        Ok(())
    }

    /// Restores optimizer moments and the step counter saved by [`Checkpoint::from_store`].
    pub fn restore_optimizer(&self, store: &ParamStore<f32>, opt: &mut AdamW<f32>) -> Result<()> {
        let by_name: BTreeMap<&str, &NamedTensor> = self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for id in store.ids() {
            let name = store.name(id);
            if let (Some(m), Some(v)) = (by_name.get(format!("{OPT_M}{name}").as_str()), by_name.get(format!("{OPT_V}{name}").as_str())) {
                opt.m[id.index()] = m.data.clone();
                opt.v[id.index()] = v.data.clone();
            }
        }
        opt.step = self.meta_parse("step")?.unwrap_or(0);
        Ok(())
    }

    pub fn set_rng(&mut self, rng: &Rng) {
        let s = rng.state();
        let seed: String = s.seed.iter().map(|b| format!("{b:02x}")).collect();
        self.meta.insert("rng.seed".into(), seed);
        self.meta.insert("rng.stream".into(), s.stream.to_string());
        self.meta.insert("rng.word_pos".into(), s.word_pos.to_string());
    }

    pub fn rng(&self) -> Result<Option<Rng>> {
        let Some(hex) = self.meta.get("rng.seed") else { return Ok(None) };
        if hex.len() != 64 {
            return Err(Error::Format(format!("rng.seed must be 64 hex digits, got {}", hex.len())));
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|e| Error::Format(format!("rng.seed: {e}")))?;
        }
        let stream = self.meta_parse("rng.stream")?.unwrap_or(0);
        let word_pos = self.meta_parse("rng.word_pos")?.unwrap_or(0);
        Ok(Some(Rng::from_state(RngState { seed, stream, word_pos })))
    }

    pub fn meta_parse<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.meta
            .get(key)
            .map(|v| v.parse().map_err(|e| Error::Format(format!("metadata `{key}` = `{v}`: {e}"))))
            .transpose()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&len_u32(self.tensors.len(), "tensor count")?.to_le_bytes())?;
        for t in &self.tensors {
            write_str16(&mut w, &t.name)?;
            let rank = u8::try_from(t.dims.len()).map_err(|_| Error::Format(format!("`{}` rank too large", t.name)))?;
            w.write_all(&[rank])?;
            for &d in &t.dims {
                w.write_all(&len_u32(d, "extent")?.to_le_bytes())?;
            }
            if t.dims.iter().product::<usize>() != t.data.len() {
                return Err(Error::shape("checkpoint", format!("`{}` extents {:?} vs {} values", t.name, t.dims, t.data.len())));
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.write_all(&len_u32(self.meta.len(), "metadata count")?.to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str16(&mut w, k)?;
            w.write_all(&len_u32(v.len(), "metadata value")?.to_le_bytes())?;
            w.write_all(v.as_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("not a checkpoint: magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Version { what: "checkpoint", found: version, expected: VERSION });
        }
        let count = read_u32(&mut r)? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let len = read_u16(&mut r)? as usize;
            let name = read_str(&mut r, len)?;
            let mut rank = [0u8; 1];
            r.read_exact(&mut rank)?;
            let dims = (0..rank[0]).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = dims.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes)?;
            let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(NamedTensor { name, dims, data });
        }
        let entries = read_u32(&mut r)?;
        let mut meta = BTreeMap::new();
        for _ in 0..entries {
            let klen = read_u16(&mut r)? as usize;
            let k = read_str(&mut r, klen)?;
            let vlen = read_u32(&mut r)? as usize;
            let v = read_str(&mut r, vlen)?;
            meta.insert(k, v);
        }
        Ok(Checkpoint { tensors, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::Missing(format!("checkpoint {}: {e}", path.display())))?;
        Self::read_from(BufReader::new(f))
    }
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")))
}

fn write_str16<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let n = u16::try_from(s.len()).map_err(|_| Error::Format(format!("name too long: {} bytes", s.len())))?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u16<R: Read>(r: &mut R) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str<R: Read>(r: &mut R, n: usize) -> Result<String> {
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| Error::Format(format!("invalid UTF-8 in checkpoint: {e}")))
}
