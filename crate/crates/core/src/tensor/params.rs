//! Named parameter storage and the binary checkpoint container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic   b"COTNPARM"
//! version u32 (= 1)
//! count   u64
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, data f64 × prod(dims) }
//! ```
//!
//! The companion manifest lists one tensor per line as `name<TAB>shape<TAB>offset`,
//! where `offset` is the byte position of the tensor's data.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use super::array::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"COTNPARM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// True when both stores hold the same names, shapes and bit-identical values.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    /// Copies values from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::State("parameter layouts differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(Error::shape("copy_from", format!("{:?} vs {:?}", dst.shape(), src.shape())));
            }
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.encode().0
    }

    fn encode(&self) -> (Vec<u8>, String) {
        let mut buf = Vec::new();
        let mut manifest = String::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in self.names.iter().zip(&self.tensors) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            manifest.push_str(&format!("{name}\t{}\t{}\n", shape.join("x"), buf.len()));
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        (buf, manifest)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a parameter container (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported container version {version}")));
        }
        let count = r.u64()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|e| Error::Format(format!("tensor name is not utf-8: {e}")))?
                .to_owned();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.add(name, Tensor::new(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok(store)
    }

    /// Writes the container to `path` and the manifest to `<path>.manifest`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (buf, manifest) = self.encode();
        fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        let mpath = manifest_path(path);
        let mut f = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
        f.write_all(manifest.as_bytes()).map_err(|e| Error::io(&mpath, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    s.into()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of container".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}
