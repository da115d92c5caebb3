//! Single-file binary container for named tensors plus a JSON metadata blob.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CBALCKPT"
//! version    u32
//! kind       u32 length + UTF-8
//! metadata   u32 length + UTF-8 (JSON)
//! count      u32
//! count × {  name: u16 length + UTF-8
//!            dtype: u8 (0 = f32, 1 = f64)
//!            ndim: u8, dims: ndim × u64
//!            nbytes: u64, raw element bytes }
//! trailer    4 bytes  "END!"
//! ```

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CBALCKPT";
pub const FORMAT_VERSION: u32 = 1;
const TRAILER: &[u8; 4] = b"END!";

#[derive(Clone, Debug, PartialEq)]
struct RawTensor {
    dtype: DType,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: String,
    tensors: BTreeMap<String, RawTensor>,
}

impl Checkpoint {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: "{}".into(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn put<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        self.tensors.insert(
            name.into(),
            RawTensor {
                dtype: T::DTYPE,
                shape: t.shape().to_vec(),
                bytes,
            },
        );
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let raw = self
            .tensors
            .get(name)
            .ok_or_else(|| NnError::Checkpoint(format!("missing tensor {name}")))?;
        if raw.dtype != T::DTYPE {
            return Err(NnError::Checkpoint(format!(
                "tensor {name} stored as {:?}, requested {:?}",
                raw.dtype,
                T::DTYPE
            )));
        }
        let data = raw.bytes.chunks_exact(T::DTYPE.size()).map(T::read_le).collect();
        Tensor::from_vec(&raw.shape, data)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Stores every parameter and buffer under `<prefix>.<name>`.
    pub fn put_store<T: Scalar>(&mut self, prefix: &str, ps: &ParamStore<T>) {
        for p in ps.iter() {
            self.put(format!("{prefix}.{}", p.name), &p.value);
        }
    }

    /// Overwrites every value in `ps` from `<prefix>.<name>` entries.
    pub fn load_store<T: Scalar>(&self, prefix: &str, ps: &mut ParamStore<T>) -> Result<()> {
        for p in ps.iter_mut() {
            let t: Tensor<T> = self.get(&format!("{prefix}.{}", p.name))?;
            if t.shape() != p.value.shape() {
                return Err(NnError::Shape(format!(
                    "checkpoint tensor {prefix}.{} has shape {:?}, model expects {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        write_str32(&mut out, &self.kind);
        write_str32(&mut out, &self.meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.dtype.tag());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(t.bytes.len() as u64).to_le_bytes());
            out.extend_from_slice(&t.bytes);
        }
        out.extend_from_slice(TRAILER);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(NnError::Checkpoint("bad magic header, not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(NnError::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let kind = r.str32()?;
        let meta = r.str32()?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = u16::from_le_bytes(r.take(2)?.try_into().expect("2")) as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| NnError::Checkpoint("tensor name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag)
                .ok_or_else(|| NnError::Checkpoint(format!("unknown dtype tag {tag} for {name}")))?;
            let ndim = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let nbytes = r.u64()? as usize;
            let expected = shape.iter().product::<usize>() * dtype.size();
            if nbytes != expected {
                return Err(NnError::Checkpoint(format!(
                    "tensor {name}: {nbytes} bytes for shape {shape:?}"
                )));
            }
            let data = r.take(nbytes)?.to_vec();
            tensors.insert(
                name,
                RawTensor {
                    dtype,
                    shape,
                    bytes: data,
                },
            );
        }
        if r.take(4)? != TRAILER {
            return Err(NnError::Checkpoint("missing end marker".into()));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("ckpt.partial");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

fn write_str32(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Checkpoint(format!(
                "truncated file: wanted {n} bytes at offset {}, only {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn str32(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| NnError::Checkpoint("string field is not UTF-8".into()))
    }
}
