//! Model container format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RNM1"  magic, 4 bytes
//! arch    u8: 0 float CNN, 1 float AST, 2 int8 CNN
//! count   u32, number of tensors
//! per tensor:
//!   name_len u16, then UTF-8 name
//!   ndim     u8, then ndim u32 dims
//!   dtype    u8: 0 f64, 1 i8, 2 i32
//!   data     numel elements, packed LE
//!   i8 only: scale f64, zero_point i32
//! ```
//!
//! Readers reject anything malformed: wrong magic, unknown arch or dtype,
//! short reads, and trailing bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"RNM1";
/// Bytes in a file with no tensors: magic, arch, count.
pub const HEADER_LEN: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchId {
    CnnF64,
    AstF64,
    CnnInt8,
}

impl ArchId {
    pub fn code(self) -> u8 {
        match self {
            ArchId::CnnF64 => 0,
            ArchId::AstF64 => 1,
            ArchId::CnnInt8 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ArchId::CnnF64),
            1 => Ok(ArchId::AstF64),
            2 => Ok(ArchId::CnnInt8),
            other => Err(Error::InvalidModel(format!("unknown architecture code {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    I8 { data: Vec<i8>, scale: f64, zero_point: i32 },
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::I8 { data, .. } => data.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype_code(&self) -> u8 {
        match self {
            TensorData::F64(_) => 0,
            TensorData::I8 { .. } => 1,
            TensorData::I32(_) => 2,
        }
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match self {
            TensorData::F64(v) => Ok(v),
            _ => Err(Error::InvalidModel("expected a float tensor".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl NamedTensor {
    pub fn f64(name: &str, dims: &[usize], data: Vec<f64>) -> Self {
        NamedTensor { name: name.to_string(), dims: dims.to_vec(), data: TensorData::F64(data) }
    }

    pub fn scalar(name: &str, value: f64) -> Self {
        NamedTensor::f64(name, &[1], vec![value])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub arch: ArchId,
    pub tensors: Vec<NamedTensor>,
}

impl ModelFile {
    pub fn new(arch: ArchId) -> Self {
        ModelFile { arch, tensors: Vec::new() }
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::InvalidModel(format!("missing tensor \"{name}\"")))
    }

    pub fn byte_len(&self) -> usize {
        let mut n = HEADER_LEN;
        for t in &self.tensors {
            n += 2 + t.name.len() + 1 + 4 * t.dims.len() + 1;
            n += match &t.data {
                TensorData::F64(v) => 8 * v.len(),
                TensorData::I8 { data, .. } => data.len() + 8 + 4,
                TensorData::I32(v) => 4 * v.len(),
            };
        }
        n
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(self.byte_len());
        out.extend_from_slice(MODEL_MAGIC);
        out.push(self.arch.code());
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::invalid("too many tensors"))?;
        out.extend_from_slice(&count.to_le_bytes());
        for t in &self.tensors {
            let name_len = u16::try_from(t.name.len())
                .map_err(|_| Error::invalid(format!("tensor name \"{}\" too long", t.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            let ndim = u8::try_from(t.dims.len())
                .map_err(|_| Error::invalid("too many dimensions"))?;
            out.push(ndim);
            let mut numel = 1usize;
            for &dim in &t.dims {
                let d = u32::try_from(dim).map_err(|_| Error::invalid("dimension too large"))?;
                out.extend_from_slice(&d.to_le_bytes());
                numel = numel
                    .checked_mul(dim)
                    .ok_or_else(|| Error::invalid("tensor size overflows"))?;
            }
            if numel != t.data.len() {
                return Err(Error::invalid(format!(
                    "tensor \"{}\" declares {} elements but holds {}",
                    t.name,
                    numel,
                    t.data.len()
                )));
            }
            out.push(t.data.dtype_code());
            match &t.data {
                TensorData::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::I8 { data, scale, zero_point } => {
                    out.extend(data.iter().map(|&x| x as u8));
                    out.extend_from_slice(&scale.to_le_bytes());
                    out.extend_from_slice(&zero_point.to_le_bytes());
                }
                TensorData::I32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MODEL_MAGIC {
            return Err(Error::InvalidModel("bad magic, not a model file".into()));
        }
        let arch = ArchId::from_code(r.u8()?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::InvalidModel("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            let mut numel = 1usize;
            for _ in 0..ndim {
                let d = r.u32()? as usize;
                numel = numel
                    .checked_mul(d)
                    .ok_or_else(|| Error::InvalidModel("tensor size overflows".into()))?;
                dims.push(d);
            }
            let dtype = r.u8()?;
            let data = match dtype {
                0 => {
                    let raw = r.take(8 * numel)?;
                    TensorData::F64(
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                1 => {
                    let raw = r.take(numel)?;
                    let data = raw.iter().map(|&b| b as i8).collect();
                    let scale = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                    let zero_point = i32::from_le_bytes(r.take(4)?.try_into().unwrap());
                    TensorData::I8 { data, scale, zero_point }
                }
                2 => {
                    let raw = r.take(4 * numel)?;
                    TensorData::I32(
                        raw.chunks_exact(4)
                            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                            .collect(),
                    )
                }
                other => {
                    return Err(Error::InvalidModel(format!("unknown dtype code {other}")))
                }
            };
            tensors.push(NamedTensor { name, dims, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::InvalidModel(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(ModelFile { arch, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelFile::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::InvalidModel("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
