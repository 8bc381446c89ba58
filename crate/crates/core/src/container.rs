//! Binary named-tensor container used for checkpoints and feature files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SGCE" | u32 version | u64 tensor count
//! per tensor: u32 name length | name (UTF-8) | u8 dtype | u8 ndim | ndim × u64 dims | payload
//! u64 step | RNG state blob (rest of file)
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Element, Tensor};

pub const MAGIC: &[u8; 4] = b"SGCE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U64(_) => DType::U64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<NamedTensor>,
    pub step: u64,
    pub rng_state: Vec<u8>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedContainer(format!("truncated while reading {what}")))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn to_usize(v: u64, what: &str) -> Result<usize> {
    usize::try_from(v).map_err(|_| Error::MalformedContainer(format!("{what} {v} too large")))
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "tensor '{name}' of shape {shape:?} holds {} values",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::MalformedContainer(format!("duplicate tensor '{name}'")));
        }
        self.tensors.push(NamedTensor { name, shape, data });
        Ok(())
    }

    pub fn push_tensor<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let data = match T::DTYPE {
            DType::F32 => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            _ => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        self.push(name, t.shape().to_vec(), data)
    }

    pub fn push_u64(&mut self, name: impl Into<String>, values: Vec<u64>) -> Result<()> {
        let shape = vec![values.len()];
        self.push(name, shape, TensorData::U64(values))
    }

    pub fn push_f64(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let shape = vec![values.len()];
        self.push(name, shape, TensorData::F64(values))
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    fn require(&self, name: &str) -> Result<&NamedTensor> {
        self.get(name)
            .ok_or_else(|| Error::MalformedContainer(format!("missing tensor '{name}'")))
    }

    /// A float tensor converted to `T`; exact when the stored dtype matches.
    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let t = self.require(name)?;
        let data: Vec<T> = match &t.data {
            TensorData::F32(v) => v.iter().map(|&x| T::from_f64(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::from_f64(x)).collect(),
            TensorData::U64(_) => {
                return Err(Error::MalformedContainer(format!("tensor '{name}' is not floating point")))
            }
        };
        Tensor::new(t.shape.clone(), data)
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match &self.require(name)?.data {
            TensorData::U64(v) => Ok(v),
            _ => Err(Error::MalformedContainer(format!("tensor '{name}' is not u64"))),
        }
    }

    pub fn u64_scalar(&self, name: &str) -> Result<u64> {
        match self.u64s(name)? {
            [v] => Ok(*v),
            other => Err(Error::MalformedContainer(format!(
                "tensor '{name}' has {} values, expected 1",
                other.len()
            ))),
        }
    }

    pub fn f64_scalar(&self, name: &str) -> Result<f64> {
        match self.tensor::<f64>(name)?.data() {
            [v] => Ok(*v),
            other => Err(Error::MalformedContainer(format!(
                "tensor '{name}' has {} values, expected 1",
                other.len()
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.dtype() as u8);
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&self.rng_state);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::MalformedContainer("bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::MalformedContainer(format!("unsupported version {version}")));
        }
        let count = r.u64("tensor count")?;
        let mut c = Container::new();
        for _ in 0..count {
            let len = r.u32("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::MalformedContainer("tensor name is not UTF-8".into()))?
                .to_string();
            let code = r.u8("dtype")?;
            let dtype = DType::from_code(code)
                .ok_or_else(|| Error::MalformedContainer(format!("unknown dtype code {code}")))?;
            let ndim = r.u8("ndim")? as usize;
            let shape = (0..ndim)
                .map(|_| to_usize(r.u64("dim")?, "dimension"))
                .collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::MalformedContainer(format!("tensor '{name}' is too large")))?;
            let nbytes = numel
                .checked_mul(dtype.size())
                .ok_or_else(|| Error::MalformedContainer(format!("tensor '{name}' is too large")))?;
            let payload = r.take(nbytes, "payload")?;
            let data = match dtype {
                DType::F32 => TensorData::F32(
                    payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
                ),
                DType::F64 => TensorData::F64(
                    payload.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
                ),
                DType::U64 => TensorData::U64(
                    payload.chunks_exact(8).map(|b| u64::from_le_bytes(b.try_into().unwrap())).collect(),
                ),
            };
            c.push(name, shape, data)?;
        }
        c.step = r.u64("step")?;
        c.rng_state = bytes[r.pos..].to_vec();
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_bytes(&bytes)
    }
}
