//! Reader and writer for the safetensors container: an 8-byte little-endian
//! header length, a JSON header mapping names to
//! `{dtype, shape, data_offsets}`, then raw little-endian tensor bytes.

use std::collections::BTreeMap;
use std::path::Path;

use half::{bf16, f16};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F16,
    BF16,
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F16 | Dtype::BF16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            "F32" => Ok(Dtype::F32),
            "F64" => Ok(Dtype::F64),
            other => Err(Error::UnknownDtype(other.to_owned())),
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f64> {
        match self {
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f64())
                .collect(),
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }
    }

    fn encode(self, values: &[f64], out: &mut Vec<u8>) {
        for &v in values {
            match self {
                Dtype::F16 => out.extend_from_slice(&f16::from_f64(v).to_le_bytes()),
                Dtype::BF16 => out.extend_from_slice(&bf16::from_f64(v).to_le_bytes()),
                Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
}

/// One named tensor with values promoted to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorEntry {
    pub fn new(dtype: Dtype, shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        Ok(Self { dtype, shape, values })
    }

    pub fn from_matrix(dtype: Dtype, m: &Matrix<f64>) -> Self {
        Self {
            dtype,
            shape: vec![m.rows(), m.cols()],
            values: m.as_slice().to_vec(),
        }
    }
}

/// Named tensors, kept sorted by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: BTreeMap<String, TensorEntry>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: TensorEntry) -> Option<TensorEntry> {
        self.entries.insert(name.into(), entry)
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// The named entry as a matrix; it must be 2-D.
    pub fn matrix(&self, name: &str) -> Result<Matrix<f64>> {
        let e = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_owned()))?;
        match e.shape[..] {
            [r, c] => Matrix::from_vec(r, c, e.values.clone()),
            _ => Err(Error::TensorDims {
                name: name.to_owned(),
                reason: format!("expected a 2-D tensor, got shape {:?}", e.shape),
            }),
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::TruncatedArchive);
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let header_end = 8u64.checked_add(n).ok_or(Error::TruncatedArchive)?;
        if header_end > bytes.len() as u64 {
            return Err(Error::TruncatedArchive);
        }
        let header_end = header_end as usize;
        let header: Value = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| Error::MalformedHeader(e.to_string()))?;
        let map = header
            .as_object()
            .ok_or_else(|| Error::MalformedHeader("header is not a JSON object".into()))?;
        let data = &bytes[header_end..];

        let mut entries = BTreeMap::new();
        for (name, info) in map {
            if name == "__metadata__" {
                continue;
            }
            let bad = |what: &str| Error::MalformedHeader(format!("tensor `{name}`: {what}"));
            let dtype = info
                .get("dtype")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("missing dtype"))?;
            let dtype = Dtype::parse(dtype)?;
            let shape: Vec<usize> = info
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing shape"))?
                .iter()
                .map(|d| d.as_u64().map(|d| d as usize).ok_or_else(|| bad("shape entries must be integers")))
                .collect::<Result<_>>()?;
            let offsets = info
                .get("data_offsets")
                .and_then(Value::as_array)
                .ok_or_else(|| bad("missing data_offsets"))?;
            let (start, end) = match offsets[..] {
                [ref a, ref b] => (
                    a.as_u64().ok_or_else(|| bad("offsets must be integers"))? as usize,
                    b.as_u64().ok_or_else(|| bad("offsets must be integers"))? as usize,
                ),
                _ => return Err(bad("data_offsets must have two entries")),
            };
            if start > end {
                return Err(bad("data_offsets are decreasing"));
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad("shape overflows"))?;
            if end - start != numel * dtype.size() {
                return Err(bad(&format!(
                    "byte extent {} does not match shape {shape:?} of {}",
                    end - start,
                    dtype.name()
                )));
            }
            if end > data.len() {
                return Err(Error::TruncatedArchive);
            }
            let values = dtype.decode(&data[start..end]);
            entries.insert(name.clone(), TensorEntry { dtype, shape, values });
        }
        Ok(Self { entries })
    }

    /// Serializes with entries in name order, the header padded with spaces
    /// to a multiple of 8 bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = Map::new();
        let mut data = Vec::new();
        for (name, e) in &self.entries {
            let start = data.len();
            e.dtype.encode(&e.values, &mut data);
            header.insert(
                name.clone(),
                json!({"dtype": e.dtype.name(), "shape": e.shape, "data_offsets": [start, data.len()]}),
            );
        }
        let mut text = serde_json::to_string(&Value::Object(header)).expect("header serializes");
        while text.len() % 8 != 0 {
            text.push(' ');
        }
        let mut out = Vec::with_capacity(8 + text.len() + data.len());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&data);
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

pub fn load_tensor_archive(path: impl AsRef<Path>) -> Result<TensorArchive> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorArchive::from_bytes(&bytes)
}
