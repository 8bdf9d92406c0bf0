//! On-disk formats.
//!
//! Two containers are used throughout:
//!
//! * `PTNS1` portable tensors: a single UTF-8 header line followed by a raw
//!   little-endian `f32` payload. Used for fields, PSF stacks, kernels,
//!   scenes and response datasets.
//! * `PSCK1` checkpoints: a length-prefixed JSON header followed by named
//!   little-endian `f64` arrays. Used where resuming must be bit-exact
//!   (surrogate weights, designs, optimizer state).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, Array3};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &str = "PTNS1";
pub const CONTAINER_MAGIC: &[u8; 6] = b"PSCK1\n";

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
    dtype: String,
    axes: Vec<String>,
    units: String,
    endianness: String,
    sha256: String,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    meta: serde_json::Value,
}

/// A dense `f32` tensor with axis labels and free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PortableTensor {
    pub shape: Vec<usize>,
    pub axes: Vec<String>,
    pub units: String,
    pub meta: serde_json::Value,
    pub data: Vec<f32>,
}

impl PortableTensor {
    pub fn new(shape: Vec<usize>, axes: Vec<String>, units: &str, data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if axes.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} axis labels for a rank-{} tensor",
                axes.len(),
                shape.len()
            )));
        }
        Ok(Self { shape, axes, units: units.to_string(), meta: serde_json::Value::Null, data })
    }

    pub fn with_meta(mut self, meta: serde_json::Value) -> Self {
        self.meta = meta;
        self
    }

    pub fn from_array2(a: &Array2<f64>, axes: [&str; 2], units: &str) -> Self {
        let data = a.iter().map(|&v| v as f32).collect();
        Self::new(a.shape().to_vec(), axes.iter().map(|s| s.to_string()).collect(), units, data)
            .expect("shape derived from array")
    }

    pub fn from_array3(a: &Array3<f64>, axes: [&str; 3], units: &str) -> Self {
        let data = a.iter().map(|&v| v as f32).collect();
        Self::new(a.shape().to_vec(), axes.iter().map(|s| s.to_string()).collect(), units, data)
            .expect("shape derived from array")
    }

    /// Complex grid stored as `[2, rows, cols]` with real and imaginary planes separate.
    pub fn from_complex(a: &Array2<Complex64>, units: &str) -> Self {
        let (r, c) = a.dim();
        let mut data = Vec::with_capacity(2 * r * c);
        data.extend(a.iter().map(|z| z.re as f32));
        data.extend(a.iter().map(|z| z.im as f32));
        Self::new(vec![2, r, c], vec!["part".into(), "y".into(), "x".into()], units, data)
            .expect("shape derived from array")
    }

    pub fn to_array2(&self) -> Result<Array2<f64>> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!("expected rank-2 tensor, found {:?}", self.shape)));
        }
        Ok(Array2::from_shape_vec(
            (self.shape[0], self.shape[1]),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("validated shape"))
    }

    pub fn to_array3(&self) -> Result<Array3<f64>> {
        if self.shape.len() != 3 {
            return Err(Error::Shape(format!("expected rank-3 tensor, found {:?}", self.shape)));
        }
        Ok(Array3::from_shape_vec(
            (self.shape[0], self.shape[1], self.shape[2]),
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("validated shape"))
    }

    pub fn to_complex(&self) -> Result<Array2<Complex64>> {
        if self.shape.len() != 3 || self.shape[0] != 2 {
            return Err(Error::Shape(format!(
                "expected [2, rows, cols] complex tensor, found {:?}",
                self.shape
            )));
        }
        let (r, c) = (self.shape[1], self.shape[2]);
        let n = r * c;
        let re = &self.data[..n];
        let im = &self.data[n..];
        Ok(Array2::from_shape_fn((r, c), |(i, j)| {
            let k = i * c + j;
            Complex64::new(re[k] as f64, im[k] as f64)
        }))
    }

    fn payload_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let payload = self.payload_bytes();
        let header = TensorHeader {
            shape: self.shape.clone(),
            dtype: "f32".into(),
            axes: self.axes.clone(),
            units: self.units.clone(),
            endianness: "little".into(),
            sha256: sha256_hex(&payload),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{TENSOR_MAGIC} {json}")?;
        w.write_all(&payload)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut reader = BufReader::new(r);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let rest = line
            .strip_prefix(TENSOR_MAGIC)
            .ok_or_else(|| Error::Format("missing PTNS1 magic".into()))?;
        let header: TensorHeader = serde_json::from_str(rest.trim())
            .map_err(|e| Error::Format(format!("bad tensor header: {e}")))?;
        if header.dtype != "f32" || header.endianness != "little" {
            return Err(Error::Format(format!(
                "unsupported dtype/endianness {}/{}",
                header.dtype, header.endianness
            )));
        }
        let n: usize = header.shape.iter().product();
        let mut payload = Vec::new();
        reader.read_to_end(&mut payload)?;
        if payload.len() != n * 4 {
            return Err(Error::Format(format!(
                "payload holds {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                n * 4
            )));
        }
        if sha256_hex(&payload) != header.sha256 {
            return Err(Error::Format("tensor payload checksum mismatch".into()));
        }
        let data = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut t = Self::new(header.shape, header.axes, &header.units, data)?;
        t.meta = header.meta;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(File::open(path)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ContainerHeader {
    kind: String,
    version: u32,
    meta: serde_json::Value,
    arrays: Vec<ArrayEntry>,
    sha256: String,
}

/// Versioned binary container of named `f64` arrays plus JSON metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub kind: String,
    pub version: u32,
    pub meta: serde_json::Value,
    pub arrays: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl Container {
    pub fn new(kind: &str, version: u32) -> Self {
        Self { kind: kind.into(), version, meta: serde_json::Value::Null, arrays: BTreeMap::new() }
    }

    pub fn put(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.arrays.insert(name.to_string(), (shape, data));
    }

    pub fn put_array2(&mut self, name: &str, a: &Array2<f64>) {
        self.put(name, a.shape().to_vec(), a.iter().copied().collect());
    }

    pub fn get(&self, name: &str) -> Result<&(Vec<usize>, Vec<f64>)> {
        self.arrays
            .get(name)
            .ok_or_else(|| Error::Format(format!("{} container has no array '{name}'", self.kind)))
    }

    pub fn get_array2(&self, name: &str) -> Result<Array2<f64>> {
        let (shape, data) = self.get(name)?;
        if shape.len() != 2 {
            return Err(Error::Shape(format!("array '{name}' has shape {shape:?}, expected rank 2")));
        }
        Ok(Array2::from_shape_vec((shape[0], shape[1]), data.clone()).expect("validated on read"))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, (shape, data)) in &self.arrays {
            entries.push(ArrayEntry { name: name.clone(), shape: shape.clone(), offset: payload.len() });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let header = ContainerHeader {
            kind: self.kind.clone(),
            version: self.version,
            meta: self.meta.clone(),
            arrays: entries,
            sha256: sha256_hex(&payload),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&payload)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::Format("missing PSCK1 magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 30 {
            return Err(Error::Format("implausible container header length".into()));
        }
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let header: ContainerHeader = serde_json::from_slice(&json)
            .map_err(|e| Error::Format(format!("bad container header: {e}")))?;
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if sha256_hex(&payload) != header.sha256 {
            return Err(Error::Format("container payload checksum mismatch".into()));
        }
        let mut arrays = BTreeMap::new();
        for e in header.arrays {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * 8;
            if end > payload.len() {
                return Err(Error::Format(format!("array '{}' runs past the payload", e.name)));
            }
            let data = payload[e.offset..end]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            arrays.insert(e.name, (e.shape, data));
        }
        Ok(Self { kind: header.kind, version: header.version, meta: header.meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
