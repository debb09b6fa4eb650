//! On-disk tensor formats.
//!
//! * Matrix file: an ASCII header line `"<rows> <cols>\n"` followed by
//!   row-major little-endian float32 values. Used for codebooks and exported
//!   feature matrices.
//! * Tensor directory: one raw little-endian file per tensor (`<name>.bin`)
//!   plus a `manifest` with one `<name> <dtype> <d0>x<d1>...` line each.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use lqae_nn::{Float, Param};
use sha2::{Digest, Sha256};

use crate::error::{LqaeError, Result};

pub const MANIFEST: &str = "manifest";

pub fn write_matrix_file(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(LqaeError::Shape(format!("matrix {rows}x{cols} given {} values", data.len())));
    }
    let mut bytes = format!("{rows} {cols}\n").into_bytes();
    bytes.reserve(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

pub fn read_matrix_file(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| LqaeError::io(path, e))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| LqaeError::format(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| LqaeError::format(path, "header is not UTF-8"))?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| LqaeError::format(path, format!("bad header {header:?}")))?;
    let [rows, cols] = dims[..] else {
        return Err(LqaeError::format(path, format!("header {header:?} must be \"rows cols\"")));
    };
    let body = &bytes[nl + 1..];
    if body.len() != rows * cols * 4 {
        return Err(LqaeError::format(
            path,
            format!("expected {} bytes of f32 data, found {}", rows * cols * 4, body.len()),
        ));
    }
    let data = body.chunks_exact(4).map(f32::read_le).collect();
    Ok((rows, cols, data))
}

/// A tensor read from a tensor directory, still in its stored dtype.
#[derive(Clone, Debug)]
pub struct RawTensor {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn from_values<T: Float>(shape: &[usize], values: &[T]) -> Self {
        let mut bytes = Vec::with_capacity(values.len() * T::BYTES);
        for v in values {
            v.write_le(&mut bytes);
        }
        RawTensor { dtype: T::DTYPE.to_string(), shape: shape.to_vec(), bytes }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Decodes into `T`, converting from the stored dtype.
    pub fn values<T: Float>(&self, name: &str) -> Result<Vec<T>> {
        let conv = |width: usize, read: fn(&[u8]) -> f64| -> Result<Vec<T>> {
            if self.bytes.len() != self.numel() * width {
                return Err(LqaeError::format(name, "tensor byte length does not match shape"));
            }
            Ok(self.bytes.chunks_exact(width).map(|c| T::lit(read(c))).collect())
        };
        match self.dtype.as_str() {
            "f32" => conv(4, |c| f32::read_le(c) as f64),
            "f64" => conv(8, f64::read_le),
            other => Err(LqaeError::format(name, format!("unsupported dtype {other}"))),
        }
    }
}

pub fn write_tensor_dir(dir: &Path, tensors: &BTreeMap<String, RawTensor>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| LqaeError::io(dir, e))?;
    let mut manifest = String::new();
    for (name, t) in tensors {
        let shape = t.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        manifest.push_str(&format!("{name} {} {shape}\n", t.dtype));
        let path = dir.join(format!("{name}.bin"));
        fs::write(&path, &t.bytes).map_err(|e| LqaeError::io(&path, e))?;
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| LqaeError::io(&path, e))
}

pub fn read_tensor_dir(dir: &Path) -> Result<BTreeMap<String, RawTensor>> {
    let mpath = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&mpath).map_err(|e| LqaeError::io(&mpath, e))?;
    let mut out = BTreeMap::new();
    for (lineno, line) in manifest.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [name, dtype, shape] = parts[..] else {
            return Err(LqaeError::format(&mpath, format!("line {}: expected `name dtype shape`", lineno + 1)));
        };
        let shape: Vec<usize> = if shape.is_empty() {
            Vec::new()
        } else {
            shape
                .split('x')
                .map(|d| d.parse())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| LqaeError::format(&mpath, format!("line {}: bad shape {shape}", lineno + 1)))?
        };
        let path = dir.join(format!("{name}.bin"));
        let bytes = fs::read(&path).map_err(|e| LqaeError::io(&path, e))?;
        out.insert(name.to_string(), RawTensor { dtype: dtype.to_string(), shape, bytes });
    }
    Ok(out)
}

/// Copies stored values into `param`, checking the shape.
pub fn load_param<T: Float>(tensors: &BTreeMap<String, RawTensor>, name: &str, param: &mut Param<T>) -> Result<()> {
    let t = tensors.get(name).ok_or_else(|| LqaeError::format(name, "tensor missing from manifest"))?;
    if t.shape != param.shape {
        return Err(LqaeError::Shape(format!("{name}: stored shape {:?}, model expects {:?}", t.shape, param.shape)));
    }
    param.value = t.values(name)?;
    Ok(())
}

/// SHA-256 over parameter names, shapes and little-endian values, in visit order.
pub struct Checksum(Sha256);

impl Default for Checksum {
    fn default() -> Self {
        Checksum(Sha256::new())
    }
}

impl Checksum {
    pub fn add_param<T: Float>(&mut self, p: &Param<T>) {
        self.add_values(&p.name, &p.shape, &p.value);
    }

    pub fn add_values<T: Float>(&mut self, name: &str, shape: &[usize], values: &[T]) {
        self.0.update(name.as_bytes());
        for d in shape {
            self.0.update((*d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(values.len() * T::BYTES);
        for v in values {
            v.write_le(&mut buf);
        }
        self.0.update(&buf);
    }

    pub fn add_bytes(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn hex(self) -> String {
        hex::encode(self.0.finalize())
    }
}

/// Writes via a temporary sibling and rename, so readers never observe a
/// partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        LqaeError::io(path, e)
    })
}
