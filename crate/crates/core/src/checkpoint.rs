//! Checkpoint container: one file mapping hierarchical keys to arrays with
//! dtype/shape metadata, plus a string metadata section (config snapshot,
//! iteration counters, RNG position). Layout is little-endian:
//! magic `HCKP`, version `u16`, metadata count + entries, array count +
//! entries (key, dtype tag, ndim, dims, raw data).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::num::Scalar;

const MAGIC: &[u8; 4] = b"HCKP";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl ArrayData {
    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F32(a) => a.shape(),
            ArrayData::F64(a) => a.shape(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        match self {
            ArrayData::F32(a) => a.iter().map(|&v| v as f64).collect(),
            ArrayData::F64(a) => a.iter().copied().collect(),
        }
    }
}

#[derive(Debug, Default, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, ArrayData>,
}

fn write_str(wr: &mut impl Write, s: &str) -> std::io::Result<()> {
    wr.write_u32::<LittleEndian>(s.len() as u32)?;
    wr.write_all(s.as_bytes())
}

fn read_str(rd: &mut impl Read) -> std::io::Result<String> {
    let len = rd.read_u32::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    rd.read_exact(&mut buf)?;
    Ok(String::from_utf8_lossy(&buf).into_owned())
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let ctx = || format!("write checkpoint {}", path.display());
        let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
        let mut wr = BufWriter::new(file);
        (|| -> std::io::Result<()> {
            wr.write_all(MAGIC)?;
            wr.write_u16::<LittleEndian>(VERSION)?;
            wr.write_u32::<LittleEndian>(self.meta.len() as u32)?;
            for (k, v) in &self.meta {
                write_str(&mut wr, k)?;
                write_str(&mut wr, v)?;
            }
            wr.write_u32::<LittleEndian>(self.arrays.len() as u32)?;
            for (k, arr) in &self.arrays {
                write_str(&mut wr, k)?;
                match arr {
                    ArrayData::F32(a) => {
                        wr.write_u8(0)?;
                        wr.write_u8(a.ndim() as u8)?;
                        for &d in a.shape() {
                            wr.write_u32::<LittleEndian>(d as u32)?;
                        }
                        for &v in a.iter() {
                            wr.write_f32::<LittleEndian>(v)?;
                        }
                    }
                    ArrayData::F64(a) => {
                        wr.write_u8(1)?;
                        wr.write_u8(a.ndim() as u8)?;
                        for &d in a.shape() {
                            wr.write_u32::<LittleEndian>(d as u32)?;
                        }
                        for &v in a.iter() {
                            wr.write_f64::<LittleEndian>(v)?;
                        }
                    }
                }
            }
            wr.flush()
        })()
        .map_err(|e| Error::io(ctx(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let fmt = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let file = File::open(path).map_err(|e| Error::io(format!("open {}", path.display()), e))?;
        let mut rd = BufReader::new(file);
        let mut magic = [0u8; 4];
        rd.read_exact(&mut magic).map_err(|e| fmt(e.to_string()))?;
        if &magic != MAGIC {
            return Err(fmt(format!("bad magic {magic:?}")));
        }
        let version = rd.read_u16::<LittleEndian>().map_err(|e| fmt(e.to_string()))?;
        if version != VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let mut ckpt = Checkpoint::default();
        let n_meta = rd.read_u32::<LittleEndian>().map_err(|e| fmt(e.to_string()))?;
        for _ in 0..n_meta {
            let k = read_str(&mut rd).map_err(|e| fmt(e.to_string()))?;
            let v = read_str(&mut rd).map_err(|e| fmt(e.to_string()))?;
            ckpt.meta.insert(k, v);
        }
        let n_arrays = rd.read_u32::<LittleEndian>().map_err(|e| fmt(e.to_string()))?;
        for _ in 0..n_arrays {
            let k = read_str(&mut rd).map_err(|e| fmt(e.to_string()))?;
            let dtype = rd.read_u8().map_err(|e| fmt(e.to_string()))?;
            let ndim = rd.read_u8().map_err(|e| fmt(e.to_string()))? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(rd.read_u32::<LittleEndian>().map_err(|e| fmt(e.to_string()))? as usize);
            }
            let len: usize = dims.iter().product();
            let arr = match dtype {
                0 => {
                    let mut data = Vec::with_capacity(len);
                    for _ in 0..len {
                        data.push(rd.read_f32::<LittleEndian>().map_err(|e| fmt(e.to_string()))?);
                    }
                    ArrayData::F32(ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap())
                }
                1 => {
                    let mut data = Vec::with_capacity(len);
                    for _ in 0..len {
                        data.push(rd.read_f64::<LittleEndian>().map_err(|e| fmt(e.to_string()))?);
                    }
                    ArrayData::F64(ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap())
                }
                other => return Err(fmt(format!("unknown dtype tag {other}"))),
            };
            ckpt.arrays.insert(k, arr);
        }
        Ok(ckpt)
    }

    /// Stores a parameter under `key` (f32 storage for f32 models, f64
    /// otherwise).
    pub fn put_array_f64(&mut self, key: &str, shape: &[usize], data: Vec<f64>) {
        self.arrays.insert(
            key.to_string(),
            ArrayData::F64(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()),
        );
    }

    pub fn put_array_f32(&mut self, key: &str, shape: &[usize], data: Vec<f32>) {
        self.arrays.insert(
            key.to_string(),
            ArrayData::F32(ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()),
        );
    }
}

/// Collects model parameters under a key prefix into a checkpoint.
pub fn store_params<S: Scalar>(
    ckpt: &mut Checkpoint,
    prefix: &str,
    visit: impl FnOnce(&mut dyn FnMut(String, &mut Param<S>)),
) {
    visit(&mut |name, p| {
        let full = if prefix.is_empty() {
            name
        } else {
            format!("{prefix}.{name}")
        };
        let data: Vec<f64> = p.value.iter().map(|v| v.to_f64_()).collect();
        if std::mem::size_of::<S>() == 4 {
            ckpt.arrays.insert(
                full,
                ArrayData::F32(
                    ArrayD::from_shape_vec(IxDyn(p.value.shape()), data.iter().map(|&v| v as f32).collect())
                        .unwrap(),
                ),
            );
        } else {
            ckpt.arrays.insert(
                full,
                ArrayData::F64(ArrayD::from_shape_vec(IxDyn(p.value.shape()), data).unwrap()),
            );
        }
    });
}

/// Loads parameters back. With `strict`, key sets must match exactly under
/// the prefix; mismatches report missing and unexpected keys.
pub fn load_params<S: Scalar>(
    ckpt: &Checkpoint,
    prefix: &str,
    strict: bool,
    visit: impl FnOnce(&mut dyn FnMut(String, &mut Param<S>)),
) -> Result<()> {
    let mut seen = Vec::new();
    let mut missing = Vec::new();
    let mut result = Ok(());
    let mut shape_err: Option<Error> = None;
    visit(&mut |name, p| {
        let full = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}.{name}")
        };
        match ckpt.arrays.get(&full) {
            Some(arr) => {
                seen.push(full.clone());
                if arr.shape() != p.value.shape() {
                    shape_err = Some(Error::shape(format!(
                        "checkpoint entry {full}: shape {:?} does not match parameter {:?}",
                        arr.shape(),
                        p.value.shape()
                    )));
                    return;
                }
                for (dst, src) in p.value.iter_mut().zip(arr.to_f64_vec()) {
                    *dst = S::from_f64(src);
                }
            }
            None => missing.push(full),
        }
    });
    if let Some(e) = shape_err {
        return Err(e);
    }
    if strict {
        let unexpected: Vec<String> = ckpt
            .arrays
            .keys()
            .filter(|k| {
                (prefix.is_empty() || k.starts_with(&format!("{prefix}.")))
                    && !seen.contains(k)
            })
            .cloned()
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            result = Err(Error::CheckpointKeys {
                missing,
                unexpected,
            });
        }
    } else if !missing.is_empty() {
        // partial loads tolerate missing entries
    }
    result
}
