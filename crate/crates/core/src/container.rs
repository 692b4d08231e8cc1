//! Versioned binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "FFTENSR\0"
//! version u32      currently 1
//! count   u32      number of named tensors
//! entry*  name_len u32, name bytes (utf-8),
//!         dtype    u8 (0 = f32, 1 = f64),
//!         ndim     u32, dims u64 * ndim,
//!         payload  dtype * prod(dims), row-major
//! ```
//!
//! Clip files store f32 payloads; checkpoints store f64 so training state
//! round-trips bit-exactly.

use foleyflow_autograd::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"FFTENSR\0";
pub const VERSION: u32 = 1;
pub const CKPT_MAGIC: &[u8; 8] = b"FFCKPT\0\0";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic bytes (not a tensor container)")]
    BadMagic { path: String },
    #[error("{path}: container version {found}, expected {expected}")]
    VersionMismatch {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated payload while reading `{name}`")]
    Truncated { path: String, name: String },
    #[error("{path}: malformed entry: {what}")]
    Malformed { path: String, what: String },
    #[error("{path}: no tensor named `{name}` in container")]
    Missing { path: String, name: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    /// View as f64 regardless of stored precision.
    pub fn to_f64(&self) -> Tensor<f64> {
        match self {
            TensorData::F32(t) => t.to_f64(),
            TensorData::F64(t) => t.clone(),
        }
    }
}

/// Ordered named tensors; order is part of the on-disk identity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub entries: Vec<(String, TensorData)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.entries.push((name.into(), TensorData::F32(t)));
    }

    pub fn push_f64(&mut self, name: impl Into<String>, t: Tensor<f64>) {
        self.entries.push((name.into(), TensorData::F64(t)));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require(&self, path: &Path, name: &str) -> Result<&TensorData, ContainerError> {
        self.get(name).ok_or_else(|| ContainerError::Missing {
            path: path.display().to_string(),
            name: name.to_string(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<(), ContainerError> {
        let io = |source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io)?;
        let mut w = BufWriter::new(file);
        let io = |source| ContainerError::Io {
            path: path.display().to_string(),
            source,
        };
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        write_entries(&mut w, &self.entries).map_err(io)?;
        w.flush().map_err(io)
    }

    pub fn read(path: &Path) -> Result<Self, ContainerError> {
        let p = path.display().to_string();
        let io = |source| ContainerError::Io {
            path: p.clone(),
            source,
        };
        let file = File::open(path).map_err(io)?;
        let mut r = BufReader::new(file);

        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic, path, "<header>")?;
        if &magic != MAGIC {
            return Err(ContainerError::BadMagic { path: p });
        }
        let version = read_u32(&mut r, path, "<header>")?;
        if version != VERSION {
            return Err(ContainerError::VersionMismatch {
                path: p,
                found: version,
                expected: VERSION,
            });
        }
        let entries = read_entries(&mut r, path)?;
        Ok(Self { entries })
    }
}

fn write_entries<W: Write>(
    w: &mut W,
    entries: &[(String, TensorData)],
) -> std::io::Result<()> {
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, data) in entries {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        match data {
            TensorData::F32(t) => {
                w.write_all(&[0u8])?;
                write_header(w, t.shape())?;
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            TensorData::F64(t) => {
                w.write_all(&[1u8])?;
                write_header(w, t.shape())?;
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

fn read_entries<R: Read>(
    r: &mut R,
    path: &Path,
) -> Result<Vec<(String, TensorData)>, ContainerError> {
    let p = path.display().to_string();
    {
        let count = read_u32(r, path, "<header>")? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r, path, "<name>")? as usize;
            if name_len > 4096 {
                return Err(ContainerError::Malformed {
                    path: p,
                    what: format!("entry name length {name_len}"),
                });
            }
            let mut name_bytes = vec![0u8; name_len];
            read_exact(r, &mut name_bytes, path, "<name>")?;
            let name = String::from_utf8(name_bytes).map_err(|_| ContainerError::Malformed {
                path: p.clone(),
                what: "entry name is not utf-8".into(),
            })?;
            let mut dtype = [0u8; 1];
            read_exact(r, &mut dtype, path, &name)?;
            let ndim = read_u32(r, path, &name)? as usize;
            if ndim > 4 {
                return Err(ContainerError::Malformed {
                    path: p,
                    what: format!("`{name}` has rank {ndim}"),
                });
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(r, &mut b, path, &name)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let data = match dtype[0] {
                0 => {
                    let mut buf = vec![0u8; numel * 4];
                    read_exact(r, &mut buf, path, &name)?;
                    let vals: Vec<f32> = buf
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    TensorData::F32(Tensor::new(shape, vals).map_err(|e| {
                        ContainerError::Malformed {
                            path: p.clone(),
                            what: e.to_string(),
                        }
                    })?)
                }
                1 => {
                    let mut buf = vec![0u8; numel * 8];
                    read_exact(r, &mut buf, path, &name)?;
                    let vals: Vec<f64> = buf
                        .chunks_exact(8)
                        .map(|c| {
                            f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                        })
                        .collect();
                    TensorData::F64(Tensor::new(shape, vals).map_err(|e| {
                        ContainerError::Malformed {
                            path: p.clone(),
                            what: e.to_string(),
                        }
                    })?)
                }
                d => {
                    return Err(ContainerError::Malformed {
                        path: p,
                        what: format!("`{name}` has unknown dtype tag {d}"),
                    })
                }
            };
            entries.push((name, data));
        }
        Ok(entries)
    }
}

/// Write a checkpoint: magic, version, a JSON metadata block, then named
/// parameter tensors in the shared entry encoding.
pub fn write_checkpoint(
    path: &Path,
    meta_json: &str,
    tensors: &Container,
) -> Result<(), ContainerError> {
    let io = |source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    let mut w = BufWriter::new(file);
    let io = |source| ContainerError::Io {
        path: path.display().to_string(),
        source,
    };
    w.write_all(CKPT_MAGIC).map_err(io)?;
    w.write_all(&CKPT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(meta_json.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(meta_json.as_bytes()).map_err(io)?;
    write_entries(&mut w, &tensors.entries).map_err(io)?;
    w.flush().map_err(io)
}

/// Read a checkpoint back as (metadata JSON, named tensors).
pub fn read_checkpoint(path: &Path) -> Result<(String, Container), ContainerError> {
    let p = path.display().to_string();
    let io = |source| ContainerError::Io {
        path: p.clone(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    read_exact(&mut r, &mut magic, path, "<header>")?;
    if &magic != CKPT_MAGIC {
        return Err(ContainerError::BadMagic { path: p });
    }
    let version = read_u32(&mut r, path, "<header>")?;
    if version != CKPT_VERSION {
        return Err(ContainerError::VersionMismatch {
            path: p,
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let meta_len = read_u32(&mut r, path, "<meta>")? as usize;
    if meta_len > 16 << 20 {
        return Err(ContainerError::Malformed {
            path: p,
            what: format!("metadata block of {meta_len} bytes"),
        });
    }
    let mut meta = vec![0u8; meta_len];
    read_exact(&mut r, &mut meta, path, "<meta>")?;
    let meta_json = String::from_utf8(meta).map_err(|_| ContainerError::Malformed {
        path: p,
        what: "metadata is not utf-8".into(),
    })?;
    let entries = read_entries(&mut r, path)?;
    Ok((meta_json, Container { entries }))
}

fn write_header<W: Write>(w: &mut W, shape: &[usize]) -> std::io::Result<()> {
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(
    r: &mut R,
    buf: &mut [u8],
    path: &Path,
    name: &str,
) -> Result<(), ContainerError> {
    r.read_exact(buf).map_err(|_| ContainerError::Truncated {
        path: path.display().to_string(),
        name: name.to_string(),
    })
}

fn read_u32<R: Read>(r: &mut R, path: &Path, name: &str) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, path, name)?;
    Ok(u32::from_le_bytes(b))
}
