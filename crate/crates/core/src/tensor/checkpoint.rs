//! Versioned binary container for named, shape-tagged `f32` arrays plus a
//! JSON metadata block describing the configuration that produced them.
//!
//! Layout (little endian):
//! `b"NLUCKPT\0"`, `u32 version`, `u32 meta_len`, `meta_len` bytes of JSON,
//! `u32 count`, then per tensor `u32 name_len`, name, `u32 ndim`, `ndim × u32`
//! dims, `prod(dims) × f32` data.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"NLUCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(&meta)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, t) in self.params.iter() {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = r.read_u32::<LittleEndian>()? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let meta = serde_json::from_slice(&meta)?;
        let count = r.read_u32::<LittleEndian>()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let shape = (0..ndim)
                .map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data)?;
            params.add(name, Tensor::new(&shape, data)?);
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(File::open(path)?))
    }

    /// Copies stored arrays into `target`, requiring identical names,
    /// order and shapes.
    pub fn restore_into(&self, target: &mut ParamStore<f32>) -> Result<()> {
        if self.params.len() != target.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                target.len()
            )));
        }
        for i in 0..target.len() {
            let (name, shape) = (&target.names()[i], target.tensors()[i].shape().to_vec());
            let (src_name, src) = (&self.params.names()[i], &self.params.tensors()[i]);
            if name != src_name || src.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i}: expected `{name}` {shape:?}, found `{src_name}` {:?}",
                    src.shape()
                )));
            }
        }
        for (dst, src) in target.tensors_mut().iter_mut().zip(self.params.tensors()) {
            dst.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }
}
