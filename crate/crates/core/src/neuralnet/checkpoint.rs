//! Binary parameter checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"DFLP"  u32 version=1
//! u32 descriptor_len  descriptor (utf-8 architecture descriptor)
//! u32 tensor_count
//! per tensor: u32 name_len  name  u32 ndim  u64 dims[ndim]
//! values: f64 little-endian, every tensor in header order
//! ```

use std::io::{Read, Write};

use super::{ArchitectureConfig, NnError, ParamSet, Tensor};

const MAGIC: &[u8; 4] = b"DFLP";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(p: &ParamSet, mut w: W) -> Result<(), NnError> {
    let descriptor = p.arch().descriptor();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(descriptor.len() as u32).to_le_bytes())?;
    w.write_all(descriptor.as_bytes())?;
    w.write_all(&(p.tensors().len() as u32).to_le_bytes())?;
    for t in p.tensors() {
        w.write_all(&(t.name.len() as u32).to_le_bytes())?;
        w.write_all(t.name.as_bytes())?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
    }
    for t in p.tensors() {
        for v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NnError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, NnError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 16 {
        return Err(NnError::Format(format!(
            "string length {len} is implausible"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| NnError::Format("string is not utf-8".into()))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamSet, NnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NnError::Format("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let arch = ArchitectureConfig::from_descriptor(&read_string(&mut r)?)?;
    let count = read_u32(&mut r)? as usize;
    let mut tensors = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let name = read_string(&mut r)?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        tensors.push(Tensor {
            name,
            shape,
            data: Vec::new(),
        });
    }
    // shapes are checked against the architecture before any payload is read
    ParamSet::from_parts(
        arch,
        tensors
            .iter()
            .map(|t| Tensor {
                data: vec![0.0; t.shape.iter().product()],
                ..t.clone()
            })
            .collect(),
    )?;
    for t in tensors.iter_mut() {
        let n: usize = t.shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        t.data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
    }
    ParamSet::from_parts(arch, tensors)
}
