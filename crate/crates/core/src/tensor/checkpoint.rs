//! Bit-exact binary checkpoints for a [`ParamStore`].
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CKPT"  magic
//! u32     format version (1)
//! u8      scalar width in bytes (4 = f32, 8 = f64)
//! u64     optimizer step
//! u32     group count
//! per group:
//!   str   name (u32 length + utf8)
//!   f64   base learning rate
//!   u8    trainable flag
//!   u32   parameter count
//!   per parameter:
//!     str     name
//!     u32     rank, then u32 per dimension
//!     data    value (numel x width bytes, IEEE bits)
//!     u8      adam-state flag; if 1, m then v in the same layout
//! ```
//!
//! Values round-trip exactly: floats are written as their IEEE bit patterns.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{AdamConfig, Param, ParamGroup, ParamStore, Scalar, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"CKPT";
const VERSION: u32 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String, TensorError> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 20 {
        return Err(TensorError::MalformedCheckpoint(format!(
            "string length {len} is implausible"
        )));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf)
        .map_err(|_| TensorError::MalformedCheckpoint("non-utf8 name".to_string()))
}

fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> std::io::Result<()> {
    for &x in t.data() {
        x.write_le(w)?;
    }
    Ok(())
}

fn read_tensor<T: Scalar, R: Read>(r: &mut R, shape: &[usize]) -> Result<Tensor<T>, TensorError> {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(T::read_le(r)?);
    }
    Ok(Tensor::new(shape, data))
}

/// Writes `store` to `path`. Optimizer state is included when `include_adam`
/// is set; otherwise loading yields zeroed Adam buffers.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    store: &ParamStore<T>,
    include_adam: bool,
) -> Result<(), TensorError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u8(T::WIDTH)?;
    w.write_u64::<LittleEndian>(store.step)?;
    w.write_u32::<LittleEndian>(store.groups().len() as u32)?;
    for g in store.groups() {
        write_str(&mut w, &g.name)?;
        w.write_f64::<LittleEndian>(g.lr)?;
        w.write_u8(u8::from(g.trainable))?;
        w.write_u32::<LittleEndian>(g.params.len() as u32)?;
        for p in &g.params {
            write_str(&mut w, &p.name)?;
            w.write_u32::<LittleEndian>(p.value.shape().len() as u32)?;
            for &d in p.value.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            write_tensor(&mut w, &p.value)?;
            w.write_u8(u8::from(include_adam))?;
            if include_adam {
                write_tensor(&mut w, &p.m)?;
                write_tensor(&mut w, &p.v)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`] with the same scalar
/// type. The returned store uses default Adam hyperparameters; override them
/// on the result if the run configuration says otherwise.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ParamStore<T>, TensorError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::MalformedCheckpoint("bad magic".to_string()));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(TensorError::MalformedCheckpoint(format!(
            "unsupported version {version}"
        )));
    }
    let width = r.read_u8()?;
    if width != T::WIDTH {
        return Err(TensorError::MalformedCheckpoint(format!(
            "scalar width {width} does not match requested type ({})",
            T::WIDTH
        )));
    }
    let step = r.read_u64::<LittleEndian>()?;
    let n_groups = r.read_u32::<LittleEndian>()?;
    let mut store = ParamStore::new(AdamConfig::default());
    store.step = step;
    for _ in 0..n_groups {
        let name = read_str(&mut r)?;
        let lr = r.read_f64::<LittleEndian>()?;
        let trainable = r.read_u8()? != 0;
        let n_params = r.read_u32::<LittleEndian>()?;
        let mut params = Vec::with_capacity(n_params as usize);
        for _ in 0..n_params {
            let pname = read_str(&mut r)?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            if rank > 8 {
                return Err(TensorError::MalformedCheckpoint(format!(
                    "rank {rank} is implausible"
                )));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let value: Tensor<T> = read_tensor(&mut r, &shape)?;
            let has_adam = r.read_u8()? != 0;
            let (m, v) = if has_adam {
                (read_tensor(&mut r, &shape)?, read_tensor(&mut r, &shape)?)
            } else {
                (Tensor::zeros(&shape), Tensor::zeros(&shape))
            };
            params.push(Param {
                name: pname,
                value,
                m,
                v,
            });
        }
        store.push_group(ParamGroup {
            name,
            lr,
            trainable,
            params,
        });
    }
    Ok(store)
}
