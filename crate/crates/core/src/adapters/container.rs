//! `.lad` adapter container, little-endian:
//!
//! ```text
//! "LADP" | version u16 = 1 | dtype u8 (0 = f32, 1 = f64) | layers u32
//! | cumulative samples u64 | task index u32
//! per layer: name_len u16, name (UTF-8), d_out u32, d_in u32, r u32,
//!            aggregate B, aggregate A, task B, task A (row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{AdapterState, LoraDelta};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &[u8; 4] = b"LADP";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(Error::Format(format!("unknown dtype code {other}"))),
        }
    }
}

/// Writes all layers into one container. Every layer must share the task
/// counters, and aggregate and task adapters must share the rank.
pub fn write_lad<W: Write>(mut w: W, layers: &[AdapterState], dtype: Dtype) -> Result<()> {
    let first = layers
        .first()
        .ok_or_else(|| Error::Format("container needs at least one layer".into()))?;
    for layer in layers {
        if (layer.n_cumulative, layer.task_index) != (first.n_cumulative, first.task_index) {
            return Err(Error::Format(format!(
                "layer {} has different task counters",
                layer.layer_name()
            )));
        }
        if layer.aggregate.rank() != layer.task.rank() {
            return Err(Error::Format(format!(
                "layer {}: aggregate rank {} vs task rank {}",
                layer.layer_name(),
                layer.aggregate.rank(),
                layer.task.rank()
            )));
        }
    }

    w.write_all(MAGIC)?;
    w.write_u16::<LittleEndian>(VERSION)?;
    w.write_u8(dtype.code())?;
    w.write_u32::<LittleEndian>(to_u32(layers.len(), "layer count")?)?;
    w.write_u64::<LittleEndian>(first.n_cumulative)?;
    w.write_u32::<LittleEndian>(first.task_index)?;

    for layer in layers {
        let name = layer.layer_name().as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Format("layer name longer than 65535 bytes".into()))?;
        w.write_u16::<LittleEndian>(name_len)?;
        w.write_all(name)?;
        let (d_out, d_in) = layer.shape();
        w.write_u32::<LittleEndian>(to_u32(d_out, "d_out")?)?;
        w.write_u32::<LittleEndian>(to_u32(d_in, "d_in")?)?;
        w.write_u32::<LittleEndian>(to_u32(layer.aggregate.rank(), "rank")?)?;
        for delta in [&layer.aggregate, &layer.task] {
            write_values(&mut w, delta.b(), dtype)?;
            write_values(&mut w, delta.a(), dtype)?;
        }
    }
    Ok(())
}

/// Reads a container written by [`write_lad`].
pub fn read_lad<R: Read>(mut r: R) -> Result<(Vec<AdapterState>, Dtype)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, not a .lad container".into()));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let dtype = Dtype::from_code(r.read_u8()?)?;
    let n_layers = r.read_u32::<LittleEndian>()? as usize;
    let n_cumulative = r.read_u64::<LittleEndian>()?;
    let task_index = r.read_u32::<LittleEndian>()?;

    let mut layers = Vec::with_capacity(n_layers.min(1024));
    for _ in 0..n_layers {
        let name_len = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Format("layer name is not UTF-8".into()))?;
        let d_out = r.read_u32::<LittleEndian>()? as usize;
        let d_in = r.read_u32::<LittleEndian>()? as usize;
        let rank = r.read_u32::<LittleEndian>()? as usize;
        if d_out == 0 || d_in == 0 || rank == 0 {
            return Err(Error::Format(format!("layer {name}: zero dimension")));
        }
        let read_delta = |r: &mut R| -> Result<LoraDelta> {
            let b = read_values(r, d_out, rank, dtype)?;
            let a = read_values(r, rank, d_in, dtype)?;
            LoraDelta::new(name.clone(), b, a)
        };
        let aggregate = read_delta(&mut r)?;
        let task = read_delta(&mut r)?;
        layers.push(AdapterState {
            aggregate,
            task,
            n_cumulative,
            task_index,
        });
    }

    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after last layer".into()));
    }
    Ok((layers, dtype))
}

pub fn save_lad(path: impl AsRef<Path>, layers: &[AdapterState], dtype: Dtype) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_lad(&mut w, layers, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load_lad(path: impl AsRef<Path>) -> Result<(Vec<AdapterState>, Dtype)> {
    read_lad(BufReader::new(File::open(path)?))
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
}

fn write_values<W: Write>(w: &mut W, m: &Matrix, dtype: Dtype) -> Result<()> {
    for &v in m.data() {
        match dtype {
            Dtype::F32 => w.write_f32::<LittleEndian>(v as f32)?,
            Dtype::F64 => w.write_f64::<LittleEndian>(v)?,
        }
    }
    Ok(())
}

fn read_values<R: Read>(r: &mut R, rows: usize, cols: usize, dtype: Dtype) -> Result<Matrix> {
    let n = rows * cols;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(match dtype {
            Dtype::F32 => f64::from(r.read_f32::<LittleEndian>()?),
            Dtype::F64 => r.read_f64::<LittleEndian>()?,
        });
    }
    Matrix::new(rows, cols, data).map_err(|e| Error::Format(format!("bad factor values: {e}")))
}
