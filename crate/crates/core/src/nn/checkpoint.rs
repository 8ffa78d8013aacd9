//! Versioned binary parameter snapshots: a name, shape and little-endian f32
//! payload per tensor. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::params::ParamSet;

const MAGIC: &[u8; 4] = b"ADCK";
const VERSION: u32 = 1;

pub fn save(ps: &ParamSet<f32>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(ps.len() as u32).to_le_bytes())?;
    for (_, p) in ps.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.rows as u32).to_le_bytes())?;
        w.write_all(&(p.cols as u32).to_le_bytes())?;
        for &x in &p.data {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub struct LoadedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

pub fn load(path: &Path) -> Result<Vec<LoadedTensor>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{path:?} is not a parameter snapshot")));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported snapshot version {version}")));
    }
    r.read_exact(&mut u32b)?;
    let count = u32::from_le_bytes(u32b) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut u16b = [0u8; 2];
        r.read_exact(&mut u16b)?;
        let name_len = u16::from_le_bytes(u16b) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("tensor name is not utf-8".into()))?;
        r.read_exact(&mut u32b)?;
        let rows = u32::from_le_bytes(u32b) as usize;
        r.read_exact(&mut u32b)?;
        let cols = u32::from_le_bytes(u32b) as usize;
        let mut data = vec![0f32; rows * cols];
        let mut f32b = [0u8; 4];
        for x in data.iter_mut() {
            r.read_exact(&mut f32b)?;
            *x = f32::from_le_bytes(f32b);
        }
        out.push(LoadedTensor { name, rows, cols, data });
    }
    Ok(out)
}

/// Copy a loaded snapshot into an architecture-matched param set. Order, names
/// and shapes must all agree; anything else is a checkpoint error.
pub fn restore(ps: &mut ParamSet<f32>, loaded: Vec<LoadedTensor>) -> Result<()> {
    if loaded.len() != ps.len() {
        return Err(Error::Checkpoint(format!(
            "snapshot has {} tensors, model expects {}",
            loaded.len(),
            ps.len()
        )));
    }
    for (i, t) in loaded.into_iter().enumerate() {
        let p = ps.get_mut(i);
        if p.name != t.name || p.rows != t.rows || p.cols != t.cols {
            return Err(Error::Checkpoint(format!(
                "tensor {i}: snapshot has {} [{}x{}], model expects {} [{}x{}]",
                t.name, t.rows, t.cols, p.name, p.rows, p.cols
            )));
        }
        p.data = t.data;
    }
    Ok(())
}
