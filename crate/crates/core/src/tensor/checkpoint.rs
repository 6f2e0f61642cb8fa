//! Binary checkpoint archive.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "WFCKPT01"
//! count      u32      number of parameters
//! repeated count times:
//!   name_len u32, name (UTF-8 bytes)
//!   rank     u32, dims (u64 x rank)
//!   data     f64 x prod(dims)
//! has_optim  u8       0 or 1
//! if has_optim == 1:
//!   step u64, lr f64, beta1 f64, beta2 f64, eps f64
//!   for each parameter in archive order: first moment (f64 x n), second moment (f64 x n)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Adam, ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"WFCKPT01";

pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
}

pub fn save_checkpoint(path: &Path, store: &ParamStore, optimizer: Option<&Adam>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value().shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        write_f64s(&mut w, p.value().data())?;
    }
    match optimizer {
        Some(opt) if !opt.first.is_empty() => {
            w.write_all(&[1])?;
            w.write_all(&opt.step.to_le_bytes())?;
            for v in [opt.lr, opt.beta1, opt.beta2, opt.eps] {
                w.write_all(&v.to_le_bytes())?;
            }
            for (m, v) in opt.first.iter().zip(&opt.second) {
                write_f64s(&mut w, m)?;
                write_f64s(&mut w, v)?;
            }
        }
        _ => w.write_all(&[0])?,
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{}: bad magic", path.display())));
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamStore::new();
    let mut sizes = Vec::with_capacity(count);
    for _ in 0..count {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n = shape.iter().product();
        let data = read_f64s(&mut r, n)?;
        sizes.push(n);
        params.add(name, Tensor::new(&shape, data)?)?;
    }
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let optimizer = match flag[0] {
        0 => None,
        1 => {
            let step = read_u64(&mut r)?;
            let lr = read_f64(&mut r)?;
            let beta1 = read_f64(&mut r)?;
            let beta2 = read_f64(&mut r)?;
            let eps = read_f64(&mut r)?;
            let mut opt = Adam::with_betas(lr, beta1, beta2, eps);
            opt.step = step;
            for &n in &sizes {
                opt.first.push(read_f64s(&mut r, n)?);
                opt.second.push(read_f64s(&mut r, n)?);
            }
            Some(opt)
        }
        other => return Err(Error::Checkpoint(format!("bad optimizer flag {other}"))),
    };
    Ok(Checkpoint { params, optimizer })
}

fn write_f64s(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| read_f64(r)).collect()
}
