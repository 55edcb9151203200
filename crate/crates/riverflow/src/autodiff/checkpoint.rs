//! Versioned binary container of named f64 tensors.
//!
//! Layout (all integers little-endian):
//!   magic "RFTC" | version u8 | count u32
//!   per tensor: name_len u16 | name utf-8 | ndim u8 | dims u64 each | data f64
//!
//! Round-trips are bit-exact; values are copied verbatim as IEEE-754 bits.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RFTC";
const VERSION: u8 = 1;

pub fn save_tensors(path: &Path, items: &[(String, ArrayD<f64>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(items.len() as u32).to_le_bytes())?;
    for (name, tensor) in items {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::domain(format!("tensor name too long: {name}")));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in tensor.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, ArrayD<f64>)>> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{} is not a tensor container (bad magic)",
            path.display()
        )));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)?;
    if version[0] != VERSION {
        return Err(Error::data(format!(
            "unsupported tensor container version {}",
            version[0]
        )));
    }

    let mut count_bytes = [0u8; 4];
    r.read_exact(&mut count_bytes)?;
    let count = u32::from_le_bytes(count_bytes) as usize;

    let mut items = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len_bytes = [0u8; 2];
        r.read_exact(&mut len_bytes)?;
        let mut name_bytes = vec![0u8; u16::from_le_bytes(len_bytes) as usize];
        r.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::data(format!("bad tensor name: {e}")))?;

        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim)?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            let mut dim_bytes = [0u8; 8];
            r.read_exact(&mut dim_bytes)?;
            shape.push(u64::from_le_bytes(dim_bytes) as usize);
        }

        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut buf = [0u8; 8];
        for _ in 0..len {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        let tensor = ArrayD::from_shape_vec(ndarray::IxDyn(&shape), data)
            .map_err(|e| Error::data(format!("bad tensor shape in container: {e}")))?;
        items.push((name, tensor));
    }
    Ok(items)
}
