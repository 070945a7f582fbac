//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "RATN"            4 bytes
//! version           u32 (= 1)
//! repeated until EOF:
//!   name_len        u32
//!   name            name_len bytes, UTF-8
//!   rank            u32
//!   extents         rank x u64
//!   data            product(extents) x f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RATN";
pub const VERSION: u32 = 1;

pub fn write_params(w: &mut impl Write, store: &ParamStore) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for (name, t) in store.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&t.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::Format(format!("checkpoint truncated in {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_params(r: &mut impl Read) -> Result<ParamStore> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut store = ParamStore::new();
    loop {
        let mut first = [0u8; 4];
        match r.read(&mut first[..1])? {
            0 => break,
            _ => read_exact_or(r, &mut first[1..], "name length")?,
        }
        let name_len = u32::from_le_bytes(first) as usize;
        let mut name = vec![0u8; name_len];
        read_exact_or(r, &mut name, "name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(r, "rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            read_exact_or(r, &mut b, "extents")?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        read_exact_or(r, &mut bytes, "data")?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if store.find(&name).is_some() {
            return Err(Error::Format(format!("duplicate parameter {name}")));
        }
        store.add(name, Tensor::new(&shape, data)?);
    }
    Ok(store)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, store)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamStore> {
    read_params(&mut BufReader::new(File::open(path)?))
}
