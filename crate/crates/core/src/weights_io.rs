//! Binary weight files: magic `UXMIL1`, `u32` version, then one record per
//! parameter until end of file. A record is `u32` name length, UTF-8 name,
//! `u32` rank, `u64` dims, then `f32` values. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"UXMIL1";
pub const VERSION: u32 = 1;

pub fn write_weights(store: &ParamStore, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
        for &d in p.value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in p.value.data() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_weights(store: &ParamStore, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_weights(store, &mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads all records. Returns `Ok(None)`-style EOF only at record boundaries.
pub fn read_weights(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let trunc = |e: std::io::Error| Error::Format(format!("truncated weight file: {e}"));
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(trunc)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a weight file (bad magic)".into()));
    }
    let version = read_u32(r).map_err(trunc)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weight file version {version}")));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(trunc(e)),
        }
        let len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(trunc)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = read_u32(r).map_err(trunc)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(trunc)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut raw = vec![0u8; n * 4];
        r.read_exact(&mut raw).map_err(trunc)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn load_weight_records(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_weights(&mut BufReader::new(file))
}

/// Overwrites every parameter of `store` from the file. Names and shapes
/// must match the configured architecture one-to-one.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let records = load_weight_records(path)?;
    apply_records(store, records)
}

pub fn apply_records(store: &mut ParamStore, records: Vec<(String, Tensor)>) -> Result<()> {
    if records.len() != store.len() {
        return Err(Error::Validation(format!(
            "weight file has {} parameters, architecture expects {}",
            records.len(),
            store.len()
        )));
    }
    for (name, t) in records {
        store.set(&name, t)?;
    }
    Ok(())
}
