//! Versioned binary checkpoint: named tensors with shapes, values as
//! little-endian f32. Callers that need exact-config restore write a JSON
//! sidecar next to the file; this module only handles the tensor payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::store::ParamStore;

const MAGIC: &[u8; 4] = b"TNS1";
const VERSION: u32 = 1;

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.specs().len() as u32).to_le_bytes())?;
    for spec in store.specs() {
        let name = spec.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(spec.shape.len() as u32).to_le_bytes())?;
        for &dim in &spec.shape {
            w.write_all(&(dim as u64).to_le_bytes())?;
        }
        for &v in &store.data[spec.offset..spec.offset + spec.len] {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Load values into an existing store laid out by the same model code.
/// Tensor names and shapes must match exactly, in order.
pub fn load(store: &mut ParamStore, path: &Path) -> Result<()> {
    let mut r = BufReader::new(File::open(path)?);
    let bad = |msg: String| Error::Checkpoint(format!("{}: {msg}", path.display()));

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a tensor checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n_tensors = read_u32(&mut r)? as usize;
    if n_tensors != store.specs().len() {
        return Err(bad(format!(
            "tensor count {n_tensors} does not match model ({})",
            store.specs().len()
        )));
    }
    for i in 0..n_tensors {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| bad(format!("tensor {i} name is not UTF-8")))?;
        let ndim = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(u64::from_le_bytes(b) as usize);
        }
        let spec = &store.specs()[i];
        if spec.name != name || spec.shape != shape {
            return Err(bad(format!(
                "tensor {i} is {name:?} {shape:?}, model expects {:?} {:?}",
                spec.name, spec.shape
            )));
        }
        let (offset, len) = (spec.offset, spec.len);
        let mut buf = vec![0u8; len * 4];
        r.read_exact(&mut buf)?;
        for (j, chunk) in buf.chunks_exact(4).enumerate() {
            store.data[offset + j] =
                f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64;
        }
    }
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(()),
        _ => Err(bad("trailing bytes after last tensor".into())),
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
