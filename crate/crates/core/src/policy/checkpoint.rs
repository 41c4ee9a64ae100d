//! Binary policy checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SCRPOPOL"
//! version  u32      1
//! shape    6 x u32  vocab, d_model, n_layers, n_heads, d_ff, context
//! count    u64      number of parameters
//! params   count x f64 (little-endian IEEE-754)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::model::{ModelShape, PolicyParams};
use crate::error::{Error, Result};

pub const POLICY_MAGIC: &[u8; 8] = b"SCRPOPOL";
pub const POLICY_VERSION: u32 = 1;

pub(crate) fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Checkpoint("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

pub fn save_policy(path: &Path, params: &PolicyParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let s = params.shape();
    w.write_all(POLICY_MAGIC)?;
    w.write_all(&POLICY_VERSION.to_le_bytes())?;
    for dim in [s.vocab, s.d_model, s.n_layers, s.n_heads, s.d_ff, s.context] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    write_f64s(&mut w, params.as_slice())?;
    w.flush()?;
    Ok(())
}

pub fn load_policy(path: &Path) -> Result<PolicyParams> {
    let file = File::open(path)
        .map_err(|e| Error::Checkpoint(format!("cannot open {}: {e}", path.display())))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != POLICY_MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a policy checkpoint", path.display())));
    }
    let version = read_u32(&mut r).map_err(truncated)?;
    if version != POLICY_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported policy checkpoint version {version} (expected {POLICY_VERSION})"
        )));
    }
    let mut dims = [0usize; 6];
    for d in dims.iter_mut() {
        *d = read_u32(&mut r).map_err(truncated)? as usize;
    }
    let shape = ModelShape {
        vocab: dims[0],
        d_model: dims[1],
        n_layers: dims[2],
        n_heads: dims[3],
        d_ff: dims[4],
        context: dims[5],
    };
    shape.validate()?;
    let count = read_u64(&mut r).map_err(truncated)? as usize;
    if count != shape.param_count() {
        return Err(Error::Checkpoint(format!(
            "parameter count {count} does not match shape ({})",
            shape.param_count()
        )));
    }
    let data = read_f64s(&mut r, count).map_err(truncated)?;
    PolicyParams::from_vec(shape, data)
}
