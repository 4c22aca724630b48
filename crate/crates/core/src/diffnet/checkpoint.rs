//! Checkpoint layout:
//!
//! ```text
//! MQVAE-CHECKPOINT 1\n
//! <one line of JSON describing the model>\n
//! u64 little-endian scalar count
//! count x f64 little-endian, parameters in declaration order
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::params::ParamSet;
use crate::error::{Error, Result};

const MAGIC: &str = "MQVAE-CHECKPOINT 1";

pub fn encode<H: Serialize>(header: &H, params: &ParamSet) -> Result<Vec<u8>> {
    let json = serde_json::to_string(header).map_err(|e| Error::Format(e.to_string()))?;
    let flat = params.flatten();
    let mut out = Vec::with_capacity(MAGIC.len() + json.len() + 10 + 8 * flat.len());
    out.extend_from_slice(MAGIC.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(json.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode<H: DeserializeOwned>(bytes: &[u8]) -> Result<(H, Vec<f64>)> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    line.clear();
    reader.read_line(&mut line)?;
    let header: H = serde_json::from_str(line.trim_end()).map_err(|e| Error::Format(e.to_string()))?;
    let mut buf = [0u8; 8];
    reader.read_exact(&mut buf)?;
    let count = u64::from_le_bytes(buf) as usize;
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        reader.read_exact(&mut buf).map_err(|_| Error::Format("truncated parameter block".into()))?;
        values.push(f64::from_le_bytes(buf));
    }
    if reader.read(&mut buf)? != 0 {
        return Err(Error::Format("trailing bytes after parameter block".into()));
    }
    Ok((header, values))
}

pub fn write<H: Serialize>(path: &Path, header: &H, params: &ParamSet) -> Result<()> {
    let bytes = encode(header, params)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read<H: DeserializeOwned>(path: &Path) -> Result<(H, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    decode(&bytes)
}

/// Loads `values` into `params`, checking the scalar count.
pub fn restore(params: &mut ParamSet, values: &[f64]) -> Result<()> {
    if values.len() != params.scalar_count() {
        return Err(Error::Format(format!(
            "checkpoint holds {} scalars but the model declares {}",
            values.len(),
            params.scalar_count()
        )));
    }
    params.assign_flat(values);
    Ok(())
}
