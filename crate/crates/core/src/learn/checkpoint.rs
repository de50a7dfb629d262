//! `NPRM1` parameter files.
//!
//! Layout (little-endian): magic `NPRM1`, `u64` architecture hash, `u64`
//! parameter count, then the parameters as `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelSpec, NetParams};
use crate::error::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 5] = b"NPRM1";

pub fn write_params(params: &NetParams, spec: &ModelSpec, mut w: impl Write) -> Result<()> {
    w.write_all(PARAMS_MAGIC)?;
    w.write_all(&spec.hash().to_le_bytes())?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads parameters, refusing files written for a different architecture.
pub fn read_params(spec: &ModelSpec, expected_len: usize, mut r: impl Read) -> Result<NetParams> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::BadFile("truncated parameter header".into()))?;
    if &magic != PARAMS_MAGIC {
        return Err(Error::BadFile("missing NPRM1 magic".into()));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)
        .map_err(|_| Error::BadFile("truncated parameter header".into()))?;
    let hash = u64::from_le_bytes(word);
    if hash != spec.hash() {
        return Err(Error::BadFile(format!(
            "parameter file is for architecture {hash:016x}, expected {:016x}",
            spec.hash()
        )));
    }
    r.read_exact(&mut word)
        .map_err(|_| Error::BadFile("truncated parameter header".into()))?;
    let len = u64::from_le_bytes(word) as usize;
    if len != expected_len {
        return Err(Error::BadFile(format!("{len} parameters, model needs {expected_len}")));
    }
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() != 8 * len {
        return Err(Error::BadFile(format!(
            "payload is {} bytes, expected {}",
            bytes.len(),
            8 * len
        )));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::BadFile("non-finite parameter".into()));
    }
    Ok(NetParams::from_values(values))
}

pub fn save_params(params: &NetParams, spec: &ModelSpec, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(params, spec, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(spec: &ModelSpec, expected_len: usize, path: impl AsRef<Path>) -> Result<NetParams> {
    read_params(spec, expected_len, BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::Scale;

    #[test]
    fn round_trip_and_guards() {
        let spec = ModelSpec::with_channels(2, vec![2, 2], vec![2, 2]);
        let params = NetParams::from_values(vec![1.0, -0.5, 3.25]);
        let mut buf = Vec::new();
        write_params(&params, &spec, &mut buf).unwrap();
        assert_eq!(&buf[..5], b"NPRM1");
        assert_eq!(&buf[13..21], &3u64.to_le_bytes());
        assert_eq!(buf.len(), 21 + 24);
        assert_eq!(read_params(&spec, 3, &buf[..]).unwrap(), params);
        assert!(read_params(&spec, 4, &buf[..]).is_err());
        let other = ModelSpec::new(2, Scale::Desk);
        assert!(matches!(read_params(&other, 3, &buf[..]), Err(Error::BadFile(_))));
        assert!(read_params(&spec, 3, &buf[..buf.len() - 1]).is_err());
    }
}
