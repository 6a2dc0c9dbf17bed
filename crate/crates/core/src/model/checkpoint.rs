//! `HMD1` checkpoints.
//!
//! Layout, little-endian: magic `HMD1`; u32 length and JSON bytes of the
//! model configuration and seed; u32 parameter count; then per parameter a
//! u32-length-prefixed UTF-8 name, u32 rank, u32 dims and f32 values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{build_model, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"HMD1";

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    seed: u64,
}

fn put_u32(w: &mut impl Write, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

pub fn write_checkpoint<S: Scalar>(model: &Model<S>, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    let header = serde_json::to_vec(&Header { config: model.config.clone(), seed: model.seed })?;
    put_u32(w, header.len())?;
    w.write_all(&header)?;
    put_u32(w, model.params().len())?;
    for p in model.params() {
        put_u32(w, p.name.len())?;
        w.write_all(p.name.as_bytes())?;
        put_u32(w, p.value.shape.len())?;
        for &d in &p.value.shape {
            put_u32(w, d)?;
        }
        let mut buf = Vec::with_capacity(p.value.len() * 4);
        for v in &p.value.data {
            buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

/// Reads a checkpoint, rebuilding the architecture from its configuration and
/// checking every parameter name and shape against it.
pub fn read_checkpoint<S: Scalar>(r: &mut impl Read) -> Result<Model<S>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not an HMD1 checkpoint".into()));
    }
    let len = get_u32(r)?;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut model = build_model::<S>(&header.config, header.seed)?;
    let count = get_u32(r)?;
    if count != model.params().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, architecture needs {}",
            model.params().len()
        )));
    }
    for p in model.params_mut() {
        let n = get_u32(r)?;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(e.to_string()))?;
        let rank = get_u32(r)?;
        let shape = (0..rank).map(|_| get_u32(r)).collect::<Result<Vec<_>>>()?;
        if name != p.name || shape != p.value.shape {
            return Err(Error::Format(format!(
                "tensor {name} {shape:?} does not match {} {:?}",
                p.name, p.value.shape
            )));
        }
        let mut buf = vec![0u8; p.value.len() * 4];
        r.read_exact(&mut buf)?;
        for (v, b) in p.value.data.iter_mut().zip(buf.chunks_exact(4)) {
            *v = S::of(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        }
    }
    if !model.is_finite() {
        return Err(Error::Format("checkpoint contains non-finite parameters".into()));
    }
    Ok(model)
}

pub fn save<S: Scalar>(model: &Model<S>, path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Model<S>> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_for_f32() {
        let cfg = ModelConfig { input_size: (32, 32), ..ModelConfig::toy() };
        let m: Model<f32> = build_model(&cfg, 9).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"HMD1");
        let back: Model<f32> = read_checkpoint(&mut buf.as_slice()).unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.value, b.value);
        }
        buf[0] = b'X';
        assert!(matches!(read_checkpoint::<f32>(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
