//! On-disk containers.
//!
//! * `RCB1` cube: magic, u32 `n_channels`, `n_pulses`, `n_fast`, then
//!   interleaved f32 `(re, im)` in `[channel][pulse][fast]` order.
//! * `DTM1` map: magic, u32 `rows`, `cols`, f64 Doppler spacing (Hz/row),
//!   f64 frame spacing (s/column), then f32 values row-major.
//! * Binary PGM (`P5`) previews, min-max scaled to 8 bits.
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::pipeline::Dtm;
use crate::scalar::Scalar;
use crate::sim::{RadarCube, RadarParams};

const CUBE_MAGIC: &[u8; 4] = b"RCB1";
const DTM_MAGIC: &[u8; 4] = b"DTM1";

fn read_u32(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b) as usize)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Format(format!("{what} = {v} exceeds u32")))
}

fn read_f32s(r: &mut impl Read, n: usize) -> Result<Vec<f32>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes after payload".into()));
    }
    Ok(buf
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect())
}

fn check_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    Ok(())
}

pub fn write_cube<S: Scalar>(cube: &RadarCube<S>, w: &mut impl Write) -> Result<()> {
    let (c, p, f) = cube.dims();
    w.write_all(CUBE_MAGIC)?;
    w.write_all(&u32_of(c, "n_channels")?)?;
    w.write_all(&u32_of(p, "n_pulses")?)?;
    w.write_all(&u32_of(f, "n_fast")?)?;
    let mut buf = Vec::with_capacity(cube.data.len() * 8);
    for z in &cube.data {
        buf.extend_from_slice(&(z.re.as_f64() as f32).to_le_bytes());
        buf.extend_from_slice(&(z.im.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads a cube; the dimensions come from the file and every other radar
/// constant from `template`.
pub fn read_cube<S: Scalar>(r: &mut impl Read, template: &RadarParams) -> Result<RadarCube<S>> {
    check_magic(r, CUBE_MAGIC)?;
    let (c, p, f) = (read_u32(r)?, read_u32(r)?, read_u32(r)?);
    let params = RadarParams { n_channels: c, n_pulses: p, n_fast: f, ..template.clone() };
    params.validate()?;
    let n = params.sample_count();
    let raw = read_f32s(r, 2 * n)?;
    let mut cube = RadarCube::zeros(params);
    for (z, pair) in cube.data.iter_mut().zip(raw.chunks_exact(2)) {
        *z = Complex::new(S::of(pair[0] as f64), S::of(pair[1] as f64));
    }
    cube.validate()?;
    Ok(cube)
}

pub fn write_dtm<S: Scalar>(dtm: &Dtm<S>, w: &mut impl Write) -> Result<()> {
    w.write_all(DTM_MAGIC)?;
    w.write_all(&u32_of(dtm.rows, "rows")?)?;
    w.write_all(&u32_of(dtm.cols, "cols")?)?;
    w.write_all(&dtm.doppler_hz_per_bin.to_le_bytes())?;
    w.write_all(&dtm.sec_per_frame.to_le_bytes())?;
    let mut buf = Vec::with_capacity(dtm.data.len() * 4);
    for v in &dtm.data {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_dtm<S: Scalar>(r: &mut impl Read) -> Result<Dtm<S>> {
    check_magic(r, DTM_MAGIC)?;
    let (rows, cols) = (read_u32(r)?, read_u32(r)?);
    let (hz, sec) = (read_f64(r)?, read_f64(r)?);
    let data = read_f32s(r, rows * cols)?;
    let dtm = Dtm::new(rows, cols, data.into_iter().map(|v| S::of(v as f64)).collect(), hz, sec)?;
    if !dtm.is_finite() {
        return Err(Error::Format("DTM contains non-finite values".into()));
    }
    Ok(dtm)
}

/// Min-max scales to `0..=255`; a constant map becomes all zeros.
pub fn to_gray<S: Scalar>(dtm: &Dtm<S>) -> Vec<u8> {
    let (lo, hi) = dtm.min_max();
    let (lo, span) = (lo.as_f64(), (hi - lo).as_f64());
    dtm.data
        .iter()
        .map(|v| {
            if span > 0.0 {
                ((v.as_f64() - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

pub fn write_pgm(pixels: &[u8], rows: usize, cols: usize, w: &mut impl Write) -> Result<()> {
    if pixels.len() != rows * cols {
        return Err(Error::Data(format!("{} pixels for a {rows}x{cols} image", pixels.len())));
    }
    write!(w, "P5\n{cols} {rows}\n255\n")?;
    w.write_all(pixels)?;
    Ok(())
}

/// Reads a binary 8-bit PGM, returning `(pixels, rows, cols)`.
pub fn read_pgm(r: &mut impl Read) -> Result<(Vec<u8>, usize, usize)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM field {s:?}")));
    if fields[0] != "P5" || num(&fields[3])? != 255 {
        return Err(Error::Format("only 8-bit P5 images are supported".into()));
    }
    let (cols, rows) = (num(&fields[1])?, num(&fields[2])?);
    let data = bytes.get(pos + 1..).unwrap_or_default();
    if data.len() != rows * cols {
        return Err(Error::Format(format!("PGM payload of {} bytes for {rows}x{cols}", data.len())));
    }
    Ok((data.to_vec(), rows, cols))
}

pub fn save_cube<S: Scalar>(cube: &RadarCube<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_cube(cube, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_cube<S: Scalar>(path: &Path, template: &RadarParams) -> Result<RadarCube<S>> {
    read_cube(&mut BufReader::new(File::open(path)?), template)
}

pub fn save_dtm<S: Scalar>(dtm: &Dtm<S>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_dtm(dtm, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_dtm<S: Scalar>(path: &Path) -> Result<Dtm<S>> {
    read_dtm(&mut BufReader::new(File::open(path)?))
}

pub fn save_pgm(pixels: &[u8], rows: usize, cols: usize, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pgm(pixels, rows, cols, &mut w)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_round_trip() {
        let params = RadarParams { n_pulses: 3, n_fast: 4, n_channels: 2, ..RadarParams::default() };
        let mut cube = RadarCube::<f32>::zeros(params.clone());
        for (i, z) in cube.data.iter_mut().enumerate() {
            *z = Complex::new(i as f32, -(i as f32) * 0.5);
        }
        let mut buf = Vec::new();
        write_cube(&cube, &mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 24 * 8);
        assert_eq!(&buf[4..8], &2u32.to_le_bytes());
        let back: RadarCube<f32> = read_cube(&mut buf.as_slice(), &RadarParams::default()).unwrap();
        assert_eq!(back.data, cube.data);
        assert_eq!(back.params, params);
    }

    #[test]
    fn dtm_round_trip_and_truncation() {
        let dtm = Dtm::new(2, 3, vec![0.0f64, 1.0, 2.0, 3.0, 4.0, 5.5], 31.25, 0.004).unwrap();
        let mut buf = Vec::new();
        write_dtm(&dtm, &mut buf).unwrap();
        let back: Dtm<f64> = read_dtm(&mut buf.as_slice()).unwrap();
        assert_eq!(back, dtm);
        buf.pop();
        assert!(read_dtm::<f64>(&mut buf.as_slice()).is_err());
        buf[0] = b'R';
        assert!(matches!(read_dtm::<f64>(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_round_trip() {
        let dtm = Dtm::new(2, 2, vec![1.0f32, 2.0, 3.0, 5.0], 1.0, 1.0).unwrap();
        let px = to_gray(&dtm);
        assert_eq!(px, vec![0, 64, 128, 255]);
        let mut buf = Vec::new();
        write_pgm(&px, 2, 2, &mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(read_pgm(&mut buf.as_slice()).unwrap(), (px, 2, 2));
    }
}
