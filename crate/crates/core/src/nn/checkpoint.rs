//! GPOL tensor files: `"GPOL"`, u32 version, u32 tensor count, then
//! `(u32 rows, u32 cols)` per tensor, then every tensor's entries as
//! little-endian f32 in declaration order, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GPOL";
const VERSION: u32 = 1;

pub fn write_tensors_to<W: Write>(mut w: W, tensors: &[&Array2<f64>]) -> Result<()> {
    w.write_all(&CHECKPOINT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for t in tensors {
        w.write_all(&(t.nrows() as u32).to_le_bytes())?;
        w.write_all(&(t.ncols() as u32).to_le_bytes())?;
    }
    for t in tensors {
        for &x in t.iter() {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_tensors(path: &Path, tensors: &[&Array2<f64>]) -> Result<()> {
    write_tensors_to(BufWriter::new(File::create(path)?), tensors)
}

fn read_u32<R: Read>(r: &mut R, consumed: &mut u64, need: u64) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b, consumed, need)?;
    Ok(u32::from_le_bytes(b))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], consumed: &mut u64, need: u64) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..])? {
            0 => {
                return Err(Error::TruncatedFile {
                    expected: need.max(*consumed + buf.len() as u64),
                    found: *consumed + filled as u64,
                })
            }
            n => filled += n,
        }
    }
    *consumed += buf.len() as u64;
    Ok(())
}

pub fn read_tensors_from<R: Read>(mut r: R) -> Result<Vec<Array2<f64>>> {
    let mut consumed = 0u64;
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, &mut consumed, 12)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut r, &mut consumed, 12)?;
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let count = read_u32(&mut r, &mut consumed, 12)? as u64;
    let header_end = 12 + 8 * count;
    let mut shapes = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let rows = read_u32(&mut r, &mut consumed, header_end)? as usize;
        let cols = read_u32(&mut r, &mut consumed, header_end)? as usize;
        shapes.push((rows, cols));
    }
    let total: u64 = header_end + 4 * shapes.iter().map(|&(a, b)| (a * b) as u64).sum::<u64>();
    let mut out = Vec::with_capacity(shapes.len());
    for (rows, cols) in shapes {
        let mut buf = vec![0u8; rows * cols * 4];
        read_exact(&mut r, &mut buf, &mut consumed, total)?;
        let data = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push(Array2::from_shape_vec((rows, cols), data).expect("shape matches length"));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::CountMismatch(
            "trailing bytes after the last tensor".into(),
        ));
    }
    Ok(out)
}

pub fn read_tensors(path: &Path) -> Result<Vec<Array2<f64>>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    read_tensors_from(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn sample() -> Vec<Array2<f64>> {
        vec![array![[1.5, -2.0], [0.25, 3.0]], array![[7.0, 8.0, 9.0]]]
    }

    fn encode(t: &[Array2<f64>]) -> Vec<u8> {
        let mut buf = Vec::new();
        write_tensors_to(&mut buf, &t.iter().collect::<Vec<_>>()).unwrap();
        buf
    }

    #[test]
    fn round_trip_and_layout() {
        let t = sample();
        let buf = encode(&t);
        assert_eq!(&buf[..4], b"GPOL");
        assert_eq!(buf.len(), 12 + 16 + 4 * 7);
        assert_eq!(&buf[12..16], &2u32.to_le_bytes());
        assert_eq!(read_tensors_from(&buf[..]).unwrap(), t);
    }

    #[test]
    fn rejects_corruption() {
        let mut buf = encode(&sample());
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_tensors_from(short), Err(Error::TruncatedFile { .. })));
        buf[0] = b'X';
        assert!(matches!(read_tensors_from(&buf[..]), Err(Error::BadMagic { .. })));
        let mut v2 = encode(&sample());
        v2[4] = 2;
        assert!(matches!(read_tensors_from(&v2[..]), Err(Error::VersionUnsupported(2))));
    }
}
