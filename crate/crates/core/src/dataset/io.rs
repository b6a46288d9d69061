//! `.gcfg` and `.gemb` files: 4-byte magic, u32 version, u32 row width,
//! u64 row count, then `count × width` little-endian f32 values, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{ConfigDataset, EmbeddingStore};
use crate::env::{project, Configuration, CONFIG_DIM};
use crate::error::{Error, Result};

pub const CONFIG_MAGIC: [u8; 4] = *b"GCFG";
pub const EMBEDDING_MAGIC: [u8; 4] = *b"GEMB";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 20;

fn write_matrix<W: Write>(mut w: W, magic: [u8; 4], width: usize, values: impl Iterator<Item = f32>, rows: usize) -> Result<()> {
    w.write_all(&magic)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(width as u32).to_le_bytes())?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a whole file, checking header and payload length.
fn read_matrix<R: Read>(mut r: R, magic: [u8; 4]) -> Result<(usize, usize, Vec<f32>)> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < 4 {
        return Err(Error::TruncatedFile {
            expected: HEADER_LEN,
            found: buf.len() as u64,
        });
    }
    let found: [u8; 4] = buf[..4].try_into().expect("length checked");
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    if (buf.len() as u64) < HEADER_LEN {
        return Err(Error::TruncatedFile {
            expected: HEADER_LEN,
            found: buf.len() as u64,
        });
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("slice of 4"));
    if version != VERSION {
        return Err(Error::VersionUnsupported(version));
    }
    let width = u32::from_le_bytes(buf[8..12].try_into().expect("slice of 4")) as u64;
    let rows = u64::from_le_bytes(buf[12..20].try_into().expect("slice of 8"));
    let expected = rows
        .checked_mul(width)
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::CountMismatch("header count overflows".into()))?;
    let found = buf.len() as u64;
    if found < expected {
        return Err(Error::TruncatedFile { expected, found });
    }
    if found > expected {
        return Err(Error::CountMismatch(format!(
            "{} trailing bytes after {rows} rows",
            found - expected
        )));
    }
    let values = buf[HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((width as usize, rows as usize, values))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.display().to_string()));
    }
    Ok(BufReader::new(File::open(path)?))
}

pub fn save_configs(path: &Path, configs: &[Configuration]) -> Result<()> {
    let values = configs.iter().flat_map(|q| q.to_array()).map(|v| v as f32);
    write_matrix(BufWriter::new(File::create(path)?), CONFIG_MAGIC, CONFIG_DIM, values, configs.len())
}

/// Loads a configuration file. Rows are re-projected, which only moves
/// values that single-precision rounding pushed off a constraint boundary.
pub fn load_configs(path: &Path) -> Result<ConfigDataset> {
    let (width, rows, values) = read_matrix(open(path)?, CONFIG_MAGIC)?;
    if width != CONFIG_DIM {
        return Err(Error::DimensionMismatch {
            expected: CONFIG_DIM,
            got: width,
        });
    }
    let configs = values
        .chunks_exact(CONFIG_DIM)
        .map(|c| project(&c.iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(configs.len(), rows);
    Ok(ConfigDataset {
        configs,
        provenance: None,
        seed: None,
    })
}

pub fn save_embeddings(path: &Path, store: &EmbeddingStore) -> Result<()> {
    let m = store.matrix();
    write_matrix(
        BufWriter::new(File::create(path)?),
        EMBEDDING_MAGIC,
        store.dim(),
        m.iter().copied(),
        store.rows(),
    )
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let (width, rows, values) = read_matrix(open(path)?, EMBEDDING_MAGIC)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    Ok(EmbeddingStore::new(
        Array2::from_shape_vec((rows, width), values).expect("length checked"),
    ))
}
