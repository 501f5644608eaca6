//! SGRM binary spectrogram files.
//!
//! Layout: magic `SGRM`, version (u32 LE), rows (u32 LE), cols (u32 LE),
//! then `rows * cols` little-endian 32-bit floats in row-major order, then
//! an optional single trailing class-label byte. A 128 x 128 file with a
//! label is exactly 16 + 65536 * 4 + 1 bytes.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Grid;

pub const MAGIC: [u8; 4] = *b"SGRM";
pub const VERSION: u32 = 1;

/// Serialize a 2-D grid with an optional label byte.
pub fn write_spectrogram<W: Write>(mut w: W, grid: &Grid, label: Option<u8>) -> Result<()> {
    let shape = grid.shape();
    if shape.len() != 2 {
        return Err(Error::Sgrm(format!(
            "spectrogram must be 2-D, got shape {shape:?}"
        )));
    }
    let io_err = |e: std::io::Error| Error::Sgrm(format!("write failed: {e}"));
    w.write_all(&MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(shape[0] as u32).to_le_bytes()).map_err(io_err)?;
    w.write_all(&(shape[1] as u32).to_le_bytes()).map_err(io_err)?;
    for v in grid.data() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    if let Some(label) = label {
        w.write_all(&[label]).map_err(io_err)?;
    }
    Ok(())
}

/// Deserialize a spectrogram and its optional label byte.
pub fn read_spectrogram<R: Read>(mut r: R) -> Result<(Grid, Option<u8>)> {
    let mut header = [0u8; 16];
    let mut filled = 0usize;
    while filled < header.len() {
        match r.read(&mut header[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) => return Err(Error::Sgrm(format!("read failed: {e}"))),
        }
    }
    if filled < 4 {
        return Err(Error::SgrmMagic {
            found: [
                *header.first().unwrap_or(&0),
                *header.get(1).unwrap_or(&0),
                *header.get(2).unwrap_or(&0),
                *header.get(3).unwrap_or(&0),
            ],
        });
    }
    if header[..4] != MAGIC {
        return Err(Error::SgrmMagic {
            found: header[..4].try_into().unwrap(),
        });
    }
    if filled < 16 {
        return Err(Error::SgrmTruncated {
            expected: 16,
            found: filled,
        });
    }
    let version = u32::from_le_bytes(header[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Sgrm(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let rows = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::Sgrm(format!("degenerate shape {rows}x{cols}")));
    }
    let payload_len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Sgrm(format!("shape {rows}x{cols} overflows")))?;

    let mut rest = Vec::new();
    r.read_to_end(&mut rest)
        .map_err(|e| Error::Sgrm(format!("read failed: {e}")))?;
    if rest.len() < payload_len {
        return Err(Error::SgrmTruncated {
            expected: payload_len,
            found: rest.len(),
        });
    }
    let label = match rest.len() - payload_len {
        0 => None,
        1 => Some(rest[payload_len]),
        extra => {
            return Err(Error::Sgrm(format!(
                "{extra} trailing bytes after the optional label"
            )))
        }
    };
    let data: Vec<f32> = rest[..payload_len]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let grid = Grid::new(vec![rows, cols], data).map_err(|e| Error::Sgrm(e.to_string()))?;
    Ok((grid, label))
}

pub fn save_spectrogram(path: impl AsRef<Path>, grid: &Grid, label: Option<u8>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    write_spectrogram(std::io::BufWriter::new(file), grid, label)
}

pub fn load_spectrogram(path: impl AsRef<Path>) -> Result<(Grid, Option<u8>)> {
    let file = std::fs::File::open(path.as_ref()).map_err(|e| Error::io(path.as_ref(), e))?;
    read_spectrogram(std::io::BufReader::new(file))
}
