//! Dataset container format.
//!
//! ```text
//! "BBLD" | count u32 | 40 u16 | 50 u16
//!        | count x (label u8 | provenance u8 | 2000 x u8)
//! ```
//!
//! Pixel bytes are 8-bit levels in row-major order, 40 rows of 50 columns. Labels
//! use 0 = Mark, 1 = NonMark.

use std::fs;
use std::path::Path;

use super::image::{BubbleImage, Label, Provenance, HEIGHT, PIXELS, WIDTH};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"BBLD";
const HEADER_LEN: usize = 12;
const RECORD_LEN: usize = 2 + PIXELS;

pub fn encode_dataset(images: &[BubbleImage]) -> Result<Vec<u8>> {
    let count = u32::try_from(images.len())
        .map_err(|_| Error::Validation("dataset too large for the file format".into()))?;
    let mut buf = Vec::with_capacity(HEADER_LEN + images.len() * RECORD_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&(HEIGHT as u16).to_le_bytes());
    buf.extend_from_slice(&(WIDTH as u16).to_le_bytes());
    for img in images {
        buf.push(img.label.index() as u8);
        buf.push(img.provenance.code());
        buf.extend(img.to_levels());
    }
    Ok(buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<BubbleImage>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(bytes.len() as u64, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, not a dataset file"));
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let a = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
    let b = u16::from_le_bytes(bytes[10..12].try_into().unwrap());
    if (a as usize, b as usize) != (HEIGHT, WIDTH) {
        return Err(Error::format(8, format!("unsupported image extents {a} x {b}")));
    }
    let body = bytes.len() - HEADER_LEN;
    let complete = body / RECORD_LEN;
    if complete < count {
        let offset = HEADER_LEN + complete * RECORD_LEN;
        return Err(Error::format(
            offset as u64,
            format!("truncated: header announces {count} records, file holds {complete}"),
        ));
    }
    if body != count * RECORD_LEN {
        let offset = HEADER_LEN + count * RECORD_LEN;
        return Err(Error::format(
            offset as u64,
            format!("{} trailing bytes after {count} records", body - count * RECORD_LEN),
        ));
    }
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let at = HEADER_LEN + i * RECORD_LEN;
        let rec = &bytes[at..at + RECORD_LEN];
        let label = Label::from_index(rec[0] as usize)
            .map_err(|_| Error::format(at as u64, format!("bad label byte {}", rec[0])))?;
        let provenance = Provenance::from_code(rec[1])
            .ok_or_else(|| Error::format(at as u64 + 1, format!("bad provenance byte {}", rec[1])))?;
        out.push(BubbleImage::from_levels(&rec[2..], label, provenance)?);
    }
    Ok(out)
}

pub fn save_dataset(images: &[BubbleImage], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(images)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<BubbleImage>> {
    decode_dataset(&fs::read(path)?)
}
