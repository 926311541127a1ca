use std::fs;
use std::io::Write;
use std::path::Path;

use super::image::{BubbleImage, HEIGHT, WIDTH};
use crate::error::Result;

/// Binary portable graymap (P5), 8-bit.
pub fn encode_pgm(levels: &[u8], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(levels);
    out
}

/// Writes one `NNNNNN.pgm` per image plus `manifest.csv`
/// (`file,label,provenance`).
pub fn export_pgm_dir(images: &[BubbleImage], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = csv::Writer::from_writer(Vec::new());
    manifest
        .write_record(["file", "label", "provenance"])
        .map_err(std::io::Error::other)?;
    for (i, img) in images.iter().enumerate() {
        let name = format!("{i:06}.pgm");
        fs::write(dir.join(&name), encode_pgm(&img.to_levels(), WIDTH, HEIGHT))?;
        manifest
            .write_record([name.as_str(), img.label.name(), img.provenance.name()])
            .map_err(std::io::Error::other)?;
    }
    let bytes = manifest.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
    fs::File::create(dir.join("manifest.csv"))?.write_all(&bytes)?;
    Ok(())
}
