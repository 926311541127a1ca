//! Simulated print-scan channel.
//!
//! Bubbles are laid out on a 200 dpi letter page, printed at 1200 dpi
//! through a halftone, scanned back at 200 dpi with sensor noise and a
//! sub-pixel registration offset, and cut out again.

mod print;
mod scan;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{encode_pgm, BubbleImage, Label, Provenance, HEIGHT, WIDTH};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::training::DenoisePair;

pub use print::{print_simulate, Dither, PrintRaster};
pub use scan::{scan_simulate, ScanPage};

/// Page raster at 200 dpi: 8.5 x 11 inches.
pub const PAGE_WIDTH: usize = 1700;
pub const PAGE_HEIGHT: usize = 2200;
/// Printer resolution over page resolution (1200 / 200 dpi).
pub const UPSAMPLE: usize = 6;
/// Gap between neighbouring bubbles: half an inch.
pub const SPACING: usize = 100;
pub const GRID_COLS: usize = 11;
pub const GRID_ROWS: usize = 14;
pub const PAGE_CAPACITY: usize = GRID_COLS * GRID_ROWS;

const MARGIN_LEFT: usize = (PAGE_WIDTH - (GRID_COLS * (WIDTH + SPACING) - SPACING)) / 2;
const MARGIN_TOP: usize = (PAGE_HEIGHT - (GRID_ROWS * (HEIGHT + SPACING) - SPACING)) / 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelConfig {
    pub dither: Dither,
    /// Darkening: intensity `g` prints as `g (1 - dot_gain)`.
    pub dot_gain: f64,
    /// Standard deviation of the additive scanner noise, in [0, 1] units.
    pub noise_sigma: f64,
    /// Largest registration offset per axis, in page pixels.
    pub jitter_px: f64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            dither: Dither::OrderedBayer8,
            dot_gain: 0.15,
            noise_sigma: 0.03,
            jitter_px: 0.5,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    /// No halftone, gain, noise or jitter.
    pub fn identity() -> Self {
        Self {
            dither: Dither::None,
            dot_gain: 0.0,
            noise_sigma: 0.0,
            jitter_px: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("dot_gain", self.dot_gain),
            ("noise_sigma", self.noise_sigma),
            ("jitter_px", self.jitter_px),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Validation(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.dot_gain > 1.0 {
            return Err(Error::Validation(format!("dot_gain {} exceeds 1", self.dot_gain)));
        }
        if self.jitter_px >= 1.0 {
            return Err(Error::Validation(format!(
                "jitter_px {} must stay below one pixel",
                self.jitter_px
            )));
        }
        Ok(())
    }
}

/// Where one bubble sits on the page.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub id: usize,
    pub label: Label,
    pub top: usize,
    pub left: usize,
}

impl Placement {
    /// `(top, left, height, width)`.
    pub fn rect(&self) -> (usize, usize, usize, usize) {
        (self.top, self.left, HEIGHT, WIDTH)
    }
}

/// 8-bit page raster (255 = white paper) with its placement manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct PageCanvas {
    pub levels: Vec<u8>,
    pub manifest: Vec<Placement>,
}

impl PageCanvas {
    pub fn blank() -> Self {
        Self {
            levels: vec![255; PAGE_WIDTH * PAGE_HEIGHT],
            manifest: Vec::new(),
        }
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(&self.levels, PAGE_WIDTH, PAGE_HEIGHT)
    }

    pub fn manifest_json(&self) -> String {
        serde_json::to_string_pretty(&self.manifest).expect("manifest serializes")
    }
}

/// Grid position of the `i`-th bubble, row-major from the top left.
pub fn grid_position(i: usize) -> (usize, usize) {
    let (r, c) = (i / GRID_COLS, i % GRID_COLS);
    (
        MARGIN_TOP + r * (HEIGHT + SPACING),
        MARGIN_LEFT + c * (WIDTH + SPACING),
    )
}

/// Places up to one page of bubbles on the grid. Ids are positions in the
/// input.
pub fn layout_page(bubbles: &[BubbleImage]) -> Result<PageCanvas> {
    if bubbles.len() > PAGE_CAPACITY {
        return Err(Error::Capacity {
            requested: bubbles.len(),
            max: PAGE_CAPACITY,
        });
    }
    let mut page = PageCanvas::blank();
    for (id, b) in bubbles.iter().enumerate() {
        let (top, left) = grid_position(id);
        let levels = b.to_levels();
        for r in 0..HEIGHT {
            let dst = (top + r) * PAGE_WIDTH + left;
            page.levels[dst..dst + WIDTH].copy_from_slice(&levels[r * WIDTH..(r + 1) * WIDTH]);
        }
        page.manifest.push(Placement {
            id,
            label: b.label,
            top,
            left,
        });
    }
    Ok(page)
}

/// Cuts the manifest's rectangles out of a scanned page, in manifest order.
pub fn segment(page: &ScanPage, manifest: &[Placement]) -> Result<Vec<BubbleImage>> {
    manifest
        .iter()
        .map(|p| {
            if p.top + HEIGHT > page.height || p.left + WIDTH > page.width {
                return Err(Error::OutOfBounds {
                    rect: p.rect(),
                    width: page.width,
                    height: page.height,
                });
            }
            let mut levels = Vec::with_capacity(HEIGHT * WIDTH);
            for r in 0..HEIGHT {
                let src = (p.top + r) * page.width + p.left;
                levels.extend_from_slice(&page.levels[src..src + WIDTH]);
            }
            BubbleImage::from_levels(&levels, p.label, Provenance::PostChannel)
        })
        .collect()
}

/// Print and scan one laid-out page. `page_index` selects the page's own
/// random streams.
pub fn print_scan_page(canvas: &PageCanvas, config: &ChannelConfig, page_index: u64) -> Result<ScanPage> {
    config.validate()?;
    let sums = print::print_box_sums(canvas, config);
    Ok(scan::finish_scan(
        sums,
        PAGE_WIDTH,
        PAGE_HEIGHT,
        config,
        derive_seed(config.seed, &[page_index]),
    ))
}

/// Layout, print, scan and segmentation of any number of bubbles, one
/// page per 154. Output order matches input order.
pub fn channel_roundtrip(bubbles: &[BubbleImage], config: &ChannelConfig) -> Result<Vec<BubbleImage>> {
    config.validate()?;
    let pages: Result<Vec<Vec<BubbleImage>>> = bubbles
        .par_chunks(PAGE_CAPACITY)
        .enumerate()
        .map(|(i, chunk)| {
            let canvas = layout_page(chunk)?;
            let scanned = print_scan_page(&canvas, config, i as u64)?;
            segment(&scanned, &canvas.manifest)
        })
        .collect();
    Ok(pages?.into_iter().flatten().collect())
}

/// Denoiser training pairs: every clean bubble once through the channel
/// (degraded input, clean target) and once as an identity pair.
pub fn denoiser_pairs(clean: &[BubbleImage], config: &ChannelConfig) -> Result<Vec<DenoisePair>> {
    let degraded = channel_roundtrip(clean, config)?;
    let mut pairs: Vec<DenoisePair> = degraded
        .into_iter()
        .zip(clean)
        .map(|(input, target)| DenoisePair {
            input,
            target: target.clone(),
        })
        .collect();
    pairs.extend(clean.iter().map(|t| DenoisePair {
        input: t.clone(),
        target: t.clone(),
    }));
    Ok(pairs)
}
