use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ChannelConfig, PageCanvas, PAGE_HEIGHT, PAGE_WIDTH, UPSAMPLE};
use crate::data::quantize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Dither {
    /// Continuous-tone output (no halftone).
    None,
    /// 8x8 Bayer threshold matrix.
    OrderedBayer8,
    /// Serpentine Floyd-Steinberg error diffusion.
    ErrorDiffusion,
}

const RASTER_WIDTH: usize = PAGE_WIDTH * UPSAMPLE;
const RASTER_HEIGHT: usize = PAGE_HEIGHT * UPSAMPLE;

fn bayer8() -> [[u8; 8]; 8] {
    let mut m = [[0u8; 8]; 8];
    for (y, row) in m.iter_mut().enumerate() {
        for (x, v) in row.iter_mut().enumerate() {
            // bit-interleave of x ^ y and y, most significant pair first
            let (a, b) = (x ^ y, y);
            let mut r = 0;
            for bit in (0..3).rev() {
                r = (r << 2) | (((a >> bit) & 1) << 1) | ((b >> bit) & 1);
            }
            *v = r as u8;
        }
    }
    m
}

/// Printed gray of a page level: intensities shrink toward black by the
/// dot-gain factor.
pub(super) fn gained(level: u8, dot_gain: f64) -> f64 {
    f64::from(level) / 255.0 * (1.0 - dot_gain)
}

/// Produces 1200 dpi rows from 200 dpi page rows.
pub(super) struct Printer {
    dither: Dither,
    dot_gain: f64,
    bayer: [[u8; 8]; 8],
    err: Vec<f64>,
    err_next: Vec<f64>,
}

impl Printer {
    pub fn new(config: &ChannelConfig) -> Self {
        let ed = config.dither == Dither::ErrorDiffusion;
        Self {
            dither: config.dither,
            dot_gain: config.dot_gain,
            bayer: bayer8(),
            err: if ed { vec![0.0; RASTER_WIDTH + 2] } else { Vec::new() },
            err_next: if ed { vec![0.0; RASTER_WIDTH + 2] } else { Vec::new() },
        }
    }

    /// Raster row `y` (0 black, 255 white) of the page row `page_row`.
    pub fn row(&mut self, page_row: &[u8], y: usize, out: &mut [u8]) {
        let gray = |x: usize| gained(page_row[x / UPSAMPLE], self.dot_gain);
        match self.dither {
            Dither::None => {
                for (x, o) in out.iter_mut().enumerate() {
                    let level = page_row[x / UPSAMPLE];
                    *o = if self.dot_gain == 0.0 { level } else { quantize(gray(x)) };
                }
            }
            Dither::OrderedBayer8 => {
                let row = &self.bayer[y % 8];
                for (x, o) in out.iter_mut().enumerate() {
                    let t = (f64::from(row[x % 8]) + 0.5) / 64.0;
                    *o = if gray(x) >= t { 255 } else { 0 };
                }
            }
            Dither::ErrorDiffusion => {
                let grays: Vec<f64> = (0..RASTER_WIDTH).map(gray).collect();
                self.err_next.iter_mut().for_each(|e| *e = 0.0);
                let forward = y.is_multiple_of(2);
                for i in 0..RASTER_WIDTH {
                    let x = if forward { i } else { RASTER_WIDTH - 1 - i };
                    // error buffers are offset by one so x - 1 never underflows
                    let v = grays[x] + self.err[x + 1];
                    let white = v >= 0.5;
                    out[x] = if white { 255 } else { 0 };
                    let e = v - if white { 1.0 } else { 0.0 };
                    let (ahead, behind) = if forward { (x + 2, x) } else { (x, x + 2) };
                    if (1..=RASTER_WIDTH).contains(&ahead) {
                        self.err[ahead] += e * 7.0 / 16.0;
                        self.err_next[ahead] += e / 16.0;
                    }
                    if (1..=RASTER_WIDTH).contains(&behind) {
                        self.err_next[behind] += e * 3.0 / 16.0;
                    }
                    self.err_next[x + 1] += e * 5.0 / 16.0;
                }
                std::mem::swap(&mut self.err, &mut self.err_next);
            }
        }
    }
}

/// Sums of each 6x6 printer block, one per page pixel, without keeping the
/// full 1200 dpi raster.
pub(super) fn print_box_sums(canvas: &PageCanvas, config: &ChannelConfig) -> Vec<u32> {
    let block = |printer: &mut Printer, py: usize, sums: &mut [u32], buf: &mut [u8]| {
        let page_row = &canvas.levels[py * PAGE_WIDTH..(py + 1) * PAGE_WIDTH];
        for k in 0..UPSAMPLE {
            printer.row(page_row, py * UPSAMPLE + k, buf);
            for (s, chunk) in sums.iter_mut().zip(buf.chunks_exact(UPSAMPLE)) {
                *s += chunk.iter().map(|&v| u32::from(v)).sum::<u32>();
            }
        }
    };
    let mut sums = vec![0u32; PAGE_WIDTH * PAGE_HEIGHT];
    if config.dither == Dither::ErrorDiffusion {
        let mut printer = Printer::new(config);
        let mut buf = vec![0u8; RASTER_WIDTH];
        for (py, row) in sums.chunks_exact_mut(PAGE_WIDTH).enumerate() {
            block(&mut printer, py, row, &mut buf);
        }
    } else {
        sums.par_chunks_exact_mut(PAGE_WIDTH)
            .enumerate()
            .for_each_init(
                || (Printer::new(config), vec![0u8; RASTER_WIDTH]),
                |(printer, buf), (py, row)| block(printer, py, row, buf),
            );
    }
    sums
}

/// The full 1200 dpi print, row-major, 0 = ink and 255 = paper.
#[derive(Clone, Debug, PartialEq)]
pub struct PrintRaster {
    pub width: usize,
    pub height: usize,
    pub levels: Vec<u8>,
}

impl PrintRaster {
    /// Binary portable bitmap (P4); levels below 128 count as ink.
    pub fn to_pbm(&self) -> Vec<u8> {
        let mut out = format!("P4\n{} {}\n", self.width, self.height).into_bytes();
        for row in self.levels.chunks_exact(self.width) {
            for byte in row.chunks(8) {
                let mut b = 0u8;
                for (i, &v) in byte.iter().enumerate() {
                    if v < 128 {
                        b |= 0x80 >> i;
                    }
                }
                out.push(b);
            }
        }
        out
    }

    /// Fraction of ink pixels in a window.
    pub fn ink_density(&self, top: usize, left: usize, height: usize, width: usize) -> f64 {
        let mut ink = 0usize;
        for y in top..top + height {
            ink += self.levels[y * self.width + left..y * self.width + left + width]
                .iter()
                .filter(|&&v| v < 128)
                .count();
        }
        ink as f64 / (height * width) as f64
    }
}

/// Prints a page at six times its resolution.
pub fn print_simulate(canvas: &PageCanvas, config: &ChannelConfig) -> PrintRaster {
    let mut printer = Printer::new(config);
    let mut levels = vec![0u8; RASTER_WIDTH * RASTER_HEIGHT];
    for (y, out) in levels.chunks_exact_mut(RASTER_WIDTH).enumerate() {
        let py = y / UPSAMPLE;
        printer.row(&canvas.levels[py * PAGE_WIDTH..(py + 1) * PAGE_WIDTH], y, out);
    }
    PrintRaster {
        width: RASTER_WIDTH,
        height: RASTER_HEIGHT,
        levels,
    }
}
