use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ChannelConfig, PrintRaster, UPSAMPLE};
use crate::data::{encode_pgm, quantize};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Scanned 8-bit page.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanPage {
    pub width: usize,
    pub height: usize,
    pub levels: Vec<u8>,
}

impl ScanPage {
    pub fn to_pgm(&self) -> Vec<u8> {
        encode_pgm(&self.levels, self.width, self.height)
    }
}

/// Scans a print back to page resolution. Uses the random streams of page 0.
pub fn scan_simulate(raster: &PrintRaster, config: &ChannelConfig) -> Result<ScanPage> {
    config.validate()?;
    if !raster.width.is_multiple_of(UPSAMPLE) || !raster.height.is_multiple_of(UPSAMPLE) {
        return Err(Error::dim(
            "scan_simulate",
            format!(
                "{}x{} raster is not a multiple of {UPSAMPLE} in both axes",
                raster.width, raster.height
            ),
        ));
    }
    let (w, h) = (raster.width / UPSAMPLE, raster.height / UPSAMPLE);
    let mut sums = vec![0u32; w * h];
    for (y, row) in raster.levels.chunks_exact(raster.width).enumerate() {
        let out = &mut sums[(y / UPSAMPLE) * w..(y / UPSAMPLE + 1) * w];
        for (s, chunk) in out.iter_mut().zip(row.chunks_exact(UPSAMPLE)) {
            *s += chunk.iter().map(|&v| u32::from(v)).sum::<u32>();
        }
    }
    Ok(finish_scan(sums, w, h, config, derive_seed(config.seed, &[0])))
}

/// Box-filter average, sensor noise, registration shift, quantization.
pub(super) fn finish_scan(
    sums: Vec<u32>,
    width: usize,
    height: usize,
    config: &ChannelConfig,
    page_seed: u64,
) -> ScanPage {
    let denom = f64::from((UPSAMPLE * UPSAMPLE) as u32 * 255);
    let mut gray: Vec<f64> = sums.iter().map(|&s| f64::from(s) / denom).collect();
    if config.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(page_seed, &[1]));
        let normal = Normal::new(0.0, config.noise_sigma).expect("sigma validated");
        for v in &mut gray {
            *v += normal.sample(&mut rng);
        }
    }
    if config.jitter_px > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(page_seed, &[2]));
        let j = config.jitter_px;
        let dx = rng.random_range(-j..=j);
        let dy = rng.random_range(-j..=j);
        gray = shift_bilinear(&gray, width, height, dx, dy);
    }
    ScanPage {
        width,
        height,
        levels: gray.iter().map(|&v| quantize(v)).collect(),
    }
}

/// Resamples so that output `(y, x)` reads the input at `(y + dy, x + dx)`,
/// clamping at the borders.
pub(crate) fn shift_bilinear(src: &[f64], width: usize, height: usize, dx: f64, dy: f64) -> Vec<f64> {
    let axis = |n: usize, d: f64| -> Vec<(usize, usize, f64)> {
        (0..n)
            .map(|i| {
                let p = (i as f64 + d).clamp(0.0, (n - 1) as f64);
                let i0 = p.floor() as usize;
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, p - i0 as f64)
            })
            .collect()
    };
    let xs = axis(width, dx);
    let ys = axis(height, dy);
    let mut out = vec![0.0; width * height];
    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
        let (r0, r1) = (&src[y0 * width..(y0 + 1) * width], &src[y1 * width..(y1 + 1) * width]);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
            let bottom = r1[x0] * (1.0 - fx) + r1[x1] * fx;
            out[y * width + x] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}
