//! Synthetic bubble and swatch generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::image::{BubbleImage, Label, Provenance, HEIGHT, PIXELS, WIDTH};
use crate::error::{Error, Result};

/// Rendering ranges for synthetic bubbles. Darkness is `1 - intensity`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BubbleStyle {
    pub radius_x: (f64, f64),
    pub radius_y: (f64, f64),
    pub center_jitter: f64,
    pub outline_thickness: (f64, f64),
    pub outline_darkness: (f64, f64),
    pub background_darkness: (f64, f64),
    pub fill_darkness: (f64, f64),
    pub noise: f64,
}

impl Default for BubbleStyle {
    fn default() -> Self {
        Self {
            radius_x: (18.0, 21.0),
            radius_y: (13.0, 16.0),
            center_jitter: 2.0,
            outline_thickness: (2.0, 3.0),
            outline_darkness: (0.7, 0.9),
            background_darkness: (0.04, 0.08),
            fill_darkness: (0.75, 0.95),
            noise: 0.01,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

const SUPERSAMPLE: usize = 4;

/// Renders an empty (outline only) or filled bubble. Filled bubbles are
/// labelled Mark, empty ones NonMark.
pub fn gen_bubble(filled: bool, style: &BubbleStyle, seed: u64) -> BubbleImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rx = draw(&mut rng, style.radius_x);
    let ry = draw(&mut rng, style.radius_y);
    let jitter = (-style.center_jitter, style.center_jitter);
    let cx = WIDTH as f64 / 2.0 + draw(&mut rng, jitter);
    let cy = HEIGHT as f64 / 2.0 + draw(&mut rng, jitter);
    let half_t = draw(&mut rng, style.outline_thickness) / 2.0;
    let outline = draw(&mut rng, style.outline_darkness);
    let background = draw(&mut rng, style.background_darkness);
    let fill = draw(&mut rng, style.fill_darkness);
    let noise = Normal::new(0.0, style.noise.max(0.0)).expect("finite noise level");

    let step = 1.0 / SUPERSAMPLE as f64;
    let mut pixels = Vec::with_capacity(PIXELS);
    for row in 0..HEIGHT {
        for col in 0..WIDTH {
            let mut dark = 0.0;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let x = col as f64 + (sx as f64 + 0.5) * step - cx;
                    let y = row as f64 + (sy as f64 + 0.5) * step - cy;
                    let r = ((x / rx).powi(2) + (y / ry).powi(2)).sqrt();
                    // first-order distance from the ellipse boundary
                    let grad = if r > 0.0 {
                        ((x / (rx * rx)).powi(2) + (y / (ry * ry)).powi(2)).sqrt() / r
                    } else {
                        1.0 / rx.max(ry)
                    };
                    let dist = (r - 1.0) / grad;
                    dark += if dist.abs() <= half_t {
                        outline
                    } else if filled && r < 1.0 {
                        fill
                    } else {
                        background
                    };
                }
            }
            dark /= (SUPERSAMPLE * SUPERSAMPLE) as f64;
            let v = 1.0 - dark + noise.sample(&mut rng);
            pixels.push(v);
        }
    }
    let label = if filled { Label::Mark } else { Label::NonMark };
    BubbleImage::new(pixels, label, Provenance::Bubble)
        .expect("pixel count is fixed")
        .quantized()
}

/// Swatch request: `ink_mass` is the total darkness `sum(1 - pixel)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwatchSpec {
    pub ink_mass: f64,
    pub seed: u64,
    /// Masses at or above this value are labelled Mark.
    pub label_threshold: f64,
}

impl SwatchSpec {
    pub const DEFAULT_THRESHOLD: f64 = 500.0;

    pub fn new(ink_mass: f64, seed: u64) -> Self {
        Self {
            ink_mass,
            seed,
            label_threshold: Self::DEFAULT_THRESHOLD,
        }
    }
}

/// Largest number of 8-bit quanta placed on a pixel in one drop.
const MAX_DROP: u32 = 64;

/// Scatters the ink budget over random pixels in whole 1/255 quanta, so
/// the darkness of the result equals the budget up to one quantum overall.
pub fn gen_swatch(spec: &SwatchSpec) -> Result<BubbleImage> {
    if !(0.0..=PIXELS as f64).contains(&spec.ink_mass) {
        return Err(Error::Validation(format!(
            "ink mass {} outside [0, {PIXELS}]",
            spec.ink_mass
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut remaining = (spec.ink_mass * 255.0).round() as u32;
    let mut darkness = [0u32; PIXELS];
    // pixels that can still take ink; swap-removed once saturated
    let mut open: Vec<usize> = (0..PIXELS).collect();
    while remaining > 0 {
        let slot = rng.random_range(0..open.len());
        let px = open[slot];
        let room = 255 - darkness[px];
        let drop = rng.random_range(1..=MAX_DROP).min(room).min(remaining);
        darkness[px] += drop;
        remaining -= drop;
        if darkness[px] == 255 {
            open.swap_remove(slot);
        }
    }
    let levels: Vec<u8> = darkness.iter().map(|&d| (255 - d) as u8).collect();
    let label = if spec.ink_mass >= spec.label_threshold {
        Label::Mark
    } else {
        Label::NonMark
    };
    BubbleImage::from_levels(&levels, label, Provenance::Swatch)
}

/// Recipe for a synthetic dataset of bubbles and swatches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    /// Bubbles, split evenly between filled and empty.
    pub bubbles: usize,
    pub swatches: usize,
    pub style: BubbleStyle,
    pub swatch_threshold: f64,
    /// Width of the mass interval around the threshold that is never sampled.
    pub dead_band: f64,
    pub swatch_mass_range: (f64, f64),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            bubbles: 2000,
            swatches: 2000,
            style: BubbleStyle::default(),
            swatch_threshold: SwatchSpec::DEFAULT_THRESHOLD,
            dead_band: 100.0,
            swatch_mass_range: (0.0, 1000.0),
        }
    }
}

impl DatasetSpec {
    /// Counts of the grayscale dataset with swatches at full size.
    pub fn paper_scale() -> Self {
        Self {
            bubbles: 42_679,
            swatches: 423_703,
            ..Self::default()
        }
    }

    /// Ten swatches per bubble, the mix of the swatch-heavy dataset.
    pub fn swatch_heavy(bubbles: usize) -> Self {
        Self {
            bubbles,
            swatches: 10 * bubbles,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.swatch_mass_range;
        let band_lo = self.swatch_threshold - self.dead_band / 2.0;
        let band_hi = self.swatch_threshold + self.dead_band / 2.0;
        if !(0.0 <= lo && lo < hi && hi <= PIXELS as f64) {
            return Err(Error::Validation(format!(
                "swatch mass range ({lo}, {hi}) must lie inside [0, {PIXELS}]"
            )));
        }
        if self.dead_band < 0.0 || (band_lo - lo).max(0.0) + (hi - band_hi).max(0.0) <= 0.0 {
            return Err(Error::Validation(
                "dead band leaves no swatch mass to sample".into(),
            ));
        }
        Ok(())
    }

    /// Samples a mass uniformly from the range minus the dead band.
    fn sample_mass(&self, rng: &mut ChaCha8Rng) -> f64 {
        let (lo, hi) = self.swatch_mass_range;
        let band_lo = (self.swatch_threshold - self.dead_band / 2.0).clamp(lo, hi);
        let band_hi = (self.swatch_threshold + self.dead_band / 2.0).clamp(lo, hi);
        let below = band_lo - lo;
        let total = below + (hi - band_hi);
        let u = rng.random_range(0.0..total);
        if u < below {
            lo + u
        } else {
            band_hi + (u - below)
        }
    }

    /// Generates the dataset: bubbles first (alternating filled/empty),
    /// then swatches. Item seeds are drawn from one stream so the result
    /// depends only on `seed`.
    pub fn generate(&self, seed: u64) -> Result<Vec<BubbleImage>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bubble_seeds: Vec<u64> = (0..self.bubbles).map(|_| rng.random()).collect();
        let swatch_specs: Vec<SwatchSpec> = (0..self.swatches)
            .map(|_| SwatchSpec {
                ink_mass: self.sample_mass(&mut rng),
                seed: rng.random(),
                label_threshold: self.swatch_threshold,
            })
            .collect();
        let mut out: Vec<BubbleImage> = bubble_seeds
            .par_iter()
            .enumerate()
            .map(|(i, &s)| gen_bubble(i % 2 == 0, &self.style, s))
            .collect();
        let swatches: Result<Vec<BubbleImage>> = swatch_specs.par_iter().map(gen_swatch).collect();
        out.extend(swatches?);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filled_is_darker_than_empty() {
        let style = BubbleStyle::default();
        for seed in 0..20 {
            let f = gen_bubble(true, &style, seed);
            let e = gen_bubble(false, &style, seed);
            assert!(f.mean() < e.mean());
            assert_eq!(f.label, Label::Mark);
            assert_eq!(e.label, Label::NonMark);
        }
    }

    #[test]
    fn bubbles_are_deterministic() {
        let style = BubbleStyle::default();
        assert_eq!(gen_bubble(true, &style, 9), gen_bubble(true, &style, 9));
        assert_ne!(gen_bubble(true, &style, 9), gen_bubble(true, &style, 10));
    }

    #[test]
    fn bubbles_are_quantized() {
        let img = gen_bubble(false, &BubbleStyle::default(), 1);
        for &v in img.pixels() {
            assert_eq!((v * 255.0).round() / 255.0, v);
        }
    }

    #[test]
    fn threshold_separates_empty_from_filled() {
        // a single mean-intensity cut classifies the easy set perfectly
        let style = BubbleStyle::default();
        let empties: Vec<f64> = (0..1000).map(|s| gen_bubble(false, &style, s).ink_mass()).collect();
        let fills: Vec<f64> = (0..1000)
            .map(|s| gen_bubble(true, &style, 10_000 + s).ink_mass())
            .collect();
        let max_empty = empties.iter().cloned().fold(f64::MIN, f64::max);
        let min_fill = fills.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max_empty < min_fill, "{max_empty} vs {min_fill}");
    }

    #[test]
    fn swatch_extremes() {
        let white = gen_swatch(&SwatchSpec::new(0.0, 1)).unwrap();
        assert!(white.pixels().iter().all(|&v| v == 1.0));
        assert_eq!(white.label, Label::NonMark);
        let black = gen_swatch(&SwatchSpec::new(2000.0, 1)).unwrap();
        assert!(black.pixels().iter().all(|&v| v == 0.0));
        assert_eq!(black.label, Label::Mark);
    }

    #[test]
    fn swatch_rejects_bad_mass() {
        assert!(gen_swatch(&SwatchSpec::new(-1.0, 0)).is_err());
        assert!(gen_swatch(&SwatchSpec::new(2000.5, 0)).is_err());
    }

    #[test]
    fn swatch_conserves_ink() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let spec = SwatchSpec::new(rng.random_range(0.0..2000.0), rng.random());
            let img = gen_swatch(&spec).unwrap();
            let quanta: u32 = img.to_levels().iter().map(|&k| 255 - u32::from(k)).sum();
            assert_eq!(quanta, (spec.ink_mass * 255.0).round() as u32);
            assert!((img.ink_mass() - spec.ink_mass).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn dataset_avoids_dead_band() {
        let spec = DatasetSpec {
            bubbles: 10,
            swatches: 400,
            ..DatasetSpec::default()
        };
        let data = spec.generate(3).unwrap();
        assert_eq!(data.len(), 410);
        for img in &data[10..] {
            let m = img.ink_mass();
            assert!(!(451.0..549.0).contains(&m), "mass {m}");
            assert_eq!(img.label == Label::Mark, m >= 500.0);
        }
        assert_eq!(data, spec.generate(3).unwrap());
    }
}
