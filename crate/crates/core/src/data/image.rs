use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const HEIGHT: usize = 40;
pub const WIDTH: usize = 50;
pub const PIXELS: usize = HEIGHT * WIDTH;

/// Ground-truth class. Class index 0 is `Mark` everywhere in the crate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Mark,
    NonMark,
}

impl Label {
    pub fn index(self) -> usize {
        match self {
            Label::Mark => 0,
            Label::NonMark => 1,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Mark),
            1 => Ok(Label::NonMark),
            _ => Err(Error::Validation(format!("class index {i} is not 0 or 1"))),
        }
    }

    pub fn onehot(self) -> [f64; 2] {
        match self {
            Label::Mark => [1.0, 0.0],
            Label::NonMark => [0.0, 1.0],
        }
    }

    pub fn other(self) -> Self {
        match self {
            Label::Mark => Label::NonMark,
            Label::NonMark => Label::Mark,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Mark => "mark",
            Label::NonMark => "nonmark",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Bubble,
    Swatch,
    PostChannel,
}

impl Provenance {
    pub fn code(self) -> u8 {
        match self {
            Provenance::Bubble => 0,
            Provenance::Swatch => 1,
            Provenance::PostChannel => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Provenance::Bubble),
            1 => Some(Provenance::Swatch),
            2 => Some(Provenance::PostChannel),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Provenance::Bubble => "bubble",
            Provenance::Swatch => "swatch",
            Provenance::PostChannel => "post-channel",
        }
    }
}

/// A 40-row by 50-column grayscale bubble, 0 = black, 1 = white.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BubbleImage {
    pixels: Vec<f64>,
    pub label: Label,
    pub provenance: Provenance,
}

impl BubbleImage {
    pub fn new(pixels: Vec<f64>, label: Label, provenance: Provenance) -> Result<Self> {
        if pixels.len() != PIXELS {
            return Err(Error::dim(
                "bubble image",
                format!("expected {HEIGHT}x{WIDTH} = {PIXELS} pixels, got {}", pixels.len()),
            ));
        }
        Ok(Self {
            pixels,
            label,
            provenance,
        })
    }

    /// Builds an image from 8-bit intensity levels (`k / 255`).
    pub fn from_levels(levels: &[u8], label: Label, provenance: Provenance) -> Result<Self> {
        Self::new(
            levels.iter().map(|&k| f64::from(k) / 255.0).collect(),
            label,
            provenance,
        )
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * WIDTH + col]
    }

    /// Nearest 8-bit level of every pixel, after clipping to [0, 1].
    pub fn to_levels(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| quantize(v)).collect()
    }

    /// Rounds every pixel onto the 8-bit grid.
    pub fn quantized(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|&v| f64::from(quantize(v)) / 255.0).collect(),
            label: self.label,
            provenance: self.provenance,
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / PIXELS as f64
    }

    /// Total darkness `sum(1 - pixel)`.
    pub fn ink_mass(&self) -> f64 {
        self.pixels.iter().map(|&v| 1.0 - v).sum()
    }
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_round_trip() {
        let levels: Vec<u8> = (0..PIXELS).map(|i| (i % 256) as u8).collect();
        let img = BubbleImage::from_levels(&levels, Label::Mark, Provenance::Bubble).unwrap();
        assert_eq!(img.to_levels(), levels);
        assert_eq!(img.quantized(), img);
    }

    #[test]
    fn wrong_pixel_count_is_rejected() {
        assert!(BubbleImage::new(vec![0.0; 10], Label::Mark, Provenance::Bubble).is_err());
    }
}
