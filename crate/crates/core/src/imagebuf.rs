//! Dense H×W×C float image buffer.
//!
//! Row-major, channel-interleaved: index `(row * width + col) * channels + c`.
//! This is the carrier type for rendered images, guidance tensors, and
//! analysis inputs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl ImageBuf {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        ImageBuf { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    pub fn from_data(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::shape(format!(
                "image data length {} != {}x{}x{}",
                data.len(),
                height,
                width,
                channels
            )));
        }
        Ok(ImageBuf { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        ImageBuf { height, width, channels, data: vec![value; height * width * channels] }
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.width + col) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f32] {
        let i = (row * self.width + col) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ImageBuf) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &ImageBuf, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::shape(format!(
                "{what}: {}x{}x{} vs {}x{}x{}",
                self.height, self.width, self.channels, other.height, other.width, other.channels
            )));
        }
        Ok(())
    }

    /// Rec. 709 luma of an RGB image; single-channel images pass through.
    pub fn to_luma(&self) -> Result<ImageBuf> {
        match self.channels {
            1 => Ok(self.clone()),
            3 => {
                let mut out = ImageBuf::zeros(self.height, self.width, 1);
                for (i, px) in self.data.chunks_exact(3).enumerate() {
                    out.data[i] = 0.2126 * px[0] + 0.7152 * px[1] + 0.0722 * px[2];
                }
                Ok(out)
            }
            c => Err(Error::invalid(format!("cannot convert {c}-channel image to luma"))),
        }
    }

    /// Mean of squared per-element differences.
    pub fn mse(&self, other: &ImageBuf) -> Result<f64> {
        self.check_same_shape(other, "mse")?;
        let n = self.data.len() as f64;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum();
        Ok(sum / n)
    }

    /// Box-filter downsample by an integer factor (used by resolution-consistency tests).
    pub fn downsample(&self, factor: usize) -> Result<ImageBuf> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::invalid(format!(
                "downsample factor {factor} does not divide {}x{}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = ImageBuf::zeros(h, w, self.channels);
        let norm = 1.0 / (factor * factor) as f32;
        for r in 0..h {
            for c in 0..w {
                for ch in 0..self.channels {
                    let mut acc = 0.0f32;
                    for dr in 0..factor {
                        for dc in 0..factor {
                            acc += self.pixel(r * factor + dr, c * factor + dc)[ch];
                        }
                    }
                    out.pixel_mut(r, c)[ch] = acc * norm;
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_indexing_round_trips() {
        let mut img = ImageBuf::zeros(3, 4, 2);
        img.pixel_mut(2, 1)[1] = 7.5;
        assert_eq!(img.pixel(2, 1), &[0.0, 7.5]);
        assert_eq!(img.data[(2 * 4 + 1) * 2 + 1], 7.5);
    }

    #[test]
    fn downsample_averages_blocks() {
        let img = ImageBuf::from_data(2, 2, 1, vec![0.0, 1.0, 1.0, 2.0]).unwrap();
        let d = img.downsample(2).unwrap();
        assert_eq!(d.data, vec![1.0]);
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let a = ImageBuf::zeros(2, 2, 1);
        let b = ImageBuf::zeros(2, 3, 1);
        assert!(a.mse(&b).is_err());
    }
}
