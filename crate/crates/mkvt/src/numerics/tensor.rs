//! Height x width x channels volume, the pixel container shared by image IO,
//! the convolution stem, and patch extraction.

use crate::error::{Error, Result};

/// Dense H x W x C volume in row-major (h, w, c) order, channels fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Tensor3 {
        Tensor3 {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Tensor3> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "{height}x{width}x{channels} tensor needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite entry {} at flat index {pos}",
                data[pos]
            )));
        }
        Ok(Tensor3 { height, width, channels, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(h * self.width + w) * self.channels + c]
    }

    pub fn set(&mut self, h: usize, w: usize, c: usize, v: f64) {
        self.data[(h * self.width + w) * self.channels + c] = v;
    }

    /// Mirrors the volume left-right. Applying it twice restores the input.
    pub fn flip_horizontal(&self) -> Tensor3 {
        let mut out = self.clone();
        for h in 0..self.height {
            for w in 0..self.width {
                for c in 0..self.channels {
                    out.set(h, w, c, self.get(h, self.width - 1 - w, c));
                }
            }
        }
        out
    }

    /// Nearest-neighbor resample to a new height and width.
    pub fn resize_nearest(&self, new_h: usize, new_w: usize) -> Tensor3 {
        assert!(new_h > 0 && new_w > 0, "resize to empty shape");
        if (new_h, new_w) == (self.height, self.width) {
            return self.clone();
        }
        let mut out = Tensor3::zeros(new_h, new_w, self.channels);
        for h in 0..new_h {
            let src_h = (h * self.height) / new_h;
            for w in 0..new_w {
                let src_w = (w * self.width) / new_w;
                for c in 0..self.channels {
                    out.set(h, w, c, self.get(src_h, src_w, c));
                }
            }
        }
        out
    }

    /// Copies a window starting at (top, left).
    pub fn crop(&self, top: usize, left: usize, crop_h: usize, crop_w: usize) -> Tensor3 {
        assert!(top + crop_h <= self.height && left + crop_w <= self.width, "crop out of bounds");
        let mut out = Tensor3::zeros(crop_h, crop_w, self.channels);
        for h in 0..crop_h {
            for w in 0..crop_w {
                for c in 0..self.channels {
                    out.set(h, w, c, self.get(top + h, left + w, c));
                }
            }
        }
        out
    }
}
