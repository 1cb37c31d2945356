//! Dense H×W×C images with value-range metadata.

use std::path::Path;

use crate::error::{Error, Result};

/// Numeric range the pixel values live in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueRange {
    /// Floats in `[0, 1]`.
    UnitFloat,
    /// Byte-scale values in `[0, 255]`.
    Byte,
}

impl ValueRange {
    pub fn max(self) -> f32 {
        match self {
            ValueRange::UnitFloat => 1.0,
            ValueRange::Byte => 255.0,
        }
    }

    pub fn clamp(self, v: f32) -> f32 {
        v.clamp(0.0, self.max())
    }
}

/// Row-major, channel-interleaved image (`values[(y * width + x) * channels + c]`).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
    range: ValueRange,
}

impl ImageTensor {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f32>,
        range: ValueRange,
    ) -> Result<Self> {
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch {
                expected: format!("{height}x{width}x{channels} = {} values", height * width * channels),
                actual: format!("{} values", values.len()),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
            range,
        })
    }

    pub fn zeros(height: usize, width: usize, channels: usize, range: ValueRange) -> Self {
        Self {
            height,
            width,
            channels,
            values: vec![0.0; height * width * channels],
            range,
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        range: ValueRange,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    values.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            values,
            range,
        }
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

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.values[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        let i = self.index(y, x, c);
        self.values[i] = v;
    }

    /// Copy of the `h`×`w` window whose top-left corner is `(y, x)`.
    pub fn crop(&self, y: usize, x: usize, h: usize, w: usize) -> Result<Self> {
        if y + h > self.height || x + w > self.width {
            return Err(Error::OutOfBounds {
                x,
                y,
                w,
                h,
                width: self.width,
                height: self.height,
            });
        }
        let c = self.channels;
        let mut values = Vec::with_capacity(h * w * c);
        for row in y..y + h {
            let start = self.index(row, x, 0);
            values.extend_from_slice(&self.values[start..start + w * c]);
        }
        Ok(Self {
            height: h,
            width: w,
            channels: c,
            values,
            range: self.range,
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let c = self.channels;
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                let src = self.index(y, self.width - 1 - x, 0);
                let dst = self.index(y, x, 0);
                out.values[dst..dst + c].copy_from_slice(&self.values[src..src + c]);
            }
        }
        out
    }

    /// Triangle-filter resize backed by `image::imageops`.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        use image::imageops::{self, FilterType};
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let (w0, h0) = (self.width as u32, self.height as u32);
        let values = match self.channels {
            1 => {
                let buf = image::ImageBuffer::<image::Luma<f32>, _>::from_raw(w0, h0, self.values.clone())
                    .ok_or_else(|| Error::DecodeError("buffer size".into()))?;
                imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle).into_raw()
            }
            3 => {
                let buf = image::Rgb32FImage::from_raw(w0, h0, self.values.clone())
                    .ok_or_else(|| Error::DecodeError("buffer size".into()))?;
                imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle).into_raw()
            }
            c => {
                return Err(Error::ChannelMismatch {
                    expected: 3,
                    actual: c,
                })
            }
        };
        Self::new(height, width, self.channels, values, self.range)
    }

    /// Decodes any supported file into unit-float RGB.
    pub fn open(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::DecodeError(format!("{}: {e}", path.display())))?;
        Ok(Self::from_dynamic(img))
    }

    pub fn from_dynamic(img: image::DynamicImage) -> Self {
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        Self {
            height: h as usize,
            width: w as usize,
            channels: 3,
            values: rgb.into_raw(),
            range: ValueRange::UnitFloat,
        }
    }

    /// Values rescaled to unit range, whatever the stored range is.
    pub fn unit_values(&self) -> impl Iterator<Item = f32> + '_ {
        let scale = 1.0 / self.range.max();
        self.values.iter().map(move |v| v * scale)
    }

    /// Writes an 8-bit RGB or grayscale file; the format follows the extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self
            .unit_values()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let (w, h) = (self.width as u32, self.height as u32);
        match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer size checked at construction")
                .save(path)?,
            3 => image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer size checked at construction")
                .save(path)?,
            c => {
                return Err(Error::ChannelMismatch {
                    expected: 3,
                    actual: c,
                })
            }
        }
        Ok(())
    }
}
