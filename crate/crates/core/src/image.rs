//! Raster types shared by every renderer.
//!
//! Pixels are addressed as `(y, x)` with `y` growing downwards. Multi-channel
//! data is stored interleaved, row-major: `data[(y * width + x) * channels + c]`.

use crate::error::{Error, Result};
use crate::sample::Tap;

/// An `H x W x C` floating-point image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::invalid(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if data.len() != height * width * channels {
            return Err(Error::shape(
                height * width * channels,
                format!("{} samples", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image sample {i}")));
        }
        Ok(Image {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        Image {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(height > 0 && width > 0 && channels > 0);
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Image {
            height,
            width,
            channels,
            data,
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

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear lookup with clamp-to-edge borders.
    pub fn sample(&self, y: f64, x: f64, c: usize) -> f64 {
        Tap::new(self.height, self.width, y, x).value(&self.data, self.channels, c)
    }

    /// `(d/dy, d/dx)` of the bilinear interpolant at `(y, x)`.
    pub fn sample_grad(&self, y: f64, x: f64, c: usize) -> (f64, f64) {
        Tap::new(self.height, self.width, y, x).grad(&self.data, self.channels, c)
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub(crate) fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(self.shape_str(), other.shape_str()))
        }
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Copy with every sample clamped to `[0, 1]`.
    pub fn clamped(&self) -> Image {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    /// Mean over channels, as a scalar field.
    pub fn luminance(&self) -> ScalarField {
        let c = self.channels as f64;
        ScalarField {
            height: self.height,
            width: self.width,
            data: self
                .data
                .chunks_exact(self.channels)
                .map(|p| p.iter().sum::<f64>() / c)
                .collect(),
        }
    }
}

/// A single-channel `H x W` field of floats.
///
/// Used for disparity maps, confidences and gradients with respect to either.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

/// Per-pixel disparity, in pixels of image shift per unit aperture coordinate.
pub type DepthMap = ScalarField;

impl ScalarField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "field dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::shape(height * width, format!("{} samples", data.len())));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("field sample {i}")));
        }
        Ok(ScalarField {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0);
        ScalarField {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0);
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        ScalarField {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn sample(&self, y: f64, x: f64) -> f64 {
        Tap::new(self.height, self.width, y, x).value(&self.data, 1, 0)
    }

    pub fn sample_grad(&self, y: f64, x: f64) -> (f64, f64) {
        Tap::new(self.height, self.width, y, x).grad(&self.data, 1, 0)
    }

    pub fn same_dims(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }

    pub(crate) fn check_dims(&self, height: usize, width: usize) -> Result<()> {
        if self.same_dims(height, width) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{height}x{width}"),
                format!("{}x{}", self.height, self.width),
            ))
        }
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Replicate into an `H x W x 1` image.
    pub fn to_image(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.data.clone(),
        }
    }
}

/// Inclusive disparity range `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthRange {
    pub min: f64,
    pub max: f64,
}

impl DepthRange {
    pub const DEFAULT: DepthRange = DepthRange {
        min: -15.0,
        max: 15.0,
    };

    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min.is_finite() && max.is_finite()) || min >= max {
            return Err(Error::invalid(format!("bad disparity range [{min}, {max}]")));
        }
        Ok(DepthRange { min, max })
    }

    pub fn contains(&self, d: f64) -> bool {
        d >= self.min && d <= self.max
    }

    pub fn clamp(&self, d: f64) -> f64 {
        d.clamp(self.min, self.max)
    }

    pub fn span(&self) -> f64 {
        self.max - self.min
    }
}

impl Default for DepthRange {
    fn default() -> Self {
        DepthRange::DEFAULT
    }
}
