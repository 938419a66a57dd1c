//! Materialized 4D light fields and per-view disparity stacks.

use crate::aperture::ApertureMask;
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image};

/// `H x W x m x m x C` radiance, stored as one image per aperture view in the
/// same row-major view order as [`ApertureMask`].
#[derive(Debug, Clone, PartialEq)]
pub struct LightField {
    m: usize,
    views: Vec<Image>,
}

impl LightField {
    pub fn new(m: usize, views: Vec<Image>) -> Result<Self> {
        if m == 0 || views.len() != m * m {
            return Err(Error::shape(m * m, format!("{} views", views.len())));
        }
        for v in &views[1..] {
            views[0].check_same_shape(v)?;
        }
        Ok(LightField { m, views })
    }

    pub fn grid_size(&self) -> usize {
        self.m
    }

    pub fn views(&self) -> &[Image] {
        &self.views
    }

    pub fn view(&self, v: usize, u: usize) -> &Image {
        &self.views[v * self.m + u]
    }

    pub fn height(&self) -> usize {
        self.views[0].height()
    }

    pub fn width(&self) -> usize {
        self.views[0].width()
    }

    pub fn channels(&self) -> usize {
        self.views[0].channels()
    }

    /// Radiance at `(y, x)` in view `(v, u)`.
    pub fn get(&self, y: usize, x: usize, v: usize, u: usize, c: usize) -> f64 {
        self.view(v, u).get(y, x, c)
    }

    pub fn central_view(&self) -> Option<&Image> {
        (self.m % 2 == 1).then(|| self.view(self.m / 2, self.m / 2))
    }

    pub fn matches(&self, aperture: &ApertureMask) -> bool {
        self.m == aperture.grid_size()
    }

    /// Horizontal epipolar slice: row `y` of every view along the centre
    /// `v` row, as an `m x W x C` image.
    pub fn epipolar_slice(&self, y: usize) -> Image {
        let v = self.m / 2;
        let (w, c) = (self.width(), self.channels());
        Image::from_fn(self.m, w, c, |u, x, ch| self.get(y, x, v, u, ch))
    }
}

/// Disparity map for every view of the aperture grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewDepthStack {
    m: usize,
    views: Vec<DepthMap>,
}

impl ViewDepthStack {
    pub fn new(m: usize, views: Vec<DepthMap>) -> Result<Self> {
        if m == 0 || views.len() != m * m {
            return Err(Error::shape(m * m, format!("{} views", views.len())));
        }
        let (h, w) = (views[0].height(), views[0].width());
        for v in &views[1..] {
            v.check_dims(h, w)?;
        }
        Ok(ViewDepthStack { m, views })
    }

    pub fn grid_size(&self) -> usize {
        self.m
    }

    pub fn views(&self) -> &[DepthMap] {
        &self.views
    }

    pub fn views_mut(&mut self) -> &mut [DepthMap] {
        &mut self.views
    }

    pub fn view(&self, index: usize) -> &DepthMap {
        &self.views[index]
    }

    pub fn height(&self) -> usize {
        self.views[0].height()
    }

    pub fn width(&self) -> usize {
        self.views[0].width()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64 + Copy) -> ViewDepthStack {
        ViewDepthStack {
            m: self.m,
            views: self.views.iter().map(|v| v.map(f)).collect(),
        }
    }
}
