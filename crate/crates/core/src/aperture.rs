//! Discretized camera aperture.

use crate::error::{Error, Result};

/// One aperture sample: the offset `(ux, uy)` of a view's centre of
/// projection and its aperture weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct View {
    pub ux: f64,
    pub uy: f64,
    pub weight: f64,
}

/// Uniform `m x m` grid over `[-1, 1]^2` with a disk indicator as weights.
///
/// Views are stored row-major: index `v * m + u`, where `v` walks `uy` and `u`
/// walks `ux`, both from -1 to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ApertureMask {
    m: usize,
    views: Vec<View>,
    weight_sum: f64,
}

// Points exactly on the unit circle (e.g. the axis ends of an odd grid) must
// count as inside despite rounding in the grid coordinates.
const DISK_SLACK: f64 = 1e-12;

pub fn make_aperture(m: usize) -> Result<ApertureMask> {
    ApertureMask::disk(m)
}

impl ApertureMask {
    pub fn disk(m: usize) -> Result<Self> {
        if m < 1 {
            return Err(Error::invalid("aperture grid size must be at least 1"));
        }
        let coord = |i: usize| {
            if m == 1 {
                0.0
            } else {
                (2 * i as i64 - (m as i64 - 1)) as f64 / (m - 1) as f64
            }
        };
        let mut views = Vec::with_capacity(m * m);
        for v in 0..m {
            for u in 0..m {
                let (ux, uy) = (coord(u), coord(v));
                let inside = ux * ux + uy * uy <= 1.0 + DISK_SLACK;
                views.push(View {
                    ux,
                    uy,
                    weight: if inside { 1.0 } else { 0.0 },
                });
            }
        }
        Self::from_views(m, views)
    }

    /// Arbitrary weights on the standard grid. Weights must be non-negative
    /// and not all zero.
    pub fn with_weights(m: usize, weights: &[f64]) -> Result<Self> {
        let grid = Self::disk(m)?;
        if weights.len() != m * m {
            return Err(Error::shape(m * m, weights.len()));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("aperture weights must be finite and non-negative"));
        }
        let views = grid
            .views
            .iter()
            .zip(weights)
            .map(|(v, &weight)| View { weight, ..*v })
            .collect();
        Self::from_views(m, views)
    }

    fn from_views(m: usize, views: Vec<View>) -> Result<Self> {
        let weight_sum: f64 = views.iter().map(|v| v.weight).sum();
        if weight_sum <= 0.0 {
            return Err(Error::invalid("aperture has zero total weight"));
        }
        Ok(ApertureMask {
            m,
            views,
            weight_sum,
        })
    }

    pub fn grid_size(&self) -> usize {
        self.m
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }

    /// Views with non-zero weight.
    pub fn active(&self) -> impl Iterator<Item = (usize, &View)> {
        self.views.iter().enumerate().filter(|(_, v)| v.weight > 0.0)
    }

    pub fn weight_sum(&self) -> f64 {
        self.weight_sum
    }

    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    /// Index of the `u = 0` view, which only exists for odd grids.
    pub fn central_index(&self) -> Option<usize> {
        (self.m % 2 == 1).then(|| (self.m / 2) * self.m + self.m / 2)
    }
}
