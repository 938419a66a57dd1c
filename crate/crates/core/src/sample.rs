//! Bilinear lookups with clamp-to-edge borders, and their derivatives.
//!
//! Every continuous lookup in the renderers goes through [`Tap`], which
//! resolves a coordinate into the four lattice neighbours and their weights
//! once so that values, spatial derivatives and the transpose (gradient
//! scatter) all agree on the same cell.

use crate::image::Image;

/// Bilinear interpolation of channel `c` at `(y, x)`.
pub fn sample_bilinear(img: &Image, y: f64, x: f64, c: usize) -> f64 {
    img.sample(y, x, c)
}

/// Partial derivatives `(d/dy, d/dx)` of the bilinear interpolant.
///
/// The interpolant is piecewise bilinear, so its derivative is discontinuous
/// on lattice lines. On a lattice line the cell to the right (or below) is
/// used. Coordinates clamped to the border have zero derivative.
pub fn sample_bilinear_grad(img: &Image, y: f64, x: f64, c: usize) -> (f64, f64) {
    img.sample_grad(y, x, c)
}

/// A resolved bilinear lookup into an `H x W` lattice.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    /// Pixel offsets (not yet multiplied by channel count) of the
    /// top-left, top-right, bottom-left, bottom-right neighbours.
    pub idx: [usize; 4],
    pub fy: f64,
    pub fx: f64,
    /// 1.0 if the coordinate was inside the lattice along that axis, else 0.0.
    pub live_y: f64,
    pub live_x: f64,
}

#[inline]
fn axis(n: usize, t: f64) -> (usize, usize, f64, f64) {
    if n == 1 {
        return (0, 0, 0.0, 0.0);
    }
    let hi = (n - 1) as f64;
    let live = if (0.0..=hi).contains(&t) { 1.0 } else { 0.0 };
    let tc = t.clamp(0.0, hi);
    // tc >= 0, so truncation is floor
    let mut i0 = tc as usize;
    if i0 >= n - 1 {
        i0 = n - 2;
    }
    (i0, i0 + 1, tc - i0 as f64, live)
}

impl Tap {
    #[inline]
    pub fn new(height: usize, width: usize, y: f64, x: f64) -> Tap {
        let (y0, y1, fy, live_y) = axis(height, y);
        let (x0, x1, fx, live_x) = axis(width, x);
        Tap {
            idx: [
                y0 * width + x0,
                y0 * width + x1,
                y1 * width + x0,
                y1 * width + x1,
            ],
            fy,
            fx,
            live_y,
            live_x,
        }
    }

    #[inline]
    pub fn weights(&self) -> [f64; 4] {
        let (fy, fx) = (self.fy, self.fx);
        [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ]
    }

    #[inline]
    fn corners(&self, data: &[f64], stride: usize, c: usize) -> [f64; 4] {
        [
            data[self.idx[0] * stride + c],
            data[self.idx[1] * stride + c],
            data[self.idx[2] * stride + c],
            data[self.idx[3] * stride + c],
        ]
    }

    #[inline]
    pub fn value(&self, data: &[f64], stride: usize, c: usize) -> f64 {
        let [a, b, cc, d] = self.corners(data, stride, c);
        let (fy, fx) = (self.fy, self.fx);
        let top = a + fx * (b - a);
        let bot = cc + fx * (d - cc);
        top + fy * (bot - top)
    }

    #[inline]
    pub fn grad(&self, data: &[f64], stride: usize, c: usize) -> (f64, f64) {
        let [a, b, cc, d] = self.corners(data, stride, c);
        let (fy, fx) = (self.fy, self.fx);
        let dx = (1.0 - fy) * (b - a) + fy * (d - cc);
        let dy = (1.0 - fx) * (cc - a) + fx * (d - b);
        (dy * self.live_y, dx * self.live_x)
    }

    /// Adds `g * weight` into each neighbour of a single-channel buffer.
    #[inline]
    pub fn scatter(&self, buf: &mut [f64], g: f64) {
        let w = self.weights();
        for k in 0..4 {
            buf[self.idx[k]] += g * w[k];
        }
    }
}
