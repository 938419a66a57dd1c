//! Compositional aperture rendering.
//!
//! The input is blurred with one normalized disk kernel per discrete
//! disparity plane, and the blurred copies are blended per pixel with a
//! probability mass function over those planes, shifted so that the focus
//! plane maps onto the delta kernel.
//!
//! The blur stack depends only on the input image, so [`CompRenderer`] builds
//! it once and every subsequent render or gradient is a blend whose cost is
//! linear in the number of planes.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{DepthMap, DepthRange, Image, ScalarField};

/// Integer-spaced disparity planes `d_min, d_min + 1, ..., d_max`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthPlanes {
    min: i32,
    max: i32,
}

impl DepthPlanes {
    pub fn new(min: i32, max: i32) -> Result<Self> {
        if min > 0 || max < 0 || min >= max {
            return Err(Error::invalid(format!(
                "depth planes [{min}, {max}] must be increasing and contain 0"
            )));
        }
        Ok(DepthPlanes { min, max })
    }

    /// `-d_max ..= d_max`.
    pub fn symmetric(d_max: i32) -> Result<Self> {
        Self::new(-d_max, d_max)
    }

    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min(&self) -> i32 {
        self.min
    }

    pub fn max(&self) -> i32 {
        self.max
    }

    pub fn disparity(&self, index: usize) -> i32 {
        self.min + index as i32
    }

    pub fn disparities(&self) -> impl Iterator<Item = i32> + '_ {
        self.min..=self.max
    }

    pub fn index_of(&self, d: i32) -> Option<usize> {
        (self.min..=self.max).contains(&d).then(|| (d - self.min) as usize)
    }

    pub fn range(&self) -> DepthRange {
        DepthRange {
            min: self.min as f64,
            max: self.max as f64,
        }
    }
}

impl Default for DepthPlanes {
    fn default() -> Self {
        DepthPlanes { min: -15, max: 15 }
    }
}

/// Normalized disk `k(x, d) = [|x|^2 <= d^2] / count`, stored as horizontal
/// spans `(dy, -half_width ..= half_width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiskKernel {
    radius: usize,
    spans: Vec<(i64, i64)>,
    count: usize,
}

impl DiskKernel {
    pub fn new(d: i32) -> Self {
        let r = d.unsigned_abs() as i64;
        let mut spans = Vec::with_capacity(2 * r as usize + 1);
        let mut count = 0;
        for dy in -r..=r {
            // largest dx with dx^2 + dy^2 <= r^2
            let mut half = 0;
            while (half + 1) * (half + 1) + dy * dy <= r * r {
                half += 1;
            }
            spans.push((dy, half));
            count += 2 * half as usize + 1;
        }
        DiskKernel {
            radius: r as usize,
            spans,
            count,
        }
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn support(&self) -> usize {
        self.count
    }

    /// Dense `(2r + 1) x (2r + 1)` weights, row-major.
    pub fn dense(&self) -> Vec<f64> {
        let size = 2 * self.radius + 1;
        let r = self.radius as i64;
        let mut k = vec![0.0; size * size];
        let w = 1.0 / self.count as f64;
        for &(dy, half) in &self.spans {
            for dx in -half..=half {
                k[((dy + r) as usize) * size + (dx + r) as usize] = w;
            }
        }
        k
    }
}

/// One kernel per plane.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelStack {
    kernels: Vec<DiskKernel>,
}

impl KernelStack {
    pub fn new(planes: &DepthPlanes) -> Self {
        KernelStack {
            kernels: planes.disparities().map(DiskKernel::new).collect(),
        }
    }

    pub fn kernels(&self) -> &[DiskKernel] {
        &self.kernels
    }
}

/// Convolve with a normalized disk, clamp-to-edge padding.
pub fn disk_blur(img: &Image, kernel: &DiskKernel) -> Image {
    if kernel.radius == 0 {
        return img.clone();
    }
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let r = kernel.radius;
    let padded = w + 2 * r;
    // prefix[(y * c + ch) * (padded + 1) + k] = sum of the first k padded samples
    let mut prefix = vec![0.0; h * c * (padded + 1)];
    prefix
        .par_chunks_mut(padded + 1)
        .enumerate()
        .for_each(|(row, p)| {
            let (y, ch) = (row / c, row % c);
            let mut acc = 0.0;
            for k in 0..padded {
                let x = (k as i64 - r as i64).clamp(0, w as i64 - 1) as usize;
                acc += img.get(y, x, ch);
                p[k + 1] = acc;
            }
        });
    let norm = 1.0 / kernel.count as f64;
    let mut out = Image::filled(h, w, c, 0.0);
    out.data_mut()
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, orow)| {
            for &(dy, half) in &kernel.spans {
                let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                for ch in 0..c {
                    let p = &prefix[(yy * c + ch) * (padded + 1)..][..padded + 1];
                    for x in 0..w {
                        // padded index of column x is x + r
                        let a = (x + r) as i64 - half;
                        let b = (x + r) as i64 + half;
                        orow[x * c + ch] += p[(b + 1) as usize] - p[a as usize];
                    }
                }
            }
            orow.iter_mut().for_each(|v| *v *= norm);
        });
    out
}

/// The input blurred with every plane's kernel.
#[derive(Debug, Clone)]
pub struct BlurStack {
    planes: DepthPlanes,
    images: Vec<Image>,
}

pub fn blur_stack(img: &Image, planes: &DepthPlanes) -> BlurStack {
    let kernels = KernelStack::new(planes);
    let images = kernels
        .kernels()
        .par_iter()
        .map(|k| disk_blur(img, k))
        .collect();
    BlurStack {
        planes: planes.clone(),
        images,
    }
}

impl BlurStack {
    pub fn images(&self) -> &[Image] {
        &self.images
    }

    pub fn planes(&self) -> &DepthPlanes {
        &self.planes
    }

    pub fn plane(&self, d: i32) -> Option<&Image> {
        self.planes.index_of(d).map(|i| &self.images[i])
    }
}

/// Per-pixel values over the depth planes, stored pixel-major
/// (`data[(y * w + x) * n + plane]`).
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneVolume {
    height: usize,
    width: usize,
    planes: usize,
    data: Vec<f64>,
}

/// Unnormalized per-plane scores, turned into a PMF by a softmax.
pub type DepthLogits = PlaneVolume;

/// Per-pixel probability mass over the depth planes.
pub type DepthPmf = PlaneVolume;

impl PlaneVolume {
    pub fn new(height: usize, width: usize, planes: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || planes == 0 {
            return Err(Error::invalid("plane volume dimensions must be positive"));
        }
        if data.len() != height * width * planes {
            return Err(Error::shape(height * width * planes, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("plane volume".into()));
        }
        Ok(PlaneVolume {
            height,
            width,
            planes,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, planes: usize) -> Self {
        PlaneVolume {
            height,
            width,
            planes,
            data: vec![0.0; height * width * planes],
        }
    }

    /// One-hot at plane `index` everywhere.
    pub fn one_hot(height: usize, width: usize, planes: usize, index: usize) -> Self {
        Self::from_fn(height, width, planes, |_, _, p| if p == index { 1.0 } else { 0.0 })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        planes: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * planes);
        for y in 0..height {
            for x in 0..width {
                for p in 0..planes {
                    data.push(f(y, x, p));
                }
            }
        }
        PlaneVolume {
            height,
            width,
            planes,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn planes(&self) -> usize {
        self.planes
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, y: usize, x: usize, p: usize) -> f64 {
        self.data[(y * self.width + x) * self.planes + p]
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.planes;
        &self.data[i..i + self.planes]
    }

    /// Plane `p` as a scalar field.
    pub fn layer(&self, p: usize) -> ScalarField {
        ScalarField::from_fn(self.height, self.width, |y, x| self.get(y, x, p))
    }

    pub fn from_layers(layers: &[ScalarField]) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::invalid("no layers"))?;
        let (h, w) = (first.height(), first.width());
        for l in layers {
            l.check_dims(h, w)?;
        }
        let n = layers.len();
        Self::new(h, w, n, {
            let mut data = Vec::with_capacity(h * w * n);
            for i in 0..h * w {
                data.extend(layers.iter().map(|l| l.data()[i]));
            }
            data
        })
    }

    /// Reverse the plane axis about plane index `center`:
    /// `out(d) = in(2 * center - d)`. Mass mapped outside the volume is
    /// dropped.
    pub fn reflect(&self, center: usize) -> Self {
        let n = self.planes as i64;
        let mut out = Self::zeros(self.height, self.width, self.planes);
        for (src, dst) in self.data.chunks_exact(self.planes).zip(out.data.chunks_exact_mut(self.planes)) {
            for (j, v) in dst.iter_mut().enumerate() {
                let i = 2 * center as i64 - j as i64;
                if (0..n).contains(&i) {
                    *v = src[i as usize];
                }
            }
        }
        out
    }

    pub fn check_same_shape(&self, other: &PlaneVolume) -> Result<()> {
        if self.height == other.height && self.width == other.width && self.planes == other.planes {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{}x{}x{}", self.height, self.width, self.planes),
                format!("{}x{}x{}", other.height, other.width, other.planes),
            ))
        }
    }
}

/// Numerically stable per-pixel softmax.
pub fn softmax_pmf(logits: &DepthLogits) -> DepthPmf {
    let mut out = logits.clone();
    out.data
        .par_chunks_mut(logits.planes)
        .for_each(|p| {
            let m = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in p.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            p.iter_mut().for_each(|v| *v /= s);
        });
    out
}

/// Pulls a gradient with respect to the PMF back to the logits.
pub fn softmax_backward(pmf: &DepthPmf, grad_pmf: &PlaneVolume) -> Result<DepthLogits> {
    pmf.check_same_shape(grad_pmf)?;
    let mut out = grad_pmf.clone();
    out.data
        .par_chunks_mut(pmf.planes)
        .zip(pmf.data.par_chunks(pmf.planes))
        .for_each(|(g, p)| {
            let dot: f64 = g.iter().zip(p).map(|(g, p)| g * p).sum();
            g.iter_mut().zip(p).for_each(|(g, p)| *g = p * (*g - dot));
        });
    Ok(out)
}

/// Integer part and fraction of a focus shift, after range validation.
fn split_focus(focus: f64, planes: usize) -> Result<(i64, f64)> {
    let span = (planes - 1) as f64;
    if !focus.is_finite() || focus.abs() > span {
        return Err(Error::invalid(format!(
            "focus shift {focus} exceeds the plane span {span}"
        )));
    }
    let k = focus.floor();
    Ok((k as i64, focus - k))
}

#[inline]
fn shifted_index(i: usize, k: i64, n: usize) -> usize {
    (i as i64 - k).clamp(0, n as i64 - 1) as usize
}

/// `out(d) = in(d + focus)` along the plane axis; linear interpolation between
/// integer shifts, mass leaving either end piles up on the end plane.
fn shift_pixel(src: &[f64], k: i64, t: f64, dst: &mut [f64]) {
    let n = src.len();
    dst.iter_mut().for_each(|v| *v = 0.0);
    for (i, &p) in src.iter().enumerate() {
        dst[shifted_index(i, k, n)] += (1.0 - t) * p;
        dst[shifted_index(i, k + 1, n)] += t * p;
    }
}

/// Shift a PMF along the plane axis by `focus` planes so that plane `focus`
/// lands on plane 0.
pub fn shift_pmf(pmf: &DepthPmf, focus: f64) -> Result<DepthPmf> {
    let (k, t) = split_focus(focus, pmf.planes)?;
    let mut out = DepthPmf::zeros(pmf.height, pmf.width, pmf.planes);
    out.data
        .par_chunks_mut(pmf.planes)
        .zip(pmf.data.par_chunks(pmf.planes))
        .for_each(|(dst, src)| shift_pixel(src, k, t, dst));
    Ok(out)
}

/// Blend a blur stack with an already shifted PMF.
fn blend(stack: &BlurStack, shifted: &DepthPmf) -> Image {
    let first = &stack.images[0];
    let (h, w, c) = (first.height(), first.width(), first.channels());
    let n = stack.images.len();
    let mut out = Image::filled(h, w, c, 0.0);
    out.data_mut()
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, row)| {
            for x in 0..w {
                let p = shifted.pixel(y, x);
                let o = &mut row[x * c..(x + 1) * c];
                for j in 0..n {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let b = stack.images[j].pixel(y, x);
                    for ch in 0..c {
                        o[ch] += p[j] * b[ch];
                    }
                }
            }
        });
    out
}

/// Cached blur stack for repeated renders of one input image.
#[derive(Debug, Clone)]
pub struct CompRenderer {
    stack: BlurStack,
}

#[derive(Debug, Clone)]
pub struct CompGradients {
    pub logits: DepthLogits,
    pub focus: f64,
}

impl CompRenderer {
    pub fn new(img: &Image, planes: &DepthPlanes) -> Self {
        CompRenderer {
            stack: blur_stack(img, planes),
        }
    }

    pub fn stack(&self) -> &BlurStack {
        &self.stack
    }

    pub fn planes(&self) -> &DepthPlanes {
        &self.stack.planes
    }

    fn check(&self, vol: &PlaneVolume) -> Result<()> {
        let img = &self.stack.images[0];
        if vol.height != img.height() || vol.width != img.width() || vol.planes != self.stack.images.len() {
            return Err(Error::shape(
                format!("{}x{}x{}", img.height(), img.width(), self.stack.images.len()),
                format!("{}x{}x{}", vol.height, vol.width, vol.planes),
            ));
        }
        Ok(())
    }

    pub fn render_pmf(&self, pmf: &DepthPmf, focus: f64) -> Result<Image> {
        self.check(pmf)?;
        Ok(blend(&self.stack, &shift_pmf(pmf, focus)?))
    }

    pub fn render(&self, logits: &DepthLogits, focus: f64) -> Result<Image> {
        self.render_pmf(&softmax_pmf(logits), focus)
    }

    /// Gradients of `sum(upstream * render(logits, focus))`.
    pub fn render_grad(&self, logits: &DepthLogits, focus: f64, upstream: &Image) -> Result<CompGradients> {
        self.check(logits)?;
        self.stack.images[0].check_same_shape(upstream)?;
        let pmf = softmax_pmf(logits);
        let (k, t) = split_focus(focus, pmf.planes)?;
        let n = pmf.planes;
        let w = pmf.width;
        let images = &self.stack.images;

        let mut g_logits = DepthLogits::zeros(pmf.height, pmf.width, n);
        // per-row focus partials, reduced in row order
        let row_focus: Vec<f64> = g_logits
            .data
            .par_chunks_mut(w * n)
            .enumerate()
            .map(|(y, grow)| {
                let mut g_shifted = vec![0.0; n];
                let mut gf = 0.0;
                for x in 0..w {
                    let up = upstream.pixel(y, x);
                    for (j, g) in g_shifted.iter_mut().enumerate() {
                        *g = images[j].pixel(y, x).iter().zip(up).map(|(b, u)| b * u).sum();
                    }
                    let p = pmf.pixel(y, x);
                    let gl = &mut grow[x * n..(x + 1) * n];
                    let mut dot = 0.0;
                    for i in 0..n {
                        let lo = g_shifted[shifted_index(i, k, n)];
                        let hi = g_shifted[shifted_index(i, k + 1, n)];
                        gl[i] = (1.0 - t) * lo + t * hi;
                        gf += p[i] * (hi - lo);
                        dot += p[i] * gl[i];
                    }
                    for i in 0..n {
                        gl[i] = p[i] * (gl[i] - dot);
                    }
                }
                gf
            })
            .collect();
        Ok(CompGradients {
            logits: g_logits,
            focus: row_focus.iter().sum(),
        })
    }
}

pub fn render_compositional(img: &Image, logits: &DepthLogits, focus: f64, planes: &DepthPlanes) -> Result<Image> {
    CompRenderer::new(img, planes).render(logits, focus)
}

pub fn render_compositional_grad(
    img: &Image,
    logits: &DepthLogits,
    focus: f64,
    planes: &DepthPlanes,
    upstream: &Image,
) -> Result<CompGradients> {
    CompRenderer::new(img, planes).render_grad(logits, focus, upstream)
}

/// Per-pixel mode of the PMF as a disparity. Ties go to the plane nearest 0,
/// then to the lower plane.
pub fn pmf_to_depth(pmf: &DepthPmf, planes: &DepthPlanes) -> Result<DepthMap> {
    if pmf.planes != planes.len() {
        return Err(Error::shape(planes.len(), pmf.planes));
    }
    let data = pmf
        .data
        .chunks_exact(pmf.planes)
        .map(|p| {
            let mut best = 0;
            for i in 1..p.len() {
                let better = p[i] > p[best]
                    || (p[i] == p[best] && planes.disparity(i).abs() < planes.disparity(best).abs());
                if better {
                    best = i;
                }
            }
            planes.disparity(best) as f64
        })
        .collect();
    ScalarField::new(pmf.height, pmf.width, data)
}

/// One-hot PMF placing each pixel on the plane nearest its disparity.
pub fn depth_to_pmf(depth: &DepthMap, planes: &DepthPlanes) -> DepthPmf {
    let n = planes.len();
    PlaneVolume::from_fn(depth.height(), depth.width(), n, |y, x, p| {
        let d = (depth.get(y, x).round() as i32).clamp(planes.min(), planes.max());
        if planes.index_of(d) == Some(p) {
            1.0
        } else {
            0.0
        }
    })
}

/// Logits whose softmax is within `1e-12` of a one-hot at the given depth.
pub fn depth_to_logits(depth: &DepthMap, planes: &DepthPlanes, confidence: f64) -> DepthLogits {
    let mut l = depth_to_pmf(depth, planes);
    l.data.iter_mut().for_each(|v| *v *= confidence);
    l
}
