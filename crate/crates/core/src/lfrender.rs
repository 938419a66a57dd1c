//! Light-field aperture rendering.
//!
//! The central-view disparity map is expanded to every aperture view, the
//! all-in-focus image is backward-warped into each view, and the views are
//! sheared to the focus disparity and averaged over the aperture.
//!
//! Sign convention: the view at aperture offset `u` sees the central-view
//! point `x - u * D(x, u)`, and refocusing at `f` reads view `u` at
//! `x + u * f`. A point at disparity `z` therefore lands at `x + u * (f - z)`
//! and blurs into a disk of radius `|z - f|` pixels.
//!
//! [`render_light_field`] evaluates the light field lazily at the sheared
//! coordinates rather than resampling a materialized [`LightField`]; this is
//! what makes the in-focus case reproduce the input exactly. The
//! materializing operations ([`expand_depth`], [`warp_to_views`],
//! [`integrate_aperture`]) compute the same quantities on the pixel lattice.

use rayon::prelude::*;

use crate::aperture::{ApertureMask, View};
use crate::error::{Error, Result};
use crate::image::{DepthMap, DepthRange, Image, ScalarField};
use crate::lightfield::{LightField, ViewDepthStack};
use crate::sample::Tap;

pub const DEFAULT_GRID: usize = 13;
pub const DEFAULT_EXPANSION_ITERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LfRenderConfig {
    pub aperture: ApertureMask,
    /// Disparity rendered in focus.
    pub focus: f64,
    pub expansion_iters: usize,
    pub range: DepthRange,
}

impl LfRenderConfig {
    pub fn new(aperture: ApertureMask, focus: f64) -> Self {
        LfRenderConfig {
            aperture,
            focus,
            expansion_iters: DEFAULT_EXPANSION_ITERS,
            range: DepthRange::DEFAULT,
        }
    }

    pub fn with_iters(mut self, k: usize) -> Self {
        self.expansion_iters = k;
        self
    }

    pub fn with_range(mut self, range: DepthRange) -> Self {
        self.range = range;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.expansion_iters < 1 {
            return Err(Error::invalid("expansion_iters must be >= 1"));
        }
        if !self.focus.is_finite() || !self.range.contains(self.focus) {
            return Err(Error::invalid(format!(
                "focus {} outside disparity range [{}, {}]",
                self.focus, self.range.min, self.range.max
            )));
        }
        Ok(())
    }
}

/// Number of row bands used for gradient accumulation. Fixed, so results do
/// not depend on the thread count.
const GRAD_BANDS: usize = 16;

/// Fixed-point depth expansion for one ray, remembering every lookup.
struct Expansion {
    taps: Vec<Tap>,
    depth: f64,
    clamped: bool,
}

impl Expansion {
    fn new(cap: usize) -> Self {
        Expansion {
            taps: Vec::with_capacity(cap),
            depth: 0.0,
            clamped: false,
        }
    }

    /// `D0 = Z(q)`, `Dk = Z(q - u * D(k-1))`, then clamped to `range`.
    fn run(&mut self, z: &DepthMap, qy: f64, qx: f64, view: &View, iters: usize, range: DepthRange) {
        let (h, w) = (z.height(), z.width());
        self.taps.clear();
        let tap = Tap::new(h, w, qy, qx);
        let mut d = tap.value(z.data(), 1, 0);
        self.taps.push(tap);
        for _ in 0..iters {
            let tap = Tap::new(h, w, qy - view.uy * d, qx - view.ux * d);
            d = tap.value(z.data(), 1, 0);
            self.taps.push(tap);
        }
        self.clamped = !range.contains(d);
        self.depth = range.clamp(d);
    }

    /// Derivative of the expanded depth with respect to a shift of the query
    /// point along `u` (i.e. `q = x + u * t`, differentiated in `t`).
    fn tangent_along_view(&self, z: &DepthMap, view: &View) -> f64 {
        if self.clamped {
            return 0.0;
        }
        let dir = |tap: &Tap| {
            let (gy, gx) = tap.grad(z.data(), 1, 0);
            gy * view.uy + gx * view.ux
        };
        let mut t = dir(&self.taps[0]);
        for tap in &self.taps[1..] {
            t = dir(tap) * (1.0 - t);
        }
        t
    }

    /// Scatter `g = dL/dD` back onto the disparity map.
    fn backprop(&self, z: &DepthMap, view: &View, mut g: f64, gz: &mut [f64]) {
        if self.clamped || g == 0.0 {
            return;
        }
        for tap in self.taps[1..].iter().rev() {
            tap.scatter(gz, g);
            let (gy, gx) = tap.grad(z.data(), 1, 0);
            g *= -(gy * view.uy + gx * view.ux);
        }
        self.taps[0].scatter(gz, g);
    }
}

/// Expand a central-view disparity map to every view of the aperture grid.
pub fn expand_depth(z: &DepthMap, aperture: &ApertureMask, iters: usize, range: DepthRange) -> ViewDepthStack {
    let (h, w) = (z.height(), z.width());
    let views = aperture
        .views()
        .par_iter()
        .map(|view| {
            let mut exp = Expansion::new(iters + 1);
            ScalarField::from_fn(h, w, |y, x| {
                if view.ux == 0.0 && view.uy == 0.0 {
                    return range.clamp(z.get(y, x));
                }
                exp.run(z, y as f64, x as f64, view, iters, range);
                exp.depth
            })
        })
        .collect();
    ViewDepthStack::new(aperture.grid_size(), views).expect("one map per view")
}

/// Backward-warp the input into every view: `L(x, u) = I(x - u * D(x, u))`.
pub fn warp_to_views(img: &Image, depth: &ViewDepthStack) -> Result<LightField> {
    depth.view(0).check_dims(img.height(), img.width())?;
    let aperture = ApertureMask::disk(depth.grid_size())?;
    let c = img.channels();
    let views = aperture
        .views()
        .par_iter()
        .zip(depth.views().par_iter())
        .map(|(view, d)| {
            Image::from_fn(img.height(), img.width(), c, |y, x, ch| {
                let dv = d.get(y, x);
                img.sample(y as f64 - view.uy * dv, x as f64 - view.ux * dv, ch)
            })
        })
        .collect();
    LightField::new(depth.grid_size(), views)
}

/// Shear every view to `focus` and take the aperture-weighted mean.
pub fn integrate_aperture(lf: &LightField, aperture: &ApertureMask, focus: f64) -> Result<Image> {
    if !lf.matches(aperture) {
        return Err(Error::shape(
            format!("{0}x{0} views", aperture.grid_size()),
            format!("{0}x{0} views", lf.grid_size()),
        ));
    }
    let (h, w, c) = (lf.height(), lf.width(), lf.channels());
    let norm = 1.0 / aperture.weight_sum();
    let mut out = Image::filled(h, w, c, 0.0);
    out.data_mut()
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, row)| {
            for (i, view) in aperture.active() {
                let v = &lf.views()[i];
                let sy = y as f64 + view.uy * focus;
                for x in 0..w {
                    let tap = Tap::new(h, w, sy, x as f64 + view.ux * focus);
                    for ch in 0..c {
                        row[x * c + ch] += view.weight * norm * tap.value(v.data(), c, ch);
                    }
                }
            }
        });
    Ok(out)
}

fn check_inputs(img: &Image, z: &DepthMap, cfg: &LfRenderConfig) -> Result<()> {
    cfg.validate()?;
    z.check_dims(img.height(), img.width())
}

/// Render a shallow depth-of-field image from an all-in-focus image and its
/// central-view disparity map.
pub fn render_light_field(img: &Image, z: &DepthMap, cfg: &LfRenderConfig) -> Result<Image> {
    check_inputs(img, z, cfg)?;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let norm = 1.0 / cfg.aperture.weight_sum();
    let views: Vec<View> = cfg.aperture.active().map(|(_, v)| *v).collect();
    let mut out = Image::filled(h, w, c, 0.0);
    out.data_mut()
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, row)| {
            let mut exp = Expansion::new(cfg.expansion_iters + 1);
            for x in 0..w {
                for view in &views {
                    let qy = y as f64 + view.uy * cfg.focus;
                    let qx = x as f64 + view.ux * cfg.focus;
                    exp.run(z, qy, qx, view, cfg.expansion_iters, cfg.range);
                    let tap = Tap::new(h, w, qy - view.uy * exp.depth, qx - view.ux * exp.depth);
                    let s = view.weight * norm;
                    for ch in 0..c {
                        row[x * c + ch] += s * tap.value(img.data(), c, ch);
                    }
                }
            }
        });
    Ok(out)
}

/// Gradients of `sum(upstream * render_light_field(img, z, cfg))`.
#[derive(Debug, Clone)]
pub struct LfGradients {
    pub depth: DepthMap,
    pub focus: f64,
}

pub fn render_light_field_grad(
    img: &Image,
    z: &DepthMap,
    cfg: &LfRenderConfig,
    upstream: &Image,
) -> Result<LfGradients> {
    check_inputs(img, z, cfg)?;
    img.check_same_shape(upstream)?;
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let norm = 1.0 / cfg.aperture.weight_sum();
    let views: Vec<View> = cfg.aperture.active().map(|(_, v)| *v).collect();
    let bands = GRAD_BANDS.min(h);
    let rows_per_band = h.div_ceil(bands);

    let partials: Vec<(Vec<f64>, f64)> = (0..bands)
        .into_par_iter()
        .map(|b| {
            let mut gz = vec![0.0; h * w];
            let mut gf = 0.0;
            let mut exp = Expansion::new(cfg.expansion_iters + 1);
            let y_end = ((b + 1) * rows_per_band).min(h);
            for y in b * rows_per_band..y_end {
                for x in 0..w {
                    let up = upstream.pixel(y, x);
                    if up.iter().all(|&g| g == 0.0) {
                        continue;
                    }
                    for view in &views {
                        let s = view.weight * norm;
                        let qy = y as f64 + view.uy * cfg.focus;
                        let qx = x as f64 + view.ux * cfg.focus;
                        exp.run(z, qy, qx, view, cfg.expansion_iters, cfg.range);
                        let tap = Tap::new(h, w, qy - view.uy * exp.depth, qx - view.ux * exp.depth);
                        let (mut gy, mut gx) = (0.0, 0.0);
                        for (ch, &g) in up.iter().enumerate() {
                            let (dy, dx) = tap.grad(img.data(), c, ch);
                            gy += g * dy;
                            gx += g * dx;
                        }
                        let along = s * (gy * view.uy + gx * view.ux);
                        if along == 0.0 {
                            continue;
                        }
                        gf += along * (1.0 - exp.tangent_along_view(z, view));
                        exp.backprop(z, view, -along, &mut gz);
                    }
                }
            }
            (gz, gf)
        })
        .collect();

    let mut gz = vec![0.0; h * w];
    let mut gf = 0.0;
    for (part, f) in &partials {
        for (a, b) in gz.iter_mut().zip(part) {
            *a += b;
        }
        gf += f;
    }
    Ok(LfGradients {
        depth: ScalarField::new(h, w, gz)?,
        focus: gf,
    })
}

/// One-step warped target `Z(x - u * Z(x))` for every view.
pub fn ray_depth_target(z: &DepthMap, aperture: &ApertureMask, range: DepthRange) -> ViewDepthStack {
    expand_depth(z, aperture, 1, range)
}

/// Mean absolute deviation between a per-view depth stack and the one-step
/// warped central depth, over the views inside the aperture. Returns the loss and `dLoss/dD`.
pub fn ray_depth_loss(
    d: &ViewDepthStack,
    z: &DepthMap,
    aperture: &ApertureMask,
    range: DepthRange,
) -> Result<(f64, ViewDepthStack)> {
    if d.grid_size() != aperture.grid_size() {
        return Err(Error::shape(aperture.grid_size(), d.grid_size()));
    }
    z.check_dims(d.height(), d.width())?;
    let target = ray_depth_target(z, aperture, range);
    let n = (aperture.active().count() * z.len()) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(d.views().len());
    for ((dv, tv), view) in d.views().iter().zip(target.views()).zip(aperture.views()) {
        let mut g = vec![0.0; z.len()];
        if view.weight > 0.0 {
            for ((&a, &b), g) in dv.data().iter().zip(tv.data()).zip(g.iter_mut()) {
                loss += (a - b).abs();
                *g = sign(a - b) / n;
            }
        }
        grads.push(ScalarField::new(z.height(), z.width(), g)?);
    }
    Ok((loss / n, ViewDepthStack::new(d.grid_size(), grads)?))
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Ray-depth regularizer for a deterministic expansion: the loss of
/// [`ray_depth_loss`] evaluated at `D = expand_depth(z, iters)`, together
/// with its total derivative with respect to `z` (through both `D` and the
/// warped target).
pub fn ray_depth_term(
    z: &DepthMap,
    aperture: &ApertureMask,
    iters: usize,
    range: DepthRange,
) -> (f64, DepthMap) {
    let (h, w) = (z.height(), z.width());
    let views: Vec<View> = aperture.active().map(|(_, v)| *v).collect();
    let n = (views.len() * h * w) as f64;
    let bands = GRAD_BANDS.min(h);
    let rows_per_band = h.div_ceil(bands);
    let partials: Vec<(Vec<f64>, f64)> = (0..bands)
        .into_par_iter()
        .map(|b| {
            let mut gz = vec![0.0; h * w];
            let mut loss = 0.0;
            let mut full = Expansion::new(iters + 1);
            let mut one = Expansion::new(2);
            let y_end = ((b + 1) * rows_per_band).min(h);
            for y in b * rows_per_band..y_end {
                for x in 0..w {
                    for view in &views {
                        let (qy, qx) = (y as f64, x as f64);
                        full.run(z, qy, qx, view, iters, range);
                        one.run(z, qy, qx, view, 1, range);
                        let diff = full.depth - one.depth;
                        loss += diff.abs();
                        let g = sign(diff) / n;
                        full.backprop(z, view, g, &mut gz);
                        one.backprop(z, view, -g, &mut gz);
                    }
                }
            }
            (gz, loss)
        })
        .collect();
    let mut gz = vec![0.0; h * w];
    let mut loss = 0.0;
    for (part, l) in &partials {
        for (a, b) in gz.iter_mut().zip(part) {
            *a += b;
        }
        loss += l;
    }
    (loss / n, ScalarField::new(h, w, gz).expect("finite gradient"))
}
