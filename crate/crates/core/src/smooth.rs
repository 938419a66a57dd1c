//! Edge-aware depth smoothing and total-variation regularization.
//!
//! [`EdgeAwareSolver`] minimizes
//!
//! ```text
//! sum_x conf(x) (z(x) - t(x))^2 + lambda * sum_{x~x'} w(x, x') (z(x) - z(x'))^2
//! ```
//!
//! over 4-neighbour pairs, with a bilateral affinity `w` computed from a guide
//! image. The minimizer solves the SPD system `(C + lambda L) z = C t`, with
//! `C = diag(conf)` and `L` the weighted graph Laplacian, so the solve is
//! linear in `t` and its adjoint is one more solve with the same matrix.

use rayon::prelude::*;

use crate::comprender::PlaneVolume;
use crate::error::{Error, Result};
use crate::image::{DepthMap, Image, ScalarField};

/// Lower bound on smoothing confidence; keeps the system positive definite.
pub const CONFIDENCE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothConfig {
    pub sigma_xy: f64,
    pub sigma_color: f64,
    pub lambda: f64,
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        SmoothConfig {
            sigma_xy: 8.0,
            sigma_color: 0.1,
            lambda: 1.0,
            max_iters: 200,
            tolerance: 1e-6,
        }
    }
}

impl SmoothConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.sigma_xy) || !ok(self.sigma_color) || !ok(self.tolerance) || self.max_iters == 0 {
            return Err(Error::invalid("smoothing sigmas, tolerance and iterations must be positive"));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::invalid("smoothing lambda must be non-negative"));
        }
        Ok(())
    }
}

/// Gradient-magnitude confidence, normalized by its maximum and floored at
/// [`CONFIDENCE_FLOOR`].
pub fn confidence_from_image(img: &Image) -> ScalarField {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let raw = ScalarField::from_fn(h, w, |y, x| {
        let mut s = 0.0;
        for ch in 0..c {
            let v = img.get(y, x, ch);
            let gx = if x + 1 < w { img.get(y, x + 1, ch) - v } else { 0.0 };
            let gy = if y + 1 < h { img.get(y + 1, x, ch) - v } else { 0.0 };
            s += gx * gx + gy * gy;
        }
        s.sqrt()
    });
    let peak = raw.max_value();
    raw.map(|v| {
        let n = if peak > 0.0 { v / peak } else { 0.0 };
        n.max(CONFIDENCE_FLOOR)
    })
}

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// Final relative residual `|b - A x| / |b|`.
    pub residual: f64,
    pub converged: bool,
}

/// Sum of per-row partials in row order; independent of thread count.
fn dot(a: &[f64], b: &[f64], row: usize) -> f64 {
    let partials: Vec<f64> = a
        .par_chunks(row)
        .zip(b.par_chunks(row))
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p * q).sum())
        .collect();
    partials.iter().sum()
}

/// The smoothing system for one guide image and confidence map.
#[derive(Debug, Clone)]
pub struct EdgeAwareSolver {
    height: usize,
    width: usize,
    conf: Vec<f64>,
    /// `lambda * w` between `(y, x)` and `(y, x + 1)`.
    right: Vec<f64>,
    /// `lambda * w` between `(y, x)` and `(y + 1, x)`.
    down: Vec<f64>,
    diag: Vec<f64>,
    cfg: SmoothConfig,
}

impl EdgeAwareSolver {
    pub fn new(guide: &Image, conf: &ScalarField, cfg: &SmoothConfig) -> Result<Self> {
        cfg.validate()?;
        let (h, w, c) = (guide.height(), guide.width(), guide.channels());
        conf.check_dims(h, w)?;
        if conf.data().iter().any(|&v| !(v >= CONFIDENCE_FLOOR * (1.0 - 1e-12))) {
            return Err(Error::invalid(format!(
                "smoothing confidence must be >= {CONFIDENCE_FLOOR}"
            )));
        }
        let spatial = (-1.0 / (2.0 * cfg.sigma_xy * cfg.sigma_xy)).exp();
        let affinity = |y0: usize, x0: usize, y1: usize, x1: usize| {
            let d2: f64 = (0..c)
                .map(|ch| {
                    let d = guide.get(y0, x0, ch) - guide.get(y1, x1, ch);
                    d * d
                })
                .sum();
            cfg.lambda * spatial * (-d2 / (2.0 * cfg.sigma_color * cfg.sigma_color)).exp()
        };
        let mut right = vec![0.0; h * w];
        let mut down = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    right[y * w + x] = affinity(y, x, y, x + 1);
                }
                if y + 1 < h {
                    down[y * w + x] = affinity(y, x, y + 1, x);
                }
            }
        }
        let mut diag = conf.data().to_vec();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                diag[i] += right[i] + down[i];
                if x > 0 {
                    diag[i] += right[i - 1];
                }
                if y > 0 {
                    diag[i] += down[i - w];
                }
            }
        }
        Ok(EdgeAwareSolver {
            height: h,
            width: w,
            conf: conf.data().to_vec(),
            right,
            down,
            diag,
            cfg: cfg.clone(),
        })
    }

    pub fn config(&self) -> &SmoothConfig {
        &self.cfg
    }

    /// `out = (C + lambda L) v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let w = self.width;
        let h = self.height;
        out.par_chunks_mut(w).enumerate().for_each(|(y, orow)| {
            for x in 0..w {
                let i = y * w + x;
                let mut acc = self.diag[i] * v[i];
                if x + 1 < w {
                    acc -= self.right[i] * v[i + 1];
                }
                if x > 0 {
                    acc -= self.right[i - 1] * v[i - 1];
                }
                if y + 1 < h {
                    acc -= self.down[i] * v[i + w];
                }
                if y > 0 {
                    acc -= self.down[i - w] * v[i - w];
                }
                orow[x] = acc;
            }
        });
    }

    /// Dense copy of the system matrix (row-major, `n x n`). For tests and
    /// diagnostics on small problems.
    pub fn dense_matrix(&self) -> Vec<f64> {
        let n = self.height * self.width;
        let mut a = vec![0.0; n * n];
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            self.apply(&e, &mut col);
            for i in 0..n {
                a[i * n + j] = col[i];
            }
            e[j] = 0.0;
        }
        a
    }

    /// Jacobi-preconditioned CG from `x`. Returns the best iterate seen.
    fn cg(&self, b: &[f64], x: &mut Vec<f64>) -> SolveReport {
        let n = b.len();
        let row = self.width;
        let b_norm = dot(b, b, row).sqrt();
        if b_norm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return SolveReport {
                iterations: 0,
                residual: 0.0,
                converged: true,
            };
        }
        let mut ax = vec![0.0; n];
        self.apply(x, &mut ax);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut rel = dot(&r, &r, row).sqrt() / b_norm;
        let mut best = (rel, x.clone());
        if rel <= self.cfg.tolerance {
            return SolveReport {
                iterations: 0,
                residual: rel,
                converged: true,
            };
        }
        let mut z: Vec<f64> = r.iter().zip(&self.diag).map(|(r, d)| r / d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z, row);
        let mut ap = vec![0.0; n];
        for it in 1..=self.cfg.max_iters {
            self.apply(&p, &mut ap);
            let pap = dot(&p, &ap, row);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            x.par_iter_mut().zip(&p).for_each(|(x, p)| *x += alpha * p);
            r.par_iter_mut().zip(&ap).for_each(|(r, a)| *r -= alpha * a);
            rel = dot(&r, &r, row).sqrt() / b_norm;
            if rel < best.0 {
                best = (rel, x.clone());
            }
            if rel <= self.cfg.tolerance {
                return SolveReport {
                    iterations: it,
                    residual: rel,
                    converged: true,
                };
            }
            z.par_iter_mut()
                .zip(&r)
                .zip(&self.diag)
                .for_each(|((z, r), d)| *z = r / d);
            let rz_new = dot(&r, &z, row);
            let beta = rz_new / rz;
            rz = rz_new;
            p.par_iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
        }
        *x = best.1;
        SolveReport {
            iterations: self.cfg.max_iters,
            residual: best.0,
            converged: false,
        }
    }

    /// Smooth `target`. Non-convergence is reported, not fatal.
    pub fn solve(&self, target: &DepthMap) -> Result<(DepthMap, SolveReport)> {
        target.check_dims(self.height, self.width)?;
        let b: Vec<f64> = self.conf.iter().zip(target.data()).map(|(c, t)| c * t).collect();
        let mut x = target.data().to_vec();
        let report = self.cg(&b, &mut x);
        Ok((ScalarField::new(self.height, self.width, x)?, report))
    }

    /// `dLoss/dtarget = C (C + lambda L)^-1 upstream`.
    pub fn grad(&self, upstream: &DepthMap) -> Result<(DepthMap, SolveReport)> {
        upstream.check_dims(self.height, self.width)?;
        let mut x: Vec<f64> = upstream.data().iter().zip(&self.diag).map(|(g, d)| g / d).collect();
        let report = self.cg(upstream.data(), &mut x);
        let g = x.iter().zip(&self.conf).map(|(x, c)| x * c).collect();
        Ok((ScalarField::new(self.height, self.width, g)?, report))
    }
}

pub fn solve_edge_aware(
    target: &DepthMap,
    guide: &Image,
    conf: &ScalarField,
    cfg: &SmoothConfig,
) -> Result<(DepthMap, SolveReport)> {
    EdgeAwareSolver::new(guide, conf, cfg)?.solve(target)
}

pub fn solve_edge_aware_grad(
    guide: &Image,
    conf: &ScalarField,
    cfg: &SmoothConfig,
    upstream: &DepthMap,
) -> Result<(DepthMap, SolveReport)> {
    EdgeAwareSolver::new(guide, conf, cfg)?.grad(upstream)
}

/// Anisotropic total variation `sum_p |dP/dx|_1 + |dP/dy|_1` with forward
/// differences `[-1, 1]` in x and y, per plane. Returns the loss and its
/// subgradient (0 where a difference is exactly 0).
pub fn tv_loss(vol: &PlaneVolume) -> (f64, PlaneVolume) {
    let (h, w, n) = (vol.height(), vol.width(), vol.planes());
    let d = vol.data();
    let mut grad = PlaneVolume::zeros(h, w, n);
    let g = grad.data_mut();
    let mut loss = 0.0;
    let idx = |y: usize, x: usize, p: usize| (y * w + x) * n + p;
    for y in 0..h {
        for x in 0..w {
            for p in 0..n {
                let i = idx(y, x, p);
                if x + 1 < w {
                    let j = idx(y, x + 1, p);
                    let diff = d[j] - d[i];
                    loss += diff.abs();
                    let s = crate::lfrender::sign(diff);
                    g[j] += s;
                    g[i] -= s;
                }
                if y + 1 < h {
                    let j = idx(y + 1, x, p);
                    let diff = d[j] - d[i];
                    loss += diff.abs();
                    let s = crate::lfrender::sign(diff);
                    g[j] += s;
                    g[i] -= s;
                }
            }
        }
    }
    (loss, grad)
}
