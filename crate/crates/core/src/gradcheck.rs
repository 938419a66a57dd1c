//! Finite-difference verification of the analytic gradients.
//!
//! Each check builds a seeded random instance, evaluates the scalar
//! `sum(upstream * forward(params))` and compares central differences against
//! the analytic gradient. The light-field renderer is piecewise smooth
//! (bilinear lookups), so components whose forward and backward one-sided
//! differences disagree, i.e. where the stencil straddles a lattice line, are
//! counted as kinks and excluded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aperture::ApertureMask;
use crate::comprender::{CompRenderer, DepthLogits, DepthPlanes};
use crate::error::Result;
use crate::image::{Image, ScalarField};
use crate::lfrender::{render_light_field, render_light_field_grad, LfRenderConfig};
use crate::smooth::{confidence_from_image, EdgeAwareSolver, SmoothConfig};

pub const LF_THRESHOLD: f64 = 1e-3;
pub const COMP_THRESHOLD: f64 = 1e-4;
pub const SMOOTH_THRESHOLD: f64 = 1e-3;

/// Largest fraction of components that may be excluded as kinks.
pub const MAX_KINK_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub kinks: usize,
    pub threshold: f64,
}

impl GroupReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.threshold
            && self.checked > 0
            && (self.kinks as f64) <= MAX_KINK_FRACTION * (self.checked + self.kinks) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub model: String,
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(GroupReport::passed)
    }
}

/// Options shared by all checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub seed: u64,
    pub size: usize,
    /// Deliberately perturb the analytic gradient; the check must then fail.
    pub corrupt: bool,
}

/// `|a - f| / max(|a|, |f|, floor)`; the floor keeps vanishing components
/// from dominating through round-off.
fn rel_error(a: f64, f: f64, floor: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(floor)
}

struct Comparison {
    analytic: Vec<f64>,
    central: Vec<f64>,
    kink: Vec<bool>,
}

impl Comparison {
    fn report(&self, name: &str, threshold: f64) -> GroupReport {
        let scale = self.central.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (1e-3 * scale).max(1e-12);
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        let mut kinks = 0;
        for i in 0..self.analytic.len() {
            if self.kink[i] {
                kinks += 1;
                continue;
            }
            checked += 1;
            worst = worst.max(rel_error(self.analytic[i], self.central[i], floor));
        }
        GroupReport {
            name: name.to_string(),
            max_rel_error: worst,
            checked,
            kinks,
            threshold,
        }
    }
}

/// Central differences of `f` around `x`, perturbing each coordinate by the
/// first step in `steps`. With kink detection on, a component whose one-sided
/// differences disagree is retried with the following (smaller) steps and
/// only flagged if every step straddles a kink.
fn finite_differences(
    x: &[f64],
    steps: &[f64],
    detect_kinks: bool,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let f0 = if detect_kinks { f(x)? } else { 0.0 };
    let mut xp = x.to_vec();
    let mut central = Vec::with_capacity(x.len());
    let mut kink = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut result = (0.0, true);
        for &h in steps {
            xp[i] = x[i] + h;
            let fp = f(&xp)?;
            xp[i] = x[i] - h;
            let fm = f(&xp)?;
            xp[i] = x[i];
            let c = (fp - fm) / (2.0 * h);
            if !detect_kinks {
                result = (c, false);
                break;
            }
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            result = (c, (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1e-9));
            if !result.1 {
                break;
            }
        }
        central.push(result.0);
        kink.push(result.1);
    }
    Ok((central, kink))
}

fn dot(a: &Image, b: &Image) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn random_image(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Image {
    Image::from_fn(n, n, c, |_, _, _| rng.gen())
}

fn corrupt(v: &mut [f64]) {
    if let Some(first) = v.iter_mut().max_by(|a, b| a.abs().total_cmp(&b.abs())) {
        *first = *first * 1.5 + 1e-3;
    }
}

/// Finite-difference steps for the piecewise-smooth light-field renderer.
const LF_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];

/// Light-field renderer: gradients with respect to disparity and focus.
pub fn check_light_field(opts: CheckOptions, grid: usize, iters: usize) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.size;
    let img = random_image(&mut rng, n, 3);
    let up = Image::from_fn(n, n, 3, |_, _, _| rng.gen_range(-1.0..1.0));
    let (a, b, phase): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let z = ScalarField::from_fn(n, n, |y, x| {
        0.25 + 2.0 * ((0.3 + 0.2 * a) * x as f64 + 6.0 * phase).sin() * ((0.2 + 0.2 * b) * y as f64).cos()
    });
    let focus = 0.3 + rng.gen_range(0.0..0.4);
    let cfg = LfRenderConfig::new(ApertureMask::disk(grid)?, focus).with_iters(iters);

    let mut g = render_light_field_grad(&img, &z, &cfg, &up)?;
    if opts.corrupt {
        corrupt(g.depth.data_mut());
    }
    let (central, kink) = finite_differences(z.data(), &LF_STEPS, true, |zs| {
        let zz = ScalarField::new(n, n, zs.to_vec())?;
        Ok(dot(&render_light_field(&img, &zz, &cfg)?, &up))
    })?;
    let depth = Comparison {
        analytic: g.depth.data().to_vec(),
        central,
        kink,
    }
    .report("depth", LF_THRESHOLD);

    let (central, kink) = finite_differences(&[focus], &LF_STEPS, true, |f| {
        let c = LfRenderConfig { focus: f[0], ..cfg.clone() };
        Ok(dot(&render_light_field(&img, &z, &c)?, &up))
    })?;
    let focus = Comparison {
        analytic: vec![g.focus],
        central,
        kink,
    }
    .report("focus", LF_THRESHOLD);

    Ok(GradCheckReport {
        model: "lf".into(),
        groups: vec![depth, focus],
    })
}

/// Compositional renderer: gradients with respect to logits and focus.
pub fn check_compositional(opts: CheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.size;
    let planes = DepthPlanes::symmetric(6)?;
    let img = random_image(&mut rng, n, 3);
    let up = Image::from_fn(n, n, 3, |_, _, _| rng.gen_range(-1.0..1.0));
    let logits = DepthLogits::from_fn(n, n, planes.len(), |_, _, _| rng.gen_range(-1.5..1.5));
    // strictly between integers so the piecewise-linear shift is smooth
    let focus = rng.gen_range(-2.0..2.0f64).floor() + 0.2 + rng.gen_range(0.0..0.6);
    let r = CompRenderer::new(&img, &planes);

    let mut g = r.render_grad(&logits, focus, &up)?;
    if opts.corrupt {
        corrupt(g.logits.data_mut());
    }
    let (central, kink) = finite_differences(logits.data(), &[1e-3], false, |l| {
        let ll = DepthLogits::new(n, n, planes.len(), l.to_vec())?;
        Ok(dot(&r.render(&ll, focus)?, &up))
    })?;
    let lg = Comparison {
        analytic: g.logits.data().to_vec(),
        central,
        kink,
    }
    .report("logits", COMP_THRESHOLD);

    let (central, kink) = finite_differences(&[focus], &[1e-3], false, |f| Ok(dot(&r.render(&logits, f[0])?, &up)))?;
    let fg = Comparison {
        analytic: vec![g.focus],
        central,
        kink,
    }
    .report("focus", COMP_THRESHOLD);

    Ok(GradCheckReport {
        model: "comp".into(),
        groups: vec![lg, fg],
    })
}

/// Edge-aware smoother: gradient with respect to the target depth.
pub fn check_smoothing(opts: CheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.size;
    let guide = random_image(&mut rng, n, 3);
    let conf = confidence_from_image(&guide);
    let cfg = SmoothConfig {
        tolerance: 1e-13,
        max_iters: 10_000,
        ..Default::default()
    };
    let solver = EdgeAwareSolver::new(&guide, &conf, &cfg)?;
    let target = ScalarField::from_fn(n, n, |_, _| rng.gen_range(-5.0..5.0));
    let up = ScalarField::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));

    let (mut g, _) = solver.grad(&up)?;
    if opts.corrupt {
        corrupt(g.data_mut());
    }
    let (central, kink) = finite_differences(target.data(), &[1e-3], false, |t| {
        let (z, _) = solver.solve(&ScalarField::new(n, n, t.to_vec())?)?;
        Ok(z.data().iter().zip(up.data()).map(|(a, b)| a * b).sum())
    })?;
    Ok(GradCheckReport {
        model: "smooth".into(),
        groups: vec![Comparison {
            analytic: g.data().to_vec(),
            central,
            kink,
        }
        .report("target", SMOOTH_THRESHOLD)],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn opts(seed: u64, size: usize) -> CheckOptions {
        CheckOptions {
            seed,
            size,
            corrupt: false,
        }
    }

    #[test]
    fn light_field_gradients() {
        let r = check_light_field(opts(1, 16), 5, 2).unwrap();
        for g in &r.groups {
            assert!(g.passed(), "{g:?}");
        }
    }

    #[test]
    fn compositional_gradients() {
        let r = check_compositional(opts(2, 16)).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn smoothing_gradients() {
        let r = check_smoothing(opts(3, 12)).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn corrupted_gradients_are_caught() {
        let c = CheckOptions { corrupt: true, ..opts(4, 8) };
        assert!(!check_light_field(c, 5, 2).unwrap().passed());
        assert!(!check_compositional(c).unwrap().passed());
        assert!(!check_smoothing(c).unwrap().passed());
    }
}
