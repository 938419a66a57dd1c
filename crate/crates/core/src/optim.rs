//! Aperture-supervised depth estimation.
//!
//! Per-pixel depth variables (light-field model) or per-pixel plane logits
//! (compositional model) are fitted so that rendering the all-in-focus image
//! with each supervision aperture reproduces the matching shallow
//! depth-of-field image. Every target has its own unknown focus disparity.

use std::fmt::Write as _;
use std::path::Path;

use crate::aperture::ApertureMask;
use crate::comprender::{
    pmf_to_depth, softmax_backward, softmax_pmf, CompRenderer, DepthLogits, DepthPlanes,
};
use crate::error::{Error, Result};
use crate::image::{DepthMap, DepthRange, Image, ScalarField};
use crate::lfrender::{
    ray_depth_term, render_light_field, render_light_field_grad, LfRenderConfig,
    DEFAULT_EXPANSION_ITERS,
};
use crate::smooth::{confidence_from_image, tv_loss, EdgeAwareSolver, SmoothConfig};

/// Mean absolute error over pixels and channels, with its (sub)gradient
/// with respect to `a`.
pub fn l1_image_loss(a: &Image, b: &Image) -> Result<(f64, Image)> {
    a.check_same_shape(b)?;
    let n = a.data().len() as f64;
    let mut loss = 0.0;
    let mut g = Vec::with_capacity(a.data().len());
    for (p, q) in a.data().iter().zip(b.data()) {
        let d = p - q;
        loss += d.abs();
        g.push(crate::lfrender::sign(d) / n);
    }
    Ok((loss / n, Image::new(a.height(), a.width(), a.channels(), g)?))
}

/// Adam moments for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_betas(mut self, beta1: f64, beta2: f64, eps: f64) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self.eps = eps;
        self
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(params.len(), grads.len()));
    }
    state.t += 1;
    let c1 = 1.0 - state.beta1.powi(state.t as i32);
    let c2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub image: Image,
    pub aperture: ApertureMask,
}

/// An all-in-focus image and the shallow depth-of-field images that
/// supervise it.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionSet {
    pub all_in_focus: Image,
    pub targets: Vec<Target>,
}

impl SupervisionSet {
    pub fn new(all_in_focus: Image, targets: Vec<Target>) -> Result<Self> {
        if targets.is_empty() {
            return Err(Error::invalid("supervision needs at least one target"));
        }
        for t in &targets {
            all_in_focus.check_same_shape(&t.image)?;
        }
        Ok(SupervisionSet { all_in_focus, targets })
    }

    pub fn height(&self) -> usize {
        self.all_in_focus.height()
    }

    pub fn width(&self) -> usize {
        self.all_in_focus.width()
    }
}

/// Where the edge-aware smoother runs in the light-field pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Smoothing {
    /// Every step, before rendering; gradients flow through it.
    InLoop,
    /// Once, on the final depth.
    PostHoc,
    Off,
}

impl std::str::FromStr for Smoothing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "in_loop" => Ok(Smoothing::InLoop),
            "post_hoc" => Ok(Smoothing::PostHoc),
            "off" => Ok(Smoothing::Off),
            _ => Err(Error::invalid(format!("unknown smoothing mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimConfig {
    pub steps: usize,
    pub lr_depth: f64,
    pub lr_logits: f64,
    pub lr_focus: f64,
    pub lambda_d: f64,
    pub lambda_tv: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Bounds of the tanh depth parameterization.
    pub depth_bounds: DepthRange,
    pub expansion_iters: usize,
    pub smoothing: Smoothing,
    pub smooth: SmoothConfig,
    /// Initial disparity of every pixel (light-field model). Zero depth with
    /// zero focus is a stationary point, so the default is off zero.
    pub init_depth: f64,
    pub init_focus: f64,
    /// Plane set of the compositional model.
    pub planes: DepthPlanes,
    pub train_depth: bool,
    pub train_focus: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            steps: 1000,
            lr_depth: 3e-2,
            lr_logits: 3e-2,
            lr_focus: 1e-2,
            lambda_d: 0.1,
            lambda_tv: 1e-10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            depth_bounds: DepthRange { min: -10.0, max: 10.0 },
            expansion_iters: DEFAULT_EXPANSION_ITERS,
            smoothing: Smoothing::InLoop,
            smooth: SmoothConfig::default(),
            init_depth: -1.0,
            init_focus: 0.0,
            planes: DepthPlanes::default(),
            train_depth: true,
            train_focus: true,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if self.steps == 0 || !pos(self.lr_depth) || !pos(self.lr_logits) || !pos(self.lr_focus) {
            return Err(Error::invalid("steps and learning rates must be positive"));
        }
        if !(self.lambda_d >= 0.0 && self.lambda_tv >= 0.0) {
            return Err(Error::invalid("regularizer weights must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !pos(self.eps) {
            return Err(Error::invalid("Adam betas must lie in [0, 1) and eps be positive"));
        }
        if self.expansion_iters == 0 {
            return Err(Error::invalid("expansion_iters must be >= 1"));
        }
        let b = self.depth_bounds;
        if !(b.min < b.max) || !DepthRange::DEFAULT.contains(b.min) || !DepthRange::DEFAULT.contains(b.max) {
            return Err(Error::invalid("depth bounds must be an increasing pair inside the disparity range"));
        }
        if !(self.init_depth > b.min && self.init_depth < b.max) {
            return Err(Error::invalid("init_depth must lie strictly inside the depth bounds"));
        }
        if !DepthRange::DEFAULT.contains(self.init_focus) {
            return Err(Error::invalid("init_focus outside the disparity range"));
        }
        self.smooth.validate()
    }

    fn adam(&self, len: usize) -> AdamState {
        AdamState::new(len).with_betas(self.beta1, self.beta2, self.eps)
    }
}

/// Objective value split into its parts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub data: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub parts: LossParts,
    pub focus: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<LossRecord>,
}

impl LossTrace {
    pub fn totals(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.parts.total).collect()
    }

    pub fn to_csv(&self) -> String {
        let k = self.records.first().map_or(0, |r| r.focus.len());
        let mut s = String::from("step,total,data,reg");
        for i in 0..k {
            let _ = write!(s, ",dhat_{i}");
        }
        s.push('\n');
        for r in &self.records {
            let _ = write!(s, "{},{:e},{:e},{:e}", r.step, r.parts.total, r.parts.data, r.parts.reg);
            for f in &r.focus {
                let _ = write!(s, ",{f:e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(std::fs::write(path, self.to_csv())?)
    }

    /// Moving average over `window` records.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let t = self.totals();
        if window == 0 || t.len() < window {
            return Vec::new();
        }
        t.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
    }
}

fn check_finite(parts: &LossParts, step: usize) -> Result<()> {
    if parts.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!(
            "loss became {} at step {step} (data {}, reg {})",
            parts.total, parts.data, parts.reg
        )))
    }
}

fn check_focus(sup: &SupervisionSet, focus: &[f64]) -> Result<()> {
    if focus.len() != sup.targets.len() {
        return Err(Error::shape(sup.targets.len(), focus.len()));
    }
    Ok(())
}

struct LfEval {
    parts: LossParts,
    grad_depth: DepthMap,
    grad_focus: Vec<f64>,
}

fn lf_eval(sup: &SupervisionSet, z: &DepthMap, focus: &[f64], cfg: &OptimConfig, with_grad: bool) -> Result<LfEval> {
    check_focus(sup, focus)?;
    let (h, w) = (sup.height(), sup.width());
    let mut data = 0.0;
    let mut reg = 0.0;
    let mut gz = vec![0.0; h * w];
    let mut gf = vec![0.0; focus.len()];
    let mut cached: Vec<(&ApertureMask, f64, DepthMap)> = Vec::new();
    for (i, t) in sup.targets.iter().enumerate() {
        let rc = LfRenderConfig::new(t.aperture.clone(), focus[i]).with_iters(cfg.expansion_iters);
        let rendered = render_light_field(&sup.all_in_focus, z, &rc)?;
        let (l, g) = l1_image_loss(&rendered, &t.image)?;
        data += l;
        if cfg.lambda_d > 0.0 {
            // the term does not depend on focus; reuse it across equal apertures
            let k = match cached.iter().position(|(a, _, _)| *a == &t.aperture) {
                Some(k) => k,
                None => {
                    let (ld, gd) = ray_depth_term(z, &t.aperture, cfg.expansion_iters, rc.range);
                    cached.push((&t.aperture, ld, gd));
                    cached.len() - 1
                }
            };
            let (_, ld, gd) = &cached[k];
            reg += cfg.lambda_d * ld;
            if with_grad {
                gz.iter_mut().zip(gd.data()).for_each(|(a, b)| *a += cfg.lambda_d * b);
            }
        }
        if with_grad {
            let gr = render_light_field_grad(&sup.all_in_focus, z, &rc, &g)?;
            gz.iter_mut().zip(gr.depth.data()).for_each(|(a, b)| *a += b);
            gf[i] = gr.focus;
        }
    }
    Ok(LfEval {
        parts: LossParts {
            total: data + reg,
            data,
            reg,
        },
        grad_depth: ScalarField::new(h, w, gz)?,
        grad_focus: gf,
    })
}

/// Light-field objective at a given (already smoothed) depth map.
pub fn lf_loss(sup: &SupervisionSet, z: &DepthMap, focus: &[f64], cfg: &OptimConfig) -> Result<LossParts> {
    z.check_dims(sup.height(), sup.width())?;
    Ok(lf_eval(sup, z, focus, cfg, false)?.parts)
}

/// Maps an unbounded variable into the depth bounds.
fn bounded(theta: f64, b: DepthRange) -> (f64, f64) {
    let t = theta.tanh();
    let half = 0.5 * (b.max - b.min);
    (b.min + half * (t + 1.0), half * (1.0 - t * t))
}

fn unbounded(z: f64, b: DepthRange) -> f64 {
    let s = (2.0 * (z - b.min) / (b.max - b.min) - 1.0).clamp(-1.0 + 1e-12, 1.0 - 1e-12);
    s.atanh()
}

#[derive(Debug, Clone)]
pub struct LfResult {
    /// Final depth, smoothed unless smoothing is off.
    pub depth: DepthMap,
    /// Depth before smoothing.
    pub raw_depth: DepthMap,
    pub focus: Vec<f64>,
    pub trace: LossTrace,
}

/// Initial values for [`optimize_depth_lf_from`].
#[derive(Debug, Clone)]
pub struct LfInit {
    pub depth: DepthMap,
    pub focus: Vec<f64>,
}

pub fn optimize_depth_lf(sup: &SupervisionSet, cfg: &OptimConfig) -> Result<LfResult> {
    let init = LfInit {
        depth: ScalarField::filled(sup.height(), sup.width(), cfg.init_depth),
        focus: vec![cfg.init_focus; sup.targets.len()],
    };
    optimize_depth_lf_from(sup, cfg, &init)
}

/// Light-field optimization from explicit initial values. With
/// `train_depth` off the initial depth is used as given, without smoothing.
pub fn optimize_depth_lf_from(sup: &SupervisionSet, cfg: &OptimConfig, init: &LfInit) -> Result<LfResult> {
    cfg.validate()?;
    init.depth.check_dims(sup.height(), sup.width())?;
    check_focus(sup, &init.focus)?;
    let b = cfg.depth_bounds;
    let range = DepthRange::DEFAULT;
    let solver = EdgeAwareSolver::new(&sup.all_in_focus, &confidence_from_image(&sup.all_in_focus), &cfg.smooth)?;
    let smooth_in_loop = cfg.train_depth && cfg.smoothing == Smoothing::InLoop;

    let mut theta: Vec<f64> = init.depth.data().iter().map(|&z| unbounded(z, b)).collect();
    let mut focus = init.focus.clone();
    let mut st_theta = cfg.adam(theta.len());
    let mut st_focus = cfg.adam(focus.len());
    let mut trace = LossTrace::default();
    let (h, w) = (sup.height(), sup.width());

    let depth_of = |theta: &[f64]| -> Result<(DepthMap, Vec<f64>)> {
        if !cfg.train_depth {
            return Ok((init.depth.clone(), vec![0.0; theta.len()]));
        }
        let (z, dz): (Vec<f64>, Vec<f64>) = theta.iter().map(|&t| bounded(t, b)).unzip();
        Ok((ScalarField::new(h, w, z)?, dz))
    };

    for step in 0..cfg.steps {
        let (raw, dz) = depth_of(&theta)?;
        let z = if smooth_in_loop { solver.solve(&raw)?.0 } else { raw };
        let ev = lf_eval(sup, &z, &focus, cfg, true)?;
        check_finite(&ev.parts, step)?;
        trace.records.push(LossRecord {
            step,
            parts: ev.parts,
            focus: focus.clone(),
        });
        if cfg.train_depth {
            let g_raw = if smooth_in_loop { solver.grad(&ev.grad_depth)?.0 } else { ev.grad_depth };
            let g_theta: Vec<f64> = g_raw.data().iter().zip(&dz).map(|(g, d)| g * d).collect();
            adam_step(&mut theta, &g_theta, &mut st_theta, cfg.lr_depth)?;
        }
        if cfg.train_focus {
            adam_step(&mut focus, &ev.grad_focus, &mut st_focus, cfg.lr_focus)?;
            focus.iter_mut().for_each(|f| *f = range.clamp(*f));
        }
    }

    let (raw, _) = depth_of(&theta)?;
    let depth = if cfg.train_depth && cfg.smoothing != Smoothing::Off {
        solver.solve(&raw)?.0
    } else {
        raw.clone()
    };
    let last = lf_loss(sup, &depth, &focus, cfg)?;
    check_finite(&last, cfg.steps)?;
    trace.records.push(LossRecord {
        step: cfg.steps,
        parts: last,
        focus: focus.clone(),
    });
    Ok(LfResult {
        depth,
        raw_depth: raw,
        focus,
        trace,
    })
}

struct CompEval {
    parts: LossParts,
    grad_logits: Option<DepthLogits>,
    grad_focus: Vec<f64>,
}

fn comp_eval(
    renderer: &CompRenderer,
    sup: &SupervisionSet,
    logits: &DepthLogits,
    focus: &[f64],
    cfg: &OptimConfig,
    with_grad: bool,
) -> Result<CompEval> {
    check_focus(sup, focus)?;
    let pmf = softmax_pmf(logits);
    let mut data = 0.0;
    let mut gl = with_grad.then(|| DepthLogits::zeros(logits.height(), logits.width(), logits.planes()));
    let mut gf = vec![0.0; focus.len()];
    for (i, t) in sup.targets.iter().enumerate() {
        let rendered = renderer.render_pmf(&pmf, focus[i])?;
        let (l, g) = l1_image_loss(&rendered, &t.image)?;
        data += l;
        if let Some(gl) = gl.as_mut() {
            let gr = renderer.render_grad(logits, focus[i], &g)?;
            gl.data_mut().iter_mut().zip(gr.logits.data()).for_each(|(a, b)| *a += b);
            gf[i] = gr.focus;
        }
    }
    // the TV term appears once per target in the summed objective
    let k = sup.targets.len() as f64;
    let mut reg = 0.0;
    if cfg.lambda_tv > 0.0 {
        let (tv, gtv) = tv_loss(&pmf);
        reg = k * cfg.lambda_tv * tv;
        if let Some(gl) = gl.as_mut() {
            let back = softmax_backward(&pmf, &gtv)?;
            let s = k * cfg.lambda_tv;
            gl.data_mut().iter_mut().zip(back.data()).for_each(|(a, b)| *a += s * b);
        }
    }
    Ok(CompEval {
        parts: LossParts {
            total: data + reg,
            data,
            reg,
        },
        grad_logits: gl,
        grad_focus: gf,
    })
}

/// Compositional objective at given logits.
pub fn comp_loss(sup: &SupervisionSet, logits: &DepthLogits, focus: &[f64], cfg: &OptimConfig) -> Result<LossParts> {
    let renderer = CompRenderer::new(&sup.all_in_focus, &cfg.planes);
    Ok(comp_eval(&renderer, sup, logits, focus, cfg, false)?.parts)
}

#[derive(Debug, Clone)]
pub struct CompResult {
    pub logits: DepthLogits,
    /// Per-pixel mode of the final PMF.
    pub depth: DepthMap,
    pub focus: Vec<f64>,
    pub trace: LossTrace,
}

/// Compositional optimization from uniform logits. The compositional model
/// always blurs with the full unit disk, so target apertures are not used.
pub fn optimize_depth_comp(sup: &SupervisionSet, cfg: &OptimConfig) -> Result<CompResult> {
    let n = cfg.planes.len();
    let logits = DepthLogits::zeros(sup.height(), sup.width(), n);
    optimize_depth_comp_from(sup, cfg, logits, vec![cfg.init_focus; sup.targets.len()])
}

pub fn optimize_depth_comp_from(
    sup: &SupervisionSet,
    cfg: &OptimConfig,
    mut logits: DepthLogits,
    mut focus: Vec<f64>,
) -> Result<CompResult> {
    cfg.validate()?;
    check_focus(sup, &focus)?;
    let renderer = CompRenderer::new(&sup.all_in_focus, &cfg.planes);
    let range = cfg.planes.range();
    let mut st_logits = cfg.adam(logits.data().len());
    let mut st_focus = cfg.adam(focus.len());
    let mut trace = LossTrace::default();
    for step in 0..cfg.steps {
        let ev = comp_eval(&renderer, sup, &logits, &focus, cfg, true)?;
        check_finite(&ev.parts, step)?;
        trace.records.push(LossRecord {
            step,
            parts: ev.parts,
            focus: focus.clone(),
        });
        if cfg.train_depth {
            let g = ev.grad_logits.expect("gradient requested");
            adam_step(logits.data_mut(), g.data(), &mut st_logits, cfg.lr_logits)?;
        }
        if cfg.train_focus {
            adam_step(&mut focus, &ev.grad_focus, &mut st_focus, cfg.lr_focus)?;
            focus.iter_mut().for_each(|f| *f = range.clamp(*f));
        }
    }
    let last = comp_eval(&renderer, sup, &logits, &focus, cfg, false)?.parts;
    check_finite(&last, cfg.steps)?;
    trace.records.push(LossRecord {
        step: cfg.steps,
        parts: last,
        focus: focus.clone(),
    });
    let depth = pmf_to_depth(&softmax_pmf(&logits), &cfg.planes)?;
    Ok(CompResult {
        logits,
        depth,
        focus,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::comprender::depth_to_logits;
    use crate::scenesim::{central_view, make_test_scene, oracle_sdof, SceneKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.gen())
    }

    #[test]
    fn l1_values() {
        let a = noise(5, 6, 1);
        assert_eq!(l1_image_loss(&a, &a).unwrap().0, 0.0);
        let b = Image::from_fn(5, 6, 3, |y, x, c| a.get(y, x, c) + 0.5);
        assert!((l1_image_loss(&a, &b).unwrap().0 - 0.5).abs() < 1e-12);
        let b = noise(5, 6, 2);
        let (l, g) = l1_image_loss(&a, &b).unwrap();
        let mut s = 0.0;
        for y in 0..5 {
            for x in 0..6 {
                for c in 0..3 {
                    let d = a.get(y, x, c) - b.get(y, x, c);
                    s += d.abs();
                    assert_eq!(g.get(y, x, c), d.signum() / 90.0);
                }
            }
        }
        assert!((l - s / 90.0).abs() < 1e-12);
        assert!(l1_image_loss(&a, &noise(5, 5, 3)).is_err());
    }

    #[test]
    fn adam_zero_gradient() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        st.m = vec![0.5, 0.5];
        st.v = vec![0.25, 0.25];
        adam_step(&mut p, &[0.0, 0.0], &mut st, 0.1).unwrap();
        assert_eq!(st.m, vec![0.45, 0.45]);
        assert!(st.v[0] < 0.25);
        // moments carried over still move the parameters; from a fresh state
        // a zero gradient does nothing
        let mut q = vec![1.0, -2.0];
        adam_step(&mut q, &[0.0, 0.0], &mut AdamState::new(2), 0.1).unwrap();
        assert_eq!(q, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_constant_gradient_step_is_lr() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let mut prev = 0.0;
        for _ in 0..500 {
            adam_step(&mut p, &[3.7], &mut st, 0.01).unwrap();
            let step = prev - p[0];
            prev = p[0];
            assert!((step - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_quadratic() {
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        for _ in 0..200 {
            let g = 2.0 * p[0];
            adam_step(&mut p, &[g], &mut st, 0.1).unwrap();
        }
        assert!(p[0].abs() < 1e-2, "{}", p[0]);
    }

    #[test]
    fn tanh_parameterization_round_trip() {
        let b = DepthRange { min: -10.0, max: 10.0 };
        for z in [-9.5, -3.0, 0.0, 0.7, 9.9] {
            assert!((bounded(unbounded(z, b), b).0 - z).abs() < 1e-9);
        }
        for t in [-1e3, -5.0, 0.0, 40.0] {
            let (z, _) = bounded(t, b);
            assert!((-10.0..=10.0).contains(&z));
        }
        let (t, h) = (0.3, 1e-6);
        let fd = (bounded(t + h, b).0 - bounded(t - h, b).0) / (2.0 * h);
        assert!((fd - bounded(t, b).1).abs() < 1e-6);
    }

    fn pinhole_set(img: &Image) -> SupervisionSet {
        let a = ApertureMask::disk(1).unwrap();
        SupervisionSet::new(
            img.clone(),
            vec![Target {
                image: img.clone(),
                aperture: a,
            }],
        )
        .unwrap()
    }

    #[test]
    fn pinhole_supervision_is_a_no_op() {
        let img = noise(12, 12, 4);
        let sup = pinhole_set(&img);
        let cfg = OptimConfig {
            steps: 5,
            smoothing: Smoothing::Off,
            init_depth: 2.5,
            ..Default::default()
        };
        let r = optimize_depth_lf(&sup, &cfg).unwrap();
        assert_eq!(r.trace.records[0].parts.total, 0.0);
        assert!(r.depth.data().iter().all(|&z| (z - 2.5).abs() < 1e-12));
        assert_eq!(r.focus, vec![0.0]);
    }

    #[test]
    fn supervision_validation() {
        let img = noise(4, 4, 5);
        assert!(SupervisionSet::new(img.clone(), vec![]).is_err());
        let t = Target {
            image: noise(4, 5, 6),
            aperture: ApertureMask::disk(3).unwrap(),
        };
        assert!(SupervisionSet::new(img, vec![t]).is_err());
        let bad = OptimConfig {
            init_depth: 12.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn non_finite_supervision_aborts() {
        let img = noise(8, 8, 7);
        let mut sup = pinhole_set(&img);
        sup.targets[0].image.data_mut()[3] = f64::NAN;
        let cfg = OptimConfig {
            steps: 2,
            smoothing: Smoothing::Off,
            ..Default::default()
        };
        assert!(matches!(optimize_depth_lf(&sup, &cfg), Err(Error::NonFinite(_))));
    }

    #[test]
    fn csv_layout() {
        let trace = LossTrace {
            records: vec![LossRecord {
                step: 0,
                parts: LossParts {
                    total: 1.5,
                    data: 1.0,
                    reg: 0.5,
                },
                focus: vec![0.25, -1.0],
            }],
        };
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,total,data,reg,dhat_0,dhat_1"));
        let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row, vec![0.0, 1.5, 1.0, 0.5, 0.25, -1.0]);
    }

    #[test]
    fn focus_recovery_with_frozen_depth() {
        let scene = make_test_scene(SceneKind::TwoPlane, 3, 32).unwrap();
        let (aif, gt) = central_view(&scene);
        let a = ApertureMask::disk(7).unwrap();
        let sup = SupervisionSet::new(
            aif,
            vec![Target {
                image: oracle_sdof(&scene, &a, 2.0),
                aperture: a,
            }],
        )
        .unwrap();
        let cfg = OptimConfig {
            steps: 400,
            lr_focus: 3e-2,
            train_depth: false,
            lambda_d: 0.0,
            ..Default::default()
        };
        let init = LfInit {
            depth: gt.clone(),
            focus: vec![0.0],
        };
        let r = optimize_depth_lf_from(&sup, &cfg, &init).unwrap();
        assert!((r.focus[0] - 2.0).abs() < 0.5, "lf focus {:?}", r.focus);

        let logits = depth_to_logits(&gt, &cfg.planes, 30.0);
        let c = optimize_depth_comp_from(&sup, &cfg, logits, vec![0.0]).unwrap();
        assert!((c.focus[0] - 2.0).abs() < 0.5, "comp focus {:?}", c.focus);
    }

    fn argmax_variance(depth: &DepthMap) -> f64 {
        let n = depth.len() as f64;
        let mean = depth.data().iter().sum::<f64>() / n;
        depth.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }

    #[test]
    fn tv_dominated_pmf_is_constant() {
        let img = Image::filled(12, 12, 3, 0.4);
        let a = ApertureMask::disk(5).unwrap();
        let sup = SupervisionSet::new(img.clone(), vec![Target { image: img, aperture: a }]).unwrap();
        let cfg = OptimConfig {
            steps: 300,
            lambda_tv: 1e3,
            ..Default::default()
        };
        // start from a noisy distribution so TV has something to flatten
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = DepthLogits::from_fn(12, 12, cfg.planes.len(), |_, _, _| rng.gen::<f64>());
        let r = optimize_depth_comp_from(&sup, &cfg, logits, vec![0.0]).unwrap();
        assert_eq!(argmax_variance(&r.depth), 0.0);
    }

    fn single_plane_sup(z: f64, foci: &[f64]) -> (SupervisionSet, DepthMap, ScalarField) {
        let base = make_test_scene(SceneKind::SinglePlane, 8, 32).unwrap();
        let scene = crate::scenesim::SceneSpec::single_plane(base.layers()[0].texture.clone(), z).unwrap();
        let (aif, gt) = central_view(&scene);
        let a = ApertureMask::disk(9).unwrap();
        let targets = foci
            .iter()
            .map(|&f| Target {
                image: oracle_sdof(&scene, &a, f),
                aperture: a.clone(),
            })
            .collect();
        let conf = crate::smooth::confidence_from_image(&aif);
        (SupervisionSet::new(aif, targets).unwrap(), gt, conf)
    }

    #[test]
    fn comp_recovers_single_plane_up_to_sign() {
        let cfg = OptimConfig {
            steps: 300,
            train_focus: false,
            ..Default::default()
        };
        let fraction = |depth: &DepthMap, conf: &ScalarField, ok: &dyn Fn(f64) -> bool| {
            let idx: Vec<usize> = (0..depth.len()).filter(|&i| conf.data()[i] > 0.2).collect();
            idx.iter().filter(|&&i| ok(depth.data()[i])).count() as f64 / idx.len() as f64
        };

        // one target focused at 0: the plane at 3 and its mirror at -3 look the same
        let (sup, _, conf) = single_plane_sup(3.0, &[0.0]);
        let logits = DepthLogits::zeros(32, 32, cfg.planes.len());
        let r = optimize_depth_comp_from(&sup, &cfg, logits, vec![0.0]).unwrap();
        let f = fraction(&r.depth, &conf, &|d| d == 3.0 || d == -3.0);
        assert!(f > 0.9, "one target: {f}");

        let (sup, _, conf) = single_plane_sup(3.0, &[0.0, 5.0]);
        let logits = DepthLogits::zeros(32, 32, cfg.planes.len());
        let r = optimize_depth_comp_from(&sup, &cfg, logits, vec![0.0, 5.0]).unwrap();
        let f = fraction(&r.depth, &conf, &|d| d == 3.0);
        assert!(f > 0.9, "two targets: {f}");
    }

    #[test]
    fn comp_loss_drops_on_two_plane_scene() {
        let scene = make_test_scene(SceneKind::TwoPlane, 1, 64).unwrap();
        let (aif, _) = central_view(&scene);
        let oracle = ApertureMask::disk(13).unwrap();
        let targets = [-3.0, 3.0]
            .iter()
            .map(|&f| Target {
                image: oracle_sdof(&scene, &oracle, f),
                aperture: ApertureMask::disk(9).unwrap(),
            })
            .collect();
        let sup = SupervisionSet::new(aif, targets).unwrap();
        let cfg = OptimConfig {
            steps: 500,
            ..Default::default()
        };
        let r = optimize_depth_comp(&sup, &cfg).unwrap();
        let t = r.trace.totals();
        assert!(t[t.len() - 1] < 0.25 * t[0], "{} -> {}", t[0], t[t.len() - 1]);
        // smoothed over 50 steps the trace never climbs by more than 5%
        let s = r.trace.smoothed(50);
        for w in s.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "{} -> {}", w[0], w[1]);
        }
    }
}
