use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use defocus::comprender::{depth_to_pmf, render_compositional, CompRenderer, softmax_pmf, DepthPlanes, PlaneVolume};
use defocus::gradcheck::{check_compositional, check_light_field, check_smoothing, CheckOptions, GradCheckReport};
use defocus::lfrender::{render_light_field, LfRenderConfig, DEFAULT_EXPANSION_ITERS, DEFAULT_GRID};
use defocus::optim::{optimize_depth_comp, optimize_depth_lf, OptimConfig, Smoothing, SupervisionSet, Target};
use defocus::scenesim::{
    central_view, make_test_scene, oracle_sdof, save_manifest, write_scene_assets, SceneKind,
};
use defocus::smooth::SmoothConfig;
use defocus::{io, metrics, ApertureMask, DepthRange, Error, Image, Result};

mod config;

use config::{Params, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "defocus", version, about = "Differentiable synthetic defocus and aperture-supervised depth")]
struct Cli {
    /// key=value file with default settings; flags override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic scene with the brute-force oracle
    Simulate(Params),
    /// Render a shallow depth-of-field image
    Render(Params),
    /// Recover depth and focus from supervision images
    Optimize(Params),
    /// Compare analytic gradients against finite differences
    Gradcheck {
        #[command(flatten)]
        params: Params,
        /// Perturb the analytic gradients (the check must then fail)
        #[arg(long)]
        corrupt: bool,
    },
    /// Score a prediction against a reference
    Evaluate(Params),
}

/// Finished normally, or finished with a warning (exit 1).
enum Outcome {
    Ok,
    Warning(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Simulate(p) => resolve(&cli, p).and_then(|c| simulate(&c)),
        Command::Render(p) => resolve(&cli, p).and_then(|c| render(&c)),
        Command::Optimize(p) => resolve(&cli, p).and_then(|c| optimize(&c)),
        Command::Gradcheck { params, corrupt } => resolve(&cli, params).and_then(|c| gradcheck(&c, *corrupt)),
        Command::Evaluate(p) => resolve(&cli, p).and_then(|c| evaluate(&c)),
    };
    match result {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::Warning(msg)) => {
            eprintln!("warning: {msg}");
            ExitCode::from(1)
        }
        Err(e @ Error::NonFinite(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

/// `DEFOCUS_THREADS` caps the worker pool.
fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("DEFOCUS_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::invalid(format!("DEFOCUS_THREADS={v:?} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::invalid(e.to_string()))
}

fn resolve(cli: &Cli, p: &Params) -> Result<RunConfig> {
    RunConfig::resolve(cli.config.as_deref(), p)
}

fn read_image(path: &Path) -> Result<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("pfm") => io::read_pfm_image(path),
        _ => io::read_png(path),
    }
}

fn aperture(c: &RunConfig) -> Result<ApertureMask> {
    ApertureMask::disk(c.get_or("grid", DEFAULT_GRID)?)
}

fn planes(c: &RunConfig) -> Result<DepthPlanes> {
    let d = DepthPlanes::default();
    DepthPlanes::new(c.get_or("plane_min", d.min())?, c.get_or("plane_max", d.max())?)
}

fn smooth_config(c: &RunConfig) -> Result<SmoothConfig> {
    let d = SmoothConfig::default();
    Ok(SmoothConfig {
        sigma_xy: c.get_or("sigma_xy", d.sigma_xy)?,
        sigma_color: c.get_or("sigma_color", d.sigma_color)?,
        lambda: c.get_or("smooth_lambda", d.lambda)?,
        max_iters: c.get_or("smooth_max_iters", d.max_iters)?,
        tolerance: c.get_or("smooth_tolerance", d.tolerance)?,
    })
}

fn optim_config(c: &RunConfig) -> Result<OptimConfig> {
    let d = OptimConfig::default();
    let cfg = OptimConfig {
        steps: c.get_or("steps", d.steps)?,
        lr_depth: c.get_or("lr_depth", d.lr_depth)?,
        lr_logits: c.get_or("lr_logits", d.lr_logits)?,
        lr_focus: c.get_or("lr_focus", d.lr_focus)?,
        lambda_d: c.get_or("lambda_d", d.lambda_d)?,
        lambda_tv: c.get_or("lambda_tv", d.lambda_tv)?,
        beta1: c.get_or("beta1", d.beta1)?,
        beta2: c.get_or("beta2", d.beta2)?,
        eps: c.get_or("adam_eps", d.eps)?,
        depth_bounds: DepthRange {
            min: c.get_or("depth_min", d.depth_bounds.min)?,
            max: c.get_or("depth_max", d.depth_bounds.max)?,
        },
        expansion_iters: c.get_or("expansion_iters", d.expansion_iters)?,
        smoothing: c.get_or::<Smoothing>("smoothing", d.smoothing)?,
        smooth: smooth_config(c)?,
        init_depth: c.get_or("init_depth", d.init_depth)?,
        init_focus: c.get_or("init_focus", d.init_focus)?,
        planes: planes(c)?,
        train_depth: true,
        train_focus: true,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn simulate(c: &RunConfig) -> Result<Outcome> {
    let kind: SceneKind = c.get_or("scene", SceneKind::TwoPlane)?;
    let seed: u64 = c.get_or("seed", 0)?;
    let size: usize = c.get_or("size", 64)?;
    let m: usize = c.get_or("grid", DEFAULT_GRID)?;
    let mut focus: Vec<f64> = c.list("focus")?;
    if focus.is_empty() {
        focus.push(0.0);
    }
    let out = c.path("out")?;
    let scene = make_test_scene(kind, seed, size)?;
    let a = ApertureMask::disk(m)?;
    let (aif, depth) = central_view(&scene);

    let mut manifest = write_scene_assets(&out, &scene)?;
    let mut emit = |role: String, name: String| manifest.outputs.push((role, PathBuf::from(name)));
    io::write_png(out.join("all_in_focus.png"), &aif)?;
    io::write_pfm_image(out.join("all_in_focus.pfm"), &aif)?;
    io::write_pfm_depth(out.join("depth.pfm"), &depth)?;
    emit("all_in_focus".into(), "all_in_focus.png".into());
    emit("all_in_focus_float".into(), "all_in_focus.pfm".into());
    emit("depth".into(), "depth.pfm".into());
    for (i, &f) in focus.iter().enumerate() {
        let sdof = oracle_sdof(&scene, &a, f);
        io::write_png(out.join(format!("sdof_{i}.png")), &sdof)?;
        io::write_pfm_image(out.join(format!("sdof_{i}.pfm")), &sdof)?;
        emit(format!("sdof_{i}"), format!("sdof_{i}.png"));
        emit(format!("sdof_{i}_float"), format!("sdof_{i}.pfm"));
    }
    manifest.properties.push(("kind".into(), kind.to_string()));
    manifest.properties.push(("seed".into(), seed.to_string()));
    manifest.properties.push(("grid".into(), m.to_string()));
    for (i, f) in focus.iter().enumerate() {
        manifest.properties.push((format!("focus_{i}"), f.to_string()));
    }
    let path = save_manifest(&out, &manifest)?;
    println!("wrote {}", path.display());
    Ok(Outcome::Ok)
}

fn read_pmf(path: &Path, planes: &DepthPlanes) -> Result<PlaneVolume> {
    let (_, layers) = io::read_pfm_layers(path, planes.len())?;
    PlaneVolume::from_layers(&layers)
}

fn write_pmf(path: &Path, pmf: &PlaneVolume, planes: &DepthPlanes) -> Result<()> {
    let layers: Vec<_> = (0..pmf.planes()).map(|p| pmf.layer(p)).collect();
    io::write_pfm_layers(path, &format!("planes {} {}", planes.min(), planes.max()), &layers)
}

fn render(c: &RunConfig) -> Result<Outcome> {
    let img = read_image(&c.path("image")?)?;
    let focus: f64 = c.get_or("focus", 0.0)?;
    let out = match c.get_or::<String>("model", "lf".into())?.as_str() {
        "lf" => {
            let z = io::read_pfm_depth(c.path("depth")?)?;
            let cfg = LfRenderConfig::new(aperture(c)?, focus)
                .with_iters(c.get_or("expansion_iters", DEFAULT_EXPANSION_ITERS)?);
            render_light_field(&img, &z, &cfg)?
        }
        "comp" => {
            let planes = planes(c)?;
            let pmf = match c.raw("pmf") {
                Some(p) => read_pmf(Path::new(p), &planes)?,
                None => depth_to_pmf(&io::read_pfm_depth(c.path("depth")?)?, &planes),
            };
            CompRenderer::new(&img, &planes).render_pmf(&pmf, focus)?
        }
        m => return Err(Error::invalid(format!("unknown model {m:?}"))),
    };
    io::write_png(c.path("out")?, &out)?;
    if let Some(p) = c.raw("out_pfm") {
        io::write_pfm_image(p, &out)?;
    }
    Ok(Outcome::Ok)
}

fn optimize(c: &RunConfig) -> Result<Outcome> {
    let aif = read_image(&c.path("image")?)?;
    let a = aperture(c)?;
    let targets = c
        .paths("targets")
        .iter()
        .map(|p| {
            Ok(Target {
                image: read_image(p)?,
                aperture: a.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sup = SupervisionSet::new(aif.clone(), targets)?;
    let cfg = optim_config(c)?;
    let out = c.path("out")?;
    std::fs::create_dir_all(&out)?;
    let model: String = c.get_or("model", "lf".into())?;
    let (depth, focus, trace) = match model.as_str() {
        "lf" => {
            let r = optimize_depth_lf(&sup, &cfg)?;
            for (i, f) in r.focus.iter().enumerate() {
                let rc = LfRenderConfig::new(a.clone(), *f).with_iters(cfg.expansion_iters);
                io::write_png(out.join(format!("preview_{i}.png")), &render_light_field(&aif, &r.depth, &rc)?)?;
            }
            (r.depth, r.focus, r.trace)
        }
        "comp" => {
            let r = optimize_depth_comp(&sup, &cfg)?;
            for (i, f) in r.focus.iter().enumerate() {
                let img = render_compositional(&aif, &r.logits, *f, &cfg.planes)?;
                io::write_png(out.join(format!("preview_{i}.png")), &img)?;
            }
            write_pmf(&out.join("pmf.pfm"), &softmax_pmf(&r.logits), &cfg.planes)?;
            (r.depth, r.focus, r.trace)
        }
        m => return Err(Error::invalid(format!("unknown model {m:?}"))),
    };
    io::write_pfm_depth(out.join("depth.pfm"), &depth)?;
    trace.write_csv(out.join("loss.csv"))?;
    let last = trace.records.last().expect("at least one record");
    println!("final loss {:.6e}", last.parts.total);
    for (i, f) in focus.iter().enumerate() {
        println!("focus_{i} {f:.6}");
    }
    Ok(Outcome::Ok)
}

fn print_report(r: &GradCheckReport) {
    for g in &r.groups {
        println!(
            "{} {} max_rel_err={:.3e} threshold={:.0e} checked={} kinks={} {}",
            r.model,
            g.name,
            g.max_rel_error,
            g.threshold,
            g.checked,
            g.kinks,
            if g.passed() { "PASS" } else { "FAIL" }
        );
    }
}

fn gradcheck(c: &RunConfig, corrupt: bool) -> Result<Outcome> {
    let opts = CheckOptions {
        seed: c.get_or("seed", 0)?,
        size: c.get_or("size", 8)?,
        corrupt,
    };
    let model: String = c.get_or("model", "all".into())?;
    let grid = c.get_or("grid", 5)?;
    let iters = c.get_or("expansion_iters", DEFAULT_EXPANSION_ITERS)?;
    let mut reports = Vec::new();
    if matches!(model.as_str(), "lf" | "all") {
        reports.push(check_light_field(opts, grid, iters)?);
    }
    if matches!(model.as_str(), "comp" | "all") {
        reports.push(check_compositional(opts)?);
    }
    if matches!(model.as_str(), "smooth" | "all") {
        reports.push(check_smoothing(opts)?);
    }
    if reports.is_empty() {
        return Err(Error::invalid(format!("unknown gradcheck model {model:?}")));
    }
    reports.iter().for_each(print_report);
    if reports.iter().all(GradCheckReport::passed) {
        Ok(Outcome::Ok)
    } else {
        Ok(Outcome::Warning("gradient check failed".into()))
    }
}

fn evaluate(c: &RunConfig) -> Result<Outcome> {
    let mut rows = Vec::new();
    if c.raw("pred").is_some() || c.raw("reference").is_some() {
        let a = read_image(&c.path("pred")?)?;
        let b = read_image(&c.path("reference")?)?;
        rows.push(("psnr", metrics::psnr(&a, &b)?));
        rows.push(("ssim", metrics::ssim(&a, &b)?));
    }
    if c.raw("pred_depth").is_some() || c.raw("ref_depth").is_some() {
        let a = io::read_pfm_depth(c.path("pred_depth")?)?;
        let b = io::read_pfm_depth(c.path("ref_depth")?)?;
        rows.push(("depth_mae", metrics::depth_mae(&a, &b)?));
    }
    if rows.is_empty() {
        return Err(Error::invalid("nothing to evaluate: give pred/reference and/or pred_depth/ref_depth"));
    }
    let mut csv = String::from("metric,value\n");
    for (k, v) in &rows {
        println!("{k} {v:.6}");
        csv += &format!("{k},{v}\n");
    }
    if let Some(p) = c.raw("csv") {
        std::fs::write(p, csv)?;
    }
    Ok(Outcome::Ok)
}
