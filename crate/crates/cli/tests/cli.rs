use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use defocus::comprender::{depth_to_pmf, DepthPlanes};
use defocus::scenesim::Manifest;
use defocus::{io, metrics, Image, ScalarField};

fn defocus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defocus"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, scene: &str, grid: &str, focus: &str) -> PathBuf {
    let o = defocus(&[
        "simulate", "--scene", scene, "--seed", "4", "--size", "24", "--grid", grid, "--focus", focus, "--out", s(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir.to_path_buf()
}

fn texture(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, 3, |y, x, c| 0.5 + 0.4 * ((0.7 * x as f64 + 1.3 * y as f64 + c as f64).sin()))
}

#[test]
fn pinhole_simulation_matches_all_in_focus() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "single_plane", "1", "3");
    let a = fs::read(dir.path().join("all_in_focus.png")).unwrap();
    let b = fs::read(dir.path().join("sdof_0.png")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn simulation_is_deterministic() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    simulate(d1.path(), "textured_random", "5", "-2,1");
    simulate(d2.path(), "textured_random", "5", "-2,1");
    let mut names: Vec<_> = fs::read_dir(d1.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() > 5);
    for n in names {
        assert_eq!(fs::read(d1.path().join(&n)).unwrap(), fs::read(d2.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn manifest_names_every_output() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "occluder", "5", "0");
    let m = Manifest::parse(&fs::read_to_string(dir.path().join("scene.txt")).unwrap()).unwrap();
    let mut named: Vec<String> = m.files().iter().map(|p| p.to_str().unwrap().to_string()).collect();
    named.push("scene.txt".into());
    named.sort();
    let mut present: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    present.sort();
    assert_eq!(named, present);
}

#[test]
fn in_focus_render_reproduces_input() {
    let dir = tempfile::tempdir().unwrap();
    let img = texture(20, 20);
    let (ip, dp, pp) = (dir.path().join("i.png"), dir.path().join("z.pfm"), dir.path().join("p.pfm"));
    io::write_png(&ip, &img).unwrap();
    io::write_pfm_depth(&dp, &ScalarField::filled(20, 20, 2.0)).unwrap();
    let planes = DepthPlanes::default();
    let pmf = depth_to_pmf(&ScalarField::filled(20, 20, 2.0), &planes);
    let layers: Vec<_> = (0..pmf.planes()).map(|p| pmf.layer(p)).collect();
    io::write_pfm_layers(&pp, "planes -15 15", &layers).unwrap();
    let quantized = io::read_png(&ip).unwrap();
    for (model, input) in [("lf", ["--depth", s(&dp)]), ("comp", ["--pmf", s(&pp)])] {
        let out = dir.path().join(format!("{model}.png"));
        let o = defocus(&[
            "render", "--model", model, "--image", s(&ip), input[0], input[1], "--focus", "2", "--grid", "9", "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let r = io::read_png(&out).unwrap();
        let worst = r.data().iter().zip(quantized.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0 + 1e-12, "{model}: {worst}");
    }
}

#[test]
fn renderers_agree_on_single_plane() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "single_plane", "13", "0");
    let d = dir.path();
    let mut outs = Vec::new();
    for model in ["lf", "comp"] {
        let out = d.join(format!("{model}.pfm"));
        let o = defocus(&[
            "render", "--model", model, "--image", s(&d.join("all_in_focus.pfm")), "--depth", s(&d.join("depth.pfm")),
            "--focus", "-1", "--grid", "13", "--out", s(&d.join(format!("{model}.png"))), "--out-pfm", s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(io::read_pfm_image(&out).unwrap());
    }
    let p = metrics::psnr(&outs[0], &outs[1]).unwrap();
    assert!(p >= 35.0, "psnr {p}");
}

#[test]
fn shape_mismatch_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, dp) = (dir.path().join("i.png"), dir.path().join("z.pfm"));
    io::write_png(&ip, &texture(8, 8)).unwrap();
    io::write_pfm_depth(&dp, &ScalarField::filled(8, 9, 0.0)).unwrap();
    let out = dir.path().join("o.png");
    let o = defocus(&["render", "--image", s(&ip), "--depth", s(&dp), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    let other = dir.path().join("j.png");
    io::write_png(&other, &texture(8, 9)).unwrap();
    assert_eq!(code(&defocus(&["evaluate", "--pred", s(&ip), "--reference", s(&other)])), 2);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&defocus(&["render", "--no-such-flag"])), 2);
    assert_eq!(code(&defocus(&["render", "--image", "/does/not/exist.png"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "steps=3\nlearning_rate=1\n").unwrap();
    assert_eq!(code(&defocus(&["gradcheck", "--config", s(&cfg)])), 2);
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# gradcheck settings\nmodel=comp\nsize=6\nseed=3\n").unwrap();
    let o = defocus(&["gradcheck", "--config", s(&cfg), "--model", "smooth"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.starts_with("smooth target"), "{text}");
}

#[test]
fn gradcheck_exit_codes() {
    let ok = defocus(&["gradcheck", "--model", "comp", "--size", "8"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let ok = defocus(&["gradcheck", "--model", "lf", "--size", "8", "--grid", "5"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    let bad = defocus(&["gradcheck", "--model", "comp", "--size", "8", "--corrupt"]);
    assert_ne!(code(&bad), 0);
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn evaluate_values_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.pfm"), dir.path().join("b.pfm"));
    io::write_pfm_image(&a, &Image::filled(12, 12, 3, 0.25)).unwrap();
    io::write_pfm_image(&b, &Image::filled(12, 12, 3, 0.35)).unwrap();
    let csv = dir.path().join("m.csv");
    let o = defocus(&["evaluate", "--pred", s(&a), "--reference", s(&a), "--csv", s(&csv)]);
    assert_eq!(code(&o), 0);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.contains("psnr,99\n") && text.contains("ssim,1"), "{text}");
    let o = defocus(&["evaluate", "--pred", s(&a), "--reference", s(&b)]);
    let text = String::from_utf8_lossy(&o.stdout);
    let psnr: f64 = text.lines().next().unwrap().split(' ').nth(1).unwrap().parse().unwrap();
    assert!((psnr - 20.0).abs() < 1e-4, "{psnr}");
}

#[test]
fn pinhole_optimization_is_a_no_op() {
    let dir = tempfile::tempdir().unwrap();
    let ip = dir.path().join("i.png");
    io::write_png(&ip, &texture(16, 16)).unwrap();
    let out = dir.path().join("run");
    let o = defocus(&[
        "optimize", "--model", "lf", "--image", s(&ip), "--targets", s(&ip), "--grid", "1", "--steps", "5",
        "--smoothing", "off", "--init-depth", "-2", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let z = io::read_pfm_depth(out.join("depth.pfm")).unwrap();
    assert!(z.data().iter().all(|&v| (v + 2.0).abs() < 1e-6));
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,total,data,reg,dhat_0"));
    let first: f64 = lines.next().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!(first < 1e-12, "{first}");
    assert!(out.join("preview_0.png").exists());
}

#[test]
fn optimization_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "two_plane", "7", "-3,3");
    let d = dir.path();
    let targets = format!("{},{}", s(&d.join("sdof_0.pfm")), s(&d.join("sdof_1.pfm")));
    let out = d.join("run");
    let o = defocus(&[
        "optimize", "--model", "comp", "--image", s(&d.join("all_in_focus.pfm")), "--targets", &targets, "--grid", "7",
        "--steps", "150", "--out", s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("loss.csv")).unwrap();
    let totals: Vec<f64> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(totals.len(), 151);
    assert!(totals[150] < 0.5 * totals[0], "{} -> {}", totals[0], totals[150]);
    assert!(out.join("pmf.pfm").exists() && out.join("depth.pfm").exists());
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    simulate(dir.path(), "occluder", "5", "0");
    let d = dir.path();
    let mut files = Vec::new();
    for n in ["1", "3"] {
        let out = d.join(format!("r{n}.pfm"));
        let o = Command::new(env!("CARGO_BIN_EXE_defocus"))
            .env("DEFOCUS_THREADS", n)
            .args([
                "render", "--image", s(&d.join("all_in_focus.pfm")), "--depth", s(&d.join("depth.pfm")), "--focus",
                "1.5", "--grid", "7", "--out", s(&d.join("r.png")), "--out-pfm", s(&out),
            ])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0);
        files.push(fs::read(out).unwrap());
    }
    assert_eq!(files[0], files[1]);
    let bad = Command::new(env!("CARGO_BIN_EXE_defocus"))
        .env("DEFOCUS_THREADS", "zero")
        .args(["gradcheck", "--model", "smooth"])
        .output()
        .unwrap();
    assert_eq!(code(&bad), 2);
}
