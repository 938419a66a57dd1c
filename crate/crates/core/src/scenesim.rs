//! Brute-force, occlusion-correct rendering of layered synthetic scenes.
//!
//! A scene is a front-to-back stack of fronto-parallel textured layers with
//! binary alpha. A ray through pixel position `p` of the view at aperture
//! offset `u` meets layer `i` at texture position `p - u * z_i`; the first
//! layer whose (nearest-neighbour) alpha is set there is the one it sees.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::aperture::{ApertureMask, View};
use crate::error::{Error, Result};
use crate::image::{DepthMap, DepthRange, Image, ScalarField};
use crate::io;
use crate::lightfield::LightField;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub texture: Image,
    /// 1 where the layer is opaque, 0 where it is absent.
    pub alpha: ScalarField,
    pub disparity: f64,
}

impl Layer {
    pub fn opaque(texture: Image, disparity: f64) -> Self {
        let alpha = ScalarField::filled(texture.height(), texture.width(), 1.0);
        Layer {
            texture,
            alpha,
            disparity,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    layers: Vec<Layer>,
}

impl SceneSpec {
    /// Layers are ordered front to back; the last must be fully opaque.
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let last = layers.last().ok_or_else(|| Error::invalid("scene needs at least one layer"))?;
        if last.alpha.data().iter().any(|&a| a != 1.0) {
            return Err(Error::invalid("background layer must be fully opaque"));
        }
        let (h, w, c) = (last.texture.height(), last.texture.width(), last.texture.channels());
        for l in &layers {
            if !l.texture.same_shape(&last.texture) {
                return Err(Error::shape(last.texture.shape_str(), l.texture.shape_str()));
            }
            l.alpha.check_dims(h, w)?;
            if l.alpha.data().iter().any(|&a| a != 0.0 && a != 1.0) {
                return Err(Error::invalid("layer alpha must be binary"));
            }
            if !DepthRange::DEFAULT.contains(l.disparity) {
                return Err(Error::invalid(format!("layer disparity {} out of range", l.disparity)));
            }
        }
        let _ = c;
        Ok(SceneSpec { layers })
    }

    pub fn single_plane(texture: Image, disparity: f64) -> Result<Self> {
        Self::new(vec![Layer::opaque(texture, disparity)])
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn height(&self) -> usize {
        self.layers[0].texture.height()
    }

    pub fn width(&self) -> usize {
        self.layers[0].texture.width()
    }

    pub fn channels(&self) -> usize {
        self.layers[0].texture.channels()
    }

    /// Index of the layer hit by the ray at image position `(py, px)` through
    /// aperture offset `view`.
    pub fn hit(&self, py: f64, px: f64, view: &View) -> usize {
        let (h, w) = (self.height() as f64, self.width() as f64);
        for (i, l) in self.layers.iter().enumerate() {
            let sy = (py - view.uy * l.disparity).round().clamp(0.0, h - 1.0) as usize;
            let sx = (px - view.ux * l.disparity).round().clamp(0.0, w - 1.0) as usize;
            if l.alpha.get(sy, sx) == 1.0 {
                return i;
            }
        }
        self.layers.len() - 1
    }

    /// Radiance carried by a ray, written into `out`; returns the disparity
    /// of the surface it hit.
    pub fn trace(&self, py: f64, px: f64, view: &View, out: &mut [f64]) -> f64 {
        let l = &self.layers[self.hit(py, px, view)];
        let (sy, sx) = (py - view.uy * l.disparity, px - view.ux * l.disparity);
        for (c, o) in out.iter_mut().enumerate() {
            *o = l.texture.sample(sy, sx, c);
        }
        l.disparity
    }
}

/// Pinhole view at aperture offset `(ux, uy)` with its z-buffer.
pub fn oracle_view(scene: &SceneSpec, ux: f64, uy: f64) -> (Image, DepthMap) {
    let (h, w, c) = (scene.height(), scene.width(), scene.channels());
    let view = View { ux, uy, weight: 1.0 };
    let mut img = Image::filled(h, w, c, 0.0);
    let mut depth = vec![0.0; h * w];
    img.data_mut()
        .par_chunks_mut(w * c)
        .zip(depth.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, (row, drow))| {
            for x in 0..w {
                drow[x] = scene.trace(y as f64, x as f64, &view, &mut row[x * c..(x + 1) * c]);
            }
        });
    (img, ScalarField::new(h, w, depth).expect("finite depths"))
}

/// The all-in-focus central view and its disparity map.
pub fn central_view(scene: &SceneSpec) -> (Image, DepthMap) {
    oracle_view(scene, 0.0, 0.0)
}

pub fn oracle_lightfield(scene: &SceneSpec, aperture: &ApertureMask) -> LightField {
    let views = aperture
        .views()
        .par_iter()
        .map(|v| oracle_view(scene, v.ux, v.uy).0)
        .collect();
    LightField::new(aperture.grid_size(), views).expect("one view per grid point")
}

/// Ground-truth shallow depth-of-field image: every ray of the aperture is
/// traced exactly at its sheared position and averaged with the aperture
/// weights.
pub fn oracle_sdof(scene: &SceneSpec, aperture: &ApertureMask, focus: f64) -> Image {
    let (h, w, c) = (scene.height(), scene.width(), scene.channels());
    let norm = 1.0 / aperture.weight_sum();
    let views: Vec<View> = aperture.active().map(|(_, v)| *v).collect();
    let mut out = Image::filled(h, w, c, 0.0);
    out.data_mut()
        .par_chunks_mut(w * c)
        .enumerate()
        .for_each(|(y, row)| {
            let mut ray = vec![0.0; c];
            for x in 0..w {
                for v in &views {
                    scene.trace(y as f64 + v.uy * focus, x as f64 + v.ux * focus, v, &mut ray);
                    for ch in 0..c {
                        row[x * c + ch] += v.weight * norm * ray[ch];
                    }
                }
            }
        });
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    SinglePlane,
    TwoPlane,
    Occluder,
    TexturedRandom,
}

impl SceneKind {
    pub const ALL: [SceneKind; 4] = [
        SceneKind::SinglePlane,
        SceneKind::TwoPlane,
        SceneKind::Occluder,
        SceneKind::TexturedRandom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SceneKind::SinglePlane => "single_plane",
            SceneKind::TwoPlane => "two_plane",
            SceneKind::Occluder => "occluder",
            SceneKind::TexturedRandom => "textured_random",
        }
    }
}

impl fmt::Display for SceneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SceneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SceneKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scene kind {s:?}")))
    }
}

/// Disparity of the single plane in `single_plane` scenes.
pub const SINGLE_PLANE_DISPARITY: f64 = 2.0;
/// Background and foreground disparities of `two_plane` scenes.
pub const TWO_PLANE_DISPARITIES: (f64, f64) = (-4.0, 4.0);
/// Back (in focus) and front disparities of `occluder` scenes.
pub const OCCLUDER_DISPARITIES: (f64, f64) = (0.0, 5.0);

fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let (h, w, c) = (img.height() as i64, img.width() as i64, img.channels());
    let pass = |src: &Image, horizontal: bool| {
        Image::from_fn(h as usize, w as usize, c, |y, x, ch| {
            let mut s = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let o = j as i64 - r;
                let (yy, xx) = if horizontal {
                    (y as i64, (x as i64 + o).clamp(0, w - 1))
                } else {
                    ((y as i64 + o).clamp(0, h - 1), x as i64)
                };
                s += kv * src.get(yy as usize, xx as usize, ch);
            }
            s / ks
        })
    };
    pass(&pass(img, true), false)
}

/// Band-limited colour noise with every channel stretched to `[lo, hi]`.
/// Values are rounded to single precision so textures survive PFM export.
pub fn noise_texture(rng: &mut ChaCha8Rng, h: usize, w: usize, sigma: f64, lo: f64, hi: f64) -> Image {
    let white = Image::from_fn(h, w, 3, |_, _, _| rng.gen());
    let mut t = gaussian_blur(&white, sigma);
    for ch in 0..3 {
        let vals: Vec<f64> = t.data().iter().skip(ch).step_by(3).copied().collect();
        let mn = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        for v in t.data_mut().iter_mut().skip(ch).step_by(3) {
            *v = (lo + (hi - lo) * (*v - mn) / (mx - mn).max(1e-12)) as f32 as f64;
        }
    }
    t
}

/// Mixes two colours per pixel using a single-channel noise field.
fn tinted(rng: &mut ChaCha8Rng, h: usize, w: usize, a: [f64; 3], b: [f64; 3]) -> Image {
    let n = noise_texture(rng, h, w, 1.2, 0.0, 1.0);
    Image::from_fn(h, w, 3, |y, x, c| {
        let t = n.get(y, x, 0);
        ((1.0 - t) * a[c] + t * b[c]) as f32 as f64
    })
}

fn rect_alpha(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> ScalarField {
    ScalarField::from_fn(h, w, |y, x| if (y0..y1).contains(&y) && (x0..x1).contains(&x) { 1.0 } else { 0.0 })
}

/// Deterministic procedural scenes of size `size x size`.
pub fn make_test_scene(kind: SceneKind, seed: u64, size: usize) -> Result<SceneSpec> {
    if size < 4 {
        return Err(Error::invalid("test scenes need size >= 4"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ ((kind as u64) << 32));
    let n = size;
    match kind {
        SceneKind::SinglePlane => {
            let t = noise_texture(&mut rng, n, n, 1.5, 0.05, 0.95);
            SceneSpec::single_plane(t, SINGLE_PLANE_DISPARITY)
        }
        SceneKind::TwoPlane => {
            let (back, front) = TWO_PLANE_DISPARITIES;
            let tb = noise_texture(&mut rng, n, n, 1.0, 0.05, 0.95);
            let tf = noise_texture(&mut rng, n, n, 1.0, 0.05, 0.95);
            let alpha = rect_alpha(n, n, n / 4, n - n / 4, n / 4, n - n / 4);
            SceneSpec::new(vec![
                Layer {
                    texture: tf,
                    alpha,
                    disparity: front,
                },
                Layer::opaque(tb, back),
            ])
        }
        SceneKind::Occluder => {
            let (back, front) = OCCLUDER_DISPARITIES;
            let green_red = tinted(&mut rng, n, n, [0.1, 0.8, 0.1], [0.85, 0.1, 0.1]);
            let orange_blue = tinted(&mut rng, n, n, [1.0, 0.55, 0.05], [0.05, 0.25, 0.95]);
            let alpha = rect_alpha(n, n, 0, n, n / 2 - n / 8, n / 2 + n / 8);
            SceneSpec::new(vec![
                Layer {
                    texture: orange_blue,
                    alpha,
                    disparity: front,
                },
                Layer::opaque(green_red, back),
            ])
        }
        SceneKind::TexturedRandom => {
            let fronts = rng.gen_range(1..=2);
            let mut layers = Vec::new();
            for _ in 0..fronts {
                let sigma = rng.gen_range(0.8..1.6);
                let t = noise_texture(&mut rng, n, n, sigma, 0.05, 0.95);
                let (a, b) = (rng.gen_range(0..n / 2), rng.gen_range(n / 2 + 1..=n));
                let (c, d) = (rng.gen_range(0..n / 2), rng.gen_range(n / 2 + 1..=n));
                layers.push(Layer {
                    texture: t,
                    alpha: rect_alpha(n, n, a, b, c, d),
                    disparity: 0.0,
                });
            }
            let sigma = rng.gen_range(0.8..1.6);
            layers.push(Layer::opaque(noise_texture(&mut rng, n, n, sigma, 0.05, 0.95), 0.0));
            // front layers strictly nearer than the ones behind
            let mut z = rng.gen_range(-6.0..-2.0f64).round();
            for l in layers.iter_mut().rev() {
                l.disparity = z;
                z += rng.gen_range(2.0..5.0f64).round();
            }
            SceneSpec::new(layers)
        }
    }
}

/// Plain-text scene manifest: layer order, disparities, asset paths, and
/// any extra named output files.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub height: usize,
    pub width: usize,
    pub layers: Vec<ManifestLayer>,
    pub outputs: Vec<(String, PathBuf)>,
    pub properties: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestLayer {
    pub disparity: f64,
    pub texture: PathBuf,
    pub alpha: PathBuf,
}

pub const MANIFEST_HEADER: &str = "# defocus scene manifest v1";

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!("{MANIFEST_HEADER}\nsize {} {}\n", self.height, self.width);
        for (k, v) in &self.properties {
            s += &format!("property {k} {v}\n");
        }
        for l in &self.layers {
            s += &format!("layer {} {} {}\n", l.disparity, l.texture.display(), l.alpha.display());
        }
        for (role, p) in &self.outputs {
            s += &format!("output {role} {}\n", p.display());
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Format(format!("bad manifest line {line:?}"));
        let mut m = Manifest {
            height: 0,
            width: 0,
            layers: Vec::new(),
            outputs: Vec::new(),
            properties: Vec::new(),
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["size", h, w] => {
                    m.height = h.parse().map_err(|_| bad(line))?;
                    m.width = w.parse().map_err(|_| bad(line))?;
                }
                ["layer", d, t, a] => m.layers.push(ManifestLayer {
                    disparity: d.parse().map_err(|_| bad(line))?,
                    texture: t.into(),
                    alpha: a.into(),
                }),
                ["output", role, p] => m.outputs.push((role.to_string(), p.into())),
                ["property", k, v] => m.properties.push((k.to_string(), v.to_string())),
                _ => return Err(bad(line)),
            }
        }
        if m.height == 0 || m.width == 0 || m.layers.is_empty() {
            return Err(Error::Format("manifest needs a size and at least one layer".into()));
        }
        Ok(m)
    }

    /// Every file the manifest names, relative to its directory.
    pub fn files(&self) -> Vec<PathBuf> {
        let mut v: Vec<PathBuf> = self
            .layers
            .iter()
            .flat_map(|l| [l.texture.clone(), l.alpha.clone()])
            .collect();
        v.extend(self.outputs.iter().map(|(_, p)| p.clone()));
        v
    }
}

pub const MANIFEST_NAME: &str = "scene.txt";

/// Writes layer assets (`layerN_texture.pfm`, `layerN_alpha.png`) into `dir`
/// and returns the manifest describing them; the caller adds outputs and
/// saves it with [`save_manifest`].
pub fn write_scene_assets(dir: &Path, scene: &SceneSpec) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    let mut layers = Vec::new();
    for (i, l) in scene.layers().iter().enumerate() {
        let texture = PathBuf::from(format!("layer{i}_texture.pfm"));
        let alpha = PathBuf::from(format!("layer{i}_alpha.png"));
        io::write_pfm_image(dir.join(&texture), &l.texture)?;
        io::write_png(dir.join(&alpha), &l.alpha.to_image())?;
        layers.push(ManifestLayer {
            disparity: l.disparity,
            texture,
            alpha,
        });
    }
    Ok(Manifest {
        height: scene.height(),
        width: scene.width(),
        layers,
        outputs: Vec::new(),
        properties: Vec::new(),
    })
}

pub fn save_manifest(dir: &Path, manifest: &Manifest) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, manifest.to_text())?;
    Ok(path)
}

/// Loads a scene from its manifest file.
pub fn load_scene(manifest_path: &Path) -> Result<(SceneSpec, Manifest)> {
    let m = Manifest::parse(&fs::read_to_string(manifest_path)?)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut layers = Vec::new();
    for l in &m.layers {
        let texture = io::read_pfm_image(dir.join(&l.texture))?;
        let alpha = io::read_png(dir.join(&l.alpha))?.luminance();
        if texture.height() != m.height || texture.width() != m.width {
            return Err(Error::shape(format!("{}x{}", m.height, m.width), texture.shape_str()));
        }
        layers.push(Layer {
            texture,
            alpha: alpha.map(|a| if a >= 0.5 { 1.0 } else { 0.0 }),
            disparity: l.disparity,
        });
    }
    Ok((SceneSpec::new(layers)?, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smooth::confidence_from_image;

    fn view(ux: f64, uy: f64) -> View {
        View { ux, uy, weight: 1.0 }
    }

    #[test]
    fn central_view_is_direct_overlay() {
        let s = make_test_scene(SceneKind::TwoPlane, 1, 16).unwrap();
        let (img, depth) = central_view(&s);
        let (front, back) = (&s.layers()[0], &s.layers()[1]);
        for y in 0..16 {
            for x in 0..16 {
                let l = if front.alpha.get(y, x) == 1.0 { front } else { back };
                assert_eq!(img.pixel(y, x), l.texture.pixel(y, x));
                assert_eq!(depth.get(y, x), l.disparity);
            }
        }
    }

    #[test]
    fn single_plane_views_are_translates() {
        let s = make_test_scene(SceneKind::SinglePlane, 2, 12).unwrap();
        let t = &s.layers()[0].texture;
        let z = s.layers()[0].disparity;
        let (v, _) = oracle_view(&s, 0.5, -1.0);
        for y in 0..12 {
            for x in 0..12 {
                for c in 0..3 {
                    let e = t.sample(y as f64 + z, x as f64 - 0.5 * z, c);
                    assert_eq!(v.get(y, x, c), e);
                }
            }
        }
    }

    #[test]
    fn occluder_side_view_reveals_background() {
        let n = 32;
        let s = make_test_scene(SceneKind::Occluder, 3, n).unwrap();
        let (zb, zf) = OCCLUDER_DISPARITIES;
        let (x0, x1) = (n / 2 - n / 8, n / 2 + n / 8);
        let (_, d0) = central_view(&s);
        let (_, d1) = oracle_view(&s, 1.0, 0.0);
        // per-ray line-plane intersection: the front plane is hit at texture
        // column x - zf, which must lie inside [x0, x1)
        for x in 0..n {
            let col = x as f64 - zf;
            let hits_front = col.round() >= x0 as f64 && col.round() < x1 as f64;
            assert_eq!(d1.get(5, x), if hits_front { zf } else { zb }, "x = {x}");
        }
        // columns just left of the occluder are hidden at u = 0 and visible at u = 1
        assert_eq!(d0.get(5, x1 + 1), zb);
        assert_eq!(d0.get(5, x0), zf);
        assert_eq!(d1.get(5, x0), zb);
    }

    #[test]
    fn pinhole_sdof_is_central_view() {
        let s = make_test_scene(SceneKind::Occluder, 4, 16).unwrap();
        let a = ApertureMask::disk(1).unwrap();
        assert_eq!(oracle_sdof(&s, &a, 3.0), central_view(&s).0);
        assert_eq!(oracle_lightfield(&s, &a).views()[0], central_view(&s).0);
    }

    #[test]
    fn in_focus_scene_is_sharp() {
        let s = make_test_scene(SceneKind::SinglePlane, 5, 16).unwrap();
        let a = ApertureMask::disk(7).unwrap();
        let out = oracle_sdof(&s, &a, SINGLE_PLANE_DISPARITY);
        for (p, q) in out.data().iter().zip(s.layers()[0].texture.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_albedo_energy() {
        let flat = Image::filled(12, 12, 3, 0.35);
        let s = SceneSpec::new(vec![
            Layer {
                texture: flat.clone(),
                alpha: rect_alpha(12, 12, 3, 9, 2, 7),
                disparity: 3.0,
            },
            Layer::opaque(flat, -2.0),
        ])
        .unwrap();
        let a = ApertureMask::disk(5).unwrap();
        for f in [-3.0, 0.0, 1.5] {
            let out = oracle_sdof(&s, &a, f);
            let mean = out.data().iter().sum::<f64>() / out.data().len() as f64;
            assert!((mean - 0.35).abs() < 1e-6);
        }
    }

    #[test]
    fn occluder_mixes_foreground_into_background() {
        let n = 32;
        let s = make_test_scene(SceneKind::Occluder, 6, n).unwrap();
        let a = ApertureMask::disk(9).unwrap();
        let out = oracle_sdof(&s, &a, 0.0);
        // a background pixel just outside the occluder's right edge
        let (y, x) = (10usize, n / 2 + n / 8 + 1);
        let (zf, bg) = (OCCLUDER_DISPARITIES.1, &s.layers()[1]);
        let fg = &s.layers()[0];
        let (x0, x1) = ((n / 2 - n / 8) as f64, (n / 2 + n / 8) as f64);
        // explicit enumeration of the aperture rays
        let mut sum = [0.0; 3];
        let mut fg_rays = 0;
        for v in a.active().map(|(_, v)| v) {
            let col = x as f64 - v.ux * zf;
            let row = y as f64 - v.uy * zf;
            let hit_front = col.round() >= x0 && col.round() < x1;
            for c in 0..3 {
                sum[c] += if hit_front {
                    fg.texture.sample(row, col, c)
                } else {
                    bg.texture.sample(y as f64, x as f64, c)
                };
            }
            fg_rays += hit_front as usize;
        }
        assert!(fg_rays > 0);
        for c in 0..3 {
            assert!((out.get(y, x, c) - sum[c] / a.weight_sum()).abs() < 1e-12);
        }
    }

    #[test]
    fn epipolar_slopes_follow_disparity() {
        let n = 48;
        let s = make_test_scene(SceneKind::Occluder, 7, n).unwrap();
        let m = 9;
        let lf = oracle_lightfield(&s, &ApertureMask::disk(m).unwrap());
        let row = 20;
        let epi = lf.epipolar_slice(row);
        // best integer shift between the centre row and the u = 1 row of the
        // EPI over a window inside each layer
        let best_shift = |xa: usize, xb: usize| {
            let c = m / 2;
            (-8i64..=8)
                .min_by(|&p, &q| {
                    let err = |s: i64| -> f64 {
                        (xa..xb)
                            .map(|x| {
                                let xs = (x as i64 + s).clamp(0, n as i64 - 1) as usize;
                                (0..3).map(|ch| (epi.get(m - 1, xs, ch) - epi.get(c, x, ch)).powi(2)).sum::<f64>()
                            })
                            .sum()
                    };
                    err(p).total_cmp(&err(q))
                })
                .unwrap()
        };
        let (zb, zf) = OCCLUDER_DISPARITIES;
        // the u = 1 view sees x - z, so content moves right by z
        assert_eq!(best_shift(n / 2 - 2, n / 2 + 2), zf as i64);
        assert_eq!(best_shift(2, 12), zb as i64);
    }

    #[test]
    fn scenes_are_deterministic() {
        for k in SceneKind::ALL {
            assert_eq!(make_test_scene(k, 11, 20).unwrap(), make_test_scene(k, 11, 20).unwrap());
        }
        assert_ne!(
            make_test_scene(SceneKind::TwoPlane, 1, 20).unwrap(),
            make_test_scene(SceneKind::TwoPlane, 2, 20).unwrap()
        );
    }

    #[test]
    fn occluder_layout() {
        let s = make_test_scene(SceneKind::Occluder, 0, 24).unwrap();
        assert_eq!(s.layers().len(), 2);
        assert!(s.layers()[0].disparity > s.layers()[1].disparity);
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!(matches!("spiral".parse::<SceneKind>(), Err(Error::InvalidArgument(_))));
        assert_eq!("two_plane".parse::<SceneKind>().unwrap(), SceneKind::TwoPlane);
    }

    #[test]
    fn textured_random_confidence_regression() {
        let s = make_test_scene(SceneKind::TexturedRandom, 7, 64).unwrap();
        let conf = confidence_from_image(&central_view(&s).0);
        let frac = conf.data().iter().filter(|&&c| c > 0.2).count() as f64 / conf.len() as f64;
        assert!(frac >= 0.5, "fraction {frac}");
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = make_test_scene(SceneKind::Occluder, 8, 16).unwrap();
        let mut m = write_scene_assets(dir.path(), &s).unwrap();
        m.outputs.push(("all_in_focus".into(), "aif.png".into()));
        m.properties.push(("seed".into(), "8".into()));
        let path = save_manifest(dir.path(), &m).unwrap();
        let (back, m2) = load_scene(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(m2, m);
        assert!(Manifest::parse("size 4 4\nbogus line\n").is_err());
    }

    #[test]
    fn opaque_background_required() {
        let t = Image::filled(4, 4, 3, 0.5);
        let l = Layer {
            texture: t,
            alpha: rect_alpha(4, 4, 0, 2, 0, 2),
            disparity: 0.0,
        };
        assert!(SceneSpec::new(vec![l]).is_err());
    }

    #[test]
    fn hit_uses_front_layer_first() {
        let s = make_test_scene(SceneKind::TwoPlane, 9, 16).unwrap();
        assert_eq!(s.hit(8.0, 8.0, &view(0.0, 0.0)), 0);
        assert_eq!(s.hit(0.0, 0.0, &view(0.0, 0.0)), 1);
    }
}
