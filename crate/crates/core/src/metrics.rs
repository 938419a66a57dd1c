//! Image and depth quality scores.

use crate::error::Result;
use crate::image::{Image, ScalarField};

/// PSNR reported for (near-)identical inputs.
pub const PSNR_CAP: f64 = 99.0;
const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / n)
}

/// PSNR over data in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse < MSE_FLOOR {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// PSNR restricted to pixels where `mask` holds.
pub fn masked_psnr(a: &Image, b: &Image, mask: impl Fn(usize, usize) -> bool) -> Result<f64> {
    a.check_same_shape(b)?;
    let (mut s, mut n) = (0.0, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            if mask(y, x) {
                for (p, q) in a.pixel(y, x).iter().zip(b.pixel(y, x)) {
                    s += (p - q) * (p - q);
                    n += 1;
                }
            }
        }
    }
    Ok(if n == 0 { PSNR_CAP } else { psnr_from_mse(s / n as f64) })
}

fn gaussian_taps() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect()
}

/// Separable Gaussian filter; taps falling outside the image are dropped and
/// the remaining weights renormalized.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = taps.len() / 2;
    let pass = |src: &[f64], horizontal: bool| {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let (mut s, mut ws) = (0.0, 0.0);
                for (k, t) in taps.iter().enumerate() {
                    let (yy, xx) = if horizontal {
                        (y as i64, x as i64 + k as i64 - r as i64)
                    } else {
                        (y as i64 + k as i64 - r as i64, x as i64)
                    };
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    s += t * src[yy as usize * w + xx as usize];
                    ws += t;
                }
                out[y * w + x] = s / ws;
            }
        }
        out
    };
    pass(&pass(plane, true), false)
}

/// Mean SSIM over pixels and channels, dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w, c) = (a.height(), a.width(), a.channels());
    let taps = gaussian_taps();
    let (c1, c2) = (K1 * K1, K2 * K2);
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data().iter().skip(ch).step_by(c).copied().collect();
        let pb: Vec<f64> = b.data().iter().skip(ch).step_by(c).copied().collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter(&pa, h, w, &taps);
        let mu_b = filter(&pb, h, w, &taps);
        let aa = filter(&prod(&pa, &pa), h, w, &taps);
        let bb = filter(&prod(&pb, &pb), h, w, &taps);
        let ab = filter(&prod(&pa, &pb), h, w, &taps);
        for i in 0..h * w {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    }
    Ok(total / (h * w * c) as f64)
}

/// Mean absolute difference of two depth maps.
pub fn depth_mae(a: &ScalarField, b: &ScalarField) -> Result<f64> {
    a.check_dims(b.height(), b.width())?;
    Ok(a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}
