//! PNG and PFM import/export.
//!
//! PNG is treated as plain 8-bit data with `value = byte / 255` and no colour
//! management. PFM files are written little-endian (scale `-1.0`) with rows
//! stored bottom-to-top as the format requires. All float file I/O is single
//! precision.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{DepthMap, Image, ScalarField};

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Quantize an image the same way [`write_png`] does, without touching disk.
pub fn quantize_8bit(img: &Image) -> Image {
    let mut out = img.clone();
    out.data_mut()
        .iter_mut()
        .for_each(|v| *v = to_byte(*v) as f64 / 255.0);
    out
}

pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::invalid(format!("PNG export supports 1 or 3 channels, got {c}"))),
    };
    let file = File::create(path.as_ref())?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    let mut writer = enc
        .write_header()
        .map_err(|e| Error::Format(format!("PNG encode: {e}")))?;
    writer
        .write_image_data(&bytes)
        .map_err(|e| Error::Format(format!("PNG encode: {e}")))?;
    writer
        .finish()
        .map_err(|e| Error::Format(format!("PNG encode: {e}")))?;
    Ok(())
}

/// Loads an 8-bit PNG. Alpha channels are dropped; 16-bit data is reduced to
/// 8 bits.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let file = File::open(path.as_ref())?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec
        .read_info()
        .map_err(|e| Error::Format(format!("PNG decode: {e}")))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("PNG too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("PNG decode: {e}")))?;
    let (src_ch, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::Format(format!("unsupported PNG colour type {other:?}"))),
    };
    let (w, h) = (info.width as usize, info.height as usize);
    let mut data = Vec::with_capacity(w * h * keep);
    for row in buf.chunks(info.line_size).take(h) {
        for px in row[..w * src_ch].chunks_exact(src_ch) {
            data.extend(px[..keep].iter().map(|&b| b as f64 / 255.0));
        }
    }
    Image::new(h, w, keep, data)
}

fn write_pfm_raw(
    path: &Path,
    height: usize,
    width: usize,
    channels: usize,
    comments: &[String],
    data: &[f64],
) -> Result<()> {
    let magic = match channels {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::invalid(format!("PFM supports 1 or 3 channels, got {c}"))),
    };
    let mut out = BufWriter::new(File::create(path)?);
    writeln!(out, "{magic}")?;
    for c in comments {
        writeln!(out, "# {c}")?;
    }
    write!(out, "{width} {height}\n-1.0\n")?;
    let row_len = width * channels;
    for row in data.chunks_exact(row_len).rev() {
        for &v in row {
            out.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Pfm {
    height: usize,
    width: usize,
    channels: usize,
    comments: Vec<String>,
    data: Vec<f64>,
}

fn read_pfm_raw(path: &Path) -> Result<Pfm> {
    let mut r = BufReader::new(File::open(path)?);
    let mut tokens: Vec<String> = Vec::new();
    let mut comments = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("truncated PFM header".into()));
        }
        let t = line.trim();
        if let Some(c) = t.strip_prefix('#') {
            comments.push(c.trim().to_string());
            continue;
        }
        tokens.extend(t.split_whitespace().map(str::to_string));
    }
    let channels = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(Error::Format(format!("bad PFM magic {m:?}"))),
    };
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PFM dimension {s:?}")))
    };
    let width = parse(&tokens[1])?;
    let height = parse(&tokens[2])?;
    let scale: f64 = tokens[3]
        .parse()
        .map_err(|_| Error::Format(format!("bad PFM scale {:?}", tokens[3])))?;
    let little = scale < 0.0;
    let n = width * height * channels;
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)
        .map_err(|_| Error::Format("truncated PFM data".into()))?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b) as f64
            } else {
                f32::from_be_bytes(b) as f64
            }
        })
        .collect();
    let row_len = width * channels;
    let mut data = Vec::with_capacity(n);
    for row in values.chunks_exact(row_len.max(1)).rev() {
        data.extend_from_slice(row);
    }
    Ok(Pfm {
        height,
        width,
        channels,
        comments,
        data,
    })
}

pub fn write_pfm_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_pfm_raw(path.as_ref(), img.height(), img.width(), img.channels(), &[], img.data())
}

pub fn read_pfm_image(path: impl AsRef<Path>) -> Result<Image> {
    let p = read_pfm_raw(path.as_ref())?;
    Image::new(p.height, p.width, p.channels, p.data)
}

pub fn write_pfm_depth(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    write_pfm_raw(path.as_ref(), depth.height(), depth.width(), 1, &[], depth.data())
}

pub fn read_pfm_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let p = read_pfm_raw(path.as_ref())?;
    if p.channels != 1 {
        return Err(Error::Format("depth PFM must be single-channel (Pf)".into()));
    }
    ScalarField::new(p.height, p.width, p.data)
}

/// Writes `layers.len()` equally sized planes stacked vertically into one
/// single-channel PFM, with `header` recorded as a comment line.
pub fn write_pfm_layers(path: impl AsRef<Path>, header: &str, layers: &[ScalarField]) -> Result<()> {
    let first = layers
        .first()
        .ok_or_else(|| Error::invalid("no layers to write"))?;
    let (h, w) = (first.height(), first.width());
    let mut data = Vec::with_capacity(h * w * layers.len());
    for l in layers {
        l.check_dims(h, w)?;
        data.extend_from_slice(l.data());
    }
    write_pfm_raw(path.as_ref(), h * layers.len(), w, 1, &[header.to_string()], &data)
}

/// Reads a stacked multi-layer PFM. Returns the header comments and the
/// planes; `layers` is the expected number of planes.
pub fn read_pfm_layers(path: impl AsRef<Path>, layers: usize) -> Result<(Vec<String>, Vec<ScalarField>)> {
    let p = read_pfm_raw(path.as_ref())?;
    if p.channels != 1 || layers == 0 || p.height % layers != 0 {
        return Err(Error::Format(format!(
            "expected {layers} stacked single-channel planes, got {}x{}x{}",
            p.height, p.width, p.channels
        )));
    }
    let h = p.height / layers;
    let planes = p
        .data
        .chunks_exact(h * p.width)
        .map(|c| ScalarField::new(h, p.width, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok((p.comments, planes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(5, 7, 3, |y, x, c| ((y * 7 + x) * 3 + c) as f64 / 105.0);
        let path = dir.path().join("a.png");
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back, quantize_8bit(&img));
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn png_rejects_two_channels() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::filled(2, 2, 2, 0.5);
        assert!(write_png(dir.path().join("x.png"), &img).is_err());
    }

    #[test]
    fn pfm_is_little_endian_bottom_up() {
        let dir = tempfile::tempdir().unwrap();
        let d = ScalarField::new(2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let path = dir.path().join("d.pfm");
        write_pfm_depth(&path, &d).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"Pf\n3 2\n-1.0\n";
        assert_eq!(&bytes[..header.len()], header);
        let first = f32::from_le_bytes(bytes[header.len()..header.len() + 4].try_into().unwrap());
        // the bottom row is stored first
        assert_eq!(first, 3.0);
        assert_eq!(read_pfm_depth(&path).unwrap(), d);
    }

    #[test]
    fn pfm_color_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::from_fn(4, 3, 3, |y, x, c| (y as f64 - x as f64) * 0.25 + c as f64);
        let path = dir.path().join("c.pfm");
        write_pfm_image(&path, &img).unwrap();
        assert_eq!(read_pfm_image(&path).unwrap(), img);
    }

    #[test]
    fn layered_pfm_keeps_header() {
        let dir = tempfile::tempdir().unwrap();
        let layers: Vec<_> = (0..3)
            .map(|k| ScalarField::from_fn(2, 2, |y, x| (k * 4 + y * 2 + x) as f64))
            .collect();
        let path = dir.path().join("p.pfm");
        write_pfm_layers(&path, "planes: -1 0 1", &layers).unwrap();
        let (comments, back) = read_pfm_layers(&path, 3).unwrap();
        assert_eq!(comments, vec!["planes: -1 0 1".to_string()]);
        assert_eq!(back, layers);
        assert!(read_pfm_layers(&path, 4).is_err());
    }
}
