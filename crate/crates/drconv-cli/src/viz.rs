//! Tiny image writers for inspection output: binary PPM (P6) for color
//! region maps, plain-text PGM (P2) for grayscale inputs, and a hue wheel
//! that gives every region id a stable, well-separated color.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use drconv::{Error, Result};

/// Write an 8-bit RGB image as binary PPM (`P6`). `rgb` is row-major,
/// three bytes per pixel.
pub fn write_ppm(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != w * h * 3 {
        return Err(Error::Shape(format!(
            "a {w}x{h} PPM wants {} bytes, got {}",
            w * h * 3,
            rgb.len()
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    out.write_all(rgb)?;
    out.flush()?;
    Ok(())
}

/// Write an 8-bit grayscale image as plain-text PGM (`P2`), one row per
/// line.
pub fn write_pgm(path: &Path, w: usize, h: usize, gray: &[u8]) -> Result<()> {
    if gray.len() != w * h {
        return Err(Error::Shape(format!("a {w}x{h} PGM wants {} bytes, got {}", w * h, gray.len())));
    }
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P2\n{w} {h}\n255\n")?;
    for row in gray.chunks(w) {
        let line: Vec<String> = row.iter().map(u8::to_string).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    out.flush()?;
    Ok(())
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let to8 = |f: f64| ((f + m) * 255.0).round().clamp(0.0, 255.0) as u8;
    [to8(r), to8(g), to8(b)]
}

/// A stable color for region `t` of `m`: evenly spaced hues at full
/// saturation.
pub fn region_color(t: usize, m: usize) -> [u8; 3] {
    hsv_to_rgb(360.0 * t as f64 / m.max(1) as f64, 1.0, 1.0)
}

/// Paint a region-id map (`ids[u*w + v]`, ids `< m`) into RGB bytes.
pub fn ids_to_rgb(ids: &[usize], m: usize) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(ids.len() * 3);
    for &t in ids {
        rgb.extend_from_slice(&region_color(t, m));
    }
    rgb
}

/// Map unit-interval intensities to 8-bit gray (clamping out-of-range
/// values rather than wrapping).
pub fn unit_to_gray(values: &[f64]) -> Vec<u8> {
    values.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
}

/// Nearest-neighbor upscale of a row-major image with `bpp` bytes per
/// pixel (1 for gray, 3 for RGB).
pub fn upscale(data: &[u8], w: usize, h: usize, bpp: usize, factor: usize) -> Vec<u8> {
    let f = factor.max(1);
    let mut out = Vec::with_capacity(data.len() * f * f);
    for y in 0..h * f {
        let sy = y / f;
        for x in 0..w * f {
            let sx = x / f;
            let at = (sy * w + sx) * bpp;
            out.extend_from_slice(&data[at..at + bpp]);
        }
    }
    out
}
