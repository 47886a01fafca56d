//! Image files: 8-bit sRGB PNG for color (alpha = opacity) and
//! little-endian 32-bit PFM for depth and transmittance.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::renderer::RenderedFrame;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes color as RGB and `1 − T` as alpha.
pub fn write_png(path: &Path, frame: &RenderedFrame) -> Result<()> {
    frame.validate()?;
    let mut buf = Vec::with_capacity(frame.len() * 4);
    for i in 0..frame.len() {
        let c = frame.color[i];
        buf.extend([to_u8(c[0]), to_u8(c[1]), to_u8(c[2]), to_u8(1.0 - frame.transmittance[i])]);
    }
    let img = image::RgbaImage::from_raw(frame.width as u32, frame.height as u32, buf)
        .ok_or_else(|| Error::Dimension("png buffer size".into()))?;
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))
}

/// Color and transmittance from a PNG written by [`write_png`]; depth is
/// left at zero.
pub fn read_png(path: &Path) -> Result<RenderedFrame> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::Io(io),
            other => Error::Format(format!("{}: {other}", path.display())),
        })?
        .to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut frame = RenderedFrame::background(w, h);
    for (i, p) in img.pixels().enumerate() {
        frame.color[i] = [p[0] as f64 / 255.0, p[1] as f64 / 255.0, p[2] as f64 / 255.0];
        frame.transmittance[i] = 1.0 - p[3] as f64 / 255.0;
    }
    Ok(frame)
}

/// Single-channel PFM, rows stored bottom to top as the format requires.
pub fn write_pfm(path: &Path, width: usize, height: usize, data: &[f64]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::Dimension(format!("pfm data has {} values for {width}x{height}", data.len())));
    }
    let mut out = Vec::with_capacity(32 + data.len() * 4);
    write!(out, "Pf\n{width} {height}\n-1.0\n")?;
    for row in (0..height).rev() {
        for v in &data[row * width..(row + 1) * width] {
            out.extend((*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| Error::Format(format!("{}: {why}", path.display()));
    // Header: three whitespace-terminated tokens, then raw floats.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 && pos < bytes.len() {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    pos += 1;
    if tokens.len() < 4 || tokens[0] != "Pf" {
        return Err(bad("not a single-channel PFM"));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("scale"))?;
    let body = bytes.get(pos..).ok_or_else(|| bad("truncated"))?;
    if body.len() != width * height * 4 {
        return Err(bad("payload size does not match header"));
    }
    let mut data = vec![0.0; width * height];
    for (k, chunk) in body.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (height - 1 - k / width, k % width);
        data[row * width + col] = v as f64;
    }
    Ok((width, height, data))
}
