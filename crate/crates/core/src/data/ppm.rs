//! Binary PPM (`P6`, maxval 255) images.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Writes a `[3, H, W]` tensor in `[0, 1]`; values are clamped and rounded.
pub fn write_ppm<W: Write>(mut w: W, image: &Tensor) -> Result<()> {
    image.expect_rank("write_ppm", 3)?;
    let (c, h, wd) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c != 3 {
        return Err(Error::dim("write_ppm", format!("need 3 channels, got {c}")));
    }
    let plane = h * wd;
    let mut bytes = Vec::with_capacity(3 * plane + 32);
    write!(bytes, "P6\n{wd} {h}\n255\n")?;
    for i in 0..plane {
        for ch in 0..3 {
            bytes.push((image.data()[ch * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(None, "malformed PPM header"))
}

/// Reads a `P6` image into a `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn read_ppm<R: Read>(mut r: R) -> Result<Tensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if !bytes.starts_with(b"P6") {
        return Err(Error::parse(None, "not a binary PPM (P6)"));
    }
    let mut pos = 2;
    let w = header_token(&bytes, &mut pos)?;
    let h = header_token(&bytes, &mut pos)?;
    let max = header_token(&bytes, &mut pos)?;
    if max == 0 || max > 255 {
        return Err(Error::parse(None, format!("unsupported maxval {max}")));
    }
    pos += 1;
    let plane = w * h;
    let pixels = bytes
        .get(pos..pos + 3 * plane)
        .ok_or_else(|| Error::parse(None, "PPM pixel data truncated"))?;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for ch in 0..3 {
            data[ch * plane + i] = pixels[3 * i + ch] as f64 / max as f64;
        }
    }
    Tensor::new(&[3, h, w], data)
}
