//! Image export. PPM is the bit-exact interchange format; PNG (behind the
//! `png` feature) is for viewing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb_dims(image: &Tensor) -> Result<(usize, usize)> {
    match image.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(Error::Dimension(format!("expected a [3, h, w] image, got {s:?}"))),
    }
}

/// Interleaved 8-bit RGB bytes, row-major.
pub fn to_rgb8(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = rgb_dims(image)?;
    let d = image.data();
    let plane = h * w;
    Ok((0..plane)
        .flat_map(|p| (0..3).map(move |c| quantize(d[c * plane + p])))
        .collect())
}

/// Binary PPM (`P6`, maxval 255) encoding of a `[3, h, w]` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = rgb_dims(image)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(to_rgb8(image)?);
    Ok(out)
}

fn header_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::parse(1, "ppm", "truncated header"));
    }
    std::str::from_utf8(&bytes[start..*pos]).map_err(|_| Error::parse(1, "ppm", "header is not ASCII"))
}

/// Decodes a binary PPM with maxval 255 into a `[3, h, w]` tensor.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    if header_token(bytes, &mut pos)? != "P6" {
        return Err(Error::parse(1, "ppm", "only binary P6 files are supported"));
    }
    let mut num = |field: &str| -> Result<usize> {
        let tok = header_token(bytes, &mut pos)?;
        tok.parse().map_err(|_| Error::parse(1, field, format!("`{tok}` is not a number")))
    };
    let (w, h, max) = (num("width")?, num("height")?, num("maxval")?);
    if max != 255 {
        return Err(Error::parse(1, "maxval", format!("expected 255, got {max}")));
    }
    let pixels = &bytes[(pos + 1).min(bytes.len())..];
    if pixels.len() != 3 * w * h {
        return Err(Error::parse(1, "ppm", format!("expected {} pixel bytes, got {}", 3 * w * h, pixels.len())));
    }
    let plane = w * h;
    Tensor::new(
        &[3, h, w],
        (0..3 * plane)
            .map(|i| f64::from(pixels[3 * (i % plane) + i / plane]) / 255.0)
            .collect(),
    )
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Rounds an image to the values a PPM round trip would give back.
pub fn quantized(image: &Tensor) -> Tensor {
    image.map(|v| f64::from(quantize(v)) / 255.0)
}

#[cfg(feature = "png")]
pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = rgb_dims(image)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let to_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(to_io)?;
    writer.write_image_data(&to_rgb8(image)?).map_err(to_io)?;
    writer.finish().map_err(to_io)
}
