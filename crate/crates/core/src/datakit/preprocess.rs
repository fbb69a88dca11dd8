use image::imageops::{self, FilterType};
use image::{DynamicImage, ImageBuffer, Rgb, Rgb32FImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes a PNG into `[channels, H, W]` with values scaled to [0, 1].
/// The native channel count is kept; [`preprocess`] rejects non-RGB data.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let channels = img.color().channel_count() as usize;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let interleaved: Vec<f32> = match &img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            img.as_bytes().iter().map(|&b| b as f32 / 255.0).collect()
        }
        _ => {
            // 16-bit and float variants: go through f32 RGB(A).
            let rgba = img.to_rgba32f();
            let mut out = Vec::with_capacity(w * h * channels);
            for p in rgba.pixels() {
                out.extend_from_slice(&p.0[..channels.min(4)]);
            }
            out
        }
    };
    let mut planar = vec![0.0; channels * h * w];
    for (i, px) in interleaved.chunks(channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            planar[c * h * w + i] = v;
        }
    }
    Tensor::new(vec![channels, h, w], planar)
}

/// Encodes a `[3, H, W]` image in [0, 1] as 8-bit RGB PNG (round to nearest).
pub fn encode_png(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("encode_png", &[3, 0, 0], s));
    }
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut raw = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            raw.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let buf: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer sized from shape");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Resizes a 3-channel `[3, H, W]` image to `resolution × resolution`
/// (triangle filter) and clips values to [0, 1].
pub fn preprocess(raw: &Tensor, resolution: usize) -> Result<Tensor> {
    let s = raw.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::shape("preprocess expects a 3-channel image", &[3, 0, 0], s));
    }
    if resolution == 0 {
        return Err(Error::config("resolution", "must be positive"));
    }
    let (h, w) = (s[1], s[2]);
    if h == resolution && w == resolution {
        return Ok(raw.map(|v| v.clamp(0.0, 1.0)));
    }
    let d = raw.data();
    let mut interleaved = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            interleaved.push(d[c * h * w + i]);
        }
    }
    let img: Rgb32FImage = ImageBuffer::from_raw(w as u32, h as u32, interleaved).expect("buffer sized from shape");
    let out = imageops::resize(&img, resolution as u32, resolution as u32, FilterType::Triangle);
    let n = resolution * resolution;
    let mut planar = vec![0.0; 3 * n];
    for (i, p) in out.pixels().enumerate() {
        for c in 0..3 {
            planar[c * n + i] = p.0[c].clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, resolution, resolution], planar)
}
