//! PNG reading and writing for RGB images and 8-bit label maps.

use std::io::Cursor;
use std::path::Path;

use anyhow::{bail, Context, Result};
use base64::Engine;
use compogan_core::grouping::{argmax_map, LabelMap};
use compogan_core::raster::RgbImage;
use compogan_core::{Scalar, Tensor};
use image::{GrayImage, ImageFormat, RgbImage as PngRgb};

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    std::fs::write(path, png_bytes(img)).with_context(|| format!("writing {}", path.display()))
}

/// Label map stored as single-channel 8-bit PNG; `num_classes` bounds the
/// accepted values.
pub fn read_labels(path: &Path, num_classes: usize) -> Result<LabelMap> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    if img.color() != image::ColorType::L8 {
        bail!("{}: label maps must be 8-bit single-channel, got {:?}", path.display(), img.color());
    }
    let g = img.into_luma8();
    let (w, h) = g.dimensions();
    LabelMap::new(h as usize, w as usize, num_classes, g.into_raw()).with_context(|| format!("in {}", path.display()))
}

pub fn write_labels(path: &Path, map: &LabelMap) -> Result<()> {
    let g = GrayImage::from_raw(map.width() as u32, map.height() as u32, map.values().to_vec()).expect("buffer matches dimensions");
    g.save_with_format(path, ImageFormat::Png).with_context(|| format!("writing {}", path.display()))
}

pub fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let buf = PngRgb::from_raw(img.width as u32, img.height as u32, img.data.clone()).expect("buffer matches dimensions");
    let mut out = Cursor::new(Vec::new());
    buf.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn png_base64(img: &RgbImage) -> String {
    base64::engine::general_purpose::STANDARD.encode(png_bytes(img))
}

pub fn decode_png_base64(s: &str) -> Result<RgbImage> {
    let bytes = base64::engine::general_purpose::STANDARD.decode(s)?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png)?.into_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
}

/// One color per class; classes beyond the palette are gray.
pub fn colorize(map: &LabelMap, palette: &[[u8; 3]]) -> RgbImage {
    let data = map.values().iter().flat_map(|&v| palette.get(v as usize).copied().unwrap_or([128, 128, 128])).collect();
    RgbImage { width: map.width(), height: map.height(), data }
}

/// Nearest-neighbour upscale by an integer factor.
pub fn upscale(img: &RgbImage, factor: usize) -> RgbImage {
    let (w, h) = (img.width * factor, img.height * factor);
    let mut out = RgbImage::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            out.set(y, x, img.pixel(y / factor, x / factor));
        }
    }
    out
}

/// Argmax label map of sample `b` of a `[B, C, H, W]` soft mask.
pub fn mask_labels<T: Scalar>(mask: &Tensor<T>, b: usize) -> Result<LabelMap> {
    let s = mask.shape();
    if s.len() != 4 {
        bail!("expected a [B, C, H, W] mask, got {s:?}");
    }
    Ok(argmax_map(&mask.narrow(0, b, 1).reshape(&s[1..]))?)
}

/// Tiles equally sized images row by row, `cols` per row, 2 px gutters.
pub fn grid(images: &[RgbImage], cols: usize) -> RgbImage {
    let Some(first) = images.first() else {
        return RgbImage::filled(1, 1, [0, 0, 0]);
    };
    let (tw, th) = (first.width + 2, first.height + 2);
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let mut out = RgbImage::filled(cols * tw, rows * th, [255, 255, 255]);
    for (i, img) in images.iter().enumerate() {
        let (oy, ox) = ((i / cols) * th + 1, (i % cols) * tw + 1);
        for y in 0..img.height.min(first.height) {
            for x in 0..img.width.min(first.width) {
                out.set(oy + y, ox + x, img.pixel(y, x));
            }
        }
    }
    out
}
