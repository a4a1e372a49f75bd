//! Thin helpers over `image` rasters: cropping, bilinear resizing, and PNG
//! encoding for backend requests.

use std::io::Cursor;
use std::path::Path;

use fast_image_resize::images::{Image, ImageRef};
use fast_image_resize::{FilterType, PixelType, ResizeAlg, ResizeOptions, Resizer};
use image::imageops;
use image::{ImageFormat, RgbImage};

use crate::geometry::Region;

pub type Raster = RgbImage;

/// Bilinear resize. Identity sizes return a clone.
pub fn resize_bilinear(img: &Raster, width: u32, height: u32) -> Raster {
    if img.width() == width && img.height() == height {
        return img.clone();
    }
    let src =
        ImageRef::new(img.width(), img.height(), img.as_raw(), PixelType::U8x3).expect("RGB8 buffer matches its size");
    let mut dst = Image::new(width, height, PixelType::U8x3);
    let options = ResizeOptions::new().resize_alg(ResizeAlg::Convolution(FilterType::Bilinear));
    Resizer::new().resize(&src, &mut dst, &options).expect("same pixel type on both sides");
    RgbImage::from_raw(width, height, dst.into_vec()).expect("destination buffer matches its size")
}

/// Target size with the longest side clamped to `max_side`, aspect preserved.
pub fn fit_within(width: u32, height: u32, max_side: u32) -> (u32, u32) {
    let longest = width.max(height);
    if longest <= max_side {
        return (width, height);
    }
    let scale = max_side as f64 / longest as f64;
    let w = ((width as f64 * scale).round() as u32).clamp(1, max_side);
    let h = ((height as f64 * scale).round() as u32).clamp(1, max_side);
    (w, h)
}

/// Downsamples so the longest side is at most `max_side`.
pub fn downsample_to_fit(img: &Raster, max_side: u32) -> Raster {
    let (w, h) = fit_within(img.width(), img.height(), max_side);
    resize_bilinear(img, w, h)
}

/// Copies out `region`, given in the raster's own pixel coordinates.
///
/// The region is clipped to the raster bounds.
pub fn crop(img: &Raster, region: &Region) -> Raster {
    let x = region.x.min(img.width().saturating_sub(1));
    let y = region.y.min(img.height().saturating_sub(1));
    let w = region.w.min(img.width() - x).max(1);
    let h = region.h.min(img.height() - y).max(1);
    imageops::crop_imm(img, x, y, w, h).to_image()
}

pub fn encode_png(img: &Raster) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("PNG encoding into memory cannot fail for RGB8");
    buf.into_inner()
}

pub fn decode_image(bytes: &[u8]) -> Result<Raster, image::ImageError> {
    Ok(image::load_from_memory(bytes)?.to_rgb8())
}

pub fn load_image(path: &Path) -> Result<Raster, image::ImageError> {
    Ok(image::open(path)?.to_rgb8())
}
