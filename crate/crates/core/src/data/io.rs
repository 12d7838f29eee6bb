use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use ndarray::{Array2, Array3};

use super::{Image, Mask};
use crate::error::{Error, Result};

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })
}

/// Reads an 8-bit RGB(A) image into `[0, 1]` reals. Alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let rgb = open(path.as_ref())?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Image(Array3::from_shape_fn(
        (h as usize, w as usize, 3),
        |(y, x, c)| f64::from(rgb.get_pixel(x as u32, y as u32)[c]) / 255.0,
    )))
}

/// Reads a mask; any pixel with luma ≥ 128 is foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let gray = open(path.as_ref())?.to_luma8();
    let (w, h) = gray.dimensions();
    Ok(Mask(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(gray.get_pixel(x as u32, y as u32)[0] >= 128)
    })))
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save(path: &Path, f: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    f(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = image.dims();
    let buf = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        Rgb([
            to_u8(image.0[[y, x, 0]]),
            to_u8(image.0[[y, x, 1]]),
            to_u8(image.0[[y, x, 2]]),
        ])
    });
    save(path.as_ref(), |p| buf.save(p))
}

/// Writes a mask as single-channel PNG with 0/255 values.
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = mask.dims();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    save(path.as_ref(), |p| buf.save(p))
}

/// Writes a `[0, 1]` map as grayscale, `round(v * 255)`.
pub fn save_gray(map: &Array2<f64>, path: impl AsRef<Path>) -> Result<()> {
    let (h, w) = map.dim();
    let buf = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([to_u8(map[[y as usize, x as usize]])])
    });
    save(path.as_ref(), |p| buf.save(p))
}
