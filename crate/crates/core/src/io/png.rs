use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};

use crate::error::{Error, Result};
use crate::raster::Image;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

/// Reads an 8- or 16-bit PNG as a three-channel raster in `[0, 1]`.
///
/// Gray images are replicated into RGB and alpha channels are dropped.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = std::fs::read(path.as_ref())?;
    decode_png(&bytes)
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    Ok(from_dynamic(&img))
}

fn from_dynamic(img: &DynamicImage) -> Image {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let sixteen = matches!(
        img,
        DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA16(_)
            | DynamicImage::ImageRgb16(_)
            | DynamicImage::ImageRgba16(_)
    );
    if sixteen {
        let buf = img.to_rgb16();
        let data = buf.as_raw().iter().map(|&v| v as f64 / 65535.0).collect();
        Image::from_vec(w, h, 3, data).expect("rgb16 buffer matches dimensions")
    } else {
        let buf = img.to_rgb8();
        let data = buf.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
        Image::from_vec(w, h, 3, data).expect("rgb8 buffer matches dimensions")
    }
}

/// Writes a one- or three-channel raster as PNG, clamping to `[0, 1]`.
pub fn write_png(path: impl AsRef<Path>, img: &Image, depth: BitDepth) -> Result<()> {
    let bytes = encode_png(img, depth)?;
    std::fs::write(path.as_ref(), bytes)?;
    Ok(())
}

pub fn encode_png(img: &Image, depth: BitDepth) -> Result<Vec<u8>> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let quantize8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let quantize16 = |v: f64| (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let dynamic = match (img.channels(), depth) {
        (3, BitDepth::Eight) => DynamicImage::ImageRgb8(
            ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, img.data().iter().map(|&v| quantize8(v)).collect())
                .expect("buffer size"),
        ),
        (3, BitDepth::Sixteen) => DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, img.data().iter().map(|&v| quantize16(v)).collect())
                .expect("buffer size"),
        ),
        (1, BitDepth::Eight) => DynamicImage::ImageLuma8(
            ImageBuffer::<Luma<u8>, _>::from_raw(w, h, img.data().iter().map(|&v| quantize8(v)).collect())
                .expect("buffer size"),
        ),
        (1, BitDepth::Sixteen) => DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, img.data().iter().map(|&v| quantize16(v)).collect())
                .expect("buffer size"),
        ),
        (c, _) => {
            return Err(Error::Contract(format!(
                "PNG output needs 1 or 3 channels, got {c}"
            )))
        }
    };
    let mut out = Cursor::new(Vec::new());
    dynamic.write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}
