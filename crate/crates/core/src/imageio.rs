//! PNG / PPM decoding into `[0, 1]` tensors and 8-bit PNG encoding.

use std::fs;
use std::path::Path;

use image::{ColorType, ImageEncoder};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decodes an 8-bit PNG or binary PPM into a `1,C,H,W` tensor in `[0, 1]`.
/// `channels` selects RGB (3) or luma (1).
pub fn decode_image_bytes(bytes: &[u8], channels: usize, origin: &Path) -> Result<Tensor> {
    let err = |message: String| Error::Image {
        path: origin.to_path_buf(),
        message,
    };
    let format = image::guess_format(bytes).map_err(|e| err(e.to_string()))?;
    if !matches!(format, image::ImageFormat::Png | image::ImageFormat::Pnm) {
        return Err(err(format!("unsupported format {format:?}; expected PNG or PPM")));
    }
    let img = image::load_from_memory_with_format(bytes, format).map_err(|e| err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match channels {
        3 => {
            let rgb = img.to_rgb8();
            let px = rgb.as_raw();
            (0..3)
                .flat_map(|c| (0..h * w).map(move |i| px[i * 3 + c] as f32 / 255.0))
                .collect()
        }
        1 => img.to_luma8().as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        other => return Err(err(format!("cannot decode into {other} channels"))),
    };
    Tensor::new(vec![1, channels, h, w], data)
}

pub fn read_image(path: impl AsRef<Path>, channels: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image_bytes(&bytes, channels, path)
}

/// Quantizes a `1,C,H,W` tensor (`C` = 1 or 3) with values in `[0, 1]` to 8 bits.
pub fn tensor_to_bytes(image: &Tensor) -> Result<(usize, usize, Vec<u8>, ColorType)> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || !(c == 1 || c == 3) {
        return Err(Error::shape("png encode", format!("expected 1,1|3,H,W, got {:?}", image.shape())));
    }
    let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let d = image.data();
    let plane = h * w;
    let bytes = (0..plane)
        .flat_map(|i| (0..c).map(move |ch| q(d[ch * plane + i])))
        .collect();
    let color = if c == 3 { ColorType::Rgb8 } else { ColorType::L8 };
    Ok((w, h, bytes, color))
}

pub fn encode_png(width: usize, height: usize, pixels: &[u8], color: ColorType) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(pixels, width as u32, height as u32, color.into())
        .map_err(|e| Error::Image {
            path: "<memory>".into(),
            message: e.to_string(),
        })?;
    Ok(out)
}

pub fn write_png(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8], color: ColorType) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_png(width, height, pixels, color)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let (w, h, px, color) = tensor_to_bytes(image)?;
    write_png(path, w, h, &px, color)
}

/// Reads a single-channel 8-bit PNG as raw bytes with its `(height, width)`.
pub fn read_gray_png(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.to_luma8().into_raw()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_on_8bit_grid() {
        let t = Tensor::from_fn(vec![1, 3, 4, 5], |i| ((i * 37) % 256) as f32 / 255.0);
        let (w, h, px, color) = tensor_to_bytes(&t).unwrap();
        let png = encode_png(w, h, &px, color).unwrap();
        let back = decode_image_bytes(&png, 3, Path::new("mem.png")).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn decodes_ppm() {
        let mut ppm = b"P6\n2 1\n255\n".to_vec();
        ppm.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let t = decode_image_bytes(&ppm, 3, Path::new("a.ppm")).unwrap();
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn rejects_other_formats() {
        assert!(decode_image_bytes(b"GIF89a....", 3, Path::new("x.gif")).is_err());
    }
}
