use std::path::Path;

use candle_core::{Device, Tensor};
use image::imageops::FilterType;
use image::RgbImage;

use crate::error::{Error, Result};

/// Maps an 8-bit value to `[-1, 1]`.
pub fn normalize_pixel(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn decode_image(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)
        .map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(img.to_rgb8())
}

/// Bilinear resize to `resolution`² (skipped when already that size), then
/// `v / 127.5 − 1`. Returns a `(3, r, r)` tensor. Gray images arrive here as
/// RGB with equal channels.
pub fn preprocess(image: &RgbImage, resolution: usize) -> Result<Tensor> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Decode { path: "<memory>".into(), reason: "empty image".into() });
    }
    let r = resolution as u32;
    let resized;
    let img = if image.width() == r && image.height() == r {
        image
    } else {
        resized = image::imageops::resize(image, r, r, FilterType::Triangle);
        &resized
    };
    let mut planes = vec![0f32; 3 * resolution * resolution];
    for (x, y, p) in img.enumerate_pixels() {
        let idx = y as usize * resolution + x as usize;
        for c in 0..3 {
            planes[c * resolution * resolution + idx] = normalize_pixel(p[c]);
        }
    }
    Ok(Tensor::from_vec(planes, (3, resolution, resolution), &Device::Cpu)?)
}

/// Inverse of [`preprocess`] for one `(3, r, r)` or `(1, 3, r, r)` image.
pub fn to_rgb_image(t: &Tensor) -> Result<RgbImage> {
    let t = if t.rank() == 4 { t.squeeze(0)? } else { t.clone() };
    let (c, h, w) = t.dims3()?;
    if c != 3 {
        return Err(Error::Dimension(format!("expected 3 channels, got {c}")));
    }
    let v = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        let idx = y as usize * w + x as usize;
        for ch in 0..3 {
            let val = (v[ch * h * w + idx] + 1.0) * 127.5;
            p[ch] = val.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(img)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::other(other.to_string())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_endpoints() {
        assert_eq!(normalize_pixel(255), 1.0);
        assert_eq!(normalize_pixel(0), -1.0);
        assert!((normalize_pixel(127) as f64 - (127.0 / 127.5 - 1.0)).abs() < 1e-7);
        assert!((normalize_pixel(127) + 0.00392).abs() < 1e-5);
    }

    #[test]
    fn resizes_to_target() {
        let img = RgbImage::from_fn(300, 300, |x, y| image::Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let t = preprocess(&img, 256).unwrap();
        assert_eq!(t.dims(), &[3, 256, 256]);
        let v: Vec<f32> = t.flatten_all().unwrap().to_vec1().unwrap();
        assert!(v.iter().all(|x| (-1.0..=1.0).contains(x)));
    }

    #[test]
    fn round_trip_through_png_values() {
        let img = RgbImage::from_fn(32, 32, |x, y| image::Rgb([x as u8 * 8, y as u8 * 8, 200]));
        let back = to_rgb_image(&preprocess(&img, 32).unwrap()).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn corrupt_file_is_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.png");
        std::fs::write(&p, b"not a png").unwrap();
        assert!(matches!(decode_image(&p), Err(Error::Decode { .. })));
    }
}
