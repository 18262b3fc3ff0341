//! Image persistence: 8-bit PNG for viewing plus raw float32 `.pgim`
//! sidecars (the wire tensor encoding) for exact pipelines — PNG
//! quantization would corrupt refinement targets.

use std::path::Path;

use crate::error::{Error, Result};
use crate::guidance::wire;
use crate::imagebuf::ImageBuf;

use super::atomic_write;

pub fn save_pgim(path: &Path, img: &ImageBuf) -> Result<()> {
    let mut bytes = Vec::new();
    wire::encode_tensor(img, &mut bytes);
    atomic_write(path, &bytes)
}

pub fn load_pgim(path: &Path) -> Result<ImageBuf> {
    let bytes = std::fs::read(path)?;
    let (img, consumed) = wire::decode_tensor(&bytes, 0)?;
    if consumed != bytes.len() {
        return Err(Error::Format("trailing bytes in image file".into()));
    }
    Ok(img)
}

/// Saves as 8-bit PNG (grayscale or RGB), rounding [0,1] floats.
pub fn save_png(path: &Path, img: &ImageBuf) -> Result<()> {
    let to_u8 = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let (w, h) = (img.width as u32, img.height as u32);
    let mut bytes: Vec<u8> = Vec::new();
    let encoder = image::codecs::png::PngEncoder::new(&mut bytes);
    use image::ImageEncoder;
    match img.channels {
        1 => {
            let data: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
            encoder
                .write_image(&data, w, h, image::ExtendedColorType::L8)
                .map_err(|e| Error::Format(format!("png encode: {e}")))?;
        }
        3 => {
            let data: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
            encoder
                .write_image(&data, w, h, image::ExtendedColorType::Rgb8)
                .map_err(|e| Error::Format(format!("png encode: {e}")))?;
        }
        c => return Err(Error::invalid(format!("cannot save {c}-channel image as PNG"))),
    }
    atomic_write(path, &bytes)
}

pub fn load_png(path: &Path) -> Result<ImageBuf> {
    let img = image::open(path).map_err(|e| Error::Format(format!("png decode: {e}")))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let data: Vec<f32> = rgb.as_raw().iter().map(|v| *v as f32 / 255.0).collect();
    ImageBuf::from_data(h, w, 3, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn tmp_dir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("ptg-img-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn pgim_round_trip_is_exact() {
        let mut rng = seeded_rng(1);
        let img = ImageBuf::from_data(
            5,
            7,
            3,
            (0..105).map(|_| rng.gen_range(-2.0f32..2.0)).collect(),
        )
        .unwrap();
        let path = tmp_dir().join("x.pgim");
        save_pgim(&path, &img).unwrap();
        let loaded = load_pgim(&path).unwrap();
        assert_eq!(img, loaded);
    }

    #[test]
    fn png_round_trip_is_exact_at_8bit_values() {
        let img = ImageBuf::from_data(
            2,
            2,
            3,
            (0..12).map(|i| (i * 20) as f32 / 255.0).collect(),
        )
        .unwrap();
        let path = tmp_dir().join("x.png");
        save_png(&path, &img).unwrap();
        let loaded = load_png(&path).unwrap();
        for (a, b) in img.data.iter().zip(&loaded.data) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }
}
