//! Binary wire protocol for remote guidance providers, version 1.
//!
//! All multi-byte integers and floats are little-endian.
//!
//! Tensor encoding (images and noise alike):
//!
//! ```text
//! offset  size  field
//! 0       8     magic 50 47 49 4D 00 00 00 01  ("PGIM\0\0\0\x01")
//! 8       4     height  (u32)
//! 12      4     width   (u32)
//! 16      4     channels(u32)
//! 20      4*n   payload (f32), n = height*width*channels, row-major,
//!               channel-interleaved
//! ```
//!
//! Request header, fixed field order:
//!
//! ```text
//! timestep    f64
//! noise_level f64
//! prompt      u32 byte length + UTF-8 bytes
//! seed        u64
//! ```
//!
//! HTTP endpoints:
//! - `GET  /health` -> body is the protocol version string, `1`.
//! - `POST /predict_noise`: header + tensor `z_t` + tensor `noise`
//!   (`timestep` set, `noise_level` 0) -> one tensor (predicted noise).
//! - `POST /denoise`: header + tensor image (`noise_level` set, `timestep`
//!   0) -> one tensor (refined image).
//!
//! The noise tensor rides along in `/predict_noise` so debugging servers can
//! implement exact zero-residual echoes; real backends ignore it.

use crate::error::{Error, Result, TransportError};
use crate::imagebuf::ImageBuf;

pub const TENSOR_MAGIC: [u8; 8] = [0x50, 0x47, 0x49, 0x4D, 0x00, 0x00, 0x00, 0x01];
pub const PROTOCOL_VERSION: &str = "1";

pub const HEALTH_PATH: &str = "/health";
pub const PREDICT_NOISE_PATH: &str = "/predict_noise";
pub const DENOISE_PATH: &str = "/denoise";

fn malformed(msg: impl Into<String>) -> Error {
    TransportError::Malformed(msg.into()).into()
}

pub fn encode_tensor(img: &ImageBuf, out: &mut Vec<u8>) {
    out.extend_from_slice(&TENSOR_MAGIC);
    out.extend_from_slice(&(img.height as u32).to_le_bytes());
    out.extend_from_slice(&(img.width as u32).to_le_bytes());
    out.extend_from_slice(&(img.channels as u32).to_le_bytes());
    out.reserve(img.data.len() * 4);
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one tensor starting at `offset`; returns the tensor and the
/// offset just past it.
pub fn decode_tensor(bytes: &[u8], offset: usize) -> Result<(ImageBuf, usize)> {
    let need = |n: usize| -> Result<()> {
        if bytes.len() < offset + n {
            Err(malformed(format!("tensor truncated: need {n} bytes at offset {offset}")))
        } else {
            Ok(())
        }
    };
    need(20)?;
    if bytes[offset..offset + 8] != TENSOR_MAGIC {
        return Err(malformed("bad tensor magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let h = u32_at(offset + 8);
    let w = u32_at(offset + 12);
    let c = u32_at(offset + 16);
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| malformed("tensor dimensions overflow"))?;
    need(20 + n * 4)?;
    let mut data = Vec::with_capacity(n);
    let base = offset + 20;
    for i in 0..n {
        data.push(f32::from_le_bytes(bytes[base + i * 4..base + i * 4 + 4].try_into().unwrap()));
    }
    Ok((ImageBuf::from_data(h, w, c, data)?, base + n * 4))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RequestHeader {
    pub timestep: f64,
    pub noise_level: f64,
    pub prompt: String,
    pub seed: u64,
}

pub fn encode_header(h: &RequestHeader, out: &mut Vec<u8>) {
    out.extend_from_slice(&h.timestep.to_le_bytes());
    out.extend_from_slice(&h.noise_level.to_le_bytes());
    let prompt = h.prompt.as_bytes();
    out.extend_from_slice(&(prompt.len() as u32).to_le_bytes());
    out.extend_from_slice(prompt);
    out.extend_from_slice(&h.seed.to_le_bytes());
}

pub fn decode_header(bytes: &[u8]) -> Result<(RequestHeader, usize)> {
    if bytes.len() < 20 {
        return Err(malformed("header truncated"));
    }
    let timestep = f64::from_le_bytes(bytes[0..8].try_into().unwrap());
    let noise_level = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let plen = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + plen + 8 {
        return Err(malformed("header prompt/seed truncated"));
    }
    let prompt = std::str::from_utf8(&bytes[20..20 + plen])
        .map_err(|_| malformed("prompt is not valid UTF-8"))?
        .to_string();
    let seed = u64::from_le_bytes(bytes[20 + plen..28 + plen].try_into().unwrap());
    Ok((RequestHeader { timestep, noise_level, prompt, seed }, 28 + plen))
}

pub fn encode_predict_noise_request(
    z_t: &ImageBuf,
    noise: &ImageBuf,
    timestep: f64,
    prompt: &str,
    seed: u64,
) -> Vec<u8> {
    let mut out = Vec::new();
    encode_header(
        &RequestHeader { timestep, noise_level: 0.0, prompt: prompt.to_string(), seed },
        &mut out,
    );
    encode_tensor(z_t, &mut out);
    encode_tensor(noise, &mut out);
    out
}

pub fn decode_predict_noise_request(bytes: &[u8]) -> Result<(RequestHeader, ImageBuf, ImageBuf)> {
    let (header, off) = decode_header(bytes)?;
    let (z_t, off) = decode_tensor(bytes, off)?;
    let (noise, off) = decode_tensor(bytes, off)?;
    if off != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - off)));
    }
    if !z_t.same_shape(&noise) {
        return Err(TransportError::DimensionMismatch {
            expected: format!("{}x{}x{}", z_t.height, z_t.width, z_t.channels),
            got: format!("{}x{}x{}", noise.height, noise.width, noise.channels),
        }
        .into());
    }
    Ok((header, z_t, noise))
}

pub fn encode_denoise_request(
    image: &ImageBuf,
    noise_level: f64,
    prompt: &str,
    seed: u64,
) -> Vec<u8> {
    let mut out = Vec::new();
    encode_header(
        &RequestHeader { timestep: 0.0, noise_level, prompt: prompt.to_string(), seed },
        &mut out,
    );
    encode_tensor(image, &mut out);
    out
}

pub fn decode_denoise_request(bytes: &[u8]) -> Result<(RequestHeader, ImageBuf)> {
    let (header, off) = decode_header(bytes)?;
    let (image, off) = decode_tensor(bytes, off)?;
    if off != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok((header, image))
}

/// A response is exactly one tensor.
pub fn encode_response(tensor: &ImageBuf) -> Vec<u8> {
    let mut out = Vec::new();
    encode_tensor(tensor, &mut out);
    out
}

pub fn decode_response(bytes: &[u8]) -> Result<ImageBuf> {
    let (tensor, off) = decode_tensor(bytes, 0)?;
    if off != bytes.len() {
        return Err(malformed(format!("{} trailing bytes", bytes.len() - off)));
    }
    Ok(tensor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn random_image(rng: &mut rand_chacha::ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageBuf {
        ImageBuf::from_data(h, w, c, (0..h * w * c).map(|_| rng.gen::<f32>()).collect()).unwrap()
    }

    #[test]
    fn tensor_round_trip_is_lossless() {
        let mut rng = seeded_rng(3);
        let img = random_image(&mut rng, 64, 64, 3);
        let mut bytes = Vec::new();
        encode_tensor(&img, &mut bytes);
        let (decoded, consumed) = decode_tensor(&bytes, 0).unwrap();
        assert_eq!(consumed, bytes.len());
        assert_eq!(decoded.data, img.data);
        assert_eq!((decoded.height, decoded.width, decoded.channels), (64, 64, 3));
    }

    #[test]
    fn predict_noise_request_round_trips() {
        let mut rng = seeded_rng(4);
        let z = random_image(&mut rng, 8, 8, 3);
        let n = random_image(&mut rng, 8, 8, 3);
        let bytes = encode_predict_noise_request(&z, &n, 0.37, "a portrait", 99);
        let (header, z2, n2) = decode_predict_noise_request(&bytes).unwrap();
        assert_eq!(header.timestep, 0.37);
        assert_eq!(header.prompt, "a portrait");
        assert_eq!(header.seed, 99);
        assert_eq!(z2.data, z.data);
        assert_eq!(n2.data, n.data);
    }

    #[test]
    fn denoise_request_round_trips_with_unicode_prompt() {
        let mut rng = seeded_rng(5);
        let img = random_image(&mut rng, 4, 4, 3);
        let bytes = encode_denoise_request(&img, 0.4, "visage réaliste ✨", 7);
        let (header, img2) = decode_denoise_request(&bytes).unwrap();
        assert_eq!(header.noise_level, 0.4);
        assert_eq!(header.prompt, "visage réaliste ✨");
        assert_eq!(img2.data, img.data);
    }

    #[test]
    fn malformed_payloads_are_typed_errors() {
        assert!(decode_tensor(&[0u8; 4], 0).is_err());
        let mut bytes = Vec::new();
        encode_tensor(&ImageBuf::zeros(2, 2, 1), &mut bytes);
        bytes[0] = b'X';
        assert!(matches!(
            decode_tensor(&bytes, 0),
            Err(Error::Transport(TransportError::Malformed(_)))
        ));
        // Mismatched z_t / noise shapes.
        let z = ImageBuf::zeros(2, 2, 1);
        let n = ImageBuf::zeros(4, 4, 1);
        let req = encode_predict_noise_request(&z, &n, 0.5, "", 0);
        assert!(matches!(
            decode_predict_noise_request(&req),
            Err(Error::Transport(TransportError::DimensionMismatch { .. }))
        ));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let mut bytes = encode_response(&ImageBuf::zeros(2, 2, 1));
        bytes.push(0);
        assert!(decode_response(&bytes).is_err());
    }
}
