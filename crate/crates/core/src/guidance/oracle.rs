//! In-process providers with closed-form behavior.
//!
//! These make the optimization loops testable without a real diffusion
//! backend: the linear-pull oracle turns score distillation into explicit
//! L2 descent toward a target image, the echo provider realizes the
//! zero-residual case, and the fixed-target denoiser drives refinement
//! toward a known image.

use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::imagebuf::ImageBuf;

use super::GuidanceProvider;

pub const ORACLE_PROTOCOL_VERSION: &str = "1";

/// Pixel-space oracle with `predicted = noise + lambda * (z_0 - target)`.
///
/// The encoder is the identity; it caches the last encoded image so the
/// prediction can use the exact `z_0` (no schedule inversion, no rounding).
/// With this provider the distillation pixel gradient is exactly
/// `omega * lambda * (x - target)`, the gradient of
/// `0.5 * omega * lambda * |x - target|^2`.
pub struct LinearPullOracle {
    pub target: ImageBuf,
    pub lambda: f32,
    last_encoded: Mutex<Option<ImageBuf>>,
}

impl LinearPullOracle {
    pub fn new(target: ImageBuf, lambda: f32) -> Self {
        LinearPullOracle { target, lambda, last_encoded: Mutex::new(None) }
    }
}

impl GuidanceProvider for LinearPullOracle {
    fn health(&self) -> Result<String> {
        Ok(ORACLE_PROTOCOL_VERSION.to_string())
    }

    fn predict_noise(
        &self,
        z_t: &ImageBuf,
        noise: &ImageBuf,
        _timestep: f64,
        _prompt: &str,
        _seed: u64,
    ) -> Result<ImageBuf> {
        z_t.check_same_shape(noise, "z_t vs noise")?;
        let cached = self.last_encoded.lock().unwrap();
        let z0 = cached
            .as_ref()
            .ok_or_else(|| Error::Provider("oracle: predict_noise before encode".into()))?;
        z0.check_same_shape(&self.target, "encoded vs oracle target")?;
        let mut out = noise.clone();
        for ((o, z), t) in out.data.iter_mut().zip(&z0.data).zip(&self.target.data) {
            *o += self.lambda * (z - t);
        }
        Ok(out)
    }

    fn encode(&self, image: &ImageBuf) -> Result<ImageBuf> {
        *self.last_encoded.lock().unwrap() = Some(image.clone());
        Ok(image.clone())
    }

    fn encode_pullback(&self, _image: &ImageBuf, upstream: &ImageBuf) -> Result<ImageBuf> {
        Ok(upstream.clone())
    }

    /// Blends toward the target by the noise level; at level 0 this is the
    /// identity.
    fn denoise(
        &self,
        image: &ImageBuf,
        noise_level: f64,
        _prompt: &str,
        _seed: u64,
    ) -> Result<ImageBuf> {
        image.check_same_shape(&self.target, "denoise input vs oracle target")?;
        if noise_level == 0.0 {
            return Ok(image.clone());
        }
        let b = noise_level as f32;
        let a = 1.0 - b;
        let mut out = image.clone();
        for (o, t) in out.data.iter_mut().zip(&self.target.data) {
            *o = a * *o + b * *t;
        }
        Ok(out)
    }
}

/// Returns the request's own noise as the prediction and denoises to the
/// input unchanged: the exact zero-residual / fixed-point fixture.
pub struct EchoProvider;

impl GuidanceProvider for EchoProvider {
    fn health(&self) -> Result<String> {
        Ok(ORACLE_PROTOCOL_VERSION.to_string())
    }

    fn predict_noise(
        &self,
        z_t: &ImageBuf,
        noise: &ImageBuf,
        _timestep: f64,
        _prompt: &str,
        _seed: u64,
    ) -> Result<ImageBuf> {
        z_t.check_same_shape(noise, "z_t vs noise")?;
        Ok(noise.clone())
    }

    fn encode(&self, image: &ImageBuf) -> Result<ImageBuf> {
        Ok(image.clone())
    }

    fn encode_pullback(&self, _image: &ImageBuf, upstream: &ImageBuf) -> Result<ImageBuf> {
        Ok(upstream.clone())
    }

    fn denoise(
        &self,
        image: &ImageBuf,
        _noise_level: f64,
        _prompt: &str,
        _seed: u64,
    ) -> Result<ImageBuf> {
        Ok(image.clone())
    }
}

/// Denoises every view to one fixed image; refinement then becomes a
/// multi-view fit toward that image.
pub struct FixedTargetDenoiser {
    pub target: ImageBuf,
}

impl GuidanceProvider for FixedTargetDenoiser {
    fn health(&self) -> Result<String> {
        Ok(ORACLE_PROTOCOL_VERSION.to_string())
    }

    fn predict_noise(
        &self,
        _z_t: &ImageBuf,
        noise: &ImageBuf,
        _timestep: f64,
        _prompt: &str,
        _seed: u64,
    ) -> Result<ImageBuf> {
        Ok(noise.clone())
    }

    fn encode(&self, image: &ImageBuf) -> Result<ImageBuf> {
        Ok(image.clone())
    }

    fn encode_pullback(&self, _image: &ImageBuf, upstream: &ImageBuf) -> Result<ImageBuf> {
        Ok(upstream.clone())
    }

    fn denoise(
        &self,
        image: &ImageBuf,
        _noise_level: f64,
        _prompt: &str,
        _seed: u64,
    ) -> Result<ImageBuf> {
        image.check_same_shape(&self.target, "denoise input vs fixed target")?;
        Ok(self.target.clone())
    }
}

/// A linear (2x2 average-pool) encoder with its true adjoint; exercises the
/// non-identity encoder contract in tests.
pub struct PoolingEncoderOracle;

impl GuidanceProvider for PoolingEncoderOracle {
    fn health(&self) -> Result<String> {
        Ok(ORACLE_PROTOCOL_VERSION.to_string())
    }

    fn predict_noise(
        &self,
        _z_t: &ImageBuf,
        noise: &ImageBuf,
        _timestep: f64,
        _prompt: &str,
        _seed: u64,
    ) -> Result<ImageBuf> {
        Ok(noise.clone())
    }

    fn encode(&self, image: &ImageBuf) -> Result<ImageBuf> {
        image.downsample(2)
    }

    fn encode_pullback(&self, image: &ImageBuf, upstream: &ImageBuf) -> Result<ImageBuf> {
        if upstream.height * 2 != image.height || upstream.width * 2 != image.width {
            return Err(Error::shape("pullback shape is not half the image"));
        }
        let mut out = ImageBuf::zeros(image.height, image.width, image.channels);
        // Adjoint of the mean over a 2x2 block: spread a quarter of the
        // gradient to each source pixel.
        for r in 0..upstream.height {
            for c in 0..upstream.width {
                for ch in 0..image.channels {
                    let g = upstream.pixel(r, c)[ch] * 0.25;
                    for dr in 0..2 {
                        for dc in 0..2 {
                            out.pixel_mut(r * 2 + dr, c * 2 + dc)[ch] = g;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn denoise(
        &self,
        image: &ImageBuf,
        _noise_level: f64,
        _prompt: &str,
        _seed: u64,
    ) -> Result<ImageBuf> {
        Ok(image.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use rand::Rng;

    #[test]
    fn linear_pull_oracle_matches_its_closed_form() {
        let mut rng = seeded_rng(1);
        let target = ImageBuf::from_data(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let oracle = LinearPullOracle::new(target.clone(), 2.0);
        let x =
            ImageBuf::from_data(2, 2, 1, (0..4).map(|_| rng.gen_range(0.0f32..1.0)).collect())
                .unwrap();
        let z0 = oracle.encode(&x).unwrap();
        let noise =
            ImageBuf::from_data(2, 2, 1, (0..4).map(|_| rng.gen_range(-1.0f32..1.0)).collect())
                .unwrap();
        let eps_hat = oracle.predict_noise(&z0, &noise, 0.5, "", 0).unwrap();
        for i in 0..4 {
            let expect = noise.data[i] + 2.0 * (x.data[i] - target.data[i]);
            assert!((eps_hat.data[i] - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn oracle_requires_encode_before_predict() {
        let oracle = LinearPullOracle::new(ImageBuf::zeros(2, 2, 1), 1.0);
        let z = ImageBuf::zeros(2, 2, 1);
        assert!(oracle.predict_noise(&z, &z, 0.5, "", 0).is_err());
    }

    #[test]
    fn pooling_encoder_passes_the_dot_product_consistency_check() {
        let mut rng = seeded_rng(2);
        let oracle = PoolingEncoderOracle;
        let x = ImageBuf::from_data(
            4,
            4,
            3,
            (0..48).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        let mut delta = ImageBuf::zeros(4, 4, 3);
        for v in delta.data.iter_mut() {
            *v = 1e-3 * rng.gen_range(-1.0f32..1.0);
        }
        let mut u = ImageBuf::zeros(2, 2, 3);
        for v in u.data.iter_mut() {
            *v = rng.gen_range(-1.0f32..1.0);
        }
        let mut x_pert = x.clone();
        for (a, d) in x_pert.data.iter_mut().zip(&delta.data) {
            *a += *d;
        }
        let e0 = oracle.encode(&x).unwrap();
        let e1 = oracle.encode(&x_pert).unwrap();
        let lhs: f64 = e1
            .data
            .iter()
            .zip(&e0.data)
            .zip(&u.data)
            .map(|((a, b), w)| ((*a - *b) as f64) * (*w as f64))
            .sum();
        let pulled = oracle.encode_pullback(&x, &u).unwrap();
        let rhs: f64 = pulled
            .data
            .iter()
            .zip(&delta.data)
            .map(|(a, b)| (*a as f64) * (*b as f64))
            .sum();
        let denom = lhs.abs().max(rhs.abs()).max(1e-12);
        assert!((lhs - rhs).abs() / denom < 1e-3, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn echo_provider_prediction_equals_the_noise() {
        let noise = ImageBuf::filled(2, 2, 3, 0.7);
        let z = ImageBuf::zeros(2, 2, 3);
        let out = EchoProvider.predict_noise(&z, &noise, 0.3, "", 1).unwrap();
        assert_eq!(out.data, noise.data);
    }
}
