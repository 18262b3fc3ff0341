//! Neural volume renderer: pyramid features -> decoder -> emission-absorption
//! compositing -> latent-modulated ToRGB.
//!
//! The pipeline is generic over [`Real`] so the identical code path runs in
//! 32-bit production mode and in the 64-bit mode used by finite-difference
//! checks.

use rand::Rng;

use crate::camera::{camera_rays_with_range, CameraPose, RayBatch};
use crate::error::{Error, Result};
use crate::grid::{accumulate_pyramid_query, PyramidTriGrid};
use crate::imagebuf::ImageBuf;
use crate::real::{sigmoid, softplus, softplus_inv, Real};
use crate::rng::stream_rng;

/// Two affine layers with a tanh hidden nonlinearity. Channel features map to
/// one raw density plus `color_features` raw color outputs; density goes
/// through a shifted softplus (so an all-zero decoder is almost perfectly
/// transparent) and colors through a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub channels: usize,
    pub hidden: usize,
    pub color_features: usize,
    /// hidden x channels, row-major.
    pub w1: Vec<f32>,
    pub b1: Vec<f32>,
    /// (1 + color_features) x hidden, row-major; row 0 is density.
    pub w2: Vec<f32>,
    pub b2: Vec<f32>,
    /// Added to the raw density before softplus. Architectural constant, not
    /// a learned bias.
    pub density_shift: f32,
}

pub const DEFAULT_DENSITY_SHIFT: f32 = -10.0;

impl DecoderParams {
    pub fn zeroed(channels: usize, hidden: usize, color_features: usize) -> Self {
        DecoderParams {
            channels,
            hidden,
            color_features,
            w1: vec![0.0; hidden * channels],
            b1: vec![0.0; hidden],
            w2: vec![0.0; (1 + color_features) * hidden],
            b2: vec![0.0; 1 + color_features],
            density_shift: DEFAULT_DENSITY_SHIFT,
        }
    }

    /// Seeded random init with tanh-friendly gains.
    pub fn seeded(seed: u64, channels: usize, hidden: usize, color_features: usize) -> Self {
        let mut rng = stream_rng(seed, 0xdec0de);
        let mut d = Self::zeroed(channels, hidden, color_features);
        let g1 = (1.0 / channels as f32).sqrt();
        for v in &mut d.w1 {
            *v = rng.gen_range(-g1..g1);
        }
        let g2 = (1.0 / hidden as f32).sqrt();
        for v in &mut d.w2 {
            *v = rng.gen_range(-g2..g2);
        }
        for v in &mut d.b2 {
            *v = rng.gen_range(-0.1..0.1);
        }
        d.density_shift = -1.0;
        d
    }

    /// Near-identity wiring: feature channel 0 drives density, channels
    /// 1..=color_features drive the color outputs. Used as the frozen decoder
    /// for fitting runs, where targets must be reachable by grid values alone.
    pub fn passthrough(channels: usize, hidden: usize, color_features: usize) -> Result<Self> {
        if hidden < 1 + color_features || channels < 1 + color_features {
            return Err(Error::invalid(format!(
                "passthrough decoder needs hidden and channels >= {} (got hidden {hidden}, channels {channels})",
                1 + color_features
            )));
        }
        let mut d = Self::zeroed(channels, hidden, color_features);
        // Keep |w1 f| inside tanh's near-linear range, then re-amplify.
        for c in 0..=color_features {
            d.w1[c * channels + c] = 0.25;
        }
        d.w2[0] = 8.0; // density row reads hidden unit 0
        for k in 1..=color_features {
            d.w2[k * hidden + k] = 6.0;
        }
        d.density_shift = -1.0;
        Ok(d)
    }

    /// Decoder emitting a constant field regardless of input: density exactly
    /// `sigma` (via the softplus inverse) and all color features `color`.
    pub fn constant(channels: usize, hidden: usize, color_features: usize, sigma: f32, color: f32) -> Self {
        let mut d = Self::zeroed(channels, hidden, color_features);
        d.b2[0] = if sigma <= 0.0 {
            // Large negative raw density underflows softplus to exactly 0.
            -1.0e4
        } else {
            softplus_inv(sigma) - d.density_shift
        };
        let c = color.clamp(1e-6, 1.0 - 1e-7);
        let logit = (c / (1.0 - c)).ln().clamp(-30.0, 30.0);
        for k in 1..=color_features {
            d.b2[k] = logit;
        }
        d
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.w1.len() == self.hidden * self.channels
            && self.b1.len() == self.hidden
            && self.w2.len() == (1 + self.color_features) * self.hidden
            && self.b2.len() == 1 + self.color_features;
        if !ok {
            return Err(Error::shape("decoder parameter shapes inconsistent"));
        }
        let finite = self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|v| v.is_finite())
            && self.density_shift.is_finite();
        if !finite {
            return Err(Error::invalid("decoder parameters must be finite"));
        }
        Ok(())
    }

    /// Forward pass; writes tanh activations and sigmoid color features,
    /// returns the density. All outputs are finite for finite inputs.
    pub(crate) fn forward<R: Real>(&self, features: &[R], hidden: &mut [R], colors: &mut [R]) -> R {
        debug_assert_eq!(features.len(), self.channels);
        debug_assert_eq!(hidden.len(), self.hidden);
        debug_assert_eq!(colors.len(), self.color_features);
        for j in 0..self.hidden {
            let mut acc = R::from_f32(self.b1[j]);
            let row = &self.w1[j * self.channels..(j + 1) * self.channels];
            for (w, f) in row.iter().zip(features) {
                acc += R::from_f32(*w) * *f;
            }
            hidden[j] = acc.tanh();
        }
        let mut z = R::from_f32(self.b2[0]);
        for (w, h) in self.w2[..self.hidden].iter().zip(hidden.iter()) {
            z += R::from_f32(*w) * *h;
        }
        let sigma = softplus(z + R::from_f32(self.density_shift));
        for k in 0..self.color_features {
            let row = &self.w2[(1 + k) * self.hidden..(2 + k) * self.hidden];
            let mut zk = R::from_f32(self.b2[1 + k]);
            for (w, h) in row.iter().zip(hidden.iter()) {
                zk += R::from_f32(*w) * *h;
            }
            colors[k] = sigmoid(zk);
        }
        sigma
    }

    /// Adjoint of [`Self::forward`] with respect to the input features, given
    /// the recorded activations. Decoder weights are frozen by contract and
    /// receive no gradient.
    pub(crate) fn backward_features<R: Real>(
        &self,
        hidden: &[R],
        sigma: R,
        colors: &[R],
        sigma_bar: R,
        colors_bar: &[R],
        features_bar: &mut [R],
    ) {
        let one = R::one();
        // d softplus(z)/dz = sigmoid(z) = 1 - exp(-softplus(z)).
        let dz0 = sigma_bar * (one - (-sigma).exp());
        let mut da = vec![R::zero(); self.hidden];
        for j in 0..self.hidden {
            let mut acc = dz0 * R::from_f32(self.w2[j]);
            for k in 0..self.color_features {
                let c = colors[k];
                let dzk = colors_bar[k] * c * (one - c);
                acc += dzk * R::from_f32(self.w2[(1 + k) * self.hidden + j]);
            }
            da[j] = acc * (one - hidden[j] * hidden[j]);
        }
        for c in 0..self.channels {
            let mut acc = R::zero();
            for j in 0..self.hidden {
                acc += da[j] * R::from_f32(self.w1[j * self.channels + c]);
            }
            features_bar[c] += acc;
        }
    }
}

/// Latent-affine modulation scales plus a pure linear map from modulated
/// color features to RGB. The map has no absolute bias, so zero features
/// always composite to pure background.
#[derive(Debug, Clone, PartialEq)]
pub struct ToRGBParams {
    pub latent_dim: usize,
    pub color_features: usize,
    /// color_features x latent_dim, row-major.
    pub w_mod: Vec<f32>,
    pub b_mod: Vec<f32>,
    /// 3 x color_features, row-major.
    pub w_rgb: Vec<f32>,
}

impl ToRGBParams {
    pub fn zeroed(latent_dim: usize, color_features: usize) -> Self {
        ToRGBParams {
            latent_dim,
            color_features,
            w_mod: vec![0.0; color_features * latent_dim],
            b_mod: vec![0.0; color_features],
            w_rgb: vec![0.0; 3 * color_features],
        }
    }

    pub fn seeded(seed: u64, latent_dim: usize, color_features: usize) -> Self {
        let mut rng = stream_rng(seed, 0x70b6b);
        let mut p = Self::zeroed(latent_dim, color_features);
        let gm = (1.0 / latent_dim as f32).sqrt() * 0.5;
        for v in &mut p.w_mod {
            *v = rng.gen_range(-gm..gm);
        }
        for v in &mut p.b_mod {
            *v = 1.0 + rng.gen_range(-0.1..0.1);
        }
        let gr = (1.0 / color_features as f32).sqrt();
        for v in &mut p.w_rgb {
            *v = rng.gen_range(-gr..gr);
        }
        p
    }

    /// Unit modulation scales at w = 0 and a channel-picking RGB map.
    pub fn passthrough(latent_dim: usize, color_features: usize) -> Result<Self> {
        if color_features < 3 {
            return Err(Error::invalid("passthrough ToRGB needs >= 3 color features"));
        }
        let mut p = Self::zeroed(latent_dim, color_features);
        p.b_mod.fill(1.0);
        for c in 0..3 {
            p.w_rgb[c * color_features + c] = 1.0;
        }
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.w_mod.len() == self.color_features * self.latent_dim
            && self.b_mod.len() == self.color_features
            && self.w_rgb.len() == 3 * self.color_features;
        if !ok {
            return Err(Error::shape("ToRGB parameter shapes inconsistent"));
        }
        if !self.w_mod.iter().chain(&self.b_mod).chain(&self.w_rgb).all(|v| v.is_finite()) {
            return Err(Error::invalid("ToRGB parameters must be finite"));
        }
        Ok(())
    }

    /// Per-channel modulation scales `affine(w)`.
    pub fn scales<R: Real>(&self, latent: &[R]) -> Result<Vec<R>> {
        if latent.len() != self.latent_dim {
            return Err(Error::shape(format!(
                "latent length {} != {}",
                latent.len(),
                self.latent_dim
            )));
        }
        let mut s = vec![R::zero(); self.color_features];
        for k in 0..self.color_features {
            let mut acc = R::from_f32(self.b_mod[k]);
            let row = &self.w_mod[k * self.latent_dim..(k + 1) * self.latent_dim];
            for (w, l) in row.iter().zip(latent) {
                acc += R::from_f32(*w) * *l;
            }
            s[k] = acc;
        }
        Ok(s)
    }
}

/// Rendering controls. The spacing/bounds defaults suit origin-centered
/// scenes inside the unit-ish box.
#[derive(Debug, Clone)]
pub struct RenderOptions {
    pub samples_per_ray: usize,
    /// near/far = radius -/+ depth_range.
    pub depth_range: f64,
    pub background: [f32; 3],
    /// Seed of the stratified-jitter stream; fixed per optimization step so
    /// forward and backward see identical sample points.
    pub jitter_seed: u64,
    /// Parallelize forward rendering over rays. Per-ray jitter streams make
    /// the result identical to the single-threaded mode.
    pub parallel: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            samples_per_ray: 96,
            depth_range: 1.3,
            background: [1.0, 1.0, 1.0],
            jitter_seed: 0,
            parallel: false,
        }
    }
}

/// Output of [`render`]: RGB in [0,1], the composited feature image, and the
/// per-pixel compositing weight sum (1 - transmittance).
#[derive(Debug, Clone)]
pub struct RenderedImage {
    pub rgb: ImageBuf,
    pub feature: ImageBuf,
    pub weight_sum: ImageBuf,
}

/// Hook for recording per-sample intermediates during the march; the tape
/// implements this, forward-only rendering uses [`NoRecord`].
pub(crate) trait MarchRecorder<R: Real> {
    const ACTIVE: bool;
    fn sample(&mut self, ray: usize, s: usize, point: [R; 3], hidden: &[R], sigma: R, colors: &[R], alpha: R);
    fn pixel(&mut self, ray: usize, feature: &[R], weight_sum: R);
}

pub(crate) struct NoRecord;

impl<R: Real> MarchRecorder<R> for NoRecord {
    const ACTIVE: bool = false;
    #[inline]
    fn sample(&mut self, _: usize, _: usize, _: [R; 3], _: &[R], _: R, _: &[R], _: R) {}
    #[inline]
    fn pixel(&mut self, _: usize, _: &[R], _: R) {}
}

pub(crate) struct RayScratch<R> {
    pub features: Vec<R>,
    pub hidden: Vec<R>,
    pub colors: Vec<R>,
    pub pixel_feature: Vec<R>,
}

impl<R: Real> RayScratch<R> {
    pub fn new(channels: usize, hidden: usize, color_features: usize) -> Self {
        RayScratch {
            features: vec![R::zero(); channels],
            hidden: vec![R::zero(); hidden],
            colors: vec![R::zero(); color_features],
            pixel_feature: vec![R::zero(); color_features],
        }
    }
}

/// Marches one ray with stratified sampling and emission-absorption
/// compositing. `delta` is the fixed bin width `(far - near) / samples`;
/// alphas use the bin width (not inter-sample spacing), which makes the
/// accumulated opacity of a constant field exact regardless of jitter.
#[allow(clippy::too_many_arguments)]
pub(crate) fn march_ray<R: Real, Rec: MarchRecorder<R>>(
    pyr: &PyramidTriGrid,
    decoder: &DecoderParams,
    origin: [f32; 3],
    dir: [f32; 3],
    near: f32,
    far: f32,
    samples: usize,
    jitter_seed: u64,
    ray_index: usize,
    scratch: &mut RayScratch<R>,
    rec: &mut Rec,
    out_feature: &mut [R],
    out_weight: &mut R,
) -> Result<()> {
    let mut rng = stream_rng(jitter_seed, ray_index as u64);
    let delta = R::from_f32((far - near) / samples as f32);
    let near_r = R::from_f32(near);
    let one = R::one();
    let mut transmittance = one;
    for f in scratch.pixel_feature.iter_mut() {
        *f = R::zero();
    }
    let mut weight_sum = R::zero();
    for s in 0..samples {
        let jitter = R::from_f32(rng.gen::<f32>());
        let t = near_r + (R::from_f32(s as f32) + jitter) * delta;
        let p = [
            R::from_f32(origin[0]) + t * R::from_f32(dir[0]),
            R::from_f32(origin[1]) + t * R::from_f32(dir[1]),
            R::from_f32(origin[2]) + t * R::from_f32(dir[2]),
        ];
        for f in scratch.features.iter_mut() {
            *f = R::zero();
        }
        accumulate_pyramid_query(pyr, p, &mut scratch.features);
        let sigma = decoder.forward(&scratch.features, &mut scratch.hidden, &mut scratch.colors);
        if !sigma.is_finite() || !scratch.colors.iter().all(|c| c.is_finite()) {
            return Err(Error::Numerical { ray: ray_index, msg: "decoder output".into() });
        }
        let alpha = -((-(sigma * delta)).exp_m1());
        let weight = transmittance * alpha;
        for (acc, c) in scratch.pixel_feature.iter_mut().zip(&scratch.colors) {
            *acc += weight * *c;
        }
        weight_sum += weight;
        transmittance *= one - alpha;
        if Rec::ACTIVE {
            rec.sample(ray_index, s, p, &scratch.hidden, sigma, &scratch.colors, alpha);
        }
    }
    out_feature.copy_from_slice(&scratch.pixel_feature);
    *out_weight = weight_sum;
    if Rec::ACTIVE {
        rec.pixel(ray_index, &scratch.pixel_feature, weight_sum);
    }
    Ok(())
}

/// Stratified ray march + emission-absorption compositing over a whole batch.
/// Returns the feature image and per-pixel weight sums.
pub fn march_and_composite(
    pyr: &PyramidTriGrid,
    decoder: &DecoderParams,
    rays: &RayBatch,
    samples_per_ray: usize,
    jitter_seed: u64,
) -> Result<(ImageBuf, ImageBuf)> {
    let (feat, wsum) =
        march_batch::<f32>(pyr, decoder, rays, samples_per_ray, jitter_seed, false)?;
    let k = decoder.color_features;
    Ok((
        ImageBuf::from_data(rays.height, rays.width, k, feat)?,
        ImageBuf::from_data(rays.height, rays.width, 1, wsum)?,
    ))
}

pub(crate) fn march_batch<R: Real>(
    pyr: &PyramidTriGrid,
    decoder: &DecoderParams,
    rays: &RayBatch,
    samples: usize,
    jitter_seed: u64,
    parallel: bool,
) -> Result<(Vec<R>, Vec<R>)> {
    if samples < 2 {
        return Err(Error::invalid(format!("samples_per_ray must be >= 2, got {samples}")));
    }
    if pyr.channels() != decoder.channels {
        return Err(Error::shape(format!(
            "pyramid channels {} != decoder channels {}",
            pyr.channels(),
            decoder.channels
        )));
    }
    let k = decoder.color_features;
    let n = rays.len();
    let mut feature = vec![R::zero(); n * k];
    let mut weight = vec![R::zero(); n];
    if parallel {
        use rayon::prelude::*;
        feature
            .par_chunks_mut(k)
            .zip(weight.par_iter_mut())
            .enumerate()
            .try_for_each(|(i, (feat, w))| {
                let mut scratch = RayScratch::new(decoder.channels, decoder.hidden, k);
                march_ray(
                    pyr,
                    decoder,
                    rays.origins[i],
                    rays.directions[i],
                    rays.near,
                    rays.far,
                    samples,
                    jitter_seed,
                    i,
                    &mut scratch,
                    &mut NoRecord,
                    feat,
                    w,
                )
            })?;
    } else {
        let mut scratch = RayScratch::new(decoder.channels, decoder.hidden, k);
        for i in 0..n {
            march_ray(
                pyr,
                decoder,
                rays.origins[i],
                rays.directions[i],
                rays.near,
                rays.far,
                samples,
                jitter_seed,
                i,
                &mut scratch,
                &mut NoRecord,
                &mut feature[i * k..(i + 1) * k],
                &mut weight[i],
            )?;
        }
    }
    Ok((feature, weight))
}

/// ToRGB core: modulate features, apply the linear RGB map, composite the
/// background by remaining transmittance, clamp to [0,1].
pub(crate) fn to_rgb_core<R: Real>(
    feature: &[R],
    weight_sum: &[R],
    scales: &[R],
    w_rgb: &[f32],
    background: [f32; 3],
    k: usize,
) -> Vec<R> {
    let one = R::one();
    let n = weight_sum.len();
    let mut rgb = vec![R::zero(); n * 3];
    for i in 0..n {
        let f = &feature[i * k..(i + 1) * k];
        let bg_w = one - weight_sum[i];
        for c in 0..3 {
            let mut acc = R::zero();
            let row = &w_rgb[c * k..(c + 1) * k];
            for ((w, s), fv) in row.iter().zip(scales).zip(f) {
                acc += R::from_f32(*w) * *s * *fv;
            }
            let pre = acc + bg_w * R::from_f32(background[c]);
            rgb[i * 3 + c] = pre.max(R::zero()).min(one);
        }
    }
    rgb
}

/// Converts a composited feature image into RGB, modulated by the latent code
/// and composited over a constant background.
pub fn to_rgb(
    feature: &ImageBuf,
    weight_sum: &ImageBuf,
    latent: &[f32],
    params: &ToRGBParams,
    background: [f32; 3],
) -> Result<ImageBuf> {
    params.validate()?;
    if feature.channels != params.color_features {
        return Err(Error::shape(format!(
            "feature channels {} != ToRGB color features {}",
            feature.channels, params.color_features
        )));
    }
    if weight_sum.channels != 1 || weight_sum.num_pixels() != feature.num_pixels() {
        return Err(Error::shape("weight_sum must be single-channel and match feature size"));
    }
    let scales = params.scales::<f32>(latent)?;
    let rgb = to_rgb_core(
        &feature.data,
        &weight_sum.data,
        &scales,
        &params.w_rgb,
        background,
        params.color_features,
    );
    ImageBuf::from_data(feature.height, feature.width, 3, rgb)
}

/// Full renderer: camera rays -> march/composite -> ToRGB.
///
/// Deterministic given `opts.jitter_seed`; the parallel path produces
/// bit-identical images because jitter streams are per-ray.
pub fn render(
    pyr: &PyramidTriGrid,
    decoder: &DecoderParams,
    torgb: &ToRGBParams,
    latent: &[f32],
    pose: &CameraPose,
    opts: &RenderOptions,
) -> Result<RenderedImage> {
    decoder.validate()?;
    torgb.validate()?;
    if decoder.color_features != torgb.color_features {
        return Err(Error::shape("decoder/ToRGB color feature counts differ"));
    }
    let rays = camera_rays_with_range(pose, pose.radius - opts.depth_range, pose.radius + opts.depth_range)?;
    let (feat, wsum) =
        march_batch::<f32>(pyr, decoder, &rays, opts.samples_per_ray, opts.jitter_seed, opts.parallel)?;
    let scales = torgb.scales::<f32>(latent)?;
    let rgb = to_rgb_core(&feat, &wsum, &scales, &torgb.w_rgb, opts.background, torgb.color_features);
    Ok(RenderedImage {
        rgb: ImageBuf::from_data(pose.image_size, pose.image_size, 3, rgb)?,
        feature: ImageBuf::from_data(pose.image_size, pose.image_size, torgb.color_features, feat)?,
        weight_sum: ImageBuf::from_data(pose.image_size, pose.image_size, 1, wsum)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::camera_rays;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn test_rays(n: usize) -> RayBatch {
        camera_rays(&CameraPose::new(30.0, 80.0, 2.7, 30.0, n)).unwrap()
    }

    #[test]
    fn zero_density_gives_pure_background() {
        let pyr = PyramidTriGrid::zeros(&[4, 8], 3, 6).unwrap();
        let decoder = DecoderParams::constant(6, 16, 4, 0.0, 0.5);
        let rays = test_rays(4);
        let (feat, wsum) = march_and_composite(&pyr, &decoder, &rays, 16, 0).unwrap();
        assert!(feat.data.iter().all(|v| *v == 0.0));
        assert!(wsum.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_field_matches_analytic_integral() {
        // sigma = 1 over a segment of length 2: accumulated weight/feature
        // must equal 1 - e^-2.
        let pyr = PyramidTriGrid::zeros(&[4], 3, 4).unwrap();
        let decoder = DecoderParams::constant(4, 8, 2, 1.0, 1.0);
        let mut rays = test_rays(2);
        rays.near = 1.7;
        rays.far = 3.7;
        let (feat, wsum) = march_and_composite(&pyr, &decoder, &rays, 256, 7).unwrap();
        let expect = 1.0 - (-2.0f64).exp();
        for v in feat.data.iter().chain(&wsum.data) {
            assert!(
                ((*v as f64) - expect).abs() < 1e-3,
                "got {v}, expected {expect}"
            );
        }
    }

    #[test]
    fn weights_stay_in_unit_interval_for_random_grids() {
        let mut rng = seeded_rng(11);
        for trial in 0..4 {
            let mut pyr = PyramidTriGrid::zeros(&[4, 8], 3, 6).unwrap();
            for l in pyr.levels_mut() {
                for v in l.values_mut() {
                    *v = rng.gen_range(-2.0f32..2.0);
                }
            }
            let decoder = DecoderParams::seeded(trial, 6, 16, 4);
            let rays = test_rays(8);
            let (_, wsum) = march_and_composite(&pyr, &decoder, &rays, 32, trial).unwrap();
            for w in &wsum.data {
                assert!(*w >= 0.0 && *w <= 1.0 + 1e-6, "weight_sum {w}");
            }
        }
    }

    #[test]
    fn increasing_density_never_decreases_weight_sum() {
        let mut rng = seeded_rng(12);
        let mut pyr = PyramidTriGrid::zeros(&[4], 3, 4).unwrap();
        for l in pyr.levels_mut() {
            for v in l.values_mut() {
                *v = rng.gen_range(-1.0f32..1.0);
            }
        }
        let rays = test_rays(4);
        let low = DecoderParams::constant(4, 8, 2, 0.5, 0.5);
        let high = DecoderParams::constant(4, 8, 2, 1.5, 0.5);
        let (_, w_low) = march_and_composite(&pyr, &low, &rays, 32, 3).unwrap();
        let (_, w_high) = march_and_composite(&pyr, &high, &rays, 32, 3).unwrap();
        for (a, b) in w_low.data.iter().zip(&w_high.data) {
            assert!(b >= a, "weight decreased: {a} -> {b}");
        }
    }

    #[test]
    fn to_rgb_zero_features_gives_background() {
        let feature = ImageBuf::zeros(4, 4, 4);
        let wsum = ImageBuf::zeros(4, 4, 1);
        let params = ToRGBParams::seeded(5, 8, 4);
        let latent = vec![0.3f32; 8];
        let rgb = to_rgb(&feature, &wsum, &latent, &params, [1.0, 1.0, 1.0]).unwrap();
        assert!(rgb.data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn to_rgb_unit_scales_is_plain_linear_map() {
        let mut params = ToRGBParams::zeroed(4, 3);
        params.b_mod.fill(1.0);
        params.w_rgb = vec![
            0.5, 0.0, 0.0, //
            0.0, 0.25, 0.0, //
            0.0, 0.0, 0.125,
        ];
        let feature = ImageBuf::from_data(1, 1, 3, vec![1.0, 1.0, 1.0]).unwrap();
        let wsum = ImageBuf::filled(1, 1, 1, 1.0);
        let rgb = to_rgb(&feature, &wsum, &[0.0; 4], &params, [0.0; 3]).unwrap();
        assert_eq!(rgb.data, vec![0.5, 0.25, 0.125]);
    }

    #[test]
    fn doubling_modulation_scales_doubles_foreground() {
        let mut rng = seeded_rng(21);
        let mut params = ToRGBParams::seeded(9, 6, 4);
        // Small magnitudes keep the pre-clamp value interior.
        for v in &mut params.w_rgb {
            *v *= 0.1;
        }
        let latent: Vec<f32> = (0..6).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
        let feature = ImageBuf::from_data(
            2,
            1,
            4,
            (0..8).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
        )
        .unwrap();
        let wsum = ImageBuf::filled(2, 1, 1, 1.0);
        let rgb1 = to_rgb(&feature, &wsum, &latent, &params, [0.0; 3]).unwrap();
        let mut doubled = params.clone();
        for v in doubled.w_mod.iter_mut().chain(doubled.b_mod.iter_mut()) {
            *v *= 2.0;
        }
        let rgb2 = to_rgb(&feature, &wsum, &latent, &doubled, [0.0; 3]).unwrap();
        for (a, b) in rgb1.data.iter().zip(&rgb2.data) {
            assert!((2.0 * a - b).abs() < 1e-6, "expected doubling: {a} vs {b}");
        }
    }

    #[test]
    fn zero_scene_renders_background_only() {
        let pyr = PyramidTriGrid::zeros(&[4, 8], 3, 6).unwrap();
        let decoder = DecoderParams::zeroed(6, 16, 4);
        let torgb = ToRGBParams::zeroed(8, 4);
        let pose = CameraPose::new(10.0, 85.0, 2.7, 30.0, 8);
        let img = render(&pyr, &decoder, &torgb, &[0.0; 8], &pose, &RenderOptions::default()).unwrap();
        // The shifted softplus leaves a ~5e-5 residual density; background
        // dominance is checked to 1e-3.
        for v in &img.rgb.data {
            assert!((v - 1.0).abs() < 1e-3, "pixel {v}");
        }
    }

    #[test]
    fn render_is_deterministic_and_parallel_matches_serial() {
        let mut rng = seeded_rng(13);
        let mut pyr = PyramidTriGrid::zeros(&[4, 8], 3, 6).unwrap();
        for l in pyr.levels_mut() {
            for v in l.values_mut() {
                *v = rng.gen_range(-1.0f32..1.0);
            }
        }
        let decoder = DecoderParams::seeded(2, 6, 16, 4);
        let torgb = ToRGBParams::seeded(3, 8, 4);
        let latent: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let pose = CameraPose::new(45.0, 95.0, 2.7, 30.0, 8);
        let opts = RenderOptions { samples_per_ray: 24, jitter_seed: 5, ..Default::default() };
        let a = render(&pyr, &decoder, &torgb, &latent, &pose, &opts).unwrap();
        let b = render(&pyr, &decoder, &torgb, &latent, &pose, &opts).unwrap();
        assert_eq!(a.rgb.data, b.rgb.data);
        let par = RenderOptions { parallel: true, ..opts };
        let c = render(&pyr, &decoder, &torgb, &latent, &pose, &par).unwrap();
        assert_eq!(a.rgb.data, c.rgb.data);
        assert_eq!(a.weight_sum.data, c.weight_sum.data);
    }

    #[test]
    fn downsampled_render_is_consistent_across_resolutions() {
        let mut rng = seeded_rng(14);
        let mut pyr = PyramidTriGrid::zeros(&[4, 8], 3, 6).unwrap();
        for l in pyr.levels_mut() {
            for v in l.values_mut() {
                *v = rng.gen_range(-0.8f32..0.8);
            }
        }
        let decoder = DecoderParams::seeded(4, 6, 16, 4);
        let torgb = ToRGBParams::seeded(5, 8, 4);
        let latent = vec![0.1f32; 8];
        let opts = RenderOptions { samples_per_ray: 48, jitter_seed: 11, ..Default::default() };
        let hi = render(
            &pyr,
            &decoder,
            &torgb,
            &latent,
            &CameraPose::new(20.0, 90.0, 2.7, 30.0, 64),
            &opts,
        )
        .unwrap();
        let lo = render(
            &pyr,
            &decoder,
            &torgb,
            &latent,
            &CameraPose::new(20.0, 90.0, 2.7, 30.0, 32),
            &opts,
        )
        .unwrap();
        let down = hi.rgb.downsample(2).unwrap();
        let mae: f64 = down
            .data
            .iter()
            .zip(&lo.rgb.data)
            .map(|(a, b)| ((a - b).abs()) as f64)
            .sum::<f64>()
            / down.data.len() as f64;
        assert!(mae < 0.05, "mean abs error {mae}");
    }

    #[test]
    fn samples_below_two_are_rejected() {
        let pyr = PyramidTriGrid::zeros(&[4], 3, 4).unwrap();
        let decoder = DecoderParams::zeroed(4, 8, 2);
        let rays = test_rays(2);
        assert!(march_and_composite(&pyr, &decoder, &rays, 1, 0).is_err());
    }
}
