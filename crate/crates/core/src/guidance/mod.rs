//! Guidance-provider interface and the two optimization loops driven by it:
//! score-distillation over the pyramid and multi-view refinement.
//!
//! A provider houses the external denoising model: noise prediction for
//! score distillation, an encoder (identity for pixel-space providers) with
//! an available adjoint, and image denoising for refinement. Oracles in
//! [`oracle`] implement the same trait in-process for tests and providerless
//! runs; [`remote`] speaks the binary wire protocol in [`wire`] over HTTP.

pub mod oracle;
pub mod remote;
pub mod wire;

use rand::Rng;

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::fit::{fit_multiview, view_jitter_seed, FitBatch, FitConfig};
use crate::grid::PyramidTriGrid;
use crate::imagebuf::ImageBuf;
use crate::optim::{AdamHyper, LevelLrPolicy, PyramidOptimizer, StepOutcome};
use crate::render::{render, DecoderParams, RenderOptions, ToRGBParams};
use crate::rng::{fill_randn, mix, stream_rng};
use crate::tape::{render_backward, render_with_tape, AccumMode};

/// Abstract score/denoise service.
///
/// `predict_noise` receives the noise realization that formed `z_t` alongside
/// the noisy latent; real providers ignore it, debugging fixtures (echo
/// servers, zero-residual checks) depend on it.
pub trait GuidanceProvider: Send + Sync {
    /// Round trip returning the provider's protocol version.
    fn health(&self) -> Result<String>;

    fn predict_noise(
        &self,
        z_t: &ImageBuf,
        noise: &ImageBuf,
        timestep: f64,
        prompt: &str,
        seed: u64,
    ) -> Result<ImageBuf>;

    /// Encode an image into the provider's guidance space.
    fn encode(&self, image: &ImageBuf) -> Result<ImageBuf>;

    /// Adjoint of [`Self::encode`] at `image`: pulls a guidance-space
    /// gradient back to image space.
    fn encode_pullback(&self, image: &ImageBuf, upstream: &ImageBuf) -> Result<ImageBuf>;

    fn denoise(&self, image: &ImageBuf, noise_level: f64, prompt: &str, seed: u64)
        -> Result<ImageBuf>;
}

/// Polar bands used for view sampling, degrees from zenith.
pub const POLAR_BANDS: [(f64, f64); 3] = [(55.0, 65.0), (85.0, 95.0), (115.0, 125.0)];

/// 21-view camera protocol: 7 equally spaced azimuths over [0, 360); for
/// each, one polar angle drawn uniformly from each of the three bands.
/// Radius, field of view and image size come from `base`.
pub fn protocol_21_views(base: &CameraPose, seed: u64) -> Vec<CameraPose> {
    let mut rng = stream_rng(seed, 0x21_71e5);
    let mut poses = Vec::with_capacity(21);
    for k in 0..7 {
        let azimuth = k as f64 * (360.0 / 7.0);
        for (lo, hi) in POLAR_BANDS {
            let polar = rng.gen_range(lo..hi);
            poses.push(CameraPose { azimuth_deg: azimuth, polar_deg: polar, ..*base });
        }
    }
    poses
}

fn sample_band_polar(rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let (lo, hi) = POLAR_BANDS[rng.gen_range(0..POLAR_BANDS.len())];
    rng.gen_range(lo..hi)
}

/// Mixing coefficients forming the noisy latent `z_t = a(t) z_0 + b(t) eps`
/// on normalized time, half-cosine signal / half-sine noise.
pub fn noise_schedule(t: f64) -> (f32, f32) {
    let phase = t.clamp(0.0, 1.0) * std::f64::consts::FRAC_PI_2;
    (phase.cos() as f32, phase.sin() as f32)
}

/// Weighting schedule for the distillation residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OmegaSchedule {
    Constant(f32),
    /// Shaped like the injected noise power, `sin^2(pi t / 2)`.
    NoisePower,
}

impl OmegaSchedule {
    pub fn weight(&self, t: f64) -> f32 {
        match self {
            OmegaSchedule::Constant(w) => *w,
            OmegaSchedule::NoisePower => {
                let (_, b) = noise_schedule(t);
                b * b
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SDSConfig {
    /// Normalized timestep range, 0 <= t_min < t_max <= 1.
    pub t_min: f64,
    pub t_max: f64,
    pub omega: OmegaSchedule,
    pub steps: usize,
    pub base_lr: f32,
    pub lr_policy: LevelLrPolicy,
    pub hyper: AdamHyper,
    pub prompt: String,
    pub seed: u64,
}

impl Default for SDSConfig {
    fn default() -> Self {
        SDSConfig {
            t_min: 0.02,
            t_max: 0.98,
            omega: OmegaSchedule::Constant(1.0),
            steps: 2000,
            base_lr: 0.02,
            lr_policy: LevelLrPolicy::default(),
            hyper: AdamHyper::default(),
            prompt: String::new(),
            seed: 0,
        }
    }
}

impl SDSConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.t_min && self.t_min < self.t_max && self.t_max <= 1.0) {
            return Err(Error::invalid(format!(
                "timestep range must satisfy 0 <= t_min < t_max <= 1, got [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::invalid("base_lr must be positive"));
        }
        Ok(())
    }
}

/// Everything one distillation step samples before touching the provider.
/// Exposed so equivalence harnesses can mirror a step exactly.
#[derive(Debug, Clone)]
pub struct StepPlan {
    pub pose: CameraPose,
    pub jitter_seed: u64,
    pub t: f64,
    pub omega: f32,
    pub noise_seed: u64,
    pub step_seed: u64,
}

/// Deterministic per-step draws: camera (uniform azimuth, polar from the
/// three protocol bands), timestep, and derived seeds.
pub fn sds_step_plan(cfg: &SDSConfig, base: &CameraPose, step_index: u64) -> StepPlan {
    let step_seed = mix(cfg.seed, 0x5d5 ^ step_index);
    let mut rng = stream_rng(step_seed, 0);
    let azimuth = rng.gen_range(0.0..360.0);
    let polar = sample_band_polar(&mut rng);
    let t = rng.gen_range(cfg.t_min..cfg.t_max);
    StepPlan {
        pose: CameraPose { azimuth_deg: azimuth, polar_deg: polar, ..*base },
        jitter_seed: mix(step_seed, 1),
        t,
        omega: cfg.omega.weight(t),
        noise_seed: mix(step_seed, 2),
        step_seed,
    }
}

#[derive(Debug, Clone)]
pub struct SdsDiagnostics {
    pub step_index: u64,
    pub t: f64,
    pub omega: f32,
    /// Squared norm of the weighted residual in guidance space.
    pub residual_sq: f64,
    pub skipped_non_finite: bool,
    pub pose: CameraPose,
}

/// One score-distillation update of the pyramid values.
///
/// Renders a sampled view, encodes it, forms the noisy latent, queries the
/// provider, pulls the weighted residual back through the encoder adjoint
/// and the render tape, and applies one Adam step with per-level learning
/// rates. Decoder, ToRGB, and the inversion latent stay untouched.
#[allow(clippy::too_many_arguments)]
pub fn sds_step(
    pyr: &mut PyramidTriGrid,
    decoder: &DecoderParams,
    torgb: &ToRGBParams,
    w_star: &[f32],
    provider: &dyn GuidanceProvider,
    cfg: &SDSConfig,
    base_pose: &CameraPose,
    render_opts: &RenderOptions,
    optimizer: &mut PyramidOptimizer,
    step_index: u64,
) -> Result<SdsDiagnostics> {
    cfg.validate()?;
    let plan = sds_step_plan(cfg, base_pose, step_index);
    let opts = RenderOptions { jitter_seed: plan.jitter_seed, ..render_opts.clone() };
    let (img, tape) = render_with_tape(pyr, decoder, torgb, w_star, &plan.pose, &opts)?;
    let z0 = provider.encode(&img.rgb)?;

    let mut noise = ImageBuf::zeros(z0.height, z0.width, z0.channels);
    fill_randn(&mut stream_rng(plan.noise_seed, 0), &mut noise.data);
    let (a, b) = noise_schedule(plan.t);
    let mut z_t = z0.clone();
    for (zt, eps) in z_t.data.iter_mut().zip(&noise.data) {
        *zt = a * *zt + b * *eps;
    }
    let eps_hat = provider.predict_noise(&z_t, &noise, plan.t, &cfg.prompt, plan.step_seed)?;
    eps_hat.check_same_shape(&z0, "predicted noise")?;

    let mut residual = eps_hat;
    let mut residual_sq = 0.0f64;
    for (r, eps) in residual.data.iter_mut().zip(&noise.data) {
        *r = plan.omega * (*r - *eps);
        residual_sq += (*r as f64) * (*r as f64);
    }
    let pixel_grad = provider.encode_pullback(&img.rgb, &residual)?;
    pixel_grad.check_same_shape(&img.rgb, "pulled-back gradient")?;

    let mut diag = SdsDiagnostics {
        step_index,
        t: plan.t,
        omega: plan.omega,
        residual_sq,
        skipped_non_finite: false,
        pose: plan.pose,
    };
    if !pixel_grad.is_finite() {
        diag.skipped_non_finite = true;
        optimizer.skipped_steps += 1;
        return Ok(diag);
    }
    let grads = render_backward(&tape, decoder, torgb, &pixel_grad, AccumMode::Deterministic)?;
    if optimizer.step(pyr, &grads.pyramid, cfg.base_lr)? == StepOutcome::SkippedNonFinite {
        diag.skipped_non_finite = true;
    }
    Ok(diag)
}

#[derive(Debug, Clone, Default)]
pub struct SdsRunReport {
    pub steps_applied: usize,
    pub steps_skipped: usize,
    pub provider_failures: usize,
    pub mean_residual_sq: f64,
}

/// Runs the full distillation loop. Provider failures abort the step and are
/// retried a bounded number of times before moving on.
#[allow(clippy::too_many_arguments)]
pub fn run_sds(
    pyr: &mut PyramidTriGrid,
    decoder: &DecoderParams,
    torgb: &ToRGBParams,
    w_star: &[f32],
    provider: &dyn GuidanceProvider,
    cfg: &SDSConfig,
    base_pose: &CameraPose,
    render_opts: &RenderOptions,
) -> Result<SdsRunReport> {
    cfg.validate()?;
    let mut optimizer = PyramidOptimizer::new(pyr, cfg.lr_policy, cfg.hyper);
    let mut report = SdsRunReport::default();
    let mut residual_acc = 0.0f64;
    for step in 0..cfg.steps as u64 {
        let mut attempts = 0;
        loop {
            match sds_step(
                pyr, decoder, torgb, w_star, provider, cfg, base_pose, render_opts,
                &mut optimizer, step,
            ) {
                Ok(diag) => {
                    if diag.skipped_non_finite {
                        report.steps_skipped += 1;
                    } else {
                        report.steps_applied += 1;
                    }
                    residual_acc += diag.residual_sq;
                    break;
                }
                Err(e @ (Error::Transport(_) | Error::Provider(_))) => {
                    report.provider_failures += 1;
                    attempts += 1;
                    if attempts >= 3 {
                        return Err(e);
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    if cfg.steps > 0 {
        report.mean_residual_sq = residual_acc / cfg.steps as f64;
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RefineConfig {
    /// Constant noise level added to every rendered view before denoising.
    pub noise_level: f64,
    /// Explicit view list; defaults to the 21-view protocol around the base
    /// pose.
    pub views: Option<Vec<CameraPose>>,
    pub steps: usize,
    pub base_lr: f32,
    pub lr_policy: LevelLrPolicy,
    pub hyper: AdamHyper,
    pub prompt: String,
    pub seed: u64,
    /// Abort when fewer usable views remain after provider failures.
    pub min_usable_views: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            noise_level: 0.4,
            views: None,
            steps: 200,
            base_lr: 0.01,
            lr_policy: LevelLrPolicy::default(),
            hyper: AdamHyper::default(),
            prompt: String::new(),
            seed: 0,
            min_usable_views: 8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineReport {
    pub used_views: usize,
    pub dropped_views: usize,
    /// Summed squared error across views per optimization step.
    pub loss_trace: Vec<f64>,
}

impl RefineReport {
    pub fn initial_mean_l2(&self) -> f64 {
        self.loss_trace.first().copied().unwrap_or(0.0) / self.used_views.max(1) as f64
    }

    pub fn final_mean_l2(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(0.0) / self.used_views.max(1) as f64
    }
}

/// Multi-view refinement: render the protocol views, noise + denoise each
/// through the provider, then refit the pyramid to the refined images by
/// summed L2.
///
/// Per-view jitter seeds are shared between the target renders and the
/// refit, so an identity denoiser at noise level 0 is an exact fixed point.
#[allow(clippy::too_many_arguments)]
pub fn refine(
    pyr: &mut PyramidTriGrid,
    decoder: &DecoderParams,
    torgb: &ToRGBParams,
    w_star: &[f32],
    provider: &dyn GuidanceProvider,
    base_pose: &CameraPose,
    render_opts: &RenderOptions,
    cfg: &RefineConfig,
) -> Result<RefineReport> {
    if !(0.0..1.0).contains(&cfg.noise_level) {
        return Err(Error::invalid(format!(
            "noise_level must be in [0,1), got {}",
            cfg.noise_level
        )));
    }
    let views = match &cfg.views {
        Some(v) => v.clone(),
        None => protocol_21_views(base_pose, cfg.seed),
    };
    let mut usable_poses = Vec::with_capacity(views.len());
    let mut targets = Vec::with_capacity(views.len());
    let mut dropped = 0usize;
    for (vi, pose) in views.iter().enumerate() {
        let opts = RenderOptions {
            jitter_seed: view_jitter_seed(render_opts.jitter_seed, vi),
            ..render_opts.clone()
        };
        let rendered = render(pyr, decoder, torgb, w_star, pose, &opts)?;
        let mut noisy = rendered.rgb;
        if cfg.noise_level > 0.0 {
            let mut rng = stream_rng(cfg.seed, 0x4e01 ^ vi as u64);
            for v in noisy.data.iter_mut() {
                *v += cfg.noise_level as f32 * crate::rng::randn(&mut rng);
            }
        }
        match provider.denoise(&noisy, cfg.noise_level, &cfg.prompt, mix(cfg.seed, vi as u64)) {
            Ok(refined) => {
                refined.check_same_shape(&noisy, "denoised view")?;
                usable_poses.push(*pose);
                targets.push(refined);
            }
            Err(Error::Transport(_)) | Err(Error::Provider(_)) => {
                dropped += 1;
            }
            Err(e) => return Err(e),
        }
    }
    if usable_poses.len() < cfg.min_usable_views {
        return Err(Error::Provider(format!(
            "only {} of {} views usable (minimum {})",
            usable_poses.len(),
            views.len(),
            cfg.min_usable_views
        )));
    }
    let fit_cfg = FitConfig {
        steps: cfg.steps,
        base_lr: cfg.base_lr,
        lr_policy: cfg.lr_policy,
        hyper: cfg.hyper,
        seed: cfg.seed,
        batch: FitBatch::AllViews,
        target_noise_std: 0.0,
        accum: AccumMode::Deterministic,
    };
    let report = fit_multiview(
        pyr,
        decoder,
        torgb,
        w_star,
        &usable_poses,
        &targets,
        render_opts,
        &fit_cfg,
    )?;
    Ok(RefineReport {
        used_views: usable_poses.len(),
        dropped_views: dropped,
        loss_trace: report.loss_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_emits_21_poses_with_exact_azimuth_spacing() {
        let base = CameraPose::new(0.0, 90.0, 2.7, 30.0, 16);
        let poses = protocol_21_views(&base, 123);
        assert_eq!(poses.len(), 21);
        for k in 0..7 {
            let expect = k as f64 * (360.0 / 7.0);
            for j in 0..3 {
                assert_eq!(poses[k * 3 + j].azimuth_deg, expect);
            }
        }
    }

    #[test]
    fn protocol_polar_angles_fill_each_band_seven_times() {
        let base = CameraPose::new(0.0, 90.0, 2.7, 30.0, 16);
        let poses = protocol_21_views(&base, 7);
        let mut counts = [0usize; 3];
        for p in &poses {
            let polar = p.polar_deg;
            let band = POLAR_BANDS.iter().position(|(lo, hi)| polar >= *lo && polar <= *hi);
            counts[band.expect("polar angle outside all bands")] += 1;
        }
        assert_eq!(counts, [7, 7, 7]);
    }

    #[test]
    fn protocol_is_deterministic_per_seed() {
        let base = CameraPose::new(0.0, 90.0, 2.7, 30.0, 16);
        let a = protocol_21_views(&base, 5);
        let b = protocol_21_views(&base, 5);
        let c = protocol_21_views(&base, 6);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn schedule_endpoints_are_sane() {
        let (a0, b0) = noise_schedule(0.0);
        let (a1, b1) = noise_schedule(1.0);
        assert!((a0 - 1.0).abs() < 1e-6 && b0.abs() < 1e-6);
        assert!(a1.abs() < 1e-6 && (b1 - 1.0).abs() < 1e-6);
        assert_eq!(OmegaSchedule::Constant(1.0).weight(0.3), 1.0);
        let w = OmegaSchedule::NoisePower.weight(0.5);
        assert!((w - 0.5).abs() < 1e-6);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let cfg = SDSConfig { t_min: 0.5, t_max: 0.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = SDSConfig { t_min: -0.1, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
