//! Pipeline configuration: a line-oriented `key = value` format with
//! `[section]` headers, `#` comments, and strict validation — unknown keys
//! and out-of-invariant values are rejected with their line number.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::guidance::remote::ProviderSelector;
use crate::guidance::{OmegaSchedule, RefineConfig, SDSConfig};
use crate::optim::LevelLrPolicy;
use crate::render::RenderOptions;
use crate::synthesis::{InvertConfig, SynthesisConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidSettings {
    pub levels: Vec<usize>,
    pub channels: usize,
    pub depth_layers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderSettings {
    pub image_size: usize,
    pub samples_per_ray: usize,
    pub fov_y: f64,
    pub radius: f64,
    pub depth_range: f64,
    pub background: [f32; 3],
    pub polar: f64,
    pub parallel: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderInit {
    Passthrough,
    Seeded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderSettings {
    pub hidden: usize,
    pub color_features: usize,
    pub init: DecoderInit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisSettings {
    pub latent_dim: usize,
    pub backbone_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdsSettings {
    pub steps: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub omega: OmegaSchedule,
    pub base_lr: f32,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefineSettings {
    pub steps: usize,
    pub noise_level: f64,
    pub base_lr: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertSettings {
    pub iters: usize,
    pub lr: f32,
    pub lambda_reg: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitSettings {
    pub steps: usize,
    pub base_lr: f32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderSettings {
    pub kind: ProviderSelector,
    /// Pull strength of the oracle provider.
    pub oracle_lambda: f32,
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSettings {
    pub out_dir: PathBuf,
    pub seed: u64,
    pub deterministic: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub pyramid: PyramidSettings,
    pub render: RenderSettings,
    pub decoder: DecoderSettings,
    pub synthesis: SynthesisSettings,
    pub sds: SdsSettings,
    pub refine: RefineSettings,
    pub invert: InvertSettings,
    pub fit: FitSettings,
    pub provider: ProviderSettings,
    pub output: OutputSettings,
    /// Learning-rate damping exponent and reference for fine levels.
    pub lr_policy: LevelLrPolicy,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            pyramid: PyramidSettings { levels: vec![8, 16, 32, 64], channels: 12, depth_layers: 3 },
            render: RenderSettings {
                image_size: 32,
                samples_per_ray: 96,
                fov_y: 30.0,
                radius: 2.7,
                depth_range: 1.3,
                background: [1.0, 1.0, 1.0],
                polar: 90.0,
                parallel: false,
            },
            decoder: DecoderSettings { hidden: 64, color_features: 4, init: DecoderInit::Passthrough },
            synthesis: SynthesisSettings { latent_dim: 64, backbone_channels: 16 },
            sds: SdsSettings {
                steps: 2000,
                t_min: 0.02,
                t_max: 0.98,
                omega: OmegaSchedule::Constant(1.0),
                base_lr: 0.02,
                prompt: String::new(),
            },
            refine: RefineSettings { steps: 200, noise_level: 0.4, base_lr: 0.01 },
            invert: InvertSettings { iters: 200, lr: 0.02, lambda_reg: 0.0 },
            fit: FitSettings { steps: 2000, base_lr: 0.05 },
            provider: ProviderSettings {
                kind: ProviderSelector::Oracle,
                oracle_lambda: 1.0,
                timeout_secs: 30,
            },
            output: OutputSettings { out_dir: PathBuf::from("out"), seed: 0, deterministic: true },
            lr_policy: LevelLrPolicy::default(),
        }
    }
}

impl PipelineConfig {
    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            samples_per_ray: self.render.samples_per_ray,
            depth_range: self.render.depth_range,
            background: self.render.background,
            jitter_seed: self.output.seed,
            parallel: self.render.parallel && !self.output.deterministic,
        }
    }

    pub fn base_pose(&self) -> crate::camera::CameraPose {
        crate::camera::CameraPose::new(
            0.0,
            self.render.polar,
            self.render.radius,
            self.render.fov_y,
            self.render.image_size,
        )
    }

    pub fn sds_config(&self) -> SDSConfig {
        SDSConfig {
            t_min: self.sds.t_min,
            t_max: self.sds.t_max,
            omega: self.sds.omega,
            steps: self.sds.steps,
            base_lr: self.sds.base_lr,
            lr_policy: self.lr_policy,
            hyper: Default::default(),
            prompt: self.sds.prompt.clone(),
            seed: self.output.seed,
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            noise_level: self.refine.noise_level,
            views: None,
            steps: self.refine.steps,
            base_lr: self.refine.base_lr,
            lr_policy: self.lr_policy,
            hyper: Default::default(),
            prompt: self.sds.prompt.clone(),
            seed: self.output.seed,
            min_usable_views: 8,
        }
    }

    pub fn invert_config(&self) -> InvertConfig {
        InvertConfig {
            iters: self.invert.iters,
            lr: self.invert.lr,
            lambda_reg: self.invert.lambda_reg,
            w_mean: None,
            seed: self.output.seed,
        }
    }

    /// Generator configuration matching the pyramid settings. Errors if the
    /// pyramid levels are not a doubling chain (the generator upsamples x2
    /// per layer).
    pub fn synthesis_config(&self) -> Result<SynthesisConfig> {
        let cfg = SynthesisConfig {
            level_resolutions: self.pyramid.levels.clone(),
            grid_channels: self.pyramid.channels,
            depth_layers: self.pyramid.depth_layers,
            latent_dim: self.synthesis.latent_dim,
            backbone_channels: self.synthesis.backbone_channels,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Config { line, msg: msg.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.trim().parse::<T>().map_err(|_| {
        err(line, format!("cannot parse value {value:?} for key {key}"))
    })
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(err(line, format!("key {key} expects a boolean, got {other:?}"))),
    }
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|part| {
            part.trim()
                .parse::<T>()
                .map_err(|_| err(line, format!("cannot parse list element {part:?} for key {key}")))
        })
        .collect()
}

fn parse_rgb(line: usize, key: &str, value: &str) -> Result<[f32; 3]> {
    let parts: Vec<f32> = parse_list(line, key, value)?;
    if parts.len() != 3 {
        return Err(err(line, format!("key {key} expects three comma-separated values")));
    }
    if parts.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(err(line, format!("key {key} components must be in [0,1]")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

/// Parses the config text, applying values over the defaults. Every key is
/// validated as it is assigned so violations carry their line number.
pub fn parse_config(text: &str) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::default();
    let mut section = String::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| err(line_no, "unterminated section header"))?
                .trim();
            match name {
                "pyramid" | "render" | "decoder" | "synthesis" | "sds" | "refine" | "invert"
                | "fit" | "provider" | "output" => section = name.to_string(),
                other => return Err(err(line_no, format!("unknown section [{other}]"))),
            }
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line_no, format!("expected key = value, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        apply_key(&mut cfg, &section, key, value, line_no)?;
    }
    Ok(cfg)
}

fn apply_key(
    cfg: &mut PipelineConfig,
    section: &str,
    key: &str,
    value: &str,
    line: usize,
) -> Result<()> {
    let unknown = || Err(err(line, format!("unknown key {key:?} in section [{section}]")));
    match section {
        "pyramid" => match key {
            "levels" => {
                let levels: Vec<usize> = parse_list(line, key, value)?;
                if levels.is_empty() {
                    return Err(err(line, "levels must not be empty"));
                }
                for pair in levels.windows(2) {
                    if pair[1] <= pair[0] {
                        return Err(err(line, "levels must strictly increase"));
                    }
                }
                if levels.iter().any(|r| *r < 2 || !r.is_power_of_two()) {
                    return Err(err(line, "levels must be powers of two >= 2"));
                }
                cfg.pyramid.levels = levels;
            }
            "channels" => {
                let v: usize = parse_num(line, key, value)?;
                if v == 0 {
                    return Err(err(line, "channels must be >= 1"));
                }
                cfg.pyramid.channels = v;
            }
            "depth_layers" => {
                let v: usize = parse_num(line, key, value)?;
                if v == 0 {
                    return Err(err(line, "depth_layers must be >= 1"));
                }
                cfg.pyramid.depth_layers = v;
            }
            _ => return unknown(),
        },
        "render" => match key {
            "image_size" => {
                let v: usize = parse_num(line, key, value)?;
                if v == 0 {
                    return Err(err(line, "image_size must be >= 1"));
                }
                cfg.render.image_size = v;
            }
            "samples_per_ray" => {
                let v: usize = parse_num(line, key, value)?;
                if v < 2 {
                    return Err(err(line, "samples_per_ray must be >= 2"));
                }
                cfg.render.samples_per_ray = v;
            }
            "fov_y" => {
                let v: f64 = parse_num(line, key, value)?;
                if !(v > 0.0 && v < 180.0) {
                    return Err(err(line, "fov_y must be in (0, 180)"));
                }
                cfg.render.fov_y = v;
            }
            "radius" => {
                let v: f64 = parse_num(line, key, value)?;
                if v <= 0.0 {
                    return Err(err(line, "radius must be positive"));
                }
                cfg.render.radius = v;
            }
            "depth_range" => {
                let v: f64 = parse_num(line, key, value)?;
                if v <= 0.0 {
                    return Err(err(line, "depth_range must be positive"));
                }
                cfg.render.depth_range = v;
            }
            "background" => cfg.render.background = parse_rgb(line, key, value)?,
            "polar" => cfg.render.polar = parse_num(line, key, value)?,
            "parallel" => cfg.render.parallel = parse_bool(line, key, value)?,
            _ => return unknown(),
        },
        "decoder" => match key {
            "hidden" => {
                let v: usize = parse_num(line, key, value)?;
                if v == 0 {
                    return Err(err(line, "hidden must be >= 1"));
                }
                cfg.decoder.hidden = v;
            }
            "color_features" => {
                let v: usize = parse_num(line, key, value)?;
                if v < 3 {
                    return Err(err(line, "color_features must be >= 3"));
                }
                cfg.decoder.color_features = v;
            }
            "init" => {
                cfg.decoder.init = match value {
                    "passthrough" => DecoderInit::Passthrough,
                    "seeded" => DecoderInit::Seeded,
                    other => {
                        return Err(err(
                            line,
                            format!("init must be passthrough or seeded, got {other:?}"),
                        ))
                    }
                };
            }
            _ => return unknown(),
        },
        "synthesis" => match key {
            "latent_dim" => {
                let v: usize = parse_num(line, key, value)?;
                if v == 0 {
                    return Err(err(line, "latent_dim must be >= 1"));
                }
                cfg.synthesis.latent_dim = v;
            }
            "backbone_channels" => {
                let v: usize = parse_num(line, key, value)?;
                if v == 0 {
                    return Err(err(line, "backbone_channels must be >= 1"));
                }
                cfg.synthesis.backbone_channels = v;
            }
            _ => return unknown(),
        },
        "sds" => match key {
            "steps" => cfg.sds.steps = parse_num(line, key, value)?,
            "t_min" => cfg.sds.t_min = parse_num(line, key, value)?,
            "t_max" => cfg.sds.t_max = parse_num(line, key, value)?,
            "base_lr" => {
                let v: f32 = parse_num(line, key, value)?;
                if v <= 0.0 {
                    return Err(err(line, "base_lr must be positive"));
                }
                cfg.sds.base_lr = v;
            }
            "lr_gamma" => cfg.lr_policy.gamma = parse_num(line, key, value)?,
            "lr_reference" => {
                let v: f64 = parse_num(line, key, value)?;
                if v <= 0.0 {
                    return Err(err(line, "lr_reference must be positive"));
                }
                cfg.lr_policy.reference_resolution = v;
            }
            "prompt" => cfg.sds.prompt = value.to_string(),
            "omega" => {
                cfg.sds.omega = if value == "noise_power" {
                    OmegaSchedule::NoisePower
                } else if let Some(w) = value.strip_prefix("constant:") {
                    let w: f32 = parse_num(line, key, w)?;
                    if w < 0.0 {
                        return Err(err(line, "omega weight must be >= 0"));
                    }
                    OmegaSchedule::Constant(w)
                } else {
                    return Err(err(
                        line,
                        format!("omega must be constant:<w> or noise_power, got {value:?}"),
                    ));
                };
            }
            _ => return unknown(),
        },
        "refine" => match key {
            "steps" => cfg.refine.steps = parse_num(line, key, value)?,
            "noise_level" => {
                let v: f64 = parse_num(line, key, value)?;
                if !(0.0..1.0).contains(&v) {
                    return Err(err(line, "noise_level must be in [0,1)"));
                }
                cfg.refine.noise_level = v;
            }
            "base_lr" => {
                let v: f32 = parse_num(line, key, value)?;
                if v <= 0.0 {
                    return Err(err(line, "base_lr must be positive"));
                }
                cfg.refine.base_lr = v;
            }
            _ => return unknown(),
        },
        "invert" => match key {
            "iters" => cfg.invert.iters = parse_num(line, key, value)?,
            "lr" => {
                let v: f32 = parse_num(line, key, value)?;
                if v <= 0.0 {
                    return Err(err(line, "lr must be positive"));
                }
                cfg.invert.lr = v;
            }
            "lambda_reg" => {
                let v: f32 = parse_num(line, key, value)?;
                if v < 0.0 {
                    return Err(err(line, "lambda_reg must be >= 0"));
                }
                cfg.invert.lambda_reg = v;
            }
            _ => return unknown(),
        },
        "fit" => match key {
            "steps" => cfg.fit.steps = parse_num(line, key, value)?,
            "base_lr" => {
                let v: f32 = parse_num(line, key, value)?;
                if v <= 0.0 {
                    return Err(err(line, "base_lr must be positive"));
                }
                cfg.fit.base_lr = v;
            }
            _ => return unknown(),
        },
        "provider" => match key {
            "kind" => {
                cfg.provider.kind = value
                    .parse::<ProviderSelector>()
                    .map_err(|e| err(line, e.to_string()))?;
            }
            "oracle_lambda" => {
                let v: f32 = parse_num(line, key, value)?;
                if v <= 0.0 {
                    return Err(err(line, "oracle_lambda must be positive"));
                }
                cfg.provider.oracle_lambda = v;
            }
            "timeout_secs" => cfg.provider.timeout_secs = parse_num(line, key, value)?,
            _ => return unknown(),
        },
        "output" => match key {
            "out_dir" => cfg.output.out_dir = PathBuf::from(value),
            "seed" => cfg.output.seed = parse_num(line, key, value)?,
            "deterministic" => cfg.output.deterministic = parse_bool(line, key, value)?,
            _ => return unknown(),
        },
        "" => return Err(err(line, format!("key {key:?} appears before any [section]"))),
        _ => unreachable!("sections are validated at the header"),
    }
    // Cross-field invariants that both defaults and overrides must satisfy.
    if cfg.sds.t_min >= cfg.sds.t_max || !(0.0..=1.0).contains(&cfg.sds.t_min) || cfg.sds.t_max > 1.0
    {
        return Err(err(line, "sds timestep range must satisfy 0 <= t_min < t_max <= 1"));
    }
    Ok(())
}

pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}
