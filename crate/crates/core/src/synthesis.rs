//! Latent-to-pyramid generator and latent inversion.
//!
//! The generator is a minimal modulated-convolution stack: a learned constant
//! input, per-layer 2D blocks modulated by an affine of the latent code, a 2D
//! output head per layer, and a 3D-aware branch. At each layer the 3D block
//! consumes the 2D head output (plus the previous 3D features), upsamples x2,
//! and its output feature map is reshaped into one tri-grid; the collected
//! tri-grids form the pyramid, with level resolutions ascending by factors
//! of two.
//!
//! The reshape splits the 3D-branch channel dimension as
//! `(plane, depth layer, grid channel)`, row-major in-plane, which matches
//! the tri-grid memory order exactly.

use rand::Rng;

use crate::camera::CameraPose;
use crate::error::{Error, Result};
use crate::grid::{PyramidGrad, PyramidTriGrid, TriGrid, PLANES};
use crate::imagebuf::ImageBuf;
use crate::optim::{AdamBuf, AdamHyper};
use crate::real::Real;
use crate::render::{DecoderParams, RenderOptions, ToRGBParams};
use crate::rng::stream_rng;
use crate::tape::{render_backward_in, render_with_tape_in, AccumMode};

/// Latent code `w`; modulates both the generator and the renderer's ToRGB.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: Vec<f32>,
}

impl LatentCode {
    pub fn zeros(dim: usize) -> Self {
        LatentCode { values: vec![0.0; dim] }
    }

    pub fn seeded(seed: u64, dim: usize) -> Self {
        let mut rng = stream_rng(seed, 0x1a7e);
        LatentCode { values: (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect() }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisConfig {
    /// Tri-grid resolutions per level; each must double the previous.
    pub level_resolutions: Vec<usize>,
    pub grid_channels: usize,
    pub depth_layers: usize,
    pub latent_dim: usize,
    /// Channel width of the 2D backbone.
    pub backbone_channels: usize,
}

impl SynthesisConfig {
    pub fn toy() -> Self {
        SynthesisConfig {
            level_resolutions: vec![8, 16, 32],
            grid_channels: 12,
            depth_layers: 3,
            latent_dim: 64,
            backbone_channels: 16,
        }
    }

    /// Channels of the 3D branch: one slot per (plane, depth layer, channel).
    pub fn branch_channels(&self) -> usize {
        PLANES * self.depth_layers * self.grid_channels
    }

    pub fn base_resolution(&self) -> usize {
        self.level_resolutions[0] / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.level_resolutions.is_empty() {
            return Err(Error::invalid("generator needs at least one level"));
        }
        if self.level_resolutions[0] < 4 || !self.level_resolutions[0].is_power_of_two() {
            return Err(Error::invalid("first level resolution must be a power of two >= 4"));
        }
        for pair in self.level_resolutions.windows(2) {
            if pair[1] != pair[0] * 2 {
                return Err(Error::invalid(format!(
                    "level resolutions must double per layer, got {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if self.grid_channels == 0
            || self.depth_layers == 0
            || self.latent_dim == 0
            || self.backbone_channels == 0
        {
            return Err(Error::invalid("generator dimensions must be positive"));
        }
        Ok(())
    }
}

/// One generator layer: modulated 3x3 backbone conv, 1x1 2D output head, and
/// the modulated 3x3 conv of the 3D-aware block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    /// backbone conv: [cb, cb, 3, 3]
    pub bb_w: Vec<f32>,
    pub bb_b: Vec<f32>,
    /// backbone modulation affine: [cb, latent] weights + [cb] bias
    pub bb_aw: Vec<f32>,
    pub bb_ab: Vec<f32>,
    /// 2D head 1x1: [c3, cb]
    pub head_w: Vec<f32>,
    pub head_b: Vec<f32>,
    /// 3D block conv: [c3, c3, 3, 3]
    pub t3_w: Vec<f32>,
    pub t3_b: Vec<f32>,
    /// 3D block modulation affine: [c3, latent] weights + [c3] bias
    pub t3_aw: Vec<f32>,
    pub t3_ab: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisNetwork {
    pub config: SynthesisConfig,
    /// Learned constant input, [cb, base, base].
    pub const_input: Vec<f32>,
    pub layers: Vec<LayerWeights>,
}

impl SynthesisNetwork {
    pub fn zeroed(config: SynthesisConfig) -> Result<Self> {
        config.validate()?;
        let cb = config.backbone_channels;
        let c3 = config.branch_channels();
        let d = config.latent_dim;
        let base = config.base_resolution();
        let layers = (0..config.level_resolutions.len())
            .map(|_| LayerWeights {
                bb_w: vec![0.0; cb * cb * 9],
                bb_b: vec![0.0; cb],
                bb_aw: vec![0.0; cb * d],
                bb_ab: vec![0.0; cb],
                head_w: vec![0.0; c3 * cb],
                head_b: vec![0.0; c3],
                t3_w: vec![0.0; c3 * c3 * 9],
                t3_b: vec![0.0; c3],
                t3_aw: vec![0.0; c3 * d],
                t3_ab: vec![0.0; c3],
            })
            .collect();
        Ok(SynthesisNetwork { config, const_input: vec![0.0; cb * base * base], layers })
    }

    /// Seeded random weights with modulation biased toward unit scale.
    pub fn seeded(seed: u64, config: SynthesisConfig) -> Result<Self> {
        let mut net = Self::zeroed(config)?;
        let mut rng = stream_rng(seed, 0x9e4);
        let cb = net.config.backbone_channels;
        let c3 = net.config.branch_channels();
        for v in &mut net.const_input {
            *v = rng.gen_range(-1.0f32..1.0);
        }
        let g_bb = 2.0 * (1.0 / (cb as f32 * 9.0)).sqrt();
        let g_h = 2.0 * (1.0 / cb as f32).sqrt();
        let g_t3 = 2.0 * (1.0 / (c3 as f32 * 9.0)).sqrt();
        let g_a = 0.3 * (1.0 / net.config.latent_dim as f32).sqrt();
        for layer in &mut net.layers {
            for v in &mut layer.bb_w {
                *v = rng.gen_range(-g_bb..g_bb);
            }
            for v in &mut layer.bb_aw {
                *v = rng.gen_range(-g_a..g_a);
            }
            layer.bb_ab.fill(1.0);
            for v in &mut layer.head_w {
                *v = rng.gen_range(-g_h..g_h);
            }
            for v in &mut layer.t3_w {
                *v = rng.gen_range(-g_t3..g_t3);
            }
            for v in &mut layer.t3_aw {
                *v = rng.gen_range(-g_a..g_a);
            }
            layer.t3_ab.fill(1.0);
        }
        Ok(net)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let cb = self.config.backbone_channels;
        let c3 = self.config.branch_channels();
        let d = self.config.latent_dim;
        let base = self.config.base_resolution();
        if self.const_input.len() != cb * base * base {
            return Err(Error::shape("const input shape mismatch"));
        }
        if self.layers.len() != self.config.level_resolutions.len() {
            return Err(Error::shape("layer count mismatch"));
        }
        for l in &self.layers {
            let ok = l.bb_w.len() == cb * cb * 9
                && l.bb_b.len() == cb
                && l.bb_aw.len() == cb * d
                && l.bb_ab.len() == cb
                && l.head_w.len() == c3 * cb
                && l.head_b.len() == c3
                && l.t3_w.len() == c3 * c3 * 9
                && l.t3_b.len() == c3
                && l.t3_aw.len() == c3 * d
                && l.t3_ab.len() == c3;
            if !ok {
                return Err(Error::shape("layer weight shapes inconsistent"));
            }
        }
        Ok(())
    }
}

/// Square multi-channel feature map, `[channel][row][col]`.
struct Feat<R> {
    c: usize,
    n: usize,
    data: Vec<R>,
}

impl<R: Real> Feat<R> {
    fn zeros(c: usize, n: usize) -> Self {
        Feat { c, n, data: vec![R::zero(); c * n * n] }
    }

    #[inline]
    fn at(&self, c: usize, i: usize, j: usize) -> R {
        self.data[(c * self.n + i) * self.n + j]
    }

    #[inline]
    fn at_mut(&mut self, c: usize, i: usize, j: usize) -> &mut R {
        &mut self.data[(c * self.n + i) * self.n + j]
    }
}

/// 3x3 same-padding convolution of a channel-scaled input:
/// `y = conv(x * s, w) + b`.
fn modconv3x3<R: Real>(x: &Feat<R>, scales: &[R], w: &[f32], b: &[f32], out_c: usize) -> Feat<R> {
    let n = x.n;
    let ic = x.c;
    let mut y = Feat::zeros(out_c, n);
    for o in 0..out_c {
        for i in 0..n {
            for j in 0..n {
                let mut acc = R::from_f32(b[o]);
                for c in 0..ic {
                    let wbase = (o * ic + c) * 9;
                    let s = scales[c];
                    for di in 0..3usize {
                        let ii = i + di;
                        if ii < 1 || ii > n {
                            continue;
                        }
                        let ii = ii - 1;
                        for dj in 0..3usize {
                            let jj = j + dj;
                            if jj < 1 || jj > n {
                                continue;
                            }
                            let jj = jj - 1;
                            acc += R::from_f32(w[wbase + di * 3 + dj]) * s * x.at(c, ii, jj);
                        }
                    }
                }
                *y.at_mut(o, i, j) = acc;
            }
        }
    }
    y
}

/// Gradient of [`modconv3x3`] with respect to the *scaled* input.
fn modconv3x3_input_grad<R: Real>(ybar: &Feat<R>, w: &[f32], in_c: usize) -> Feat<R> {
    let n = ybar.n;
    let oc = ybar.c;
    let mut xbar = Feat::zeros(in_c, n);
    for o in 0..oc {
        for i in 0..n {
            for j in 0..n {
                let g = ybar.at(o, i, j);
                if g == R::zero() {
                    continue;
                }
                for c in 0..in_c {
                    let wbase = (o * in_c + c) * 9;
                    for di in 0..3usize {
                        let ii = i + di;
                        if ii < 1 || ii > n {
                            continue;
                        }
                        let ii = ii - 1;
                        for dj in 0..3usize {
                            let jj = j + dj;
                            if jj < 1 || jj > n {
                                continue;
                            }
                            let jj = jj - 1;
                            *xbar.at_mut(c, ii, jj) += R::from_f32(w[wbase + di * 3 + dj]) * g;
                        }
                    }
                }
            }
        }
    }
    xbar
}

fn upsample2<R: Real>(x: &Feat<R>) -> Feat<R> {
    let mut y = Feat::zeros(x.c, x.n * 2);
    for c in 0..x.c {
        for i in 0..x.n {
            for j in 0..x.n {
                let v = x.at(c, i, j);
                for di in 0..2 {
                    for dj in 0..2 {
                        *y.at_mut(c, 2 * i + di, 2 * j + dj) = v;
                    }
                }
            }
        }
    }
    y
}

fn upsample2_adjoint<R: Real>(ybar: &Feat<R>) -> Feat<R> {
    let n = ybar.n / 2;
    let mut xbar = Feat::zeros(ybar.c, n);
    for c in 0..ybar.c {
        for i in 0..n {
            for j in 0..n {
                let mut acc = R::zero();
                for di in 0..2 {
                    for dj in 0..2 {
                        acc += ybar.at(c, 2 * i + di, 2 * j + dj);
                    }
                }
                *xbar.at_mut(c, i, j) = acc;
            }
        }
    }
    xbar
}

fn affine<R: Real>(w: &[f32], b: &[f32], latent: &[R]) -> Vec<R> {
    let d = latent.len();
    b.iter()
        .enumerate()
        .map(|(k, bk)| {
            let mut acc = R::from_f32(*bk);
            for (x, ww) in latent.iter().zip(&w[k * d..(k + 1) * d]) {
                acc += R::from_f32(*ww) * *x;
            }
            acc
        })
        .collect()
}

/// Per-layer intermediates recorded for the latent adjoint.
struct LayerTape<R> {
    bb_input: Feat<R>,
    bb_scales: Vec<R>,
    bb_out: Feat<R>,
    t3_input: Feat<R>,
    t3_scales: Vec<R>,
    t3_out: Feat<R>,
}

pub(crate) struct SynthTape<R> {
    layers: Vec<LayerTape<R>>,
}

fn check_latent(net: &SynthesisNetwork, dim: usize) -> Result<()> {
    if dim != net.config.latent_dim {
        return Err(Error::shape(format!(
            "latent dim {dim} != configured {}",
            net.config.latent_dim
        )));
    }
    Ok(())
}

pub(crate) fn synthesize_in<R: Real>(
    net: &SynthesisNetwork,
    latent: &[R],
) -> Result<(PyramidTriGrid, SynthTape<R>)> {
    net.validate()?;
    check_latent(net, latent.len())?;
    if !latent.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("latent code must be finite"));
    }
    let cfg = &net.config;
    let cb = cfg.backbone_channels;
    let c3 = cfg.branch_channels();
    let base = cfg.base_resolution();

    let mut tapes = Vec::with_capacity(net.layers.len());
    let mut grids = Vec::with_capacity(net.layers.len());
    let mut bb_prev: Option<Feat<R>> = None;
    let mut f3d_prev: Option<Feat<R>> = None;
    for (li, layer) in net.layers.iter().enumerate() {
        // 2D backbone: layer 0 reads the learned constant, later layers
        // upsample the previous activation.
        let bb_input = match &bb_prev {
            None => {
                let mut f = Feat::zeros(cb, base);
                for (dst, src) in f.data.iter_mut().zip(&net.const_input) {
                    *dst = R::from_f32(*src);
                }
                f
            }
            Some(prev) => upsample2(prev),
        };
        let bb_scales = affine(&layer.bb_aw, &layer.bb_ab, latent);
        let mut bb_out = modconv3x3(&bb_input, &bb_scales, &layer.bb_w, &layer.bb_b, cb);
        for v in bb_out.data.iter_mut() {
            *v = v.tanh();
        }

        // 2D output head (1x1, linear).
        let n2 = bb_out.n;
        let mut f2d = Feat::zeros(c3, n2);
        for o in 0..c3 {
            for i in 0..n2 {
                for j in 0..n2 {
                    let mut acc = R::from_f32(layer.head_b[o]);
                    for c in 0..cb {
                        acc += R::from_f32(layer.head_w[o * cb + c]) * bb_out.at(c, i, j);
                    }
                    *f2d.at_mut(o, i, j) = acc;
                }
            }
        }

        // 3D-aware block: add previous 3D features, upsample x2, modulated
        // conv, tanh.
        let mut g_in = f2d;
        if let Some(prev) = &f3d_prev {
            for (a, b) in g_in.data.iter_mut().zip(&prev.data) {
                *a += *b;
            }
        }
        let t3_input = upsample2(&g_in);
        let t3_scales = affine(&layer.t3_aw, &layer.t3_ab, latent);
        let mut f3d = modconv3x3(&t3_input, &t3_scales, &layer.t3_w, &layer.t3_b, c3);
        for v in f3d.data.iter_mut() {
            *v = v.tanh();
        }

        // Reshape [3 * depth * channels][r][r] into a tri-grid; the channel
        // split is (plane, depth layer, channel), so memory order matches.
        let values: Vec<f32> = f3d.data.iter().map(|v| v.as_f32()).collect();
        grids.push(TriGrid::from_values(
            cfg.level_resolutions[li],
            cfg.depth_layers,
            cfg.grid_channels,
            values,
        )?);

        tapes.push(LayerTape {
            bb_input,
            bb_scales,
            bb_out: Feat { c: cb, n: n2, data: bb_out.data.clone() },
            t3_input,
            t3_scales,
            t3_out: Feat { c: c3, n: f3d.n, data: f3d.data.clone() },
        });
        bb_prev = Some(bb_out);
        f3d_prev = Some(f3d);
    }
    Ok((PyramidTriGrid::from_levels(grids)?, SynthTape { layers: tapes }))
}

/// Runs the generator: `w` to a pyramid tri-grid with level shapes
/// `[3, depth, channels, r, r]` for each configured resolution.
pub fn synthesize(net: &SynthesisNetwork, latent: &LatentCode) -> Result<PyramidTriGrid> {
    Ok(synthesize_in::<f32>(net, &latent.values)?.0)
}

/// Adjoint of [`synthesize`] with respect to the latent code, given upstream
/// gradients over pyramid values. Network weights are fixed inputs.
pub(crate) fn synth_backward<R: Real>(
    net: &SynthesisNetwork,
    tape: &SynthTape<R>,
    pyr_grad: &PyramidGrad<R>,
) -> Result<Vec<R>> {
    let cfg = &net.config;
    let cb = cfg.backbone_channels;
    let c3 = cfg.branch_channels();
    let d = cfg.latent_dim;
    let one = R::one();
    let n_layers = net.layers.len();
    if pyr_grad.levels.len() != n_layers {
        return Err(Error::shape("pyramid gradient level count mismatch"));
    }
    let mut latent_bar = vec![R::zero(); d];
    // Carries flowing down from higher layers.
    let mut f3d_carry: Option<Feat<R>> = None;
    let mut bb_carry: Option<Feat<R>> = None;
    for li in (0..n_layers).rev() {
        let layer = &net.layers[li];
        let t = &tape.layers[li];
        let r = cfg.level_resolutions[li];

        // Tri-grid gradient is the reshaped f3d gradient; add the carry from
        // the 3D block of the layer above.
        let mut f3d_bar = Feat { c: c3, n: r, data: pyr_grad.levels[li].clone() };
        if let Some(carry) = f3d_carry.take() {
            for (a, b) in f3d_bar.data.iter_mut().zip(&carry.data) {
                *a += *b;
            }
        }
        for (g, y) in f3d_bar.data.iter_mut().zip(&t.t3_out.data) {
            *g *= one - *y * *y;
        }
        let xbar_scaled = modconv3x3_input_grad(&f3d_bar, &layer.t3_w, c3);
        let mut s_bar = vec![R::zero(); c3];
        let mut t3_in_bar = Feat::zeros(c3, t.t3_input.n);
        for c in 0..c3 {
            let mut acc = R::zero();
            for i in 0..t.t3_input.n {
                for j in 0..t.t3_input.n {
                    let xb = xbar_scaled.at(c, i, j);
                    acc += xb * t.t3_input.at(c, i, j);
                    *t3_in_bar.at_mut(c, i, j) = xb * t.t3_scales[c];
                }
            }
            s_bar[c] = acc;
        }
        for (k, sb) in s_bar.iter().enumerate() {
            for (dst, w) in latent_bar.iter_mut().zip(&layer.t3_aw[k * d..(k + 1) * d]) {
                *dst += *sb * R::from_f32(*w);
            }
        }
        let g_in_bar = upsample2_adjoint(&t3_in_bar);

        // g_in = f2d (+ f3d_prev): the same gradient routes to the previous
        // layer's 3D output and through the head into the backbone.
        if li > 0 {
            f3d_carry = Some(Feat { c: c3, n: g_in_bar.n, data: g_in_bar.data.clone() });
        }
        let n2 = t.bb_out.n;
        let mut bb_out_bar = Feat::<R>::zeros(cb, n2);
        for o in 0..c3 {
            for i in 0..n2 {
                for j in 0..n2 {
                    let g = g_in_bar.at(o, i, j);
                    if g == R::zero() {
                        continue;
                    }
                    for c in 0..cb {
                        *bb_out_bar.at_mut(c, i, j) += R::from_f32(layer.head_w[o * cb + c]) * g;
                    }
                }
            }
        }
        if let Some(carry) = bb_carry.take() {
            for (a, b) in bb_out_bar.data.iter_mut().zip(&carry.data) {
                *a += *b;
            }
        }
        for (g, y) in bb_out_bar.data.iter_mut().zip(&t.bb_out.data) {
            *g *= one - *y * *y;
        }
        let xbar_scaled = modconv3x3_input_grad(&bb_out_bar, &layer.bb_w, cb);
        let mut s_bar = vec![R::zero(); cb];
        let mut bb_in_bar = Feat::zeros(cb, t.bb_input.n);
        for c in 0..cb {
            let mut acc = R::zero();
            for i in 0..t.bb_input.n {
                for j in 0..t.bb_input.n {
                    let xb = xbar_scaled.at(c, i, j);
                    acc += xb * t.bb_input.at(c, i, j);
                    *bb_in_bar.at_mut(c, i, j) = xb * t.bb_scales[c];
                }
            }
            s_bar[c] = acc;
        }
        for (k, sb) in s_bar.iter().enumerate() {
            for (dst, w) in latent_bar.iter_mut().zip(&layer.bb_aw[k * d..(k + 1) * d]) {
                *dst += *sb * R::from_f32(*w);
            }
        }
        if li > 0 {
            bb_carry = Some(upsample2_adjoint(&bb_in_bar));
        }
    }
    Ok(latent_bar)
}

/// Pre-aligned reference image for inversion.
#[derive(Debug, Clone)]
pub struct ReferenceImage {
    pub rgb: ImageBuf,
}

impl ReferenceImage {
    pub fn new(rgb: ImageBuf) -> Result<Self> {
        if rgb.channels != 3 {
            return Err(Error::invalid("reference image must be RGB"));
        }
        if !rgb.is_finite() || rgb.data.iter().any(|v| *v < 0.0 || *v > 1.0) {
            return Err(Error::invalid("reference image values must be finite in [0,1]"));
        }
        Ok(ReferenceImage { rgb })
    }
}

#[derive(Debug, Clone)]
pub struct InvertConfig {
    pub iters: usize,
    pub lr: f32,
    pub lambda_reg: f32,
    /// Regularization center; zero for random-weight networks, where no
    /// trained latent statistics exist.
    pub w_mean: Option<Vec<f32>>,
    pub seed: u64,
}

impl Default for InvertConfig {
    fn default() -> Self {
        InvertConfig { iters: 200, lr: 0.02, lambda_reg: 0.0, w_mean: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct InversionResult {
    pub w_star: LatentCode,
    pub best_loss: f64,
    /// Total objective per iteration (data term + regularizer), evaluated
    /// before each update.
    pub trace: Vec<f64>,
}

/// Optimizes the latent so the generated pyramid renders to `target` under
/// pose `c`: `L2(render(synthesize(w), c, w), target) + lambda * |w - mean|^2`.
///
/// The jitter seed is held fixed across iterations so a self-rendered target
/// at the true latent is an exact fixed point. Returns the best-loss latent.
#[allow(clippy::too_many_arguments)]
pub fn invert(
    net: &SynthesisNetwork,
    decoder: &DecoderParams,
    torgb: &ToRGBParams,
    target: &ReferenceImage,
    pose: &CameraPose,
    render_opts: &RenderOptions,
    init: &LatentCode,
    cfg: &InvertConfig,
) -> Result<InversionResult> {
    if target.rgb.height != pose.image_size || target.rgb.width != pose.image_size {
        return Err(Error::shape(format!(
            "target {}x{} does not match render size {}",
            target.rgb.height, target.rgb.width, pose.image_size
        )));
    }
    check_latent(net, init.dim())?;
    let d = net.config.latent_dim;
    let w_mean = match &cfg.w_mean {
        Some(m) if m.len() != d => {
            return Err(Error::shape("w_mean dimension mismatch"));
        }
        Some(m) => m.clone(),
        None => vec![0.0; d],
    };
    let mut w = init.values.clone();
    let mut adam = AdamBuf::new(d, AdamHyper::default());
    let mut best_loss = f64::INFINITY;
    let mut best_w = w.clone();
    let mut trace = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let (pyr, synth_tape) = synthesize_in::<f32>(net, &w)?;
        let out = render_with_tape_in::<f32>(&pyr, decoder, torgb, &w, pose, render_opts)?;
        let mut data_loss = 0.0f64;
        let mut upstream = vec![0.0f32; out.rgb.len()];
        for (i, (r, t)) in out.rgb.iter().zip(&target.rgb.data).enumerate() {
            let diff = r - t;
            data_loss += (diff as f64) * (diff as f64);
            upstream[i] = 2.0 * diff;
        }
        let mut reg_loss = 0.0f64;
        for (wi, mi) in w.iter().zip(&w_mean) {
            let dv = (wi - mi) as f64;
            reg_loss += dv * dv;
        }
        let loss = data_loss + cfg.lambda_reg as f64 * reg_loss;
        if !loss.is_finite() {
            return Err(Error::Provider(format!(
                "inversion loss became non-finite after {} recorded iterations",
                trace.len()
            )));
        }
        trace.push(loss);
        if loss < best_loss {
            best_loss = loss;
            best_w = w.clone();
        }
        let grads = render_backward_in(&out.tape, decoder, torgb, &upstream, AccumMode::Deterministic)?;
        let w_grad_synth = synth_backward(net, &synth_tape, &grads.pyramid)?;
        let mut w_grad: Vec<f32> =
            grads.latent.iter().zip(&w_grad_synth).map(|(a, b)| a + b).collect();
        for ((g, wi), mi) in w_grad.iter_mut().zip(&w).zip(&w_mean) {
            *g += 2.0 * cfg.lambda_reg * (wi - mi);
        }
        adam.step(&mut w, &w_grad, cfg.lr)?;
    }
    Ok(InversionResult { w_star: LatentCode { values: best_w }, best_loss, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::render::render;
    use crate::rng::seeded_rng;
    use rand::Rng;

    fn small_cfg() -> SynthesisConfig {
        SynthesisConfig {
            level_resolutions: vec![4, 8],
            grid_channels: 4,
            depth_layers: 3,
            latent_dim: 8,
            backbone_channels: 6,
        }
    }

    #[test]
    fn output_shapes_match_the_configured_template() {
        let cfg = SynthesisConfig {
            level_resolutions: vec![8, 16, 32],
            grid_channels: 12,
            depth_layers: 3,
            latent_dim: 16,
            backbone_channels: 8,
        };
        let net = SynthesisNetwork::seeded(1, cfg).unwrap();
        let pyr = synthesize(&net, &LatentCode::seeded(2, 16)).unwrap();
        assert_eq!(pyr.levels().len(), 3);
        for (level, res) in pyr.levels().iter().zip([8usize, 16, 32]) {
            assert_eq!(level.resolution(), res);
            assert_eq!(level.depth_layers(), 3);
            assert_eq!(level.channels(), 12);
            assert_eq!(level.values().len(), 3 * 3 * 12 * res * res);
        }
    }

    #[test]
    fn zero_network_produces_zero_pyramid() {
        let net = SynthesisNetwork::zeroed(small_cfg()).unwrap();
        let pyr = synthesize(&net, &LatentCode::seeded(3, 8)).unwrap();
        for level in pyr.levels() {
            assert!(level.values().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn different_latents_give_different_pyramids() {
        for seed in [10u64, 11, 12] {
            let net = SynthesisNetwork::seeded(seed, small_cfg()).unwrap();
            let a = synthesize(&net, &LatentCode::seeded(seed ^ 100, 8)).unwrap();
            let b = synthesize(&net, &LatentCode::seeded(seed ^ 200, 8)).unwrap();
            let max_diff = a
                .levels()
                .iter()
                .zip(b.levels())
                .flat_map(|(x, y)| x.values().iter().zip(y.values()).map(|(p, q)| (p - q).abs()))
                .fold(0.0f32, f32::max);
            assert!(max_diff > 0.0, "seed {seed}: pyramids identical");
        }
    }

    #[test]
    fn synthesize_output_is_a_valid_pyramid_for_any_finite_latent() {
        let net = SynthesisNetwork::seeded(7, small_cfg()).unwrap();
        for seed in 0..5u64 {
            let mut latent = LatentCode::seeded(seed, 8);
            for v in &mut latent.values {
                *v *= 100.0;
            }
            let pyr = synthesize(&net, &latent).unwrap();
            assert!(pyr.is_finite());
        }
        assert!(synthesize(&net, &LatentCode { values: vec![f32::NAN; 8] }).is_err());
    }

    /// d render(synthesize(w), c, w) / d w against central finite
    /// differences, 64-bit mode, through both the generator and ToRGB paths.
    #[test]
    fn latent_gradient_through_generator_matches_finite_differences() {
        let net = SynthesisNetwork::seeded(21, small_cfg()).unwrap();
        let decoder = DecoderParams::seeded(22, 4, 8, 4);
        let torgb = ToRGBParams::seeded(23, 8, 4);
        let pose = CameraPose::new(30.0, 85.0, 2.7, 30.0, 4);
        let opts = RenderOptions {
            samples_per_ray: 8,
            background: [0.5, 0.5, 0.5],
            jitter_seed: 9,
            ..Default::default()
        };
        let mut rng = seeded_rng(77);
        let u: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w0: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let loss = |w: &[f64]| -> f64 {
            let (pyr, _) = synthesize_in::<f64>(&net, w).unwrap();
            let out = render_with_tape_in::<f64>(&pyr, &decoder, &torgb, w, &pose, &opts).unwrap();
            out.rgb.iter().zip(&u).map(|(a, b)| a * b).sum()
        };
        let (pyr, synth_tape) = synthesize_in::<f64>(&net, &w0).unwrap();
        let out = render_with_tape_in::<f64>(&pyr, &decoder, &torgb, &w0, &pose, &opts).unwrap();
        let grads =
            render_backward_in(&out.tape, &decoder, &torgb, &u, AccumMode::Deterministic).unwrap();
        let w_grad_synth = synth_backward(&net, &synth_tape, &grads.pyramid).unwrap();
        let h = 1e-3;
        for dim in 0..8 {
            let mut plus = w0.clone();
            plus[dim] += h;
            let mut minus = w0.clone();
            minus[dim] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.latent[dim] + w_grad_synth[dim];
            let denom = an.abs().max(fd.abs()).max(1e-4);
            assert!((an - fd).abs() / denom < 1e-3, "dim {dim}: analytic {an}, fd {fd}");
        }
    }

    #[test]
    fn inversion_from_true_latent_is_a_fixed_point() {
        let net = SynthesisNetwork::seeded(31, small_cfg()).unwrap();
        let decoder = DecoderParams::seeded(32, 4, 8, 4);
        let torgb = ToRGBParams::seeded(33, 8, 4);
        let pose = CameraPose::new(120.0, 90.0, 2.7, 30.0, 4);
        let opts = RenderOptions {
            samples_per_ray: 8,
            background: [0.5, 0.5, 0.5],
            jitter_seed: 4,
            ..Default::default()
        };
        let w0 = LatentCode::seeded(34, 8);
        let pyr = synthesize(&net, &w0).unwrap();
        let target = ReferenceImage::new(
            render(&pyr, &decoder, &torgb, &w0.values, &pose, &opts).unwrap().rgb,
        )
        .unwrap();
        let cfg = InvertConfig { iters: 5, ..Default::default() };
        let result = invert(&net, &decoder, &torgb, &target, &pose, &opts, &w0, &cfg).unwrap();
        assert_eq!(result.trace[0], 0.0, "loss at the true latent must be 0");
        assert_eq!(result.best_loss, 0.0);
        assert_eq!(result.w_star, w0);
    }

    #[test]
    fn inversion_reduces_loss_from_a_perturbed_start() {
        let net = SynthesisNetwork::seeded(41, small_cfg()).unwrap();
        let decoder = DecoderParams::seeded(42, 4, 8, 4);
        let torgb = ToRGBParams::seeded(43, 8, 4);
        let pose = CameraPose::new(200.0, 88.0, 2.7, 30.0, 4);
        let opts = RenderOptions {
            samples_per_ray: 8,
            background: [0.5, 0.5, 0.5],
            jitter_seed: 8,
            ..Default::default()
        };
        let w0 = LatentCode::seeded(44, 8);
        let pyr = synthesize(&net, &w0).unwrap();
        let target = ReferenceImage::new(
            render(&pyr, &decoder, &torgb, &w0.values, &pose, &opts).unwrap().rgb,
        )
        .unwrap();
        let mut rng = seeded_rng(45);
        let mut init = w0.clone();
        for v in &mut init.values {
            *v += 0.01 * rng.gen_range(-1.0f32..1.0);
        }
        let cfg = InvertConfig { iters: 40, lr: 0.005, ..Default::default() };
        let result = invert(&net, &decoder, &torgb, &target, &pose, &opts, &init, &cfg).unwrap();
        assert!(
            result.best_loss < result.trace[0],
            "loss did not improve: {} -> {}",
            result.trace[0],
            result.best_loss
        );
        let mut best = f64::INFINITY;
        for l in &result.trace {
            best = best.min(*l);
        }
        assert_eq!(best, result.best_loss);
    }

    #[test]
    fn stronger_regularization_pulls_latent_toward_mean() {
        for seed in [51u64, 52, 53] {
            let net = SynthesisNetwork::seeded(seed, small_cfg()).unwrap();
            let decoder = DecoderParams::seeded(seed ^ 1, 4, 8, 4);
            let torgb = ToRGBParams::seeded(seed ^ 2, 8, 4);
            let pose = CameraPose::new(10.0, 92.0, 2.7, 30.0, 4);
            let opts = RenderOptions {
                samples_per_ray: 8,
                background: [0.5, 0.5, 0.5],
                jitter_seed: seed,
                ..Default::default()
            };
            let w_true = LatentCode::seeded(seed ^ 3, 8);
            let pyr = synthesize(&net, &w_true).unwrap();
            let target = ReferenceImage::new(
                render(&pyr, &decoder, &torgb, &w_true.values, &pose, &opts).unwrap().rgb,
            )
            .unwrap();
            let init = LatentCode::seeded(seed ^ 4, 8);
            let free = InvertConfig { iters: 30, lr: 0.01, lambda_reg: 0.0, ..Default::default() };
            let tight = InvertConfig { iters: 30, lr: 0.01, lambda_reg: 1e3, ..Default::default() };
            let r_free =
                invert(&net, &decoder, &torgb, &target, &pose, &opts, &init, &free).unwrap();
            let r_tight =
                invert(&net, &decoder, &torgb, &target, &pose, &opts, &init, &tight).unwrap();
            let norm = |w: &LatentCode| -> f64 {
                w.values.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt()
            };
            assert!(
                norm(&r_tight.w_star) < norm(&r_free.w_star),
                "seed {seed}: |w*| {} !< {}",
                norm(&r_tight.w_star),
                norm(&r_free.w_star)
            );
        }
    }
}
