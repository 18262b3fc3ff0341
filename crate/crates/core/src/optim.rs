//! First-order optimization: Adam over pyramid values (with per-level
//! learning-rate multipliers) and over flat parameter vectors.
//!
//! High-resolution levels take smaller steps: a uniform learning rate lets
//! per-view noise write high-frequency texture straight into the fine grids,
//! while too small a rate blurs detail. The multiplier
//! `(reference / resolution)^gamma` exposes that trade-off.

use crate::error::{Error, Result};
use crate::grid::{PyramidGrad, PyramidTriGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-level learning-rate multiplier `(reference_resolution / res)^gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LevelLrPolicy {
    pub reference_resolution: f64,
    pub gamma: f64,
}

impl Default for LevelLrPolicy {
    fn default() -> Self {
        LevelLrPolicy { reference_resolution: 8.0, gamma: 0.5 }
    }
}

impl LevelLrPolicy {
    /// Uniform learning rate across levels.
    pub fn flat() -> Self {
        LevelLrPolicy { reference_resolution: 8.0, gamma: 0.0 }
    }

    pub fn multiplier(&self, resolution: usize) -> f32 {
        (self.reference_resolution / resolution as f64).powf(self.gamma) as f32
    }
}

/// Adam state for one flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamBuf {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    pub step: u64,
    pub hyper: AdamHyper,
}

impl AdamBuf {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        AdamBuf { m: vec![0.0; len], v: vec![0.0; len], step: 0, hyper }
    }

    /// One bias-corrected update. Shapes must match; the caller is
    /// responsible for gradient finiteness.
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam buffers {} vs params {} vs grads {}",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.step as i32);
        let bc2 = 1.0 - h.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * g;
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        Ok(())
    }
}

/// Result of one pyramid optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// The gradient contained non-finite values; parameters and moments were
    /// left untouched and the skip counter incremented.
    SkippedNonFinite,
}

/// Adam over all pyramid levels with per-level learning rates.
#[derive(Debug, Clone)]
pub struct PyramidOptimizer {
    levels: Vec<AdamBuf>,
    multipliers: Vec<f32>,
    pub skipped_steps: u64,
}

impl PyramidOptimizer {
    pub fn new(pyr: &PyramidTriGrid, policy: LevelLrPolicy, hyper: AdamHyper) -> Self {
        let levels = pyr
            .levels()
            .iter()
            .map(|l| AdamBuf::new(l.values().len(), hyper))
            .collect();
        let multipliers = pyr
            .levels()
            .iter()
            .map(|l| policy.multiplier(l.resolution()))
            .collect();
        PyramidOptimizer { levels, multipliers, skipped_steps: 0 }
    }

    pub fn multipliers(&self) -> &[f32] {
        &self.multipliers
    }

    pub fn step(
        &mut self,
        pyr: &mut PyramidTriGrid,
        grads: &PyramidGrad<f32>,
        base_lr: f32,
    ) -> Result<StepOutcome> {
        if base_lr <= 0.0 || !base_lr.is_finite() {
            return Err(Error::invalid(format!("base_lr must be positive, got {base_lr}")));
        }
        if grads.levels.len() != self.levels.len() {
            return Err(Error::shape("gradient level count differs from optimizer"));
        }
        if !grads.is_finite() {
            self.skipped_steps += 1;
            return Ok(StepOutcome::SkippedNonFinite);
        }
        for (li, level) in pyr.levels_mut().iter_mut().enumerate() {
            let lr = base_lr * self.multipliers[li];
            self.levels[li].step(level.values_mut(), &grads.levels[li], lr)?;
        }
        Ok(StepOutcome::Applied)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::PyramidShape;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut pyr = PyramidTriGrid::zeros(&[4, 8], 3, 2).unwrap();
        pyr.levels_mut()[0].values_mut()[5] = 0.7;
        let before = pyr.clone();
        let mut opt = PyramidOptimizer::new(&pyr, LevelLrPolicy::default(), AdamHyper::default());
        let grads = PyramidGrad::<f32>::zeros(&pyr.shape());
        for _ in 0..3 {
            assert_eq!(opt.step(&mut pyr, &grads, 0.1).unwrap(), StepOutcome::Applied);
        }
        assert_eq!(pyr, before);
    }

    #[test]
    fn adam_descends_on_quadratic() {
        let mut x = vec![1.0f32];
        let mut buf = AdamBuf::new(1, AdamHyper::default());
        let g0 = 2.0 * x[0];
        buf.step(&mut x, &[g0], 0.1).unwrap();
        assert!(x[0] < 1.0 && x[0] > 0.0, "x = {}", x[0]);
        for _ in 0..200 {
            let g = 2.0 * x[0];
            buf.step(&mut x, &[g], 0.1).unwrap();
        }
        assert!(x[0].abs() < 0.05, "did not approach 0: {}", x[0]);
    }

    #[test]
    fn level_multipliers_scale_updates_exactly() {
        let mut pyr = PyramidTriGrid::zeros(&[8, 512], 1, 1).unwrap();
        let policy = LevelLrPolicy::default();
        let mut opt = PyramidOptimizer::new(&pyr, policy, AdamHyper::default());
        let shape = pyr.shape();
        let mut grads = PyramidGrad::<f32>::zeros(&shape);
        for l in &mut grads.levels {
            l.fill(1.0);
        }
        opt.step(&mut pyr, &grads, 0.1).unwrap();
        let coarse = -pyr.levels()[0].values()[0];
        let fine = -pyr.levels()[1].values()[0];
        assert!(coarse > 0.0 && fine > 0.0);
        let expected = policy.multiplier(512) / policy.multiplier(8);
        let got = fine / coarse;
        assert!(
            (got - expected).abs() < 1e-6,
            "update ratio {got} != multiplier ratio {expected}"
        );
        assert!(fine < coarse, "fine level must update less");
    }

    #[test]
    fn non_finite_gradient_skips_step_and_counts() {
        let mut pyr = PyramidTriGrid::zeros(&[4], 3, 2).unwrap();
        let before = pyr.clone();
        let mut opt = PyramidOptimizer::new(&pyr, LevelLrPolicy::default(), AdamHyper::default());
        let shape: PyramidShape = pyr.shape();
        let mut grads = PyramidGrad::<f32>::zeros(&shape);
        grads.levels[0][0] = f32::NAN;
        assert_eq!(opt.step(&mut pyr, &grads, 0.1).unwrap(), StepOutcome::SkippedNonFinite);
        assert_eq!(opt.skipped_steps, 1);
        assert_eq!(pyr, before);
    }

    #[test]
    fn rejects_bad_learning_rate() {
        let mut pyr = PyramidTriGrid::zeros(&[4], 3, 2).unwrap();
        let mut opt = PyramidOptimizer::new(&pyr, LevelLrPolicy::default(), AdamHyper::default());
        let grads = PyramidGrad::<f32>::zeros(&pyr.shape());
        assert!(opt.step(&mut pyr, &grads, 0.0).is_err());
    }
}
