//! Camera poses on a sphere around the origin and pinhole ray generation.

use crate::error::{Error, Result};

/// Look-at camera on a sphere around the origin.
///
/// `azimuth_deg` rotates around +Z; `polar_deg` is measured from the +Z
/// zenith, so 90 is horizontal. World up is +Z.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    pub azimuth_deg: f64,
    pub polar_deg: f64,
    pub radius: f64,
    pub fov_y_deg: f64,
    pub image_size: usize,
}

impl CameraPose {
    pub fn new(azimuth_deg: f64, polar_deg: f64, radius: f64, fov_y_deg: f64, image_size: usize) -> Self {
        CameraPose { azimuth_deg, polar_deg, radius, fov_y_deg, image_size }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fov_y_deg > 0.0 && self.fov_y_deg < 180.0) {
            return Err(Error::invalid(format!("fov_y must be in (0,180), got {}", self.fov_y_deg)));
        }
        if !(self.radius > 0.0) {
            return Err(Error::invalid(format!("radius must be positive, got {}", self.radius)));
        }
        if self.image_size == 0 {
            return Err(Error::invalid("image_size must be >= 1"));
        }
        if !(self.azimuth_deg.is_finite() && self.polar_deg.is_finite()) {
            return Err(Error::invalid("angles must be finite"));
        }
        Ok(())
    }

    pub fn position(&self) -> [f64; 3] {
        let a = self.azimuth_deg.to_radians();
        let p = self.polar_deg.to_radians();
        [
            self.radius * p.sin() * a.cos(),
            self.radius * p.sin() * a.sin(),
            self.radius * p.cos(),
        ]
    }
}

/// Per-pixel rays with march bounds. Directions are unit-norm.
#[derive(Debug, Clone)]
pub struct RayBatch {
    pub origins: Vec<[f32; 3]>,
    pub directions: Vec<[f32; 3]>,
    pub near: f32,
    pub far: f32,
    pub width: usize,
    pub height: usize,
}

impl RayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Pixel-centered pinhole rays looking at the origin.
///
/// Near/far default to `radius -/+ 1.3`, bracketing the unit-ish scene box.
/// At polar 0 or 180 the +Z up vector degenerates; a fixed +X up is used
/// instead so roll stays defined.
pub fn camera_rays(pose: &CameraPose) -> Result<RayBatch> {
    camera_rays_with_range(pose, pose.radius - 1.3, pose.radius + 1.3)
}

pub fn camera_rays_with_range(pose: &CameraPose, near: f64, far: f64) -> Result<RayBatch> {
    pose.validate()?;
    if !(near < far) {
        return Err(Error::invalid(format!("near {near} must be < far {far}")));
    }
    let eye = pose.position();
    let forward = normalize([-eye[0], -eye[1], -eye[2]]);
    let sin_polar = pose.polar_deg.to_radians().sin();
    let up_hint = if sin_polar.abs() < 1e-9 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
    let right = normalize(cross(forward, up_hint));
    let up = cross(right, forward);

    let n = pose.image_size;
    let tan_half = (pose.fov_y_deg.to_radians() * 0.5).tan();
    let mut origins = Vec::with_capacity(n * n);
    let mut directions = Vec::with_capacity(n * n);
    let origin = [eye[0] as f32, eye[1] as f32, eye[2] as f32];
    for row in 0..n {
        // Row 0 is the top of the image.
        let ndc_y = 1.0 - (row as f64 + 0.5) / n as f64 * 2.0;
        for col in 0..n {
            let ndc_x = (col as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            let sx = ndc_x * tan_half;
            let sy = ndc_y * tan_half;
            let dir = normalize([
                forward[0] + sx * right[0] + sy * up[0],
                forward[1] + sx * right[1] + sy * up[1],
                forward[2] + sx * right[2] + sy * up[2],
            ]);
            origins.push(origin);
            directions.push([dir[0] as f32, dir[1] as f32, dir[2] as f32]);
        }
    }
    Ok(RayBatch { origins, directions, near: near as f32, far: far as f32, width: n, height: n })
}
