//! Tri-grid and pyramid tri-grid storage with the differentiable feature
//! query.
//!
//! A tri-grid holds three axis-aligned stacks of 2D feature planes. A 3D
//! point is projected onto each plane, interpolated bilinearly in-plane and
//! linearly across the small depth dimension, and the three per-plane feature
//! vectors are summed. A pyramid stacks tri-grids of strictly increasing
//! power-of-two resolutions whose queried features are again summed.
//!
//! Scene coordinates live in `[-1, 1]^3` and map affinely to texel centers;
//! out-of-range coordinates are clamped to the boundary so the field is
//! continuous at the bounding box. Depth layers sit at evenly spaced
//! normal-axis coordinates from -1 to 1 (`{-1, 0, 1}` for the usual 3).

use crate::error::{Error, Result};
use crate::real::Real;

/// Number of feature planes (XY, XZ, YZ).
pub const PLANES: usize = 3;

/// Plane projection convention:
/// plane 0 (XY): col <- x, row <- y, normal <- z
/// plane 1 (XZ): col <- x, row <- z, normal <- y
/// plane 2 (YZ): col <- y, row <- z, normal <- x
#[inline]
fn plane_coords<R: Real>(plane: usize, p: [R; 3]) -> (R, R, R) {
    match plane {
        0 => (p[0], p[1], p[2]),
        1 => (p[0], p[2], p[1]),
        _ => (p[1], p[2], p[0]),
    }
}

/// A point in normalized scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point3 {
    pub x: f32,
    pub y: f32,
    pub z: f32,
}

impl Point3 {
    pub fn new(x: f32, y: f32, z: f32) -> Self {
        Point3 { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn as_array(&self) -> [f32; 3] {
        [self.x, self.y, self.z]
    }
}

/// A single multi-plane feature grid.
///
/// `values` is indexed `[plane][layer][channel][row][col]`, 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct TriGrid {
    resolution: usize,
    depth_layers: usize,
    channels: usize,
    values: Vec<f32>,
}

impl TriGrid {
    pub fn zeros(resolution: usize, depth_layers: usize, channels: usize) -> Result<Self> {
        Self::validate_shape(resolution, depth_layers, channels)?;
        let len = PLANES * depth_layers * channels * resolution * resolution;
        Ok(TriGrid { resolution, depth_layers, channels, values: vec![0.0; len] })
    }

    pub fn filled(resolution: usize, depth_layers: usize, channels: usize, v: f32) -> Result<Self> {
        let mut g = Self::zeros(resolution, depth_layers, channels)?;
        g.values.fill(v);
        Ok(g)
    }

    pub fn from_values(
        resolution: usize,
        depth_layers: usize,
        channels: usize,
        values: Vec<f32>,
    ) -> Result<Self> {
        Self::validate_shape(resolution, depth_layers, channels)?;
        let expect = PLANES * depth_layers * channels * resolution * resolution;
        if values.len() != expect {
            return Err(Error::shape(format!(
                "tri-grid value count {} != {expect} (resolution {resolution}, depth {depth_layers}, channels {channels})",
                values.len()
            )));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("tri-grid values must be finite"));
        }
        Ok(TriGrid { resolution, depth_layers, channels, values })
    }

    fn validate_shape(resolution: usize, depth_layers: usize, channels: usize) -> Result<()> {
        if resolution < 2 || !resolution.is_power_of_two() {
            return Err(Error::invalid(format!(
                "tri-grid resolution must be a power of two >= 2, got {resolution}"
            )));
        }
        if depth_layers == 0 || channels == 0 {
            return Err(Error::invalid("tri-grid needs at least 1 depth layer and 1 channel"));
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn depth_layers(&self) -> usize {
        self.depth_layers
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    #[inline]
    pub fn index(&self, plane: usize, layer: usize, channel: usize, row: usize, col: usize) -> usize {
        debug_assert!(plane < PLANES && layer < self.depth_layers && channel < self.channels);
        debug_assert!(row < self.resolution && col < self.resolution);
        (((plane * self.depth_layers + layer) * self.channels + channel) * self.resolution + row)
            * self.resolution
            + col
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Ordered tri-grids of strictly increasing resolution sharing channel and
/// depth counts. These values are the optimizable scene parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidTriGrid {
    levels: Vec<TriGrid>,
}

/// Shape snapshot of a pyramid, enough to allocate matching gradient buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct PyramidShape {
    pub resolutions: Vec<usize>,
    pub depth_layers: usize,
    pub channels: usize,
}

impl PyramidShape {
    pub fn level_len(&self, level: usize) -> usize {
        let r = self.resolutions[level];
        PLANES * self.depth_layers * self.channels * r * r
    }
}

impl PyramidTriGrid {
    pub fn zeros(resolutions: &[usize], depth_layers: usize, channels: usize) -> Result<Self> {
        let levels = resolutions
            .iter()
            .map(|&r| TriGrid::zeros(r, depth_layers, channels))
            .collect::<Result<Vec<_>>>()?;
        Self::from_levels(levels)
    }

    pub fn from_levels(levels: Vec<TriGrid>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::invalid("pyramid needs at least one level"));
        }
        let (c, d) = (levels[0].channels, levels[0].depth_layers);
        for pair in levels.windows(2) {
            if pair[1].resolution <= pair[0].resolution {
                return Err(Error::invalid(format!(
                    "pyramid resolutions must strictly increase, got {} then {}",
                    pair[0].resolution, pair[1].resolution
                )));
            }
        }
        for l in &levels {
            if l.channels != c || l.depth_layers != d {
                return Err(Error::invalid(
                    "pyramid levels must share channel and depth-layer counts",
                ));
            }
        }
        Ok(PyramidTriGrid { levels })
    }

    pub fn levels(&self) -> &[TriGrid] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [TriGrid] {
        &mut self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels[0].channels
    }

    pub fn depth_layers(&self) -> usize {
        self.levels[0].depth_layers
    }

    pub fn shape(&self) -> PyramidShape {
        PyramidShape {
            resolutions: self.levels.iter().map(|l| l.resolution).collect(),
            depth_layers: self.depth_layers(),
            channels: self.channels(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.levels.iter().map(|l| l.values.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().all(|l| l.is_finite())
    }

    /// Element-wise sum of two pyramids of identical shape.
    pub fn add(&self, other: &PyramidTriGrid) -> Result<PyramidTriGrid> {
        if self.shape() != other.shape() {
            return Err(Error::shape("pyramid shapes differ in add"));
        }
        let mut out = self.clone();
        for (lo, lr) in out.levels.iter_mut().zip(&other.levels) {
            for (a, b) in lo.values.iter_mut().zip(&lr.values) {
                *a += *b;
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, factor: f32) {
        for l in &mut self.levels {
            for v in &mut l.values {
                *v *= factor;
            }
        }
    }
}

/// Interpolation along one axis: base index and fractional weight for the
/// `[i0, i0+1]` pair. `count == 1` degenerates to a single cell.
#[inline]
fn axis_lerp<R: Real>(coord: R, count: usize) -> (usize, R) {
    if count == 1 {
        return (0, R::zero());
    }
    let one = R::one();
    let c = coord.max(-one).min(one);
    let t = (c + one) * R::from_f64(0.5) * R::from_f64((count - 1) as f64);
    let mut i0 = t.floor().as_f64() as usize;
    if i0 > count - 2 {
        i0 = count - 2;
    }
    let frac = t - R::from_f64(i0 as f64);
    (i0, frac)
}

/// Sampling footprint of one plane: up to 2 depth layers x 4 texels with
/// weights. Forward query, sparse gradient, and dense gradient accumulation
/// all walk exactly this structure, which keeps the adjoint consistent by
/// construction.
pub(crate) struct PlaneFootprint<R> {
    pub plane: usize,
    pub layers: [(usize, R); 2],
    pub n_layers: usize,
    pub texels: [(usize, usize, R); 4],
}

pub(crate) fn footprint<R: Real>(
    resolution: usize,
    depth_layers: usize,
    p: [R; 3],
) -> [PlaneFootprint<R>; 3] {
    let one = R::one();
    std::array::from_fn(|plane| {
        let (u, v, n) = plane_coords(plane, p);
        let (c0, fc) = axis_lerp(u, resolution);
        let (r0, fr) = axis_lerp(v, resolution);
        let texels = [
            (r0, c0, (one - fr) * (one - fc)),
            (r0, c0 + 1, (one - fr) * fc),
            (r0 + 1, c0, fr * (one - fc)),
            (r0 + 1, c0 + 1, fr * fc),
        ];
        let (layers, n_layers) = if depth_layers == 1 {
            ([(0, one), (0, R::zero())], 1)
        } else {
            let (l0, fl) = axis_lerp(n, depth_layers);
            ([(l0, one - fl), (l0 + 1, fl)], 2)
        };
        PlaneFootprint { plane, layers, n_layers, texels }
    })
}

fn check_point(p: Point3) -> Result<()> {
    if !p.is_finite() {
        return Err(Error::invalid(format!("query point must be finite, got {p:?}")));
    }
    Ok(())
}

/// Generic-precision tri-grid query. `out` accumulates `channels` values.
pub(crate) fn accumulate_trigrid_query<R: Real>(grid: &TriGrid, p: [R; 3], out: &mut [R]) {
    debug_assert_eq!(out.len(), grid.channels);
    let res = grid.resolution;
    for fp in footprint(res, grid.depth_layers, p) {
        for (layer, lw) in fp.layers.iter().take(fp.n_layers) {
            let plane_base = (fp.plane * grid.depth_layers + layer) * grid.channels;
            for (row, col, tw) in fp.texels.iter() {
                let w = *lw * *tw;
                let cell = row * res + col;
                for ch in 0..grid.channels {
                    let idx = (plane_base + ch) * res * res + cell;
                    out[ch] += w * R::from_f32(grid.values[idx]);
                }
            }
        }
    }
}

/// Queries a single tri-grid at `p`, returning one feature per channel:
/// bilinear in-plane, linear across depth layers, summed over the 3 planes.
pub fn query_trigrid(grid: &TriGrid, p: Point3) -> Result<Vec<f32>> {
    check_point(p)?;
    let mut out = vec![0.0f32; grid.channels];
    accumulate_trigrid_query(grid, p.as_array(), &mut out);
    Ok(out)
}

pub(crate) fn accumulate_pyramid_query<R: Real>(pyr: &PyramidTriGrid, p: [R; 3], out: &mut [R]) {
    for level in &pyr.levels {
        accumulate_trigrid_query(level, p, out);
    }
}

/// Channel-wise sum of [`query_trigrid`] over all pyramid levels.
pub fn query_pyramid(pyr: &PyramidTriGrid, p: Point3) -> Result<Vec<f32>> {
    check_point(p)?;
    let mut out = vec![0.0f32; pyr.channels()];
    accumulate_pyramid_query(pyr, p.as_array(), &mut out);
    Ok(out)
}

/// [`query_pyramid`] in the 64-bit accumulation mode. Values stay 32-bit in
/// storage; interpolation weights and sums are carried in f64. Used by
/// finite-difference and adjoint-consistency tests, where 32-bit cancellation
/// would dominate the quantity under test.
pub fn query_pyramid64(pyr: &PyramidTriGrid, p: Point3) -> Result<Vec<f64>> {
    check_point(p)?;
    let mut out = vec![0.0f64; pyr.channels()];
    accumulate_pyramid_query(pyr, [p.x as f64, p.y as f64, p.z as f64], &mut out);
    Ok(out)
}

/// One nonzero entry of a sparse query gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparseGradEntry {
    pub level: usize,
    pub index: usize,
    pub value: f32,
}

/// Dense per-level gradient buffer matching a [`PyramidShape`].
#[derive(Debug, Clone)]
pub struct PyramidGrad<R> {
    pub levels: Vec<Vec<R>>,
}

impl<R: Real> PyramidGrad<R> {
    pub fn zeros(shape: &PyramidShape) -> Self {
        let levels =
            (0..shape.resolutions.len()).map(|l| vec![R::zero(); shape.level_len(l)]).collect();
        PyramidGrad { levels }
    }

    pub fn add_assign(&mut self, other: &PyramidGrad<R>) {
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.levels.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.levels
            .iter()
            .flatten()
            .map(|v| v.as_f64().abs())
            .fold(0.0, f64::max)
    }

    pub fn to_f32(&self) -> PyramidGrad<f32> {
        PyramidGrad {
            levels: self
                .levels
                .iter()
                .map(|l| l.iter().map(|v| v.as_f32()).collect())
                .collect(),
        }
    }
}

/// Scatter `dot(upstream, d query/d values)` for one point into a dense
/// gradient buffer. Only the shape is needed; the adjoint of a linear query
/// does not read the stored values.
pub(crate) fn accumulate_query_grad<R: Real>(
    shape: &PyramidShape,
    p: [R; 3],
    upstream: &[R],
    grad: &mut PyramidGrad<R>,
) {
    for (li, &res) in shape.resolutions.iter().enumerate() {
        let buf = &mut grad.levels[li];
        for fp in footprint(res, shape.depth_layers, p) {
            for (layer, lw) in fp.layers.iter().take(fp.n_layers) {
                let plane_base = (fp.plane * shape.depth_layers + layer) * shape.channels;
                for (row, col, tw) in fp.texels.iter() {
                    let w = *lw * *tw;
                    let cell = row * res + col;
                    for ch in 0..shape.channels {
                        let idx = (plane_base + ch) * res * res + cell;
                        buf[idx] += w * upstream[ch];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`query_pyramid`]: the gradient of `<upstream, query(pyr, p)>`
/// with respect to the stored grid values, as sparse nonzero entries.
///
/// At most `3 planes x 2 layers x 4 texels x levels` entries per channel;
/// coincident texels (clamped footprints) are merged.
pub fn query_pyramid_grad(
    pyr: &PyramidTriGrid,
    p: Point3,
    upstream: &[f32],
) -> Result<Vec<SparseGradEntry>> {
    check_point(p)?;
    if upstream.len() != pyr.channels() {
        return Err(Error::shape(format!(
            "upstream length {} != channels {}",
            upstream.len(),
            pyr.channels()
        )));
    }
    if !upstream.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("upstream gradient must be finite"));
    }
    let mut entries = Vec::new();
    for (li, level) in pyr.levels.iter().enumerate() {
        let res = level.resolution;
        // Weight per (plane, layer, cell); merged so duplicate texels from
        // clamped footprints appear once.
        let mut cells: Vec<(usize, f32)> = Vec::with_capacity(24);
        for fp in footprint::<f32>(res, level.depth_layers, p.as_array()) {
            for (layer, lw) in fp.layers.iter().take(fp.n_layers) {
                for (row, col, tw) in fp.texels.iter() {
                    let w = lw * tw;
                    let key = (fp.plane * level.depth_layers + layer) * res * res + row * res + col;
                    match cells.iter_mut().find(|(k, _)| *k == key) {
                        Some((_, acc)) => *acc += w,
                        None => cells.push((key, w)),
                    }
                }
            }
        }
        for (key, w) in cells {
            if w == 0.0 {
                continue;
            }
            let plane_layer = key / (res * res);
            let cell = key % (res * res);
            for ch in 0..level.channels {
                let g = w * upstream[ch];
                if g != 0.0 {
                    let index = (plane_layer * level.channels + ch) * res * res + cell;
                    entries.push(SparseGradEntry { level: li, index, value: g });
                }
            }
        }
    }
    Ok(entries)
}
