//! Volumetric velocity reconstruction from screen-space observations:
//! mainstream-guided completion of the 2D flow, a physics-based 2D
//! divergence constraint, unprojection to world space, the near-wall
//! velocity profile, and the constrained volumetric projection.

use nalgebra::{Matrix2, Matrix4, Vector2, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::field::{Field3, Raster};
use crate::grid::SimGrid;

/// Per-frame screen-space observation. `flow` is the NDC displacement per
/// frame, `depth` the camera-space depth in meters.
#[derive(Debug, Clone)]
pub struct ScreenObservation {
    pub flow: Raster<Vector2<f64>>,
    pub depth: Raster<f64>,
    pub fluid_mask: Raster<bool>,
    /// Pixels where the incoming 2D flow is trusted.
    pub detected_mask: Raster<bool>,
    /// Camera-to-clip projection matrix.
    pub proj: Matrix4<f64>,
    /// World-to-camera matrix.
    pub world_to_cam: Matrix4<f64>,
    /// Post-projection screen scaling / translation applied during image
    /// preprocessing (identity when none).
    pub screen_scale: Vector2<f64>,
    pub screen_offset: Vector2<f64>,
    /// Seconds per video frame.
    pub frame_dt: f64,
}

impl ScreenObservation {
    pub fn validate(&self) -> Result<()> {
        let dims = (self.flow.height(), self.flow.width());
        for ok in [
            self.depth.same_dims(&self.flow),
            self.fluid_mask.same_dims(&self.flow),
            self.detected_mask.same_dims(&self.flow),
        ] {
            if !ok {
                return Err(Error::RasterMismatch {
                    expected: dims,
                    got: (self.depth.height(), self.depth.width()),
                });
            }
        }
        if self.frame_dt <= 0.0 {
            return Err(Error::InvalidArgument(format!("frame_dt must be positive, got {}", self.frame_dt)));
        }
        for y in 0..self.flow.height() {
            for x in 0..self.flow.width() {
                if self.detected_mask[(y, x)] && !self.fluid_mask[(y, x)] {
                    return Err(Error::InvalidArgument(format!(
                        "detected mask exceeds fluid mask at pixel ({y},{x})"
                    )));
                }
                if self.fluid_mask[(y, x)] && self.depth[(y, x)] <= 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "non-positive depth inside fluid mask at pixel ({y},{x})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// NDC coordinate of a pixel center (u right, v down).
    pub fn pixel_ndc(&self, y: usize, x: usize) -> Vector2<f64> {
        Vector2::new(
            2.0 * (x as f64 + 0.5) / self.flow.width() as f64 - 1.0,
            2.0 * (y as f64 + 0.5) / self.flow.height() as f64 - 1.0,
        )
    }
}

/// Dominant flow direction for undetected regions.
#[derive(Debug, Clone)]
pub enum MainstreamDirection {
    Global(Vector2<f64>),
    PerPixel(Raster<Vector2<f64>>),
}

#[derive(Debug, Clone)]
pub struct MainstreamSpec {
    pub direction: MainstreamDirection,
    /// Neighborhood radius in pixels.
    pub neighborhood_radius: usize,
    /// Gaussian falloff of the distance weight, in pixels.
    pub weight_sigma: f64,
}

impl MainstreamSpec {
    pub fn global(direction: Vector2<f64>) -> Result<Self> {
        let n = direction.norm();
        if n == 0.0 {
            return Err(Error::InvalidArgument("mainstream direction cannot be zero".into()));
        }
        Ok(Self {
            direction: MainstreamDirection::Global(direction / n),
            neighborhood_radius: 8,
            weight_sigma: 3.0,
        })
    }

    fn direction_at(&self, y: usize, x: usize) -> Vector2<f64> {
        match &self.direction {
            MainstreamDirection::Global(d) => *d,
            MainstreamDirection::PerPixel(r) => r[(y, x)],
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct InterpolateReport {
    pub filled: usize,
    /// Pixels with no usable neighborhood, filled from the mainstream
    /// direction and the median detected speed.
    pub fallback_filled: usize,
}

/// Fill undetected fluid pixels from detected neighbors, weighted by
/// distance and by the cosine between the mainstream direction and each
/// neighbor's normalized velocity (clamped at zero). Detected pixels are
/// never modified.
pub fn mainstream_interpolate(
    vel: &Raster<Vector3<f64>>,
    fluid: &Raster<bool>,
    detected: &Raster<bool>,
    spec: &MainstreamSpec,
) -> Result<(Raster<Vector3<f64>>, InterpolateReport)> {
    if !vel.same_dims(fluid) || !vel.same_dims(detected) {
        return Err(Error::RasterMismatch {
            expected: (vel.height(), vel.width()),
            got: (fluid.height(), fluid.width()),
        });
    }
    let mut out = vel.clone();
    let mut report = InterpolateReport::default();

    // Median detected speed for the fallback fill.
    let mut speeds: Vec<f64> = Vec::new();
    for y in 0..vel.height() {
        for x in 0..vel.width() {
            if detected[(y, x)] {
                speeds.push(vel[(y, x)].norm());
            }
        }
    }
    speeds.sort_by(|a, b| a.total_cmp(b));
    let median_speed = if speeds.is_empty() { 0.0 } else { speeds[speeds.len() / 2] };

    let r = spec.neighborhood_radius as i64;
    let inv_two_sigma2 = 1.0 / (2.0 * spec.weight_sigma * spec.weight_sigma);

    for y in 0..vel.height() {
        for x in 0..vel.width() {
            if !fluid[(y, x)] || detected[(y, x)] {
                continue;
            }
            let n2 = spec.direction_at(y, x);
            let n3 = Vector3::new(n2.x, n2.y, 0.0);
            let mut wsum = 0.0;
            let mut acc = Vector3::zeros();
            for dy in -r..=r {
                for dx in -r..=r {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if !vel.in_bounds(ny, nx) || dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let (ny, nx) = (ny as usize, nx as usize);
                    if !detected[(ny, nx)] {
                        continue;
                    }
                    let vi = vel[(ny, nx)];
                    let speed = vi.norm();
                    if speed == 0.0 {
                        continue;
                    }
                    let cosine = (n3.dot(&vi) / speed).max(0.0);
                    if cosine == 0.0 {
                        continue;
                    }
                    let dist2 = (dy * dy + dx * dx) as f64;
                    let w = (-dist2 * inv_two_sigma2).exp() * cosine;
                    wsum += w;
                    acc += vi * w;
                }
            }
            if wsum > 1e-300 {
                out[(y, x)] = acc / wsum;
                report.filled += 1;
            } else {
                out[(y, x)] = n3 * median_speed;
                report.fallback_filled += 1;
            }
        }
    }
    Ok((out, report))
}

/// Right-hand side of the 2D divergence constraint at a pixel:
/// -(1/z)(u dvz/du + v dvz/dv + 2 vz).
pub fn constraint_rhs(
    vz: &Raster<f64>,
    depth: &Raster<f64>,
    fluid: &Raster<bool>,
    y: usize,
    x: usize,
    du: f64,
    dv: f64,
    ndc: Vector2<f64>,
) -> f64 {
    let z = depth[(y, x)];
    let dvz_du = masked_derivative(vz, fluid, y as i64, x as i64, 0, du);
    let dvz_dv = masked_derivative(vz, fluid, y as i64, x as i64, 1, dv);
    -(ndc.x * dvz_du + ndc.y * dvz_dv + 2.0 * vz[(y, x)]) / z
}

/// Central difference with one-sided fallback, restricted to the mask.
/// `axis` 0 differentiates along x (u), 1 along y (v).
fn masked_derivative(f: &Raster<f64>, mask: &Raster<bool>, y: i64, x: i64, axis: usize, h: f64) -> f64 {
    let (hy, hx) = if axis == 0 { (0i64, 1i64) } else { (1, 0) };
    let has = |yy: i64, xx: i64| mask.in_bounds(yy, xx) && mask[(yy as usize, xx as usize)];
    let lo = has(y - hy, x - hx);
    let hi = has(y + hy, x + hx);
    let at = |yy: i64, xx: i64| f[(yy as usize, xx as usize)];
    match (lo, hi) {
        (true, true) => (at(y + hy, x + hx) - at(y - hy, x - hx)) / (2.0 * h),
        (false, true) => (at(y + hy, x + hx) - at(y, x)) / h,
        (true, false) => (at(y, x) - at(y - hy, x - hx)) / h,
        (false, false) => 0.0,
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Projection2dReport {
    pub initial_residual: f64,
    pub final_residual: f64,
    pub sweeps: usize,
    pub converged: bool,
}

/// Discrete 2D divergence of the planar velocity at a fluid pixel.
fn div2d(vel: &Raster<Vector2<f64>>, fluid: &Raster<bool>, y: usize, x: usize, du: f64, dv: f64) -> f64 {
    let taps = div2d_taps(fluid, y, x, du, dv);
    let mut sum = 0.0;
    for (py, px, comp, w) in taps {
        sum += vel[(py, px)][comp] * w;
    }
    sum
}

/// Stencil taps (pixel, component, weight) of the discrete 2D divergence.
fn div2d_taps(fluid: &Raster<bool>, y: usize, x: usize, du: f64, dv: f64) -> Vec<(usize, usize, usize, f64)> {
    let mut taps = Vec::with_capacity(4);
    let has = |yy: i64, xx: i64| fluid.in_bounds(yy, xx) && fluid[(yy as usize, xx as usize)];
    for (axis, h) in [(0usize, du), (1usize, dv)] {
        let (hy, hx) = if axis == 0 { (0i64, 1i64) } else { (1, 0) };
        let (yy, xx) = (y as i64, x as i64);
        let lo = has(yy - hy, xx - hx);
        let hi = has(yy + hy, xx + hx);
        match (lo, hi) {
            (true, true) => {
                taps.push(((yy + hy) as usize, (xx + hx) as usize, axis, 1.0 / (2.0 * h)));
                taps.push(((yy - hy) as usize, (xx - hx) as usize, axis, -1.0 / (2.0 * h)));
            }
            (false, true) => {
                taps.push(((yy + hy) as usize, (xx + hx) as usize, axis, 1.0 / h));
                taps.push((y, x, axis, -1.0 / h));
            }
            (true, false) => {
                taps.push((y, x, axis, 1.0 / h));
                taps.push(((yy - hy) as usize, (xx - hx) as usize, axis, -1.0 / h));
            }
            (false, false) => {}
        }
    }
    taps
}

/// Project the planar velocity toward the 2D divergence constraint by
/// Gauss-Seidel constraint relaxation, modifying only pixels in
/// `fluid AND NOT detected` (the completion region). Returns the updated
/// field and the residual history over that region.
#[allow(clippy::too_many_arguments)]
pub fn project_2d_constraint(
    vel2d: &Raster<Vector2<f64>>,
    vz: &Raster<f64>,
    depth: &Raster<f64>,
    fluid: &Raster<bool>,
    detected: &Raster<bool>,
    iters: usize,
    relaxation: f64,
    pixel_ndc: impl Fn(usize, usize) -> Vector2<f64>,
) -> Result<(Raster<Vector2<f64>>, Projection2dReport)> {
    if !vel2d.same_dims(vz) || !vel2d.same_dims(depth) || !vel2d.same_dims(fluid) || !vel2d.same_dims(detected) {
        return Err(Error::RasterMismatch {
            expected: (vel2d.height(), vel2d.width()),
            got: (vz.height(), vz.width()),
        });
    }
    let (h, w) = (vel2d.height(), vel2d.width());
    let du = 2.0 / w as f64;
    let dv = 2.0 / h as f64;

    // Precompute targets and the free-pixel set.
    let mut rhs = Raster::filled(h, w, 0.0);
    let mut free = Raster::filled(h, w, false);
    for y in 0..h {
        for x in 0..w {
            if fluid[(y, x)] {
                rhs[(y, x)] = constraint_rhs(vz, depth, fluid, y, x, du, dv, pixel_ndc(y, x));
                free[(y, x)] = !detected[(y, x)];
            }
        }
    }

    let residual = |vel: &Raster<Vector2<f64>>| -> f64 {
        let mut worst = 0.0_f64;
        for y in 0..h {
            for x in 0..w {
                if free[(y, x)] {
                    worst = worst.max((div2d(vel, fluid, y, x, du, dv) - rhs[(y, x)]).abs());
                }
            }
        }
        worst
    };

    let mut vel = vel2d.clone();
    let initial = residual(&vel);
    let mut best = vel.clone();
    let mut best_res = initial;
    let eps = 1e-12;
    let mut sweeps = 0;

    for _ in 0..iters {
        sweeps += 1;
        for y in 0..h {
            for x in 0..w {
                if !fluid[(y, x)] {
                    continue;
                }
                let c = div2d(&vel, fluid, y, x, du, dv) - rhs[(y, x)];
                if c == 0.0 {
                    continue;
                }
                let taps = div2d_taps(fluid, y, x, du, dv);
                let mut norm2 = 0.0;
                for &(py, px, _, wgt) in &taps {
                    if free[(py, px)] {
                        norm2 += wgt * wgt;
                    }
                }
                if norm2 == 0.0 {
                    continue;
                }
                let lambda = -relaxation * c / (norm2 + eps);
                for &(py, px, comp, wgt) in &taps {
                    if free[(py, px)] {
                        vel[(py, px)][comp] += lambda * wgt;
                    }
                }
            }
        }
        let r = residual(&vel);
        if r < best_res {
            best_res = r;
            best = vel.clone();
        }
        if initial > 0.0 && r <= initial * 0.1 {
            break;
        }
    }

    let converged = initial == 0.0 || best_res <= initial * 0.1;
    Ok((
        best,
        Projection2dReport {
            initial_residual: initial,
            final_residual: best_res,
            sweeps,
            converged,
        },
    ))
}

/// Invert screen position + camera depth to a world point.
pub fn unproject_point(obs: &ScreenObservation, screen: Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    let ndc = Vector2::new(
        (screen.x - obs.screen_offset.x) / obs.screen_scale.x,
        (screen.y - obs.screen_offset.y) / obs.screen_scale.y,
    );
    let m = obs.proj;
    // Solve the 2x2 system for the camera-space x, y at the given depth.
    let a = Matrix2::new(
        m[(0, 0)] - ndc.x * m[(3, 0)],
        m[(0, 1)] - ndc.x * m[(3, 1)],
        m[(1, 0)] - ndc.y * m[(3, 0)],
        m[(1, 1)] - ndc.y * m[(3, 1)],
    );
    let b = Vector2::new(
        ndc.x * (m[(3, 2)] * depth + m[(3, 3)]) - (m[(0, 2)] * depth + m[(0, 3)]),
        ndc.y * (m[(3, 2)] * depth + m[(3, 3)]) - (m[(1, 2)] * depth + m[(1, 3)]),
    );
    let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
    if det.abs() < 1e-14 {
        return Err(Error::SingularTransform("projection system is singular at this pixel".into()));
    }
    let cam_xy = a.try_inverse().unwrap() * b;
    let cam = Vector4::new(cam_xy.x, cam_xy.y, depth, 1.0);
    let inv_w = obs
        .world_to_cam
        .try_inverse()
        .ok_or_else(|| Error::SingularTransform("world-to-camera matrix is not invertible".into()))?;
    let world = inv_w * cam;
    if world.w.abs() < 1e-14 {
        return Err(Error::SingularTransform("unprojected point at infinity".into()));
    }
    Ok(Vector3::new(world.x / world.w, world.y / world.w, world.z / world.w))
}

/// World-space surface velocity of every fluid pixel: unproject the pixel
/// and its flow-displaced position (with the depth advanced by vz) and
/// divide by the frame time.
pub fn unproject_to_3d(
    vel2d: &Raster<Vector2<f64>>,
    vz: &Raster<f64>,
    obs: &ScreenObservation,
) -> Result<Raster<Option<Vector3<f64>>>> {
    obs.validate()?;
    let mut out = Raster::filled(obs.flow.height(), obs.flow.width(), None);
    for y in 0..obs.flow.height() {
        for x in 0..obs.flow.width() {
            if !obs.fluid_mask[(y, x)] {
                continue;
            }
            let s0 = obs.pixel_ndc(y, x);
            let z0 = obs.depth[(y, x)];
            let s1 = s0 + vel2d[(y, x)];
            let z1 = z0 + vz[(y, x)] * obs.frame_dt;
            let p0 = unproject_point(obs, s0, z0)?;
            let p1 = unproject_point(obs, s1, z1)?;
            out[(y, x)] = Some((p1 - p0) / obs.frame_dt);
        }
    }
    Ok(out)
}

/// Out-of-plane velocity from consecutive depth rasters: depth change at
/// the flow-advected pixel position over the frame time.
pub fn vz_from_depth(
    depth: &Raster<f64>,
    depth_next: &Raster<f64>,
    flow: &Raster<Vector2<f64>>,
    fluid: &Raster<bool>,
    frame_dt: f64,
) -> Raster<f64> {
    let (h, w) = (depth.height(), depth.width());
    let mut out = Raster::filled(h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            if !fluid[(y, x)] {
                continue;
            }
            // NDC displacement to pixel units.
            let px = x as f64 + flow[(y, x)].x * w as f64 / 2.0;
            let py = y as f64 + flow[(y, x)].y * h as f64 / 2.0;
            let xi = px.round().clamp(0.0, (w - 1) as f64) as usize;
            let yi = py.round().clamp(0.0, (h - 1) as f64) as usize;
            out[(y, x)] = (depth_next[(yi, xi)] - depth[(y, x)]) / frame_dt;
        }
    }
    out
}

/// Near-wall boundary layer: thickness and the cubic laminar profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryLayer {
    pub delta: f64,
}

impl BoundaryLayer {
    pub fn new(delta: f64) -> Result<Self> {
        if delta <= 0.0 {
            return Err(Error::InvalidArgument(format!("boundary layer thickness must be positive, got {delta}")));
        }
        Ok(Self { delta })
    }

    /// Liquid default: several cells thick.
    pub fn liquid(dx: f64) -> Self {
        Self { delta: 4.0 * dx }
    }

    /// Gas-like default: sub-cell, nearly no damping.
    pub fn gas(dx: f64) -> Self {
        Self { delta: 0.25 * dx }
    }
}

/// Cubic laminar wall profile: speed at wall distance y given the free
/// stream magnitude, (3/2)(y/d) - (1/2)(y/d)^3 below the layer, free
/// stream above.
pub fn wall_profile(y: f64, layer: BoundaryLayer, v_surface_mag: f64) -> Result<f64> {
    if y < 0.0 {
        return Err(Error::InvalidArgument(format!("wall distance must be non-negative, got {y}")));
    }
    let r = y / layer.delta;
    if r >= 1.0 {
        return Ok(v_surface_mag);
    }
    Ok(v_surface_mag * (1.5 * r - 0.5 * r * r * r))
}

#[derive(Debug, Clone, Copy)]
pub struct VolumetricProjectionReport {
    pub initial_residual: f64,
    pub final_residual: f64,
    pub sweeps: usize,
}

/// Divergence-constraint taps of a fluid cell (flat index, axis, weight);
/// mirrors the grid divergence stencil.
fn div3d_taps(grid: &SimGrid, idx: usize) -> Vec<(usize, usize, f64)> {
    let [i, j, k] = grid.cells.coords(idx);
    let mut taps = Vec::with_capacity(6);
    for axis in 0..3 {
        let (mut lo, mut hi) = ([i as i64, j as i64, k as i64], [i as i64, j as i64, k as i64]);
        lo[axis] -= 1;
        hi[axis] += 1;
        let lo_idx = grid.cells.idx_checked(lo[0], lo[1], lo[2]);
        let hi_idx = grid.cells.idx_checked(hi[0], hi[1], hi[2]);
        match (lo_idx, hi_idx) {
            (Some(l), Some(h)) => {
                taps.push((h, axis, 1.0 / (2.0 * grid.dx)));
                taps.push((l, axis, -1.0 / (2.0 * grid.dx)));
            }
            (None, Some(h)) => {
                taps.push((h, axis, 1.0 / grid.dx));
                taps.push((idx, axis, -1.0 / grid.dx));
            }
            (Some(l), None) => {
                taps.push((idx, axis, 1.0 / grid.dx));
                taps.push((l, axis, -1.0 / grid.dx));
            }
            (None, None) => {}
        }
    }
    taps
}

fn constraint_value(grid: &SimGrid, idx: usize) -> f64 {
    div3d_taps(grid, idx)
        .into_iter()
        .map(|(t, axis, w)| grid.velocity[t][axis] * w)
        .sum()
}

/// Constrained projection toward a divergence-free field: Gauss-Seidel
/// relaxation of per-cell divergence constraints, updating only velocities
/// outside the fixed enclosure. Enclosure cells are never modified.
pub fn volumetric_projection(
    grid: &mut SimGrid,
    enclosure: &Field3<bool>,
    iters: usize,
    epsilon: Option<f64>,
    tol: f64,
) -> Result<VolumetricProjectionReport> {
    if !enclosure.same_dims(&grid.cells) {
        return Err(Error::DimensionMismatch {
            expected: grid.dims,
            got: enclosure.dims(),
        });
    }
    // Relaxation epsilon scaled to the characteristic constraint-gradient
    // magnitude of a fully free stencil.
    let characteristic = 6.0 * (1.0 / (2.0 * grid.dx)).powi(2);
    let eps = epsilon.unwrap_or(1e-6 * characteristic);

    let fluid_cells: Vec<usize> = (0..grid.cell_count()).filter(|&i| grid.cells[i].is_fluid()).collect();

    let max_residual = |g: &SimGrid| -> f64 {
        fluid_cells.iter().map(|&i| constraint_value(g, i).abs()).fold(0.0, f64::max)
    };

    let initial = max_residual(grid);
    let mut sweeps = 0;
    let mut current = initial;
    for _ in 0..iters {
        if current <= tol {
            break;
        }
        sweeps += 1;
        for &idx in &fluid_cells {
            let c = constraint_value(grid, idx);
            if c == 0.0 {
                continue;
            }
            let taps = div3d_taps(grid, idx);
            let mut norm2 = 0.0;
            for &(t, _, w) in &taps {
                if !enclosure[t] {
                    norm2 += w * w;
                }
            }
            if norm2 == 0.0 {
                continue;
            }
            let lambda = -c / (norm2 + eps);
            for &(t, axis, w) in &taps {
                if !enclosure[t] {
                    grid.velocity[t][axis] += lambda * w;
                }
            }
        }
        current = max_residual(grid);
    }

    Ok(VolumetricProjectionReport {
        initial_residual: initial,
        final_residual: current,
        sweeps,
    })
}
