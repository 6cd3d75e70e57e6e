//! Affine particle-in-cell transfers between the particle set and the grid,
//! particle advection with inlet seeding / outlet removal, and deformation
//! tracking for Gaussian covariances.
//!
//! Transfers use the quadratic B-spline kernel (3x3x3 support), so the
//! affine velocity-gradient reconstruction carries the 4/dx^2 constant.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::field::{Field3, ScalarField};
use crate::grid::{CellType, SimGrid};

/// Structure-of-arrays particle storage. All arrays share one length.
#[derive(Debug, Clone, Default)]
pub struct ParticleSet {
    pub position: Vec<Vector3<f64>>,
    pub velocity: Vec<Vector3<f64>>,
    pub mass: Vec<f64>,
    /// Per-particle affine velocity matrix C (1/s).
    pub affine: Vec<Matrix3<f64>>,
    /// Accumulated deformation gradient F.
    pub deformation: Vec<Matrix3<f64>>,
    /// Current covariance A = F A0 F^T.
    pub covariance: Vec<Matrix3<f64>>,
    /// Covariance at particle birth.
    pub covariance0: Vec<Matrix3<f64>>,
    pub opacity: Vec<f64>,
    /// Opaque per-particle color payload, carried through untouched.
    pub color: Vec<[f32; 3]>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.position.is_empty()
    }

    pub fn push(
        &mut self,
        position: Vector3<f64>,
        velocity: Vector3<f64>,
        mass: f64,
        covariance: Matrix3<f64>,
        opacity: f64,
        color: [f32; 3],
    ) {
        self.position.push(position);
        self.velocity.push(velocity);
        self.mass.push(mass);
        self.affine.push(Matrix3::zeros());
        self.deformation.push(Matrix3::identity());
        self.covariance.push(covariance);
        self.covariance0.push(covariance);
        self.opacity.push(opacity);
        self.color.push(color);
    }

    pub fn swap_remove(&mut self, i: usize) {
        self.position.swap_remove(i);
        self.velocity.swap_remove(i);
        self.mass.swap_remove(i);
        self.affine.swap_remove(i);
        self.deformation.swap_remove(i);
        self.covariance.swap_remove(i);
        self.covariance0.swap_remove(i);
        self.opacity.swap_remove(i);
        self.color.swap_remove(i);
    }
}

/// 1D quadratic B-spline weight, support (-1.5, 1.5) in cell units.
#[inline]
pub fn quadratic_bspline_1d(r: f64) -> f64 {
    let a = r.abs();
    if a < 0.5 {
        0.75 - a * a
    } else if a < 1.5 {
        let t = 1.5 - a;
        0.5 * t * t
    } else {
        0.0
    }
}

/// Base cell and per-axis weights of the 3x3x3 stencil around a particle.
///
/// Fails when the stencil would leave the grid (the one-kernel-radius
/// padding precondition of the transfers).
fn kernel_stencil(grid: &SimGrid, index: usize, pos: Vector3<f64>) -> Result<([usize; 3], [[f64; 3]; 3])> {
    let mut base = [0usize; 3];
    let mut weights = [[0.0; 3]; 3];
    for a in 0..3 {
        let xp = (pos[a] - grid.origin[a]) / grid.dx - 0.5;
        let b = xp.round() as i64;
        if b < 1 || b + 1 > grid.dims[a] as i64 - 1 {
            return Err(Error::ParticleOutOfBounds {
                index,
                position: [pos.x, pos.y, pos.z],
            });
        }
        base[a] = b as usize;
        for (o, w) in weights[a].iter_mut().enumerate() {
            *w = quadratic_bspline_1d(b as f64 + o as f64 - 1.0 - xp);
        }
    }
    Ok((base, weights))
}

/// Particle-to-grid transfer of mass-weighted momentum.
///
/// Writes velocity into `grid` and returns the per-cell kernel mass; cells
/// with zero mass get zero velocity and should not be typed FLUID. With
/// `include_affine = false` the affine matrix is treated as zero.
pub fn p2g(particles: &ParticleSet, grid: &mut SimGrid, include_affine: bool) -> Result<ScalarField> {
    let mut momentum = Field3::filled(grid.dims, Vector3::zeros());
    let mut mass = ScalarField::zeros(grid.dims);

    for p in 0..particles.len() {
        let pos = particles.position[p];
        let (base, w) = kernel_stencil(grid, p, pos)?;
        let m = particles.mass[p];
        let vp = particles.velocity[p];
        let cp = particles.affine[p];
        for (oi, &wi) in w[0].iter().enumerate() {
            for (oj, &wj) in w[1].iter().enumerate() {
                for (ok, &wk) in w[2].iter().enumerate() {
                    let weight = wi * wj * wk;
                    if weight == 0.0 {
                        continue;
                    }
                    let cell = [base[0] + oi - 1, base[1] + oj - 1, base[2] + ok - 1];
                    let xi = grid.cell_center(cell[0], cell[1], cell[2]);
                    let mut v = vp;
                    if include_affine {
                        v += cp * (xi - pos);
                    }
                    momentum[cell] += v * (weight * m);
                    mass[grid.velocity.idx(cell[0], cell[1], cell[2])] += weight * m;
                }
            }
        }
    }

    for idx in 0..grid.cell_count() {
        grid.velocity[idx] = if mass[idx] > 0.0 {
            momentum[idx] / mass[idx]
        } else {
            Vector3::zeros()
        };
    }
    Ok(mass)
}

/// Grid-to-particle transfer: velocity plus the affine reconstruction
/// C = (4/dx^2) sum_i w_i v_i (x_i - x_p)^T.
pub fn g2p(grid: &SimGrid, particles: &mut ParticleSet) -> Result<()> {
    let inv_d = 4.0 / (grid.dx * grid.dx);
    for p in 0..particles.len() {
        let pos = particles.position[p];
        let (base, w) = kernel_stencil(grid, p, pos)?;
        let mut v = Vector3::zeros();
        let mut c = Matrix3::zeros();
        for (oi, &wi) in w[0].iter().enumerate() {
            for (oj, &wj) in w[1].iter().enumerate() {
                for (ok, &wk) in w[2].iter().enumerate() {
                    let weight = wi * wj * wk;
                    if weight == 0.0 {
                        continue;
                    }
                    let cell = [base[0] + oi - 1, base[1] + oj - 1, base[2] + ok - 1];
                    let xi = grid.cell_center(cell[0], cell[1], cell[2]);
                    let vi = grid.velocity[[cell[0], cell[1], cell[2]]];
                    v += vi * weight;
                    c += (vi * (xi - pos).transpose()) * weight;
                }
            }
        }
        particles.velocity[p] = v;
        particles.affine[p] = c * inv_d;
    }
    Ok(())
}

/// Inlet particle source: keeps inlet cells populated at a target density.
#[derive(Debug, Clone)]
pub struct InletSeeder {
    /// Particles maintained per inlet cell.
    pub per_cell: usize,
    pub velocity: Vector3<f64>,
    pub mass: f64,
    /// Isotropic radius of seeded covariances.
    pub radius: f64,
    /// Color/opacity donors, sampled by nearest position (typically the
    /// initial-frame particles).
    pub source_positions: Vec<Vector3<f64>>,
    pub source_colors: Vec<[f32; 3]>,
    pub source_opacities: Vec<f64>,
}

impl InletSeeder {
    pub fn from_initial(particles: &ParticleSet, v_in: Vector3<f64>, mass: f64, dx: f64) -> Self {
        Self {
            per_cell: 8,
            velocity: v_in,
            mass,
            radius: dx / 4.0,
            source_positions: particles.position.clone(),
            source_colors: particles.color.clone(),
            source_opacities: particles.opacity.clone(),
        }
    }

    fn nearest_donor(&self, pos: Vector3<f64>) -> Option<usize> {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (i, q) in self.source_positions.iter().enumerate() {
            let d = (q - pos).norm_squared();
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct AdvectStats {
    pub removed: usize,
    pub seeded: usize,
}

/// Explicit Euler advection with outlet removal and inlet seeding.
///
/// Particles are removed once they travel one cell past the outlet plane;
/// at every other boundary they are clamped to the kernel-padded interior.
pub fn advect_particles(
    particles: &mut ParticleSet,
    grid: &SimGrid,
    dt: f64,
    seeder: Option<&InletSeeder>,
) -> Result<AdvectStats> {
    if dt <= 0.0 {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let mut stats = AdvectStats::default();

    let lo = grid.origin + Vector3::repeat(grid.dx);
    let hi = grid.origin
        + Vector3::new(
            grid.dims[0] as f64 - 1.0,
            grid.dims[1] as f64 - 1.0,
            grid.dims[2] as f64 - 1.0,
        ) * grid.dx;

    let mut p = 0;
    while p < particles.len() {
        let next = particles.position[p] + particles.velocity[p] * dt;
        if let Some(outlet) = grid.outlet {
            let axis = outlet.axis;
            let gone = if outlet.high {
                next[axis] > grid.origin[axis] + (grid.dims[axis] as f64 + 1.0) * grid.dx
            } else {
                next[axis] < grid.origin[axis] - grid.dx
            };
            if gone {
                particles.swap_remove(p);
                stats.removed += 1;
                continue;
            }
        }
        let mut clamped = next;
        for a in 0..3 {
            // Leave the outlet axis free up to the removal threshold.
            let is_outlet_axis = grid.outlet.is_some_and(|o| o.axis == a);
            if !is_outlet_axis {
                clamped[a] = clamped[a].clamp(lo[a], hi[a]);
            }
        }
        particles.position[p] = clamped;
        p += 1;
    }

    if let Some(seeder) = seeder {
        stats.seeded = seed_inlet_cells(particles, grid, seeder)?;
    }
    Ok(stats)
}

fn seed_inlet_cells(particles: &mut ParticleSet, grid: &SimGrid, seeder: &InletSeeder) -> Result<usize> {
    let mut count = Field3::filled(grid.dims, 0usize);
    for pos in &particles.position {
        let mut c = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let idx = ((pos[a] - grid.origin[a]) / grid.dx).floor();
            if idx < 0.0 || idx >= grid.dims[a] as f64 {
                inside = false;
                break;
            }
            c[a] = idx as usize;
        }
        if inside {
            count[c] += 1;
        }
    }

    // Deterministic 2x2x2 sub-cell slots.
    let offsets: Vec<Vector3<f64>> = (0..8)
        .map(|s| {
            Vector3::new(
                if s & 1 == 0 { -0.25 } else { 0.25 },
                if s & 2 == 0 { -0.25 } else { 0.25 },
                if s & 4 == 0 { -0.25 } else { 0.25 },
            )
        })
        .collect();

    let mut seeded = 0;
    for idx in 0..grid.cell_count() {
        if grid.cells[idx] != CellType::Inlet {
            continue;
        }
        let [i, j, k] = grid.cells.coords(idx);
        let center = grid.cell_center(i, j, k);
        let have = count[idx];
        for slot in have..seeder.per_cell {
            let pos = center + offsets[slot % 8] * grid.dx;
            let donor = seeder.nearest_donor(pos);
            let (color, opacity) = match donor {
                Some(d) => (seeder.source_colors[d], seeder.source_opacities[d]),
                None => ([0.5, 0.5, 0.5], 1.0),
            };
            let cov = Matrix3::identity() * (seeder.radius * seeder.radius);
            particles.push(pos, seeder.velocity, seeder.mass, cov, opacity, color);
            seeded += 1;
        }
    }
    Ok(seeded)
}

/// Deformation update F <- (I + dt C) F and covariance A = F A0 F^T,
/// re-symmetrized.
pub fn update_deformation(particles: &mut ParticleSet, dt: f64) -> Result<()> {
    for p in 0..particles.len() {
        let c = particles.affine[p];
        if !c.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("affine matrix of particle {p}")));
        }
        let f = (Matrix3::identity() + c * dt) * particles.deformation[p];
        let a = f * particles.covariance0[p] * f.transpose();
        particles.deformation[p] = f;
        particles.covariance[p] = (a + a.transpose()) * 0.5;
    }
    Ok(())
}
