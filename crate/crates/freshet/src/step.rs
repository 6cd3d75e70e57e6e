//! One grid time step of the split incompressible update:
//! boundary conditions -> body force -> divergence -> pressure solve ->
//! pressure-gradient subtraction -> viscosity -> semi-Lagrangian convection
//! -> boundary conditions.
//!
//! Two interchangeable pressure solvers are provided: the reference Jacobi
//! iteration and a recurrent 3x3x3 stencil convolution whose analytic
//! weights reproduce Jacobi exactly and whose weights can be fitted from
//! Jacobi-generated samples.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::{trilinear, ScalarField, VectorField};
use crate::grid::{apply_boundary_conditions, divergence, CellField, CellType, SimGrid};
use crate::params::SimParams;

pub type Stencil27 = [[[f64; 3]; 3]; 3];

/// 3x3x3 convolution kernel plus the coefficient coupling divergence into
/// the recurrent pressure update.
#[derive(Debug, Clone, PartialEq)]
pub struct PressureKernel {
    pub stencil: Stencil27,
    pub source_coeff: f64,
}

impl PressureKernel {
    /// The kernel reproducing one Jacobi iteration: face weights 1/6,
    /// everything else 0, source -dx^2 rho / (6 dt).
    pub fn analytic_jacobi(rho: f64, dt: f64, dx: f64) -> Self {
        let mut stencil = [[[0.0; 3]; 3]; 3];
        stencil[0][1][1] = 1.0 / 6.0;
        stencil[2][1][1] = 1.0 / 6.0;
        stencil[1][0][1] = 1.0 / 6.0;
        stencil[1][2][1] = 1.0 / 6.0;
        stencil[1][1][0] = 1.0 / 6.0;
        stencil[1][1][2] = 1.0 / 6.0;
        Self {
            stencil,
            source_coeff: -dx * dx * rho / (6.0 * dt),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.source_coeff.is_finite()
            && self
                .stencil
                .iter()
                .flatten()
                .flatten()
                .all(|w| w.is_finite())
    }
}

/// Frozen stencil solver installed into a step configuration. The source
/// gain is dimensionless (analytic value -1/6) so the divergence coupling
/// rescales with the current rho, dt and dx during optimization.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentSolver {
    pub stencil: Stencil27,
    pub source_gain: f64,
}

impl RecurrentSolver {
    pub fn analytic() -> Self {
        let k = PressureKernel::analytic_jacobi(1.0, 1.0, 1.0);
        Self {
            stencil: k.stencil,
            source_gain: -1.0 / 6.0,
        }
    }

    /// Freeze a fitted kernel, recording the geometry it was fitted at so
    /// the source coupling stays dimensionless.
    pub fn from_kernel(kernel: &PressureKernel, rho: f64, dt: f64, dx: f64) -> Self {
        Self {
            stencil: kernel.stencil,
            source_gain: kernel.source_coeff * dt / (dx * dx * rho),
        }
    }

    pub fn kernel_for(&self, rho: f64, dt: f64, dx: f64) -> PressureKernel {
        PressureKernel {
            stencil: self.stencil,
            source_coeff: self.source_gain * dx * dx * rho / dt,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SolverKind {
    Jacobi,
    StencilRecurrent(RecurrentSolver),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViscosityScheme {
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvectionScheme {
    SemiLagrangian,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepConfig {
    pub pressure_iters: usize,
    pub viscosity_scheme: ViscosityScheme,
    pub convection_scheme: ConvectionScheme,
    pub solver: SolverKind,
}

impl Default for StepConfig {
    fn default() -> Self {
        Self {
            pressure_iters: 100,
            viscosity_scheme: ViscosityScheme::Explicit,
            convection_scheme: ConvectionScheme::SemiLagrangian,
            solver: SolverKind::Jacobi,
        }
    }
}

impl StepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pressure_iters == 0 {
            return Err(Error::InvalidArgument("pressure_iters must be >= 1".into()));
        }
        if let SolverKind::StencilRecurrent(s) = &self.solver {
            if !s.source_gain.is_finite() || s.stencil.iter().flatten().flatten().any(|w| !w.is_finite()) {
                return Err(Error::NonFinite("stencil solver weights".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Pressure solve
// ---------------------------------------------------------------------------

/// How a pressure tap resolves for a fluid cell's neighbor.
/// `>= 0`: fluid cell index; `ZERO_GRAD`: copy the center value
/// (solid / inlet / outlet / outside the domain); `DIRICHLET`: contributes 0
/// (empty cell, free surface).
pub(crate) const ZERO_GRAD: i64 = -1;
pub(crate) const DIRICHLET: i64 = -2;

#[derive(Debug, Clone)]
pub(crate) struct PoissonRefs {
    /// Flat indices of fluid cells (the unknowns).
    pub fluid: Vec<usize>,
    /// Per-cell face-neighbor resolution, full grid indexed.
    pub refs: Vec<[i64; 6]>,
}

pub(crate) fn poisson_refs(cells: &CellField) -> PoissonRefs {
    let n = cells.len();
    let mut fluid = Vec::new();
    let mut refs = vec![[DIRICHLET; 6]; n];
    for idx in 0..n {
        if !cells[idx].is_fluid() {
            continue;
        }
        fluid.push(idx);
        let [i, j, k] = cells.coords(idx);
        for (f, &(di, dj, dk)) in crate::grid::FACE_NEIGHBORS.iter().enumerate() {
            refs[idx][f] = match cells.idx_checked(i as i64 + di, j as i64 + dj, k as i64 + dk) {
                Some(nidx) => match cells[nidx] {
                    CellType::Fluid | CellType::Surface => nidx as i64,
                    CellType::Empty => DIRICHLET,
                    _ => ZERO_GRAD,
                },
                None => ZERO_GRAD,
            };
        }
    }
    PoissonRefs { fluid, refs }
}

/// One Jacobi sweep of (sum p_i - 6 p) / dx^2 = q on fluid cells.
pub(crate) fn jacobi_sweep(refs: &PoissonRefs, p: &ScalarField, q: &ScalarField, dx: f64, out: &mut ScalarField) {
    let dx2 = dx * dx;
    for &idx in &refs.fluid {
        let mut acc = 0.0;
        for &r in &refs.refs[idx] {
            if r >= 0 {
                acc += p[r as usize];
            } else if r == ZERO_GRAD {
                acc += p[idx];
            }
        }
        out[idx] = (acc - dx2 * q[idx]) / 6.0;
    }
}

/// Residual of the discrete Poisson system on fluid cells.
pub(crate) fn poisson_residual(refs: &PoissonRefs, p: &ScalarField, q: &ScalarField, dx: f64) -> f64 {
    let dx2 = dx * dx;
    let mut worst = 0.0_f64;
    for &idx in &refs.fluid {
        let mut acc = 0.0;
        for &r in &refs.refs[idx] {
            if r >= 0 {
                acc += p[r as usize];
            } else if r == ZERO_GRAD {
                acc += p[idx];
            }
        }
        let r = (acc - 6.0 * p[idx]) / dx2 - q[idx];
        worst = worst.max(r.abs());
    }
    worst
}

/// Jacobi solve of the compact 6-neighbor pressure system with zero-gradient
/// walls and zero pressure at empty cells. `p0` is the warm-start guess.
pub fn solve_pressure_jacobi(
    div: &ScalarField,
    cells: &CellField,
    rho: f64,
    dt: f64,
    dx: f64,
    iters: usize,
    p0: &ScalarField,
) -> Result<ScalarField> {
    if rho <= 0.0 || dt <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "rho and dt must be positive, got rho={rho}, dt={dt}"
        )));
    }
    let refs = poisson_refs(cells);
    let mut q = ScalarField::zeros(div.dims());
    for &idx in &refs.fluid {
        q[idx] = rho * div[idx] / dt;
    }
    let mut p = sanitize_pressure(p0, cells);
    let mut next = p.clone();
    for _ in 0..iters {
        jacobi_sweep(&refs, &p, &q, dx, &mut next);
        std::mem::swap(&mut p, &mut next);
    }
    Ok(p)
}

/// Zero pressure everywhere except fluid cells (empty cells are Dirichlet,
/// boundary-condition cells are never read).
pub(crate) fn sanitize_pressure(p0: &ScalarField, cells: &CellField) -> ScalarField {
    let mut p = ScalarField::zeros(p0.dims());
    for idx in 0..p0.len() {
        if cells[idx].is_fluid() {
            p[idx] = p0[idx];
        }
    }
    p
}

const OFFSETS: [(i64, i64, i64); 27] = {
    let mut out = [(0, 0, 0); 27];
    let mut n = 0;
    let mut a = -1_i64;
    while a <= 1 {
        let mut b = -1_i64;
        while b <= 1 {
            let mut c = -1_i64;
            while c <= 1 {
                out[n] = (a, b, c);
                n += 1;
                c += 1;
            }
            b += 1;
        }
        a += 1;
    }
    out
};

/// Tap resolution for the 27-point stencil: same masking as the Jacobi
/// solver (zero-gradient at walls and outside the domain, zero at empty).
pub(crate) fn stencil_refs(cells: &CellField) -> (Vec<usize>, Vec<[i64; 27]>) {
    let n = cells.len();
    let mut fluid = Vec::new();
    let mut refs = vec![[DIRICHLET; 27]; n];
    for idx in 0..n {
        if !cells[idx].is_fluid() {
            continue;
        }
        fluid.push(idx);
        let [i, j, k] = cells.coords(idx);
        for (t, &(di, dj, dk)) in OFFSETS.iter().enumerate() {
            refs[idx][t] = match cells.idx_checked(i as i64 + di, j as i64 + dj, k as i64 + dk) {
                Some(nidx) => match cells[nidx] {
                    CellType::Fluid | CellType::Surface => nidx as i64,
                    CellType::Empty => DIRICHLET,
                    _ => ZERO_GRAD,
                },
                None => ZERO_GRAD,
            };
        }
    }
    (fluid, refs)
}

#[inline]
pub(crate) fn stencil_weight(stencil: &Stencil27, tap: usize) -> f64 {
    let (a, b, c) = OFFSETS[tap];
    stencil[(a + 1) as usize][(b + 1) as usize][(c + 1) as usize]
}

/// Recurrent application of the 3x3x3 stencil plus divergence source.
///
/// With the analytic Jacobi kernel this matches `solve_pressure_jacobi`
/// to rounding. `iters = 0` returns the initial guess unchanged.
pub fn stencil_recurrent_pressure_solve(
    div: &ScalarField,
    cells: &CellField,
    kernel: &PressureKernel,
    iters: usize,
    p0: &ScalarField,
) -> Result<ScalarField> {
    if !kernel.is_finite() {
        return Err(Error::NonFinite("pressure kernel".into()));
    }
    if !div.same_dims(cells) {
        return Err(Error::DimensionMismatch {
            expected: cells.dims(),
            got: div.dims(),
        });
    }
    let (fluid, refs) = stencil_refs(cells);
    let mut p = sanitize_pressure(p0, cells);
    let mut next = p.clone();
    for _ in 0..iters {
        for &idx in &fluid {
            let mut acc = kernel.source_coeff * div[idx];
            for (t, &r) in refs[idx].iter().enumerate() {
                let w = stencil_weight(&kernel.stencil, t);
                if w == 0.0 {
                    continue;
                }
                if r >= 0 {
                    acc += w * p[r as usize];
                } else if r == ZERO_GRAD {
                    acc += w * p[idx];
                }
            }
            next[idx] = acc;
        }
        std::mem::swap(&mut p, &mut next);
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Kernel fitting
// ---------------------------------------------------------------------------

/// A (divergence, target pressure) training pair for kernel fitting; the
/// target comes from the Jacobi solver on the same geometry, iteration
/// count and zero initial guess.
#[derive(Debug, Clone)]
pub struct KernelFitSample {
    pub div: ScalarField,
    pub target: ScalarField,
}

#[derive(Debug, Clone)]
pub struct KernelFitReport {
    pub kernel: PressureKernel,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
}

/// Fit stencil weights and source coefficient by gradient descent (Adam)
/// on the mean squared error between the recurrent solve and the targets.
pub fn fit_pressure_kernel(
    samples: &[KernelFitSample],
    cells: &CellField,
    iters: usize,
    epochs: usize,
    lr: f64,
) -> Result<KernelFitReport> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("kernel fit needs at least one sample".into()));
    }
    for s in samples {
        if !s.div.same_dims(cells) || !s.target.same_dims(cells) {
            return Err(Error::DimensionMismatch {
                expected: cells.dims(),
                got: s.div.dims(),
            });
        }
    }
    let (fluid, refs) = stencil_refs(cells);
    if fluid.is_empty() {
        return Err(Error::EmptyInput("kernel fit grid has no fluid cells".into()));
    }

    // 27 stencil weights + source coefficient.
    let mut theta = [0.0f64; 28];
    let mut m = [0.0f64; 28];
    let mut v = [0.0f64; 28];
    let (b1, b2, eps) = (0.9, 0.999, 1e-8);

    let mut history = Vec::with_capacity(epochs);
    let norm = 1.0 / (fluid.len() as f64 * samples.len() as f64);

    for epoch in 0..epochs {
        let mut loss = 0.0;
        let mut grad = [0.0f64; 28];
        for sample in samples {
            // Forward, recording every iterate for the reverse pass.
            let mut states = Vec::with_capacity(iters + 1);
            let mut p = ScalarField::zeros(cells.dims());
            states.push(p.clone());
            for _ in 0..iters {
                let mut next = ScalarField::zeros(cells.dims());
                for &idx in &fluid {
                    let mut acc = theta[27] * sample.div[idx];
                    for (t, &r) in refs[idx].iter().enumerate() {
                        if r >= 0 {
                            acc += theta[t] * p[r as usize];
                        } else if r == ZERO_GRAD {
                            acc += theta[t] * p[idx];
                        }
                    }
                    next[idx] = acc;
                }
                states.push(next.clone());
                p = next;
            }

            let mut pbar = ScalarField::zeros(cells.dims());
            for &idx in &fluid {
                let d = p[idx] - sample.target[idx];
                loss += d * d * norm;
                pbar[idx] = 2.0 * d * norm;
            }

            // Reverse through the recurrence.
            for k in (0..iters).rev() {
                let prev = &states[k];
                let mut prev_bar = ScalarField::zeros(cells.dims());
                for &idx in &fluid {
                    let g = pbar[idx];
                    if g == 0.0 {
                        continue;
                    }
                    grad[27] += g * sample.div[idx];
                    for (t, &r) in refs[idx].iter().enumerate() {
                        if r >= 0 {
                            grad[t] += g * prev[r as usize];
                            prev_bar[r as usize] += theta[t] * g;
                        } else if r == ZERO_GRAD {
                            grad[t] += g * prev[idx];
                            prev_bar[idx] += theta[t] * g;
                        }
                    }
                }
                pbar = prev_bar;
            }
        }

        history.push(loss);
        let t = (epoch + 1) as f64;
        for i in 0..28 {
            m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
            v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1.powf(t));
            let vh = v[i] / (1.0 - b2.powf(t));
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }

    let mut stencil = [[[0.0; 3]; 3]; 3];
    for (t, &(a, b, c)) in OFFSETS.iter().enumerate() {
        stencil[(a + 1) as usize][(b + 1) as usize][(c + 1) as usize] = theta[t];
    }
    let kernel = PressureKernel {
        stencil,
        source_coeff: theta[27],
    };

    // Loss at the fitted weights.
    let mut final_loss = 0.0;
    for sample in samples {
        let p = stencil_recurrent_pressure_solve(&sample.div, cells, &kernel, iters, &ScalarField::zeros(cells.dims()))?;
        for &idx in &fluid {
            let d = p[idx] - sample.target[idx];
            final_loss += d * d * norm;
        }
    }

    Ok(KernelFitReport {
        kernel,
        final_loss,
        loss_history: history,
    })
}

// ---------------------------------------------------------------------------
// Remaining sub-steps
// ---------------------------------------------------------------------------

/// Explicit body force on non-boundary-condition fluid cells.
pub fn add_body_force(grid: &mut SimGrid, g: Vector3<f64>, dt: f64) {
    for idx in 0..grid.cell_count() {
        if grid.cells[idx].is_fluid() {
            grid.velocity[idx] += g * dt;
        }
    }
}

/// Pressure value seen from a fluid cell across one face.
#[inline]
pub(crate) fn pressure_tap(p: &ScalarField, r: i64, center: usize) -> f64 {
    if r >= 0 {
        p[r as usize]
    } else if r == ZERO_GRAD {
        p[center]
    } else {
        0.0
    }
}

/// v <- v - (dt/rho) grad p with central differences; walls and the domain
/// boundary see a zero-gradient pressure, empty cells zero pressure.
pub fn subtract_pressure_gradient(grid: &mut SimGrid, p: &ScalarField, rho: f64, dt: f64) -> Result<()> {
    if rho <= 0.0 {
        return Err(Error::InvalidArgument(format!("rho must be positive, got {rho}")));
    }
    let refs = poisson_refs(&grid.cells);
    let scale = dt / (rho * 2.0 * grid.dx);
    for &idx in &refs.fluid {
        let r = &refs.refs[idx];
        let mut v = grid.velocity[idx];
        for axis in 0..3 {
            let lo = pressure_tap(p, r[2 * axis], idx);
            let hi = pressure_tap(p, r[2 * axis + 1], idx);
            v[axis] -= scale * (hi - lo);
        }
        grid.velocity[idx] = v;
    }
    Ok(())
}

/// Divergence of the viscous stress for constant kinematic viscosity:
/// L(v)_a = sum_b d2v_a/db2 + d/da (div v), central differences, taps
/// outside the domain read zero.
pub fn viscous_rate(velocity: &VectorField, cells: &CellField, dx: f64) -> VectorField {
    let mut out = VectorField::zeros_vec(velocity.dims());
    let inv_dx2 = 1.0 / (dx * dx);
    let inv_4dx2 = 0.25 * inv_dx2;
    let at = |i: i64, j: i64, k: i64, comp: usize| -> f64 {
        match velocity.idx_checked(i, j, k) {
            Some(n) => velocity[n][comp],
            None => 0.0,
        }
    };
    for idx in 0..velocity.len() {
        if !cells[idx].is_fluid() {
            continue;
        }
        let [iu, ju, ku] = velocity.coords(idx);
        let (i, j, k) = (iu as i64, ju as i64, ku as i64);
        let mut rate = Vector3::zeros();
        for a in 0..3 {
            let mut acc = 0.0;
            // Laplacian of component a.
            for b in 0..3 {
                let mut lo = [i, j, k];
                let mut hi = [i, j, k];
                lo[b] -= 1;
                hi[b] += 1;
                acc += (at(hi[0], hi[1], hi[2], a) - 2.0 * velocity[idx][a] + at(lo[0], lo[1], lo[2], a)) * inv_dx2;
            }
            // d/da of the divergence.
            for b in 0..3 {
                if b == a {
                    let mut lo = [i, j, k];
                    let mut hi = [i, j, k];
                    lo[a] -= 1;
                    hi[a] += 1;
                    acc += (at(hi[0], hi[1], hi[2], a) - 2.0 * velocity[idx][a] + at(lo[0], lo[1], lo[2], a)) * inv_dx2;
                } else {
                    let mut pp = [i, j, k];
                    let mut pm = [i, j, k];
                    let mut mp = [i, j, k];
                    let mut mm = [i, j, k];
                    pp[a] += 1;
                    pp[b] += 1;
                    pm[a] += 1;
                    pm[b] -= 1;
                    mp[a] -= 1;
                    mp[b] += 1;
                    mm[a] -= 1;
                    mm[b] -= 1;
                    acc += (at(pp[0], pp[1], pp[2], b) - at(pm[0], pm[1], pm[2], b) - at(mp[0], mp[1], mp[2], b)
                        + at(mm[0], mm[1], mm[2], b))
                        * inv_4dx2;
                }
            }
            rate[a] = acc;
        }
        out[idx] = rate;
    }
    out
}

/// Adjoint of `viscous_rate`: scatters cotangents back through the same taps.
pub(crate) fn viscous_rate_adjoint(rate_bar: &VectorField, cells: &CellField, dx: f64, v_bar: &mut VectorField) {
    let inv_dx2 = 1.0 / (dx * dx);
    let inv_4dx2 = 0.25 * inv_dx2;
    let dims = rate_bar.dims();
    let mut add = |i: i64, j: i64, k: i64, comp: usize, val: f64, v_bar: &mut VectorField| {
        if i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < dims[0]
            && (j as usize) < dims[1]
            && (k as usize) < dims[2]
        {
            let n = v_bar.idx(i as usize, j as usize, k as usize);
            v_bar[n][comp] += val;
        }
    };
    for idx in 0..rate_bar.len() {
        if !cells[idx].is_fluid() {
            continue;
        }
        let [iu, ju, ku] = rate_bar.coords(idx);
        let (i, j, k) = (iu as i64, ju as i64, ku as i64);
        for a in 0..3 {
            let g = rate_bar[idx][a];
            if g == 0.0 {
                continue;
            }
            for b in 0..3 {
                let mut lo = [i, j, k];
                let mut hi = [i, j, k];
                lo[b] -= 1;
                hi[b] += 1;
                add(hi[0], hi[1], hi[2], a, g * inv_dx2, v_bar);
                add(i, j, k, a, -2.0 * g * inv_dx2, v_bar);
                add(lo[0], lo[1], lo[2], a, g * inv_dx2, v_bar);
            }
            for b in 0..3 {
                if b == a {
                    let mut lo = [i, j, k];
                    let mut hi = [i, j, k];
                    lo[a] -= 1;
                    hi[a] += 1;
                    add(hi[0], hi[1], hi[2], a, g * inv_dx2, v_bar);
                    add(i, j, k, a, -2.0 * g * inv_dx2, v_bar);
                    add(lo[0], lo[1], lo[2], a, g * inv_dx2, v_bar);
                } else {
                    let mut pp = [i, j, k];
                    let mut pm = [i, j, k];
                    let mut mp = [i, j, k];
                    let mut mm = [i, j, k];
                    pp[a] += 1;
                    pp[b] += 1;
                    pm[a] += 1;
                    pm[b] -= 1;
                    mp[a] -= 1;
                    mp[b] += 1;
                    mm[a] -= 1;
                    mm[b] -= 1;
                    add(pp[0], pp[1], pp[2], b, g * inv_4dx2, v_bar);
                    add(pm[0], pm[1], pm[2], b, -g * inv_4dx2, v_bar);
                    add(mp[0], mp[1], mp[2], b, -g * inv_4dx2, v_bar);
                    add(mm[0], mm[1], mm[2], b, g * inv_4dx2, v_bar);
                }
            }
        }
    }
}

/// Explicit viscosity update v <- v + dt nu L(v) on fluid cells.
/// Warns when the explicit stability bound dt <= dx^2 / (6 nu) is violated.
pub fn apply_viscosity(grid: &mut SimGrid, nu: f64, dt: f64) {
    if nu == 0.0 {
        return;
    }
    let bound = grid.dx * grid.dx / (6.0 * nu);
    if dt > bound {
        log::warn!("explicit viscosity unstable: dt={dt} exceeds dx^2/(6 nu)={bound}");
    }
    let rate = viscous_rate(&grid.velocity, &grid.cells, grid.dx);
    for idx in 0..grid.cell_count() {
        if grid.cells[idx].is_fluid() {
            grid.velocity[idx] += rate[idx] * (dt * nu);
        }
    }
}

/// Semi-Lagrangian convection: back-trace each fluid cell center and
/// trilinearly interpolate the pre-step velocity, clamped to the domain.
pub fn advect_velocity(grid: &mut SimGrid, dt: f64) {
    let old = grid.velocity.clone();
    for idx in 0..grid.cell_count() {
        if !grid.cells[idx].is_fluid() {
            continue;
        }
        let [i, j, k] = grid.velocity.coords(idx);
        let x = grid.cell_center(i, j, k);
        let departed = x - old[idx] * dt;
        grid.velocity[idx] = trilinear(&old, grid.origin, grid.dx, departed);
    }
}

/// Upwind one-sided velocity gradient dv_a/dx_i at a fluid cell, biased
/// against the flow direction; the convection gradient surrogate.
pub(crate) fn upwind_gradient(velocity: &VectorField, cells: &CellField, dx: f64, idx: usize) -> [[f64; 3]; 3] {
    let [iu, ju, ku] = velocity.coords(idx);
    let (i, j, k) = (iu as i64, ju as i64, ku as i64);
    let mut grad = [[0.0; 3]; 3];
    for axis in 0..3 {
        let mut hi = [i, j, k];
        let mut lo = [i, j, k];
        hi[axis] += 1;
        lo[axis] -= 1;
        let upwind_back = velocity[idx][axis] > 0.0;
        let other = if upwind_back {
            velocity.idx_checked(lo[0], lo[1], lo[2])
        } else {
            velocity.idx_checked(hi[0], hi[1], hi[2])
        };
        for comp in 0..3 {
            grad[comp][axis] = match other {
                Some(n) => {
                    if upwind_back {
                        (velocity[idx][comp] - velocity[n][comp]) / dx
                    } else {
                        (velocity[n][comp] - velocity[idx][comp]) / dx
                    }
                }
                None => 0.0,
            };
        }
        let _ = cells;
    }
    grad
}

/// One full simulation step in place. `step_index` drives the deterministic
/// inlet fluctuation and increments per call in a rollout.
pub fn step(grid: &mut SimGrid, params: &SimParams, cfg: &StepConfig, step_index: u32) -> Result<()> {
    params.validate()?;
    cfg.validate()?;
    let coeffs = params.coefficients();
    let drive = params.drive();

    apply_boundary_conditions(grid, &coeffs, &drive, step_index);
    add_body_force(grid, params.gravity, params.dt);
    grid.divergence = divergence(grid);
    let p = match &cfg.solver {
        SolverKind::Jacobi => solve_pressure_jacobi(
            &grid.divergence,
            &grid.cells,
            params.rho,
            params.dt,
            grid.dx,
            cfg.pressure_iters,
            &grid.pressure,
        )?,
        SolverKind::StencilRecurrent(solver) => {
            let kernel = solver.kernel_for(params.rho, params.dt, grid.dx);
            stencil_recurrent_pressure_solve(&grid.divergence, &grid.cells, &kernel, cfg.pressure_iters, &grid.pressure)?
        }
    };
    grid.pressure = p;
    subtract_pressure_gradient(grid, &grid.pressure.clone(), params.rho, params.dt)?;
    apply_viscosity(grid, params.nu, params.dt);
    advect_velocity(grid, params.dt);
    apply_boundary_conditions(grid, &coeffs, &drive, step_index);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Field3;
    use crate::grid::PlaneSpec;
    use approx::assert_relative_eq;

    fn rng(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.max(1);
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        }
    }

    fn all_fluid_grid(dims: [usize; 3], dx: f64) -> SimGrid {
        let mut g = SimGrid::new(dims, dx, Vector3::zeros()).unwrap();
        let fluid = Field3::filled(dims, true);
        let solid = Field3::filled(dims, false);
        g.classify_cells(&fluid, &solid, None, None).unwrap();
        g
    }

    /// Fluid interior with an empty one-cell shell: pressure is pinned to
    /// zero at the shell, so the Poisson system is non-singular.
    fn shelled_grid(dims: [usize; 3], dx: f64) -> SimGrid {
        let mut g = SimGrid::new(dims, dx, Vector3::zeros()).unwrap();
        let fluid = Field3::from_fn(dims, |i, j, k| {
            i > 0 && j > 0 && k > 0 && i < dims[0] - 1 && j < dims[1] - 1 && k < dims[2] - 1
        });
        let solid = Field3::filled(dims, false);
        g.classify_cells(&fluid, &solid, None, None).unwrap();
        g
    }

    #[test]
    fn body_force_zero_gravity_is_identity() {
        let mut g = all_fluid_grid([4, 4, 4], 0.1);
        let before = g.velocity.clone();
        add_body_force(&mut g, Vector3::zeros(), 0.01);
        assert_eq!(g.velocity, before);
    }

    #[test]
    fn body_force_applies_to_fluid_not_inlet() {
        let dims = [4, 4, 4];
        let mut g = SimGrid::new(dims, 0.1, Vector3::zeros()).unwrap();
        let fluid = Field3::filled(dims, true);
        let solid = Field3::filled(dims, false);
        g.classify_cells(&fluid, &solid, Some(PlaneSpec { axis: 0, high: false }), None).unwrap();
        add_body_force(&mut g, Vector3::new(0.0, -9.8, 0.0), 0.01);
        assert_relative_eq!(g.velocity[[2, 2, 2]].y, -0.098, epsilon = 1e-15);
        assert_eq!(g.velocity[[0, 2, 2]], Vector3::zeros());
    }

    #[test]
    fn jacobi_zero_divergence_stays_zero() {
        let g = shelled_grid([6, 6, 6], 0.1);
        let div = ScalarField::zeros(g.dims);
        let p = solve_pressure_jacobi(&div, &g.cells, 1000.0, 0.01, g.dx, 50, &ScalarField::zeros(g.dims)).unwrap();
        assert!(p.max_abs() < 1e-14);
    }

    #[test]
    fn jacobi_single_update_matches_hand_value() {
        // Interior cell, empty (fixed-zero) neighbors, divergence d0:
        // one iteration gives p = -dx^2 rho d0 / (6 dt).
        let dims = [3, 3, 3];
        let mut g = SimGrid::new(dims, 0.2, Vector3::zeros()).unwrap();
        let fluid = Field3::from_fn(dims, |i, j, k| (i, j, k) == (1, 1, 1));
        let solid = Field3::filled(dims, false);
        g.classify_cells(&fluid, &solid, None, None).unwrap();
        // A lone fluid cell is SURFACE by classification; still solved.
        let d0 = 2.5;
        let mut div = ScalarField::zeros(dims);
        div[g.cells.idx(1, 1, 1)] = d0;
        let (rho, dt) = (800.0, 0.05);
        let p = solve_pressure_jacobi(&div, &g.cells, rho, dt, g.dx, 1, &ScalarField::zeros(dims)).unwrap();
        let want = -g.dx * g.dx * rho * d0 / (6.0 * dt);
        assert_relative_eq!(p[g.cells.idx(1, 1, 1)], want, max_relative = 1e-14);
    }

    #[test]
    fn jacobi_residual_drops_on_random_field() {
        let g = shelled_grid([16, 16, 16], 0.1);
        let mut r = rng(42);
        let mut div = ScalarField::zeros(g.dims);
        for idx in 0..g.cell_count() {
            if g.cells[idx].is_fluid() {
                div[idx] = r();
            }
        }
        let (rho, dt) = (1000.0, 0.02);
        let refs = poisson_refs(&g.cells);
        let mut q = ScalarField::zeros(g.dims);
        for &idx in &refs.fluid {
            q[idx] = rho * div[idx] / dt;
        }
        let zero = ScalarField::zeros(g.dims);
        let p1 = solve_pressure_jacobi(&div, &g.cells, rho, dt, g.dx, 1, &zero).unwrap();
        let p200 = solve_pressure_jacobi(&div, &g.cells, rho, dt, g.dx, 200, &zero).unwrap();
        let r1 = poisson_residual(&refs, &p1, &q, g.dx);
        let r200 = poisson_residual(&refs, &p200, &q, g.dx);
        assert!(
            r200 * 10.0 <= r1,
            "residual after 200 iters {r200} should be >= 10x below after 1 iter {r1}"
        );
    }

    #[test]
    fn stencil_solver_matches_jacobi() {
        let g = shelled_grid([8, 8, 8], 0.15);
        let mut r = rng(7);
        let mut div = ScalarField::zeros(g.dims);
        for idx in 0..g.cell_count() {
            if g.cells[idx].is_fluid() {
                div[idx] = r();
            }
        }
        let (rho, dt) = (500.0, 0.04);
        let zero = ScalarField::zeros(g.dims);
        let jac = solve_pressure_jacobi(&div, &g.cells, rho, dt, g.dx, 50, &zero).unwrap();
        let kernel = PressureKernel::analytic_jacobi(rho, dt, g.dx);
        let st = stencil_recurrent_pressure_solve(&div, &g.cells, &kernel, 50, &zero).unwrap();
        let scale = jac.max_abs().max(1e-30);
        for idx in 0..g.cell_count() {
            assert!(
                (jac[idx] - st[idx]).abs() <= 1e-6 * scale,
                "solver mismatch at {idx}: {} vs {}",
                jac[idx],
                st[idx]
            );
        }
    }

    #[test]
    fn stencil_solver_edge_cases() {
        let g = shelled_grid([6, 6, 6], 0.1);
        let mut r = rng(9);
        let mut div = ScalarField::zeros(g.dims);
        let mut p0 = ScalarField::zeros(g.dims);
        for idx in 0..g.cell_count() {
            if g.cells[idx].is_fluid() {
                div[idx] = r();
                p0[idx] = r();
            }
        }
        // Zero kernel, zero source -> identically zero output.
        let zero_kernel = PressureKernel {
            stencil: [[[0.0; 3]; 3]; 3],
            source_coeff: 0.0,
        };
        let out = stencil_recurrent_pressure_solve(&div, &g.cells, &zero_kernel, 10, &ScalarField::zeros(g.dims)).unwrap();
        assert!(out.max_abs() == 0.0);
        // iters = 0 -> initial guess unchanged (on fluid cells).
        let kernel = PressureKernel::analytic_jacobi(1.0, 1.0, g.dx);
        let out = stencil_recurrent_pressure_solve(&div, &g.cells, &kernel, 0, &p0).unwrap();
        for idx in 0..g.cell_count() {
            if g.cells[idx].is_fluid() {
                assert_eq!(out[idx], p0[idx]);
            }
        }
    }

    #[test]
    fn fit_at_analytic_kernel_has_zero_gradient_path() {
        // Samples generated by the recurrent solver at the analytic kernel:
        // the fit objective at that kernel is exactly zero.
        let g = shelled_grid([6, 6, 6], 0.1);
        let (rho, dt) = (1000.0, 0.02);
        let kernel = PressureKernel::analytic_jacobi(rho, dt, g.dx);
        let mut r = rng(11);
        let mut samples = Vec::new();
        for _ in 0..2 {
            let mut div = ScalarField::zeros(g.dims);
            for idx in 0..g.cell_count() {
                if g.cells[idx].is_fluid() {
                    div[idx] = r();
                }
            }
            let target =
                solve_pressure_jacobi(&div, &g.cells, rho, dt, g.dx, 8, &ScalarField::zeros(g.dims)).unwrap();
            samples.push(KernelFitSample { div, target });
        }
        // Evaluate the recurrent solver at the analytic kernel directly.
        let mut loss = 0.0;
        for s in &samples {
            let p = stencil_recurrent_pressure_solve(&s.div, &g.cells, &kernel, 8, &ScalarField::zeros(g.dims)).unwrap();
            for idx in 0..g.cell_count() {
                loss += (p[idx] - s.target[idx]).powi(2);
            }
        }
        assert!(loss < 1e-20, "analytic kernel should reproduce Jacobi targets, loss={loss}");

        // Degenerate data: a single all-zero sample fits without error.
        let zero_sample = KernelFitSample {
            div: ScalarField::zeros(g.dims),
            target: ScalarField::zeros(g.dims),
        };
        let report = fit_pressure_kernel(&[zero_sample], &g.cells, 4, 5, 1e-2).unwrap();
        assert!(report.final_loss < 1e-20);
    }

    #[test]
    fn subtract_uniform_pressure_is_identity() {
        let mut g = all_fluid_grid([5, 5, 5], 0.1);
        let mut r = rng(3);
        for idx in 0..g.cell_count() {
            g.velocity[idx] = Vector3::new(r(), r(), r());
        }
        let before = g.velocity.clone();
        let p = ScalarField::filled(g.dims, 7.5);
        subtract_pressure_gradient(&mut g, &p, 1000.0, 0.01).unwrap();
        for idx in 0..g.cell_count() {
            assert!((g.velocity[idx] - before[idx]).norm() < 1e-14);
        }
    }

    #[test]
    fn subtract_linear_pressure_interior() {
        // p = x, rho = 1, dt = 1: interior v_x drops by exactly 1.
        let mut g = all_fluid_grid([6, 6, 6], 0.25);
        let p = ScalarField::from_fn(g.dims, |i, _, _| (i as f64 + 0.5) * 0.25);
        subtract_pressure_gradient(&mut g, &p, 1.0, 1.0).unwrap();
        for i in 1..5 {
            for j in 0..6 {
                for k in 0..6 {
                    assert_relative_eq!(g.velocity[[i, j, k]].x, -1.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn subtract_scales_inversely_with_rho() {
        let mut g1 = all_fluid_grid([5, 5, 5], 0.1);
        let mut g2 = all_fluid_grid([5, 5, 5], 0.1);
        let mut r = rng(5);
        let p = ScalarField::from_fn(g1.dims, |_, _, _| r());
        subtract_pressure_gradient(&mut g1, &p, 400.0, 0.02).unwrap();
        subtract_pressure_gradient(&mut g2, &p, 800.0, 0.02).unwrap();
        for idx in 0..g1.cell_count() {
            assert!((g1.velocity[idx] - g2.velocity[idx] * 2.0).norm() < 1e-13);
        }
    }

    #[test]
    fn viscosity_zero_nu_is_identity() {
        let mut g = all_fluid_grid([5, 5, 5], 0.1);
        let mut r = rng(6);
        for idx in 0..g.cell_count() {
            g.velocity[idx] = Vector3::new(r(), r(), r());
        }
        let before = g.velocity.clone();
        apply_viscosity(&mut g, 0.0, 0.01);
        assert_eq!(g.velocity, before);
    }

    #[test]
    fn viscosity_linear_shear_unchanged_interior() {
        // v_x = y: constant strain rate, zero stress divergence inside.
        let mut g = all_fluid_grid([7, 7, 7], 0.2);
        for idx in 0..g.cell_count() {
            let [i, j, k] = g.velocity.coords(idx);
            let x = g.cell_center(i, j, k);
            g.velocity[idx] = Vector3::new(x.y, 0.0, 0.0);
        }
        let before = g.velocity.clone();
        apply_viscosity(&mut g, 1e-3, 0.01);
        for i in 1..6 {
            for j in 1..6 {
                for k in 1..6 {
                    assert!((g.velocity[[i, j, k]] - before[[i, j, k]]).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn viscosity_sinusoid_decays_at_discrete_rate() {
        // v_x = sin(k x), periodic-free interior: the stress divergence is
        // twice the compact second difference of v_x (Laplacian plus the
        // grad-div term), so amplitude scales by 1 - 2 dt nu s with
        // s = (2 - 2 cos(k dx)) / dx^2.
        let dims = [32, 5, 5];
        let dx = 0.1;
        let mut g = all_fluid_grid(dims, dx);
        let kwave = 2.0 * std::f64::consts::PI / (8.0 * dx);
        for idx in 0..g.cell_count() {
            let [i, j, kk] = g.velocity.coords(idx);
            let x = g.cell_center(i, j, kk);
            g.velocity[idx] = Vector3::new((kwave * x.x).sin(), 0.0, 0.0);
        }
        let before = g.velocity.clone();
        let (nu, dt) = (1e-3, 0.05);
        apply_viscosity(&mut g, nu, dt);
        let s = (2.0 - 2.0 * (kwave * dx).cos()) / (dx * dx);
        let factor = 1.0 - 2.0 * dt * nu * s;
        for i in 2..30 {
            let got = g.velocity[[i, 2, 2]].x;
            let want = before[[i, 2, 2]].x * factor;
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn viscosity_conserves_interior_momentum() {
        // Compact-support velocity away from the boundary: stencil sums
        // telescope, total momentum is unchanged.
        let mut g = all_fluid_grid([10, 10, 10], 0.1);
        let mut r = rng(12);
        for i in 3..7 {
            for j in 3..7 {
                for k in 3..7 {
                    g.velocity[[i, j, k]] = Vector3::new(r(), r(), r());
                }
            }
        }
        let before: Vector3<f64> = g.velocity.iter().sum();
        apply_viscosity(&mut g, 1e-3, 0.05);
        let after: Vector3<f64> = g.velocity.iter().sum();
        assert!((after - before).norm() < 1e-12);
    }

    #[test]
    fn viscous_adjoint_is_transpose() {
        let g = all_fluid_grid([6, 5, 7], 0.2);
        let mut r = rng(13);
        let v = VectorField::from_fn(g.dims, |_, _, _| Vector3::new(r(), r(), r()));
        let w = VectorField::from_fn(g.dims, |_, _, _| Vector3::new(r(), r(), r()));
        let lv = viscous_rate(&v, &g.cells, g.dx);
        let lhs: f64 = (0..v.len()).map(|i| lv[i].dot(&w[i])).sum();
        let mut ltw = VectorField::zeros_vec(g.dims);
        viscous_rate_adjoint(&w, &g.cells, g.dx, &mut ltw);
        let rhs: f64 = (0..v.len()).map(|i| ltw[i].dot(&v[i])).sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn advect_uniform_field_is_fixed_point() {
        let mut g = all_fluid_grid([6, 6, 6], 0.1);
        g.velocity.fill(Vector3::new(0.3, -0.1, 0.2));
        let before = g.velocity.clone();
        advect_velocity(&mut g, 0.05);
        for idx in 0..g.cell_count() {
            assert!((g.velocity[idx] - before[idx]).norm() < 1e-14);
        }
    }

    #[test]
    fn advect_never_increases_max_speed() {
        let mut g = all_fluid_grid([12, 12, 12], 0.1);
        let mut r = rng(21);
        for idx in 0..g.cell_count() {
            g.velocity[idx] = Vector3::new(r(), r(), r());
        }
        let mut prev = g.velocity.max_norm();
        for _ in 0..100 {
            advect_velocity(&mut g, 0.04);
            let m = g.velocity.max_norm();
            assert!(m <= prev + 1e-12, "max speed grew: {m} > {prev}");
            prev = m;
        }
    }

    #[test]
    fn advect_transports_bump_downstream() {
        // Uniform carrier (c,0,0) with a bump in v_y: the bump centroid
        // moves c dt per step.
        let dims = [40, 5, 5];
        let dx = 0.1;
        let mut g = all_fluid_grid(dims, dx);
        let c = 0.5;
        for idx in 0..g.cell_count() {
            let [i, j, k] = g.velocity.coords(idx);
            let x = g.cell_center(i, j, k).x;
            let bump = (-(x - 1.0) * (x - 1.0) / 0.05).exp();
            g.velocity[idx] = Vector3::new(c, bump, 0.0);
        }
        let centroid = |g: &SimGrid| -> f64 {
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..dims[0] {
                let x = g.cell_center(i, 2, 2).x;
                let w = g.velocity[[i, 2, 2]].y;
                num += x * w;
                den += w;
            }
            num / den
        };
        let c0 = centroid(&g);
        let dt = 0.1;
        let steps = 10;
        for _ in 0..steps {
            advect_velocity(&mut g, dt);
        }
        let c1 = centroid(&g);
        let moved = c1 - c0;
        let want = c * dt * steps as f64;
        assert!(
            (moved - want).abs() < dx,
            "bump moved {moved}, expected {want} within one cell"
        );
    }

    #[test]
    fn step_zero_state_is_fixed_point() {
        let mut g = shelled_grid([8, 8, 8], 0.1);
        let params = SimParams {
            gravity: Vector3::zeros(),
            v_in: Vector3::zeros(),
            v_out: Vector3::zeros(),
            ..SimParams::default()
        };
        let cfg = StepConfig::default();
        for s in 0..5 {
            step(&mut g, &params, &cfg, s).unwrap();
        }
        assert!(g.velocity.max_norm() < 1e-14);
    }

    #[test]
    fn step_runs_with_stencil_solver() {
        let mut g = shelled_grid([8, 8, 8], 0.1);
        let mut r = rng(31);
        for idx in 0..g.cell_count() {
            if g.cells[idx].is_fluid() {
                g.velocity[idx] = Vector3::new(r(), r(), r()) * 0.1;
            }
        }
        let params = SimParams::default();
        let cfg = StepConfig {
            solver: SolverKind::StencilRecurrent(RecurrentSolver::analytic()),
            ..StepConfig::default()
        };
        step(&mut g, &params, &cfg, 0).unwrap();
        assert!(g.velocity.is_finite());
    }
}
