//! Differentiable multi-step rollout of the grid fluid step.
//!
//! `rollout` runs the forward split update while recording the intermediate
//! fields each per-step derivative formula needs; `backward` replays the
//! tape in reverse, accumulating analytic gradients for every physical
//! parameter. Two modes exist for the implicit pressure solve: the exact
//! adjoint of the recorded Jacobi/stencil iterations, and the auxiliary
//! Poisson systems of the converged solution.
//!
//! Convection deliberately does not differentiate through the back-trace
//! indexing; it uses the local surrogate dv/dv_i' = -dt dv/di with upwind
//! one-sided differences.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::{ScalarField, VectorField};
use crate::grid::{
    apply_boundary_conditions, apply_wall_face, divergence, divergence_adjoint, wall_faces, CellType, SimGrid,
};
use crate::params::{ParamGrads, SimParams};
use crate::step::{
    add_body_force, advect_velocity, apply_viscosity, jacobi_sweep, poisson_refs, pressure_tap, sanitize_pressure,
    solve_pressure_jacobi, stencil_recurrent_pressure_solve, stencil_refs, stencil_weight, subtract_pressure_gradient,
    upwind_gradient, viscous_rate, viscous_rate_adjoint, PoissonRefs, SolverKind, StepConfig, DIRICHLET, ZERO_GRAD,
};

/// Per-step snapshot of every field the reverse pass reads.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step_index: u32,
    /// Velocity entering the step (before the leading boundary pass).
    pub v_pre_bc1: VectorField,
    /// Divergence fed into the pressure solve.
    pub div: ScalarField,
    /// Warm-start pressure for this step's solve.
    pub p_init: ScalarField,
    /// Solved pressure.
    pub p_final: ScalarField,
    /// Velocity entering the viscosity update.
    pub v_pre_visc: VectorField,
    /// Velocity entering convection.
    pub v_pre_conv: VectorField,
    /// Velocity entering the trailing boundary pass.
    pub v_pre_bc2: VectorField,
}

/// Recorded forward rollout; replaying it reproduces the outputs bit for bit.
#[derive(Debug, Clone)]
pub struct GradientTape {
    pub params: SimParams,
    pub cfg: StepConfig,
    pub dx: f64,
    pub origin: Vector3<f64>,
    pub cells: crate::grid::CellField,
    pub inlet: Option<crate::grid::PlaneSpec>,
    pub outlet: Option<crate::grid::PlaneSpec>,
    /// Initial velocity (the rollout's v0).
    pub v0: VectorField,
    /// Initial pressure (warm start of the first step).
    pub p0: ScalarField,
    pub records: Vec<StepRecord>,
}

pub const MAX_ROLLOUT_STEPS: usize = 25;

/// Run `n_steps` of the forward update from the grid's current state,
/// recording the tape. The grid itself is not modified.
pub fn rollout(
    grid: &SimGrid,
    params: &SimParams,
    n_steps: usize,
    cfg: &StepConfig,
) -> Result<(Vec<VectorField>, GradientTape)> {
    params.validate()?;
    cfg.validate()?;
    if n_steps > MAX_ROLLOUT_STEPS {
        return Err(Error::InvalidArgument(format!(
            "rollout length {n_steps} exceeds the supported maximum {MAX_ROLLOUT_STEPS}"
        )));
    }

    let mut work = grid.clone();
    let mut tape = GradientTape {
        params: *params,
        cfg: cfg.clone(),
        dx: grid.dx,
        origin: grid.origin,
        cells: grid.cells.clone(),
        inlet: grid.inlet,
        outlet: grid.outlet,
        v0: grid.velocity.clone(),
        p0: grid.pressure.clone(),
        records: Vec::with_capacity(n_steps),
    };
    let mut outputs = Vec::with_capacity(n_steps);

    let coeffs = params.coefficients();
    let drive = params.drive();

    for s in 0..n_steps {
        let step_index = s as u32;
        let v_pre_bc1 = work.velocity.clone();
        apply_boundary_conditions(&mut work, &coeffs, &drive, step_index);
        add_body_force(&mut work, params.gravity, params.dt);
        work.divergence = divergence(&work);
        let div = work.divergence.clone();
        let p_init = work.pressure.clone();
        let p = match &cfg.solver {
            SolverKind::Jacobi => solve_pressure_jacobi(
                &div,
                &work.cells,
                params.rho,
                params.dt,
                work.dx,
                cfg.pressure_iters,
                &p_init,
            )?,
            SolverKind::StencilRecurrent(solver) => {
                let kernel = solver.kernel_for(params.rho, params.dt, work.dx);
                stencil_recurrent_pressure_solve(&div, &work.cells, &kernel, cfg.pressure_iters, &p_init)?
            }
        };
        work.pressure = p.clone();
        subtract_pressure_gradient(&mut work, &p, params.rho, params.dt)?;
        let v_pre_visc = work.velocity.clone();
        apply_viscosity(&mut work, params.nu, params.dt);
        let v_pre_conv = work.velocity.clone();
        advect_velocity(&mut work, params.dt);
        let v_pre_bc2 = work.velocity.clone();
        apply_boundary_conditions(&mut work, &coeffs, &drive, step_index);

        if !work.velocity.is_finite() {
            return Err(Error::RolloutBlowup { step: s });
        }

        tape.records.push(StepRecord {
            step_index,
            v_pre_bc1,
            div,
            p_init,
            p_final: p,
            v_pre_visc,
            v_pre_conv,
            v_pre_bc2,
        });
        outputs.push(work.velocity.clone());
    }

    Ok((outputs, tape))
}

impl GradientTape {
    /// Re-run the recorded rollout from the stored initial state.
    pub fn replay(&self) -> Result<Vec<VectorField>> {
        let mut grid = SimGrid::new(self.cells.dims(), self.dx, self.origin)?;
        grid.cells = self.cells.clone();
        grid.inlet = self.inlet;
        grid.outlet = self.outlet;
        grid.velocity = self.v0.clone();
        grid.pressure = self.p0.clone();
        let (outputs, _) = rollout(&grid, &self.params, self.records.len(), &self.cfg)?;
        Ok(outputs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Exact adjoint of the truncated iterations recorded on the tape.
    RecordedJacobi,
    /// Sensitivities of the converged solution via auxiliary Poisson solves.
    AuxiliaryPoisson,
}

/// Accumulate parameter gradients from per-step output cotangents.
///
/// `loss_grads[s]` is dLoss/d(output of step s); entries may be `None`
/// for unsupervised steps. Also returns d/d(v0) of the objective.
pub fn backward(
    tape: &GradientTape,
    loss_grads: &[Option<VectorField>],
    mode: GradMode,
) -> Result<(ParamGrads, VectorField)> {
    if loss_grads.len() != tape.records.len() {
        return Err(Error::IncompleteTape(format!(
            "{} loss gradients for {} recorded steps",
            loss_grads.len(),
            tape.records.len()
        )));
    }
    let dims = tape.cells.dims();
    let refs = poisson_refs(&tape.cells);
    let params = &tape.params;
    let mut grads = ParamGrads::default();
    let mut v_bar = VectorField::zeros_vec(dims);
    // d/d(p_final of the previous step) through the warm start.
    let mut p_warm_bar = ScalarField::zeros(dims);

    let inlet_normal = tape.inlet.map(|p| p.inward_normal()).unwrap_or_else(Vector3::zeros);

    for (s, record) in tape.records.iter().enumerate().rev() {
        if let Some(g) = &loss_grads[s] {
            if !g.same_dims(&v_bar) {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    got: g.dims(),
                });
            }
            for idx in 0..v_bar.len() {
                v_bar[idx] += g[idx];
            }
        }

        // Trailing boundary pass.
        adjoint_boundary(tape, record.step_index, &record.v_pre_bc2, &mut v_bar, &mut grads, inlet_normal);

        // Convection surrogate.
        adjoint_convection(tape, &record.v_pre_conv, &mut v_bar, &mut grads);

        // Viscosity.
        adjoint_viscosity(tape, &record.v_pre_visc, &mut v_bar, &mut grads);

        // Pressure-gradient subtraction: v_bar passes through unchanged;
        // cotangents flow into the pressure and rho/dt.
        let mut p_bar = std::mem::replace(&mut p_warm_bar, ScalarField::zeros(dims));
        adjoint_subtract_pressure(tape, &refs, &record.p_final, &v_bar, &mut p_bar, &mut grads);

        // Pressure solve.
        let mut div_bar = ScalarField::zeros(dims);
        let p_init_bar = match mode {
            GradMode::RecordedJacobi => {
                adjoint_pressure_recorded(tape, &refs, record, &p_bar, &mut div_bar, &mut grads)?
            }
            GradMode::AuxiliaryPoisson => {
                adjoint_pressure_auxiliary(tape, record, &p_bar, &mut div_bar, &mut grads)?
            }
        };
        p_warm_bar = p_init_bar;

        // Divergence.
        let grid_view = grid_view(tape);
        divergence_adjoint_on(&grid_view, &div_bar, &mut v_bar);

        // Body force: identity on velocity, gradient to g and dt.
        for idx in 0..v_bar.len() {
            if tape.cells[idx].is_fluid() {
                grads.gravity += v_bar[idx] * params.dt;
                grads.dt += v_bar[idx].dot(&params.gravity);
            }
        }

        // Leading boundary pass.
        adjoint_boundary(tape, record.step_index, &record.v_pre_bc1, &mut v_bar, &mut grads, inlet_normal);
    }

    Ok((grads, v_bar))
}

/// A SimGrid shell over the tape's geometry for operators that only read
/// cells/dims/dx.
fn grid_view(tape: &GradientTape) -> SimGrid {
    SimGrid {
        dims: tape.cells.dims(),
        dx: tape.dx,
        origin: tape.origin,
        velocity: VectorField::zeros_vec(tape.cells.dims()),
        pressure: ScalarField::zeros(tape.cells.dims()),
        divergence: ScalarField::zeros(tape.cells.dims()),
        cells: tape.cells.clone(),
        inlet: tape.inlet,
        outlet: tape.outlet,
    }
}

fn divergence_adjoint_on(grid: &SimGrid, div_bar: &ScalarField, v_bar: &mut VectorField) {
    divergence_adjoint(grid, div_bar, v_bar);
}

fn adjoint_boundary(
    tape: &GradientTape,
    step_index: u32,
    v_in_field: &VectorField,
    v_bar: &mut VectorField,
    grads: &mut ParamGrads,
    inlet_normal: Vector3<f64>,
) {
    let params = &tape.params;
    let coeffs = params.coefficients();
    let cells = &tape.cells;
    let sin_term = (params.omega * step_index as f64).sin();
    for idx in 0..cells.len() {
        match cells[idx] {
            CellType::Inlet => {
                grads.v_in += v_bar[idx];
                grads.v_tilde_in += v_bar[idx].dot(&inlet_normal) * sin_term;
                v_bar[idx] = Vector3::zeros();
            }
            CellType::Outlet => {
                grads.v_out += v_bar[idx];
                v_bar[idx] = Vector3::zeros();
            }
            CellType::Fluid | CellType::Surface => {
                let [i, j, k] = cells.coords(idx);
                // Recompute the forward decision sequence from the recorded
                // input, keeping the intermediate states.
                let mut states: Vec<(usize, f64, Vector3<f64>)> = Vec::new();
                let mut v = v_in_field[idx];
                for (axis, dir, wall) in wall_faces(cells, cells.dims(), i, j, k) {
                    if !wall {
                        continue;
                    }
                    let before = v;
                    apply_wall_face(&mut v, axis, dir, &coeffs);
                    if v != before {
                        states.push((axis, dir, before));
                    }
                }
                // Reverse the applied scalings.
                let mut g = v_bar[idx];
                for &(axis, _dir, before) in states.iter().rev() {
                    grads.bounce += g[axis] * (-before[axis]);
                    g[axis] *= -coeffs.bounce;
                    for t in 0..3 {
                        if t != axis {
                            grads.damp += g[t] * (-before[t]);
                            g[t] *= 1.0 - coeffs.damp;
                        }
                    }
                }
                v_bar[idx] = g;
            }
            _ => {}
        }
    }
}

fn adjoint_convection(tape: &GradientTape, v_old: &VectorField, v_bar: &mut VectorField, grads: &mut ParamGrads) {
    let cells = &tape.cells;
    let dt = tape.params.dt;
    let mut out = v_bar.clone();
    for idx in 0..cells.len() {
        if !cells[idx].is_fluid() {
            continue;
        }
        let g = v_bar[idx];
        if g == Vector3::zeros() {
            continue;
        }
        let grad = upwind_gradient(v_old, cells, tape.dx, idx);
        // v_bar_old[axis] = g[axis] - dt * sum_c g[c] * dv_c/dx_axis
        let mut nb = g;
        for axis in 0..3 {
            let mut acc = 0.0;
            for c in 0..3 {
                acc += g[c] * grad[c][axis];
            }
            nb[axis] -= dt * acc;
        }
        out[idx] = nb;
        // dt gradient: d v_new / d dt = -(v . grad) v.
        let mut conv = Vector3::zeros();
        for c in 0..3 {
            for axis in 0..3 {
                conv[c] += v_old[idx][axis] * grad[c][axis];
            }
        }
        grads.dt -= g.dot(&conv);
    }
    *v_bar = out;
}

fn adjoint_viscosity(tape: &GradientTape, v_pre: &VectorField, v_bar: &mut VectorField, grads: &mut ParamGrads) {
    let params = &tape.params;
    if params.nu == 0.0 {
        return;
    }
    let rate = viscous_rate(v_pre, &tape.cells, tape.dx);
    let mut dot = 0.0;
    for idx in 0..v_bar.len() {
        if tape.cells[idx].is_fluid() {
            dot += v_bar[idx].dot(&rate[idx]);
        }
    }
    grads.nu += params.dt * dot;
    grads.dt += params.nu * dot;
    // v_bar += dt nu L^T (v_bar restricted to fluid rows).
    let mut lt = VectorField::zeros_vec(v_bar.dims());
    viscous_rate_adjoint(v_bar, &tape.cells, tape.dx, &mut lt);
    for idx in 0..v_bar.len() {
        v_bar[idx] += lt[idx] * (params.dt * params.nu);
    }
}

fn adjoint_subtract_pressure(
    tape: &GradientTape,
    refs: &PoissonRefs,
    p: &ScalarField,
    v_bar: &VectorField,
    p_bar: &mut ScalarField,
    grads: &mut ParamGrads,
) {
    let params = &tape.params;
    let scale = params.dt / (params.rho * 2.0 * tape.dx);
    for &idx in &refs.fluid {
        let r = &refs.refs[idx];
        let g = v_bar[idx];
        for axis in 0..3 {
            let ga = g[axis];
            if ga == 0.0 {
                continue;
            }
            let lo = pressure_tap(p, r[2 * axis], idx);
            let hi = pressure_tap(p, r[2 * axis + 1], idx);
            // v[axis] -= scale * (hi - lo)
            grads.rho += ga * (params.dt / (params.rho * params.rho * 2.0 * tape.dx)) * (hi - lo);
            grads.dt -= ga * (hi - lo) / (params.rho * 2.0 * tape.dx);
            let c = -ga * scale;
            scatter_pressure_tap(p_bar, r[2 * axis + 1], idx, c);
            scatter_pressure_tap(p_bar, r[2 * axis], idx, -c);
        }
    }
}

#[inline]
fn scatter_pressure_tap(p_bar: &mut ScalarField, r: i64, center: usize, val: f64) {
    if r >= 0 {
        p_bar[r as usize] += val;
    } else if r == ZERO_GRAD {
        p_bar[center] += val;
    }
}

/// Exact adjoint of the recorded truncated pressure iterations. Returns the
/// cotangent of the warm-start pressure.
fn adjoint_pressure_recorded(
    tape: &GradientTape,
    refs: &PoissonRefs,
    record: &StepRecord,
    p_bar_in: &ScalarField,
    div_bar: &mut ScalarField,
    grads: &mut ParamGrads,
) -> Result<ScalarField> {
    let params = &tape.params;
    let dims = tape.cells.dims();
    let dx = tape.dx;
    let iters = tape.cfg.pressure_iters;
    let mut p_bar = p_bar_in.clone();
    let mut q_bar = ScalarField::zeros(dims);

    match &tape.cfg.solver {
        SolverKind::Jacobi => {
            // p^k = (sum_fluid p^{k-1} + n_zg p^{k-1}(x) - dx^2 q) / 6
            for _ in 0..iters {
                let mut prev_bar = ScalarField::zeros(dims);
                for &idx in &refs.fluid {
                    let g = p_bar[idx];
                    if g == 0.0 {
                        continue;
                    }
                    q_bar[idx] -= g * dx * dx / 6.0;
                    for &r in &refs.refs[idx] {
                        if r >= 0 {
                            prev_bar[r as usize] += g / 6.0;
                        } else if r == ZERO_GRAD {
                            prev_bar[idx] += g / 6.0;
                        }
                    }
                }
                p_bar = prev_bar;
            }
            // q = rho div / dt
            for &idx in &refs.fluid {
                let qb = q_bar[idx];
                if qb == 0.0 {
                    continue;
                }
                div_bar[idx] += qb * params.rho / params.dt;
                grads.rho += qb * record.div[idx] / params.dt;
                grads.dt -= qb * params.rho * record.div[idx] / (params.dt * params.dt);
            }
        }
        SolverKind::StencilRecurrent(solver) => {
            let (fluid, srefs) = stencil_refs(&tape.cells);
            let source = solver.source_gain * dx * dx * params.rho / params.dt;
            let mut src_bar = 0.0;
            for _ in 0..iters {
                let mut prev_bar = ScalarField::zeros(dims);
                for &idx in &fluid {
                    let g = p_bar[idx];
                    if g == 0.0 {
                        continue;
                    }
                    src_bar += g * record.div[idx];
                    div_bar[idx] += g * source;
                    for (t, &r) in srefs[idx].iter().enumerate() {
                        let w = stencil_weight(&solver.stencil, t);
                        if w == 0.0 {
                            continue;
                        }
                        if r >= 0 {
                            prev_bar[r as usize] += g * w;
                        } else if r == ZERO_GRAD {
                            prev_bar[idx] += g * w;
                        }
                    }
                }
                p_bar = prev_bar;
            }
            // source = gain dx^2 rho / dt
            grads.rho += src_bar * solver.source_gain * dx * dx / params.dt;
            grads.dt -= src_bar * solver.source_gain * dx * dx * params.rho / (params.dt * params.dt);
            let _ = DIRICHLET;
        }
    }
    // The warm start only enters through fluid cells (sanitized elsewhere).
    Ok(sanitize_pressure(&p_bar, &tape.cells))
}

/// Pressure sensitivities of the converged solve: one auxiliary Poisson
/// solve yields the divergence cotangent, and the rho/dt sensitivities
/// follow in closed form from the solved pressure itself.
fn adjoint_pressure_auxiliary(
    tape: &GradientTape,
    record: &StepRecord,
    p_bar: &ScalarField,
    div_bar: &mut ScalarField,
    grads: &mut ParamGrads,
) -> Result<ScalarField> {
    let params = &tape.params;
    let dims = tape.cells.dims();
    let refs = poisson_refs(&tape.cells);
    // Solve A z = p_bar with the same masked system (A is symmetric).
    let mut z = ScalarField::zeros(dims);
    let q = sanitize_pressure(p_bar, &tape.cells);
    let mut next = z.clone();
    // Match the forward solver's effort for comparable truncation.
    let aux_iters = tape.cfg.pressure_iters.max(100) * 4;
    for _ in 0..aux_iters {
        jacobi_sweep(&refs, &z, &q, tape.dx, &mut next);
        std::mem::swap(&mut z, &mut next);
    }
    for &idx in &refs.fluid {
        div_bar[idx] += z[idx] * params.rho / params.dt;
        // dp/drho = p/rho, dp/ddt = -p/dt for the converged solution.
        grads.rho += p_bar[idx] * record.p_final[idx] / params.rho;
        grads.dt -= p_bar[idx] * record.p_final[idx] / params.dt;
    }
    // The converged solution is independent of the warm start.
    Ok(ScalarField::zeros(dims))
}
