// diagnostic: twin recovery on a free-sheet channel (gravity observable)
use freshet::field::*;
use freshet::grid::*;
use freshet::optimize::*;
use freshet::params::*;
use freshet::step::*;
use freshet::loss::*;
use nalgebra::Vector3;
use std::time::Instant;

fn sheet_grid(dims: [usize; 3]) -> SimGrid {
    let mut g = SimGrid::new(dims, 0.1, Vector3::zeros()).unwrap();
    // Horizontal fluid sheet with empty above and below: a jet pouring
    // across the domain. Solid floor at the bottom.
    let fluid = Field3::from_fn(dims, |_, j, k| (7..=9).contains(&j) && k >= 2 && k <= dims[2] - 3);
    let solid = Field3::from_fn(dims, |_, j, _| j == 0);
    g.classify_cells(&fluid, &solid, Some(PlaneSpec { axis: 0, high: false }), Some(PlaneSpec { axis: 0, high: true })).unwrap();
    g
}

fn main() {
    let truth = SimParams {
        v_in: Vector3::new(0.3, 0.0, 0.0),
        v_tilde_in: 1e-4,
        v_out: Vector3::new(0.3, 0.0, 0.0),
        rho: 1000.0, nu: 1e-5, bounce: 0.3, damp: 0.2,
        gravity: Vector3::new(0.0, -2.0, 0.0), dt: 0.02,
        ..SimParams::default()
    };
    let step_cfg = StepConfig { pressure_iters: 150, ..StepConfig::default() };
    let t0 = Instant::now();
    let mut g = sheet_grid([16, 16, 16]);
    for idx in 0..g.cell_count() {
        if g.cells[idx].is_fluid() { g.velocity[idx] = truth.v_in; }
    }
    step(&mut g, &truth, &step_cfg, 0).unwrap();
    let mut guidance = vec![g.velocity.clone()];
    for s in 0..6 { step(&mut g, &truth, &step_cfg, (1 + s) as u32).unwrap(); guidance.push(g.velocity.clone()); }

    let mut init = truth;
    init.gravity *= 3.0;
    init.rho *= 3.0;
    init.v_in *= 3.0;
    let template = sheet_grid([16, 16, 16]);
    for iters in [200usize, 400] {
        let cfg = OptimizeConfig { iterations: iters, ..OptimizeConfig::default() }
            .with_free_components(&["g", "rho", "v_in"]);
        let report = optimize(&guidance, &template, init, &LossWeights::default(), &step_cfg, &cfg).unwrap();
        println!("iters={iters} |g|={:.4} g=({:.3},{:.3},{:.3}) v_in.x={:.4} rho={:.1} loss {:.3e} -> {:.3e} ratio {:.1} [{:?}]",
            report.params.gravity.norm(), report.params.gravity.x, report.params.gravity.y, report.params.gravity.z,
            report.params.v_in.x, report.params.rho, report.initial_loss, report.best_loss,
            report.initial_loss / report.best_loss, t0.elapsed());
    }
}
