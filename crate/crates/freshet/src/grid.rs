//! Uniform collocated 3D grid: cell typing, finite differences, boundary
//! conditions.
//!
//! Velocity, pressure and divergence all live at cell centers. Divergence
//! and pressure gradient use central differences on interior cells and
//! one-sided differences against the domain boundary. The domain boundary
//! itself behaves like a solid wall unless a cell is typed INLET or OUTLET.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::{Field3, ScalarField, VectorField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellType {
    Empty,
    Fluid,
    Surface,
    Solid,
    Inlet,
    Outlet,
}

impl CellType {
    /// Boundary-condition cells: velocity is prescribed, not evolved.
    #[inline]
    pub fn is_bc(self) -> bool {
        matches!(self, CellType::Solid | CellType::Inlet | CellType::Outlet)
    }

    /// Cells carrying evolving fluid velocity.
    #[inline]
    pub fn is_fluid(self) -> bool {
        matches!(self, CellType::Fluid | CellType::Surface)
    }
}

pub type CellField = Field3<CellType>;

/// Wall response: `bounce` scales the reflected normal component,
/// `damp` attenuates the tangential components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryCoefficients {
    pub bounce: f64,
    pub damp: f64,
}

impl BoundaryCoefficients {
    pub fn new(bounce: f64, damp: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&bounce) || !(0.0..=1.0).contains(&damp) {
            return Err(Error::InvalidArgument(format!(
                "boundary coefficients must lie in [0,1], got bounce={bounce}, damp={damp}"
            )));
        }
        Ok(Self { bounce, damp })
    }
}

/// Axis-aligned boundary plane of the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlaneSpec {
    /// 0 = x, 1 = y, 2 = z.
    pub axis: usize,
    /// Low face (index 0) or high face (index dims-1).
    pub high: bool,
}

impl PlaneSpec {
    /// Unit normal pointing from the plane into the domain.
    pub fn inward_normal(&self) -> Vector3<f64> {
        let mut n = Vector3::zeros();
        n[self.axis] = if self.high { -1.0 } else { 1.0 };
        n
    }

    pub fn plane_index(&self, dims: [usize; 3]) -> usize {
        if self.high {
            dims[self.axis] - 1
        } else {
            0
        }
    }

    pub fn contains(&self, c: [usize; 3], dims: [usize; 3]) -> bool {
        c[self.axis] == self.plane_index(dims)
    }
}

/// Inlet/outlet drive applied by `apply_boundary_conditions`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryDrive {
    pub v_in: Vector3<f64>,
    /// Amplitude of the zero-mean sinusoidal inlet fluctuation (m/s),
    /// applied along the inlet plane's inward normal.
    pub v_tilde_in: f64,
    pub v_out: Vector3<f64>,
    /// Fluctuation angular rate per step.
    pub omega: f64,
}

impl BoundaryDrive {
    pub fn steady(v_in: Vector3<f64>, v_out: Vector3<f64>) -> Self {
        Self {
            v_in,
            v_tilde_in: 0.0,
            v_out,
            omega: DEFAULT_FLUCTUATION_OMEGA,
        }
    }

    /// Inlet velocity at a given step.
    pub fn inlet_velocity(&self, inward: Vector3<f64>, step_index: u32) -> Vector3<f64> {
        self.v_in + inward * (self.v_tilde_in * (self.omega * step_index as f64).sin())
    }
}

pub const DEFAULT_FLUCTUATION_OMEGA: f64 = 0.7;

#[derive(Debug, Clone, PartialEq)]
pub struct SimGrid {
    pub dims: [usize; 3],
    pub dx: f64,
    pub origin: Vector3<f64>,
    pub velocity: VectorField,
    pub pressure: ScalarField,
    pub divergence: ScalarField,
    pub cells: CellField,
    pub inlet: Option<PlaneSpec>,
    pub outlet: Option<PlaneSpec>,
}

impl SimGrid {
    pub fn new(dims: [usize; 3], dx: f64, origin: Vector3<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!("grid dims must be positive, got {dims:?}")));
        }
        if dx <= 0.0 {
            return Err(Error::InvalidArgument(format!("dx must be positive, got {dx}")));
        }
        Ok(Self {
            dims,
            dx,
            origin,
            velocity: VectorField::zeros_vec(dims),
            pressure: ScalarField::zeros(dims),
            divergence: ScalarField::zeros(dims),
            cells: Field3::filled(dims, CellType::Empty),
            inlet: None,
            outlet: None,
        })
    }

    pub fn cell_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// World position of a cell center.
    #[inline]
    pub fn cell_center(&self, i: usize, j: usize, k: usize) -> Vector3<f64> {
        self.origin + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * self.dx
    }

    /// Classify cells from occupancy fields and optional inlet/outlet planes.
    ///
    /// Precedence on overlap: SOLID > INLET/OUTLET > FLUID. SURFACE is a
    /// FLUID cell with at least one EMPTY face neighbor; the domain boundary
    /// does not count as empty.
    pub fn classify_cells(
        &mut self,
        fluid_occupancy: &Field3<bool>,
        solid_occupancy: &Field3<bool>,
        inlet: Option<PlaneSpec>,
        outlet: Option<PlaneSpec>,
    ) -> Result<()> {
        if !fluid_occupancy.same_dims(&self.cells) {
            return Err(Error::DimensionMismatch {
                expected: self.dims,
                got: fluid_occupancy.dims(),
            });
        }
        if !solid_occupancy.same_dims(&self.cells) {
            return Err(Error::DimensionMismatch {
                expected: self.dims,
                got: solid_occupancy.dims(),
            });
        }
        for plane in [inlet, outlet].into_iter().flatten() {
            if plane.axis > 2 {
                return Err(Error::InvalidArgument(format!("plane axis must be 0..3, got {}", plane.axis)));
            }
        }
        if let (Some(a), Some(b)) = (inlet, outlet) {
            if a == b {
                return Err(Error::OverlappingPlanes);
            }
        }

        let dims = self.dims;
        for idx in 0..self.cell_count() {
            let c = self.cells.coords(idx);
            let t = if solid_occupancy[idx] {
                CellType::Solid
            } else if inlet.is_some_and(|p| p.contains(c, dims)) && fluid_occupancy[idx] {
                CellType::Inlet
            } else if outlet.is_some_and(|p| p.contains(c, dims)) && fluid_occupancy[idx] {
                CellType::Outlet
            } else if fluid_occupancy[idx] {
                CellType::Fluid
            } else {
                CellType::Empty
            };
            self.cells[idx] = t;
        }

        // Second pass: surface cells.
        for idx in 0..self.cell_count() {
            if self.cells[idx] != CellType::Fluid {
                continue;
            }
            let [i, j, k] = self.cells.coords(idx);
            let mut exposed = false;
            for (di, dj, dk) in FACE_NEIGHBORS {
                if let Some(n) = self.cells.idx_checked(i as i64 + di, j as i64 + dj, k as i64 + dk) {
                    if self.cells[n] == CellType::Empty {
                        exposed = true;
                        break;
                    }
                }
            }
            if exposed {
                self.cells[idx] = CellType::Surface;
            }
        }

        self.inlet = inlet;
        self.outlet = outlet;
        Ok(())
    }
}

pub const FACE_NEIGHBORS: [(i64, i64, i64); 6] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
];

/// Central-difference divergence on fluid cells, one-sided against the
/// domain boundary; boundary-condition and empty cells report zero.
pub fn divergence(grid: &SimGrid) -> ScalarField {
    let mut div = ScalarField::zeros(grid.dims);
    let v = &grid.velocity;
    let dx = grid.dx;
    for idx in 0..grid.cell_count() {
        if !grid.cells[idx].is_fluid() {
            continue;
        }
        let [i, j, k] = v.coords(idx);
        let mut sum = 0.0;
        for axis in 0..3 {
            let (mut lo, mut hi) = ([i as i64, j as i64, k as i64], [i as i64, j as i64, k as i64]);
            lo[axis] -= 1;
            hi[axis] += 1;
            let lo_idx = v.idx_checked(lo[0], lo[1], lo[2]);
            let hi_idx = v.idx_checked(hi[0], hi[1], hi[2]);
            sum += match (lo_idx, hi_idx) {
                (Some(l), Some(h)) => (v[h][axis] - v[l][axis]) / (2.0 * dx),
                (None, Some(h)) => (v[h][axis] - v[idx][axis]) / dx,
                (Some(l), None) => (v[idx][axis] - v[l][axis]) / dx,
                (None, None) => 0.0,
            };
        }
        div[idx] = sum;
    }
    div
}

/// Adjoint of `divergence`: scatters a divergence cotangent back onto the
/// velocity field with the exact stencil coefficients of the forward pass.
pub fn divergence_adjoint(grid: &SimGrid, div_bar: &ScalarField, v_bar: &mut VectorField) {
    let dx = grid.dx;
    for idx in 0..grid.cell_count() {
        if !grid.cells[idx].is_fluid() {
            continue;
        }
        let g = div_bar[idx];
        if g == 0.0 {
            continue;
        }
        let [i, j, k] = grid.cells.coords(idx);
        for axis in 0..3 {
            let (mut lo, mut hi) = ([i as i64, j as i64, k as i64], [i as i64, j as i64, k as i64]);
            lo[axis] -= 1;
            hi[axis] += 1;
            let lo_idx = grid.cells.idx_checked(lo[0], lo[1], lo[2]);
            let hi_idx = grid.cells.idx_checked(hi[0], hi[1], hi[2]);
            match (lo_idx, hi_idx) {
                (Some(l), Some(h)) => {
                    v_bar[h][axis] += g / (2.0 * dx);
                    v_bar[l][axis] -= g / (2.0 * dx);
                }
                (None, Some(h)) => {
                    v_bar[h][axis] += g / dx;
                    v_bar[idx][axis] -= g / dx;
                }
                (Some(l), None) => {
                    v_bar[idx][axis] += g / dx;
                    v_bar[l][axis] -= g / dx;
                }
                (None, None) => {}
            }
        }
    }
}

/// Apply wall reflection/damping and inlet/outlet velocities in place.
///
/// Wall handling fires at fluid cells whose face neighbor is SOLID (or
/// outside the domain) when the velocity points into that wall: the normal
/// component reflects scaled by `-bounce`, the tangential components are
/// scaled by `1 - damp`. Inlet cells are set to `v_in` plus the sinusoidal
/// fluctuation along the inlet's inward normal; outlet cells to `v_out`.
pub fn apply_boundary_conditions(
    grid: &mut SimGrid,
    coeffs: &BoundaryCoefficients,
    drive: &BoundaryDrive,
    step_index: u32,
) {
    let dims = grid.dims;
    let inlet_normal = grid.inlet.map(|p| p.inward_normal()).unwrap_or_else(Vector3::zeros);
    for idx in 0..grid.cell_count() {
        match grid.cells[idx] {
            CellType::Inlet => {
                grid.velocity[idx] = drive.inlet_velocity(inlet_normal, step_index);
            }
            CellType::Outlet => {
                grid.velocity[idx] = drive.v_out;
            }
            CellType::Fluid | CellType::Surface => {
                let [i, j, k] = grid.cells.coords(idx);
                let mut v = grid.velocity[idx];
                for (axis, dir, wall) in wall_faces(&grid.cells, dims, i, j, k) {
                    if !wall {
                        continue;
                    }
                    apply_wall_face(&mut v, axis, dir, coeffs);
                }
                grid.velocity[idx] = v;
            }
            _ => {}
        }
    }
}

/// Iterator over the six faces of a cell: (axis, direction sign, is_wall).
/// A face is a wall when the neighbor is SOLID or outside the domain.
pub fn wall_faces(
    cells: &CellField,
    _dims: [usize; 3],
    i: usize,
    j: usize,
    k: usize,
) -> impl Iterator<Item = (usize, f64, bool)> + '_ {
    FACE_NEIGHBORS.iter().map(move |&(di, dj, dk)| {
        let axis = if di != 0 { 0 } else if dj != 0 { 1 } else { 2 };
        let dir = (di + dj + dk) as f64;
        let wall = match cells.idx_checked(i as i64 + di, j as i64 + dj, k as i64 + dk) {
            Some(n) => cells[n] == CellType::Solid,
            None => true,
        };
        (axis, dir, wall)
    })
}

/// Wall response on one face. `dir` is +1/-1: the outward direction of the
/// face along `axis`. Fires only when the velocity points into the wall.
#[inline]
pub fn apply_wall_face(v: &mut Vector3<f64>, axis: usize, dir: f64, coeffs: &BoundaryCoefficients) {
    let vn = v[axis] * dir;
    if vn <= 0.0 {
        return;
    }
    v[axis] = -coeffs.bounce * vn * dir;
    for t in 0..3 {
        if t != axis {
            v[t] *= 1.0 - coeffs.damp;
        }
    }
}
