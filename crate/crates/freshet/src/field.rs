//! Dense 3D grid fields and 2D rasters with x-fastest storage.

use nalgebra::Vector3;

/// Dense per-cell storage over a `dims` box, x-fastest then y then z.
#[derive(Debug, Clone, PartialEq)]
pub struct Field3<T> {
    dims: [usize; 3],
    data: Vec<T>,
}

impl<T: Clone> Field3<T> {
    pub fn filled(dims: [usize; 3], value: T) -> Self {
        let len = dims[0] * dims[1] * dims[2];
        Self {
            dims,
            data: vec![value; len],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Self { dims, data }
    }

    pub fn fill(&mut self, value: T) {
        self.data.fill(value);
    }
}

impl<T> Field3<T> {
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    /// Cell coordinates of a flat index.
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let i = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [i, rest % self.dims[1], rest / self.dims[1]]
    }

    #[inline]
    pub fn in_bounds(&self, i: i64, j: i64, k: i64) -> bool {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < self.dims[0]
            && (j as usize) < self.dims[1]
            && (k as usize) < self.dims[2]
    }

    /// Flat index of a signed coordinate, `None` when outside the box.
    #[inline]
    pub fn idx_checked(&self, i: i64, j: i64, k: i64) -> Option<usize> {
        if self.in_bounds(i, j, k) {
            Some(self.idx(i as usize, j as usize, k as usize))
        } else {
            None
        }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, T> {
        self.data.iter_mut()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_dims<U>(&self, other: &Field3<U>) -> bool {
        self.dims == other.dims
    }
}

impl<T> std::ops::Index<usize> for Field3<T> {
    type Output = T;
    #[inline]
    fn index(&self, idx: usize) -> &T {
        &self.data[idx]
    }
}

impl<T> std::ops::IndexMut<usize> for Field3<T> {
    #[inline]
    fn index_mut(&mut self, idx: usize) -> &mut T {
        &mut self.data[idx]
    }
}

impl<T> std::ops::Index<[usize; 3]> for Field3<T> {
    type Output = T;
    #[inline]
    fn index(&self, c: [usize; 3]) -> &T {
        &self.data[self.idx(c[0], c[1], c[2])]
    }
}

impl<T> std::ops::IndexMut<[usize; 3]> for Field3<T> {
    #[inline]
    fn index_mut(&mut self, c: [usize; 3]) -> &mut T {
        let idx = self.idx(c[0], c[1], c[2]);
        &mut self.data[idx]
    }
}

pub type ScalarField = Field3<f64>;
pub type VectorField = Field3<Vector3<f64>>;

impl ScalarField {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

impl VectorField {
    pub fn zeros_vec(dims: [usize; 3]) -> Self {
        Self::filled(dims, Vector3::zeros())
    }

    pub fn max_norm(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.norm()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.x.is_finite() && v.y.is_finite() && v.z.is_finite())
    }
}

/// Trilinear interpolation of a vector field stored at cell centers.
///
/// `pos` is in world coordinates; the sample point is clamped to the
/// box spanned by the outermost cell centers.
pub fn trilinear(field: &VectorField, origin: Vector3<f64>, dx: f64, pos: Vector3<f64>) -> Vector3<f64> {
    let dims = field.dims();
    // Position in cell-center index space.
    let mut u = [0.0; 3];
    for a in 0..3 {
        let x = (pos[a] - origin[a]) / dx - 0.5;
        u[a] = x.clamp(0.0, (dims[a] - 1) as f64);
    }
    let base = [
        (u[0].floor() as usize).min(dims[0] - 1),
        (u[1].floor() as usize).min(dims[1] - 1),
        (u[2].floor() as usize).min(dims[2] - 1),
    ];
    let hi = [
        (base[0] + 1).min(dims[0] - 1),
        (base[1] + 1).min(dims[1] - 1),
        (base[2] + 1).min(dims[2] - 1),
    ];
    let f = [u[0] - base[0] as f64, u[1] - base[1] as f64, u[2] - base[2] as f64];

    let mut out = Vector3::zeros();
    for (ci, &ii) in [base[0], hi[0]].iter().enumerate() {
        let wx = if ci == 0 { 1.0 - f[0] } else { f[0] };
        for (cj, &jj) in [base[1], hi[1]].iter().enumerate() {
            let wy = if cj == 0 { 1.0 - f[1] } else { f[1] };
            for (ck, &kk) in [base[2], hi[2]].iter().enumerate() {
                let wz = if ck == 0 { 1.0 - f[2] } else { f[2] };
                out += field[[ii, jj, kk]] * (wx * wy * wz);
            }
        }
    }
    out
}

/// Dense row-major H x W raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Clone> Raster<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }
}

impl<T> Raster<T> {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize) -> usize {
        debug_assert!(y < self.height && x < self.width);
        y * self.width + x
    }

    #[inline]
    pub fn in_bounds(&self, y: i64, x: i64) -> bool {
        y >= 0 && x >= 0 && (y as usize) < self.height && (x as usize) < self.width
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn same_dims<U>(&self, other: &Raster<U>) -> bool {
        self.height == other.height && self.width == other.width
    }
}

impl<T> std::ops::Index<(usize, usize)> for Raster<T> {
    type Output = T;
    #[inline]
    fn index(&self, (y, x): (usize, usize)) -> &T {
        &self.data[self.idx(y, x)]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Raster<T> {
    #[inline]
    fn index_mut(&mut self, (y, x): (usize, usize)) -> &mut T {
        let idx = self.idx(y, x);
        &mut self.data[idx]
    }
}
