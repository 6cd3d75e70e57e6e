//! Point-cloud cleanup: pruning, interior filling by boundary flood fill,
//! motion-adaptive batch sizing, and cross-frame union with voxel
//! deduplication.

use std::collections::HashMap;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::field::Field3;

/// Gaussian point cloud: aligned per-point arrays. `scales` and
/// `rotations` carry the raw splat parameters the covariance was built
/// from (synthesized for points created internally).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vector3<f64>>,
    pub opacities: Vec<f64>,
    pub covariances: Vec<Matrix3<f64>>,
    pub colors: Vec<[f32; 3]>,
    pub scales: Vec<[f32; 3]>,
    /// Quaternion (w, x, y, z).
    pub rotations: Vec<[f32; 4]>,
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(
        &mut self,
        position: Vector3<f64>,
        opacity: f64,
        covariance: Matrix3<f64>,
        color: [f32; 3],
        scale: [f32; 3],
        rotation: [f32; 4],
    ) {
        self.positions.push(position);
        self.opacities.push(opacity);
        self.covariances.push(covariance);
        self.colors.push(color);
        self.scales.push(scale);
        self.rotations.push(rotation);
    }

    /// Push a point with an isotropic covariance of the given radius.
    pub fn push_isotropic(&mut self, position: Vector3<f64>, opacity: f64, radius: f64, color: [f32; 3]) {
        let r = radius as f32;
        self.push(
            position,
            opacity,
            Matrix3::identity() * (radius * radius),
            color,
            [r, r, r],
            [1.0, 0.0, 0.0, 0.0],
        );
    }

    fn keep(&self, mask: &[bool]) -> GaussianCloud {
        let mut out = GaussianCloud::default();
        for i in 0..self.len() {
            if mask[i] {
                out.push(
                    self.positions[i],
                    self.opacities[i],
                    self.covariances[i],
                    self.colors[i],
                    self.scales[i],
                    self.rotations[i],
                );
            }
        }
        out
    }

    pub fn nearest_point(&self, p: Vector3<f64>) -> Option<usize> {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for (i, q) in self.positions.iter().enumerate() {
            let d = (q - p).norm_squared();
            if d < best_d {
                best_d = d;
                best = Some(i);
            }
        }
        best
    }
}

/// Remove points with low opacity or heavily stretched covariance
/// (eigenvalue ratio above `anisotropy_max`).
pub fn prune(cloud: &GaussianCloud, opacity_min: f64, anisotropy_max: f64) -> Result<GaussianCloud> {
    if opacity_min < 0.0 || anisotropy_max <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "prune thresholds must be positive, got opacity_min={opacity_min}, anisotropy_max={anisotropy_max}"
        )));
    }
    let mask: Vec<bool> = (0..cloud.len())
        .map(|i| {
            if cloud.opacities[i] < opacity_min {
                return false;
            }
            let eig = cloud.covariances[i].symmetric_eigenvalues();
            let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
            for &l in eig.iter() {
                lo = lo.min(l);
                hi = hi.max(l);
            }
            if lo <= 0.0 {
                return false;
            }
            hi / lo <= anisotropy_max
        })
        .collect();
    let out = cloud.keep(&mask);
    if out.is_empty() && !cloud.is_empty() {
        log::warn!("prune removed every point ({} in)", cloud.len());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FillReport {
    pub inserted: usize,
    pub grid_dims: [usize; 3],
}

/// Opacity-weighted Gaussian density rasterized on a dx-grid over the
/// cloud's padded bounding box. Returns the grid, its origin, and the
/// per-cell density.
pub fn rasterize_density(cloud: &GaussianCloud, dx: f64) -> Result<(Field3<f64>, Vector3<f64>)> {
    if dx <= 0.0 {
        return Err(Error::InvalidArgument(format!("dx must be positive, got {dx}")));
    }
    if cloud.is_empty() {
        return Err(Error::EmptyInput("cannot rasterize an empty cloud".into()));
    }
    let mut lo = cloud.positions[0];
    let mut hi = cloud.positions[0];
    for p in &cloud.positions {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    // One padding cell so the boundary flood fill has an empty ring.
    let origin = lo - Vector3::repeat(1.5 * dx);
    let dims = [
        ((hi.x - origin.x) / dx).ceil() as usize + 2,
        ((hi.y - origin.y) / dx).ceil() as usize + 2,
        ((hi.z - origin.z) / dx).ceil() as usize + 2,
    ];
    let mut density = Field3::filled(dims, 0.0);

    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let cov = cloud.covariances[i];
        let inv = match cov.try_inverse() {
            Some(m) => m,
            None => continue,
        };
        let sigma_max = cov.symmetric_eigenvalues().iter().fold(0.0_f64, |m, &l| m.max(l)).sqrt();
        let radius = (3.0 * sigma_max).max(0.5 * dx);
        let cl = [
            (((p.x - radius - origin.x) / dx).floor().max(0.0)) as usize,
            (((p.y - radius - origin.y) / dx).floor().max(0.0)) as usize,
            (((p.z - radius - origin.z) / dx).floor().max(0.0)) as usize,
        ];
        let ch = [
            (((p.x + radius - origin.x) / dx).ceil() as usize).min(dims[0] - 1),
            (((p.y + radius - origin.y) / dx).ceil() as usize).min(dims[1] - 1),
            (((p.z + radius - origin.z) / dx).ceil() as usize).min(dims[2] - 1),
        ];
        for k in cl[2]..=ch[2] {
            for j in cl[1]..=ch[1] {
                for i2 in cl[0]..=ch[0] {
                    let center = origin + Vector3::new(i2 as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * dx;
                    let d = center - p;
                    let m = (d.transpose() * inv * d)[(0, 0)];
                    density[[i2, j, k]] += cloud.opacities[i] * (-0.5 * m).exp();
                }
            }
        }
    }
    Ok((density, origin))
}

/// Flood fill from the grid boundary through sub-threshold cells; cells the
/// fill cannot reach are interior voids.
pub fn boundary_reachable(occupied: &Field3<bool>) -> Field3<bool> {
    let dims = occupied.dims();
    let mut reached = Field3::filled(dims, false);
    let mut queue = std::collections::VecDeque::new();
    for idx in 0..occupied.len() {
        let [i, j, k] = occupied.coords(idx);
        let on_boundary =
            i == 0 || j == 0 || k == 0 || i == dims[0] - 1 || j == dims[1] - 1 || k == dims[2] - 1;
        if on_boundary && !occupied[idx] {
            reached[idx] = true;
            queue.push_back(idx);
        }
    }
    while let Some(idx) = queue.pop_front() {
        let [i, j, k] = occupied.coords(idx);
        for (di, dj, dk) in crate::grid::FACE_NEIGHBORS {
            if let Some(n) = occupied.idx_checked(i as i64 + di, j as i64 + dj, k as i64 + dk) {
                if !occupied[n] && !reached[n] {
                    reached[n] = true;
                    queue.push_back(n);
                }
            }
        }
    }
    reached
}

/// Insert one point at the center of every interior void cell: a cell
/// whose density is below threshold but which the boundary flood fill
/// cannot reach. Inserted points get opacity 1, an isotropic dx/4
/// covariance and the color of the nearest existing point.
pub fn fill_interior(cloud: &GaussianCloud, dx: f64, occupancy_threshold: f64) -> Result<(GaussianCloud, FillReport)> {
    let (density, origin) = rasterize_density(cloud, dx)?;
    let dims = density.dims();
    let peak = density.iter().fold(0.0_f64, |m, &v| m.max(v));
    let tau = occupancy_threshold * peak;
    let occupied = Field3::from_fn(dims, |i, j, k| density[[i, j, k]] >= tau && peak > 0.0);
    let reached = boundary_reachable(&occupied);

    let mut out = cloud.clone();
    let mut inserted = 0;
    for idx in 0..occupied.len() {
        if occupied[idx] || reached[idx] {
            continue;
        }
        let [i, j, k] = occupied.coords(idx);
        let center = origin + Vector3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * dx;
        let color = cloud.nearest_point(center).map(|n| cloud.colors[n]).unwrap_or([0.5; 3]);
        out.push_isotropic(center, 1.0, dx / 4.0, color);
        inserted += 1;
    }
    Ok((
        out,
        FillReport {
            inserted,
            grid_dims: dims,
        },
    ))
}

const PSNR_CAP_DB: f64 = 100.0;

/// Peak signal-to-noise ratio between two equally sized buffers, capped
/// for identical inputs.
pub fn psnr(a: &[f32], b: &[f32], peak: f64) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return PSNR_CAP_DB;
    }
    let mut mse = 0.0;
    for i in 0..n {
        let d = a[i] as f64 - b[i] as f64;
        mse += d * d;
    }
    mse /= n as f64;
    if mse <= 0.0 || peak <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

/// Pick the union batch length from adjacent-frame similarity: the mean
/// squared deviation of the per-pair PSNR from its cap is the motion
/// intensity, and N = clamp(round(c / score), n_min, n_max). More motion
/// gives a smaller batch.
pub fn select_batch_size(frames: &[Vec<f32>], n_min: usize, n_max: usize, c: f64) -> Result<usize> {
    if frames.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "batch-size selection needs at least 2 frames, got {}",
            frames.len()
        )));
    }
    if n_min == 0 || n_min > n_max {
        return Err(Error::InvalidArgument(format!("invalid batch bounds [{n_min}, {n_max}]")));
    }
    let peak = frames
        .iter()
        .flat_map(|f| f.iter())
        .fold(0.0_f64, |m, &v| m.max(v.abs() as f64));
    let mut score = 0.0;
    for w in frames.windows(2) {
        let p = psnr(&w[0], &w[1], peak);
        score += (PSNR_CAP_DB - p) * (PSNR_CAP_DB - p);
    }
    score /= (frames.len() - 1) as f64;
    let n = (c / (score + 1e-12)).round();
    Ok((n.max(0.0) as usize).clamp(n_min, n_max))
}

/// A batch of per-frame clouds in a shared world frame.
#[derive(Debug, Clone, Default)]
pub struct FrameBatch {
    pub clouds: Vec<GaussianCloud>,
    /// Adjacent-pair PSNR values when the batch came from
    /// `select_batch_size` (diagnostic only).
    pub similarity_scores: Vec<f64>,
}

impl FrameBatch {
    pub fn new(clouds: Vec<GaussianCloud>) -> Result<Self> {
        if clouds.is_empty() {
            return Err(Error::EmptyInput("frame batch cannot be empty".into()));
        }
        Ok(Self {
            clouds,
            similarity_scores: Vec::new(),
        })
    }
}

fn voxel_key(p: Vector3<f64>, cell: f64) -> (i64, i64, i64) {
    (
        (p.x / cell).floor() as i64,
        (p.y / cell).floor() as i64,
        (p.z / cell).floor() as i64,
    )
}

/// Concatenate the batch and deduplicate on a dx/2 voxel lattice, keeping
/// the highest-opacity representative per voxel. The output occupancy at
/// dx resolution is exactly the union of the inputs' occupancies.
pub fn union_frames(batch: &FrameBatch, dx: f64) -> Result<GaussianCloud> {
    if batch.clouds.is_empty() {
        return Err(Error::EmptyInput("frame batch cannot be empty".into()));
    }
    if dx <= 0.0 {
        return Err(Error::InvalidArgument(format!("dx must be positive, got {dx}")));
    }
    let cell = dx / 2.0;
    // (global index, opacity) winner per voxel.
    let mut winners: HashMap<(i64, i64, i64), (usize, f64)> = HashMap::new();
    let mut flat: Vec<(usize, usize)> = Vec::new(); // (cloud, point)
    for (ci, cloud) in batch.clouds.iter().enumerate() {
        for pi in 0..cloud.len() {
            let g = flat.len();
            flat.push((ci, pi));
            let key = voxel_key(cloud.positions[pi], cell);
            let o = cloud.opacities[pi];
            match winners.get(&key) {
                Some(&(_, best)) if best >= o => {}
                _ => {
                    winners.insert(key, (g, o));
                }
            }
        }
    }
    let mut keep = vec![false; flat.len()];
    for &(g, _) in winners.values() {
        keep[g] = true;
    }
    let mut out = GaussianCloud::default();
    for (g, &(ci, pi)) in flat.iter().enumerate() {
        if keep[g] {
            let c = &batch.clouds[ci];
            out.push(
                c.positions[pi],
                c.opacities[pi],
                c.covariances[pi],
                c.colors[pi],
                c.scales[pi],
                c.rotations[pi],
            );
        }
    }
    Ok(out)
}

/// Set of occupied dx-voxels of a cloud (for occupancy comparisons).
pub fn occupancy_keys(cloud: &GaussianCloud, dx: f64) -> std::collections::HashSet<(i64, i64, i64)> {
    cloud.positions.iter().map(|&p| voxel_key(p, dx)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn iso_cloud(points: &[(f64, f64, f64)], opacity: f64, radius: f64) -> GaussianCloud {
        let mut c = GaussianCloud::default();
        for &(x, y, z) in points {
            c.push_isotropic(Vector3::new(x, y, z), opacity, radius, [0.2, 0.4, 0.6]);
        }
        c
    }

    #[test]
    fn prune_keeps_healthy_points() {
        let c = iso_cloud(&[(0.0, 0.0, 0.0), (1.0, 0.0, 0.0)], 1.0, 0.1);
        let out = prune(&c, 0.1, 10.0).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out, c);
    }

    #[test]
    fn prune_removes_low_opacity_and_stretched() {
        let mut c = iso_cloud(&[(0.0, 0.0, 0.0)], 1.0, 0.1);
        c.push_isotropic(Vector3::new(1.0, 0.0, 0.0), 0.01, 0.1, [0.0; 3]);
        // Eigenvalue ratio 100 exceeds anisotropy_max = 10.
        c.push(
            Vector3::new(2.0, 0.0, 0.0),
            1.0,
            Matrix3::from_diagonal(&Vector3::new(100.0, 1.0, 1.0)),
            [0.0; 3],
            [10.0, 1.0, 1.0],
            [1.0, 0.0, 0.0, 0.0],
        );
        let out = prune(&c, 0.1, 10.0).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.positions[0], c.positions[0]);
    }

    #[test]
    fn prune_output_is_subset() {
        let mut c = GaussianCloud::default();
        let mut s = 5u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as f64 / (1u64 << 31) as f64
        };
        for _ in 0..50 {
            c.push_isotropic(
                Vector3::new(rnd(), rnd(), rnd()),
                rnd(),
                0.05 + 0.1 * rnd(),
                [0.1; 3],
            );
        }
        let out = prune(&c, 0.3, 10.0).unwrap();
        assert!(out.len() <= c.len());
        for p in &out.positions {
            assert!(c.positions.contains(p));
        }
    }

    /// Hollow axis-aligned shell of unit-opacity points at cell centers.
    fn shell_cloud(n: usize, dx: f64) -> GaussianCloud {
        let mut c = GaussianCloud::default();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let on_shell = i == 0 || j == 0 || k == 0 || i == n - 1 || j == n - 1 || k == n - 1;
                    if on_shell {
                        c.push_isotropic(
                            Vector3::new(i as f64, j as f64, k as f64) * dx,
                            1.0,
                            dx / 4.0,
                            [0.9, 0.1, 0.1],
                        );
                    }
                }
            }
        }
        c
    }

    #[test]
    fn fill_solid_block_inserts_nothing() {
        let dx = 0.2;
        let mut c = GaussianCloud::default();
        for i in 0..4 {
            for j in 0..4 {
                for k in 0..4 {
                    c.push_isotropic(Vector3::new(i as f64, j as f64, k as f64) * dx, 1.0, dx / 4.0, [0.5; 3]);
                }
            }
        }
        let (out, report) = fill_interior(&c, dx, 0.3).unwrap();
        assert_eq!(report.inserted, 0);
        assert_eq!(out.len(), c.len());
    }

    #[test]
    fn fill_hollow_shell_inserts_interior_cells() {
        // 6^3 shell: interior is 4^3 = 64 cells (brute-force oracle below).
        let n = 6;
        let dx = 0.2;
        let mut expected = 0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let on_shell = i == 0 || j == 0 || k == 0 || i == n - 1 || j == n - 1 || k == n - 1;
                    if !on_shell {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(expected, 64);
        let c = shell_cloud(n, dx);
        let (out, report) = fill_interior(&c, dx, 0.3).unwrap();
        assert_eq!(report.inserted, 64, "expected 64 interior insertions");
        assert_eq!(out.len(), c.len() + 64);
        // Inserted points inherit the nearest existing color.
        assert_eq!(out.colors[out.len() - 1], [0.9, 0.1, 0.1]);
    }

    #[test]
    fn fill_open_cup_inserts_nothing() {
        // Shell with the +y face removed: the cavity connects to the
        // boundary, so the flood fill reaches it.
        let n = 6;
        let dx = 0.2;
        let mut c = GaussianCloud::default();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let on_shell = i == 0 || j == 0 || k == 0 || i == n - 1 || k == n - 1;
                    if on_shell {
                        c.push_isotropic(Vector3::new(i as f64, j as f64, k as f64) * dx, 1.0, dx / 4.0, [0.5; 3]);
                    }
                }
            }
        }
        let (_, report) = fill_interior(&c, dx, 0.3).unwrap();
        assert_eq!(report.inserted, 0);
    }

    #[test]
    fn flood_fill_never_marks_reachable_cells_interior() {
        // Brute-force reachability oracle on a random occupancy.
        let dims = [10, 9, 8];
        let mut s = 33u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as f64 / (1u64 << 31) as f64
        };
        let occ = Field3::from_fn(dims, |_, _, _| rnd() < 0.35);
        let reached = boundary_reachable(&occ);
        // Oracle: exhaustive BFS over free cells.
        let mut oracle = Field3::filled(dims, false);
        let mut queue: Vec<usize> = Vec::new();
        for idx in 0..occ.len() {
            let [i, j, k] = occ.coords(idx);
            let boundary = i == 0 || j == 0 || k == 0 || i == dims[0] - 1 || j == dims[1] - 1 || k == dims[2] - 1;
            if boundary && !occ[idx] {
                oracle[idx] = true;
                queue.push(idx);
            }
        }
        while let Some(idx) = queue.pop() {
            let [i, j, k] = occ.coords(idx);
            for (di, dj, dk) in crate::grid::FACE_NEIGHBORS {
                if let Some(n) = occ.idx_checked(i as i64 + di, j as i64 + dj, k as i64 + dk) {
                    if !occ[n] && !oracle[n] {
                        oracle[n] = true;
                        queue.push(n);
                    }
                }
            }
        }
        assert_eq!(reached, oracle);
    }

    #[test]
    fn batch_size_extremes_and_arithmetic() {
        let a = vec![0.5f32; 64];
        // Identical frames: zero motion, maximal batch.
        assert_eq!(select_batch_size(&[a.clone(), a.clone(), a.clone()], 2, 16, 100.0).unwrap(), 16);
        // Maximally dissimilar frames: floor.
        let b: Vec<f32> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let nb: Vec<f32> = b.iter().map(|v| -v).collect();
        assert_eq!(select_batch_size(&[b.clone(), nb.clone(), b.clone()], 2, 16, 100.0).unwrap(), 2);
        // Mid-range: c chosen so c / score = 7.
        let c0 = vec![0.0f32; 64];
        let c1 = vec![0.1f32; 64];
        let p = psnr(&c0, &c1, 0.1);
        let score = (PSNR_CAP_DB - p) * (PSNR_CAP_DB - p);
        let n = select_batch_size(&[c0, c1], 2, 16, 7.0 * score).unwrap();
        assert_eq!(n, 7);
    }

    #[test]
    fn batch_size_monotone_in_motion() {
        let base = vec![0.0f32; 100];
        let mut prev = usize::MAX;
        for &amp in &[0.01f32, 0.05, 0.2, 1.0] {
            let moved: Vec<f32> = (0..100).map(|i| amp * ((i % 3) as f32 - 1.0)).collect();
            let n = select_batch_size(&[base.clone(), moved], 1, 32, 5e4).unwrap();
            assert!(n <= prev, "batch size grew with motion");
            prev = n;
        }
        assert!(select_batch_size(&[base], 1, 32, 1.0).is_err());
    }

    #[test]
    fn union_single_cloud_is_identity_occupancy() {
        let dx = 0.2;
        let c = iso_cloud(&[(0.0, 0.0, 0.0), (0.5, 0.0, 0.0), (0.0, 0.7, 0.0)], 0.8, 0.05);
        let batch = FrameBatch::new(vec![c.clone()]).unwrap();
        let out = union_frames(&batch, dx).unwrap();
        assert_eq!(occupancy_keys(&out, dx), occupancy_keys(&c, dx));
    }

    #[test]
    fn union_disjoint_clouds_covers_both() {
        let dx = 0.2;
        let a = iso_cloud(&[(0.0, 0.0, 0.0)], 0.5, 0.05);
        let b = iso_cloud(&[(2.0, 0.0, 0.0)], 0.5, 0.05);
        let batch = FrameBatch::new(vec![a.clone(), b.clone()]).unwrap();
        let out = union_frames(&batch, dx).unwrap();
        let mut want = occupancy_keys(&a, dx);
        want.extend(occupancy_keys(&b, dx));
        assert_eq!(occupancy_keys(&out, dx), want);
    }

    #[test]
    fn union_keeps_highest_opacity_in_shared_voxel() {
        let dx = 0.2;
        let mut a = GaussianCloud::default();
        a.push_isotropic(Vector3::new(0.01, 0.01, 0.01), 0.3, 0.05, [0.0; 3]);
        let mut b = GaussianCloud::default();
        b.push_isotropic(Vector3::new(0.02, 0.02, 0.02), 0.9, 0.05, [1.0; 3]);
        let batch = FrameBatch::new(vec![a, b]).unwrap();
        let out = union_frames(&batch, dx).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.opacities[0], 0.9);
    }

    #[test]
    fn union_occupancy_equals_set_union_randomized() {
        let dx = 0.25;
        let mut s = 77u64;
        let mut rnd = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 33) as f64 / (1u64 << 31) as f64
        };
        let mut clouds = Vec::new();
        for _ in 0..4 {
            let mut c = GaussianCloud::default();
            for _ in 0..80 {
                c.push_isotropic(
                    Vector3::new(rnd() * 3.0, rnd() * 3.0, rnd() * 3.0),
                    rnd(),
                    0.04,
                    [0.5; 3],
                );
            }
            clouds.push(c);
        }
        let mut want = std::collections::HashSet::new();
        for c in &clouds {
            want.extend(occupancy_keys(c, dx));
        }
        let batch = FrameBatch::new(clouds).unwrap();
        let out = union_frames(&batch, dx).unwrap();
        let got = occupancy_keys(&out, dx);
        assert_eq!(got, want);
        assert!(got.len() <= want.len());
    }
}
