//! Velocity-matching loss: per-cell mask times a direction (cosine) term
//! plus an L2 term, with its analytic gradient.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::VectorField;
use crate::grid::{CellField, CellType};

/// Loss weight per cell type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskWeights {
    pub empty: f64,
    pub fluid: f64,
    pub surface: f64,
    pub solid: f64,
    pub inlet: f64,
    pub outlet: f64,
}

impl Default for MaskWeights {
    fn default() -> Self {
        // Surface cells carry the observation; occupied interior half
        // weight; empty and solid cells are not compared.
        Self {
            empty: 0.0,
            fluid: 0.5,
            surface: 1.0,
            solid: 0.0,
            inlet: 0.5,
            outlet: 0.5,
        }
    }
}

impl MaskWeights {
    pub fn weight(&self, t: CellType) -> f64 {
        match t {
            CellType::Empty => self.empty,
            CellType::Fluid => self.fluid,
            CellType::Surface => self.surface,
            CellType::Solid => self.solid,
            CellType::Inlet => self.inlet,
            CellType::Outlet => self.outlet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Direction-term weight.
    pub alpha: f64,
    /// L2-term weight.
    pub beta: f64,
    pub mask: MaskWeights,
    /// Speeds below this skip the direction term (avoids 0/0 in the
    /// normalized dot product).
    pub speed_floor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            mask: MaskWeights::default(),
            speed_floor: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative, got alpha={}, beta={}",
                self.alpha, self.beta
            )));
        }
        if self.alpha == 0.0 && self.beta == 0.0 {
            return Err(Error::InvalidArgument("alpha and beta cannot both be zero".into()));
        }
        Ok(())
    }
}

/// Masked velocity loss and its analytic gradient with respect to `v_sim`:
/// `sum_cells mask * [ alpha (1 - v_sim_hat . v_gt_hat) + beta |v_sim - v_gt|^2 ]`.
pub fn compute_loss(
    v_sim: &VectorField,
    v_gt: &VectorField,
    weights: &LossWeights,
    cells: &CellField,
) -> Result<(f64, VectorField)> {
    weights.validate()?;
    if !v_sim.same_dims(v_gt) || !v_sim.same_dims(cells) {
        return Err(Error::DimensionMismatch {
            expected: cells.dims(),
            got: v_sim.dims(),
        });
    }
    let mut loss = 0.0;
    let mut grad = VectorField::zeros_vec(v_sim.dims());
    for idx in 0..v_sim.len() {
        let w = weights.mask.weight(cells[idx]);
        if w == 0.0 {
            continue;
        }
        let vs = v_sim[idx];
        let vg = v_gt[idx];
        let mut cell_loss = 0.0;
        let mut cell_grad = Vector3::zeros();

        let ns = vs.norm();
        let ng = vg.norm();
        if weights.alpha > 0.0 && ns >= weights.speed_floor && ng >= weights.speed_floor {
            let vs_hat = vs / ns;
            let vg_hat = vg / ng;
            let cosine = vs_hat.dot(&vg_hat);
            cell_loss += weights.alpha * (1.0 - cosine);
            // d(cos)/d(vs) = (vg_hat - cos * vs_hat) / |vs|
            cell_grad += (vg_hat - vs_hat * cosine) * (-weights.alpha / ns);
        }
        if weights.beta > 0.0 {
            let diff = vs - vg;
            cell_loss += weights.beta * diff.norm_squared();
            cell_grad += diff * (2.0 * weights.beta);
        }
        loss += w * cell_loss;
        grad[idx] = cell_grad * w;
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Field3;
    use approx::assert_relative_eq;

    fn uniform_cells(dims: [usize; 3], t: CellType) -> CellField {
        Field3::filled(dims, t)
    }

    fn rng(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.max(1);
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) - 1.0
        }
    }

    #[test]
    fn perfect_match_has_zero_loss() {
        let dims = [4, 4, 4];
        let mut r = rng(1);
        let v = VectorField::from_fn(dims, |_, _, _| Vector3::new(r(), r(), r()));
        let cells = uniform_cells(dims, CellType::Surface);
        let (loss, grad) = compute_loss(&v, &v, &LossWeights::default(), &cells).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.max_norm() < 1e-14);
    }

    #[test]
    fn anti_aligned_direction_term() {
        // v_sim = -v_gt, alpha = 1, beta = 0, unit mask: loss = 2 per cell.
        let dims = [3, 3, 3];
        let mut r = rng(2);
        let vg = VectorField::from_fn(dims, |_, _, _| Vector3::new(r(), r(), r()).normalize());
        let mut vs = vg.clone();
        for v in vs.iter_mut() {
            *v = -*v;
        }
        let cells = uniform_cells(dims, CellType::Surface);
        let weights = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            mask: MaskWeights {
                surface: 1.0,
                ..MaskWeights::default()
            },
            speed_floor: 1e-6,
        };
        let (loss, _) = compute_loss(&vs, &vg, &weights, &cells).unwrap();
        assert_relative_eq!(loss, 2.0 * 27.0, epsilon = 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let dims = [4, 4, 4];
        let mut r = rng(3);
        let vs = VectorField::from_fn(dims, |_, _, _| Vector3::new(r(), r(), r()));
        let vg = VectorField::from_fn(dims, |_, _, _| Vector3::new(r(), r(), r()));
        let cells = Field3::from_fn(dims, |i, j, _| {
            if (i + j) % 3 == 0 {
                CellType::Surface
            } else if i % 2 == 0 {
                CellType::Fluid
            } else {
                CellType::Empty
            }
        });
        let weights = LossWeights::default();
        let (_, grad) = compute_loss(&vs, &vg, &weights, &cells).unwrap();
        let h = 1e-5;
        for idx in 0..vs.len() {
            for axis in 0..3 {
                let mut up = vs.clone();
                up[idx][axis] += h;
                let mut dn = vs.clone();
                dn[idx][axis] -= h;
                let (lu, _) = compute_loss(&up, &vg, &weights, &cells).unwrap();
                let (ld, _) = compute_loss(&dn, &vg, &weights, &cells).unwrap();
                let fd = (lu - ld) / (2.0 * h);
                let a = grad[idx][axis];
                assert!(
                    (a - fd).abs() <= 1e-6 * fd.abs().max(1e-6),
                    "grad mismatch at {idx}/{axis}: analytic {a}, fd {fd}"
                );
            }
        }
    }

    #[test]
    fn speed_floor_skips_direction_term() {
        let dims = [2, 2, 2];
        let vs = VectorField::filled(dims, Vector3::new(1e-9, 0.0, 0.0));
        let vg = VectorField::filled(dims, Vector3::new(0.0, 1.0, 0.0));
        let cells = uniform_cells(dims, CellType::Surface);
        let weights = LossWeights {
            alpha: 1.0,
            beta: 0.0,
            ..LossWeights::default()
        };
        let (loss, grad) = compute_loss(&vs, &vg, &weights, &cells).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.max_norm() == 0.0);
    }

    #[test]
    fn rejects_degenerate_weights() {
        let weights = LossWeights {
            alpha: 0.0,
            beta: 0.0,
            ..LossWeights::default()
        };
        assert!(weights.validate().is_err());
    }
}
