//! Physical simulation parameters, their unconstrained normalization for
//! optimization, and the per-parameter gradient accumulator.
//!
//! Positive-only parameters (rho, nu, dt, inlet fluctuation) map through an
//! exponential, bounded coefficients (bounce, damp) through a sigmoid, and
//! sign-free vectors (gravity, inlet/outlet velocity) through a linear
//! scale.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryCoefficients, BoundaryDrive, DEFAULT_FLUCTUATION_OMEGA};

/// The optimizable physical parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub v_in: Vector3<f64>,
    /// Inlet fluctuation amplitude (m/s).
    pub v_tilde_in: f64,
    pub v_out: Vector3<f64>,
    /// Density (kg/m^3).
    pub rho: f64,
    /// Kinematic viscosity (m^2/s).
    pub nu: f64,
    /// Wall bounce coefficient in [0,1].
    pub bounce: f64,
    /// Wall tangential damping in [0,1].
    pub damp: f64,
    pub gravity: Vector3<f64>,
    /// Time step (s).
    pub dt: f64,
    /// Inlet fluctuation rate (rad/step); fixed, not optimized.
    pub omega: f64,
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        if self.rho <= 0.0 {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {}", self.rho)));
        }
        if self.nu < 0.0 {
            return Err(Error::InvalidArgument(format!("nu must be non-negative, got {}", self.nu)));
        }
        if self.dt <= 0.0 {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        for (name, v) in [("bounce", self.bounce), ("damp", self.damp)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} must lie in [0,1], got {v}")));
            }
        }
        if self.v_tilde_in < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "v_tilde_in must be non-negative, got {}",
                self.v_tilde_in
            )));
        }
        Ok(())
    }

    pub fn coefficients(&self) -> BoundaryCoefficients {
        BoundaryCoefficients {
            bounce: self.bounce,
            damp: self.damp,
        }
    }

    pub fn drive(&self) -> BoundaryDrive {
        BoundaryDrive {
            v_in: self.v_in,
            v_tilde_in: self.v_tilde_in,
            v_out: self.v_out,
            omega: self.omega,
        }
    }
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            v_in: Vector3::zeros(),
            v_tilde_in: 0.0,
            v_out: Vector3::zeros(),
            rho: 1000.0,
            nu: 1e-6,
            bounce: 0.2,
            damp: 0.1,
            gravity: Vector3::new(0.0, -9.8, 0.0),
            dt: 0.02,
            omega: DEFAULT_FLUCTUATION_OMEGA,
        }
    }
}

/// Gradient of a scalar objective with respect to every SimParams component.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ParamGrads {
    pub v_in: Vector3<f64>,
    pub v_tilde_in: f64,
    pub v_out: Vector3<f64>,
    pub rho: f64,
    pub nu: f64,
    pub bounce: f64,
    pub damp: f64,
    pub gravity: Vector3<f64>,
    pub dt: f64,
}

impl ParamGrads {
    pub fn add(&mut self, other: &ParamGrads) {
        self.v_in += other.v_in;
        self.v_tilde_in += other.v_tilde_in;
        self.v_out += other.v_out;
        self.rho += other.rho;
        self.nu += other.nu;
        self.bounce += other.bounce;
        self.damp += other.damp;
        self.gravity += other.gravity;
        self.dt += other.dt;
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|x| x.is_finite())
    }

    /// Flattened in the canonical component order (see `component_names`).
    pub fn to_vec(&self) -> Vec<f64> {
        vec![
            self.v_in.x,
            self.v_in.y,
            self.v_in.z,
            self.v_tilde_in,
            self.v_out.x,
            self.v_out.y,
            self.v_out.z,
            self.rho,
            self.nu,
            self.bounce,
            self.damp,
            self.gravity.x,
            self.gravity.y,
            self.gravity.z,
            self.dt,
        ]
    }
}

pub const PARAM_COUNT: usize = 15;

pub fn component_names() -> [&'static str; PARAM_COUNT] {
    [
        "v_in.x",
        "v_in.y",
        "v_in.z",
        "v_tilde_in",
        "v_out.x",
        "v_out.y",
        "v_out.z",
        "rho",
        "nu",
        "bounce",
        "damp",
        "g.x",
        "g.y",
        "g.z",
        "dt",
    ]
}

pub fn params_to_vec(p: &SimParams) -> [f64; PARAM_COUNT] {
    [
        p.v_in.x,
        p.v_in.y,
        p.v_in.z,
        p.v_tilde_in,
        p.v_out.x,
        p.v_out.y,
        p.v_out.z,
        p.rho,
        p.nu,
        p.bounce,
        p.damp,
        p.gravity.x,
        p.gravity.y,
        p.gravity.z,
        p.dt,
    ]
}

pub fn params_from_vec(v: &[f64; PARAM_COUNT], omega: f64) -> SimParams {
    SimParams {
        v_in: Vector3::new(v[0], v[1], v[2]),
        v_tilde_in: v[3],
        v_out: Vector3::new(v[4], v[5], v[6]),
        rho: v[7],
        nu: v[8],
        bounce: v[9],
        damp: v[10],
        gravity: Vector3::new(v[11], v[12], v[13]),
        dt: v[14],
        omega,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// theta = scale * exp(u); positive-only parameters.
    Exp,
    /// theta = sigmoid(u), scale fixed to the unit interval.
    SigmoidScaled,
    /// theta = scale * u; sign-free parameters.
    Identity,
}

/// Per-component activation and physical scale mapping SimParams onto an
/// unconstrained vector. Round-trip is exact to floating-point rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedParams {
    pub activations: [Activation; PARAM_COUNT],
    pub scales: [f64; PARAM_COUNT],
    pub omega: f64,
}

impl NormalizedParams {
    /// Default activation map; scales taken from a reference parameter set
    /// (falling back to 1 where a component is zero).
    pub fn for_reference(reference: &SimParams) -> Self {
        use Activation::*;
        let activations = [
            Identity, Identity, Identity, // v_in
            Exp,      // v_tilde_in
            Identity, Identity, Identity, // v_out
            Exp,      // rho
            Exp,      // nu
            SigmoidScaled, // bounce
            SigmoidScaled, // damp
            Identity, Identity, Identity, // g
            Exp,      // dt
        ];
        let raw = params_to_vec(reference);
        let mut scales = [1.0; PARAM_COUNT];
        for (i, s) in scales.iter_mut().enumerate() {
            let mag = raw[i].abs();
            match activations[i] {
                Activation::SigmoidScaled => *s = 1.0,
                _ => {
                    if mag > 1e-12 {
                        *s = mag;
                    }
                }
            }
        }
        Self {
            activations,
            scales,
            omega: reference.omega,
        }
    }

    pub fn normalize(&self, p: &SimParams) -> Result<[f64; PARAM_COUNT]> {
        let raw = params_to_vec(p);
        let mut u = [0.0; PARAM_COUNT];
        let names = component_names();
        for i in 0..PARAM_COUNT {
            u[i] = match self.activations[i] {
                Activation::Exp => {
                    if raw[i] <= 0.0 {
                        return Err(Error::InvalidArgument(format!(
                            "{} = {} outside the exponential activation range (must be > 0)",
                            names[i], raw[i]
                        )));
                    }
                    (raw[i] / self.scales[i]).ln()
                }
                Activation::SigmoidScaled => {
                    if raw[i] <= 0.0 || raw[i] >= 1.0 {
                        return Err(Error::InvalidArgument(format!(
                            "{} = {} outside the open sigmoid range (0,1)",
                            names[i], raw[i]
                        )));
                    }
                    (raw[i] / (1.0 - raw[i])).ln()
                }
                Activation::Identity => raw[i] / self.scales[i],
            };
        }
        Ok(u)
    }

    pub fn denormalize(&self, u: &[f64; PARAM_COUNT]) -> SimParams {
        let mut raw = [0.0; PARAM_COUNT];
        for i in 0..PARAM_COUNT {
            raw[i] = match self.activations[i] {
                Activation::Exp => self.scales[i] * u[i].exp(),
                Activation::SigmoidScaled => 1.0 / (1.0 + (-u[i]).exp()),
                Activation::Identity => self.scales[i] * u[i],
            };
        }
        params_from_vec(&raw, self.omega)
    }

    /// Chain rule through the activation: dL/du_i = dL/dtheta_i * dtheta/du.
    pub fn grad_to_normalized(&self, grads: &ParamGrads, params: &SimParams) -> [f64; PARAM_COUNT] {
        let g = grads.to_vec();
        let theta = params_to_vec(params);
        let mut out = [0.0; PARAM_COUNT];
        for i in 0..PARAM_COUNT {
            out[i] = match self.activations[i] {
                Activation::Exp => g[i] * theta[i],
                Activation::SigmoidScaled => g[i] * theta[i] * (1.0 - theta[i]),
                Activation::Identity => g[i] * self.scales[i],
            };
        }
        out
    }
}
