//! Closed-form ground-truth coefficients and sources.

use std::f64::consts::PI;

use crate::error::{config, Result};
use crate::networks::FixedField;

pub const SOURCE_2D_MU: (f64, f64) = (0.25, 0.75);
pub const SOURCE_2D_WIDTH: (f64, f64) = (0.06, 0.04);

pub const VELOCITY_CONSTANT: [f64; 2] = [0.2, -0.2];
pub const DIFFUSION_CONSTANT: f64 = 0.01;

pub const SOURCE_3D_CENTERS: [[f64; 3]; 3] = [[0.25, 0.75, 0.5], [0.52, 0.8, 0.8], [0.6, 0.28, 0.3]];
pub const SOURCE_3D_RATES: [f64; 3] = [5.0, 3.0, 1.0];
pub const SOURCE_3D_SIGMAS: [f64; 3] = [0.2, 0.06, 0.08];

pub const WIND_EXPONENT: f64 = 0.4;
pub const WIND_REFERENCE_HEIGHT: f64 = 0.5;
pub const BOUNDARY_LAYER_HEIGHT: f64 = 1.0;

pub const PARTICLE_DENSITY: f64 = 1500.0;
pub const GRAVITY: f64 = 9.8;
pub const PARTICLE_DIAMETER: f64 = 2e-6;
pub const AIR_VISCOSITY: f64 = 1.8e-5;

/// Settling velocity `rho g d^2 / (18 mu)` from the particle constants above.
pub fn settling_velocity() -> f64 {
    PARTICLE_DENSITY * GRAVITY * PARTICLE_DIAMETER * PARTICLE_DIAMETER / (18.0 * AIR_VISCOSITY)
}

/// Settling velocity value quoted alongside the 3D experiment. It does not
/// follow from the constants; kept for the run manifest only.
pub const SETTLING_VELOCITY_QUOTED: f64 = 2.893518518518519e-07;

/// Sum of two one-dimensional Gaussian ridges, as the 2D source is defined.
pub fn truth_source_2d(x: f64, y: f64) -> f64 {
    let (mx, my) = SOURCE_2D_MU;
    let (lx, ly) = SOURCE_2D_WIDTH;
    (-(x - mx).powi(2) / (2.0 * lx * lx)).exp() + (-(y - my).powi(2) / (2.0 * ly * ly)).exp()
}

pub fn truth_source_3d(x: f64, y: f64, z: f64) -> f64 {
    SOURCE_3D_CENTERS
        .iter()
        .zip(SOURCE_3D_RATES)
        .zip(SOURCE_3D_SIGMAS)
        .map(|((c, eta), s)| {
            let r2 = (x - c[0]).powi(2) + (y - c[1]).powi(2) + (z - c[2]).powi(2);
            eta * (-r2 / (2.0 * s * s)).exp()
        })
        .sum()
}

/// Time-dependent velocity of the variable-coefficient 2D case.
pub fn velocity_variable_2d(t: f64) -> [f64; 2] {
    [
        0.2 + 0.1 * (2.0 * PI * t).sin(),
        -0.2 - 0.1 * (2.0 * PI * t).cos(),
    ]
}

pub fn diffusion_variable_2d(x: f64, y: f64) -> f64 {
    0.1 * (1.0 + (PI * x).sin() * (PI * y).cos() / 2.0)
}

fn diffusion_variable_2d_grad(x: f64, y: f64) -> [f64; 2] {
    [
        0.05 * PI * (PI * x).cos() * (PI * y).cos(),
        -0.05 * PI * (PI * x).sin() * (PI * y).sin(),
    ]
}

fn height_factor(z: f64) -> f64 {
    (z / WIND_REFERENCE_HEIGHT).powf(WIND_EXPONENT)
}

/// `(V1, V2, V3, D1, D2, D3)` of the 3D case at height `z`, time `t`, abscissa `x`.
pub fn truth_coefficients_3d(z: f64, t: f64, x: f64) -> Result<[f64; 6]> {
    if z < 0.0 {
        return Err(config(format!("height must be non-negative, got {z}")));
    }
    let v_ref = 0.8 * (1.0 + (2.0 * PI * t).sin());
    let v1 = height_factor(z) * v_ref;
    let d_h = 0.2 + x * x * height_factor(z);
    let d_z = 0.2 + 0.1 * (z / BOUNDARY_LAYER_HEIGHT).powf(WIND_EXPONENT);
    Ok([v1, -v1, settling_velocity(), d_h, d_h, d_z])
}

/// Which ground-truth problem a run is built around.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum TruthCase {
    /// 2D, constant velocity and diffusion.
    Constant2d,
    /// 2D, time-dependent velocity and space-dependent diffusion.
    Variable2d,
    /// 3D, height-dependent wind and diffusion with settling.
    Height3d,
}

impl TruthCase {
    pub fn spatial_dims(self) -> usize {
        match self {
            TruthCase::Constant2d | TruthCase::Variable2d => 2,
            TruthCase::Height3d => 3,
        }
    }

    /// Velocity component `axis` at a point `(x, y[, z], t)`.
    pub fn velocity(self, axis: usize, p: &[f64]) -> f64 {
        match self {
            TruthCase::Constant2d => VELOCITY_CONSTANT[axis],
            TruthCase::Variable2d => velocity_variable_2d(p[2])[axis],
            TruthCase::Height3d => {
                let c = truth_coefficients_3d(p[2].max(0.0), p[3], p[0]).expect("clamped height");
                c[axis]
            }
        }
    }

    /// Diffusion along `axis` at `(x, y[, z], t)`.
    pub fn diffusion(self, axis: usize, p: &[f64]) -> f64 {
        match self {
            TruthCase::Constant2d => DIFFUSION_CONSTANT,
            TruthCase::Variable2d => diffusion_variable_2d(p[0], p[1]),
            TruthCase::Height3d => {
                let c = truth_coefficients_3d(p[2].max(0.0), p[3], p[0]).expect("clamped height");
                c[3 + axis]
            }
        }
    }

    pub fn source(self, p: &[f64]) -> f64 {
        match self {
            TruthCase::Constant2d | TruthCase::Variable2d => truth_source_2d(p[0], p[1]),
            TruthCase::Height3d => truth_source_3d(p[0], p[1], p[2]),
        }
    }

    /// Closed-form velocity fields with gradients over `(x, y[, z], t)`.
    pub fn velocity_fields(self) -> Vec<FixedField> {
        let sd = self.spatial_dims();
        (0..sd)
            .map(|axis| {
                FixedField::new(move |p: &[f64]| {
                    let mut g = vec![0.0; sd + 1];
                    let v = self.velocity(axis, p);
                    match self {
                        TruthCase::Constant2d => {}
                        TruthCase::Variable2d => {
                            let w = 2.0 * PI;
                            g[2] = if axis == 0 {
                                0.1 * w * (w * p[2]).cos()
                            } else {
                                0.1 * w * (w * p[2]).sin()
                            };
                        }
                        TruthCase::Height3d => {
                            if axis < 2 && p[2] > 0.0 {
                                let z = p[2];
                                let t = p[3];
                                let sign = if axis == 0 { 1.0 } else { -1.0 };
                                let v_ref = 0.8 * (1.0 + (2.0 * PI * t).sin());
                                g[2] = sign * WIND_EXPONENT * v_ref * height_factor(z) / z;
                                g[3] = sign * height_factor(z) * 0.8 * 2.0 * PI * (2.0 * PI * t).cos();
                            }
                        }
                    }
                    (v, g)
                })
            })
            .collect()
    }

    /// Closed-form diffusion fields with gradients over `(x, y[, z], t)`.
    pub fn diffusion_fields(self) -> Vec<FixedField> {
        let sd = self.spatial_dims();
        (0..sd)
            .map(|axis| {
                FixedField::new(move |p: &[f64]| {
                    let mut g = vec![0.0; sd + 1];
                    let d = self.diffusion(axis, p);
                    match self {
                        TruthCase::Constant2d => {}
                        TruthCase::Variable2d => {
                            let dg = diffusion_variable_2d_grad(p[0], p[1]);
                            g[0] = dg[0];
                            g[1] = dg[1];
                        }
                        TruthCase::Height3d => {
                            let (x, z) = (p[0], p[2]);
                            if axis < 2 {
                                g[0] = 2.0 * x * height_factor(z);
                                if z > 0.0 {
                                    g[2] = x * x * WIND_EXPONENT * height_factor(z) / z;
                                }
                            } else if z > 0.0 {
                                g[2] = 0.1 * WIND_EXPONENT * (z / BOUNDARY_LAYER_HEIGHT).powf(WIND_EXPONENT - 1.0)
                                    / BOUNDARY_LAYER_HEIGHT;
                            }
                        }
                    }
                    (d, g)
                })
            })
            .collect()
    }

    pub fn source_field(self) -> FixedField {
        let sd = self.spatial_dims();
        FixedField::new(move |p: &[f64]| (self.source(p), vec![0.0; sd + 1]))
    }
}
