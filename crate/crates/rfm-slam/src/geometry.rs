//! SO(2) primitives: rotation matrices, the `[cos, sin]` parameter vector
//! with covariance, angle extraction and angle wrapping.

use nalgebra::{Matrix2, Vector2};
use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};

/// Parameter vectors with a norm below this are considered directionless.
pub const EPS_NORM: f64 = 1e-9;

/// A robot pose: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 { x, y, theta }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }
}

/// A 2x2 direction cosine matrix, orthogonal with determinant +1.
#[derive(Debug, Clone, Copy)]
pub struct RotationMatrix2 {
    m: Matrix2<f64>,
}

impl RotationMatrix2 {
    pub fn matrix(&self) -> &Matrix2<f64> {
        &self.m
    }

    pub fn transposed(&self) -> RotationMatrix2 {
        RotationMatrix2 { m: self.m.transpose() }
    }

    /// Rotation angle recovered from the matrix entries.
    pub fn angle(&self) -> f64 {
        self.m[(1, 0)].atan2(self.m[(0, 0)])
    }

    pub fn rotate(&self, v: &Vector2<f64>) -> Vector2<f64> {
        self.m * v
    }
}

/// SO(2) parameter vector `[cos, sin]` with a 2x2 covariance.
#[derive(Debug, Clone, Copy)]
pub struct RotParams2 {
    pub c: Vector2<f64>,
    pub sigma: Matrix2<f64>,
}

/// An angle in radians with an optional variance.
#[derive(Debug, Clone, Copy)]
pub struct Angle {
    pub theta: f64,
    pub var: Option<f64>,
}

/// Rotation matrix `[[cos, -sin], [sin, cos]]` for the given angle.
pub fn dcm_from_angle(theta: f64) -> Result<RotationMatrix2> {
    if !theta.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite angle {theta}")));
    }
    let (s, c) = theta.sin_cos();
    Ok(RotationMatrix2 {
        m: Matrix2::new(c, -s, s, c),
    })
}

/// Derivative of `dcm_from_angle` with respect to the angle.
pub fn dcm_derivative(theta: f64) -> Matrix2<f64> {
    let (s, c) = theta.sin_cos();
    Matrix2::new(-s, -c, c, -s)
}

/// Normalize a parameter vector onto the unit circle and push its covariance
/// through the exact Jacobian of `c / |c|`.
pub fn project_to_so2(p: &RotParams2) -> Result<RotParams2> {
    let n = p.c.norm();
    if n <= EPS_NORM {
        return Err(Error::DegenerateRotation { norm: n, eps: EPS_NORM });
    }
    let (c1, c2) = (p.c.x, p.c.y);
    // d(c/|c|)/dc = (1/|c|^3) [[c2^2, -c1 c2], [-c1 c2, c1^2]]
    let jac = Matrix2::new(c2 * c2, -c1 * c2, -c1 * c2, c1 * c1) / (n * n * n);
    Ok(RotParams2 {
        c: p.c / n,
        sigma: jac * p.sigma * jac.transpose(),
    })
}

/// Rotation angle and scalar variance from projected (unit-norm) parameters.
pub fn angle_from_params(p: &RotParams2) -> Result<Angle> {
    let n = p.c.norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::NonUnitParams { norm: n });
    }
    let theta = p.c.y.atan2(p.c.x);
    // Gradient of atan2(c2, c1) on the unit circle.
    let g = Vector2::new(-p.c.y, p.c.x);
    let var = (g.transpose() * p.sigma * g)[(0, 0)];
    Ok(Angle { theta, var: Some(var) })
}

/// Wrap an angle to (-pi, pi], mapping -pi to +pi.
pub fn wrap_angle(theta: f64) -> f64 {
    let r = (theta + PI).rem_euclid(TAU) - PI;
    if r <= -PI {
        r + TAU
    } else {
        r
    }
}
