//! Center-anchored affine composition.
//!
//! Points are moved so the frame center sits at the origin, then flipped,
//! scaled, sheared, rotated, given the perspective surrogate, translated by
//! the user offset and finally moved back:
//!
//! ```text
//! M = T_center * T_user * P * R * Sh * S * F * T_origin
//! ```
//!
//! The rightmost factor acts first.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{matrix_compose, Mat3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AffineError {
    #[error("scale factors must be positive (got {0}, {1})")]
    InvalidScale(f64, f64),
    #[error("frame dimensions must be at least 1 (got {0}x{1})")]
    InvalidFrame(f64, f64),
    #[error("non-finite affine parameter")]
    NonFinite,
    #[error("matrix is singular (det {0:e})")]
    Singular(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffineParams {
    pub flip_h: bool,
    pub flip_v: bool,
    pub scale_x: f64,
    pub scale_y: f64,
    pub shear_x_deg: f64,
    pub shear_y_deg: f64,
    pub rotation_deg: f64,
    pub perspective_x: f64,
    pub perspective_y: f64,
    pub translate_x: f64,
    pub translate_y: f64,
    pub frame_w: f64,
    pub frame_h: f64,
}

impl Default for AffineParams {
    fn default() -> Self {
        Self::neutral(1.0, 1.0)
    }
}

impl AffineParams {
    pub fn neutral(frame_w: f64, frame_h: f64) -> Self {
        Self {
            flip_h: false,
            flip_v: false,
            scale_x: 1.0,
            scale_y: 1.0,
            shear_x_deg: 0.0,
            shear_y_deg: 0.0,
            rotation_deg: 0.0,
            perspective_x: 0.0,
            perspective_y: 0.0,
            translate_x: 0.0,
            translate_y: 0.0,
            frame_w,
            frame_h,
        }
    }

    pub fn center(&self) -> (f64, f64) {
        (self.frame_w / 2.0, self.frame_h / 2.0)
    }

    pub fn validate(&self) -> Result<(), AffineError> {
        let scalars = [
            self.scale_x,
            self.scale_y,
            self.shear_x_deg,
            self.shear_y_deg,
            self.rotation_deg,
            self.perspective_x,
            self.perspective_y,
            self.translate_x,
            self.translate_y,
            self.frame_w,
            self.frame_h,
        ];
        if scalars.iter().any(|v| !v.is_finite()) {
            return Err(AffineError::NonFinite);
        }
        if self.scale_x <= 0.0 || self.scale_y <= 0.0 {
            return Err(AffineError::InvalidScale(self.scale_x, self.scale_y));
        }
        if self.frame_w < 1.0 || self.frame_h < 1.0 {
            return Err(AffineError::InvalidFrame(self.frame_w, self.frame_h));
        }
        Ok(())
    }
}

pub fn flip_matrix(flip_h: bool, flip_v: bool) -> Mat3 {
    Mat3::scale(
        if flip_h { -1.0 } else { 1.0 },
        if flip_v { -1.0 } else { 1.0 },
    )
}

/// Affine stand-in for a projective tilt with bottom row `(px, py, 1)`.
///
/// The coefficients are turned into cross-axis shear terms scaled by the
/// frame half-extents: `[[1, -px*h/2, 0], [-py*w/2, 1, 0], [0, 0, 1]]`.
/// It reduces to the identity at `px = py = 0`.
pub fn perspective_surrogate(px: f64, py: f64, frame_w: f64, frame_h: f64) -> Mat3 {
    Mat3::from_affine(
        1.0,
        -px * (frame_h / 2.0),
        -py * (frame_w / 2.0),
        1.0,
        0.0,
        0.0,
    )
}

pub fn build_affine(params: &AffineParams) -> Result<Mat3, AffineError> {
    params.validate()?;
    let (cx, cy) = params.center();
    Ok(matrix_compose(&[
        Mat3::translate(cx, cy),
        Mat3::translate(params.translate_x, params.translate_y),
        perspective_surrogate(
            params.perspective_x,
            params.perspective_y,
            params.frame_w,
            params.frame_h,
        ),
        Mat3::rotate_deg(params.rotation_deg),
        Mat3::shear_deg(params.shear_x_deg, params.shear_y_deg),
        Mat3::scale(params.scale_x, params.scale_y),
        flip_matrix(params.flip_h, params.flip_v),
        Mat3::translate(-cx, -cy),
    ]))
}

pub fn invert_affine(m: &Mat3) -> Result<Mat3, AffineError> {
    let det = m.linear_det();
    if !(det.abs() > 1e-12) {
        return Err(AffineError::Singular(det));
    }
    let [[a, b, tx], [c, d, ty], _] = m.0;
    let inv_det = 1.0 / det;
    let (ia, ib, ic, id) = (d * inv_det, -b * inv_det, -c * inv_det, a * inv_det);
    Ok(Mat3::from_affine(
        ia,
        ib,
        ic,
        id,
        -(ia * tx + ib * ty),
        -(ic * tx + id * ty),
    ))
}
