//! One sampled instantiation of the two-stage warp.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::affine::{build_affine, invert_affine, AffineError, AffineParams};
use crate::deformation::{DeformationError, DeformationSpec, FieldStack, WarmStart};
use crate::geometry::{Mat3, Point2};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error(transparent)]
    Affine(#[from] AffineError),
    #[error(transparent)]
    Deformation(#[from] DeformationError),
    #[error("deformation frame {0}x{1} does not match affine frame {2}x{3}")]
    FrameMismatch(f64, f64, f64, f64),
}

/// Where a plan's random stream came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Derivation {
    pub source_stem: String,
    pub variant_index: u32,
    pub master_seed: u64,
    pub stream_seed: u64,
}

/// Ordered deformations followed by one affine matrix.
///
/// Points travel forward through every deformation in list order and then
/// through the affine matrix; pixels are pulled backward through the inverse
/// affine and then each deformation inverse in reverse order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PlanRecord", into = "PlanRecord")]
pub struct TransformPlan {
    deformations: Vec<DeformationSpec>,
    affine: AffineParams,
    matrix: Mat3,
    derivation: Option<Derivation>,
    inverse: Mat3,
    stack: FieldStack,
}

#[derive(Serialize, Deserialize)]
struct PlanRecord {
    deformations: Vec<DeformationSpec>,
    affine: AffineParams,
    matrix: Mat3,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    derivation: Option<Derivation>,
}

impl TryFrom<PlanRecord> for TransformPlan {
    type Error = PlanError;
    fn try_from(r: PlanRecord) -> Result<Self, PlanError> {
        // The recorded matrix is an echo; the parameters are authoritative.
        let mut plan = TransformPlan::new(r.deformations, r.affine)?;
        plan.derivation = r.derivation;
        Ok(plan)
    }
}

impl From<TransformPlan> for PlanRecord {
    fn from(p: TransformPlan) -> Self {
        PlanRecord {
            deformations: p.deformations,
            affine: p.affine,
            matrix: p.matrix,
            derivation: p.derivation,
        }
    }
}

impl TransformPlan {
    pub fn new(
        deformations: Vec<DeformationSpec>,
        affine: AffineParams,
    ) -> Result<Self, PlanError> {
        for d in &deformations {
            if d.frame_w != affine.frame_w || d.frame_h != affine.frame_h {
                return Err(PlanError::FrameMismatch(
                    d.frame_w,
                    d.frame_h,
                    affine.frame_w,
                    affine.frame_h,
                ));
            }
        }
        let matrix = build_affine(&affine)?;
        let inverse = invert_affine(&matrix)?;
        let stack = FieldStack::new(&deformations)?;
        Ok(Self {
            deformations,
            affine,
            matrix,
            derivation: None,
            inverse,
            stack,
        })
    }

    pub fn neutral(frame_w: u32, frame_h: u32) -> Self {
        Self::new(
            Vec::new(),
            AffineParams::neutral(frame_w as f64, frame_h as f64),
        )
        .expect("neutral plan is always valid")
    }

    pub fn with_derivation(mut self, derivation: Derivation) -> Self {
        self.derivation = Some(derivation);
        self
    }

    pub fn deformations(&self) -> &[DeformationSpec] {
        &self.deformations
    }

    pub fn affine(&self) -> &AffineParams {
        &self.affine
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.matrix
    }

    pub fn inverse_matrix(&self) -> &Mat3 {
        &self.inverse
    }

    pub fn derivation(&self) -> Option<&Derivation> {
        self.derivation.as_ref()
    }

    pub fn fields(&self) -> &FieldStack {
        &self.stack
    }

    pub fn frame(&self) -> (f64, f64) {
        (self.affine.frame_w, self.affine.frame_h)
    }

    /// True when at least one non-identity deformation is active.
    pub fn has_nonlinear(&self) -> bool {
        !self.stack.is_identity()
    }

    pub fn is_identity(&self) -> bool {
        !self.has_nonlinear() && self.matrix == Mat3::IDENTITY
    }

    #[inline]
    pub fn forward(&self, p: Point2) -> Point2 {
        self.matrix.apply_affine(self.stack.forward(p))
    }

    /// Backward map of an output location; the flag is false when some
    /// deformation inverse missed `tol`.
    #[inline]
    pub fn inverse(&self, q: Point2, iters: u32, tol: f64) -> (Point2, bool) {
        let a = self.inverse.apply_affine(q);
        if self.stack.is_identity() {
            (a, true)
        } else {
            self.stack.inverse(a, iters, tol)
        }
    }

    /// Scanline variant of [`inverse`](Self::inverse); see
    /// [`FieldStack::inverse_warm`].
    #[inline]
    pub fn inverse_warm(
        &self,
        q: Point2,
        warm: &mut [WarmStart],
        iters: u32,
        tol: f64,
    ) -> (Point2, bool) {
        self.stack
            .inverse_warm(self.inverse.apply_affine(q), warm, iters, tol)
    }
}
