//! Geometric triage of augmented documents.
//!
//! Screening only raises flags; accepting or rejecting a variant is left to a
//! human reviewer.

use serde::{Deserialize, Serialize};

use crate::annotation::{AnnotatedDocument, ClipOutcome, DropReason};
use crate::geometry::{has_self_crossing, min_area_rect, Polygon};

pub fn is_self_intersecting(poly: &Polygon) -> bool {
    has_self_crossing(poly)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScreeningThresholds {
    /// Transformed area must be at least this multiple of the original area.
    pub min_area_ratio: f64,
    /// Largest allowed growth of the min-area-rectangle aspect ratio.
    pub max_aspect_growth: f64,
    /// Kept shapes over original shapes must reach this fraction.
    pub min_surviving_fraction: f64,
    /// Largest tolerated fraction of pixels whose inverse did not converge.
    pub max_nonconverged_fraction: f64,
    /// A kept shape may lose at most this fraction of its area to clipping.
    pub max_clipped_loss: f64,
}

impl Default for ScreeningThresholds {
    fn default() -> Self {
        Self {
            min_area_ratio: 0.2,
            max_aspect_growth: 4.0,
            min_surviving_fraction: 0.6,
            max_nonconverged_fraction: 0.005,
            max_clipped_loss: 0.5,
        }
    }
}

impl ScreeningThresholds {
    pub fn validate(&self) -> Result<(), String> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(self.min_area_ratio >= 0.0 && self.min_area_ratio.is_finite()) {
            return Err("min_area_ratio must be a finite value >= 0".into());
        }
        if !(self.max_aspect_growth >= 1.0) || !self.max_aspect_growth.is_finite() {
            return Err("max_aspect_growth must be finite and >= 1".into());
        }
        if !unit(self.min_surviving_fraction)
            || !unit(self.max_nonconverged_fraction)
            || !unit(self.max_clipped_loss)
        {
            return Err("fractions must lie in [0, 1]".into());
        }
        Ok(())
    }
}

/// The fate of one source shape: its image under the plan before clipping,
/// and what clipping made of it.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeTrace {
    pub mapped: Polygon,
    pub outcome: ClipOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct WarpMeta {
    pub nonconverged_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFlag {
    SelfIntersecting,
    SubMinArea,
    AspectBlowup,
    OutOfFrameExcess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocumentFlag {
    VisibleShapeFractionLow,
    NonconvergedPixelsHigh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overall {
    Clean,
    Flagged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeFlags {
    pub index: usize,
    pub flags: Vec<ShapeFlag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedShape {
    pub index: usize,
    #[serde(flatten)]
    pub reason: DropReason,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningReport {
    /// Only shapes carrying at least one flag are listed.
    pub shapes: Vec<ShapeFlags>,
    pub document: Vec<DocumentFlag>,
    pub dropped: Vec<DroppedShape>,
    pub overall: Overall,
}

impl ScreeningReport {
    pub fn clean() -> Self {
        Self {
            shapes: vec![],
            document: vec![],
            dropped: vec![],
            overall: Overall::Clean,
        }
    }

    pub fn is_flagged(&self) -> bool {
        self.overall == Overall::Flagged
    }

    /// Flat, stable list of flag names, e.g. `shape[2].aspect_blowup`.
    pub fn flag_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self.document.iter().map(json_name).collect();
        for s in &self.shapes {
            for f in &s.flags {
                out.push(format!("shape[{}].{}", s.index, json_name(f)));
            }
        }
        out
    }
}

fn json_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_default()
}

fn aspect(poly: &Polygon) -> Option<f64> {
    let r = min_area_rect(poly).ok()?;
    let v = r.vertices();
    let a = v[0].distance(v[1]);
    let b = v[1].distance(v[2]);
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    (lo > 0.0).then(|| hi / lo)
}

/// Screens `after` (one trace per shape of `before`, in the same order).
pub fn screen_document(
    before: &AnnotatedDocument,
    after: &[ShapeTrace],
    meta: &WarpMeta,
    thresholds: &ScreeningThresholds,
) -> ScreeningReport {
    debug_assert_eq!(before.shapes.len(), after.len());
    let mut shapes = Vec::new();
    let mut dropped = Vec::new();
    let mut kept = 0usize;
    for (index, (src, trace)) in before.shapes.iter().zip(after).enumerate() {
        let mut flags = Vec::new();
        // Checked even for dropped shapes, since a crossing image has zero
        // shoelace area and is dropped as degenerate. A crossing already present
        // in the source is not the augmentation's doing.
        if is_self_intersecting(&trace.mapped) && !is_self_intersecting(&src.polygon) {
            flags.push(ShapeFlag::SelfIntersecting);
        }
        match &trace.outcome {
            ClipOutcome::Dropped(reason) => dropped.push(DroppedShape {
                index,
                reason: *reason,
            }),
            ClipOutcome::Kept {
                visible_fraction, ..
            } => {
                kept += 1;
                let a0 = src.polygon.area();
                if a0 > 0.0 && trace.mapped.area() < thresholds.min_area_ratio * a0 {
                    flags.push(ShapeFlag::SubMinArea);
                }
                if let Some(r0) = aspect(&src.polygon) {
                    match aspect(&trace.mapped) {
                        Some(r1) if r1 <= thresholds.max_aspect_growth * r0 => {}
                        _ => flags.push(ShapeFlag::AspectBlowup),
                    }
                }
                if 1.0 - visible_fraction > thresholds.max_clipped_loss {
                    flags.push(ShapeFlag::OutOfFrameExcess);
                }
            }
        }
        if !flags.is_empty() {
            shapes.push(ShapeFlags { index, flags });
        }
    }
    let mut document = Vec::new();
    let n = before.shapes.len();
    if n > 0 && (kept as f64) < thresholds.min_surviving_fraction * n as f64 {
        document.push(DocumentFlag::VisibleShapeFractionLow);
    }
    if meta.nonconverged_fraction > thresholds.max_nonconverged_fraction {
        document.push(DocumentFlag::NonconvergedPixelsHigh);
    }
    let overall = if shapes.is_empty() && document.is_empty() {
        Overall::Clean
    } else {
        Overall::Flagged
    };
    ScreeningReport {
        shapes,
        document,
        dropped,
        overall,
    }
}

/// Traces for a document paired with itself: every shape kept, unchanged.
pub fn identity_traces(doc: &AnnotatedDocument) -> Vec<ShapeTrace> {
    doc.shapes
        .iter()
        .map(|s| ShapeTrace {
            mapped: s.polygon.clone(),
            outcome: ClipOutcome::Kept {
                shape: s.clone(),
                visible_fraction: 1.0,
            },
        })
        .collect()
}
