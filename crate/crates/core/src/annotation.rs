//! LabelMe-style layout annotations and their transformation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::geometry::{clip_polygon, signed_area, Point2, Polygon};
use crate::pipeline::TransformPlan;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnnotationError {
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("malformed shape at index {index}: {reason}")]
    MalformedShape { index: usize, reason: String },
    #[error("missing or invalid field {0:?}")]
    MissingField(&'static str),
    #[error("invalid JSON: {0}")]
    Json(String),
}

/// Layout classes with fixed indices in alphabetical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayoutLabel {
    Caption,
    CodeBlock,
    EquationBlock,
    Figure,
    Footnote,
    Form,
    Image,
    ListItem,
    PageFooter,
    PageHeader,
    SectionHeader,
    Table,
    TableOfContents,
    Text,
}

impl LayoutLabel {
    pub const ALL: [LayoutLabel; 14] = [
        LayoutLabel::Caption,
        LayoutLabel::CodeBlock,
        LayoutLabel::EquationBlock,
        LayoutLabel::Figure,
        LayoutLabel::Footnote,
        LayoutLabel::Form,
        LayoutLabel::Image,
        LayoutLabel::ListItem,
        LayoutLabel::PageFooter,
        LayoutLabel::PageHeader,
        LayoutLabel::SectionHeader,
        LayoutLabel::Table,
        LayoutLabel::TableOfContents,
        LayoutLabel::Text,
    ];

    pub const COUNT: usize = Self::ALL.len();

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LayoutLabel::Caption => "caption",
            LayoutLabel::CodeBlock => "code-block",
            LayoutLabel::EquationBlock => "equation-block",
            LayoutLabel::Figure => "figure",
            LayoutLabel::Footnote => "footnote",
            LayoutLabel::Form => "form",
            LayoutLabel::Image => "image",
            LayoutLabel::ListItem => "list-item",
            LayoutLabel::PageFooter => "page-footer",
            LayoutLabel::PageHeader => "page-header",
            LayoutLabel::SectionHeader => "section-header",
            LayoutLabel::Table => "table",
            LayoutLabel::TableOfContents => "table-of-contents",
            LayoutLabel::Text => "text",
        }
    }
}

impl fmt::Display for LayoutLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayoutLabel {
    type Err = AnnotationError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| AnnotationError::UnknownLabel(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceKind {
    Polygon,
    Rectangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub label: LayoutLabel,
    pub polygon: Polygon,
    pub source_kind: SourceKind,
}

impl Shape {
    pub fn new(label: LayoutLabel, polygon: Polygon) -> Self {
        Self {
            label,
            polygon,
            source_kind: SourceKind::Polygon,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedDocument {
    pub image_path: String,
    pub image_w: u32,
    pub image_h: u32,
    pub shapes: Vec<Shape>,
    /// Top-level LabelMe fields this crate does not interpret, kept in order.
    pub extra: Map<String, Value>,
}

impl AnnotatedDocument {
    pub fn new(
        image_path: impl Into<String>,
        image_w: u32,
        image_h: u32,
        shapes: Vec<Shape>,
    ) -> Self {
        Self {
            image_path: image_path.into(),
            image_w,
            image_h,
            shapes,
            extra: Map::new(),
        }
    }
}

const KNOWN_KEYS: [&str; 4] = ["imagePath", "imageWidth", "imageHeight", "shapes"];

fn parse_point(v: &Value) -> Option<Point2> {
    let arr = v.as_array()?;
    if arr.len() != 2 {
        return None;
    }
    let p = Point2::new(arr[0].as_f64()?, arr[1].as_f64()?);
    p.is_finite().then_some(p)
}

pub fn parse_labelme(json_text: &str) -> Result<AnnotatedDocument, AnnotationError> {
    let root: Value =
        serde_json::from_str(json_text).map_err(|e| AnnotationError::Json(e.to_string()))?;
    let Value::Object(mut obj) = root else {
        return Err(AnnotationError::Json("top level is not an object".into()));
    };
    let image_path = obj
        .get("imagePath")
        .and_then(Value::as_str)
        .ok_or(AnnotationError::MissingField("imagePath"))?
        .to_string();
    let dim = |key: &'static str| {
        obj.get(key)
            .and_then(Value::as_u64)
            .filter(|v| *v >= 1 && *v <= u32::MAX as u64)
            .map(|v| v as u32)
            .ok_or(AnnotationError::MissingField(key))
    };
    let image_w = dim("imageWidth")?;
    let image_h = dim("imageHeight")?;
    let raw_shapes = obj
        .get("shapes")
        .and_then(Value::as_array)
        .ok_or(AnnotationError::MissingField("shapes"))?;

    let mut shapes = Vec::with_capacity(raw_shapes.len());
    for (index, raw) in raw_shapes.iter().enumerate() {
        let malformed = |reason: &str| AnnotationError::MalformedShape {
            index,
            reason: reason.into(),
        };
        let label: LayoutLabel = raw
            .get("label")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed("missing label"))?
            .parse()?;
        let points = raw
            .get("points")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing points"))?
            .iter()
            .map(parse_point)
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| malformed("points must be finite [x, y] pairs"))?;
        let kind = raw
            .get("shape_type")
            .and_then(Value::as_str)
            .unwrap_or("polygon");
        let (polygon, source_kind) = match kind {
            "rectangle" => {
                if points.len() != 2 {
                    return Err(malformed("rectangle needs exactly 2 points"));
                }
                let poly =
                    rect_to_polygon(points[0], points[1]).map_err(|e| malformed(&e.to_string()))?;
                (poly, SourceKind::Rectangle)
            }
            "polygon" => {
                let poly = Polygon::new(points).map_err(|e| malformed(&e.to_string()))?;
                (poly, SourceKind::Polygon)
            }
            other => return Err(malformed(&format!("unsupported shape_type {other:?}"))),
        };
        shapes.push(Shape {
            label,
            polygon,
            source_kind,
        });
    }
    for k in KNOWN_KEYS {
        obj.shift_remove(k);
    }
    Ok(AnnotatedDocument {
        image_path,
        image_w,
        image_h,
        shapes,
        extra: obj,
    })
}

/// Two opposite corners to a clockwise (on screen) four-corner polygon
/// starting at the top-left corner.
pub fn rect_to_polygon(a: Point2, b: Point2) -> Result<Polygon, crate::geometry::GeometryError> {
    Polygon::from_corners(a, b)
}

pub fn write_labelme(doc: &AnnotatedDocument) -> String {
    let shapes: Vec<Value> = doc
        .shapes
        .iter()
        .map(|s| {
            json!({
                "label": s.label.as_str(),
                "points": s.polygon.vertices().iter().map(|p| json!([p.x, p.y])).collect::<Vec<_>>(),
                "group_id": null,
                "shape_type": "polygon",
                "flags": {},
            })
        })
        .collect();
    let mut obj = doc.extra.clone();
    if !obj.contains_key("version") {
        obj.insert("version".into(), json!("5.2.1"));
    }
    if !obj.contains_key("flags") {
        obj.insert("flags".into(), json!({}));
    }
    // Always right after imagePath, so that re-emitting a parsed file
    // reproduces it byte for byte.
    let image_data = obj.shift_remove("imageData").unwrap_or(Value::Null);
    obj.insert("shapes".into(), Value::Array(shapes));
    obj.insert("imagePath".into(), json!(doc.image_path));
    obj.insert("imageData".into(), image_data);
    obj.insert("imageHeight".into(), json!(doc.image_h));
    obj.insert("imageWidth".into(), json!(doc.image_w));
    let mut out = serde_json::to_string_pretty(&Value::Object(obj)).expect("JSON values serialize");
    out.push('\n');
    out
}

/// Maps every vertex forward through `plan`; labels and vertex counts are
/// unchanged.
pub fn transform_shapes(doc: &AnnotatedDocument, plan: &TransformPlan) -> AnnotatedDocument {
    transform_shapes_with(doc, plan, None)
}

/// Like [`transform_shapes`], but when the plan carries a non-linear
/// deformation and `densify_max_edge` is set, edges are first subdivided so
/// that curved images of straight edges are followed closely.
pub fn transform_shapes_with(
    doc: &AnnotatedDocument,
    plan: &TransformPlan,
    densify_max_edge: Option<f64>,
) -> AnnotatedDocument {
    let densify = densify_max_edge.filter(|_| plan.has_nonlinear());
    let shapes = doc
        .shapes
        .iter()
        .map(|s| {
            let src = match densify {
                Some(e) => s.polygon.densified(e),
                None => s.polygon.clone(),
            };
            let polygon = Polygon::new(src.vertices().iter().map(|&p| plan.forward(p)).collect())
                .unwrap_or(src);
            Shape {
                label: s.label,
                polygon,
                source_kind: s.source_kind,
            }
        })
        .collect();
    AnnotatedDocument {
        image_path: doc.image_path.clone(),
        image_w: doc.image_w,
        image_h: doc.image_h,
        shapes,
        extra: doc.extra.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    /// No part of the shape is inside the frame.
    OutOfFrame,
    /// Less than the required fraction of the shape's area stayed visible.
    BelowMinVisible {
        visible_fraction: f64,
        min_visible: f64,
    },
    /// The shape has (numerically) zero area.
    Degenerate,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DropReason::OutOfFrame => write!(f, "out_of_frame"),
            DropReason::BelowMinVisible {
                visible_fraction,
                min_visible,
            } => {
                write!(
                    f,
                    "below_min_visible ({visible_fraction:.3} < {min_visible:.3})"
                )
            }
            DropReason::Degenerate => write!(f, "degenerate"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClipOutcome {
    Kept { shape: Shape, visible_fraction: f64 },
    Dropped(DropReason),
}

impl ClipOutcome {
    pub fn kept(&self) -> Option<&Shape> {
        match self {
            ClipOutcome::Kept { shape, .. } => Some(shape),
            ClipOutcome::Dropped(_) => None,
        }
    }
}

/// Minimum visible-area fractions, with per-label overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipPolicy {
    pub min_visible: f64,
    pub overrides: BTreeMap<LayoutLabel, f64>,
}

impl Default for ClipPolicy {
    fn default() -> Self {
        let mut overrides = BTreeMap::new();
        overrides.insert(LayoutLabel::PageHeader, 0.5);
        overrides.insert(LayoutLabel::PageFooter, 0.5);
        Self {
            min_visible: 0.30,
            overrides,
        }
    }
}

impl ClipPolicy {
    pub fn min_visible_for(&self, label: LayoutLabel) -> f64 {
        self.overrides
            .get(&label)
            .copied()
            .unwrap_or(self.min_visible)
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = |v: f64| v > 0.0 && v <= 1.0;
        if !ok(self.min_visible) || !self.overrides.values().all(|v| ok(*v)) {
            return Err("min_visible fractions must lie in (0, 1]".into());
        }
        Ok(())
    }
}

fn frame_polygon(frame_w: f64, frame_h: f64) -> Polygon {
    Polygon::from_corners(Point2::new(0.0, 0.0), Point2::new(frame_w, frame_h))
        .expect("frame is a valid rectangle")
}

/// Fraction of the shape's area that lies inside the frame.
pub fn visible_fraction(polygon: &Polygon, frame_w: f64, frame_h: f64) -> f64 {
    let area = polygon.area();
    if area <= 0.0 {
        return 0.0;
    }
    let clipped = clip_polygon(polygon.vertices(), &frame_polygon(frame_w, frame_h));
    (signed_area(&clipped).abs() / area).min(1.0)
}

pub fn clip_shape(shape: &Shape, frame_w: f64, frame_h: f64, min_visible: f64) -> ClipOutcome {
    let area = shape.polygon.area();
    let (lo, hi) = shape.polygon.bounds();
    let scale = (hi.x - lo.x).max(hi.y - lo.y).max(1.0);
    if area <= 1e-9 * scale {
        return ClipOutcome::Dropped(DropReason::Degenerate);
    }
    let inside = |p: &Point2| p.x >= 0.0 && p.y >= 0.0 && p.x <= frame_w && p.y <= frame_h;
    if shape.polygon.vertices().iter().all(inside) {
        return ClipOutcome::Kept {
            shape: shape.clone(),
            visible_fraction: 1.0,
        };
    }
    let frame = frame_polygon(frame_w, frame_h);
    let clipped = clip_polygon(shape.polygon.vertices(), &frame);
    let fraction = (signed_area(&clipped).abs() / area).min(1.0);
    if fraction <= 0.0 || clipped.len() < 3 {
        return ClipOutcome::Dropped(DropReason::OutOfFrame);
    }
    if fraction < min_visible {
        return ClipOutcome::Dropped(DropReason::BelowMinVisible {
            visible_fraction: fraction,
            min_visible,
        });
    }
    let polygon = if shape.polygon.is_convex() {
        let mut v = clipped;
        v.dedup_by(|a, b| a.distance(*b) <= 1e-9);
        if v.len() > 1 && v[0].distance(*v.last().unwrap()) <= 1e-9 {
            v.pop();
        }
        Polygon::new(v)
    } else {
        shape
            .polygon
            .map(|p| Point2::new(p.x.clamp(0.0, frame_w), p.y.clamp(0.0, frame_h)))
    };
    match polygon {
        Ok(polygon) => ClipOutcome::Kept {
            shape: Shape {
                label: shape.label,
                polygon,
                source_kind: shape.source_kind,
            },
            visible_fraction: fraction,
        },
        Err(_) => ClipOutcome::Dropped(DropReason::Degenerate),
    }
}
