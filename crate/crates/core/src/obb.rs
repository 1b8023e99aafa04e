//! Oriented bounding boxes: polygon conversion, canonical vertex order and the
//! eight-coordinate text format.
//!
//! GT lines are `class x1 y1 x2 y2 x3 y3 x4 y4`, prediction lines insert a
//! confidence after the class. Coordinates are normalized by the page size.
//! Vertex order is fixed in pixel space, where the box is a true rectangle:
//! clockwise on screen, starting from the vertex with the smallest `x + y`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::LayoutLabel;
use crate::geometry::{min_area_rect, GeometryError, Point2, Polygon};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObbError {
    #[error("degenerate polygon: {0}")]
    Degenerate(#[from] GeometryError),
    #[error("vertices do not form a rectangle")]
    NotARectangle,
    #[error("frame must have positive finite size, got {0}x{1}")]
    InvalidFrame(f64, f64),
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: {message}")]
    OutOfRange { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObbRecord {
    pub class_index: usize,
    pub vertices: [Point2; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl ObbRecord {
    pub fn label(&self) -> Option<LayoutLabel> {
        LayoutLabel::from_index(self.class_index)
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = Some(confidence);
        self
    }

    /// Vertices scaled back to pixels.
    pub fn pixel_vertices(&self, frame_w: f64, frame_h: f64) -> [Point2; 4] {
        self.vertices
            .map(|v| Point2::new(v.x * frame_w, v.y * frame_h))
    }

    pub fn to_pixel_polygon(&self, frame_w: f64, frame_h: f64) -> Result<Polygon, GeometryError> {
        Polygon::new(self.pixel_vertices(frame_w, frame_h).to_vec())
    }

    /// Center, side lengths and angle of the first edge, in pixels and degrees.
    pub fn to_xywhr(&self, frame_w: f64, frame_h: f64) -> Xywhr {
        let [a, b, c, _] = self.pixel_vertices(frame_w, frame_h);
        let e = b - a;
        Xywhr {
            cx: (a.x + c.x) / 2.0,
            cy: (a.y + c.y) / 2.0,
            w: e.norm(),
            h: (c - b).norm(),
            angle_deg: e.y.atan2(e.x).to_degrees(),
        }
    }
}

/// Center/size/angle box parameterization in pixels. The angle is measured
/// from the x axis toward y (clockwise on screen).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Xywhr {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub angle_deg: f64,
}

impl Xywhr {
    pub fn corners(&self) -> [Point2; 4] {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let u = Point2::new(c, s) * (self.w / 2.0);
        let v = Point2::new(-s, c) * (self.h / 2.0);
        let o = Point2::new(self.cx, self.cy);
        [o - u - v, o + u - v, o + u + v, o - u + v]
    }

    pub fn to_record(
        &self,
        frame_w: f64,
        frame_h: f64,
        class: LayoutLabel,
    ) -> Result<ObbRecord, ObbError> {
        let rect = Polygon::new(self.corners().to_vec())?;
        normalize(&canonical_order(&rect)?, frame_w, frame_h, class)
    }
}

const ORTHO_TOL: f64 = 1e-6;

/// Reorders a rectangle clockwise (positive shoelace area in y-down axes)
/// starting from its minimal `x + y` vertex; ties go to the smaller `y`, then
/// the smaller `x`.
pub fn canonical_order(rect: &Polygon) -> Result<Polygon, ObbError> {
    let v = rect.vertices();
    if v.len() != 4 {
        return Err(ObbError::NotARectangle);
    }
    for i in 0..4 {
        let u = v[(i + 1) % 4] - v[i];
        let w = v[(i + 2) % 4] - v[(i + 1) % 4];
        let (nu, nw) = (u.norm(), w.norm());
        if nu == 0.0 || nw == 0.0 || (u.dot(w) / (nu * nw)).abs() > ORTHO_TOL {
            return Err(ObbError::NotARectangle);
        }
    }
    let mut pts: Vec<Point2> = v.to_vec();
    if rect.signed_area() < 0.0 {
        pts.reverse();
    }
    let start = top_left_index(&pts);
    pts.rotate_left(start);
    Ok(Polygon::new(pts)?)
}

/// Index of the minimal `x + y` vertex, ties to the smaller `y`, then `x`.
fn top_left_index(pts: &[Point2]) -> usize {
    let extent = pts
        .iter()
        .flat_map(|p| [p.x.abs(), p.y.abs()])
        .fold(1.0f64, f64::max);
    let tol = 1e-9 * extent;
    let min_sum = pts.iter().map(|p| p.x + p.y).fold(f64::INFINITY, f64::min);
    (0..pts.len())
        .filter(|&i| pts[i].x + pts[i].y <= min_sum + tol)
        .min_by(|&i, &j| {
            pts[i]
                .y
                .total_cmp(&pts[j].y)
                .then(pts[i].x.total_cmp(&pts[j].x))
        })
        .expect("at least one vertex attains the minimum")
}

fn normalize(
    rect: &Polygon,
    frame_w: f64,
    frame_h: f64,
    class: LayoutLabel,
) -> Result<ObbRecord, ObbError> {
    let mut v: Vec<Point2> = rect
        .vertices()
        .iter()
        .map(|p| Point2::new(p.x.clamp(0.0, frame_w), p.y.clamp(0.0, frame_h)))
        .collect();
    // Clamping can move a different vertex to the top-left.
    let start = top_left_index(&v);
    v.rotate_left(start);
    let norm = |p: Point2| {
        Point2::new(
            (p.x / frame_w).clamp(0.0, 1.0),
            (p.y / frame_h).clamp(0.0, 1.0),
        )
    };
    Ok(ObbRecord {
        class_index: class.index(),
        vertices: [norm(v[0]), norm(v[1]), norm(v[2]), norm(v[3])],
        confidence: None,
    })
}

/// Tightest rotated rectangle around `poly`, canonically ordered, normalized
/// by the frame and clamped into `[0, 1]`.
pub fn polygon_to_obb(
    poly: &Polygon,
    frame_w: f64,
    frame_h: f64,
    class: LayoutLabel,
) -> Result<ObbRecord, ObbError> {
    if !(frame_w > 0.0 && frame_h > 0.0 && frame_w.is_finite() && frame_h.is_finite()) {
        return Err(ObbError::InvalidFrame(frame_w, frame_h));
    }
    let rect = min_area_rect(poly)?;
    normalize(&canonical_order(&rect)?, frame_w, frame_h, class)
}

/// Eight rather than six decimals: converting OBB text to pixel polygons
/// and back then drifts by about 1e-8 instead of a full 1e-6 step.
pub const COORD_DECIMALS: usize = 8;

pub fn emit_obb_file(records: &[ObbRecord]) -> String {
    let mut out = String::new();
    for r in records {
        write!(out, "{}", r.class_index).unwrap();
        if let Some(c) = r.confidence {
            write!(out, " {c:.prec$}", prec = COORD_DECIMALS).unwrap();
        }
        for v in &r.vertices {
            write!(out, " {:.prec$} {:.prec$}", v.x, v.y, prec = COORD_DECIMALS).unwrap();
        }
        out.push('\n');
    }
    out
}

/// Parses OBB text. Blank lines are ignored; line numbers in errors are 1-based.
pub fn parse_obb_file(text: &str, is_prediction: bool) -> Result<Vec<ObbRecord>, ObbError> {
    let expected = if is_prediction { 10 } else { 9 };
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != expected {
            return Err(ObbError::ParseError {
                line,
                message: format!("expected {expected} fields, found {}", toks.len()),
            });
        }
        let class_index: usize = toks[0].parse().map_err(|_| ObbError::ParseError {
            line,
            message: format!("bad class index {:?}", toks[0]),
        })?;
        if class_index >= LayoutLabel::COUNT {
            return Err(ObbError::OutOfRange {
                line,
                message: format!(
                    "class index {class_index} outside 0..{}",
                    LayoutLabel::COUNT
                ),
            });
        }
        let mut nums = Vec::with_capacity(expected - 1);
        for t in &toks[1..] {
            let x: f64 = t.parse().map_err(|_| ObbError::ParseError {
                line,
                message: format!("bad number {t:?}"),
            })?;
            if !x.is_finite() {
                return Err(ObbError::ParseError {
                    line,
                    message: format!("non-finite number {t:?}"),
                });
            }
            if !(0.0..=1.0).contains(&x) {
                return Err(ObbError::OutOfRange {
                    line,
                    message: format!("value {x} outside [0, 1]"),
                });
            }
            nums.push(x);
        }
        let (confidence, c) = if is_prediction {
            (Some(nums[0]), &nums[1..])
        } else {
            (None, &nums[..])
        };
        out.push(ObbRecord {
            class_index,
            vertices: [
                Point2::new(c[0], c[1]),
                Point2::new(c[2], c[3]),
                Point2::new(c[4], c[5]),
                Point2::new(c[6], c[7]),
            ],
            confidence,
        });
    }
    Ok(out)
}
