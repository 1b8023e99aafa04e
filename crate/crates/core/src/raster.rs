//! 8-bit image buffers, backward-mapped warping and overlay previews.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, ImageFormat, RgbImage, RgbaImage};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::{LayoutLabel, Shape};
use crate::deformation::WarmStart;
use crate::geometry::{segment_distance, Point2};
use crate::pipeline::TransformPlan;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("unsupported or corrupt image {path}: {message}")]
    UnsupportedFormat { path: String, message: String },
    #[error("image buffer has {got} bytes, expected {want}")]
    BadLength { got: usize, want: usize },
    #[error("unsupported channel count {0}")]
    BadChannels(u8),
    #[error("plan frame {plan_w}x{plan_h} does not match image {img_w}x{img_h}")]
    FrameMismatch {
        plan_w: f64,
        plan_h: f64,
        img_w: u32,
        img_h: u32,
    },
}

/// Row-major interleaved 8-bit pixels with 3 (RGB) or 4 (RGBA) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    channels: u8,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, channels: u8, data: Vec<u8>) -> Result<Self, RasterError> {
        if channels != 3 && channels != 4 {
            return Err(RasterError::BadChannels(channels));
        }
        let want = width as usize * height as usize * channels as usize;
        if data.len() != want {
            return Err(RasterError::BadLength {
                got: data.len(),
                want,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let data = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[u8] {
        let o = self.offset(x, y);
        &self.data[o..o + self.channels as usize]
    }

    pub fn set_rgb(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let o = self.offset(x, y);
        self.data[o..o + 3].copy_from_slice(&rgb);
    }

    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, rgb: [u8; 3]) {
        for y in y0..y1.min(self.height) {
            for x in x0..x1.min(self.width) {
                self.set_rgb(x, y, rgb);
            }
        }
    }

    fn to_dynamic(&self) -> DynamicImage {
        match self.channels {
            3 => DynamicImage::ImageRgb8(
                RgbImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("length checked"),
            ),
            _ => DynamicImage::ImageRgba8(
                RgbaImage::from_raw(self.width, self.height, self.data.clone())
                    .expect("length checked"),
            ),
        }
    }

    fn from_dynamic(img: DynamicImage) -> Self {
        if img.color().has_alpha() {
            let rgba = img.into_rgba8();
            let (w, h) = rgba.dimensions();
            Self {
                width: w,
                height: h,
                channels: 4,
                data: rgba.into_raw(),
            }
        } else {
            let rgb = img.into_rgb8();
            let (w, h) = rgb.dimensions();
            Self {
                width: w,
                height: h,
                channels: 3,
                data: rgb.into_raw(),
            }
        }
    }

    pub fn encode_png(&self) -> Vec<u8> {
        let mut out = Cursor::new(Vec::new());
        self.to_dynamic()
            .write_to(&mut out, ImageFormat::Png)
            .expect("in-memory PNG encoding cannot fail");
        out.into_inner()
    }

    pub fn decode(bytes: &[u8], label: &str) -> Result<Self, RasterError> {
        let img = image::load_from_memory(bytes).map_err(|e| RasterError::UnsupportedFormat {
            path: label.to_string(),
            message: e.to_string(),
        })?;
        Ok(Self::from_dynamic(img))
    }
}

pub fn read_image(path: &Path) -> Result<ImageBuffer, RasterError> {
    let bytes = std::fs::read(path).map_err(|source| RasterError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ImageBuffer::decode(&bytes, &path.display().to_string())
}

pub const JPEG_QUALITY: u8 = 90;

/// Writes PNG (lossless) or JPEG (quality 90) depending on the extension.
pub fn write_image(path: &Path, img: &ImageBuffer) -> Result<(), RasterError> {
    let io_err = |source| RasterError::Io {
        path: path.display().to_string(),
        source,
    };
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let bytes = match ext.as_str() {
        "png" => img.encode_png(),
        "jpg" | "jpeg" => {
            let mut out = Cursor::new(Vec::new());
            let rgb = img.to_dynamic().into_rgb8();
            image::codecs::jpeg::JpegEncoder::new_with_quality(&mut out, JPEG_QUALITY)
                .encode_image(&rgb)
                .map_err(|e| RasterError::UnsupportedFormat {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            out.into_inner()
        }
        other => {
            return Err(RasterError::UnsupportedFormat {
                path: path.display().to_string(),
                message: format!("unsupported extension {other:?}"),
            })
        }
    };
    std::fs::write(path, bytes).map_err(io_err)
}

/// What out-of-frame samples resolve to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FillStyle {
    Constant { color: [u8; 3] },
    ReplicateEdge,
}

impl Default for FillStyle {
    fn default() -> Self {
        FillStyle::Constant {
            color: [114, 114, 114],
        }
    }
}

/// How deformations are inverted during resampling.
///
/// With `map_step > 1` the backward map is solved exactly on a lattice of
/// pixel centers `map_step` apart and interpolated with Catmull-Rom splines.
/// A cell is interpolated only if its sixteen node solves converged and the
/// interpolated map at the cell center lands within `map_tol` of its target
/// under the forward map; every other cell is solved pixel by pixel. When more than
/// a small share of cells is rejected the step shrinks by a third, down to 2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseSettings {
    pub iters: u32,
    pub tol: f64,
    pub map_step: u32,
    pub map_tol: f64,
}

impl InverseSettings {
    /// Solves every pixel exactly.
    pub fn exact(self) -> Self {
        Self {
            map_step: 1,
            ..self
        }
    }
}

impl Default for InverseSettings {
    fn default() -> Self {
        Self {
            iters: 12,
            tol: 0.01,
            map_step: 8,
            map_tol: 0.02,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarpOutput {
    pub image: ImageBuffer,
    pub nonconverged_pixels: u64,
}

impl WarpOutput {
    pub fn nonconverged_fraction(&self) -> f64 {
        let n = self.image.width as u64 * self.image.height as u64;
        if n == 0 {
            0.0
        } else {
            self.nonconverged_pixels as f64 / n as f64
        }
    }
}

/// Subpixel precision of the bilinear weights, in bits.
const FRAC_BITS: u32 = 8;
const FRAC_ONE: i64 = 1 << FRAC_BITS;

struct Sampler<'a> {
    data: &'a [u8],
    w: i64,
    h: i64,
    replicate: bool,
    fill: [u8; 4],
}

impl<'a> Sampler<'a> {
    fn new(src: &'a ImageBuffer, fill: FillStyle) -> Self {
        let (replicate, fill) = match fill {
            FillStyle::Constant { color } => (false, [color[0], color[1], color[2], 255]),
            FillStyle::ReplicateEdge => (true, [0; 4]),
        };
        Self {
            data: &src.data,
            w: src.width as i64,
            h: src.height as i64,
            replicate,
            fill,
        }
    }

    /// Bilinear sample at continuous index-space coordinates (pixel centers at
    /// integers), with fixed-point weights. Taps outside the frame read the
    /// fill color, or the nearest edge pixel when replicating.
    #[inline]
    fn sample<const CH: usize>(&self, sx: f64, sy: f64, out: &mut [u8; CH]) {
        let (w, h, ch) = (self.w, self.h, CH);
        let (sx, sy) = if self.replicate {
            (sx.clamp(0.0, (w - 1) as f64), sy.clamp(0.0, (h - 1) as f64))
        } else {
            (sx, sy)
        };
        if !(sx > -1.0 && sy > -1.0 && sx < w as f64 && sy < h as f64) {
            out.copy_from_slice(&self.fill[..CH]);
            return;
        }
        // Both are above -1 here, so truncating the shifted value floors it
        // without a libm call.
        let xf = ((sx + 1.0) * FRAC_ONE as f64) as i64 - FRAC_ONE;
        let yf = ((sy + 1.0) * FRAC_ONE as f64) as i64 - FRAC_ONE;
        let (x0, y0) = (xf >> FRAC_BITS, yf >> FRAC_BITS);
        let (fx, fy) = (xf & (FRAC_ONE - 1), yf & (FRAC_ONE - 1));
        let weights = [
            ((FRAC_ONE - fx) * (FRAC_ONE - fy)) as u32,
            (fx * (FRAC_ONE - fy)) as u32,
            ((FRAC_ONE - fx) * fy) as u32,
            (fx * fy) as u32,
        ];
        const HALF: u32 = 1 << (2 * FRAC_BITS - 1);
        if x0 >= 0 && y0 >= 0 && x0 + 1 < w && y0 + 1 < h {
            let stride = w as usize * ch;
            let o = y0 as usize * stride + x0 as usize * ch;
            let d = self.data;
            for c in 0..ch {
                let v = weights[0] * d[o + c] as u32
                    + weights[1] * d[o + ch + c] as u32
                    + weights[2] * d[o + stride + c] as u32
                    + weights[3] * d[o + stride + ch + c] as u32;
                out[c] = ((v + HALF) >> (2 * FRAC_BITS)) as u8;
            }
            return;
        }
        let mut acc = [0u32; 4];
        let taps = [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)];
        for ((tx, ty), wgt) in taps.into_iter().zip(weights) {
            if wgt == 0 {
                continue;
            }
            let inside = tx >= 0 && ty >= 0 && tx < w && ty < h;
            if inside || self.replicate {
                let o = (ty.clamp(0, h - 1) * w + tx.clamp(0, w - 1)) as usize * ch;
                for (a, &v) in acc[..ch].iter_mut().zip(&self.data[o..o + ch]) {
                    *a += wgt * v as u32;
                }
            } else {
                for (a, &v) in acc[..ch].iter_mut().zip(&self.fill[..ch]) {
                    *a += wgt * v as u32;
                }
            }
        }
        for c in 0..ch {
            out[c] = ((acc[c] + HALF) >> (2 * FRAC_BITS)) as u8;
        }
    }
}

/// Warps `img` through `plan`, keeping the input canvas size.
///
/// Output pixel `(i, j)` takes its value from the backward image of its center
/// `(i + 0.5, j + 0.5)`. Rows are computed in parallel on the current rayon
/// pool; the result does not depend on the worker count.
pub fn warp_image(
    img: &ImageBuffer,
    plan: &TransformPlan,
    fill: FillStyle,
) -> Result<WarpOutput, RasterError> {
    warp_image_with(img, plan, fill, InverseSettings::default())
}

pub fn warp_image_with(
    img: &ImageBuffer,
    plan: &TransformPlan,
    fill: FillStyle,
    inverse: InverseSettings,
) -> Result<WarpOutput, RasterError> {
    let (pw, ph) = plan.frame();
    if pw != img.width as f64 || ph != img.height as f64 {
        return Err(RasterError::FrameMismatch {
            plan_w: pw,
            plan_h: ph,
            img_w: img.width,
            img_h: img.height,
        });
    }
    if plan.is_identity() {
        return Ok(WarpOutput {
            image: img.clone(),
            nonconverged_pixels: 0,
        });
    }
    let sampler = Sampler::new(img, fill);
    let map = BackwardMap::new(plan, img.width, img.height, inverse);
    let row_len = img.width as usize * img.channels as usize;
    let mut data = vec![0u8; row_len * img.height as usize];
    let nonconverged = match img.channels {
        3 => warp_rows::<3>(&map, &sampler, &mut data, row_len),
        _ => warp_rows::<4>(&map, &sampler, &mut data, row_len),
    };
    Ok(WarpOutput {
        image: ImageBuffer {
            width: img.width,
            height: img.height,
            channels: img.channels,
            data,
        },
        nonconverged_pixels: nonconverged,
    })
}

fn warp_rows<const CH: usize>(
    map: &BackwardMap,
    sampler: &Sampler,
    data: &mut [u8],
    row_len: usize,
) -> u64 {
    data.par_chunks_mut(row_len)
        .enumerate()
        .map(|(j, row)| {
            let (px, _) = row.as_chunks_mut::<CH>();
            let mut misses = 0u64;
            map.row(j, |i, s, ok| {
                misses += u64::from(!ok);
                sampler.sample(s.x - 0.5, s.y - 0.5, &mut px[i]);
            });
            misses
        })
        .sum()
}

/// Where each output pixel of a warp reads from, in source pixel
/// coordinates. This is the exact map [`warp_image_with`] samples through.
pub struct BackwardMap<'a> {
    plan: &'a TransformPlan,
    inverse: InverseSettings,
    width: usize,
    lattice: Option<Lattice>,
}

impl<'a> BackwardMap<'a> {
    pub fn new(plan: &'a TransformPlan, width: u32, height: u32, inverse: InverseSettings) -> Self {
        let lattice = (plan.has_nonlinear() && inverse.map_step > 1 && width >= 2 && height >= 2)
            .then(|| {
                // Start near a quarter of the finest feature so fine noise does
                // not pay for coarse lattices that are bound to be rejected.
                let finest = plan
                    .fields()
                    .fields()
                    .iter()
                    .map(|f| f.feature_length())
                    .fold(f64::INFINITY, f64::min);
                let mut step =
                    ((finest / FEATURE_STEPS) as usize).clamp(2, inverse.map_step as usize);
                loop {
                    let lat = Lattice::build(plan, width, height, step, inverse);
                    if step <= 2 || lat.rejected_share() <= MAX_REJECTED_SHARE {
                        break lat;
                    }
                    step = (step * 2 / 3).max(2);
                }
            });
        Self {
            plan,
            inverse,
            width: width as usize,
            lattice,
        }
    }

    /// Lattice step in use, if the map is interpolated.
    pub fn step(&self) -> Option<usize> {
        self.lattice.as_ref().map(|l| l.step)
    }

    /// Calls `emit(i, source, converged)` for each pixel of output row `j`,
    /// left to right.
    pub fn row(&self, j: usize, mut emit: impl FnMut(usize, Point2, bool)) {
        if !self.plan.has_nonlinear() {
            let inv = self.plan.inverse_matrix();
            let qy = j as f64 + 0.5;
            for i in 0..self.width {
                emit(i, inv.apply_affine(Point2::new(i as f64 + 0.5, qy)), true);
            }
            return;
        }
        let Some(lat) = &self.lattice else {
            self.solve_span(j, 0..self.width, &mut emit);
            return;
        };
        let step = lat.step;
        let nx = lat.cells_x + 3;
        let (kb, wy) = (j / step, &lat.weights[j % step]);
        // Vertical pass: one blended value per node column.
        let cols: Vec<Point2> = (0..nx)
            .map(|a| {
                (0..4).fold(Point2::default(), |acc, b| {
                    acc + lat.nodes[(kb + b) * nx + a] * wy[b]
                })
            })
            .collect();
        for ka in 0..lat.cells_x {
            let span = ka * step..((ka + 1) * step).min(self.width);
            if !lat.accepted[kb * lat.cells_x + ka] {
                self.solve_span(j, span, &mut emit);
                continue;
            }
            let c = &cols[ka..ka + 4];
            for i in span {
                let wx = &lat.weights[i - ka * step];
                emit(
                    i,
                    c[0] * wx[0] + c[1] * wx[1] + c[2] * wx[2] + c[3] * wx[3],
                    true,
                );
            }
        }
    }

    /// Solves pixels `range` of output row `j` exactly, warm-starting along it.
    fn solve_span(
        &self,
        j: usize,
        range: std::ops::Range<usize>,
        emit: &mut impl FnMut(usize, Point2, bool),
    ) {
        let mut warm = vec![WarmStart::default(); self.plan.fields().fields().len()];
        let qy = j as f64 + 0.5;
        for i in range {
            let q = Point2::new(i as f64 + 0.5, qy);
            let (s, ok) =
                self.plan
                    .inverse_warm(q, &mut warm, self.inverse.iters, self.inverse.tol);
            emit(i, s, ok);
        }
    }
}

/// Catmull-Rom weights for the four nodes around fraction `t` of a cell.
fn catmull_rom(t: f64) -> [f64; 4] {
    let (t2, t3) = (t * t, t * t * t);
    [
        0.5 * (-t3 + 2.0 * t2 - t),
        0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
        0.5 * (-3.0 * t3 + 4.0 * t2 + t),
        0.5 * (t3 - t2),
    ]
}

/// Lattice steps per feature length for the initial step.
const FEATURE_STEPS: f64 = 4.0;

/// Rejected cells above this share make the lattice shrink its step.
const MAX_REJECTED_SHARE: f64 = 0.05;

/// Backward map solved on pixel centers `step` apart, one node beyond the
/// frame on every side so each cell has its full 4x4 neighbourhood.
struct Lattice {
    step: usize,
    /// Cells per axis.
    cells_x: usize,
    cells_y: usize,
    /// Node solutions, row-major over `(cells_y + 3) x (cells_x + 3)`.
    nodes: Vec<Point2>,
    /// Per cell, row-major: interpolation accepted.
    accepted: Vec<bool>,
    rejected: usize,
    /// Spline weights for each offset within a cell.
    weights: Vec<[f64; 4]>,
}

impl Lattice {
    fn build(plan: &TransformPlan, w: u32, h: u32, step: usize, inverse: InverseSettings) -> Self {
        let cells_x = (w as usize - 1) / step + 1;
        let cells_y = (h as usize - 1) / step + 1;
        let nx = cells_x + 3;
        let solved: Vec<(Point2, bool)> = (0..cells_y + 3)
            .into_par_iter()
            .flat_map_iter(|b| {
                let y = (b as f64 - 1.0) * step as f64 + 0.5;
                let mut warm = vec![WarmStart::default(); plan.fields().fields().len()];
                (0..nx)
                    .map(|a| {
                        let q = Point2::new((a as f64 - 1.0) * step as f64 + 0.5, y);
                        plan.inverse_warm(q, &mut warm, inverse.iters, inverse.tol)
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let mid = catmull_rom(0.5);
        let accepted: Vec<bool> = (0..cells_y)
            .into_par_iter()
            .flat_map_iter(|kb| {
                let solved = &solved;
                (0..cells_x).map(move |ka| {
                    let mut s = Point2::default();
                    for (b, wy) in mid.iter().enumerate() {
                        for (a, wx) in mid.iter().enumerate() {
                            let (p, ok) = solved[(kb + b) * nx + ka + a];
                            if !ok {
                                return false;
                            }
                            s = s + p * (wx * wy);
                        }
                    }
                    let target = Point2::new(
                        (ka as f64 + 0.5) * step as f64 + 0.5,
                        (kb as f64 + 0.5) * step as f64 + 0.5,
                    );
                    (plan.forward(s) - target).norm() <= inverse.map_tol
                })
            })
            .collect();
        let rejected = accepted.iter().filter(|a| !**a).count();
        Self {
            step,
            cells_x,
            cells_y,
            nodes: solved.into_iter().map(|n| n.0).collect(),
            accepted,
            rejected,
            weights: (0..step)
                .map(|r| catmull_rom(r as f64 / step as f64))
                .collect(),
        }
    }

    fn rejected_share(&self) -> f64 {
        self.rejected as f64 / (self.cells_x * self.cells_y) as f64
    }
}

/// Per-label outline colors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    colors: [[u8; 3]; LayoutLabel::COUNT],
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            colors: [
                [230, 25, 75],
                [60, 180, 75],
                [255, 225, 25],
                [0, 130, 200],
                [245, 130, 48],
                [145, 30, 180],
                [70, 240, 240],
                [240, 50, 230],
                [210, 245, 60],
                [250, 190, 212],
                [0, 128, 128],
                [170, 110, 40],
                [128, 0, 0],
                [0, 0, 128],
            ],
        }
    }
}

impl Palette {
    pub fn uniform(rgb: [u8; 3]) -> Self {
        Self {
            colors: [rgb; LayoutLabel::COUNT],
        }
    }

    pub fn color(&self, label: LayoutLabel) -> [u8; 3] {
        self.colors[label.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlayStyle {
    /// Outline width in pixels.
    pub thickness: f64,
    /// Side of the filled label tag drawn above each shape's topmost vertex;
    /// zero disables tags.
    pub tag_size: u32,
}

impl Default for OverlayStyle {
    fn default() -> Self {
        Self {
            thickness: 2.0,
            tag_size: 6,
        }
    }
}

pub fn render_overlay(img: &ImageBuffer, shapes: &[Shape], palette: &Palette) -> ImageBuffer {
    render_overlay_with(img, shapes, palette, OverlayStyle::default())
}

/// Draws each polygon outline (pixels whose center lies within half the
/// thickness of an edge) plus an optional label tag. Returns a new buffer.
pub fn render_overlay_with(
    img: &ImageBuffer,
    shapes: &[Shape],
    palette: &Palette,
    style: OverlayStyle,
) -> ImageBuffer {
    let mut out = img.clone();
    let half = style.thickness / 2.0;
    let (w, h) = (img.width as f64, img.height as f64);
    for shape in shapes {
        let color = palette.color(shape.label);
        for (a, b) in shape.polygon.edges() {
            let x0 = (a.x.min(b.x) - half - 1.0).floor().max(0.0);
            let x1 = (a.x.max(b.x) + half + 1.0).ceil().min(w);
            let y0 = (a.y.min(b.y) - half - 1.0).floor().max(0.0);
            let y1 = (a.y.max(b.y) + half + 1.0).ceil().min(h);
            if !(x0 < x1 && y0 < y1) {
                continue;
            }
            for y in y0 as u32..y1 as u32 {
                for x in x0 as u32..x1 as u32 {
                    let c = Point2::new(x as f64 + 0.5, y as f64 + 0.5);
                    if segment_distance(c, a, b) <= half {
                        out.set_rgb(x, y, color);
                    }
                }
            }
        }
        if style.tag_size > 0 {
            let top = shape
                .polygon
                .vertices()
                .iter()
                .copied()
                .min_by(|p, q| p.y.total_cmp(&q.y).then(p.x.total_cmp(&q.x)))
                .expect("polygons are non-empty");
            let t = style.tag_size as f64;
            let tx0 = top.x.floor().clamp(0.0, w) as u32;
            let ty1 = top.y.floor().clamp(0.0, h) as u32;
            let ty0 = (top.y.floor() - t).clamp(0.0, h) as u32;
            let tx1 = (top.x.floor() + t).clamp(0.0, w) as u32;
            out.fill_rect(tx0, ty0, tx1, ty1, color);
        }
    }
    out
}
