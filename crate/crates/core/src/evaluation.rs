//! Rotated-box detection metrics: IoU, greedy matching, 101-point AP and
//! per-class reports.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::LayoutLabel;
use crate::geometry::{convex_intersect, Polygon};
use crate::obb::{parse_obb_file, ObbError, ObbRecord};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse { path: PathBuf, source: ObbError },
    #[error("{path}: line {line}: class index {class} outside 0..{limit}")]
    ClassOutOfRange {
        path: PathBuf,
        line: usize,
        class: usize,
        limit: usize,
    },
    #[error("{path}: bad dims sidecar, expected \"W H\"")]
    BadDims { path: PathBuf },
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| (50 + 5 * i) as f64 / 100.0)
}

/// IoU of two convex polygons; zero when either has no area.
pub fn polygon_iou(a: &Polygon, b: &Polygon) -> f64 {
    let (aa, ab) = (a.area(), b.area());
    if aa <= 0.0 || ab <= 0.0 {
        return 0.0;
    }
    let inter = convex_intersect(&a.oriented_cw(), &b.oriented_cw()).map_or(0.0, |p| p.area());
    let union = aa + ab - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// IoU of two normalized OBBs measured in the pixel frame they came from.
pub fn rotated_iou(a: &ObbRecord, b: &ObbRecord, frame_w: f64, frame_h: f64) -> f64 {
    match (
        a.to_pixel_polygon(frame_w, frame_h),
        b.to_pixel_polygon(frame_w, frame_h),
    ) {
        (Ok(pa), Ok(pb)) => polygon_iou(&pa, &pb),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GtBox {
    pub class_index: usize,
    pub polygon: Polygon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetBox {
    pub class_index: usize,
    pub confidence: f64,
    pub polygon: Polygon,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    /// Index into the detection slice.
    pub det: usize,
    pub gt: Option<usize>,
    pub iou: f64,
}

/// Greedy matching in descending confidence order (stable for ties). Each
/// detection takes the unmatched GT with the highest IoU at or above the
/// threshold; equal IoUs go to the lower GT index.
pub fn match_detections(
    gts: &[GtBox],
    dets: &[DetBox],
    iou_threshold: f64,
    class_aware: bool,
) -> Vec<Match> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| dets[j].confidence.total_cmp(&dets[i].confidence));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|di| {
            let d = &dets[di];
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if taken[gi] || (class_aware && g.class_index != d.class_index) {
                    continue;
                }
                let iou = polygon_iou(&d.polygon, &g.polygon);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                taken[gi] = true;
            }
            Match {
                det: di,
                gt: best.map(|b| b.0),
                iou: best.map_or(0.0, |b| b.1),
            }
        })
        .collect()
}

pub const RECALL_POINTS: usize = 101;

/// 101-point interpolated AP over detections already in confidence order.
/// Returns `None` when there is no ground truth to recall.
pub fn average_precision(tp_flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut tps = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (i, &f) in tp_flags.iter().enumerate() {
        tp += usize::from(f);
        tps.push(tp);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    let mut cursor = 0usize;
    for k in 0..RECALL_POINTS {
        // recall >= k / 100, compared exactly in integers.
        while cursor < tps.len() && tps[cursor] * 100 < k * n_gt {
            cursor += 1;
        }
        if cursor == tps.len() {
            break;
        }
        sum += precision[cursor];
    }
    Some(sum / RECALL_POINTS as f64)
}

/// One page: frame size plus stem-matched GT and predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub id: String,
    pub frame_w: f64,
    pub frame_h: f64,
    pub gts: Vec<ObbRecord>,
    pub preds: Vec<ObbRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub class_index: usize,
    pub images: usize,
    pub instances: usize,
    pub precision: f64,
    pub recall: f64,
    /// AP at each IoU threshold, in threshold order.
    pub ap: Vec<f64>,
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub images: usize,
    pub instances: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap50_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub all: AggregateMetrics,
    /// Classes with at least one GT instance, in class-index order.
    pub classes: Vec<ClassMetrics>,
}

struct ClassPool<'a> {
    /// (image index, GT boxes of this class in that image)
    gts: BTreeMap<usize, Vec<GtBox>>,
    /// (image index, position in image, detection) in image order.
    dets: Vec<(usize, usize, &'a ObbRecord)>,
}

fn pixel_polygon(r: &ObbRecord, w: f64, h: f64) -> Option<Polygon> {
    r.to_pixel_polygon(w, h).ok()
}

/// TP flags in global confidence order for one class at one threshold.
fn class_tp_flags(images: &[EvalImage], pool: &ClassPool<'_>, threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..pool.dets.len()).collect();
    let conf = |i: usize| pool.dets[i].2.confidence.unwrap_or(0.0);
    order.sort_by(|&i, &j| conf(j).total_cmp(&conf(i)));
    let mut taken: BTreeMap<usize, Vec<bool>> = pool
        .gts
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();
    order
        .into_iter()
        .map(|i| {
            let (img, _, rec) = pool.dets[i];
            let (Some(gts), Some(used)) = (pool.gts.get(&img), taken.get_mut(&img)) else {
                return false;
            };
            let Some(dp) = pixel_polygon(rec, images[img].frame_w, images[img].frame_h) else {
                return false;
            };
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] {
                    continue;
                }
                let iou = polygon_iou(&dp, &g.polygon);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            match best {
                Some((gi, _)) => {
                    used[gi] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// Precision and recall at the cut with the highest F1 (first on ties).
fn max_f1_point(tp_flags: &[bool], n_gt: usize) -> (f64, f64) {
    let mut best = (0.0, 0.0, 0.0);
    let mut tp = 0usize;
    for (i, &f) in tp_flags.iter().enumerate() {
        tp += usize::from(f);
        let p = tp as f64 / (i + 1) as f64;
        let r = tp as f64 / n_gt as f64;
        let f1 = if p + r > 0.0 {
            2.0 * p * r / (p + r)
        } else {
            0.0
        };
        if f1 > best.0 {
            best = (f1, p, r);
        }
    }
    (best.1, best.2)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Evaluates in-memory pages. Images are processed in `id` order, so the
/// result does not depend on the order of `images`.
pub fn evaluate(images: &[EvalImage]) -> EvalReport {
    let mut sorted: Vec<EvalImage> = images.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    let images = &sorted[..];
    let thresholds = iou_thresholds();
    let mut pools: BTreeMap<usize, ClassPool<'_>> = BTreeMap::new();
    for (ii, img) in images.iter().enumerate() {
        for g in &img.gts {
            let Some(polygon) = pixel_polygon(g, img.frame_w, img.frame_h) else {
                continue;
            };
            let pool = pools.entry(g.class_index).or_insert_with(|| ClassPool {
                gts: BTreeMap::new(),
                dets: vec![],
            });
            pool.gts.entry(ii).or_default().push(GtBox {
                class_index: g.class_index,
                polygon,
            });
        }
    }
    for (ii, img) in images.iter().enumerate() {
        for (pi, p) in img.preds.iter().enumerate() {
            if let Some(pool) = pools.get_mut(&p.class_index) {
                pool.dets.push((ii, pi, p));
            }
        }
    }
    let mut classes = Vec::new();
    for (&ci, pool) in &pools {
        let instances: usize = pool.gts.values().map(Vec::len).sum();
        if instances == 0 {
            continue;
        }
        let ap: Vec<f64> = thresholds
            .iter()
            .map(|&t| {
                average_precision(&class_tp_flags(images, pool, t), instances)
                    .expect("class has instances")
            })
            .collect();
        let (precision, recall) = max_f1_point(&class_tp_flags(images, pool, 0.5), instances);
        classes.push(ClassMetrics {
            class: LayoutLabel::from_index(ci)
                .map(|l| l.as_str().to_string())
                .unwrap_or_else(|| ci.to_string()),
            class_index: ci,
            images: pool.gts.len(),
            instances,
            precision,
            recall,
            ap50: ap[0],
            ap75: ap[5],
            ap50_95: mean(ap.iter().copied()),
            ap,
        });
    }
    let all = AggregateMetrics {
        images: images.len(),
        instances: classes.iter().map(|c| c.instances).sum(),
        precision: mean(classes.iter().map(|c| c.precision)),
        recall: mean(classes.iter().map(|c| c.recall)),
        ap50: mean(classes.iter().map(|c| c.ap50)),
        ap75: mean(classes.iter().map(|c| c.ap75)),
        ap50_95: mean(classes.iter().map(|c| c.ap50_95)),
    };
    EvalReport {
        thresholds: thresholds.to_vec(),
        all,
        classes,
    }
}

impl EvalReport {
    /// Aligned text table: an `all` row followed by one row per class.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<20} {:>7} {:>9} {:>7} {:>7} {:>8} {:>9} {:>13}",
            "Class", "Images", "Instances", "P", "R", "mAP@0.5", "mAP@0.75", "mAP@0.5:0.95"
        )
        .unwrap();
        let row = |out: &mut String,
                   name: &str,
                   im: usize,
                   n: usize,
                   p: f64,
                   r: f64,
                   a: f64,
                   b: f64,
                   c: f64| {
            writeln!(
                out,
                "{name:<20} {im:>7} {n:>9} {p:>7.4} {r:>7.4} {a:>8.4} {b:>9.4} {c:>13.4}"
            )
            .unwrap();
        };
        let a = &self.all;
        row(
            &mut out,
            "all",
            a.images,
            a.instances,
            a.precision,
            a.recall,
            a.ap50,
            a.ap75,
            a.ap50_95,
        );
        for c in &self.classes {
            row(
                &mut out,
                &c.class,
                c.images,
                c.instances,
                c.precision,
                c.recall,
                c.ap50,
                c.ap75,
                c.ap50_95,
            );
        }
        out
    }
}

fn read_text(path: &Path) -> Result<String, EvalError> {
    std::fs::read_to_string(path).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn txt_stems(dir: &Path) -> Result<BTreeSet<String>, EvalError> {
    let rd = std::fs::read_dir(dir).map_err(|source| EvalError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut out = BTreeSet::new();
    for e in rd {
        let e = e.map_err(|source| EvalError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let p = e.path();
        if p.extension().is_some_and(|x| x == "txt") && p.is_file() {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                out.insert(s.to_string());
            }
        }
    }
    Ok(out)
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Page size for `stem`: a `stem.dims` sidecar (`"W H"`) in `gt_dir`, else a
/// stem-matched image in `gt_dir` or `gt_dir/../images`. `None` when neither
/// exists.
pub fn lookup_dims(gt_dir: &Path, stem: &str) -> Result<Option<(f64, f64)>, EvalError> {
    let side = gt_dir.join(format!("{stem}.dims"));
    if side.is_file() {
        let text = read_text(&side)?;
        let nums: Vec<f64> = text
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|_| EvalError::BadDims { path: side.clone() })?;
        return match nums[..] {
            [w, h] if w > 0.0 && h > 0.0 && w.is_finite() && h.is_finite() => Ok(Some((w, h))),
            _ => Err(EvalError::BadDims { path: side }),
        };
    }
    let mut dirs = vec![gt_dir.to_path_buf()];
    if let Some(parent) = gt_dir.parent() {
        dirs.push(parent.join("images"));
    }
    for d in dirs {
        for ext in IMAGE_EXTS {
            let p = d.join(format!("{stem}.{ext}"));
            if p.is_file() {
                if let Ok((w, h)) = image::image_dimensions(&p) {
                    return Ok(Some((w as f64, h as f64)));
                }
            }
        }
    }
    Ok(None)
}

fn load_records(
    path: &Path,
    is_prediction: bool,
    num_classes: usize,
) -> Result<Vec<ObbRecord>, EvalError> {
    let text = read_text(path)?;
    // A prediction file in ground-truth layout carries no scores; every
    // detection then counts with confidence 1.
    let unscored = is_prediction
        && text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .all(|l| l.split_whitespace().count() == 9);
    let mut recs =
        parse_obb_file(&text, is_prediction && !unscored).map_err(|source| EvalError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
    if unscored {
        for r in &mut recs {
            r.confidence = Some(1.0);
        }
    }
    if let Some((i, r)) = recs
        .iter()
        .enumerate()
        .find(|(_, r)| r.class_index >= num_classes)
    {
        // Records map one-to-one onto non-blank lines.
        let line = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .nth(i)
            .map_or(0, |(n, _)| n + 1);
        return Err(EvalError::ClassOutOfRange {
            path: path.to_path_buf(),
            line,
            class: r.class_index,
            limit: num_classes,
        });
    }
    Ok(recs)
}

/// Loads stem-matched OBB files and evaluates them. A missing prediction file
/// means no detections for that page. Prediction files without a GT file are
/// scored as pages with no ground truth.
pub fn evaluate_dataset(
    gt_dir: &Path,
    pred_dir: &Path,
    num_classes: usize,
) -> Result<EvalReport, EvalError> {
    let gt_stems = txt_stems(gt_dir)?;
    let pred_stems = if pred_dir.is_dir() {
        txt_stems(pred_dir)?
    } else {
        BTreeSet::new()
    };
    let mut images = Vec::new();
    for stem in gt_stems.union(&pred_stems) {
        let gts = if gt_stems.contains(stem) {
            load_records(&gt_dir.join(format!("{stem}.txt")), false, num_classes)?
        } else {
            log::warn!("prediction {stem}.txt has no ground truth file");
            vec![]
        };
        let preds = if pred_stems.contains(stem) {
            load_records(&pred_dir.join(format!("{stem}.txt")), true, num_classes)?
        } else {
            vec![]
        };
        let (frame_w, frame_h) = match lookup_dims(gt_dir, stem)? {
            Some(d) => d,
            None => {
                log::warn!("no page size for {stem}; computing IoU in normalized space");
                (1.0, 1.0)
            }
        };
        images.push(EvalImage {
            id: stem.clone(),
            frame_w,
            frame_h,
            gts,
            preds,
        });
    }
    Ok(evaluate(&images))
}
