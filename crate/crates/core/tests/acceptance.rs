//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and exits non-zero if any fails.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use docwarp::affine::AffineParams;
use docwarp::annotation::{parse_labelme, write_labelme, AnnotatedDocument, LayoutLabel, Shape};
use docwarp::deformation::{Deformation, DeformationSpec};
use docwarp::evaluation::{evaluate, iou_thresholds, polygon_iou, EvalImage, RECALL_POINTS};
use docwarp::geometry::{Point2, Polygon};
use docwarp::obb::{emit_obb_file, parse_obb_file, polygon_to_obb, ObbRecord, Xywhr};
use docwarp::pipeline::manifest::{parse_jsonl, read_manifest, to_jsonl};
use docwarp::pipeline::{
    augment_document, run_batch, sample_plan, AugmentationConfig, BatchOptions, DeformationRange,
    TransformPlan,
};
use docwarp::raster::{
    read_image, write_image, BackwardMap, FillStyle, ImageBuffer, InverseSettings,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IDENTITY_PAGES: usize = 24;
const IDENTITY_COORD_TOL: f64 = 1e-12;
const IDENTITY_BUDGET: Duration = Duration::from_secs(10);

const CORRESPONDENCE_PLANS: usize = 200;
const CORRESPONDENCE_AFFINE_IOU: f64 = 0.99;
const CORRESPONDENCE_NONLINEAR_IOU: f64 = 0.95;
const CORRESPONDENCE_BUDGET: Duration = Duration::from_secs(120);

// The six-decimal target value, not the constant 1/sqrt(2).
#[allow(clippy::approx_constant)]
const ROTATED_IOU_EXPECTED: f64 = 0.707107;
const ROTATED_IOU_TOL: f64 = 1e-6;
const MONTE_CARLO_SAMPLES: usize = 10_000_000;
const MONTE_CARLO_TOL: f64 = 1e-3;

const AP_DATASETS: usize = 100;
const AP_MAX_IMAGES: usize = 4;
const AP_MAX_DETECTIONS: usize = 10;
const AP_BUDGET: Duration = Duration::from_secs(30);

const MONOTONIC_LARGE_DATASETS: usize = 20;

const RESIDUAL_W: u32 = 640;
const RESIDUAL_H: u32 = 480;
const RESIDUAL_TOL: f64 = 0.05;
const RESIDUAL_MIN_SHARE: f64 = 0.999;
const RESIDUAL_SAMPLED_PLANS: u32 = 8;

const FORMAT_TOL: f64 = 1e-6;

const THROUGHPUT_W: u32 = 2000;
const THROUGHPUT_H: u32 = 1500;
const THROUGHPUT_BUDGET: Duration = Duration::from_millis(250);
const THROUGHPUT_PLANS_PER_KIND: u32 = 5;
const THROUGHPUT_REPEATS: usize = 2;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn shipped_config() -> AugmentationConfig {
    AugmentationConfig::load(&default_config_path()).expect("shipped config loads")
}

/// The shipped config with only deformation `kind`, always enabled.
fn only_kind(base: &AugmentationConfig, kind: &DeformationRange) -> AugmentationConfig {
    let mut d = *kind;
    match &mut d {
        DeformationRange::Elastic { probability, .. }
        | DeformationRange::Grid { probability, .. }
        | DeformationRange::Barrel { probability, .. }
        | DeformationRange::Wave { probability, .. }
        | DeformationRange::Swirl { probability, .. } => *probability = 1.0,
    }
    AugmentationConfig {
        deformations: vec![d],
        ..base.clone()
    }
}

fn identity_round_trip() -> Verdict {
    let t0 = Instant::now();
    let d = tempfile::tempdir().unwrap();
    let (inp, out) = (d.path().join("in"), d.path().join("out"));
    std::fs::create_dir_all(&inp).unwrap();
    for i in 0..IDENTITY_PAGES {
        let (w, h) = (120 + 37 * i as u32, 90 + 23 * (i as u32 % 7));
        let (mut doc, img) = synthetic_page(i as u64, w, h);
        // A rotated, non-convex shape alongside the axis-aligned blocks.
        let c = Point2::new(w as f64 * 0.5, h as f64 * 0.5);
        let r = w.min(h) as f64 * 0.3;
        let star: Vec<Point2> = (0..10)
            .map(|k| {
                let a = k as f64 * std::f64::consts::PI / 5.0 + 0.1 * i as f64;
                let rk = if k % 2 == 0 { r } else { r * 0.45 };
                Point2::new(c.x + rk * a.cos() + 0.123_456_789, c.y + rk * a.sin())
            })
            .collect();
        doc.shapes
            .push(Shape::new(LayoutLabel::Figure, Polygon::new(star).unwrap()));
        let stem = format!("page_{i:03}");
        doc.image_path = format!("{stem}.png");
        write_image(&inp.join(format!("{stem}.png")), &img).unwrap();
        std::fs::write(inp.join(format!("{stem}.json")), write_labelme(&doc)).unwrap();
    }
    let report = run_batch(
        &AugmentationConfig::neutral(),
        &inp,
        &out,
        BatchOptions::default(),
    )
    .expect("batch runs");
    let mut pixel_mismatch = 0;
    let mut file_mismatch = 0;
    let mut worst = 0.0f64;
    let mut shape_mismatch = 0;
    for e in read_manifest(&out.join("manifest.jsonl")).unwrap() {
        let src = std::fs::read(&e.source_image).unwrap();
        let dst = std::fs::read(out.join(&e.image)).unwrap();
        file_mismatch += usize::from(src != dst);
        let (a, b) = (
            read_image(Path::new(&e.source_image)).unwrap(),
            read_image(&out.join(&e.image)).unwrap(),
        );
        pixel_mismatch += usize::from(a != b);
        let sd = parse_labelme(&std::fs::read_to_string(&e.source_annotation).unwrap()).unwrap();
        let od = parse_labelme(&std::fs::read_to_string(out.join(&e.annotation)).unwrap()).unwrap();
        if sd.shapes.len() != od.shapes.len() {
            shape_mismatch += 1;
            continue;
        }
        for (s, o) in sd.shapes.iter().zip(&od.shapes) {
            if s.label != o.label || s.polygon.len() != o.polygon.len() {
                shape_mismatch += 1;
                continue;
            }
            for (p, q) in s.polygon.vertices().iter().zip(o.polygon.vertices()) {
                worst = worst.max((p.x - q.x).abs()).max((p.y - q.y).abs());
            }
        }
    }
    let elapsed = t0.elapsed();
    let pass = report.variants == IDENTITY_PAGES
        && report.failures.is_empty()
        && pixel_mismatch == 0
        && file_mismatch == 0
        && shape_mismatch == 0
        && worst <= IDENTITY_COORD_TOL
        && elapsed < IDENTITY_BUDGET;
    verdict(
        pass,
        format!(
            "{} pages, pixel mismatches {pixel_mismatch}, file mismatches {file_mismatch}, \
             shape mismatches {shape_mismatch}, max coord error {worst:.1e} (tol {IDENTITY_COORD_TOL:.0e}), \
             {:.2} s (budget {} s)",
            report.variants,
            elapsed.as_secs_f64(),
            IDENTITY_BUDGET.as_secs()
        ),
    )
}

const PAPER: [u8; 3] = [240, 240, 240];
const INK: [u8; 3] = [20, 20, 20];

/// IoU between the dark pixels of `img` and the pixel centers inside `poly`.
fn mask_iou(img: &ImageBuffer, poly: &Polygon) -> Option<f64> {
    let threshold = (PAPER[0] as u32 + INK[0] as u32) / 2;
    let (mut inter, mut union) = (0u64, 0u64);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = img.pixel(x, y);
            let ink = u32::from(px[0]) + u32::from(px[1]) + u32::from(px[2]) < 3 * threshold;
            let inside = poly.contains(Point2::new(x as f64 + 0.5, y as f64 + 0.5));
            inter += u64::from(ink && inside);
            union += u64::from(ink || inside);
        }
    }
    (union > 0).then(|| inter as f64 / union as f64)
}

fn correspondence() -> Verdict {
    let t0 = Instant::now();
    let base = AugmentationConfig {
        fill: FillStyle::Constant { color: PAPER },
        ..shipped_config()
    };
    let affine_only = AugmentationConfig {
        deformations: vec![],
        ..base.clone()
    };
    let kinds: Vec<AugmentationConfig> = base
        .deformations
        .iter()
        .map(|k| only_kind(&base, k))
        .collect();
    let (w, h) = (320u32, 240u32);
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);
    let (mut min_affine, mut min_nonlinear) = (1.0f64, 1.0f64);
    let (mut n_affine, mut n_nonlinear, mut violations, mut empty) = (0, 0, 0, 0);
    for i in 0..CORRESPONDENCE_PLANS {
        let x0 = rng.gen_range(60..120);
        let x1 = rng.gen_range(200..260);
        let y0 = rng.gen_range(40..90);
        let y1 = rng.gen_range(150..200);
        let mut img = ImageBuffer::filled(w, h, PAPER);
        img.fill_rect(x0, y0, x1, y1, INK);
        let rect = Polygon::from_corners(
            Point2::new(x0 as f64, y0 as f64),
            Point2::new(x1 as f64, y1 as f64),
        )
        .unwrap();
        let doc = AnnotatedDocument::new("p.png", w, h, vec![Shape::new(LayoutLabel::Table, rect)]);
        let nonlinear = i % 2 == 1;
        let cfg = if nonlinear {
            &kinds[(i / 2) % kinds.len()]
        } else {
            &affine_only
        };
        let plan = sample_plan(cfg, &format!("corr{i}"), 0, w, h).unwrap();
        assert_eq!(plan.has_nonlinear(), nonlinear);
        let aug = augment_document(&doc, &img, &plan, cfg).unwrap();
        let Some(iou) = mask_iou(&aug.image, &aug.traces[0].mapped) else {
            empty += 1;
            continue;
        };
        let (min, floor, n) = if nonlinear {
            (
                &mut min_nonlinear,
                CORRESPONDENCE_NONLINEAR_IOU,
                &mut n_nonlinear,
            )
        } else {
            (&mut min_affine, CORRESPONDENCE_AFFINE_IOU, &mut n_affine)
        };
        *min = min.min(iou);
        *n += 1;
        violations += usize::from(iou < floor);
    }
    let elapsed = t0.elapsed();
    verdict(
        violations == 0 && empty == 0 && elapsed < CORRESPONDENCE_BUDGET,
        format!(
            "{n_affine} affine-only plans min IoU {min_affine:.4} (floor {CORRESPONDENCE_AFFINE_IOU}), \
             {n_nonlinear} non-linear plans min IoU {min_nonlinear:.4} (floor {CORRESPONDENCE_NONLINEAR_IOU}), \
             violations {violations}, empty {empty}, {:.1} s (budget {} s)",
            elapsed.as_secs_f64(),
            CORRESPONDENCE_BUDGET.as_secs()
        ),
    )
}

fn rotated_iou_analytic() -> Verdict {
    let square = Xywhr {
        cx: 0.0,
        cy: 0.0,
        w: 1.0,
        h: 1.0,
        angle_deg: 0.0,
    };
    let turned = Xywhr {
        angle_deg: 45.0,
        ..square
    };
    let a = Polygon::new(square.corners().to_vec()).unwrap();
    let b = Polygon::new(turned.corners().to_vec()).unwrap();
    let engine = polygon_iou(&a, &b);

    // Uniform samples over the box that holds both shapes.
    let half = std::f64::consts::FRAC_1_SQRT_2;
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..MONTE_CARLO_SAMPLES {
        let x: f64 = rng.gen_range(-half..half);
        let y: f64 = rng.gen_range(-half..half);
        let in_a = x.abs() <= 0.5 && y.abs() <= 0.5;
        let in_b = (x + y).abs() * half <= 0.5 && (x - y).abs() * half <= 0.5;
        both += u64::from(in_a && in_b);
        either += u64::from(in_a || in_b);
    }
    let mc = both as f64 / either as f64;
    let pass = (engine - ROTATED_IOU_EXPECTED).abs() <= ROTATED_IOU_TOL
        && (mc - engine).abs() <= MONTE_CARLO_TOL;
    verdict(
        pass,
        format!(
            "engine {engine:.9} (expected {ROTATED_IOU_EXPECTED} ± {ROTATED_IOU_TOL:.0e}), \
             Monte Carlo {mc:.6} over {MONTE_CARLO_SAMPLES} samples (tol {MONTE_CARLO_TOL:.0e})"
        ),
    )
}

fn random_box(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Xywhr {
    Xywhr {
        cx: rng.gen_range(0.25..0.75) * w,
        cy: rng.gen_range(0.25..0.75) * h,
        w: rng.gen_range(0.08..0.3) * w,
        h: rng.gen_range(0.05..0.25) * h,
        angle_deg: rng.gen_range(-40.0..40.0),
    }
}

fn label(i: usize) -> LayoutLabel {
    LayoutLabel::from_index(i).unwrap()
}

/// Random pages where detections are jittered copies of GT boxes, some
/// with the wrong class, mixed with unrelated boxes.
fn micro_dataset(rng: &mut ChaCha8Rng, max_images: usize, max_dets: usize) -> Vec<EvalImage> {
    let n_images = rng.gen_range(1..=max_images);
    let mut boxes: Vec<Vec<(Xywhr, usize)>> = Vec::new();
    let mut images: Vec<EvalImage> = (0..n_images)
        .map(|i| {
            let (w, h) = (rng.gen_range(200.0..900.0), rng.gen_range(200.0..900.0));
            let n_gt = rng.gen_range(0..=max_dets / 2);
            let b: Vec<(Xywhr, usize)> = (0..n_gt)
                .map(|_| (random_box(rng, w, h), rng.gen_range(0..3)))
                .collect();
            let gts = b
                .iter()
                .map(|(x, c)| x.to_record(w, h, label(*c)).unwrap())
                .collect();
            boxes.push(b);
            EvalImage {
                id: format!("img{i}"),
                frame_w: w,
                frame_h: h,
                gts,
                preds: vec![],
            }
        })
        .collect();
    for _ in 0..rng.gen_range(0..=max_dets) {
        let ii = rng.gen_range(0..n_images);
        let (w, h) = (images[ii].frame_w, images[ii].frame_h);
        let (bx, class) = if !boxes[ii].is_empty() && rng.gen_bool(0.75) {
            let (g, c) = boxes[ii][rng.gen_range(0..boxes[ii].len())];
            let jitter = rng.gen_range(0.0..0.25);
            let b = Xywhr {
                cx: g.cx + rng.gen_range(-1.0..1.0) * jitter * g.w,
                cy: g.cy + rng.gen_range(-1.0..1.0) * jitter * g.h,
                w: g.w * (1.0 + rng.gen_range(-1.0..1.0) * jitter),
                h: g.h * (1.0 + rng.gen_range(-1.0..1.0) * jitter),
                angle_deg: g.angle_deg + rng.gen_range(-1.0..1.0) * jitter * 30.0,
            };
            let c = if rng.gen_bool(0.85) {
                c
            } else {
                rng.gen_range(0..3)
            };
            (b, c)
        } else {
            (random_box(rng, w, h), rng.gen_range(0..3))
        };
        let rec = bx.to_record(w, h, label(class)).unwrap();
        images[ii]
            .preds
            .push(rec.with_confidence(rng.gen_range(0.01..1.0)));
    }
    images
}

fn pixel_polygon(r: &ObbRecord, img: &EvalImage) -> Polygon {
    r.to_pixel_polygon(img.frame_w, img.frame_h).unwrap()
}

/// AP for one class and threshold by enumerating every prefix of the ranked
/// detections and, for each recall point, the best precision reaching it.
fn oracle_ap(images: &[EvalImage], class: usize, threshold: f64) -> Option<f64> {
    let mut images: Vec<&EvalImage> = images.iter().collect();
    images.sort_by(|a, b| a.id.cmp(&b.id));
    let gts: Vec<Vec<Polygon>> = images
        .iter()
        .map(|im| {
            im.gts
                .iter()
                .filter(|g| g.class_index == class)
                .map(|g| pixel_polygon(g, im))
                .collect()
        })
        .collect();
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut dets: Vec<(f64, usize, Polygon)> = Vec::new();
    for (ii, im) in images.iter().enumerate() {
        for p in im.preds.iter().filter(|p| p.class_index == class) {
            dets.push((p.confidence.unwrap(), ii, pixel_polygon(p, im)));
        }
    }
    dets.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut curve: Vec<(usize, f64)> = Vec::new();
    let mut tp = 0usize;
    for (k, (_, ii, poly)) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts[*ii].iter().enumerate() {
            let iou = polygon_iou(poly, g);
            if !used[*ii][gi] && iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            used[*ii][gi] = true;
            tp += 1;
        }
        curve.push((tp, tp as f64 / (k + 1) as f64));
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let reaching = curve.iter().filter(|(tp, _)| tp * 100 >= r * n_gt);
        sum += reaching.map(|c| c.1).fold(0.0, f64::max);
    }
    Some(sum / RECALL_POINTS as f64)
}

fn ap_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA9);
    let (mut compared, mut mismatches, mut class_set_mismatch) = (0, 0, 0);
    let mut first = None;
    for ds in 0..AP_DATASETS {
        let images = micro_dataset(&mut rng, AP_MAX_IMAGES, AP_MAX_DETECTIONS);
        let report = evaluate(&images);
        let expected: Vec<usize> = (0..LayoutLabel::ALL.len())
            .filter(|&c| {
                images
                    .iter()
                    .any(|im| im.gts.iter().any(|g| g.class_index == c))
            })
            .collect();
        let got: Vec<usize> = report.classes.iter().map(|c| c.class_index).collect();
        if got != expected {
            class_set_mismatch += 1;
            continue;
        }
        for cm in &report.classes {
            for (ti, &t) in report.thresholds.iter().enumerate() {
                let oracle = oracle_ap(&images, cm.class_index, t).unwrap();
                compared += 1;
                if oracle.to_bits() != cm.ap[ti].to_bits() {
                    mismatches += 1;
                    first.get_or_insert(format!(
                        "dataset {ds} class {} @{t}: engine {} oracle {oracle}",
                        cm.class_index, cm.ap[ti]
                    ));
                }
            }
        }
    }
    let elapsed = t0.elapsed();
    verdict(
        mismatches == 0 && class_set_mismatch == 0 && compared > 0 && elapsed < AP_BUDGET,
        format!(
            "{AP_DATASETS} datasets, {compared} class/threshold APs compared bitwise, \
             mismatches {mismatches}, class-set mismatches {class_set_mismatch}, {:.2} s (budget {} s){}",
            elapsed.as_secs_f64(),
            AP_BUDGET.as_secs(),
            first.map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

fn threshold_index(thresholds: &[f64], t: f64) -> usize {
    thresholds
        .iter()
        .position(|&x| (x - t).abs() < 1e-9)
        .unwrap()
}

fn monotonicity() -> Verdict {
    let th = iou_thresholds();
    let (i50, i75, i95) = (
        threshold_index(&th, 0.5),
        threshold_index(&th, 0.75),
        threshold_index(&th, 0.95),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(0x3030);
    let mut datasets: Vec<Vec<EvalImage>> = (0..AP_DATASETS)
        .map(|_| micro_dataset(&mut rng, AP_MAX_IMAGES, AP_MAX_DETECTIONS))
        .collect();
    datasets.extend((0..MONOTONIC_LARGE_DATASETS).map(|_| micro_dataset(&mut rng, 12, 60)));
    // Ground truth scored against itself.
    let mut perfect = micro_dataset(&mut rng, 4, 20);
    for im in &mut perfect {
        im.preds = im.gts.iter().map(|g| g.with_confidence(0.9)).collect();
    }
    datasets.push(perfect);
    let (mut checked, mut violations) = (0, 0);
    let mut first = None;
    for (di, ds) in datasets.iter().enumerate() {
        for c in &evaluate(ds).classes {
            checked += 1;
            if !(c.ap[i50] >= c.ap[i75] && c.ap[i75] >= c.ap[i95]) {
                violations += 1;
                first.get_or_insert(format!(
                    "dataset {di} class {}: {} {} {}",
                    c.class_index, c.ap[i50], c.ap[i75], c.ap[i95]
                ));
            }
        }
    }
    verdict(
        violations == 0 && checked > 0,
        format!(
            "{} datasets, {checked} class curves, violations {violations}{}",
            datasets.len(),
            first.map(|f| format!("; first: {f}")).unwrap_or_default()
        ),
    )
}

fn determinism() -> Verdict {
    let d = tempfile::tempdir().unwrap();
    let inp = d.path().join("in");
    write_sources(&inp, 6, 240, 180);
    let cfg = d.path().join("config.json");
    let mut c = shipped_config();
    c.per_image = 3;
    std::fs::write(&cfg, c.to_json()).unwrap();
    let mut hashes = Vec::new();
    let mut failed = Vec::new();
    for (run, workers) in [1, 4, 4, 8].into_iter().enumerate() {
        let out = d.path().join(format!("out{run}"));
        let o = docwarp(&[
            "augment",
            "--config",
            p(&cfg),
            "--in",
            p(&inp),
            "--out",
            p(&out),
            "--seed",
            "77",
            "--workers",
            &workers.to_string(),
        ]);
        if !o.status.success() {
            failed.push(format!("run {run}: {}", stderr(&o).trim()));
            continue;
        }
        hashes.push((workers, tree_hash(&out)));
    }
    let same = hashes.windows(2).all(|w| w[0].1 == w[1].1);
    verdict(
        failed.is_empty() && hashes.len() == 4 && same,
        format!(
            "4 augment runs with workers 1/4/4/8, {} distinct tree hashes{}",
            {
                let mut h: Vec<&String> = hashes.iter().map(|x| &x.1).collect();
                h.sort();
                h.dedup();
                h.len()
            },
            if failed.is_empty() {
                String::new()
            } else {
                format!("; failures: {}", failed.join("; "))
            }
        ),
    )
}

/// The harshest corner of each range: largest amplitude at the shortest
/// wavelength or cell, and both signs for the radial fields.
fn extreme_deformations(kind: &DeformationRange) -> Vec<Deformation> {
    match *kind {
        DeformationRange::Elastic {
            amplitude,
            cell,
            octaves,
            ..
        } => (0..4)
            .map(|seed| Deformation::Elastic {
                amplitude: amplitude.hi,
                cell: cell.lo,
                octaves: octaves.hi,
                seed,
            })
            .collect(),
        DeformationRange::Grid {
            amplitude_x,
            amplitude_y,
            wavelength_x,
            wavelength_y,
            ..
        } => {
            vec![Deformation::Grid {
                amplitude_x: amplitude_x.hi,
                amplitude_y: amplitude_y.hi,
                wavelength_x: wavelength_x.lo,
                wavelength_y: wavelength_y.lo,
            }]
        }
        DeformationRange::Wave {
            amplitude_x,
            amplitude_y,
            wavelength_x,
            wavelength_y,
            ..
        } => {
            vec![Deformation::Wave {
                amplitude_x: amplitude_x.hi,
                amplitude_y: amplitude_y.hi,
                wavelength_x: wavelength_x.lo,
                wavelength_y: wavelength_y.lo,
                phase_x: 0.7,
                phase_y: 2.1,
            }]
        }
        DeformationRange::Barrel { k, .. } => {
            vec![
                Deformation::Barrel { k: k.lo },
                Deformation::Barrel { k: k.hi },
            ]
        }
        DeformationRange::Swirl { strength, .. } => vec![
            Deformation::Swirl {
                strength: strength.lo,
            },
            Deformation::Swirl {
                strength: strength.hi,
            },
        ],
    }
}

/// Share of output pixel centers whose backward-mapped source maps forward
/// to within `RESIDUAL_TOL`, and the largest residual seen.
fn residual_share(plan: &TransformPlan, inverse: InverseSettings) -> (f64, f64) {
    let map = BackwardMap::new(plan, RESIDUAL_W, RESIDUAL_H, inverse);
    let (mut good, mut worst) = (0u64, 0.0f64);
    for j in 0..RESIDUAL_H as usize {
        map.row(j, |i, s, _| {
            let q = Point2::new(i as f64 + 0.5, j as f64 + 0.5);
            let r = plan.forward(s).distance(q);
            good += u64::from(r < RESIDUAL_TOL);
            worst = worst.max(if r.is_finite() { r } else { f64::INFINITY });
        });
    }
    (
        good as f64 / (RESIDUAL_W as u64 * RESIDUAL_H as u64) as f64,
        worst,
    )
}

fn inverse_residual() -> Verdict {
    let base = shipped_config();
    let inverse: InverseSettings = base.inverse.into();
    let (w, h) = (RESIDUAL_W as f64, RESIDUAL_H as f64);
    let mut lines = Vec::new();
    let mut pass = true;
    for kind in &base.deformations {
        let mut plans = Vec::new();
        for d in extreme_deformations(kind) {
            let spec = DeformationSpec::new(d, w, h);
            plans.push(TransformPlan::new(vec![spec], AffineParams::neutral(w, h)).unwrap());
        }
        let cfg = only_kind(&base, kind);
        for v in 0..RESIDUAL_SAMPLED_PLANS {
            plans.push(sample_plan(&cfg, "residual", v, RESIDUAL_W, RESIDUAL_H).unwrap());
        }
        let (mut min_share, mut worst) = (1.0f64, 0.0f64);
        for plan in &plans {
            let (share, r) = residual_share(plan, inverse);
            min_share = min_share.min(share);
            worst = worst.max(r);
        }
        pass &= min_share >= RESIDUAL_MIN_SHARE;
        lines.push(format!(
            "{} {} plans min share {:.5} max {:.4} px",
            kind.kind(),
            plans.len(),
            min_share,
            worst
        ));
    }
    verdict(
        pass,
        format!(
            "{RESIDUAL_W}x{RESIDUAL_H}, tol {RESIDUAL_TOL} px, required share {RESIDUAL_MIN_SHARE}: {}",
            lines.join(", ")
        ),
    )
}

fn random_polygon(rng: &mut ChaCha8Rng, w: f64, h: f64) -> Polygon {
    let n = rng.gen_range(3..12);
    let c = Point2::new(rng.gen_range(0.2..0.8) * w, rng.gen_range(0.2..0.8) * h);
    let r = rng.gen_range(5.0..0.2 * w.min(h));
    let pts = (0..n)
        .map(|k| {
            let a = (k as f64 + rng.gen_range(0.0..0.8)) * std::f64::consts::TAU / n as f64;
            let rk = r * rng.gen_range(0.3..1.0);
            Point2::new(c.x + rk * a.cos(), c.y + rk * a.sin())
        })
        .collect();
    Polygon::new(pts).unwrap()
}

/// Clockwise on screen from the top-left vertex, checked independently of
/// the ordering code: every turn is a right turn in y-down axes and vertex
/// 0 has the smallest `x + y`.
fn obb_layout_problem(r: &ObbRecord, w: f64, h: f64) -> Option<String> {
    if r.vertices
        .iter()
        .any(|v| !(0.0..=1.0).contains(&v.x) || !(0.0..=1.0).contains(&v.y))
    {
        return Some(format!("value outside [0,1]: {r:?}"));
    }
    if let Some(c) = r.confidence {
        if !(0.0..=1.0).contains(&c) {
            return Some(format!("confidence outside [0,1]: {c}"));
        }
    }
    let v = r.pixel_vertices(w, h);
    for k in 0..4 {
        let (a, b, c) = (v[k], v[(k + 1) % 4], v[(k + 2) % 4]);
        if (b - a).cross(c - b) <= 0.0 {
            return Some(format!("not clockwise at vertex {k}: {v:?}"));
        }
    }
    let s = |p: Point2| p.x + p.y;
    if v[1..].iter().any(|p| s(*p) < s(v[0]) - 1e-6) {
        return Some(format!("does not start at top-left: {v:?}"));
    }
    None
}

fn max_vertex_error(a: &[Point2], b: &[Point2]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(p, q)| (p.x - q.x).abs().max((p.y - q.y).abs()))
        .fold(0.0, f64::max)
}

fn format_conformance() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xF0F0);
    let mut problems: Vec<String> = Vec::new();
    let (mut labelme_err, mut obb_err) = (0.0f64, 0.0f64);
    let mut obb_lines = 0usize;

    for i in 0..100 {
        let (w, h) = (rng.gen_range(100..3000u32), rng.gen_range(100..3000u32));
        let (fw, fh) = (w as f64, h as f64);
        let shapes: Vec<Shape> = (0..rng.gen_range(1..8))
            .map(|_| {
                Shape::new(
                    label(rng.gen_range(0..LayoutLabel::ALL.len())),
                    random_polygon(&mut rng, fw, fh),
                )
            })
            .collect();
        let doc = AnnotatedDocument::new(format!("p{i}.png"), w, h, shapes);
        match parse_labelme(&write_labelme(&doc)) {
            Ok(back) => {
                if back.shapes.len() != doc.shapes.len()
                    || back
                        .shapes
                        .iter()
                        .zip(&doc.shapes)
                        .any(|(a, b)| a.label != b.label)
                    || (back.image_w, back.image_h) != (w, h)
                {
                    problems.push(format!("labelme doc {i} changed shape list"));
                }
                for (a, b) in back.shapes.iter().zip(&doc.shapes) {
                    labelme_err = labelme_err
                        .max(max_vertex_error(a.polygon.vertices(), b.polygon.vertices()));
                }
            }
            Err(e) => problems.push(format!("labelme doc {i}: {e}")),
        }

        let mut records: Vec<ObbRecord> = doc
            .shapes
            .iter()
            .map(|s| polygon_to_obb(&s.polygon, fw, fh, s.label).unwrap())
            .collect();
        records.push(
            random_box(&mut rng, fw, fh)
                .to_record(fw, fh, LayoutLabel::Text)
                .unwrap(),
        );
        for scored in [false, true] {
            let recs: Vec<ObbRecord> = if scored {
                records
                    .iter()
                    .map(|r| r.with_confidence(rng.gen_range(0.0..1.0)))
                    .collect()
            } else {
                records.clone()
            };
            match parse_obb_file(&emit_obb_file(&recs), scored) {
                Ok(back) if back.len() == recs.len() => {
                    for (a, b) in back.iter().zip(&recs) {
                        obb_lines += 1;
                        if a.class_index != b.class_index {
                            problems.push(format!("obb class changed in doc {i}"));
                        }
                        let conf = match (a.confidence, b.confidence) {
                            (Some(x), Some(y)) => (x - y).abs(),
                            (None, None) => 0.0,
                            _ => f64::INFINITY,
                        };
                        obb_err = obb_err
                            .max(conf)
                            .max(max_vertex_error(&a.vertices, &b.vertices));
                        if let Some(p) = obb_layout_problem(a, fw, fh) {
                            problems.push(p);
                        }
                    }
                }
                Ok(_) => problems.push(format!("obb doc {i} changed record count")),
                Err(e) => problems.push(format!("obb doc {i}: {e}")),
            }
        }
    }

    // Files written by a real batch run, plus its manifest.
    let d = tempfile::tempdir().unwrap();
    let (inp, out) = (d.path().join("in"), d.path().join("out"));
    write_sources(&inp, 4, 300, 220);
    let cfg = AugmentationConfig {
        per_image: 3,
        ..shipped_config()
    };
    run_batch(&cfg, &inp, &out, BatchOptions::default()).unwrap();
    let manifest_path = out.join("manifest.jsonl");
    let entries = read_manifest(&manifest_path).unwrap();
    for e in &entries {
        let text = std::fs::read_to_string(out.join(&e.obb)).unwrap();
        for r in parse_obb_file(&text, false).unwrap() {
            obb_lines += 1;
            if let Some(p) = obb_layout_problem(&r, 300.0, 220.0) {
                problems.push(format!("{}: {p}", e.obb));
            }
        }
        let doc =
            parse_labelme(&std::fs::read_to_string(out.join(&e.annotation)).unwrap()).unwrap();
        if parse_labelme(&write_labelme(&doc)).unwrap() != doc {
            problems.push(format!("{} does not re-emit identically", e.annotation));
        }
    }
    let manifest_ok = match parse_jsonl(&to_jsonl(&entries), &manifest_path) {
        Ok(back) => back == entries,
        Err(_) => false,
    };
    if !manifest_ok {
        problems.push("manifest round trip changed entries".into());
    }
    let pass = problems.is_empty() && labelme_err <= FORMAT_TOL && obb_err <= FORMAT_TOL;
    verdict(
        pass,
        format!(
            "LabelMe max error {labelme_err:.1e}, OBB max error {obb_err:.1e} (tol {FORMAT_TOL:.0e}), \
             {obb_lines} OBB lines checked for order and range, manifest {} entries {}, problems {}{}",
            entries.len(),
            if manifest_ok { "lossless" } else { "changed" },
            problems.len(),
            problems.first().map(|p| format!("; first: {p}")).unwrap_or_default()
        ),
    )
}

fn throughput() -> Verdict {
    let base = shipped_config();
    let (mut doc, img) = synthetic_page(9, THROUGHPUT_W, THROUGHPUT_H);
    doc.image_path = "page.png".into();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let mut pass = true;
    let mut overall = Duration::ZERO;
    let mut lines = Vec::new();
    pool.install(|| {
        let warm = sample_plan(&base, "warm", 0, THROUGHPUT_W, THROUGHPUT_H).unwrap();
        augment_document(&doc, &img, &warm, &base).unwrap();
        for kind in &base.deformations {
            let cfg = only_kind(&base, kind);
            let mut times = Vec::new();
            for v in 0..THROUGHPUT_PLANS_PER_KIND {
                let plan = sample_plan(&cfg, "throughput", v, THROUGHPUT_W, THROUGHPUT_H).unwrap();
                assert!(plan.has_nonlinear());
                let best = (0..THROUGHPUT_REPEATS)
                    .map(|_| {
                        let t0 = Instant::now();
                        std::hint::black_box(augment_document(&doc, &img, &plan, &cfg).unwrap());
                        t0.elapsed()
                    })
                    .min()
                    .unwrap();
                times.push(best);
            }
            let worst = *times.iter().max().unwrap();
            overall = overall.max(worst);
            pass &= worst < THROUGHPUT_BUDGET;
            times.sort();
            lines.push(format!(
                "{} median {} ms max {} ms",
                kind.kind(),
                times[times.len() / 2].as_millis(),
                worst.as_millis()
            ));
        }
    });
    verdict(
        pass,
        format!(
            "{THROUGHPUT_W}x{THROUGHPUT_H} RGB, 1 worker, {THROUGHPUT_PLANS_PER_KIND} plans per kind, \
             best of {THROUGHPUT_REPEATS}, worst {} ms (budget {} ms): {}",
            overall.as_millis(),
            THROUGHPUT_BUDGET.as_millis(),
            lines.join(", ")
        ),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 9] = [
        ("identity round trip", identity_round_trip),
        ("pixel-annotation correspondence", correspondence),
        ("rotated IoU analytic case", rotated_iou_analytic),
        ("AP oracle equivalence", ap_oracle),
        ("mAP threshold monotonicity", monotonicity),
        ("determinism across workers", determinism),
        ("inverse field residual", inverse_residual),
        ("format conformance", format_conformance),
        ("throughput", throughput),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let v = check();
        failed += usize::from(!v.pass);
        println!(
            "{} {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
