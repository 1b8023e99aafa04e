use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::AugmentationConfig;
use super::manifest::{merge_entries, ManifestEntry, ManifestError, Verdict, MANIFEST_FILE};
use super::sample::sample_plan;
use super::{PlanError, TransformPlan};
use crate::annotation::{
    clip_shape, parse_labelme, transform_shapes_with, write_labelme, AnnotatedDocument,
    AnnotationError,
};
use crate::obb::{emit_obb_file, polygon_to_obb, ObbRecord};
use crate::raster::{read_image, warp_image_with, write_image, ImageBuffer, RasterError};
use crate::screening::{screen_document, ScreeningReport, ShapeTrace, WarpMeta};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("image is {img_w}x{img_h} but annotation says {doc_w}x{doc_h}")]
    DimensionMismatch {
        img_w: u32,
        img_h: u32,
        doc_w: u32,
        doc_h: u32,
    },
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Plan(#[from] PlanError),
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("cannot build worker pool: {0}")]
    Pool(String),
}

/// Everything one variant produces before it is written out.
#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: ImageBuffer,
    /// Kept shapes only, in source order.
    pub document: AnnotatedDocument,
    pub obb: Vec<ObbRecord>,
    pub traces: Vec<ShapeTrace>,
    pub screening: ScreeningReport,
    pub nonconverged_fraction: f64,
}

/// Maps every shape of `doc` through `plan` and clips it to the frame, in
/// source order.
pub fn trace_shapes(
    doc: &AnnotatedDocument,
    plan: &TransformPlan,
    config: &AugmentationConfig,
) -> Vec<ShapeTrace> {
    let (w, h) = (doc.image_w as f64, doc.image_h as f64);
    transform_shapes_with(doc, plan, config.densify_max_edge_px)
        .shapes
        .iter()
        .map(|s| ShapeTrace {
            mapped: s.polygon.clone(),
            outcome: clip_shape(s, w, h, config.clip.min_visible_for(s.label)),
        })
        .collect()
}

/// Warps pixels and annotations through the same plan, clips, converts to
/// OBBs and screens. Pure: the same inputs give the same output.
pub fn augment_document(
    doc: &AnnotatedDocument,
    img: &ImageBuffer,
    plan: &TransformPlan,
    config: &AugmentationConfig,
) -> Result<Augmented, AugmentError> {
    if img.width() != doc.image_w || img.height() != doc.image_h {
        return Err(AugmentError::DimensionMismatch {
            img_w: img.width(),
            img_h: img.height(),
            doc_w: doc.image_w,
            doc_h: doc.image_h,
        });
    }
    let warped = warp_image_with(img, plan, config.fill, config.inverse.into())?;
    let (w, h) = (doc.image_w as f64, doc.image_h as f64);
    let traces = trace_shapes(doc, plan, config);
    let meta = WarpMeta {
        nonconverged_fraction: warped.nonconverged_fraction(),
    };
    let screening = screen_document(doc, &traces, &meta, &config.screening);
    let kept: Vec<_> = traces
        .iter()
        .filter_map(|t| t.outcome.kept().cloned())
        .collect();
    let obb = kept
        .iter()
        .filter_map(|s| match polygon_to_obb(&s.polygon, w, h, s.label) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!(
                    "{}: skipping {} shape in OBB output: {e}",
                    doc.image_path,
                    s.label
                );
                None
            }
        })
        .collect();
    let mut document = AnnotatedDocument {
        shapes: kept,
        ..doc.clone()
    };
    // The embedded source pixels no longer match.
    if document.extra.contains_key("imageData") {
        document
            .extra
            .insert("imageData".into(), serde_json::Value::Null);
    }
    Ok(Augmented {
        image: warped.image,
        document,
        obb,
        traces,
        screening,
        nonconverged_fraction: meta.nonconverged_fraction,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub source: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BatchReport {
    pub sources: usize,
    pub variants: usize,
    pub dropped_shapes: usize,
    pub flagged_variants: usize,
    pub failures: Vec<Failure>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BatchOptions {
    /// Worker threads; `None` uses the rayon default.
    pub workers: Option<usize>,
}

/// A stem-matched (annotation, image) pair in the input directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourcePair {
    pub stem: String,
    pub annotation: PathBuf,
    pub image: Option<PathBuf>,
}

const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

/// LabelMe files in `dir`, sorted by stem, each paired with a same-stem image
/// when one exists.
pub fn discover_sources(dir: &Path) -> Result<Vec<SourcePair>, BatchError> {
    let io = |source| BatchError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).map_err(io)? {
        let p = e.map_err(io)?.path();
        if !p.is_file() || p.extension().is_none_or(|x| x != "json") {
            continue;
        }
        let Some(stem) = p.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            continue;
        };
        let image = IMAGE_EXTS
            .iter()
            .map(|ext| dir.join(format!("{stem}.{ext}")))
            .find(|c| c.is_file());
        out.push(SourcePair {
            stem,
            annotation: p,
            image,
        });
    }
    out.sort_by(|a, b| a.stem.cmp(&b.stem));
    Ok(out)
}

pub fn variant_name(stem: &str, variant: u32) -> String {
    format!("{stem}_{variant:03}")
}

struct VariantResult {
    entry: ManifestEntry,
    dropped: usize,
}

/// Reads a source annotation and its image. Without a same-stem image the
/// annotation's `imagePath` is resolved against `dir`.
pub fn load_source(
    pair: &SourcePair,
    dir: &Path,
) -> Result<(AnnotatedDocument, ImageBuffer, PathBuf), String> {
    let text = std::fs::read_to_string(&pair.annotation)
        .map_err(|e| format!("cannot read {}: {e}", pair.annotation.display()))?;
    let doc = parse_labelme(&text).map_err(|e: AnnotationError| e.to_string())?;
    let image_path = match &pair.image {
        Some(p) => p.clone(),
        None => dir.join(&doc.image_path),
    };
    let img = read_image(&image_path).map_err(|e| e.to_string())?;
    Ok((doc, img, image_path))
}

fn write_variant(
    out: &Path,
    name: &str,
    aug: &Augmented,
) -> Result<(String, String, String), String> {
    let image_rel = format!("images/{name}.png");
    let ann_rel = format!("labels_labelme/{name}.json");
    let obb_rel = format!("labels_obb/{name}.txt");
    write_image(&out.join(&image_rel), &aug.image).map_err(|e| e.to_string())?;
    let mut doc = aug.document.clone();
    doc.image_path = format!("../images/{name}.png");
    std::fs::write(out.join(&ann_rel), write_labelme(&doc))
        .map_err(|e| format!("cannot write {ann_rel}: {e}"))?;
    std::fs::write(out.join(&obb_rel), emit_obb_file(&aug.obb))
        .map_err(|e| format!("cannot write {obb_rel}: {e}"))?;
    Ok((image_rel, ann_rel, obb_rel))
}

fn process_source(
    pair: &SourcePair,
    config: &AugmentationConfig,
    input_dir: &Path,
    output_dir: &Path,
) -> Result<Vec<VariantResult>, Failure> {
    let fail = |message: String| Failure {
        source: pair.annotation.display().to_string(),
        message,
    };
    let (doc, img, image_path) = load_source(pair, input_dir).map_err(fail)?;
    let mut results = Vec::new();
    for v in 0..config.per_image {
        let plan = sample_plan(config, &pair.stem, v, doc.image_w, doc.image_h)
            .map_err(|e| fail(e.to_string()))?;
        let aug = augment_document(&doc, &img, &plan, config).map_err(|e| fail(e.to_string()))?;
        let name = variant_name(&pair.stem, v);
        let (image, annotation, obb) = write_variant(output_dir, &name, &aug).map_err(fail)?;
        let dropped = aug.screening.dropped.len();
        results.push(VariantResult {
            entry: ManifestEntry {
                id: 0,
                source_image: image_path.display().to_string(),
                source_annotation: pair.annotation.display().to_string(),
                variant_index: v,
                image,
                annotation,
                obb,
                plan,
                flags: aug.screening.flag_names(),
                screening: aug.screening,
                nonconverged_fraction: aug.nonconverged_fraction,
                verdict: Verdict::Pending,
                note: None,
                reviewed_at: None,
            },
            dropped,
        });
    }
    Ok(results)
}

/// Augments every source in `input_dir` into `output_dir`.
///
/// Per-source failures are recorded in the report and do not stop the batch.
/// The manifest is merged once, after all sources finish, in (stem, variant)
/// order, so its content does not depend on scheduling, and rerunning
/// into the same directory leaves it unchanged.
pub fn run_batch(
    config: &AugmentationConfig,
    input_dir: &Path,
    output_dir: &Path,
    options: BatchOptions,
) -> Result<BatchReport, BatchError> {
    let sources = discover_sources(input_dir)?;
    for sub in ["images", "labels_labelme", "labels_obb"] {
        let d = output_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|source| BatchError::Io { path: d, source })?;
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = options.workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| BatchError::Pool(e.to_string()))?;
    let outcomes: Vec<Result<Vec<VariantResult>, Failure>> = pool.install(|| {
        sources
            .par_iter()
            .map(|p| process_source(p, config, input_dir, output_dir))
            .collect()
    });
    let mut report = BatchReport {
        sources: sources.len(),
        ..BatchReport::default()
    };
    let mut entries = Vec::new();
    for o in outcomes {
        match o {
            Ok(vs) => {
                for v in vs {
                    report.variants += 1;
                    report.dropped_shapes += v.dropped;
                    report.flagged_variants += usize::from(v.entry.is_flagged());
                    entries.push(v.entry);
                }
            }
            Err(f) => {
                log::error!("{}: {}", f.source, f.message);
                report.failures.push(f);
            }
        }
    }
    merge_entries(&output_dir.join(MANIFEST_FILE), entries)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affine::AffineParams;
    use crate::annotation::{LayoutLabel, Shape};
    use crate::geometry::{Point2, Polygon};
    use crate::pipeline::manifest::read_manifest;

    fn page() -> (AnnotatedDocument, ImageBuffer) {
        let mut img = ImageBuffer::filled(120, 80, [250, 250, 250]);
        img.fill_rect(20, 10, 60, 30, [0, 0, 0]);
        let doc = AnnotatedDocument::new(
            "p.png",
            120,
            80,
            vec![
                Shape::new(
                    LayoutLabel::Table,
                    Polygon::from_corners(Point2::new(20.0, 10.0), Point2::new(60.0, 30.0))
                        .unwrap(),
                ),
                Shape::new(
                    LayoutLabel::Text,
                    Polygon::from_corners(Point2::new(70.0, 40.0), Point2::new(110.0, 70.0))
                        .unwrap(),
                ),
            ],
        );
        (doc, img)
    }

    #[test]
    fn neutral_plan_changes_nothing() {
        let (doc, img) = page();
        let cfg = AugmentationConfig::neutral();
        let out = augment_document(&doc, &img, &TransformPlan::neutral(120, 80), &cfg).unwrap();
        assert_eq!(out.image, img);
        assert_eq!(out.document.shapes, doc.shapes);
        assert!(!out.screening.is_flagged());
        assert_eq!(out.obb.len(), 2);
    }

    #[test]
    fn off_canvas_shape_is_dropped_and_recorded() {
        let (doc, img) = page();
        let mut a = AffineParams::neutral(120.0, 80.0);
        a.translate_x = 60.0;
        let plan = TransformPlan::new(vec![], a).unwrap();
        let out = augment_document(&doc, &img, &plan, &AugmentationConfig::neutral()).unwrap();
        assert_eq!(out.document.shapes.len(), 1);
        assert_eq!(out.document.shapes[0].label, LayoutLabel::Table);
        assert_eq!(out.screening.dropped.len(), 1);
        assert_eq!(out.screening.dropped[0].index, 1);
        assert!(out.screening.is_flagged());
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let (doc, _) = page();
        let img = ImageBuffer::filled(10, 10, [0, 0, 0]);
        assert!(matches!(
            augment_document(
                &doc,
                &img,
                &TransformPlan::neutral(10, 10),
                &AugmentationConfig::neutral()
            ),
            Err(AugmentError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn empty_input_dir_gives_empty_report() {
        let dir = tempfile::tempdir().unwrap();
        let (inp, out) = (dir.path().join("in"), dir.path().join("out"));
        std::fs::create_dir_all(&inp).unwrap();
        let r = run_batch(
            &AugmentationConfig::default(),
            &inp,
            &out,
            BatchOptions::default(),
        )
        .unwrap();
        assert_eq!(r, BatchReport::default());
        assert!(read_manifest(&out.join(MANIFEST_FILE)).unwrap().is_empty());
    }

    #[test]
    fn batch_counts_and_failures() {
        let dir = tempfile::tempdir().unwrap();
        let (inp, out) = (dir.path().join("in"), dir.path().join("out"));
        std::fs::create_dir_all(&inp).unwrap();
        let (doc, img) = page();
        for stem in ["a", "b", "c"] {
            write_image(&inp.join(format!("{stem}.png")), &img).unwrap();
            let mut d = doc.clone();
            d.image_path = format!("{stem}.png");
            std::fs::write(inp.join(format!("{stem}.json")), write_labelme(&d)).unwrap();
        }
        std::fs::write(inp.join("broken.json"), "{").unwrap();
        let cfg = AugmentationConfig {
            per_image: 2,
            ..AugmentationConfig::default()
        };
        let r = run_batch(&cfg, &inp, &out, BatchOptions { workers: Some(2) }).unwrap();
        assert_eq!((r.sources, r.variants), (4, 6));
        assert_eq!(r.failures.len(), 1);
        let m = read_manifest(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(m.len(), 6);
        assert_eq!(m[5].image, "images/c_001.png");
        assert_eq!(
            m.iter().map(|e| e.id).collect::<Vec<_>>(),
            (0..6).collect::<Vec<_>>()
        );
        assert_eq!(
            m.iter().map(|e| e.screening.dropped.len()).sum::<usize>(),
            r.dropped_shapes
        );
        assert_eq!(
            m.iter().filter(|e| e.is_flagged()).count(),
            r.flagged_variants
        );
        for e in &m {
            assert!(
                out.join(&e.image).is_file()
                    && out.join(&e.annotation).is_file()
                    && out.join(&e.obb).is_file()
            );
        }
    }
}
