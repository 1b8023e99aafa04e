#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use docwarp::annotation::{write_labelme, AnnotatedDocument, LayoutLabel, Shape};
use docwarp::geometry::{Point2, Polygon};
use docwarp::raster::{write_image, ImageBuffer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A light page with a few dark, axis-aligned ink blocks, each annotated
/// by its exact rectangle.
pub fn synthetic_page(seed: u64, w: u32, h: u32) -> (AnnotatedDocument, ImageBuffer) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut img = ImageBuffer::filled(w, h, [245, 243, 238]);
    let labels = [
        LayoutLabel::SectionHeader,
        LayoutLabel::Text,
        LayoutLabel::Table,
        LayoutLabel::Figure,
    ];
    let mut shapes = Vec::new();
    let rows = 3;
    let band = h / rows;
    for r in 0..rows {
        let x0 = rng.gen_range(w / 10..w / 4);
        let x1 = rng.gen_range(w / 2..w * 9 / 10);
        let y0 = r * band + rng.gen_range(band / 8..band / 4);
        let y1 = (r + 1) * band - rng.gen_range(band / 8..band / 4);
        let shade = rng.gen_range(10..60);
        img.fill_rect(x0, y0, x1, y1, [shade, shade, shade + 20]);
        let poly = Polygon::from_corners(
            Point2::new(x0 as f64, y0 as f64),
            Point2::new(x1 as f64, y1 as f64),
        )
        .unwrap();
        shapes.push(Shape::new(labels[(seed as usize + r as usize) % 4], poly));
    }
    (AnnotatedDocument::new("page.png", w, h, shapes), img)
}

/// Writes `n` stem-matched pages `page_000..` into `dir`.
pub fn write_sources(dir: &Path, n: usize, w: u32, h: u32) {
    std::fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        let stem = format!("page_{i:03}");
        let (mut doc, img) = synthetic_page(i as u64, w, h);
        doc.image_path = format!("{stem}.png");
        write_image(&dir.join(format!("{stem}.png")), &img).unwrap();
        std::fs::write(dir.join(format!("{stem}.json")), write_labelme(&doc)).unwrap();
    }
}

/// SHA-256 over every file's relative path and bytes, in path order.
pub fn tree_hash(root: &Path) -> String {
    let mut files = Vec::new();
    collect(root, root, &mut files);
    files.sort();
    let mut h = Sha256::new();
    for rel in files {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(std::fs::read(root.join(&rel)).unwrap());
    }
    format!("{:x}", h.finalize())
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) {
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            out.push(p.strip_prefix(root).unwrap().to_path_buf());
        }
    }
}

pub fn docwarp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_docwarp"))
        .args(args)
        .env("DOCWARP_LOG", "error")
        .output()
        .expect("binary runs")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Value of a `key value` report line.
pub fn report_value(text: &str, key: &str) -> Option<String> {
    text.lines()
        .find_map(|l| l.strip_prefix(key)?.strip_prefix(' ').map(str::to_owned))
}

pub fn write_config(path: &Path, json: &str) {
    std::fs::write(path, json).unwrap();
}

/// The shipped default config.
pub fn default_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.json")
}
