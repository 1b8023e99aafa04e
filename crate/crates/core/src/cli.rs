//! The `docwarp` command line.
//!
//! Exit codes: 0 when everything succeeded, 1 on a fatal error, 2 when some
//! inputs failed but the rest were processed. Reports go to stdout as
//! `key value` lines in a fixed order.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::annotation::{parse_labelme, write_labelme, AnnotatedDocument, LayoutLabel, Shape};
use crate::evaluation::{evaluate_dataset, lookup_dims};
use crate::geometry::Polygon;
use crate::obb::{emit_obb_file, parse_obb_file, polygon_to_obb};
use crate::pipeline::manifest::{read_manifest, write_manifest, MANIFEST_FILE};
use crate::pipeline::{
    discover_sources, load_source, run_batch, trace_shapes, AugmentationConfig, BatchOptions,
    Verdict,
};
use crate::raster::{render_overlay, write_image, Palette};
use crate::review_server::{self, ReviewState};
use crate::screening::{screen_document, WarpMeta};

#[derive(Debug, Parser)]
#[command(
    name = "docwarp",
    version,
    about = "Scene-document augmentation, OBB conversion and rotated-IoU evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Augment every annotated page in a directory.
    Augment(AugmentArgs),
    /// Convert annotations between LabelMe JSON and OBB text.
    Convert(ConvertArgs),
    /// Re-run screening over a manifest and summarize the flags.
    Validate(ValidateArgs),
    /// Score OBB predictions against ground truth.
    Evaluate(EvaluateArgs),
    /// Draw annotation overlays for every annotated page in a directory.
    Preview(PreviewArgs),
    /// Serve the curation API for a manifest.
    Review(ReviewArgs),
    /// Copy accepted variants into a curated dataset directory.
    Export(ExportArgs),
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Caps the worker pool.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ConvertTarget {
    Obb,
    Labelme,
}

#[derive(Debug, Args)]
pub struct ConvertArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub to: ConvertTarget,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Screening thresholds and clip policy; the defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    /// Print the report as JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct PreviewArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReviewArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    /// Address to bind; loopback unless set.
    #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
    pub host: IpAddr,
    /// Built review UI assets, served at `/`.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// How a command finished short of a fatal error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Clean,
    Partial,
}

impl Status {
    fn from_failures(n: usize) -> Self {
        if n == 0 {
            Status::Clean
        } else {
            Status::Partial
        }
    }
}

/// A fatal error, reported on stderr with exit code 1.
#[derive(Debug)]
pub struct Fatal(pub String);

impl<E: std::fmt::Display> From<E> for Fatal {
    fn from(e: E) -> Self {
        Fatal(e.to_string())
    }
}

type CmdResult = Result<Status, Fatal>;

pub fn run(cli: Cli, out: &mut dyn Write) -> CmdResult {
    match cli.command {
        Command::Augment(a) => augment(a, out),
        Command::Convert(a) => convert(a, out),
        Command::Validate(a) => validate(a, out),
        Command::Evaluate(a) => evaluate(a, out),
        Command::Preview(a) => preview(a, out),
        Command::Review(a) => review(a),
        Command::Export(a) => export(a, out),
    }
}

/// Parses the process arguments, runs the command and maps the outcome to
/// an exit code.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DOCWARP_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let stdout = std::io::stdout();
    match run(cli, &mut stdout.lock()) {
        Ok(Status::Clean) => ExitCode::SUCCESS,
        Ok(Status::Partial) => ExitCode::from(2),
        Err(Fatal(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: &Path) -> Result<AugmentationConfig, Fatal> {
    AugmentationConfig::load(path).map_err(|e| Fatal(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Fatal> {
    std::fs::create_dir_all(dir).map_err(|e| Fatal(format!("cannot create {}: {e}", dir.display())))
}

fn augment(a: AugmentArgs, out: &mut dyn Write) -> CmdResult {
    let mut config = load_config(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if !a.input.is_dir() {
        return Err(Fatal(format!(
            "input directory {} not found",
            a.input.display()
        )));
    }
    let report = run_batch(
        &config,
        &a.input,
        &a.out,
        BatchOptions { workers: a.workers },
    )?;
    writeln!(out, "sources {}", report.sources)?;
    writeln!(out, "variants {}", report.variants)?;
    writeln!(out, "dropped_shapes {}", report.dropped_shapes)?;
    writeln!(out, "flagged_variants {}", report.flagged_variants)?;
    writeln!(out, "failures {}", report.failures.len())?;
    for f in &report.failures {
        writeln!(out, "failed {}: {}", f.source, f.message)?;
    }
    Ok(Status::from_failures(report.failures.len()))
}

/// Regular files in `dir` with extension `ext`, sorted by name.
fn files_with_ext(dir: &Path, ext: &str) -> Result<Vec<PathBuf>, Fatal> {
    let rd =
        std::fs::read_dir(dir).map_err(|e| Fatal(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for e in rd {
        let p = e?.path();
        if p.is_file() && p.extension().is_some_and(|x| x == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem_of(p: &Path) -> String {
    p.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default()
        .to_string()
}

fn labelme_to_obb(path: &Path, out_dir: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let doc = parse_labelme(&text).map_err(|e| e.to_string())?;
    let (w, h) = (doc.image_w as f64, doc.image_h as f64);
    let records = doc
        .shapes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            polygon_to_obb(&s.polygon, w, h, s.label).map_err(|e| format!("shape {i}: {e}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let stem = stem_of(path);
    let write = |name: String, body: String| {
        std::fs::write(out_dir.join(&name), body).map_err(|e| format!("cannot write {name}: {e}"))
    };
    write(format!("{stem}.txt"), emit_obb_file(&records))?;
    // Keeps the page size next to the normalized boxes for the way back.
    write(
        format!("{stem}.dims"),
        format!("{} {}\n", doc.image_w, doc.image_h),
    )
}

fn obb_to_labelme(path: &Path, in_dir: &Path, out_dir: &Path) -> Result<(), String> {
    let stem = stem_of(path);
    let (w, h) = lookup_dims(in_dir, &stem)
        .map_err(|e| e.to_string())?
        .ok_or_else(|| format!("no page size: add {stem}.dims or a same-stem image"))?;
    let text = std::fs::read_to_string(path).map_err(|e| e.to_string())?;
    let records = parse_obb_file(&text, false).map_err(|e| e.to_string())?;
    let shapes = records
        .iter()
        .map(|r| {
            let label = r.label().expect("parser bounds the class index");
            let polygon =
                Polygon::new(r.pixel_vertices(w, h).to_vec()).map_err(|e| e.to_string())?;
            Ok(Shape::new(label, polygon))
        })
        .collect::<Result<Vec<_>, String>>()?;
    let image = ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| format!("{stem}.{ext}"))
        .find(|n| in_dir.join(n).is_file())
        .unwrap_or_else(|| format!("{stem}.png"));
    let doc = AnnotatedDocument::new(image, w.round() as u32, h.round() as u32, shapes);
    let name = format!("{stem}.json");
    std::fs::write(out_dir.join(&name), write_labelme(&doc))
        .map_err(|e| format!("cannot write {name}: {e}"))
}

fn convert(a: ConvertArgs, out: &mut dyn Write) -> CmdResult {
    create_dir(&a.out)?;
    let ext = match a.to {
        ConvertTarget::Obb => "json",
        ConvertTarget::Labelme => "txt",
    };
    let inputs = files_with_ext(&a.input, ext)?;
    let mut failures = Vec::new();
    for p in &inputs {
        let r = match a.to {
            ConvertTarget::Obb => labelme_to_obb(p, &a.out),
            ConvertTarget::Labelme => obb_to_labelme(p, &a.input, &a.out),
        };
        if let Err(m) = r {
            log::error!("{}: {m}", p.display());
            failures.push((p.display().to_string(), m));
        }
    }
    writeln!(out, "converted {}", inputs.len() - failures.len())?;
    writeln!(out, "failures {}", failures.len())?;
    for (f, m) in &failures {
        writeln!(out, "failed {f}: {m}")?;
    }
    Ok(Status::from_failures(failures.len()))
}

/// Manifest paths are stored as given at augment time: tried as written,
/// then relative to the manifest's directory.
fn resolve(base: &Path, p: &str) -> PathBuf {
    let direct = PathBuf::from(p);
    if direct.exists() {
        direct
    } else {
        base.join(p)
    }
}

fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
        .to_path_buf()
}

/// Flag name without its shape index, e.g. `aspect_blowup`.
fn flag_kind(name: &str) -> &str {
    name.rsplit_once("].").map_or(name, |(_, k)| k)
}

fn validate(a: ValidateArgs, out: &mut dyn Write) -> CmdResult {
    let config = match &a.config {
        Some(p) => load_config(p)?,
        None => AugmentationConfig::default(),
    };
    let entries = read_manifest(&a.manifest)?;
    let base = manifest_dir(&a.manifest);
    let mut flagged = Vec::new();
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let (mut changed, mut missing) = (0, Vec::new());
    for e in &entries {
        let path = resolve(&base, &e.source_annotation);
        let doc = match std::fs::read_to_string(&path)
            .map_err(|err| err.to_string())
            .and_then(|t| parse_labelme(&t).map_err(|err| err.to_string()))
        {
            Ok(d) => d,
            Err(m) => {
                log::error!("entry {}: {}: {m}", e.id, path.display());
                missing.push(e.id);
                continue;
            }
        };
        let traces = trace_shapes(&doc, &e.plan, &config);
        let meta = WarpMeta {
            nonconverged_fraction: e.nonconverged_fraction,
        };
        let report = screen_document(&doc, &traces, &meta, &config.screening);
        let names = report.flag_names();
        changed += usize::from(names != e.flags);
        for n in &names {
            *counts.entry(flag_kind(n).to_string()).or_default() += 1;
        }
        if report.is_flagged() {
            flagged.push((e.id, names));
        }
    }
    writeln!(out, "entries {}", entries.len())?;
    writeln!(out, "flagged {}", flagged.len())?;
    writeln!(out, "changed {changed}")?;
    writeln!(out, "missing {}", missing.len())?;
    for (k, n) in &counts {
        writeln!(out, "flag {k} {n}")?;
    }
    for (id, names) in &flagged {
        writeln!(out, "flagged_entry {id} {}", names.join(","))?;
    }
    for id in &missing {
        writeln!(out, "missing_entry {id}")?;
    }
    Ok(Status::from_failures(missing.len()))
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> CmdResult {
    if !a.gt.is_dir() {
        return Err(Fatal(format!(
            "ground truth directory {} not found",
            a.gt.display()
        )));
    }
    let report = evaluate_dataset(&a.gt, &a.pred, LayoutLabel::COUNT)?;
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
    } else {
        write!(out, "{}", report.to_table())?;
    }
    Ok(Status::Clean)
}

fn preview(a: PreviewArgs, out: &mut dyn Write) -> CmdResult {
    let sources = discover_sources(&a.input)?;
    create_dir(&a.out)?;
    let palette = Palette::default();
    let mut failures = Vec::new();
    for pair in &sources {
        let r = load_source(pair, &a.input).and_then(|(doc, img, _)| {
            let name = a.out.join(format!("{}.png", pair.stem));
            write_image(&name, &render_overlay(&img, &doc.shapes, &palette))
                .map_err(|e| e.to_string())
        });
        if let Err(m) = r {
            log::error!("{}: {m}", pair.annotation.display());
            failures.push((pair.annotation.display().to_string(), m));
        }
    }
    writeln!(out, "previews {}", sources.len() - failures.len())?;
    writeln!(out, "failures {}", failures.len())?;
    for (f, m) in &failures {
        writeln!(out, "failed {f}: {m}")?;
    }
    Ok(Status::from_failures(failures.len()))
}

fn review(a: ReviewArgs) -> CmdResult {
    let state = Arc::new(ReviewState::open(&a.manifest)?);
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()?;
    let addr = SocketAddr::new(a.host, a.port);
    rt.block_on(review_server::serve(state, addr, a.ui_dir))?;
    Ok(Status::Clean)
}

fn copy_into(src_root: &Path, dst_root: &Path, rel: &str) -> Result<(), String> {
    let dst = dst_root.join(rel);
    if let Some(parent) = dst.parent() {
        std::fs::create_dir_all(parent)
            .map_err(|e| format!("cannot create {}: {e}", parent.display()))?;
    }
    let src = src_root.join(rel);
    std::fs::copy(&src, &dst)
        .map(|_| ())
        .map_err(|e| format!("cannot copy {}: {e}", src.display()))
}

fn export(a: ExportArgs, out: &mut dyn Write) -> CmdResult {
    let entries = read_manifest(&a.manifest)?;
    let base = manifest_dir(&a.manifest);
    create_dir(&a.out)?;
    let count = |v: Verdict| entries.iter().filter(|e| e.verdict == v).count();
    let mut curated = Vec::new();
    let mut failures = Vec::new();
    for e in entries.iter().filter(|e| e.verdict == Verdict::Accepted) {
        match [&e.image, &e.annotation, &e.obb]
            .iter()
            .try_for_each(|rel| copy_into(&base, &a.out, rel))
        {
            Ok(()) => {
                let mut e = e.clone();
                e.id = curated.len();
                curated.push(e);
            }
            Err(m) => {
                log::error!("entry {}: {m}", e.id);
                failures.push((e.id, m));
            }
        }
    }
    write_manifest(&a.out.join(MANIFEST_FILE), &curated)?;
    writeln!(out, "accepted {}", count(Verdict::Accepted))?;
    writeln!(out, "rejected {}", count(Verdict::Rejected))?;
    writeln!(out, "pending {}", count(Verdict::Pending))?;
    writeln!(out, "copied {}", curated.len())?;
    writeln!(out, "failures {}", failures.len())?;
    for (id, m) in &failures {
        writeln!(out, "failed_entry {id}: {m}")?;
    }
    Ok(Status::from_failures(failures.len()))
}
