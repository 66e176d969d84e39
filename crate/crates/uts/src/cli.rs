//! The `uts` command line.
//!
//! Stages talk to each other only through files: images, manifests and
//! checkpoints. Exit codes: 0 success, 1 internal failure, 2 bad or missing
//! input (including usage and configuration errors).

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{ArgAction, CommandFactory, FromArgMatches, Parser, Subcommand};

use uts_core::lvit::{self, LVitParams, Variant};
use uts_core::metrics::{self, ConfusionMatrix, TissueRatios};
use uts_core::refine::{self, ColorMask, MaskState, OverlayConfig, Palette, RefineConfig};
use uts_core::synth::{self, SynthSpec};
use uts_core::tiling::{self, TileGrid};
use uts_core::train::{self, LabeledTile, TrainConfig};
use uts_core::TILE_SIZE;

use crate::checkpoint;
use crate::config::{self, FlagKind, CONFIG_ENV};
use crate::exec::Threaded;
use crate::io;
use crate::manifest::{self, Manifest, ManifestEntry};

#[derive(Debug, Parser)]
#[command(
    name = "uts",
    version,
    about = "Unit-based tissue segmentation on 32x32 tiles",
    args_override_self = true
)]
pub struct Cli {
    /// File of `key = value` defaults for the subcommand's flags
    #[arg(long, env = CONFIG_ENV, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic three-class ROI dataset with a ground-truth manifest
    Synth(SynthArgs),
    /// Cut an image into tiles and write its manifest
    Tile(TileArgs),
    /// Train a classifier on the labeled tiles of a manifest
    Train(TrainArgs),
    /// Classify every tile of one or more images and paint the raw mask
    Infer(InferArgs),
    /// Smooth a raw mask, snap it to the palette and blend it over the image
    Refine(RefineArgs),
    /// Compare predicted tile labels against ground truth
    Eval(EvalArgs),
    /// Report tumor, stroma and fat percentages of a labeled manifest
    Tsr(TsrArgs),
    /// Compare pixel-level and tile-level operation counts
    Complexity(ComplexityArgs),
    /// Simulate label noise pooled into tiles by majority vote
    VarianceTrial(VarianceArgs),
}

#[derive(Debug, clap::Args)]
pub struct SynthArgs {
    /// Output directory [default: runs/run-<unix time>]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// ROIs generated per class
    #[arg(long, default_value_t = 30)]
    pub rois_per_class: usize,
    /// ROI side length in pixels (multiple of 32)
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    /// Pixel noise amplitude as a fraction of 255
    #[arg(long, default_value_t = 0.08)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random class per tile instead of class-pure ROIs
    #[arg(long)]
    pub mixed: bool,
}

#[derive(Debug, clap::Args)]
pub struct TileArgs {
    /// Source image (PNG or PPM)
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory [default: runs/run-<unix time>]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = TILE_SIZE)]
    pub tile_size: usize,
    /// Flag tiles brighter than this mean luminance (0-255) as excluded [default: off]
    #[arg(long)]
    pub blank_threshold: Option<f64>,
    /// Patient identifier recorded in the manifest
    #[arg(long, default_value = "")]
    pub patient: String,
    /// Also write every tile as tiles/r{row}_c{col}.png
    #[arg(long)]
    pub export_tiles: bool,
}

#[derive(Debug, clap::Args)]
pub struct TrainArgs {
    /// Labeled manifest (for example from `synth`)
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory [default: runs/run-<unix time>]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Seeds initialization, shuffling and the fold split
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model configuration: backbone, vtm, vtm-datse or all
    #[arg(long, default_value = "all", value_parser = parse_variant)]
    pub variant: Variant,
    /// Use linear instead of full attention in the transformer blocks
    #[arg(long)]
    pub linear_attention: bool,
    /// Patient-level folds
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
    /// Fold held out for validation; written to heldout.csv [default: none, train on everything]
    #[arg(long)]
    pub holdout_fold: Option<usize>,
    /// Worker threads; results do not depend on it [default: machine parallelism]
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct InferArgs {
    /// Checkpoint written by `train`
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image to classify (repeatable)
    #[arg(long, action = ArgAction::Append, required_unless_present = "manifest")]
    pub image: Vec<PathBuf>,
    /// Classify every image of this manifest, keeping its geometry and patients
    #[arg(long, conflicts_with = "image")]
    pub manifest: Option<PathBuf>,
    /// Output directory [default: runs/run-<unix time>]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flag tiles brighter than this mean luminance (0-255) as excluded [default: off]
    #[arg(long)]
    pub blank_threshold: Option<f64>,
    /// Worker threads [default: machine parallelism]
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, clap::Args)]
pub struct RefineArgs {
    /// Raw mask written by `infer`
    #[arg(long)]
    pub mask: PathBuf,
    /// Source image the mask belongs to
    #[arg(long)]
    pub image: PathBuf,
    /// Output directory [default: runs/run-<unix time>]
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Smoothing window in pixels
    #[arg(long, default_value_t = 48)]
    pub window: usize,
    /// Mask weight in the overlay
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Allow black as a fourth color when snapping to the palette
    #[arg(long)]
    pub null_class: bool,
    /// Keep pixels that are black in the raw mask black
    #[arg(long)]
    pub freeze_excluded: bool,
}

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Manifest with ground-truth labels
    #[arg(long)]
    pub truth: PathBuf,
    /// Manifest with predicted labels (from `infer`)
    #[arg(long)]
    pub pred: PathBuf,
    /// Output directory [default: runs/run-<unix time>]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct TsrArgs {
    /// Labeled manifest
    #[arg(long)]
    pub manifest: PathBuf,
    /// Also write the report to this directory [default: print only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct ComplexityArgs {
    #[arg(long, default_value_t = 512)]
    pub width: usize,
    #[arg(long, default_value_t = 512)]
    pub height: usize,
    /// Tile side k
    #[arg(long, default_value_t = TILE_SIZE)]
    pub tile: usize,
    /// Token count M
    #[arg(long, default_value_t = lvit::TOKENS)]
    pub tokens: usize,
    /// Embedding width D
    #[arg(long, default_value_t = lvit::EMBED_DIM)]
    pub dim: usize,
    /// Also write the report to this directory [default: print only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, clap::Args)]
pub struct VarianceArgs {
    /// Tile side in pixels
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    /// Probability that a pixel label is flipped
    #[arg(long, default_value_t = 0.3)]
    pub p: f64,
    #[arg(long, default_value_t = 100_000)]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report to this directory [default: print only]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse().map_err(|e: uts_core::Error| e.to_string())
}

/// A failed command: message plus exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    fn input(e: impl Display) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }

    fn internal(e: impl Display) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

type Outcome = Result<(), Failure>;

pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let (cli, resolved) = match parse(&argv) {
        Ok(p) => p,
        Err(ParseFailure::Clap(e)) => {
            let _ = e.print();
            return e.exit_code();
        }
        Err(ParseFailure::Config(f)) => {
            eprintln!("uts: {}", f.message);
            return f.code;
        }
    };
    match execute(cli, &resolved) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("uts: {}", f.message);
            f.code
        }
    }
}

enum ParseFailure {
    Clap(clap::Error),
    Config(Failure),
}

/// Parses argv, folding configuration-file values in ahead of the
/// subcommand's own flags so the command line wins.
fn parse(argv: &[OsString]) -> Result<(Cli, Vec<(String, String)>), ParseFailure> {
    let cmd = Cli::command();
    // Required flags may come from the config file, so a strict first pass
    // is allowed to fail as long as a lenient one finds the file.
    let first = match cmd.clone().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => match cmd.clone().ignore_errors(true).try_get_matches_from(argv) {
            Ok(m) if m.contains_id("config") && m.get_one::<PathBuf>("config").is_some() && m.subcommand().is_some() => m,
            _ => return Err(ParseFailure::Clap(e)),
        },
    };
    let Some((sub_name, _)) = first.subcommand() else {
        unreachable!("a subcommand is required");
    };
    let sub_name = sub_name.to_string();
    let mut full = argv.to_vec();
    if let Some(path) = first.get_one::<PathBuf>("config") {
        let entries = config::read(path).map_err(|e| ParseFailure::Config(Failure::input(e)))?;
        let sub = cmd.find_subcommand(&sub_name).expect("parsed subcommand exists");
        let known: Vec<(String, FlagKind)> = sub
            .get_arguments()
            .filter(|a| a.get_id() != "config")
            .filter_map(|a| {
                let kind = if a.get_action().takes_values() { FlagKind::Value } else { FlagKind::Switch };
                a.get_long().map(|l| (l.to_string(), kind))
            })
            .collect();
        let injected = config::to_args(&entries, &known)
            .map_err(|e| ParseFailure::Config(Failure::input(format!("{}: {e}", path.display()))))?;
        let at = argv
            .iter()
            .position(|a| a.to_str() == Some(sub_name.as_str()))
            .expect("subcommand appears in argv");
        full.splice(at + 1..at + 1, injected.into_iter().map(OsString::from));
    }
    let matches = cmd.try_get_matches_from(&full).map_err(ParseFailure::Clap)?;
    let cli = Cli::from_arg_matches(&matches).map_err(ParseFailure::Clap)?;
    let (_, sub) = matches.subcommand().expect("subcommand present");
    let mut resolved = Vec::new();
    let sub_cmd = Cli::command();
    let sub_cmd = sub_cmd.find_subcommand(&sub_name).expect("parsed subcommand exists");
    let mut ids: Vec<String> = sub_cmd
        .get_arguments()
        .map(|a| a.get_id().as_str().to_string())
        .filter(|id| id != "config")
        .collect();
    ids.sort();
    for id in ids {
        if let Some(raw) = sub.get_raw(&id) {
            let vals: Vec<String> = raw.map(|v| v.to_string_lossy().into_owned()).collect();
            resolved.push((id.replace('_', "-"), vals.join(" ")));
        }
    }
    Ok((cli, resolved))
}

fn execute(cli: Cli, resolved: &[(String, String)]) -> Outcome {
    let log = |out: Option<&Path>| -> Outcome {
        let text: String = resolved.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        eprint!("# resolved configuration\n{text}");
        if let Some(dir) = out {
            write_text(&dir.join("config.resolved"), &text)?;
        }
        Ok(())
    };
    match cli.command {
        Command::Synth(a) => {
            let out = out_dir(a.out.as_deref())?;
            log(Some(&out))?;
            cmd_synth(&a, &out)
        }
        Command::Tile(a) => {
            let out = out_dir(a.out.as_deref())?;
            log(Some(&out))?;
            cmd_tile(&a, &out)
        }
        Command::Train(a) => {
            let out = out_dir(a.out.as_deref())?;
            log(Some(&out))?;
            cmd_train(&a, &out)
        }
        Command::Infer(a) => {
            let out = out_dir(a.out.as_deref())?;
            log(Some(&out))?;
            cmd_infer(&a, &out)
        }
        Command::Refine(a) => {
            let out = out_dir(a.out.as_deref())?;
            log(Some(&out))?;
            cmd_refine(&a, &out)
        }
        Command::Eval(a) => {
            let out = out_dir(a.out.as_deref())?;
            log(Some(&out))?;
            cmd_eval(&a, &out)
        }
        Command::Tsr(a) => {
            log(a.out.as_deref())?;
            cmd_tsr(&a)
        }
        Command::Complexity(a) => {
            log(a.out.as_deref())?;
            cmd_complexity(&a)
        }
        Command::VarianceTrial(a) => {
            log(a.out.as_deref())?;
            cmd_variance(&a)
        }
    }
}

fn out_dir(out: Option<&Path>) -> Result<PathBuf, Failure> {
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => {
            let secs = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
            PathBuf::from("runs").join(format!("run-{secs}"))
        }
    };
    fs::create_dir_all(&dir).map_err(|e| Failure::internal(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::internal(format!("{}: {e}", path.display())))
}

fn require_file(path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::input(format!("{}: no such file", path.display())))
    }
}

fn threads(n: Option<usize>) -> Result<Threaded, Failure> {
    match n {
        Some(0) => Err(Failure::input("--threads must be at least 1")),
        Some(n) => Ok(Threaded::new(n)),
        None => Ok(Threaded::machine()),
    }
}

fn read_manifest(path: &Path) -> Result<Manifest, Failure> {
    require_file(path)?;
    Manifest::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn cmd_synth(a: &SynthArgs, out: &Path) -> Outcome {
    let template = SynthSpec {
        width: a.size,
        height: a.size,
        noise: a.noise,
        ..SynthSpec::default()
    };
    let ds = synth::generate_dataset(a.rois_per_class, &template, a.seed, a.mixed).map_err(Failure::input)?;
    let mut manifest = Manifest::default();
    for r in &ds.rois {
        let file = format!("{}.png", r.name);
        io::write_png(&out.join(&file), &r.roi.image).map_err(Failure::internal)?;
        manifest.entries.push(ManifestEntry {
            image: file,
            patient: r.roi.patient_id.clone(),
            grid: r.roi.grid.clone(),
        });
    }
    let path = out.join("manifest.csv");
    manifest.write(&path).map_err(Failure::internal)?;
    let mut patients = ds.patients();
    patients.sort();
    patients.dedup();
    println!(
        "wrote {} ROIs, {} tiles, {} patients to {}",
        ds.rois.len(),
        ds.tile_count(),
        patients.len(),
        path.display()
    );
    Ok(())
}

fn cmd_tile(a: &TileArgs, out: &Path) -> Outcome {
    require_file(&a.image)?;
    let img = io::read_image(&a.image).map_err(Failure::input)?;
    let grid = tiling::partition(&img, a.tile_size, a.blank_threshold).map_err(Failure::input)?;
    let excluded = grid.tiles.iter().filter(|t| t.excluded).count();
    let image = fs::canonicalize(&a.image).unwrap_or_else(|_| a.image.clone());
    if a.export_tiles {
        io::export_tiles(&out.join("tiles"), &img, &grid).map_err(Failure::internal)?;
    }
    let path = out.join("manifest.csv");
    Manifest::single(image.display().to_string(), a.patient.clone(), grid.clone())
        .write(&path)
        .map_err(Failure::internal)?;
    println!(
        "{}x{} image: {} x {} tiles ({} excluded), manifest {}",
        img.width,
        img.height,
        grid.cols,
        grid.rows,
        excluded,
        path.display()
    );
    Ok(())
}

/// Labeled, included tiles of the given manifest entries.
fn load_tiles(manifest_path: &Path, entries: &[&ManifestEntry]) -> Result<Vec<LabeledTile>, Failure> {
    let mut out = Vec::new();
    for e in entries {
        let path = manifest::resolve(manifest_path, &e.image);
        let img = io::read_image(&path).map_err(Failure::input)?;
        check_geometry(&img, &e.grid, &path)?;
        for (i, t) in e.grid.tiles.iter().enumerate() {
            if t.excluded {
                continue;
            }
            let label = e.grid.labels[i].ok_or_else(|| {
                Failure::input(format!("{}: tile (col {}, row {}) has no label", e.image, t.col, t.row))
            })?;
            let tile = tiling::extract_tile(&img, &e.grid, i).map_err(Failure::internal)?;
            out.push(LabeledTile { tile, label });
        }
    }
    Ok(out)
}

fn check_geometry(img: &uts_core::tiling::RgbImage, grid: &TileGrid, path: &Path) -> Outcome {
    if (img.width, img.height) != (grid.width, grid.height) {
        return Err(Failure::input(format!(
            "{}: image is {}x{} but the manifest says {}x{}",
            path.display(),
            img.width,
            img.height,
            grid.width,
            grid.height
        )));
    }
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &Path) -> Outcome {
    let manifest = read_manifest(&a.manifest)?;
    if manifest.entries.is_empty() {
        return Err(Failure::input(format!("{}: no tiles", a.manifest.display())));
    }
    let exec = threads(a.threads)?;
    let mut model = a.variant.config();
    model.linear_attention = a.linear_attention;
    let cfg = TrainConfig {
        batch_size: a.batch_size,
        epochs: a.epochs,
        learning_rate: a.lr,
        seed: a.seed,
        model,
    };

    let all: Vec<&ManifestEntry> = manifest.entries.iter().collect();
    let (train_entries, held): (Vec<&ManifestEntry>, Vec<&ManifestEntry>) = match a.holdout_fold {
        None => (all, Vec::new()),
        Some(f) => {
            if f >= a.folds {
                return Err(Failure::input(format!("--holdout-fold {f} needs --folds > {f}")));
            }
            let patients: Vec<&str> = manifest.entries.iter().map(|e| e.patient.as_str()).collect();
            let plan = train::kfold_split(&patients, a.folds, a.seed).map_err(Failure::input)?;
            let pick = |idx: Vec<usize>| idx.into_iter().map(|i| &manifest.entries[i]).collect();
            (pick(plan.train_indices(f)), pick(plan.test_indices(f)))
        }
    };
    let train_set = load_tiles(&a.manifest, &train_entries)?;
    let val_set = load_tiles(&a.manifest, &held)?;
    eprintln!(
        "training {} on {} tiles ({} held out), {} threads",
        a.variant,
        train_set.len(),
        val_set.len(),
        exec.threads()
    );

    if !held.is_empty() {
        let heldout = Manifest {
            entries: held
                .iter()
                .map(|e| ManifestEntry {
                    image: absolute(&manifest::resolve(&a.manifest, &e.image)),
                    ..(*e).clone()
                })
                .collect(),
        };
        heldout.write(&out.join("heldout.csv")).map_err(Failure::internal)?;
    }

    let log_path = out.join("train_log.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Failure::internal(format!("{}: {e}", log_path.display())))?;
    let mut log_err = writeln!(log, "epoch,mean_loss,val_accuracy").err();
    let validation = (!val_set.is_empty()).then_some(val_set.as_slice());
    let outcome = train::train_epochs(&train_set, &cfg, &exec, validation, |s, _| {
        let val = s.val_accuracy.map_or(String::new(), |v| format!("{v:.6}"));
        if let Err(e) = writeln!(log, "{},{:.6},{}", s.epoch, s.mean_loss, val).and_then(|_| log.flush()) {
            log_err.get_or_insert(e);
        }
        eprintln!("epoch {:>3}  loss {:.5}  val {}", s.epoch, s.mean_loss, if val.is_empty() { "-" } else { &val });
    })
    .map_err(Failure::input)?;
    if let Some(e) = log_err {
        return Err(Failure::internal(format!("{}: {e}", log_path.display())));
    }
    let ckpt = out.join("checkpoint.bin");
    checkpoint::save(&ckpt, &cfg.model, &outcome.params).map_err(Failure::internal)?;
    println!("wrote {}", ckpt.display());
    Ok(())
}

fn absolute(p: &Path) -> String {
    fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf()).display().to_string()
}

fn cmd_infer(a: &InferArgs, out: &Path) -> Outcome {
    require_file(&a.checkpoint)?;
    let (config, params) = checkpoint::load(&a.checkpoint).map_err(|e| Failure::input(format!("{}: {e}", a.checkpoint.display())))?;
    let exec = threads(a.threads)?;

    // (image path, patient, grid to fill)
    let mut jobs: Vec<(PathBuf, String, Option<TileGrid>)> = Vec::new();
    if let Some(m) = &a.manifest {
        let manifest = read_manifest(m)?;
        for e in manifest.entries {
            let mut grid = e.grid;
            grid.labels.iter_mut().for_each(|l| *l = None);
            grid.probs.iter_mut().for_each(|p| *p = None);
            jobs.push((manifest::resolve(m, &e.image), e.patient, Some(grid)));
        }
    } else {
        for img in &a.image {
            require_file(img)?;
            jobs.push((img.clone(), String::new(), None));
        }
    }

    let single = jobs.len() == 1;
    let palette = Palette::default();
    let mut predictions = Manifest::default();
    for (path, patient, grid) in jobs {
        let img = io::read_image(&path).map_err(Failure::input)?;
        let mut grid = match grid {
            Some(g) => {
                check_geometry(&img, &g, &path)?;
                g
            }
            None => tiling::partition(&img, TILE_SIZE, a.blank_threshold).map_err(Failure::input)?,
        };
        if grid.tile_size != TILE_SIZE {
            return Err(Failure::input(format!("{}: tile size {} is not {TILE_SIZE}", path.display(), grid.tile_size)));
        }
        let included: Vec<usize> = (0..grid.len()).filter(|&i| !grid.tiles[i].excluded).collect();
        let tiles = included
            .iter()
            .map(|&i| tiling::extract_tile(&img, &grid, i))
            .collect::<uts_core::Result<Vec<_>>>()
            .map_err(Failure::internal)?;
        let probs = train::predict(&params, &config, &tiles, &exec).map_err(Failure::internal)?;
        for (&i, p) in included.iter().zip(&probs) {
            grid.labels[i] = Some(train::argmax(p));
            grid.probs[i] = Some(*p);
        }
        let mask = tiling::assemble_mask(&grid, &palette).map_err(Failure::internal)?;
        let mask_path = if single {
            out.join("mask_raw.png")
        } else {
            let stem = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
            out.join(format!("{stem}_mask_raw.png"))
        };
        io::write_png(&mask_path, &mask.to_image()).map_err(Failure::internal)?;
        predictions.entries.push(ManifestEntry {
            image: absolute(&path),
            patient,
            grid,
        });
    }
    let pred_path = out.join("predictions.csv");
    predictions.write(&pred_path).map_err(Failure::internal)?;
    println!(
        "classified {} tiles in {} image(s); wrote {}",
        predictions.tile_count(),
        predictions.entries.len(),
        pred_path.display()
    );
    Ok(())
}

fn cmd_refine(a: &RefineArgs, out: &Path) -> Outcome {
    require_file(&a.mask)?;
    require_file(&a.image)?;
    let mask_img = io::read_image(&a.mask).map_err(Failure::input)?;
    let img = io::read_image(&a.image).map_err(Failure::input)?;
    let palette = Palette::default();
    if let Some(p) = mask_img
        .pixels
        .iter()
        .find(|&&p| p != refine::BLACK && palette.label_of(p).is_none())
    {
        return Err(Failure::input(format!(
            "{}: color {:?} is neither a class color nor black",
            a.mask.display(),
            p
        )));
    }
    let cfg = RefineConfig {
        window: a.window,
        overlay: OverlayConfig::new(a.alpha).map_err(Failure::input)?,
        null_class: a.null_class,
        freeze_excluded: a.freeze_excluded,
    };
    let raw = ColorMask::from_image(&mask_img, MaskState::Raw);
    let r = refine::refine_pipeline(&raw, &img, &palette, &cfg).map_err(Failure::input)?;
    io::write_png(&out.join("mask_refined.png"), &r.discrete.to_image()).map_err(Failure::internal)?;
    io::write_png(&out.join("overlay.png"), &r.overlay).map_err(Failure::internal)?;
    let w = a.window as u64;
    let ops = format!(
        "window: {}\npixels: {}\nseparable samples per pixel: max {} mean {:.2}\ndirect samples per pixel: max {}\n",
        a.window,
        r.ops.pixels,
        r.ops.max_per_pixel,
        r.ops.mean_per_pixel(),
        w * w
    );
    write_text(&out.join("refine_ops.txt"), &ops)?;
    print!("{ops}");
    println!("wrote mask_refined.png and overlay.png to {}", out.display());
    Ok(())
}

fn file_key(image: &str) -> String {
    Path::new(image)
        .file_name()
        .map_or(image.to_string(), |s| s.to_string_lossy().into_owned())
}

fn cmd_eval(a: &EvalArgs, out: &Path) -> Outcome {
    let truth = read_manifest(&a.truth)?;
    let pred = read_manifest(&a.pred)?;
    let mut cm = ConfusionMatrix::default();
    for t in &truth.entries {
        let key = file_key(&t.image);
        let p = pred
            .entries
            .iter()
            .find(|p| file_key(&p.image) == key)
            .ok_or_else(|| Failure::input(format!("{key}: no predictions")))?;
        if p.grid.len() != t.grid.len() {
            return Err(Failure::input(format!("{key}: tile grids differ")));
        }
        for (i, tile) in t.grid.tiles.iter().enumerate() {
            let Some(truth_label) = t.grid.labels[i] else { continue };
            if tile.excluded {
                continue;
            }
            let pred_label = p.grid.labels[i].ok_or_else(|| {
                Failure::input(format!("{key}: tile (col {}, row {}) has no prediction", tile.col, tile.row))
            })?;
            cm.add(truth_label, pred_label).map_err(Failure::input)?;
        }
    }
    let report = metrics::macro_metrics(&cm).map_err(Failure::input)?;
    fs::write(out.join("metrics.csv"), report.to_csv()).map_err(Failure::internal)?;
    let summary = report.to_string();
    write_text(&out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn report(out: Option<&Path>, name: &str, text: &str) -> Outcome {
    print!("{text}");
    if let Some(dir) = out {
        write_text(&dir.join(name), text)?;
    }
    Ok(())
}

fn cmd_tsr(a: &TsrArgs) -> Outcome {
    let manifest = read_manifest(&a.manifest)?;
    let ratios = TissueRatios::from_counts(manifest.class_counts()).map_err(Failure::input)?;
    report(a.out.as_deref(), "tsr.txt", &format!("{ratios}\n"))
}

fn cmd_complexity(a: &ComplexityArgs) -> Outcome {
    let r = metrics::complexity_report(a.width, a.height, a.tile, a.tokens, a.dim).map_err(Failure::input)?;
    report(a.out.as_deref(), "complexity.txt", &r.to_string())
}

fn cmd_variance(a: &VarianceArgs) -> Outcome {
    let t = metrics::variance_reduction_trial(a.k, a.p, a.trials, a.seed).map_err(Failure::input)?;
    report(a.out.as_deref(), "variance_trial.txt", &t.to_string())
}

/// Loads a checkpoint and returns its model configuration and parameters.
pub fn load_model(path: &Path) -> Result<(uts_core::lvit::LVitConfig, LVitParams), Failure> {
    checkpoint::load(path).map_err(Failure::input)
}
