//! `sdcm`: reproducible runs of the hyperspectral detector.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use sdcm_core::config::RunConfig;
use sdcm_core::detect::DetectionReport;
use sdcm_core::error::StageContext;
use sdcm_core::gradcheck::{report_csv, run_suite, SuiteOptions, DEFAULT_STEP, DEFAULT_TOLERANCE};
use sdcm_core::hsi_io::{gen_synthetic_cube, read_cube, write_cube};
use sdcm_core::model::SdcmModel;
use sdcm_core::scl::{flops_cmatt, FlopReport};
use sdcm_core::sgg::band_importance;
use sdcm_core::train::{evaluate_ap, make_scenes, train_toy, LossRow, Split};
use sdcm_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sdcm", version, about = "Hyperspectral object detection with cross-modal attention and spectral gating")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic cube and its ground-truth boxes.
    GenCube {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the annotation JSON.
        #[arg(long)]
        annotation: Option<PathBuf>,
    },
    /// Run the full detector on a cube.
    Forward {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        cube: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Trained weights; their embedded config replaces the flags.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train on synthetic scenes and report held-out AP@0.5.
    TrainToy {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    GradCheck {
        #[arg(long, default_value_t = sdcm_core::gradcheck::DEFAULT_SEEDS)]
        seeds: usize,
        #[arg(long, default_value_t = DEFAULT_STEP)]
        h: f64,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
        /// Scale the analytic gradient of this op, to see the check fire.
        #[arg(long)]
        fault: Option<String>,
        /// Comma-separated subset of ops.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
        /// Also write the CSV report here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// List the op names and exit.
        #[arg(long)]
        list: bool,
    },
    /// Count multiply-accumulates of one cross-modal attention call.
    Flops {
        #[arg(long, default_value_t = 256)]
        n_hat: usize,
        #[arg(long, default_value_t = 64)]
        c: usize,
        #[arg(long, value_delimiter = ',', default_value = "1.0,0.75,0.5,0.25")]
        k: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-band energy importance as CSV plus one PGM map per band.
    BandImportance {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        cube: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// A config file (or the defaults) with per-field overrides.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// TOML run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    band_threshold_nm: Option<f64>,
    #[arg(long)]
    bands_per_side: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    encoder_widths: Option<Vec<usize>>,
    #[arg(long)]
    encoder_depth: Option<usize>,
    #[arg(long)]
    scl_stages: Option<usize>,
    #[arg(long)]
    topk_ratio: Option<f64>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    pca_components: Option<usize>,
    #[arg(long)]
    extractor_width: Option<usize>,
    #[arg(long)]
    decoder_blocks: Option<usize>,
    #[arg(long)]
    sgg_lambda: Option<f64>,
    #[arg(long)]
    sgg_after_scl: Option<bool>,
    #[arg(long)]
    sgg_on_spectral: Option<bool>,
    #[arg(long)]
    head_hidden: Option<usize>,
    #[arg(long)]
    nms_iou: Option<f64>,
    #[arg(long)]
    score_threshold: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    train_scenes: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_scenes: Option<usize>,
    #[arg(long)]
    max_objects: Option<usize>,
    /// Objects in a generated cube.
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    wavelength_min_nm: Option<f64>,
    #[arg(long)]
    wavelength_max_nm: Option<f64>,
}

macro_rules! apply {
    ($target:expr, $args:expr, $($field:ident),*) => {
        $(if let Some(v) = $args.$field.clone() { $target.$field = v; })*
    };
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        apply!(
            cfg, self, seed, band_threshold_nm, bands_per_side, encoder_widths, encoder_depth, scl_stages,
            topk_ratio, heads, pca_components, extractor_width, decoder_blocks, sgg_lambda, sgg_after_scl,
            sgg_on_spectral, head_hidden, nms_iou, score_threshold, learning_rate, steps, train_scenes,
            batch_size, eval_scenes, max_objects
        );
        apply!(cfg.scene, self, objects, bands, height, width, noise_sigma, wavelength_min_nm, wavelength_max_nm);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// `Ok(false)` is a clean run whose outcome is a failure (a failed check).
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenCube { config, out, annotation } => {
            let cfg = config.resolve()?;
            let (cube, ann) = gen_synthetic_cube(cfg.seed, &cfg.scene).stage("hsi_io")?;
            write_cube(&cube, &out).stage("hsi_io")?;
            if let Some(path) = annotation {
                fs::write(path, ann.to_json()? + "\n")?;
            }
            Ok(true)
        }
        Command::Forward { config, cube, out, checkpoint } => {
            let model = match checkpoint {
                Some(path) => SdcmModel::load_checkpoint(path).stage("checkpoint")?,
                None => SdcmModel::new(&config.resolve()?)?,
            };
            forward(&model, &cube, &out)?;
            Ok(true)
        }
        Command::TrainToy { config, out } => train(&config.resolve()?, &out),
        Command::GradCheck { seeds, h, tolerance, fault, only, out, list } => {
            if list {
                for name in sdcm_core::gradcheck::op_names() {
                    println!("{name}");
                }
                return Ok(true);
            }
            let reports = run_suite(&SuiteOptions { seeds, h, tolerance, fault, only })?;
            let csv = report_csv(&reports);
            print!("{csv}");
            if let Some(path) = out {
                fs::write(path, &csv)?;
            }
            Ok(reports.iter().all(|r| r.passed()))
        }
        Command::Flops { n_hat, c, k, out } => {
            let mut csv = format!("{}\n", FlopReport::CSV_HEADER);
            for k in k {
                csv.push_str(&flops_cmatt(n_hat, c, k).stage("scl")?.csv_row());
                csv.push('\n');
            }
            print!("{csv}");
            if let Some(path) = out {
                fs::write(path, &csv)?;
            }
            Ok(true)
        }
        Command::BandImportance { config, cube, out } => {
            let cfg = config.resolve()?;
            importance(&cfg, &cube, &out)?;
            Ok(true)
        }
    }
}

fn forward(model: &SdcmModel, cube_path: &Path, out: &Path) -> Result<()> {
    let cube = read_cube(cube_path).stage("hsi_io")?;
    let input = model.prepare(&cube)?;
    let (dets, trace) = model.detect(&input)?;
    fs::create_dir_all(out)?;
    let id = cube_path.file_stem().map_or("cube".into(), |s| s.to_string_lossy().into_owned());
    let report = DetectionReport::new(id, &dets);
    fs::write(out.join("detections.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    let mut shapes = String::from("stage,shape,stride\n");
    for s in &trace.shapes {
        let dims: Vec<String> = s.shape.iter().map(|d| d.to_string()).collect();
        let stride = s.stride.map_or(String::new(), |v| v.to_string());
        shapes.push_str(&format!("{},{},{}\n", s.name, dims.join("x"), stride));
    }
    fs::write(out.join("shapes.csv"), shapes)?;
    fs::write(out.join("trace.json"), serde_json::to_string_pretty(&trace)? + "\n")?;
    println!("{} detections", dets.len());
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    initial_loss: f64,
    final_loss: f64,
    loss_ratio: f64,
    eval_scenes: usize,
    eval_ap50: f64,
}

fn train(cfg: &RunConfig, out: &Path) -> Result<bool> {
    fs::create_dir_all(out)?;
    let mut csv = fs::File::create(out.join("loss_curve.csv"))?;
    writeln!(csv, "{}", LossRow::CSV_HEADER)?;
    let mut write_err = None;
    let outcome = train_toy(cfg, |row| {
        if let Err(e) = writeln!(csv, "{}", row.csv_row()) {
            write_err.get_or_insert(e);
        }
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let outcome = match outcome {
        Err(Error::Training(dump)) => {
            fs::write(out.join("diagnostic.txt"), &dump)?;
            eprintln!("{dump}");
            return Err(Error::Training(format!("diagnostics written to {}", out.join("diagnostic.txt").display())));
        }
        other => other?,
    };
    outcome.model.save_checkpoint(out.join("checkpoint.sdck"))?;
    cfg.save(out.join("config.toml"))?;
    let eval = make_scenes(cfg, Split::Eval, cfg.eval_scenes)?;
    let first = outcome.curve.first().map_or(f64::NAN, |r| r.loss_total);
    let last = outcome.curve.last().map_or(f64::NAN, |r| r.loss_total);
    let summary = TrainSummary {
        steps: cfg.steps,
        initial_loss: first,
        final_loss: last,
        loss_ratio: last / first,
        eval_scenes: eval.len(),
        eval_ap50: evaluate_ap(&outcome.model, &eval)?,
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!(
        "loss {:.4} -> {:.4} (ratio {:.4}), held-out AP@0.5 {:.4}",
        summary.initial_loss, summary.final_loss, summary.loss_ratio, summary.eval_ap50
    );
    Ok(true)
}

fn importance(cfg: &RunConfig, cube_path: &Path, out: &Path) -> Result<()> {
    let cube = read_cube(cube_path).stage("hsi_io")?;
    let imp = band_importance(&cube, cfg.sgg_lambda).stage("sgg")?;
    fs::create_dir_all(out)?;
    let mut csv = String::from("band,wavelength_nm,mean_importance,normalized\n");
    for (b, wl) in cube.wavelengths().iter().enumerate() {
        csv.push_str(&format!("{b},{wl},{},{}\n", imp.raw[b], imp.normalized[b]));
    }
    fs::write(out.join("importance.csv"), csv)?;
    for (b, map) in imp.maps.iter().enumerate() {
        fs::write(out.join(format!("band_{b:03}.pgm")), pgm(map, imp.width, imp.height))?;
    }
    let best = imp.normalized.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i);
    println!("most important band: {best} ({} nm)", cube.wavelengths()[best]);
    Ok(())
}

/// Binary graymap, each map stretched to the full 0..=255 range.
fn pgm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| ((v - lo) / span * 255.0).round() as u8));
    out
}
