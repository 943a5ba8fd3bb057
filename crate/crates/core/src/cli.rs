//! Command-line front end. Each subcommand is a thin wrapper over a public
//! function in this module, so scripts and tests can call the same code
//! paths without spawning a process.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use log::info;

use crate::binio::write_atomic;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::gmm_prior::{
    collect_residual_groups, load_model, save_model, train_gmm, GmmModel, DEFAULT_COMPONENTS,
    DEFAULT_EM_ITERS, DEFAULT_RIDGE, DEFAULT_SAMPLES,
};
use crate::image::Image;
use crate::metrics::{format_psnr, psnr};
use crate::pgm::{load_pgm, save_pgm};
use crate::sensing::{generate_measurement_matrix, sample_image, Measurements, DEFAULT_BLOCK_DIM};
use crate::solver::{reconstruct, write_trace_csv, Reconstruction, SolverConfig};

#[derive(Parser, Debug)]
#[command(name = "jgrsc", version, about = "Compressive-sensing image reconstruction with joint group and residual sparse coding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Learn a Gaussian mixture prior over residual patch groups.
    Train(TrainArgs),
    /// Measure a PGM image blockwise.
    Sample(SampleArgs),
    /// Recover an image from measurements.
    Reconstruct(ReconstructArgs),
    /// Print the PSNR between two PGM images.
    Evaluate(EvaluateArgs),
    /// Sample and reconstruct a directory of images at several subrates.
    Benchmark(BenchmarkArgs),
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 60)]
    pub group_size: usize,
    #[arg(long, default_value_t = DEFAULT_COMPONENTS)]
    pub components: usize,
    #[arg(long, default_value_t = DEFAULT_SAMPLES)]
    pub samples: usize,
    #[arg(long, default_value_t = DEFAULT_EM_ITERS)]
    pub em_iters: usize,
    #[arg(long, default_value_t = DEFAULT_RIDGE)]
    pub ridge: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Block-matching window used when forming training groups.
    #[arg(long, default_value_t = 40)]
    pub window: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct SampleArgs {
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub subrate: f64,
    #[arg(long, default_value_t = DEFAULT_BLOCK_DIM)]
    pub block: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ReconstructArgs {
    /// Falls back to `meas` in the config file.
    #[arg(long)]
    pub meas: Option<PathBuf>,
    /// Falls back to `model` in the config file.
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Without a config the defaults for the measured subrate are used,
    /// with patch size, group size and component count taken from the model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct BenchmarkArgs {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.2, 0.3])]
    pub subrates: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Base solver settings; the subrate is replaced per row.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_BLOCK_DIM)]
    pub block: usize,
}

/// Sorted `*.pgm` files directly inside `dir`.
pub fn list_pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_pgm = path
            .extension()
            .map(|e| e.eq_ignore_ascii_case("pgm"))
            .unwrap_or(false);
        if is_pgm && path.is_file() {
            files.push(path);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!("no .pgm files in {}", dir.display())));
    }
    Ok(files)
}

pub fn run_train(args: &TrainArgs) -> Result<GmmModel> {
    let images = list_pgm_files(&args.images)?
        .iter()
        .map(|p| load_pgm(p))
        .collect::<Result<Vec<_>>>()?;
    info!("collecting {} groups from {} images", args.samples, images.len());
    let data = collect_residual_groups(
        &images,
        args.patch_size,
        args.group_size,
        args.window,
        args.samples,
        args.seed,
    )?;
    info!("training {} components", args.components);
    let model = train_gmm(&data, args.components, args.em_iters, args.ridge, args.seed)?;
    save_model(&model, &args.out)?;
    Ok(model)
}

pub fn run_sample(args: &SampleArgs) -> Result<Measurements> {
    let img = load_pgm(&args.image)?;
    let mat = generate_measurement_matrix(args.block, args.subrate, args.seed)?;
    let meas = sample_image(&img, &mat)?;
    meas.save(&args.out)?;
    Ok(meas)
}

/// Solver settings matching a model when no config file is given.
pub fn config_for_model(subrate: f64, model: &GmmModel) -> SolverConfig {
    SolverConfig {
        patch_size: model.patch_size(),
        group_size: model.group_size(),
        components: model.num_components(),
        ..SolverConfig::for_subrate(subrate)
    }
}

fn required(flag: Option<PathBuf>, fallback: Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or(fallback)
        .ok_or_else(|| Error::Config(format!("missing --{name} (not set in the config either)")))
}

pub fn run_reconstruct(args: &ReconstructArgs) -> Result<Reconstruction> {
    let file_cfg = args
        .config
        .as_deref()
        .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
        .transpose()?;
    // Paths are needed before the measurements are known, so parse once
    // for them with a placeholder subrate and again once it is known.
    let paths = match &file_cfg {
        Some(text) => RunConfig::parse(text, Some(1.0))?.paths,
        None => Default::default(),
    };
    let meas_path = required(args.meas.clone(), paths.meas, "meas")?;
    let model_path = required(args.model.clone(), paths.model, "model")?;
    let out_path = required(args.out.clone(), paths.out, "out")?;
    let reference_path = args.reference.clone().or(paths.reference);
    let trace_path = args.trace.clone().or(paths.trace);

    let meas = Measurements::load(&meas_path)?;
    let model = load_model(&model_path)?;
    let subrate = meas.matrix().subrate();
    let cfg = match &file_cfg {
        Some(text) => RunConfig::parse(text, Some(subrate))?.solver,
        None => config_for_model(subrate, &model),
    };
    let reference = reference_path.as_deref().map(load_pgm).transpose()?;

    let rec = reconstruct(&meas, &model, &cfg, reference.as_ref())?;
    save_pgm(&rec.image, &out_path)?;
    if let Some(t) = trace_path {
        write_trace_csv(&rec.trace, &t)?;
    }
    Ok(rec)
}

pub fn run_evaluate(args: &EvaluateArgs) -> Result<f64> {
    psnr(&load_pgm(&args.a)?, &load_pgm(&args.b)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub image: String,
    pub subrate: f64,
    pub psnr_init: f64,
    pub psnr_final: f64,
    pub seconds: f64,
}

pub fn benchmark_csv(rows: &[BenchmarkRow]) -> String {
    let mut out = String::from("image,subrate,psnr_init,psnr_final,seconds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{:.3}",
            r.image,
            r.subrate,
            format_psnr(r.psnr_init),
            format_psnr(r.psnr_final),
            r.seconds
        );
    }
    out
}

/// Measures every image at every subrate (image `i` uses seed `seed + i`)
/// and reconstructs it. Patch size, group size and component count follow
/// the model.
pub fn run_benchmark(args: &BenchmarkArgs) -> Result<Vec<BenchmarkRow>> {
    let files = list_pgm_files(&args.images)?;
    let model = load_model(&args.model)?;
    let base_text = args
        .config
        .as_deref()
        .map(|p| std::fs::read_to_string(p).map_err(|e| Error::io(p, e)))
        .transpose()?;
    let mut rows = Vec::with_capacity(files.len() * args.subrates.len());
    for (i, path) in files.iter().enumerate() {
        let img = load_pgm(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let seed = args.seed.wrapping_add(i as u64);
        for &subrate in &args.subrates {
            let mut cfg = match &base_text {
                Some(text) => RunConfig::parse(text, Some(subrate))?.solver,
                None => config_for_model(subrate, &model),
            };
            cfg.subrate = subrate;
            cfg.seed = seed;
            if let Some(n) = args.max_iter {
                cfg.max_iter = n;
            }
            let mat = generate_measurement_matrix(args.block, subrate, seed)?;
            let meas = sample_image(&img, &mat)?;
            let start = Instant::now();
            let rec = reconstruct(&meas, &model, &cfg, Some(&img))?;
            let seconds = start.elapsed().as_secs_f64();
            let psnr_final = psnr(&rec.image, &img)?;
            let row = BenchmarkRow {
                image: name.clone(),
                subrate,
                psnr_init: rec.initial_psnr.unwrap_or(f64::NAN),
                psnr_final,
                seconds,
            };
            info!(
                "{} @ {}: {} -> {} dB in {:.1}s",
                row.image,
                subrate,
                format_psnr(row.psnr_init),
                format_psnr(row.psnr_final),
                seconds
            );
            rows.push(row);
        }
    }
    write_atomic(&args.out, benchmark_csv(&rows).as_bytes())?;
    Ok(rows)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => {
            let model = run_train(&a)?;
            println!(
                "wrote {} ({} components, {}x{} patches)",
                a.out.display(),
                model.num_components(),
                model.patch_size(),
                model.patch_size()
            );
        }
        Command::Sample(a) => {
            let meas = run_sample(&a)?;
            println!(
                "wrote {} ({} blocks x {} measurements)",
                a.out.display(),
                meas.num_blocks(),
                meas.matrix().rows()
            );
        }
        Command::Reconstruct(a) => {
            let rec = run_reconstruct(&a)?;
            let iters = rec.trace.last().map(|r| r.iter).unwrap_or(0);
            match rec.trace.last().and_then(|r| r.psnr) {
                Some(p) => println!("{iters} iterations, psnr {}", format_psnr(p)),
                None => println!("{iters} iterations"),
            }
        }
        Command::Evaluate(a) => println!("{}", format_psnr(run_evaluate(&a)?)),
        Command::Benchmark(a) => {
            let rows = run_benchmark(&a)?;
            println!("wrote {} ({} rows)", a.out.display(), rows.len());
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
/// Returns the process exit code: 0 on success, 1 on runtime errors and 2
/// on usage errors.
pub fn main_with_args<I>(args: I) -> i32
where
    I: IntoIterator,
    I::Item: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Loads every PGM in a directory, in file-name order.
pub fn load_image_dir(dir: &Path) -> Result<Vec<(String, Image)>> {
    list_pgm_files(dir)?
        .into_iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, load_pgm(&p)?))
        })
        .collect()
}
