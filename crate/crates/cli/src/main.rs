//! End-to-end command line: generate synthetic editing pairs, run consensus
//! filtering, train the residual-field model, verify gradients, evaluate, and
//! export point maps.
//!
//! Exit codes: 0 success, 2 usage (bad flags, unknown config keys, bad
//! magic on export), 3 I/O or unreadable data, 4 numeric failure during
//! training, 5 verification failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deltafield_core::error::Error;
use deltafield_core::gradcheck::{DEFAULT_STEP, DEFAULT_TOL};
use deltafield_core::model::{
    self, evaluate_pair, gradcheck_params_with_control, load_checkpoint, save_checkpoint,
    ModelConfig, RunSettings,
};
use deltafield_core::pipeline::{run_pipeline, PipelineParams};
use deltafield_core::synth::{self, EditPair};
use deltafield_core::{io, loss::LossReport};

#[derive(Parser)]
#[command(
    name = "deltafield",
    about = "Multi-view point-map editing by residual displacement fields",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of multi-view editing pairs.
    Gen(GenArgs),
    /// Consensus-filter masks and score views over a dataset.
    Pipeline(PipelineArgs),
    /// Train the residual-field model.
    Train(TrainArgs),
    /// Verify analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
    /// Evaluate a checkpoint's geometric accuracy on a dataset.
    Eval(EvalArgs),
    /// Export a point map to ASCII PLY.
    Export(ExportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Master seed (falls back to DF_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 4)]
    pairs: usize,
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Image size as two values: height width.
    #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [32, 32])]
    res: Vec<usize>,
    /// Depth-noise sigma (confidence stays 1.0 at zero).
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PipelineArgs {
    /// Dataset manifest path.
    #[arg(long)]
    data: PathBuf,
    /// IoU gate threshold.
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Consensus vote fraction.
    #[arg(long, default_value_t = 0.5)]
    rho: f64,
    /// Voxel grid resolution along the longest axis.
    #[arg(long, default_value_t = 64)]
    grid: usize,
    #[arg(long, default_value_t = 0.0)]
    min_rf: f64,
    #[arg(long, default_value_t = usize::MAX)]
    max_views: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Key-value settings file (model shape, loss weights, lr).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: usize,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint output path; the loss log goes to `<path>.log`.
    #[arg(long)]
    ckpt_out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Key-value settings file; defaults to the tiny gradient-suite config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
    #[arg(long)]
    seed: Option<u64>,
    /// Harness self-test: corrupt one analytic gradient array (must fail).
    #[arg(long)]
    negative_control: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    /// Input PMAP file.
    #[arg(long = "in")]
    input: PathBuf,
    /// Output PLY file.
    #[arg(long = "out")]
    output: PathBuf,
}

const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NUMERIC: u8 = 4;
const EXIT_VERIFY: u8 = 5;

/// Map a core error onto the exit-code contract. `format_is_usage` treats
/// format violations as usage errors (the export magic guard).
fn code_for(err: &Error, format_is_usage: bool) -> u8 {
    match err {
        Error::Config(_) | Error::Domain(_) | Error::Shape(_) | Error::EmptyMask => EXIT_USAGE,
        Error::Io { .. } => EXIT_IO,
        Error::Format(_) => {
            if format_is_usage {
                EXIT_USAGE
            } else {
                EXIT_IO
            }
        }
        Error::NonFinite(_) | Error::Train(_) => EXIT_NUMERIC,
    }
}

fn fail(err: &Error, format_is_usage: bool) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code_for(err, format_is_usage))
}

fn resolve_seed(flag: Option<u64>) -> u64 {
    flag.or_else(|| {
        std::env::var("DF_SEED")
            .ok()
            .and_then(|v| v.parse::<u64>().ok())
    })
    .unwrap_or(0)
}

fn load_settings(path: &Option<PathBuf>) -> Result<RunSettings, Error> {
    match path {
        Some(p) => {
            let pairs = io::read_kv_file(p)?;
            RunSettings::from_pairs(&pairs)
        }
        None => Ok(RunSettings::default()),
    }
}

/// Manifest entries paired with their loaded samples, preserving ids.
fn load_dataset_with_ids(manifest: &Path) -> Result<Vec<(String, EditPair)>, Error> {
    let entries = io::read_manifest(manifest)?;
    entries
        .iter()
        .map(|e| Ok((e.pair_id.clone(), synth::load_pair(manifest, e)?)))
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_gen(args: &GenArgs) -> Result<(), Error> {
    let seed = resolve_seed(args.seed);
    let (height, width) = (args.res[0], args.res[1]);
    if args.pairs == 0 {
        return Err(Error::Domain("--pairs must be at least 1".into()));
    }
    let mut specs = Vec::with_capacity(args.pairs);
    for i in 0..args.pairs {
        let pair_seed = seed.wrapping_add(i as u64);
        specs.push(synth::random_pair(
            pair_seed,
            args.views,
            height,
            width,
            args.noise_sigma,
        )?);
    }
    let (manifest, entries) = synth::make_dataset(&specs, &args.out)?;
    println!("{}", manifest.display());
    println!("pairs {}", entries.len());
    Ok(())
}

fn cmd_pipeline(args: &PipelineArgs) -> Result<(), Error> {
    let dataset = load_dataset_with_ids(&args.data)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let params = PipelineParams {
        tau: args.tau,
        rho: args.rho,
        grid_resolution: args.grid,
        min_rf: args.min_rf,
        max_views: args.max_views,
    };
    let mut report_text = String::new();
    for (id, pair) in &dataset {
        let report = run_pipeline(&pair.base, &pair.mask, &pair.cams, &params)?;
        let refined_file = args.out.join(format!("{id}_refined.mask"));
        io::write_mask(&refined_file, &report.refined)?;
        for s in &report.scores {
            report_text.push_str(&format!(
                "{id} view={} iou_gate={} valid={} rf={} theta={} selected={}\n",
                s.view,
                s.iou_gate,
                u8::from(s.valid),
                s.rf,
                s.theta,
                u8::from(report.selected.contains(&s.view)),
            ));
        }
        let selected: Vec<String> = report.selected.iter().map(|v| v.to_string()).collect();
        report_text.push_str(&format!("{id} selected {}\n", selected.join(" ")));
    }
    let report_path = args.out.join("pipeline_report.txt");
    write_text(&report_path, &report_text)?;
    println!("{}", report_path.display());
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> Result<(), Error> {
    let seed = resolve_seed(args.seed);
    let settings = load_settings(&args.config)?;
    let dataset = load_dataset_with_ids(&args.data)?;
    if dataset.is_empty() {
        return Err(Error::io(
            &args.data,
            std::io::Error::new(std::io::ErrorKind::InvalidData, "dataset manifest is empty"),
        ));
    }
    let pairs: Vec<EditPair> = dataset.into_iter().map(|(_, p)| p).collect();
    let log_path = log_path_for(&args.ckpt_out);
    let mut log = String::new();
    let mut recent: Vec<(usize, LossReport)> = Vec::new();
    let result = model::train_loop(
        &pairs,
        &settings.model,
        &settings.weights,
        args.steps,
        settings.lr,
        seed,
        |step, report| {
            log.push_str(&format!(
                "{step} {} {} {} {} {} {}\n",
                report.edit, report.pres, report.normal, report.cam, report.delta, report.total
            ));
            recent.push((step, report.clone()));
            if recent.len() > 16 {
                recent.remove(0);
            }
        },
    );
    match result {
        Ok(params) => {
            write_text(&log_path, &log)?;
            save_checkpoint(&args.ckpt_out, &params, &settings.model)?;
            println!("checkpoint {}", args.ckpt_out.display());
            println!("loss_log {}", log_path.display());
            Ok(())
        }
        Err(e) => {
            // Numeric failure: dump the trailing loss reports for diagnosis.
            let dump_path = args.ckpt_out.with_extension("dump");
            let mut dump = String::from("last loss reports before failure:\n");
            for (step, r) in &recent {
                dump.push_str(&format!("step {step}\n{}", r.to_kv()));
            }
            let _ = write_text(&dump_path, &dump);
            eprintln!("diagnostic dump: {}", dump_path.display());
            Err(e)
        }
    }
}

fn log_path_for(ckpt: &Path) -> PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".log");
    ckpt.with_file_name(name)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<u8, Error> {
    let seed = resolve_seed(args.seed);
    let settings = match &args.config {
        Some(_) => load_settings(&args.config)?,
        None => RunSettings {
            model: ModelConfig::tiny(),
            ..RunSettings::default()
        },
    };
    let cfg = settings.model;
    // A seeded random editing pair at the smallest size the patch grid allows.
    let side = 2 * cfg.token_patch;
    let (spec, op) = synth::random_pair(seed, 2, side, side, 0.0)?;
    let pair = synth::apply_edit(&spec, &op)?;
    let mut params = model::ModelParams::init(&cfg, seed.wrapping_add(1));
    let corrupt = args.negative_control.then_some("head.weight");
    let checks = gradcheck_params_with_control(
        &pair,
        &cfg,
        &settings.weights,
        &mut params,
        DEFAULT_STEP,
        corrupt,
    )?;
    let mut failures = Vec::new();
    for c in &checks {
        println!(
            "array {} max_rel_err {:.3e} checked {}",
            c.name, c.max_rel_error, c.checked
        );
        if c.max_rel_error >= args.tol {
            failures.push(c.name.clone());
        }
    }
    if failures.is_empty() {
        println!(
            "gradcheck ok: {} arrays within tol {}",
            checks.len(),
            args.tol
        );
        Ok(0)
    } else {
        eprintln!("gradcheck FAILED for: {}", failures.join(" "));
        Ok(EXIT_VERIFY)
    }
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Error> {
    let (params, cfg) = load_checkpoint(&args.ckpt)?;
    let dataset = load_dataset_with_ids(&args.data)?;
    if dataset.is_empty() {
        return Err(Error::io(
            &args.data,
            std::io::Error::new(std::io::ErrorKind::InvalidData, "dataset manifest is empty"),
        ));
    }
    let mut text = String::new();
    let mut sums = (0.0, 0.0, 0.0);
    for (id, pair) in &dataset {
        let m = evaluate_pair(pair, &params, &cfg)?;
        text.push_str(&format!(
            "pair {id} masked_err {} background_drift {} centroid_dev {}\n",
            m.masked_err, m.background_drift, m.centroid_dev
        ));
        sums.0 += m.masked_err;
        sums.1 += m.background_drift;
        sums.2 += m.centroid_dev;
    }
    let n = dataset.len() as f64;
    text.push_str(&format!(
        "aggregate masked_err {} background_drift {} centroid_dev {}\n",
        sums.0 / n,
        sums.1 / n,
        sums.2 / n
    ));
    write_text(&args.report, &text)?;
    print!("{text}");
    std::io::stdout().flush().ok();
    Ok(())
}

fn cmd_export(args: &ExportArgs) -> Result<(), Error> {
    let map = io::read_pointmap(&args.input)?;
    io::write_ply(&args.output, &map)?;
    println!("{} vertices {}", args.output.display(), map.pixels());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Gen(args) => match cmd_gen(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e, false),
        },
        Command::Pipeline(args) => match cmd_pipeline(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e, false),
        },
        Command::Train(args) => match cmd_train(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e, false),
        },
        Command::Gradcheck(args) => match cmd_gradcheck(args) {
            Ok(0) => ExitCode::SUCCESS,
            Ok(code) => ExitCode::from(code),
            Err(e) => fail(&e, false),
        },
        Command::Eval(args) => match cmd_eval(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e, false),
        },
        Command::Export(args) => match cmd_export(args) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => fail(&e, true),
        },
    }
}
