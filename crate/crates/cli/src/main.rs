use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use deepgcc::dataio::{
    read_ground_truth, read_results, read_wav, results_to_csv, write_atomic, EngineKind, ExperimentConfig,
    Interpolation, Manifest,
};
use deepgcc::eval::{Comparison, SequenceResult};
use deepgcc::net::Checkpoint;
use deepgcc::pipeline;
use deepgcc::Error;

/// Acoustic source localization with GCC-PHAT and learned delay likelihoods.
///
/// Values given as flags override the configuration file.
#[derive(Debug, Parser)]
#[command(name = "deepgcc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a labelled corpus from the [simulation] section.
    Simulate(SimulateArgs),
    /// Write the GCC-PHAT lag vectors of a recording as CSV.
    Gcc(GccArgs),
    /// Train a network on the train/val splits of a manifest.
    Train(TrainArgs),
    /// Estimate one position per frame of a recording.
    Localize(LocalizeArgs),
    /// Compare two result files frame by frame.
    Eval(EvalArgs),
    /// Print the layout and parameter count of a checkpoint.
    InspectModel(InspectArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Experiment configuration (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (default: paths.out_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GccArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "WAV")]
    audio: PathBuf,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Corpus manifest (default: paths.manifest).
    #[arg(long, value_name = "PATH")]
    manifest: Option<PathBuf>,
    /// Where to write the trained checkpoint (default: paths.checkpoint).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "N")]
    max_epochs: Option<usize>,
    /// Directory for the loss history (default: next to the checkpoint).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct LocalizeArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, value_name = "WAV")]
    audio: PathBuf,
    #[arg(long, value_name = "CSV")]
    ground_truth: PathBuf,
    #[arg(long, value_name = "ENGINE")]
    engine: Option<EngineKind>,
    /// Required with the deepgcc engine (default: paths.checkpoint).
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Grid spacing in meters.
    #[arg(long, value_name = "METERS")]
    grid_res: Option<f64>,
    /// Also write every power map under OUT/maps.
    #[arg(long)]
    dump_apm: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Results of the reference engine.
    #[arg(long, value_name = "CSV")]
    baseline: PathBuf,
    /// Results of the engine under test.
    #[arg(long, value_name = "CSV")]
    method: PathBuf,
    #[arg(long, default_value = "sequence")]
    name: String,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long, value_name = "PATH")]
    checkpoint: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Numeric(_) => 4,
        _ => 2,
    }
}

fn out_dir(flag: Option<PathBuf>, cfg: Option<&ExperimentConfig>) -> Result<PathBuf, Error> {
    flag.or_else(|| cfg.and_then(|c| c.paths.out_dir.clone()))
        .ok_or_else(|| Error::Config("no output directory (use --out or paths.out_dir)".into()))
}

fn simulate(a: SimulateArgs) -> Result<(), Error> {
    let cfg = ExperimentConfig::load(&a.config.config)?;
    let out = out_dir(a.out, Some(&cfg))?;
    let manifest = pipeline::simulate_to_dir(&cfg, &out, a.seed)?;
    log::info!("wrote {} sequences to {}", manifest.sequences.len(), out.display());
    Ok(())
}

fn gcc(a: GccArgs) -> Result<(), Error> {
    let cfg = ExperimentConfig::load(&a.config.config)?;
    let out = out_dir(a.out, Some(&cfg))?;
    pipeline::ensure_writable_dir(&out)?;
    let audio = read_wav(&a.audio)?;
    let frames = pipeline::gcc_frames(&cfg, &audio)?;
    let half = (cfg.lag_count / 2) as isize;
    let mut text = String::from("frame_index,mic_k,mic_l,peak_lag");
    for lag in -half..half {
        text.push_str(&format!(",lag_{lag}"));
    }
    text.push('\n');
    for f in &frames {
        text.push_str(&format!("{},{},{},{}", f.frame_index, f.pair.0, f.pair.1, f.peak_lag()));
        for v in &f.lags {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    write_atomic(&out.join("gcc.csv"), text.as_bytes())
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&a.config.config)?;
    if let Some(n) = a.max_epochs {
        cfg.training.max_epochs = n;
    }
    cfg.validate()?;
    let manifest_path = a
        .manifest
        .or_else(|| cfg.paths.manifest.clone())
        .ok_or_else(|| Error::Config("no manifest (use --manifest or paths.manifest)".into()))?;
    let ck_path = a
        .checkpoint
        .or_else(|| cfg.paths.checkpoint.clone())
        .ok_or_else(|| Error::Config("no checkpoint path (use --checkpoint or paths.checkpoint)".into()))?;
    let ck_dir = ck_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let hist_dir = a.out.unwrap_or_else(|| ck_dir.to_path_buf());
    let manifest = Manifest::load(&manifest_path)?;
    pipeline::ensure_writable_dir(ck_dir)?;
    pipeline::ensure_writable_dir(&hist_dir)?;

    let (checkpoint, report) = pipeline::train_from_manifest(&cfg, &manifest, a.seed)?;
    checkpoint.save(&ck_path)?;
    pipeline::save_text(&hist_dir.join("history.csv"), &pipeline::history_csv(&report))?;
    log::info!(
        "best epoch {} (val {:.6}) of {}",
        report.best_epoch,
        report.best_val_loss,
        report.history.len()
    );
    Ok(())
}

fn localize(a: LocalizeArgs) -> Result<(), Error> {
    let mut cfg = ExperimentConfig::load(&a.config.config)?;
    if let Some(r) = a.grid_res {
        cfg.grid.resolution = r;
    }
    if let Some(e) = a.engine {
        cfg.engine = e;
    }
    cfg.validate()?;
    let out = out_dir(a.out, Some(&cfg))?;
    let checkpoint = match cfg.engine {
        EngineKind::GccPhat => None,
        EngineKind::DeepGcc => {
            let path = a
                .checkpoint
                .or_else(|| cfg.paths.checkpoint.clone())
                .ok_or_else(|| Error::Config("engine deepgcc needs --checkpoint".into()))?;
            Some(Checkpoint::load(&path)?)
        }
    };
    let engine = pipeline::resolve_engine(cfg.engine, checkpoint.as_ref())?;
    let audio = read_wav(&a.audio)?;
    let track = read_ground_truth(&a.ground_truth, Interpolation::Linear)?;
    pipeline::ensure_writable_dir(&out)?;
    log::debug!("seed {} (localization is deterministic)", a.seed);

    let rows = if a.dump_apm {
        let maps = out.join("maps");
        let dump = pipeline::map_dumper(&maps)?;
        pipeline::localize_recording(&cfg, &audio, &track, engine, dump)?
    } else {
        pipeline::localize_recording(&cfg, &audio, &track, engine, |_, _| Ok(()))?
    };
    write_atomic(&out.join("results.csv"), &results_to_csv(&rows)?)?;
    let mean = rows.iter().map(|r| r.error_m).sum::<f64>() / rows.len().max(1) as f64;
    log::info!("{} frames, mean error {mean:.3} m", rows.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let base = SequenceResult::from_results(&a.name, EngineKind::GccPhat, &read_results(&a.baseline)?)?;
    let method = SequenceResult::from_results(&a.name, EngineKind::DeepGcc, &read_results(&a.method)?)?;
    let table = Comparison::build(&[(base, method)])?;
    if let Some(out) = a.out {
        pipeline::ensure_writable_dir(&out)?;
        pipeline::save_text(&out.join("summary.txt"), &table.to_text())?;
        pipeline::save_text(&out.join("summary.csv"), &table.to_csv())?;
    }
    print!("{}", table.to_text());
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let p = ck.net.param_count();
    println!("input length {}", ck.net.input_len());
    for (i, (len, ch)) in ck.net.shape_chain().iter().enumerate() {
        let label = if i == 0 {
            "input".to_string()
        } else {
            format!("block {i}")
        };
        println!("{label:<8} {len:>5} x {ch}");
    }
    println!("conv parameters      {}", p.conv);
    println!("batchnorm parameters {}", p.batchnorm);
    println!("trainable            {}", p.trainable);
    println!("total                {}", p.total);
    match &ck.optimizer {
        Some(o) => println!("optimizer: adam, step {}, lr {}", o.step, o.lr),
        None => println!("optimizer: none"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Gcc(a) => gcc(a),
        Command::Train(a) => train(a),
        Command::Localize(a) => localize(a),
        Command::Eval(a) => eval(a),
        Command::InspectModel(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
