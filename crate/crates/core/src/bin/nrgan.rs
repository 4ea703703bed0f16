use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nrgan::checkpoint::Checkpoint;
use nrgan::data::load_image;
use nrgan::denoise::Denoiser;
use nrgan::experiment::{build_data, emit_grid, evaluate_run, run_experiment, sample_bundle, save_images, ExperimentConfig};
use nrgan::generators::GeneratorBundle;
use nrgan::image::ValueRange;
use nrgan::{Error, Result};

/// Train and evaluate noise robust GANs and denoisers.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config sources shared by the experiment commands. Later sources win:
/// file, then NRGAN_OUT_DIR / NRGAN_SEED, then `--set`.
#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set train.iterations=500`.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.set)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum GridKind {
    Clean,
    Observed,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the dataset and its manifest under out_dir.
    BuildData(ConfigArgs),
    /// Run a full experiment (GAN or denoiser, per `task`).
    Train(ConfigArgs),
    /// Evaluate a checkpoint against the config's clean test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Defaults to out_dir/ckpt/final.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to out_dir/eval_report.json.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Denoise every PNG of a directory with a trained denoiser.
    Denoise {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Write a grid of EMA samples from a generator checkpoint.
    Grid {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 4)]
        rows: usize,
        #[arg(long, default_value_t = 4)]
        cols: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "clean")]
        kind: GridKind,
    },
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildData(args) => {
            let cfg = args.load()?;
            let d = build_data(&cfg)?;
            println!("{} train ({} corrupted), {} test -> {}", d.train.len(), d.manifest.corrupted, d.test.len(), cfg.out_dir.display());
        }
        Command::Train(args) => {
            let cfg = args.load()?;
            let s = run_experiment(&cfg)?;
            println!("{} iterations -> {}", s.iterations, s.out_dir.display());
            println!("{}", serde_json::to_string_pretty(&s.report)?);
        }
        Command::Eval { config, checkpoint, output } => {
            let cfg = config.load()?;
            let ck = checkpoint.unwrap_or_else(|| cfg.out_dir.join("ckpt").join("final.ckpt"));
            let report = evaluate_run(&ck, &cfg)?;
            let text = serde_json::to_string_pretty(&report)? + "\n";
            let out = output.unwrap_or_else(|| cfg.out_dir.join("eval_report.json"));
            if let Some(p) = out.parent() {
                fs::create_dir_all(p)?;
            }
            fs::write(&out, &text)?;
            print!("{text}");
        }
        Command::Denoise { checkpoint, input, output } => denoise_dir(&checkpoint, &input, &output)?,
        Command::Grid { checkpoint, output, rows, cols, seed, kind } => {
            let bundle = GeneratorBundle::from_checkpoint(&Checkpoint::load(&checkpoint)?, None)?;
            let s = sample_bundle(&bundle, rows * cols, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let images = match kind {
                GridKind::Clean => s.clean,
                GridKind::Observed => s
                    .observed
                    .ok_or_else(|| Error::Config(format!("variant {} has no observation model", bundle.variant())))?
                    .clipped(),
            };
            emit_grid(&images, rows, cols, &output)?;
        }
    }
    Ok(())
}

fn denoise_dir(checkpoint: &Path, input: &Path, output: &Path) -> Result<()> {
    let denoiser = Denoiser::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let channels = denoiser.net.arch.channels;
    let mut files: Vec<PathBuf> = fs::read_dir(input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    for f in &files {
        let y = load_image(f, channels)?.to_range(ValueRange::HalfUnit);
        let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        save_images(&denoiser.denoise(&y)?, output, &[name])?;
    }
    println!("denoised {} images -> {}", files.len(), output.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Diverged { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
