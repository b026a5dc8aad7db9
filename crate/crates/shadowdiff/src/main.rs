//! Thin command-line front end over the staged pipeline.

use clap::{Parser, Subcommand};
use shadowdiff::config::RunConfig;
use shadowdiff::error::{Error, Result};
use shadowdiff::imageio::{load_png, save_png};
use shadowdiff::metrics::evaluate_dir;
use shadowdiff::pipeline::{
    self, model_ckpt_path, SampleOpts, TrainedModel, Variant,
};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "shadowdiff", about = "Residual-diffusion shadow removal")]
struct Cli {
    /// Path to a key=value config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic paired dataset.
    GenData {
        /// Override the number of training examples.
        #[arg(long)]
        n: Option<usize>,
        /// Override the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the autoencoder on clean and shadowed images.
    PretrainAe,
    /// Pretrain the base noise predictor on clean latents.
    PretrainBase,
    /// Train the control branch (and, in latent mode, the detail decoder).
    Train {
        /// Which variant to train: full, ddim, or no_ema.
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Restore one shadow image or every image in a directory.
    Sample {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// A PNG file or a directory of PNGs.
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Compare predictions against ground truth with region decomposition.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        masks: PathBuf,
        /// Where to write the CSV/JSON reports (defaults to out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the variants and emit the comparison table.
    Ablate,
}

fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "full" => Ok(Variant::Full),
        "ddim" => Ok(Variant::DdimMode),
        "no_ema" => Ok(Variant::NoEma),
        other => Err(Error::Config(format!(
            "unknown variant {other:?} (expected full, ddim, or no_ema)"
        ))),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn stdout_log(line: &str) {
    println!("{line}");
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.config)?;
    match cli.cmd {
        Cmd::GenData { n, seed, out } => {
            if let Some(n) = n {
                cfg.n_train = n;
            }
            if let Some(seed) = seed {
                cfg.data_seed = seed;
            }
            if let Some(out) = out {
                cfg.data_dir = out.to_string_lossy().into_owned();
            }
            let outcome = pipeline::run_gen_data(&cfg)?;
            println!(
                "wrote {} examples to {}",
                outcome.manifest.entries.len(),
                outcome.dir.display()
            );
        }
        Cmd::PretrainAe => {
            let outcome = pipeline::run_pretrain_ae(&cfg, stdout_log)?;
            println!(
                "autoencoder ready: latent_scale={:.4} val_psnr={:.2} dB",
                outcome.latent_scale, outcome.val_psnr
            );
        }
        Cmd::PretrainBase => {
            let outcome = pipeline::run_pretrain_base(&cfg, stdout_log)?;
            println!(
                "base ready: held-out loss {:.4} -> {:.4}",
                outcome.holdout_before, outcome.holdout_after
            );
        }
        Cmd::Train { variant } => {
            let variant = parse_variant(&variant)?;
            let outcome = pipeline::run_train(&cfg, variant, stdout_log)?;
            println!(
                "trained {} ({} steps, final loss {:.4}) -> {}",
                variant.name(),
                outcome.history_len,
                outcome.final_loss,
                model_ckpt_path(&cfg, variant).display()
            );
        }
        Cmd::Sample {
            checkpoint,
            input,
            out,
            steps,
            seed,
        } => {
            let ckpt = checkpoint.unwrap_or_else(|| model_ckpt_path(&cfg, Variant::Full));
            let model = TrainedModel::load(&cfg, &ckpt)?;
            let mut opts = SampleOpts::from_config(&cfg);
            if let Some(s) = steps {
                opts.steps = s;
            }
            if let Some(s) = seed {
                opts.seed = s;
            }
            let out_dir = out.unwrap_or_else(|| Path::new(&cfg.out_dir).join("samples"));
            std::fs::create_dir_all(&out_dir)?;
            let inputs: Vec<PathBuf> = if input.is_dir() {
                let mut v: Vec<PathBuf> = std::fs::read_dir(&input)?
                    .filter_map(|e| e.ok())
                    .map(|e| e.path())
                    .filter(|p| p.extension().is_some_and(|e| e == "png"))
                    .collect();
                v.sort();
                v
            } else {
                vec![input]
            };
            if inputs.is_empty() {
                return Err(Error::Data("no PNG inputs found".into()));
            }
            for p in inputs {
                let shadow = load_png(&p)?;
                let restored = model.restore(&shadow, None, &opts)?;
                let name = p.file_name().expect("input file name");
                let dest = out_dir.join(name);
                save_png(&dest, &restored)?;
                println!("{} -> {}", p.display(), dest.display());
            }
        }
        Cmd::Eval {
            pred,
            gt,
            masks,
            out,
        } => {
            let (rows, report) = evaluate_dir(&pred, &gt, &masks)?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
            pipeline::write_reports(&out_dir, "eval", &rows, &report)?;
            println!(
                "{} images: psnr={:.2} ssim={:.4} (reports in {})",
                report.n_images,
                report.psnr,
                report.ssim,
                out_dir.display()
            );
        }
        Cmd::Ablate => {
            let rows = pipeline::run_ablate(&cfg, stdout_log)?;
            print!("{}", pipeline::ablation_csv(&rows));
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
