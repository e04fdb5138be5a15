use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use semedit::checkpoint::{load_checkpoint, save_checkpoint, Manifest};
use semedit::data::{generate_synthetic, load_all, make_batches, SynthConfig};
use semedit::eval::{evaluate, EvalOptions};
use semedit::image::ImageTensor;
use semedit::latent::{EditConfig, RoiId};
use semedit::networks::ModelConfig;
use semedit::pipeline::{edit, predict_roi_mask, structure_edit, style_swap};
use semedit::training::{train_smn_observed, train_smpn_observed, InitWeights, Phase, StepLog, TrainConfig, TrainOutcome};
use semedit_service::{api, Models, CHECKPOINT_ENV};

#[derive(Parser)]
#[command(name = "semedit", version, about = "Region-local face editing with sliced structure latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural face dataset.
    MakeSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the reconstruction autoencoder from scratch or from a checkpoint.
    TrainSmn {
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        #[arg(long, default_value_t = 16)]
        base_channels: usize,
    },
    /// Fine-tune SMN weights for region prediction.
    TrainSmpn {
        #[command(flatten)]
        train: TrainArgs,
        /// SMN checkpoint directory to start from.
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
    },
    /// Write one predicted mask PNG per region.
    Segment {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restyle one region with texture noise.
    Edit {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        roi: RoiId,
        #[arg(long, default_value_t = 0.0)]
        mu: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the region mask here.
        #[arg(long)]
        mask_out: Option<PathBuf>,
    },
    /// Copy one region's appearance from a style image.
    Swap {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        style: PathBuf,
        #[arg(long)]
        roi: RoiId,
        #[arg(long)]
        out: PathBuf,
    },
    /// Perturb the structure channels of one region.
    StructureEdit {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        roi: RoiId,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask IoU, locality and latency over a labelled dataset.
    Eval {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        locality_edits: usize,
        #[arg(long, default_value_t = 1.0)]
        mu: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the HTTP API.
    Serve {
        #[command(flatten)]
        models: ModelArgs,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ModelArgs {
    /// Directory holding `smn/` and `smpn/` checkpoints.
    #[arg(long, env = CHECKPOINT_ENV)]
    checkpoint: PathBuf,
}

impl ModelArgs {
    fn load(&self) -> Result<Models> {
        Models::load(&self.checkpoint).with_context(|| format!("loading models from {}", self.checkpoint.display()))
    }
}

fn read_image(path: &Path, models: &Models) -> Result<ImageTensor> {
    let img = ImageTensor::read_png(path, &models.smn.config.normalization)?;
    let n = models.image_size();
    if img.dims() != (n, n) {
        bail!("{} is {}x{}, model expects {n}x{n}", path.display(), img.height(), img.width());
    }
    Ok(img)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn train(
    args: &TrainArgs,
    phase: Phase,
    run: impl FnOnce(&TrainConfig, &mut dyn FnMut(&StepLog)) -> semedit::Result<TrainOutcome>,
) -> Result<()> {
    let cfg = TrainConfig { batch_size: args.batch_size, learning_rate: args.lr, seed: args.seed, ..TrainConfig::new(phase, args.steps) };
    fs::create_dir_all(&args.out)?;
    let log_path = args.out.join("train_log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let mut io_err = None;
    let outcome = run(&cfg, &mut |entry| {
        if io_err.is_none() {
            if let Err(e) = serde_json::to_writer(&mut log, entry).map_err(anyhow::Error::from).and_then(|_| Ok(log.write_all(b"\n")?)) {
                io_err = Some(e);
            }
        }
        if entry.step % 100 == 99 || entry.step + 1 == cfg.steps {
            tracing::info!(step = entry.step, l_rec = entry.l_rec(), d_loss = entry.d_loss, "{phase}");
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.context(format!("writing {}", log_path.display())));
    }
    log.flush()?;
    let manifest = Manifest::new(outcome.autoencoder.config.clone(), phase, args.steps);
    save_checkpoint(&args.out, &outcome.autoencoder, &outcome.discriminator, &manifest)?;
    tracing::info!(out = %args.out.display(), "checkpoint written");
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::MakeSynthetic { out, count, image_size, seed } => {
            let manifest = generate_synthetic(&SynthConfig::new(count, image_size, seed), &out)?;
            println!("wrote {} images to {}", manifest.count, out.display());
        }
        Command::TrainSmn { train: args, init_checkpoint, image_size, base_channels } => {
            let records = load_all(&args.dataset)?;
            let init = init_checkpoint.map(|p| load_checkpoint(&p)).transpose()?;
            let weights = match &init {
                Some(c) => InitWeights::From(&c.autoencoder),
                None => InitWeights::Fresh(ModelConfig::new(image_size, base_channels)),
            };
            let batches = make_batches(records, args.batch_size, args.seed)?;
            train(&args, Phase::Smn, |cfg, cb| train_smn_observed(batches, cfg, weights, cb))?;
        }
        Command::TrainSmpn { train: args, init_checkpoint } => {
            let Some(init) = init_checkpoint else {
                eprintln!("error: SMPN requires SMN weights; pass --init-checkpoint <smn checkpoint dir>");
                return Ok(ExitCode::from(2));
            };
            let init = load_checkpoint(&init)?;
            let records = load_all(&args.dataset)?;
            let batches = make_batches(records, args.batch_size, args.seed)?;
            train(&args, Phase::Smpn, |cfg, cb| train_smpn_observed(batches, cfg, Some(&init.autoencoder), cb))?;
        }
        Command::Segment { models, image, out } => {
            let models = models.load()?;
            let x = read_image(&image, &models)?;
            fs::create_dir_all(&out)?;
            for roi in RoiId::ALL {
                let mask = predict_roi_mask(&models.smpn, &x, roi, &models.smpn.config.slice_scheme)?;
                write_bytes(&out.join(format!("{}.png", roi.name())), &mask.to_png_bytes())?;
            }
        }
        Command::Edit { models, image, roi, mu, seed, out, mask_out } => {
            let models = models.load()?;
            let x = read_image(&image, &models)?;
            let r = edit(&models.smn, &models.smpn, &x, &EditConfig::new(roi, mu, seed)?, &models.smpn.config.slice_scheme)?;
            write_bytes(&out, &r.edited.to_png_bytes(&models.smn.config.normalization))?;
            if let Some(p) = mask_out {
                write_bytes(&p, &r.mask.to_png_bytes())?;
            }
        }
        Command::Swap { models, image, style, roi, out } => {
            let models = models.load()?;
            let x = read_image(&image, &models)?;
            let s = read_image(&style, &models)?;
            let r = style_swap(&models.smn, &models.smpn, &x, &s, roi, &models.smpn.config.slice_scheme)?;
            write_bytes(&out, &r.edited.to_png_bytes(&models.smn.config.normalization))?;
        }
        Command::StructureEdit { models, image, roi, mu, seed, out } => {
            let models = models.load()?;
            let x = read_image(&image, &models)?;
            let y = structure_edit(&models.smpn, &x, roi, mu, seed, &models.smpn.config.slice_scheme)?;
            write_bytes(&out, &y.to_png_bytes(&models.smn.config.normalization))?;
        }
        Command::Eval { models, dataset, out, locality_edits, mu, seed } => {
            let models = models.load()?;
            let records = load_all(&dataset)?;
            let opts = EvalOptions { locality_edits, mu, seed, ..EvalOptions::default() };
            let report = evaluate(&models.smn, &models.smpn, &records, &opts, &[])?;
            report.write_json(&out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Serve { models, host, port } => {
            let models = models.load()?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind((host.as_str(), port)).await?;
                tracing::info!(addr = %listener.local_addr()?, "listening");
                axum::serve(listener, api::router(models))
                    .with_graceful_shutdown(async {
                        let _ = tokio::signal::ctrl_c().await;
                    })
                    .await?;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
