//! progtx: train, calibrate, simulate and report on progressive image
//! transmission over a simulated fading channel.

mod config;
mod offline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};

use config::{ArtifactPaths, LabConfig};
use progtx_core::entropy::ScaleTable;
use progtx_core::imageio::{load_ppm, Corpus, ImageBuffer, Split};
use progtx_core::masking::{analyze, pool_channels, ImportanceRanking};
use progtx_core::metrics;
use progtx_core::observer;
use progtx_core::rvq::{
    cluster_codebook, fit_projector, read_codebook_file, train_kmeans, train_residual_stack,
    write_codebook_file, CodebookKind, RvqCodec,
};
use progtx_core::simulator::{self, Artifacts};
use progtx_core::synth;

#[derive(Parser)]
#[command(name = "progtx", version, about = "Progressive image transmission lab")]
struct Cli {
    /// Data root for relative paths; defaults to $PROGTX_DATA, then the
    /// config file's directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Worker threads; defaults to the number of cores. Outputs do not
    /// depend on this.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Overrides every seed in the config (training and simulation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic corpus plus manifest.
    SynthCorpus(SynthArgs),
    /// Train the projector, large codebook, bpi family and residual stack.
    TrainCodebooks(ConfigArg),
    /// Rank channels by masking degradation; writes ranking and scale table.
    RankChannels(ConfigArg),
    /// Run the Monte-Carlo transmission experiment.
    Simulate(SimulateArgs),
    /// Offline single-image encode, for debugging codecs.
    Encode(EncodeArgs),
    /// Offline single-image decode.
    Decode(DecodeArgs),
    /// PSNR/SSIM between two images.
    Metrics(MetricsArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment JSON config.
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for images and corpus.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    calibration: usize,
    #[arg(long, default_value_t = 4)]
    evaluation: usize,
    #[arg(long, default_value_t = 256)]
    width: usize,
    #[arg(long, default_value_t = 256)]
    height: usize,
    /// Evaluation image width; defaults to --width.
    #[arg(long)]
    eval_width: Option<usize>,
    /// Evaluation image height; defaults to --height.
    #[arg(long)]
    eval_height: Option<usize>,
    #[arg(long, default_value_t = 11)]
    corpus_seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override the SNR grid, comma separated dB values, e.g. "-10,-5,0,5".
    #[arg(long, allow_hyphen_values = true)]
    snr_grid: Option<String>,
    #[arg(long)]
    realizations: Option<usize>,
    /// Also export the snapshot window's fading trace as CSV.
    #[arg(long, default_value_t = false)]
    trace_csv: bool,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Codec: "masking" or "rvq".
    #[arg(long)]
    codec: String,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Channels to keep (masking codec).
    #[arg(long)]
    keep: Option<usize>,
    /// Residual stages to emit (rvq codec).
    #[arg(long)]
    stages: Option<usize>,
}

#[derive(Args)]
struct DecodeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let overrides = SeedAndData {
        seed: cli.seed,
        data: cli.data.clone(),
    };
    match &cli.command {
        Command::SynthCorpus(args) => cmd_synth_corpus(args),
        Command::TrainCodebooks(args) => {
            let env = Env::load(&args.config, &overrides)?;
            cmd_train_codebooks(&env)
        }
        Command::RankChannels(args) => {
            let env = Env::load(&args.config, &overrides)?;
            cmd_rank_channels(&env)
        }
        Command::Simulate(args) => {
            let mut env = Env::load(&args.config, &overrides)?;
            if let Some(grid) = &args.snr_grid {
                env.config.experiment.snr_grid_db = parse_grid(grid)?;
            }
            if let Some(n) = args.realizations {
                env.config.experiment.n_realizations = n;
            }
            cmd_simulate(&env, args.trace_csv)
        }
        Command::Encode(args) => {
            let env = Env::load(&args.config, &overrides)?;
            offline::cmd_encode(&env, &args.codec, &args.image, &args.out, args.keep, args.stages)
        }
        Command::Decode(args) => {
            let env = Env::load(&args.config, &overrides)?;
            offline::cmd_decode(&env, &args.input, &args.out)
        }
        Command::Metrics(args) => cmd_metrics(args),
    }
}

struct SeedAndData {
    seed: Option<u64>,
    data: Option<PathBuf>,
}

/// Loaded config with resolved paths and seed overrides applied.
pub struct Env {
    pub config: LabConfig,
    pub data_root: PathBuf,
}

impl Env {
    fn load(config_path: &Path, overrides: &SeedAndData) -> Result<Env> {
        let mut config = LabConfig::load(config_path)?;
        if let Some(seed) = overrides.seed {
            config.train_seed = seed;
            config.experiment.base_seed = seed;
        }
        let data_root = overrides
            .data
            .clone()
            .or_else(|| std::env::var_os("PROGTX_DATA").map(PathBuf::from))
            .or_else(|| config_path.parent().map(Path::to_path_buf))
            .unwrap_or_else(|| PathBuf::from("."));
        Ok(Env { config, data_root })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.data_root.join(p)
        }
    }

    pub fn artifact_paths(&self) -> ArtifactPaths {
        ArtifactPaths::new(&self.resolve(&self.config.artifacts_dir))
    }

    pub fn corpus(&self) -> Result<Corpus> {
        let manifest = self.resolve(&self.config.corpus_manifest);
        Corpus::load_manifest(&manifest)
            .with_context(|| format!("cannot load corpus manifest {}", manifest.display()))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<(String, ImageBuffer)>> {
        let corpus = self.corpus()?;
        let mut out = Vec::new();
        for entry in corpus.split(split) {
            let img = load_ppm(&entry.path)
                .with_context(|| format!("cannot load image {}", entry.path.display()))?;
            out.push((entry.name.clone(), img));
        }
        if out.is_empty() {
            return Err(anyhow!("corpus has no {split} images"));
        }
        Ok(out)
    }

    pub fn load_artifacts(&self) -> Result<Artifacts> {
        let paths = self.artifact_paths();
        let missing = |p: &Path| anyhow!("missing trained artifact {}", p.display());
        let ranking =
            ImportanceRanking::load_json(&paths.ranking).map_err(|_| missing(&paths.ranking))?;
        let scales_text =
            std::fs::read_to_string(&paths.scales).map_err(|_| missing(&paths.scales))?;
        let scales: ScaleTable = serde_json::from_str(&scales_text)
            .with_context(|| format!("scale table {} is malformed", paths.scales.display()))?;
        let projector = progtx_core::rvq::Projector::load_json(&paths.projector)
            .map_err(|_| missing(&paths.projector))?;
        let (kind, stages) =
            read_codebook_file(&paths.stack).map_err(|_| missing(&paths.stack))?;
        if kind != CodebookKind::Stack {
            return Err(anyhow!("{} is not a residual stack", paths.stack.display()));
        }
        Ok(Artifacts {
            block: self.config.block,
            ranking,
            scales,
            rvq: RvqCodec {
                patch: self.config.patch,
                projector: Some(projector),
                stack: progtx_core::rvq::ResidualStack {
                    training_mse: vec![f64::NAN; stages.len()],
                    stages,
                },
            },
        })
    }
}

fn parse_grid(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| anyhow!("bad SNR value {s:?} in --snr-grid"))
        })
        .collect()
}

fn cmd_synth_corpus(args: &SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("cannot create {}", args.out.display()))?;
    let corpus = synth::generate_corpus_with_eval_size(
        &args.out,
        args.corpus_seed,
        args.calibration,
        args.evaluation,
        (args.width, args.height),
        (
            args.eval_width.unwrap_or(args.width),
            args.eval_height.unwrap_or(args.height),
        ),
    )?;
    println!(
        "wrote {} images and corpus.json to {}",
        corpus.entries().len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train_codebooks(env: &Env) -> Result<()> {
    let cfg = &env.config;
    let images = env.load_split(Split::Calibration)?;
    let corpus_images: Vec<ImageBuffer> = images.iter().map(|(_, i)| i.clone()).collect();
    let paths = env.artifact_paths();
    std::fs::create_dir_all(&paths.family_dir)?;

    let raw = RvqCodec::embed_corpus(&corpus_images, cfg.patch, None);
    let projector = fit_projector(&raw, cfg.embed_dim)?;
    let embedded = RvqCodec::embed_corpus(&corpus_images, cfg.patch, Some(&projector));

    let large = train_kmeans(
        &embedded,
        cfg.large_codebook_size,
        cfg.kmeans_max_iters,
        cfg.train_seed,
    )
    .context("large codebook training failed (corpus too small for the configured size?)")?;

    projector.save_json(&paths.projector)?;
    write_codebook_file(&paths.large_codebook, CodebookKind::Single, std::slice::from_ref(&large))?;
    for bpi in cfg.family_bpi_min..=cfg.family_bpi_max {
        let book = cluster_codebook(&large, bpi, cfg.train_seed.wrapping_add(bpi as u64))?;
        write_codebook_file(&paths.family_file(bpi), CodebookKind::Single, &[book])?;
    }
    let stack = train_residual_stack(
        &embedded,
        cfg.stack_stages,
        cfg.stack_bpi,
        cfg.train_seed.wrapping_add(0x57AC),
    )?;
    write_codebook_file(&paths.stack, CodebookKind::Stack, &stack.stages)?;
    println!(
        "trained projector, large codebook ({} entries), family bpi {}..={}, stack M={} into {}",
        cfg.large_codebook_size,
        cfg.family_bpi_min,
        cfg.family_bpi_max,
        cfg.stack_stages,
        paths.family_dir.display()
    );
    Ok(())
}

fn cmd_rank_channels(env: &Env) -> Result<()> {
    let cfg = &env.config;
    let images = env.load_split(Split::Calibration)?;
    let corpus_images: Vec<ImageBuffer> = images.iter().map(|(_, i)| i.clone()).collect();
    let paths = env.artifact_paths();
    std::fs::create_dir_all(&paths.family_dir)?;

    let ranking = observer::rank_channels(cfg.block, &corpus_images)?;
    ranking.save_json(&paths.ranking)?;

    let latents = corpus_images
        .iter()
        .map(|i| analyze(i, cfg.block))
        .collect::<Result<Vec<_>, _>>()?;
    let scales = ScaleTable::estimate(&pool_channels(&latents), cfg.quality)?;
    std::fs::write(&paths.scales, serde_json::to_string(&scales)?)?;
    println!(
        "wrote {} and {}",
        paths.ranking.display(),
        paths.scales.display()
    );
    Ok(())
}

fn cmd_simulate(env: &Env, trace_csv: bool) -> Result<()> {
    let images = env.load_split(Split::Evaluation)?;
    let artifacts = env.load_artifacts()?;
    let out_dir = env.resolve(&env.config.output_dir);
    std::fs::create_dir_all(&out_dir)?;

    let output = simulator::run_experiment(&env.config.experiment, &images, &artifacts)?;
    std::fs::write(
        out_dir.join("records.jsonl"),
        simulator::records_to_jsonl(&output.records),
    )?;
    std::fs::write(
        out_dir.join("aggregates.csv"),
        simulator::aggregates_to_csv(&output.aggregates),
    )?;
    std::fs::write(
        out_dir.join("aggregates_full_delivery.csv"),
        simulator::aggregates_to_csv(&output.aggregates_full),
    )?;
    std::fs::write(
        out_dir.join("timings.csv"),
        simulator::timings_to_csv(&output.timings),
    )?;

    let snap = &env.config.snapshot;
    let series = simulator::snapshot_trace(
        &env.config.experiment,
        &images,
        &artifacts,
        snap.snr_index.min(env.config.experiment.snr_grid_db.len() - 1),
        snap.realization,
        snap.window_ms,
    )?;
    std::fs::write(
        out_dir.join("snapshot.csv"),
        simulator::snapshot_to_csv(&series),
    )?;
    if trace_csv {
        let exp = &env.config.experiment;
        let snr_index = snap.snr_index.min(exp.snr_grid_db.len() - 1);
        let fading = progtx_core::channel::FadingConfig {
            doppler_hz: exp.fading.doppler_hz,
            slot_s: exp.fading.slot_s,
            bandwidth_hz: exp.fading.bandwidth_hz,
            avg_snr_db: exp.snr_grid_db[snr_index],
            num_sinusoids: exp.fading.num_sinusoids,
            seed: simulator::derive_seed(exp.base_seed, snr_index, snap.realization),
        };
        let slots = (snap.window_ms / (exp.fading.slot_s * 1e3)).round() as usize;
        let trace = progtx_core::channel::generate_fading(&fading, slots.max(1));
        let budgets = progtx_core::channel::slot_budgets(&trace, &fading, exp.rate_model);
        progtx_core::channel::write_trace_csv(&out_dir.join("trace.csv"), &trace, &budgets)?;
    }
    println!(
        "wrote records.jsonl, aggregates.csv, aggregates_full_delivery.csv, timings.csv, snapshot.csv to {}",
        out_dir.display()
    );
    Ok(())
}

fn cmd_metrics(args: &MetricsArgs) -> Result<()> {
    let reference = load_ppm(&args.reference)?;
    let test = load_ppm(&args.test)?;
    let report = metrics::quality_report(&reference, &test)?;
    println!("mse,psnr_db,ssim");
    println!("{:.9},{},{:.9}", report.mse, fmt_psnr(report.psnr_db), report.ssim);
    Ok(())
}

fn fmt_psnr(p: f64) -> String {
    if p.is_infinite() {
        "inf".to_string()
    } else {
        format!("{p:.6}")
    }
}
