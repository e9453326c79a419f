use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use rnic_core::bitstream::{self, EntropyRef};
use rnic_core::cells::CellKind;
use rnic_core::codec::{Architecture, Codec, Mode, Profile};
use rnic_core::container::{self, hash_hex, ModelHash};
use rnic_core::data::{self, Patch};
use rnic_core::entropy::{EntropyArchitecture, EntropyModel};
use rnic_core::evaluate::{self, ImageResult};
use rnic_core::image::RgbImage;
use rnic_core::rd::{self, Metric};
use rnic_core::train::{self, EntropyTrainConfig, TrainConfig};
use rnic_core::Error;

#[derive(Parser)]
#[command(name = "rnic", version, about = "Recurrent-network image codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a codec on 32×32 patches
    Train(TrainArgs),
    /// Train an entropy model on the codes of a trained codec
    EntropyTrain(EntropyTrainArgs),
    /// Compress a PNG image
    Compress(CompressArgs),
    /// Decompress a bitstream to PNG
    Decompress(DecompressArgs),
    /// Per-image rate and quality for every iteration
    Eval(EvalArgs),
    /// Rate-distortion CSV aggregated over an image set, plus AUC
    RdCurve(RdCurveArgs),
}

#[derive(Args)]
struct ModelArgs {
    /// Codec model file
    #[arg(long)]
    model: PathBuf,
    /// Entropy model file; codes are packed raw without one
    #[arg(long)]
    entropy_model: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of PNG images or a patch-set file
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "desk")]
    profile: Profile,
    #[arg(long, default_value = "lstm")]
    cell: CellKind,
    #[arg(long, default_value = "additive")]
    mode: Mode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Iterations unrolled per training step
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, conflicts_with = "lr_sweep")]
    learning_rate: Option<f64>,
    /// Comma-separated learning rates; the one with the lowest final loss is kept
    #[arg(long, value_delimiter = ',')]
    lr_sweep: Vec<f64>,
    /// Keep only the N least compressible tiles of every image
    #[arg(long)]
    high_entropy: Option<usize>,
    /// Also write the training patches as a patch-set file
    #[arg(long)]
    save_patches: Option<PathBuf>,
}

#[derive(Args)]
struct EntropyTrainArgs {
    /// Codec whose codes are modelled
    #[arg(long)]
    model: PathBuf,
    /// Directory of PNG images
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "desk")]
    profile: Profile,
    /// Iterations of codes per image
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Side of the code-grid crops trained on
    #[arg(long)]
    crop: Option<usize>,
}

#[derive(Args)]
struct CompressArgs {
    input: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecompressArgs {
    input: PathBuf,
    #[command(flatten)]
    models: ModelArgs,
    /// Decode only the first N iterations
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    models: ModelArgs,
    /// Directory of PNG images
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    /// CSV destination; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RdCurveArgs {
    #[command(flatten)]
    models: ModelArgs,
    /// Directory of PNG images
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    iterations: Option<usize>,
    /// CSV destination; stdout when absent
    #[arg(long)]
    out: Option<PathBuf>,
    /// Identifier written to the model_id column; defaults to the model file stem
    #[arg(long)]
    model_id: Option<String>,
    #[arg(long, default_value_t = 2.0)]
    max_bpp: f64,
}

struct Models {
    codec: Codec<f32>,
    codec_hash: ModelHash,
    entropy: Option<(EntropyModel<f32>, ModelHash)>,
}

impl Models {
    fn load(args: &ModelArgs) -> Result<Self> {
        let (codec, codec_hash) = container::codec_from_bytes::<f32>(&container::read_model(&args.model)?)
            .with_context(|| format!("loading {}", args.model.display()))?;
        let entropy = match &args.entropy_model {
            None => None,
            Some(p) => {
                let (model, hash) = container::entropy_from_bytes::<f32>(&container::read_model(p)?)
                    .with_context(|| format!("loading {}", p.display()))?;
                model.check_binding(&codec_hash)?;
                Some((model, hash))
            }
        };
        Ok(Models {
            codec,
            codec_hash,
            entropy,
        })
    }

    fn entropy(&self) -> Option<EntropyRef<'_>> {
        self.entropy.as_ref().map(|(model, hash)| EntropyRef { model, hash: *hash })
    }

    fn iterations(&self, requested: Option<usize>) -> usize {
        requested.unwrap_or(self.codec.arch().iterations)
    }
}

fn load_images(dir: &Path) -> Result<Vec<(String, RgbImage)>> {
    let images = data::load_png_dir(dir)?;
    if images.is_empty() {
        return Err(Error::Usage(format!("no PNG images under {}", dir.display())).into());
    }
    Ok(images)
}

fn load_patches(args: &TrainArgs) -> Result<Vec<Patch>> {
    if args.data.is_file() {
        let bytes = fs::read(&args.data)?;
        return Ok(data::read_patch_set(&bytes)?);
    }
    let mut patches = Vec::new();
    for (id, img) in load_images(&args.data)? {
        match args.high_entropy {
            Some(n) => patches.extend(data::sample_high_entropy(&img, &id, n)),
            None => patches.extend(data::extract_tiles(&img, &id)),
        }
    }
    if patches.is_empty() {
        return Err(Error::Usage("the images yield no 32×32 patches".into()).into());
    }
    Ok(patches)
}

fn tail_mean(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len() - (losses.len() / 10).max(1)..];
    tail.iter().sum::<f64>() / tail.len() as f64
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let patches = load_patches(&args)?;
    info!("{} training patches", patches.len());
    if let Some(p) = &args.save_patches {
        fs::write(p, data::write_patch_set(&patches))?;
    }
    let arch = Architecture::for_profile(args.profile, args.cell, args.mode);
    let base = match args.profile {
        Profile::Desk => TrainConfig::desk(),
        Profile::Paper => TrainConfig::paper(),
    };
    let cfg = TrainConfig {
        batch_size: args.batch_size.unwrap_or(base.batch_size),
        iterations: args.iterations.unwrap_or(arch.iterations),
        learning_rate: args.learning_rate.unwrap_or(base.learning_rate),
        steps: args.steps.unwrap_or(base.steps),
        seed: args.seed,
        ..base
    };
    let mut codec = Codec::<f32>::new(arch, args.seed)?;

    if !args.lr_sweep.is_empty() {
        let runs = train::sweep_learning_rates(&codec, &patches, &cfg, &args.lr_sweep)?;
        let mut best: Option<(f64, f64, Codec<f32>)> = None;
        for (lr, trained, losses) in runs {
            let final_loss = tail_mean(&losses);
            eprintln!("learning rate {lr}: final loss {final_loss:.5}");
            if best.as_ref().map_or(true, |b| final_loss < b.1) {
                best = Some((lr, final_loss, trained));
            }
        }
        let (lr, _, trained) = best.expect("non-empty sweep");
        let hash = container::write_model(&args.out, &container::codec_to_bytes(&trained))?;
        eprintln!("kept learning rate {lr}; model {}", hash_hex(&hash));
        return Ok(());
    }

    let out = args.out.clone();
    let mut save = |step: usize, c: &Codec<f32>| -> rnic_core::Result<()> {
        container::write_model(&out, &container::codec_to_bytes(c))?;
        info!("checkpoint at step {step} written to {}", out.display());
        Ok(())
    };
    let losses = train::train_codec(&mut codec, &patches, &cfg, Some(&mut save))?;
    let hash = container::write_model(&args.out, &container::codec_to_bytes(&codec))?;
    if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
        eprintln!("loss {first:.5} -> {last:.5} over {} steps", losses.len());
    }
    println!("{}", hash_hex(&hash));
    Ok(())
}

fn cmd_entropy_train(args: EntropyTrainArgs) -> Result<()> {
    let (codec, codec_hash) = container::codec_from_bytes::<f32>(&container::read_model(&args.model)?)?;
    let images: Vec<RgbImage> = load_images(&args.data)?.into_iter().map(|(_, i)| i).collect();
    let k = args.iterations.unwrap_or(codec.arch().iterations);
    let sequences = train::codes_for_images(&codec, &images, k)?;
    let arch = match args.profile {
        Profile::Desk => EntropyArchitecture::desk(),
        Profile::Paper => EntropyArchitecture::paper(),
    };
    let base = EntropyTrainConfig::desk();
    let cfg = EntropyTrainConfig {
        batch_size: args.batch_size.unwrap_or(base.batch_size),
        learning_rate: args.learning_rate.unwrap_or(base.learning_rate),
        steps: args.steps.unwrap_or(base.steps),
        seed: args.seed,
        crop: args.crop.unwrap_or(base.crop),
        ..base
    };
    let (model, history) = train::train_entropy(&sequences, Some(codec_hash), arch, &cfg)?;
    let hash = container::write_model(&args.out, &container::entropy_to_bytes(&model))?;
    if let Some(last) = history.last() {
        eprintln!("final cross-entropy {last:.4} bits/bit");
    }
    println!("{}", hash_hex(&hash));
    Ok(())
}

fn cmd_compress(args: CompressArgs) -> Result<()> {
    let models = Models::load(&args.models)?;
    let image = RgbImage::read_png(&args.input)?;
    let k = models.iterations(args.iterations);
    let bytes = bitstream::compress(&image, &models.codec, &models.codec_hash, k, models.entropy())?;
    fs::write(&args.out, &bytes).with_context(|| format!("writing {}", args.out.display()))?;
    let bpp = 8.0 * (bytes.len() - bitstream::HEADER_LEN) as f64 / (image.width() * image.height()) as f64;
    eprintln!("{} bytes, {bpp:.4} bpp payload", bytes.len());
    Ok(())
}

fn cmd_decompress(args: DecompressArgs) -> Result<()> {
    let models = Models::load(&args.models)?;
    let bytes = fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let image = bitstream::decompress(&bytes, &models.codec, &models.codec_hash, models.entropy(), args.iterations)?;
    image.write_png(&args.out)?;
    Ok(())
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn run_eval(models: &Models, data: &Path, iterations: Option<usize>) -> Result<Vec<ImageResult>> {
    let mut images = load_images(data)?;
    images.sort_by(|a, b| a.0.cmp(&b.0));
    let k = models.iterations(iterations);
    Ok(evaluate::evaluate(&images, &models.codec, &models.codec_hash, models.entropy(), k)?)
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let models = Models::load(&args.models)?;
    let results = run_eval(&models, &args.data, args.iterations)?;
    let mut out = output(args.out.as_deref())?;
    writeln!(out, "image,iteration,bpp_raw,bpp_coded,msssim,psnr")?;
    for r in &results {
        let pixels = (r.width * r.height) as f64;
        for it in &r.iterations {
            let coded = it.coded_bits.map(|b| format!("{}", b as f64 / pixels)).unwrap_or_default();
            writeln!(
                out,
                "\"{}\",{},{},{coded},{},{}",
                r.name.replace('"', "\"\""),
                it.iteration,
                it.raw_bits as f64 / pixels,
                it.msssim,
                it.psnr.min(rnic_core::metrics::PSNR_CAP)
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

fn cmd_rd_curve(args: RdCurveArgs) -> Result<()> {
    if !(args.max_bpp > 0.0 && args.max_bpp.is_finite()) {
        bail!(Error::Usage(format!("--max-bpp must be positive, got {}", args.max_bpp)));
    }
    let models = Models::load(&args.models)?;
    let results = run_eval(&models, &args.data, args.iterations)?;
    let id = args.model_id.clone().unwrap_or_else(|| {
        args.models
            .model
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    });
    let rows = evaluate::rd_rows(&id, &results);
    rd::write_csv(&rows, output(args.out.as_deref())?)?;
    for metric in [Metric::Msssim, Metric::Psnr] {
        let of_metric: Vec<_> = rows.iter().filter(|r| r.metric == metric).collect();
        let raw: Vec<_> = of_metric.iter().map(|r| r.raw_point()).collect();
        match rd::auc(&raw, args.max_bpp) {
            Ok(a) => eprintln!("{} AUC (raw): {a:.4}", metric.name()),
            Err(e) => eprintln!("{} AUC (raw): {e}", metric.name()),
        }
        let coded: Option<Vec<_>> = of_metric.iter().map(|r| r.coded_point()).collect();
        if let Some(mut coded) = coded {
            coded.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
            match rd::auc(&coded, args.max_bpp) {
                Ok(a) => eprintln!("{} AUC (coded): {a:.4}", metric.name()),
                Err(e) => eprintln!("{} AUC (coded): {e}", metric.name()),
            }
        }
    }
    Ok(())
}

/// 2 usage, 3 format, 4 model mismatch, 5 anything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Usage(_) | Error::Image(_) => 2,
                Error::Format(_) | Error::Decode(_) => 3,
                Error::ModelMismatch(_) => 4,
                Error::Io(io) if io.kind() == io::ErrorKind::NotFound => 2,
                _ => 5,
            };
        }
        if let Some(io) = cause.downcast_ref::<io::Error>() {
            if io.kind() == io::ErrorKind::NotFound {
                return 2;
            }
        }
    }
    5
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::EntropyTrain(a) => cmd_entropy_train(a),
        Command::Compress(a) => cmd_compress(a),
        Command::Decompress(a) => cmd_decompress(a),
        Command::Eval(a) => cmd_eval(a),
        Command::RdCurve(a) => cmd_rd_curve(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
