use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};

use villi_core::augment::{self, AugmentationConfig};
use villi_core::counter::{estimate_count, ThresholdMethod, DEFAULT_MIN_AREA};
use villi_core::evaluator::{evaluate, DiceReport, ReportRow};
use villi_core::experiment::{self, ExperimentConfig, Scale};
use villi_core::io;
use villi_core::pairing::MatchingMode;
use villi_core::raster::GrayImage;
use villi_core::rng::{derive_seed, item_seed, seeded};
use villi_core::segmentation::{self, SegmentationConfig, SegmentationModel};
use villi_core::simulator::{sample_macro_count, simulate_mask, CountDistribution};
use villi_core::stitcher::segment_frame;
use villi_core::synthesis::{self, AdversarialLoss, GeneratorModel, SynthesisConfig};

#[derive(Parser)]
#[command(
    name = "villi",
    version,
    about = "Segmentation of stick-like objects by mask simulation and image synthesis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate binary stick masks with stick-list sidecars.
    Simulate(SimulateArgs),
    /// Augment simulated masks (smoothing, noise, per-stick brightness).
    Augment(AugmentArgs),
    /// Estimate object counts of RGB frames from their tip channel.
    Count(CountArgs),
    /// Pair real patches with simulated masks for synthesis training.
    BuildDataset(BuildDatasetArgs),
    /// Train the cycle-consistent synthesis model on a built dataset.
    TrainSynth(TrainSynthArgs),
    /// Turn masks into synthetic images with a mask-to-image generator.
    Synthesize(SynthesizeArgs),
    /// Train the segmentation network on synthetic images and clean masks.
    TrainSeg(TrainSegArgs),
    /// Per-pixel foreground probabilities for image patches.
    Predict(PredictArgs),
    /// Segment 256x256 frames by quadrants.
    SegmentVideo(SegmentVideoArgs),
    /// Dice of predicted masks against dilated centerline annotations.
    Evaluate(EvaluateArgs),
    /// Run one experiment end to end.
    Run(RunArgs),
    /// Run the eight matching/augmentation experiments and write report.csv.
    RunGrid(RunArgs),
    /// Write a synthetic fluorescence dataset with centerline annotations.
    MakePhantom(MakePhantomArgs),
}

#[derive(Clone, Copy, Debug)]
enum CountMode {
    Fixed(usize),
    Macro,
}

fn parse_count_mode(s: &str) -> Result<CountMode> {
    if s == "macro" {
        return Ok(CountMode::Macro);
    }
    match s.strip_prefix("fixed:") {
        Some(n) => Ok(CountMode::Fixed(
            n.parse().with_context(|| format!("bad stick count {n:?}"))?,
        )),
        None => bail!("count mode must be fixed:N or macro, got {s:?}"),
    }
}

/// `smooth,noise,brightness` in any order; `none` or an empty string for
/// plain binary masks.
fn parse_aug_flags(s: &str) -> Result<AugmentationConfig> {
    let mut cfg = AugmentationConfig::default();
    for flag in s.split(',').map(str::trim).filter(|f| !f.is_empty() && *f != "none") {
        match flag {
            "smooth" => cfg.smooth = true,
            "noise" => cfg.noise = true,
            "brightness" | "bright" => cfg.brightness = true,
            other => bail!("unknown augmentation flag {other:?}"),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Args)]
struct SimulateArgs {
    /// `fixed:N` or `macro` (counts uniform in 11..=63).
    #[arg(long, value_parser = parse_count_mode)]
    count_mode: CountMode,
    #[arg(long)]
    n_masks: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AugNoiseArgs {
    #[arg(long, default_value_t = 5)]
    smooth_kernel: usize,
    #[arg(long, default_value_t = 1.0)]
    smooth_sigma: f64,
    #[arg(long, default_value_t = 25.0)]
    noise_sigma: f64,
}

#[derive(Args)]
struct AugmentArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    smooth: bool,
    #[arg(long)]
    noise: bool,
    #[arg(long)]
    brightness: bool,
    #[command(flatten)]
    params: AugNoiseArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// `otsu` or `fixed:T`.
    #[arg(long, default_value = "otsu")]
    method: ThresholdMethod,
    #[arg(long, default_value_t = DEFAULT_MIN_AREA)]
    min_area: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildDatasetArgs {
    /// Grayscale or RGB real patches.
    #[arg(long)]
    reals: PathBuf,
    #[arg(long)]
    mode: MatchingMode,
    /// Output of `count`; required in micro mode.
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Comma-separated subset of smooth,noise,brightness, or `none`.
    #[arg(long, default_value = "none")]
    aug_flags: String,
    #[command(flatten)]
    params: AugNoiseArgs,
    /// Defaults to as many batches as the real patches fill.
    #[arg(long)]
    n_batches: Option<usize>,
    #[arg(long, default_value_t = 1)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSynthArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Recorded with the checkpoints; the dataset already fixes the pairing.
    #[arg(long)]
    mode: Option<MatchingMode>,
    /// Recorded with the checkpoints; the dataset already holds augmented masks.
    #[arg(long)]
    aug_flags: Option<String>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    image_size: usize,
    #[arg(long, default_value_t = 10.0)]
    cycle_weight: f64,
    #[arg(long, default_value = "least-squares")]
    adversarial_loss: AdversarialLoss,
    #[arg(long, default_value_t = 2e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 64)]
    ngf: usize,
    #[arg(long, default_value_t = 6)]
    n_res: usize,
    #[arg(long, default_value_t = 64)]
    ndf: usize,
    #[arg(long, default_value_t = 3)]
    disc_layers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthesizeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSegArgs {
    #[arg(long)]
    fakes: PathBuf,
    /// Clean binary masks with the same file names as the fakes.
    #[arg(long)]
    masks: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    input_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 4)]
    depth: usize,
    #[arg(long, default_value_t = 64)]
    base_channels: usize,
    #[arg(long, default_value_t = 4)]
    batch_size: usize,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SegmentVideoArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    frames: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Files named `<frame_index>_pred.png`.
    #[arg(long)]
    preds: PathBuf,
    /// Files named `<frame_index>.png`.
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
    widths: Vec<u32>,
    #[arg(long, default_value = "eval")]
    experiment_id: String,
    #[arg(long, default_value = "macro")]
    matching: MatchingMode,
    #[arg(long, default_value = "none")]
    aug_flags: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// TOML experiment config; missing keys come from the scale preset.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    scale: Option<Scale>,
    #[arg(long, env = "VILLI_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MakePhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    n_train: usize,
    #[arg(long, default_value_t = 20)]
    n_frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Augment(a) => augment_cmd(a),
        Command::Count(a) => count(a),
        Command::BuildDataset(a) => build_dataset(a),
        Command::TrainSynth(a) => train_synth(a),
        Command::Synthesize(a) => synthesize(a),
        Command::TrainSeg(a) => train_seg(a),
        Command::Predict(a) => predict(a),
        Command::SegmentVideo(a) => segment_video(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Run(a) => run(a),
        Command::RunGrid(a) => run_grid(a),
        Command::MakePhantom(a) => make_phantom(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn simulate(a: SimulateArgs) -> Result<ExitCode> {
    io::create_dir(&a.out)?;
    let base = derive_seed(a.seed, "simulate");
    let dist = CountDistribution::default();
    for i in 0..a.n_masks {
        let mut rng = seeded(item_seed(base, i));
        let n = match a.count_mode {
            CountMode::Fixed(n) => n,
            CountMode::Macro => sample_macro_count(&dist, &mut rng),
        };
        let mask = simulate_mask(n, (a.size, a.size), &mut rng)?;
        io::write_mask_with_sticks(&io::numbered(&a.out, i), &mask)?;
    }
    println!("wrote {} masks to {}", a.n_masks, a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn augmentation(smooth: bool, noise: bool, brightness: bool, p: &AugNoiseArgs) -> Result<AugmentationConfig> {
    let cfg = AugmentationConfig {
        smooth,
        noise,
        brightness,
        smooth_kernel: p.smooth_kernel,
        smooth_sigma: p.smooth_sigma,
        noise_sigma: p.noise_sigma,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn augment_cmd(a: AugmentArgs) -> Result<ExitCode> {
    let cfg = augmentation(a.smooth, a.noise, a.brightness, &a.params)?;
    io::create_dir(&a.out)?;
    let base = derive_seed(a.seed, "augment");
    let files = io::list_pngs(&a.input)?;
    for (i, p) in files.iter().enumerate() {
        let mask = io::read_mask_with_sticks(p)?;
        let img = augment::apply(&mask, &cfg, &mut seeded(item_seed(base, i)))?;
        let dest = a.out.join(file_name(p));
        io::write_gray(&dest, &img)?;
        if let Some(sticks) = mask.sticks() {
            io::write_sticks(&io::sidecar_path(&dest), sticks)?;
        }
    }
    println!("augmented {} masks into {}", files.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn count(a: CountArgs) -> Result<ExitCode> {
    let files = io::list_pngs(&a.input)?;
    let mut rows = Vec::with_capacity(files.len());
    for p in &files {
        let est = estimate_count(&io::read_rgb(p)?, a.method, a.min_area)?;
        rows.push(io::CountRow {
            filename: file_name(p),
            count: est.count,
            threshold_used: est.threshold_used,
            min_area_used: est.min_area_used,
        });
    }
    io::write_csv_rows(&a.out, &rows)?;
    println!("counted {} frames into {}", rows.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn build_dataset(a: BuildDatasetArgs) -> Result<ExitCode> {
    let mut aug = parse_aug_flags(&a.aug_flags)?;
    aug.smooth_kernel = a.params.smooth_kernel;
    aug.smooth_sigma = a.params.smooth_sigma;
    aug.noise_sigma = a.params.noise_sigma;
    let files = io::list_pngs(&a.reals)?;
    ensure!(!files.is_empty(), "no PNG patches in {}", a.reals.display());
    ensure!(a.batch_size >= 1, "batch size must be at least 1");
    let n_items = a.n_batches.map_or(files.len(), |k| k * a.batch_size);
    // patches are reused in file order when more items are requested than exist
    let chosen: Vec<&PathBuf> = (0..n_items).map(|i| &files[i % files.len()]).collect();
    let reals = chosen
        .iter()
        .map(|p| io::read_gray(p))
        .collect::<villi_core::Result<Vec<GrayImage>>>()?;
    let counts = match (a.mode, &a.counts) {
        (MatchingMode::Micro, None) => bail!("micro mode needs --counts"),
        (_, None) => None,
        (_, Some(path)) => {
            let rows: Vec<io::CountRow> = io::read_csv_rows(path)?;
            let by_name: HashMap<String, usize> = rows.into_iter().map(|r| (r.filename, r.count)).collect();
            let c = chosen
                .iter()
                .map(|p| {
                    let name = file_name(p);
                    by_name
                        .get(&name)
                        .copied()
                        .with_context(|| format!("{} has no row for {name}", path.display()))
                })
                .collect::<Result<Vec<usize>>>()?;
            Some(c)
        }
    };
    let batches = experiment::pair_patches(
        &reals,
        a.mode,
        counts.as_deref(),
        &CountDistribution::default(),
        &aug,
        a.batch_size,
        derive_seed(a.seed, "pairing"),
    )?;
    experiment::write_dataset(&a.out, &batches)?;
    println!(
        "wrote {} pairs in {} batches to {}",
        reals.len(),
        batches.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_synth(a: TrainSynthArgs) -> Result<ExitCode> {
    let cfg = SynthesisConfig {
        epochs: a.epochs,
        image_size: a.image_size,
        cycle_weight: a.cycle_weight,
        adversarial_loss: a.adversarial_loss,
        learning_rate: a.learning_rate,
        seed: a.seed,
        ngf: a.ngf,
        n_res: a.n_res,
        ndf: a.ndf,
        disc_layers: a.disc_layers,
    };
    if let Some(flags) = &a.aug_flags {
        parse_aug_flags(flags)?;
    }
    let batches = experiment::read_dataset(&a.dataset)?;
    io::create_dir(&a.out)?;
    let mut meta = toml::Table::new();
    if let Some(m) = a.mode {
        meta.insert("mode".into(), m.to_string().into());
    }
    if let Some(f) = &a.aug_flags {
        meta.insert("aug_flags".into(), f.clone().into());
    }
    meta.insert("dataset".into(), a.dataset.display().to_string().into());
    meta.insert("synthesis".into(), toml::Value::try_from(&cfg)?);
    std::fs::write(a.out.join("train.toml"), toml::to_string_pretty(&meta)?)?;

    let out = a.out.clone();
    let (gan, log) = synthesis::train(&batches, &cfg, |gan, e| {
        eprintln!(
            "epoch {:>3}  g {:.4}  d {:.4}  cycle {:.4}  {:.1}s",
            e.epoch, e.g_loss, e.d_loss, e.cycle_loss, e.wall_seconds
        );
        gan.mask_to_image
            .save(&out.join(format!("epoch_{:03}_mask_to_image.ckpt", e.epoch)))?;
        gan.image_to_mask
            .save(&out.join(format!("epoch_{:03}_image_to_mask.ckpt", e.epoch)))
    })?;
    gan.mask_to_image.save(&a.out.join("mask_to_image.ckpt"))?;
    gan.image_to_mask.save(&a.out.join("image_to_mask.ckpt"))?;
    log.write_csv(&a.out.join("training_log.csv"))?;
    println!("checkpoints in {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn synthesize(a: SynthesizeArgs) -> Result<ExitCode> {
    let gen = GeneratorModel::load(&a.ckpt)?;
    io::create_dir(&a.out)?;
    let files = io::list_pngs(&a.masks)?;
    for p in &files {
        let img = synthesis::synthesize(&gen, &[io::read_gray(p)?])?.remove(0);
        io::write_gray(&a.out.join(file_name(p)), &img)?;
    }
    println!("synthesized {} images into {}", files.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn train_seg(a: TrainSegArgs) -> Result<ExitCode> {
    let cfg = SegmentationConfig {
        epochs: a.epochs,
        input_size: a.input_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
        depth: a.depth,
        base_channels: a.base_channels,
        batch_size: a.batch_size,
        max_steps: a.max_steps,
        ..Default::default()
    };
    let files = io::list_pngs(&a.fakes)?;
    let mut fakes = Vec::with_capacity(files.len());
    let mut masks = Vec::with_capacity(files.len());
    for p in &files {
        let m = a.masks.join(file_name(p));
        ensure!(m.exists(), "no mask {} for {}", m.display(), p.display());
        fakes.push(io::read_gray(p)?);
        masks.push(io::read_mask(&m)?);
    }
    io::create_dir(&a.out)?;
    let out = a.out.clone();
    let (model, log) = segmentation::train(&fakes, &masks, &cfg, |m, e| {
        eprintln!("epoch {:>3}  dice loss {:.4}  {:.1}s", e.epoch, e.loss, e.wall_seconds);
        m.save(&out.join(format!("epoch_{:03}.ckpt", e.epoch)))
    })?;
    model.save(&a.out.join("unet.ckpt"))?;
    log.write_csv(&a.out.join("training_log.csv"))?;
    println!("checkpoints in {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn predict(a: PredictArgs) -> Result<ExitCode> {
    let model = SegmentationModel::load(&a.ckpt)?;
    io::create_dir(&a.out)?;
    let files = io::list_pngs(&a.input)?;
    for p in &files {
        let prob = model.predict_resized(&io::read_gray(p)?)?;
        io::write_prob(&a.out.join(file_name(p)), &prob)?;
    }
    println!("wrote {} probability maps to {}", files.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn segment_video(a: SegmentVideoArgs) -> Result<ExitCode> {
    let model = SegmentationModel::load(&a.ckpt)?;
    let frames = experiment::load_test_frames(&a.frames)?;
    io::create_dir(&a.out)?;
    for f in &frames {
        let mask = segment_frame(&model, f, a.threshold)?;
        io::write_mask(&a.out.join(format!("{}_pred.png", f.frame_index)), &mask)?;
    }
    println!("segmented {} frames into {}", frames.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<ExitCode> {
    let aug = parse_aug_flags(&a.aug_flags)?;
    let preds = io::indexed_pngs(&a.preds)?
        .into_iter()
        .map(|(i, p)| Ok((i, io::read_mask(&p)?)))
        .collect::<villi_core::Result<Vec<_>>>()?;
    let anns = experiment::load_annotations(&a.annotations)?;
    let (p, g): (Vec<_>, Vec<_>) = experiment::match_by_index(preds, anns)?.into_iter().unzip();
    let scores = evaluate(&p, &g, &a.widths)?;
    let report = DiceReport {
        rows: vec![ReportRow::new(a.experiment_id, a.matching, &aug, scores)],
    };
    report.write_csv(&a.out)?;
    print!("{}", report.to_csv()?);
    Ok(ExitCode::SUCCESS)
}

fn load_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&a.config, a.scale)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.apply_scale_caps();
    cfg.validate()?;
    Ok(cfg)
}

fn run(a: RunArgs) -> Result<ExitCode> {
    let cfg = load_config(&a)?;
    let record = experiment::run_experiment(&cfg, &a.out);
    if let Some(row) = &record.dice {
        print!(
            "{}",
            DiceReport {
                rows: vec![row.clone()]
            }
            .to_csv()?
        );
    }
    if record.is_completed() {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!(
            "{} failed at {}: {}",
            record.experiment_id,
            record.failed_stage.as_deref().unwrap_or("?"),
            record.error.as_deref().unwrap_or("")
        );
        Ok(ExitCode::FAILURE)
    }
}

fn run_grid(a: RunArgs) -> Result<ExitCode> {
    let cfg = load_config(&a)?;
    let outcome = experiment::run_grid(&cfg, &a.out)?;
    print!("{}", outcome.report.to_csv()?);
    for f in &outcome.failures {
        eprintln!("{} failed at {}: {}", f.experiment_id, f.stage, f.error);
    }
    Ok(if outcome.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn make_phantom(a: MakePhantomArgs) -> Result<ExitCode> {
    experiment::make_phantom_dataset(&a.out, a.n_train, a.n_frames, a.seed)?;
    let cfg_path = a.out.join("base.cfg");
    let text = format!(
        "seed = {}\n\n[paths]\ntrain_images = \"train\"\ntest_frames = \"test/frames\"\nannotations = \"test/annotations\"\n",
        a.seed
    );
    std::fs::write(&cfg_path, text).with_context(|| cfg_path.display().to_string())?;
    println!("phantom dataset and {} written", cfg_path.display());
    Ok(ExitCode::SUCCESS)
}
