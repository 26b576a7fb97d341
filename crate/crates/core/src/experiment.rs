//! End-to-end experiments: real patches → pairing → synthesis training →
//! synthetic pairs → segmentation training → video inference → Dice.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{self, AugmentationConfig, Design};
use crate::counter::{estimate_count, CountEstimate, FluorescenceFrame, ThresholdMethod, DEFAULT_MIN_AREA};
use crate::error::{ensure_arg, Error, Result};
use crate::evaluator::{evaluate, CenterlineAnnotation, DiceReport, ReportRow, ALL_WIDTHS};
use crate::io;
use crate::pairing::{build_batch, extract_real_patches, MatchingMode, PairedBatch};
use crate::par;
use crate::phantom::{self, PhantomConfig};
use crate::raster::{GrayImage, MaskImage};
use crate::rng::{derive_seed, item_seed, seeded};
use crate::segmentation::{self, SegmentationConfig, SegmentationLog, SegmentationModel};
use crate::simulator::{sample_macro_count, simulate_mask, CountDistribution};
use crate::stitcher::{segment_frame, Frame};
use crate::synthesis::{self, GeneratorModel, SynthesisConfig, SynthesisLog};

pub const TOY_MAX_IMAGE_SIZE: usize = 64;
pub const TOY_MAX_EPOCHS: usize = 30;
pub const TOY_MAX_SYNTHETIC_PAIRS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    #[default]
    Paper,
    Toy,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Scale::Paper),
            "toy" => Ok(Scale::Toy),
            _ => Err(Error::invalid(format!("scale must be paper or toy, got {s:?}"))),
        }
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Paper => "paper",
            Scale::Toy => "toy",
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetPaths {
    /// RGB fluorescence training images.
    pub train_images: PathBuf,
    /// 256×256 test frames named `<frame_index>.png`.
    pub test_frames: PathBuf,
    /// Centerline annotations named `<frame_index>.png`; read only by the
    /// evaluation stage.
    pub annotations: PathBuf,
}

impl DatasetPaths {
    pub fn under(root: &Path) -> Self {
        DatasetPaths {
            train_images: root.join("train"),
            test_frames: root.join("test").join("frames"),
            annotations: root.join("test").join("annotations"),
        }
    }

    fn resolve_against(&mut self, base: &Path) {
        for p in [&mut self.train_images, &mut self.test_frames, &mut self.annotations] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Label used for the run directory and report row; not part of the hash.
    #[serde(default)]
    pub experiment_id: String,
    pub seed: u64,
    pub scale: Scale,
    pub matching: MatchingMode,
    /// Real patches sampled from the training images.
    pub n_patches: usize,
    pub patch_size: usize,
    /// Pairs per synthesis mini-batch.
    pub batch_size: usize,
    pub n_synthetic_pairs: usize,
    pub count_method: ThresholdMethod,
    pub min_area: usize,
    pub counts: CountDistribution,
    pub paths: DatasetPaths,
    pub aug: AugmentationConfig,
    /// Its `seed` is ignored: stage seeds derive from the top-level seed.
    pub synth: SynthesisConfig,
    /// Its `seed` is ignored: stage seeds derive from the top-level seed.
    pub seg: SegmentationConfig,
}

impl ExperimentConfig {
    pub fn preset(scale: Scale) -> Self {
        let base = ExperimentConfig {
            experiment_id: String::new(),
            seed: 0,
            scale,
            matching: MatchingMode::Macro,
            n_patches: 500,
            patch_size: 128,
            batch_size: 1,
            n_synthetic_pairs: 500,
            count_method: ThresholdMethod::Otsu,
            min_area: DEFAULT_MIN_AREA,
            counts: CountDistribution::default(),
            paths: DatasetPaths::default(),
            aug: AugmentationConfig::for_design(Design::SmoothNoise),
            synth: SynthesisConfig::default(),
            seg: SegmentationConfig::default(),
        };
        match scale {
            Scale::Paper => base,
            Scale::Toy => ExperimentConfig {
                n_patches: 32,
                n_synthetic_pairs: 64,
                synth: SynthesisConfig::toy(64, 5),
                seg: SegmentationConfig {
                    epochs: 15,
                    input_size: 64,
                    base_channels: 8,
                    batch_size: 4,
                    ..Default::default()
                },
                ..base
            },
        }
    }

    /// Parses a TOML config. Keys missing from the file fall back to the
    /// preset of the file's `scale` (or `scale_override`, which wins).
    pub fn from_toml_str(text: &str, scale_override: Option<Scale>) -> Result<Self> {
        let file: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let scale = match scale_override {
            Some(s) => s,
            None => match file.get("scale") {
                Some(v) => v
                    .as_str()
                    .ok_or_else(|| Error::Config("scale must be a string".into()))?
                    .parse()?,
                None => Scale::Paper,
            },
        };
        let mut merged = toml::Table::try_from(Self::preset(scale)).map_err(|e| Error::Config(e.to_string()))?;
        merge_tables(&mut merged, file);
        merged.insert("scale".into(), toml::Value::String(scale.to_string()));
        let cfg: ExperimentConfig = toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Reads a config file; relative dataset paths are taken relative to it.
    pub fn load(path: &Path, scale_override: Option<Scale>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, scale_override)?;
        cfg.paths.resolve_against(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Lowers any size, epoch or pair count above the toy limits. No-op at
    /// paper scale.
    pub fn apply_scale_caps(&mut self) {
        if self.scale != Scale::Toy {
            return;
        }
        self.synth.image_size = self.synth.image_size.min(TOY_MAX_IMAGE_SIZE);
        self.seg.input_size = self.seg.input_size.min(TOY_MAX_IMAGE_SIZE);
        self.synth.epochs = self.synth.epochs.min(TOY_MAX_EPOCHS);
        self.seg.epochs = self.seg.epochs.min(TOY_MAX_EPOCHS);
        self.n_synthetic_pairs = self.n_synthetic_pairs.min(TOY_MAX_SYNTHETIC_PAIRS);
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.seed <= i64::MAX as u64, "seed must fit in a signed 64-bit integer");
        ensure_arg!(self.n_patches >= 1, "n_patches must be >= 1");
        ensure_arg!(self.batch_size >= 1, "batch_size must be >= 1");
        ensure_arg!(self.n_synthetic_pairs >= 1, "n_synthetic_pairs must be >= 1");
        ensure_arg!(self.min_area >= 1, "min_area must be >= 1");
        ensure_arg!(
            self.patch_size >= crate::simulator::MIN_IMAGE_SIDE,
            "patch_size must be at least {}",
            crate::simulator::MIN_IMAGE_SIDE
        );
        CountDistribution::new(self.counts.low, self.counts.high)?;
        self.aug.validate()?;
        self.synth.validate()?;
        self.seg.validate()?;
        if self.scale == Scale::Toy {
            ensure_arg!(
                self.synth.image_size <= TOY_MAX_IMAGE_SIZE && self.seg.input_size <= TOY_MAX_IMAGE_SIZE,
                "toy scale limits image sizes to {TOY_MAX_IMAGE_SIZE}"
            );
            ensure_arg!(
                self.synth.epochs <= TOY_MAX_EPOCHS && self.seg.epochs <= TOY_MAX_EPOCHS,
                "toy scale limits epochs to {TOY_MAX_EPOCHS}"
            );
            ensure_arg!(
                self.n_synthetic_pairs <= TOY_MAX_SYNTHETIC_PAIRS,
                "toy scale limits n_synthetic_pairs to {TOY_MAX_SYNTHETIC_PAIRS}"
            );
        }
        Ok(())
    }

    /// Copy with ignored fields cleared, so that equal normalized configs
    /// always run identically.
    pub fn normalized(&self) -> Self {
        let mut c = self.clone();
        c.synth.seed = 0;
        c.seg.seed = 0;
        c
    }

    /// Hex SHA-256 over the canonical JSON of the normalized config, without
    /// the experiment label.
    pub fn config_hash(&self) -> String {
        let mut c = self.normalized();
        c.experiment_id.clear();
        // serde_json maps keep keys sorted, which makes the text canonical
        let value = serde_json::to_value(&c).expect("config serializes");
        let digest = Sha256::digest(value.to_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn design(&self) -> Result<Design> {
        self.aug.design()
    }

    pub fn default_experiment_id(&self) -> String {
        let slug = self.aug.design().map(Design::slug).unwrap_or("custom");
        format!("{}_{}", self.matching, slug)
    }
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

// ---------------------------------------------------------------- stages

pub fn load_training_frames(dir: &Path) -> Result<Vec<FluorescenceFrame>> {
    let files = io::list_pngs(dir)?;
    ensure_arg!(!files.is_empty(), "no PNG training images in {}", dir.display());
    files.iter().map(|p| io::read_rgb(p)).collect()
}

/// Test frames keyed by the number in their file names.
pub fn load_test_frames(dir: &Path) -> Result<Vec<Frame>> {
    let files = io::indexed_pngs(dir)?;
    ensure_arg!(!files.is_empty(), "no PNG test frames in {}", dir.display());
    files
        .into_iter()
        .map(|(i, p)| Frame::new(io::read_gray(&p)?, i))
        .collect()
}

pub fn load_annotations(dir: &Path) -> Result<Vec<CenterlineAnnotation>> {
    io::indexed_pngs(dir)?
        .into_iter()
        .map(|(i, p)| Ok(CenterlineAnnotation::new(io::read_mask(&p)?, i)))
        .collect()
}

pub fn count_patches(
    patches: &[FluorescenceFrame],
    method: ThresholdMethod,
    min_area: usize,
) -> Result<Vec<CountEstimate>> {
    par::map_slice(patches, |p| estimate_count(p, method, min_area))
        .into_iter()
        .collect()
}

/// Splits real patches into mini-batches of `batch_size` and pairs each
/// with simulated masks. `counts` is required in micro mode.
pub fn pair_patches(
    reals: &[GrayImage],
    mode: MatchingMode,
    counts: Option<&[usize]>,
    dist: &CountDistribution,
    aug: &AugmentationConfig,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<PairedBatch>> {
    ensure_arg!(batch_size >= 1, "batch size must be >= 1");
    if let Some(c) = counts {
        ensure_arg!(c.len() == reals.len(), "{} counts for {} patches", c.len(), reals.len());
    }
    let mut rng = seeded(seed);
    reals
        .chunks(batch_size)
        .enumerate()
        .map(|(b, chunk)| {
            let est = counts.map(|c| &c[b * batch_size..b * batch_size + chunk.len()]);
            build_batch(chunk, mode, est, dist, aug, &mut rng)
        })
        .collect()
}

/// Writes `reals/`, `masks_clean/` (with stick sidecars), `masks_aug/`
/// and `manifest.csv`.
pub fn write_dataset(dir: &Path, batches: &[PairedBatch]) -> Result<()> {
    let (reals, clean, aug) = (dir.join("reals"), dir.join("masks_clean"), dir.join("masks_aug"));
    for d in [&reals, &clean, &aug] {
        io::create_dir(d)?;
    }
    let mut manifest = Vec::new();
    for (b, batch) in batches.iter().enumerate() {
        for i in 0..batch.len() {
            let k = manifest.len();
            io::write_gray(&io::numbered(&reals, k), &batch.reals[i])?;
            io::write_mask_with_sticks(&io::numbered(&clean, k), &batch.clean[i])?;
            io::write_gray(&io::numbered(&aug, k), &batch.masks[i])?;
            manifest.push(io::ManifestRow {
                pair_index: k,
                batch: b,
                count: batch.counts[i],
                seed: batch.seeds[i],
            });
        }
    }
    io::write_csv_rows(&dir.join("manifest.csv"), &manifest)
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Vec<PairedBatch>> {
    let manifest: Vec<io::ManifestRow> = io::read_csv_rows(&dir.join("manifest.csv"))?;
    let mut batches: Vec<PairedBatch> = Vec::new();
    for row in manifest {
        if batches.len() <= row.batch {
            batches.resize_with(row.batch + 1, PairedBatch::default);
        }
        let b = &mut batches[row.batch];
        let k = row.pair_index;
        b.reals.push(io::read_gray(&io::numbered(&dir.join("reals"), k))?);
        b.clean
            .push(io::read_mask_with_sticks(&io::numbered(&dir.join("masks_clean"), k))?);
        b.masks.push(io::read_gray(&io::numbered(&dir.join("masks_aug"), k))?);
        b.counts.push(row.count);
        b.seeds.push(row.seed);
    }
    batches.retain(|b| !b.is_empty());
    Ok(batches)
}

/// Where the stick counts of synthetic training pairs come from.
#[derive(Debug, Clone, Copy)]
pub enum SyntheticCounts<'a> {
    /// Drawn from the count prior.
    Prior(&'a CountDistribution),
    /// Cycled through the real patches' estimates in order.
    Estimates(&'a [usize]),
}

/// Fresh clean masks, their augmented versions pushed through the
/// mask→image generator. Returns `(fake images, clean masks)`.
pub fn synthetic_pairs(
    gen: &GeneratorModel,
    n: usize,
    counts: SyntheticCounts<'_>,
    size: usize,
    aug: &AugmentationConfig,
    seed: u64,
) -> Result<(Vec<GrayImage>, Vec<MaskImage>)> {
    let mut rng = seeded(seed);
    let counts: Vec<usize> = match counts {
        SyntheticCounts::Prior(d) => (0..n).map(|_| sample_macro_count(d, &mut rng)).collect(),
        SyntheticCounts::Estimates(e) => {
            ensure_arg!(!e.is_empty(), "no count estimates to cycle through");
            (0..n).map(|i| e[i % e.len()]).collect()
        }
    };
    let base = derive_seed(seed, "items");
    let made = par::map_indexed(n, |i| -> Result<(MaskImage, GrayImage)> {
        let mut r = seeded(item_seed(base, i));
        let clean = simulate_mask(counts[i], (size, size), &mut r)?;
        let augmented = augment::apply(&clean, aug, &mut r)?;
        Ok((clean, augmented))
    });
    let (mut clean, mut augmented) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for m in made {
        let (c, a) = m?;
        clean.push(c);
        augmented.push(a);
    }
    let fakes = synthesis::synthesize(gen, &augmented)?;
    Ok((fakes, clean))
}

pub fn segment_frames(model: &SegmentationModel, frames: &[Frame], threshold: f64) -> Result<Vec<MaskImage>> {
    frames.iter().map(|f| segment_frame(model, f, threshold)).collect()
}

/// Writes a phantom dataset in the layout of [`DatasetPaths::under`]:
/// RGB training images, grayscale test frames and centerline annotations.
pub fn make_phantom_dataset(root: &Path, n_train: usize, n_frames: usize, seed: u64) -> Result<DatasetPaths> {
    let paths = DatasetPaths::under(root);
    for d in [&paths.train_images, &paths.test_frames, &paths.annotations] {
        io::create_dir(d)?;
    }
    let cfg = PhantomConfig::default();
    let mut rng = seeded(derive_seed(seed, "phantom/train"));
    for i in 0..n_train {
        let f = phantom::generate(&cfg, &mut rng)?;
        io::write_rgb(&io::numbered(&paths.train_images, i), &f.frame)?;
    }
    let video = phantom::generate_video(&cfg, n_frames, &mut seeded(derive_seed(seed, "phantom/video")))?;
    for (i, f) in video.iter().enumerate() {
        io::write_gray(&io::numbered(&paths.test_frames, i), &f.frame.intensity())?;
        io::write_mask(&io::numbered(&paths.annotations, i), &f.centerline())?;
    }
    Ok(paths)
}

// ---------------------------------------------------------------- runner

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

/// Summary of one experiment, written as `run.json` in its directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment_id: String,
    pub config_hash: String,
    pub status: RunStatus,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    /// Named files and directories produced by the run.
    pub artifacts: BTreeMap<String, PathBuf>,
    pub synthesis_log: Option<SynthesisLog>,
    pub segmentation_log: Option<SegmentationLog>,
    pub dice: Option<ReportRow>,
    pub stages: Vec<StageTime>,
    pub wall_seconds: f64,
    pub software_version: String,
    pub finished_unix: u64,
}

impl RunRecord {
    pub fn is_completed(&self) -> bool {
        self.status == RunStatus::Completed
    }
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    dir: &'a Path,
    record: RunRecord,
}

impl Runner<'_> {
    fn stage<T>(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Self) -> Result<T>,
    ) -> std::result::Result<T, (String, Error)> {
        let start = Instant::now();
        let out = f(self);
        self.record.stages.push(StageTime {
            stage: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
        });
        out.map_err(|e| (name.to_string(), e))
    }

    fn artifact(&mut self, name: &str, path: PathBuf) {
        self.record.artifacts.insert(name.to_string(), path);
    }

    fn run(&mut self) -> std::result::Result<(), (String, Error)> {
        let cfg = self.cfg;
        let dir = self.dir.to_path_buf();
        self.stage("setup", |r| {
            cfg.validate()?;
            io::create_dir(&dir)?;
            let path = dir.join("config.toml");
            std::fs::write(&path, cfg.normalized().to_toml_string()?).map_err(|e| Error::io(&path, e))?;
            r.artifact("config", path);
            Ok(())
        })?;

        let patches = self.stage("patches", |_| {
            let frames = load_training_frames(&cfg.paths.train_images)?;
            let mut rng = seeded(cfg.stage_seed("patches"));
            extract_real_patches(&frames, cfg.n_patches, cfg.patch_size, &mut rng)
        })?;
        let reals: Vec<GrayImage> = par::map_slice(&patches, FluorescenceFrame::intensity);

        let counts = self.stage("counts", |r| {
            if cfg.matching != MatchingMode::Micro {
                return Ok(None);
            }
            let est = count_patches(&patches, cfg.count_method, cfg.min_area)?;
            let rows: Vec<io::CountRow> = est
                .iter()
                .enumerate()
                .map(|(i, e)| io::CountRow {
                    filename: format!("{i:04}.png"),
                    count: e.count,
                    threshold_used: e.threshold_used,
                    min_area_used: e.min_area_used,
                })
                .collect();
            let path = dir.join("counts.csv");
            io::write_csv_rows(&path, &rows)?;
            r.artifact("counts", path);
            Ok(Some(est.iter().map(|e| e.count).collect::<Vec<_>>()))
        })?;

        let batches = self.stage("pairing", |r| {
            let batches = pair_patches(
                &reals,
                cfg.matching,
                counts.as_deref(),
                &cfg.counts,
                &cfg.aug,
                cfg.batch_size,
                cfg.stage_seed("pairing"),
            )?;
            let path = dir.join("dataset");
            write_dataset(&path, &batches)?;
            r.artifact("dataset", path);
            Ok(batches)
        })?;

        let generator = self.stage("synthesis", |r| {
            let synth_cfg = SynthesisConfig {
                seed: cfg.stage_seed("synthesis"),
                ..cfg.synth.clone()
            };
            let ckpt = dir.join("checkpoints").join("synthesis");
            io::create_dir(&ckpt)?;
            let (gan, log) = synthesis::train(&batches, &synth_cfg, |gan, e| {
                gan.mask_to_image
                    .save(&ckpt.join(format!("epoch_{:03}_mask_to_image.ckpt", e.epoch)))?;
                gan.image_to_mask
                    .save(&ckpt.join(format!("epoch_{:03}_image_to_mask.ckpt", e.epoch)))
            })?;
            let g_mi = ckpt.join("mask_to_image.ckpt");
            let g_im = ckpt.join("image_to_mask.ckpt");
            gan.mask_to_image.save(&g_mi)?;
            gan.image_to_mask.save(&g_im)?;
            let log_path = dir.join("synthesis_log.csv");
            log.write_csv(&log_path)?;
            r.artifact("generator_mask_to_image", g_mi);
            r.artifact("generator_image_to_mask", g_im);
            r.artifact("synthesis_log", log_path);
            r.record.synthesis_log = Some(log);
            Ok(gan.mask_to_image)
        })?;

        let (fakes, clean) = self.stage("synthetic-pairs", |r| {
            let source = match &counts {
                Some(c) => SyntheticCounts::Estimates(c),
                None => SyntheticCounts::Prior(&cfg.counts),
            };
            let (fakes, clean) = synthetic_pairs(
                &generator,
                cfg.n_synthetic_pairs,
                source,
                cfg.patch_size,
                &cfg.aug,
                cfg.stage_seed("synthetic-pairs"),
            )?;
            let (fd, md) = (dir.join("synthetic").join("fakes"), dir.join("synthetic").join("masks"));
            io::create_dir(&fd)?;
            io::create_dir(&md)?;
            for (i, (f, m)) in fakes.iter().zip(&clean).enumerate() {
                io::write_gray(&io::numbered(&fd, i), f)?;
                io::write_mask_with_sticks(&io::numbered(&md, i), m)?;
            }
            r.artifact("synthetic_fakes", fd);
            r.artifact("synthetic_masks", md);
            Ok((fakes, clean))
        })?;

        let model = self.stage("segmentation", |r| {
            let seg_cfg = SegmentationConfig {
                seed: cfg.stage_seed("segmentation"),
                ..cfg.seg.clone()
            };
            let ckpt = dir.join("checkpoints").join("segmentation");
            io::create_dir(&ckpt)?;
            let (model, log) = segmentation::train(&fakes, &clean, &seg_cfg, |m, e| {
                m.save(&ckpt.join(format!("epoch_{:03}.ckpt", e.epoch)))
            })?;
            let path = ckpt.join("unet.ckpt");
            model.save(&path)?;
            let log_path = dir.join("segmentation_log.csv");
            log.write_csv(&log_path)?;
            r.artifact("segmentation_model", path);
            r.artifact("segmentation_log", log_path);
            r.record.segmentation_log = Some(log);
            Ok(model)
        })?;

        let preds = self.stage("inference", |r| {
            let frames = load_test_frames(&cfg.paths.test_frames)?;
            let masks = segment_frames(&model, &frames, cfg.seg.binarize_threshold)?;
            let pd = dir.join("predictions");
            io::create_dir(&pd)?;
            for (f, m) in frames.iter().zip(&masks) {
                io::write_mask(&pd.join(format!("{}_pred.png", f.frame_index)), m)?;
            }
            r.artifact("predictions", pd);
            Ok(frames.iter().map(|f| f.frame_index).zip(masks).collect::<Vec<_>>())
        })?;

        self.stage("evaluate", |r| {
            let anns = load_annotations(&cfg.paths.annotations)?;
            let matched = match_by_index(preds, anns)?;
            let (p, a): (Vec<_>, Vec<_>) = matched.into_iter().unzip();
            let scores = evaluate(&p, &a, &ALL_WIDTHS)?;
            let row = ReportRow::new(r.record.experiment_id.clone(), cfg.matching, &cfg.aug, scores);
            let report = DiceReport {
                rows: vec![row.clone()],
            };
            let path = dir.join("dice.csv");
            report.write_csv(&path)?;
            let frames_path = dir.join("dice_per_frame.csv");
            report.write_per_frame_csv(&frames_path)?;
            r.artifact("dice", path);
            r.artifact("dice_per_frame", frames_path);
            r.record.dice = Some(row);
            Ok(())
        })
    }
}

/// Pairs predictions with annotations of the same frame index.
pub fn match_by_index(
    preds: Vec<(usize, MaskImage)>,
    anns: Vec<CenterlineAnnotation>,
) -> Result<Vec<(MaskImage, CenterlineAnnotation)>> {
    let mut by_index: BTreeMap<usize, CenterlineAnnotation> = anns.into_iter().map(|a| (a.frame_index, a)).collect();
    preds
        .into_iter()
        .map(|(i, p)| {
            let a = by_index
                .remove(&i)
                .ok_or_else(|| Error::invalid(format!("no annotation for frame {i}")))?;
            Ok((p, a))
        })
        .collect()
}

/// Runs all stages into `dir` and writes `run.json`. Stage failures do not
/// return `Err`: they end the run and are recorded in the returned record.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> RunRecord {
    let start = Instant::now();
    let id = if cfg.experiment_id.is_empty() {
        cfg.default_experiment_id()
    } else {
        cfg.experiment_id.clone()
    };
    let mut runner = Runner {
        cfg,
        dir,
        record: RunRecord {
            experiment_id: id,
            config_hash: cfg.config_hash(),
            status: RunStatus::Completed,
            failed_stage: None,
            error: None,
            artifacts: BTreeMap::new(),
            synthesis_log: None,
            segmentation_log: None,
            dice: None,
            stages: Vec::new(),
            wall_seconds: 0.0,
            software_version: env!("CARGO_PKG_VERSION").to_string(),
            finished_unix: 0,
        },
    };
    if let Err((stage, e)) = runner.run() {
        runner.record.status = RunStatus::Failed;
        runner.record.failed_stage = Some(stage);
        runner.record.error = Some(e.to_string());
    }
    let mut record = runner.record;
    record.wall_seconds = start.elapsed().as_secs_f64();
    record.finished_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    // the record itself can only be written if the directory exists
    if dir.is_dir() {
        let path = dir.join("run.json");
        if let Ok(text) = serde_json::to_string_pretty(&record) {
            let _ = std::fs::write(path, text);
        }
    }
    record
}

/// The eight canonical experiments: both matching modes × the four
/// cumulative augmentation designs, micro first.
pub fn grid_configs(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let mut out = Vec::with_capacity(8);
    for matching in MatchingMode::ALL {
        for design in Design::ALL {
            let (smooth, noise, brightness) = design.flags();
            let mut cfg = base.clone();
            cfg.matching = matching;
            cfg.aug.smooth = smooth;
            cfg.aug.noise = noise;
            cfg.aug.brightness = brightness;
            cfg.experiment_id = format!("{}_{}", matching, design.slug());
            out.push(cfg);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFailure {
    pub experiment_id: String,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub report: DiceReport,
    pub records: Vec<RunRecord>,
    pub failures: Vec<GridFailure>,
}

/// Runs the grid into `out/<experiment_id>/`, then writes `out/report.csv`
/// (completed experiments only) and, if any failed, `out/failures.csv`.
pub fn run_grid(base: &ExperimentConfig, out: &Path) -> Result<GridOutcome> {
    io::create_dir(out)?;
    let mut report = DiceReport::default();
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for cfg in grid_configs(base) {
        let record = run_experiment(&cfg, &out.join(&cfg.experiment_id));
        match (&record.status, &record.dice) {
            (RunStatus::Completed, Some(row)) => report.rows.push(row.clone()),
            _ => failures.push(GridFailure {
                experiment_id: record.experiment_id.clone(),
                stage: record.failed_stage.clone().unwrap_or_default(),
                error: record.error.clone().unwrap_or_default(),
            }),
        }
        records.push(record);
    }
    report.write_csv(&out.join("report.csv"))?;
    let failures_path = out.join("failures.csv");
    if failures.is_empty() {
        if failures_path.exists() {
            std::fs::remove_file(&failures_path).map_err(|e| Error::io(&failures_path, e))?;
        }
    } else {
        io::write_csv_rows(&failures_path, &failures)?;
    }
    Ok(GridOutcome {
        report,
        records,
        failures,
    })
}
