//! Cycle-consistent adversarial translation between real intensity patches
//! and augmented masks.
//!
//! Two ResNet-style generators map masks to images and back; two patch
//! discriminators score realism in each domain. The mask→image generator is
//! what later produces synthetic training images.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::nn::{
    image_to_tensor, tensor_to_image, Adam, Checkpoint, Conv2d, ConvSpec, Ctx, Graph, Init, NodeId, PadMode,
    ParamStore, Tensor,
};
use crate::pairing::PairedBatch;
use crate::par;
use crate::raster::GrayImage;
use crate::rng::{derive_seed, seeded, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialLoss {
    #[default]
    LeastSquares,
    CrossEntropy,
}

impl FromStr for AdversarialLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "least-squares" => Ok(AdversarialLoss::LeastSquares),
            "cross-entropy" => Ok(AdversarialLoss::CrossEntropy),
            _ => Err(Error::invalid(format!("unknown adversarial loss {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisConfig {
    pub epochs: usize,
    /// Side length both domains are resized to for training.
    pub image_size: usize,
    pub cycle_weight: f64,
    pub adversarial_loss: AdversarialLoss,
    pub learning_rate: f64,
    pub seed: u64,
    /// Generator channels at full resolution.
    pub ngf: usize,
    pub n_res: usize,
    /// Discriminator channels after its first layer.
    pub ndf: usize,
    /// Stride-2 layers in the discriminator.
    pub disc_layers: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            epochs: 50,
            image_size: 256,
            cycle_weight: 10.0,
            adversarial_loss: AdversarialLoss::LeastSquares,
            learning_rate: 2e-4,
            seed: 0,
            ngf: 64,
            n_res: 6,
            ndf: 64,
            disc_layers: 3,
        }
    }
}

impl SynthesisConfig {
    /// Small networks for desk-scale runs.
    pub fn toy(image_size: usize, epochs: usize) -> Self {
        SynthesisConfig {
            epochs,
            image_size,
            ngf: 8,
            n_res: 2,
            ndf: 8,
            disc_layers: 2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.epochs >= 1, "epochs must be >= 1");
        ensure_arg!(
            self.cycle_weight >= 0.0 && self.cycle_weight.is_finite(),
            "cycle weight must be >= 0"
        );
        ensure_arg!(self.learning_rate > 0.0, "learning rate must be positive");
        ensure_arg!(self.ngf >= 1 && self.ndf >= 1, "channel counts must be positive");
        ensure_arg!(self.disc_layers >= 1, "discriminator needs at least one layer");
        ensure_arg!(
            self.image_size >= 8 && self.image_size.is_multiple_of(4),
            "image size must be a multiple of 4 and at least 8"
        );
        ensure_arg!(
            self.image_size.is_multiple_of(1 << self.disc_layers),
            "image size must be divisible by 2^disc_layers"
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    MaskToImage,
    ImageToMask,
}

impl Direction {
    pub fn reverse(self) -> Direction {
        match self {
            Direction::MaskToImage => Direction::ImageToMask,
            Direction::ImageToMask => Direction::MaskToImage,
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::MaskToImage => "M->I",
            Direction::ImageToMask => "I->M",
        })
    }
}

/// Anything that translates single-channel images in one direction.
pub trait ImageTranslator {
    fn direction(&self) -> Direction;
    /// Output has the same size as `img`.
    fn translate(&self, img: &GrayImage) -> Result<GrayImage>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    pub ngf: usize,
    pub n_res: usize,
    pub image_size: usize,
}

#[derive(Debug, Clone)]
struct ResnetGenerator {
    stem: Conv2d,
    down: [Conv2d; 2],
    res: Vec<(Conv2d, Conv2d)>,
    up: [Conv2d; 2],
    out: Conv2d,
}

impl ResnetGenerator {
    fn build(arch: &GeneratorArch, store: &mut ParamStore, rng: &mut SimRng) -> Self {
        let init = Init::Normal(0.02);
        let f = arch.ngf;
        let down_spec = ConvSpec {
            stride: 2,
            pad: 1,
            mode: PadMode::Zero,
        };
        let r3 = ConvSpec::same(3, PadMode::Reflect);
        let r7 = ConvSpec::same(7, PadMode::Reflect);
        let stem = Conv2d::new(store, "stem", 1, f, 7, r7, false, init, rng);
        let down = [
            Conv2d::new(store, "down0", f, 2 * f, 3, down_spec, false, init, rng),
            Conv2d::new(store, "down1", 2 * f, 4 * f, 3, down_spec, false, init, rng),
        ];
        let res = (0..arch.n_res)
            .map(|i| {
                (
                    Conv2d::new(store, &format!("res{i}.0"), 4 * f, 4 * f, 3, r3, false, init, rng),
                    Conv2d::new(store, &format!("res{i}.1"), 4 * f, 4 * f, 3, r3, false, init, rng),
                )
            })
            .collect();
        let up = [
            Conv2d::new(store, "up0", 4 * f, 2 * f, 3, r3, false, init, rng),
            Conv2d::new(store, "up1", 2 * f, f, 3, r3, false, init, rng),
        ];
        let out = Conv2d::new(store, "out", f, 1, 7, r7, true, init, rng);
        ResnetGenerator {
            stem,
            down,
            res,
            up,
            out,
        }
    }

    fn forward(&self, cx: &mut Ctx<'_>, x: NodeId) -> NodeId {
        let norm_relu = |cx: &mut Ctx<'_>, h| {
            let h = cx.g.instance_norm(h);
            cx.g.relu(h)
        };
        let mut h = self.stem.forward(cx, x);
        h = norm_relu(cx, h);
        for conv in &self.down {
            h = conv.forward(cx, h);
            h = norm_relu(cx, h);
        }
        for (a, b) in &self.res {
            let mut r = a.forward(cx, h);
            r = norm_relu(cx, r);
            r = b.forward(cx, r);
            r = cx.g.instance_norm(r);
            h = cx.g.add(h, r);
        }
        for conv in &self.up {
            h = cx.g.upsample2(h);
            h = conv.forward(cx, h);
            h = norm_relu(cx, h);
        }
        h = self.out.forward(cx, h);
        cx.g.tanh(h)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    direction: Direction,
    arch: GeneratorArch,
    net: ResnetGenerator,
    params: ParamStore,
    seed: u64,
    epoch: usize,
}

impl GeneratorModel {
    pub fn new(direction: Direction, arch: GeneratorArch, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let stage = format!("generator/{direction}/init");
        let net = ResnetGenerator::build(&arch, &mut params, &mut seeded(derive_seed(seed, &stage)));
        GeneratorModel {
            direction,
            arch,
            net,
            params,
            seed,
            epoch: 0,
        }
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn run(&self, batch: Tensor) -> Tensor {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, 0, &self.params);
        let x = cx.g.input(batch);
        let y = self.net.forward(&mut cx, x);
        g.value(y).clone()
    }

    /// Translates images of any size: each is resized to the model's
    /// training size, translated, and resized back.
    pub fn translate_batch(&self, imgs: &[GrayImage]) -> Result<Vec<GrayImage>> {
        let s = self.arch.image_size;
        imgs.iter()
            .map(|img| {
                let x = image_to_tensor(&img.resize_bilinear(s, s));
                let y = self.run(x);
                Ok(tensor_to_image(y.data(), s, s).resize_bilinear(img.width(), img.height()))
            })
            .collect()
    }

    fn arch_json(&self) -> serde_json::Value {
        serde_json::json!({
            "net": "resnet_generator",
            "direction": self.direction,
            "arch": self.arch,
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("generator", self.arch_json(), self.seed, self.epoch, &self.params)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.header.kind != "generator" {
            return Err(Error::Checkpoint(format!(
                "expected generator checkpoint, got {}",
                ck.header.kind
            )));
        }
        let direction: Direction = serde_json::from_value(ck.header.arch["direction"].clone())?;
        let arch: GeneratorArch = serde_json::from_value(ck.header.arch["arch"].clone())?;
        let mut model = GeneratorModel::new(direction, arch, ck.header.seed);
        model.epoch = ck.header.epoch;
        let names = ck.names();
        model.params.load(&names, ck.tensors).map_err(Error::Checkpoint)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

impl ImageTranslator for GeneratorModel {
    fn direction(&self) -> Direction {
        self.direction
    }

    fn translate(&self, img: &GrayImage) -> Result<GrayImage> {
        Ok(self.translate_batch(std::slice::from_ref(img))?.remove(0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    pub ndf: usize,
    pub layers: usize,
}

/// Patch discriminator: stride-2 convolutions ending in a one-channel score
/// map at `1 / 2^layers` of the input resolution.
#[derive(Debug, Clone)]
pub struct DiscriminatorModel {
    arch: DiscriminatorArch,
    convs: Vec<Conv2d>,
    head: Conv2d,
    params: ParamStore,
    seed: u64,
}

impl DiscriminatorModel {
    pub fn new(arch: DiscriminatorArch, seed: u64, stage: &str) -> Self {
        let mut params = ParamStore::new();
        let rng = &mut seeded(derive_seed(seed, stage));
        let init = Init::Normal(0.02);
        let spec = ConvSpec {
            stride: 2,
            pad: 1,
            mode: PadMode::Zero,
        };
        let mut convs = Vec::new();
        let mut cin = 1;
        for l in 0..arch.layers {
            let cout = arch.ndf << l;
            // the first layer has no normalization, so it keeps its bias
            convs.push(Conv2d::new(
                &mut params,
                &format!("conv{l}"),
                cin,
                cout,
                4,
                spec,
                l == 0,
                init,
                rng,
            ));
            cin = cout;
        }
        let head = Conv2d::new(
            &mut params,
            "head",
            cin,
            1,
            3,
            ConvSpec::same(3, PadMode::Zero),
            true,
            init,
            rng,
        );
        DiscriminatorModel {
            arch,
            convs,
            head,
            params,
            seed,
        }
    }

    fn forward(&self, cx: &mut Ctx<'_>, x: NodeId) -> NodeId {
        let mut h = x;
        for (l, conv) in self.convs.iter().enumerate() {
            h = conv.forward(cx, h);
            if l > 0 {
                h = cx.g.instance_norm(h);
            }
            h = cx.g.leaky_relu(h, 0.2);
        }
        self.head.forward(cx, h)
    }

    /// Score map for a batch in `[-1, 1]`.
    pub fn score(&self, batch: Tensor) -> Tensor {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, 0, &self.params);
        let x = cx.g.input(batch);
        let y = self.forward(&mut cx, x);
        g.value(y).clone()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let arch = serde_json::json!({ "net": "patch_discriminator", "arch": self.arch });
        Checkpoint::new("discriminator", arch, self.seed, 0, &self.params)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthEpoch {
    pub epoch: usize,
    pub g_loss: f64,
    pub d_loss: f64,
    pub cycle_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthesisLog {
    pub epochs: Vec<SynthEpoch>,
}

impl SynthesisLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "g_loss", "d_loss", "cycle_loss", "wall_seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.6}", e.g_loss),
                format!("{:.6}", e.d_loss),
                format!("{:.6}", e.cycle_loss),
                format!("{:.3}", e.wall_seconds),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// The four trained networks.
#[derive(Debug, Clone)]
pub struct CycleGan {
    pub mask_to_image: GeneratorModel,
    pub image_to_mask: GeneratorModel,
    pub image_critic: DiscriminatorModel,
    pub mask_critic: DiscriminatorModel,
}

impl CycleGan {
    pub fn new(cfg: &SynthesisConfig) -> Self {
        let garch = GeneratorArch {
            ngf: cfg.ngf,
            n_res: cfg.n_res,
            image_size: cfg.image_size,
        };
        let darch = DiscriminatorArch {
            ndf: cfg.ndf,
            layers: cfg.disc_layers,
        };
        CycleGan {
            mask_to_image: GeneratorModel::new(Direction::MaskToImage, garch, cfg.seed),
            image_to_mask: GeneratorModel::new(Direction::ImageToMask, garch, cfg.seed),
            image_critic: DiscriminatorModel::new(darch, cfg.seed, "critic/image/init"),
            mask_critic: DiscriminatorModel::new(darch, cfg.seed, "critic/mask/init"),
        }
    }
}

const G_MI: usize = 0;
const G_IM: usize = 1;
const D_I: usize = 2;
const D_M: usize = 3;

fn adversarial(g: &mut Graph, kind: AdversarialLoss, scores: NodeId, target: f32) -> NodeId {
    match kind {
        AdversarialLoss::LeastSquares => g.mse_const(scores, target),
        AdversarialLoss::CrossEntropy => g.bce_logits_const(scores, target),
    }
}

fn check_finite(v: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::TrainingDiverged {
            epoch,
            step,
            what: what.to_string(),
        })
    }
}

/// Batch of domain tensors at the training resolution.
struct Prepared {
    reals: Tensor,
    masks: Tensor,
}

fn prepare(batch: &PairedBatch, size: usize) -> Result<Prepared> {
    let to = |imgs: &[GrayImage]| -> Result<Tensor> {
        let items = par::map_slice(imgs, |img| image_to_tensor(&img.resize_bilinear(size, size)));
        Tensor::stack(&items)
    };
    Ok(Prepared {
        reals: to(&batch.reals)?,
        masks: to(&batch.masks)?,
    })
}

struct StepLosses {
    g: f64,
    d: f64,
    cycle: f64,
}

struct Optimizers {
    g_mi: Adam,
    g_im: Adam,
    d_i: Adam,
    d_m: Adam,
}

fn train_step(
    gan: &mut CycleGan,
    opt: &mut Optimizers,
    batch: &Prepared,
    cfg: &SynthesisConfig,
    epoch: usize,
    step: usize,
) -> Result<StepLosses> {
    let kind = cfg.adversarial_loss;
    // generators
    let mut g = Graph::new();
    let m = g.input(batch.masks.clone());
    let i = g.input(batch.reals.clone());
    let fake_i = gan
        .mask_to_image
        .net
        .forward(&mut Ctx::new(&mut g, G_MI, &gan.mask_to_image.params), m);
    let rec_m = gan
        .image_to_mask
        .net
        .forward(&mut Ctx::new(&mut g, G_IM, &gan.image_to_mask.params), fake_i);
    let fake_m = gan
        .image_to_mask
        .net
        .forward(&mut Ctx::new(&mut g, G_IM, &gan.image_to_mask.params), i);
    let rec_i = gan
        .mask_to_image
        .net
        .forward(&mut Ctx::new(&mut g, G_MI, &gan.mask_to_image.params), fake_m);
    let s_fake_i = gan
        .image_critic
        .forward(&mut Ctx::new(&mut g, D_I, &gan.image_critic.params), fake_i);
    let s_fake_m = gan
        .mask_critic
        .forward(&mut Ctx::new(&mut g, D_M, &gan.mask_critic.params), fake_m);
    let adv_i = adversarial(&mut g, kind, s_fake_i, 1.0);
    let adv_m = adversarial(&mut g, kind, s_fake_m, 1.0);
    let cyc_m = g.l1(rec_m, m);
    let cyc_i = g.l1(rec_i, i);
    let cycle = g.weighted_sum(&[(cyc_m, 1.0), (cyc_i, 1.0)]);
    let w = cfg.cycle_weight as f32;
    let g_loss = g.weighted_sum(&[(adv_i, 1.0), (adv_m, 1.0), (cyc_m, w), (cyc_i, w)]);
    let g_value = g.value(g_loss).to_scalar() as f64;
    let cycle_value = g.value(cycle).to_scalar() as f64;
    check_finite(g_value, epoch, step, "generator loss")?;
    let fake_i_value = g.value(fake_i).clone();
    let fake_m_value = g.value(fake_m).clone();
    let mut grads = g.backward(g_loss);
    drop(g);
    let g_mi_grads = grads.for_tag(G_MI, gan.mask_to_image.params.len());
    let g_im_grads = grads.for_tag(G_IM, gan.image_to_mask.params.len());

    // discriminators on detached fakes
    let mut d = Graph::new();
    let real_i = d.input(batch.reals.clone());
    let real_m = d.input(batch.masks.clone());
    let fi = d.input(fake_i_value);
    let fm = d.input(fake_m_value);
    let mut cx = Ctx::new(&mut d, D_I, &gan.image_critic.params);
    let sr_i = gan.image_critic.forward(&mut cx, real_i);
    let sf_i = gan.image_critic.forward(&mut cx, fi);
    let mut cx = Ctx::new(&mut d, D_M, &gan.mask_critic.params);
    let sr_m = gan.mask_critic.forward(&mut cx, real_m);
    let sf_m = gan.mask_critic.forward(&mut cx, fm);
    let terms = [
        adversarial(&mut d, kind, sr_i, 1.0),
        adversarial(&mut d, kind, sf_i, 0.0),
        adversarial(&mut d, kind, sr_m, 1.0),
        adversarial(&mut d, kind, sf_m, 0.0),
    ];
    let d_loss = d.weighted_sum(&terms.map(|t| (t, 0.5)));
    let d_value = d.value(d_loss).to_scalar() as f64;
    check_finite(d_value, epoch, step, "discriminator loss")?;
    let mut dgrads = d.backward(d_loss);
    let d_i_grads = dgrads.for_tag(D_I, gan.image_critic.params.len());
    let d_m_grads = dgrads.for_tag(D_M, gan.mask_critic.params.len());

    opt.g_mi.step(&mut gan.mask_to_image.params, &g_mi_grads);
    opt.g_im.step(&mut gan.image_to_mask.params, &g_im_grads);
    opt.d_i.step(&mut gan.image_critic.params, &d_i_grads);
    opt.d_m.step(&mut gan.mask_critic.params, &d_m_grads);
    Ok(StepLosses {
        g: g_value,
        d: d_value,
        cycle: cycle_value,
    })
}

/// Trains the cycle-consistent model on mini-batches of paired real patches
/// and augmented masks. Batches are visited in a fresh seeded order every
/// epoch. `on_epoch` runs after each completed epoch (e.g. to checkpoint);
/// on divergence the error is returned before the offending update is
/// applied, so the last checkpoint written by `on_epoch` stays valid.
pub fn train(
    batches: &[PairedBatch],
    cfg: &SynthesisConfig,
    mut on_epoch: impl FnMut(&CycleGan, &SynthEpoch) -> Result<()>,
) -> Result<(CycleGan, SynthesisLog)> {
    cfg.validate()?;
    let batches: Vec<&PairedBatch> = batches.iter().filter(|b| !b.is_empty()).collect();
    ensure_arg!(
        !batches.is_empty(),
        "synthesis training needs at least one non-empty batch"
    );
    let prepared = batches
        .iter()
        .map(|b| prepare(b, cfg.image_size))
        .collect::<Result<Vec<_>>>()?;
    let mut gan = CycleGan::new(cfg);
    let lr = cfg.learning_rate as f32;
    let mut opt = Optimizers {
        g_mi: Adam::new(&gan.mask_to_image.params, lr, 0.5, 0.999),
        g_im: Adam::new(&gan.image_to_mask.params, lr, 0.5, 0.999),
        d_i: Adam::new(&gan.image_critic.params, lr, 0.5, 0.999),
        d_m: Adam::new(&gan.mask_critic.params, lr, 0.5, 0.999),
    };
    let mut order_rng = seeded(derive_seed(cfg.seed, "synthesis/order"));
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut log = SynthesisLog::default();
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let (mut g_sum, mut d_sum, mut c_sum) = (0.0, 0.0, 0.0);
        for &b in &order {
            let l = train_step(&mut gan, &mut opt, &prepared[b], cfg, epoch, step)?;
            g_sum += l.g;
            d_sum += l.d;
            c_sum += l.cycle;
            step += 1;
        }
        let n = order.len() as f64;
        gan.mask_to_image.epoch = epoch;
        gan.image_to_mask.epoch = epoch;
        let stats = SynthEpoch {
            epoch,
            g_loss: g_sum / n,
            d_loss: d_sum / n,
            cycle_loss: c_sum / n,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&gan, &stats)?;
        log.epochs.push(stats);
    }
    Ok((gan, log))
}

/// Synthetic images from (augmented) masks with a mask→image generator.
pub fn synthesize<T: ImageTranslator>(gen: &T, masks: &[GrayImage]) -> Result<Vec<GrayImage>> {
    ensure_arg!(
        gen.direction() == Direction::MaskToImage,
        "synthesis needs a mask-to-image generator, got {}",
        gen.direction()
    );
    masks.iter().map(|m| gen.translate(m)).collect()
}

/// Mean absolute difference, in `[0, 255]` units, between `img` and its
/// round trip through `forward` then `back`.
pub fn cycle_error<A: ImageTranslator, B: ImageTranslator>(forward: &A, back: &B, img: &GrayImage) -> Result<f64> {
    ensure_arg!(
        forward.direction() == back.direction().reverse(),
        "cycle needs complementary generators, got {} and {}",
        forward.direction(),
        back.direction()
    );
    let round = back.translate(&forward.translate(img)?)?;
    let total: f64 = img
        .pixels()
        .iter()
        .zip(round.pixels())
        .map(|(&a, &b)| (a as f64 - b as f64).abs())
        .sum();
    Ok(total / img.pixels().len() as f64)
}

/// Two-parameter linear cycle: `forward(x) = a·x`, `back(y) = b·y`. Used
/// to check cycle-loss gradients against finite differences without the
/// tensor engine.
pub mod linear_stub {
    /// `mean|b·a·x − x| + mean|a·b·y − y|`.
    pub fn cycle_loss(a: f64, b: f64, xs: &[f64], ys: &[f64]) -> f64 {
        let fx: f64 = xs.iter().map(|&x| (b * a * x - x).abs()).sum::<f64>() / xs.len() as f64;
        let fy: f64 = ys.iter().map(|&y| (a * b * y - y).abs()).sum::<f64>() / ys.len() as f64;
        fx + fy
    }

    /// Analytic `(∂/∂a, ∂/∂b)` of [`cycle_loss`] away from its kinks.
    pub fn cycle_loss_grad(a: f64, b: f64, xs: &[f64], ys: &[f64]) -> (f64, f64) {
        let mut ga = 0.0;
        let mut gb = 0.0;
        for &x in xs {
            let s = (a * b * x - x).signum();
            ga += s * b * x / xs.len() as f64;
            gb += s * a * x / xs.len() as f64;
        }
        for &y in ys {
            let s = (a * b * y - y).signum();
            ga += s * b * y / ys.len() as f64;
            gb += s * a * y / ys.len() as f64;
        }
        (ga, gb)
    }
}
