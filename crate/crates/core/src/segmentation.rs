//! Encoder-decoder segmentation network trained with soft Dice loss on
//! (synthetic image, clean mask) pairs.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_arg, Error, Result};
use crate::nn::{
    image_to_tensor, Adam, Checkpoint, Conv2d, ConvSpec, Ctx, Graph, Init, NodeId, PadMode, ParamStore, Tensor,
};
use crate::par;
use crate::raster::{GrayImage, MaskImage, ProbMap};
use crate::rng::{derive_seed, seeded, SimRng};
use crate::stitcher::PatchSegmenter;

/// `1 - (2 Σ p·t + ε) / (Σ p + Σ t + ε)`.
pub fn dice_loss(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    ensure_arg!(
        pred.len() == target.len(),
        "prediction has {} values, target {}",
        pred.len(),
        target.len()
    );
    let (mut inter, mut total) = (0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        total += p + t;
    }
    Ok(1.0 - (2.0 * inter + eps) / (total + eps))
}

/// Gradient of [`dice_loss`] with respect to `pred`.
pub fn dice_loss_grad(pred: &[f64], target: &[f64], eps: f64) -> Result<Vec<f64>> {
    ensure_arg!(pred.len() == target.len(), "prediction and target lengths differ");
    let (mut inter, mut total) = (0.0, 0.0);
    for (&p, &t) in pred.iter().zip(target) {
        inter += p * t;
        total += p + t;
    }
    let num = 2.0 * inter + eps;
    let den = total + eps;
    Ok(target.iter().map(|&t| -(2.0 * t * den - num) / (den * den)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentationConfig {
    pub epochs: usize,
    pub input_size: usize,
    pub learning_rate: f64,
    pub binarize_threshold: f64,
    pub dice_epsilon: f64,
    pub seed: u64,
    /// Number of 2× downsampling levels in the contracting path.
    pub depth: usize,
    /// Channels at the first level; doubled at each deeper level.
    pub base_channels: usize,
    pub batch_size: usize,
    /// Stop after this many optimizer steps, whatever the epoch count.
    pub max_steps: Option<usize>,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        SegmentationConfig {
            epochs: 10,
            input_size: 256,
            learning_rate: 1e-3,
            binarize_threshold: 0.5,
            dice_epsilon: 1e-6,
            seed: 0,
            depth: 4,
            base_channels: 64,
            batch_size: 4,
            max_steps: None,
        }
    }
}

impl SegmentationConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.epochs >= 1, "epochs must be >= 1");
        ensure_arg!(
            self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0,
            "binarize threshold must lie in (0, 1)"
        );
        ensure_arg!(self.depth >= 1, "depth must be >= 1");
        ensure_arg!(self.base_channels >= 1, "base_channels must be >= 1");
        ensure_arg!(self.batch_size >= 1, "batch size must be >= 1");
        ensure_arg!(self.dice_epsilon > 0.0, "dice epsilon must be positive");
        ensure_arg!(
            self.input_size.is_multiple_of(1 << self.depth),
            "input size {} is not divisible by 2^{}",
            self.input_size,
            self.depth
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetArch {
    pub depth: usize,
    pub base_channels: usize,
    pub input_size: usize,
}

#[derive(Debug, Clone, Copy)]
struct DoubleConv(Conv2d, Conv2d);

impl DoubleConv {
    fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut SimRng) -> Self {
        let spec = ConvSpec::same(3, PadMode::Zero);
        DoubleConv(
            Conv2d::new(store, &format!("{name}.0"), cin, cout, 3, spec, false, Init::He, rng),
            Conv2d::new(store, &format!("{name}.1"), cout, cout, 3, spec, false, Init::He, rng),
        )
    }

    fn forward(&self, cx: &mut Ctx<'_>, x: NodeId) -> NodeId {
        let mut h = x;
        for conv in [&self.0, &self.1] {
            h = conv.forward(cx, h);
            h = cx.g.instance_norm(h);
            h = cx.g.relu(h);
        }
        h
    }
}

#[derive(Debug, Clone)]
struct UNet {
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up_conv: Vec<Conv2d>,
    up: Vec<DoubleConv>,
    head: Conv2d,
}

impl UNet {
    fn build(arch: &UNetArch, store: &mut ParamStore, rng: &mut SimRng) -> Self {
        let ch = |level: usize| arch.base_channels << level;
        let mut down = Vec::new();
        let mut cin = 1;
        for level in 0..arch.depth {
            down.push(DoubleConv::new(store, &format!("down{level}"), cin, ch(level), rng));
            cin = ch(level);
        }
        let bottleneck = DoubleConv::new(store, "bottleneck", cin, ch(arch.depth), rng);
        let mut up_conv = Vec::new();
        let mut up = Vec::new();
        for level in (0..arch.depth).rev() {
            up_conv.push(Conv2d::new(
                store,
                &format!("upconv{level}"),
                ch(level + 1),
                ch(level),
                3,
                ConvSpec::same(3, PadMode::Zero),
                true,
                Init::He,
                rng,
            ));
            up.push(DoubleConv::new(
                store,
                &format!("up{level}"),
                2 * ch(level),
                ch(level),
                rng,
            ));
        }
        let head = Conv2d::new(
            store,
            "head",
            ch(0),
            1,
            1,
            ConvSpec::same(1, PadMode::Zero),
            true,
            Init::He,
            rng,
        );
        UNet {
            down,
            bottleneck,
            up_conv,
            up,
            head,
        }
    }

    /// Per-pixel probabilities for a `[n, 1, s, s]` input in `[-1, 1]`.
    fn forward(&self, cx: &mut Ctx<'_>, x: NodeId) -> NodeId {
        let mut skips = Vec::with_capacity(self.down.len());
        let mut h = x;
        for block in &self.down {
            h = block.forward(cx, h);
            skips.push(h);
            h = cx.g.maxpool2(h);
        }
        h = self.bottleneck.forward(cx, h);
        for (conv, block) in self.up_conv.iter().zip(&self.up) {
            h = cx.g.upsample2(h);
            h = conv.forward(cx, h);
            h = cx.g.relu(h);
            let skip = skips.pop().expect("one skip per level");
            h = cx.g.concat(skip, h);
            h = block.forward(cx, h);
        }
        let logits = self.head.forward(cx, h);
        cx.g.sigmoid(logits)
    }
}

#[derive(Debug, Clone)]
pub struct SegmentationModel {
    arch: UNetArch,
    net: UNet,
    params: ParamStore,
    seed: u64,
    epoch: usize,
}

impl SegmentationModel {
    pub fn new(arch: UNetArch, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let net = UNet::build(&arch, &mut params, &mut seeded(derive_seed(seed, "unet/init")));
        SegmentationModel {
            arch,
            net,
            params,
            seed,
            epoch: 0,
        }
    }

    pub fn arch(&self) -> &UNetArch {
        &self.arch
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    fn forward_batch(&self, batch: Tensor) -> Tensor {
        let mut g = Graph::new();
        let mut cx = Ctx::new(&mut g, 0, &self.params);
        let x = cx.g.input(batch);
        let y = self.net.forward(&mut cx, x);
        g.value(y).clone()
    }

    /// Foreground probabilities, same size as `patch`. The side lengths
    /// must be multiples of `2^depth`.
    pub fn predict(&self, patch: &GrayImage) -> Result<ProbMap> {
        Ok(self.predict_batch(std::slice::from_ref(patch))?.remove(0))
    }

    /// Resizes `patch` to the training input size, predicts, and resizes the
    /// probabilities back to the patch size.
    pub fn predict_resized(&self, patch: &GrayImage) -> Result<ProbMap> {
        let s = self.arch.input_size;
        let (w, h) = patch.dims();
        Ok(self.predict(&patch.resize_bilinear(s, s))?.resize_bilinear(w, h))
    }

    pub fn predict_batch(&self, patches: &[GrayImage]) -> Result<Vec<ProbMap>> {
        if patches.is_empty() {
            return Ok(Vec::new());
        }
        let dims = patches[0].dims();
        let unit = 1 << self.arch.depth;
        ensure_arg!(
            dims.0.is_multiple_of(unit) && dims.1.is_multiple_of(unit) && dims.0 > 0 && dims.1 > 0,
            "patch {}x{} is not divisible by {unit}",
            dims.0,
            dims.1
        );
        let items: Vec<Tensor> = patches.iter().map(image_to_tensor).collect();
        let y = self.forward_batch(Tensor::stack(&items)?);
        y.unstack()
            .into_iter()
            .map(|t| ProbMap::from_raw(dims.0, dims.1, t.into_vec()))
            .collect()
    }

    fn arch_json(&self) -> serde_json::Value {
        serde_json::json!({ "net": "unet", "arch": self.arch })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new("segmentation", self.arch_json(), self.seed, self.epoch, &self.params)
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.header.kind != "segmentation" {
            return Err(Error::Checkpoint(format!(
                "expected segmentation checkpoint, got {}",
                ck.header.kind
            )));
        }
        let arch: UNetArch = serde_json::from_value(ck.header.arch["arch"].clone())?;
        let mut model = SegmentationModel::new(arch, ck.header.seed);
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

impl PatchSegmenter for SegmentationModel {
    fn input_size(&self) -> usize {
        self.arch.input_size
    }

    fn predict_patch(&self, patch: &GrayImage) -> Result<ProbMap> {
        self.predict(patch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub steps: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SegmentationLog {
    pub epochs: Vec<SegEpoch>,
}

impl SegmentationLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "loss", "steps", "wall_seconds"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.6}", e.loss),
                e.steps.to_string(),
                format!("{:.3}", e.wall_seconds),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Converts a training pair to tensors at the model's input size.
fn prepare_pair(img: &GrayImage, mask: &MaskImage, size: usize) -> (Tensor, Tensor) {
    let x = image_to_tensor(&img.resize_bilinear(size, size));
    let m = mask.resize_nearest(size, size);
    let t = Tensor::from_vec([1, 1, size, size], m.pixels().iter().map(|&v| v as f32).collect()).expect("mask shape");
    (x, t)
}

/// Trains on `(fakes[i], masks[i])` pairs. `on_epoch` runs after each epoch
/// and may persist the model; an error from it aborts training.
pub fn train(
    fakes: &[GrayImage],
    masks: &[MaskImage],
    cfg: &SegmentationConfig,
    mut on_epoch: impl FnMut(&SegmentationModel, &SegEpoch) -> Result<()>,
) -> Result<(SegmentationModel, SegmentationLog)> {
    cfg.validate()?;
    ensure_arg!(!fakes.is_empty(), "no training pairs");
    ensure_arg!(
        fakes.len() == masks.len(),
        "{} images but {} masks",
        fakes.len(),
        masks.len()
    );
    let size = cfg.input_size;
    let pairs = par::map_indexed(fakes.len(), |i| prepare_pair(&fakes[i], &masks[i], size));
    let arch = UNetArch {
        depth: cfg.depth,
        base_channels: cfg.base_channels,
        input_size: size,
    };
    let mut model = SegmentationModel::new(arch, cfg.seed);
    let mut opt = Adam::new(&model.params, cfg.learning_rate as f32, 0.9, 0.999);
    let mut order_rng = seeded(derive_seed(cfg.seed, "unet/order"));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = SegmentationLog::default();
    let mut steps = 0;
    'epochs: for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut epoch_steps) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let xs: Vec<Tensor> = chunk.iter().map(|&i| pairs[i].0.clone()).collect();
            let ts: Vec<Tensor> = chunk.iter().map(|&i| pairs[i].1.clone()).collect();
            let mut g = Graph::new();
            let loss = {
                let mut cx = Ctx::new(&mut g, 0, &model.params);
                let x = cx.g.input(Tensor::stack(&xs)?);
                let p = model.net.forward(&mut cx, x);
                g.soft_dice(p, Tensor::stack(&ts)?, cfg.dice_epsilon)
            };
            let value = g.value(loss).to_scalar() as f64;
            if !value.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    step: steps,
                    what: "dice loss".into(),
                });
            }
            let grads = g.backward(loss).for_tag(0, model.params.len());
            opt.step(&mut model.params, &grads);
            loss_sum += value;
            epoch_steps += 1;
            steps += 1;
        }
        if epoch_steps == 0 {
            break 'epochs;
        }
        model.epoch = epoch;
        let stats = SegEpoch {
            epoch,
            loss: loss_sum / epoch_steps as f64,
            steps: epoch_steps,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&model, &stats)?;
        log.epochs.push(stats);
    }
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_loss_values() {
        let eps = 1e-6;
        let t = [1.0, 0.0, 1.0, 1.0];
        assert!(dice_loss(&t, &t, eps).unwrap().abs() < 1e-6);
        let ones = [1.0; 4];
        let zeros = [0.0; 4];
        assert!((dice_loss(&ones, &zeros, eps).unwrap() - 1.0).abs() < 1e-6);
        let half = [0.5; 4];
        let target = [1.0, 1.0, 0.0, 0.0];
        let expect = 1.0 - (2.0 * 1.0 + eps) / (2.0 + 2.0 + eps);
        assert!((dice_loss(&half, &target, eps).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.5).abs() < 1e-6);
        assert!(dice_loss(&half, &[1.0], eps).is_err());
        // both empty: loss 0
        assert_eq!(dice_loss(&zeros, &zeros, eps).unwrap(), 0.0);
    }

    #[test]
    fn config_validation() {
        assert!(SegmentationConfig::default().validate().is_ok());
        let bad = SegmentationConfig {
            binarize_threshold: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SegmentationConfig {
            input_size: 100,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SegmentationConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn predict_shape_range_and_determinism() {
        let arch = UNetArch {
            depth: 2,
            base_channels: 4,
            input_size: 16,
        };
        let m = SegmentationModel::new(arch, 3);
        let img = GrayImage::from_fn(16, 16, |x, y| (x * 16 + y) as u8);
        let p = m.predict(&img).unwrap();
        assert_eq!(p.dims(), (16, 16));
        assert!(p.values().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(p, m.predict(&img).unwrap());
        assert!(m.predict(&GrayImage::new(10, 10)).is_err());
    }

    #[test]
    fn train_rejects_bad_inputs() {
        let cfg = SegmentationConfig {
            input_size: 16,
            depth: 2,
            base_channels: 2,
            epochs: 1,
            ..Default::default()
        };
        assert!(train(&[], &[], &cfg, |_, _| Ok(())).is_err());
        let img = vec![GrayImage::new(16, 16)];
        assert!(train(&img, &[], &cfg, |_, _| Ok(())).is_err());
    }
}
