//! Training loops and tiled inference built on the models.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::cdgan::{
    to_signed_map, Discriminator, DiscriminatorConfig, GanBatch, GanTrainConfig, GanTrainer, Generator, GeneratorConfig,
};
use crate::data::checkpoint::{self, Checkpoint, CheckpointMeta};
use crate::data::io::{self, PairImages, Split};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::optim::{sigmoid_cross_entropy, Adam, AdamConfig, LrSchedule};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};
use crate::tiling::{self, PatchPrediction, TilePlan};
use crate::wnet::{WNet, WNetConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Wnet,
    Cdgan,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Wnet => "wnet",
            ModelKind::Cdgan => "cdgan",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wnet" => Ok(ModelKind::Wnet),
            "cdgan" => Ok(ModelKind::Cdgan),
            other => Err(Error::InvalidArgument(format!("unknown model kind '{other}'"))),
        }
    }
}

/// Copy a `size x size` window at `(x, y)` out of an `N x C x H x W` tensor.
pub fn crop_tensor<T: Element>(t: &Tensor<T>, x: usize, y: usize, size: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = t.dims4()?;
    if x + size > w || y + size > h {
        return Err(Error::InvalidArgument(format!(
            "crop {size} at ({x}, {y}) exceeds {w}x{h}"
        )));
    }
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in t.data().chunks(h * w) {
        for row in y..y + size {
            out.extend_from_slice(&plane[row * w + x..row * w + x + size]);
        }
    }
    Ok(Tensor::from_parts(vec![n, c, size, size], out))
}

/// A pair of epochs with a `{0, 1}` change mask, as `1 x C x H x W` tensors.
#[derive(Clone, Debug)]
pub struct Sample<T: Element = f32> {
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    pub mask: Tensor<T>,
}

impl<T: Element> Sample<T> {
    pub fn from_images(pair: &PairImages) -> Self {
        Self {
            x1: io::rgb_to_tensor(&pair.t1),
            x2: io::rgb_to_tensor(&pair.t2),
            mask: io::mask_to_tensor(&pair.gt),
        }
    }

    pub fn size(&self) -> (usize, usize) {
        let s = self.x1.shape();
        (s[2], s[3])
    }

    pub fn crop(&self, x: usize, y: usize, size: usize) -> Result<Self> {
        Ok(Self {
            x1: crop_tensor(&self.x1, x, y, size)?,
            x2: crop_tensor(&self.x2, x, y, size)?,
            mask: crop_tensor(&self.mask, x, y, size)?,
        })
    }

    pub fn random_crop(&self, size: usize, rng: &mut RngStream) -> Result<Self> {
        let (h, w) = self.size();
        if size > h || size > w {
            return Err(Error::InvalidArgument(format!("patch {size} exceeds {w}x{h} image")));
        }
        let x = rng.int_range(0, w - size);
        let y = rng.int_range(0, h - size);
        self.crop(x, y, size)
    }

    pub fn center_crop(&self, size: usize) -> Result<Self> {
        let (h, w) = self.size();
        if size > h || size > w {
            return Err(Error::InvalidArgument(format!("patch {size} exceeds {w}x{h} image")));
        }
        self.crop((w - size) / 2, (h - size) / 2, size)
    }
}

/// Stack samples into one batch.
pub fn stack<T: Element>(samples: &[Sample<T>]) -> Result<Sample<T>> {
    let x1: Vec<_> = samples.iter().map(|s| s.x1.clone()).collect();
    let x2: Vec<_> = samples.iter().map(|s| s.x2.clone()).collect();
    let m: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    Ok(Sample {
        x1: Tensor::stack_batch(&x1)?,
        x2: Tensor::stack_batch(&x2)?,
        mask: Tensor::stack_batch(&m)?,
    })
}

/// W-Net with its Adam state, trained on per-pixel cross-entropy.
pub struct WNetTrainer<T: Element = f32> {
    pub model: WNet<T>,
    adam: Adam<T>,
}

impl<T: Element> WNetTrainer<T> {
    pub fn new(model: WNet<T>, adam: AdamConfig) -> Self {
        let adam = Adam::new(adam, model.params());
        Self { model, adam }
    }

    pub fn adam(&self) -> &Adam<T> {
        &self.adam
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.adam.set_lr(lr);
    }

    /// One Adam step on a batch; returns the loss before the update.
    pub fn step(&mut self, batch: &Sample<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape, true);
        let x1 = tape.constant(batch.x1.clone());
        let x2 = tape.constant(batch.x2.clone());
        let logits = self.model.forward(&mut tape, &bound, x1, x2)?;
        let loss = sigmoid_cross_entropy(&mut tape, logits, &batch.mask)?;
        let value = tape.value(loss).data()[0].to_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss ({value})")));
        }
        let mut grads = tape.backward(loss)?;
        let grads = bound.gradients(&mut grads, self.model.params());
        self.adam.step(self.model.params_mut(), &grads)?;
        Ok(value)
    }

    pub fn loss(&self, batch: &Sample<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape, false);
        let x1 = tape.constant(batch.x1.clone());
        let x2 = tape.constant(batch.x2.clone());
        let logits = self.model.forward(&mut tape, &bound, x1, x2)?;
        let loss = sigmoid_cross_entropy(&mut tape, logits, &batch.mask)?;
        Ok(tape.value(loss).data()[0].to_f64())
    }
}

/// Fraction of pixels whose thresholded prediction matches the mask.
pub fn pixel_accuracy<T: Element>(prob: &Tensor<T>, mask: &Tensor<T>) -> f64 {
    let half = T::from_f64(0.5);
    let hits = prob
        .data()
        .iter()
        .zip(mask.data())
        .filter(|(&p, &m)| (p > half) == (m > half))
        .count();
    hits as f64 / prob.numel() as f64
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub epochs: usize,
    pub batch: usize,
    pub base_width: f64,
    /// Training crop size; `None` uses the largest multiple of 16 up to 256
    /// that fits the images.
    pub patch: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub lambda: f64,
    pub seed: u64,
    pub g_per_d: usize,
    pub patience: usize,
    pub decay: f64,
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sched = LrSchedule::default();
        Self {
            model: ModelKind::Wnet,
            epochs: 10,
            batch: 4,
            base_width: 0.125,
            patch: None,
            lr: crate::optim::DEFAULT_LR,
            beta1: crate::optim::DEFAULT_BETA1,
            lambda: crate::cdgan::DEFAULT_LAMBDA,
            seed: 0,
            g_per_d: crate::cdgan::DEFAULT_G_PER_D,
            patience: sched.patience,
            decay: sched.factor,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            ..AdamConfig::default()
        }
    }

    fn schedule(&self) -> LrSchedule {
        LrSchedule {
            initial_lr: self.lr,
            patience: self.patience,
            factor: self.decay,
            ..LrSchedule::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::InvalidConfig("epochs and batch must be positive".into()));
        }
        if self.lr.is_nan() || self.lr <= 0.0 || !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::InvalidConfig("lr must be positive and beta1 in [0, 1)".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::InvalidConfig("decay factor must be in (0, 1]".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::InvalidConfig("lambda must be non-negative".into()));
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub enum LogRow {
    Wnet {
        step: u64,
        loss: f64,
        lr: f64,
        wall_ms: u128,
    },
    Gan {
        step: u64,
        d_loss: f64,
        g_loss_adv: f64,
        g_loss_l1: f64,
        wall_ms: u128,
    },
}

impl LogRow {
    pub fn header(kind: ModelKind) -> &'static str {
        match kind {
            ModelKind::Wnet => "step,loss,lr,wall_ms",
            ModelKind::Cdgan => "step,d_loss,g_loss_adv,g_loss_l1,wall_ms",
        }
    }

    pub fn csv(&self) -> String {
        match self {
            LogRow::Wnet {
                step,
                loss,
                lr,
                wall_ms,
            } => format!("{step},{loss:.8},{lr:e},{wall_ms}"),
            LogRow::Gan {
                step,
                d_loss,
                g_loss_adv,
                g_loss_l1,
                wall_ms,
            } => format!("{step},{d_loss:.8},{g_loss_adv:.8},{g_loss_l1:.8},{wall_ms}"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
    pub val_history: Vec<f64>,
    pub steps: u64,
    pub d_updates: u64,
    pub g_updates: u64,
}

fn default_patch(h: usize, w: usize) -> usize {
    (h.min(w).min(256) / 16) * 16
}

/// Train on an in-memory dataset and return the final checkpoint.
pub fn train(config: &TrainConfig, pairs: &[PairImages]) -> Result<TrainOutcome> {
    config.validate()?;
    let train: Vec<Sample<f32>> = pairs
        .iter()
        .filter(|p| p.split == Split::Train)
        .map(Sample::from_images)
        .collect();
    if train.is_empty() {
        return Err(Error::InvalidArgument("dataset has no training records".into()));
    }
    let mut val: Vec<Sample<f32>> = pairs
        .iter()
        .filter(|p| p.split == Split::Val)
        .map(Sample::from_images)
        .collect();
    if val.is_empty() {
        val = train.clone();
    }
    let (h, w) = train.iter().map(Sample::size).min().unwrap_or((0, 0));
    let patch = config.patch.unwrap_or_else(|| default_patch(h, w));
    if patch == 0 || !patch.is_multiple_of(16) || patch > h.min(w) {
        return Err(Error::InvalidConfig(format!(
            "training patch {patch} must be a positive multiple of 16 within the {w}x{h} images"
        )));
    }
    let val: Vec<Sample<f32>> = val.iter().map(|s| s.center_crop(patch)).collect::<Result<_>>()?;

    let mut rng = RngStream::new(config.seed);
    let mut init_rng = rng.fork();
    let schedule = config.schedule();
    let start = Instant::now();
    let mut log = Vec::new();
    let mut history = Vec::new();
    let mut steps = 0u64;
    let budget = config.max_steps.unwrap_or(u64::MAX);

    let mut attrs = std::collections::BTreeMap::new();
    attrs.insert("model".to_string(), config.model.to_string());
    attrs.insert("train_config".to_string(), serde_json::to_string(config)?);

    let (params, d_updates, g_updates): (ParamSet<f32>, u64, u64) = match config.model {
        ModelKind::Wnet => {
            let wcfg = WNetConfig::scaled(config.base_width, patch);
            attrs.insert("wnet_config".into(), serde_json::to_string(&wcfg)?);
            let mut trainer = WNetTrainer::new(WNet::<f32>::new(wcfg, &mut init_rng)?, config.adam());
            'epochs: for _ in 0..config.epochs {
                let mut order: Vec<usize> = (0..train.len()).collect();
                rng.shuffle(&mut order);
                for chunk in order.chunks(config.batch) {
                    if steps >= budget {
                        break 'epochs;
                    }
                    let crops: Vec<Sample<f32>> = chunk
                        .iter()
                        .map(|&i| train[i].random_crop(patch, &mut rng))
                        .collect::<Result<_>>()?;
                    let loss = trainer.step(&stack(&crops)?)?;
                    steps += 1;
                    log.push(LogRow::Wnet {
                        step: steps,
                        loss,
                        lr: trainer.adam().lr(),
                        wall_ms: start.elapsed().as_millis(),
                    });
                }
                let v: f64 = val.iter().map(|s| trainer.loss(s)).sum::<Result<f64>>()? / val.len() as f64;
                history.push(v);
                trainer.set_lr(schedule.lr_for(&history)?);
            }
            (trainer.model.params().clone(), 0, 0)
        }
        ModelKind::Cdgan => {
            let gcfg = GeneratorConfig::scaled(config.base_width, patch);
            let dcfg = DiscriminatorConfig::scaled(config.base_width, patch);
            attrs.insert("generator_config".into(), serde_json::to_string(&gcfg)?);
            attrs.insert("discriminator_config".into(), serde_json::to_string(&dcfg)?);
            let g = Generator::<f32>::new(gcfg, &mut init_rng)?;
            let d = Discriminator::<f32>::new(dcfg, &mut init_rng)?;
            let mut trainer = GanTrainer::new(
                g,
                d,
                GanTrainConfig {
                    lambda: config.lambda,
                    g_updates_per_d: config.g_per_d,
                    adam: config.adam(),
                },
            );
            'gan: for _ in 0..config.epochs {
                let mut order: Vec<usize> = (0..train.len()).collect();
                rng.shuffle(&mut order);
                for chunk in order.chunks(config.batch) {
                    if steps >= budget {
                        break 'gan;
                    }
                    let crops: Vec<Sample<f32>> = chunk
                        .iter()
                        .map(|&i| train[i].random_crop(patch, &mut rng))
                        .collect::<Result<_>>()?;
                    let b = stack(&crops)?;
                    let batch = GanBatch {
                        target: to_signed_map(&b.mask),
                        x1: b.x1,
                        x2: b.x2,
                    };
                    let report = trainer.step(&batch, &mut rng)?;
                    steps += 1;
                    log.push(LogRow::Gan {
                        step: steps,
                        d_loss: report.d_loss,
                        g_loss_adv: report.g_loss_adv,
                        g_loss_l1: report.g_loss_l1,
                        wall_ms: start.elapsed().as_millis(),
                    });
                }
                // Validation: mean absolute error of the generated map.
                let mut total = 0.0;
                for s in &val {
                    let z = trainer.generator.sample_noise(1, &mut rng)?;
                    let out = trainer.generator.generate(&s.x1, &s.x2, z.as_ref())?;
                    let target = to_signed_map(&s.mask);
                    total += out
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&a, &b)| (a - b).abs() as f64)
                        .sum::<f64>()
                        / out.numel() as f64;
                }
                history.push(total / val.len() as f64);
                trainer.set_lr(schedule.lr_for(&history)?);
            }
            let mut params = trainer.generator.params().clone();
            for (name, t) in trainer.discriminator.params().iter() {
                params.push(name, t.clone());
            }
            (params, trainer.d_updates(), trainer.g_updates())
        }
    };

    let lr = if history.is_empty() {
        config.lr
    } else {
        schedule.lr_for(&history)?
    };
    let meta = CheckpointMeta {
        step: steps,
        lr,
        seed: config.seed,
        attrs,
    };
    let bytes = checkpoint::encode(&meta, &params);
    Ok(TrainOutcome {
        checkpoint: checkpoint::decode(&bytes)?,
        log,
        val_history: history,
        steps,
        d_updates,
        g_updates,
    })
}

/// A trained change detector restored from a checkpoint.
pub enum Detector {
    Wnet(WNet<f32>),
    Cdgan { generator: Generator<f32>, noise_seed: u64 },
}

impl Detector {
    /// Rebuild the model for `patch x patch` inputs and load its weights.
    pub fn from_checkpoint(ck: &Checkpoint, patch: usize) -> Result<Self> {
        let kind: ModelKind = ck.attr("model")?.parse()?;
        let mut rng = RngStream::new(0);
        match kind {
            ModelKind::Wnet => {
                let mut cfg: WNetConfig = serde_json::from_str(ck.attr("wnet_config")?)?;
                cfg.input_size = patch;
                let mut net = WNet::<f32>::new(cfg, &mut rng)?;
                ck.load_into(net.params_mut())?;
                Ok(Detector::Wnet(net))
            }
            ModelKind::Cdgan => {
                let mut cfg: GeneratorConfig = serde_json::from_str(ck.attr("generator_config")?)?;
                cfg.wnet.input_size = patch;
                let mut generator = Generator::<f32>::new(cfg, &mut rng)?;
                // The checkpoint also carries the discriminator; only the
                // generator tensors are needed for inference.
                let names: Vec<String> = generator.params().names().to_vec();
                let subset = Checkpoint {
                    meta: ck.meta.clone(),
                    tensors: ck.tensors.iter().filter(|(n, _)| names.contains(n)).cloned().collect(),
                };
                subset.load_into(generator.params_mut())?;
                Ok(Detector::Cdgan {
                    generator,
                    noise_seed: ck.meta.seed,
                })
            }
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Detector::Wnet(_) => ModelKind::Wnet,
            Detector::Cdgan { .. } => ModelKind::Cdgan,
        }
    }

    /// Change probabilities in `[0, 1]` for one window pair. Generator output
    /// is mapped from `[-1, 1]` to `[0, 1]`.
    pub fn predict(&self, x1: &Tensor<f32>, x2: &Tensor<f32>, rng: &mut RngStream) -> Result<Vec<f64>> {
        match self {
            Detector::Wnet(net) => Ok(net.predict(x1, x2)?.data().iter().map(|&v| v as f64).collect()),
            Detector::Cdgan { generator, .. } => {
                let z = generator.sample_noise(x1.shape()[0], rng)?;
                let out = generator.generate(x1, x2, z.as_ref())?;
                Ok(out.data().iter().map(|&v| tiling::tanh_to_unit(v as f64)).collect())
            }
        }
    }

    fn noise_seed(&self) -> u64 {
        match self {
            Detector::Wnet(_) => 0,
            Detector::Cdgan { noise_seed, .. } => *noise_seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InferOutput {
    pub plan: TilePlan,
    pub prob: Vec<f64>,
    pub binary: Vec<bool>,
}

/// Tile both images, predict every window and average overlaps.
pub fn infer_images(
    detector: &Detector,
    t1: &RgbImage,
    t2: &RgbImage,
    patch: usize,
    stride: usize,
    threshold: f64,
) -> Result<InferOutput> {
    if t1.dimensions() != t2.dimensions() {
        return Err(Error::shape(
            "infer",
            &[t1.width() as usize, t1.height() as usize],
            &[t2.width() as usize, t2.height() as usize],
        ));
    }
    let (w, h) = (t1.width() as usize, t1.height() as usize);
    let plan = tiling::plan_tiles(w, h, patch, stride)?;
    let mut rng = RngStream::new(detector.noise_seed());
    let mut preds = Vec::with_capacity(plan.len());
    for origin in plan.windows() {
        let a =
            RgbImage::from_raw(patch as u32, patch as u32, plan.extract(t1.as_raw(), 3, origin)).expect("window size");
        let b =
            RgbImage::from_raw(patch as u32, patch as u32, plan.extract(t2.as_raw(), 3, origin)).expect("window size");
        let values = detector.predict(&io::rgb_to_tensor(&a), &io::rgb_to_tensor(&b), &mut rng)?;
        preds.push(PatchPrediction { origin, values });
    }
    let prob = tiling::stitch(&preds, &plan)?;
    let binary = tiling::threshold(&prob, threshold)?;
    Ok(InferOutput { plan, prob, binary })
}

/// Per-pixel image differencing baseline: channel-mean `|t2 - t1|`,
/// min-max normalised to `[0, 1]`. A flat difference maps to all zeros.
pub fn difference_map(t1: &RgbImage, t2: &RgbImage) -> Result<Vec<f64>> {
    if t1.dimensions() != t2.dimensions() {
        return Err(Error::shape(
            "difference_map",
            &[t1.width() as usize, t1.height() as usize],
            &[t2.width() as usize, t2.height() as usize],
        ));
    }
    let diff: Vec<f64> = t1
        .pixels()
        .zip(t2.pixels())
        .map(|(a, b)| {
            (0..3)
                .map(|c| (f64::from(a.0[c]) - f64::from(b.0[c])).abs())
                .sum::<f64>()
                / 3.0
        })
        .collect();
    let lo = diff.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = diff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        return Ok(vec![0.0; diff.len()]);
    }
    Ok(diff.iter().map(|d| (d - lo) / (hi - lo)).collect())
}

/// Load a dataset directory and train on it.
pub fn train_from_dir(config: &TrainConfig, data: &Path) -> Result<TrainOutcome> {
    train(config, &io::load_dataset(data)?)
}
