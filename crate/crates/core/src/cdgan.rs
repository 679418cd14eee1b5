//! Conditional GAN for change detection: a W-Net generator with a tanh head
//! and per-pixel noise input, judged by a strided convolutional discriminator
//! over (image pair, change map) triples.

use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ConvKind, ConvLayer, ParamSet, INIT_STD};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{gaussian_init, RngStream};
use crate::tensor::{Element, Tensor};
use crate::wnet::{WNet, WNetConfig};

/// Parameter count reported for the full-size generator plus discriminator.
pub const REFERENCE_PARAM_COUNT: usize = 123_045_378;

pub const DEFAULT_LAMBDA: f64 = 100.0;
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.2;
pub const DEFAULT_G_PER_D: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub wnet: WNetConfig,
    pub noise_channels: usize,
}

impl GeneratorConfig {
    pub fn scaled(base_width: f64, input_size: usize) -> Self {
        let noise_channels = 1;
        Self {
            wnet: WNetConfig {
                input_size,
                input_channels: 3 + noise_channels,
                base_width,
                kernel_size: 5,
                share_branch_weights: false,
            },
            noise_channels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.wnet.validate()?;
        if self.wnet.input_channels < self.noise_channels {
            return Err(Error::InvalidConfig(
                "generator input channels must include the noise channels".into(),
            ));
        }
        Ok(())
    }

    pub fn image_channels(&self) -> usize {
        self.wnet.input_channels - self.noise_channels
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub input_size: usize,
    /// Channels of the conditioning pair plus the change map.
    pub input_channels: usize,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    pub leaky_slope: f64,
}

impl DiscriminatorConfig {
    pub fn scaled(base_width: f64, input_size: usize) -> Self {
        Self {
            input_size,
            input_channels: 3 + 3 + 1,
            channels: [64, 128, 256, 512]
                .iter()
                .map(|&c| ((c as f64 * base_width).round() as usize).max(1))
                .collect(),
            kernel_size: 5,
            stride: 2,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidConfig("discriminator channels must be positive".into()));
        }
        if self.kernel_size.is_multiple_of(2) || self.stride == 0 || self.input_size == 0 {
            return Err(Error::InvalidConfig("invalid discriminator geometry".into()));
        }
        Ok(())
    }

    /// Spatial extent of the last feature map before flattening.
    pub fn final_extent(&self) -> usize {
        let pad = self.kernel_size / 2;
        self.channels.iter().fold(self.input_size, |s, _| {
            (s + 2 * pad - self.kernel_size) / self.stride + 1
        })
    }

    pub fn dense_inputs(&self) -> usize {
        let e = self.final_extent();
        e * e * self.channels.last().copied().unwrap_or(1)
    }
}

#[derive(Clone, Debug)]
pub struct Generator<T: Element = f32> {
    config: GeneratorConfig,
    net: WNet<T>,
}

impl<T: Element> Generator<T> {
    pub fn new(config: GeneratorConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let net = WNet::new(config.wnet.clone(), rng)?;
        Ok(Self { config, net })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn net(&self) -> &WNet<T> {
        &self.net
    }

    pub fn params(&self) -> &ParamSet<T> {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.net.params_mut()
    }

    /// Standard-normal noise for a batch of `n` samples.
    pub fn sample_noise(&self, n: usize, rng: &mut RngStream) -> Result<Option<Tensor<T>>> {
        if self.config.noise_channels == 0 {
            return Ok(None);
        }
        let s = self.config.wnet.input_size;
        Ok(Some(rng.normal_tensor(&[n, self.config.noise_channels, s, s], 1.0)?))
    }

    /// Change map in `[-1, 1]`. The noise is appended as extra channels to
    /// each branch input.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x1: Var, x2: Var, z: Option<Var>) -> Result<Var> {
        let (a, b) = match (self.config.noise_channels, z) {
            (0, None) => (x1, x2),
            (0, Some(_)) => {
                return Err(Error::InvalidArgument(
                    "noise given to a generator without noise channels".into(),
                ))
            }
            (_, None) => return Err(Error::InvalidArgument("generator requires a noise tensor".into())),
            (_, Some(z)) => (tape.concat_channels(&[x1, z])?, tape.concat_channels(&[x2, z])?),
        };
        Ok(self.net.trace(tape, bound, a, b, Some(Activation::Tanh))?.logits)
    }

    pub fn generate(&self, x1: &Tensor<T>, x2: &Tensor<T>, z: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params().bind(&mut tape, false);
        let a = tape.constant(x1.clone());
        let b = tape.constant(x2.clone());
        let z = z.map(|z| tape.constant(z.clone()));
        let out = self.forward(&mut tape, &bound, a, b, z)?;
        Ok(tape.value(out).clone())
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator<T: Element = f32> {
    config: DiscriminatorConfig,
    params: ParamSet<T>,
    convs: Vec<ConvLayer>,
    dense_weight: usize,
    dense_bias: usize,
}

impl<T: Element> Discriminator<T> {
    pub fn new(config: DiscriminatorConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut convs = Vec::with_capacity(config.channels.len());
        let mut cin = config.input_channels;
        for (i, &cout) in config.channels.iter().enumerate() {
            convs.push(ConvLayer::init(
                &mut params,
                rng,
                &format!("disc_conv_{}", i + 1),
                ConvKind::Conv,
                cin,
                cout,
                config.kernel_size,
                config.stride,
            )?);
            cin = cout;
        }
        let features = config.dense_inputs();
        let dense_weight = params.push("disc_dense.weight", gaussian_init(rng, &[features, 1], INIT_STD)?);
        let dense_bias = params.push("disc_dense.bias", Tensor::zeros(&[1])?);
        Ok(Self {
            config,
            params,
            convs,
            dense_weight,
            dense_bias,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn layers(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn closed_form_param_count(&self) -> usize {
        self.convs.iter().map(ConvLayer::param_count).sum::<usize>() + self.config.dense_inputs() + 1
    }

    /// Realness logits `N x 1`.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x1: Var, x2: Var, cm: Var) -> Result<Var> {
        let (s1, s2, s3) = (
            tape.value(x1).dims4()?,
            tape.value(x2).dims4()?,
            tape.value(cm).dims4()?,
        );
        if (s1.0, s1.2, s1.3) != (s2.0, s2.2, s2.3) || (s1.0, s1.2, s1.3) != (s3.0, s3.2, s3.3) {
            return Err(Error::shape(
                "discriminator_forward",
                tape.value(x1).shape(),
                tape.value(cm).shape(),
            ));
        }
        let mut h = tape.concat_channels(&[x1, x2, cm])?;
        let (_, c, hh, ww) = tape.value(h).dims4()?;
        let size = self.config.input_size;
        if c != self.config.input_channels || hh != size || ww != size {
            return Err(Error::shape(
                "discriminator_forward",
                tape.value(h).shape(),
                &[s1.0, self.config.input_channels, size, size],
            ));
        }
        for layer in &self.convs {
            let pre = layer.apply(tape, bound, h)?;
            h = tape.activation(Activation::LeakyRelu(self.config.leaky_slope), pre);
        }
        let flat = tape.flatten(h)?;
        tape.dense(flat, bound.var(self.dense_weight), bound.var(self.dense_bias))
    }

    /// Realness probabilities in `(0, 1)`, one per sample.
    pub fn probability(&self, x1: &Tensor<T>, x2: &Tensor<T>, cm: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let (a, b, c) = (
            tape.constant(x1.clone()),
            tape.constant(x2.clone()),
            tape.constant(cm.clone()),
        );
        let logits = self.forward(&mut tape, &bound, a, b, c)?;
        let p = tape.sigmoid(logits);
        Ok(tape.value(p).clone())
    }
}

/// `-[log D(real) + log(1 - D(fake))]`, batch-averaged, from logits.
pub fn discriminator_loss<T: Element>(tape: &mut Tape<T>, real_logits: Var, fake_logits: Var) -> Result<Var> {
    let ones = Tensor::full(tape.value(real_logits).shape(), T::one())?;
    let zeros = Tensor::zeros(tape.value(fake_logits).shape())?;
    let real = tape.bce_with_logits(real_logits, ones)?;
    let fake = tape.bce_with_logits(fake_logits, zeros)?;
    tape.add(real, fake)
}

/// Generator objective terms: non-saturating adversarial loss `-log D(fake)`
/// and the mean absolute deviation from the ground truth.
pub struct GeneratorLoss {
    pub adversarial: Var,
    pub l1: Var,
    pub total: Var,
}

pub fn generator_loss<T: Element>(
    tape: &mut Tape<T>,
    fake_logits: Var,
    fake_map: Var,
    target: &Tensor<T>,
    lambda: f64,
) -> Result<GeneratorLoss> {
    let ones = Tensor::full(tape.value(fake_logits).shape(), T::one())?;
    let adversarial = tape.bce_with_logits(fake_logits, ones)?;
    let l1 = tape.l1_loss(fake_map, target.clone())?;
    let weighted = tape.scale(l1, T::from_f64(lambda));
    let total = tape.add(adversarial, weighted)?;
    Ok(GeneratorLoss { adversarial, l1, total })
}

/// Map a `{0, 1}` mask to the generator's `{-1, +1}` range.
pub fn to_signed_map<T: Element>(mask: &Tensor<T>) -> Tensor<T> {
    mask.map(|v| if v > T::from_f64(0.5) { T::one() } else { -T::one() })
}

/// Conditioning pair plus a `{-1, +1}` ground-truth map.
#[derive(Clone, Debug)]
pub struct GanBatch<T: Element> {
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    pub target: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GanStepReport {
    pub d_loss: f64,
    pub g_loss: f64,
    pub g_loss_adv: f64,
    pub g_loss_l1: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub lambda: f64,
    pub g_updates_per_d: usize,
    pub adam: AdamConfig,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            g_updates_per_d: DEFAULT_G_PER_D,
            adam: AdamConfig::default(),
        }
    }
}

/// Generator, discriminator and their optimizers, alternating one
/// discriminator update with `g_updates_per_d` generator updates.
pub struct GanTrainer<T: Element = f32> {
    pub generator: Generator<T>,
    pub discriminator: Discriminator<T>,
    config: GanTrainConfig,
    g_opt: Adam<T>,
    d_opt: Adam<T>,
    d_updates: u64,
    g_updates: u64,
}

impl<T: Element> GanTrainer<T> {
    pub fn new(generator: Generator<T>, discriminator: Discriminator<T>, config: GanTrainConfig) -> Self {
        let g_opt = Adam::new(config.adam.clone(), generator.params());
        let d_opt = Adam::new(config.adam.clone(), discriminator.params());
        Self {
            generator,
            discriminator,
            config,
            g_opt,
            d_opt,
            d_updates: 0,
            g_updates: 0,
        }
    }

    pub fn d_updates(&self) -> u64 {
        self.d_updates
    }

    pub fn g_updates(&self) -> u64 {
        self.g_updates
    }

    pub fn config(&self) -> &GanTrainConfig {
        &self.config
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.g_opt.set_lr(lr);
        self.d_opt.set_lr(lr);
    }

    /// One discriminator update. The generator is recorded as constants, so
    /// its parameters cannot move.
    pub fn discriminator_update(&mut self, batch: &GanBatch<T>, rng: &mut RngStream) -> Result<f64> {
        let n = batch.x1.shape()[0];
        let mut tape = Tape::new();
        let g_bound = self.generator.params().bind(&mut tape, false);
        let d_bound = self.discriminator.params().bind(&mut tape, true);
        let x1 = tape.constant(batch.x1.clone());
        let x2 = tape.constant(batch.x2.clone());
        let real = tape.constant(batch.target.clone());
        let z = self.generator.sample_noise(n, rng)?.map(|z| tape.constant(z));
        let fake = self.generator.forward(&mut tape, &g_bound, x1, x2, z)?;
        let real_logits = self.discriminator.forward(&mut tape, &d_bound, x1, x2, real)?;
        let fake_logits = self.discriminator.forward(&mut tape, &d_bound, x1, x2, fake)?;
        let loss = discriminator_loss(&mut tape, real_logits, fake_logits)?;
        let value = tape.value(loss).data()[0].to_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("discriminator loss ({value})")));
        }
        let mut grads = tape.backward(loss)?;
        let grads = d_bound.gradients(&mut grads, self.discriminator.params());
        self.d_opt.step(self.discriminator.params_mut(), &grads)?;
        self.d_updates += 1;
        Ok(value)
    }

    /// One generator update against a frozen discriminator.
    pub fn generator_update(&mut self, batch: &GanBatch<T>, rng: &mut RngStream) -> Result<GanStepReport> {
        let n = batch.x1.shape()[0];
        let mut tape = Tape::new();
        let g_bound = self.generator.params().bind(&mut tape, true);
        let d_bound = self.discriminator.params().bind(&mut tape, false);
        let x1 = tape.constant(batch.x1.clone());
        let x2 = tape.constant(batch.x2.clone());
        let z = self.generator.sample_noise(n, rng)?.map(|z| tape.constant(z));
        let fake = self.generator.forward(&mut tape, &g_bound, x1, x2, z)?;
        let fake_logits = self.discriminator.forward(&mut tape, &d_bound, x1, x2, fake)?;
        let loss = generator_loss(&mut tape, fake_logits, fake, &batch.target, self.config.lambda)?;
        let scalar = |v: Var| tape.value(v).data()[0].to_f64();
        let report = GanStepReport {
            d_loss: f64::NAN,
            g_loss: scalar(loss.total),
            g_loss_adv: scalar(loss.adversarial),
            g_loss_l1: scalar(loss.l1),
        };
        if !report.g_loss.is_finite() {
            return Err(Error::NonFinite(format!("generator loss ({})", report.g_loss)));
        }
        let mut grads = tape.backward(loss.total)?;
        let grads = g_bound.gradients(&mut grads, self.generator.params());
        self.g_opt.step(self.generator.params_mut(), &grads)?;
        self.g_updates += 1;
        Ok(report)
    }

    /// One discriminator update followed by the configured number of
    /// generator updates, each with fresh noise. Loss terms of the last
    /// generator update are reported.
    pub fn step(&mut self, batch: &GanBatch<T>, rng: &mut RngStream) -> Result<GanStepReport> {
        let d_loss = self.discriminator_update(batch, rng)?;
        let mut report = None;
        for _ in 0..self.config.g_updates_per_d {
            report = Some(self.generator_update(batch, rng)?);
        }
        let mut report = report.unwrap_or(GanStepReport {
            d_loss,
            g_loss: f64::NAN,
            g_loss_adv: f64::NAN,
            g_loss_l1: f64::NAN,
        });
        report.d_loss = d_loss;
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discriminator_final_map_at_full_size() {
        let cfg = DiscriminatorConfig::scaled(1.0, 256);
        assert_eq!(cfg.final_extent(), 16);
        assert_eq!(cfg.dense_inputs(), 131_072);
    }

    #[test]
    fn loss_of_perfect_and_undecided_discriminators() {
        let mut tape = Tape::<f64>::new();
        let real = tape.constant(Tensor::from_f64(&[2, 1], &[60.0, 60.0]).unwrap());
        let fake = tape.constant(Tensor::from_f64(&[2, 1], &[-60.0, -60.0]).unwrap());
        let loss = discriminator_loss(&mut tape, real, fake).unwrap();
        assert!(tape.value(loss).data()[0] < 1e-25);

        let half = tape.constant(Tensor::zeros(&[3, 1]).unwrap());
        let loss = discriminator_loss(&mut tape, half, half).unwrap();
        assert!((tape.value(loss).data()[0] - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn generator_requires_noise() {
        let g = Generator::<f32>::new(GeneratorConfig::scaled(0.0625, 16), &mut RngStream::new(0)).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]).unwrap();
        assert!(g.generate(&x, &x, None).is_err());
    }

    #[test]
    fn l1_zero_when_generator_matches_target() {
        let mut tape = Tape::<f64>::new();
        let target = Tensor::from_f64(&[1, 1, 1, 2], &[1.0, -1.0]).unwrap();
        let fake = tape.constant(target.clone());
        let logits = tape.constant(Tensor::zeros(&[1, 1]).unwrap());
        let loss = generator_loss(&mut tape, logits, fake, &target, 100.0).unwrap();
        assert_eq!(tape.value(loss.l1).data()[0], 0.0);
        assert!((tape.value(loss.total).data()[0] - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn signed_map_conversion() {
        let m = Tensor::<f32>::new(&[1, 1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(to_signed_map(&m).data(), &[-1.0, 1.0]);
    }
}
