//! Dual-branch W-Net: two independent convolutional encoders, channel
//! concatenation fusion at the bottleneck and at three shortcut levels, and a
//! transposed-convolution decoder.

use serde::{Deserialize, Serialize};

use crate::autograd::{Activation, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, ConvKind, ConvLayer, ParamSet};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor};

/// Encoder output channels at full width, one entry per layer.
pub const ENCODER_CHANNELS: [usize; 8] = [64, 128, 256, 512, 512, 512, 512, 512];
/// Decoder output channels at full width.
pub const DECODER_CHANNELS: [usize; 8] = [512, 512, 512, 512, 256, 128, 64, 1];
/// Strides of both the encoder and decoder layers.
pub const STRIDES: [usize; 8] = [1, 2, 1, 2, 1, 2, 1, 2];

/// Parameter count reported for the full-width network in the original work.
pub const REFERENCE_PARAM_COUNT: usize = 42_570_625;

/// Decoder layer index after which a shortcut is fused, paired with the
/// encoder layer that provides it (stride-2 block outputs).
const SHORTCUTS: [(usize, usize); 3] = [(1, 5), (3, 3), (5, 1)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WNetConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub base_width: f64,
    pub kernel_size: usize,
    pub share_branch_weights: bool,
}

impl Default for WNetConfig {
    fn default() -> Self {
        Self {
            input_size: 256,
            input_channels: 3,
            base_width: 1.0,
            kernel_size: 3,
            share_branch_weights: false,
        }
    }
}

impl WNetConfig {
    pub fn scaled(base_width: f64, input_size: usize) -> Self {
        Self {
            base_width,
            input_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return Err(Error::InvalidConfig(format!(
                "input size {} must be a positive multiple of 16",
                self.input_size
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::InvalidConfig("input channels must be positive".into()));
        }
        if !(self.base_width > 0.0 && self.base_width.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "base width {} must be positive",
                self.base_width
            )));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Channel count after width scaling; never below 1.
    pub fn width(&self, full: usize) -> usize {
        ((full as f64 * self.base_width).round() as usize).max(1)
    }

    pub fn encoder_channels(&self) -> [usize; 8] {
        ENCODER_CHANNELS.map(|c| self.width(c))
    }

    pub fn decoder_channels(&self) -> [usize; 8] {
        let mut ch = DECODER_CHANNELS.map(|c| self.width(c));
        ch[7] = 1;
        ch
    }
}

/// One row of the layer manifest.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerRow {
    pub name: String,
    pub kernel: Option<usize>,
    pub stride: Option<usize>,
    /// `(h, w, channel blocks)`; more than one block means a concatenation.
    pub out_shape: (usize, usize, Vec<usize>),
    pub param_count: usize,
}

impl LayerRow {
    /// `HxWxC` or `HxWx(C1+C2+...)` for fused outputs.
    pub fn shape_label(&self) -> String {
        let (h, w, blocks) = &self.out_shape;
        if blocks.len() == 1 {
            format!("{h}x{w}x{}", blocks[0])
        } else {
            let parts: Vec<String> = blocks.iter().map(usize::to_string).collect();
            format!("{h}x{w}x({})", parts.join("+"))
        }
    }

    pub fn channels(&self) -> usize {
        self.out_shape.2.iter().sum()
    }
}

/// Layer manifest rendered as CSV: name, kernel, stride, out_shape, param_count.
pub fn manifest_csv(rows: &[LayerRow]) -> String {
    let mut out = String::from("name,kernel,stride,out_shape,param_count\n");
    for r in rows {
        let kernel = r.kernel.map(|k| format!("{k}x{k}")).unwrap_or_else(|| "-".into());
        let stride = r.stride.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "\"{}\",{},{},{},{}\n",
            r.name,
            kernel,
            stride,
            r.shape_label(),
            r.param_count
        ));
    }
    out
}

#[derive(Clone, Debug)]
pub struct WNet<T: Element = f32> {
    config: WNetConfig,
    params: ParamSet<T>,
    branch1: Vec<ConvLayer>,
    branch2: Vec<ConvLayer>,
    decoder: Vec<ConvLayer>,
    manifest: Vec<LayerRow>,
}

/// Intermediate activations of one forward pass, for shape inspection.
#[derive(Debug)]
pub struct WNetTrace {
    pub branch1: Vec<Var>,
    pub branch2: Vec<Var>,
    pub decoder: Vec<Var>,
    pub logits: Var,
}

impl<T: Element> WNet<T> {
    pub fn new(config: WNetConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let enc = config.encoder_channels();
        let dec = config.decoder_channels();
        let k = config.kernel_size;
        let mut params = ParamSet::new();

        let mut build_branch = |params: &mut ParamSet<T>, branch: usize| -> Result<Vec<ConvLayer>> {
            let mut cin = config.input_channels;
            let mut layers = Vec::with_capacity(8);
            for (i, (&cout, &stride)) in enc.iter().zip(&STRIDES).enumerate() {
                let name = format!("conv{branch}_{}", i + 1);
                layers.push(ConvLayer::init(
                    params,
                    rng,
                    &name,
                    ConvKind::Conv,
                    cin,
                    cout,
                    k,
                    stride,
                )?);
                cin = cout;
            }
            Ok(layers)
        };
        let branch1 = build_branch(&mut params, 1)?;
        let branch2 = if config.share_branch_weights {
            branch1.clone()
        } else {
            build_branch(&mut params, 2)?
        };

        let mut decoder = Vec::with_capacity(8);
        let mut cin = 2 * enc[7];
        for (i, (&cout, &stride)) in dec.iter().zip(&STRIDES).enumerate() {
            let name = format!("deconv_{}", i + 1);
            decoder.push(ConvLayer::init(
                &mut params,
                rng,
                &name,
                ConvKind::Deconv,
                cin,
                cout,
                k,
                stride,
            )?);
            cin = cout + shortcut_source(i).map_or(0, |e| 2 * enc[e]);
        }

        let manifest = build_manifest(&config, &branch1, &decoder);
        Ok(Self {
            config,
            params,
            branch1,
            branch2,
            decoder,
            manifest,
        })
    }

    pub fn config(&self) -> &WNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    /// Table-style manifest: the input row, one row per encoder layer pair,
    /// one row per decoder layer.
    pub fn manifest(&self) -> &[LayerRow] {
        &self.manifest
    }

    pub fn branch_layers(&self, branch: usize) -> &[ConvLayer] {
        if branch == 1 {
            &self.branch1
        } else {
            &self.branch2
        }
    }

    pub fn decoder_layers(&self) -> &[ConvLayer] {
        &self.decoder
    }

    /// Parameter count from the layer definitions,
    /// `sum(Cout * Cin * k^2 + Cout)`.
    pub fn closed_form_param_count(&self) -> usize {
        let branches = if self.config.share_branch_weights { 1 } else { 2 };
        branches * self.branch1.iter().map(ConvLayer::param_count).sum::<usize>()
            + self.decoder.iter().map(ConvLayer::param_count).sum::<usize>()
    }

    fn check_inputs(&self, tape: &Tape<T>, x1: Var, x2: Var) -> Result<()> {
        let (a, b) = (tape.value(x1), tape.value(x2));
        let (_, c, h, w) = a.dims4()?;
        if a.shape() != b.shape() {
            return Err(Error::shape("wnet_forward", a.shape(), b.shape()));
        }
        let s = self.config.input_size;
        if c != self.config.input_channels || h != s || w != s {
            return Err(Error::shape(
                "wnet_forward",
                a.shape(),
                &[a.shape()[0], self.config.input_channels, s, s],
            ));
        }
        Ok(())
    }

    fn check_shape(&self, tape: &Tape<T>, var: Var, row: usize) -> Result<()> {
        let expected = &self.manifest[row];
        let (_, c, h, w) = tape.value(var).dims4()?;
        let (eh, ew, _) = &expected.out_shape;
        if (c, h, w) != (expected.channels(), *eh, *ew) {
            return Err(Error::InvalidShape {
                shape: tape.value(var).shape().to_vec(),
                reason: format!("layer {} expected {}", expected.name, expected.shape_label()),
            });
        }
        Ok(())
    }

    fn encode(&self, tape: &mut Tape<T>, bound: &Bound, layers: &[ConvLayer], x: Var) -> Result<Vec<Var>> {
        let mut h = x;
        let mut outs = Vec::with_capacity(layers.len());
        for layer in layers {
            let pre = layer.apply(tape, bound, h)?;
            h = tape.relu(pre);
            outs.push(h);
        }
        Ok(outs)
    }

    /// Full forward pass with every intermediate exposed. The final layer is
    /// left without activation; `head` is applied to it when given.
    pub fn trace(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x1: Var,
        x2: Var,
        head: Option<Activation>,
    ) -> Result<WNetTrace> {
        self.check_inputs(tape, x1, x2)?;
        let f1 = self.encode(tape, bound, &self.branch1, x1)?;
        let f2 = self.encode(tape, bound, &self.branch2, x2)?;
        for (i, (&a, &b)) in f1.iter().zip(&f2).enumerate().take(7) {
            self.check_shape(tape, a, i + 1)?;
            self.check_shape(tape, b, i + 1)?;
        }

        let mut h = tape.concat_channels(&[f1[7], f2[7]])?;
        self.check_shape(tape, h, 8)?;
        let mut outs = Vec::with_capacity(8);
        let last = self.decoder.len() - 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            let pre = layer.apply(tape, bound, h)?;
            h = if i < last {
                tape.relu(pre)
            } else if let Some(act) = head {
                tape.activation(act, pre)
            } else {
                pre
            };
            if let Some(e) = shortcut_source(i) {
                h = tape.concat_channels(&[h, f1[e], f2[e]])?;
            }
            self.check_shape(tape, h, 9 + i)?;
            outs.push(h);
        }
        Ok(WNetTrace {
            branch1: f1,
            branch2: f2,
            decoder: outs,
            logits: h,
        })
    }

    /// Per-pixel change logits `N x 1 x H x W`; `sigmoid(logit)` is the
    /// change probability.
    pub fn forward(&self, tape: &mut Tape<T>, bound: &Bound, x1: Var, x2: Var) -> Result<Var> {
        Ok(self.trace(tape, bound, x1, x2, None)?.logits)
    }

    /// Change probabilities for a pair of image batches, without gradients.
    pub fn predict(&self, x1: &Tensor<T>, x2: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let a = tape.constant(x1.clone());
        let b = tape.constant(x2.clone());
        let logits = self.forward(&mut tape, &bound, a, b)?;
        let p = tape.sigmoid(logits);
        Ok(tape.value(p).clone())
    }
}

fn shortcut_source(decoder_layer: usize) -> Option<usize> {
    SHORTCUTS.iter().find(|(d, _)| *d == decoder_layer).map(|(_, e)| *e)
}

/// Output shapes derived from the block structure (each stride-2 stage halves
/// or doubles the extent) rather than from the convolution arithmetic.
fn build_manifest(config: &WNetConfig, encoder: &[ConvLayer], decoder: &[ConvLayer]) -> Vec<LayerRow> {
    let branches = if config.share_branch_weights { 1 } else { 2 };
    let mut rows = vec![LayerRow {
        name: "Input".into(),
        kernel: None,
        stride: None,
        out_shape: (config.input_size, config.input_size, vec![config.input_channels]),
        param_count: 0,
    }];
    let mut size = config.input_size;
    for (i, layer) in encoder.iter().enumerate() {
        size /= layer.stride;
        let blocks = if i == encoder.len() - 1 {
            vec![layer.out_channels; 2]
        } else {
            vec![layer.out_channels]
        };
        rows.push(LayerRow {
            name: format!("Conv1-{n},Conv2-{n}", n = i + 1),
            kernel: Some(layer.kernel),
            stride: Some(layer.stride),
            out_shape: (size, size, blocks),
            param_count: branches * layer.param_count(),
        });
    }
    for (i, layer) in decoder.iter().enumerate() {
        size *= layer.stride;
        let mut blocks = vec![layer.out_channels];
        if let Some(e) = shortcut_source(i) {
            blocks.extend([encoder[e].out_channels; 2]);
        }
        rows.push(LayerRow {
            name: format!("DeConv-{}", i + 1),
            kernel: Some(layer.kernel),
            stride: Some(layer.stride),
            out_shape: (size, size, blocks),
            param_count: layer.param_count(),
        });
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(WNetConfig::scaled(1.0, 250).validate().is_err());
        assert!(WNetConfig::scaled(0.0, 256).validate().is_err());
        let c = WNetConfig {
            kernel_size: 4,
            ..WNetConfig::default()
        };
        assert!(c.validate().is_err());
        assert!(WNet::<f32>::new(WNetConfig::scaled(1.0, 100), &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn width_scaling_keeps_one_output_channel() {
        let c = WNetConfig::scaled(0.125, 64);
        assert_eq!(c.encoder_channels(), [8, 16, 32, 64, 64, 64, 64, 64]);
        assert_eq!(c.decoder_channels(), [64, 64, 64, 64, 32, 16, 8, 1]);
        let tiny = WNetConfig::scaled(0.001, 16);
        assert!(tiny.encoder_channels().iter().all(|&c| c == 1));
    }

    #[test]
    fn shared_branches_alias_parameters() {
        let mut cfg = WNetConfig::scaled(0.0625, 16);
        cfg.share_branch_weights = true;
        let shared = WNet::<f32>::new(cfg.clone(), &mut RngStream::new(1)).unwrap();
        cfg.share_branch_weights = false;
        let split = WNet::<f32>::new(cfg, &mut RngStream::new(1)).unwrap();
        let branch: usize = shared.branch_layers(1).iter().map(ConvLayer::param_count).sum();
        assert_eq!(split.params().numel() - shared.params().numel(), branch);
        assert_eq!(shared.closed_form_param_count(), shared.params().numel());
        assert_eq!(shared.branch_layers(1)[0].weight, shared.branch_layers(2)[0].weight);
    }

    #[test]
    fn csv_quotes_paired_names() {
        let net = WNet::<f32>::new(WNetConfig::scaled(0.0625, 16), &mut RngStream::new(0)).unwrap();
        let csv = manifest_csv(net.manifest());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 18);
        assert_eq!(lines[1], "\"Input\",-,-,16x16x3,0");
        assert!(lines[9].starts_with("\"Conv1-8,Conv2-8\",3x3,2,1x1x(32+32),"));
    }
}
