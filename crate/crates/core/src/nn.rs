//! Named parameter storage and the convolutional layer building block shared
//! by the W-Net, the generator and the discriminator.

use crate::autograd::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{gaussian_init, RngStream};
use crate::tensor::{Element, Tensor};

/// Standard deviation of the zero-mean Gaussian weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T: Element = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(tensor);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensor(&self, idx: usize) -> &Tensor<T> {
        &self.tensors[idx]
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters, counted from the stored tensors.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn fill(&mut self, value: T) {
        for t in &mut self.tensors {
            t.data_mut().fill(value);
        }
    }

    /// Replace a tensor, keeping its shape.
    pub fn set(&mut self, idx: usize, tensor: Tensor<T>) -> Result<()> {
        if tensor.shape() != self.tensors[idx].shape() {
            return Err(Error::CheckpointShape {
                name: self.names[idx].clone(),
                found: tensor.shape().to_vec(),
                expected: self.tensors[idx].shape().to_vec(),
            });
        }
        self.tensors[idx] = tensor;
        Ok(())
    }

    /// Record every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Bound {
        Bound {
            vars: self.tensors.iter().map(|t| tape.leaf(t.clone(), trainable)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Tape handles of a bound [`ParamSet`], index-aligned with it.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the parameter set; parameters that did not
    /// influence the loss receive zeros.
    pub fn gradients<T: Element>(&self, grads: &mut Gradients<T>, params: &ParamSet<T>) -> Vec<Tensor<T>> {
        self.vars
            .iter()
            .zip(params.tensors())
            .map(|(v, p)| grads.take(*v).unwrap_or_else(|| p.zeros_like()))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    Conv,
    Deconv,
}

/// A convolution or transposed convolution whose weights live in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub weight: usize,
    pub bias: usize,
}

impl ConvLayer {
    /// Allocate a layer with Gaussian weights and zero biases.
    #[allow(clippy::too_many_arguments)]
    pub fn init<T: Element>(
        params: &mut ParamSet<T>,
        rng: &mut RngStream,
        name: &str,
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let padding = kernel / 2;
        // Stride-2 transposed layers exactly double the spatial extent.
        let output_padding = match kind {
            ConvKind::Deconv if stride > 1 => stride + 2 * padding - kernel,
            _ => 0,
        };
        let wshape = match kind {
            ConvKind::Conv => [out_channels, in_channels, kernel, kernel],
            ConvKind::Deconv => [in_channels, out_channels, kernel, kernel],
        };
        let weight = params.push(format!("{name}.weight"), gaussian_init(rng, &wshape, INIT_STD)?);
        let bias = params.push(format!("{name}.bias"), Tensor::zeros(&[out_channels])?);
        Ok(Self {
            kind,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            output_padding,
            weight,
            bias,
        })
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    /// Spatial extent produced from `input`.
    pub fn out_extent(&self, input: usize) -> usize {
        match self.kind {
            ConvKind::Conv => (input + 2 * self.padding - self.kernel) / self.stride + 1,
            ConvKind::Deconv => (input - 1) * self.stride + self.kernel + self.output_padding - 2 * self.padding,
        }
    }

    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, bound: &Bound, input: Var) -> Result<Var> {
        let (w, b) = (bound.var(self.weight), bound.var(self.bias));
        match self.kind {
            ConvKind::Conv => tape.conv2d(input, w, b, self.stride, self.padding),
            ConvKind::Deconv => tape.conv_transpose2d(input, w, b, self.stride, self.padding, self.output_padding),
        }
    }
}
