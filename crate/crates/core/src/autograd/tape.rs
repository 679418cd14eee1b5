use crate::autograd::kernels::{self, sigmoid, softplus};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Op<T: Element> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Activation {
        input: Var,
        kind: Activation,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Flatten {
        input: Var,
    },
    Add {
        lhs: Var,
        rhs: Var,
    },
    Mul {
        lhs: Var,
        rhs: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    /// Mean binary cross-entropy of `sigmoid(logits)` against constant targets.
    BceWithLogits {
        logits: Var,
        targets: Tensor<T>,
    },
    /// Mean absolute deviation from a constant target.
    L1 {
        input: Var,
        target: Tensor<T>,
    },
}

#[derive(Debug)]
struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamically recorded computation graph.
///
/// Every operation appends one node; [`Tape::backward`] walks the nodes in
/// exact reverse of recording order.
#[derive(Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every leaf recorded with `requires_grad`.
#[derive(Debug)]
pub struct Gradients<T: Element> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf whose gradient is reported by [`Tape::backward`].
    pub fn parameter(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let out = kernels::conv_transpose2d_forward(
            self.value(input),
            self.value(weight),
            self.value(bias),
            stride,
            padding,
            output_padding,
        )?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            out,
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
                output_padding,
            },
            rg,
        ))
    }

    /// Channel concatenation; a single input is returned unchanged.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        if let [only] = inputs {
            self.value(*only).dims4()?;
            return Ok(*only);
        }
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = kernels::concat_channels(&values)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    pub fn activation(&mut self, kind: Activation, input: Var) -> Var {
        let out = match kind {
            Activation::Relu => self.value(input).map(|x| x.max(T::zero())),
            Activation::LeakyRelu(alpha) => {
                let a = T::from_f64(alpha);
                self.value(input).map(|x| if x > T::zero() { x } else { a * x })
            }
            Activation::Sigmoid => self.value(input).map(sigmoid),
            Activation::Tanh => self.value(input).map(|x| x.tanh()),
        };
        let rg = self.requires_grad(input);
        self.push(out, Op::Activation { input, kind }, rg)
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.activation(Activation::Relu, input)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.activation(Activation::Sigmoid, input)
    }

    pub fn tanh(&mut self, input: Var) -> Var {
        self.activation(Activation::Tanh, input)
    }

    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let out = kernels::dense_forward(self.value(input), self.value(weight), self.value(bias))?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(out, Op::Dense { input, weight, bias }, rg))
    }

    /// `N x ...` to `N x F`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let v = self.value(input);
        let n = v.shape()[0];
        let out = v.clone().reshape(&[n, v.numel() / n])?;
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::Flatten { input }, rg))
    }

    fn binary(&mut self, op: &'static str, lhs: Var, rhs: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::shape(op, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let out = self.binary("add", lhs, rhs, |a, b| a + b)?;
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(out, Op::Add { lhs, rhs }, rg))
    }

    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        let out = self.binary("mul", lhs, rhs, |a, b| a * b)?;
        let rg = self.any_grad(&[lhs, rhs]);
        Ok(self.push(out, Op::Mul { lhs, rhs }, rg))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let out = self.value(input).map(|x| x * factor);
        let rg = self.requires_grad(input);
        self.push(out, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let out = Tensor::scalar(self.value(input).sum());
        let rg = self.requires_grad(input);
        self.push(out, Op::Sum { input }, rg)
    }

    /// Mean of `softplus(l) - y*l`, i.e. binary cross-entropy on `sigmoid(l)`,
    /// evaluated without forming `log(sigmoid(l))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor<T>) -> Result<Var> {
        let l = self.value(logits);
        if l.shape() != targets.shape() {
            return Err(Error::shape("bce_with_logits", l.shape(), targets.shape()));
        }
        let total: T = l
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| softplus(x) - y * x)
            .sum();
        let out = Tensor::scalar(total / T::from_f64(l.numel() as f64));
        let rg = self.requires_grad(logits);
        Ok(self.push(out, Op::BceWithLogits { logits, targets }, rg))
    }

    pub fn l1_loss(&mut self, input: Var, target: Tensor<T>) -> Result<Var> {
        let x = self.value(input);
        if x.shape() != target.shape() {
            return Err(Error::shape("l1_loss", x.shape(), target.shape()));
        }
        let total: T = x.data().iter().zip(target.data()).map(|(&a, &b)| (a - b).abs()).sum();
        let out = Tensor::scalar(total / T::from_f64(x.numel() as f64));
        let rg = self.requires_grad(input);
        Ok(self.push(out, Op::L1 { input, target }, rg))
    }

    /// Reverse sweep from a scalar `loss`. Intermediate gradients are dropped
    /// as soon as they have been propagated; only leaf gradients are kept.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        let loss_shape = self.value(loss).shape();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::InvalidShape {
                shape: loss_shape.to_vec(),
                reason: "backward requires a scalar loss".into(),
            });
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        let mut leaf_grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        leaf_grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(Tensor::from_parts(loss_shape.to_vec(), vec![T::one()]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads[idx] = Some(g);
                continue;
            }
            for (var, contribution) in self.local_grads(node, &g)? {
                accumulate(&mut grads[var.0], contribution)?;
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }

    /// Vector-Jacobian products of one node with respect to each input that
    /// requires a gradient.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let need_input = self.requires_grad(*input);
                let grads = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    self.value(*bias),
                    *stride,
                    *padding,
                    g,
                    need_input,
                )?;
                self.push_conv_grads(&mut out, grads, *input, *weight, *bias);
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                stride,
                padding,
                output_padding,
            } => {
                let need_input = self.requires_grad(*input);
                let grads = kernels::conv_transpose2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    self.value(*bias),
                    *stride,
                    *padding,
                    *output_padding,
                    g,
                    need_input,
                )?;
                self.push_conv_grads(&mut out, grads, *input, *weight, *bias);
            }
            Op::Concat { inputs } => {
                let channels: Vec<usize> = inputs.iter().map(|v| self.value(*v).shape()[1]).collect();
                for (var, part) in inputs.iter().zip(kernels::split_channels(g, &channels)?) {
                    if self.requires_grad(*var) {
                        out.push((*var, part));
                    }
                }
            }
            Op::Activation { input, kind } => {
                let x = self.value(*input).data();
                let y = node.value.data();
                let gd = g.data();
                let data: Vec<T> = match *kind {
                    Activation::Relu => x
                        .iter()
                        .zip(gd)
                        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                        .collect(),
                    Activation::LeakyRelu(alpha) => {
                        let a = T::from_f64(alpha);
                        x.iter()
                            .zip(gd)
                            .map(|(&x, &g)| if x > T::zero() { g } else { a * g })
                            .collect()
                    }
                    Activation::Sigmoid => y.iter().zip(gd).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
                    Activation::Tanh => y.iter().zip(gd).map(|(&y, &g)| g * (T::one() - y * y)).collect(),
                };
                out.push((*input, Tensor::from_parts(g.shape().to_vec(), data)));
            }
            Op::Dense { input, weight, bias } => {
                let (x, w) = (self.value(*input), self.value(*weight));
                let (n, f, o) = kernels::dense_dims(x, w, self.value(*bias))?;
                if self.requires_grad(*input) {
                    let mut dx = vec![T::zero(); n * f];
                    T::gemm(n, o, f, T::one(), g.data(), false, w.data(), true, T::zero(), &mut dx);
                    out.push((*input, Tensor::from_parts(vec![n, f], dx)));
                }
                if self.requires_grad(*weight) {
                    let mut dw = vec![T::zero(); f * o];
                    T::gemm(f, n, o, T::one(), x.data(), true, g.data(), false, T::zero(), &mut dw);
                    out.push((*weight, Tensor::from_parts(vec![f, o], dw)));
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![T::zero(); o];
                    for row in g.data().chunks(o) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*bias, Tensor::from_parts(vec![o], db)));
                }
            }
            Op::Flatten { input } => {
                out.push((*input, g.clone().reshape(self.value(*input).shape())?));
            }
            Op::Add { lhs, rhs } => {
                for var in [lhs, rhs] {
                    if self.requires_grad(*var) {
                        out.push((*var, g.clone()));
                    }
                }
            }
            Op::Mul { lhs, rhs } => {
                if self.requires_grad(*lhs) {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.value(*rhs).data())
                        .map(|(&g, &b)| g * b)
                        .collect();
                    out.push((*lhs, Tensor::from_parts(g.shape().to_vec(), data)));
                }
                if self.requires_grad(*rhs) {
                    let data = g
                        .data()
                        .iter()
                        .zip(self.value(*lhs).data())
                        .map(|(&g, &a)| g * a)
                        .collect();
                    out.push((*rhs, Tensor::from_parts(g.shape().to_vec(), data)));
                }
            }
            Op::Scale { input, factor } => {
                out.push((*input, g.map(|v| v * *factor)));
            }
            Op::Sum { input } => {
                let x = self.value(*input);
                out.push((
                    *input,
                    Tensor::from_parts(x.shape().to_vec(), vec![g.data()[0]; x.numel()]),
                ));
            }
            Op::BceWithLogits { logits, targets } => {
                let l = self.value(*logits);
                let scale = g.data()[0] / T::from_f64(l.numel() as f64);
                let data = l
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&x, &y)| (sigmoid(x) - y) * scale)
                    .collect();
                out.push((*logits, Tensor::from_parts(l.shape().to_vec(), data)));
            }
            Op::L1 { input, target } => {
                let x = self.value(*input);
                let scale = g.data()[0] / T::from_f64(x.numel() as f64);
                let data = x
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&a, &b)| {
                        let d = a - b;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*input, Tensor::from_parts(x.shape().to_vec(), data)));
            }
        }
        Ok(out)
    }

    fn push_conv_grads(
        &self,
        out: &mut Vec<(Var, Tensor<T>)>,
        grads: kernels::ConvGrads<T>,
        input: Var,
        weight: Var,
        bias: Var,
    ) {
        if let Some(dx) = grads.input {
            out.push((input, dx));
        }
        if self.requires_grad(weight) {
            out.push((weight, grads.weight));
        }
        if self.requires_grad(bias) {
            out.push((bias, grads.bias));
        }
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, contribution: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&contribution),
        None => {
            *slot = Some(contribution);
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap());
        let w = tape.parameter(Tensor::from_f64(&[3], &[0.3, 0.1, 0.7]).unwrap());
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, -2.0, 0.5]);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::<f64>::new();
        let w = tape.parameter(Tensor::scalar(0.0));
        let s = tape.sigmoid(w);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[0.25]);
    }

    #[test]
    fn fan_out_gradients_sum() {
        // loss = sum(w*w) + sum(w) -> 2w + 1
        let mut tape = Tape::<f64>::new();
        let w = tape.parameter(Tensor::from_f64(&[2], &[3.0, -1.0]).unwrap());
        let sq = tape.mul(w, w).unwrap();
        let both = tape.add(sq, w).unwrap();
        let loss = tape.sum(both);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[7.0, -1.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f64>::new();
        let w = tape.parameter(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        assert!(tape.backward(w).is_err());
        assert!(Tape::<f64>::new().backward(Var(0)).is_err());
    }

    #[test]
    fn activations_forward() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[3], &[-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let y = tape.constant(Tensor::from_f64(&[2], &[-5.0, 5.0]).unwrap());
        let l = tape.activation(Activation::LeakyRelu(0.2), y);
        assert_eq!(tape.value(l).data(), &[-1.0, 5.0]);
        let z = tape.constant(Tensor::scalar(0.0));
        let s = tape.sigmoid(z);
        assert_eq!(tape.value(s).data(), &[0.5]);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let w = tape.constant(Tensor::from_f64(&[1, 1, 1, 1], &[2.0]).unwrap());
        let b = tape.parameter(Tensor::from_f64(&[1], &[0.0]).unwrap());
        let y = tape.conv2d(x, w, b, 1, 0).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[4.0]);
        assert!(grads.get(w).is_none());
    }
}
