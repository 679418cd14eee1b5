//! Shared oracles for the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wnet_core::autograd::{Tape, Var};
use wnet_core::Tensor;

/// Central finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Gradients smaller than this are compared absolutely; below it a relative
/// error is dominated by finite-difference round-off.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Default)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    pub worst: String,
}

impl GradReport {
    fn record(&mut self, label: String, analytic: f64, numeric: f64) {
        let e = rel_err(analytic, numeric);
        self.checked += 1;
        if e > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(e);
            self.worst = format!("{label}: analytic {analytic:e} numeric {numeric:e}");
        }
    }
}

/// Compare `analytic[i]` with central differences of `loss` for a sample of
/// coordinates of each input (all of them when `per_input` is `None`).
pub fn finite_difference_check(
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    loss: impl Fn(&[Tensor<f64>]) -> f64,
    per_input: Option<usize>,
    seed: u64,
) -> GradReport {
    assert_eq!(inputs.len(), analytic.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradReport::default();
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, grad) in analytic.iter().enumerate() {
        assert_eq!(grad.shape(), inputs[i].shape(), "gradient shape for input {i}");
        let n = inputs[i].numel();
        let coords: Vec<usize> = match per_input {
            Some(k) if k < n => (0..k).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in coords {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + FD_STEP;
            let up = loss(&work);
            work[i].data_mut()[j] = x0 - FD_STEP;
            let down = loss(&work);
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            report.record(format!("input {i}[{j}]"), grad.data()[j], numeric);
        }
    }
    report
}

/// Scalarize an arbitrary output with fixed pseudo-random weights so that
/// every output element contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape<f64>, out: Var, seed: u64) -> Var {
    let shape = tape.value(out).shape().to_vec();
    let w = random_tensor(&shape, seed, 1.0);
    let wv = tape.constant(w);
    let prod = tape.mul(out, wv).expect("same shape");
    tape.sum(prod)
}

pub fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Gradient check for a graph built from `inputs` (all trainable leaves).
pub fn check_graph(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
    per_input: Option<usize>,
    seed: u64,
) -> GradReport {
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.parameter(x.clone())).collect();
        let out = build(&mut tape, &vars);
        (tape, vars, out)
    };
    let (tape, vars, out) = eval(inputs);
    let mut grads = tape.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, x)| grads.take(*v).unwrap_or_else(|| x.zeros_like()))
        .collect();
    finite_difference_check(
        inputs,
        &analytic,
        |xs| {
            let (tape, _, out) = eval(xs);
            tape.value(out).data()[0]
        },
        per_input,
        seed,
    )
}

/// Direct convolution used as an oracle for the im2col path:
/// `out[n][o][y][x] = b[o] + sum w[o][c][i][j] * in[n][c][y*s+i-p][x*s+j-p]`.
pub fn naive_conv2d(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let (n, c, h, w) = input.dims4().unwrap();
    let (o, _, k, _) = weight.dims4().unwrap();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias.data()[oc];
                    for ic in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (y * stride + i) as isize - pad as isize;
                                let ix = (x * stride + j) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += weight.data()[((oc * c + ic) * k + i) * k + j]
                                    * input.data()[((b * c + ic) * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out[((b * o + oc) * oh + y) * ow + x] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

/// Direct scatter form of the transposed convolution: every input pixel adds
/// `in * w[c][o]` into the output window starting at `(y*s - p, x*s - p)`.
pub fn naive_conv_transpose2d(
    input: &Tensor<f64>,
    weight: &Tensor<f64>,
    bias: &Tensor<f64>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Tensor<f64> {
    let (n, c, h, w) = input.dims4().unwrap();
    let (_, o, k, _) = weight.dims4().unwrap();
    let oh = (h - 1) * stride + k + output_padding - 2 * pad;
    let ow = (w - 1) * stride + k + output_padding - 2 * pad;
    let mut out = vec![0.0; n * o * oh * ow];
    for b in 0..n {
        for oc in 0..o {
            for v in &mut out[(b * o + oc) * oh * ow..(b * o + oc + 1) * oh * ow] {
                *v = bias.data()[oc];
            }
            for ic in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let v = input.data()[((b * c + ic) * h + y) * w + x];
                        for i in 0..k {
                            for j in 0..k {
                                let oy = (y * stride + i) as isize - pad as isize;
                                let ox = (x * stride + j) as isize - pad as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out[((b * o + oc) * oh + oy as usize) * ow + ox as usize] +=
                                    v * weight.data()[((ic * o + oc) * k + i) * k + j];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[n, o, oh, ow], out).unwrap()
}

/// Uniform values in `[-scale, scale]` pushed at least `margin` away from 0,
/// keeping finite differences off the kinks of ReLU and L1.
pub fn away_from_zero(shape: &[usize], seed: u64, scale: f64, margin: f64) -> Tensor<f64> {
    random_tensor(shape, seed, scale).map(|v| {
        if v.abs() >= margin {
            v
        } else if v >= 0.0 {
            margin
        } else {
            -margin
        }
    })
}

pub fn binary_targets(shape: &[usize], seed: u64) -> Tensor<f64> {
    random_tensor(shape, seed, 1.0).map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// One finite-difference check per differentiable primitive.
pub fn primitive_suite(seed: u64) -> Vec<(&'static str, GradReport)> {
    use wnet_core::autograd::Activation;
    let t = |shape: &[usize], k: u64| random_tensor(shape, seed.wrapping_mul(31).wrapping_add(k), 1.0);
    let mut out = Vec::new();

    for (name, stride, pad, k) in [
        ("conv2d s1", 1, 1, 3),
        ("conv2d s2", 2, 1, 3),
        ("conv2d k5 s2", 2, 2, 5),
    ] {
        let inputs = [t(&[2, 3, 6, 5], 1), t(&[4, 3, k, k], 2), t(&[4], 3)];
        let r = check_graph(
            &inputs,
            |tp, v| {
                let y = tp.conv2d(v[0], v[1], v[2], stride, pad).unwrap();
                weighted_sum(tp, y, seed)
            },
            None,
            seed,
        );
        out.push((name, r));
    }
    for (name, stride, pad, op, k) in [
        ("conv_transpose2d s1", 1, 1, 0, 3),
        ("conv_transpose2d s2", 2, 1, 1, 3),
        ("conv_transpose2d k5 s2", 2, 2, 1, 5),
    ] {
        let inputs = [t(&[2, 3, 4, 5], 4), t(&[3, 2, k, k], 5), t(&[2], 6)];
        let r = check_graph(
            &inputs,
            |tp, v| {
                let y = tp.conv_transpose2d(v[0], v[1], v[2], stride, pad, op).unwrap();
                weighted_sum(tp, y, seed)
            },
            None,
            seed,
        );
        out.push((name, r));
    }
    let inputs = [t(&[2, 1, 3, 4], 7), t(&[2, 3, 3, 4], 8), t(&[2, 2, 3, 4], 9)];
    out.push((
        "concat_channels",
        check_graph(
            &inputs,
            |tp, v| {
                let y = tp.concat_channels(v).unwrap();
                weighted_sum(tp, y, seed)
            },
            None,
            seed,
        ),
    ));
    for (name, kind) in [
        ("relu", Activation::Relu),
        ("leaky_relu", Activation::LeakyRelu(0.2)),
        ("sigmoid", Activation::Sigmoid),
        ("tanh", Activation::Tanh),
    ] {
        let inputs = [away_from_zero(&[2, 3, 4, 4], seed + 10, 3.0, 1e-2)];
        out.push((
            name,
            check_graph(
                &inputs,
                |tp, v| {
                    let y = tp.activation(kind, v[0]);
                    weighted_sum(tp, y, seed)
                },
                None,
                seed,
            ),
        ));
    }
    let inputs = [t(&[3, 5], 11), t(&[5, 4], 12), t(&[4], 13)];
    out.push((
        "dense",
        check_graph(
            &inputs,
            |tp, v| {
                let y = tp.dense(v[0], v[1], v[2]).unwrap();
                weighted_sum(tp, y, seed)
            },
            None,
            seed,
        ),
    ));
    let inputs = [t(&[2, 2, 2, 3], 14), t(&[12, 3], 15), t(&[3], 16)];
    out.push((
        "flatten+dense",
        check_graph(
            &inputs,
            |tp, v| {
                let f = tp.flatten(v[0]).unwrap();
                let y = tp.dense(f, v[1], v[2]).unwrap();
                weighted_sum(tp, y, seed)
            },
            None,
            seed,
        ),
    ));
    let inputs = [t(&[2, 3], 17), t(&[2, 3], 18)];
    out.push((
        "add/mul/scale/sum",
        check_graph(
            &inputs,
            |tp, v| {
                let a = tp.add(v[0], v[1]).unwrap();
                let m = tp.mul(a, v[1]).unwrap();
                let s = tp.scale(m, 0.7);
                tp.sum(s)
            },
            None,
            seed,
        ),
    ));
    let targets = binary_targets(&[2, 1, 3, 3], seed + 19);
    let inputs = [random_tensor(&[2, 1, 3, 3], seed + 20, 4.0)];
    out.push((
        "bce_with_logits",
        check_graph(
            &inputs,
            |tp, v| tp.bce_with_logits(v[0], targets.clone()).unwrap(),
            None,
            seed,
        ),
    ));
    let target = t(&[2, 1, 3, 3], 21);
    let offset = away_from_zero(&[2, 1, 3, 3], seed + 22, 1.0, 1e-2);
    let x = Tensor::new(
        &[2, 1, 3, 3],
        target.data().iter().zip(offset.data()).map(|(a, b)| a + b).collect(),
    )
    .unwrap();
    out.push((
        "l1_loss",
        check_graph(&[x], |tp, v| tp.l1_loss(v[0], target.clone()).unwrap(), None, seed),
    ));
    out
}

/// Re-initialize every parameter with a fan-in scaled uniform draw so that
/// signals neither vanish nor saturate in the micro networks.
pub fn rescale_params(params: &mut wnet_core::nn::ParamSet<f64>, seed: u64) {
    for (i, t) in params.tensors_mut().iter_mut().enumerate() {
        let shape = t.shape().to_vec();
        let scale = if shape.len() == 1 {
            0.1
        } else {
            (3.0 / (t.numel() / shape[0]) as f64).sqrt()
        };
        *t = random_tensor(&shape, seed.wrapping_add(1000 + i as u64), scale);
    }
}

fn set_all(params: &mut wnet_core::nn::ParamSet<f64>, values: &[Tensor<f64>]) {
    for (i, v) in values.iter().enumerate() {
        params.set(i, v.clone()).unwrap();
    }
}

/// End-to-end check of the W-Net cross-entropy loss at 16x16, base width
/// 0.0625, over sampled parameter coordinates and both inputs.
pub fn wnet_end_to_end(seed: u64, per_tensor: usize) -> GradReport {
    use wnet_core::optim::sigmoid_cross_entropy;
    use wnet_core::wnet::{WNet, WNetConfig};
    let mut rng = wnet_core::RngStream::new(seed);
    let mut net = WNet::<f64>::new(WNetConfig::scaled(0.0625, 16), &mut rng).unwrap();
    rescale_params(net.params_mut(), seed);
    let x1 = random_tensor(&[1, 3, 16, 16], seed + 1, 1.0);
    let x2 = random_tensor(&[1, 3, 16, 16], seed + 2, 1.0);
    let mask = binary_targets(&[1, 1, 16, 16], seed + 3);
    let np = net.params().len();

    let mut inputs: Vec<Tensor<f64>> = net.params().tensors().to_vec();
    inputs.push(x1);
    inputs.push(x2);
    let run = |net: &WNet<f64>, xs: &[Tensor<f64>], grad: bool| {
        let mut tape = Tape::new();
        let bound = net.params().bind(&mut tape, grad);
        let a = tape.leaf(xs[np].clone(), grad);
        let b = tape.leaf(xs[np + 1].clone(), grad);
        let logits = net.forward(&mut tape, &bound, a, b).unwrap();
        let loss = sigmoid_cross_entropy(&mut tape, logits, &mask).unwrap();
        let value = tape.value(loss).data()[0];
        if !grad {
            return (value, Vec::new());
        }
        let mut g = tape.backward(loss).unwrap();
        let mut grads = bound.gradients(&mut g, net.params());
        grads.push(g.take(a).unwrap());
        grads.push(g.take(b).unwrap());
        (value, grads)
    };
    let (_, analytic) = run(&net, &inputs, true);
    let cell = std::cell::RefCell::new(net);
    finite_difference_check(
        &inputs,
        &analytic,
        |xs| {
            let mut net = cell.borrow_mut();
            set_all(net.params_mut(), &xs[..np]);
            run(&net, xs, false).0
        },
        Some(per_tensor),
        seed,
    )
}

/// End-to-end check of the combined discriminator and generator objectives
/// through both networks (16x16, base width 0.0625, fixed noise).
pub fn gan_end_to_end(seed: u64, per_tensor: usize) -> GradReport {
    use wnet_core::cdgan::{
        discriminator_loss, generator_loss, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
    };
    let mut rng = wnet_core::RngStream::new(seed);
    let mut g = Generator::<f64>::new(GeneratorConfig::scaled(0.0625, 16), &mut rng).unwrap();
    let mut d = Discriminator::<f64>::new(DiscriminatorConfig::scaled(0.0625, 16), &mut rng).unwrap();
    rescale_params(g.params_mut(), seed);
    rescale_params(d.params_mut(), seed + 7);
    let x1 = random_tensor(&[1, 3, 16, 16], seed + 1, 1.0);
    let x2 = random_tensor(&[1, 3, 16, 16], seed + 2, 1.0);
    let z = random_tensor(&[1, 1, 16, 16], seed + 3, 1.0);
    let target = binary_targets(&[1, 1, 16, 16], seed + 4).map(|v| 2.0 * v - 1.0);
    let (ng, nd) = (g.params().len(), d.params().len());

    let mut inputs: Vec<Tensor<f64>> = g.params().tensors().to_vec();
    inputs.extend(d.params().tensors().iter().cloned());
    let run = |g: &Generator<f64>, d: &Discriminator<f64>, grad: bool| {
        let mut tape = Tape::new();
        let gb = g.params().bind(&mut tape, grad);
        let db = d.params().bind(&mut tape, grad);
        let a = tape.constant(x1.clone());
        let b = tape.constant(x2.clone());
        let zv = tape.constant(z.clone());
        let real = tape.constant(target.clone());
        let fake = g.forward(&mut tape, &gb, a, b, Some(zv)).unwrap();
        let rl = d.forward(&mut tape, &db, a, b, real).unwrap();
        let fl = d.forward(&mut tape, &db, a, b, fake).unwrap();
        let dl = discriminator_loss(&mut tape, rl, fl).unwrap();
        let gl = generator_loss(&mut tape, fl, fake, &target, 100.0).unwrap();
        let loss = tape.add(dl, gl.total).unwrap();
        let value = tape.value(loss).data()[0];
        if !grad {
            return (value, Vec::new());
        }
        let mut gr = tape.backward(loss).unwrap();
        let mut grads = gb.gradients(&mut gr, g.params());
        grads.extend(db.gradients(&mut gr, d.params()));
        (value, grads)
    };
    let (_, analytic) = run(&g, &d, true);
    let cell = std::cell::RefCell::new((g, d));
    finite_difference_check(
        &inputs,
        &analytic,
        |xs| {
            let mut nets = cell.borrow_mut();
            set_all(nets.0.params_mut(), &xs[..ng]);
            set_all(nets.1.params_mut(), &xs[ng..ng + nd]);
            run(&nets.0, &nets.1, false).0
        },
        Some(per_tensor),
        seed,
    )
}
