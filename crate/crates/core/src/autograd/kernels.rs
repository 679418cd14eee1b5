//! Forward and backward kernels for the primitive operators.
//!
//! Kernels are pure functions of their inputs. Convolutions lower to
//! `im2col` + GEMM; transposed convolution is the adjoint of convolution and
//! reuses the same lowering with the roles of `im2col` and `col2im` swapped.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Sliding-window geometry of a convolution from a `channels x h x w` plane
/// to an `out_h x out_w` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Output extent of a strided convolution, or `None` when the window does not fit.
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution, or `None` when it would be empty.
pub fn conv_transpose_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Option<usize> {
    let full = (input - 1) * stride + kernel + output_padding;
    full.checked_sub(2 * padding).filter(|&v| v > 0)
}

/// Unfold `src` (`channels x h x w`) into `cols` (`channels*k*k x out_h*out_w`).
pub fn im2col<T: Element>(src: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let k = g.kernel;
    let n_cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &src[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *out = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `cols` back into `dst` (`channels x h x w`).
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeometry, dst: &mut [T]) {
    let k = g.kernel;
    let n_cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut dst[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n_cols..(row + 1) * n_cols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, &v) in src[oy * g.out_w..(oy + 1) * g.out_w].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst_row[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Element>(out: &mut [T], bias: &[T], plane: usize) {
    for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
        for v in chunk {
            *v += b;
        }
    }
}

fn accumulate_bias_grad<T: Element>(dy: &[T], db: &mut [T], plane: usize) {
    for (chunk, acc) in dy.chunks(plane).zip(db.iter_mut()) {
        *acc += chunk.iter().copied().sum::<T>();
    }
}

fn check_bias<T: Element>(op: &'static str, bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(Error::shape(op, bias.shape(), &[channels]));
    }
    Ok(())
}

/// Geometry of `conv2d(input, weight)`; validates every shape.
pub fn conv2d_geometry<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGeometry> {
    let (_, cin, h, w) = input.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin || kh != kw {
        return Err(Error::shape("conv2d", input.shape(), weight.shape()));
    }
    check_bias("conv2d", bias, cout)?;
    if stride == 0 {
        return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
    }
    let (Some(out_h), Some(out_w)) = (
        conv_out_extent(h, kh, stride, padding),
        conv_out_extent(w, kw, stride, padding),
    ) else {
        return Err(Error::InvalidShape {
            shape: input.shape().to_vec(),
            reason: format!("kernel {kh}x{kw} with padding {padding} does not fit; output would be empty"),
        });
    };
    Ok(ConvGeometry {
        channels: cin,
        h,
        w,
        kernel: kh,
        stride,
        padding,
        out_h,
        out_w,
    })
}

/// Cross-correlation of `input` (`N x Cin x H x W`) with `weight`
/// (`Cout x Cin x k x k`) plus a per-channel bias.
pub fn conv2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = conv2d_geometry(input, weight, bias, stride, padding)?;
    let n = input.shape()[0];
    let cout = weight.shape()[0];
    let in_plane = g.channels * g.h * g.w;
    let out_plane = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * out_plane];
    let mut out = vec![T::zero(); n * cout * out_plane];
    for (x, y) in input.data().chunks(in_plane).zip(out.chunks_mut(cout * out_plane)) {
        im2col(x, &g, &mut cols);
        T::gemm(
            cout,
            g.col_rows(),
            out_plane,
            T::one(),
            weight.data(),
            false,
            &cols,
            false,
            T::zero(),
            y,
        );
        add_bias(y, bias.data(), out_plane);
    }
    Ok(Tensor::from_parts(vec![n, cout, g.out_h, g.out_w], out))
}

/// Gradients of a convolution. `grad_input` is skipped when `need_input` is false.
pub struct ConvGrads<T: Element> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv2d_geometry(input, weight, bias, stride, padding)?;
    let n = input.shape()[0];
    let cout = weight.shape()[0];
    let in_plane = g.channels * g.h * g.w;
    let out_plane = g.col_cols();
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); rows * out_plane];
    let mut dcols = vec![T::zero(); rows * out_plane];
    let mut dw = vec![T::zero(); weight.numel()];
    let mut db = vec![T::zero(); cout];
    let mut dx = if need_input {
        vec![T::zero(); input.numel()]
    } else {
        Vec::new()
    };
    for i in 0..n {
        let x = &input.data()[i * in_plane..(i + 1) * in_plane];
        let dy = &grad_out.data()[i * cout * out_plane..(i + 1) * cout * out_plane];
        im2col(x, &g, &mut cols);
        // dW += dY * cols^T
        T::gemm(
            cout,
            out_plane,
            rows,
            T::one(),
            dy,
            false,
            &cols,
            true,
            T::one(),
            &mut dw,
        );
        accumulate_bias_grad(dy, &mut db, out_plane);
        if need_input {
            // dcols = W^T * dY
            T::gemm(
                rows,
                cout,
                out_plane,
                T::one(),
                weight.data(),
                true,
                dy,
                false,
                T::zero(),
                &mut dcols,
            );
            col2im(&dcols, &g, &mut dx[i * in_plane..(i + 1) * in_plane]);
        }
    }
    Ok(ConvGrads {
        input: need_input.then(|| Tensor::from_parts(input.shape().to_vec(), dx)),
        weight: Tensor::from_parts(weight.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![cout], db),
    })
}

/// Geometry of the convolution that `conv_transpose2d` is the adjoint of:
/// it maps the transposed output (`Cout x H' x W'`) back onto the input grid.
pub fn conv_transpose2d_geometry<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<ConvGeometry> {
    let (_, cin, h, w) = input.dims4()?;
    let (wcin, cout, kh, kw) = weight.dims4()?;
    if wcin != cin || kh != kw {
        return Err(Error::shape("conv_transpose2d", input.shape(), weight.shape()));
    }
    check_bias("conv_transpose2d", bias, cout)?;
    if stride == 0 {
        return Err(Error::InvalidArgument(
            "conv_transpose2d stride must be positive".into(),
        ));
    }
    if output_padding >= stride {
        return Err(Error::InvalidArgument(format!(
            "output_padding {output_padding} must be smaller than stride {stride}"
        )));
    }
    let (Some(out_h), Some(out_w)) = (
        conv_transpose_out_extent(h, kh, stride, padding, output_padding),
        conv_transpose_out_extent(w, kw, stride, padding, output_padding),
    ) else {
        return Err(Error::InvalidShape {
            shape: input.shape().to_vec(),
            reason: "transposed convolution output would be empty".into(),
        });
    };
    Ok(ConvGeometry {
        channels: cout,
        h: out_h,
        w: out_w,
        kernel: kh,
        stride,
        padding,
        out_h: h,
        out_w: w,
    })
}

/// Transposed convolution with weight `Cin x Cout x k x k`.
pub fn conv_transpose2d_forward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
) -> Result<Tensor<T>> {
    let g = conv_transpose2d_geometry(input, weight, bias, stride, padding, output_padding)?;
    let (n, cin, _, _) = input.dims4()?;
    let cout = g.channels;
    let in_plane = g.col_cols();
    let out_plane = g.h * g.w;
    let rows = g.col_rows();
    let mut cols = vec![T::zero(); rows * in_plane];
    let mut out = vec![T::zero(); n * cout * out_plane];
    for (x, y) in input
        .data()
        .chunks(cin * in_plane)
        .zip(out.chunks_mut(cout * out_plane))
    {
        // cols = Wm^T * x with Wm viewed as Cin x (Cout*k*k)
        T::gemm(
            rows,
            cin,
            in_plane,
            T::one(),
            weight.data(),
            true,
            x,
            false,
            T::zero(),
            &mut cols,
        );
        col2im(&cols, &g, y);
        add_bias(y, bias.data(), out_plane);
    }
    Ok(Tensor::from_parts(vec![n, cout, g.h, g.w], out))
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
    output_padding: usize,
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<ConvGrads<T>> {
    let g = conv_transpose2d_geometry(input, weight, bias, stride, padding, output_padding)?;
    let (n, cin, _, _) = input.dims4()?;
    let cout = g.channels;
    let in_plane = g.col_cols();
    let out_plane = g.h * g.w;
    let rows = g.col_rows();
    let mut dcols = vec![T::zero(); rows * in_plane];
    let mut dw = vec![T::zero(); weight.numel()];
    let mut db = vec![T::zero(); cout];
    let mut dx = if need_input {
        vec![T::zero(); input.numel()]
    } else {
        Vec::new()
    };
    for i in 0..n {
        let x = &input.data()[i * cin * in_plane..(i + 1) * cin * in_plane];
        let dy = &grad_out.data()[i * cout * out_plane..(i + 1) * cout * out_plane];
        im2col(dy, &g, &mut dcols);
        // dWm += x * dcols^T
        T::gemm(cin, in_plane, rows, T::one(), x, false, &dcols, true, T::one(), &mut dw);
        accumulate_bias_grad(dy, &mut db, out_plane);
        if need_input {
            T::gemm(
                cin,
                rows,
                in_plane,
                T::one(),
                weight.data(),
                false,
                &dcols,
                false,
                T::zero(),
                &mut dx[i * cin * in_plane..(i + 1) * cin * in_plane],
            );
        }
    }
    Ok(ConvGrads {
        input: need_input.then(|| Tensor::from_parts(input.shape().to_vec(), dx)),
        weight: Tensor::from_parts(weight.shape().to_vec(), dw),
        bias: Tensor::from_parts(vec![cout], db),
    })
}

/// Concatenate `N x Ci x H x W` tensors along the channel axis.
pub fn concat_channels<T: Element>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat_channels needs at least one tensor".into()))?;
    let (n, _, h, w) = first.dims4()?;
    let mut total = 0;
    for t in inputs {
        let (tn, tc, th, tw) = t.dims4()?;
        if (tn, th, tw) != (n, h, w) {
            return Err(Error::shape("concat_channels", first.shape(), t.shape()));
        }
        total += tc;
    }
    let plane = h * w;
    let mut out = Vec::with_capacity(n * total * plane);
    for i in 0..n {
        for t in inputs {
            let block = t.shape()[1] * plane;
            out.extend_from_slice(&t.data()[i * block..(i + 1) * block]);
        }
    }
    Ok(Tensor::from_parts(vec![n, total, h, w], out))
}

/// Split a channel concatenation back into blocks of the given channel counts.
pub fn split_channels<T: Element>(t: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = t.dims4()?;
    if channels.iter().sum::<usize>() != c || channels.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "channel split {channels:?} does not partition {c} channels"
        )));
    }
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = channels.iter().map(|&ci| Vec::with_capacity(n * ci * plane)).collect();
    for sample in t.data().chunks(c * plane) {
        let mut offset = 0;
        for (part, &ci) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&sample[offset..offset + ci * plane]);
            offset += ci * plane;
        }
    }
    Ok(parts
        .into_iter()
        .zip(channels)
        .map(|(data, &ci)| Tensor::from_parts(vec![n, ci, h, w], data))
        .collect())
}

/// `input (N x F) * weight (F x O) + bias (O)`.
pub fn dense_forward<T: Element>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f, o) = dense_dims(input, weight, bias)?;
    let mut out = vec![T::zero(); n * o];
    for row in out.chunks_mut(o) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        n,
        f,
        o,
        T::one(),
        input.data(),
        false,
        weight.data(),
        false,
        T::one(),
        &mut out,
    );
    Ok(Tensor::from_parts(vec![n, o], out))
}

pub(crate) fn dense_dims<T: Element>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    let (&[n, f], &[wf, o]) = (input.shape(), weight.shape()) else {
        return Err(Error::shape("dense", input.shape(), weight.shape()));
    };
    if f != wf {
        return Err(Error::shape("dense", input.shape(), weight.shape()));
    }
    check_bias("dense", bias, o)?;
    Ok((n, f, o))
}

/// Numerically stable `softplus(x) = ln(1 + e^x)`.
pub fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
