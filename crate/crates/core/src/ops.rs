//! Forward and backward kernels of the dense primitives.
//!
//! The functions here are stateless; [`crate::autodiff::Tape`] records their
//! inputs and calls the matching backward kernel during the reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Output rows `t0..t1` that read input row `t + shift` for kernel tap `dt`.
fn tap_range(len: usize, k: usize, dt: usize) -> Option<(usize, usize, isize)> {
    let shift = dt as isize - ((k - 1) / 2) as isize;
    let t0 = (-shift).max(0) as usize;
    let t1 = (len as isize - shift).min(len as isize).max(0) as usize;
    (t0 < t1).then_some((t0, t1, shift))
}

fn broadcast_bias<T: Real>(rows: usize, bias: &Tensor<T>) -> Tensor<T> {
    let width = bias.len();
    let mut out = Tensor::zeros(&[rows, width]);
    for row in out.data_mut().chunks_exact_mut(width.max(1)) {
        row.copy_from_slice(bias.data());
    }
    out
}

fn column_sums<T: Real>(grad: &[T], width: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[width]);
    for row in grad.chunks_exact(width) {
        for (a, &v) in out.data_mut().iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    out
}

fn conv1d_dims<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    if input.rank() != 2 || input.dim(0) == 0 {
        return Err(Error::shape("conv1d", format!("input must be L×C with L>=1, got {:?}", input.shape())));
    }
    if weight.rank() != 3 {
        return Err(Error::shape("conv1d", format!("weight must be k×Cin×Cout, got {:?}", weight.shape())));
    }
    let (l, cin) = (input.dim(0), input.dim(1));
    let (k, wcin, cout) = (weight.dim(0), weight.dim(1), weight.dim(2));
    if k % 2 == 0 {
        return Err(Error::shape("conv1d", format!("kernel size must be odd, got {k}")));
    }
    if wcin != cin {
        return Err(Error::shape("conv1d", format!("weight expects {wcin} input channels, input has {cin}")));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape("conv1d", format!("bias {:?} vs {cout} outputs", bias.shape())));
    }
    Ok((l, cin, k, cout))
}

/// Same-length temporal convolution.
///
/// `input` is `L×Cin`, `weight` is `k×Cin×Cout` with odd `k`, `bias` is
/// `Cout`. The sequence is zero padded by `(k-1)/2` on both sides.
pub fn conv1d<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (l, cin, k, cout) = conv1d_dims(input, weight, bias)?;
    let mut out = broadcast_bias(l, bias);
    for dt in 0..k {
        let Some((t0, t1, shift)) = tap_range(l, k, dt) else { continue };
        let s0 = (t0 as isize + shift) as usize;
        let rows = t1 - t0;
        gemm(
            rows,
            cin,
            cout,
            &input.data()[s0 * cin..(s0 + rows) * cin],
            Layout::Plain,
            &weight.data()[dt * cin * cout..(dt + 1) * cin * cout],
            Layout::Plain,
            &mut out.data_mut()[t0 * cout..t1 * cout],
            true,
        );
    }
    Ok(out)
}

/// Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv1d_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (l, cin) = (input.dim(0), input.dim(1));
    let (k, cout) = (weight.dim(0), weight.dim(2));
    let mut grad_input = Tensor::zeros(&[l, cin]);
    let mut grad_weight = Tensor::zeros(weight.shape());
    for dt in 0..k {
        let Some((t0, t1, shift)) = tap_range(l, k, dt) else { continue };
        let s0 = (t0 as isize + shift) as usize;
        let rows = t1 - t0;
        let g = &grad_out.data()[t0 * cout..t1 * cout];
        let w = &weight.data()[dt * cin * cout..(dt + 1) * cin * cout];
        gemm(
            rows,
            cout,
            cin,
            g,
            Layout::Plain,
            w,
            Layout::Transposed,
            &mut grad_input.data_mut()[s0 * cin..(s0 + rows) * cin],
            true,
        );
        gemm(
            cin,
            rows,
            cout,
            &input.data()[s0 * cin..(s0 + rows) * cin],
            Layout::Transposed,
            g,
            Layout::Plain,
            &mut grad_weight.data_mut()[dt * cin * cout..(dt + 1) * cin * cout],
            false,
        );
    }
    (grad_input, grad_weight, column_sums(grad_out.data(), cout))
}

fn linear_dims<T: Real>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize)> {
    if weight.rank() != 2 {
        return Err(Error::shape(op, format!("weight must be Cin×Cout, got {:?}", weight.shape())));
    }
    let (cin, cout) = (weight.dim(0), weight.dim(1));
    if input.rank() == 0 || input.last_dim() != cin {
        return Err(Error::shape(op, format!("input {:?} does not end in {cin} channels", input.shape())));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(op, format!("bias {:?} vs {cout} outputs", bias.shape())));
    }
    Ok((input.len() / cin.max(1), cin, cout))
}

/// Affine map over the trailing axis, applied independently at every leading
/// position (a 1×1 convolution over maps).
pub fn pointwise_linear<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (rows, cin, cout) = linear_dims("pointwise_linear", input, weight, bias)?;
    let mut out = broadcast_bias(rows, bias);
    gemm(rows, cin, cout, input.data(), Layout::Plain, weight.data(), Layout::Plain, out.data_mut(), true);
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("rank checked") = cout;
    out.reshape(&shape)
}

pub fn pointwise_linear_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (cin, cout) = (weight.dim(0), weight.dim(1));
    let rows = input.len() / cin.max(1);
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weight = Tensor::zeros(&[cin, cout]);
    gemm(rows, cout, cin, grad_out.data(), Layout::Plain, weight.data(), Layout::Transposed, grad_input.data_mut(), false);
    gemm(cin, rows, cout, input.data(), Layout::Transposed, grad_out.data(), Layout::Plain, grad_weight.data_mut(), false);
    (grad_input, grad_weight, column_sums(grad_out.data(), cout))
}

/// Fully connects the `N×C` block at every `(i, j)` of an `L×L×N×C` tensor to
/// `Cout` channels, giving `L×L×Cout`.
pub fn conv_collapse_samples<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (flat_in, flat_w) = collapse_views(input, weight)?;
    let out = pointwise_linear(&flat_in, &flat_w, bias).map_err(|_| {
        Error::shape("conv_collapse_samples", format!("bias {:?} does not match weight {:?}", bias.shape(), weight.shape()))
    })?;
    let (li, lj, cout) = (input.dim(0), input.dim(1), weight.dim(2));
    out.reshape(&[li, lj, cout])
}

pub fn conv_collapse_samples_backward<T: Real>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (flat_in, flat_w) = collapse_views(input, weight).expect("validated in forward");
    let (gi, gw, gb) = pointwise_linear_backward(grad_out, &flat_in, &flat_w);
    (
        gi.reshape(input.shape()).expect("same size"),
        gw.reshape(weight.shape()).expect("same size"),
        gb,
    )
}

fn collapse_views<T: Real>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if input.rank() != 4 || weight.rank() != 3 || input.shape()[2..] != weight.shape()[..2] {
        return Err(Error::shape(
            "conv_collapse_samples",
            format!("input {:?} vs weight {:?}", input.shape(), weight.shape()),
        ));
    }
    let s = input.shape();
    let (rows, block) = (s[0] * s[1], s[2] * s[3]);
    Ok((
        input.clone().reshape(&[rows, block])?,
        weight.clone().reshape(&[block, weight.dim(2)])?,
    ))
}

#[inline]
pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Real>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Relu => input.map(|v| v.max(T::zero())),
        Activation::Sigmoid => input.map(sigmoid_scalar),
    }
}

/// Backward of an activation given its forward *output*.
pub fn activation_backward<T: Real>(grad_out: &Tensor<T>, output: &Tensor<T>, kind: Activation) -> Tensor<T> {
    let data = grad_out
        .data()
        .iter()
        .zip(output.data())
        .map(|(&g, &y)| match kind {
            Activation::Relu => {
                if y > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            Activation::Sigmoid => g * y * (T::one() - y),
        })
        .collect();
    Tensor::from_vec(grad_out.shape(), data).expect("same shape")
}

pub fn elementwise_sum<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("elementwise_sum", format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn stack_mean<T: Real>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::Invalid("stack_mean of an empty list".into()))?;
    let mut out = Tensor::zeros(first.shape());
    for t in inputs {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack_mean", format!("{:?} vs {:?}", t.shape(), first.shape())));
        }
        out.add_assign(t);
    }
    out.scale(T::one() / T::from_usize_lossy(inputs.len()));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn conv1d_hand_example() {
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let w = t(&[3, 1, 1], &[1.0, 1.0, 1.0]);
        let out = conv1d(&x, &w, &t(&[1], &[0.0])).unwrap();
        assert_eq!(out.data(), &[3.0, 6.0, 5.0]);
    }

    #[test]
    fn conv1d_uses_kernel_orientation() {
        // out[t] = w0*x[t-1] + w1*x[t] + w2*x[t+1]
        let x = t(&[3, 1], &[1.0, 2.0, 3.0]);
        let w = t(&[3, 1, 1], &[1.0, 10.0, 100.0]);
        let out = conv1d(&x, &w, &t(&[1], &[0.5])).unwrap();
        assert_eq!(out.data(), &[210.5, 321.5, 32.5]);
    }

    #[test]
    fn conv1d_identity_kernel_one() {
        let x = Tensor::<f64>::from_fn(&[4, 3], |v| v as f64 - 5.0);
        let mut w = Tensor::<f64>::zeros(&[1, 3, 3]);
        for c in 0..3 {
            w.data_mut()[c * 3 + c] = 1.0;
        }
        assert_eq!(conv1d(&x, &w, &Tensor::zeros(&[3])).unwrap(), x);
    }

    #[test]
    fn conv1d_length_one_and_errors() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = Tensor::<f64>::full(&[3, 2, 1], 1.0);
        assert_eq!(conv1d(&x, &w, &t(&[1], &[0.0])).unwrap().data(), &[3.0]);
        assert!(conv1d(&x, &Tensor::zeros(&[3, 3, 1]), &t(&[1], &[0.0])).is_err());
        assert!(conv1d(&x, &Tensor::zeros(&[2, 2, 1]), &t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn pointwise_linear_hand_example() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let w = t(&[2, 1], &[1.0, 2.0]);
        let out = pointwise_linear(&x, &w, &t(&[1], &[1.0])).unwrap();
        assert_eq!(out.data(), &[6.0]);
        assert!(pointwise_linear(&x, &t(&[3, 1], &[0.0; 3]), &t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn pointwise_linear_keeps_leading_axes() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |v| v as f64);
        let mut w = Tensor::<f64>::zeros(&[4, 4]);
        for c in 0..4 {
            w.data_mut()[c * 4 + c] = 1.0;
        }
        let out = pointwise_linear(&x, &w, &Tensor::zeros(&[4])).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn collapse_sums_block() {
        let x = Tensor::<f64>::full(&[2, 2, 2, 3], 1.0);
        let w = Tensor::<f64>::full(&[2, 3, 1], 1.0);
        let out = conv_collapse_samples(&x, &w, &t(&[1], &[0.0])).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert!(out.data().iter().all(|&v| v == 6.0));

        let single = Tensor::<f64>::from_fn(&[3, 3, 1, 1], |v| v as f64);
        let sq = conv_collapse_samples(&single, &t(&[1, 1, 1], &[1.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(sq.data(), single.data());
        assert!(conv_collapse_samples(&x, &Tensor::zeros(&[3, 3, 1]), &t(&[1], &[0.0])).is_err());
    }

    #[test]
    fn activations() {
        let x = t(&[3], &[-3.0, 0.0, 3.0]);
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 3.0]);
        let s = activation(&x, Activation::Sigmoid);
        assert_eq!(s.data()[1], 0.5);
        assert!(s.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let g = activation_backward(&Tensor::full(&[3], 1.0), &s, Activation::Sigmoid);
        assert_eq!(g.data()[1], 0.25);
    }

    #[test]
    fn sums_and_means() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(elementwise_sum(&a, &b).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(elementwise_sum(&a, &Tensor::zeros(&[2])).unwrap(), a);
        assert!(elementwise_sum(&a, &t(&[1], &[0.0])).is_err());
        let m = stack_mean(&[&t(&[1], &[0.0]), &t(&[1], &[1.0])]).unwrap();
        assert_eq!(m.data(), &[0.5]);
        assert_eq!(stack_mean(&[&a, &a, &a]).unwrap(), a);
        assert!(stack_mean::<f64>(&[]).is_err());
    }
}
