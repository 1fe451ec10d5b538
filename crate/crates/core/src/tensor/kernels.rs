//! Raw numeric kernels (no tape). Convolutions are lowered to GEMM via im2col.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// `c (+)= op(a) · op(b)` with `op(a)` of size `m×k` and `op(b)` of size `k×n`.
///
/// Untransposed operands are row-major `m×k` / `k×n`; a transposed operand is
/// stored row-major as `k×m` / `n×k`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: out length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the assertions above pin every slice to exactly the extent the
    // strides address.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Validates a `[C_out, C_in, k, k]` kernel against a `[C_in, H, W]` input.
pub(crate) fn check_conv(input: &[usize], kernel: &[usize]) -> Result<()> {
    if input.len() != 3 || kernel.len() != 4 || kernel[2] != kernel[3] {
        return Err(Error::dim("conv2d", input, kernel));
    }
    if kernel[2] % 2 == 0 {
        return Err(Error::Config(format!(
            "conv2d needs an odd kernel size for same padding, got {}",
            kernel[2]
        )));
    }
    if kernel[1] != input[0] {
        return Err(Error::dim("conv2d", input, kernel));
    }
    Ok(())
}

/// Unfolds a `[c, h, w]` buffer into `(c·k·k) × (h·w)` columns, zero padded.
fn im2col<T: Real>(src: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let mut col = vec![T::zero(); c * k * k * hw];
    let p = (k / 2) as isize;
    for ci in 0..c {
        let plane = &src[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * hw..(row + 1) * hw];
                let dx = kx as isize - p;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = sy as usize * w;
                    let d = &mut dst[y * w + x0..y * w + x1];
                    let s = &plane[(s0 as isize + x0 as isize + dx) as usize
                        ..(s0 as isize + x1 as isize + dx) as usize];
                    d.copy_from_slice(s);
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: folds columns back, summing overlaps.
fn col2im<T: Real>(col: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let hw = h * w;
    let mut dst = vec![T::zero(); c * hw];
    let p = (k / 2) as isize;
    for ci in 0..c {
        let plane = &mut dst[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * hw..(row + 1) * hw];
                let dx = kx as isize - p;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + ky as isize - p;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = (sy as usize * w) as isize + dx;
                    for x in x0..x1 {
                        plane[(base + x as isize) as usize] += src[y * w + x];
                    }
                }
            }
        }
    }
    dst
}

fn columns<T: Real>(src: &[T], c: usize, h: usize, w: usize, k: usize) -> std::borrow::Cow<'_, [T]> {
    if k == 1 {
        std::borrow::Cow::Borrowed(src)
    } else {
        std::borrow::Cow::Owned(im2col(src, c, h, w, k))
    }
}

/// Same-padded stride-1 cross-correlation: `[C_in,H,W] ⋆ [C_out,C_in,k,k] → [C_out,H,W]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    check_conv(input.shape(), kernel.shape())?;
    let (ci, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (co, k) = (kernel.shape()[0], kernel.shape()[2]);
    let col = columns(input.data(), ci, h, w, k);
    let mut out = vec![T::zero(); co * h * w];
    gemm(co, ci * k * k, h * w, kernel.data(), false, &col, false, &mut out, false);
    Ok(Tensor::from_parts(vec![co, h, w], out))
}

/// Gradient of [`conv2d`] with respect to its input.
pub fn conv2d_input_grad<T: Real>(grad: &Tensor<T>, kernel: &Tensor<T>) -> Tensor<T> {
    let (co, h, w) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let (ci, k) = (kernel.shape()[1], kernel.shape()[2]);
    let mut dcol = vec![T::zero(); ci * k * k * h * w];
    gemm(ci * k * k, co, h * w, kernel.data(), true, grad.data(), false, &mut dcol, false);
    let data = if k == 1 { dcol } else { col2im(&dcol, ci, h, w, k) };
    Tensor::from_parts(vec![ci, h, w], data)
}

/// Gradient of [`conv2d`] with respect to its kernel.
pub fn conv2d_kernel_grad<T: Real>(grad: &Tensor<T>, input: &Tensor<T>, k: usize) -> Tensor<T> {
    let (co, h, w) = (grad.shape()[0], grad.shape()[1], grad.shape()[2]);
    let ci = input.shape()[0];
    let col = columns(input.data(), ci, h, w, k);
    let mut dk = vec![T::zero(); co * ci * k * k];
    gemm(co, h * w, ci * k * k, grad.data(), false, &col, true, &mut dk, false);
    Tensor::from_parts(vec![co, ci, k, k], dk)
}

/// Stride-1 same-padded transposed convolution:
/// `[C_in,H,W]` with kernel `[C_in,C_out,k,k]` → `[C_out,H,W]`.
///
/// This is exactly the input-adjoint of a [`conv2d`] mapping `C_out → C_in`.
pub fn conv_transpose2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>) -> Result<Tensor<T>> {
    let (s, ks) = (input.shape(), kernel.shape());
    if s.len() != 3 || ks.len() != 4 || ks[2] != ks[3] || ks[0] != s[0] {
        return Err(Error::dim("conv_transpose2d", s, ks));
    }
    if ks[2] % 2 == 0 {
        return Err(Error::Config(format!(
            "conv_transpose2d needs an odd kernel size, got {}",
            ks[2]
        )));
    }
    Ok(conv2d_input_grad(input, kernel))
}
