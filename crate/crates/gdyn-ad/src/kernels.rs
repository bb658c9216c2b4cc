//! Hand-rolled compute kernels behind the tape ops. All maps are `[h, w, c]`
//! row-major with channels innermost.

use crate::Real;

/// Output spatial size of a strided convolution.
pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output spatial size of a transposed convolution.
pub fn conv_transpose_out_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> usize {
    (input - 1) * stride + kernel + out_pad - 2 * pad
}

/// Gather 3x3 (or kxk) patches into a `(ho*wo) x (k*k*c)` matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Real>(
    input: &[T],
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut cols = vec![T::zero(); ho * wo * kernel * kernel * c];
    let row_len = kernel * kernel * c;
    for oy in 0..ho {
        for ox in 0..wo {
            let out_row = (oy * wo + ox) * row_len;
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = ((iy as usize) * w + ix as usize) * c;
                    let dst = out_row + (ky * kernel + kx) * c;
                    cols[dst..dst + c].copy_from_slice(&input[src..src + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch rows back onto an `[h, w, c]` map.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Real>(
    cols: &[T],
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut out = vec![T::zero(); h * w * c];
    let row_len = kernel * kernel * c;
    for oy in 0..ho {
        for ox in 0..wo {
            let in_row = (oy * wo + ox) * row_len;
            for ky in 0..kernel {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kernel {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = ((iy as usize) * w + ix as usize) * c;
                    let src = in_row + (ky * kernel + kx) * c;
                    for i in 0..c {
                        out[dst + i] += cols[src + i];
                    }
                }
            }
        }
    }
    out
}

/// Row-major matmul with optional transposes, `C = alpha*op(A)*op(B) + beta*C`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    // op(A) is m x k, op(B) is k x n; transposition is realized via strides.
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    T::gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c);
}

/// Per-channel mean and 1/sqrt(var + eps) over the spatial extent.
pub fn instance_norm_stats<T: Real>(x: &[T], hw: usize, c: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut mean = vec![T::zero(); c];
    let mut inv_std = vec![T::zero(); c];
    let n = T::from_f64(hw as f64);
    for ch in 0..c {
        let mut s = T::zero();
        for p in 0..hw {
            s += x[p * c + ch];
        }
        mean[ch] = s / n;
    }
    for ch in 0..c {
        let mut s = T::zero();
        for p in 0..hw {
            let d = x[p * c + ch] - mean[ch];
            s += d * d;
        }
        inv_std[ch] = T::one() / (s / n + eps).sqrt();
    }
    (mean, inv_std)
}
