//! Raw compute kernels shared by the tape ops and the no-tape eval path.
//!
//! The matmul uses an i-k-j loop so the inner loop streams both operands;
//! convolution goes through im2col so the heavy lifting is also a matmul.
//! Parallel variants split over independent output rows (or samples), so
//! each value is accumulated in a fixed order and results are
//! bit-identical regardless of thread count.

use crate::exec;

/// Work threshold (in multiply-adds) below which splitting is not worth it.
const PAR_MIN_FLOPS: usize = 100_000;

/// Overflow-safe logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// C = A[m,k] * B[k,n].
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_into(&mut out, a, b, m, k, n);
    out
}

/// C += A[m,k] * B[k,n], writing into a zeroed or pre-accumulated buffer.
pub fn matmul_into(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |i: usize, c_row: &mut [f64]| {
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..kk * n + n];
            for (c, &bv) in c_row.iter_mut().zip(b_row) {
                *c += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_FLOPS && m > 1 {
        exec::par_chunks_mut(out, n, |i, c_row| row(i, c_row));
    } else {
        for (i, c_row) in out.chunks_mut(n).enumerate() {
            row(i, c_row);
        }
    }
}

/// C = A^T[k,m]^T... i.e. C[k,n] = sum_r A[r,k_idx] * B[r,n_idx] for
/// A[m,k], B[m,n]. Used for weight gradients.
pub fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (ki, &av) in a_row.iter().enumerate() {
            let o = &mut out[ki * n..ki * n + n];
            for (c, &bv) in o.iter_mut().zip(b_row) {
                *c += av * bv;
            }
        }
    }
    out
}

/// C[m,k] = A[m,n] * B^T where B is [k,n]. Inner loop is a dot product
/// over contiguous rows of both operands.
pub fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    let row = |i: usize, c_row: &mut [f64]| {
        let a_row = &a[i * n..(i + 1) * n];
        for (ki, c) in c_row.iter_mut().enumerate() {
            let b_row = &b[ki * n..(ki + 1) * n];
            let mut s = 0.0;
            for (av, bv) in a_row.iter().zip(b_row) {
                s += av * bv;
            }
            *c = s;
        }
    };
    if m * n * k >= PAR_MIN_FLOPS && m > 1 {
        exec::par_chunks_mut(&mut out, k, |i, c_row| row(i, c_row));
    } else {
        for (i, c_row) in out.chunks_mut(k).enumerate() {
            row(i, c_row);
        }
    }
    out
}

/// Spatial/channel dimensions of a same-padding stride-1 convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    pub fn patch_len(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// Zero padding before the first row/column. Total padding is
    /// kernel-1 (stride 1, same output size); the extra cell of an even
    /// kernel goes after the input, as in common NN frameworks.
    pub fn pad_top(&self) -> usize {
        (self.kh - 1) / 2
    }

    pub fn pad_left(&self) -> usize {
        (self.kw - 1) / 2
    }
}

/// Unroll one [h,w,cin] sample into a [h*w, kh*kw*cin] patch matrix.
pub fn im2col(input: &[f64], d: &ConvDims, patches: &mut [f64]) {
    let k = d.patch_len();
    debug_assert_eq!(patches.len(), d.h * d.w * k);
    debug_assert_eq!(input.len(), d.h * d.w * d.cin);
    let (pt, pl) = (d.pad_top() as isize, d.pad_left() as isize);
    for y in 0..d.h {
        for x in 0..d.w {
            let row = &mut patches[(y * d.w + x) * k..(y * d.w + x + 1) * k];
            let mut idx = 0;
            for dy in 0..d.kh {
                let iy = y as isize + dy as isize - pt;
                if iy < 0 || iy >= d.h as isize {
                    row[idx..idx + d.kw * d.cin].fill(0.0);
                    idx += d.kw * d.cin;
                    continue;
                }
                for dx in 0..d.kw {
                    let ix = x as isize + dx as isize - pl;
                    if ix < 0 || ix >= d.w as isize {
                        row[idx..idx + d.cin].fill(0.0);
                    } else {
                        let src = ((iy as usize) * d.w + ix as usize) * d.cin;
                        row[idx..idx + d.cin].copy_from_slice(&input[src..src + d.cin]);
                    }
                    idx += d.cin;
                }
            }
        }
    }
}

/// Scatter-add a patch-gradient matrix back onto the input grid
/// (the adjoint of [`im2col`]).
pub fn col2im_add(dpatches: &[f64], d: &ConvDims, dinput: &mut [f64]) {
    let k = d.patch_len();
    debug_assert_eq!(dpatches.len(), d.h * d.w * k);
    debug_assert_eq!(dinput.len(), d.h * d.w * d.cin);
    let (pt, pl) = (d.pad_top() as isize, d.pad_left() as isize);
    for y in 0..d.h {
        for x in 0..d.w {
            let row = &dpatches[(y * d.w + x) * k..(y * d.w + x + 1) * k];
            let mut idx = 0;
            for dy in 0..d.kh {
                let iy = y as isize + dy as isize - pt;
                if iy < 0 || iy >= d.h as isize {
                    idx += d.kw * d.cin;
                    continue;
                }
                for dx in 0..d.kw {
                    let ix = x as isize + dx as isize - pl;
                    if ix >= 0 && ix < d.w as isize {
                        let dst = ((iy as usize) * d.w + ix as usize) * d.cin;
                        for c in 0..d.cin {
                            dinput[dst + c] += row[idx + c];
                        }
                    }
                    idx += d.cin;
                }
            }
        }
    }
}

/// Filters stored [f, kh, kw, cin] row-major, re-laid-out as a
/// [patch_len, f] matrix so the conv forward is `patches * wt`.
pub fn filters_to_wt(filters: &[f64], d: &ConvDims) -> Vec<f64> {
    let k = d.patch_len();
    let f = d.filters;
    debug_assert_eq!(filters.len(), f * k);
    let mut wt = vec![0.0; k * f];
    for fi in 0..f {
        for ki in 0..k {
            wt[ki * f + fi] = filters[fi * k + ki];
        }
    }
    wt
}

/// Same-padding stride-1 convolution of one sample. `wt` comes from
/// [`filters_to_wt`]. Output layout [h, w, f] row-major.
pub fn conv2d_same_sample(input: &[f64], wt: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let k = d.patch_len();
    let mut patches = vec![0.0; d.h * d.w * k];
    im2col(input, d, &mut patches);
    let mut out = matmul(&patches, wt, d.h * d.w, k, d.filters);
    for row in out.chunks_mut(d.filters) {
        for (o, b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
    out
}

/// Per-sample backward pass of the same-padding convolution.
/// Returns (dinput, d_wt [patch_len,f], dbias).
pub fn conv2d_same_backward_sample(
    input: &[f64],
    wt: &[f64],
    dout: &[f64],
    d: &ConvDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let k = d.patch_len();
    let hw = d.h * d.w;
    let mut patches = vec![0.0; hw * k];
    im2col(input, d, &mut patches);

    let dwt = matmul_at_b(&patches, dout, hw, k, d.filters);
    let mut dbias = vec![0.0; d.filters];
    for row in dout.chunks(d.filters) {
        for (b, v) in dbias.iter_mut().zip(row) {
            *b += v;
        }
    }
    let dpatches = matmul_a_bt(dout, wt, hw, d.filters, k);

    let mut dinput = vec![0.0; hw * d.cin];
    col2im_add(&dpatches, d, &mut dinput);
    (dinput, dwt, dbias)
}

/// Average pooling with stride equal to the pool size; trailing rows or
/// columns that do not fill a window are dropped.
pub fn avgpool2d_sample(
    input: &[f64],
    h: usize,
    w: usize,
    c: usize,
    ph: usize,
    pw: usize,
) -> Vec<f64> {
    let oh = h / ph;
    let ow = w / pw;
    let inv = 1.0 / (ph * pw) as f64;
    let mut out = vec![0.0; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let mut s = 0.0;
                for dy in 0..ph {
                    for dx in 0..pw {
                        s += input[((oy * ph + dy) * w + ox * pw + dx) * c + ch];
                    }
                }
                out[(oy * ow + ox) * c + ch] = s * inv;
            }
        }
    }
    out
}

/// Adjoint of [`avgpool2d_sample`]; cells outside the pooled region get
/// zero gradient.
pub fn avgpool2d_backward_sample(
    dout: &[f64],
    h: usize,
    w: usize,
    c: usize,
    ph: usize,
    pw: usize,
) -> Vec<f64> {
    let oh = h / ph;
    let ow = w / pw;
    let inv = 1.0 / (ph * pw) as f64;
    let mut dinput = vec![0.0; h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            for ch in 0..c {
                let g = dout[(oy * ow + ox) * c + ch] * inv;
                for dy in 0..ph {
                    for dx in 0..pw {
                        dinput[((oy * ph + dy) * w + ox * pw + dx) * c + ch] += g;
                    }
                }
            }
        }
    }
    dinput
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [2x3] * [3x2]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0];
        let c = matmul(&a, &b, 2, 3, 2);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_transposes_agree() {
        let a: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect(); // 3x4
        let b: Vec<f64> = (0..20).map(|i| (i as f64).sin()).collect(); // 4x5
        let c = matmul(&a, &b, 3, 4, 5);

        // A^T * C' route: matmul_at_b(A as [3,4], X as [3,5]) = A^T X
        let x: Vec<f64> = (0..15).map(|i| i as f64 * 0.1).collect(); // 3x5
        let atx = matmul_at_b(&a, &x, 3, 4, 5);
        // reference: transpose then matmul
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a[i * 4 + j];
            }
        }
        let reference = matmul(&at, &x, 4, 3, 5);
        for (u, v) in atx.iter().zip(&reference) {
            assert!((u - v).abs() < 1e-12);
        }

        // A * B^T route
        let bt_in = matmul_a_bt(&c, &b, 3, 5, 4); // C[3,5] * (B[4,5])^T
        let mut bt = vec![0.0; 20];
        for i in 0..4 {
            for j in 0..5 {
                bt[j * 4 + i] = b[i * 5 + j];
            }
        }
        let reference2 = matmul(&c, &bt, 3, 5, 4);
        for (u, v) in bt_in.iter().zip(&reference2) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_floor_semantics() {
        // h=5, pool 2 -> oh=2, last row dropped
        let input: Vec<f64> = (0..5).map(|i| i as f64).collect(); // 5x1x1
        let out = avgpool2d_sample(&input, 5, 1, 1, 2, 1);
        assert_eq!(out, vec![0.5, 2.5]);
    }
}
