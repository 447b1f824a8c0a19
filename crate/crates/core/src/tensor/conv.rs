//! Cross-correlation kernels on raw CHW buffers.
//!
//! The graph uses the im2col + GEMM path. The direct loop kernels are kept
//! as the reference implementation the GEMM path is tested against.

use std::cell::RefCell;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Range of output indices whose input index `o * stride + tap - padding`
    /// falls inside `[0, size)`.
    fn valid(&self, tap: usize, size: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let p = self.padding;
        // o*s + tap >= p
        let lo = if tap >= p { 0 } else { (p - tap).div_ceil(s) };
        // o*s + tap - p <= size - 1
        let hi = if size + p > tap {
            ((size + p - tap - 1) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, (usize, usize), (usize, usize))) {
        for ky in 0..self.k {
            let rows = self.valid(ky, self.h, self.out_h);
            for kx in 0..self.k {
                let cols = self.valid(kx, self.w, self.out_w);
                if rows.0 < rows.1 && cols.0 < cols.1 {
                    f(ky, kx, rows, cols);
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) fn forward_direct(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.out_h * g.out_w;
    let mut out = vec![0.0; g.c_out * plane_out];
    for (o, out_o) in out.chunks_exact_mut(plane_out).enumerate() {
        out_o.fill(bias[o]);
        for c in 0..g.c_in {
            let in_c = &input[c * plane_in..(c + 1) * plane_in];
            let w_oc = &weight[(o * g.c_in + c) * g.k * g.k..][..g.k * g.k];
            g.for_each_tap(|ky, kx, (oy0, oy1), (ox0, ox1)| {
                let wv = w_oc[ky * g.k + kx];
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let row_in = &in_c[iy * g.w..(iy + 1) * g.w];
                    let row_out = &mut out_o[oy * g.out_w + ox0..oy * g.out_w + ox1];
                    let ix0 = ox0 * g.stride + kx - g.padding;
                    if g.stride == 1 {
                        let src = &row_in[ix0..ix0 + row_out.len()];
                        for (dst, &x) in row_out.iter_mut().zip(src) {
                            *dst += wv * x;
                        }
                    } else {
                        let src = row_in[ix0..].iter().step_by(g.stride);
                        for (dst, &x) in row_out.iter_mut().zip(src) {
                            *dst += wv * x;
                        }
                    }
                }
            });
        }
    }
    out
}

#[cfg(test)]
pub(crate) fn backward_direct(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    mut grad_input: Option<&mut [f64]>,
    mut grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let plane_in = g.h * g.w;
    let plane_out = g.out_h * g.out_w;
    if let Some(gb) = grad_bias {
        for (o, go) in grad_out.chunks_exact(plane_out).enumerate() {
            gb[o] += sum4(go);
        }
    }
    for (o, go) in grad_out.chunks_exact(plane_out).enumerate() {
        for c in 0..g.c_in {
            let in_c = &input[c * plane_in..(c + 1) * plane_in];
            let w_base = (o * g.c_in + c) * g.k * g.k;
            g.for_each_tap(|ky, kx, (oy0, oy1), (ox0, ox1)| {
                let widx = w_base + ky * g.k + kx;
                let wv = weight[widx];
                let mut acc = 0.0;
                for oy in oy0..oy1 {
                    let iy = oy * g.stride + ky - g.padding;
                    let ix0 = ox0 * g.stride + kx - g.padding;
                    let g_row = &go[oy * g.out_w + ox0..oy * g.out_w + ox1];
                    if grad_weight.is_some() {
                        let row_in = &in_c[iy * g.w..(iy + 1) * g.w];
                        acc += if g.stride == 1 {
                            dot4(g_row, &row_in[ix0..ix0 + g_row.len()])
                        } else {
                            g_row
                                .iter()
                                .zip(row_in[ix0..].iter().step_by(g.stride))
                                .map(|(a, b)| a * b)
                                .sum::<f64>()
                        };
                    }
                    if let Some(gi) = grad_input.as_deref_mut() {
                        let row = &mut gi[c * plane_in + iy * g.w..c * plane_in + (iy + 1) * g.w];
                        if g.stride == 1 {
                            let dst = &mut row[ix0..ix0 + g_row.len()];
                            for (d, &gv) in dst.iter_mut().zip(g_row) {
                                *d += wv * gv;
                            }
                        } else {
                            for (d, &gv) in row[ix0..].iter_mut().step_by(g.stride).zip(g_row) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
                if let Some(gw) = grad_weight.as_deref_mut() {
                    gw[widx] += acc;
                }
            });
        }
    }
}

impl ConvGeometry {
    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    /// Unrolls the input into a `[C*k*k, OH*OW]` patch matrix.
    fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let n_out = self.out_h * self.out_w;
        cols.fill(0.0);
        for c in 0..self.c_in {
            let in_c = &input[c * self.h * self.w..][..self.h * self.w];
            self.for_each_tap(|ky, kx, (oy0, oy1), (ox0, ox1)| {
                let row = (c * self.k + ky) * self.k + kx;
                let dst = &mut cols[row * n_out..][..n_out];
                for oy in oy0..oy1 {
                    let iy = oy * self.stride + ky - self.padding;
                    let ix0 = ox0 * self.stride + kx - self.padding;
                    let src = in_c[iy * self.w + ix0..(iy + 1) * self.w].iter().step_by(self.stride);
                    for (d, &x) in dst[oy * self.out_w + ox0..oy * self.out_w + ox1].iter_mut().zip(src) {
                        *d = x;
                    }
                }
            });
        }
    }

    /// Scatter-adds a patch matrix back onto an input-shaped buffer.
    fn col2im(&self, cols: &[f64], grad_input: &mut [f64]) {
        let n_out = self.out_h * self.out_w;
        for c in 0..self.c_in {
            let gi_c = &mut grad_input[c * self.h * self.w..][..self.h * self.w];
            self.for_each_tap(|ky, kx, (oy0, oy1), (ox0, ox1)| {
                let row = (c * self.k + ky) * self.k + kx;
                let src = &cols[row * n_out..][..n_out];
                for oy in oy0..oy1 {
                    let iy = oy * self.stride + ky - self.padding;
                    let ix0 = ox0 * self.stride + kx - self.padding;
                    let dst = gi_c[iy * self.w + ix0..(iy + 1) * self.w].iter_mut().step_by(self.stride);
                    for (d, &v) in dst.zip(&src[oy * self.out_w + ox0..oy * self.out_w + ox1]) {
                        *d += v;
                    }
                }
            });
        }
    }
}

thread_local! {
    static PATCHES: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
    static PATCH_GRADS: RefCell<Vec<f64>> = const { RefCell::new(Vec::new()) };
}

/// Runs `f` on a reusable per-thread buffer of length `len` (contents
/// unspecified). Keeps large patch matrices off the allocator's hot path.
fn with_scratch<R>(slot: usize, len: usize, f: impl FnOnce(&mut [f64]) -> R) -> R {
    let key = if slot == 0 { &PATCHES } else { &PATCH_GRADS };
    key.with(|s| {
        let mut buf = s.borrow_mut();
        if buf.len() < len {
            buf.resize(len, 0.0);
        }
        f(&mut buf[..len])
    })
}

/// `c[m,n] = beta * c + a[m,k] * b[k,n]`, row-major; `a_t`/`b_t` read the
/// operand as the transpose of a row-major buffer.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: bounds asserted above; strides describe dense row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

pub(crate) fn forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let n_out = g.out_h * g.out_w;
    let mut out = vec![0.0; g.c_out * n_out];
    for (o, row) in out.chunks_exact_mut(n_out).enumerate() {
        row.fill(bias[o]);
    }
    if g.is_pointwise() {
        gemm(g.c_out, g.c_in, n_out, weight, false, input, false, 1.0, &mut out);
    } else {
        with_scratch(0, g.patch_len() * n_out, |cols| {
            g.im2col(input, cols);
            gemm(g.c_out, g.patch_len(), n_out, weight, false, cols, false, 1.0, &mut out);
        });
    }
    out
}

/// Accumulates gradients of a convolution into the provided buffers.
/// Any of the three outputs may be skipped with `None`.
pub(crate) fn backward(
    g: &ConvGeometry,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_weight: Option<&mut [f64]>,
    grad_bias: Option<&mut [f64]>,
) {
    let n_out = g.out_h * g.out_w;
    let kk = g.patch_len();
    if let Some(gb) = grad_bias {
        for (o, go) in grad_out.chunks_exact(n_out).enumerate() {
            gb[o] += sum4(go);
        }
    }
    let need_cols = grad_weight.is_some();
    let weight_and_input_grads = move |cols: &[f64]| {
        if let Some(gw) = grad_weight {
            grad_weight_gemm(g.c_out, n_out, kk, grad_out, cols, gw);
        }
        if let Some(gi) = grad_input {
            if g.is_pointwise() {
                gemm(kk, g.c_out, n_out, weight, true, grad_out, false, 1.0, gi);
            } else {
                with_scratch(1, kk * n_out, |gcols| {
                    gemm(kk, g.c_out, n_out, weight, true, grad_out, false, 0.0, gcols);
                    g.col2im(gcols, gi);
                });
            }
        }
    };
    if g.is_pointwise() {
        weight_and_input_grads(input);
    } else if need_cols {
        with_scratch(0, kk * n_out, |cols| {
            g.im2col(input, cols);
            weight_and_input_grads(cols);
        });
    } else {
        weight_and_input_grads(&[]);
    }
}

/// `gw[o, p] += sum_n grad_out[o, n] * cols[p, n]`, computed as the
/// transposed product `cols * grad_out^T` written through transposed strides
/// so both operands are read along contiguous rows.
fn grad_weight_gemm(c_out: usize, n_out: usize, kk: usize, grad_out: &[f64], cols: &[f64], gw: &mut [f64]) {
    assert!(grad_out.len() >= c_out * n_out && cols.len() >= kk * n_out && gw.len() >= c_out * kk);
    // SAFETY: bounds asserted above; C is addressed as gw^T with row stride 1.
    unsafe {
        matrixmultiply::dgemm(
            kk,
            n_out,
            c_out,
            1.0,
            cols.as_ptr(),
            n_out as isize,
            1,
            grad_out.as_ptr(),
            1,
            n_out as isize,
            1.0,
            gw.as_mut_ptr(),
            1,
            kk as isize,
        );
    }
}

fn sum4(xs: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let chunks = xs.chunks_exact(4);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for i in 0..4 {
            acc[i] += c[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
fn dot4(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
