//! Raw slice kernels shared by the forward and backward passes.

use rayon::prelude::*;

/// Stride and zero padding of a 2-D convolution over `[channels, time, freq]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: (usize, usize),
    /// (before, after) padding along the first spatial axis.
    pub pad_h: (usize, usize),
    /// (before, after) padding along the second spatial axis.
    pub pad_w: (usize, usize),
}

impl Conv2dSpec {
    pub fn new(stride: (usize, usize), pad_h: (usize, usize), pad_w: (usize, usize)) -> Self {
        Conv2dSpec { stride, pad_h, pad_w }
    }

    /// Output spatial size for an input of `(h, w)` and kernel `(kh, kw)`, if positive.
    pub fn output_size(&self, h: usize, w: usize, kh: usize, kw: usize) -> Option<(usize, usize)> {
        let hp = h + self.pad_h.0 + self.pad_h.1;
        let wp = w + self.pad_w.0 + self.pad_w.1;
        if hp < kh || wp < kw || self.stride.0 == 0 || self.stride.1 == 0 {
            return None;
        }
        Some(((hp - kh) / self.stride.0 + 1, (wp - kw) / self.stride.1 + 1))
    }
}

/// Output positions `o` for which `o * stride + k - pad` lands in `[0, len)`.
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> std::ops::Range<usize> {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    if len + pad <= k {
        return 0..0;
    }
    let hi = ((len - 1 + pad - k) / stride + 1).min(out_len);
    lo..hi.max(lo)
}

pub(crate) struct ConvDims {
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
}

/// Rows of width `w` rearranged so that columns `p, p + s, p + 2s, ...` are
/// contiguous: element `col` of a row lives at `(col % s) * wq + col / s`.
fn deinterleave(x: &[f64], w: usize, s: usize) -> (Vec<f64>, usize) {
    let wq = w.div_ceil(s);
    if s == 1 {
        return (x.to_vec(), wq);
    }
    let rows = x.len() / w.max(1);
    let mut out = vec![0.0; rows * s * wq];
    for (src, dst) in x.chunks(w).zip(out.chunks_mut(s * wq)) {
        for (col, v) in src.iter().enumerate() {
            dst[(col % s) * wq + col / s] = *v;
        }
    }
    (out, wq)
}

fn interleave(xq: &[f64], w: usize, s: usize, wq: usize) -> Vec<f64> {
    if s == 1 {
        return xq.to_vec();
    }
    let rows = xq.len() / (s * wq).max(1);
    let mut out = vec![0.0; rows * w];
    for (src, dst) in xq.chunks(s * wq).zip(out.chunks_mut(w)) {
        for (col, v) in dst.iter_mut().enumerate() {
            *v = src[(col % s) * wq + col / s];
        }
    }
    out
}

/// Offset inside a deinterleaved row of the input column `ow * s + j - pad`
/// at `ow = 0` (may be negative; only valid `ow` are ever added to it).
fn tap_offset(j: usize, pad: usize, s: usize, wq: usize) -> isize {
    let off = j as isize - pad as isize;
    off.rem_euclid(s as isize) * wq as isize + off.div_euclid(s as isize)
}

fn tap_slice(r: &std::ops::Range<usize>, off: isize) -> std::ops::Range<usize> {
    (r.start as isize + off) as usize..(r.end as isize + off) as usize
}

/// `out[o] = bias[o] + sum_c w[o, c] (*) x[c]` (cross-correlation).
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], bias: Option<&[f64]>, d: &ConvDims, s: &Conv2dSpec) -> Vec<f64> {
    let mut out = vec![0.0; d.co * d.ho * d.wo];
    let rows: Vec<_> = (0..d.kh).map(|i| valid_range(i, s.pad_h.0, s.stride.0, d.h, d.ho)).collect();
    let cols: Vec<_> = (0..d.kw).map(|j| valid_range(j, s.pad_w.0, s.stride.1, d.w, d.wo)).collect();
    let (xq, wq) = deinterleave(x, d.w, s.stride.1);
    let row_len = wq * s.stride.1;
    let offs: Vec<_> = (0..d.kw).map(|j| tap_offset(j, s.pad_w.0, s.stride.1, wq)).collect();
    out.par_chunks_mut(d.ho * d.wo).enumerate().for_each(|(o, out_c)| {
        if let Some(b) = bias {
            out_c.iter_mut().for_each(|v| *v = b[o]);
        }
        for c in 0..d.ci {
            let xc = &xq[c * d.h * row_len..(c + 1) * d.h * row_len];
            let wbase = (o * d.ci + c) * d.kh * d.kw;
            for i in 0..d.kh {
                for oh in rows[i].clone() {
                    let ih = oh * s.stride.0 + i - s.pad_h.0;
                    let xrow = &xc[ih * row_len..(ih + 1) * row_len];
                    let orow = &mut out_c[oh * d.wo..(oh + 1) * d.wo];
                    for j in 0..d.kw {
                        let wv = w[wbase + i * d.kw + j];
                        let r = cols[j].clone();
                        let src = &xrow[tap_slice(&r, offs[j])];
                        for (dst, xv) in orow[r].iter_mut().zip(src) {
                            *dst += wv * xv;
                        }
                    }
                }
            }
        }
    });
    out
}

/// Adjoint of [`conv2d_forward`] with respect to its input: maps `[co, ho, wo]` to `[ci, h, w]`.
pub(crate) fn conv2d_adjoint(g: &[f64], w: &[f64], d: &ConvDims, s: &Conv2dSpec) -> Vec<f64> {
    let rows: Vec<_> = (0..d.kh).map(|i| valid_range(i, s.pad_h.0, s.stride.0, d.h, d.ho)).collect();
    let cols: Vec<_> = (0..d.kw).map(|j| valid_range(j, s.pad_w.0, s.stride.1, d.w, d.wo)).collect();
    let wq = d.w.div_ceil(s.stride.1);
    let row_len = wq * s.stride.1;
    let offs: Vec<_> = (0..d.kw).map(|j| tap_offset(j, s.pad_w.0, s.stride.1, wq)).collect();
    let mut xg = vec![0.0; d.ci * d.h * row_len];
    xg.par_chunks_mut(d.h * row_len).enumerate().for_each(|(c, xg_c)| {
        for o in 0..d.co {
            let gc = &g[o * d.ho * d.wo..(o + 1) * d.ho * d.wo];
            let wbase = (o * d.ci + c) * d.kh * d.kw;
            for i in 0..d.kh {
                for oh in rows[i].clone() {
                    let ih = oh * s.stride.0 + i - s.pad_h.0;
                    let grow = &gc[oh * d.wo..(oh + 1) * d.wo];
                    let xrow = &mut xg_c[ih * row_len..(ih + 1) * row_len];
                    for j in 0..d.kw {
                        let wv = w[wbase + i * d.kw + j];
                        let r = cols[j].clone();
                        let dst = &mut xrow[tap_slice(&r, offs[j])];
                        for (xv, gv) in dst.iter_mut().zip(&grow[r]) {
                            *xv += wv * gv;
                        }
                    }
                }
            }
        }
    });
    interleave(&xg, d.w, s.stride.1, wq)
}

/// Gradient of [`conv2d_forward`] with respect to the kernel.
pub(crate) fn conv2d_weight_grad(x: &[f64], g: &[f64], d: &ConvDims, s: &Conv2dSpec) -> Vec<f64> {
    let mut wg = vec![0.0; d.co * d.ci * d.kh * d.kw];
    let rows: Vec<_> = (0..d.kh).map(|i| valid_range(i, s.pad_h.0, s.stride.0, d.h, d.ho)).collect();
    let cols: Vec<_> = (0..d.kw).map(|j| valid_range(j, s.pad_w.0, s.stride.1, d.w, d.wo)).collect();
    let (xq, wq) = deinterleave(x, d.w, s.stride.1);
    let row_len = wq * s.stride.1;
    let offs: Vec<_> = (0..d.kw).map(|j| tap_offset(j, s.pad_w.0, s.stride.1, wq)).collect();
    wg.par_chunks_mut(d.ci * d.kh * d.kw).enumerate().for_each(|(o, wg_o)| {
        let gc = &g[o * d.ho * d.wo..(o + 1) * d.ho * d.wo];
        for c in 0..d.ci {
            let xc = &xq[c * d.h * row_len..(c + 1) * d.h * row_len];
            for i in 0..d.kh {
                for j in 0..d.kw {
                    let mut acc = 0.0;
                    let r = cols[j].clone();
                    for oh in rows[i].clone() {
                        let ih = oh * s.stride.0 + i - s.pad_h.0;
                        let src = &xc[ih * row_len..(ih + 1) * row_len][tap_slice(&r, offs[j])];
                        let grow = &gc[oh * d.wo..(oh + 1) * d.wo];
                        acc += grow[r.clone()].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                    wg_o[(c * d.kh + i) * d.kw + j] = acc;
                }
            }
        }
    });
    wg
}

const PAR_MATMUL_WORK: usize = 1 << 16;

/// `c[b] = a[b] (n x k) * b[b] (k x m)`; `b` is shared across the batch when `shared_b`.
pub(crate) fn matmul(a: &[f64], b: &[f64], batch: usize, n: usize, k: usize, m: usize, shared_b: bool) -> Vec<f64> {
    let mut c = vec![0.0; batch * n * m];
    if m == 0 {
        return c;
    }
    let row = |(r, crow): (usize, &mut [f64])| {
        let bi = r / n.max(1);
        let arow = &a[r * k..(r + 1) * k];
        let bmat = if shared_b { b } else { &b[bi * k * m..(bi + 1) * k * m] };
        for (p, &av) in arow.iter().enumerate() {
            let brow = &bmat[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    };
    if batch * n * k * m >= PAR_MATMUL_WORK {
        c.par_chunks_mut(m).enumerate().for_each(row);
    } else {
        c.chunks_mut(m).enumerate().for_each(row);
    }
    c
}

/// `ga[b] = g[b] (n x m) * b[b]^T`.
pub(crate) fn matmul_grad_a(g: &[f64], b: &[f64], batch: usize, n: usize, k: usize, m: usize, shared_b: bool) -> Vec<f64> {
    let mut ga = vec![0.0; batch * n * k];
    if k == 0 {
        return ga;
    }
    let row = |(r, garow): (usize, &mut [f64])| {
        let bi = r / n.max(1);
        let grow = &g[r * m..(r + 1) * m];
        let bmat = if shared_b { b } else { &b[bi * k * m..(bi + 1) * k * m] };
        for (p, gv) in garow.iter_mut().enumerate() {
            *gv = grow.iter().zip(&bmat[p * m..(p + 1) * m]).map(|(x, y)| x * y).sum();
        }
    };
    if batch * n * k * m >= PAR_MATMUL_WORK {
        ga.par_chunks_mut(k).enumerate().for_each(row);
    } else {
        ga.chunks_mut(k).enumerate().for_each(row);
    }
    ga
}

/// `gb[b] = a[b]^T * g[b]`, summed over the batch when `shared_b`.
pub(crate) fn matmul_grad_b(a: &[f64], g: &[f64], batch: usize, n: usize, k: usize, m: usize, shared_b: bool) -> Vec<f64> {
    let mats = if shared_b { 1 } else { batch };
    let mut gb = vec![0.0; mats * k * m];
    let accumulate = |gbm: &mut [f64], bi: usize| {
        for i in 0..n {
            let r = bi * n + i;
            let arow = &a[r * k..(r + 1) * k];
            let grow = &g[r * m..(r + 1) * m];
            for (p, &av) in arow.iter().enumerate() {
                for (dst, gv) in gbm[p * m..(p + 1) * m].iter_mut().zip(grow) {
                    *dst += av * gv;
                }
            }
        }
    };
    if shared_b {
        if k * m > 0 {
            // Split output rows across threads; each thread walks the batch in order.
            let cols = m;
            gb.par_chunks_mut(cols).enumerate().for_each(|(p, dst)| {
                for r in 0..batch * n {
                    let av = a[r * k + p];
                    for (d, gv) in dst.iter_mut().zip(&g[r * m..(r + 1) * m]) {
                        *d += av * gv;
                    }
                }
            });
        }
    } else if k * m > 0 {
        gb.par_chunks_mut(k * m).enumerate().for_each(|(bi, gbm)| accumulate(gbm, bi));
    }
    gb
}
