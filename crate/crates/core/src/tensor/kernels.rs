//! Slice-level forward and backward kernels used by the tape.

use alloc::vec;
use alloc::vec::Vec;

use super::{gemm, Element, Trans};

/// Upper bound on im2col buffer elements; larger batches are processed in
/// sample chunks.
const COL_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    fn pixels_out(&self) -> usize {
        self.out_h * self.out_w
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    fn chunk(&self) -> usize {
        let per_sample = self.pixels_out() * self.patch();
        (COL_BUDGET / per_sample.max(1)).clamp(1, self.batch)
    }
}

fn im2col<T: Element>(x: &[T], g: &ConvGeom, samples: core::ops::Range<usize>, col: &mut [T]) {
    let patch = g.patch();
    let in_sample = g.h * g.w * g.cin;
    let mut row = 0;
    for b in samples {
        let xs = &x[b * in_sample..(b + 1) * in_sample];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut col[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        let off = (ky * g.kw + kx) * g.cin;
                        let seg = &mut dst[off..off + g.cin];
                        if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                            seg.fill(T::zero());
                        } else {
                            let src = (iy as usize * g.w + ix as usize) * g.cin;
                            seg.copy_from_slice(&xs[src..src + g.cin]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im_add<T: Element>(col: &[T], g: &ConvGeom, samples: core::ops::Range<usize>, dx: &mut [T]) {
    let patch = g.patch();
    let in_sample = g.h * g.w * g.cin;
    let mut row = 0;
    for b in samples {
        let dxs = &mut dx[b * in_sample..(b + 1) * in_sample];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &col[row * patch..(row + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let off = (ky * g.kw + kx) * g.cin;
                        let dst = (iy as usize * g.w + ix as usize) * g.cin;
                        for (d, &s) in dxs[dst..dst + g.cin].iter_mut().zip(&src[off..off + g.cin]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

pub(crate) fn conv_forward<T: Element>(x: &[T], kernel: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let rows_per_sample = g.pixels_out();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * rows_per_sample * g.cout];
    let chunk = g.chunk();
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); chunk * rows_per_sample * patch]
    };
    let mut b0 = 0;
    while b0 < g.batch {
        let b1 = (b0 + chunk).min(g.batch);
        let rows = (b1 - b0) * rows_per_sample;
        let dst = &mut out[b0 * rows_per_sample * g.cout..b1 * rows_per_sample * g.cout];
        if g.pointwise() {
            let src = &x[b0 * rows_per_sample * g.cin..b1 * rows_per_sample * g.cin];
            gemm(rows, patch, g.cout, src, Trans::No, kernel, Trans::No, T::zero(), dst);
        } else {
            im2col(x, g, b0..b1, &mut col);
            gemm(rows, patch, g.cout, &col, Trans::No, kernel, Trans::No, T::zero(), dst);
        }
        b0 = b1;
    }
    if let Some(bias) = bias {
        for px in out.chunks_exact_mut(g.cout) {
            for (o, &b) in px.iter_mut().zip(bias) {
                *o += b;
            }
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub kernel: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub(crate) fn conv_backward<T: Element>(
    x: &[T],
    kernel: &[T],
    dy: &[T],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads<T> {
    let (want_x, want_k, want_b) = want;
    let rows_per_sample = g.pixels_out();
    let patch = g.patch();
    let mut dx = want_x.then(|| vec![T::zero(); x.len()]);
    let mut dk = want_k.then(|| vec![T::zero(); kernel.len()]);
    let db = want_b.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for px in dy.chunks_exact(g.cout) {
            for (d, &v) in db.iter_mut().zip(px) {
                *d += v;
            }
        }
        db
    });
    if want_x || want_k {
        let chunk = g.chunk();
        let mut col = vec![
            T::zero();
            if g.pointwise() {
                0
            } else {
                chunk * rows_per_sample * patch
            }
        ];
        let mut dcol = vec![
            T::zero();
            if want_x && !g.pointwise() {
                chunk * rows_per_sample * patch
            } else {
                0
            }
        ];
        let mut b0 = 0;
        while b0 < g.batch {
            let b1 = (b0 + chunk).min(g.batch);
            let rows = (b1 - b0) * rows_per_sample;
            let dys = &dy[b0 * rows_per_sample * g.cout..b1 * rows_per_sample * g.cout];
            if let Some(dk) = dk.as_mut() {
                let beta = if b0 == 0 { T::zero() } else { T::one() };
                if g.pointwise() {
                    let src = &x[b0 * rows_per_sample * g.cin..b1 * rows_per_sample * g.cin];
                    gemm(patch, rows, g.cout, src, Trans::Yes, dys, Trans::No, beta, dk);
                } else {
                    im2col(x, g, b0..b1, &mut col);
                    gemm(
                        patch,
                        rows,
                        g.cout,
                        &col[..rows * patch],
                        Trans::Yes,
                        dys,
                        Trans::No,
                        beta,
                        dk,
                    );
                }
            }
            if let Some(dx) = dx.as_mut() {
                if g.pointwise() {
                    let dst = &mut dx[b0 * rows_per_sample * g.cin..b1 * rows_per_sample * g.cin];
                    gemm(rows, g.cout, patch, dys, Trans::No, kernel, Trans::Yes, T::zero(), dst);
                } else {
                    gemm(
                        rows,
                        g.cout,
                        patch,
                        dys,
                        Trans::No,
                        kernel,
                        Trans::Yes,
                        T::zero(),
                        &mut dcol,
                    );
                    col2im_add(&dcol, g, b0..b1, dx);
                }
            }
            b0 = b1;
        }
    }
    ConvGrads {
        input: dx,
        kernel: dk,
        bias: db,
    }
}

/// Per-channel mean and biased variance of `[n, c]` data.
pub(crate) fn channel_moments<T: Element>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let n = x.len() / c;
    let mut acc = vec![0.0f64; c];
    for row in x.chunks_exact(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v.to_f64();
        }
    }
    let mean: Vec<f64> = acc.iter().map(|a| a / n as f64).collect();
    let mut var = vec![0.0f64; c];
    for row in x.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v.to_f64() - m;
            *s += d * d;
        }
    }
    (
        mean.into_iter().map(T::from_f64).collect(),
        var.into_iter().map(|s| T::from_f64(s / n as f64)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &[f64], k: &[f64], g: &ConvGeom) -> Vec<f64> {
        let mut out = vec![0.0; g.batch * g.out_h * g.out_w * g.cout];
        for b in 0..g.batch {
            for oy in 0..g.out_h {
                for ox in 0..g.out_w {
                    for co in 0..g.cout {
                        let mut s = 0.0;
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = (oy * g.stride + ky) as isize - g.pad_top as isize;
                                let ix = (ox * g.stride + kx) as isize - g.pad_left as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                for ci in 0..g.cin {
                                    s += x[((b * g.h + iy as usize) * g.w + ix as usize) * g.cin + ci]
                                        * k[((ky * g.kw + kx) * g.cin + ci) * g.cout + co];
                                }
                            }
                        }
                        out[((b * g.out_h + oy) * g.out_w + ox) * g.cout + co] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let g = ConvGeom {
            batch: 3,
            h: 7,
            w: 6,
            cin: 2,
            kh: 3,
            kw: 3,
            cout: 4,
            stride: 2,
            pad_top: 1,
            pad_left: 1,
            out_h: 4,
            out_w: 3,
        };
        let x: Vec<f64> = (0..3 * 7 * 6 * 2).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..3 * 3 * 2 * 4).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        assert_eq!(conv_forward(&x, &k, None, &g), naive_conv(&x, &k, &g));
    }
}
