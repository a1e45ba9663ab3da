//! Forward/backward kernels on channel-major activations (C × N × H × W).

use super::scalar::Real;

pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Act<T> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Act<T> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![T::zero(); c * n * h * w],
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.n * self.h * self.w
    }

    /// Channel concatenation is buffer concatenation in this layout.
    pub fn concat(a: &Act<T>, b: &Act<T>) -> Act<T> {
        assert_eq!((a.n, a.h, a.w), (b.n, b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Act {
            c: a.c + b.c,
            n: a.n,
            h: a.h,
            w: a.w,
            data,
        }
    }

    pub fn split(self, c_first: usize) -> (Act<T>, Act<T>) {
        let cut = c_first * self.cols();
        let mut first = self.data;
        let second = first.split_off(cut);
        (
            Act {
                c: c_first,
                n: self.n,
                h: self.h,
                w: self.w,
                data: first,
            },
            Act {
                c: self.c - c_first,
                n: self.n,
                h: self.h,
                w: self.w,
                data: second,
            },
        )
    }
}

/// 3×3, stride 1, zero padding 1. Output rows (ci, ky, kx), columns (n, y, x).
pub fn im2col3<T: Real>(x: &Act<T>) -> Vec<T> {
    let (h, w, cols) = (x.h, x.w, x.cols());
    let mut out = vec![T::zero(); x.c * 9 * cols];
    for ci in 0..x.c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut out[((ci * 9) + ky * 3 + kx) * cols..][..cols];
                for b in 0..x.n {
                    let src_plane = &x.data[(ci * x.n + b) * h * w..][..h * w];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src = &src_plane[sy as usize * w..][..w];
                        let dst = &mut row[(b * h + y) * w..][..w];
                        match kx {
                            0 => dst[1..].copy_from_slice(&src[..w - 1]),
                            1 => dst.copy_from_slice(src),
                            _ => dst[..w - 1].copy_from_slice(&src[1..]),
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col3`].
pub fn col2im3<T: Real>(cols_buf: &[T], c: usize, n: usize, h: usize, w: usize) -> Act<T> {
    let mut x = Act::zeros(c, n, h, w);
    let cols = n * h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols_buf[((ci * 9) + ky * 3 + kx) * cols..][..cols];
                for b in 0..n {
                    let dst_plane = &mut x.data[(ci * n + b) * h * w..][..h * w];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let dst = &mut dst_plane[sy as usize * w..][..w];
                        let src = &row[(b * h + y) * w..][..w];
                        match kx {
                            0 => dst[..w - 1]
                                .iter_mut()
                                .zip(&src[1..])
                                .for_each(|(d, &s)| *d += s),
                            1 => dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s),
                            _ => dst[1..]
                                .iter_mut()
                                .zip(&src[..w - 1])
                                .for_each(|(d, &s)| *d += s),
                        }
                    }
                }
            }
        }
    }
    x
}

/// `weight` is Cout × (Cin·9).
pub fn conv3_forward<T: Real>(x: &Act<T>, weight: &[T], c_out: usize) -> Act<T> {
    let cols = im2col3(x);
    let mut y = Act::zeros(c_out, x.n, x.h, x.w);
    T::gemm(c_out, x.c * 9, x.cols(), T::one(), weight, false, &cols, false, T::zero(), &mut y.data);
    y
}

/// Accumulates the weight gradient into `dweight`; returns the input gradient when asked.
pub fn conv3_backward<T: Real>(
    x: &Act<T>,
    weight: &[T],
    dy: &Act<T>,
    dweight: &mut [T],
    want_dx: bool,
) -> Option<Act<T>> {
    let cols = im2col3(x);
    let k = x.c * 9;
    T::gemm(dy.c, x.cols(), k, T::one(), &dy.data, false, &cols, true, T::one(), dweight);
    if !want_dx {
        return None;
    }
    let mut dcols = cols;
    T::gemm(k, dy.c, x.cols(), T::one(), weight, true, &dy.data, false, T::zero(), &mut dcols);
    Some(col2im3(&dcols, x.c, x.n, x.h, x.w))
}

/// Instance normalization (no affine) fused with ReLU. Returns (output, normalized, inv_std).
pub fn norm_relu_forward<T: Real>(x: &Act<T>) -> (Act<T>, Vec<T>, Vec<T>) {
    let p = x.plane();
    let eps = T::of(NORM_EPS);
    let mut xhat = vec![T::zero(); x.data.len()];
    let mut inv_std = Vec::with_capacity(x.c * x.n);
    for (src, dst) in x.data.chunks_exact(p).zip(xhat.chunks_exact_mut(p)) {
        let mean = src.iter().fold(T::zero(), |a, &v| a + v) / T::of(p as f64);
        let var = src.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) / T::of(p as f64);
        let is = T::one() / (var + eps).sqrt();
        for (d, &v) in dst.iter_mut().zip(src) {
            *d = (v - mean) * is;
        }
        inv_std.push(is);
    }
    let out = Act {
        c: x.c,
        n: x.n,
        h: x.h,
        w: x.w,
        data: xhat.iter().map(|&v| v.max(T::zero())).collect(),
    };
    (out, xhat, inv_std)
}

pub fn norm_relu_backward<T: Real>(dy: &Act<T>, xhat: &[T], inv_std: &[T]) -> Act<T> {
    let p = dy.plane();
    let pf = T::of(p as f64);
    let mut dx = Act::zeros(dy.c, dy.n, dy.h, dy.w);
    for (s, dst) in dx.data.chunks_exact_mut(p).enumerate() {
        let g = &dy.data[s * p..][..p];
        let xh = &xhat[s * p..][..p];
        // gradient through ReLU
        let mut sum_g = T::zero();
        let mut sum_gx = T::zero();
        for (&gi, &xi) in g.iter().zip(xh) {
            if xi > T::zero() {
                sum_g += gi;
                sum_gx += gi * xi;
            }
        }
        let mg = sum_g / pf;
        let mgx = sum_gx / pf;
        for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(xh) {
            let gr = if xi > T::zero() { gi } else { T::zero() };
            *d = inv_std[s] * (gr - mg - xi * mgx);
        }
    }
    dx
}

/// 2×2 max pooling; returns the winning offset (0..4) per output cell.
pub fn maxpool2_forward<T: Real>(x: &Act<T>) -> (Act<T>, Vec<u8>) {
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut y = Act::zeros(x.c, x.n, oh, ow);
    let mut arg = vec![0u8; y.data.len()];
    for s in 0..x.c * x.n {
        let src = &x.data[s * x.h * x.w..][..x.h * x.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (src[2 * oy * x.w + 2 * ox], 0u8);
                for (k, (dy, dx)) in [(0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let v = src[(2 * oy + dy) * x.w + 2 * ox + dx];
                    if v > best.0 {
                        best = (v, k as u8 + 1);
                    }
                }
                let o = s * oh * ow + oy * ow + ox;
                y.data[o] = best.0;
                arg[o] = best.1;
            }
        }
    }
    (y, arg)
}

pub fn maxpool2_backward<T: Real>(dy: &Act<T>, arg: &[u8], h: usize, w: usize) -> Act<T> {
    let mut dx = Act::zeros(dy.c, dy.n, h, w);
    let (oh, ow) = (dy.h, dy.w);
    for s in 0..dy.c * dy.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = s * oh * ow + oy * ow + ox;
                let (ddy, ddx) = [(0, 0), (0, 1), (1, 0), (1, 1)][arg[o] as usize];
                dx.data[s * h * w + (2 * oy + ddy) * w + 2 * ox + ddx] += dy.data[o];
            }
        }
    }
    dx
}

pub fn upsample2_forward<T: Real>(x: &Act<T>) -> Act<T> {
    let (oh, ow) = (x.h * 2, x.w * 2);
    let mut y = Act::zeros(x.c, x.n, oh, ow);
    for s in 0..x.c * x.n {
        for oy in 0..oh {
            for ox in 0..ow {
                y.data[s * oh * ow + oy * ow + ox] = x.data[s * x.h * x.w + (oy / 2) * x.w + ox / 2];
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &Act<T>) -> Act<T> {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, dy.n, h, w);
    for s in 0..dy.c * dy.n {
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                dx.data[s * h * w + (oy / 2) * w + ox / 2] += dy.data[s * dy.h * dy.w + oy * dy.w + ox];
            }
        }
    }
    dx
}
