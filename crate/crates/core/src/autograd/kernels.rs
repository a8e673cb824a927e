//! Dense kernels backing the convolution ops: a row-major gemm wrapper and
//! the patch gather/scatter pair.

/// Sliding-window geometry: an image of `channels × height × width` read by
/// `kernel × kernel` windows at `stride` with zero `pad`, giving an
/// `out_h × out_w` grid of windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let out_h = (height + 2 * pad - kernel) / stride + 1;
        let out_w = (width + 2 * pad - kernel) / stride + 1;
        Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h,
            out_w,
        }
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// `c = op(a)·op(b) + beta·c` for row-major operands; `op` transposes when
/// the flag is set (`a` is then stored `k×m`, `b` stored `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_t {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

/// Output columns `[lo, hi)` whose input column `ow·stride + kw − pad`
/// falls inside `0..width`.
fn valid_cols(g: &Window, kw: usize) -> (usize, usize) {
    let offset = kw as isize - g.pad as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset) as usize).div_ceil(g.stride)
    };
    let hi = if offset >= g.width as isize {
        0
    } else {
        ((g.width as isize - offset) as usize).div_ceil(g.stride)
    };
    (lo.min(g.out_w), hi.clamp(lo.min(g.out_w), g.out_w))
}

/// Gathers windows of one image into columns `[col0, col0 + positions)` of a
/// `rows × ld` matrix.
pub(crate) fn im2col(img: &[f64], g: &Window, cols: &mut [f64], ld: usize, col0: usize) {
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let (lo, hi) = valid_cols(g, kw);
                let dst = &mut cols[row * ld + col0..row * ld + col0 + g.positions()];
                for oh in 0..g.out_h {
                    let iy = (oh * g.stride + kh) as isize - g.pad as isize;
                    let line = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo == hi {
                        continue;
                    }
                    let start = (lo * g.stride + kw) - g.pad;
                    let src = &plane[iy as usize * g.width + start..];
                    if g.stride == 1 {
                        line[lo..hi].copy_from_slice(&src[..hi - lo]);
                    } else {
                        for (v, x) in line[lo..hi].iter_mut().zip(src.iter().step_by(g.stride)) {
                            *v = *x;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `img`.
pub(crate) fn col2im(cols: &[f64], g: &Window, ld: usize, col0: usize, img: &mut [f64]) {
    let k = g.kernel;
    for c in 0..g.channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for kh in 0..k {
            for kw in 0..k {
                let row = (c * k + kh) * k + kw;
                let (lo, hi) = valid_cols(g, kw);
                if lo == hi {
                    continue;
                }
                let start = (lo * g.stride + kw) - g.pad;
                let src = &cols[row * ld + col0..row * ld + col0 + g.positions()];
                for oh in 0..g.out_h {
                    let iy = (oh * g.stride + kh) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oh * g.out_w + lo..oh * g.out_w + hi];
                    let dst = &mut plane[iy as usize * g.width + start..];
                    if g.stride == 1 {
                        for (d, v) in dst.iter_mut().zip(line) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst.iter_mut().step_by(g.stride).zip(line) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}
