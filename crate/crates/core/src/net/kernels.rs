//! im2col / col2im lowering and a thin GEMM wrapper.

use crate::error::{Error, Result};

/// Geometry of a 2-D convolution over one sample with `channels` input planes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        h: usize,
        w: usize,
        k: usize,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Self> {
        let span = dilation * (k - 1) + 1;
        if h + 2 * pad < span || w + 2 * pad < span {
            return Err(Error::invalid(
                "conv",
                format!("{h}x{w} input too small for kernel span {span} with padding {pad}"),
            ));
        }
        Ok(ConvGeom {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            dilation,
            out_h: (h + 2 * pad - span) / stride + 1,
            out_w: (w + 2 * pad - span) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// 1×1, stride 1, no padding: the column matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input coordinate of kernel tap `kk` for output coordinate `o`, if in bounds.
    #[inline]
    fn source(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + kk * self.dilation) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

/// Unfolds `x` (`channels × h × w`) into `col` (`channels·k·k × out_h·out_w`).
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let sy = g.source(oy, ky, g.h);
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match (sy, g.source(ox, kx, g.w)) {
                            (Some(sy), Some(sx)) => plane[sy * g.w + sx],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `col` back onto `x`, accumulating.
pub(crate) fn col2im_add(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let p = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let Some(sy) = g.source(oy, ky, g.h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        if let Some(sx) = g.source(ox, kx, g.w) {
                            plane[sy * g.w + sx] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = beta·c + op(a)·op(b)` with `op(a)` of size `m × k`, `op(b)` of size `k × n`.
///
/// `a_t`/`b_t` mark operands stored transposed (`a` as `k × m`, `b` as `n × k`).
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
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every index reachable through
    // the dimensions and strides above.
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
