//! im2col lowering for 2-D convolution.
//!
//! `build_col` unrolls input patches into a `[ci*kh*kw, oh*ow]` matrix so the
//! convolution becomes one matmul with the `[co, ci*kh*kw]` weight view;
//! `col_to_input` is its adjoint and scatter-adds patch gradients back onto
//! the input layout. Out-of-bounds taps are zero padding.

/// Output spatial size for one axis: floor((n + 2*pad - k) / stride) + 1.
pub fn out_dim(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
pub fn build_col(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let mut col = vec![0.0; ci * kh * kw * oh * ow];
    let o_spatial = oh * ow;
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * o_spatial;
                for oy in 0..oh {
                    let iy = (oy * stride.0 + ki) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = (c * h + iy as usize) * w;
                    let col_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride.1 + kj) as isize - pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[col_row + ox] = x[x_row + ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of `build_col`: scatter-adds a col-shaped gradient onto `dx`.
#[allow(clippy::too_many_arguments)]
pub fn col_to_input(
    dcol: &[f64],
    dx: &mut [f64],
    ci: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    pad: (usize, usize),
    oh: usize,
    ow: usize,
) {
    let o_spatial = oh * ow;
    for c in 0..ci {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * o_spatial;
                for oy in 0..oh {
                    let iy = (oy * stride.0 + ki) as isize - pad.0 as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = (c * h + iy as usize) * w;
                    let col_row = row + oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride.1 + kj) as isize - pad.1 as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[x_row + ix as usize] += dcol[col_row + ox];
                    }
                }
            }
        }
    }
}
