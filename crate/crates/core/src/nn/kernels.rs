//! Batched tensor kernels in NCHW layout with explicit backward passes.
//!
//! Convolutions are 3x3, stride 1, zero padding 1, lowered to a single GEMM
//! over the whole batch via im2col.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

fn im2col(x: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = x.dim();
    let hw = h * w;
    let mut cols = Array2::<f64>::zeros((c * 9, n * hw));
    let xs = x.as_standard_layout();
    let xs = xs.as_slice().expect("standard layout");
    let row_len = n * hw;
    let cs = cols.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * row_len;
                for ni in 0..n {
                    let plane = &xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    let dst = &mut cs[row + ni * hw..row + (ni + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let dst_row = &mut dst[y * w..(y + 1) * w];
                        // valid x range for this kx
                        let (x0, x1) = match kx {
                            0 => (1, w),
                            1 => (0, w),
                            _ => (0, w.saturating_sub(1)),
                        };
                        for xo in x0..x1 {
                            dst_row[xo] = src_row[xo + kx - 1];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
    let hw = h * w;
    let mut x = Array4::<f64>::zeros((n, c, h, w));
    let row_len = n * hw;
    let cs = cols.as_slice().expect("standard layout");
    let xs = x.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * row_len;
                for ni in 0..n {
                    let src = &cs[row + ni * hw..row + (ni + 1) * hw];
                    let plane = &mut xs[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let src_row = &src[y * w..(y + 1) * w];
                        let dst_row = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                        let (x0, x1) = match kx {
                            0 => (1, w),
                            1 => (0, w),
                            _ => (0, w.saturating_sub(1)),
                        };
                        for xo in x0..x1 {
                            dst_row[xo + kx - 1] += src_row[xo];
                        }
                    }
                }
            }
        }
    }
    x
}

/// (cout, n*h*w) -> (n, cout, h, w)
fn unfold_out(out: Array2<f64>, n: usize, h: usize, w: usize) -> Array4<f64> {
    let cout = out.nrows();
    let a = out.into_shape_with_order((cout, n, h, w)).expect("conv output reshape");
    a.permuted_axes([1, 0, 2, 3]).as_standard_layout().into_owned()
}

/// (n, c, h, w) -> (c, n*h*w)
fn fold_grad(dy: &Array4<f64>) -> Array2<f64> {
    let (n, c, h, w) = dy.dim();
    dy.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, n * h * w))
        .expect("grad reshape")
}

pub fn conv3x3_forward(x: &Array4<f64>, weight: ArrayView2<f64>, bias: Option<ArrayView1<f64>>) -> Array4<f64> {
    let (n, _c, h, w) = x.dim();
    let cols = im2col(x);
    let mut out = Array2::<f64>::zeros((weight.nrows(), n * h * w));
    general_mat_mul(1.0, &weight, &cols, 0.0, &mut out);
    if let Some(b) = bias {
        for (mut row, &bv) in out.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row += bv;
        }
    }
    unfold_out(out, n, h, w)
}

/// Returns dL/dx; accumulates weight/bias gradients when provided.
pub fn conv3x3_backward(
    x: &Array4<f64>,
    weight: ArrayView2<f64>,
    dy: &Array4<f64>,
    dweight: Option<ArrayViewMut2<f64>>,
    dbias: Option<ArrayViewMut1<f64>>,
) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let dy2 = fold_grad(dy);
    if let Some(mut dw) = dweight {
        let cols = im2col(x);
        general_mat_mul(1.0, &dy2, &cols.t(), 1.0, &mut dw);
    }
    if let Some(mut db) = dbias {
        db += &dy2.sum_axis(Axis(1));
    }
    let mut dcols = Array2::<f64>::zeros((c * 9, n * h * w));
    general_mat_mul(1.0, &weight.t(), &dy2, 0.0, &mut dcols);
    col2im(&dcols, n, c, h, w)
}

pub fn linear_forward(x: &Array2<f64>, weight: ArrayView2<f64>, bias: Option<ArrayView1<f64>>) -> Array2<f64> {
    let mut y = Array2::<f64>::zeros((x.nrows(), weight.nrows()));
    general_mat_mul(1.0, x, &weight.t(), 0.0, &mut y);
    if let Some(b) = bias {
        y += &b;
    }
    y
}

pub fn linear_backward(
    x: &Array2<f64>,
    weight: ArrayView2<f64>,
    dy: &Array2<f64>,
    dweight: Option<ArrayViewMut2<f64>>,
    dbias: Option<ArrayViewMut1<f64>>,
) -> Array2<f64> {
    if let Some(mut dw) = dweight {
        general_mat_mul(1.0, &dy.t(), x, 1.0, &mut dw);
    }
    if let Some(mut db) = dbias {
        db += &dy.sum_axis(Axis(0));
    }
    let mut dx = Array2::<f64>::zeros((x.nrows(), weight.ncols()));
    general_mat_mul(1.0, dy, &weight, 0.0, &mut dx);
    dx
}

/// 2x2 average pooling with floor on odd sizes.
pub fn avg_pool2_forward(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let mut y = Array4::<f64>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let (y0, x0) = (2 * oy, 2 * ox);
                    y[[ni, ci, oy, ox]] = 0.25
                        * (x[[ni, ci, y0, x0]]
                            + x[[ni, ci, y0, x0 + 1]]
                            + x[[ni, ci, y0 + 1, x0]]
                            + x[[ni, ci, y0 + 1, x0 + 1]]);
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward(input_dim: (usize, usize, usize, usize), dy: &Array4<f64>) -> Array4<f64> {
    let mut dx = Array4::<f64>::zeros(input_dim);
    let (n, c, oh, ow) = dy.dim();
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = 0.25 * dy[[ni, ci, oy, ox]];
                    let (y0, x0) = (2 * oy, 2 * ox);
                    dx[[ni, ci, y0, x0]] += g;
                    dx[[ni, ci, y0, x0 + 1]] += g;
                    dx[[ni, ci, y0 + 1, x0]] += g;
                    dx[[ni, ci, y0 + 1, x0 + 1]] += g;
                }
            }
        }
    }
    dx
}

pub fn upsample2_forward(x: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::<f64>::zeros((n, c, 2 * h, 2 * w));
    for ni in 0..n {
        for ci in 0..c {
            for yy in 0..2 * h {
                for xx in 0..2 * w {
                    y[[ni, ci, yy, xx]] = x[[ni, ci, yy / 2, xx / 2]];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward(dy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h2, w2) = dy.dim();
    let mut dx = Array4::<f64>::zeros((n, c, h2 / 2, w2 / 2));
    for ni in 0..n {
        for ci in 0..c {
            for yy in 0..h2 {
                for xx in 0..w2 {
                    dx[[ni, ci, yy / 2, xx / 2]] += dy[[ni, ci, yy, xx]];
                }
            }
        }
    }
    dx
}

fn bins(len: usize, out: usize) -> Vec<(usize, usize)> {
    (0..out)
        .map(|i| {
            let start = i * len / out;
            let end = ((i + 1) * len).div_ceil(out);
            (start, end.max(start + 1).min(len))
        })
        .collect()
}

/// Adaptive average pooling to `out x out` (bin edges as floor/ceil of the
/// proportional split).
pub fn adaptive_avg_pool_forward(x: &Array4<f64>, out: usize) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    let (by, bx) = (bins(h, out), bins(w, out));
    let mut y = Array4::<f64>::zeros((n, c, out, out));
    for ni in 0..n {
        for ci in 0..c {
            for (oy, &(y0, y1)) in by.iter().enumerate() {
                for (ox, &(x0, x1)) in bx.iter().enumerate() {
                    let mut s = 0.0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            s += x[[ni, ci, yy, xx]];
                        }
                    }
                    y[[ni, ci, oy, ox]] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    y
}

pub fn adaptive_avg_pool_backward(input_dim: (usize, usize, usize, usize), dy: &Array4<f64>) -> Array4<f64> {
    let (n, c, h, w) = input_dim;
    let out = dy.dim().2;
    let (by, bx) = (bins(h, out), bins(w, out));
    let mut dx = Array4::<f64>::zeros(input_dim);
    for ni in 0..n {
        for ci in 0..c {
            for (oy, &(y0, y1)) in by.iter().enumerate() {
                for (ox, &(x0, x1)) in bx.iter().enumerate() {
                    let g = dy[[ni, ci, oy, ox]] / ((y1 - y0) * (x1 - x0)) as f64;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            dx[[ni, ci, yy, xx]] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

#[inline]
pub fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

#[inline]
pub fn elu_grad(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        v.exp()
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}
