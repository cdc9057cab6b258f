//! Parameter-free layer operations.

use crate::scalar::Scalar;
use ndarray::{Array2, Array4, ArrayView2, ArrayView4, Axis};

/// Elementwise max(0, x). Returns output and the positive-mask trace.
pub fn relu<S: Scalar>(x: &ArrayView4<'_, S>) -> (Array4<S>, Array4<bool>) {
    let mut y = x.to_owned();
    let mut mask = Array4::<bool>::from_elem(x.raw_dim(), false);
    ndarray::Zip::from(&mut y).and(&mut mask).for_each(|v, m| {
        if *v > S::zero() {
            *m = true;
        } else {
            *v = S::zero();
        }
    });
    (y, mask)
}

pub fn relu_backward<S: Scalar>(mask: &Array4<bool>, dy: &ArrayView4<'_, S>) -> Array4<S> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(mask).for_each(|d, &m| {
        if !m {
            *d = S::zero();
        }
    });
    dx
}

/// Mean over the spatial dimensions: `[N, C, H, W] -> [N, C]`.
pub fn global_avg_pool<S: Scalar>(x: &ArrayView4<'_, S>) -> Array2<S> {
    let (n, c, h, w) = x.dim();
    let m = S::from_us(h * w);
    let mut out = Array2::<S>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            let mut s = S::zero();
            for &v in x.index_axis(Axis(0), ni).index_axis(Axis(0), ci).iter() {
                s += v;
            }
            out[[ni, ci]] = s / m;
        }
    }
    out
}

pub fn global_avg_pool_backward<S: Scalar>(
    d_out: &ArrayView2<'_, S>,
    spatial: (usize, usize),
) -> Array4<S> {
    let (n, c) = d_out.dim();
    let (h, w) = spatial;
    let m = S::from_us(h * w);
    let mut dx = Array4::<S>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = d_out[[ni, ci]] / m;
            dx.index_axis_mut(Axis(0), ni)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    dx
}

/// 2x2 average pooling with stride 2.
pub fn avg_pool2<S: Scalar>(x: &ArrayView4<'_, S>) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let quarter = S::from_f(0.25);
    let mut y = Array4::<S>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            let mut out = y.index_axis_mut(Axis(0), ni);
            let mut out = out.index_axis_mut(Axis(0), ci);
            for i in 0..oh {
                for j in 0..ow {
                    out[[i, j]] = (plane[[2 * i, 2 * j]]
                        + plane[[2 * i, 2 * j + 1]]
                        + plane[[2 * i + 1, 2 * j]]
                        + plane[[2 * i + 1, 2 * j + 1]])
                        * quarter;
                }
            }
        }
    }
    y
}

pub fn avg_pool2_backward<S: Scalar>(dy: &ArrayView4<'_, S>) -> Array4<S> {
    let (n, c, oh, ow) = dy.dim();
    let quarter = S::from_f(0.25);
    let mut dx = Array4::<S>::zeros((n, c, oh * 2, ow * 2));
    for ni in 0..n {
        for ci in 0..c {
            let g = dy.index_axis(Axis(0), ni);
            let g = g.index_axis(Axis(0), ci);
            let mut out = dx.index_axis_mut(Axis(0), ni);
            let mut out = out.index_axis_mut(Axis(0), ci);
            for i in 0..oh {
                for j in 0..ow {
                    let v = g[[i, j]] * quarter;
                    out[[2 * i, 2 * j]] = v;
                    out[[2 * i, 2 * j + 1]] = v;
                    out[[2 * i + 1, 2 * j]] = v;
                    out[[2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
    }
    dx
}

/// Interpolation taps of one output axis for 2x bilinear upsampling.
///
/// Output position `i` samples the input at `(i + 0.5) / 2 - 0.5`, clamped
/// at the borders.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            let u = (i as f64 + 0.5) / 2.0 - 0.5;
            let u0 = u.floor();
            let frac = u - u0;
            let lo = (u0.max(0.0) as usize).min(in_len - 1);
            let hi = ((u0 + 1.0).max(0.0) as usize).min(in_len - 1);
            (lo, hi, frac)
        })
        .collect()
}

/// Doubles both spatial dimensions by bilinear interpolation.
pub fn upsample_bilinear2<S: Scalar>(x: &ArrayView4<'_, S>) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let (oh, ow) = (2 * h, 2 * w);
    let rows = bilinear_taps(oh, h);
    let cols = bilinear_taps(ow, w);
    let mut y = Array4::<S>::zeros((n, c, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            let plane = x.index_axis(Axis(0), ni);
            let plane = plane.index_axis(Axis(0), ci);
            let mut out = y.index_axis_mut(Axis(0), ni);
            let mut out = out.index_axis_mut(Axis(0), ci);
            for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
                for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                    let fr_s = S::from_f(fr);
                    let fc_s = S::from_f(fc);
                    let one = S::one();
                    let top = plane[[r0, c0]] * (one - fc_s) + plane[[r0, c1]] * fc_s;
                    let bot = plane[[r1, c0]] * (one - fc_s) + plane[[r1, c1]] * fc_s;
                    out[[i, j]] = top * (one - fr_s) + bot * fr_s;
                }
            }
        }
    }
    y
}

pub fn upsample_bilinear2_backward<S: Scalar>(dy: &ArrayView4<'_, S>) -> Array4<S> {
    let (n, c, oh, ow) = dy.dim();
    let (h, w) = (oh / 2, ow / 2);
    let rows = bilinear_taps(oh, h);
    let cols = bilinear_taps(ow, w);
    let mut dx = Array4::<S>::zeros((n, c, h, w));
    for ni in 0..n {
        for ci in 0..c {
            let g = dy.index_axis(Axis(0), ni);
            let g = g.index_axis(Axis(0), ci);
            let mut out = dx.index_axis_mut(Axis(0), ni);
            let mut out = out.index_axis_mut(Axis(0), ci);
            for (i, &(r0, r1, fr)) in rows.iter().enumerate() {
                for (j, &(c0, c1, fc)) in cols.iter().enumerate() {
                    let fr_s = S::from_f(fr);
                    let fc_s = S::from_f(fc);
                    let one = S::one();
                    let gv = g[[i, j]];
                    out[[r0, c0]] += gv * (one - fr_s) * (one - fc_s);
                    out[[r0, c1]] += gv * (one - fr_s) * fc_s;
                    out[[r1, c0]] += gv * fr_s * (one - fc_s);
                    out[[r1, c1]] += gv * fr_s * fc_s;
                }
            }
        }
    }
    dx
}

/// Elementwise tanh; the output doubles as the backward trace.
pub fn tanh<S: Scalar>(x: &ArrayView4<'_, S>) -> Array4<S> {
    x.mapv(|v| v.tanh())
}

pub fn tanh_backward<S: Scalar>(y: &ArrayView4<'_, S>, dy: &ArrayView4<'_, S>) -> Array4<S> {
    let mut dx = dy.to_owned();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
        *d = *d * (S::one() - yv * yv);
    });
    dx
}

/// Concatenates two maps along the channel axis.
pub fn concat_channels<S: Scalar>(a: &ArrayView4<'_, S>, b: &ArrayView4<'_, S>) -> Array4<S> {
    ndarray::concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial shapes")
}

/// Splits a channel-concatenated gradient back into the two parts.
pub fn split_channels<S: Scalar>(
    dy: &ArrayView4<'_, S>,
    first_channels: usize,
) -> (Array4<S>, Array4<S>) {
    let a = dy.slice(ndarray::s![.., ..first_channels, .., ..]).to_owned();
    let b = dy.slice(ndarray::s![.., first_channels.., .., ..]).to_owned();
    (a, b)
}
