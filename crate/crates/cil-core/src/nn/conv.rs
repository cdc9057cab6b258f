//! 2D convolution via im2col and GEMM.

use super::param::{join, Param, ParamVisit};
use crate::scalar::Scalar;
use ndarray::{Array2, Array4, ArrayView4};

/// Spatial padding behavior at the borders.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    /// Mirror without repeating the edge sample.
    Reflect,
}

#[derive(Debug, Clone)]
pub struct Conv2d<S> {
    /// `[out_channels, in_channels, k, k]`
    pub weight: Param<S>,
    pub bias: Option<Param<S>>,
    pub stride: usize,
    pub padding: usize,
    pub pad_mode: PadMode,
}

pub struct Conv2dTrace<S> {
    input: Array4<S>,
}

impl<S: Scalar> Conv2d<S> {
    pub fn new(weight: Array4<S>, bias: Option<ndarray::Array1<S>>, stride: usize, padding: usize, pad_mode: PadMode) -> Self {
        Self {
            weight: Param::new(weight.into_dyn(), true),
            bias: bias.map(|b| Param::new(b.into_dyn(), true)),
            stride,
            padding,
            pad_mode,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.kernel();
        (
            (h + 2 * self.padding - k) / self.stride + 1,
            (w + 2 * self.padding - k) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &ArrayView4<'_, S>) -> (Array4<S>, Conv2dTrace<S>) {
        let (n, cin, h, w) = x.dim();
        debug_assert_eq!(cin, self.in_channels());
        let (oh, ow) = self.out_hw(h, w);
        let k = self.kernel();
        let cout = self.out_channels();
        let cols = im2col(x, k, self.stride, self.padding, self.pad_mode, oh, ow);
        let w2d = self
            .weight
            .value
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .expect("conv weight is contiguous");
        let out2d = w2d.dot(&cols); // [cout, n*oh*ow]
        let mut out = Array4::<S>::zeros((n, cout, oh, ow));
        {
            let out_s = out.as_slice_mut().expect("contiguous");
            let src = out2d.as_slice().expect("contiguous");
            let plane = oh * ow;
            for co in 0..cout {
                for ni in 0..n {
                    let dst_off = (ni * cout + co) * plane;
                    let src_off = co * (n * plane) + ni * plane;
                    out_s[dst_off..dst_off + plane]
                        .copy_from_slice(&src[src_off..src_off + plane]);
                }
            }
        }
        if let Some(bias) = &self.bias {
            let b = bias.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
            for ni in 0..n {
                for co in 0..cout {
                    out.index_axis_mut(ndarray::Axis(0), ni)
                        .index_axis_mut(ndarray::Axis(0), co)
                        .mapv_inplace(|v| v + b[co]);
                }
            }
        }
        (
            out,
            Conv2dTrace {
                input: x.to_owned(),
            },
        )
    }

    /// Backpropagates through the convolution. Parameter gradients are
    /// accumulated only when `accumulate` is set; the input gradient is
    /// always returned.
    pub fn backward(
        &mut self,
        trace: &Conv2dTrace<S>,
        dy: &ArrayView4<'_, S>,
        accumulate: bool,
    ) -> Array4<S> {
        let (n, cin, h, w) = trace.input.dim();
        let (_, cout, oh, ow) = dy.dim();
        let k = self.kernel();
        let plane = oh * ow;
        let m = n * plane;

        // [cout, m] layout of dy.
        let mut dy2d = Array2::<S>::zeros((cout, m));
        {
            let dst = dy2d.as_slice_mut().unwrap();
            for co in 0..cout {
                for ni in 0..n {
                    let src = dy.index_axis(ndarray::Axis(0), ni);
                    let src = src.index_axis(ndarray::Axis(0), co);
                    let src = src.to_slice_or_clone();
                    dst[co * m + ni * plane..co * m + (ni + 1) * plane]
                        .copy_from_slice(src.as_ref());
                }
            }
        }

        if accumulate {
            let cols = im2col(
                &trace.input.view(),
                k,
                self.stride,
                self.padding,
                self.pad_mode,
                oh,
                ow,
            );
            let dw = dy2d.dot(&cols.t()); // [cout, cin*k*k]
            let mut wgrad = self
                .weight
                .grad
                .view_mut()
                .into_shape_with_order((cout, cin * k * k))
                .unwrap();
            wgrad += &dw;
            if let Some(bias) = &mut self.bias {
                let mut bgrad = bias.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
                for co in 0..cout {
                    let mut s = S::zero();
                    for &v in dy2d.row(co).iter() {
                        s += v;
                    }
                    bgrad[co] += s;
                }
            }
        }

        let w2d = self
            .weight
            .value
            .view()
            .into_shape_with_order((cout, cin * k * k))
            .unwrap();
        let dcols = w2d.t().dot(&dy2d); // [cin*k*k, m]
        col2im(
            &dcols,
            (n, cin, h, w),
            k,
            self.stride,
            self.padding,
            self.pad_mode,
            oh,
            ow,
        )
    }
}

impl<S: Scalar> ParamVisit<S> for Conv2d<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

/// Maps a (possibly out-of-range) padded coordinate back into the source.
#[inline]
fn src_index(i: isize, len: usize, mode: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < len {
        return Some(i as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Reflect => {
            let li = len as isize;
            let r = if i < 0 { -i } else { 2 * li - 2 - i };
            debug_assert!(r >= 0 && r < li, "reflect pad exceeds input size");
            Some(r as usize)
        }
    }
}

/// Unfolds `x` into a `[cin*k*k, n*oh*ow]` matrix.
fn im2col<S: Scalar>(
    x: &ArrayView4<'_, S>,
    k: usize,
    stride: usize,
    padding: usize,
    mode: PadMode,
    oh: usize,
    ow: usize,
) -> Array2<S> {
    let (n, cin, h, w) = x.dim();
    let m = n * oh * ow;
    let mut cols = Array2::<S>::zeros((cin * k * k, m));
    let xbuf = x.to_slice_or_clone();
    let xs: &[S] = xbuf.as_ref();
    let cols_s = cols.as_slice_mut().unwrap();
    let p = padding as isize;
    for c in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let q = (c * k + kh) * k + kw;
                let row = &mut cols_s[q * m..(q + 1) * m];
                for ni in 0..n {
                    let x_base = (ni * cin + c) * h * w;
                    for ohi in 0..oh {
                        let ih = (ohi * stride) as isize + kh as isize - p;
                        let dst = &mut row[(ni * oh + ohi) * ow..(ni * oh + ohi + 1) * ow];
                        match src_index(ih, h, mode) {
                            None => { /* zero padding rows stay zero */ }
                            Some(ihs) => {
                                let src_row = &xs[x_base + ihs * w..x_base + (ihs + 1) * w];
                                for (owi, d) in dst.iter_mut().enumerate() {
                                    let iw = (owi * stride) as isize + kw as isize - p;
                                    if let Some(iws) = src_index(iw, w, mode) {
                                        *d = src_row[iws];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Folds column gradients back onto the input, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    dcols: &Array2<S>,
    input_dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    padding: usize,
    mode: PadMode,
    oh: usize,
    ow: usize,
) -> Array4<S> {
    let (n, cin, h, w) = input_dim;
    let m = n * oh * ow;
    let mut dx = Array4::<S>::zeros((n, cin, h, w));
    let dxs = dx.as_slice_mut().unwrap();
    let dcols_s = dcols.as_slice().expect("contiguous");
    let p = padding as isize;
    for c in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let q = (c * k + kh) * k + kw;
                let row = &dcols_s[q * m..(q + 1) * m];
                for ni in 0..n {
                    let x_base = (ni * cin + c) * h * w;
                    for ohi in 0..oh {
                        let ih = (ohi * stride) as isize + kh as isize - p;
                        let Some(ihs) = src_index(ih, h, mode) else {
                            continue;
                        };
                        let src = &row[(ni * oh + ohi) * ow..(ni * oh + ohi + 1) * ow];
                        for (owi, &g) in src.iter().enumerate() {
                            let iw = (owi * stride) as isize + kw as isize - p;
                            if let Some(iws) = src_index(iw, w, mode) {
                                dxs[x_base + ihs * w + iws] += g;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

trait ToSliceOrClone<S: Scalar> {
    fn to_slice_or_clone(&self) -> std::borrow::Cow<'_, [S]>;
}

impl<S: Scalar, D: ndarray::Dimension> ToSliceOrClone<S> for ndarray::ArrayView<'_, S, D> {
    fn to_slice_or_clone(&self) -> std::borrow::Cow<'_, [S]> {
        match self.as_slice() {
            Some(s) => std::borrow::Cow::Borrowed(s),
            None => std::borrow::Cow::Owned(self.iter().cloned().collect()),
        }
    }
}
