//! Batch normalization, plain and label-conditioned.

use super::param::{join, Param, ParamVisit};
use crate::scalar::Scalar;
use ndarray::{Array1, Array4, ArrayView4, Axis};

/// Per-channel batch statistics of a layer input: mean and biased variance.
#[derive(Debug, Clone)]
pub struct BnObservation<S> {
    pub mean: Array1<S>,
    pub var: Array1<S>,
}

/// Computes per-channel mean and biased variance over (N, H, W).
pub fn channel_stats<S: Scalar>(x: &ArrayView4<'_, S>) -> BnObservation<S> {
    let (n, c, h, w) = x.dim();
    let m = S::from_us(n * h * w);
    let mut mean = Array1::<S>::zeros(c);
    let mut var = Array1::<S>::zeros(c);
    for ci in 0..c {
        let plane = x.index_axis(Axis(1), ci);
        let mut sum = S::zero();
        let mut sum_sq = S::zero();
        for &v in plane.iter() {
            sum += v;
            sum_sq += v * v;
        }
        let mu = sum / m;
        mean[ci] = mu;
        var[ci] = (sum_sq / m - mu * mu).max(S::zero());
    }
    BnObservation { mean, var }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<S> {
    pub gamma: Param<S>,
    pub beta: Param<S>,
    pub running_mean: Param<S>,
    pub running_var: Param<S>,
    pub momentum: S,
    pub eps: S,
}

pub struct BnTrace<S> {
    /// Raw layer input; kept for statistics-matching gradient injection.
    pub input: Array4<S>,
    xhat: Array4<S>,
    /// Inverse standard deviation used in the forward pass.
    istd: Array1<S>,
    train_mode: bool,
    pub observation: Option<BnObservation<S>>,
}

impl<S: Scalar> BatchNorm2d<S> {
    pub fn new(channels: usize, momentum: S, eps: S) -> Self {
        Self {
            gamma: Param::new(Array1::from_elem(channels, S::one()).into_dyn(), true),
            beta: Param::new(Array1::zeros(channels).into_dyn(), true),
            running_mean: Param::new(Array1::<S>::zeros(channels).into_dyn(), false),
            running_var: Param::new(Array1::from_elem(channels, S::one()).into_dyn(), false),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.value.len()
    }

    fn normalize(
        &self,
        x: &ArrayView4<'_, S>,
        mean: &Array1<S>,
        var: &Array1<S>,
    ) -> (Array4<S>, Array4<S>, Array1<S>) {
        let (_, c, _, _) = x.dim();
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let beta = self.beta.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut istd = Array1::<S>::zeros(c);
        for ci in 0..c {
            istd[ci] = S::one() / (var[ci] + self.eps).sqrt();
        }
        let mut xhat = x.to_owned();
        let mut y = Array4::<S>::zeros(x.raw_dim());
        for ci in 0..c {
            let mu = mean[ci];
            let is = istd[ci];
            let g = gamma[ci];
            let b = beta[ci];
            let mut xc = xhat.index_axis_mut(Axis(1), ci);
            let mut yc = y.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut xc).and(&mut yc).for_each(|xh, yv| {
                *xh = (*xh - mu) * is;
                *yv = g * *xh + b;
            });
        }
        (y, xhat, istd)
    }

    /// Train-mode forward: normalizes with batch statistics and, unless the
    /// layer is frozen, folds them into the running estimates.
    pub fn forward_train(
        &mut self,
        x: &ArrayView4<'_, S>,
        update_running: bool,
    ) -> (Array4<S>, BnTrace<S>) {
        let (n, _, h, w) = x.dim();
        let stats = channel_stats(x);
        if update_running {
            let m = S::from_us(n * h * w);
            let unbias = if n * h * w > 1 {
                m / (m - S::one())
            } else {
                S::one()
            };
            let mut rm = self
                .running_mean
                .value
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            let mut rv = self
                .running_var
                .value
                .view_mut()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap();
            let mom = self.momentum;
            for ci in 0..stats.mean.len() {
                rm[ci] = (S::one() - mom) * rm[ci] + mom * stats.mean[ci];
                rv[ci] = (S::one() - mom) * rv[ci] + mom * stats.var[ci] * unbias;
            }
        }
        let (y, xhat, istd) = self.normalize(x, &stats.mean, &stats.var);
        (
            y,
            BnTrace {
                input: x.to_owned(),
                xhat,
                istd,
                train_mode: true,
                observation: Some(stats),
            },
        )
    }

    /// Eval-mode forward with the stored running statistics. Batch
    /// statistics of the input are still recorded when `observe` is set.
    pub fn forward_eval(&self, x: &ArrayView4<'_, S>, observe: bool) -> (Array4<S>, BnTrace<S>) {
        let rm = self
            .running_mean
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let rv = self
            .running_var
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .unwrap()
            .to_owned();
        let (y, xhat, istd) = self.normalize(x, &rm, &rv);
        let observation = observe.then(|| channel_stats(x));
        (
            y,
            BnTrace {
                input: x.to_owned(),
                xhat,
                istd,
                train_mode: false,
                observation,
            },
        )
    }

    pub fn backward(
        &mut self,
        trace: &BnTrace<S>,
        dy: &ArrayView4<'_, S>,
        accumulate: bool,
    ) -> Array4<S> {
        let (n, c, h, w) = trace.xhat.dim();
        let m = S::from_us(n * h * w);
        let gamma = self.gamma.value.view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let mut dx = Array4::<S>::zeros((n, c, h, w));
        let mut dgamma = Array1::<S>::zeros(c);
        let mut dbeta = Array1::<S>::zeros(c);
        for ci in 0..c {
            let xh = trace.xhat.index_axis(Axis(1), ci);
            let dyc = dy.index_axis(Axis(1), ci);
            let mut sum_dy = S::zero();
            let mut sum_dy_xhat = S::zero();
            ndarray::Zip::from(&xh).and(&dyc).for_each(|&xhv, &dyv| {
                sum_dy += dyv;
                sum_dy_xhat += dyv * xhv;
            });
            dgamma[ci] = sum_dy_xhat;
            dbeta[ci] = sum_dy;
            let g = gamma[ci];
            let is = trace.istd[ci];
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            if trace.train_mode {
                // Fused train-mode formula over the batch statistics path.
                ndarray::Zip::from(&mut dxc)
                    .and(&xh)
                    .and(&dyc)
                    .for_each(|dxv, &xhv, &dyv| {
                        *dxv = g * is * (dyv - sum_dy / m - xhv * sum_dy_xhat / m);
                    });
            } else {
                ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|dxv, &dyv| {
                    *dxv = g * is * dyv;
                });
            }
        }
        if accumulate {
            let mut gg = self.gamma.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut bg = self.beta.grad.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            gg += &dgamma;
            bg += &dbeta;
        }
        dx
    }
}

impl<S: Scalar> ParamVisit<S> for BatchNorm2d<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        f(join(prefix, "gamma"), &mut self.gamma);
        f(join(prefix, "beta"), &mut self.beta);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>)) {
        f(join(prefix, "gamma"), &self.gamma);
        f(join(prefix, "beta"), &self.beta);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }
}

/// Batch normalization whose scale and shift are looked up per sample from
/// label-indexed tables. The underlying normalization carries running
/// statistics but no scale/shift of its own.
#[derive(Debug, Clone)]
pub struct ConditionalBn<S> {
    /// `[class_count, channels]`, initialized to one.
    pub gamma_table: Param<S>,
    /// `[class_count, channels]`, initialized to zero.
    pub beta_table: Param<S>,
    pub running_mean: Param<S>,
    pub running_var: Param<S>,
    pub momentum: S,
    pub eps: S,
}

pub struct CbnTrace<S> {
    xhat: Array4<S>,
    istd: Array1<S>,
    labels: Vec<usize>,
}

impl<S: Scalar> ConditionalBn<S> {
    pub fn new(class_count: usize, channels: usize, momentum: S, eps: S) -> Self {
        Self {
            gamma_table: Param::new(
                ndarray::Array2::from_elem((class_count, channels), S::one()).into_dyn(),
                true,
            ),
            beta_table: Param::new(
                ndarray::Array2::<S>::zeros((class_count, channels)).into_dyn(),
                true,
            ),
            running_mean: Param::new(Array1::<S>::zeros(channels).into_dyn(), false),
            running_var: Param::new(Array1::from_elem(channels, S::one()).into_dyn(), false),
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma_table.value.shape()[1]
    }

    pub fn class_count(&self) -> usize {
        self.gamma_table.value.shape()[0]
    }

    /// Normalizes with batch statistics and applies the per-label affine.
    pub fn forward_train(&mut self, x: &ArrayView4<'_, S>, labels: &[usize]) -> (Array4<S>, CbnTrace<S>) {
        let (n, c, h, w) = x.dim();
        debug_assert_eq!(n, labels.len());
        let stats = channel_stats(x);
        {
            let m = S::from_us(n * h * w);
            let unbias = if n * h * w > 1 { m / (m - S::one()) } else { S::one() };
            let mut rm = self.running_mean.value.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mut rv = self.running_var.value.view_mut().into_dimensionality::<ndarray::Ix1>().unwrap();
            let mom = self.momentum;
            for ci in 0..c {
                rm[ci] = (S::one() - mom) * rm[ci] + mom * stats.mean[ci];
                rv[ci] = (S::one() - mom) * rv[ci] + mom * stats.var[ci] * unbias;
            }
        }
        let gamma = self.gamma_table.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let beta = self.beta_table.value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut istd = Array1::<S>::zeros(c);
        for ci in 0..c {
            istd[ci] = S::one() / (stats.var[ci] + self.eps).sqrt();
        }
        let mut xhat = x.to_owned();
        let mut y = Array4::<S>::zeros((n, c, h, w));
        for ni in 0..n {
            let label = labels[ni];
            for ci in 0..c {
                let mu = stats.mean[ci];
                let is = istd[ci];
                let g = gamma[[label, ci]];
                let b = beta[[label, ci]];
                let mut xc = xhat.index_axis_mut(Axis(0), ni);
                let mut xc = xc.index_axis_mut(Axis(0), ci);
                let mut yc = y.index_axis_mut(Axis(0), ni);
                let mut yc = yc.index_axis_mut(Axis(0), ci);
                ndarray::Zip::from(&mut xc).and(&mut yc).for_each(|xh, yv| {
                    *xh = (*xh - mu) * is;
                    *yv = g * *xh + b;
                });
            }
        }
        (
            y,
            CbnTrace {
                xhat,
                istd,
                labels: labels.to_vec(),
            },
        )
    }

    pub fn backward(
        &mut self,
        trace: &CbnTrace<S>,
        dy: &ArrayView4<'_, S>,
        accumulate: bool,
    ) -> Array4<S> {
        let (n, c, h, w) = trace.xhat.dim();
        let m = S::from_us(n * h * w);
        let gamma = self.gamma_table.value.view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
        // dxhat depends on the per-sample gamma row.
        let mut dxhat = Array4::<S>::zeros((n, c, h, w));
        for ni in 0..n {
            let label = trace.labels[ni];
            for ci in 0..c {
                let g = gamma[[label, ci]];
                let dyc = dy.index_axis(Axis(0), ni);
                let dyc = dyc.index_axis(Axis(0), ci);
                let mut dxc = dxhat.index_axis_mut(Axis(0), ni);
                let mut dxc = dxc.index_axis_mut(Axis(0), ci);
                ndarray::Zip::from(&mut dxc).and(&dyc).for_each(|d, &dyv| {
                    *d = g * dyv;
                });
            }
        }
        if accumulate {
            let mut gg = self.gamma_table.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            let mut bg = self.beta_table.grad.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
            for ni in 0..n {
                let label = trace.labels[ni];
                for ci in 0..c {
                    let xh = trace.xhat.index_axis(Axis(0), ni);
                    let xh = xh.index_axis(Axis(0), ci);
                    let dyc = dy.index_axis(Axis(0), ni);
                    let dyc = dyc.index_axis(Axis(0), ci);
                    let mut sg = S::zero();
                    let mut sb = S::zero();
                    ndarray::Zip::from(&xh).and(&dyc).for_each(|&xhv, &dyv| {
                        sg += dyv * xhv;
                        sb += dyv;
                    });
                    gg[[label, ci]] += sg;
                    bg[[label, ci]] += sb;
                }
            }
        }
        // Batch-statistics path: identical to plain BN with dxhat in hand.
        let mut dx = Array4::<S>::zeros((n, c, h, w));
        for ci in 0..c {
            let xh = trace.xhat.index_axis(Axis(1), ci);
            let dxh = dxhat.index_axis(Axis(1), ci);
            let mut sum_dxh = S::zero();
            let mut sum_dxh_xhat = S::zero();
            ndarray::Zip::from(&xh).and(&dxh).for_each(|&xhv, &dv| {
                sum_dxh += dv;
                sum_dxh_xhat += dv * xhv;
            });
            let is = trace.istd[ci];
            let mut dxc = dx.index_axis_mut(Axis(1), ci);
            ndarray::Zip::from(&mut dxc)
                .and(&xh)
                .and(&dxh)
                .for_each(|dxv, &xhv, &dv| {
                    *dxv = is * (dv - sum_dxh / m - xhv * sum_dxh_xhat / m);
                });
        }
        dx
    }
}

impl<S: Scalar> ParamVisit<S> for ConditionalBn<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        f(join(prefix, "gamma_table"), &mut self.gamma_table);
        f(join(prefix, "beta_table"), &mut self.beta_table);
        f(join(prefix, "running_mean"), &mut self.running_mean);
        f(join(prefix, "running_var"), &mut self.running_var);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>)) {
        f(join(prefix, "gamma_table"), &self.gamma_table);
        f(join(prefix, "beta_table"), &self.beta_table);
        f(join(prefix, "running_mean"), &self.running_mean);
        f(join(prefix, "running_var"), &self.running_var);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array4;
    use rand::Rng;

    fn rng() -> rand_chacha::ChaCha12Rng {
        crate::util::seeded_rng(7, &[0xb1])
    }

    #[test]
    fn fresh_bn_has_identity_running_stats() {
        let bn = BatchNorm2d::<f64>::new(4, 0.1, 1e-5);
        assert!(bn.running_mean.value.iter().all(|&v| v == 0.0));
        assert!(bn.running_var.value.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn train_forward_whitens_batch() {
        let mut r = rng();
        let x = Array4::from_shape_fn((4, 3, 5, 5), |_| r.random_range(-2.0..2.0) + 1.5);
        let mut bn = BatchNorm2d::<f64>::new(3, 0.1, 1e-5);
        let (y, _) = bn.forward_train(&x.view(), true);
        let stats = channel_stats(&y.view());
        for ci in 0..3 {
            assert_abs_diff_eq!(stats.mean[ci], 0.0, epsilon = 1e-10);
            assert_abs_diff_eq!(stats.var[ci], 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let mut r = rng();
        let x = Array4::from_shape_fn((3, 2, 4, 4), |_| r.random_range(-1.0..1.0));
        let coeff = Array4::from_shape_fn((3, 2, 4, 4), |_| r.random_range(-1.0..1.0));
        let mut bn = BatchNorm2d::<f64>::new(2, 0.1, 1e-5);
        bn.gamma.value.mapv_inplace(|_| r.random_range(0.5..1.5));
        bn.beta.value.mapv_inplace(|_| r.random_range(-0.5..0.5));

        let (_, trace) = bn.forward_train(&x.view(), false);
        let dx = bn.backward(&trace, &coeff.view(), true);

        let f = |bn: &mut BatchNorm2d<f64>, x: &Array4<f64>| {
            let (y, _) = bn.forward_train(&x.view(), false);
            (&y * &coeff).sum()
        };
        let eps = 1e-6;
        let mut xp = x.clone();
        for idx in [[0, 0, 0, 0], [2, 1, 3, 3], [1, 0, 2, 1]] {
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let up = f(&mut bn, &xp);
            xp[idx] = orig - eps;
            let down = f(&mut bn, &xp);
            xp[idx] = orig;
            assert_abs_diff_eq!(dx[idx], (up - down) / (2.0 * eps), epsilon = 1e-6);
        }
        for ci in 0..2 {
            let orig = bn.gamma.value[[ci]];
            bn.gamma.value[[ci]] = orig + eps;
            let up = f(&mut bn, &x);
            bn.gamma.value[[ci]] = orig - eps;
            let down = f(&mut bn, &x);
            bn.gamma.value[[ci]] = orig;
            assert_abs_diff_eq!(
                bn.gamma.grad[[ci]],
                (up - down) / (2.0 * eps),
                epsilon = 1e-6
            );
        }
    }

    #[test]
    fn eval_backward_is_channel_scale() {
        let mut r = rng();
        let x = Array4::from_shape_fn((2, 2, 3, 3), |_| r.random_range(-1.0..1.0));
        let mut bn = BatchNorm2d::<f64>::new(2, 0.1, 1e-5);
        bn.running_mean.value[[0]] = 0.3;
        bn.running_var.value[[1]] = 2.0;
        let (_, trace) = bn.forward_eval(&x.view(), false);
        let dy = Array4::from_elem((2, 2, 3, 3), 1.0);
        let dx = bn.backward(&trace, &dy.view(), false);
        for ci in 0..2 {
            let rv: f64 = bn.running_var.value[[ci]];
            let expect = 1.0 / (rv + 1e-5).sqrt();
            assert_abs_diff_eq!(dx[[0, ci, 0, 0]], expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn conditional_bn_single_class_equals_plain_bn() {
        let mut r = rng();
        let x = Array4::from_shape_fn((4, 3, 4, 4), |_| r.random_range(-1.5..1.5));
        let mut plain = BatchNorm2d::<f64>::new(3, 0.1, 1e-5);
        let mut cond = ConditionalBn::<f64>::new(1, 3, 0.1, 1e-5);
        for ci in 0..3 {
            let g = r.random_range(0.5..1.5);
            let b = r.random_range(-0.5..0.5);
            plain.gamma.value[[ci]] = g;
            plain.beta.value[[ci]] = b;
            cond.gamma_table.value[[0, ci]] = g;
            cond.beta_table.value[[0, ci]] = b;
        }
        let (y_plain, _) = plain.forward_train(&x.view(), false);
        let labels = vec![0usize; 4];
        let (y_cond, _) = cond.forward_train(&x.view(), &labels);
        for (a, b) in y_plain.iter().zip(y_cond.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn conditional_bn_backward_matches_finite_differences() {
        let mut r = rng();
        let x = Array4::from_shape_fn((4, 2, 3, 3), |_| r.random_range(-1.0..1.0));
        let labels = vec![0usize, 1, 1, 0];
        let coeff = Array4::from_shape_fn((4, 2, 3, 3), |_| r.random_range(-1.0..1.0));
        let mut cbn = ConditionalBn::<f64>::new(2, 2, 0.1, 1e-5);
        cbn.gamma_table.value.mapv_inplace(|_| r.random_range(0.5..1.5));
        cbn.beta_table.value.mapv_inplace(|_| r.random_range(-0.5..0.5));

        let (_, trace) = cbn.forward_train(&x.view(), &labels);
        let dx = cbn.backward(&trace, &coeff.view(), true);

        let f = |cbn: &mut ConditionalBn<f64>, x: &Array4<f64>| {
            let (y, _) = cbn.forward_train(&x.view(), &labels);
            (&y * &coeff).sum()
        };
        let eps = 1e-6;
        let mut xp = x.clone();
        for idx in [[0, 0, 0, 0], [3, 1, 2, 2], [1, 1, 1, 0]] {
            let orig = xp[idx];
            xp[idx] = orig + eps;
            let up = f(&mut cbn, &xp);
            xp[idx] = orig - eps;
            let down = f(&mut cbn, &xp);
            xp[idx] = orig;
            assert_abs_diff_eq!(dx[idx], (up - down) / (2.0 * eps), epsilon = 1e-6);
        }
        for idx in [[0usize, 0usize], [1, 1]] {
            let orig = cbn.gamma_table.value[idx.as_slice()];
            cbn.gamma_table.value[idx.as_slice()] = orig + eps;
            let up = f(&mut cbn, &x);
            cbn.gamma_table.value[idx.as_slice()] = orig - eps;
            let down = f(&mut cbn, &x);
            cbn.gamma_table.value[idx.as_slice()] = orig;
            assert_abs_diff_eq!(
                cbn.gamma_table.grad[idx.as_slice()],
                (up - down) / (2.0 * eps),
                epsilon = 1e-6
            );
        }
    }
}
