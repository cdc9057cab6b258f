//! Dual-teacher feature distillation: tap selection, per-teacher variational
//! adapter networks and the shared per-channel log-variance table.

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::losses::dtid_penalty_batch_with_grad;
use crate::nn::conv::Conv2dTrace;
use crate::nn::norm::BnTrace;
use crate::nn::ops::{relu, relu_backward};
use crate::nn::param::{join, Param, ParamVisit};
use crate::nn::{init, BatchNorm2d, Conv2d, PadMode};
use crate::scalar::Scalar;
use ndarray::{Array1, Array4, ArrayView4};
use rand::Rng;

/// Ordered tap layer ids: the ends of every residual-stage group except the
/// first, identical in teachers and student.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TapSelection {
    pub stage_ids: Vec<usize>,
}

impl TapSelection {
    pub fn k(&self) -> usize {
        self.stage_ids.len()
    }
}

/// Taps for a backbone with `num_stage_groups` residual-stage groups.
pub fn select_taps(num_stage_groups: usize) -> Result<TapSelection> {
    if num_stage_groups < 2 {
        return Err(Error::InvalidConfig(format!(
            "tap selection needs at least 2 stage groups, got {num_stage_groups}"
        )));
    }
    Ok(TapSelection {
        stage_ids: (1..num_stage_groups).collect(),
    })
}

/// Stage-end feature maps of a frozen model, detached from any gradient
/// flow; one map batch per tap in depth order.
pub fn collect_maps<S: Scalar>(
    model: &Backbone<S>,
    taps: &TapSelection,
    input_batch: &ArrayView4<'_, S>,
) -> Result<Vec<Array4<S>>> {
    if taps.stage_ids != select_taps(model.config.num_stages())?.stage_ids {
        return Err(Error::InvalidConfig(
            "tap selection does not match the model's stage layout".into(),
        ));
    }
    let (out, _) = model.forward_frozen(
        input_batch,
        crate::backbone::ForwardOpts {
            observe_bn: false,
            taps: true,
        },
    )?;
    Ok(out.taps)
}

/// Three 1x1 convolutions that map student maps into one teacher's feature
/// domain: channel width doubles in the first two stages (each followed by
/// normalization and rectification) and returns to the teacher width in the
/// final linear stage.
#[derive(Debug, Clone)]
pub struct VariationalAdapter<S> {
    conv1: Conv2d<S>,
    bn1: BatchNorm2d<S>,
    conv2: Conv2d<S>,
    bn2: BatchNorm2d<S>,
    conv3: Conv2d<S>,
}

pub struct AdapterTrace<S> {
    conv1: Conv2dTrace<S>,
    bn1: BnTrace<S>,
    mask1: Array4<bool>,
    conv2: Conv2dTrace<S>,
    bn2: BnTrace<S>,
    mask2: Array4<bool>,
    conv3: Conv2dTrace<S>,
}

impl<S: Scalar> VariationalAdapter<S> {
    pub fn new<R: Rng>(in_channels: usize, out_channels: usize, rng: &mut R) -> Self {
        let hidden = 2 * in_channels;
        let bn_mom = S::from_f(0.1);
        let bn_eps = S::from_f(1e-5);
        Self {
            conv1: init::he_conv(in_channels, hidden, 1, 1, 0, PadMode::Zero, false, rng),
            bn1: BatchNorm2d::new(hidden, bn_mom, bn_eps),
            conv2: init::he_conv(hidden, hidden, 1, 1, 0, PadMode::Zero, false, rng),
            bn2: BatchNorm2d::new(hidden, bn_mom, bn_eps),
            conv3: init::he_conv(hidden, out_channels, 1, 1, 0, PadMode::Zero, true, rng),
        }
    }

    pub fn hidden_channels(&self) -> usize {
        self.conv1.out_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv3.out_channels()
    }

    /// Adapters run in training mode (batch statistics) while they are
    /// optimized jointly with the student.
    pub fn forward_train(&mut self, x: &ArrayView4<'_, S>) -> (Array4<S>, AdapterTrace<S>) {
        let (h, conv1_t) = self.conv1.forward(x);
        let (h, bn1_t) = self.bn1.forward_train(&h.view(), true);
        let (h, mask1) = relu(&h.view());
        let (h, conv2_t) = self.conv2.forward(&h.view());
        let (h, bn2_t) = self.bn2.forward_train(&h.view(), true);
        let (h, mask2) = relu(&h.view());
        let (y, conv3_t) = self.conv3.forward(&h.view());
        (
            y,
            AdapterTrace {
                conv1: conv1_t,
                bn1: bn1_t,
                mask1,
                conv2: conv2_t,
                bn2: bn2_t,
                mask2,
                conv3: conv3_t,
            },
        )
    }

    pub fn backward(
        &mut self,
        trace: &AdapterTrace<S>,
        dy: &ArrayView4<'_, S>,
        accumulate: bool,
    ) -> Array4<S> {
        let d = self.conv3.backward(&trace.conv3, dy, accumulate);
        let d = relu_backward(&trace.mask2, &d.view());
        let d = self.bn2.backward(&trace.bn2, &d.view(), accumulate);
        let d = self.conv2.backward(&trace.conv2, &d.view(), accumulate);
        let d = relu_backward(&trace.mask1, &d.view());
        let d = self.bn1.backward(&trace.bn1, &d.view(), accumulate);
        self.conv1.backward(&trace.conv1, &d.view(), accumulate)
    }
}

impl<S: Scalar> ParamVisit<S> for VariationalAdapter<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        self.conv3.visit_params(&join(prefix, "conv3"), f);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>)) {
        self.conv1.visit_params_ref(&join(prefix, "conv1"), f);
        self.bn1.visit_params_ref(&join(prefix, "bn1"), f);
        self.conv2.visit_params_ref(&join(prefix, "conv2"), f);
        self.bn2.visit_params_ref(&join(prefix, "bn2"), f);
        self.conv3.visit_params_ref(&join(prefix, "conv3"), f);
    }
}

/// Per-phase distillation scaffolding: two adapters per tap (one per
/// teacher) and one shared log-variance table per tap, initialized to zero.
/// Discarded when the phase ends.
pub struct DtidState<S> {
    pub taps: TapSelection,
    /// `adapters[k] = (toward teacher 0, toward teacher 1)`.
    pub adapters: Vec<(VariationalAdapter<S>, VariationalAdapter<S>)>,
    /// `omega[k]` has one entry per teacher channel at tap `k`; the variance
    /// `sigma^2 = exp(omega)` is shared between both teachers.
    pub omega: Vec<Param<S>>,
}

/// Fresh adapters and zero-initialized log variances for every tap.
pub fn init_dtid_state<S: Scalar, R: Rng>(
    taps: &TapSelection,
    teacher_channel_counts: &[usize],
    rng: &mut R,
) -> Result<DtidState<S>> {
    if taps.k() != teacher_channel_counts.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} taps but {} channel counts",
            taps.k(),
            teacher_channel_counts.len()
        )));
    }
    let mut adapters = Vec::new();
    let mut omega = Vec::new();
    for &c in teacher_channel_counts {
        adapters.push((
            VariationalAdapter::new(c, c, rng),
            VariationalAdapter::new(c, c, rng),
        ));
        omega.push(Param::new(Array1::<S>::zeros(c).into_dyn(), true));
    }
    Ok(DtidState {
        taps: taps.clone(),
        adapters,
        omega,
    })
}

impl<S: Scalar> DtidState<S> {
    /// Current per-tap variances `exp(omega)`.
    pub fn variances(&self) -> Vec<Array1<S>> {
        self.omega
            .iter()
            .map(|p| {
                p.value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
                    .mapv(|w| w.exp())
            })
            .collect()
    }

    /// Distillation loss over all taps and both teachers, batch-averaged.
    ///
    /// Accumulates adapter and log-variance gradients and returns the
    /// gradient w.r.t. each student tap map. Teacher maps are constants.
    pub fn loss_and_grads(
        &mut self,
        teacher0_maps: &[Array4<S>],
        teacher1_maps: &[Array4<S>],
        student_maps: &[Array4<S>],
        accumulate: bool,
    ) -> Result<(S, Vec<Array4<S>>)> {
        let k = self.taps.k();
        if teacher0_maps.len() != k || teacher1_maps.len() != k || student_maps.len() != k {
            return Err(Error::MissingComponent(format!(
                "expected {k} maps per role, got {}/{}/{}",
                teacher0_maps.len(),
                teacher1_maps.len(),
                student_maps.len()
            )));
        }
        let mut total = S::zero();
        let mut d_student = Vec::with_capacity(k);
        for ki in 0..k {
            let batch = student_maps[ki].dim().0;
            let inv_n = S::one() / S::from_us(batch);
            let omega_view = self.omega[ki]
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned();
            let mut d_tap = Array4::<S>::zeros(student_maps[ki].raw_dim());
            for teacher_idx in 0..2 {
                let teacher_maps = if teacher_idx == 0 {
                    &teacher0_maps[ki]
                } else {
                    &teacher1_maps[ki]
                };
                let adapter = if teacher_idx == 0 {
                    &mut self.adapters[ki].0
                } else {
                    &mut self.adapters[ki].1
                };
                let (mu_out, trace) = adapter.forward_train(&student_maps[ki].view());
                let (loss_sum, d_mu, d_omega) = dtid_penalty_batch_with_grad(
                    &teacher_maps.view(),
                    &mu_out.view(),
                    &omega_view.view(),
                )?;
                total += loss_sum * inv_n;
                if accumulate {
                    let mut og = self.omega[ki]
                        .grad
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix1>()
                        .unwrap();
                    ndarray::Zip::from(&mut og).and(&d_omega).for_each(|o, &d| {
                        *o += d * inv_n;
                    });
                }
                let d_mu_scaled = d_mu.mapv(|v| v * inv_n);
                d_tap += &adapter.backward(&trace, &d_mu_scaled.view(), accumulate);
            }
            d_student.push(d_tap);
        }
        Ok((total, d_student))
    }
}

impl<S: Scalar> ParamVisit<S> for DtidState<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        for (k, (a0, a1)) in self.adapters.iter_mut().enumerate() {
            a0.visit_params(&join(prefix, &format!("tap{k}.adapter0")), f);
            a1.visit_params(&join(prefix, &format!("tap{k}.adapter1")), f);
        }
        for (k, w) in self.omega.iter_mut().enumerate() {
            f(join(prefix, &format!("tap{k}.omega")), w);
        }
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>)) {
        for (k, (a0, a1)) in self.adapters.iter().enumerate() {
            a0.visit_params_ref(&join(prefix, &format!("tap{k}.adapter0")), f);
            a1.visit_params_ref(&join(prefix, &format!("tap{k}.adapter1")), f);
        }
        for (k, w) in self.omega.iter().enumerate() {
            f(join(prefix, &format!("tap{k}.omega")), w);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn rng() -> rand_chacha::ChaCha12Rng {
        crate::util::seeded_rng(31, &[0xd7])
    }

    #[test]
    fn tap_selection_rules() {
        assert_eq!(select_taps(3).unwrap().stage_ids, vec![1, 2]);
        assert_eq!(select_taps(4).unwrap().k(), 3);
        assert!(select_taps(1).is_err());
    }

    #[test]
    fn init_state_counts_and_zero_omega() {
        let mut r = rng();
        let taps = select_taps(3).unwrap();
        let state: DtidState<f64> = init_dtid_state(&taps, &[32, 64], &mut r).unwrap();
        assert_eq!(state.adapters.len(), 2);
        assert_eq!(state.omega[0].value.len(), 32);
        assert_eq!(state.omega[1].value.len(), 64);
        assert!(state.omega.iter().all(|p| p.value.iter().all(|&v| v == 0.0)));
        // sigma^2 = exp(0) = 1 exactly.
        for v in state.variances() {
            assert!(v.iter().all(|&s| s == 1.0));
        }
        // Hidden width is twice the input channels.
        assert_eq!(state.adapters[0].0.hidden_channels(), 64);
        assert_eq!(state.adapters[1].0.hidden_channels(), 128);
    }

    #[test]
    fn adapter_output_matches_teacher_shape() {
        let mut r = rng();
        let mut adapter = VariationalAdapter::<f64>::new(5, 5, &mut r);
        let x = Array4::from_shape_fn((3, 5, 4, 4), |_| r.random_range(-1.0..1.0));
        let (y, _) = adapter.forward_train(&x.view());
        assert_eq!(y.dim(), (3, 5, 4, 4));
    }

    #[test]
    fn variances_stay_positive_after_updates() {
        let mut r = rng();
        let taps = select_taps(3).unwrap();
        let mut state: DtidState<f64> = init_dtid_state(&taps, &[3, 4], &mut r).unwrap();
        // Arbitrary gradient steps on omega cannot break positivity of
        // exp(omega).
        for step in 0..5 {
            for p in &mut state.omega {
                p.value.mapv_inplace(|w| w - 0.5 * (step as f64 - 2.0));
            }
        }
        for v in state.variances() {
            assert!(v.iter().all(|&s| s > 0.0));
        }
    }

    #[test]
    fn omega_gradient_aggregates_both_teachers() {
        let mut r = rng();
        let taps = select_taps(2).unwrap();
        let (n, c, h, w) = (2usize, 3usize, 4usize, 4usize);
        let student = vec![Array4::from_shape_fn((n, c, h, w), |_| r.random_range(-1.0..1.0))];

        let mut state: DtidState<f64> = init_dtid_state(&taps, &[c], &mut r).unwrap();
        // Make both adapters identical so their outputs coincide.
        let cloned = state.adapters[0].0.clone();
        state.adapters[0].1 = cloned;
        // Dry run to obtain the common adapter output.
        let (mu_out, _) = state.adapters[0].0.forward_train(&student[0].view());
        let residual = Array4::from_shape_fn((n, c, h, w), |_| r.random_range(-0.5..0.5));

        // Case A: both teachers carry the same residual.
        let t_a = vec![&mu_out + &residual];
        crate::nn::param::zero_grads(&mut state);
        let _ = state
            .loss_and_grads(&t_a, &t_a, &student, true)
            .unwrap();
        let grad_a = state.omega[0].grad.clone();

        // Case B: the second teacher's residual is zero.
        let t_b0 = vec![&mu_out + &residual];
        let t_b1 = vec![mu_out.clone()];
        crate::nn::param::zero_grads(&mut state);
        let _ = state
            .loss_and_grads(&t_b0, &t_b1, &student, true)
            .unwrap();
        let grad_b = state.omega[0].grad.clone();

        // The constant part of the omega gradient (from the log-sigma term)
        // is (H*W) per teacher per sample mean: NHW/2 per teacher / N.
        let const_part = 2.0 * (h * w) as f64 / 2.0;
        for (ga, gb) in grad_a.iter().zip(grad_b.iter()) {
            let data_a = ga - const_part;
            let data_b = gb - const_part;
            assert_abs_diff_eq!(data_a, 2.0 * data_b, epsilon = 1e-6);
        }
    }

    #[test]
    fn state_gradients_match_finite_differences() {
        let mut r = rng();
        let taps = select_taps(2).unwrap();
        let (n, c, h, w) = (2usize, 2usize, 3usize, 3usize);
        let mut state: DtidState<f64> = init_dtid_state(&taps, &[c], &mut r).unwrap();
        let t0 = vec![Array4::from_shape_fn((n, c, h, w), |_| r.random_range(-1.0..1.0))];
        let t1 = vec![Array4::from_shape_fn((n, c, h, w), |_| r.random_range(-1.0..1.0))];
        let mut student = vec![Array4::from_shape_fn((n, c, h, w), |_| r.random_range(-1.0..1.0))];

        crate::nn::param::zero_grads(&mut state);
        let (_, d_student) = state.loss_and_grads(&t0, &t1, &student, true).unwrap();

        // FD w.r.t. student map entries.
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [1, 1, 2, 2], [0, 1, 1, 0]] {
            let orig = student[0][idx];
            student[0][idx] = orig + eps;
            let up = state.loss_and_grads(&t0, &t1, &student, false).unwrap().0;
            student[0][idx] = orig - eps;
            let down = state.loss_and_grads(&t0, &t1, &student, false).unwrap().0;
            student[0][idx] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert_abs_diff_eq!(d_student[0][idx], fd, epsilon = 1e-5);
        }

        // FD w.r.t. omega.
        let grads: Vec<f64> = state.omega[0].grad.iter().cloned().collect();
        for ci in 0..c {
            let orig = state.omega[0].value[[ci]];
            state.omega[0].value[[ci]] = orig + eps;
            let up = state.loss_and_grads(&t0, &t1, &student, false).unwrap().0;
            state.omega[0].value[[ci]] = orig - eps;
            let down = state.loss_and_grads(&t0, &t1, &student, false).unwrap().0;
            state.omega[0].value[[ci]] = orig;
            let fd = (up - down) / (2.0 * eps);
            assert_abs_diff_eq!(grads[ci], fd, epsilon = 1e-5);
        }

        // FD w.r.t. one adapter weight coordinate.
        let mut analytic = None;
        state.visit_params_ref("", &mut |name, p| {
            if name == "tap0.adapter0.conv3.weight" {
                analytic = Some(p.grad.as_slice().unwrap()[0]);
            }
        });
        let analytic = analytic.unwrap();
        let mut bump = |state: &mut DtidState<f64>, delta: f64| {
            state.visit_params("", &mut |name, p| {
                if name == "tap0.adapter0.conv3.weight" {
                    p.value.as_slice_mut().unwrap()[0] += delta;
                }
            });
        };
        bump(&mut state, eps);
        let up = state.loss_and_grads(&t0, &t1, &student, false).unwrap().0;
        bump(&mut state, -2.0 * eps);
        let down = state.loss_and_grads(&t0, &t1, &student, false).unwrap().0;
        bump(&mut state, eps);
        let fd = (up - down) / (2.0 * eps);
        assert_abs_diff_eq!(analytic, fd, epsilon = 1e-5);
    }

    #[test]
    fn collect_maps_shapes_and_detachment() {
        let mut r = rng();
        let config = crate::backbone::BackboneConfig {
            in_channels: 2,
            image_hw: 8,
            stage_channels: vec![3, 4, 5],
            blocks_per_stage: 1,
            ..Default::default()
        };
        let mut model = crate::backbone::Backbone::<f64>::new(config, &mut r);
        let w = init::head_rows(2, model.feature_dim(), &mut r);
        model.head.append_block(vec![0, 1], w, true).unwrap();

        let taps = select_taps(3).unwrap();
        let x = Array4::from_shape_fn((4, 2, 8, 8), |_| r.random_range(-1.0..1.0));
        let maps = collect_maps(&model, &taps, &x.view()).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].dim(), (4, 4, 4, 4));
        assert_eq!(maps[1].dim(), (4, 5, 2, 2));

        // Determinism in eval mode.
        let again = collect_maps(&model, &taps, &x.view()).unwrap();
        for (a, b) in maps.iter().zip(again.iter()) {
            assert_eq!(a, b);
        }

        // Teacher detachment: collection leaves the model's gradients zero.
        let all_zero = {
            let mut zero = true;
            model.visit_params_ref("", &mut |_, p| {
                if p.grad.iter().any(|&g| g != 0.0) {
                    zero = false;
                }
            });
            zero
        };
        assert!(all_zero);

        let bad_taps = TapSelection { stage_ids: vec![0, 1] };
        assert!(collect_maps(&model, &bad_taps, &x.view()).is_err());
    }
}
