//! Scalar training objectives and their analytic gradients.
//!
//! Every function here is pure array math; model wiring (which slots of a
//! batch feed which term, teacher freezing) lives in [`crate::trainer`].

use crate::backbone::BnStatistics;
use crate::error::{Error, Result};
use crate::nn::norm::BnObservation;
use crate::scalar::Scalar;
use crate::util::{cosine, floored_norm};
use ndarray::{Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Zip};
use serde::{Deserialize, Serialize};

/// Floor applied inside every logarithm of a cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;
/// Floor applied to observed batch variances before statistics matching.
pub const VAR_FLOOR: f64 = 1e-5;
/// Norm floor shared by all cosine computations.
pub const COS_EPS: f64 = 1e-12;

/// Named loss terms of one training step.
///
/// `weighted_total` is `dtid + ce + alpha * lf + dfkd` over the present
/// terms; generator-side terms are informational and not part of the sum.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub ce: Option<f64>,
    pub lf: Option<f64>,
    pub dtid: Option<f64>,
    pub dfkd: Option<f64>,
    pub gen_ce: Option<f64>,
    pub gen_bns: Option<f64>,
    pub alpha: f64,
    pub weighted_total: f64,
}

/// Combines the student-side terms into the training objective.
pub fn total_objective<S: Scalar>(
    dtid: Option<S>,
    ce: Option<S>,
    lf: Option<S>,
    dfkd: Option<S>,
    alpha: S,
) -> S {
    let mut total = S::zero();
    if let Some(v) = dtid {
        total += v;
    }
    if let Some(v) = ce {
        total += v;
    }
    if let Some(v) = lf {
        total += alpha * v;
    }
    if let Some(v) = dfkd {
        total += v;
    }
    total
}

fn floored_ln<S: Scalar>(p: S) -> S {
    p.max(S::from_f(LOG_FLOOR)).ln()
}

/// Mean negative log-likelihood of the labels under given distributions.
///
/// Rows of `probs` must be probability vectors; labels index their columns.
pub fn ce_loss<S: Scalar>(probs: &ArrayView2<'_, S>, labels: &[usize]) -> Result<S> {
    if probs.nrows() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} distributions for {} labels",
            probs.nrows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidConfig("cross-entropy over an empty batch".into()));
    }
    let mut total = S::zero();
    for (row, &label) in probs.rows().into_iter().zip(labels) {
        if label >= row.len() {
            return Err(Error::ClassSet(format!(
                "label {label} outside {}-way distribution",
                row.len()
            )));
        }
        total += -floored_ln(row[label]);
    }
    Ok(total / S::from_us(labels.len()))
}

/// Fused softmax + cross-entropy from logits, with gradient w.r.t. logits.
pub fn ce_from_logits_with_grad<S: Scalar>(
    logits: &ArrayView2<'_, S>,
    labels: &[usize],
) -> Result<(S, Array2<S>)> {
    let probs = crate::util::softmax_rows(logits);
    let loss = ce_loss(&probs.view(), labels)?;
    let mut grad = probs;
    let inv_n = S::one() / S::from_us(labels.len());
    for (mut row, &label) in grad.rows_mut().into_iter().zip(labels) {
        row[label] -= S::one();
        row.mapv_inplace(|v| v * inv_n);
    }
    Ok((loss, grad))
}

/// Negative mean cosine similarity between paired feature rows.
///
/// `old` comes from the frozen previous extractor; no gradient is returned
/// for it. The value lies in `[-1, 1]`.
pub fn lf_loss<S: Scalar>(old: &ArrayView2<'_, S>, new: &ArrayView2<'_, S>) -> Result<S> {
    Ok(lf_loss_with_grad(old, new)?.0)
}

/// [`lf_loss`] plus its gradient w.r.t. the new features.
pub fn lf_loss_with_grad<S: Scalar>(
    old: &ArrayView2<'_, S>,
    new: &ArrayView2<'_, S>,
) -> Result<(S, Array2<S>)> {
    if old.dim() != new.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature batches {:?} vs {:?}",
            old.dim(),
            new.dim()
        )));
    }
    let n = old.nrows();
    if n == 0 {
        return Err(Error::InvalidConfig("less-forget over an empty batch".into()));
    }
    let eps = S::from_f(COS_EPS);
    let inv_n = S::one() / S::from_us(n);
    let mut total = S::zero();
    let mut grad = Array2::<S>::zeros(new.raw_dim());
    for i in 0..n {
        let o = old.row(i);
        let f = new.row(i);
        let cos = cosine(&o, &f, eps);
        total += cos;
        let no = floored_norm(&o, eps);
        let nf = floored_norm(&f, eps);
        // d cos / d f = o / (|o||f|) - cos * f / |f|^2 ; lf = -mean cos.
        let mut g = grad.row_mut(i);
        for j in 0..f.len() {
            g[j] = -(o[j] / (no * nf) - cos * f[j] / (nf * nf)) * inv_n;
        }
    }
    Ok((-total * inv_n, grad))
}

/// Cross-entropy between fed one-hot labels and the teacher's softmax on
/// generated samples. Math is shared with [`ce_loss`]; the generator-only
/// gradient flow is a property of the training step, not of this value.
pub fn generator_ce_loss<S: Scalar>(
    teacher_probs: &ArrayView2<'_, S>,
    fed_labels: &[usize],
) -> Result<S> {
    ce_loss(teacher_probs, fed_labels)
}

/// KL divergence between two scalar Gaussians given as (mean, variance).
pub fn gaussian_kl<S: Scalar>(est_mean: S, est_var: S, ref_mean: S, ref_var: S) -> Result<S> {
    if est_var <= S::zero() || ref_var <= S::zero() {
        return Err(Error::InvalidConfig(format!(
            "non-positive variance in Gaussian KL: est {est_var}, ref {ref_var}"
        )));
    }
    let half = S::from_f(0.5);
    let diff = est_mean - ref_mean;
    Ok((diff * diff + est_var) / (S::from_f(2.0) * ref_var) - half * (est_var / ref_var).ln()
        - half)
}

/// Gradient of [`gaussian_kl`] w.r.t. the estimated mean and variance.
pub fn gaussian_kl_grad<S: Scalar>(est_mean: S, est_var: S, ref_mean: S, ref_var: S) -> (S, S) {
    let half = S::from_f(0.5);
    let d_mean = (est_mean - ref_mean) / ref_var;
    let d_var = half / ref_var - half / est_var;
    (d_mean, d_var)
}

/// Sum over layers and channels of the Gaussian KL between observed batch
/// statistics and the stored statistics.
///
/// Observed variances are biased batch estimates and get floored at
/// [`VAR_FLOOR`] before entering the divergence.
pub fn bns_loss<S: Scalar>(
    stored: &BnStatistics<S>,
    observed: &[BnObservation<S>],
) -> Result<S> {
    if stored.records.len() != observed.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} stored BN layers vs {} observed",
            stored.records.len(),
            observed.len()
        )));
    }
    let floor = S::from_f(VAR_FLOOR);
    let mut total = S::zero();
    for (rec, obs) in stored.records.iter().zip(observed) {
        if rec.means.len() != obs.mean.len() {
            return Err(Error::ShapeMismatch(format!(
                "layer {}: {} stored channels vs {} observed",
                rec.layer_id,
                rec.means.len(),
                obs.mean.len()
            )));
        }
        for c in 0..rec.means.len() {
            total += gaussian_kl(
                obs.mean[c],
                obs.var[c].max(floor),
                rec.means[c],
                rec.variances[c],
            )?;
        }
    }
    Ok(total)
}

/// Gradient of [`bns_loss`] w.r.t. one layer's raw input activations.
///
/// `x` is the activation tensor whose batch statistics were observed; the
/// derivative accounts for both the mean and the biased-variance paths and
/// vanishes on the variance path wherever the floor is active.
pub fn bns_input_grad<S: Scalar>(
    x: &ArrayView4<'_, S>,
    obs: &BnObservation<S>,
    stored_mean: &ArrayView1<'_, S>,
    stored_var: &ArrayView1<'_, S>,
) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    let m = S::from_us(n * h * w);
    let floor = S::from_f(VAR_FLOOR);
    let mut d_mean = Array1::<S>::zeros(c);
    let mut d_var = Array1::<S>::zeros(c);
    for ch in 0..c {
        let var_floored = obs.var[ch].max(floor);
        let (dm, dv) = gaussian_kl_grad(obs.mean[ch], var_floored, stored_mean[ch], stored_var[ch]);
        d_mean[ch] = dm;
        d_var[ch] = if obs.var[ch] > floor { dv } else { S::zero() };
    }
    let mut grad = Array4::<S>::zeros((n, c, h, w));
    Zip::indexed(&mut grad).for_each(|(_, ch, _, _), g| {
        *g = d_mean[ch] / m;
    });
    Zip::indexed(&mut grad).and(x).for_each(|(_, ch, _, _), g, &xv| {
        *g += d_var[ch] * (S::from_f(2.0) * (xv - obs.mean[ch]) / m);
    });
    grad
}

/// Variational regression penalty of one teacher map against one adapter
/// output, with per-channel log variances.
///
/// `sum_{c,h,w} (t - mu)^2 / (2 sigma_c^2) + sum_{c,h,w} log sigma_c`, where
/// `sigma_c^2 = exp(omega_c)`; the log term counts once per spatial position
/// per channel.
pub fn dtid_penalty<S: Scalar>(
    teacher_map: &ArrayView3<'_, S>,
    adapter_output: &ArrayView3<'_, S>,
    log_variances: &ArrayView1<'_, S>,
) -> Result<S> {
    let (c, h, w) = teacher_map.dim();
    if adapter_output.dim() != (c, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "teacher map {:?} vs adapter output {:?}",
            teacher_map.dim(),
            adapter_output.dim()
        )));
    }
    if log_variances.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "{c} channels vs {} log variances",
            log_variances.len()
        )));
    }
    let half = S::from_f(0.5);
    let hw = S::from_us(h * w);
    let mut total = S::zero();
    for ch in 0..c {
        let inv_two_var = half / log_variances[ch].exp();
        let mut sq = S::zero();
        Zip::from(teacher_map.index_axis(ndarray::Axis(0), ch))
            .and(adapter_output.index_axis(ndarray::Axis(0), ch))
            .for_each(|&t, &mu| {
                let r = t - mu;
                sq += r * r;
            });
        total += sq * inv_two_var + hw * half * log_variances[ch];
    }
    Ok(total)
}

/// Batched [`dtid_penalty`] over `[N, C, H, W]` maps: returns the summed
/// penalty plus gradients w.r.t. the adapter output and the log variances.
pub fn dtid_penalty_batch_with_grad<S: Scalar>(
    teacher_maps: &ArrayView4<'_, S>,
    adapter_outputs: &ArrayView4<'_, S>,
    log_variances: &ArrayView1<'_, S>,
) -> Result<(S, Array4<S>, Array1<S>)> {
    let (n, c, h, w) = teacher_maps.dim();
    if adapter_outputs.dim() != (n, c, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "teacher maps {:?} vs adapter outputs {:?}",
            teacher_maps.dim(),
            adapter_outputs.dim()
        )));
    }
    if log_variances.len() != c {
        return Err(Error::ShapeMismatch(format!(
            "{c} channels vs {} log variances",
            log_variances.len()
        )));
    }
    let half = S::from_f(0.5);
    let mut total = S::zero();
    let mut d_mu = Array4::<S>::zeros((n, c, h, w));
    let mut d_omega = Array1::<S>::zeros(c);
    for ch in 0..c {
        let var = log_variances[ch].exp();
        let inv_var = S::one() / var;
        let mut sq = S::zero();
        Zip::from(teacher_maps.index_axis(ndarray::Axis(1), ch))
            .and(adapter_outputs.index_axis(ndarray::Axis(1), ch))
            .and(d_mu.index_axis_mut(ndarray::Axis(1), ch))
            .for_each(|&t, &mu, g| {
                let r = t - mu;
                sq += r * r;
                *g = -r * inv_var;
            });
        total += sq * half * inv_var + S::from_us(n * h * w) * half * log_variances[ch];
        d_omega[ch] = -sq * half * inv_var + S::from_us(n * h * w) * half;
    }
    Ok((total, d_mu, d_omega))
}

/// Mean cross-entropy between teacher and student softmax outputs.
pub fn dfkd_loss<S: Scalar>(
    teacher_probs: &ArrayView2<'_, S>,
    student_probs: &ArrayView2<'_, S>,
) -> Result<S> {
    if teacher_probs.dim() != student_probs.dim() {
        return Err(Error::ShapeMismatch(format!(
            "teacher {:?} vs student {:?} distributions",
            teacher_probs.dim(),
            student_probs.dim()
        )));
    }
    let n = teacher_probs.nrows();
    if n == 0 {
        return Err(Error::InvalidConfig("distillation over an empty batch".into()));
    }
    let mut total = S::zero();
    for (t, s) in teacher_probs.rows().into_iter().zip(student_probs.rows()) {
        for (&p, &q) in t.iter().zip(s.iter()) {
            total += -p * floored_ln(q);
        }
    }
    Ok(total / S::from_us(n))
}

/// [`dfkd_loss`] from student logits, with gradient w.r.t. those logits.
pub fn dfkd_from_logits_with_grad<S: Scalar>(
    teacher_probs: &ArrayView2<'_, S>,
    student_logits: &ArrayView2<'_, S>,
) -> Result<(S, Array2<S>)> {
    let student_probs = crate::util::softmax_rows(student_logits);
    let loss = dfkd_loss(teacher_probs, &student_probs.view())?;
    let n = teacher_probs.nrows();
    let inv_n = S::one() / S::from_us(n);
    let mut grad = student_probs;
    Zip::from(&mut grad).and(teacher_probs).for_each(|q, &p| {
        *q = (*q - p) * inv_n;
    });
    Ok((loss, grad))
}

/// Less-forget weight for one incremental phase.
///
/// `alpha0 * sqrt(n_old / n_new)`, with `alpha0` doubled first when no old
/// exemplars are reserved.
pub fn alpha_schedule<S: Scalar>(
    alpha0: S,
    n_old_classes: usize,
    n_new_classes: usize,
    has_exemplars: bool,
) -> Result<S> {
    if alpha0 <= S::zero() {
        return Err(Error::InvalidConfig("alpha0 must be positive".into()));
    }
    if n_old_classes == 0 || n_new_classes == 0 {
        return Err(Error::InvalidConfig(
            "alpha schedule needs at least one old and one new class".into(),
        ));
    }
    let base = if has_exemplars {
        alpha0
    } else {
        alpha0 + alpha0
    };
    Ok(base * (S::from_us(n_old_classes) / S::from_us(n_new_classes)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BnRecord;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array3};
    use proptest::prelude::*;
    use rand::Rng;

    fn rng() -> rand_chacha::ChaCha12Rng {
        crate::util::seeded_rng(1234, &[0x10])
    }

    #[test]
    fn ce_uniform_and_perfect() {
        let probs = array![[0.25f64, 0.25, 0.25, 0.25]];
        let loss = ce_loss(&probs.view(), &[2]).unwrap();
        assert_abs_diff_eq!(loss, 4.0f64.ln(), epsilon = 1e-12);

        let perfect = array![[0.0f64, 1.0, 0.0]];
        assert_abs_diff_eq!(ce_loss(&perfect.view(), &[1]).unwrap(), 0.0, epsilon = 1e-12);

        let two = array![[1.0f64, 0.0, 0.0, 0.0], [0.25, 0.25, 0.25, 0.25]];
        let mean = ce_loss(&two.view(), &[0, 3]).unwrap();
        assert_abs_diff_eq!(mean, 4.0f64.ln() / 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(mean, 0.6931471805599453, epsilon = 1e-9);
    }

    #[test]
    fn ce_rejects_bad_label() {
        let probs = array![[0.5f64, 0.5]];
        assert!(ce_loss(&probs.view(), &[2]).is_err());
    }

    #[test]
    fn lf_identical_orthogonal_mixed() {
        let a = array![[1.0f64, 2.0], [3.0, -1.0]];
        assert_abs_diff_eq!(lf_loss(&a.view(), &a.view()).unwrap(), -1.0, epsilon = 1e-12);

        let o1 = array![[1.0f64, 0.0]];
        let o2 = array![[0.0f64, 1.0]];
        assert_abs_diff_eq!(lf_loss(&o1.view(), &o2.view()).unwrap(), 0.0, epsilon = 1e-12);

        let old = array![[1.0f64, 0.0], [1.0, 0.0]];
        let new = array![[1.0f64, 0.0], [0.0, 1.0]];
        assert_abs_diff_eq!(lf_loss(&old.view(), &new.view()).unwrap(), -0.5, epsilon = 1e-12);
    }

    #[test]
    fn generator_ce_examples() {
        let onehot = array![[0.0f64, 1.0, 0.0, 0.0, 0.0]];
        assert_abs_diff_eq!(
            generator_ce_loss(&onehot.view(), &[1]).unwrap(),
            0.0,
            epsilon = 1e-12
        );
        let uniform = array![[0.2f64, 0.2, 0.2, 0.2, 0.2]];
        assert_abs_diff_eq!(
            generator_ce_loss(&uniform.view(), &[3]).unwrap(),
            5.0f64.ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn gaussian_kl_examples() {
        assert_abs_diff_eq!(gaussian_kl(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            gaussian_kl(1.0, 4.0, 0.0, 1.0).unwrap(),
            2.5 - 2.0f64.ln() - 0.5,
            epsilon = 1e-12
        );
        for &v in &[0.1, 1.0, 7.5] {
            assert_abs_diff_eq!(gaussian_kl(0.0, v, 0.0, v).unwrap(), 0.0, epsilon = 1e-12);
        }
        assert!(gaussian_kl(0.0, -1.0, 0.0, 1.0).is_err());
        assert!(gaussian_kl(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn bns_loss_reduces_to_gaussian_kl() {
        let stored = BnStatistics {
            records: vec![BnRecord {
                layer_id: "bn0".into(),
                means: array![0.0f64],
                variances: array![1.0f64],
            }],
        };
        let obs = vec![BnObservation {
            mean: array![1.0f64],
            var: array![4.0f64],
        }];
        let single = bns_loss(&stored, &obs).unwrap();
        assert_abs_diff_eq!(single, 1.3068528194400546, epsilon = 1e-9);

        let stored2 = BnStatistics {
            records: vec![BnRecord {
                layer_id: "bn0".into(),
                means: array![0.0f64, 0.0],
                variances: array![1.0f64, 1.0],
            }],
        };
        let obs2 = vec![BnObservation {
            mean: array![1.0f64, 1.0],
            var: array![4.0f64, 4.0],
        }];
        assert_abs_diff_eq!(
            bns_loss(&stored2, &obs2).unwrap(),
            2.6137056388801092,
            epsilon = 1e-9
        );

        let zero = bns_loss(
            &stored,
            &[BnObservation {
                mean: array![0.0f64],
                var: array![1.0f64],
            }],
        )
        .unwrap();
        assert_abs_diff_eq!(zero, 0.0, epsilon = 1e-12);

        assert!(bns_loss(&stored, &obs2).is_err());
    }

    #[test]
    fn dtid_penalty_examples() {
        let zeros = Array3::<f64>::zeros((2, 3, 3));
        let omega = Array1::<f64>::zeros(2);
        let same = dtid_penalty(&zeros.view(), &zeros.view(), &omega.view()).unwrap();
        assert_abs_diff_eq!(same, 0.0, epsilon = 1e-12);

        let t = array![[[2.0f64]]];
        let mu = array![[[1.0f64]]];
        let w0 = array![0.0f64];
        assert_abs_diff_eq!(
            dtid_penalty(&t.view(), &mu.view(), &w0.view()).unwrap(),
            0.5,
            epsilon = 1e-12
        );

        // Closed form: 1/(2 e^2) + 1.
        let t = array![[[1.0f64]]];
        let mu = array![[[0.0f64]]];
        let w2 = array![2.0f64];
        assert_abs_diff_eq!(
            dtid_penalty(&t.view(), &mu.view(), &w2.view()).unwrap(),
            1.0 / (2.0 * 2.0f64.exp()) + 1.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn dtid_penalty_loop_oracle() {
        let mut r = rng();
        for _ in 0..20 {
            let (c, h, w) = (4usize, 3usize, 3usize);
            let t = Array3::from_shape_fn((c, h, w), |_| r.random_range(-1.0f64..1.0));
            let mu = Array3::from_shape_fn((c, h, w), |_| r.random_range(-1.0..1.0));
            let omega = Array1::from_shape_fn(c, |_| r.random_range(-0.5..0.5));
            let fast = dtid_penalty(&t.view(), &mu.view(), &omega.view()).unwrap();
            let mut slow = 0.0f64;
            for ci in 0..c {
                let sigma_sq = omega[ci].exp();
                for hi in 0..h {
                    for wi in 0..w {
                        let res = t[[ci, hi, wi]] - mu[[ci, hi, wi]];
                        slow += res * res / (2.0 * sigma_sq) + 0.5 * omega[ci];
                    }
                }
            }
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-9);
        }
    }

    #[test]
    fn dtid_batch_matches_per_sample_sum() {
        let mut r = rng();
        let (n, c, h, w) = (3usize, 2usize, 2usize, 2usize);
        let t = Array4::from_shape_fn((n, c, h, w), |_| r.random_range(-1.0..1.0));
        let mu = Array4::from_shape_fn((n, c, h, w), |_| r.random_range(-1.0..1.0));
        let omega = Array1::from_shape_fn(c, |_| r.random_range(-0.3..0.3));
        let (total, _, _) =
            dtid_penalty_batch_with_grad(&t.view(), &mu.view(), &omega.view()).unwrap();
        let mut by_sample = 0.0f64;
        for i in 0..n {
            by_sample += dtid_penalty(
                &t.index_axis(ndarray::Axis(0), i),
                &mu.index_axis(ndarray::Axis(0), i),
                &omega.view(),
            )
            .unwrap();
        }
        assert_abs_diff_eq!(total, by_sample, epsilon = 1e-9);
    }

    #[test]
    fn dfkd_examples() {
        let n = 6usize;
        let uniform = Array2::from_elem((2, n), 1.0f64 / n as f64);
        assert_abs_diff_eq!(
            dfkd_loss(&uniform.view(), &uniform.view()).unwrap(),
            (n as f64).ln(),
            epsilon = 1e-9
        );

        let onehot = array![[0.0f64, 1.0, 0.0, 0.0]];
        assert_abs_diff_eq!(
            dfkd_loss(&onehot.view(), &onehot.view()).unwrap(),
            0.0,
            epsilon = 1e-9
        );

        let student_uniform = array![[0.25f64, 0.25, 0.25, 0.25]];
        assert_abs_diff_eq!(
            dfkd_loss(&onehot.view(), &student_uniform.view()).unwrap(),
            4.0f64.ln(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn alpha_schedule_examples() {
        assert_abs_diff_eq!(
            alpha_schedule(5.0f64, 50, 10, true).unwrap(),
            5.0 * 5.0f64.sqrt(),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            alpha_schedule(5.0f64, 50, 10, false).unwrap(),
            10.0 * 5.0f64.sqrt(),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(alpha_schedule(3.0f64, 7, 7, true).unwrap(), 3.0, epsilon = 1e-12);
        assert!(alpha_schedule(0.0f64, 5, 5, true).is_err());
        assert!(alpha_schedule(1.0f64, 0, 5, true).is_err());
    }

    #[test]
    fn total_objective_examples() {
        let zero = total_objective::<f64>(Some(0.0), Some(0.0), Some(0.0), None, 1.0);
        assert_abs_diff_eq!(zero, 0.0, epsilon = 1e-12);
        let t = total_objective(Some(1.0), Some(2.0), Some(-0.5), None, 4.0);
        assert_abs_diff_eq!(t, 1.0, epsilon = 1e-12);
        let t2 = total_objective(Some(1.0), Some(2.0), Some(-0.5), Some(0.5), 4.0);
        assert_abs_diff_eq!(t2, 1.5, epsilon = 1e-12);
    }

    // Central finite differences at f64 for the pure-math gradients. The
    // composite model gradients are checked in the integration suites.

    #[test]
    fn lf_grad_matches_finite_differences() {
        let mut r = rng();
        for _ in 0..10 {
            let old = Array2::from_shape_fn((3, 4), |_| r.random_range(-1.0..1.0));
            let mut new = Array2::from_shape_fn((3, 4), |_| r.random_range(0.2..1.0));
            let (_, grad) = lf_loss_with_grad(&old.view(), &new.view()).unwrap();
            let eps = 1e-6;
            for i in 0..3 {
                for j in 0..4 {
                    let orig = new[[i, j]];
                    new[[i, j]] = orig + eps;
                    let up = lf_loss(&old.view(), &new.view()).unwrap();
                    new[[i, j]] = orig - eps;
                    let down = lf_loss(&old.view(), &new.view()).unwrap();
                    new[[i, j]] = orig;
                    let fd = (up - down) / (2.0 * eps);
                    assert_abs_diff_eq!(grad[[i, j]], fd, epsilon = 1e-7);
                }
            }
        }
    }

    #[test]
    fn dtid_grads_match_finite_differences() {
        let mut r = rng();
        let (n, c, h, w) = (2usize, 3usize, 2usize, 2usize);
        let t = Array4::from_shape_fn((n, c, h, w), |_| r.random_range(-1.0..1.0));
        let mut mu = Array4::from_shape_fn((n, c, h, w), |_| r.random_range(-1.0..1.0));
        let mut omega = Array1::from_shape_fn(c, |_| r.random_range(-0.4..0.4));
        let (_, d_mu, d_omega) =
            dtid_penalty_batch_with_grad(&t.view(), &mu.view(), &omega.view()).unwrap();
        let eps = 1e-6;
        let value = |mu: &Array4<f64>, omega: &Array1<f64>| {
            dtid_penalty_batch_with_grad(&t.view(), &mu.view(), &omega.view())
                .unwrap()
                .0
        };
        for idx in [[0, 0, 0, 0], [1, 2, 1, 1], [0, 1, 0, 1]] {
            let orig = mu[idx];
            mu[idx] = orig + eps;
            let up = value(&mu, &omega);
            mu[idx] = orig - eps;
            let down = value(&mu, &omega);
            mu[idx] = orig;
            assert_abs_diff_eq!(d_mu[idx], (up - down) / (2.0 * eps), epsilon = 1e-6);
        }
        for ci in 0..c {
            let orig = omega[ci];
            omega[ci] = orig + eps;
            let up = value(&mu, &omega);
            omega[ci] = orig - eps;
            let down = value(&mu, &omega);
            omega[ci] = orig;
            assert_abs_diff_eq!(d_omega[ci], (up - down) / (2.0 * eps), epsilon = 1e-6);
        }
    }

    #[test]
    fn dfkd_grad_matches_finite_differences() {
        let mut r = rng();
        let teacher = crate::util::softmax_rows(
            &Array2::from_shape_fn((3, 5), |_| r.random_range(-1.0..1.0)).view(),
        );
        let mut logits = Array2::from_shape_fn((3, 5), |_| r.random_range(-1.0..1.0));
        let (_, grad) = dfkd_from_logits_with_grad(&teacher.view(), &logits.view()).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            for j in 0..5 {
                let orig = logits[[i, j]];
                logits[[i, j]] = orig + eps;
                let up = dfkd_loss(
                    &teacher.view(),
                    &crate::util::softmax_rows(&logits.view()).view(),
                )
                .unwrap();
                logits[[i, j]] = orig - eps;
                let down = dfkd_loss(
                    &teacher.view(),
                    &crate::util::softmax_rows(&logits.view()).view(),
                )
                .unwrap();
                logits[[i, j]] = orig;
                assert_abs_diff_eq!(grad[[i, j]], (up - down) / (2.0 * eps), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn gaussian_kl_grad_matches_finite_differences() {
        let mut r = rng();
        for _ in 0..20 {
            let mu_hat = r.random_range(-2.0..2.0);
            let var_hat = r.random_range(0.2..3.0);
            let mu = r.random_range(-2.0..2.0);
            let var = r.random_range(0.2..3.0);
            let (dm, dv) = gaussian_kl_grad(mu_hat, var_hat, mu, var);
            let eps = 1e-6;
            let fd_m = (gaussian_kl(mu_hat + eps, var_hat, mu, var).unwrap()
                - gaussian_kl(mu_hat - eps, var_hat, mu, var).unwrap())
                / (2.0 * eps);
            let fd_v = (gaussian_kl(mu_hat, var_hat + eps, mu, var).unwrap()
                - gaussian_kl(mu_hat, var_hat - eps, mu, var).unwrap())
                / (2.0 * eps);
            assert_abs_diff_eq!(dm, fd_m, epsilon = 1e-6);
            assert_abs_diff_eq!(dv, fd_v, epsilon = 1e-6);
        }
    }

    proptest! {
        #[test]
        fn gaussian_kl_nonnegative(
            mu_hat in -10.0f64..10.0,
            var_hat in 1e-3f64..10.0,
            mu in -10.0f64..10.0,
            var in 1e-3f64..10.0,
        ) {
            let kl = gaussian_kl(mu_hat, var_hat, mu, var).unwrap();
            prop_assert!(kl >= -1e-12);
            let self_kl = gaussian_kl(mu, var, mu, var).unwrap();
            prop_assert!(self_kl.abs() < 1e-12);
        }

        #[test]
        fn lf_value_in_unit_range(
            seed in 0u64..1000,
        ) {
            let mut r = crate::util::seeded_rng(seed, &[7]);
            let old = Array2::from_shape_fn((4, 3), |_| r.random_range(-2.0..2.0));
            let new = Array2::from_shape_fn((4, 3), |_| r.random_range(-2.0..2.0));
            let v = lf_loss(&old.view(), &new.view()).unwrap();
            prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&v));
        }
    }
}
