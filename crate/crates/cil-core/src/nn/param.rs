//! Trainable tensors and whole-model parameter traversal.

use crate::scalar::Scalar;
use crate::util::{fnv1a_scalars, FNV_OFFSET};
use ndarray::ArrayD;

/// A named tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<S> {
    pub value: ArrayD<S>,
    pub grad: ArrayD<S>,
    /// Non-trainable params (frozen weights, buffers) are visited for
    /// checkpointing and checksums but never updated.
    pub trainable: bool,
    /// Buffers (BN running statistics) stay non-trainable even when a model
    /// is thawed wholesale.
    pub buffer: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: ArrayD<S>, trainable: bool) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            trainable,
            buffer: false,
        }
    }

    pub fn buffer(value: ArrayD<S>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        Self {
            value,
            grad,
            trainable: false,
            buffer: true,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }
}

/// Deterministic traversal of every parameter of a model, in graph order.
pub trait ParamVisit<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>));
    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>));
}

pub fn zero_grads<S: Scalar>(model: &mut dyn ParamVisit<S>) {
    model.visit_params("", &mut |_, p| p.zero_grad());
}

pub fn set_trainable<S: Scalar>(model: &mut dyn ParamVisit<S>, trainable: bool) {
    model.visit_params("", &mut |_, p| p.trainable = trainable);
}

/// Global l2 norm over the gradients of all trainable parameters.
pub fn global_grad_norm<S: Scalar>(parts: &[&dyn ParamVisit<S>]) -> S {
    let mut sq = S::zero();
    for part in parts {
        part.visit_params_ref("", &mut |_, p| {
            if p.trainable {
                for &g in p.grad.iter() {
                    sq += g * g;
                }
            }
        });
    }
    sq.sqrt()
}

/// Scales all trainable gradients so the global norm is at most `max_norm`.
/// Returns (pre-clip norm, post-clip norm).
pub fn clip_grad_norm<S: Scalar>(parts: &mut [&mut dyn ParamVisit<S>], max_norm: S) -> (S, S) {
    let mut sq = S::zero();
    for part in parts.iter_mut() {
        part.visit_params_ref("", &mut |_, p| {
            if p.trainable {
                for &g in p.grad.iter() {
                    sq += g * g;
                }
            }
        });
    }
    let norm = sq.sqrt();
    if norm <= max_norm || norm == S::zero() {
        return (norm, norm);
    }
    let scale = max_norm / norm;
    for part in parts.iter_mut() {
        part.visit_params("", &mut |_, p| {
            if p.trainable {
                p.grad.mapv_inplace(|g| g * scale);
            }
        });
    }
    (norm, max_norm)
}

/// FNV-1a checksum over every parameter value (trainable or not), in
/// traversal order. Bit-identical models hash identically.
pub fn checksum<S: Scalar>(model: &dyn ParamVisit<S>) -> u64 {
    let mut acc = FNV_OFFSET;
    model.visit_params_ref("", &mut |name, p| {
        for b in name.as_bytes() {
            acc ^= u64::from(*b);
            acc = acc.wrapping_mul(0x0000_0100_0000_01b3);
        }
        let slice = p
            .value
            .as_slice()
            .expect("parameters are stored contiguously");
        fnv1a_scalars(&mut acc, slice);
    });
    acc
}

/// Number of scalar parameters, split (trainable, frozen).
pub fn param_counts<S: Scalar>(model: &dyn ParamVisit<S>) -> (usize, usize) {
    let mut trainable = 0usize;
    let mut frozen = 0usize;
    model.visit_params_ref("", &mut |_, p| {
        if p.trainable {
            trainable += p.value.len();
        } else {
            frozen += p.value.len();
        }
    });
    (trainable, frozen)
}

pub(crate) fn join(prefix: &str, local: &str) -> String {
    if prefix.is_empty() {
        local.to_string()
    } else {
        format!("{prefix}.{local}")
    }
}
