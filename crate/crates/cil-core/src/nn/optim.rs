//! Optimizers operating through the parameter visitor.

use super::param::{Param, ParamVisit};
use crate::scalar::Scalar;
use ndarray::ArrayD;
use std::collections::HashMap;

/// Stochastic gradient descent with Nesterov momentum.
#[derive(Debug)]
pub struct Nag<S> {
    pub lr: S,
    pub momentum: S,
    pub weight_decay: S,
    velocity: HashMap<String, ArrayD<S>>,
}

impl<S: Scalar> Nag<S> {
    pub fn new(lr: S, momentum: S, weight_decay: S) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn ParamVisit<S>) {
        let lr = self.lr;
        let mom = self.momentum;
        let wd = self.weight_decay;
        let velocity = &mut self.velocity;
        model.visit_params("", &mut |name, p: &mut Param<S>| {
            if !p.trainable {
                return;
            }
            let v = velocity
                .entry(name)
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(v)
                .for_each(|w, &g, vel| {
                    let g = g + wd * *w;
                    *vel = mom * *vel + g;
                    *w = *w - lr * (g + mom * *vel);
                });
        });
    }
}

/// Adam with configurable first-moment coefficient.
#[derive(Debug)]
pub struct Adam<S> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    t: u64,
    m: HashMap<String, ArrayD<S>>,
    v: HashMap<String, ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S, beta1: S) -> Self {
        Self {
            lr,
            beta1,
            beta2: S::from_f(0.999),
            eps: S::from_f(1e-8),
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn ParamVisit<S>) {
        self.t += 1;
        let lr = self.lr;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let eps = self.eps;
        let bias1 = S::one() - b1.powi(self.t as i32);
        let bias2 = S::one() - b2.powi(self.t as i32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_params("", &mut |name, p: &mut Param<S>| {
            if !p.trainable {
                return;
            }
            let m = ms
                .entry(name.clone())
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            let v = vs
                .entry(name)
                .or_insert_with(|| ArrayD::zeros(p.value.raw_dim()));
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, mv, vv| {
                    *mv = b1 * *mv + (S::one() - b1) * g;
                    *vv = b2 * *vv + (S::one() - b2) * g * g;
                    let mhat = *mv / bias1;
                    let vhat = *vv / bias2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
        });
    }
}

/// Piecewise-constant learning-rate schedule over epochs.
#[derive(Debug, Clone)]
pub struct MilestoneSchedule<S> {
    pub base_lr: S,
    /// Epoch fractions in (0, 1) at which the rate decays.
    pub milestones: Vec<f64>,
    pub decay: S,
}

impl<S: Scalar> MilestoneSchedule<S> {
    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> S {
        let frac = if total_epochs == 0 {
            0.0
        } else {
            epoch as f64 / total_epochs as f64
        };
        let passed = self.milestones.iter().filter(|&&m| frac >= m).count();
        let mut lr = self.base_lr;
        for _ in 0..passed {
            lr = lr * self.decay;
        }
        lr
    }
}
