//! Residual feature extractor with a cosine-similarity classification head.
//!
//! The last nonlinearity before the classifier is removed, so features are
//! real-valued with unbounded sign. Stage-end maps are exposed as tap points
//! for feature distillation, and every batch-norm layer can be observed for
//! statistics matching.

use crate::error::{Error, Result};
use crate::nn::conv::Conv2dTrace;
use crate::nn::norm::BnTrace;
use crate::nn::ops::{
    global_avg_pool, global_avg_pool_backward, relu, relu_backward,
};
use crate::nn::param::{join, Param, ParamVisit};
use crate::nn::{init, BatchNorm2d, BnObservation, Conv2d, PadMode};
use crate::protocol::ClassId;
use crate::scalar::Scalar;
use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Architecture description; fully determines the parameter shapes.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub image_hw: usize,
    /// Output channels of each residual stage; spatial size halves from the
    /// second stage on.
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Norm floor in cosine scoring.
    pub cosine_eps: f64,
    /// Whether the single positive logit scale is learned.
    pub learn_scale: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_hw: 32,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: 1,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            cosine_eps: 1e-12,
            learn_scale: true,
        }
    }
}

impl BackboneConfig {
    pub fn feature_dim(&self) -> usize {
        *self.stage_channels.last().expect("at least one stage")
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }
}

/// Stored per-layer, per-channel Gaussian statistics of a frozen model's
/// batch-norm layers, in graph order.
#[derive(Debug, Clone)]
pub struct BnStatistics<S> {
    pub records: Vec<BnRecord<S>>,
}

#[derive(Debug, Clone)]
pub struct BnRecord<S> {
    pub layer_id: String,
    pub means: Array1<S>,
    pub variances: Array1<S>,
}

impl<S: Scalar> BnStatistics<S> {
    pub fn layer_count(&self) -> usize {
        self.records.len()
    }

    pub fn channel_count(&self, layer: usize) -> usize {
        self.records[layer].means.len()
    }
}

/// Anything holding an ordered list of batch-norm layers.
pub trait BnSource<S> {
    fn bn_layers(&self) -> Vec<(String, &BatchNorm2d<S>)>;
}

/// Copies the running statistics of every BN layer, in graph order.
///
/// Variances are floored at the layer epsilon so stored statistics stay
/// strictly positive. Models without BN layers are rejected because the
/// statistics-matching loss is undefined for them.
pub fn capture_bn_statistics<S: Scalar>(model: &dyn BnSource<S>) -> Result<BnStatistics<S>> {
    let layers = model.bn_layers();
    if layers.is_empty() {
        return Err(Error::MissingComponent(
            "model has no batch-normalization layers".into(),
        ));
    }
    let records = layers
        .into_iter()
        .map(|(layer_id, bn)| {
            let means = bn
                .running_mean
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .to_owned();
            let eps = bn.eps;
            let variances = bn
                .running_var
                .value
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
                .mapv(|v| v.max(eps));
            BnRecord {
                layer_id,
                means,
                variances,
            }
        })
        .collect();
    Ok(BnStatistics { records })
}

// ---------------------------------------------------------------------------
// Residual block
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ResidualBlock<S> {
    conv1: Conv2d<S>,
    bn1: BatchNorm2d<S>,
    conv2: Conv2d<S>,
    bn2: BatchNorm2d<S>,
    down: Option<(Conv2d<S>, BatchNorm2d<S>)>,
    final_relu: bool,
}

pub struct BlockTrace<S> {
    conv1: Conv2dTrace<S>,
    bn1: BnTrace<S>,
    mask1: Array4<bool>,
    conv2: Conv2dTrace<S>,
    bn2: BnTrace<S>,
    down: Option<(Conv2dTrace<S>, BnTrace<S>)>,
    mask_out: Option<Array4<bool>>,
}

impl<S: Scalar> ResidualBlock<S> {
    fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        final_relu: bool,
        bn_momentum: S,
        bn_eps: S,
        rng: &mut R,
    ) -> Self {
        let conv1 = init::he_conv(in_channels, out_channels, 3, stride, 1, PadMode::Zero, false, rng);
        let bn1 = BatchNorm2d::new(out_channels, bn_momentum, bn_eps);
        let conv2 = init::he_conv(out_channels, out_channels, 3, 1, 1, PadMode::Zero, false, rng);
        let bn2 = BatchNorm2d::new(out_channels, bn_momentum, bn_eps);
        let down = (stride != 1 || in_channels != out_channels).then(|| {
            (
                init::he_conv(in_channels, out_channels, 1, stride, 0, PadMode::Zero, false, rng),
                BatchNorm2d::new(out_channels, bn_momentum, bn_eps),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            down,
            final_relu,
        }
    }

    fn bn_count(&self) -> usize {
        if self.down.is_some() {
            3
        } else {
            2
        }
    }

    fn forward_train(
        &mut self,
        x: &ArrayView4<'_, S>,
        update_running: bool,
    ) -> (Array4<S>, BlockTrace<S>) {
        let (h1, conv1_t) = self.conv1.forward(x);
        let (h1, bn1_t) = self.bn1.forward_train(&h1.view(), update_running);
        let (h1, mask1) = relu(&h1.view());
        let (h2, conv2_t) = self.conv2.forward(&h1.view());
        let (h2, bn2_t) = self.bn2.forward_train(&h2.view(), update_running);
        let (skip, down_t) = match &mut self.down {
            Some((conv, bn)) => {
                let (s, ct) = conv.forward(x);
                let (s, bt) = bn.forward_train(&s.view(), update_running);
                (s, Some((ct, bt)))
            }
            None => (x.to_owned(), None),
        };
        let sum = &h2 + &skip;
        let (out, mask_out) = if self.final_relu {
            let (o, m) = relu(&sum.view());
            (o, Some(m))
        } else {
            (sum, None)
        };
        (
            out,
            BlockTrace {
                conv1: conv1_t,
                bn1: bn1_t,
                mask1,
                conv2: conv2_t,
                bn2: bn2_t,
                down: down_t,
                mask_out,
            },
        )
    }

    fn forward_frozen(&self, x: &ArrayView4<'_, S>, observe: bool) -> (Array4<S>, BlockTrace<S>) {
        let (h1, conv1_t) = self.conv1.forward(x);
        let (h1, bn1_t) = self.bn1.forward_eval(&h1.view(), observe);
        let (h1, mask1) = relu(&h1.view());
        let (h2, conv2_t) = self.conv2.forward(&h1.view());
        let (h2, bn2_t) = self.bn2.forward_eval(&h2.view(), observe);
        let (skip, down_t) = match &self.down {
            Some((conv, bn)) => {
                let (s, ct) = conv.forward(x);
                let (s, bt) = bn.forward_eval(&s.view(), observe);
                (s, Some((ct, bt)))
            }
            None => (x.to_owned(), None),
        };
        let sum = &h2 + &skip;
        let (out, mask_out) = if self.final_relu {
            let (o, m) = relu(&sum.view());
            (o, Some(m))
        } else {
            (sum, None)
        };
        (
            out,
            BlockTrace {
                conv1: conv1_t,
                bn1: bn1_t,
                mask1,
                conv2: conv2_t,
                bn2: bn2_t,
                down: down_t,
                mask_out,
            },
        )
    }

    /// `bn_base` is this block's first BN index in graph order; injections
    /// are added to the gradient at each BN layer input.
    fn backward(
        &mut self,
        trace: &BlockTrace<S>,
        dy: &Array4<S>,
        accumulate: bool,
        bn_inj: &[Option<Array4<S>>],
        bn_base: usize,
    ) -> Array4<S> {
        let dy = match &trace.mask_out {
            Some(mask) => relu_backward(mask, &dy.view()),
            None => dy.clone(),
        };
        let mut d_bn2_in = self.bn2.backward(&trace.bn2, &dy.view(), accumulate);
        if let Some(Some(inj)) = bn_inj.get(bn_base + 1) {
            d_bn2_in += inj;
        }
        let d_h1 = self.conv2.backward(&trace.conv2, &d_bn2_in.view(), accumulate);
        let d_h1 = relu_backward(&trace.mask1, &d_h1.view());
        let mut d_bn1_in = self.bn1.backward(&trace.bn1, &d_h1.view(), accumulate);
        if let Some(Some(inj)) = bn_inj.get(bn_base) {
            d_bn1_in += inj;
        }
        let mut dx = self.conv1.backward(&trace.conv1, &d_bn1_in.view(), accumulate);
        match (&mut self.down, &trace.down) {
            (Some((conv, bn)), Some((conv_t, bn_t))) => {
                let mut d_db_in = bn.backward(bn_t, &dy.view(), accumulate);
                if let Some(Some(inj)) = bn_inj.get(bn_base + 2) {
                    d_db_in += inj;
                }
                dx += &conv.backward(conv_t, &d_db_in.view(), accumulate);
            }
            (None, None) => {
                dx += &dy;
            }
            _ => unreachable!("trace shape matches block shape"),
        }
        dx
    }

    fn collect_observations(&self, trace: &BlockTrace<S>, out: &mut Vec<BnObservation<S>>) {
        out.push(trace.bn1.observation.clone().expect("observed forward"));
        out.push(trace.bn2.observation.clone().expect("observed forward"));
        if let Some((_, bt)) = &trace.down {
            out.push(bt.observation.clone().expect("observed forward"));
        }
    }
}

impl<S: Scalar> BlockTrace<S> {
    fn push_bn_inputs<'a>(&'a self, out: &mut Vec<&'a Array4<S>>) {
        out.push(&self.bn1.input);
        out.push(&self.bn2.input);
        if let Some((_, bt)) = &self.down {
            out.push(&bt.input);
        }
    }
}

impl<S: Scalar> ParamVisit<S> for ResidualBlock<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        self.conv1.visit_params(&join(prefix, "conv1"), f);
        self.bn1.visit_params(&join(prefix, "bn1"), f);
        self.conv2.visit_params(&join(prefix, "conv2"), f);
        self.bn2.visit_params(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.down {
            conv.visit_params(&join(prefix, "down_conv"), f);
            bn.visit_params(&join(prefix, "down_bn"), f);
        }
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>)) {
        self.conv1.visit_params_ref(&join(prefix, "conv1"), f);
        self.bn1.visit_params_ref(&join(prefix, "bn1"), f);
        self.conv2.visit_params_ref(&join(prefix, "conv2"), f);
        self.bn2.visit_params_ref(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &self.down {
            conv.visit_params_ref(&join(prefix, "down_conv"), f);
            bn.visit_params_ref(&join(prefix, "down_bn"), f);
        }
    }
}

// ---------------------------------------------------------------------------
// Cosine head
// ---------------------------------------------------------------------------

/// One group of class weights added at a single point in time.
#[derive(Debug, Clone)]
pub struct HeadBlock<S> {
    pub class_ids: Vec<ClassId>,
    /// `[classes_in_block, feature_dim]`
    pub weights: Param<S>,
}

/// Cosine-similarity classifier with a single learnable logit scale.
#[derive(Debug, Clone)]
pub struct CosineHead<S> {
    pub blocks: Vec<HeadBlock<S>>,
    pub scale: Param<S>,
    pub learn_scale: bool,
    pub eps: S,
}

pub struct HeadTrace<S> {
    fhat: Array2<S>,
    fnorm: Array1<S>,
    what: Array2<S>,
    wnorm: Array1<S>,
    cos: Array2<S>,
}

impl<S: Scalar> CosineHead<S> {
    pub fn new(eps: S, learn_scale: bool) -> Self {
        Self {
            blocks: Vec::new(),
            scale: Param::new(ndarray::arr1(&[S::one()]).into_dyn(), learn_scale),
            learn_scale,
            eps,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.blocks.iter().map(|b| b.class_ids.len()).sum()
    }

    /// Class ids in logit-column order.
    pub fn class_ids(&self) -> Vec<ClassId> {
        self.blocks
            .iter()
            .flat_map(|b| b.class_ids.iter().copied())
            .collect()
    }

    /// Logit column of a class id, if present.
    pub fn column_of(&self, class: ClassId) -> Option<usize> {
        self.class_ids().iter().position(|&c| c == class)
    }

    pub fn append_block(
        &mut self,
        class_ids: Vec<ClassId>,
        weights: Array2<S>,
        trainable: bool,
    ) -> Result<()> {
        if class_ids.len() != weights.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} class ids for {} weight rows",
                class_ids.len(),
                weights.nrows()
            )));
        }
        let existing = self.class_ids();
        for c in &class_ids {
            if existing.contains(c) {
                return Err(Error::ClassSet(format!("class {c} already in classifier")));
            }
        }
        self.blocks.push(HeadBlock {
            class_ids,
            weights: Param::new(weights.into_dyn(), trainable),
        });
        Ok(())
    }

    pub fn scale_value(&self) -> S {
        self.scale.value[[0]]
    }

    fn stacked_normalized_weights(&self) -> (Array2<S>, Array1<S>) {
        let total = self.num_classes();
        let dim = self.blocks[0].weights.value.shape()[1];
        let mut what = Array2::<S>::zeros((total, dim));
        let mut wnorm = Array1::<S>::zeros(total);
        let mut row = 0usize;
        for block in &self.blocks {
            let w = block
                .weights
                .value
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap();
            for r in 0..w.nrows() {
                let norm = crate::util::floored_norm(&w.row(r), self.eps);
                wnorm[row] = norm;
                for d in 0..dim {
                    what[[row, d]] = w[[r, d]] / norm;
                }
                row += 1;
            }
        }
        (what, wnorm)
    }

    /// Scaled cosine logits for a feature batch.
    pub fn forward(&self, features: &ArrayView2<'_, S>) -> (Array2<S>, HeadTrace<S>) {
        let (n, _dim) = features.dim();
        let mut fhat = features.to_owned();
        let mut fnorm = Array1::<S>::zeros(n);
        for i in 0..n {
            let norm = crate::util::floored_norm(&features.row(i), self.eps);
            fnorm[i] = norm;
            fhat.row_mut(i).mapv_inplace(|v| v / norm);
        }
        let (what, wnorm) = self.stacked_normalized_weights();
        let cos = fhat.dot(&what.t());
        let logits = cos.mapv(|v| v * self.scale_value());
        (
            logits,
            HeadTrace {
                fhat,
                fnorm,
                what,
                wnorm,
                cos,
            },
        )
    }

    /// Backward through scale, cosine and both normalizations; returns the
    /// gradient w.r.t. the raw features.
    pub fn backward(
        &mut self,
        trace: &HeadTrace<S>,
        d_logits: &ArrayView2<'_, S>,
        accumulate: bool,
    ) -> Array2<S> {
        let scale = self.scale_value();
        if accumulate && self.learn_scale && self.scale.trainable {
            let mut s = S::zero();
            ndarray::Zip::from(d_logits).and(&trace.cos).for_each(|&dl, &c| {
                s += dl * c;
            });
            self.scale.grad[[0]] += s;
        }
        let d_cos = d_logits.mapv(|v| v * scale);

        // Feature path.
        let d_fhat = d_cos.dot(&trace.what); // [N, D]
        let n = d_fhat.nrows();
        let mut d_features = Array2::<S>::zeros(d_fhat.raw_dim());
        for i in 0..n {
            let fh = trace.fhat.row(i);
            let dfh = d_fhat.row(i);
            let mut dot = S::zero();
            for (&a, &b) in dfh.iter().zip(fh.iter()) {
                dot += a * b;
            }
            let inv = S::one() / trace.fnorm[i];
            let mut out = d_features.row_mut(i);
            for d in 0..fh.len() {
                out[d] = (dfh[d] - fh[d] * dot) * inv;
            }
        }

        // Weight path.
        if accumulate {
            let d_what = d_cos.t().dot(&trace.fhat); // [C, D]
            let mut row = 0usize;
            for block in &mut self.blocks {
                let rows = block.class_ids.len();
                if block.weights.trainable {
                    let mut grad = block
                        .weights
                        .grad
                        .view_mut()
                        .into_dimensionality::<ndarray::Ix2>()
                        .unwrap();
                    for r in 0..rows {
                        let wh = trace.what.row(row + r);
                        let dwh = d_what.row(row + r);
                        let mut dot = S::zero();
                        for (&a, &b) in dwh.iter().zip(wh.iter()) {
                            dot += a * b;
                        }
                        let inv = S::one() / trace.wnorm[row + r];
                        for d in 0..wh.len() {
                            grad[[r, d]] += (dwh[d] - wh[d] * dot) * inv;
                        }
                    }
                }
                row += rows;
            }
        }
        d_features
    }
}

impl<S: Scalar> ParamVisit<S> for CosineHead<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            f(join(prefix, &format!("block{i}.weights")), &mut b.weights);
        }
        f(join(prefix, "scale"), &mut self.scale);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            f(join(prefix, &format!("block{i}.weights")), &b.weights);
        }
        f(join(prefix, "scale"), &self.scale);
    }
}

/// Cosine similarity scores of a feature batch against a head, without the
/// learned scale. All scores lie in `[-1, 1]`.
pub fn cosine_logits<S: Scalar>(head: &CosineHead<S>, feature: &ArrayView2<'_, S>) -> Array2<S> {
    head.forward(feature).1.cos
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Backbone<S> {
    pub config: BackboneConfig,
    stem_conv: Conv2d<S>,
    stem_bn: BatchNorm2d<S>,
    stages: Vec<Vec<ResidualBlock<S>>>,
    pub head: CosineHead<S>,
}

/// Forward options: BN statistics observation and tap collection.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOpts {
    pub observe_bn: bool,
    pub taps: bool,
}

pub struct BackboneOut<S> {
    pub features: Array2<S>,
    pub logits: Array2<S>,
    /// Stage-end maps for distillation (stages after the first), in depth
    /// order; empty unless requested.
    pub taps: Vec<Array4<S>>,
    /// Batch statistics at every BN input, in graph order; empty unless
    /// requested.
    pub bn_obs: Vec<BnObservation<S>>,
}

pub struct BackboneTrace<S> {
    stem_conv: Conv2dTrace<S>,
    stem_bn: BnTrace<S>,
    stem_mask: Array4<bool>,
    blocks: Vec<Vec<BlockTrace<S>>>,
    pooled_hw: (usize, usize),
    head: HeadTrace<S>,
}

impl<S: Scalar> BackboneTrace<S> {
    /// Raw inputs of every BN layer, in graph order.
    pub fn bn_inputs(&self) -> Vec<&Array4<S>> {
        let mut out = vec![&self.stem_bn.input];
        for stage in &self.blocks {
            for bt in stage {
                bt.push_bn_inputs(&mut out);
            }
        }
        out
    }
}

/// Gradients injected into intermediate points of the backward pass.
pub struct InjectedGrads<S> {
    pub d_logits: Option<Array2<S>>,
    pub d_features: Option<Array2<S>>,
    /// Aligned with the tap list (stages after the first, depth order).
    pub d_taps: Vec<Option<Array4<S>>>,
    /// Aligned with BN graph order.
    pub d_bn_inputs: Vec<Option<Array4<S>>>,
}

impl<S> Default for InjectedGrads<S> {
    fn default() -> Self {
        Self {
            d_logits: None,
            d_features: None,
            d_taps: Vec::new(),
            d_bn_inputs: Vec::new(),
        }
    }
}

impl<S: Scalar> Backbone<S> {
    /// Fresh backbone with randomly initialized extractor and an empty head.
    pub fn new<R: Rng>(config: BackboneConfig, rng: &mut R) -> Self {
        assert!(
            !config.stage_channels.is_empty(),
            "backbone needs at least one stage"
        );
        let mom = S::from_f(config.bn_momentum);
        let eps = S::from_f(config.bn_eps);
        let c0 = config.stage_channels[0];
        let stem_conv = init::he_conv(
            config.in_channels,
            c0,
            3,
            1,
            1,
            PadMode::Zero,
            false,
            rng,
        );
        let stem_bn = BatchNorm2d::new(c0, mom, eps);
        let mut stages = Vec::new();
        let mut in_ch = c0;
        let last_stage = config.stage_channels.len() - 1;
        for (si, &out_ch) in config.stage_channels.iter().enumerate() {
            let mut blocks = Vec::new();
            for bi in 0..config.blocks_per_stage {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let is_last_block = si == last_stage && bi == config.blocks_per_stage - 1;
                blocks.push(ResidualBlock::new(
                    in_ch,
                    out_ch,
                    stride,
                    !is_last_block,
                    mom,
                    eps,
                    rng,
                ));
                in_ch = out_ch;
            }
            stages.push(blocks);
        }
        let head = CosineHead::new(S::from_f(config.cosine_eps), config.learn_scale);
        Self {
            config,
            stem_conv,
            stem_bn,
            stages,
            head,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    /// Channel count of each tap point (stages after the first).
    pub fn tap_channels(&self) -> Vec<usize> {
        self.config.stage_channels[1..].to_vec()
    }

    pub fn num_bn_layers(&self) -> usize {
        1 + self
            .stages
            .iter()
            .flatten()
            .map(|b| b.bn_count())
            .sum::<usize>()
    }

    fn check_input(&self, x: &ArrayView4<'_, S>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.config.in_channels || h != self.config.image_hw || w != self.config.image_hw {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} does not match configured {}x{}x{}",
                x.dim(),
                self.config.in_channels,
                self.config.image_hw,
                self.config.image_hw
            )));
        }
        Ok(())
    }

    /// Training-mode forward pass with full trace.
    pub fn forward_train(
        &mut self,
        x: &ArrayView4<'_, S>,
        opts: ForwardOpts,
    ) -> Result<(BackboneOut<S>, BackboneTrace<S>)> {
        self.check_input(x)?;
        let (h, stem_conv_t) = self.stem_conv.forward(x);
        let (h, stem_bn_t) = self.stem_bn.forward_train(&h.view(), true);
        let (mut map, stem_mask) = relu(&h.view());
        let mut blocks_t = Vec::new();
        let mut taps = Vec::new();
        for (si, stage) in self.stages.iter_mut().enumerate() {
            let mut stage_t = Vec::new();
            for block in stage.iter_mut() {
                let (next, bt) = block.forward_train(&map.view(), true);
                map = next;
                stage_t.push(bt);
            }
            if opts.taps && si >= 1 {
                taps.push(map.clone());
            }
            blocks_t.push(stage_t);
        }
        let (_, _, ph, pw) = map.dim();
        let features = global_avg_pool(&map.view());
        let (logits, head_t) = self.head.forward(&features.view());
        let bn_obs = if opts.observe_bn {
            self.collect_observations_from(&stem_bn_t, &blocks_t)
        } else {
            Vec::new()
        };
        Ok((
            BackboneOut {
                features,
                logits,
                taps,
                bn_obs,
            },
            BackboneTrace {
                stem_conv: stem_conv_t,
                stem_bn: stem_bn_t,
                stem_mask,
                blocks: blocks_t,
                pooled_hw: (ph, pw),
                head: head_t,
            },
        ))
    }

    /// Eval-mode forward with trace, for frozen models that still need
    /// input gradients or statistics observation.
    pub fn forward_frozen(
        &self,
        x: &ArrayView4<'_, S>,
        opts: ForwardOpts,
    ) -> Result<(BackboneOut<S>, BackboneTrace<S>)> {
        self.check_input(x)?;
        let (h, stem_conv_t) = self.stem_conv.forward(x);
        let (h, stem_bn_t) = self.stem_bn.forward_eval(&h.view(), opts.observe_bn);
        let (mut map, stem_mask) = relu(&h.view());
        let mut blocks_t = Vec::new();
        let mut taps = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            let mut stage_t = Vec::new();
            for block in stage.iter() {
                let (next, bt) = block.forward_frozen(&map.view(), opts.observe_bn);
                map = next;
                stage_t.push(bt);
            }
            if opts.taps && si >= 1 {
                taps.push(map.clone());
            }
            blocks_t.push(stage_t);
        }
        let (_, _, ph, pw) = map.dim();
        let features = global_avg_pool(&map.view());
        let (logits, head_t) = self.head.forward(&features.view());
        let bn_obs = if opts.observe_bn {
            self.collect_observations_from(&stem_bn_t, &blocks_t)
        } else {
            Vec::new()
        };
        Ok((
            BackboneOut {
                features,
                logits,
                taps,
                bn_obs,
            },
            BackboneTrace {
                stem_conv: stem_conv_t,
                stem_bn: stem_bn_t,
                stem_mask,
                blocks: blocks_t,
                pooled_hw: (ph, pw),
                head: head_t,
            },
        ))
    }

    /// Inference without keeping traces: (features, scaled cosine logits).
    pub fn infer(&self, x: &ArrayView4<'_, S>) -> Result<(Array2<S>, Array2<S>)> {
        let (out, _) = self.forward_frozen(x, ForwardOpts::default())?;
        Ok((out.features, out.logits))
    }

    fn collect_observations_from(
        &self,
        stem_bn_t: &BnTrace<S>,
        blocks_t: &[Vec<BlockTrace<S>>],
    ) -> Vec<BnObservation<S>> {
        let mut out = Vec::with_capacity(self.num_bn_layers());
        out.push(
            stem_bn_t
                .observation
                .clone()
                .unwrap_or_else(|| crate::nn::norm::channel_stats(&stem_bn_t.input.view())),
        );
        for (stage, stage_t) in self.stages.iter().zip(blocks_t) {
            for (block, bt) in stage.iter().zip(stage_t) {
                block.collect_observations(bt, &mut out);
            }
        }
        out
    }

    /// Backward pass with gradient injections; returns gradient w.r.t. the
    /// input batch. Parameter grads accumulate only when `accumulate`.
    pub fn backward(
        &mut self,
        trace: &BackboneTrace<S>,
        inj: &InjectedGrads<S>,
        accumulate: bool,
    ) -> Array4<S> {
        // Head and feature injections.
        let mut d_features: Option<Array2<S>> = None;
        if let Some(dl) = &inj.d_logits {
            let df = self.head.backward(&trace.head, &dl.view(), accumulate);
            d_features = Some(df);
        }
        if let Some(df_inj) = &inj.d_features {
            d_features = Some(match d_features {
                Some(mut df) => {
                    df += df_inj;
                    df
                }
                None => df_inj.clone(),
            });
        }
        let feature_dim = self.feature_dim();
        let n = trace.head.fhat.nrows();
        let d_features =
            d_features.unwrap_or_else(|| Array2::<S>::zeros((n, feature_dim)));
        let mut d_map = global_avg_pool_backward(&d_features.view(), trace.pooled_hw);

        // Stages in reverse, with tap and BN-input injections.
        let bn_bases = self.bn_base_indices();
        for si in (0..self.stages.len()).rev() {
            if si >= 1 {
                if let Some(Some(dt)) = inj.d_taps.get(si - 1) {
                    d_map += dt;
                }
            }
            let stage_len = self.stages[si].len();
            for bi in (0..stage_len).rev() {
                let base = bn_bases[si][bi];
                let block = &mut self.stages[si][bi];
                d_map = block.backward(
                    &trace.blocks[si][bi],
                    &d_map,
                    accumulate,
                    &inj.d_bn_inputs,
                    base,
                );
            }
        }

        // Stem.
        let d_map = relu_backward(&trace.stem_mask, &d_map.view());
        let mut d_stem_bn_in = self.stem_bn.backward(&trace.stem_bn, &d_map.view(), accumulate);
        if let Some(Some(inj0)) = inj.d_bn_inputs.first() {
            d_stem_bn_in += inj0;
        }
        self.stem_conv
            .backward(&trace.stem_conv, &d_stem_bn_in.view(), accumulate)
    }

    /// First BN index (graph order) of each block; stem BN occupies index 0.
    fn bn_base_indices(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut next = 1usize;
        for stage in &self.stages {
            let mut bases = Vec::new();
            for block in stage {
                bases.push(next);
                next += block.bn_count();
            }
            out.push(bases);
        }
        out
    }
}

impl<S: Scalar> ParamVisit<S> for Backbone<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        self.stem_conv.visit_params(&join(prefix, "stem_conv"), f);
        self.stem_bn.visit_params(&join(prefix, "stem_bn"), f);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, block) in stage.iter_mut().enumerate() {
                block.visit_params(&join(prefix, &format!("stage{si}.block{bi}")), f);
            }
        }
        self.head.visit_params(&join(prefix, "head"), f);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>)) {
        self.stem_conv.visit_params_ref(&join(prefix, "stem_conv"), f);
        self.stem_bn.visit_params_ref(&join(prefix, "stem_bn"), f);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                block.visit_params_ref(&join(prefix, &format!("stage{si}.block{bi}")), f);
            }
        }
        self.head.visit_params_ref(&join(prefix, "head"), f);
    }
}

impl<S: Scalar> BnSource<S> for Backbone<S> {
    fn bn_layers(&self) -> Vec<(String, &BatchNorm2d<S>)> {
        let mut out: Vec<(String, &BatchNorm2d<S>)> = vec![("stem_bn".into(), &self.stem_bn)];
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, block) in stage.iter().enumerate() {
                out.push((format!("stage{si}.block{bi}.bn1"), &block.bn1));
                out.push((format!("stage{si}.block{bi}.bn2"), &block.bn2));
                if let Some((_, bn)) = &block.down {
                    out.push((format!("stage{si}.block{bi}.down_bn"), bn));
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Weight imprinting and classifier extension
// ---------------------------------------------------------------------------

/// Mean of normalized old-extractor features per new class.
///
/// The result is intentionally not re-normalized; the cosine head
/// normalizes at scoring time. Features with zero norm are skipped with a
/// warning and excluded from the mean.
pub fn imprint_weights<S: Scalar>(
    old_model: &Backbone<S>,
    new_class_data: &[(ClassId, Array4<S>)],
) -> Result<Vec<(ClassId, Array1<S>)>> {
    let mut out = Vec::new();
    for (class, images) in new_class_data {
        if images.shape()[0] == 0 {
            return Err(Error::InvalidConfig(format!(
                "class {class} has no samples to imprint from"
            )));
        }
        let (features, _) = old_model.infer(&images.view())?;
        let dim = features.ncols();
        let mut mean = Array1::<S>::zeros(dim);
        let mut used = 0usize;
        for row in features.rows() {
            let mut sq = S::zero();
            for &v in row.iter() {
                sq += v * v;
            }
            let norm = sq.sqrt();
            if norm <= S::zero() {
                log::warn!("zero-norm feature skipped while imprinting class {class}");
                continue;
            }
            for d in 0..dim {
                mean[d] += row[d] / norm;
            }
            used += 1;
        }
        if used == 0 {
            return Err(Error::InvalidConfig(format!(
                "all features of class {class} had zero norm"
            )));
        }
        mean.mapv_inplace(|v| v / S::from_us(used));
        out.push((*class, mean));
    }
    Ok(out)
}

/// Frozen copy of `old_model` whose head additionally covers the imprinted
/// classes. Old weights and the feature extractor are bit-identical.
pub fn extend_classifier<S: Scalar>(
    old_model: &Backbone<S>,
    imprinted: &[(ClassId, Array1<S>)],
) -> Result<Backbone<S>> {
    let mut extended = old_model.clone();
    crate::nn::param::set_trainable(&mut extended, false);
    if imprinted.is_empty() {
        return Ok(extended);
    }
    let dim = extended.feature_dim();
    let mut weights = Array2::<S>::zeros((imprinted.len(), dim));
    let mut class_ids = Vec::with_capacity(imprinted.len());
    for (r, (class, w)) in imprinted.iter().enumerate() {
        if w.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "imprinted weight for class {class} has dim {} instead of {dim}",
                w.len()
            )));
        }
        class_ids.push(*class);
        weights.row_mut(r).assign(w);
    }
    extended.head.append_block(class_ids, weights, false)?;
    Ok(extended)
}

/// Feature batch of a frozen model: `[N, feature_dim]`.
pub fn extract_features<S: Scalar>(
    model: &Backbone<S>,
    input_batch: &ArrayView4<'_, S>,
) -> Result<Array2<S>> {
    Ok(model.infer(input_batch)?.0)
}
