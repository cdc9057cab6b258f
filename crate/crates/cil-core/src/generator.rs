//! Label-conditioned image generator trained from scratch against a frozen
//! classifier, with no access to real data.
//!
//! The network is a small U: an encoder at noise resolution with one
//! downsampled bottom level, a skip concatenation back at noise resolution,
//! then bilinear-upsampling decoder blocks out to the teacher's input size.
//! Every convolution uses reflection padding and is followed by conditional
//! batch normalization and rectification, except the terminal convolution
//! which squashes through tanh.

use crate::backbone::{Backbone, BnStatistics, ForwardOpts, InjectedGrads};
use crate::error::{Error, Result};
use crate::losses::{bns_input_grad, bns_loss, ce_from_logits_with_grad};
use crate::nn::conv::Conv2dTrace;
use crate::nn::norm::CbnTrace;
use crate::nn::ops::{
    avg_pool2, avg_pool2_backward, concat_channels, relu, relu_backward, split_channels, tanh,
    tanh_backward, upsample_bilinear2, upsample_bilinear2_backward,
};
use crate::nn::param::{join, Param, ParamVisit};
use crate::nn::{init, Adam, ConditionalBn, Conv2d, PadMode};
use crate::protocol::ClassId;
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView4};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    /// Noise tensor is `noise_hw x noise_hw x noise_channels`, standard normal.
    pub noise_hw: usize,
    pub noise_channels: usize,
    pub out_hw: usize,
    pub out_channels: usize,
    /// Encoder widths: at noise resolution, then at the downsampled bottom.
    pub enc_channels: [usize; 2],
    /// Decoder widths from noise resolution up to the output resolution;
    /// must have `1 + log2(out_hw / noise_hw)` entries.
    pub dec_channels: Vec<usize>,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            noise_hw: 4,
            noise_channels: 64,
            out_hw: 32,
            out_channels: 3,
            enc_channels: [24, 32],
            dec_channels: vec![24, 16, 12, 8],
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl GeneratorConfig {
    pub fn upsample_steps(&self) -> usize {
        debug_assert!(self.out_hw % self.noise_hw == 0);
        (self.out_hw / self.noise_hw).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_hw < 2 {
            return Err(Error::InvalidConfig("noise grid must be at least 2x2".into()));
        }
        if self.out_hw % self.noise_hw != 0 || !(self.out_hw / self.noise_hw).is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "output size {} must be a power-of-two multiple of noise size {}",
                self.out_hw, self.noise_hw
            )));
        }
        let want = 1 + self.upsample_steps();
        if self.dec_channels.len() != want {
            return Err(Error::InvalidConfig(format!(
                "decoder needs {want} blocks for {} -> {}, got {}",
                self.noise_hw,
                self.out_hw,
                self.dec_channels.len()
            )));
        }
        Ok(())
    }
}

struct GenBlock<S> {
    conv: Conv2d<S>,
    cbn: ConditionalBn<S>,
}

struct GenBlockTrace<S> {
    conv: Conv2dTrace<S>,
    cbn: CbnTrace<S>,
    mask: Array4<bool>,
}

impl<S: Scalar> GenBlock<S> {
    fn new<R: Rng>(
        class_count: usize,
        in_ch: usize,
        out_ch: usize,
        momentum: S,
        eps: S,
        rng: &mut R,
    ) -> Self {
        Self {
            conv: init::he_conv(in_ch, out_ch, 3, 1, 1, PadMode::Reflect, false, rng),
            cbn: ConditionalBn::new(class_count, out_ch, momentum, eps),
        }
    }

    fn forward(&mut self, x: &ArrayView4<'_, S>, labels: &[usize]) -> (Array4<S>, GenBlockTrace<S>) {
        let (h, conv_t) = self.conv.forward(x);
        let (h, cbn_t) = self.cbn.forward_train(&h.view(), labels);
        let (y, mask) = relu(&h.view());
        (
            y,
            GenBlockTrace {
                conv: conv_t,
                cbn: cbn_t,
                mask,
            },
        )
    }

    fn backward(
        &mut self,
        trace: &GenBlockTrace<S>,
        dy: &ArrayView4<'_, S>,
        accumulate: bool,
    ) -> Array4<S> {
        let d = relu_backward(&trace.mask, dy);
        let d = self.cbn.backward(&trace.cbn, &d.view(), accumulate);
        self.conv.backward(&trace.conv, &d.view(), accumulate)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        self.conv.visit_params(&join(prefix, "conv"), f);
        self.cbn.visit_params(&join(prefix, "cbn"), f);
    }

    fn visit_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>)) {
        self.conv.visit_params_ref(&join(prefix, "conv"), f);
        self.cbn.visit_params_ref(&join(prefix, "cbn"), f);
    }
}

/// Conditional generator over a designated class set.
pub struct ConditionalGenerator<S> {
    pub config: GeneratorConfig,
    /// Classes this generator replays, in conditioning-table order.
    pub class_ids: Vec<ClassId>,
    enc0: GenBlock<S>,
    enc1: GenBlock<S>,
    dec: Vec<GenBlock<S>>,
    out_conv: Conv2d<S>,
}

pub struct GeneratorTrace<S> {
    enc0: GenBlockTrace<S>,
    enc1: GenBlockTrace<S>,
    dec: Vec<GenBlockTrace<S>>,
    out_conv: Conv2dTrace<S>,
    /// tanh output, reused in its backward.
    output: Array4<S>,
    enc0_channels: usize,
}

impl<S: Scalar> ConditionalGenerator<S> {
    pub fn new<R: Rng>(config: GeneratorConfig, class_ids: Vec<ClassId>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if class_ids.is_empty() {
            return Err(Error::InvalidConfig("generator needs at least one class".into()));
        }
        let k = class_ids.len();
        let mom = S::from_f(config.bn_momentum);
        let eps = S::from_f(config.bn_eps);
        let enc0 = GenBlock::new(k, config.noise_channels, config.enc_channels[0], mom, eps, rng);
        let enc1 = GenBlock::new(k, config.enc_channels[0], config.enc_channels[1], mom, eps, rng);
        let mut dec = Vec::new();
        let mut in_ch = config.enc_channels[1] + config.enc_channels[0]; // skip concat
        for &out_ch in &config.dec_channels {
            dec.push(GenBlock::new(k, in_ch, out_ch, mom, eps, rng));
            in_ch = out_ch;
        }
        let out_conv = init::he_conv(
            in_ch,
            config.out_channels,
            3,
            1,
            1,
            PadMode::Reflect,
            true,
            rng,
        );
        Ok(Self {
            config,
            class_ids,
            enc0,
            enc1,
            dec,
            out_conv,
        })
    }

    pub fn class_count(&self) -> usize {
        self.class_ids.len()
    }

    /// Conditioning-table index of a global class id.
    pub fn local_index(&self, class: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class)
    }

    /// Synthesizes a batch from noise and per-sample conditioning labels
    /// (local indices). Output is squashed to (-1, 1).
    pub fn forward(
        &mut self,
        noise: &ArrayView4<'_, S>,
        labels: &[usize],
    ) -> Result<(Array4<S>, GeneratorTrace<S>)> {
        let (n, c, h, w) = noise.dim();
        if c != self.config.noise_channels || h != self.config.noise_hw || w != self.config.noise_hw
        {
            return Err(Error::ShapeMismatch(format!(
                "noise {:?} does not match configured {}x{}x{}",
                noise.dim(),
                self.config.noise_channels,
                self.config.noise_hw,
                self.config.noise_hw
            )));
        }
        if n != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{n} noise samples for {} labels",
                labels.len()
            )));
        }
        let (e0, e0_t) = self.enc0.forward(noise, labels);
        let pooled = avg_pool2(&e0.view());
        let (e1, e1_t) = self.enc1.forward(&pooled.view(), labels);
        let up = upsample_bilinear2(&e1.view());
        debug_assert_eq!(up.dim().2, e0.dim().2, "skip spatial sizes must agree");
        let mut map = concat_channels(&up.view(), &e0.view());
        let mut dec_t = Vec::new();
        for (i, block) in self.dec.iter_mut().enumerate() {
            if i > 0 {
                map = upsample_bilinear2(&map.view());
            }
            let (next, bt) = block.forward(&map.view(), labels);
            map = next;
            dec_t.push(bt);
        }
        let (raw, out_conv_t) = self.out_conv.forward(&map.view());
        let images = tanh(&raw.view());
        let trace = GeneratorTrace {
            enc0: e0_t,
            enc1: e1_t,
            dec: dec_t,
            out_conv: out_conv_t,
            output: images.clone(),
            enc0_channels: e0.dim().1,
        };
        Ok((images, trace))
    }

    /// Backpropagates an image-space gradient into the generator parameters;
    /// returns the gradient w.r.t. the input noise.
    pub fn backward(
        &mut self,
        trace: &GeneratorTrace<S>,
        d_images: &ArrayView4<'_, S>,
        accumulate: bool,
    ) -> Array4<S> {
        let d = tanh_backward(&trace.output.view(), d_images);
        let mut d = self.out_conv.backward(&trace.out_conv, &d.view(), accumulate);
        for (i, block) in self.dec.iter_mut().enumerate().rev() {
            d = block.backward(&trace.dec[i], &d.view(), accumulate);
            if i > 0 {
                d = upsample_bilinear2_backward(&d.view());
            }
        }
        let up_channels = d.dim().1 - trace.enc0_channels;
        let (d_up, mut d_e0) = split_channels(&d.view(), up_channels);
        let d_e1 = upsample_bilinear2_backward(&d_up.view());
        let d_pooled = self.enc1.backward(&trace.enc1, &d_e1.view(), accumulate);
        d_e0 += &avg_pool2_backward(&d_pooled.view());
        self.enc0.backward(&trace.enc0, &d_e0.view(), accumulate)
    }
}

impl<S: Scalar> ParamVisit<S> for ConditionalGenerator<S> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<S>)) {
        self.enc0.visit(&join(prefix, "enc0"), f);
        self.enc1.visit(&join(prefix, "enc1"), f);
        for (i, b) in self.dec.iter_mut().enumerate() {
            b.visit(&join(prefix, &format!("dec{i}")), f);
        }
        self.out_conv.visit_params(&join(prefix, "out_conv"), f);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<S>)) {
        self.enc0.visit_ref(&join(prefix, "enc0"), f);
        self.enc1.visit_ref(&join(prefix, "enc1"), f);
        for (i, b) in self.dec.iter().enumerate() {
            b.visit_ref(&join(prefix, &format!("dec{i}")), f);
        }
        self.out_conv.visit_params_ref(&join(prefix, "out_conv"), f);
    }
}

/// Draws i.i.d. labels from a distribution over a designated class set and
/// standard-normal noise grids.
pub struct NoiseLabelSampler {
    pub class_ids: Vec<ClassId>,
    rng: ChaCha12Rng,
}

impl NoiseLabelSampler {
    /// Uniform label distribution over `class_ids`.
    pub fn uniform(class_ids: Vec<ClassId>, seed: u64) -> Self {
        Self {
            class_ids,
            rng: crate::util::seeded_rng(seed, &[0x5a3b]),
        }
    }

    /// Returns (noise, local label indices, global class ids). Noise is
    /// fresh on every call.
    pub fn draw<S: Scalar>(
        &mut self,
        batch: usize,
        noise_channels: usize,
        noise_hw: usize,
    ) -> (Array4<S>, Vec<usize>, Vec<ClassId>) {
        let mut local = Vec::with_capacity(batch);
        let mut global = Vec::with_capacity(batch);
        for _ in 0..batch {
            let k = self.rng.random_range(0..self.class_ids.len());
            local.push(k);
            global.push(self.class_ids[k]);
        }
        let noise = Array4::from_shape_simple_fn((batch, noise_channels, noise_hw, noise_hw), || {
            init::normal::<S, _>(&mut self.rng, 1.0)
        });
        (noise, local, global)
    }
}

/// Synthesizes `batch_size` labeled samples: fresh noise, labels from the
/// sampler's distribution. Returns images plus the fed (global) labels.
pub fn sample<S: Scalar>(
    generator: &mut ConditionalGenerator<S>,
    batch_size: usize,
    sampler: &mut NoiseLabelSampler,
) -> Result<(Array4<S>, Vec<ClassId>)> {
    for c in &sampler.class_ids {
        if generator.local_index(*c).is_none() {
            return Err(Error::ClassSet(format!(
                "sampler class {c} outside the generator's class set"
            )));
        }
    }
    let (noise, _, global) = sampler.draw::<S>(
        batch_size,
        generator.config.noise_channels,
        generator.config.noise_hw,
    );
    let local: Vec<usize> = global
        .iter()
        .map(|c| generator.local_index(*c).expect("checked above"))
        .collect();
    let (images, _) = generator.forward(&noise.view(), &local)?;
    Ok((images, global))
}

/// Computes the zero-shot objective (teacher CE + statistics matching) on
/// one fixed noise/label batch and accumulates generator gradients.
///
/// The teacher runs in inference mode; only its BN-input batch statistics
/// are observed. Teacher parameters receive no gradient.
#[allow(clippy::too_many_arguments)]
pub fn generator_losses_and_grads<S: Scalar>(
    generator: &mut ConditionalGenerator<S>,
    teacher: &mut Backbone<S>,
    teacher_stats: &BnStatistics<S>,
    noise: &Array4<S>,
    local_labels: &[usize],
    teacher_cols: &[usize],
    use_ce: bool,
    use_bns: bool,
    accumulate: bool,
) -> Result<(S, S)> {
    let (images, gen_trace) = generator.forward(&noise.view(), local_labels)?;
    let (out, teacher_trace) = teacher.forward_frozen(
        &images.view(),
        ForwardOpts {
            observe_bn: true,
            taps: false,
        },
    )?;

    let (ce, d_logits) = ce_from_logits_with_grad(&out.logits.view(), teacher_cols)?;
    let bns = bns_loss(teacher_stats, &out.bn_obs)?;

    let mut inj = InjectedGrads::default();
    if use_ce {
        inj.d_logits = Some(d_logits);
    }
    if use_bns {
        let bn_inputs = teacher_trace.bn_inputs();
        let mut d_bn = Vec::with_capacity(bn_inputs.len());
        for (l, x) in bn_inputs.iter().enumerate() {
            let rec = &teacher_stats.records[l];
            d_bn.push(Some(bns_input_grad(
                &x.view(),
                &out.bn_obs[l],
                &rec.means.view(),
                &rec.variances.view(),
            )));
        }
        inj.d_bn_inputs = d_bn;
    }
    let d_images = teacher.backward(&teacher_trace, &inj, false);
    generator.backward(&gen_trace, &d_images.view(), accumulate);
    Ok((ce, bns))
}

/// Owns one generator's training loop state: optimizer, sampler, captured
/// teacher statistics and the update counter that backs the one-update-per-
/// consuming-batch cadence.
pub struct GeneratorTrainer<S> {
    pub generator: ConditionalGenerator<S>,
    pub sampler: NoiseLabelSampler,
    pub stats: BnStatistics<S>,
    pub optimizer: Adam<S>,
    pub batch_size: usize,
    pub use_ce: bool,
    pub use_bns: bool,
    pub updates: u64,
    pub last_ce: f64,
    pub last_bns: f64,
}

impl<S: Scalar> GeneratorTrainer<S> {
    pub fn new(
        generator: ConditionalGenerator<S>,
        teacher: &Backbone<S>,
        seed: u64,
        batch_size: usize,
        lr: f64,
        adam_momentum: f64,
    ) -> Result<Self> {
        let stats = crate::backbone::capture_bn_statistics(teacher)?;
        let sampler = NoiseLabelSampler::uniform(generator.class_ids.clone(), seed);
        Ok(Self {
            generator,
            sampler,
            stats,
            optimizer: Adam::new(S::from_f(lr), S::from_f(adam_momentum)),
            batch_size,
            use_ce: true,
            use_bns: true,
            updates: 0,
            last_ce: 0.0,
            last_bns: 0.0,
        })
    }

    /// One gradient step on the generator against the frozen teacher.
    pub fn step(&mut self, teacher: &mut Backbone<S>) -> Result<(S, S)> {
        let (noise, local, global) = self.sampler.draw::<S>(
            self.batch_size,
            self.generator.config.noise_channels,
            self.generator.config.noise_hw,
        );
        let cols: Result<Vec<usize>> = global
            .iter()
            .map(|c| {
                teacher.head.column_of(*c).ok_or_else(|| {
                    Error::ClassSet(format!("class {c} missing from teacher head"))
                })
            })
            .collect();
        let cols = cols?;
        crate::nn::param::zero_grads(&mut self.generator);
        let (ce, bns) = generator_losses_and_grads(
            &mut self.generator,
            teacher,
            &self.stats,
            &noise,
            &local,
            &cols,
            self.use_ce,
            self.use_bns,
            true,
        )?;
        self.optimizer.step(&mut self.generator);
        self.updates += 1;
        self.last_ce = ce.as_f64();
        self.last_bns = bns.as_f64();
        Ok((ce, bns))
    }

    /// Replay samples drawn after the most recent update.
    pub fn draw_samples(&mut self, batch: usize) -> Result<(Array4<S>, Vec<ClassId>)> {
        sample(&mut self.generator, batch, &mut self.sampler)
    }

    /// Fraction of fresh samples whose teacher argmax matches the fed label.
    pub fn teacher_agreement(
        &mut self,
        teacher: &Backbone<S>,
        batches: usize,
    ) -> Result<f64> {
        let head_classes = teacher.head.class_ids();
        let mut hit = 0usize;
        let mut total = 0usize;
        for _ in 0..batches {
            let (images, fed) = self.draw_samples(self.batch_size)?;
            let (_, logits) = teacher.infer(&images.view())?;
            for (row, fed_class) in logits.rows().into_iter().zip(&fed) {
                let mut best = 0usize;
                let mut best_v = S::neg_infinity();
                for (k, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                if head_classes[best] == *fed_class {
                    hit += 1;
                }
                total += 1;
            }
        }
        Ok(hit as f64 / total as f64)
    }
}
