//! Network definition: a shared convolutional backbone feeding a motion
//! attribute head and a descriptor head, plus the fixed image-based teacher
//! used to supervise the descriptor head, and checkpoint persistence.

mod checkpoint;
mod teacher;

pub use checkpoint::{Checkpoint, CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use teacher::{teacher_forward, teacher_targets, TeacherParams, TEACHER_STRIDE};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{BnMode, BnState, NodeId, Tape, Tensor, TensorError};

/// Spatial reduction of the backbone: three 2x2 poolings.
pub const COARSE_STRIDE: usize = 8;
/// Descriptor dimensionality.
pub const DESC_DIM: usize = 128;
/// Number of motion attribute classes.
pub const MOTION_CLASSES: usize = 3;

// Backbone: 8 conv(3x3, stride 1, pad 1) + BN + ReLU blocks with 2x2 max
// pooling after blocks 1, 3 and 5 (0-based).
const BACKBONE_CHANNELS: [usize; 8] = [64, 64, 64, 64, 128, 128, 128, 128];
const POOL_AFTER: [usize; 3] = [1, 3, 5];
// Both heads: conv(3x3, pad 1) to 256 + BN + ReLU, then a 1x1 projection.
const HEAD_HIDDEN: usize = 256;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input {h}x{w} is not divisible by {stride}; pad to {pad_h}x{pad_w}")]
    BadImageDims {
        h: usize,
        w: usize,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
    },
    #[error("expected a single-channel image, got {0} channels")]
    BadChannels(usize),
}

/// One convolution layer: weight [F, C, kH, kW] and bias [F].
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2dParams {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dParams {
    fn he_init(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
        bias_value: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
        let values: Vec<f64> = (0..cout * cin * k * k).map(|_| normal.sample(rng)).collect();
        Conv2dParams {
            weight: Tensor::new(vec![cout, cin, k, k], values).expect("consistent shape"),
            bias: Tensor::full(vec![cout], bias_value),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Conv + batch norm + ReLU block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub conv: Conv2dParams,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub bn: BnState,
}

impl ConvBlock {
    fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            conv: Conv2dParams::he_init(cin, cout, 3, 1, 1, 0.0, rng),
            gamma: Tensor::full(vec![cout], 1.0),
            beta: Tensor::zeros(vec![cout]),
            bn: BnState::new(cout),
        }
    }
}

/// All trainable parameters and batch-norm state of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct MdNetParams {
    pub backbone: Vec<ConvBlock>,
    pub motion_block: ConvBlock,
    pub motion_out: Conv2dParams,
    pub desc_block: ConvBlock,
    pub desc_out: Conv2dParams,
}

/// Tape node ids of the parameters inserted for one forward pass, in
/// `named_params` order.
#[derive(Debug, Clone)]
pub struct ParamIds {
    pub backbone: Vec<BlockIds>,
    pub motion_block: BlockIds,
    pub motion_out: (NodeId, NodeId),
    pub desc_block: BlockIds,
    pub desc_out: (NodeId, NodeId),
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub weight: NodeId,
    pub bias: NodeId,
    pub gamma: NodeId,
    pub beta: NodeId,
}

impl ParamIds {
    /// Flat id list aligned with [`MdNetParams::named_params`].
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for b in &self.backbone {
            out.extend([b.weight, b.bias, b.gamma, b.beta]);
        }
        out.extend([
            self.motion_block.weight,
            self.motion_block.bias,
            self.motion_block.gamma,
            self.motion_block.beta,
            self.motion_out.0,
            self.motion_out.1,
            self.desc_block.weight,
            self.desc_block.bias,
            self.desc_block.gamma,
            self.desc_block.beta,
            self.desc_out.0,
            self.desc_out.1,
        ]);
        out
    }
}

/// Result of one forward pass on a tape.
pub struct MdNetGraph {
    pub features: NodeId,
    pub motion_probs: NodeId,
    pub descriptors: NodeId,
    pub params: ParamIds,
}

impl MdNetParams {
    /// Fresh network with He-initialized convolutions, deterministic in the
    /// seed.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::with_capacity(BACKBONE_CHANNELS.len());
        let mut cin = 1;
        for &cout in &BACKBONE_CHANNELS {
            backbone.push(ConvBlock::new(cin, cout, &mut rng));
            cin = cout;
        }
        let feat = *BACKBONE_CHANNELS.last().expect("non-empty");
        MdNetParams {
            backbone,
            motion_block: ConvBlock::new(feat, HEAD_HIDDEN, &mut rng),
            motion_out: Conv2dParams::he_init(HEAD_HIDDEN, MOTION_CLASSES, 1, 1, 0, 0.0, &mut rng),
            desc_block: ConvBlock::new(feat, HEAD_HIDDEN, &mut rng),
            desc_out: Conv2dParams::he_init(HEAD_HIDDEN, DESC_DIM, 1, 1, 0, 0.0, &mut rng),
        }
    }

    /// Trainable tensors with their checkpoint names, in canonical order.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.backbone.iter().enumerate() {
            push_block(&mut out, &format!("backbone.{i}"), b);
        }
        push_block(&mut out, "motion.block", &self.motion_block);
        out.push(("motion.out.weight".into(), &self.motion_out.weight));
        out.push(("motion.out.bias".into(), &self.motion_out.bias));
        push_block(&mut out, "desc.block", &self.desc_block);
        out.push(("desc.out.weight".into(), &self.desc_out.weight));
        out.push(("desc.out.bias".into(), &self.desc_out.bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, b) in self.backbone.iter_mut().enumerate() {
            let p = format!("backbone.{i}");
            out.push((format!("{p}.conv.weight"), &mut b.conv.weight));
            out.push((format!("{p}.conv.bias"), &mut b.conv.bias));
            out.push((format!("{p}.bn.gamma"), &mut b.gamma));
            out.push((format!("{p}.bn.beta"), &mut b.beta));
        }
        out.push(("motion.block.conv.weight".into(), &mut self.motion_block.conv.weight));
        out.push(("motion.block.conv.bias".into(), &mut self.motion_block.conv.bias));
        out.push(("motion.block.bn.gamma".into(), &mut self.motion_block.gamma));
        out.push(("motion.block.bn.beta".into(), &mut self.motion_block.beta));
        out.push(("motion.out.weight".into(), &mut self.motion_out.weight));
        out.push(("motion.out.bias".into(), &mut self.motion_out.bias));
        out.push(("desc.block.conv.weight".into(), &mut self.desc_block.conv.weight));
        out.push(("desc.block.conv.bias".into(), &mut self.desc_block.conv.bias));
        out.push(("desc.block.bn.gamma".into(), &mut self.desc_block.gamma));
        out.push(("desc.block.bn.beta".into(), &mut self.desc_block.beta));
        out.push(("desc.out.weight".into(), &mut self.desc_out.weight));
        out.push(("desc.out.bias".into(), &mut self.desc_out.bias));
        out
    }

    /// Batch-norm running statistics as named [C] tensors.
    pub fn named_state(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, b) in self.backbone.iter().enumerate() {
            push_state(&mut out, &format!("backbone.{i}"), &b.bn);
        }
        push_state(&mut out, "motion.block", &self.motion_block.bn);
        push_state(&mut out, "desc.block", &self.desc_block.bn);
        out
    }

    /// Forward pass in training mode: batch statistics are used for
    /// normalization and the running stats are updated in place.
    pub fn forward_train(&mut self, tape: &mut Tape, image: &Tensor) -> Result<MdNetGraph, ModelError> {
        check_image(image, COARSE_STRIDE)?;
        let ids = insert_params(tape, self, true);
        let mut x = tape.leaf(image.clone());
        for (i, blk) in self.backbone.iter_mut().enumerate() {
            let (cs, cp) = (blk.conv.stride, blk.conv.padding);
            x = apply_block(tape, x, &ids.backbone[i], cs, cp, BnMode::Train(&mut blk.bn))?;
            if POOL_AFTER.contains(&i) {
                x = tape.max_pool_2x2(x)?;
            }
        }
        let features = x;
        let (ms, mp) = (self.motion_block.conv.stride, self.motion_block.conv.padding);
        let m = apply_block(tape, features, &ids.motion_block, ms, mp, BnMode::Train(&mut self.motion_block.bn))?;
        let logits = tape.conv2d(m, ids.motion_out.0, ids.motion_out.1, 1, 0)?;
        let motion_probs = tape.softmax_channel(logits)?;
        let (ds, dp) = (self.desc_block.conv.stride, self.desc_block.conv.padding);
        let d = apply_block(tape, features, &ids.desc_block, ds, dp, BnMode::Train(&mut self.desc_block.bn))?;
        let descriptors = tape.conv2d(d, ids.desc_out.0, ids.desc_out.1, 1, 0)?;
        Ok(MdNetGraph {
            features,
            motion_probs,
            descriptors,
            params: ids,
        })
    }

    /// Forward pass in eval mode: running statistics only, no mutation.
    pub fn forward_eval(&self, tape: &mut Tape, image: &Tensor) -> Result<MdNetGraph, ModelError> {
        check_image(image, COARSE_STRIDE)?;
        let ids = insert_params(tape, self, false);
        let mut x = tape.leaf(image.clone());
        for (i, blk) in self.backbone.iter().enumerate() {
            x = apply_block(tape, x, &ids.backbone[i], blk.conv.stride, blk.conv.padding, BnMode::Eval(&blk.bn))?;
            if POOL_AFTER.contains(&i) {
                x = tape.max_pool_2x2(x)?;
            }
        }
        let features = x;
        let m = apply_block(
            tape,
            features,
            &ids.motion_block,
            self.motion_block.conv.stride,
            self.motion_block.conv.padding,
            BnMode::Eval(&self.motion_block.bn),
        )?;
        let logits = tape.conv2d(m, ids.motion_out.0, ids.motion_out.1, 1, 0)?;
        let motion_probs = tape.softmax_channel(logits)?;
        let d = apply_block(
            tape,
            features,
            &ids.desc_block,
            self.desc_block.conv.stride,
            self.desc_block.conv.padding,
            BnMode::Eval(&self.desc_block.bn),
        )?;
        let descriptors = tape.conv2d(d, ids.desc_out.0, ids.desc_out.1, 1, 0)?;
        Ok(MdNetGraph {
            features,
            motion_probs,
            descriptors,
            params: ids,
        })
    }

    /// Eval-mode inference: per-cell motion probabilities [N, 3, H/8, W/8]
    /// and raw descriptors [N, 128, H/8, W/8].
    pub fn infer(&self, image: &Tensor) -> Result<(Tensor, Tensor), ModelError> {
        let mut tape = Tape::new();
        let g = self.forward_eval(&mut tape, image)?;
        Ok((tape.value(g.motion_probs).clone(), tape.value(g.descriptors).clone()))
    }
}

fn push_block<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, b: &'a ConvBlock) {
    out.push((format!("{prefix}.conv.weight"), &b.conv.weight));
    out.push((format!("{prefix}.conv.bias"), &b.conv.bias));
    out.push((format!("{prefix}.bn.gamma"), &b.gamma));
    out.push((format!("{prefix}.bn.beta"), &b.beta));
}

fn push_state(out: &mut Vec<(String, Tensor)>, prefix: &str, bn: &BnState) {
    let c = bn.running_mean.len();
    out.push((
        format!("{prefix}.bn.running_mean"),
        Tensor::new(vec![c], bn.running_mean.clone()).expect("consistent"),
    ));
    out.push((
        format!("{prefix}.bn.running_var"),
        Tensor::new(vec![c], bn.running_var.clone()).expect("consistent"),
    ));
}

fn insert_block(tape: &mut Tape, b: &ConvBlock, requires_grad: bool) -> BlockIds {
    let mut ins = |t: &Tensor| {
        let mut t = t.clone();
        t.set_requires_grad(requires_grad);
        tape.leaf(t)
    };
    BlockIds {
        weight: ins(&b.conv.weight),
        bias: ins(&b.conv.bias),
        gamma: ins(&b.gamma),
        beta: ins(&b.beta),
    }
}

fn insert_conv(tape: &mut Tape, c: &Conv2dParams, requires_grad: bool) -> (NodeId, NodeId) {
    let mut ins = |t: &Tensor| {
        let mut t = t.clone();
        t.set_requires_grad(requires_grad);
        tape.leaf(t)
    };
    (ins(&c.weight), ins(&c.bias))
}

fn insert_params(tape: &mut Tape, p: &MdNetParams, requires_grad: bool) -> ParamIds {
    ParamIds {
        backbone: p.backbone.iter().map(|b| insert_block(tape, b, requires_grad)).collect(),
        motion_block: insert_block(tape, &p.motion_block, requires_grad),
        motion_out: insert_conv(tape, &p.motion_out, requires_grad),
        desc_block: insert_block(tape, &p.desc_block, requires_grad),
        desc_out: insert_conv(tape, &p.desc_out, requires_grad),
    }
}

fn apply_block(
    tape: &mut Tape,
    x: NodeId,
    ids: &BlockIds,
    stride: usize,
    padding: usize,
    bn: BnMode,
) -> Result<NodeId, ModelError> {
    let c = tape.conv2d(x, ids.weight, ids.bias, stride, padding)?;
    let n = tape.batch_norm(c, ids.gamma, ids.beta, bn)?;
    Ok(tape.relu(n))
}

pub(crate) fn check_image(image: &Tensor, stride: usize) -> Result<(), ModelError> {
    let (_, c, h, w) = image.dims4("network input")?;
    if c != 1 {
        return Err(ModelError::BadChannels(c));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(ModelError::BadImageDims {
            h,
            w,
            stride,
            pad_h: h.div_ceil(stride) * stride,
            pad_w: w.div_ceil(stride) * stride,
        });
    }
    Ok(())
}

/// Shared feature maps at 1/8 resolution for a [N, 1, H, W] image.
pub fn backbone_forward(params: &MdNetParams, image: &Tensor) -> Result<Tensor, ModelError> {
    check_image(image, COARSE_STRIDE)?;
    let mut tape = Tape::new();
    let mut x = tape.leaf(image.clone());
    for (i, blk) in params.backbone.iter().enumerate() {
        let ids = insert_block(&mut tape, blk, false);
        x = apply_block(&mut tape, x, &ids, blk.conv.stride, blk.conv.padding, BnMode::Eval(&blk.bn))?;
        if POOL_AFTER.contains(&i) {
            x = tape.max_pool_2x2(x)?;
        }
    }
    Ok(tape.value(x).clone())
}

/// Per-cell motion attribute probabilities from backbone features.
pub fn motion_head_forward(params: &MdNetParams, features: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let ids = insert_block(&mut tape, &params.motion_block, false);
    let m = apply_block(
        &mut tape,
        x,
        &ids,
        params.motion_block.conv.stride,
        params.motion_block.conv.padding,
        BnMode::Eval(&params.motion_block.bn),
    )?;
    let (w, b) = insert_conv(&mut tape, &params.motion_out, false);
    let logits = tape.conv2d(m, w, b, 1, 0)?;
    let probs = tape.softmax_channel(logits)?;
    Ok(tape.value(probs).clone())
}

/// Raw (unnormalized) dense descriptors from backbone features;
/// L2 normalization happens when descriptors are sampled at keypoints.
pub fn desc_head_forward(params: &MdNetParams, features: &Tensor) -> Result<Tensor, ModelError> {
    let mut tape = Tape::new();
    let x = tape.leaf(features.clone());
    let ids = insert_block(&mut tape, &params.desc_block, false);
    let d = apply_block(
        &mut tape,
        x,
        &ids,
        params.desc_block.conv.stride,
        params.desc_block.conv.padding,
        BnMode::Eval(&params.desc_block.bn),
    )?;
    let (w, b) = insert_conv(&mut tape, &params.desc_out, false);
    let out = tape.conv2d(d, w, b, 1, 0)?;
    Ok(tape.value(out).clone())
}
