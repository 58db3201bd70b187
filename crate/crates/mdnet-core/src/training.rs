//! Training: inverse-frequency class weights, the re-weighted cross-entropy
//! motion loss, the distillation MSE, their weighted combination, the
//! learning-rate schedule and the epoch loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{adam_step, AdamState, NodeId, Tape, Tensor, TensorError};
use crate::dataset::{class_histogram, MotionLabelGrid, Sample};
use crate::metrics::{argmax_labels, ConfusionMatrix};
use crate::model::{teacher_forward, teacher_targets, MdNetParams, ModelError, TeacherParams};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("class {class} has zero cells; merge it into another class or drop it")]
    EmptyClass { class: usize },
    #[error("loss became non-finite at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("samples {a} and {b} differ in size; batches need uniform dims")]
    MixedDims { a: String, b: String },
    #[error("targets are missing or every cell is ignored")]
    NoTargets,
}

/// Per-class loss weights, inversely proportional to class frequency and
/// normalized to sum 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassWeights {
    w: [f64; 3],
}

impl ClassWeights {
    pub fn as_array(&self) -> [f64; 3] {
        self.w
    }
}

/// Weights that reduce the re-weighted loss to the plain cross entropy.
pub const UNIFORM_WEIGHTS: [f64; 3] = [1.0, 1.0, 1.0];

/// w_j = (1/N_j) / sum_k (1/N_k). Every count must be positive.
pub fn class_weights(counts: [u64; 3]) -> Result<ClassWeights, TrainError> {
    if let Some(class) = counts.iter().position(|&c| c == 0) {
        return Err(TrainError::EmptyClass { class });
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c as f64).collect();
    let sum: f64 = inv.iter().sum();
    Ok(ClassWeights {
        w: [inv[0] / sum, inv[1] / sum, inv[2] / sum],
    })
}

/// Training configuration with the published defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub batch_size: usize,
    /// Initial learning rate l0.
    pub l0: f64,
    /// Total number of epochs E.
    pub epochs: usize,
    /// Decay base b of the schedule l0 * b^(e/E).
    pub b: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_m: 1.0,
            lambda_d: 1.0,
            batch_size: 16,
            l0: 0.01,
            epochs: 100,
            b: 0.01,
            weight_decay: 1e-6,
            seed: 0,
        }
    }
}

/// l_e = l0 * b^(e/E), constant within an epoch.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.l0 * cfg.b.powf(epoch as f64 / cfg.epochs as f64)
}

/// Flatten batch label grids into the per-location class array the tape op
/// consumes (255 = ignore).
fn flatten_targets(targets: &[&MotionLabelGrid]) -> Vec<u8> {
    let mut out = Vec::new();
    for g in targets {
        for cell in g.cells() {
            out.push(cell.index().map(|i| i as u8).unwrap_or(255));
        }
    }
    out
}

/// Re-weighted cross entropy over probability maps [N, 3, h, w], averaged
/// over non-ignored cells. With unit weights this is the plain cross
/// entropy; pass [`ClassWeights::as_array`] for the re-weighted version.
pub fn motion_loss_node(
    tape: &mut Tape,
    probs: NodeId,
    targets: &[&MotionLabelGrid],
    weights: [f64; 3],
) -> Result<NodeId, TrainError> {
    let flat = flatten_targets(targets);
    Ok(tape.masked_nll(probs, flat, weights.to_vec())?)
}

/// Convenience scalar form of [`motion_loss_node`].
pub fn motion_loss(
    probs: &Tensor,
    targets: &[&MotionLabelGrid],
    weights: [f64; 3],
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let p = tape.leaf(probs.clone());
    let l = motion_loss_node(&mut tape, p, targets, weights)?;
    Ok(tape.scalar(l))
}

/// Distillation loss: per-location mean squared error over the 128
/// descriptor dimensions, averaged over locations.
pub fn distill_loss_node(
    tape: &mut Tape,
    student: NodeId,
    targets: &Tensor,
) -> Result<NodeId, TrainError> {
    Ok(tape.pointwise_mse(student, targets)?)
}

/// Convenience scalar form of [`distill_loss_node`].
pub fn distill_loss(student: &Tensor, targets: &Tensor) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let s = tape.leaf(student.clone());
    let l = distill_loss_node(&mut tape, s, targets)?;
    Ok(tape.scalar(l))
}

/// lambda_M * l_m + lambda_D * l_d.
pub fn total_loss_node(
    tape: &mut Tape,
    l_m: NodeId,
    l_d: NodeId,
    cfg: &TrainConfig,
) -> Result<NodeId, TrainError> {
    Ok(tape.add_scaled(l_m, cfg.lambda_m, l_d, cfg.lambda_d)?)
}

pub fn total_loss(l_m: f64, l_d: f64, cfg: &TrainConfig) -> f64 {
    cfg.lambda_m * l_m + cfg.lambda_d * l_d
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub motion: f64,
    pub distill: f64,
}

/// `epoch step lr loss_total loss_m loss_d` per line.
pub fn format_loss_log(history: &[LossRecord]) -> String {
    let mut out = String::new();
    for r in history {
        out.push_str(&format!(
            "{} {} {} {} {} {}\n",
            r.epoch, r.step, r.lr, r.total, r.motion, r.distill
        ));
    }
    out
}

pub struct TrainOutcome {
    pub params: MdNetParams,
    pub history: Vec<LossRecord>,
    pub final_accuracy: f64,
}

/// Train the network against the fixed teacher. Deterministic for a fixed
/// seed: initialization, batch order and every update are seeded. Class
/// weights come from the dataset histogram; if a class is absent from the
/// training labels the loss falls back to uniform weights.
pub fn train(
    samples: &[Sample],
    teacher: &TeacherParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    for s in &samples[1..] {
        if (s.height, s.width) != (samples[0].height, samples[0].width) {
            return Err(TrainError::MixedDims {
                a: samples[0].name.clone(),
                b: s.name.clone(),
            });
        }
    }

    let weights = match class_weights(class_histogram(samples).map_err(|_| TrainError::NoTargets)?) {
        Ok(w) => w.as_array(),
        Err(TrainError::EmptyClass { .. }) => UNIFORM_WEIGHTS,
        Err(e) => return Err(e),
    };

    // The teacher is fixed, so its targets per sample never change; compute
    // them once up front.
    let mut targets_per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let image = Tensor::new(
            vec![1, 1, s.height, s.width],
            s.image.values().to_vec(),
        )?;
        let map = teacher_forward(teacher, &image)?;
        targets_per_sample.push(teacher_targets(&map)?);
    }

    let mut params = MdNetParams::seeded(cfg.seed);
    let lens: Vec<usize> = params.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut adam = AdamState::new(&lens, cfg.weight_decay);

    let batch = cfg.batch_size.max(1).min(samples.len());
    let mut history = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);

        for chunk in order.chunks(batch) {
            let images: Vec<&Tensor> = chunk.iter().map(|&i| &samples[i].image).collect();
            let batch_images = Tensor::stack(&images)?;
            let grids: Vec<&MotionLabelGrid> = chunk.iter().map(|&i| &samples[i].labels).collect();
            let t_refs: Vec<&Tensor> = chunk.iter().map(|&i| &targets_per_sample[i]).collect();
            let t_slices: Vec<Tensor> = t_refs
                .iter()
                .map(|t| t.batch_slice(0))
                .collect::<Result<_, _>>()?;
            let batch_targets = Tensor::stack(&t_slices.iter().collect::<Vec<_>>())?;

            let mut tape = Tape::new();
            let graph = params.forward_train(&mut tape, &batch_images)?;
            let l_m = motion_loss_node(&mut tape, graph.motion_probs, &grids, weights)?;
            let l_d = distill_loss_node(&mut tape, graph.descriptors, &batch_targets)?;
            let l = total_loss_node(&mut tape, l_m, l_d, cfg)?;
            let (lm_v, ld_v, l_v) = (tape.scalar(l_m), tape.scalar(l_d), tape.scalar(l));
            if !l_v.is_finite() {
                return Err(TrainError::Diverged { epoch, step });
            }
            tape.backward(l)?;

            let ids = graph.params.flat();
            let grads: Vec<Vec<f64>> = ids
                .iter()
                .map(|&id| {
                    tape.grad(id)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; tape.value(id).len()])
                })
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            let mut named = params.named_params_mut();
            let mut tensors: Vec<&mut Tensor> = named.iter_mut().map(|(_, t)| &mut **t).collect();
            adam_step(&mut tensors, &grad_refs, &mut adam, lr)?;

            history.push(LossRecord {
                epoch,
                step,
                lr,
                total: l_v,
                motion: lm_v,
                distill: ld_v,
            });
            step += 1;
        }
    }

    let final_accuracy = coarse_accuracy(&params, samples)?;
    Ok(TrainOutcome {
        params,
        history,
        final_accuracy,
    })
}

/// Eval-mode pixel accuracy of the motion head on the coarse grid.
pub fn coarse_accuracy(params: &MdNetParams, samples: &[Sample]) -> Result<f64, TrainError> {
    let mut cm = ConfusionMatrix::new();
    for s in samples {
        let image = Tensor::new(vec![1, 1, s.height, s.width], s.image.values().to_vec())?;
        let (probs, _) = params.infer(&image)?;
        let pred = argmax_labels(&probs).map_err(|_| TrainError::NoTargets)?;
        cm.accumulate(&pred, &s.labels).map_err(|_| TrainError::NoTargets)?;
    }
    cm.pixel_accuracy().map_err(|_| TrainError::NoTargets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_sample, MotionAttribute};

    #[test]
    fn class_weights_formula() {
        let w = class_weights([10, 10, 10]).unwrap().as_array();
        for v in w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let w = class_weights([1, 1, 2]).unwrap().as_array();
        assert!((w[0] - 0.4).abs() < 1e-15);
        assert!((w[1] - 0.4).abs() < 1e-15);
        assert!((w[2] - 0.2).abs() < 1e-15);

        // published proportions 2.7 / 35.8 / 61.5 percent
        let w = class_weights([27, 358, 615]).unwrap().as_array();
        assert!((w[0] - 0.8934).abs() < 1e-4, "{w:?}");
        assert!((w[1] - 0.0674).abs() < 1e-4);
        assert!((w[2] - 0.0392).abs() < 1e-4);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        assert!(matches!(
            class_weights([5, 0, 2]),
            Err(TrainError::EmptyClass { class: 1 })
        ));
    }

    #[test]
    fn class_weights_scale_invariant() {
        let a = class_weights([3, 7, 11]).unwrap().as_array();
        let b = class_weights([300, 700, 1100]).unwrap().as_array();
        for i in 0..3 {
            assert!((a[i] - b[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn lr_schedule_hits_published_points() {
        let cfg = TrainConfig::default();
        assert!((lr_at_epoch(0, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_at_epoch(50, &cfg) - 0.001).abs() < 1e-15);
        assert!((lr_at_epoch(100, &cfg) - 0.0001).abs() < 1e-15);
    }

    #[test]
    fn lr_schedule_strictly_decreasing() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for e in 0..=100 {
            let lr = lr_at_epoch(e, &cfg);
            assert!(lr < prev);
            prev = lr;
        }
    }

    fn uniform_grid(h: usize, w: usize, a: MotionAttribute) -> MotionLabelGrid {
        MotionLabelGrid::new(h, w, vec![a; h * w])
    }

    #[test]
    fn motion_loss_identities() {
        // perfect prediction -> 0
        let mut vals = vec![0.0; 3 * 4];
        for i in 0..4 {
            vals[2 * 4 + i] = 1.0; // all mass on Static
        }
        let probs = Tensor::new(vec![1, 3, 2, 2], vals).unwrap();
        let grid = uniform_grid(2, 2, MotionAttribute::Static);
        let l = motion_loss(&probs, &[&grid], UNIFORM_WEIGHTS).unwrap();
        assert_eq!(l, 0.0);

        // uniform probabilities -> ln 3
        let probs = Tensor::full(vec![1, 3, 2, 2], 1.0 / 3.0);
        let l = motion_loss(&probs, &[&grid], UNIFORM_WEIGHTS).unwrap();
        assert!((l - 3.0f64.ln()).abs() < 1e-12);

        // uniform class weights are exactly 1/3 of the unweighted loss
        let l_third = motion_loss(&probs, &[&grid], [1.0 / 3.0; 3]).unwrap();
        assert!((l_third - l / 3.0).abs() < 1e-15);
    }

    #[test]
    fn distill_loss_closed_form_and_symmetry() {
        let k = 128;
        let student = Tensor::zeros(vec![1, k, 1, 1]);
        let target = Tensor::full(vec![1, k, 1, 1], 1.0 / (k as f64).sqrt());
        let l = distill_loss(&student, &target).unwrap();
        assert!((l - 1.0 / k as f64).abs() < 1e-12);

        let l_flip = distill_loss(&target, &student).unwrap();
        assert!((l - l_flip).abs() < 1e-15);

        assert_eq!(distill_loss(&student, &student).unwrap(), 0.0);
    }

    #[test]
    fn total_loss_combines_linearly() {
        let cfg = TrainConfig::default();
        assert!((total_loss(0.5, 0.25, &cfg) - 0.75).abs() < 1e-15);
        let cfg = TrainConfig {
            lambda_m: 0.0,
            lambda_d: 2.0,
            ..TrainConfig::default()
        };
        assert!((total_loss(0.5, 0.25, &cfg) - 0.5).abs() < 1e-15);
    }

    /// Tiny two-image set over 16x16 images for fast loop tests.
    fn tiny_samples() -> Vec<Sample> {
        let mut out = Vec::new();
        for s in 0..2u8 {
            let pixels: Vec<u8> = (0..256).map(|i| ((i as u8).wrapping_mul(31)).wrapping_add(s)).collect();
            let attrs: Vec<MotionAttribute> = (0..256)
                .map(|i| match (i / 8 + i / 128 + s as usize) % 3 {
                    0 => MotionAttribute::Unstable,
                    1 => MotionAttribute::Moving,
                    _ => MotionAttribute::Static,
                })
                .collect();
            out.push(build_sample(format!("tiny{s}"), &pixels, &attrs, 16, 16, 0));
        }
        out
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let samples = tiny_samples();
        let teacher = TeacherParams::seeded(11);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let a = train(&samples, &teacher, &cfg).unwrap();
        let b = train(&samples, &teacher, &cfg).unwrap();
        assert_eq!(
            a.params.to_checkpoint().to_bytes(),
            b.params.to_checkpoint().to_bytes()
        );
        assert_eq!(a.history.len(), b.history.len());
        for (x, y) in a.history.iter().zip(&b.history) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn zero_lambda_d_decouples_descriptor_head() {
        let samples = tiny_samples();
        let mut params = MdNetParams::seeded(3);
        let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
        let batch = Tensor::stack(&images).unwrap();
        let grids: Vec<&MotionLabelGrid> = samples.iter().map(|s| &s.labels).collect();
        let teacher = TeacherParams::seeded(11);
        let map = teacher_forward(&teacher, &batch).unwrap();
        let targets = teacher_targets(&map).unwrap();

        let cfg = TrainConfig {
            lambda_d: 0.0,
            ..TrainConfig::default()
        };
        let mut tape = Tape::new();
        let graph = params.forward_train(&mut tape, &batch).unwrap();
        let l_m = motion_loss_node(&mut tape, graph.motion_probs, &grids, UNIFORM_WEIGHTS).unwrap();
        let l_d = distill_loss_node(&mut tape, graph.descriptors, &targets).unwrap();
        let l = total_loss_node(&mut tape, l_m, l_d, &cfg).unwrap();
        tape.backward(l).unwrap();

        // descriptor-head-only parameters see zero gradient
        for id in [
            graph.params.desc_block.weight,
            graph.params.desc_block.gamma,
            graph.params.desc_out.0,
            graph.params.desc_out.1,
        ] {
            let g = tape.grad(id).unwrap();
            assert!(g.iter().all(|&v| v == 0.0));
        }
        // while the motion branch still trains
        let g = tape.grad(graph.params.motion_out.0).unwrap();
        assert!(g.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn gradient_of_total_is_sum_of_branch_gradients() {
        let samples = tiny_samples();
        let image = Tensor::new(
            vec![1, 1, 16, 16],
            samples[0].image.values().to_vec(),
        )
        .unwrap();
        let grid = &samples[0].labels;
        let teacher = TeacherParams::seeded(2);
        let map = teacher_forward(&teacher, &image).unwrap();
        let targets = teacher_targets(&map).unwrap();
        let cfg = TrainConfig::default();

        let grad_of = |lambda_m: f64, lambda_d: f64| -> Vec<f64> {
            let mut params = MdNetParams::seeded(9);
            let mut tape = Tape::new();
            let graph = params.forward_train(&mut tape, &image).unwrap();
            let l_m =
                motion_loss_node(&mut tape, graph.motion_probs, &[grid], UNIFORM_WEIGHTS).unwrap();
            let l_d = distill_loss_node(&mut tape, graph.descriptors, &targets).unwrap();
            let cfg = TrainConfig {
                lambda_m,
                lambda_d,
                ..cfg.clone()
            };
            let l = total_loss_node(&mut tape, l_m, l_d, &cfg).unwrap();
            tape.backward(l).unwrap();
            tape.grad(graph.params.backbone[0].weight).unwrap().to_vec()
        };

        let g_total = grad_of(1.0, 1.0);
        let g_m = grad_of(1.0, 0.0);
        let g_d = grad_of(0.0, 1.0);
        for i in 0..g_total.len() {
            assert!(
                (g_total[i] - (g_m[i] + g_d[i])).abs() < 1e-9,
                "index {i}: {} vs {}",
                g_total[i],
                g_m[i] + g_d[i]
            );
        }
    }

    #[test]
    fn loss_log_format() {
        let history = vec![LossRecord {
            epoch: 0,
            step: 0,
            lr: 0.01,
            total: 1.5,
            motion: 1.0,
            distill: 0.5,
        }];
        assert_eq!(format_loss_log(&history), "0 0 0.01 1.5 1 0.5\n");
    }

    #[test]
    fn empty_dataset_rejected() {
        let teacher = TeacherParams::seeded(1);
        assert!(matches!(
            train(&[], &teacher, &TrainConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
    }
}
