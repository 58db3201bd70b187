//! Segmentation metrics for the motion branch: confusion matrix, per-class
//! and mean IoU, class proportions, pixel accuracy.

use thiserror::Error;

use crate::autodiff::Tensor;
use crate::dataset::{MotionAttribute, MotionLabelGrid};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("grid dims differ: prediction {ph}x{pw}, truth {th}x{tw}")]
    DimMismatch {
        ph: usize,
        pw: usize,
        th: usize,
        tw: usize,
    },
    #[error("prediction holds Ignore at a labeled cell ({y}, {x})")]
    IgnoredPrediction { y: usize, x: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("IoU undefined for every class")]
    AllUndefined,
    #[error("bad probability map: {0}")]
    BadShape(String),
}

/// 3x3 counts, rows = ground truth, columns = prediction. Cells whose truth
/// is Ignore are excluded.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: [[u64; 3]; 3],
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn counts(&self) -> &[[u64; 3]; 3] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Add one count per non-Ignore truth cell.
    pub fn accumulate(
        &mut self,
        predictions: &MotionLabelGrid,
        truth: &MotionLabelGrid,
    ) -> Result<(), MetricsError> {
        if (predictions.h, predictions.w) != (truth.h, truth.w) {
            return Err(MetricsError::DimMismatch {
                ph: predictions.h,
                pw: predictions.w,
                th: truth.h,
                tw: truth.w,
            });
        }
        for y in 0..truth.h {
            for x in 0..truth.w {
                let Some(t) = truth.get(y, x).index() else { continue };
                let p = predictions
                    .get(y, x)
                    .index()
                    .ok_or(MetricsError::IgnoredPrediction { y, x })?;
                self.counts[t][p] += 1;
            }
        }
        Ok(())
    }

    /// Partial matrices from parallel evaluation may be summed.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for t in 0..3 {
            for p in 0..3 {
                self.counts[t][p] += other.counts[t][p];
            }
        }
    }

    /// IoU_j = TP / (TP + FP + FN); None when the union is empty.
    pub fn iou_per_class(&self) -> [Option<f64>; 3] {
        let mut out = [None; 3];
        for (j, slot) in out.iter_mut().enumerate() {
            let tp = self.counts[j][j];
            let fp: u64 = (0..3).filter(|&t| t != j).map(|t| self.counts[t][j]).sum();
            let fn_: u64 = (0..3).filter(|&p| p != j).map(|p| self.counts[j][p]).sum();
            let union = tp + fp + fn_;
            if union > 0 {
                *slot = Some(tp as f64 / union as f64);
            }
        }
        out
    }

    /// Mean IoU over defined classes; the flag array marks classes that were
    /// excluded because their union was empty.
    pub fn mean_iou(&self) -> Result<(f64, [bool; 3]), MetricsError> {
        let per = self.iou_per_class();
        let undefined = [per[0].is_none(), per[1].is_none(), per[2].is_none()];
        let defined: Vec<f64> = per.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(MetricsError::AllUndefined);
        }
        Ok((defined.iter().sum::<f64>() / defined.len() as f64, undefined))
    }

    /// Ground-truth class proportions (row sums over the total).
    pub fn proportions(&self) -> Result<[f64; 3], MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        let mut out = [0.0; 3];
        for j in 0..3 {
            out[j] = self.counts[j].iter().sum::<u64>() as f64 / total as f64;
        }
        Ok(out)
    }

    /// Fraction of evaluated cells predicted correctly.
    pub fn pixel_accuracy(&self) -> Result<f64, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        let correct: u64 = (0..3).map(|j| self.counts[j][j]).sum();
        Ok(correct as f64 / total as f64)
    }

    /// Line-oriented report: `class iou proportion` per class (iou `-` when
    /// undefined), final line `mean <value>`.
    pub fn report(&self) -> Result<String, MetricsError> {
        let per = self.iou_per_class();
        let props = self.proportions()?;
        let (mean, _) = self.mean_iou()?;
        let mut out = String::new();
        for j in 0..3 {
            let name = MotionAttribute::from_index(j).expect("class index").name();
            match per[j] {
                Some(v) => out.push_str(&format!("{name} {v:.6} {:.6}\n", props[j])),
                None => out.push_str(&format!("{name} - {:.6}\n", props[j])),
            }
        }
        out.push_str(&format!("mean {mean:.6}\n"));
        Ok(out)
    }
}

/// Argmax labels for each cell of a [3, h, w] (or [1, 3, h, w]) probability
/// map; ties resolve in attribute order.
pub fn argmax_labels(probs: &Tensor) -> Result<MotionLabelGrid, MetricsError> {
    let (c, h, w) = probs
        .dims3("argmax_labels")
        .map_err(|e| MetricsError::BadShape(e.to_string()))?;
    if c != 3 {
        return Err(MetricsError::BadShape(format!(
            "motion probability map must have 3 channels, got {c}"
        )));
    }
    let v = probs.values();
    let mut cells = Vec::with_capacity(h * w);
    for i in 0..h * w {
        let mut best = 0usize;
        let mut best_v = v[i];
        for ch in 1..c {
            let val = v[ch * h * w + i];
            if val > best_v {
                best_v = val;
                best = ch;
            }
        }
        cells.push(MotionAttribute::from_index(best).expect("ch < 3"));
    }
    Ok(MotionLabelGrid::new(h, w, cells))
}

/// Full-resolution labels: bilinearly upsample the probability map by the
/// given factor, then argmax per pixel. Optional path; the coarse grid is
/// the evaluation default.
pub fn dense_labels(probs: &Tensor, factor: usize) -> Result<MotionLabelGrid, MetricsError> {
    let (c, h, w) = probs
        .dims3("dense_labels")
        .map_err(|e| MetricsError::BadShape(e.to_string()))?;
    let mut tape = crate::autodiff::Tape::new();
    let reshaped = Tensor::new(vec![1, c, h, w], probs.values().to_vec()).expect("same numel");
    let node = tape.leaf(reshaped);
    let up = tape
        .bilinear_upsample(node, factor)
        .expect("validated dims");
    argmax_labels(tape.value(up))
}
