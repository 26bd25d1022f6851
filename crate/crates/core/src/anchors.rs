//! Anchor tiling, ground-truth assignment, box coding, and training losses.

use serde::{Deserialize, Serialize};

use crate::error::{PdseError, Result};
use crate::geometry::{iou, BBox};
use crate::tensor::{focal_term, smooth_l1_term};
use crate::tensor::{Real, Tensor};

/// Pyramid levels carrying anchors, P3..P7.
pub const LEVELS: [u32; 5] = [3, 4, 5, 6, 7];

/// Largest log-scale delta accepted by [`decode_box`].
pub fn max_log_delta() -> f64 {
    (1000.0f64 / 16.0).ln()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSpec {
    /// Anchor side at scale 1 for each of P3..P7.
    pub base_sizes: Vec<f64>,
    pub scales: Vec<f64>,
    /// Height / width.
    pub ratios: Vec<f64>,
}

impl Default for AnchorSpec {
    fn default() -> Self {
        Self {
            base_sizes: vec![16.0, 32.0, 64.0, 128.0, 256.0],
            scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            ratios: vec![0.5, 1.0, 2.0],
        }
    }
}

impl AnchorSpec {
    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || self.ratios.is_empty() {
            return Err(PdseError::Config("anchor scales and ratios must be non-empty".into()));
        }
        if self.base_sizes.len() != LEVELS.len() {
            return Err(PdseError::Config(format!(
                "need one anchor base size per level ({}), got {}",
                LEVELS.len(),
                self.base_sizes.len()
            )));
        }
        let all = self.base_sizes.iter().chain(&self.scales).chain(&self.ratios);
        if all.into_iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(PdseError::Config("anchor sizes, scales and ratios must be positive".into()));
        }
        Ok(())
    }

    /// `(width, height)` of the anchors in one cell, ratio-major.
    pub fn cell_shapes(&self, level_idx: usize) -> Vec<(f64, f64)> {
        let base = self.base_sizes[level_idx];
        let mut out = Vec::with_capacity(self.per_cell());
        for &r in &self.ratios {
            for &s in &self.scales {
                let side = base * s;
                out.push((side / r.sqrt(), side * r.sqrt()));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelAnchors {
    pub level: u32,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub per_cell: usize,
    /// Ordered by `(y, x, anchor)`.
    pub boxes: Vec<BBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub levels: Vec<LevelAnchors>,
}

impl AnchorSet {
    pub fn total(&self) -> usize {
        self.levels.iter().map(|l| l.boxes.len()).sum()
    }

    pub fn all(&self) -> Vec<BBox> {
        self.levels.iter().flat_map(|l| l.boxes.iter().copied()).collect()
    }
}

/// Tiles anchors over P3..P7 for an `input_h × input_w` image. Anchors are
/// centered on `stride·(i + 0.5)` and are not clipped to the image.
pub fn generate_anchors(spec: &AnchorSpec, input_h: usize, input_w: usize) -> Result<AnchorSet> {
    spec.validate()?;
    if input_h % 128 != 0 || input_w % 128 != 0 || input_h == 0 || input_w == 0 {
        return Err(PdseError::Config(format!(
            "input size {input_h}x{input_w} must be a positive multiple of 128"
        )));
    }
    let levels = LEVELS
        .iter()
        .enumerate()
        .map(|(li, &level)| {
            let stride = 1usize << level;
            let (h, w) = (input_h / stride, input_w / stride);
            let shapes = spec.cell_shapes(li);
            let mut boxes = Vec::with_capacity(h * w * shapes.len());
            for y in 0..h {
                for x in 0..w {
                    let cx = stride as f64 * (x as f64 + 0.5);
                    let cy = stride as f64 * (y as f64 + 0.5);
                    boxes.extend(shapes.iter().map(|&(aw, ah)| BBox::from_center(cx, cy, aw, ah)));
                }
            }
            LevelAnchors {
                level,
                stride,
                height: h,
                width: w,
                per_cell: shapes.len(),
                boxes,
            }
        })
        .collect();
    Ok(AnchorSet { levels })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Background,
    Ignore,
    /// `class` in 1..=num_classes, `gt` indexes the ground-truth list.
    Positive { class: u8, gt: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchThresholds {
    pub positive: f64,
    pub negative: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        Self {
            positive: 0.5,
            negative: 0.4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<AnchorLabel>,
    /// Encoded regression target per anchor (zeros unless positive).
    pub targets: Vec<[f64; 4]>,
}

impl AssignmentResult {
    pub fn num_positive(&self) -> usize {
        self.labels
            .iter()
            .filter(|l| matches!(l, AnchorLabel::Positive { .. }))
            .count()
    }

    pub fn num_ignored(&self) -> usize {
        self.labels.iter().filter(|l| matches!(l, AnchorLabel::Ignore)).count()
    }
}

/// RetinaNet matching: IoU ≥ positive → positive, < negative → background,
/// otherwise ignore. Then, in ground-truth order, each ground truth's
/// highest-IoU anchor among those not already forced by an earlier one (lowest
/// index on ties, IoU > 0) is forced positive for it.
pub fn assign_targets(anchors: &[BBox], gts: &[(BBox, u8)], th: MatchThresholds) -> Result<AssignmentResult> {
    let mut labels = vec![AnchorLabel::Background; anchors.len()];
    let mut targets = vec![[0.0; 4]; anchors.len()];
    if gts.is_empty() {
        return Ok(AssignmentResult { labels, targets });
    }
    let mut table = vec![0.0f64; anchors.len() * gts.len()];
    for (ai, a) in anchors.iter().enumerate() {
        let mut best = (usize::MAX, 0.0f64);
        for (gi, (g, _)) in gts.iter().enumerate() {
            let v = iou(a, g);
            table[ai * gts.len() + gi] = v;
            if v > best.1 || best.0 == usize::MAX {
                best = (gi, v);
            }
        }
        labels[ai] = if best.1 >= th.positive {
            AnchorLabel::Positive {
                class: gts[best.0].1,
                gt: best.0,
            }
        } else if best.1 < th.negative {
            AnchorLabel::Background
        } else {
            AnchorLabel::Ignore
        };
    }
    // Forced matches claim distinct anchors, so two near-identical boxes
    // cannot take each other's only anchor.
    let mut claimed = vec![false; anchors.len()];
    for (gi, (_, class)) in gts.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for ai in 0..anchors.len() {
            let v = table[ai * gts.len() + gi];
            if !claimed[ai] && v > 0.0 && best.is_none_or(|(_, b)| v > b) {
                best = Some((ai, v));
            }
        }
        if let Some((ai, _)) = best {
            claimed[ai] = true;
            labels[ai] = AnchorLabel::Positive { class: *class, gt: gi };
        }
    }
    for (ai, l) in labels.iter().enumerate() {
        if let AnchorLabel::Positive { gt, .. } = l {
            targets[ai] = encode_box(&anchors[ai], &gts[*gt].0)?;
        }
    }
    Ok(AssignmentResult { labels, targets })
}

/// `((cx − cxa)/wa, (cy − cya)/ha, ln(w/wa), ln(h/ha))`.
pub fn encode_box(anchor: &BBox, gt: &BBox) -> Result<[f64; 4]> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if !(wa > 0.0 && ha > 0.0) {
        return Err(PdseError::invalid("encode_box", "anchor must have positive width and height"));
    }
    let (w, h) = (gt.width(), gt.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(PdseError::invalid("encode_box", "ground-truth box must have positive area"));
    }
    let (cxa, cya) = anchor.center();
    let (cx, cy) = gt.center();
    Ok([(cx - cxa) / wa, (cy - cya) / ha, (w / wa).ln(), (h / ha).ln()])
}

/// Inverse of [`encode_box`] with log-scale deltas clamped to `ln(1000/16)`.
/// `clip` gives the image `(width, height)` to clip to.
pub fn decode_box(anchor: &BBox, deltas: &[f64; 4], clip: Option<(f64, f64)>) -> Result<BBox> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if !(wa > 0.0 && ha > 0.0) {
        return Err(PdseError::invalid("decode_box", "anchor must have positive width and height"));
    }
    let (cxa, cya) = anchor.center();
    let cx = cxa + deltas[0] * wa;
    let cy = cya + deltas[1] * ha;
    let w = wa * deltas[2].min(max_log_delta()).exp();
    let h = ha * deltas[3].min(max_log_delta()).exp();
    let b = BBox::from_center(cx, cy, w, h);
    Ok(match clip {
        Some((iw, ih)) => b.clip(iw, ih),
        None => b,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalLossValue {
    pub value: f64,
    /// Set when every anchor was ignored, in which case the loss is 0.
    pub all_ignored: bool,
}

/// Sigmoid focal loss over `labels.len() × num_classes` logits (anchor-major),
/// summed and divided by `max(1, #positives)`. Ignored anchors contribute nothing.
pub fn focal_loss(
    logits: &[f64],
    labels: &[AnchorLabel],
    num_classes: usize,
    alpha: f64,
    gamma: f64,
) -> Result<FocalLossValue> {
    if logits.len() != labels.len() * num_classes {
        return Err(PdseError::shape("focal_loss", &[logits.len()], &[labels.len(), num_classes]));
    }
    let mut total = 0.0;
    let mut positives = 0usize;
    let mut any = false;
    for (a, label) in labels.iter().enumerate() {
        let class = match label {
            AnchorLabel::Ignore => continue,
            AnchorLabel::Background => None,
            AnchorLabel::Positive { class, .. } => {
                positives += 1;
                Some(*class as usize)
            }
        };
        any = true;
        for k in 0..num_classes {
            let t = if class == Some(k + 1) { 1.0 } else { 0.0 };
            total += focal_term(logits[a * num_classes + k], t, alpha, gamma).0;
        }
    }
    if !any {
        log::warn!("focal loss: every anchor is ignored");
        return Ok(FocalLossValue {
            value: 0.0,
            all_ignored: true,
        });
    }
    Ok(FocalLossValue {
        value: total / positives.max(1) as f64,
        all_ignored: false,
    })
}

/// Mean smooth-L1 over every coordinate of the given (positive) anchors.
pub fn smooth_l1_loss(pred: &[[f64; 4]], target: &[[f64; 4]], beta: f64) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(PdseError::shape("smooth_l1_loss", &[pred.len(), 4], &[target.len(), 4]));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .iter()
        .zip(target)
        .flat_map(|(p, t)| p.iter().zip(t).map(|(a, b)| smooth_l1_term(a - b, beta).0))
        .sum();
    Ok(total / (4 * pred.len()) as f64)
}

/// Dense per-level training targets laid out like the head outputs.
#[derive(Clone, Debug)]
pub struct LevelTargets<T> {
    /// `N × (A·K) × H × W`, 1 where anchor `a` is positive for class `k`.
    pub cls_target: Tensor<T>,
    /// `N × (A·K) × H × W`, 0 for ignored anchors.
    pub cls_weight: Tensor<T>,
    /// `N × (A·4) × H × W`.
    pub box_target: Tensor<T>,
    /// `N × (A·4) × H × W`, 1 on positive anchors.
    pub box_mask: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BatchTargets<T> {
    pub levels: Vec<LevelTargets<T>>,
    pub num_positive: usize,
}

/// Assigns every image of a batch and scatters labels into head-shaped tensors.
pub fn build_targets<T: Real>(
    anchors: &AnchorSet,
    batch_gts: &[Vec<(BBox, u8)>],
    num_classes: usize,
    th: MatchThresholds,
) -> Result<BatchTargets<T>> {
    let flat = anchors.all();
    let n = batch_gts.len();
    let mut levels: Vec<LevelTargets<T>> = anchors
        .levels
        .iter()
        .map(|l| {
            let (a, h, w) = (l.per_cell, l.height, l.width);
            LevelTargets {
                cls_target: Tensor::zeros(&[n, a * num_classes, h, w]),
                cls_weight: Tensor::full(&[n, a * num_classes, h, w], T::one()),
                box_target: Tensor::zeros(&[n, a * 4, h, w]),
                box_mask: Tensor::zeros(&[n, a * 4, h, w]),
            }
        })
        .collect();
    let mut num_positive = 0;
    for (bi, gts) in batch_gts.iter().enumerate() {
        for (_, class) in gts {
            if *class == 0 || *class as usize > num_classes {
                return Err(PdseError::invalid("build_targets", format!("class id {class} out of range")));
            }
        }
        let res = assign_targets(&flat, gts, th)?;
        num_positive += res.num_positive();
        let mut offset = 0;
        for (li, l) in anchors.levels.iter().enumerate() {
            let (a_n, h, w) = (l.per_cell, l.height, l.width);
            let plane = h * w;
            let lt = &mut levels[li];
            for (j, label) in res.labels[offset..offset + l.boxes.len()].iter().enumerate() {
                let cell = j / a_n;
                let a = j % a_n;
                match label {
                    AnchorLabel::Background => {}
                    AnchorLabel::Ignore => {
                        for k in 0..num_classes {
                            let idx = (bi * a_n * num_classes + a * num_classes + k) * plane + cell;
                            lt.cls_weight.data_mut()[idx] = T::zero();
                        }
                    }
                    AnchorLabel::Positive { class, .. } => {
                        let idx = (bi * a_n * num_classes + a * num_classes + (*class as usize - 1)) * plane + cell;
                        lt.cls_target.data_mut()[idx] = T::one();
                        let t = res.targets[offset + j];
                        for (c, tv) in t.iter().enumerate() {
                            let idx = (bi * a_n * 4 + a * 4 + c) * plane + cell;
                            lt.box_target.data_mut()[idx] = T::c(*tv);
                            lt.box_mask.data_mut()[idx] = T::one();
                        }
                    }
                }
            }
            offset += l.boxes.len();
        }
    }
    Ok(BatchTargets { levels, num_positive })
}
