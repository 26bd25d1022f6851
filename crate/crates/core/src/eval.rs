//! Turning head outputs into detections, and scoring detections with
//! per-class average precision.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::anchors::{decode_box, AnchorSet};
use crate::error::{PdseError, Result};
use crate::geometry::{iou, BBox};
use crate::lesion::LesionType;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub score_thresh: f64,
    /// Candidates kept per level before decoding.
    pub pre_nms_topk: usize,
    pub nms_iou: f64,
    pub max_dets: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            score_thresh: 0.05,
            pre_nms_topk: 1000,
            nms_iou: 0.5,
            max_dets: 100,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Descending score, then ascending index.
fn by_score_then_index(a: (f64, usize), b: (f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1))
}

/// Greedy NMS. Boxes are visited by descending score (ties by index); a box
/// is dropped when its IoU with an already kept box exceeds `iou_thresh`.
/// Returns kept indices in visiting order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| by_score_then_index((scores[a], a), (scores[b], b)));
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_thresh {
                suppressed[j] = true;
            }
        }
    }
    keep
}

/// NMS applied independently per class; the union is returned sorted by
/// descending score (ties by index).
pub fn batched_nms(dets: &[DetectionBox], iou_thresh: f64) -> Vec<usize> {
    let mut groups: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for (i, d) in dets.iter().enumerate() {
        groups.entry(d.class_id).or_default().push(i);
    }
    let mut keep = Vec::new();
    for idx in groups.values() {
        let boxes: Vec<BBox> = idx.iter().map(|&i| dets[i].bbox).collect();
        let scores: Vec<f64> = idx.iter().map(|&i| dets[i].score).collect();
        keep.extend(nms(&boxes, &scores, iou_thresh).into_iter().map(|k| idx[k]));
    }
    keep.sort_by(|&a, &b| by_score_then_index((dets[a].score, a), (dets[b].score, b)));
    keep
}

/// Class logits and box deltas of one pyramid level (full batch, head layout).
#[derive(Clone, Copy, Debug)]
pub struct LevelMaps<'a, T> {
    pub cls: &'a Tensor<T>,
    pub boxes: &'a Tensor<T>,
}

/// Detections for image `batch_index`: per level sigmoid, threshold, top-k and
/// decode; then class-wise NMS over all levels, at most `max_dets` by score.
pub fn postprocess<T: Real>(
    levels: &[LevelMaps<'_, T>],
    batch_index: usize,
    anchors: &AnchorSet,
    num_classes: usize,
    image_size: (f64, f64),
    cfg: &PostprocessConfig,
) -> Result<Vec<DetectionBox>> {
    if levels.len() != anchors.levels.len() {
        return Err(PdseError::invalid(
            "postprocess",
            format!("{} output levels vs {} anchor levels", levels.len(), anchors.levels.len()),
        ));
    }
    let mut all = Vec::new();
    for (maps, la) in levels.iter().zip(&anchors.levels) {
        let (a_n, h, w) = (la.per_cell, la.height, la.width);
        let plane = h * w;
        let (n, cc, ch, cw) = maps.cls.dims4()?;
        let (bn, bc, bh, bw) = maps.boxes.dims4()?;
        if cc != a_n * num_classes || bc != a_n * 4 || (ch, cw) != (h, w) || (bh, bw) != (h, w) || bn != n {
            return Err(PdseError::shape("postprocess", maps.cls.shape(), &[n, a_n * num_classes, h, w]));
        }
        if batch_index >= n {
            return Err(PdseError::invalid("postprocess", format!("batch index {batch_index} out of range")));
        }
        let cls = &maps.cls.data()[batch_index * cc * plane..(batch_index + 1) * cc * plane];
        let reg = &maps.boxes.data()[batch_index * bc * plane..(batch_index + 1) * bc * plane];
        // candidate key: (score, anchor index within level, class)
        let mut cand: Vec<(f64, usize, usize)> = Vec::new();
        for cell in 0..plane {
            for a in 0..a_n {
                for k in 0..num_classes {
                    let s = sigmoid(cls[(a * num_classes + k) * plane + cell].f64());
                    if s > cfg.score_thresh {
                        cand.push((s, cell * a_n + a, k));
                    }
                }
            }
        }
        cand.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(Ordering::Equal)
                .then(x.1.cmp(&y.1))
                .then(x.2.cmp(&y.2))
        });
        cand.truncate(cfg.pre_nms_topk);
        for (score, ai, k) in cand {
            let (cell, a) = (ai / a_n, ai % a_n);
            let d = [0, 1, 2, 3].map(|c| reg[(a * 4 + c) * plane + cell].f64());
            let bbox = decode_box(&la.boxes[ai], &d, Some(image_size))?;
            if bbox.width() > 0.0 && bbox.height() > 0.0 {
                all.push(DetectionBox {
                    bbox,
                    score,
                    class_id: (k + 1) as u8,
                });
            }
        }
    }
    let keep = batched_nms(&all, cfg.nms_iou);
    Ok(keep.into_iter().take(cfg.max_dets).map(|i| all[i]).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// A scored detection on image `image` (an index shared with the ground truth).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Single-class AP. Detections are visited by descending score (ties by
/// index) and matched to the unmatched ground truth of the same image with
/// the highest IoU ≥ `iou_thresh` (ties by lowest index). AP is the area
/// under the precision envelope. `None` when there is no ground truth.
pub fn average_precision(dets: &[ScoredBox], gts: &[(usize, BBox)], iou_thresh: f64) -> Option<(f64, PrCurve)> {
    if gts.is_empty() {
        return None;
    }
    let mut by_image: HashMap<usize, Vec<usize>> = HashMap::new();
    for (gi, (img, _)) in gts.iter().enumerate() {
        by_image.entry(*img).or_default().push(gi);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| by_score_then_index((dets[a].score, a), (dets[b].score, b)));
    let mut matched = vec![false; gts.len()];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut precision = Vec::with_capacity(dets.len());
    let mut recall = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = by_image.get(&d.image) {
            for &gi in cands {
                if matched[gi] {
                    continue;
                }
                let v = iou(&d.bbox, &gts[gi].1);
                if v >= iou_thresh && best.is_none_or(|(_, bv)| v > bv) {
                    best = Some((gi, v));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        precision.push(tp as f64 / (tp + fp) as f64);
        recall.push(tp as f64 / gts.len() as f64);
    }
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&envelope) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    Some((ap, PrCurve { precision, recall }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: u8,
    pub name: String,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub num_gt: usize,
    pub num_det: usize,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iou_thresh: f64,
    pub num_images: usize,
    /// Indexed by class id − 1.
    pub classes: Vec<ClassReport>,
    pub map: f64,
}

impl EvalReport {
    pub fn ap(&self, t: LesionType) -> Option<f64> {
        self.classes[t.id() as usize - 1].ap
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Lesion-type rows followed by the mAP row.
    pub fn to_table(&self) -> String {
        table(&[("AP@0.5", self)])
    }
}

/// One column per report, one row per lesion type in report order, then mAP.
pub fn table(columns: &[(&str, &EvalReport)]) -> String {
    let mut s = format!("{:<12}", "Type");
    for (name, _) in columns {
        s.push_str(&format!(" {name:>14}"));
    }
    s.push('\n');
    let cell = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    for t in LesionType::REPORT_ORDER {
        s.push_str(&format!("{:<12}", t.label()));
        for (_, r) in columns {
            s.push_str(&format!(" {:>14}", cell(r.ap(t))));
        }
        s.push('\n');
    }
    s.push_str(&format!("{:<12}", "mAP"));
    for (_, r) in columns {
        s.push_str(&format!(" {:>14}", format!("{:.4}", r.map)));
    }
    s.push('\n');
    s
}

/// Ground truth of one image: `(box, class id)`.
pub type ImageAnnotations = (String, Vec<(BBox, u8)>);

/// Per-class AP over a dataset; mAP is the mean over classes that have
/// ground truth (0 when none do).
pub fn evaluate_map(
    detections: &[(String, Vec<DetectionBox>)],
    annotations: &[ImageAnnotations],
    iou_thresh: f64,
) -> Result<EvalReport> {
    let mut index = HashMap::new();
    for (i, (id, gts)) in annotations.iter().enumerate() {
        if index.insert(id.as_str(), i).is_some() {
            return Err(PdseError::Format(format!("duplicate image id {id} in annotations")));
        }
        for (_, c) in gts {
            LesionType::from_id(*c)?;
        }
    }
    let mut seen = HashSet::new();
    let mut per_class_dets: Vec<Vec<ScoredBox>> = vec![Vec::new(); LesionType::ALL.len()];
    for (id, dets) in detections {
        if !seen.insert(id.as_str()) {
            return Err(PdseError::Format(format!("duplicate image id {id} in detections")));
        }
        let image = *index
            .get(id.as_str())
            .ok_or_else(|| PdseError::Format(format!("detections for unknown image {id}")))?;
        for d in dets {
            LesionType::from_id(d.class_id)?;
            if !d.score.is_finite() {
                return Err(PdseError::Format(format!("non-finite score on image {id}")));
            }
            per_class_dets[d.class_id as usize - 1].push(ScoredBox {
                image,
                score: d.score,
                bbox: d.bbox,
            });
        }
    }
    let mut classes = Vec::new();
    let mut sum = 0.0;
    let mut represented = 0usize;
    for t in LesionType::ALL {
        let gts: Vec<(usize, BBox)> = annotations
            .iter()
            .enumerate()
            .flat_map(|(i, (_, g))| g.iter().filter(|(_, c)| *c == t.id()).map(move |(b, _)| (i, *b)))
            .collect();
        let dets = &per_class_dets[t.id() as usize - 1];
        let res = average_precision(dets, &gts, iou_thresh);
        if let Some((ap, _)) = &res {
            sum += ap;
            represented += 1;
        }
        let (ap, curve) = match res {
            Some((ap, c)) => (Some(ap), c),
            None => (None, PrCurve { precision: vec![], recall: vec![] }),
        };
        classes.push(ClassReport {
            class_id: t.id(),
            name: t.label().to_string(),
            ap,
            num_gt: gts.len(),
            num_det: dets.len(),
            precision: curve.precision,
            recall: curve.recall,
        });
    }
    Ok(EvalReport {
        iou_thresh,
        num_images: annotations.len(),
        classes,
        map: if represented == 0 { 0.0 } else { sum / represented as f64 },
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionRow {
    image_id: String,
    class_id: u8,
    score: f64,
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

/// `image_id,class_id,score,x1,y1,x2,y2` with a header row, even when empty.
pub fn write_detections_csv<W: Write>(w: W, detections: &[(String, Vec<DetectionBox>)]) -> Result<()> {
    let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    wr.write_record(["image_id", "class_id", "score", "x1", "y1", "x2", "y2"])?;
    for (id, dets) in detections {
        for d in dets {
            wr.serialize(DetectionRow {
                image_id: id.clone(),
                class_id: d.class_id,
                score: d.score,
                x1: d.bbox.x1,
                y1: d.bbox.y1,
                x2: d.bbox.x2,
                y2: d.bbox.y2,
            })?;
        }
    }
    wr.flush()?;
    Ok(())
}

/// Groups rows by image id in first-appearance order.
pub fn read_detections_csv<R: Read>(r: R) -> Result<Vec<(String, Vec<DetectionBox>)>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out: Vec<(String, Vec<DetectionBox>)> = Vec::new();
    let mut pos: HashMap<String, usize> = HashMap::new();
    for row in rd.deserialize() {
        let row: DetectionRow = row?;
        LesionType::from_id(row.class_id)?;
        let d = DetectionBox {
            bbox: BBox::new(row.x1, row.y1, row.x2, row.y2),
            score: row.score,
            class_id: row.class_id,
        };
        let i = *pos.entry(row.image_id.clone()).or_insert_with(|| {
            out.push((row.image_id.clone(), Vec::new()));
            out.len() - 1
        });
        out[i].1.push(d);
    }
    Ok(out)
}
