//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use pdse::anchors::{AnchorLabel, MatchThresholds};
use pdse::eval::ScoredBox;
use pdse::geometry::BBox;
use pdse::Tensor;
use rand::Rng;

pub fn iou_ref(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn random_box<R: Rng>(rng: &mut R, extent: f64, min: f64, max: f64) -> BBox {
    let w = rng.random_range(min..max);
    let h = rng.random_range(min..max);
    let x = rng.random_range(0.0..extent - w);
    let y = rng.random_range(0.0..extent - h);
    BBox::new(x, y, x + w, y + h)
}

/// Brute-force greedy NMS: repeatedly take the best remaining box and
/// discard everything overlapping it.
pub fn nms_ref(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        keep.push(best);
        alive.retain(|&i| i != best && iou_ref(&boxes[i], &boxes[best]) <= thresh);
    }
    keep
}

/// Number of true positives among the top `k` detections (by score), found by
/// re-running the matching from scratch.
fn true_positives(order: &[usize], k: usize, dets: &[ScoredBox], gts: &[(usize, BBox)], thresh: f64) -> usize {
    let mut used = vec![false; gts.len()];
    let mut tp = 0;
    for &di in &order[..k] {
        let d = &dets[di];
        let mut best: Option<(usize, f64)> = None;
        for (gi, (img, g)) in gts.iter().enumerate() {
            if *img != d.image || used[gi] {
                continue;
            }
            let v = iou_ref(&d.bbox, g);
            if v >= thresh && best.map_or(true, |(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
            tp += 1;
        }
    }
    tp
}

/// AP from the full list of (precision, recall) cutoffs: each recall step is
/// weighted by the best precision at any cutoff with recall at least as large.
pub fn ap_ref(dets: &[ScoredBox], gts: &[(usize, BBox)], thresh: f64) -> f64 {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let g = gts.len() as f64;
    let points: Vec<(f64, f64)> = (1..=dets.len())
        .map(|k| {
            let tp = true_positives(&order, k, dets, gts, thresh) as f64;
            (tp / k as f64, tp / g)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev = 0.0;
    for &(_, r) in &points {
        if r > prev {
            let p = points.iter().filter(|(_, r2)| *r2 >= r).map(|(p, _)| *p).fold(0.0, f64::max);
            ap += (r - prev) * p;
            prev = r;
        }
    }
    ap
}

/// The matching rule written directly from its statement over a full IoU matrix.
pub fn assign_ref(anchors: &[BBox], gts: &[(BBox, u8)], th: MatchThresholds) -> Vec<AnchorLabel> {
    let m: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|(g, _)| iou_ref(a, g)).collect()).collect();
    let mut labels: Vec<AnchorLabel> = m
        .iter()
        .map(|row| {
            if row.is_empty() {
                return AnchorLabel::Background;
            }
            let mut j = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[j] {
                    j = k;
                }
            }
            if row[j] >= th.positive {
                AnchorLabel::Positive { class: gts[j].1, gt: j }
            } else if row[j] < th.negative {
                AnchorLabel::Background
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect();
    // Each box, in order, then takes its best overlapping anchor not already
    // taken by an earlier box.
    let mut taken: Vec<usize> = Vec::new();
    for (j, (_, class)) in gts.iter().enumerate() {
        let mut best = None::<(usize, f64)>;
        for (i, row) in m.iter().enumerate() {
            if row[j] > 0.0 && !taken.contains(&i) && best.map_or(true, |(_, b)| row[j] > b) {
                best = Some((i, row[j]));
            }
        }
        if let Some((i, _)) = best {
            taken.push(i);
            labels[i] = AnchorLabel::Positive { class: *class, gt: j };
        }
    }
    labels
}

/// Six-loop zero-padded convolution.
pub fn conv_ref(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&[f64]>, stride: usize, pad: usize) -> Tensor<f64> {
    let (n, c, h, wd) = x.dims4().unwrap();
    let (o, _, k, _) = w.dims4().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, o, ho, wo]);
    for s in 0..n {
        for oc in 0..o {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b[oc]);
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xx * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at4(s, ic, iy as usize, ix as usize) * w.at4(oc, ic, ky, kx);
                                }
                            }
                        }
                    }
                    out.data_mut()[((s * o + oc) * ho + y) * wo + xx] = acc;
                }
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Binary cross-entropy of one logit.
pub fn bce(x: f64, t: f64) -> f64 {
    let p = sigmoid(x);
    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
}
