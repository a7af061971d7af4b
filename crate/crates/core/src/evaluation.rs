//! Detection metrics: IoU, per-class average precision and the
//! class-frequency-weighted mAP.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boxes::Box2D;
use crate::class::ObjectClass;
use crate::crf_net::{detect, AnchorSet, CrfNet, Detection, InferenceConfig};
use crate::error::{Error, Result};
use crate::training::{apply_blackout, Filters, Mode, Sample};

pub const IOU_THRESHOLD: f64 = 0.5;

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Marks each detection of one image as true positive. Detections are
/// visited by descending score and matched to the unmatched ground-truth
/// box of highest IoU, provided it reaches `threshold`.
pub fn match_detections(detections: &[Detection], ground_truth: &[Box2D], threshold: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut taken = vec![false; ground_truth.len()];
    let mut tp = vec![false; detections.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in ground_truth.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(&detections[i].bbox, gt);
            if v >= threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            tp[i] = true;
        }
    }
    tp
}

/// Area under the precision envelope for a ranked list of hit flags
/// (highest score first) against `num_gt` ground-truth objects.
pub fn average_precision(ranked_hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(ranked_hits.len());
    let mut precision = Vec::with_capacity(ranked_hits.len());
    let mut tp = 0usize;
    for (k, &hit) in ranked_hits.iter().enumerate() {
        tp += usize::from(hit);
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (k + 1) as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Detections and ground truth of one evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageResult {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<Box2D>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub class: ObjectClass,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
    pub gt_count: usize,
    pub detections: usize,
}

/// AP of one class over many images. Detections of all images are ranked
/// together by score; equal scores keep image order.
pub fn class_ap(images: &[ImageResult], class: ObjectClass, threshold: f64) -> ClassResult {
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    let mut gt_count = 0;
    for img in images {
        let dets: Vec<Detection> = img.detections.iter().filter(|d| d.bbox.class_label == class).cloned().collect();
        let gts: Vec<Box2D> = img.ground_truth.iter().filter(|b| b.class_label == class).copied().collect();
        gt_count += gts.len();
        let hits = match_detections(&dets, &gts, threshold);
        ranked.extend(dets.iter().map(|d| d.score).zip(hits));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let hits: Vec<bool> = ranked.iter().map(|r| r.1).collect();
    ClassResult {
        class,
        ap: (gt_count > 0).then(|| average_precision(&hits, gt_count)),
        gt_count,
        detections: ranked.len(),
    }
}

/// Σ count_c · AP_c / Σ count_c over classes with ground truth.
pub fn weighted_map(classes: &[ClassResult]) -> f64 {
    let total: usize = classes.iter().map(|c| c.gt_count).sum();
    if total == 0 {
        return 0.0;
    }
    classes.iter().map(|c| c.gt_count as f64 * c.ap.unwrap_or(0.0)).sum::<f64>() / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: Mode,
    pub filters: Filters,
    pub camera_blackout: bool,
    pub images: usize,
    pub weighted_map: f64,
    pub classes: Vec<ClassResult>,
}

impl EvalReport {
    pub fn from_results(images: &[ImageResult], mode: Mode, filters: Filters, camera_blackout: bool) -> Self {
        let classes: Vec<ClassResult> = ObjectClass::ALL.iter().map(|&c| class_ap(images, c, IOU_THRESHOLD)).collect();
        EvalReport {
            mode,
            filters,
            camera_blackout,
            images: images.len(),
            weighted_map: weighted_map(&classes),
            classes,
        }
    }

    pub fn label(&self) -> String {
        let net = match self.mode {
            Mode::ImageOnly => "Baseline",
            Mode::Fusion | Mode::Nrm => "CRF-Net",
        };
        let mut tags = Vec::new();
        match self.filters {
            Filters::None => {}
            Filters::Af => tags.push("AF"),
            Filters::AfGrf => tags.extend(["AF", "GRF"]),
        }
        if self.mode == Mode::Nrm {
            tags.push("NRM");
        }
        if tags.is_empty() {
            net.to_string()
        } else {
            format!("{net} ({})", tags.join(", "))
        }
    }

    /// One-row table in the layout of a results table: configuration,
    /// weighted mAP, then per-class AP.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<28} {:>8}", "Network", "mAP");
        for c in ObjectClass::ALL {
            let _ = write!(s, " {:>10}", c.name());
        }
        s.push('\n');
        let _ = write!(s, "{:<28} {:>7.2}%", self.label(), 100.0 * self.weighted_map);
        for c in &self.classes {
            match c.ap {
                Some(ap) => {
                    let _ = write!(s, " {:>9.2}%", 100.0 * ap);
                }
                None => {
                    let _ = write!(s, " {:>10}", "-");
                }
            }
        }
        s.push('\n');
        let _ = write!(s, "{:<28} {:>8}", "ground truth", "");
        for c in &self.classes {
            let _ = write!(s, " {:>10}", c.gt_count);
        }
        s.push('\n');
        s
    }

    /// Writes `<dir>/eval.json` and `<dir>/eval.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("eval.json");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&json, e))?;
        fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
        let txt = dir.join("eval.txt");
        fs::write(&txt, self.table()).map_err(|e| Error::io(&txt, e))
    }
}

/// Runs the detector over prepared samples. With `camera_blackout` the
/// camera channels are zeroed before inference.
pub fn evaluate(net: &CrfNet<f32>, samples: &[Sample], mode: Mode, filters: Filters, camera_blackout: bool, cfg: &InferenceConfig) -> Result<EvalReport> {
    let anchors = AnchorSet::new(net.config());
    let mut images = Vec::with_capacity(samples.len());
    for s in samples {
        let dets = if camera_blackout {
            detect(net, &apply_blackout(&s.input), &anchors, cfg)?
        } else {
            detect(net, &s.input, &anchors, cfg)?
        };
        images.push(ImageResult {
            detections: dets.detections,
            ground_truth: s.ground_truth.clone(),
        });
    }
    Ok(EvalReport::from_results(&images, mode, filters, camera_blackout))
}
