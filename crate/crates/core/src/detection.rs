//! Box overlap, greedy matching, all-point AP and KITTI label ingestion.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {reason}")]
    MalformedLine {
        file: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("no non-ignored ground truth in any class")]
    EmptyGroundTruth,
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl BBox {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Self {
        Self {
            left,
            top,
            right,
            bottom,
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.left, self.top, self.right, self.bottom]
            .iter()
            .all(|v| v.is_finite())
            && self.right >= self.left
            && self.bottom >= self.top
    }

    pub fn area(&self) -> f64 {
        (self.right - self.left).max(0.0) * (self.bottom - self.top).max(0.0)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = (a.right.min(b.right) - a.left.max(b.left)).max(0.0);
    let h = (a.bottom.min(b.bottom) - a.top.max(b.top)).max(0.0);
    let inter = w * h;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    pub class_id: u32,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub image_id: String,
    pub class_id: u32,
    pub bbox: BBox,
    pub ignore: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MatchLabel {
    TruePositive,
    FalsePositive,
    /// Overlaps only an ignore region; excluded from every count.
    Ignored,
}

/// Greedy matching of confidence-ordered detections against one
/// image/class slice.
///
/// Each detection takes the unmatched, non-ignored ground truth with the
/// highest IoU at or above `iou_thresh`. Failing that, a detection that
/// overlaps an ignore region by the threshold is dropped; anything else is a
/// false positive. Ignore regions may absorb any number of detections.
pub fn match_detections(dets: &[Detection], gts: &[GroundTruthBox], iou_thresh: f64) -> Vec<MatchLabel> {
    let mut taken = vec![false; gts.len()];
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in gts.iter().enumerate() {
                if gt.ignore || taken[j] {
                    continue;
                }
                let o = iou(&d.bbox, &gt.bbox);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((j, o));
                }
            }
            if let Some((j, _)) = best {
                taken[j] = true;
                return MatchLabel::TruePositive;
            }
            let in_ignore = gts
                .iter()
                .any(|gt| gt.ignore && iou(&d.bbox, &gt.bbox) >= iou_thresh);
            if in_ignore {
                MatchLabel::Ignored
            } else {
                MatchLabel::FalsePositive
            }
        })
        .collect()
}

/// All-point interpolated area under the precision/recall curve.
///
/// `labels` must be ordered by descending confidence; ignored entries are
/// skipped. With no ground truth the result is 1 for an empty prediction set
/// and 0 as soon as any false positive exists.
pub fn average_precision(labels: &[MatchLabel], n_gt: usize) -> f64 {
    let kept: Vec<bool> = labels
        .iter()
        .filter(|l| **l != MatchLabel::Ignored)
        .map(|l| *l == MatchLabel::TruePositive)
        .collect();
    if n_gt == 0 {
        return if kept.is_empty() { 1.0 } else { 0.0 };
    }
    let mut recall = Vec::with_capacity(kept.len());
    let mut precision = Vec::with_capacity(kept.len());
    let mut tp = 0usize;
    for (i, is_tp) in kept.iter().enumerate() {
        if *is_tp {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (i + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_grid() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: u32,
    pub n_gt: usize,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetMetrics {
    pub map50: f64,
    pub map50_95: f64,
    pub precision: f64,
    pub recall: f64,
    pub per_class: Vec<ClassAp>,
}

/// Detections for one class, ordered by descending confidence, plus the
/// per-image ground truth they are matched against.
struct ClassSlice<'a> {
    dets: Vec<&'a Detection>,
    gts: HashMap<&'a str, Vec<GroundTruthBox>>,
    n_gt: usize,
}

fn labels_at(slice: &ClassSlice<'_>, thresh: f64) -> Vec<MatchLabel> {
    let mut by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, d) in slice.dets.iter().enumerate() {
        by_image.entry(d.image_id.as_str()).or_default().push(i);
    }
    let mut labels = vec![MatchLabel::FalsePositive; slice.dets.len()];
    for (image, idx) in by_image {
        let dets: Vec<Detection> = idx.iter().map(|&i| slice.dets[i].clone()).collect();
        let gts = slice.gts.get(image).map(Vec::as_slice).unwrap_or(&[]);
        for (i, l) in idx.iter().zip(match_detections(&dets, gts, thresh)) {
            labels[*i] = l;
        }
    }
    labels
}

/// Scores detections against ground truth.
///
/// mAP values average over classes with at least one non-ignored ground-truth
/// box. Ignore regions apply to every class. Precision and recall are
/// micro-averaged over detections with confidence at or above `min_conf`,
/// matched at IoU 0.5; an empty prediction set has precision 0.
pub fn evaluate_detections(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    iou_grid: &[f64],
    min_conf: f64,
) -> Result<DetMetrics, DetError> {
    let classes: BTreeSet<u32> = gts.iter().filter(|g| !g.ignore).map(|g| g.class_id).collect();
    if classes.is_empty() {
        return Err(DetError::EmptyGroundTruth);
    }
    let det_classes: BTreeSet<u32> = dets.iter().map(|d| d.class_id).collect();

    let slice_for = |class: u32, conf_floor: f64| -> ClassSlice<'_> {
        let mut ds: Vec<&Detection> = dets
            .iter()
            .filter(|d| d.class_id == class && d.confidence >= conf_floor)
            .collect();
        ds.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        let mut by_image: HashMap<&str, Vec<GroundTruthBox>> = HashMap::new();
        let mut n_gt = 0;
        for g in gts.iter().filter(|g| g.ignore || g.class_id == class) {
            if !g.ignore {
                n_gt += 1;
            }
            by_image.entry(g.image_id.as_str()).or_default().push(g.clone());
        }
        ClassSlice {
            dets: ds,
            gts: by_image,
            n_gt,
        }
    };

    let per_class: Vec<ClassAp> = classes
        .par_iter()
        .map(|&class| {
            let slice = slice_for(class, f64::NEG_INFINITY);
            let ap50 = average_precision(&labels_at(&slice, 0.5), slice.n_gt);
            let ap50_95 = if iou_grid.is_empty() {
                0.0
            } else {
                iou_grid
                    .iter()
                    .map(|t| average_precision(&labels_at(&slice, *t), slice.n_gt))
                    .sum::<f64>()
                    / iou_grid.len() as f64
            };
            ClassAp {
                class_id: class,
                n_gt: slice.n_gt,
                ap50,
                ap50_95,
            }
        })
        .collect();

    let (tp, fp, n_gt) = classes
        .union(&det_classes)
        .map(|&class| {
            let slice = slice_for(class, min_conf);
            let labels = labels_at(&slice, 0.5);
            let tp = labels.iter().filter(|l| **l == MatchLabel::TruePositive).count();
            let fp = labels.iter().filter(|l| **l == MatchLabel::FalsePositive).count();
            (tp, fp, slice.n_gt)
        })
        .fold((0, 0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1, acc.2 + x.2));

    let n = per_class.len() as f64;
    Ok(DetMetrics {
        map50: per_class.iter().map(|c| c.ap50).sum::<f64>() / n,
        map50_95: per_class.iter().map(|c| c.ap50_95).sum::<f64>() / n,
        precision: if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 },
        recall: tp as f64 / n_gt as f64,
        per_class,
    })
}

/// Class id assigned to ignore regions.
pub const IGNORE_CLASS: u32 = u32::MAX;

/// Maps KITTI object types to class ids; `DontCare` is always an ignore
/// region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMap(pub BTreeMap<String, u32>);

impl Default for ClassMap {
    fn default() -> Self {
        let names = ["Car", "Van", "Truck", "Pedestrian", "Person_sitting", "Cyclist", "Tram", "Misc"];
        Self(names.iter().enumerate().map(|(i, n)| (n.to_string(), i as u32)).collect())
    }
}

fn read(path: &Path) -> Result<String, DetError> {
    fs::read_to_string(path).map_err(|source| DetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Parses one KITTI label file. The image id is the file stem.
pub fn parse_kitti_file(path: &Path, text: &str, classes: &ClassMap) -> Result<Vec<GroundTruthBox>, DetError> {
    let image_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |reason: String| DetError::MalformedLine {
            file: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() < 8 {
            return Err(bad(format!("expected at least 8 fields, found {}", fields.len())));
        }
        let mut coords = [0.0; 4];
        for (c, f) in coords.iter_mut().zip(&fields[4..8]) {
            *c = f.parse().map_err(|_| bad(format!("bad coordinate `{f}`")))?;
        }
        let bbox = BBox::new(coords[0], coords[1], coords[2], coords[3]);
        if !bbox.is_valid() {
            return Err(bad("box has right < left or bottom < top".into()));
        }
        let (class_id, ignore) = if fields[0] == "DontCare" {
            (IGNORE_CLASS, true)
        } else {
            let id = classes
                .0
                .get(fields[0])
                .ok_or_else(|| bad(format!("unknown object type `{}`", fields[0])))?;
            (*id, false)
        };
        out.push(GroundTruthBox {
            image_id: image_id.clone(),
            class_id,
            bbox,
            ignore,
        });
    }
    Ok(out)
}

/// Reads every `*.txt` file of a KITTI label directory, in file-name order.
/// A single file path is also accepted.
pub fn load_kitti_labels(path: &Path, classes: &ClassMap) -> Result<Vec<GroundTruthBox>, DetError> {
    let io = |source| DetError::Io {
        path: path.to_path_buf(),
        source,
    };
    if path.is_file() {
        return parse_kitti_file(path, &read(path)?, classes);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        out.extend(parse_kitti_file(&f, &read(&f)?, classes)?);
    }
    Ok(out)
}

#[derive(Deserialize)]
struct DetectionRow {
    image_id: serde_json::Value,
    class_id: u32,
    bbox: [f64; 4],
    confidence: f64,
}

/// Reads detections from JSON lines `{image_id, class_id, bbox[4], confidence}`.
pub fn load_detections(path: &Path) -> Result<Vec<Detection>, DetError> {
    let text = read(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| DetError::MalformedLine {
            file: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let row: DetectionRow = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        let image_id = match row.image_id {
            serde_json::Value::String(s) => s,
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(bad(format!("image_id must be a string or number, got {other}"))),
        };
        let [l, t, r, b] = row.bbox;
        let bbox = BBox::new(l, t, r, b);
        if !bbox.is_valid() {
            return Err(bad("box has right < left or bottom < top".into()));
        }
        if !(0.0..=1.0).contains(&row.confidence) {
            return Err(bad(format!("confidence {} outside [0, 1]", row.confidence)));
        }
        out.push(Detection {
            image_id,
            class_id: row.class_id,
            bbox,
            confidence: row.confidence,
        });
    }
    Ok(out)
}
