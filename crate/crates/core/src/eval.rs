//! KITTI-style detection evaluation: greedy matching, difficulty gating and
//! interpolated average precision over 11 or 40 recall positions, pooled
//! across frames.

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::{Frame, LabeledBox, ObjectClass};
use crate::geometry::{iou_3d, iou_bev, Box3D};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("detections reference frame `{0}` which has no ground truth")]
    UnknownFrame(String),
    #[error("frame `{0}` appears more than once")]
    DuplicateFrame(String),
    #[error("detection {index} in frame `{frame}` has a non-finite score")]
    NonFiniteScore { frame: String, index: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Moderate,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Moderate, Difficulty::Hard];

    /// `(min bbox height px, max occlusion, max truncation)`.
    fn thresholds(self) -> (f64, u8, f64) {
        match self {
            Difficulty::Easy => (40.0, 0, 0.15),
            Difficulty::Moderate => (25.0, 1, 0.30),
            Difficulty::Hard => (25.0, 2, 0.50),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Moderate => "moderate",
            Difficulty::Hard => "hard",
        }
    }
}

/// Whether `gt` counts toward `level`.
pub fn difficulty_filter(gt: &LabeledBox, level: Difficulty) -> bool {
    if gt.is_ignorable() {
        return false;
    }
    let (min_height, max_occ, max_trunc) = level.thresholds();
    gt.bbox_height() >= min_height && gt.occlusion <= max_occ && gt.truncation <= max_trunc
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecallMode {
    #[serde(rename = "r11")]
    R11,
    #[serde(rename = "r40")]
    R40,
}

impl RecallMode {
    /// Recall positions as `(numerator, denominator)`: `0/10..10/10` or
    /// `1/40..40/40`.
    fn positions(self) -> impl Iterator<Item = (usize, usize)> {
        let (range, den) = match self {
            RecallMode::R11 => (0..=10, 10),
            RecallMode::R40 => (1..=40, 40),
        };
        range.map(move |k| (k, den))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            RecallMode::R11 => "r11",
            RecallMode::R40 => "r40",
        }
    }
}

impl FromStr for RecallMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "r11" => Ok(RecallMode::R11),
            "r40" => Ok(RecallMode::R40),
            other => Err(format!("unknown recall mode `{other}` (expected r11 or r40)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMetric {
    #[serde(rename = "3d")]
    ThreeD,
    Bev,
}

impl IouMetric {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouMetric::ThreeD => iou_3d(a, b),
            IouMetric::Bev => iou_bev(a, b),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            IouMetric::ThreeD => "3d",
            IouMetric::Bev => "bev",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionResult {
    #[serde(rename = "class")]
    pub class: ObjectClass,
    #[serde(rename = "box")]
    pub box3d: Box3D,
    pub score: f64,
}

/// Detections of one frame, one JSON object per line in detection files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_id: String,
    pub detections: Vec<DetectionResult>,
}

/// Ground truth as seen by the matcher.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtEntry {
    pub box3d: Box3D,
    /// Matchable but neither a true positive nor a false negative.
    pub ignored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    Tp,
    Fp,
    /// Overlaps only ignored ground truth; excluded from the PR curve.
    Ignored,
}

/// Detection indices by descending score; ties keep input order.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy matching in descending score order. Each detection takes the
/// unmatched non-ignored ground truth of highest IoU (lowest index on ties)
/// when that IoU reaches `threshold`; failing that, a detection reaching
/// `threshold` with an ignored ground truth is [`MatchOutcome::Ignored`];
/// otherwise it is a false positive. Outcomes are in input order.
pub fn match_frame<F>(
    boxes: &[Box3D],
    scores: &[f64],
    gts: &[GtEntry],
    iou_fn: F,
    threshold: f64,
) -> Vec<MatchOutcome>
where
    F: Fn(&Box3D, &Box3D) -> f64,
{
    assert_eq!(boxes.len(), scores.len(), "one score per detection");
    let mut used = vec![false; gts.len()];
    let mut out = vec![MatchOutcome::Fp; boxes.len()];
    for d in score_order(scores) {
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignored = false;
        for (g, gt) in gts.iter().enumerate() {
            let iou = iou_fn(&boxes[d], &gt.box3d);
            if iou < threshold {
                continue;
            }
            if gt.ignored {
                hits_ignored = true;
            } else if !used[g] && best.map_or(true, |(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        out[d] = match best {
            Some((g, _)) => {
                used[g] = true;
                MatchOutcome::Tp
            }
            None if hits_ignored => MatchOutcome::Ignored,
            None => MatchOutcome::Fp,
        };
    }
    out
}

/// Result of one PR sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApCurve {
    pub ap: f64,
    /// `(recall position, interpolated precision)` samples.
    pub samples: Vec<(f64, f64)>,
    /// Set when there was no ground truth and AP was defined as 0.
    pub no_ground_truth: bool,
}

/// Interpolated AP from `(score, is_tp)` pairs. Detections with equal
/// scores enter the curve together; precision at recall `r` is the best
/// precision at any threshold reaching recall `>= r`.
pub fn ap_interpolated(scored: &[(f64, bool)], num_gt: usize, mode: RecallMode) -> ApCurve {
    let positions: Vec<(usize, usize)> = mode.positions().collect();
    if num_gt == 0 {
        return ApCurve {
            ap: 0.0,
            samples: positions.iter().map(|&(k, den)| (k as f64 / den as f64, 0.0)).collect(),
            no_ground_truth: true,
        };
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.0).collect();
    let order = score_order(&scores);
    // (tp, fp) at each distinct score threshold
    let mut points: Vec<(usize, usize)> = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (rank, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_tie = order
            .get(rank + 1)
            .map_or(true, |&next| scored[next].0 != scored[i].0);
        if last_of_tie {
            points.push((tp, fp));
        }
    }
    let samples: Vec<(f64, f64)> = positions
        .iter()
        .map(|&(k, den)| {
            // recall >= k/den  <=>  tp * den >= k * num_gt, in integers
            let precision = points
                .iter()
                .filter(|&&(tp, _)| tp * den >= k * num_gt)
                .map(|&(tp, fp)| if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 })
                .fold(0.0, f64::max);
            (k as f64 / den as f64, precision)
        })
        .collect();
    let ap = samples.iter().map(|s| s.1).sum::<f64>() / samples.len() as f64;
    ApCurve {
        ap,
        samples,
        no_ground_truth: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub classes: Vec<ObjectClass>,
    /// Overrides the per-class 3D threshold.
    pub iou_3d: Option<f64>,
    /// Overrides the per-class BEV threshold.
    pub iou_bev: Option<f64>,
    pub recall_mode: RecallMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            classes: vec![ObjectClass::Car, ObjectClass::Pedestrian, ObjectClass::Cyclist],
            iou_3d: None,
            iou_bev: None,
            recall_mode: RecallMode::R40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApEntry {
    #[serde(rename = "class")]
    pub class: ObjectClass,
    pub difficulty: Difficulty,
    pub metric: IouMetric,
    pub iou_threshold: f64,
    pub ap: f64,
    pub num_gt: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub no_ground_truth: bool,
    pub samples: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub recall_mode: RecallMode,
    pub num_frames: usize,
    pub entries: Vec<ApEntry>,
}

impl ApReport {
    pub fn get(&self, class: ObjectClass, difficulty: Difficulty, metric: IouMetric) -> Option<&ApEntry> {
        self.entries
            .iter()
            .find(|e| e.class == class && e.difficulty == difficulty && e.metric == metric)
    }

    /// Aligned table: one row per class and metric, AP (%) per difficulty.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<16} {:>4} {:>9} {:>9} {:>9}",
            format!("AP_{}", self.recall_mode.as_str().to_uppercase()),
            "",
            "Easy",
            "Moderate",
            "Hard"
        );
        let mut rows: Vec<(ObjectClass, IouMetric)> = Vec::new();
        for e in &self.entries {
            if !rows.contains(&(e.class, e.metric)) {
                rows.push((e.class, e.metric));
            }
        }
        for (class, metric) in rows {
            let _ = write!(out, "{:<16} {:>4}", class.as_str(), metric.as_str().to_uppercase());
            for d in Difficulty::ALL {
                match self.get(class, d, metric) {
                    Some(e) => {
                        let _ = write!(out, " {:>9.2}", 100.0 * e.ap);
                    }
                    None => {
                        let _ = write!(out, " {:>9}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }

    /// `class,difficulty,metric,recall,precision` rows.
    pub fn to_pr_csv(&self) -> String {
        let mut out = String::from("class,difficulty,metric,recall,precision\n");
        for e in &self.entries {
            for &(r, p) in &e.samples {
                let _ = writeln!(
                    out,
                    "{},{},{},{},{}",
                    e.class,
                    e.difficulty.as_str(),
                    e.metric.as_str(),
                    r,
                    p
                );
            }
        }
        out
    }
}

impl fmt::Display for ApReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Pooled evaluation over frames. Ground-truth frames without detections
/// count as empty detection sets; detections for unknown frames are an
/// error.
pub fn evaluate(
    ground_truth: &[Frame],
    detections: &[FrameDetections],
    config: &EvalConfig,
) -> Result<ApReport, EvalError> {
    let mut gt_ids = HashSet::new();
    for f in ground_truth {
        if !gt_ids.insert(f.frame_id.as_str()) {
            return Err(EvalError::DuplicateFrame(f.frame_id.clone()));
        }
    }
    let mut by_frame: HashMap<&str, &FrameDetections> = HashMap::new();
    for d in detections {
        if !gt_ids.contains(d.frame_id.as_str()) {
            return Err(EvalError::UnknownFrame(d.frame_id.clone()));
        }
        if by_frame.insert(d.frame_id.as_str(), d).is_some() {
            return Err(EvalError::DuplicateFrame(d.frame_id.clone()));
        }
        if let Some(index) = d.detections.iter().position(|x| !x.score.is_finite()) {
            return Err(EvalError::NonFiniteScore {
                frame: d.frame_id.clone(),
                index,
            });
        }
    }

    let mut entries = Vec::new();
    for &class in &config.classes {
        for metric in [IouMetric::ThreeD, IouMetric::Bev] {
            let threshold = match metric {
                IouMetric::ThreeD => config.iou_3d,
                IouMetric::Bev => config.iou_bev,
            }
            .unwrap_or_else(|| class.default_iou_threshold());
            for difficulty in Difficulty::ALL {
                let mut scored = Vec::new();
                let mut num_gt = 0;
                for frame in ground_truth {
                    let gts: Vec<GtEntry> = frame
                        .ground_truth
                        .iter()
                        .filter(|g| g.class == class)
                        .filter_map(|g| {
                            g.box3d.map(|b| GtEntry {
                                box3d: b,
                                ignored: !difficulty_filter(g, difficulty),
                            })
                        })
                        .collect();
                    num_gt += gts.iter().filter(|g| !g.ignored).count();
                    let Some(fd) = by_frame.get(frame.frame_id.as_str()) else {
                        continue;
                    };
                    let dets: Vec<&DetectionResult> =
                        fd.detections.iter().filter(|d| d.class == class).collect();
                    let boxes: Vec<Box3D> = dets.iter().map(|d| d.box3d).collect();
                    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
                    let outcomes = match_frame(&boxes, &scores, &gts, |a, b| metric.iou(a, b), threshold);
                    for (o, s) in outcomes.iter().zip(&scores) {
                        match o {
                            MatchOutcome::Tp => scored.push((*s, true)),
                            MatchOutcome::Fp => scored.push((*s, false)),
                            MatchOutcome::Ignored => {}
                        }
                    }
                }
                let curve = ap_interpolated(&scored, num_gt, config.recall_mode);
                let tp = scored.iter().filter(|s| s.1).count();
                entries.push(ApEntry {
                    class,
                    difficulty,
                    metric,
                    iou_threshold: threshold,
                    ap: curve.ap,
                    num_gt,
                    tp,
                    fp: scored.len() - tp,
                    fn_: num_gt - tp,
                    no_ground_truth: curve.no_ground_truth,
                    samples: curve.samples,
                });
            }
        }
    }
    Ok(ApReport {
        recall_mode: config.recall_mode,
        num_frames: ground_truth.len(),
        entries,
    })
}
