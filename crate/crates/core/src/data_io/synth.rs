//! Synthetic frames with the structure relation reasoning is meant to
//! exploit: rows of parked cars sharing a curb line and heading, lanes of
//! traffic, pedestrian groups.
//!
//! Proposals are the ground truth perturbed by Gaussian center/heading noise
//! (one proposal per object, in ground-truth order) followed by distractor
//! proposals. Features are a fixed random linear map of an independently
//! noised encoding of the true box relative to its proposal plus an
//! objectness channel.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Frame, LabeledBox, ObjectClass, ProposalSet};
use crate::geometry::{bev_corners, normalize_angle, Box3D};
use crate::nn::Matrix;
use crate::rng;

/// Focal length (px) of the pinhole used for synthetic 2D boxes.
pub const FOCAL_PX: f64 = 715.0;
const IMAGE_WIDTH: f64 = 1242.0;
const CX: f64 = 609.6;
const CY: f64 = 172.9;
/// Ground height in the sensor frame.
const GROUND_Z: f64 = -1.73;
const FEATURE_MAP_SEED: u64 = 0x5eed_f00d;
const OBSERVATION_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePattern {
    ParallelParking,
    MultiLane,
    Mixed,
    Uniform,
}

impl FromStr for ScenePattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "parallel_parking" => Ok(ScenePattern::ParallelParking),
            "multi_lane" => Ok(ScenePattern::MultiLane),
            "mixed" => Ok(ScenePattern::Mixed),
            "uniform" => Ok(ScenePattern::Uniform),
            other => Err(format!(
                "unknown pattern `{other}` (expected parallel_parking, multi_lane, mixed or uniform)"
            )),
        }
    }
}

impl fmt::Display for ScenePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScenePattern::ParallelParking => "parallel_parking",
            ScenePattern::MultiLane => "multi_lane",
            ScenePattern::Mixed => "mixed",
            ScenePattern::Uniform => "uniform",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub pattern: ScenePattern,
    pub num_objects: usize,
    /// Std-dev of proposal heading noise (rad).
    pub heading_noise_sd: f64,
    /// Std-dev of proposal center noise (m).
    pub center_noise_sd: f64,
    pub feature_dim: usize,
    pub seed: u64,
    /// Center-to-center spacing of cars along a row or lane (m).
    pub spacing: f64,
    pub num_distractors: usize,
    /// Feature observation noise as a multiple of the proposal noise.
    pub feature_noise_scale: f64,
}

impl SceneSpec {
    /// Defaults: heading noise 0.15 rad, center noise 0.3 m, d = 32,
    /// 6.5 m spacing, two distractors.
    pub fn new(pattern: ScenePattern, num_objects: usize, seed: u64) -> Self {
        Self {
            pattern,
            num_objects,
            heading_noise_sd: 0.15,
            center_noise_sd: 0.3,
            feature_dim: 32,
            seed,
            spacing: 6.5,
            num_distractors: 2,
            feature_noise_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::BadSceneSpec(m.to_string()));
        if !(self.heading_noise_sd >= 0.0) || !(self.center_noise_sd >= 0.0) {
            return bad("noise standard deviations must be >= 0");
        }
        if !(self.feature_noise_scale >= 0.0) {
            return bad("feature_noise_scale must be >= 0");
        }
        if !(self.spacing > 0.0) || !self.spacing.is_finite() {
            return bad("spacing must be positive");
        }
        if self.feature_dim == 0 {
            return bad("feature_dim must be >= 1");
        }
        Ok(())
    }
}

/// `(h, w, l)` ranges per class.
fn size_ranges(class: ObjectClass) -> [(f64, f64); 3] {
    match class {
        ObjectClass::Pedestrian => [(1.6, 1.9), (0.5, 0.7), (0.6, 0.9)],
        ObjectClass::Cyclist => [(1.6, 1.8), (0.5, 0.7), (1.6, 1.9)],
        _ => [(1.4, 1.7), (1.55, 1.85), (3.6, 4.4)],
    }
}

fn sample_size(class: ObjectClass, rng: &mut ChaCha8Rng) -> [f64; 3] {
    size_ranges(class).map(|(lo, hi)| rng.random_range(lo..hi))
}

fn object_box(center_xy: [f64; 2], size: [f64; 3], theta: f64) -> Box3D {
    Box3D::new(
        [center_xy[0], center_xy[1], GROUND_Z + 0.5 * size[0]],
        size,
        theta,
    )
    .expect("generated sizes are positive")
}

fn gauss(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    if sd == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    sd * z
}

/// Cars along a line through `origin` with heading `heading`.
fn car_row(
    rng: &mut ChaCha8Rng,
    origin: [f64; 2],
    heading: f64,
    count: usize,
    gap: impl Fn(&mut ChaCha8Rng) -> f64,
    out: &mut Vec<(ObjectClass, Box3D)>,
) {
    let (s, c) = heading.sin_cos();
    let mut t = rng.random_range(3.0..10.0);
    for _ in 0..count {
        let size = sample_size(ObjectClass::Car, rng);
        out.push((
            ObjectClass::Car,
            object_box([origin[0] + t * c, origin[1] + t * s], size, heading),
        ));
        t += gap(rng);
    }
}

fn layout(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<(ObjectClass, Box3D)> {
    let n = spec.num_objects;
    let spacing = spec.spacing;
    let mut objects = Vec::with_capacity(n);
    let street = rng.random_range(-0.25..0.25);
    let jitter = move |r: &mut ChaCha8Rng| spacing * (1.0 + r.random_range(-0.05..0.05));
    match spec.pattern {
        ScenePattern::ParallelParking => {
            let rows = if n >= 4 { 2 } else { 1 };
            let first = n.div_ceil(rows);
            for (row, count) in [first, n - first].into_iter().take(rows).enumerate() {
                let side = if row == 0 { 1.0 } else { -1.0 };
                let offset = side * rng.random_range(4.5..6.5);
                let heading = street + rng.random_range(-0.05..0.05);
                car_row(rng, [0.0, offset], heading, count, jitter, &mut objects);
            }
        }
        ScenePattern::MultiLane => {
            let lanes = if n >= 3 { rng.random_range(2..=3usize) } else { 1 };
            let per_lane = n.div_ceil(lanes);
            let mut left = n;
            for lane in 0..lanes {
                let count = per_lane.min(left);
                left -= count;
                let offset = (lane as f64 - 0.5 * (lanes as f64 - 1.0)) * 3.5;
                let heading = street + rng.random_range(-0.05..0.05);
                let gap = move |r: &mut ChaCha8Rng| spacing * r.random_range(1.2..2.4);
                car_row(rng, [0.0, offset], heading, count, gap, &mut objects);
            }
        }
        ScenePattern::Mixed => {
            let cars = n / 2;
            let heading = street + rng.random_range(-0.05..0.05);
            let offset = rng.random_range(4.5..6.5);
            car_row(rng, [0.0, offset], heading, cars, jitter, &mut objects);
            let mut left = n - cars;
            while left > 0 {
                let group = left.min(rng.random_range(3..=5usize));
                left -= group;
                let class = if rng.random_bool(0.7) {
                    ObjectClass::Pedestrian
                } else {
                    ObjectClass::Cyclist
                };
                let center = [rng.random_range(8.0..40.0), rng.random_range(-8.0..-2.0)];
                let heading = rng.random_range(-PI..PI);
                for k in 0..group {
                    let along = (k as f64 - 0.5 * (group as f64 - 1.0)) * 1.0;
                    let (s, c) = heading.sin_cos();
                    let pos = [center[0] - along * s, center[1] + along * c];
                    objects.push((class, object_box(pos, sample_size(class, rng), heading)));
                }
            }
        }
        ScenePattern::Uniform => {
            for _ in 0..n {
                let pos = [rng.random_range(5.0..50.0), rng.random_range(-15.0..15.0)];
                let size = sample_size(ObjectClass::Car, rng);
                let heading = rng.random_range(-PI..PI);
                objects.push((ObjectClass::Car, object_box(pos, size, heading)));
            }
        }
    }
    objects
}

/// Pinhole projection proxy for the 2D box: height is `FOCAL_PX * h / depth`.
/// Synthetic frames only.
pub fn bbox2d_proxy(b: &Box3D) -> [f64; 4] {
    let depth = b.x.max(1.0);
    let height = FOCAL_PX * b.h / depth;
    let width = FOCAL_PX * b.l.max(b.w) / depth;
    let u = CX - FOCAL_PX * b.y / depth;
    let v = CY - FOCAL_PX * b.z / depth;
    [u - 0.5 * width, v - 0.5 * height, u + 0.5 * width, v + 0.5 * height]
}

fn truncation_of(bbox: &[f64; 4]) -> f64 {
    let width = bbox[2] - bbox[0];
    let visible = (bbox[2].min(IMAGE_WIDTH) - bbox[0].max(0.0)).max(0.0);
    (1.0 - visible / width).clamp(0.0, 1.0)
}

/// Occlusion level from the fraction of an object's azimuth span covered by
/// nearer objects: < 10% -> 0, < 50% -> 1, otherwise 2.
fn occlusion_levels(boxes: &[Box3D]) -> Vec<u8> {
    let spans: Vec<(f64, f64, f64)> = boxes
        .iter()
        .map(|b| {
            let angles = bev_corners(b)
                .vertices()
                .iter()
                .map(|p| p[1].atan2(p[0]))
                .collect::<Vec<_>>();
            let lo = angles.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = angles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi, b.x.hypot(b.y))
        })
        .collect();
    spans
        .iter()
        .map(|&(lo, hi, range)| {
            const RAYS: usize = 20;
            let covered = (0..RAYS)
                .filter(|&k| {
                    let a = lo + (hi - lo) * (k as f64 + 0.5) / RAYS as f64;
                    spans
                        .iter()
                        .any(|&(l2, h2, r2)| r2 < range && a >= l2 && a <= h2)
                })
                .count();
            let frac = covered as f64 / RAYS as f64;
            if frac < 0.1 {
                0
            } else if frac < 0.5 {
                1
            } else {
                2
            }
        })
        .collect()
}

fn feature_map(dim: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_MAP_SEED ^ dim as u64);
    let scale = 1.0 / (OBSERVATION_DIM as f64).sqrt();
    let data = (0..OBSERVATION_DIM * dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        })
        .collect();
    Matrix::from_vec(OBSERVATION_DIM, dim, data).expect("sized above")
}

/// Noisy observation of the true box `t` as seen from the proposal `p`:
/// center and heading offsets relative to the proposal, absolute sizes, and
/// an objectness channel. RoI features are pooled inside the proposal, so
/// they see the object in the proposal's frame.
fn observation(
    t: &Box3D,
    p: &Box3D,
    objectness: f64,
    spec: &SceneSpec,
    rng: &mut ChaCha8Rng,
) -> [f64; OBSERVATION_DIM] {
    let c = spec.center_noise_sd * spec.feature_noise_scale;
    let h = spec.heading_noise_sd * spec.feature_noise_scale;
    [
        t.x - p.x + gauss(rng, c),
        t.y - p.y + gauss(rng, c),
        t.z - p.z + gauss(rng, 0.5 * c),
        t.h,
        t.w,
        t.l / 4.0,
        normalize_angle(t.theta - p.theta) + gauss(rng, h),
        objectness,
    ]
}

/// Deterministic synthetic frame for `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Frame, DataError> {
    spec.validate()?;
    let mut scene_rng = rng::stream(spec.seed, "scene-layout");
    let mut noise_rng = rng::stream(spec.seed, "scene-noise");
    let mut feat_rng = rng::stream(spec.seed, "scene-features");
    let objects = layout(spec, &mut scene_rng);

    let gt_boxes: Vec<Box3D> = objects.iter().map(|(_, b)| *b).collect();
    let occlusion = occlusion_levels(&gt_boxes);
    let ground_truth: Vec<LabeledBox> = objects
        .iter()
        .zip(&occlusion)
        .map(|(&(class, b), &occ)| {
            let bbox2d = bbox2d_proxy(&b);
            let (_, ry) = super::box_to_kitti_camera(&b);
            LabeledBox {
                class,
                truncation: truncation_of(&bbox2d),
                occlusion: occ,
                alpha: normalize_angle(ry - (-b.y).atan2(b.x)),
                bbox2d,
                box3d: Some(b),
                score: None,
            }
        })
        .collect();

    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    let mut scores = Vec::new();
    let mut observations = Vec::new();
    let c = spec.center_noise_sd;
    for &(class, b) in &objects {
        let size_sd = 0.1 * c;
        let size = [b.h, b.w, b.l].map(|v| (v * (1.0 + gauss(&mut noise_rng, size_sd))).max(0.1));
        let noisy = Box3D::new(
            [
                b.x + gauss(&mut noise_rng, c),
                b.y + gauss(&mut noise_rng, c),
                b.z + gauss(&mut noise_rng, 0.5 * c),
            ],
            size,
            b.theta + gauss(&mut noise_rng, spec.heading_noise_sd),
        )?;
        boxes.push(noisy);
        classes.push(class);
        scores.push(noise_rng.random_range(0.6..1.0));
        let objectness = 1.0 + gauss(&mut feat_rng, 0.3);
        observations.push(observation(&b, &noisy, objectness, spec, &mut feat_rng));
    }

    if spec.num_distractors > 0 {
        let (mut x0, mut x1, mut y0, mut y1) = (5.0f64, 45.0f64, -10.0f64, 10.0f64);
        if !gt_boxes.is_empty() {
            x0 = gt_boxes.iter().map(|b| b.x).fold(f64::INFINITY, f64::min) - 5.0;
            x1 = gt_boxes.iter().map(|b| b.x).fold(f64::NEG_INFINITY, f64::max) + 5.0;
            y0 = gt_boxes.iter().map(|b| b.y).fold(f64::INFINITY, f64::min) - 5.0;
            y1 = gt_boxes.iter().map(|b| b.y).fold(f64::NEG_INFINITY, f64::max) + 5.0;
        }
        for _ in 0..spec.num_distractors {
            let class = if objects.is_empty() {
                ObjectClass::Car
            } else {
                objects[scene_rng.random_range(0..objects.len())].0
            };
            let pos = [
                scene_rng.random_range(x0.max(1.0)..x1.max(x0.max(1.0) + 1.0)),
                scene_rng.random_range(y0..y1),
            ];
            let b = object_box(pos, sample_size(class, &mut scene_rng), scene_rng.random_range(-PI..PI));
            boxes.push(b);
            classes.push(class);
            scores.push(noise_rng.random_range(0.2..0.7));
            let objectness = gauss(&mut feat_rng, 0.3);
            observations.push(observation(&b, &b, objectness, spec, &mut feat_rng));
        }
    }

    let obs = Matrix::from_rows(
        &observations.iter().map(|o| o.to_vec()).collect::<Vec<_>>(),
        OBSERVATION_DIM,
    )
    .expect("fixed width");
    let features = obs.matmul(&feature_map(spec.feature_dim)).expect("inner dims agree");
    let proposals = ProposalSet::new(boxes, features, classes, scores)?;
    Ok(Frame {
        frame_id: format!("{}-{:016x}", spec.pattern, spec.seed),
        ground_truth,
        proposals,
    })
}

/// `count` frames from one template; frame `i` gets a seed derived from
/// `(base_seed, i)` and id `"{i:06}"`.
pub fn generate_frames(template: &SceneSpec, count: usize, base_seed: u64) -> Result<Vec<Frame>, DataError> {
    (0..count)
        .map(|i| {
            let spec = SceneSpec {
                seed: rng::stream_key(base_seed, &format!("frame-{i}")),
                ..template.clone()
            };
            let mut frame = generate_scene(&spec)?;
            frame.frame_id = format!("{i:06}");
            Ok(frame)
        })
        .collect()
}
