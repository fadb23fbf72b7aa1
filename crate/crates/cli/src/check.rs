//! Oracle suites behind `relate3d check`: every suite draws random
//! instances from named streams of `--seed` and compares the production
//! routine against an independent reference.

use std::f64::consts::PI;

use rand::Rng;
use rayon::prelude::*;
use relate3d::data_io::{generate_scene, ScenePattern, SceneSpec};
use relate3d::geometry::{bev_intersection_area, iou_3d, iou_bev, Box3D};
use relate3d::oracle;
use relate3d::relation::{
    loss_gradient_check, AblationFlags, PreparedFrame, RelationConfig, RelationModel, TrainConfig,
};
use relate3d::rng;
use relate3d::spatial_graph::{knn_graph, radius_graph, GraphStrategy};
use serde::Serialize;

use crate::args::{CheckArgs, Suite};
use crate::CliError;

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const IOU_BEV_TOLERANCE: f64 = 2e-3;
pub const IOU_3D_TOLERANCE: f64 = 1e-9;
pub const GRAD_STEP: f64 = 1e-5;
const MAX_KINK_RESAMPLES: usize = 50;

pub const KNN_KS: [usize; 4] = [1, 4, 16, 32];
pub const RADII: [f64; 3] = [2.0, 6.0, 10.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: &'static str,
    pub trials: usize,
    pub max_error: f64,
    pub tolerance: f64,
    /// Second error measure where a suite has one (3D IoU decomposition).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_error_secondary: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tolerance_secondary: Option<f64>,
    pub passed: bool,
}

/// Random centers for the graph suite. Some frames are snapped to a coarse
/// lattice so that distance ties occur.
pub fn random_centers(seed: u64, trial: u64, max_n: usize) -> Vec<[f64; 3]> {
    let mut r = rng::indexed_stream(seed, "check-graph", trial);
    let n = r.random_range(0..=max_n);
    let lattice = r.random_bool(0.25);
    let extent = r.random_range(5.0..60.0);
    (0..n)
        .map(|_| {
            let mut p = [
                r.random_range(-extent..extent),
                r.random_range(-extent..extent),
                r.random_range(-2.0..2.0),
            ];
            if lattice {
                p.iter_mut().for_each(|v: &mut f64| *v = v.round());
            }
            p
        })
        .collect()
}

/// Number of (frame, strategy) pairs whose fast graph differs from the
/// exhaustive one.
pub fn graph_suite(seed: u64, trials: usize) -> SuiteReport {
    let mismatches: usize = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let centers = random_centers(seed, t, 200);
            let knn = KNN_KS
                .iter()
                .filter(|&&k| knn_graph(&centers, k) != oracle::brute_force_knn_graph(&centers, k))
                .count();
            let radius = RADII
                .iter()
                .filter(|&&r| {
                    radius_graph(&centers, r) != oracle::brute_force_radius_graph(&centers, r)
                })
                .count();
            knn + radius
        })
        .sum();
    SuiteReport {
        suite: "graph",
        trials,
        max_error: mismatches as f64,
        tolerance: 0.0,
        max_error_secondary: None,
        tolerance_secondary: None,
        passed: mismatches == 0,
    }
}

/// A pair of boxes close enough to overlap often.
pub fn random_box_pair(seed: u64, trial: u64) -> (Box3D, Box3D) {
    let mut r = rng::indexed_stream(seed, "check-iou", trial);
    let mut draw = |cx: f64, cy: f64, cz: f64| {
        Box3D::new(
            [
                cx + r.random_range(-2.5..2.5),
                cy + r.random_range(-2.5..2.5),
                cz + r.random_range(-1.0..1.0),
            ],
            [
                r.random_range(0.3..3.0),
                r.random_range(0.3..4.0),
                r.random_range(0.3..6.0),
            ],
            r.random_range(-PI..PI),
        )
        .expect("positive sizes")
    };
    let a = draw(0.0, 0.0, 0.0);
    let b = draw(a.x, a.y, a.z);
    (a, b)
}

/// 3D IoU recomposed from the BEV intersection area and the vertical overlap.
pub fn iou_3d_from_parts(a: &Box3D, b: &Box3D) -> f64 {
    let inter = bev_intersection_area(a, b) * a.vertical_overlap(b);
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn iou_suite(seed: u64, trials: usize) -> SuiteReport {
    let (bev, three_d) = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let (a, b) = random_box_pair(seed, t);
            let e_bev = (iou_bev(&a, &b) - oracle::raster_iou_bev(&a, &b)).abs();
            let e_3d = (iou_3d(&a, &b) - iou_3d_from_parts(&a, &b)).abs();
            (e_bev, e_3d)
        })
        .reduce(|| (0.0, 0.0), |x, y| (x.0.max(y.0), x.1.max(y.1)));
    SuiteReport {
        suite: "iou",
        trials,
        max_error: bev,
        tolerance: IOU_BEV_TOLERANCE,
        max_error_secondary: Some(three_d),
        tolerance_secondary: Some(IOU_3D_TOLERANCE),
        passed: bev < IOU_BEV_TOLERANCE && three_d < IOU_3D_TOLERANCE,
    }
}

/// Model and frame for one gradient-check attempt: a 12-proposal parking
/// frame (10 cars, 2 distractors) and the toy configuration.
pub fn grad_instance(seed: u64, trial: u64, attempt: u64) -> (RelationModel, PreparedFrame) {
    let key = rng::stream_key(seed, &format!("check-grad-{trial}-{attempt}"));
    let spec = SceneSpec {
        feature_dim: 8,
        num_distractors: 2,
        ..SceneSpec::new(ScenePattern::ParallelParking, 10, key)
    };
    let frame = generate_scene(&spec).expect("valid spec");
    let config = RelationConfig {
        input_feature_dim: 8,
        node_dim: 8,
        output_dim: 8,
        head_hidden: vec![8],
        ..RelationConfig::toy(GraphStrategy::Knn { k: 4 }, AblationFlags::default())
    };
    let tc = TrainConfig::default();
    let prepared = PreparedFrame::new(&frame, &config, &tc).expect("dims agree");
    let model = RelationModel::new(config, key).expect("valid config");
    (model, prepared)
}

/// Largest relative error over `trials` instances, re-sampling any instance
/// whose perturbations cross a ReLU or max-pool switch.
pub fn grad_suite(seed: u64, trials: usize) -> Result<SuiteReport, CliError> {
    let errors: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            for attempt in 0..MAX_KINK_RESAMPLES as u64 {
                let (model, frame) = grad_instance(seed, t, attempt);
                match loss_gradient_check(&model, &frame, 1.0, GRAD_STEP) {
                    Ok(Ok(report)) => return Ok(report.max_rel_error),
                    Ok(Err(_kink)) => continue,
                    Err(e) => return Err(CliError::Data(e.to_string())),
                }
            }
            Err(CliError::Tolerance(format!(
                "trial {t}: every re-sampled instance crossed a kink"
            )))
        })
        .collect::<Result<_, _>>()?;
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    Ok(SuiteReport {
        suite: "grad",
        trials,
        max_error,
        tolerance: GRAD_TOLERANCE,
        max_error_secondary: None,
        tolerance_secondary: None,
        passed: max_error < GRAD_TOLERANCE,
    })
}

pub fn cmd_check(a: &CheckArgs) -> Result<(), CliError> {
    let report = match a.suite {
        Suite::Graph => graph_suite(a.seed, a.trials.unwrap_or(1000)),
        Suite::Iou => iou_suite(a.seed, a.trials.unwrap_or(1000)),
        Suite::Grad => grad_suite(a.seed, a.trials.unwrap_or(3))?,
    };
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Tolerance(format!(
            "{} suite: max error {} exceeds tolerance {}",
            report.suite, report.max_error, report.tolerance
        )))
    }
}
