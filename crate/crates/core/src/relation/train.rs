//! Toy refinement training: smooth-L1 on box residuals plus binary
//! cross-entropy on confidence, optimized with Adam over minibatches of
//! frames.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    apply_residual, encode_box, sigmoid, split_head_output, EdgeBatch, RelationConfig,
    RelationError, RelationModel, BOX_DIM,
};
use crate::data_io::{Frame, ProposalSet};
use crate::geometry::{iou_3d, iou_bev, normalize_angle, Box3D};
use crate::nn::{
    finite_difference_check_guarded, flatten, mlp_forward, unflatten_into, AdamConfig, AdamState,
    FdReport, KinkCrossed, Matrix, Tape,
};
use crate::rng;
use crate::spatial_graph::RelationGraph;

pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// Value and derivative of smooth-L1 at `x`.
pub fn smooth_l1(x: f64, beta: f64) -> (f64, f64) {
    let a = x.abs();
    if a < beta {
        (0.5 * x * x / beta, x / beta)
    } else {
        (a - 0.5 * beta, x.signum())
    }
}

/// Binary cross-entropy on a logit: value and derivative.
fn bce_with_logit(z: f64, y: f64) -> (f64, f64) {
    let value = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
    (value, sigmoid(z) - y)
}

/// Regression and classification targets for one frame's proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    /// Residual `gt - proposal` (heading wrapped) for positive proposals.
    pub residuals: Vec<Option<[f64; BOX_DIM]>>,
    /// Matched ground-truth box for positive proposals.
    pub matched: Vec<Option<Box3D>>,
    /// 1 when the proposal's best 3D IoU reaches the confidence threshold.
    pub labels: Vec<f64>,
}

impl FrameTargets {
    pub fn num_positive(&self) -> usize {
        self.residuals.iter().filter(|r| r.is_some()).count()
    }
}

/// Assigns each proposal the same-class ground truth with the highest BEV
/// IoU. It is a regression positive when that IoU is at least `reg_iou`;
/// its confidence label is `iou_3d >= cls_iou`.
pub fn assign_targets(frame: &Frame, reg_iou: f64, cls_iou: f64) -> FrameTargets {
    let p = &frame.proposals;
    let mut out = FrameTargets {
        residuals: Vec::with_capacity(p.len()),
        matched: Vec::with_capacity(p.len()),
        labels: Vec::with_capacity(p.len()),
    };
    for (b, class) in p.boxes().iter().zip(p.classes()) {
        let mut best: Option<(f64, Box3D)> = None;
        for gt in &frame.ground_truth {
            let Some(g) = gt.box3d else { continue };
            if gt.class != *class {
                continue;
            }
            let iou = iou_bev(b, &g);
            if best.map_or(true, |(s, _)| iou > s) {
                best = Some((iou, g));
            }
        }
        match best {
            Some((iou, g)) if iou >= reg_iou && iou > 0.0 => {
                let (pv, gv) = (encode_box(b), encode_box(&g));
                let mut r = [0.0; BOX_DIM];
                for k in 0..BOX_DIM {
                    r[k] = gv[k] - pv[k];
                }
                r[6] = normalize_angle(r[6]);
                out.residuals.push(Some(r));
                out.matched.push(Some(g));
                out.labels.push(f64::from(u8::from(iou_3d(b, &g) >= cls_iou)));
            }
            _ => {
                out.residuals.push(None);
                out.matched.push(None);
                out.labels.push(0.0);
            }
        }
    }
    out
}

/// Loss of one frame and its gradient with respect to the head output.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    pub regression: f64,
    pub classification: f64,
    /// `n x 8` gradient of `total` w.r.t. the head output.
    pub grad: Matrix,
    /// Hash of which smooth-L1 branch every residual term took.
    pub signature: u64,
}

/// Smooth-L1 summed over the seven residual components and averaged over
/// positives, plus `cls_weight` times the mean BCE over all proposals.
pub fn toy_loss(head_out: &Matrix, targets: &FrameTargets, cls_weight: f64) -> LossValue {
    let n = head_out.rows();
    assert_eq!(targets.labels.len(), n, "targets per proposal");
    let mut grad = Matrix::zeros(n, BOX_DIM + 1);
    let num_pos = targets.num_positive().max(1) as f64;
    let mut regression = 0.0;
    let mut classification = 0.0;
    let mut signature: u64 = 0xcbf2_9ce4_8422_2325;
    for i in 0..n {
        let row = head_out.row(i);
        if let Some(t) = &targets.residuals[i] {
            for k in 0..BOX_DIM {
                let diff = row[k] - t[k];
                let (v, d) = smooth_l1(diff, SMOOTH_L1_BETA);
                regression += v;
                grad.set(i, k, d / num_pos);
                signature ^= u64::from(diff.abs() < SMOOTH_L1_BETA) + 2 * u64::from(diff > 0.0);
                signature = signature.wrapping_mul(0x0100_0000_01b3);
            }
        }
        let (v, d) = bce_with_logit(row[BOX_DIM], targets.labels[i]);
        classification += v;
        grad.set(i, BOX_DIM, cls_weight * d / n as f64);
    }
    regression /= num_pos;
    if n > 0 {
        classification /= n as f64;
    }
    LossValue {
        total: regression + cls_weight * classification,
        regression,
        classification,
        grad,
        signature,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub reg_iou_threshold: f64,
    pub cls_iou_threshold: f64,
    pub cls_weight: f64,
    /// Frames whose gradients are averaged into one Adam step.
    pub batch_frames: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            seed: 0,
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            reg_iou_threshold: 0.3,
            cls_iou_threshold: 0.5,
            cls_weight: 1.0,
            batch_frames: 8,
        }
    }
}

/// A frame with its graph, edge batch and targets computed once.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub proposals: ProposalSet,
    pub graph: RelationGraph,
    pub targets: FrameTargets,
    edges: EdgeBatch,
}

impl PreparedFrame {
    pub fn new(frame: &Frame, config: &RelationConfig, train: &TrainConfig) -> Result<Self, RelationError> {
        let graph = config.strategy.build(&frame.proposals.centers())?;
        Ok(Self::with_graph(frame, graph, config, train))
    }

    pub fn with_graph(
        frame: &Frame,
        graph: RelationGraph,
        config: &RelationConfig,
        train: &TrainConfig,
    ) -> Self {
        let edges = EdgeBatch::new(frame.proposals.boxes(), &graph, config.center_scale);
        Self {
            proposals: frame.proposals.clone(),
            targets: assign_targets(frame, train.reg_iou_threshold, train.cls_iou_threshold),
            graph,
            edges,
        }
    }
}

/// Loss, gradients in [`RelationModel::tensors`] order, and an activation
/// signature covering ReLU masks, max-pool winners and smooth-L1 branches.
#[derive(Debug, Clone)]
pub struct LossAndGradients {
    pub loss: LossValue,
    pub gradients: Vec<Matrix>,
    pub signature: u64,
}

impl RelationModel {
    fn head_output(&self, tape: &mut Tape, frame: &PreparedFrame, trainable: bool) -> Result<(crate::nn::Var, super::ModuleVars, crate::nn::MlpVars), RelationError> {
        let mv = self.module.register(tape, trainable);
        let hv = if trainable {
            self.head.mlp.register(tape)
        } else {
            self.head.mlp.register_frozen(tape)
        };
        let (refined, _) = self.module.forward_on_tape(tape, &mv, &frame.proposals, &frame.edges)?;
        let out = mlp_forward(tape, self.head.mlp.spec(), &hv, refined)?;
        Ok((out, mv, hv))
    }

    pub fn loss_and_gradients(
        &self,
        frame: &PreparedFrame,
        cls_weight: f64,
    ) -> Result<LossAndGradients, RelationError> {
        let mut tape = Tape::new();
        let (out, mv, hv) = self.head_output(&mut tape, frame, true)?;
        let loss = toy_loss(tape.value(out), &frame.targets, cls_weight);
        let grads = tape.backward(out, &loss.grad)?;
        let mut gradients = self.module.gradients(&mv, &grads);
        gradients.extend(hv.gradients(&grads, &self.head.mlp).tensors().into_iter().cloned());
        let signature = tape.activation_signature() ^ loss.signature.rotate_left(17);
        Ok(LossAndGradients {
            loss,
            gradients,
            signature,
        })
    }

    /// Loss only, on a frozen tape.
    pub fn loss_value(&self, frame: &PreparedFrame, cls_weight: f64) -> Result<(f64, u64), RelationError> {
        let mut tape = Tape::new();
        let (out, _, _) = self.head_output(&mut tape, frame, false)?;
        let loss = toy_loss(tape.value(out), &frame.targets, cls_weight);
        Ok((
            loss.total,
            tape.activation_signature() ^ loss.signature.rotate_left(17),
        ))
    }

    /// Refined boxes for a prepared frame.
    pub fn refine_prepared(&self, frame: &PreparedFrame) -> Result<Vec<Box3D>, RelationError> {
        let mut tape = Tape::new();
        let (out, _, _) = self.head_output(&mut tape, frame, false)?;
        let head = split_head_output(tape.value(out));
        Ok(frame
            .proposals
            .boxes()
            .iter()
            .enumerate()
            .map(|(i, b)| apply_residual(b, head.residuals.row(i)))
            .collect())
    }
}

/// One row of the training history. Epoch 0 is the untrained model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's frames.
    pub loss: f64,
    /// Mean `|wrap(theta_refined - theta_gt)|` over validation positives.
    pub heading_mae: f64,
    /// Mean center distance over validation positives (m).
    pub center_mae: f64,
}

impl EpochMetrics {
    pub const CSV_HEADER: &'static str = "epoch,loss,heading_mae,center_mae";

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.loss, self.heading_mae, self.center_mae)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: RelationModel,
    pub history: Vec<EpochMetrics>,
}

fn validation_errors(model: &RelationModel, val: &[PreparedFrame]) -> Result<(f64, f64), RelationError> {
    let mut heading = 0.0;
    let mut center = 0.0;
    let mut count = 0usize;
    for frame in val {
        if frame.proposals.is_empty() {
            continue;
        }
        let refined = model.refine_prepared(frame)?;
        for (r, gt) in refined.iter().zip(&frame.targets.matched) {
            if let Some(g) = gt {
                heading += normalize_angle(r.theta - g.theta).abs();
                let (dx, dy, dz) = (r.x - g.x, r.y - g.y, r.z - g.z);
                center += (dx * dx + dy * dy + dz * dz).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((heading / count as f64, center / count as f64))
}

/// Central finite-difference check of [`RelationModel::loss_and_gradients`]
/// over every parameter of `model` on one prepared frame.
pub fn loss_gradient_check(
    model: &RelationModel,
    frame: &PreparedFrame,
    cls_weight: f64,
    step: f64,
) -> Result<Result<FdReport, KinkCrossed>, RelationError> {
    let lg = model.loss_and_gradients(frame, cls_weight)?;
    let params = flatten(&model.tensors());
    let analytic = flatten(&lg.gradients.iter().collect::<Vec<_>>());
    let mut probe = model.clone();
    let mut failure = None;
    let report = finite_difference_check_guarded(
        |p| {
            unflatten_into(&mut probe.tensors_mut(), p);
            match probe.loss_value(frame, cls_weight) {
                Ok(v) => v,
                Err(e) => {
                    failure.get_or_insert(e);
                    (f64::NAN, 0)
                }
            }
        },
        &params,
        &analytic,
        step,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Trains a fresh model on `train` and reports validation errors on `val`
/// after every epoch. Parameters and frame order both derive from
/// `train_config.seed`.
pub fn toy_train(
    train: &[Frame],
    val: &[Frame],
    config: &RelationConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome, RelationError> {
    let model = RelationModel::new(config.clone(), train_config.seed)?;
    train_model(model, train, val, train_config)
}

/// Continues training an existing model.
pub fn train_model(
    mut model: RelationModel,
    train: &[Frame],
    val: &[Frame],
    train_config: &TrainConfig,
) -> Result<TrainOutcome, RelationError> {
    let config = model.config().clone();
    let prepare = |frames: &[Frame]| -> Result<Vec<PreparedFrame>, RelationError> {
        frames
            .iter()
            .map(|f| PreparedFrame::new(f, &config, train_config))
            .collect()
    };
    let train_frames = prepare(train)?;
    let val_frames = prepare(val)?;
    let cls_weight = train_config.cls_weight;

    let mut history = Vec::with_capacity(train_config.epochs + 1);
    let mut initial_loss = 0.0;
    for f in &train_frames {
        initial_loss += model.loss_value(f, cls_weight)?.0;
    }
    let (h0, c0) = validation_errors(&model, &val_frames)?;
    history.push(EpochMetrics {
        epoch: 0,
        loss: initial_loss / train_frames.len().max(1) as f64,
        heading_mae: h0,
        center_mae: c0,
    });

    let mut adam = AdamState::new(train_config.adam, &model.tensors());
    let mut order_rng = rng::stream(train_config.seed, "train-order");
    let mut order: Vec<usize> = (0..train_frames.len()).collect();
    for epoch in 1..=train_config.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(train_config.batch_frames.max(1)) {
            let mut sum: Option<Vec<Matrix>> = None;
            let mut used = 0usize;
            for &idx in batch {
                let frame = &train_frames[idx];
                if frame.proposals.is_empty() {
                    continue;
                }
                let lg = model.loss_and_gradients(frame, cls_weight)?;
                epoch_loss += lg.loss.total;
                used += 1;
                match &mut sum {
                    None => sum = Some(lg.gradients),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&lg.gradients) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            let Some(mut grads) = sum else { continue };
            if used > 1 {
                let inv = 1.0 / used as f64;
                for g in &mut grads {
                    g.data_mut().iter_mut().for_each(|v| *v *= inv);
                }
            }
            let grads: Vec<&Matrix> = grads.iter().collect();
            adam.step(&mut model.tensors_mut(), &grads)?;
        }
        let (h, c) = validation_errors(&model, &val_frames)?;
        history.push(EpochMetrics {
            epoch,
            loss: epoch_loss / train_frames.len().max(1) as f64,
            heading_mae: h,
            center_mae: c,
        });
    }
    Ok(TrainOutcome { model, history })
}
