//! Relation GNN over proposal graphs.
//!
//! Node states start as `v0_i = init_mlp([f_i, b_i])`. Each layer computes,
//! for every directed edge `i <- j`, `edge_mlp_l([v_j - v_i, b_j - b_i, v_i])`
//! and takes the column-wise max over `j in N(i)`; nodes without neighbours
//! keep their state. The states of all layers are concatenated per node and
//! projected to `output_dim`.

mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_io::ProposalSet;
use crate::geometry::{normalize_angle, Box3D, GeometryError};
use crate::nn::{MlpParams, MlpSpec, MlpVars, Matrix, NnError, Tape, Var};
use crate::rng;
use crate::spatial_graph::{GraphError, GraphStrategy, RelationGraph};

pub use train::{
    assign_targets, loss_gradient_check, smooth_l1, toy_loss, toy_train, train_model, EpochMetrics, FrameTargets,
    LossAndGradients, LossValue, PreparedFrame, TrainConfig, TrainOutcome, SMOOTH_L1_BETA,
};

pub const BOX_DIM: usize = 7;
/// Refined sizes never drop below this (m).
pub const MIN_BOX_SIZE: f64 = 1e-3;
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
/// Scale applied to the head's output-layer weights at initialization.
pub const HEAD_OUTPUT_GAIN: f64 = 0.01;

#[derive(Debug, Error)]
pub enum RelationError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("proposal features have {got} columns, module expects {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("graph has {graph} nodes but there are {proposals} proposals")]
    GraphSize { graph: usize, proposals: usize },
    #[error("invalid relation config: {0}")]
    BadConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Which parts of the relation module are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    /// Feed the proposal box into the node initialization.
    pub use_init_box: bool,
    /// Feed `b_j - b_i` into each edge MLP.
    pub use_box_diff: bool,
    /// Concatenate the states of all layers; otherwise only the last.
    pub use_feature_append: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            use_init_box: true,
            use_box_diff: true,
            use_feature_append: true,
        }
    }
}

impl AblationFlags {
    /// Parses a comma-separated list of enabled components, e.g.
    /// `"init_box,box_diff"`. An empty string disables everything.
    pub fn parse_list(s: &str) -> Result<Self, String> {
        let mut flags = AblationFlags {
            use_init_box: false,
            use_box_diff: false,
            use_feature_append: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "init_box" => flags.use_init_box = true,
                "box_diff" => flags.use_box_diff = true,
                "feature_append" => flags.use_feature_append = true,
                other => {
                    return Err(format!(
                        "unknown ablation component `{other}` (expected init_box, box_diff, feature_append)"
                    ))
                }
            }
        }
        Ok(flags)
    }

    pub fn to_list(self) -> String {
        let mut parts = Vec::new();
        if self.use_init_box {
            parts.push("init_box");
        }
        if self.use_box_diff {
            parts.push("box_diff");
        }
        if self.use_feature_append {
            parts.push("feature_append");
        }
        parts.join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelationConfig {
    pub strategy: GraphStrategy,
    pub num_layers: usize,
    pub node_dim: usize,
    pub input_feature_dim: usize,
    pub output_dim: usize,
    /// Hidden widths of each edge MLP; `None` means one layer of `node_dim`.
    pub edge_hidden: Option<Vec<usize>>,
    /// Hidden widths of the init MLP; `None` means one layer of `node_dim`.
    pub init_hidden: Option<Vec<usize>>,
    /// Hidden widths of the refinement head.
    pub head_hidden: Vec<usize>,
    pub ablation: AblationFlags,
    /// Subtract the per-frame mean center from the boxes fed to the init MLP.
    pub whiten_centers: bool,
    /// Center components of init-MLP boxes and of box differences are
    /// divided by this before entering the networks (1 = raw meters).
    /// `box_difference` itself is unaffected.
    pub center_scale: f64,
}

impl Default for RelationConfig {
    fn default() -> Self {
        Self {
            strategy: GraphStrategy::default(),
            num_layers: 4,
            node_dim: 256,
            input_feature_dim: 32,
            output_dim: 256,
            edge_hidden: None,
            init_hidden: None,
            head_hidden: vec![64],
            ablation: AblationFlags::default(),
            whiten_centers: false,
            center_scale: 1.0,
        }
    }
}

impl RelationConfig {
    /// Desk-scale preset used by the ablation harness: two layers of width
    /// 16 over 32-d synthetic features, centers scaled by 20 m.
    pub fn toy(strategy: GraphStrategy, ablation: AblationFlags) -> Self {
        Self {
            strategy,
            num_layers: 2,
            node_dim: 16,
            input_feature_dim: 32,
            output_dim: 16,
            head_hidden: vec![16],
            ablation,
            center_scale: 20.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), RelationError> {
        self.strategy.validate()?;
        let bad = |m: &str| Err(RelationError::BadConfig(m.to_string()));
        if self.num_layers == 0 {
            return bad("num_layers must be >= 1");
        }
        if !(self.center_scale > 0.0 && self.center_scale.is_finite()) {
            return bad("center_scale must be positive and finite");
        }
        if self.node_dim == 0 || self.input_feature_dim == 0 || self.output_dim == 0 {
            return bad("node_dim, input_feature_dim and output_dim must be >= 1");
        }
        let hidden = [&self.edge_hidden, &self.init_hidden];
        if hidden.iter().any(|h| h.as_ref().is_some_and(|h| h.contains(&0)))
            || self.head_hidden.contains(&0)
        {
            return bad("hidden widths must be >= 1");
        }
        Ok(())
    }

    fn with_hidden(input: usize, hidden: &[usize], output: usize) -> MlpSpec {
        let mut dims = vec![input];
        dims.extend_from_slice(hidden);
        dims.push(output);
        MlpSpec::new(dims).expect("validated dims")
    }

    pub fn init_spec(&self) -> MlpSpec {
        let input = self.input_feature_dim + if self.ablation.use_init_box { BOX_DIM } else { 0 };
        let hidden = self.init_hidden.clone().unwrap_or_else(|| vec![self.node_dim]);
        Self::with_hidden(input, &hidden, self.node_dim)
    }

    pub fn edge_spec(&self) -> MlpSpec {
        let box_cols = if self.ablation.use_box_diff { BOX_DIM } else { 0 };
        let hidden = self.edge_hidden.clone().unwrap_or_else(|| vec![self.node_dim]);
        Self::with_hidden(2 * self.node_dim + box_cols, &hidden, self.node_dim)
    }

    /// Width of the per-node concatenation fed to the projection.
    pub fn concat_dim(&self) -> usize {
        if self.ablation.use_feature_append {
            (self.num_layers + 1) * self.node_dim
        } else {
            self.node_dim
        }
    }

    pub fn projection_spec(&self) -> MlpSpec {
        Self::with_hidden(self.concat_dim(), &[], self.output_dim)
    }

    /// Head output: 7 box residuals then one confidence logit.
    pub fn head_spec(&self) -> MlpSpec {
        Self::with_hidden(self.output_dim, &self.head_hidden, BOX_DIM + 1)
    }
}

/// `(x, y, z, h, w, l, theta)`.
pub fn encode_box(b: &Box3D) -> [f64; BOX_DIM] {
    b.to_array()
}

pub fn decode_box(v: [f64; BOX_DIM]) -> Result<Box3D, GeometryError> {
    Box3D::from_array(v)
}

/// `encode(b_j) - encode(b_i)` with the heading component wrapped.
pub fn box_difference(b_j: &Box3D, b_i: &Box3D) -> [f64; BOX_DIM] {
    let a = encode_box(b_j);
    let b = encode_box(b_i);
    let mut d = [0.0; BOX_DIM];
    for k in 0..BOX_DIM {
        d[k] = a[k] - b[k];
    }
    d[6] = normalize_angle(d[6]);
    d
}

/// Mean box center of a frame (zero for an empty frame).
pub fn mean_center(boxes: &[Box3D]) -> [f64; 3] {
    let mut offset = [0.0; 3];
    if boxes.is_empty() {
        return offset;
    }
    for b in boxes {
        let c = b.center();
        for k in 0..3 {
            offset[k] += c[k];
        }
    }
    offset.map(|s| s / boxes.len() as f64)
}

/// Per-layer node states `V0..VL`, each `n x node_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeStates {
    pub layers: Vec<Matrix>,
}

/// Projected per-proposal features, `n x output_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedFeatures {
    pub features: Matrix,
}

/// Edge lists of one frame flattened for batched evaluation.
#[derive(Debug, Clone)]
pub(crate) struct EdgeBatch {
    src: Vec<usize>,
    dst: Vec<usize>,
    box_diff: Matrix,
    /// Edge rows pooled into each non-isolated node, in node order.
    groups: Vec<Vec<usize>>,
    /// For node `i`: its row in `[pooled; V]`.
    select: Vec<usize>,
}

impl EdgeBatch {
    /// `center_scale` divides the center components of every box
    /// difference before it enters an edge MLP.
    pub(crate) fn new(boxes: &[Box3D], graph: &RelationGraph, center_scale: f64) -> Self {
        let n = graph.num_nodes();
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut diffs = Vec::new();
        let mut groups = Vec::new();
        let mut select = Vec::with_capacity(n);
        let pooled = (0..n).filter(|&i| !graph.neighbors(i).is_empty()).count();
        for i in 0..n {
            let nbrs = graph.neighbors(i);
            if nbrs.is_empty() {
                select.push(pooled + i);
                continue;
            }
            select.push(groups.len());
            let mut group = Vec::with_capacity(nbrs.len());
            for &j in nbrs {
                group.push(src.len());
                src.push(j);
                dst.push(i);
                let mut diff = box_difference(&boxes[j], &boxes[i]);
                for v in &mut diff[..3] {
                    *v /= center_scale;
                }
                diffs.push(diff.to_vec());
            }
            groups.push(group);
        }
        let box_diff = Matrix::from_rows(&diffs, BOX_DIM).expect("fixed width");
        Self {
            src,
            dst,
            box_diff,
            groups,
            select,
        }
    }
}

/// Tape handles for all module parameters.
#[derive(Debug, Clone)]
pub struct ModuleVars {
    init: MlpVars,
    edges: Vec<MlpVars>,
    projection: MlpVars,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationModule {
    config: RelationConfig,
    init_mlp: MlpParams,
    edge_mlps: Vec<MlpParams>,
    projection: MlpParams,
}

impl RelationModule {
    /// Fresh parameters; each network draws from its own named stream of
    /// `seed`, so ablations that drop inputs leave the other networks alone.
    pub fn new(config: RelationConfig, seed: u64) -> Result<Self, RelationError> {
        config.validate()?;
        let init_mlp = MlpParams::init(&config.init_spec(), &mut rng::stream(seed, "init/init-mlp"));
        let edge_mlps = (0..config.num_layers)
            .map(|l| {
                MlpParams::init(
                    &config.edge_spec(),
                    &mut rng::indexed_stream(seed, "init/edge-mlp", l as u64),
                )
            })
            .collect();
        let projection =
            MlpParams::init(&config.projection_spec(), &mut rng::stream(seed, "init/projection"));
        Ok(Self {
            config,
            init_mlp,
            edge_mlps,
            projection,
        })
    }

    /// Assembles a module from explicit parameters, checking their shapes.
    pub fn from_parts(
        config: RelationConfig,
        init_mlp: MlpParams,
        edge_mlps: Vec<MlpParams>,
        projection: MlpParams,
    ) -> Result<Self, RelationError> {
        config.validate()?;
        let module = Self {
            config,
            init_mlp,
            edge_mlps,
            projection,
        };
        module.check_shapes()?;
        Ok(module)
    }

    fn check_shapes(&self) -> Result<(), RelationError> {
        let c = &self.config;
        let mismatch = |what: &str| {
            Err(RelationError::Checkpoint(format!(
                "{what} parameters do not match the config"
            )))
        };
        if self.init_mlp.spec() != &c.init_spec() {
            return mismatch("init MLP");
        }
        if self.edge_mlps.len() != c.num_layers
            || self.edge_mlps.iter().any(|p| p.spec() != &c.edge_spec())
        {
            return mismatch("edge MLP");
        }
        if self.projection.spec() != &c.projection_spec() {
            return mismatch("projection");
        }
        Ok(())
    }

    pub fn config(&self) -> &RelationConfig {
        &self.config
    }

    pub fn init_mlp(&self) -> &MlpParams {
        &self.init_mlp
    }

    pub fn edge_mlps(&self) -> &[MlpParams] {
        &self.edge_mlps
    }

    pub fn projection(&self) -> &MlpParams {
        &self.projection
    }

    /// Parameter tensors in a fixed order: init, edge 0..L-1, projection.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = self.init_mlp.tensors();
        for e in &self.edge_mlps {
            out.extend(e.tensors());
        }
        out.extend(self.projection.tensors());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = self.init_mlp.tensors_mut();
        for e in &mut self.edge_mlps {
            out.extend(e.tensors_mut());
        }
        out.extend(self.projection.tensors_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModuleVars {
        let reg = |p: &MlpParams, tape: &mut Tape| {
            if trainable {
                p.register(tape)
            } else {
                p.register_frozen(tape)
            }
        };
        ModuleVars {
            init: reg(&self.init_mlp, tape),
            edges: self.edge_mlps.iter().map(|p| reg(p, tape)).collect(),
            projection: reg(&self.projection, tape),
        }
    }

    /// Gradients in [`RelationModule::tensors`] order.
    pub fn gradients(&self, vars: &ModuleVars, grads: &crate::nn::Gradients) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = Vec::new();
        let mut take = |v: &MlpVars, p: &MlpParams| {
            let g = v.gradients(grads, p);
            out.extend(g.tensors().into_iter().cloned());
        };
        take(&vars.init, &self.init_mlp);
        for (v, p) in vars.edges.iter().zip(&self.edge_mlps) {
            take(v, p);
        }
        take(&vars.projection, &self.projection);
        out
    }

    fn check_proposals(&self, proposals: &ProposalSet) -> Result<(), RelationError> {
        let d = proposals.feature_dim();
        if d != self.config.input_feature_dim {
            return Err(RelationError::FeatureDim {
                expected: self.config.input_feature_dim,
                got: d,
            });
        }
        Ok(())
    }

    /// Input rows `[f_i, b_i]` (or `f_i` alone without the init box).
    fn init_input(&self, proposals: &ProposalSet) -> Matrix {
        let n = proposals.len();
        let d = proposals.feature_dim();
        if !self.config.ablation.use_init_box {
            return proposals.features().clone();
        }
        let offset = if self.config.whiten_centers {
            mean_center(proposals.boxes())
        } else {
            [0.0; 3]
        };
        let scale = self.config.center_scale;
        let mut m = Matrix::zeros(n, d + BOX_DIM);
        for i in 0..n {
            let row = m.row_mut(i);
            row[..d].copy_from_slice(proposals.features().row(i));
            let mut b = encode_box(&proposals.boxes()[i]);
            for k in 0..3 {
                b[k] = (b[k] - offset[k]) / scale;
            }
            row[d..].copy_from_slice(&b);
        }
        m
    }

    fn layer_on_tape(
        &self,
        tape: &mut Tape,
        vars: &MlpVars,
        v: Var,
        edges: &EdgeBatch,
    ) -> Result<Var, RelationError> {
        if edges.groups.is_empty() {
            return Ok(v);
        }
        let vj = tape.gather_rows(v, edges.src.clone())?;
        let vi = tape.gather_rows(v, edges.dst.clone())?;
        let diff = tape.sub(vj, vi)?;
        let input = if self.config.ablation.use_box_diff {
            let bd = tape.constant(edges.box_diff.clone());
            tape.concat_cols(&[diff, bd, vi])?
        } else {
            tape.concat_cols(&[diff, vi])?
        };
        let spec = self.edge_mlps[0].spec();
        let messages = crate::nn::mlp_forward(tape, spec, vars, input)?;
        let pooled = tape.max_pool_groups(messages, &edges.groups)?;
        let stacked = tape.concat_rows(&[pooled, v])?;
        Ok(tape.gather_rows(stacked, edges.select.clone())?)
    }

    /// Records the full forward pass; returns `(refined, [V0..VL])`.
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModuleVars,
        proposals: &ProposalSet,
        edges: &EdgeBatch,
    ) -> Result<(Var, Vec<Var>), RelationError> {
        self.check_proposals(proposals)?;
        let x = tape.constant(self.init_input(proposals));
        let mut v = crate::nn::mlp_forward(tape, self.init_mlp.spec(), &vars.init, x)?;
        let mut states = vec![v];
        for ev in &vars.edges {
            v = self.layer_on_tape(tape, ev, v, edges)?;
            states.push(v);
        }
        let concat = if self.config.ablation.use_feature_append {
            tape.concat_cols(&states)?
        } else {
            v
        };
        let out = crate::nn::mlp_forward(tape, self.projection.spec(), &vars.projection, concat)?;
        Ok((out, states))
    }

    fn check_graph(&self, proposals: &ProposalSet, graph: &RelationGraph) -> Result<(), RelationError> {
        if graph.num_nodes() != proposals.len() {
            return Err(RelationError::GraphSize {
                graph: graph.num_nodes(),
                proposals: proposals.len(),
            });
        }
        Ok(())
    }

    /// `V0`, one row per proposal.
    pub fn init_nodes(&self, proposals: &ProposalSet) -> Result<Matrix, RelationError> {
        self.check_proposals(proposals)?;
        Ok(self.init_mlp.forward(&self.init_input(proposals))?)
    }

    /// One message-passing layer applied to `v` (`n x node_dim`).
    pub fn layer_forward(
        &self,
        layer: usize,
        v: &Matrix,
        boxes: &[Box3D],
        graph: &RelationGraph,
    ) -> Result<Matrix, RelationError> {
        if layer >= self.config.num_layers {
            return Err(RelationError::BadConfig(format!(
                "layer {layer} out of range for {} layers",
                self.config.num_layers
            )));
        }
        if graph.num_nodes() != v.rows() || boxes.len() != v.rows() {
            return Err(RelationError::GraphSize {
                graph: graph.num_nodes(),
                proposals: v.rows(),
            });
        }
        if v.cols() != self.config.node_dim {
            return Err(NnError::ShapeMismatch {
                op: "layer_forward",
                expected: format!("{} columns", self.config.node_dim),
                actual: format!("{} columns", v.cols()),
            }
            .into());
        }
        let mut tape = Tape::new();
        let vars = self.edge_mlps[layer].register_frozen(&mut tape);
        let x = tape.constant(v.clone());
        let edges = self.edge_batch(boxes, graph);
        let out = self.layer_on_tape(&mut tape, &vars, x, &edges)?;
        Ok(tape.value(out).clone())
    }

    /// Refined features and all node states for one frame.
    pub fn forward(
        &self,
        proposals: &ProposalSet,
        graph: &RelationGraph,
    ) -> Result<(RefinedFeatures, NodeStates), RelationError> {
        self.check_graph(proposals, graph)?;
        let mut tape = Tape::new();
        let vars = self.register(&mut tape, false);
        let edges = self.edge_batch(proposals.boxes(), graph);
        let (out, states) = self.forward_on_tape(&mut tape, &vars, proposals, &edges)?;
        Ok((
            RefinedFeatures {
                features: tape.value(out).clone(),
            },
            NodeStates {
                layers: states.iter().map(|&s| tape.value(s).clone()).collect(),
            },
        ))
    }

    pub(crate) fn edge_batch(&self, boxes: &[Box3D], graph: &RelationGraph) -> EdgeBatch {
        EdgeBatch::new(boxes, graph, self.config.center_scale)
    }

    /// Builds the graph with the configured strategy.
    pub fn build_graph(&self, proposals: &ProposalSet) -> Result<RelationGraph, RelationError> {
        Ok(self.config.strategy.build(&proposals.centers())?)
    }
}

/// Per-proposal head outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `n x 7` additive box residuals.
    pub residuals: Matrix,
    pub logits: Vec<f64>,
}

/// Small MLP from refined features to box residuals and a confidence logit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RefineHead {
    pub mlp: MlpParams,
}

impl RefineHead {
    /// Standard initialization with the output layer scaled by
    /// [`HEAD_OUTPUT_GAIN`], so an untrained head starts near the proposals.
    pub fn new(config: &RelationConfig, seed: u64) -> Self {
        let mut mlp = MlpParams::init(&config.head_spec(), &mut rng::stream(seed, "init/head"));
        if let Some(w) = mlp.weights_mut().last_mut() {
            w.data_mut().iter_mut().for_each(|v| *v *= HEAD_OUTPUT_GAIN);
        }
        Self { mlp }
    }

    pub fn zeros(config: &RelationConfig) -> Self {
        Self {
            mlp: MlpParams::zeros(&config.head_spec()),
        }
    }

    pub fn forward(&self, refined: &RefinedFeatures) -> Result<HeadOutput, RelationError> {
        Ok(split_head_output(&self.mlp.forward(&refined.features)?))
    }
}

pub(crate) fn split_head_output(out: &Matrix) -> HeadOutput {
    let n = out.rows();
    let mut residuals = Matrix::zeros(n, BOX_DIM);
    let mut logits = Vec::with_capacity(n);
    for i in 0..n {
        residuals.row_mut(i).copy_from_slice(&out.row(i)[..BOX_DIM]);
        logits.push(out.row(i)[BOX_DIM]);
    }
    HeadOutput { residuals, logits }
}

/// `b + r` componentwise, heading wrapped, sizes floored at
/// [`MIN_BOX_SIZE`].
pub fn apply_residual(b: &Box3D, r: &[f64]) -> Box3D {
    let v = encode_box(b);
    let mut out = [0.0; BOX_DIM];
    for k in 0..BOX_DIM {
        out[k] = v[k] + r[k];
    }
    for s in &mut out[3..6] {
        *s = s.max(MIN_BOX_SIZE);
    }
    out[6] = normalize_angle(out[6]);
    Box3D::from_array(out).expect("sizes floored and components finite")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One refined detection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refined {
    pub box3d: Box3D,
    pub score: f64,
}

/// Relation module plus refinement head, the unit that is trained and
/// checkpointed.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationModel {
    pub module: RelationModule,
    pub head: RefineHead,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: RelationConfig,
    init_mlp: MlpParams,
    edge_mlps: Vec<MlpParams>,
    projection: MlpParams,
    head: MlpParams,
}

impl RelationModel {
    pub fn new(config: RelationConfig, seed: u64) -> Result<Self, RelationError> {
        let head = RefineHead::new(&config, seed);
        Ok(Self {
            module: RelationModule::new(config, seed)?,
            head,
        })
    }

    pub fn config(&self) -> &RelationConfig {
        self.module.config()
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut t = self.module.tensors();
        t.extend(self.head.mlp.tensors());
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut t = self.module.tensors_mut();
        t.extend(self.head.mlp.tensors_mut());
        t
    }

    pub fn num_params(&self) -> usize {
        self.module.num_params() + self.head.mlp.num_params()
    }

    /// Head output for one frame with a given graph.
    pub fn predict_with_graph(
        &self,
        proposals: &ProposalSet,
        graph: &RelationGraph,
    ) -> Result<HeadOutput, RelationError> {
        let (refined, _) = self.module.forward(proposals, graph)?;
        self.head.forward(&refined)
    }

    /// Refined boxes and confidences, graph built with the configured
    /// strategy.
    pub fn refine(&self, proposals: &ProposalSet) -> Result<Vec<Refined>, RelationError> {
        let graph = self.module.build_graph(proposals)?;
        let out = self.predict_with_graph(proposals, &graph)?;
        Ok(proposals
            .boxes()
            .iter()
            .enumerate()
            .map(|(i, b)| Refined {
                box3d: apply_residual(b, out.residuals.row(i)),
                score: sigmoid(out.logits[i]),
            })
            .collect())
    }

    pub fn to_json(&self) -> String {
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: self.module.config.clone(),
            init_mlp: self.module.init_mlp.clone(),
            edge_mlps: self.module.edge_mlps.clone(),
            projection: self.module.projection.clone(),
            head: self.head.mlp.clone(),
        };
        serde_json::to_string(&ck).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RelationError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| RelationError::Checkpoint(e.to_string()))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(RelationError::Checkpoint(format!(
                "unsupported format_version {}",
                ck.format_version
            )));
        }
        if ck.head.spec() != &ck.config.head_spec() {
            return Err(RelationError::Checkpoint(
                "head parameters do not match the config".into(),
            ));
        }
        let module = RelationModule::from_parts(ck.config, ck.init_mlp, ck.edge_mlps, ck.projection)?;
        Ok(Self {
            module,
            head: RefineHead { mlp: ck.head },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::ObjectClass;
    use std::f64::consts::PI;

    fn small_config() -> RelationConfig {
        RelationConfig {
            strategy: GraphStrategy::Knn { k: 3 },
            num_layers: 2,
            node_dim: 5,
            input_feature_dim: 3,
            output_dim: 4,
            head_hidden: vec![6],
            ..RelationConfig::default()
        }
    }

    fn proposals(boxes: Vec<Box3D>, features: Vec<Vec<f64>>) -> ProposalSet {
        let n = boxes.len();
        let d = features.first().map_or(3, Vec::len);
        ProposalSet::new(
            boxes,
            Matrix::from_rows(&features, d).unwrap(),
            vec![ObjectClass::Car; n],
            vec![0.5; n],
        )
        .unwrap()
    }

    #[test]
    fn encode_order_and_round_trip() {
        assert_eq!(encode_box(&Box3D::unit()), [0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0]);
        let b = Box3D::new([1.0, 2.0, 3.0], [1.5, 1.6, 4.0], 0.7).unwrap();
        assert_eq!(encode_box(&b)[6], 0.7);
        assert_eq!(decode_box(encode_box(&b)).unwrap(), b);
    }

    #[test]
    fn box_difference_wraps_heading() {
        let bi = Box3D {
            theta: -3.0,
            ..Box3D::unit()
        };
        let bj = Box3D {
            theta: 3.0,
            ..Box3D::unit()
        };
        let d = box_difference(&bj, &bi);
        assert!((d[6] - (6.0 - 2.0 * PI)).abs() < 1e-12);
        assert_eq!(box_difference(&bi, &bi), [0.0; 7]);
    }

    #[test]
    fn empty_frame_gives_empty_states() {
        let m = RelationModule::new(small_config(), 1).unwrap();
        let p = ProposalSet::empty(3);
        let (f, s) = m.forward(&p, &RelationGraph::edgeless(0)).unwrap();
        assert_eq!(f.features.shape(), (0, 4));
        assert_eq!(s.layers.len(), 3);
        assert_eq!(m.init_nodes(&p).unwrap().shape(), (0, 5));
    }

    #[test]
    fn single_proposal_passes_through_every_layer() {
        let m = RelationModule::new(small_config(), 2).unwrap();
        let p = proposals(vec![Box3D::unit()], vec![vec![0.1, -0.2, 0.3]]);
        let (_, states) = m.forward(&p, &RelationGraph::edgeless(1)).unwrap();
        for s in &states.layers[1..] {
            assert_eq!(s, &states.layers[0]);
        }
    }

    #[test]
    fn singleton_neighbourhood_is_one_edge_evaluation() {
        let m = RelationModule::new(small_config(), 3).unwrap();
        let b0 = Box3D::unit();
        let b1 = Box3D::new([2.0, 1.0, 0.0], [1.0, 2.0, 3.0], 0.4).unwrap();
        let v = Matrix::from_rows(
            &[vec![0.1, 0.2, -0.3, 0.4, 0.5], vec![-0.5, 0.3, 0.2, 0.1, 0.0]],
            5,
        )
        .unwrap();
        let g = RelationGraph::from_neighbors(vec![vec![1], vec![]]).unwrap();
        let out = m.layer_forward(0, &v, &[b0, b1], &g).unwrap();
        let mut input: Vec<f64> = v.row(1).iter().zip(v.row(0)).map(|(a, b)| a - b).collect();
        input.extend(box_difference(&b1, &b0));
        input.extend_from_slice(v.row(0));
        let expected = m.edge_mlps()[0]
            .forward(&Matrix::from_vec(1, 17, input).unwrap())
            .unwrap();
        assert_eq!(out.row(0), expected.row(0));
        assert_eq!(out.row(1), v.row(1));
    }

    #[test]
    fn full_size_shape_contract() {
        let config = RelationConfig {
            input_feature_dim: 8,
            ..RelationConfig::default()
        };
        assert_eq!(config.concat_dim(), 1280);
        assert_eq!(config.edge_spec().input_dim(), 256 + 7 + 256);
        assert_eq!(config.init_spec().input_dim(), 8 + 7);
    }

    #[test]
    fn ablations_drop_inputs() {
        let config = RelationConfig {
            ablation: AblationFlags::parse_list("").unwrap(),
            ..small_config()
        };
        assert_eq!(config.init_spec().input_dim(), 3);
        assert_eq!(config.edge_spec().input_dim(), 10);
        assert_eq!(config.projection_spec().input_dim(), 5);
        assert_eq!(AblationFlags::parse_list("init_box,box_diff,feature_append").unwrap(), AblationFlags::default());
        assert_eq!(AblationFlags::default().to_list(), "init_box,box_diff,feature_append");
        assert!(AblationFlags::parse_list("init_box,attention").is_err());
    }

    #[test]
    fn residual_application_wraps_heading() {
        let b = Box3D {
            theta: PI / 2.0,
            ..Box3D::unit()
        };
        let r = apply_residual(&b, &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, PI]);
        assert!((r.theta + PI / 2.0).abs() < 1e-12);
        assert_eq!(apply_residual(&b, &[0.0; 7]), b);
        let shrunk = apply_residual(&b, &[0.0, 0.0, 0.0, -5.0, 0.0, 0.0, 0.0]);
        assert_eq!(shrunk.h, MIN_BOX_SIZE);
    }

    #[test]
    fn zero_head_keeps_proposals() {
        let config = small_config();
        let mut model = RelationModel::new(config.clone(), 4).unwrap();
        model.head = RefineHead::zeros(&config);
        let p = proposals(
            vec![Box3D::unit(), Box3D { x: 2.0, ..Box3D::unit() }],
            vec![vec![0.0; 3], vec![1.0; 3]],
        );
        let refined = model.refine(&p).unwrap();
        assert_eq!(refined[0].box3d, p.boxes()[0]);
        assert_eq!(refined[1].box3d, p.boxes()[1]);
        assert_eq!(refined[0].score, 0.5);
    }

    #[test]
    fn checkpoint_round_trip_and_validation() {
        let model = RelationModel::new(small_config(), 5).unwrap();
        let json = model.to_json();
        assert!(json.contains("\"config\""));
        assert!(json.contains("\"use_box_diff\":true"));
        assert_eq!(RelationModel::from_json(&json).unwrap(), model);
        let broken = json.replace("\"num_layers\":2", "\"num_layers\":3");
        assert!(RelationModel::from_json(&broken).is_err());
        assert!(RelationModel::from_json("{}").is_err());
    }

    #[test]
    fn wrong_feature_dim_is_an_error() {
        let m = RelationModule::new(small_config(), 6).unwrap();
        let p = proposals(vec![Box3D::unit()], vec![vec![0.0; 4]]);
        assert!(matches!(
            m.init_nodes(&p),
            Err(RelationError::FeatureDim { expected: 3, got: 4 })
        ));
    }
}
