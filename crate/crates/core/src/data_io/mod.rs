//! Label parsing, the JSON-Lines frame format and synthetic scenes.

mod frames;
mod kitti;
mod synth;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Box3D, GeometryError};
use crate::nn::Matrix;

pub use frames::{
    load_frames, read_frames, save_frames, write_atomic, write_frames, FrameFileError,
};
pub use kitti::{
    kitti_camera_to_box, box_to_kitti_camera, parse_kitti_label_line, parse_kitti_labels,
    KittiParseError,
};
pub use synth::{
    bbox2d_proxy, generate_frames, generate_scene, ScenePattern, SceneSpec, FOCAL_PX,
};

/// Object categories of the KITTI label format.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ObjectClass {
    Car,
    Van,
    Truck,
    Pedestrian,
    PersonSitting,
    Cyclist,
    Tram,
    Misc,
    DontCare,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 9] = [
        ObjectClass::Car,
        ObjectClass::Van,
        ObjectClass::Truck,
        ObjectClass::Pedestrian,
        ObjectClass::PersonSitting,
        ObjectClass::Cyclist,
        ObjectClass::Tram,
        ObjectClass::Misc,
        ObjectClass::DontCare,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectClass::Car => "Car",
            ObjectClass::Van => "Van",
            ObjectClass::Truck => "Truck",
            ObjectClass::Pedestrian => "Pedestrian",
            ObjectClass::PersonSitting => "Person_sitting",
            ObjectClass::Cyclist => "Cyclist",
            ObjectClass::Tram => "Tram",
            ObjectClass::Misc => "Misc",
            ObjectClass::DontCare => "DontCare",
        }
    }

    /// Default match threshold of the KITTI protocol: 0.7 for cars, 0.5 for
    /// pedestrians and cyclists.
    pub fn default_iou_threshold(self) -> f64 {
        match self {
            ObjectClass::Pedestrian | ObjectClass::PersonSitting | ObjectClass::Cyclist => 0.5,
            _ => 0.7,
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown object class `{0}`")]
pub struct UnknownClass(pub String);

impl FromStr for ObjectClass {
    type Err = UnknownClass;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ObjectClass::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownClass(s.to_string()))
    }
}

impl TryFrom<String> for ObjectClass {
    type Error = UnknownClass;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<ObjectClass> for String {
    fn from(c: ObjectClass) -> Self {
        c.as_str().to_string()
    }
}

/// One annotated object. `box3d` is `None` only for `DontCare` regions,
/// which carry no 3D geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBox {
    #[serde(rename = "class")]
    pub class: ObjectClass,
    pub truncation: f64,
    pub occlusion: u8,
    pub alpha: f64,
    /// Image-plane box `[left, top, right, bottom]` in pixels.
    pub bbox2d: [f64; 4],
    #[serde(rename = "box")]
    pub box3d: Option<Box3D>,
    pub score: Option<f64>,
}

impl LabeledBox {
    pub fn is_ignorable(&self) -> bool {
        self.class == ObjectClass::DontCare || self.box3d.is_none()
    }

    pub fn bbox_height(&self) -> f64 {
        self.bbox2d[3] - self.bbox2d[1]
    }
}

/// Proposals of one frame with their RoI features (`n x d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawProposals", into = "RawProposals")]
pub struct ProposalSet {
    boxes: Vec<Box3D>,
    features: Matrix,
    classes: Vec<ObjectClass>,
    scores: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawProposals {
    boxes: Vec<Box3D>,
    features: Vec<Vec<f64>>,
    classes: Vec<ObjectClass>,
    scores: Vec<f64>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProposalError {
    #[error("proposal arrays disagree in length: {boxes} boxes, {features} feature rows, {classes} classes, {scores} scores")]
    LengthMismatch {
        boxes: usize,
        features: usize,
        classes: usize,
        scores: usize,
    },
    #[error("feature row {row} has {got} values, expected {expected}")]
    RaggedFeatures {
        row: usize,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value in proposal {0}")]
    NonFinite(usize),
}

impl TryFrom<RawProposals> for ProposalSet {
    type Error = ProposalError;

    fn try_from(raw: RawProposals) -> Result<Self, Self::Error> {
        let d = raw.features.first().map_or(0, Vec::len);
        for (row, f) in raw.features.iter().enumerate() {
            if f.len() != d {
                return Err(ProposalError::RaggedFeatures {
                    row,
                    expected: d,
                    got: f.len(),
                });
            }
        }
        let features = Matrix::from_rows(&raw.features, d).expect("rows checked above");
        ProposalSet::new(raw.boxes, features, raw.classes, raw.scores)
    }
}

impl From<ProposalSet> for RawProposals {
    fn from(p: ProposalSet) -> Self {
        RawProposals {
            features: p.features.to_rows(),
            boxes: p.boxes,
            classes: p.classes,
            scores: p.scores,
        }
    }
}

impl ProposalSet {
    pub fn new(
        boxes: Vec<Box3D>,
        features: Matrix,
        classes: Vec<ObjectClass>,
        scores: Vec<f64>,
    ) -> Result<Self, ProposalError> {
        let n = boxes.len();
        if features.rows() != n || classes.len() != n || scores.len() != n {
            return Err(ProposalError::LengthMismatch {
                boxes: n,
                features: features.rows(),
                classes: classes.len(),
                scores: scores.len(),
            });
        }
        for (i, score) in scores.iter().enumerate() {
            if !features.row(i).iter().all(|v| v.is_finite()) || !score.is_finite() {
                return Err(ProposalError::NonFinite(i));
            }
        }
        Ok(Self {
            boxes,
            features,
            classes,
            scores,
        })
    }

    pub fn empty(feature_dim: usize) -> Self {
        Self {
            boxes: Vec::new(),
            features: Matrix::zeros(0, feature_dim),
            classes: Vec::new(),
            scores: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn boxes(&self) -> &[Box3D] {
        &self.boxes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn classes(&self) -> &[ObjectClass] {
        &self.classes
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        self.boxes.iter().map(Box3D::center).collect()
    }

    /// Reorders proposals: old proposal `i` moves to position `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.len();
        assert_eq!(perm.len(), n, "permutation length");
        let mut order = vec![0; n];
        for (old, &new) in perm.iter().enumerate() {
            order[new] = old;
        }
        let mut features = Matrix::zeros(n, self.feature_dim());
        for (new, &old) in order.iter().enumerate() {
            features.row_mut(new).copy_from_slice(self.features.row(old));
        }
        Self {
            boxes: order.iter().map(|&o| self.boxes[o]).collect(),
            features,
            classes: order.iter().map(|&o| self.classes[o]).collect(),
            scores: order.iter().map(|&o| self.scores[o]).collect(),
        }
    }

    /// Copy with every box translated by `t`.
    pub fn translated(&self, t: [f64; 3]) -> Self {
        let mut out = self.clone();
        for b in &mut out.boxes {
            b.x += t[0];
            b.y += t[1];
            b.z += t[2];
        }
        out
    }

    pub fn features_mut(&mut self) -> &mut Matrix {
        &mut self.features
    }
}

/// One frame: annotations plus first-stage proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: String,
    pub ground_truth: Vec<LabeledBox>,
    pub proposals: ProposalSet,
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Proposal(#[from] ProposalError),
    #[error("invalid scene spec: {0}")]
    BadSceneSpec(String),
}
