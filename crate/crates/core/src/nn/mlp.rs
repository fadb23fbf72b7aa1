use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Gradients, Matrix, NnError, Tape, Var};

/// Current version tag written into parameter checkpoints.
pub const PARAM_FORMAT_VERSION: u32 = 1;

/// Layer widths of a fully connected network, input first. Hidden layers
/// use ReLU; the final layer is linear.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct MlpSpec {
    dims: Vec<usize>,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>) -> Result<Self, NnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::BadSpec(dims));
        }
        Ok(Self { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("spec has >= 2 dims")
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }
}

impl TryFrom<Vec<usize>> for MlpSpec {
    type Error = NnError;

    fn try_from(dims: Vec<usize>) -> Result<Self, Self::Error> {
        MlpSpec::new(dims)
    }
}

impl From<MlpSpec> for Vec<usize> {
    fn from(s: MlpSpec) -> Self {
        s.dims
    }
}

/// Weights (`fan_in x fan_out`, so `y = x W + b`) and `1 x fan_out` biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsFile", into = "ParamsFile")]
pub struct MlpParams {
    spec: MlpSpec,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

/// On-disk layout: per-layer flat row-major arrays.
#[derive(Serialize, Deserialize)]
struct ParamsFile {
    format_version: u32,
    dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl TryFrom<ParamsFile> for MlpParams {
    type Error = NnError;

    fn try_from(file: ParamsFile) -> Result<Self, Self::Error> {
        if file.format_version != PARAM_FORMAT_VERSION {
            return Err(NnError::FormatVersion(file.format_version));
        }
        let spec = MlpSpec::new(file.dims)?;
        let layers = spec.num_layers();
        if file.weights.len() != layers || file.biases.len() != layers {
            return Err(NnError::shape(
                "MlpParams",
                format!("{layers} layers"),
                format!("{} weights / {} biases", file.weights.len(), file.biases.len()),
            ));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, (w, b)) in file.weights.into_iter().zip(file.biases).enumerate() {
            let (fan_in, fan_out) = (spec.dims[l], spec.dims[l + 1]);
            weights.push(Matrix::from_vec(fan_in, fan_out, w)?);
            biases.push(Matrix::from_vec(1, fan_out, b)?);
        }
        Ok(Self {
            spec,
            weights,
            biases,
        })
    }
}

impl From<MlpParams> for ParamsFile {
    fn from(p: MlpParams) -> Self {
        ParamsFile {
            format_version: PARAM_FORMAT_VERSION,
            dims: p.spec.dims,
            weights: p.weights.into_iter().map(Matrix::into_data).collect(),
            biases: p.biases.into_iter().map(Matrix::into_data).collect(),
        }
    }
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let weights = spec
            .dims
            .windows(2)
            .map(|w| Matrix::zeros(w[0], w[1]))
            .collect();
        let biases = spec.dims[1..].iter().map(|&o| Matrix::zeros(1, o)).collect();
        Self {
            spec: spec.clone(),
            weights,
            biases,
        }
    }

    /// Weights uniform in `±sqrt(6 / fan_in)`, biases zero.
    pub fn init(spec: &MlpSpec, rng: &mut impl Rng) -> Self {
        let mut params = Self::zeros(spec);
        for w in &mut params.weights {
            let bound = (6.0 / w.rows() as f64).sqrt();
            for v in w.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Matrix] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Matrix] {
        &mut self.biases
    }

    /// All tensors, layer by layer as (weight, bias).
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data().len()).sum()
    }

    pub fn register(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Registers the parameters as constants (inference only).
    pub fn register_frozen(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            weights: self.weights.iter().map(|w| tape.constant(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.constant(b.clone())).collect(),
        }
    }

    /// Plain evaluation on a scratch tape.
    pub fn forward(&self, input: &Matrix) -> Result<Matrix, NnError> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let x = tape.constant(input.clone());
        let y = mlp_forward(&mut tape, &self.spec, &vars, x)?;
        Ok(tape.value(y).clone())
    }
}

/// Deterministic [`MlpParams::init`] from a seed.
pub fn init_params(spec: &MlpSpec, seed: u64) -> MlpParams {
    MlpParams::init(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Tape handles for one network's parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    weights: Vec<Var>,
    biases: Vec<Var>,
}

impl MlpVars {
    /// Collects gradients in the same layout as the parameters.
    pub fn gradients(&self, grads: &Gradients, like: &MlpParams) -> MlpParams {
        let mut out = MlpParams::zeros(like.spec());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.weights[l] = grads.get_or_zeros(*w, like.weights[l].shape());
            out.biases[l] = grads.get_or_zeros(*b, like.biases[l].shape());
        }
        out
    }
}

/// Row-wise MLP on the tape.
pub fn mlp_forward(
    tape: &mut Tape,
    spec: &MlpSpec,
    vars: &MlpVars,
    input: Var,
) -> Result<Var, NnError> {
    let cols = tape.value(input).cols();
    if cols != spec.input_dim() {
        return Err(NnError::shape(
            "mlp_forward",
            format!("{} input columns", spec.input_dim()),
            format!("{cols} input columns"),
        ));
    }
    let mut x = input;
    let last = spec.num_layers() - 1;
    for (l, (&w, &b)) in vars.weights.iter().zip(&vars.biases).enumerate() {
        let z = tape.matmul(x, w)?;
        let z = tape.add_bias(z, b)?;
        x = if l < last { tape.relu(z) } else { z };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3]).is_err());
        assert!(MlpSpec::new(vec![3, 0, 2]).is_err());
        let s = MlpSpec::new(vec![3, 4, 2]).unwrap();
        assert_eq!((s.input_dim(), s.output_dim(), s.num_layers()), (3, 2, 2));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let spec = MlpSpec::new(vec![3, 3]).unwrap();
        let mut p = MlpParams::zeros(&spec);
        p.weights_mut()[0] = Matrix::identity(3);
        let x = Matrix::from_vec(2, 3, vec![1.0, -2.0, 3.5, 0.0, 7.0, -1.0]).unwrap();
        assert_eq!(p.forward(&x).unwrap(), x);
    }

    #[test]
    fn hidden_relu_clips_negatives() {
        let spec = MlpSpec::new(vec![3, 3, 3]).unwrap();
        let mut p = MlpParams::zeros(&spec);
        p.weights_mut()[0] = Matrix::identity(3);
        p.weights_mut()[1] = Matrix::identity(3);
        let x = Matrix::from_vec(1, 3, vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(p.forward(&x).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_names_dims() {
        let spec = MlpSpec::new(vec![4, 2]).unwrap();
        let p = MlpParams::zeros(&spec);
        let err = p.forward(&Matrix::zeros(1, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("4 input columns") && msg.contains("3 input columns"), "{msg}");
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = MlpSpec::new(vec![6, 5, 2]).unwrap();
        let a = init_params(&spec, 7);
        let b = init_params(&spec, 7);
        assert_eq!(a, b);
        assert_ne!(a, init_params(&spec, 8));
        assert!(a.biases().iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
        let bound = 1.0f64; // sqrt(6/6)
        assert!(a.weights()[0].data().iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn init_weight_mean_is_centered() {
        let spec = MlpSpec::new(vec![6, 100_000]).unwrap();
        let p = init_params(&spec, 99);
        let w = &p.weights()[0];
        let mean = w.sum() / w.data().len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
    }

    #[test]
    fn checkpoint_json_layout() {
        let spec = MlpSpec::new(vec![2, 1]).unwrap();
        let mut p = MlpParams::zeros(&spec);
        p.weights_mut()[0] = Matrix::from_vec(2, 1, vec![0.5, -0.25]).unwrap();
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(
            json,
            r#"{"format_version":1,"dims":[2,1],"weights":[[0.5,-0.25]],"biases":[[0.0]]}"#
        );
        assert_eq!(serde_json::from_str::<MlpParams>(&json).unwrap(), p);
        let bad = json.replace("\"format_version\":1", "\"format_version\":2");
        assert!(serde_json::from_str::<MlpParams>(&bad).is_err());
        let short = json.replace("[0.5,-0.25]", "[0.5]");
        assert!(serde_json::from_str::<MlpParams>(&short).is_err());
    }
}
