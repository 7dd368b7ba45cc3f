use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Hidden widths of the three graph-convolution layers.
pub const DEFAULT_HIDDEN_DIMS: [usize; 3] = [256, 512, 1024];

/// Graph convolutional calibrator parameters.
///
/// `layer_weights[l]` is `dims[l] x dims[l + 1]`. The last entry is the
/// per-node output head (`dims[last] x 1`), which is not propagated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GcnModel {
    pub layer_weights: Vec<Matrix>,
    pub layer_biases: Vec<Vec<f64>>,
    pub seed: u64,
}

impl GcnModel {
    /// Glorot-uniform weights and zero biases from a ChaCha stream keyed by `seed`.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(Error::Config(format!(
                "invalid model dims: input {input_dim}, hidden {hidden:?}"
            )));
        }
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer_weights = Vec::new();
        let mut layer_biases = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| rng.random_range(-limit..limit))
                .collect();
            layer_weights.push(Matrix::from_vec(fan_in, fan_out, data)?);
            layer_biases.push(vec![0.0; fan_out]);
        }
        Ok(GcnModel {
            layer_weights,
            layer_biases,
            seed,
        })
    }

    /// Same shapes with every parameter zero.
    pub fn zeros_like(&self) -> Self {
        GcnModel {
            layer_weights: self
                .layer_weights
                .iter()
                .map(|w| Matrix::zeros(w.rows(), w.cols()))
                .collect(),
            layer_biases: self.layer_biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            seed: self.seed,
        }
    }

    /// `[input, hidden..., 1]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layer_weights.iter().map(Matrix::rows).collect();
        dims.push(self.layer_weights.last().map_or(0, Matrix::cols));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_weights.first().map_or(0, Matrix::rows)
    }

    /// Number of propagated layers (excludes the head).
    pub fn conv_layers(&self) -> usize {
        self.layer_weights.len().saturating_sub(1)
    }

    pub fn check(&self) -> Result<()> {
        if self.layer_weights.len() < 2 || self.layer_weights.len() != self.layer_biases.len() {
            return Err(Error::Config("model needs at least one conv layer and a head".into()));
        }
        for (l, (w, b)) in self.layer_weights.iter().zip(&self.layer_biases).enumerate() {
            if w.cols() != b.len() {
                return Err(Error::Config(format!("layer {l}: bias length {} != {}", b.len(), w.cols())));
            }
            if let Some(next) = self.layer_weights.get(l + 1) {
                if w.cols() != next.rows() {
                    return Err(Error::Config(format!(
                        "layer {l} outputs {} but layer {} expects {}",
                        w.cols(),
                        l + 1,
                        next.rows()
                    )));
                }
            }
        }
        if self.layer_weights.last().map(Matrix::cols) != Some(1) {
            return Err(Error::Config("output head must have width 1".into()));
        }
        Ok(())
    }

    /// Every parameter tensor as a flat slice: weights then bias, per layer.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layer_weights
            .iter()
            .zip(&self.layer_biases)
            .flat_map(|(w, b)| [w.as_slice(), b.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layer_weights
            .iter_mut()
            .zip(self.layer_biases.iter_mut())
            .flat_map(|(w, b)| [w.as_mut_slice(), b.as_mut_slice()])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let checkpoint = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            dims: self.dims(),
            model: self.clone(),
        };
        let text = serde_json::to_string(&checkpoint)
            .map_err(|e| Error::Data(format!("cannot serialize model: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let checkpoint: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if checkpoint.format != CHECKPOINT_FORMAT || checkpoint.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                checkpoint.format,
                checkpoint.version
            )));
        }
        checkpoint.model.check()?;
        if checkpoint.model.dims() != checkpoint.dims {
            return Err(Error::Config(format!("{}: dims header disagrees with parameters", path.display())));
        }
        Ok(checkpoint.model)
    }
}

const CHECKPOINT_FORMAT: &str = "graphcal-gcn";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    dims: Vec<usize>,
    #[serde(flatten)]
    model: GcnModel,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_chain_and_init_is_seeded() {
        let m = GcnModel::new(3, &DEFAULT_HIDDEN_DIMS, 5).unwrap();
        assert_eq!(m.dims(), vec![3, 256, 512, 1024, 1]);
        m.check().unwrap();
        assert_eq!(m, GcnModel::new(3, &DEFAULT_HIDDEN_DIMS, 5).unwrap());
        assert_ne!(m, GcnModel::new(3, &DEFAULT_HIDDEN_DIMS, 6).unwrap());
        let limit = (6.0f64 / (3 + 256) as f64).sqrt();
        assert!(m.layer_weights[0].as_slice().iter().all(|w| w.abs() <= limit));
        assert!(m.layer_biases.iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn broken_chain_is_rejected() {
        let mut m = GcnModel::new(3, &[4, 4], 0).unwrap();
        m.layer_weights[1] = Matrix::zeros(5, 4);
        assert!(m.check().is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = GcnModel::new(3, &[4, 6, 2], 9).unwrap();
        m.save(&path).unwrap();
        assert_eq!(GcnModel::load(&path).unwrap(), m);
    }
}
