//! Two-layer convolutional feature extractor with a linear head, class
//! activation masks and the checkpoint format.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, Var};
use crate::io::write_atomic;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("malformed checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub side: usize,
    pub num_classes: usize,
    pub hidden_channels: usize,
    pub feature_channels: usize,
    /// Standard deviation of a chip after per-chip standardization.
    pub input_scale: f64,
}

impl NetworkConfig {
    pub fn new(side: usize, num_classes: usize) -> Self {
        Self {
            side,
            num_classes,
            hidden_channels: 8,
            feature_channels: 16,
            input_scale: 8.0,
        }
    }

    /// Side of the feature map after the single 2x downsample.
    pub fn feature_side(&self) -> usize {
        self.side / 2
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
}

/// conv(1->h) -> relu -> avgpool2 -> conv(h->f) -> relu -> GAP -> linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    params: Vec<Param>,
}

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const FC_W: usize = 4;
const FC_B: usize = 5;

/// `(feature_map, pooled, logits)` values of one forward pass.
pub type Inference = (Vec<f64>, Vec<f64>, Vec<f64>);

/// Parameter handles on one tape, in registry order.
#[derive(Debug, Clone)]
pub struct NetworkVars(Vec<Var>);

impl NetworkVars {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `[C_feat, H', W']`
    pub feature_map: Var,
    /// `[C_feat]`
    pub pooled: Var,
    /// `[num_classes]`
    pub logits: Var,
}

fn he_init<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("init shape").requiring_grad()
}

impl Network {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<Self, ModelError> {
        if config.side < 4 || !config.side.is_multiple_of(2) {
            return Err(ModelError::InvalidConfig("side must be even and at least 4".into()));
        }
        if config.num_classes < 2 || config.hidden_channels == 0 || config.feature_channels == 0 {
            return Err(ModelError::InvalidConfig("empty layer".into()));
        }
        if !(config.input_scale > 0.0 && config.input_scale.is_finite()) {
            return Err(ModelError::InvalidConfig("input_scale must be positive".into()));
        }
        let (h, f, c) = (config.hidden_channels, config.feature_channels, config.num_classes);
        let zeros = |shape: Vec<usize>| Tensor::zeros(shape).requiring_grad();
        let params = vec![
            Param { name: "conv1.weight".into(), tensor: he_init(rng, vec![h, 1, 3, 3], 9) },
            Param { name: "conv1.bias".into(), tensor: zeros(vec![h]) },
            Param { name: "conv2.weight".into(), tensor: he_init(rng, vec![f, h, 3, 3], 9 * h) },
            Param { name: "conv2.bias".into(), tensor: zeros(vec![f]) },
            Param { name: "fc.weight".into(), tensor: he_init(rng, vec![c, f], f) },
            Param { name: "fc.bias".into(), tensor: zeros(vec![c]) },
        ];
        Ok(Self { config, params })
    }

    /// Rebuilds a network from registry-ordered parameters (checkpoint load).
    pub fn from_params(config: NetworkConfig, params: Vec<Param>) -> Result<Self, ModelError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let template = Self::new(config, &mut rng)?;
        if params.len() != template.params.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} parameters, got {}",
                template.params.len(),
                params.len()
            )));
        }
        for (p, t) in params.iter().zip(&template.params) {
            if p.name != t.name || p.tensor.shape() != t.tensor.shape() {
                return Err(ModelError::ShapeMismatch {
                    expected: t.tensor.shape().to_vec(),
                    actual: p.tensor.shape().to_vec(),
                });
            }
        }
        let params = params
            .into_iter()
            .map(|p| Param {
                name: p.name,
                tensor: p.tensor.requiring_grad(),
            })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Classifier weights `W_fc`, `[num_classes, C_feat]`.
    pub fn fc_weights(&self) -> &Tensor {
        &self.params[FC_W].tensor
    }

    pub fn attach(&self, tape: &mut Tape) -> NetworkVars {
        NetworkVars(self.params.iter().map(|p| tape.leaf(&p.tensor)).collect())
    }

    /// Records a forward pass of `image` (`[1, side, side]`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &NetworkVars,
        image: Var,
    ) -> Result<ForwardOutput, ModelError> {
        let expected = vec![1, self.config.side, self.config.side];
        if tape.shape(image) != expected.as_slice() {
            return Err(ModelError::ShapeMismatch {
                expected,
                actual: tape.shape(image).to_vec(),
            });
        }
        let v = &vars.0;
        let h = tape.conv2d(image, v[CONV1_W], v[CONV1_B]);
        let h = tape.relu(h);
        let h = tape.avg_pool2(h);
        let f = tape.conv2d(h, v[CONV2_W], v[CONV2_B]);
        let feature_map = tape.relu(f);
        let pooled = tape.global_avg_pool(feature_map);
        let col = tape.reshape(pooled, vec![self.config.feature_channels, 1]);
        let z = tape.matmul(v[FC_W], col);
        let z = tape.reshape(z, vec![self.config.num_classes]);
        let logits = tape.add(z, v[FC_B]);
        Ok(ForwardOutput {
            feature_map,
            pooled,
            logits,
        })
    }

    /// Shifts a raw chip to zero mean and scales it to standard deviation
    /// `input_scale`. A constant chip maps to zeros.
    pub fn standardize(&self, image: &[f64]) -> Vec<f64> {
        let n = image.len().max(1) as f64;
        let mean = image.iter().sum::<f64>() / n;
        let std = (image.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std <= 1e-12 {
            return vec![0.0; image.len()];
        }
        let k = self.config.input_scale / std;
        image.iter().map(|x| (x - mean) * k).collect()
    }

    /// Records a standardized raw chip as a constant `[1, side, side]` input.
    pub fn input(&self, tape: &mut Tape, image: &[f64]) -> Result<Var, ModelError> {
        let side = self.config.side;
        if image.len() != side * side {
            return Err(ModelError::ShapeMismatch {
                expected: vec![1, side, side],
                actual: vec![image.len()],
            });
        }
        Ok(tape.constant(vec![1, side, side], self.standardize(image)))
    }

    /// Forward pass of a raw chip on a throwaway tape; returns `(feature_map, pooled, logits)` values.
    pub fn infer(&self, image: &[f64]) -> Result<Inference, ModelError> {
        let mut tape = Tape::new();
        let vars = NetworkVars(
            self.params
                .iter()
                .map(|p| tape.constant(p.tensor.shape().to_vec(), p.tensor.data().to_vec()))
                .collect(),
        );
        let x = self.input(&mut tape, image)?;
        let out = self.forward(&mut tape, &vars, x)?;
        Ok((
            tape.value(out.feature_map).to_vec(),
            tape.value(out.pooled).to_vec(),
            tape.value(out.logits).to_vec(),
        ))
    }

    pub fn predict(&self, image: &[f64]) -> Result<usize, ModelError> {
        Ok(argmax(&self.infer(image)?.2))
    }

    /// Pulls gradients for every parameter off `tape` and applies one SGD step.
    pub fn sgd_step(&mut self, tape: &Tape, vars: &NetworkVars, lr: f64) {
        for (p, v) in self.params.iter_mut().zip(&vars.0) {
            tape.write_grad(*v, &mut p.tensor);
            p.tensor.sgd_step(lr);
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Class activation mask for the predicted class, min-max normalized to
/// `[0, 1]`. A constant activation map yields an all-ones mask. The result is
/// a plain value: it never participates in differentiation.
pub fn cam_mask(
    fc_weights: &Tensor,
    feature_map: &[f64],
    feature_shape: &[usize],
    logits: &[f64],
) -> Result<Vec<f64>, ModelError> {
    let w_shape = fc_weights.shape();
    if feature_shape.len() != 3
        || w_shape.len() != 2
        || w_shape[1] != feature_shape[0]
        || w_shape[0] != logits.len()
        || feature_map.len() != feature_shape.iter().product::<usize>()
    {
        return Err(ModelError::ShapeMismatch {
            expected: vec![w_shape.first().copied().unwrap_or(0), w_shape.get(1).copied().unwrap_or(0)],
            actual: feature_shape.to_vec(),
        });
    }
    let (c, hw) = (feature_shape[0], feature_shape[1] * feature_shape[2]);
    let row = &fc_weights.data()[argmax(logits) * c..(argmax(logits) + 1) * c];
    let mut raw = vec![0.0; hw];
    for (ch, w) in row.iter().enumerate() {
        for (r, f) in raw.iter_mut().zip(&feature_map[ch * hw..(ch + 1) * hw]) {
            *r += w * f;
        }
    }
    Ok(min_max(&raw))
}

fn min_max(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range.is_nan() || range <= 1e-12 * hi.abs().max(lo.abs()).max(1.0) {
        return vec![1.0; raw.len()];
    }
    raw.iter().map(|v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// First line of a checkpoint file. The rest of the file is the raw
/// little-endian `f64` blob, tensors concatenated in `tensors` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub network: NetworkConfig,
    pub tensors: Vec<TensorEntry>,
    /// Free-form run metadata (hyperparameters, mode, seed).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "invtrain-ckpt-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    /// Network parameters followed by `extra` named tensors (e.g. proxies).
    pub fn new(net: &Network, extra: &[(String, Tensor)], metadata: serde_json::Value) -> Self {
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        for p in &net.params {
            entries.push(TensorEntry { name: p.name.clone(), shape: p.tensor.shape().to_vec() });
            tensors.push(p.tensor.clone());
        }
        for (name, t) in extra {
            entries.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec() });
            tensors.push(t.clone());
        }
        Self {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                network: net.config,
                tensors: entries,
                metadata,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_reader<R: Read>(reader: R) -> Result<Self, ModelError> {
        let mut reader = BufReader::new(reader);
        let mut line = Vec::new();
        reader.read_until(b'\n', &mut line)?;
        let header: CheckpointHeader = serde_json::from_slice(&line)?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(ModelError::Checkpoint(format!("unknown format `{}`", header.format)));
        }
        let mut blob = Vec::new();
        reader.read_to_end(&mut blob)?;
        let total: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if blob.len() != total * 8 {
            return Err(ModelError::Checkpoint(format!(
                "blob has {} bytes, header implies {}",
                blob.len(),
                total * 8
            )));
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
        let tensors = header
            .tensors
            .iter()
            .map(|e| {
                let n = e.shape.iter().product();
                Tensor::new(e.shape.clone(), values.by_ref().take(n).collect())
                    .map_err(|err| ModelError::Checkpoint(err.to_string()))
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_atomic(path, &self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn network(&self) -> Result<Network, ModelError> {
        let n = 6;
        if self.tensors.len() < n {
            return Err(ModelError::Checkpoint("missing network parameters".into()));
        }
        let params = self.header.tensors[..n]
            .iter()
            .zip(&self.tensors[..n])
            .map(|(e, t)| Param { name: e.name.clone(), tensor: t.clone() })
            .collect();
        Network::from_params(self.header.network, params)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.header
            .tensors
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.tensors[i])
    }
}
