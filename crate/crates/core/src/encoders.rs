//! Per-modality encoder towers and the model snapshot.
//!
//! Each tower is an MLP encoder followed by a projection head whose output
//! rows are l2-normalized into the shared space. The audio and text heads
//! are plain linear maps; the image head applies a ReLU before its linear
//! layer.
//!
//! Parameter order (used by the optimizer and the checkpoint format):
//! audio tower, text tower, image tower, then the three log inverse
//! temperatures `at`, `ai`, `ti`. Within a tower: each encoder layer's
//! weight then bias, then the head weight then bias. Weights are stored
//! `out x in`, biases `1 x out`, both row-major.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::embedding::{EmbeddingBatch, EmbeddingError, DEFAULT_EMBED_DIM};

pub const AUDIO_FEATURE_DIM: usize = 64;
pub const TEXT_FEATURE_DIM: usize = 512;
pub const IMAGE_FEATURE_DIM: usize = 768;
pub const DEFAULT_HIDDEN_DIM: usize = 256;
pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Upper bound on every inverse temperature.
pub const MAX_INV_TEMPERATURE: f64 = 100.0;

const CHECKPOINT_MAGIC: &[u8; 4] = b"GCLP";
const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid encoder spec: {0}")]
    InvalidSpec(String),
    #[error("{modality} features have {got} columns, expected {expected}")]
    FeatureShape {
        modality: Modality,
        got: usize,
        expected: usize,
    },
    #[error("non-finite feature value in {0} input")]
    NonFiniteFeature(Modality),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Autodiff(AutodiffError),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] io::Error),
}

impl From<AutodiffError> for ModelError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::ZeroNorm { .. } => {
                ModelError::Embedding(EmbeddingError::ZeroVector { norm: 0.0 })
            }
            other => ModelError::Autodiff(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Audio,
    Text,
    Image,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Text, Modality::Image];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Text => "text",
            Modality::Image => "image",
        }
    }

    fn index(self) -> usize {
        match self {
            Modality::Audio => 0,
            Modality::Text => 1,
            Modality::Image => 2,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "audio" | "sound" => Ok(Modality::Audio),
            "text" => Ok(Modality::Text),
            "image" => Ok(Modality::Image),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

/// Shape of one encoder `f`: `input_dim -> hidden_dims... -> output_dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub modality: Modality,
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub trainable: bool,
}

impl EncoderSpec {
    /// The default two-layer MLP: `input_dim -> 256 -> output_dim`.
    pub fn toy(modality: Modality, input_dim: usize, output_dim: usize) -> Self {
        Self {
            modality,
            input_dim,
            hidden_dims: vec![DEFAULT_HIDDEN_DIM],
            output_dim,
            trainable: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(ModelError::InvalidSpec(format!(
                "{} encoder has a zero dimension",
                self.modality
            )));
        }
        Ok(())
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    None,
    Relu,
}

/// Affine layer `y = x W^T + b` with `W: out x in`, `b: 1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    /// Nonzero biases keep an all-zero input (silence) off the origin.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..=bound));
        let bias = Array2::from_shape_fn((1, fan_out), |_| rng.random_range(-bound..=bound));
        Self { weight, bias }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array2::zeros((1, fan_out)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub modality: Modality,
    pub pre_activation: Activation,
    pub linear: Linear,
}

/// Encoder plus projection head for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub spec: EncoderSpec,
    pub layers: Vec<Linear>,
    pub head: ProjectionHead,
}

fn head_activation(m: Modality) -> Activation {
    match m {
        Modality::Image => Activation::Relu,
        Modality::Audio | Modality::Text => Activation::None,
    }
}

/// Initializes the encoder layers of `spec` deterministically from `seed`.
pub fn init_params(spec: &EncoderSpec, seed: u64) -> Result<Vec<Linear>, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(spec
        .layer_dims()
        .into_iter()
        .map(|(i, o)| Linear::init(i, o, &mut rng))
        .collect())
}

/// Tape handles for one tower's parameters.
#[derive(Debug, Clone)]
pub struct TowerNodes {
    pub layers: Vec<(NodeId, NodeId)>,
    pub head: (NodeId, NodeId),
}

impl TowerNodes {
    pub fn params(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.layers
            .iter()
            .flat_map(|&(w, b)| [w, b])
            .chain([self.head.0, self.head.1])
    }
}

impl Tower {
    pub fn init(spec: EncoderSpec, embed_dim: usize, seed: u64) -> Result<Self, ModelError> {
        if embed_dim == 0 {
            return Err(ModelError::InvalidSpec("embedding dim must be positive".into()));
        }
        let layers = init_params(&spec, seed)?;
        // head drawn from a separate stream so that changing the head
        // never perturbs encoder initialization
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let head = ProjectionHead {
            modality: spec.modality,
            pre_activation: head_activation(spec.modality),
            linear: Linear::init(spec.output_dim, embed_dim, &mut rng),
        };
        Ok(Self { spec, layers, head })
    }

    fn zeros(spec: EncoderSpec, embed_dim: usize) -> Self {
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Linear::zeros(i, o))
            .collect();
        let head = ProjectionHead {
            modality: spec.modality,
            pre_activation: head_activation(spec.modality),
            linear: Linear::zeros(spec.output_dim, embed_dim),
        };
        Self { spec, layers, head }
    }

    pub fn modality(&self) -> Modality {
        self.spec.modality
    }

    pub fn embed_dim(&self) -> usize {
        self.head.linear.weight.nrows()
    }

    fn linears(&self) -> impl Iterator<Item = &Linear> {
        self.layers.iter().chain(std::iter::once(&self.head.linear))
    }

    fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.layers.iter_mut().chain(std::iter::once(&mut self.head.linear))
    }

    /// Puts the tower's parameters on `tape`, as leaves when `trainable`
    /// and as constants otherwise.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> TowerNodes {
        let mut put = |t: &Array2<f64>| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let layers = self
            .layers
            .iter()
            .map(|l| (put(&l.weight), put(&l.bias)))
            .collect();
        let head = (put(&self.head.linear.weight), put(&self.head.linear.bias));
        TowerNodes { layers, head }
    }

    /// Records `g(f(x))` followed by row normalization.
    pub fn forward(
        &self,
        tape: &mut Tape,
        nodes: &TowerNodes,
        features: NodeId,
    ) -> Result<NodeId, ModelError> {
        let cols = tape.value(features).ncols();
        if cols != self.spec.input_dim {
            return Err(ModelError::FeatureShape {
                modality: self.modality(),
                got: cols,
                expected: self.spec.input_dim,
            });
        }
        let mut h = features;
        let last = nodes.layers.len() - 1;
        for (i, &(w, b)) in nodes.layers.iter().enumerate() {
            let wt = tape.transpose(w)?;
            h = tape.matmul(h, wt)?;
            h = tape.add(h, b)?;
            if i < last {
                h = tape.relu(h)?;
            }
        }
        if self.head.pre_activation == Activation::Relu {
            h = tape.relu(h)?;
        }
        let wt = tape.transpose(nodes.head.0)?;
        h = tape.matmul(h, wt)?;
        h = tape.add(h, nodes.head.1)?;
        Ok(tape.row_l2_normalize(h)?)
    }

    /// Embeds an `N x input_dim` feature matrix without recording gradients.
    pub fn encode(&self, ids: Vec<String>, features: ArrayView2<'_, f64>) -> Result<EmbeddingBatch, ModelError> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteFeature(self.modality()));
        }
        let mut tape = Tape::inference();
        let nodes = self.register(&mut tape, false);
        let x = tape.constant(features.to_owned());
        let out = self.forward(&mut tape, &nodes, x)?;
        Ok(EmbeddingBatch::new(ids, tape.value(out).clone())?)
    }

    /// Embeds a single feature vector.
    pub fn encode_one(&self, features: &[f64]) -> Result<crate::embedding::EmbeddingVector, ModelError> {
        let view = ArrayView2::from_shape((1, features.len()), features)
            .map_err(|e| ModelError::InvalidSpec(e.to_string()))?;
        let batch = self.encode(vec!["query".to_string()], view)?;
        Ok(batch.row(0))
    }
}

/// Architecture of a whole model. Its SHA-256 (over the JSON encoding) is
/// the config hash stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub audio: EncoderSpec,
    pub text: EncoderSpec,
    pub image: EncoderSpec,
    pub init_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_dims(
            DEFAULT_EMBED_DIM,
            DEFAULT_HIDDEN_DIM,
            [AUDIO_FEATURE_DIM, TEXT_FEATURE_DIM, IMAGE_FEATURE_DIM],
        )
    }
}

impl ModelConfig {
    /// Toy towers `input -> hidden -> embed_dim` for (audio, text, image)
    /// inputs of the given widths.
    pub fn with_dims(embed_dim: usize, hidden: usize, inputs: [usize; 3]) -> Self {
        let spec = |m, input| EncoderSpec {
            modality: m,
            input_dim: input,
            hidden_dims: vec![hidden],
            output_dim: embed_dim,
            trainable: true,
        };
        Self {
            embed_dim,
            audio: spec(Modality::Audio, inputs[0]),
            text: spec(Modality::Text, inputs[1]),
            image: spec(Modality::Image, inputs[2]),
            init_temperature: DEFAULT_TEMPERATURE,
        }
    }

    pub fn spec(&self, m: Modality) -> &EncoderSpec {
        match m {
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim == 0 {
            return Err(ModelError::InvalidSpec("embed_dim must be positive".into()));
        }
        if !(self.init_temperature > 0.0) {
            return Err(ModelError::InvalidSpec("init_temperature must be positive".into()));
        }
        for m in Modality::ALL {
            let s = self.spec(m);
            if s.modality != m {
                return Err(ModelError::InvalidSpec(format!(
                    "spec in {m} slot declares modality {}",
                    s.modality
                )));
            }
            s.validate()?;
        }
        Ok(())
    }

    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash())
    }
}

/// Learnable temperatures, stored as `log(1/tau)` so `tau > 0` always.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSet {
    pub log_inv_tau_at: f64,
    pub log_inv_tau_ai: f64,
    pub log_inv_tau_ti: f64,
}

impl TemperatureSet {
    pub fn from_tau(tau: f64) -> Self {
        let v = (1.0 / tau).min(MAX_INV_TEMPERATURE).ln();
        Self {
            log_inv_tau_at: v,
            log_inv_tau_ai: v,
            log_inv_tau_ti: v,
        }
    }

    pub fn tau_at(&self) -> f64 {
        (-self.log_inv_tau_at).exp()
    }

    pub fn tau_ai(&self) -> f64 {
        (-self.log_inv_tau_ai).exp()
    }

    pub fn tau_ti(&self) -> f64 {
        (-self.log_inv_tau_ti).exp()
    }

    /// Caps each inverse temperature at [`MAX_INV_TEMPERATURE`].
    pub fn clamp(&mut self) {
        let cap = MAX_INV_TEMPERATURE.ln();
        for v in [
            &mut self.log_inv_tau_at,
            &mut self.log_inv_tau_ai,
            &mut self.log_inv_tau_ti,
        ] {
            if *v > cap {
                *v = cap;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Temperature,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub modality: Option<Modality>,
    pub kind: ParamKind,
}

/// Every parameter of the model plus its training step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub config: ModelConfig,
    pub audio: Tower,
    pub text: Tower,
    pub image: Tower,
    pub temperatures: TemperatureSet,
    pub step: u64,
}

/// Tape handles for a whole snapshot.
#[derive(Debug, Clone)]
pub struct SnapshotNodes {
    pub towers: [TowerNodes; 3],
    /// `at`, `ai`, `ti` log inverse temperatures.
    pub temperatures: [NodeId; 3],
}

impl SnapshotNodes {
    pub fn tower(&self, m: Modality) -> &TowerNodes {
        &self.towers[m.index()]
    }

    /// Nodes in parameter order.
    pub fn params(&self) -> Vec<NodeId> {
        self.towers
            .iter()
            .flat_map(|t| t.params())
            .chain(self.temperatures)
            .collect()
    }
}

impl ModelSnapshot {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.embed_dim;
        let audio = Tower::init(config.audio.clone(), d, seed.wrapping_mul(3).wrapping_add(1))?;
        let text = Tower::init(config.text.clone(), d, seed.wrapping_mul(3).wrapping_add(2))?;
        let image = Tower::init(config.image.clone(), d, seed.wrapping_mul(3).wrapping_add(3))?;
        let temperatures = TemperatureSet::from_tau(config.init_temperature);
        Ok(Self {
            config,
            audio,
            text,
            image,
            temperatures,
            step: 0,
        })
    }

    fn zeros(config: ModelConfig) -> Self {
        let d = config.embed_dim;
        Self {
            audio: Tower::zeros(config.audio.clone(), d),
            text: Tower::zeros(config.text.clone(), d),
            image: Tower::zeros(config.image.clone(), d),
            temperatures: TemperatureSet::from_tau(config.init_temperature),
            config,
            step: 0,
        }
    }

    pub fn tower(&self, m: Modality) -> &Tower {
        match m {
            Modality::Audio => &self.audio,
            Modality::Text => &self.text,
            Modality::Image => &self.image,
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    pub fn config_hash_hex(&self) -> String {
        self.config.hash_hex()
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for m in Modality::ALL {
            let t = self.tower(m);
            for i in 0..t.layers.len() {
                out.push(ParamInfo {
                    name: format!("{m}.layer{i}.weight"),
                    modality: Some(m),
                    kind: ParamKind::Weight,
                });
                out.push(ParamInfo {
                    name: format!("{m}.layer{i}.bias"),
                    modality: Some(m),
                    kind: ParamKind::Bias,
                });
            }
            out.push(ParamInfo {
                name: format!("{m}.head.weight"),
                modality: Some(m),
                kind: ParamKind::Weight,
            });
            out.push(ParamInfo {
                name: format!("{m}.head.bias"),
                modality: Some(m),
                kind: ParamKind::Bias,
            });
        }
        for pair in ["at", "ai", "ti"] {
            out.push(ParamInfo {
                name: format!("log_inv_tau_{pair}"),
                modality: None,
                kind: ParamKind::Temperature,
            });
        }
        out
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for t in [&self.audio, &self.text, &self.image] {
            for l in t.linears() {
                out.push(l.weight.as_slice().expect("standard layout"));
                out.push(l.bias.as_slice().expect("standard layout"));
            }
        }
        out.push(std::slice::from_ref(&self.temperatures.log_inv_tau_at));
        out.push(std::slice::from_ref(&self.temperatures.log_inv_tau_ai));
        out.push(std::slice::from_ref(&self.temperatures.log_inv_tau_ti));
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for t in [&mut self.audio, &mut self.text, &mut self.image] {
            for l in t.linears_mut() {
                out.push(l.weight.as_slice_mut().expect("standard layout"));
                out.push(l.bias.as_slice_mut().expect("standard layout"));
            }
        }
        let ts = &mut self.temperatures;
        out.push(std::slice::from_mut(&mut ts.log_inv_tau_at));
        out.push(std::slice::from_mut(&mut ts.log_inv_tau_ai));
        out.push(std::slice::from_mut(&mut ts.log_inv_tau_ti));
        out
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Registers all parameters on `tape`. `trainable[m]` selects leaves vs
    /// constants per tower; `temps_trainable` does the same for `at/ai/ti`.
    pub fn register(
        &self,
        tape: &mut Tape,
        trainable: [bool; 3],
        temps_trainable: [bool; 3],
    ) -> SnapshotNodes {
        let towers = [
            self.audio.register(tape, trainable[0]),
            self.text.register(tape, trainable[1]),
            self.image.register(tape, trainable[2]),
        ];
        let t = &self.temperatures;
        let vals = [t.log_inv_tau_at, t.log_inv_tau_ai, t.log_inv_tau_ti];
        let mut temperatures = [towers[0].head.0; 3];
        for i in 0..3 {
            let v = Array2::from_elem((1, 1), vals[i]);
            temperatures[i] = if temps_trainable[i] {
                tape.leaf(v)
            } else {
                tape.constant(v)
            };
        }
        SnapshotNodes {
            towers,
            temperatures,
        }
    }

    /// Parameters as 2-D tensors in parameter order (temperatures as 1x1).
    pub fn param_tensors(&self) -> Vec<Array2<f64>> {
        let mut out = Vec::new();
        for t in [&self.audio, &self.text, &self.image] {
            for l in t.linears() {
                out.push(l.weight.clone());
                out.push(l.bias.clone());
            }
        }
        let t = &self.temperatures;
        for v in [t.log_inv_tau_at, t.log_inv_tau_ai, t.log_inv_tau_ti] {
            out.push(Array2::from_elem((1, 1), v));
        }
        out
    }

    /// Regroups tape handles given in parameter order (as produced by
    /// registering [`Self::param_tensors`]) into per-tower handles.
    pub fn nodes_from_flat(&self, ids: &[NodeId]) -> Result<SnapshotNodes, ModelError> {
        let expected = self.param_slices().len();
        if ids.len() != expected {
            return Err(ModelError::InvalidSpec(format!(
                "{} parameter handles for {expected} parameters",
                ids.len()
            )));
        }
        let mut off = 0;
        let towers = [&self.audio, &self.text, &self.image].map(|t| {
            let n = t.layers.len();
            let layers = (0..n).map(|i| (ids[off + 2 * i], ids[off + 2 * i + 1])).collect();
            let head = (ids[off + 2 * n], ids[off + 2 * n + 1]);
            off += 2 * (n + 1);
            TowerNodes { layers, head }
        });
        Ok(SnapshotNodes {
            towers,
            temperatures: [ids[off], ids[off + 1], ids[off + 2]],
        })
    }

    /// Embeds a feature matrix with the tower for `m`.
    pub fn encode(
        &self,
        m: Modality,
        ids: Vec<String>,
        features: ArrayView2<'_, f64>,
    ) -> Result<EmbeddingBatch, ModelError> {
        self.tower(m).encode(ids, features)
    }
}

/// Writes `snapshot` to `path` in the binary checkpoint format:
///
/// ```text
/// "GCLP" | version u16 | config sha256 [32] | config_len u32 | config json
///        | step u64 | n u64 | n x f64 | sha256 of all preceding bytes [32]
/// ```
///
/// All integers and floats are little-endian.
pub fn save_checkpoint(snapshot: &ModelSnapshot, path: &Path) -> Result<(), ModelError> {
    fs::write(path, encode_checkpoint(snapshot))?;
    Ok(())
}

pub fn encode_checkpoint(snapshot: &ModelSnapshot) -> Vec<u8> {
    let config = serde_json::to_vec(&snapshot.config).expect("config serializes");
    let n = snapshot.num_params();
    let mut buf = Vec::with_capacity(4 + 2 + 32 + 4 + config.len() + 16 + 8 * n + 32);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&snapshot.config.hash());
    buf.extend_from_slice(&(config.len() as u32).to_le_bytes());
    buf.extend_from_slice(&config);
    buf.extend_from_slice(&snapshot.step.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    for s in snapshot.param_slices() {
        for v in s {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn load_checkpoint(path: &Path) -> Result<ModelSnapshot, ModelError> {
    decode_checkpoint(&fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ModelError::CorruptCheckpoint("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], ModelError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelSnapshot, ModelError> {
    if bytes.len() < 4 + 2 + 32 + 4 + 8 + 8 + 32 {
        return Err(ModelError::CorruptCheckpoint("truncated".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(ModelError::CorruptCheckpoint("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(ModelError::CorruptCheckpoint("bad magic".into()));
    }
    let version = u16::from_le_bytes(r.array()?);
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let hash: [u8; 32] = r.array()?;
    let config_len = u32::from_le_bytes(r.array()?) as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| ModelError::CorruptCheckpoint(format!("config: {e}")))?;
    if config.hash() != hash {
        return Err(ModelError::CorruptCheckpoint("config hash mismatch".into()));
    }
    config
        .validate()
        .map_err(|e| ModelError::CorruptCheckpoint(e.to_string()))?;
    let step = u64::from_le_bytes(r.array()?);
    let n = u64::from_le_bytes(r.array()?) as usize;
    let mut snap = ModelSnapshot::zeros(config);
    if snap.num_params() != n {
        return Err(ModelError::CorruptCheckpoint(format!(
            "parameter count {n} does not match config ({})",
            snap.num_params()
        )));
    }
    for slice in snap.param_slices_mut() {
        for v in slice.iter_mut() {
            *v = f64::from_le_bytes(r.array()?);
        }
    }
    if r.pos != body.len() {
        return Err(ModelError::CorruptCheckpoint("trailing bytes".into()));
    }
    snap.step = step;
    Ok(snap)
}
