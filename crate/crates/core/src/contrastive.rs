//! Symmetric contrastive objective over the three modality pairs, AdamW
//! with decoupled decay, the warmup + cosine schedule, and the training
//! loop.

use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AutodiffError, NodeId, Tape};
use crate::dataset::{make_batches, DatasetError, FeatureTable, TripletBatch};
use crate::embedding::EmbeddingBatch;
use crate::encoders::{
    save_checkpoint, ModelConfig, ModelError, ModelSnapshot, Modality, ParamKind, SnapshotNodes,
    TemperatureSet,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("misaligned batch: {0}")]
    MisalignedBatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("config error: {0}")]
    ConfigError(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Which pair losses are active and which towers may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    ImageAudioOnly,
    FrozenTextAudio,
    #[default]
    TriModal,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [Self::ImageAudioOnly, Self::FrozenTextAudio, Self::TriModal];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ImageAudioOnly => "image_audio_only",
            Self::FrozenTextAudio => "frozen_text_audio",
            Self::TriModal => "tri_modal",
        }
    }

    /// Active pair losses in `at, ai, ti` order.
    pub fn active_pairs(self) -> [bool; 3] {
        match self {
            Self::ImageAudioOnly => [false, true, false],
            Self::FrozenTextAudio => [false, true, true],
            Self::TriModal => [true, true, true],
        }
    }

    /// Towers that receive updates, in `audio, text, image` order.
    pub fn towers_trainable(self) -> [bool; 3] {
        match self {
            Self::ImageAudioOnly => [true, false, true],
            Self::FrozenTextAudio => [false, false, true],
            Self::TriModal => [true, true, true],
        }
    }

    /// Towers whose forward pass the loss needs.
    pub fn towers_used(self) -> [bool; 3] {
        let [at, ai, ti] = self.active_pairs();
        [at || ai, at || ti, ai || ti]
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| TrainError::ConfigError(format!("unknown loss mode {s:?}")))
    }
}

/// Records the symmetric loss between row-aligned unit embeddings `ea` and
/// `eb`, with logits scaled by `exp(log_inv_tau)`:
/// `(1/2N) sum_k [-log softmax(S/tau)[k,k] - log softmax(S^T/tau)[k,k]]`.
pub fn pair_contrastive_loss(
    tape: &mut Tape,
    ea: NodeId,
    eb: NodeId,
    log_inv_tau: NodeId,
) -> Result<NodeId, TrainError> {
    let (sa, sb) = (tape.value(ea).dim(), tape.value(eb).dim());
    if sa != sb {
        return Err(TrainError::MisalignedBatch(format!("{sa:?} vs {sb:?}")));
    }
    let ebt = tape.transpose(eb)?;
    let sim = tape.matmul(ea, ebt)?;
    let inv_tau = tape.exp(log_inv_tau)?;
    let logits = tape.scale(sim, inv_tau)?;
    let rows = tape.row_log_softmax(logits)?;
    let forward = tape.mean_diag_negate(rows)?;
    let logits_t = tape.transpose(logits)?;
    let cols = tape.row_log_softmax(logits_t)?;
    let backward = tape.mean_diag_negate(cols)?;
    let both = tape.add(forward, backward)?;
    let half = tape.scalar_constant(0.5);
    Ok(tape.scale(both, half)?)
}

fn check_aligned(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<(), TrainError> {
    if a.ids() != b.ids() || a.dim() != b.dim() {
        return Err(TrainError::MisalignedBatch(format!(
            "{} x {} vs {} x {} (ids must match row for row)",
            a.len(),
            a.dim(),
            b.len(),
            b.dim()
        )));
    }
    Ok(())
}

/// Value of [`pair_contrastive_loss`] for fixed embeddings and `tau`.
pub fn pair_loss_value(a: &EmbeddingBatch, b: &EmbeddingBatch, tau: f64) -> Result<f64, TrainError> {
    check_aligned(a, b)?;
    if !(tau > 0.0) {
        return Err(TrainError::ConfigError(format!("tau must be positive, got {tau}")));
    }
    let mut tape = Tape::inference();
    let ea = tape.constant(a.rows().clone());
    let eb = tape.constant(b.rows().clone());
    let t = tape.scalar_constant((1.0 / tau).ln());
    let l = pair_contrastive_loss(&mut tape, ea, eb, t)?;
    Ok(tape.scalar(l))
}

/// Per-pair losses in nats; inactive pairs are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_at: Option<f64>,
    pub l_ai: Option<f64>,
    pub l_ti: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub l_at: Option<NodeId>,
    pub l_ai: Option<NodeId>,
    pub l_ti: Option<NodeId>,
    pub total: NodeId,
}

impl LossNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        let v = |n: Option<NodeId>| n.map(|n| tape.scalar(n));
        LossBreakdown {
            l_at: v(self.l_at),
            l_ai: v(self.l_ai),
            l_ti: v(self.l_ti),
            total: tape.scalar(self.total),
        }
    }
}

/// Sums the pair losses active under `mode`. Embedding nodes for unused
/// modalities may be `None`. `temps` are the `at, ai, ti` log inverse
/// temperatures.
pub fn total_loss(
    tape: &mut Tape,
    audio: Option<NodeId>,
    text: Option<NodeId>,
    image: Option<NodeId>,
    temps: [NodeId; 3],
    mode: LossMode,
) -> Result<LossNodes, TrainError> {
    let [at, ai, ti] = mode.active_pairs();
    let need = |n: Option<NodeId>, what: &str| {
        n.ok_or_else(|| TrainError::MisalignedBatch(format!("{what} embeddings required by {mode}")))
    };
    let mut pair = |on: bool, a: Option<NodeId>, b: Option<NodeId>, names: (&str, &str), t: NodeId| -> Result<Option<NodeId>, TrainError> {
        if !on {
            return Ok(None);
        }
        let (a, b) = (need(a, names.0)?, need(b, names.1)?);
        pair_contrastive_loss(tape, a, b, t).map(Some)
    };
    let l_at = pair(at, audio, text, ("audio", "text"), temps[0])?;
    let l_ai = pair(ai, audio, image, ("audio", "image"), temps[1])?;
    let l_ti = pair(ti, text, image, ("text", "image"), temps[2])?;
    let mut total: Option<NodeId> = None;
    for l in [l_at, l_ai, l_ti].into_iter().flatten() {
        total = Some(match total {
            None => l,
            Some(t) => tape.add(t, l)?,
        });
    }
    Ok(LossNodes {
        l_at,
        l_ai,
        l_ti,
        total: total.expect("every mode has an active pair"),
    })
}

/// [`total_loss`] for fixed embeddings.
pub fn total_loss_value(
    audio: &EmbeddingBatch,
    text: &EmbeddingBatch,
    image: &EmbeddingBatch,
    temps: &TemperatureSet,
    mode: LossMode,
) -> Result<LossBreakdown, TrainError> {
    check_aligned(audio, text)?;
    check_aligned(audio, image)?;
    let mut tape = Tape::inference();
    let a = tape.constant(audio.rows().clone());
    let t = tape.constant(text.rows().clone());
    let i = tape.constant(image.rows().clone());
    let ts = [
        tape.scalar_constant(temps.log_inv_tau_at),
        tape.scalar_constant(temps.log_inv_tau_ai),
        tape.scalar_constant(temps.log_inv_tau_ti),
    ];
    Ok(total_loss(&mut tape, Some(a), Some(t), Some(i), ts, mode)?.breakdown(&tape))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            betas: (0.9, 0.98),
            eps: 1e-8,
            weight_decay: 0.2,
        }
    }
}

/// How the optimizer treats one parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamGroup {
    pub trainable: bool,
    pub decay: bool,
}

/// First and second moments per parameter tensor, plus the step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
        }
    }
}

/// One AdamW step. Decay `p -= lr * wd * p` is applied first and only to
/// groups with `decay`; frozen groups are skipped entirely.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    groups: &[ParamGroup],
    state: &mut OptimizerState,
    lr: f64,
    hp: &AdamParams,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != groups.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} params, {} grads, {} groups, {} moment slots",
            params.len(),
            grads.len(),
            groups.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(TrainError::ShapeMismatch(format!(
                "param {i}: {} values, {} grads, {} moments",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = hp.betas;
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    for (i, p) in params.iter_mut().enumerate() {
        let group = groups[i];
        if !group.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for k in 0..p.len() {
            if group.decay {
                p[k] -= lr * hp.weight_decay * p[k];
            }
            let g = grads[i][k];
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over `warmup` steps, then a half
/// cosine down to 0 at `total_steps`.
pub fn lr_at_step(step: u64, base_lr: f64, warmup: u64, total_steps: u64) -> Result<f64, TrainError> {
    if total_steps <= warmup {
        return Err(TrainError::ConfigError(format!(
            "total_steps {total_steps} must exceed warmup {warmup}"
        )));
    }
    if step < warmup {
        return Ok(base_lr * step as f64 / warmup as f64);
    }
    if step >= total_steps {
        return Ok(0.0);
    }
    let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

fn default_betas() -> (f64, f64) {
    (0.9, 0.98)
}

/// Training hyper-parameters; loadable from a TOML file whose keys are the
/// field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss_mode: LossMode,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_iters: u64,
    pub max_epochs: u64,
    /// Optional hard cap on optimizer steps; also shortens the schedule.
    pub max_steps: Option<u64>,
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub init_temperature: f64,
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss_mode: LossMode::TriModal,
            batch_size: 256,
            base_lr: 5e-5,
            warmup_iters: 2000,
            max_epochs: 100,
            max_steps: None,
            weight_decay: 0.2,
            betas: default_betas(),
            eps: 1e-8,
            seed: 0,
            embed_dim: crate::embedding::DEFAULT_EMBED_DIM,
            hidden_dim: crate::encoders::DEFAULT_HIDDEN_DIM,
            init_temperature: crate::encoders::DEFAULT_TEMPERATURE,
            checkpoint_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, TrainError> {
        let c: Self = toml::from_str(s).map_err(|e| TrainError::ConfigError(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_toml_str(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::ConfigError(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("base_lr and eps must be positive, weight_decay non-negative".into());
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad(format!("betas {:?} outside [0, 1)", self.betas));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || !(self.init_temperature > 0.0) {
            return bad("embed_dim, hidden_dim and init_temperature must be positive".into());
        }
        Ok(())
    }

    /// Toy-tower model for feature widths `(audio, text, image)`.
    pub fn model_config(&self, widths: [usize; 3]) -> ModelConfig {
        let mut c = ModelConfig::with_dims(self.embed_dim, self.hidden_dim, widths);
        c.init_temperature = self.init_temperature;
        c
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            betas: self.betas,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    /// `max_epochs * steps_per_epoch`, capped by `max_steps`.
    pub fn total_steps(&self, n_train: usize) -> u64 {
        let per_epoch = (n_train / self.batch_size) as u64;
        let total = self.max_epochs * per_epoch;
        self.max_steps.map_or(total, |m| m.min(total))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub loss: LossBreakdown,
    /// Temperatures used for this step (before the update).
    pub tau: [f64; 3],
    /// l2 norm over the gradients of all updated parameters.
    pub grad_norm: f64,
}

pub const LOG_HEADER: [&str; 11] = [
    "step", "lr", "l_at", "l_ai", "l_ti", "total", "tau_at", "tau_ai", "tau_ti", "grad_norm", "epoch",
];

pub fn write_loss_log(log: &[StepLog], path: &Path) -> Result<(), TrainError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| TrainError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    };
    w.write_record(LOG_HEADER).map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for s in log {
        w.write_record([
            s.step.to_string(),
            format!("{}", s.lr),
            opt(s.loss.l_at),
            opt(s.loss.l_ai),
            opt(s.loss.l_ti),
            format!("{}", s.loss.total),
            format!("{}", s.tau[0]),
            format!("{}", s.tau[1]),
            format!("{}", s.tau[2]),
            format!("{}", s.grad_norm),
            s.epoch.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub snapshot: ModelSnapshot,
    pub log: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
}

pub const FINAL_CHECKPOINT: &str = "snapshot.gclp";
pub const LOSS_LOG: &str = "train_log.csv";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("checkpoint_epoch_{epoch:04}.gclp")
}

fn epoch_seed(seed: u64, epoch: u64) -> u64 {
    seed ^ (epoch.wrapping_add(1)).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Records the forward pass of every tower `mode` needs and the loss.
pub fn record_loss(
    tape: &mut Tape,
    snapshot: &ModelSnapshot,
    nodes: &SnapshotNodes,
    batch: &TripletBatch,
    mode: LossMode,
) -> Result<LossNodes, TrainError> {
    let used = mode.towers_used();
    let inputs = [&batch.audio, &batch.text, &batch.image];
    let mut emb = [None; 3];
    for m in Modality::ALL {
        let i = m as usize;
        if used[i] {
            let x = tape.constant(inputs[i].clone());
            emb[i] = Some(snapshot.tower(m).forward(tape, nodes.tower(m), x)?);
        }
    }
    total_loss(tape, emb[0], emb[1], emb[2], nodes.temperatures, mode)
}

/// Forward + backward on one batch. Returns the loss breakdown and the
/// gradient of every parameter in snapshot order (zeros for parameters
/// that were not leaves).
pub fn loss_and_grads(
    snapshot: &ModelSnapshot,
    batch: &TripletBatch,
    mode: LossMode,
) -> Result<(LossBreakdown, Vec<Array2<f64>>), TrainError> {
    let mut tape = Tape::new();
    let nodes = snapshot.register(&mut tape, trainable_towers(snapshot, mode), mode.active_pairs());
    let loss = record_loss(&mut tape, snapshot, &nodes, batch, mode)?;
    tape.backward(loss.total)?;
    let grads = nodes.params().iter().map(|&n| tape.grad(n).clone()).collect();
    Ok((loss.breakdown(&tape), grads))
}

/// Total loss of `snapshot`'s architecture evaluated at the parameter
/// leaves `params` (in parameter order); the shape expected by
/// [`crate::autodiff::finite_difference_check`].
pub fn loss_at_params(
    tape: &mut Tape,
    snapshot: &ModelSnapshot,
    params: &[NodeId],
    batch: &TripletBatch,
    mode: LossMode,
) -> Result<NodeId, TrainError> {
    let nodes = snapshot.nodes_from_flat(params)?;
    Ok(record_loss(tape, snapshot, &nodes, batch, mode)?.total)
}

fn trainable_towers(snapshot: &ModelSnapshot, mode: LossMode) -> [bool; 3] {
    let t = mode.towers_trainable();
    [
        t[0] && snapshot.config.audio.trainable,
        t[1] && snapshot.config.text.trainable,
        t[2] && snapshot.config.image.trainable,
    ]
}

/// Optimizer groups in snapshot parameter order for `mode`.
pub fn param_groups(snapshot: &ModelSnapshot, mode: LossMode) -> Vec<ParamGroup> {
    let towers = trainable_towers(snapshot, mode);
    let temps = mode.active_pairs();
    let mut temp_i = 0;
    snapshot
        .param_infos()
        .into_iter()
        .map(|info| match (info.kind, info.modality) {
            (ParamKind::Temperature, _) => {
                temp_i += 1;
                ParamGroup {
                    trainable: temps[temp_i - 1],
                    decay: false,
                }
            }
            (kind, Some(m)) => ParamGroup {
                trainable: towers[m as usize],
                decay: kind == ParamKind::Weight,
            },
            (_, None) => ParamGroup {
                trainable: false,
                decay: false,
            },
        })
        .collect()
}

/// Runs the training loop. Batches are reshuffled each epoch from
/// `config.seed`, so a run is fully determined by its inputs. With
/// `out_dir`, a checkpoint is written after every epoch (when enabled) and
/// the final snapshot and loss log at the end.
pub fn train_loop(
    config: &TrainConfig,
    table: &FeatureTable,
    train_ids: &[String],
    mut snapshot: ModelSnapshot,
    out_dir: Option<&Path>,
) -> Result<TrainResult, TrainError> {
    config.validate()?;
    let mode = config.loss_mode;
    let mut log = Vec::new();
    let mut checkpoints = Vec::new();
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let total_steps = config.total_steps(train_ids.len());
    if config.max_epochs > 0 && total_steps > 0 {
        // surfaces schedule misconfiguration before any work
        lr_at_step(0, config.base_lr, config.warmup_iters, total_steps)?;
    }
    let groups = param_groups(&snapshot, mode);
    let sizes: Vec<usize> = snapshot.param_slices().iter().map(|s| s.len()).collect();
    let mut state = OptimizerState::new(&sizes);
    let hp = config.adam();
    let mut step = 0u64;
    'epochs: for epoch in 0..config.max_epochs {
        let batches = make_batches(table, train_ids, config.batch_size, epoch_seed(config.seed, epoch), true)?;
        for batch in &batches {
            if step >= total_steps {
                break 'epochs;
            }
            let lr = lr_at_step(step, config.base_lr, config.warmup_iters, total_steps)?;
            let t = snapshot.temperatures;
            let tau = [t.tau_at(), t.tau_ai(), t.tau_ti()];
            let (loss, grads) = loss_and_grads(&snapshot, batch, mode)?;
            let grad_norm = grads
                .iter()
                .zip(&groups)
                .filter(|(_, g)| g.trainable)
                .flat_map(|(g, _)| g.iter())
                .map(|x| x * x)
                .sum::<f64>()
                .sqrt();
            let grad_slices: Vec<&[f64]> = grads.iter().map(|g| g.as_slice().expect("standard layout")).collect();
            {
                let mut params = snapshot.param_slices_mut();
                adam_step(&mut params, &grad_slices, &groups, &mut state, lr, &hp)?;
            }
            snapshot.temperatures.clamp();
            snapshot.step += 1;
            step += 1;
            log.push(StepLog {
                step,
                epoch,
                lr,
                loss,
                tau,
                grad_norm,
            });
        }
        log::info!(
            "epoch {epoch}: step {step}, loss {:.4}",
            log.last().map_or(f64::NAN, |s| s.loss.total)
        );
        if let (Some(dir), true) = (out_dir, config.checkpoint_every_epoch) {
            let p = dir.join(epoch_checkpoint_name(epoch));
            save_checkpoint(&snapshot, &p)?;
            checkpoints.push(p);
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(&snapshot, &dir.join(FINAL_CHECKPOINT))?;
        write_loss_log(&log, &dir.join(LOSS_LOG))?;
        let cfg_path = dir.join("train_config.toml");
        fs::write(&cfg_path, config.to_toml_string()).map_err(io_err(&cfg_path))?;
    }
    Ok(TrainResult {
        snapshot,
        log,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;
    use crate::dataset::{generate_synthetic_triplets, FeatureRow, SyntheticGenConfig};
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn batch(ids: &[&str], rows: Array2<f64>) -> EmbeddingBatch {
        EmbeddingBatch::from_raw(ids.iter().map(|s| s.to_string()).collect(), rows.view()).unwrap()
    }

    fn random_batch(rng: &mut ChaCha8Rng, n: usize, d: usize) -> EmbeddingBatch {
        let ids: Vec<String> = (0..n).map(|i| format!("k{i}")).collect();
        let raw = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
        EmbeddingBatch::from_raw(ids, raw.view()).unwrap()
    }

    /// Scalar-loop evaluation of the symmetric loss.
    fn loss_oracle(a: &EmbeddingBatch, b: &EmbeddingBatch, tau: f64) -> f64 {
        let n = a.len();
        let s = |i: usize, j: usize| -> f64 { (0..a.dim()).map(|k| a.rows()[[i, k]] * b.rows()[[j, k]]).sum::<f64>() / tau };
        let mut total = 0.0;
        for k in 0..n {
            let row: f64 = (0..n).map(|j| s(k, j).exp()).sum();
            let col: f64 = (0..n).map(|j| s(j, k).exp()).sum();
            total += -(s(k, k).exp() / row).ln() - (s(k, k).exp() / col).ln();
        }
        total / (2.0 * n as f64)
    }

    #[test]
    fn single_sample_loss_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for tau in [0.01, 0.07, 1.0] {
            let a = random_batch(&mut rng, 1, 5);
            let mut b = random_batch(&mut rng, 1, 5);
            b = EmbeddingBatch::from_raw(a.ids().to_vec(), b.rows().view()).unwrap();
            assert_eq!(pair_loss_value(&a, &b, tau).unwrap(), 0.0);
        }
    }

    #[test]
    fn orthonormal_pair_value() {
        let e = batch(&["a", "b"], array![[1.0, 0.0], [0.0, 1.0]]);
        let want = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        let got = pair_loss_value(&e, &e, 1.0).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.31326).abs() < 1e-5);
        let tb = total_loss_value(&e, &e, &e, &TemperatureSet::from_tau(1.0), LossMode::TriModal).unwrap();
        assert!((tb.total - 3.0 * want).abs() < 1e-12);
        assert!((tb.total - 0.93978).abs() < 1e-5);
    }

    #[test]
    fn identical_rows_give_log_n() {
        let rows = Array2::from_shape_fn((4, 3), |(_, j)| [0.6, 0.0, 0.8][j]);
        let a = batch(&["a", "b", "c", "d"], rows);
        assert!((pair_loss_value(&a, &a, 0.07).unwrap() - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn mode_breakdowns() {
        let e = batch(&["a", "b"], array![[1.0, 0.0], [0.0, 1.0]]);
        let t = TemperatureSet::from_tau(1.0);
        let b = total_loss_value(&e, &e, &e, &t, LossMode::ImageAudioOnly).unwrap();
        assert!(b.l_at.is_none() && b.l_ti.is_none());
        assert_eq!(b.total, b.l_ai.unwrap());
        let b = total_loss_value(&e, &e, &e, &t, LossMode::FrozenTextAudio).unwrap();
        assert!(b.l_at.is_none());
        assert!((b.total - b.l_ai.unwrap() - b.l_ti.unwrap()).abs() < 1e-15);
        let one = batch(&["x"], array![[1.0, 0.0]]);
        for mode in LossMode::ALL {
            assert_eq!(total_loss_value(&one, &one, &one, &t, mode).unwrap().total, 0.0);
        }
    }

    #[test]
    fn misaligned_batches_rejected() {
        let a = batch(&["a", "b"], array![[1.0, 0.0], [0.0, 1.0]]);
        let b = batch(&["b", "a"], array![[1.0, 0.0], [0.0, 1.0]]);
        assert!(matches!(pair_loss_value(&a, &b, 1.0), Err(TrainError::MisalignedBatch(_))));
        let c = batch(&["a"], array![[1.0, 0.0]]);
        assert!(matches!(pair_loss_value(&a, &c, 1.0), Err(TrainError::MisalignedBatch(_))));
    }

    #[test]
    fn loss_matches_scalar_oracle_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let n = rng.random_range(1..9);
            let a = random_batch(&mut rng, n, 6);
            let b = EmbeddingBatch::from_raw(a.ids().to_vec(), random_batch(&mut rng, n, 6).rows().view()).unwrap();
            let tau = rng.random_range(0.05..2.0);
            let ab = pair_loss_value(&a, &b, tau).unwrap();
            let ba = pair_loss_value(&b, &a, tau).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!((ab - loss_oracle(&a, &b, tau)).abs() < 1e-9);
            assert!(ab >= 0.0);
            let perm: Vec<usize> = (0..n).rev().collect();
            let pa = a.permuted(&perm);
            let pb = EmbeddingBatch::from_raw(pa.ids().to_vec(), b.permuted(&perm).rows().view()).unwrap();
            assert!((pair_loss_value(&pa, &pb, tau).unwrap() - ab).abs() < 1e-12);
        }
    }

    #[test]
    fn shrinking_tau_drives_dominant_diagonal_to_zero() {
        let a = batch(&["a", "b", "c"], array![[1.0, 0.1, 0.0], [0.0, 1.0, 0.2], [0.3, 0.0, 1.0]]);
        let mut prev = f64::INFINITY;
        for tau in [1.0, 0.5, 0.2, 0.1, 0.05, 0.02, 0.01, 0.005] {
            let l = pair_loss_value(&a, &a, tau).unwrap();
            assert!(l < prev || (l == 0.0 && prev == 0.0), "tau {tau}: {l} vs {prev}");
            prev = l;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn adam_hand_values() {
        let hp0 = AdamParams {
            weight_decay: 0.0,
            ..AdamParams::default()
        };
        let g = [ParamGroup {
            trainable: true,
            decay: true,
        }];
        let mut p = [1.0];
        let mut st = OptimizerState::new(&[1]);
        adam_step(&mut [&mut p[..]], &[&[1.0]], &g, &mut st, 1e-3, &hp0).unwrap();
        assert!((p[0] - (1.0 - 1e-3 / (1.0 + 1e-8))).abs() < 1e-15);
        assert!((p[0] - 0.999).abs() < 1e-10);

        let mut p = [0.7];
        let mut st = OptimizerState::new(&[1]);
        adam_step(&mut [&mut p[..]], &[&[0.0]], &g, &mut st, 1e-3, &hp0).unwrap();
        assert_eq!(p[0], 0.7);

        let hp = AdamParams {
            weight_decay: 0.2,
            ..AdamParams::default()
        };
        let mut p = [0.7, -2.0];
        let mut st = OptimizerState::new(&[2]);
        adam_step(&mut [&mut p[..]], &[&[0.0, 0.0]], &g, &mut st, 1e-3, &hp).unwrap();
        assert!((p[0] - 0.7 * (1.0 - 2e-4)).abs() < 1e-15);
        assert!((p[1] + 2.0 * (1.0 - 2e-4)).abs() < 1e-15);
    }

    #[test]
    fn adam_respects_groups_and_shapes() {
        let hp = AdamParams::default();
        let groups = [
            ParamGroup { trainable: false, decay: true },
            ParamGroup { trainable: true, decay: false },
        ];
        let mut a = [1.0, 2.0];
        let mut b = [3.0];
        let mut st = OptimizerState::new(&[2, 1]);
        adam_step(&mut [&mut a[..], &mut b[..]], &[&[1.0, 1.0], &[0.0]], &groups, &mut st, 0.1, &hp).unwrap();
        assert_eq!(a, [1.0, 2.0]);
        assert_eq!(b, [3.0]);
        let bad = adam_step(&mut [&mut a[..], &mut b[..]], &[&[1.0], &[0.0]], &groups, &mut st, 0.1, &hp);
        assert!(matches!(bad, Err(TrainError::ShapeMismatch(_))));
    }

    #[test]
    fn schedule_values() {
        let total = 10_000;
        assert_eq!(lr_at_step(0, 5e-5, 2000, total).unwrap(), 0.0);
        assert!((lr_at_step(1000, 5e-5, 2000, total).unwrap() - 2.5e-5).abs() < 1e-20);
        assert!((lr_at_step(2000, 5e-5, 2000, total).unwrap() - 5e-5).abs() < 1e-20);
        assert!((lr_at_step(6000, 5e-5, 2000, total).unwrap() - 2.5e-5).abs() < 1e-18);
        assert_eq!(lr_at_step(total, 5e-5, 2000, total).unwrap(), 0.0);
        assert!(matches!(lr_at_step(0, 5e-5, 2000, 2000), Err(TrainError::ConfigError(_))));
        let mut prev = f64::INFINITY;
        for s in (2000..=total).step_by(250) {
            let lr = lr_at_step(s, 5e-5, 2000, total).unwrap();
            assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn config_toml_roundtrip_and_defaults() {
        let c = TrainConfig::from_toml_str("loss_mode = \"frozen_text_audio\"\nbatch_size = 32\n").unwrap();
        assert_eq!(c.loss_mode, LossMode::FrozenTextAudio);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.base_lr, 5e-5);
        assert_eq!(c.warmup_iters, 2000);
        assert_eq!(c.betas, (0.9, 0.98));
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        assert!(TrainConfig::from_toml_str("batch_size = 0").is_err());
        assert!(TrainConfig::from_toml_str("bogus = 1").is_err());
        assert!(TrainConfig::from_toml_str("loss_mode = \"quad\"").is_err());
    }

    fn tiny_setup(n: usize) -> (FeatureTable, ModelSnapshot) {
        let d = generate_synthetic_triplets(&SyntheticGenConfig::new(n, 2)).unwrap();
        let mut table = FeatureTable::new();
        // shrink feature widths so the loop tests stay fast
        for r in d.features.rows() {
            table
                .insert(FeatureRow {
                    id: r.id.clone(),
                    audio: r.audio[..6].to_vec(),
                    text: r.text[..5].to_vec(),
                    image: r.image[..7].to_vec(),
                })
                .unwrap();
        }
        let snap = ModelSnapshot::init(ModelConfig::with_dims(8, 10, [6, 5, 7]), 1).unwrap();
        (table, snap)
    }

    fn quick_config(mode: LossMode) -> TrainConfig {
        TrainConfig {
            loss_mode: mode,
            batch_size: 8,
            base_lr: 1e-2,
            warmup_iters: 5,
            max_epochs: 4,
            embed_dim: 8,
            hidden_dim: 10,
            ..TrainConfig::default()
        }
    }

    fn fd_loss(snap: &ModelSnapshot, batch: &TripletBatch, mode: LossMode) -> impl Fn(&mut Tape, &[NodeId]) -> Result<NodeId, AutodiffError> {
        let (snap, batch) = (snap.clone(), batch.clone());
        move |tape, p| {
            loss_at_params(tape, &snap, p, &batch, mode).map_err(|e| match e {
                TrainError::Autodiff(a) => a,
                other => AutodiffError::NonFiniteValue(other.to_string()),
            })
        }
    }

    #[test]
    fn tri_modal_gradients_match_finite_differences() {
        let (table, snap) = tiny_setup(4);
        let b = table.batch(&table.ids()).unwrap();
        let r = finite_difference_check(fd_loss(&snap, &b, LossMode::TriModal), &snap.param_tensors(), 1e-6).unwrap();
        assert!(r.max_rel_error < 1e-4, "max rel err {}", r.max_rel_error);
        let (_, grads) = loss_and_grads(&snap, &b, LossMode::TriModal).unwrap();
        assert_eq!(grads, r.analytic);
    }

    #[test]
    fn partial_modes_route_gradients() {
        let (table, snap) = tiny_setup(4);
        let b = table.batch(&table.ids()).unwrap();
        let infos = snap.param_infos();
        for mode in [LossMode::ImageAudioOnly, LossMode::FrozenTextAudio] {
            let r = finite_difference_check(fd_loss(&snap, &b, mode), &snap.param_tensors(), 1e-6).unwrap();
            let (_, grads) = loss_and_grads(&snap, &b, mode).unwrap();
            for (i, g) in param_groups(&snap, mode).iter().enumerate() {
                if g.trainable {
                    assert_eq!(grads[i], r.analytic[i], "{mode} {}", infos[i].name);
                } else {
                    assert!(grads[i].iter().all(|&x| x == 0.0), "{mode}: frozen {} got grads", infos[i].name);
                }
            }
            assert!(r.max_rel_error < 1e-4, "{mode}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn zero_epochs_leaves_snapshot_unchanged() {
        let (table, snap) = tiny_setup(16);
        let mut c = quick_config(LossMode::TriModal);
        c.max_epochs = 0;
        let r = train_loop(&c, &table, &table.ids(), snap.clone(), None).unwrap();
        assert_eq!(r.snapshot, snap);
        assert!(r.log.is_empty());
    }

    #[test]
    fn training_is_deterministic_and_lowers_loss() {
        let (table, snap) = tiny_setup(64);
        let c = quick_config(LossMode::TriModal);
        let a = train_loop(&c, &table, &table.ids(), snap.clone(), None).unwrap();
        let b = train_loop(&c, &table, &table.ids(), snap.clone(), None).unwrap();
        assert_eq!(a.snapshot, b.snapshot);
        assert_eq!(a.log.len(), 4 * 8);
        let first: f64 = a.log[..8].iter().map(|s| s.loss.total).sum::<f64>() / 8.0;
        let last: f64 = a.log[24..].iter().map(|s| s.loss.total).sum::<f64>() / 8.0;
        assert!(last < first, "first {first} last {last}");
        assert!(a.log.iter().all(|s| s.tau.iter().all(|&t| t > 0.0 && 1.0 / t <= 100.0 + 1e-9)));
    }

    #[test]
    fn frozen_mode_keeps_text_and_audio_bitwise() {
        let (table, snap) = tiny_setup(32);
        let c = quick_config(LossMode::FrozenTextAudio);
        let r = train_loop(&c, &table, &table.ids(), snap.clone(), None).unwrap();
        assert_eq!(r.snapshot.audio, snap.audio);
        assert_eq!(r.snapshot.text, snap.text);
        assert_ne!(r.snapshot.image, snap.image);
        assert_eq!(r.snapshot.temperatures.log_inv_tau_at, snap.temperatures.log_inv_tau_at);
        assert_ne!(r.snapshot.temperatures.log_inv_tau_ai, snap.temperatures.log_inv_tau_ai);
        assert!(r.log.iter().all(|s| s.loss.l_at.is_none()));
    }

    #[test]
    fn image_audio_only_leaves_text_tower() {
        let (table, snap) = tiny_setup(32);
        let r = train_loop(&quick_config(LossMode::ImageAudioOnly), &table, &table.ids(), snap.clone(), None).unwrap();
        assert_eq!(r.snapshot.text, snap.text);
        assert_ne!(r.snapshot.audio, snap.audio);
    }

    #[test]
    fn outputs_written() {
        let (table, snap) = tiny_setup(32);
        let dir = tempfile::tempdir().unwrap();
        let c = quick_config(LossMode::TriModal);
        let r = train_loop(&c, &table, &table.ids(), snap, Some(dir.path())).unwrap();
        assert_eq!(r.checkpoints.len(), 4);
        let back = crate::encoders::load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(back, r.snapshot);
        let mut rdr = csv::Reader::from_path(dir.path().join(LOSS_LOG)).unwrap();
        let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
        assert_eq!(&header[..9], &["step", "lr", "l_at", "l_ai", "l_ti", "total", "tau_at", "tau_ai", "tau_ti"]);
        assert_eq!(rdr.records().count(), r.log.len());
        let saved = TrainConfig::load(&dir.path().join("train_config.toml")).unwrap();
        assert_eq!(saved, c);
    }

    proptest! {
        #[test]
        fn log_parameterized_tau_stays_positive(v in -50.0f64..50.0) {
            let mut t = TemperatureSet { log_inv_tau_at: v, log_inv_tau_ai: v, log_inv_tau_ti: v };
            t.clamp();
            prop_assert!(t.tau_at() > 0.0);
            prop_assert!(1.0 / t.tau_ai() <= 100.0 * (1.0 + 1e-12));
        }
    }
}
