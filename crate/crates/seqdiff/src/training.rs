//! Loss assembly, the Adam training loop with EMA tracking, and the
//! checkpoint file format.
//!
//! The loss is built on the tape end to end: the noise levels, the input
//! preconditioning, the clean embeddings, and the network forward all live
//! in one graph, so one backward sweep yields gradients for the denoiser,
//! the embedding tables, and both schedules' exponents.

use ndarray::{Array1, Array2, Array3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;
use std::rc::Rc;

use crate::autodiff::{NodeId, Tape};
use crate::dataio::{compute_norm_stats, DatasetManifest, NormStats, SequenceBatch};
use crate::denoiser::{coefficients_on_tape, DenoiserConfig, ForwardInput, SIGMA_DATA};
use crate::diffusion::{one_hot, DiffusionModel};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::schedule::{ScheduleLeaves, ScheduleParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Named parameter arrays in model order, as stored in checkpoints.
pub type ParamBlocks = Vec<(String, Array2<f32>)>;

fn default_learning_rate() -> f64 {
    0.001
}
fn default_ema_decay() -> f64 {
    0.997
}
fn default_lambda() -> f64 {
    1.0
}
fn default_p_drop() -> f64 {
    0.1
}
fn default_true() -> bool {
    true
}

/// Training hyperparameters, read from a JSON config file. Unknown keys are
/// rejected so typos fail loudly.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default = "default_ema_decay")]
    pub ema_decay: f64,
    #[serde(default = "default_lambda")]
    pub lambda_num: f64,
    #[serde(default = "default_lambda")]
    pub lambda_emb: f64,
    #[serde(default = "default_p_drop")]
    pub p_drop: f64,
    pub seed: u64,
    /// Ablation switch: false freezes both schedules' exponents at their
    /// initial values while everything else keeps learning.
    #[serde(default = "default_true")]
    pub learn_schedule: bool,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::argument("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::argument("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::argument("epochs must be positive"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::argument("ema_decay must lie in (0,1)"));
        }
        if self.lambda_num < 0.0 || self.lambda_emb < 0.0 {
            return Err(Error::argument("loss weights must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::argument("p_drop must lie in [0,1]"));
        }
        Ok(())
    }
}

/// Per-element loss weight (sigma^2 + sigma_data^2) / (sigma * sigma_data)^2,
/// identical to 1/c_out(sigma)^2.
pub fn lambda_weight<T: Scalar>(sigma: T) -> T {
    let s2 = sigma * sigma;
    let d2 = T::from_f64(SIGMA_DATA * SIGMA_DATA);
    (s2 + d2) / (s2 * d2)
}

// --- Batch preparation ------------------------------------------------------

/// One training batch with all of its randomness drawn and fixed: diffusion
/// times, label drops, and the noise for both channels. Keeping the draws
/// explicit makes training reproducible and lets gradient checks replay the
/// identical loss surface.
pub struct PreparedBatch<T: Scalar> {
    /// Normalized clean numerical values, position-major [L*B, M_num].
    pub x0_num: Array2<T>,
    /// Position-major target category per categorical feature, length L*B.
    pub cat_targets: Vec<Rc<Vec<usize>>>,
    /// One-hot label rows [B, C_y]; dropped rows are all zero.
    pub onehot: Array2<T>,
    /// Diffusion time per sample.
    pub t: Vec<T>,
    pub eps_num: Array2<T>,
    pub eps_emb: Array2<T>,
    pub seq_len: usize,
    pub batch: usize,
}

/// Assemble a batch from dataset rows. The draw order per batch is pinned:
/// all times, then all label drops, then numerical noise, then embedding
/// noise (each position-major, row-major).
pub fn prepare_batch<T: Scalar, R: Rng + ?Sized>(
    numerical: &Array3<f32>,
    categorical: &Array3<u8>,
    labels: &Array1<u8>,
    indices: &[usize],
    config: &DenoiserConfig,
    p_drop: f64,
    rng: &mut R,
) -> Result<PreparedBatch<T>> {
    let batch = indices.len();
    let seq_len = numerical.dim().1;
    let rows = seq_len * batch;
    let m_num = config.num_features;
    let m_cat = config.cat_cardinalities.len();
    let emb_width = config.emb_width();

    let t: Vec<T> = (0..batch).map(|_| T::from_f64(rng.gen::<f64>())).collect();
    let drops: Vec<bool> = (0..batch).map(|_| rng.gen::<f64>() < p_drop).collect();
    let eps_num = Array2::from_shape_fn((rows, m_num), |_| T::sample_standard_normal(rng));
    let eps_emb = Array2::from_shape_fn((rows, emb_width), |_| T::sample_standard_normal(rng));

    let mut x0_num = Array2::zeros((rows, m_num));
    let mut cat_targets: Vec<Vec<usize>> = vec![vec![0; rows]; m_cat];
    let mut batch_labels = Vec::with_capacity(batch);
    for (b, &s) in indices.iter().enumerate() {
        batch_labels.push(labels[s]);
        for l in 0..seq_len {
            for f in 0..m_num {
                x0_num[[l * batch + b, f]] = T::from_f64(f64::from(numerical[[s, l, f]]));
            }
            for (j, targets) in cat_targets.iter_mut().enumerate() {
                targets[l * batch + b] = usize::from(categorical[[s, l, j]]);
            }
        }
    }
    let mut onehot = one_hot::<T>(&batch_labels, config.label_cardinality)?;
    for (b, &dropped) in drops.iter().enumerate() {
        if dropped {
            onehot.row_mut(b).fill(T::zero());
        }
    }
    Ok(PreparedBatch {
        x0_num,
        cat_targets: cat_targets.into_iter().map(Rc::new).collect(),
        onehot,
        t,
        eps_num,
        eps_emb,
        seq_len,
        batch,
    })
}

// --- Loss on the tape -------------------------------------------------------

/// Tape leaves for every learnable array, in `DiffusionModel::named_params`
/// order.
pub struct ModelLeaves {
    pub denoiser: Vec<NodeId>,
    pub embed: Vec<NodeId>,
    pub sched_num: ScheduleLeaves,
    pub sched_emb: ScheduleLeaves,
}

impl ModelLeaves {
    pub fn create<T: Scalar>(tape: &mut Tape<T>, model: &DiffusionModel<T>) -> Self {
        let denoiser = model.denoiser.leaves(tape);
        let embed = model
            .embeddings
            .tables
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect();
        let sched_num = model.schedule_num.leaves(tape);
        let sched_emb = model.schedule_emb.leaves(tape);
        ModelLeaves {
            denoiser,
            embed,
            sched_num,
            sched_emb,
        }
    }

    /// Rebuild the structure from a flat id list in `named_params` order
    /// (used by gradient checks, where the probe owns the leaves).
    pub fn from_flat<T: Scalar>(ids: &[NodeId], model: &DiffusionModel<T>) -> Self {
        let nd = model.denoiser.named_params().count();
        let ne = model.embeddings.tables.len();
        assert_eq!(ids.len(), nd + ne + 6, "flat leaf count mismatch");
        ModelLeaves {
            denoiser: ids[..nd].to_vec(),
            embed: ids[nd..nd + ne].to_vec(),
            sched_num: ScheduleLeaves {
                rho_global: ids[nd + ne],
                rho_feature: ids[nd + ne + 1],
                rho_time: ids[nd + ne + 2],
            },
            sched_emb: ScheduleLeaves {
                rho_global: ids[nd + ne + 3],
                rho_feature: ids[nd + ne + 4],
                rho_time: ids[nd + ne + 5],
            },
        }
    }

    /// Flat id list aligned with `DiffusionModel::named_params` order.
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = self.denoiser.clone();
        out.extend(&self.embed);
        out.extend([
            self.sched_num.rho_global,
            self.sched_num.rho_feature,
            self.sched_num.rho_time,
            self.sched_emb.rho_global,
            self.sched_emb.rho_feature,
            self.sched_emb.rho_time,
        ]);
        out
    }
}

/// Scalar nodes of one loss evaluation.
pub struct LossNodes {
    pub total: NodeId,
    pub numerical: NodeId,
    pub categorical: NodeId,
}

/// Closed-form noise levels for per-sample times, position-major
/// [L*B, F*expand] (no gradient path; used when the schedule is frozen).
pub fn sigma_values<T: Scalar>(
    schedule: &ScheduleParams<T>,
    t: &[T],
    expand: usize,
) -> Result<Array2<T>> {
    let (seq_len, features) = (schedule.timesteps(), schedule.features());
    let batch = t.len();
    let mut out = Array2::zeros((seq_len * batch, features * expand));
    for l in 0..seq_len {
        for (b, &tb) in t.iter().enumerate() {
            for f in 0..features {
                let s = schedule.sigma(tb, f, l)?;
                for e in 0..expand {
                    out[[l * batch + b, f * expand + e]] = s;
                }
            }
        }
    }
    Ok(out)
}

/// The lambda-weighted denoising loss: mean of ((x0_hat - x0)/c_out)^2,
/// with x0_hat = c_skip*x_t + c_out*f.
pub fn numerical_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    x0: NodeId,
    x_t: NodeId,
    f_num: NodeId,
    sigma: NodeId,
) -> NodeId {
    let (_c_in, c_skip, c_out) = coefficients_on_tape(tape, sigma);
    let skip = tape.mul(c_skip, x_t);
    let scaled = tape.mul(c_out, f_num);
    let x0_hat = tape.add(skip, scaled);
    let diff = tape.sub(x0_hat, x0);
    let inv_out = tape.powf(c_out, -T::one());
    let weighted = tape.mul(diff, inv_out);
    let sq = tape.mul(weighted, weighted);
    tape.mean_all(sq)
}

/// Cross-entropy of the true categories under the softmaxed logits,
/// averaged over positions and batch, then over features.
pub fn categorical_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    logits: &[NodeId],
    targets: &[Rc<Vec<usize>>],
) -> NodeId {
    assert_eq!(logits.len(), targets.len());
    if logits.is_empty() {
        return tape.zeros(1, 1);
    }
    let mut total: Option<NodeId> = None;
    for (&lj, tj) in logits.iter().zip(targets.iter()) {
        let (loss, _probs) = tape.softmax_xent(lj, tj);
        total = Some(match total {
            Some(acc) => tape.add(acc, loss),
            None => loss,
        });
    }
    let sum = total.expect("nonempty");
    tape.scale(sum, T::one() / T::from_f64(logits.len() as f64))
}

/// Assemble the full objective for one prepared batch. With
/// `learn_schedule` false the noise levels enter as constants, cutting the
/// gradient path to the exponents without touching anything else.
pub fn build_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &DiffusionModel<T>,
    leaves: &ModelLeaves,
    prepared: &PreparedBatch<T>,
    lambda_num: T,
    lambda_emb: T,
    learn_schedule: bool,
) -> Result<LossNodes> {
    let (seq_len, batch) = (prepared.seq_len, prepared.batch);
    let rows = seq_len * batch;
    let d = model.embeddings.dim();

    // Per-row time column for the schedules.
    let mut t_rows = Array2::zeros((rows, 1));
    for l in 0..seq_len {
        for (b, &tb) in prepared.t.iter().enumerate() {
            t_rows[[l * batch + b, 0]] = tb;
        }
    }
    let (sigma_num, sigma_emb) = if learn_schedule {
        let t_node_vals = t_rows.clone();
        let sn = model
            .schedule_num
            .sigma_on_tape(tape, &leaves.sched_num, &t_node_vals, batch, 1);
        let se = model
            .schedule_emb
            .sigma_on_tape(tape, &leaves.sched_emb, &t_rows, batch, d);
        (sn, se)
    } else {
        let sn = tape.leaf(sigma_values(&model.schedule_num, &prepared.t, 1)?);
        let se = tape.leaf(sigma_values(&model.schedule_emb, &prepared.t, d)?);
        (sn, se)
    };

    // Numerical channel: corrupt, precondition.
    let x0_num = tape.leaf(prepared.x0_num.clone());
    let eps_num = tape.leaf(prepared.eps_num.clone());
    let noise_num = tape.mul(sigma_num, eps_num);
    let x_t_num = tape.add(x0_num, noise_num);
    let (c_in_num, _, _) = coefficients_on_tape(tape, sigma_num);
    let x_num_scaled = tape.mul(c_in_num, x_t_num);

    // Embedding channel: look up clean embeddings, corrupt, precondition.
    let x0_emb = if model.embeddings.tables.is_empty() {
        tape.zeros(rows, 0)
    } else {
        let blocks: Vec<NodeId> = leaves
            .embed
            .iter()
            .zip(prepared.cat_targets.iter())
            .map(|(&table, targets)| model.embeddings.embed_on_tape(tape, table, targets))
            .collect();
        tape.concat_cols(&blocks)
    };
    let eps_emb = tape.leaf(prepared.eps_emb.clone());
    let noise_emb = tape.mul(sigma_emb, eps_emb);
    let x_t_emb = tape.add(x0_emb, noise_emb);
    let (c_in_emb, _, _) = coefficients_on_tape(tape, sigma_emb);
    let x_emb_scaled = tape.mul(c_in_emb, x_t_emb);

    let out = model.denoiser.forward_on_tape(
        tape,
        &leaves.denoiser,
        &ForwardInput {
            x_num_scaled,
            x_emb_scaled,
            label_onehot: &prepared.onehot,
            t: &prepared.t,
            seq_len,
            batch,
        },
    );

    let numerical = numerical_loss_on_tape(tape, x0_num, x_t_num, out.f_num, sigma_num);
    let categorical = categorical_loss_on_tape(tape, &out.logits, &prepared.cat_targets);
    let weighted_num = tape.scale(numerical, lambda_num);
    let weighted_cat = tape.scale(categorical, lambda_emb);
    let total = tape.add(weighted_num, weighted_cat);
    Ok(LossNodes {
        total,
        numerical,
        categorical,
    })
}

// --- Optimizer ---------------------------------------------------------------

pub(crate) struct Adam {
    m: Vec<Array2<f32>>,
    v: Vec<Array2<f32>>,
    steps: u64,
}

impl Adam {
    pub(crate) fn new(shapes: &[(usize, usize)]) -> Self {
        Adam {
            m: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            steps: 0,
        }
    }

    /// One update over all parameters; `grads[i] = None` leaves parameter i
    /// untouched by the gradient but still advances the bias correction.
    pub(crate) fn update(
        &mut self,
        params: &mut [&mut Array2<f32>],
        grads: &[Option<&Array2<f32>>],
        lr: f64,
    ) {
        self.steps += 1;
        let b1 = ADAM_BETA1 as f32;
        let b2 = ADAM_BETA2 as f32;
        let eps = ADAM_EPS as f32;
        let c1 = 1.0 - (ADAM_BETA1).powi(self.steps as i32) as f32;
        let c2 = 1.0 - (ADAM_BETA2).powi(self.steps as i32) as f32;
        let lr = lr as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let g = match grads[i] {
                Some(g) => g,
                None => continue,
            };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for ((pv, &gv), (mv, vv)) in p
                .iter_mut()
                .zip(g.iter())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// EMA shadow update m <- decay*m + (1-decay)*p for every parameter.
fn ema_update(ema: &mut [(String, Array2<f32>)], params: &[(String, &Array2<f32>)], decay: f32) {
    for ((_, shadow), (_, p)) in ema.iter_mut().zip(params.iter()) {
        for (s, &pv) in shadow.iter_mut().zip(p.iter()) {
            *s = decay * *s + (1.0 - decay) * pv;
        }
    }
}

/// Empirical class frequencies of the label column.
pub fn label_frequencies(labels: &Array1<u8>, classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; classes];
    for &l in labels.iter() {
        counts[usize::from(l)] += 1;
    }
    counts
        .iter()
        .map(|&c| c as f64 / labels.len().max(1) as f64)
        .collect()
}

// --- Training loop ------------------------------------------------------------

/// Train a fresh model on the dataset. The metrics sink receives one CSV
/// line per step: step,loss_num,loss_emb,ema_loss. Returns the checkpoint
/// with the lowest exponentially smoothed loss (parameters and EMA shadows
/// snapshotted at that point).
pub fn train<W: Write>(
    manifest: &DatasetManifest,
    data: &SequenceBatch,
    denoiser_config: DenoiserConfig,
    config: &TrainConfig,
    metrics: &mut W,
) -> Result<Checkpoint> {
    config.validate()?;
    data.validate(manifest)?;
    if denoiser_config.num_features != manifest.numerical.len()
        || denoiser_config.cat_cardinalities
            != manifest
                .categorical
                .iter()
                .map(|c| c.cardinality)
                .collect::<Vec<_>>()
        || denoiser_config.label_cardinality != manifest.label.cardinality
    {
        return Err(Error::data(
            "dataset manifest does not match the model configuration",
        ));
    }

    let n = data.n();
    let seq_len = data.seq_len();
    let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
    let mut model = DiffusionModel::<f32>::init(denoiser_config.clone(), seq_len, &mut rng)?;

    let stats = compute_norm_stats(&data.numerical.view());
    let mut normalized = data.clone();
    normalized.normalize(&stats);
    let freqs = label_frequencies(&data.labels, denoiser_config.label_cardinality);

    let shapes: Vec<(usize, usize)> = model.named_params().iter().map(|(_, a)| a.dim()).collect();
    let mut adam = Adam::new(&shapes);
    let mut ema: ParamBlocks = model
        .named_params()
        .iter()
        .map(|(n, a)| (n.clone(), (*a).clone()))
        .collect();

    writeln!(metrics, "step,loss_num,loss_emb,ema_loss")?;

    let mut step: u64 = 0;
    let mut ema_loss = f64::INFINITY;
    let mut best: Option<(f64, ParamBlocks, ParamBlocks, u64)> = None;
    let mut indices: Vec<usize> = (0..n).collect();

    for _epoch in 0..config.epochs {
        indices.shuffle(&mut rng);
        for chunk in indices.chunks(config.batch_size) {
            let prepared = prepare_batch::<f32, _>(
                &normalized.numerical,
                &normalized.categorical,
                &normalized.labels,
                chunk,
                &denoiser_config,
                config.p_drop,
                &mut rng,
            )?;
            let mut tape = Tape::new();
            let leaves = ModelLeaves::create(&mut tape, &model);
            let nodes = build_loss(
                &mut tape,
                &model,
                &leaves,
                &prepared,
                config.lambda_num as f32,
                config.lambda_emb as f32,
                config.learn_schedule,
            )?;
            let loss_num = f64::from(tape.scalar_value(nodes.numerical));
            let loss_emb = f64::from(tape.scalar_value(nodes.categorical));
            let loss = f64::from(tape.scalar_value(nodes.total));
            if !loss.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss at step {step} (numerical {loss_num}, categorical {loss_emb})"
                )));
            }
            tape.backward(nodes.total);

            let flat = leaves.flat();
            let grads: Vec<Option<&Array2<f32>>> = flat.iter().map(|&id| tape.grad(id)).collect();
            let mut params: Vec<&mut Array2<f32>> = model
                .named_params_mut()
                .into_iter()
                .map(|(_, p)| p)
                .collect();
            adam.update(&mut params, &grads, config.learning_rate);
            drop(params);
            ema_update(&mut ema, &model.named_params(), config.ema_decay as f32);

            ema_loss = if step == 0 {
                loss
            } else {
                config.ema_decay * ema_loss + (1.0 - config.ema_decay) * loss
            };
            writeln!(metrics, "{step},{loss_num},{loss_emb},{ema_loss}")?;
            step += 1;
        }
        if best.as_ref().is_none_or(|(b, ..)| ema_loss < *b) {
            let params_snapshot: ParamBlocks = model
                .named_params()
                .iter()
                .map(|(n, a)| (n.clone(), (*a).clone()))
                .collect();
            best = Some((ema_loss, params_snapshot, ema.clone(), step));
        }
    }

    let (_, params, ema, step) = best.expect("at least one epoch ran");
    Ok(Checkpoint {
        step,
        seq_len,
        config: denoiser_config,
        normalization: stats,
        label_freqs: freqs,
        num_names: manifest.numerical.clone(),
        cat_names: manifest.categorical.iter().map(|c| c.name.clone()).collect(),
        label_name: manifest.label.name.clone(),
        params,
        ema,
    })
}

// --- Checkpoint ----------------------------------------------------------------

pub const CHECKPOINT_FORMAT: &str = "seqdiff-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// A trained model snapshot: raw parameters, their EMA shadows (the weights
/// used for sampling), the model hyperparameters, and what the data pipeline
/// needs (normalization statistics, label frequencies).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub seq_len: usize,
    pub config: DenoiserConfig,
    pub normalization: NormStats,
    pub label_freqs: Vec<f64>,
    pub num_names: Vec<String>,
    pub cat_names: Vec<String>,
    pub label_name: String,
    pub params: ParamBlocks,
    pub ema: ParamBlocks,
}

fn join_f64(values: &[f64]) -> String {
    if values.is_empty() {
        "-".to_string()
    } else {
        values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn join_usize(values: &[usize]) -> String {
    if values.is_empty() {
        "-".to_string()
    } else {
        values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(",")
    }
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.parse::<f64>()
                .map_err(|_| Error::data(format!("checkpoint header: bad number '{p}'")))
        })
        .collect()
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    if s == "-" {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::data(format!("checkpoint header: bad integer '{p}'")))
        })
        .collect()
}

impl Checkpoint {
    /// Serialize: a text key-value header, a blank line, the parameter
    /// blocks as little-endian f32, and the first 8 bytes of the SHA-256 of
    /// everything before as the trailing checksum.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::new();
        let c = &self.config;
        header.push_str(&format!("format {CHECKPOINT_FORMAT}\n"));
        header.push_str(&format!("version {CHECKPOINT_VERSION}\n"));
        header.push_str(&format!("step {}\n", self.step));
        header.push_str(&format!("seq_len {}\n", self.seq_len));
        header.push_str(&format!("num_features {}\n", c.num_features));
        header.push_str(&format!(
            "cat_cardinalities {}\n",
            join_usize(&c.cat_cardinalities)
        ));
        header.push_str(&format!("label_cardinality {}\n", c.label_cardinality));
        header.push_str(&format!("embed_dim {}\n", c.embed_dim));
        header.push_str(&format!("hidden {}\n", c.hidden));
        header.push_str(&format!("layers {}\n", c.layers));
        header.push_str(&format!("time_dim {}\n", c.time_dim));
        header.push_str(&format!("label_dim {}\n", c.label_dim));
        header.push_str(&format!("norm_mean {}\n", join_f64(&self.normalization.mean)));
        header.push_str(&format!("norm_std {}\n", join_f64(&self.normalization.std)));
        header.push_str(&format!("label_freqs {}\n", join_f64(&self.label_freqs)));
        // Feature names are JSON-encoded so arbitrary characters (spaces,
        // newlines) survive the line-oriented header.
        header.push_str(&format!(
            "num_names {}\n",
            serde_json::to_string(&self.num_names).expect("string list encodes")
        ));
        header.push_str(&format!(
            "cat_names {}\n",
            serde_json::to_string(&self.cat_names).expect("string list encodes")
        ));
        header.push_str(&format!(
            "label_name {}\n",
            serde_json::to_string(&self.label_name).expect("string encodes")
        ));
        for (kind, list) in [("params", &self.params), ("ema", &self.ema)] {
            for (name, a) in list.iter() {
                header.push_str(&format!("block {kind}.{name} {} {}\n", a.nrows(), a.ncols()));
            }
        }
        header.push('\n');

        let mut bytes = header.into_bytes();
        for (_, a) in self.params.iter().chain(self.ema.iter()) {
            for &v in a.iter() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&bytes);
        bytes.extend_from_slice(&digest[..8]);
        bytes
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::data("checkpoint file truncated"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let digest = Sha256::digest(body);
        if tail != &digest[..8] {
            return Err(Error::data("checkpoint digest mismatch (file corrupted)"));
        }
        let sep = body
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::data("checkpoint header terminator missing"))?;
        let header = std::str::from_utf8(&body[..sep])
            .map_err(|_| Error::data("checkpoint header is not UTF-8"))?;
        let binary = &body[sep + 2..];

        let mut fields = std::collections::HashMap::new();
        let mut blocks: Vec<(String, usize, usize)> = Vec::new();
        for line in header.lines() {
            let (key, value) = line
                .split_once(' ')
                .ok_or_else(|| Error::data(format!("checkpoint header: bad line '{line}'")))?;
            if key == "block" {
                let parts: Vec<&str> = value.split(' ').collect();
                if parts.len() != 3 {
                    return Err(Error::data(format!(
                        "checkpoint header: bad block line '{line}'"
                    )));
                }
                let rows = parts[1]
                    .parse::<usize>()
                    .map_err(|_| Error::data("checkpoint header: bad block rows"))?;
                let cols = parts[2]
                    .parse::<usize>()
                    .map_err(|_| Error::data("checkpoint header: bad block cols"))?;
                blocks.push((parts[0].to_string(), rows, cols));
            } else {
                fields.insert(key.to_string(), value.to_string());
            }
        }
        let get = |key: &str| -> Result<&String> {
            fields
                .get(key)
                .ok_or_else(|| Error::data(format!("checkpoint header: missing '{key}'")))
        };
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(Error::data("not a checkpoint file"));
        }
        let version: u32 = get("version")?
            .parse()
            .map_err(|_| Error::data("checkpoint header: bad version"))?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let parse_num = |key: &str| -> Result<usize> {
            get(key)?
                .parse::<usize>()
                .map_err(|_| Error::data(format!("checkpoint header: bad '{key}'")))
        };
        let config = DenoiserConfig {
            num_features: parse_num("num_features")?,
            cat_cardinalities: parse_usize_list(get("cat_cardinalities")?)?,
            label_cardinality: parse_num("label_cardinality")?,
            embed_dim: parse_num("embed_dim")?,
            hidden: parse_num("hidden")?,
            layers: parse_num("layers")?,
            time_dim: parse_num("time_dim")?,
            label_dim: parse_num("label_dim")?,
        };
        let step: u64 = get("step")?
            .parse()
            .map_err(|_| Error::data("checkpoint header: bad step"))?;
        let normalization = NormStats {
            mean: parse_f64_list(get("norm_mean")?)?,
            std: parse_f64_list(get("norm_std")?)?,
        };
        let label_freqs = parse_f64_list(get("label_freqs")?)?;
        let parse_names = |key: &str| -> Result<Vec<String>> {
            serde_json::from_str(get(key)?)
                .map_err(|_| Error::data(format!("checkpoint header: bad '{key}'")))
        };
        let num_names = parse_names("num_names")?;
        let cat_names = parse_names("cat_names")?;
        let label_name: String = serde_json::from_str(get("label_name")?)
            .map_err(|_| Error::data("checkpoint header: bad 'label_name'"))?;

        let mut expected_bytes = 0usize;
        for &(_, r, c) in &blocks {
            expected_bytes += r * c * 4;
        }
        if binary.len() != expected_bytes {
            return Err(Error::data(format!(
                "checkpoint payload: expected {expected_bytes} bytes, found {}",
                binary.len()
            )));
        }
        let mut at = 0usize;
        let mut params = Vec::new();
        let mut ema = Vec::new();
        for (full_name, rows, cols) in blocks {
            let mut a = Array2::<f32>::zeros((rows, cols));
            for v in a.iter_mut() {
                *v = f32::from_le_bytes(binary[at..at + 4].try_into().unwrap());
                at += 4;
            }
            if let Some(name) = full_name.strip_prefix("params.") {
                params.push((name.to_string(), a));
            } else if let Some(name) = full_name.strip_prefix("ema.") {
                ema.push((name.to_string(), a));
            } else {
                return Err(Error::data(format!(
                    "checkpoint header: unknown block kind '{full_name}'"
                )));
            }
        }
        if params.len() != ema.len()
            || params
                .iter()
                .zip(ema.iter())
                .any(|((pn, pa), (en, ea))| pn != en || pa.dim() != ea.dim())
        {
            return Err(Error::data(
                "checkpoint: EMA shadows do not mirror the parameter blocks",
            ));
        }
        Ok(Checkpoint {
            step,
            seq_len: parse_num("seq_len")?,
            config,
            normalization,
            label_freqs,
            num_names,
            cat_names,
            label_name,
            params,
            ema,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Rebuild a model from the stored arrays (EMA shadows by default: they
    /// are the sampling weights). Every stored block must match the model's
    /// parameter list in name, order, and shape.
    pub fn instantiate(&self, use_ema: bool) -> Result<DiffusionModel<f32>> {
        let mut seed_rng = ChaCha12Rng::seed_from_u64(0);
        let mut model = DiffusionModel::<f32>::init(self.config.clone(), self.seq_len, &mut seed_rng)?;
        let source = if use_ema { &self.ema } else { &self.params };
        let targets = model.named_params_mut();
        if targets.len() != source.len() {
            return Err(Error::data(format!(
                "checkpoint manifest mismatch: {} stored blocks for {} model parameters",
                source.len(),
                targets.len()
            )));
        }
        for ((name, target), (stored_name, stored)) in targets.into_iter().zip(source.iter()) {
            if &name != stored_name {
                return Err(Error::data(format!(
                    "checkpoint manifest mismatch: expected block '{name}', found '{stored_name}'"
                )));
            }
            if target.dim() != stored.dim() {
                return Err(Error::data(format!(
                    "checkpoint manifest mismatch: block '{name}' is {:?}, model wants {:?}",
                    stored.dim(),
                    target.dim()
                )));
            }
            target.assign(stored);
        }
        Ok(model)
    }
}
