//! Symmetric contrastive training with decoupled-weight-decay adaptive
//! moments, a cosine learning-rate schedule, deterministic batching and
//! epoch-end validation.
//!
//! Every source of randomness is derived from the run seed: model init
//! consumes one stream at build time, and the batch order for epoch `e`
//! comes from a stream keyed by `e`. Resuming from a checkpoint therefore
//! replays the exact remaining schedule.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LoadedSplit;
use crate::error::{CoreError, Result};
use crate::eval::{evaluate_both, RetrievalReport, SimilarityMatrix, DEFAULT_KS};
use crate::model::{
    encode_frames, encode_text, similarity, video_embed, Model, TextBatch, VideoBatch,
    LOGIT_SCALE_INIT, LOGIT_SCALE_MAX,
};
use crate::params::Binder;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Learning-rate grid used when no rate is pinned.
pub const LR_GRID: [f64; 5] = [1e-6, 1e-5, 1e-4, 1e-3, 1e-2];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// None selects the rate by grid search on validation R@1.
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    pub seed: u64,
    #[serde(default = "default_logit_scale_init")]
    pub logit_scale_init: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Optional early stop; the schedule still spans the full run.
    #[serde(default)]
    pub max_steps: Option<u64>,
}

fn default_epochs() -> usize {
    5
}
fn default_batch_size() -> usize {
    32
}
fn default_weight_decay() -> f64 {
    0.2
}
fn default_logit_scale_init() -> f64 {
    LOGIT_SCALE_INIT
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn new(seed: u64) -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            lr: None,
            weight_decay: default_weight_decay(),
            seed,
            logit_scale_init: default_logit_scale_init(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            adam_eps: default_adam_eps(),
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("epochs and batch_size must be positive".into()));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(CoreError::InvalidConfig(format!("lr {} must be positive", lr)));
            }
        }
        Ok(())
    }
}

/// Cosine decay to zero, no warmup: `lr0 * (1 + cos(pi * step/total)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> f64 {
    if total_steps == 0 {
        return 0.0;
    }
    let frac = step as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Symmetric in-batch cross-entropy over temperature-scaled scores.
///
/// `sim` must be square with matched pairs on the diagonal. The scale is
/// `exp(logit_scale)` clamped for stability.
pub fn contrastive_loss<S: Scalar>(
    tape: &mut Tape<S>,
    sim: Var,
    logit_scale: Var,
) -> Result<Var> {
    let shape = tape.shape(sim).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(CoreError::BadShape {
            op: "contrastive_loss",
            msg: "in-batch pairing needs a square score grid".into(),
            shape,
        });
    }
    let scale = tape.exp(logit_scale);
    let scale = tape.clamp_max(scale, LOGIT_SCALE_MAX);
    let scaled = tape.mul(sim, scale)?;
    let t2v = tape.log_softmax(scaled, 1)?;
    let t2v = tape.take_diag(t2v)?;
    let t2v = tape.mean_all(t2v);
    let v2t = tape.log_softmax(scaled, 0)?;
    let v2t = tape.take_diag(v2t)?;
    let v2t = tape.mean_all(v2t);
    let sum = tape.add(t2v, v2t)?;
    let neg = tape.neg(sum);
    Ok(tape.scale(neg, 0.5))
}

// ── Optimizer ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct MomentPair<S: Scalar> {
    name: String,
    m: Vec<S>,
    v: Vec<S>,
}

/// Decoupled-weight-decay adaptive-moment descent.
///
/// Groups that received no gradient in a step are skipped entirely: no
/// moment update and no decay, so untouched parameters stay bitwise
/// identical.
#[derive(Debug, Clone)]
pub struct AdamW<S: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    moments: Vec<MomentPair<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(params: &crate::params::ParamRegistry<S>, cfg: &TrainConfig) -> Self {
        let moments = params
            .iter()
            .filter(|g| g.trainable)
            .map(|g| MomentPair {
                name: g.name.clone(),
                m: vec![S::zero(); g.tensor.numel()],
                v: vec![S::zero(); g.tensor.numel()],
            })
            .collect();
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step_count: 0,
            moments,
        }
    }

    pub fn moment_names(&self) -> Vec<String> {
        self.moments.iter().map(|m| m.name.clone()).collect()
    }

    pub fn moment_data(&self, name: &str) -> Option<(&[S], &[S])> {
        self.moments.iter().find(|m| m.name == name).map(|m| (m.m.as_slice(), m.v.as_slice()))
    }

    pub fn set_moment_data(&mut self, name: &str, m: Vec<S>, v: Vec<S>) -> Result<()> {
        let entry = self
            .moments
            .iter_mut()
            .find(|mp| mp.name == name)
            .ok_or_else(|| CoreError::UnknownGroup(name.to_string()))?;
        if m.len() != entry.m.len() || v.len() != entry.v.len() {
            return Err(CoreError::InvalidSpec(format!("moment size mismatch for '{}'", name)));
        }
        entry.m = m;
        entry.v = v;
        Ok(())
    }

    pub fn step(
        &mut self,
        params: &mut crate::params::ParamRegistry<S>,
        grads: &HashMap<String, Vec<S>>,
        lr: f64,
    ) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as i32;
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let one = S::one();
        let bc1 = S::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(t));
        let lr_s = S::from_f64(lr);
        let eps = S::from_f64(self.eps);
        let decay = S::from_f64(lr * self.weight_decay);
        for mp in self.moments.iter_mut() {
            let Some(g) = grads.get(&mp.name) else { continue };
            let group = params.get_mut(&mp.name)?;
            if g.len() != group.tensor.numel() {
                return Err(CoreError::InvalidSpec(format!(
                    "gradient size mismatch for '{}'",
                    mp.name
                )));
            }
            for i in 0..g.len() {
                let gi = g[i];
                mp.m[i] = b1 * mp.m[i] + (one - b1) * gi;
                mp.v[i] = b2 * mp.v[i] + (one - b2) * gi * gi;
                let m_hat = mp.m[i] / bc1;
                let v_hat = mp.v[i] / bc2;
                let theta = group.tensor.data[i];
                group.tensor.data[i] = theta - lr_s * m_hat / (v_hat.sqrt() + eps) - decay * theta;
            }
        }
        Ok(())
    }
}

// ── Batching and forward composition ─────────────────────────────────

/// Deterministic batch order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x5A17 + epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Materialize one batch from split rows.
pub fn make_batch<S: Scalar>(
    split: &LoadedSplit,
    rows: &[usize],
    spec: &crate::model::ModelSpec,
) -> Result<(TextBatch, VideoBatch<S>)> {
    let text_n = split.tokens.len() / split.count;
    let mut ids = Vec::with_capacity(rows.len() * text_n);
    let mut eos = Vec::with_capacity(rows.len());
    for &r in rows {
        ids.extend_from_slice(&split.tokens[r * text_n..(r + 1) * text_n]);
        eos.push(split.eos[r]);
    }
    let text = TextBatch::new(ids, rows.len(), text_n, eos)?;
    let dim = split.frames.len() / split.count;
    let mut fr = Vec::with_capacity(rows.len() * dim);
    for &r in rows {
        fr.extend(split.frames[r * dim..(r + 1) * dim].iter().map(|&v| S::from_f32(v)));
    }
    let side = spec.image_side;
    let frames = Tensor::new(vec![rows.len(), spec.frames, 3, side, side], fr)?;
    Ok((text, VideoBatch::new(frames, spec)?))
}

/// Full pipeline on one tape: both encoders, frame pooling, cosine grid,
/// symmetric loss. Returns the loss and score grid vars plus the binder
/// for gradient extraction.
pub fn forward_loss<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Model<S>,
    text: &TextBatch,
    video: &VideoBatch<S>,
) -> Result<(Var, Var, Binder)> {
    let mut binder = Binder::new();
    let t = encode_text(tape, &mut binder, model, text)?;
    let v = encode_frames(tape, &mut binder, model, video)?;
    let ve = video_embed(tape, v.frame_embeddings)?;
    let sim = similarity(tape, t.embeddings, ve)?;
    let scale = binder.var(tape, &model.params, "logit_scale")?;
    let loss = contrastive_loss(tape, sim, scale)?;
    Ok((loss, sim, binder))
}

/// Gradients for every trainable group bound during the forward pass.
pub fn trainable_grads<S: Scalar>(
    tape: Tape<S>,
    loss: Var,
    model: &Model<S>,
    binder: &Binder,
) -> Result<HashMap<String, Vec<S>>> {
    let grads = tape.backward(loss)?;
    let mut out = HashMap::new();
    for (name, var) in binder.entries() {
        if model.params.get(name)?.trainable {
            if let Some(g) = grads.get(var) {
                out.insert(name.to_string(), g.to_vec());
            }
        }
    }
    Ok(out)
}

/// Joint-space embeddings for a whole split, in f32 for evaluation.
pub fn encode_split<S: Scalar>(
    model: &Model<S>,
    split: &LoadedSplit,
    batch_size: usize,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut text_out = Vec::with_capacity(split.count * model.spec.d);
    let mut video_out = Vec::with_capacity(split.count * model.spec.d);
    let rows: Vec<usize> = (0..split.count).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let (text, video) = make_batch::<S>(split, chunk, &model.spec)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let t = encode_text(&mut tape, &mut binder, model, &text)?;
        let v = encode_frames(&mut tape, &mut binder, model, &video)?;
        let ve = video_embed(&mut tape, v.frame_embeddings)?;
        text_out.extend(tape.value(t.embeddings).iter().map(|v| v.as_f32()));
        video_out.extend(tape.value(ve).iter().map(|v| v.as_f32()));
    }
    Ok((text_out, video_out))
}

/// Plain cosine grid over f32 embeddings (evaluation path).
pub fn cosine_matrix(
    text: &[f32],
    video: &[f32],
    d: usize,
) -> Result<SimilarityMatrix> {
    let n_t = text.len() / d;
    let n_v = video.len() / d;
    let norm = |data: &[f32], i: usize| -> Result<f32> {
        let row = &data[i * d..(i + 1) * d];
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n <= 1e-12 {
            return Err(CoreError::ZeroNormEmbedding(i));
        }
        Ok(n)
    };
    let t_norms: Vec<f32> = (0..n_t).map(|i| norm(text, i)).collect::<Result<_>>()?;
    let v_norms: Vec<f32> = (0..n_v).map(|j| norm(video, j)).collect::<Result<_>>()?;
    let mut scores = vec![0.0f32; n_t * n_v];
    for i in 0..n_t {
        for j in 0..n_v {
            let dot: f32 = (0..d).map(|c| text[i * d + c] * video[j * d + c]).sum();
            scores[i * n_v + j] = dot / (t_norms[i] * v_norms[j]);
        }
    }
    SimilarityMatrix::new(scores, n_t, n_v)
}

/// Validation metrics for a split.
pub fn validate_split<S: Scalar>(
    model: &Model<S>,
    split: &LoadedSplit,
    batch_size: usize,
) -> Result<(RetrievalReport, RetrievalReport)> {
    let (text, video) = encode_split(model, split, batch_size)?;
    let sim = cosine_matrix(&text, &video, model.spec.d)?;
    evaluate_both(&sim, &DEFAULT_KS)
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "t", rename_all = "snake_case")]
pub enum LogRecord {
    Run {
        protocol: String,
        trainable: usize,
        total: usize,
        dataset_hash: String,
        seed: u64,
        lr: f64,
        epochs: usize,
        batch_size: usize,
        total_steps: u64,
    },
    Step {
        step: u64,
        epoch: usize,
        loss: f64,
        lr: f64,
    },
    Val {
        epoch: usize,
        step: u64,
        t2v: RetrievalReport,
        v2t: RetrievalReport,
    },
}

pub struct TrainOutcome {
    pub records: Vec<LogRecord>,
    pub final_val: Option<(RetrievalReport, RetrievalReport)>,
    pub steps_done: u64,
}

pub struct ResumeState<S: Scalar> {
    pub optimizer: AdamW<S>,
    pub step: u64,
}

pub struct TrainIo<'a> {
    pub log: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
}

impl TrainIo<'_> {
    pub fn none() -> TrainIo<'static> {
        TrainIo { log: None, checkpoint_dir: None }
    }
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> u64 {
    (n_train as u64).div_ceil(batch_size as u64)
}

/// Run (or resume) training. The learning rate must already be pinned in
/// `cfg.lr`; grid selection lives in [`grid_search`].
pub fn train<S: Scalar>(
    model: &mut Model<S>,
    train_split: &LoadedSplit,
    val_split: &LoadedSplit,
    cfg: &TrainConfig,
    dataset_hash: &str,
    resume: Option<ResumeState<S>>,
    io: &mut TrainIo,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let lr0 = cfg
        .lr
        .ok_or_else(|| CoreError::InvalidConfig("train() needs a pinned lr".into()))?;
    let spe = steps_per_epoch(train_split.count, cfg.batch_size);
    let total_steps = spe * cfg.epochs as u64;
    let mut records = Vec::new();
    let mut emit = |rec: LogRecord, io: &mut TrainIo| -> Result<()> {
        if let Some(w) = io.log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &rec)
                .map_err(|e| CoreError::InvalidConfig(format!("log write: {}", e)))?;
            w.write_all(b"\n")?;
        }
        records.push(rec);
        Ok(())
    };

    let (mut opt, mut step) = match resume {
        Some(r) => (r.optimizer, r.step),
        None => {
            let opt = AdamW::new(&model.params, cfg);
            emit(
                LogRecord::Run {
                    protocol: model.protocol.kind.name().to_string(),
                    trainable: model.params.trainable_count(),
                    total: model.params.total_count(),
                    dataset_hash: dataset_hash.to_string(),
                    seed: cfg.seed,
                    lr: lr0,
                    epochs: cfg.epochs,
                    batch_size: cfg.batch_size,
                    total_steps,
                },
                io,
            )?;
            (opt, 0u64)
        }
    };

    let mut final_val = None;
    let start_epoch = (step / spe.max(1)) as usize;
    'outer: for epoch in start_epoch..cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_split.count);
        let epoch_start = epoch as u64 * spe;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let this_step = epoch_start + bi as u64;
            if this_step < step {
                continue; // replayed on resume
            }
            if let Some(max) = cfg.max_steps {
                if step >= max {
                    break 'outer;
                }
            }
            let lr = cosine_lr(step, total_steps, lr0);
            let (text, video) = make_batch::<S>(train_split, chunk, &model.spec)?;
            let mut tape = Tape::new();
            let (loss, _, binder) = forward_loss(&mut tape, model, &text, &video)?;
            let loss_val = tape.value(loss)[0].as_f64();
            if !loss_val.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "loss at step {} (epoch {}, batch {})",
                    step, epoch, bi
                )));
            }
            let grads = trainable_grads(tape, loss, model, &binder)?;
            opt.step(&mut model.params, &grads, lr)?;
            step += 1;
            emit(LogRecord::Step { step, epoch, loss: loss_val, lr }, io)?;
        }
        let (t2v, v2t) = validate_split(model, val_split, cfg.batch_size)?;
        emit(LogRecord::Val { epoch, step, t2v: t2v.clone(), v2t: v2t.clone() }, io)?;
        final_val = Some((t2v, v2t));
        if let Some(dir) = io.checkpoint_dir {
            crate::checkpoint::save(
                &dir.join(format!("checkpoint_epoch_{}.vckpt", epoch)),
                model,
                &opt,
                step,
                cfg,
                dataset_hash,
            )?;
            crate::checkpoint::save(
                &dir.join("checkpoint_latest.vckpt"),
                model,
                &opt,
                step,
                cfg,
                dataset_hash,
            )?;
        }
    }

    Ok(TrainOutcome { records, final_val, steps_done: step })
}

/// Grid-search the learning rate: a fresh model per candidate (same
/// seed), ranked by final validation t2v R@1.
pub struct GridResult {
    pub lr: f64,
    pub t2v_r1: f64,
}

pub fn grid_search<S: Scalar>(
    build: &dyn Fn() -> Result<Model<S>>,
    train_split: &LoadedSplit,
    val_split: &LoadedSplit,
    cfg: &TrainConfig,
    dataset_hash: &str,
) -> Result<(f64, Vec<GridResult>)> {
    let mut results = Vec::new();
    let mut best = (LR_GRID[0], f64::NEG_INFINITY);
    for &lr in &LR_GRID {
        let mut model = build()?;
        let mut cfg_lr = cfg.clone();
        cfg_lr.lr = Some(lr);
        let outcome = train(
            &mut model,
            train_split,
            val_split,
            &cfg_lr,
            dataset_hash,
            None,
            &mut TrainIo::none(),
        )?;
        let r1 = outcome
            .final_val
            .as_ref()
            .and_then(|(t2v, _)| t2v.recall(1))
            .unwrap_or(f64::NEG_INFINITY);
        results.push(GridResult { lr, t2v_r1: r1 });
        if r1 > best.1 {
            best = (lr, r1);
        }
    }
    Ok((best.0, results))
}
