//! CLIP-style dual encoder: text and vision transformers with output
//! projections, frame mean-pooling and cosine similarity.
//!
//! Parameters are described by a plan (name, shape, init rule) that is
//! walked in a fixed order for seeding, counting and checkpointing. The
//! forward passes run on the gradient tape and record a trace with the
//! per-layer sequence lengths plus the vars needed for graph checks.

use std::f64::consts::LN_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::params::{Binder, ParamRegistry};
use crate::prompts::{provide_context, provide_position, provide_vop, PromptBank, PromptMode, PromptSpec};
use crate::protocols::{Protocol, ProtocolKind};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// CLIP's temperature parameter on the log scale: ln(1/0.07).
pub const LOGIT_SCALE_INIT: f64 = 2.659_260_036_932_778;
/// Exponentiated logit scale is clamped here for stability.
pub const LOGIT_SCALE_MAX: f64 = 100.0;
/// Additive attention mask value.
pub const MASK_NEG: f64 = -1e9;

const _: () = assert!(LN_2 > 0.0); // keep the import honest under feature churn

/// Architecture of both towers and the shared embedding space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Layer count per encoder.
    pub k: usize,
    pub d_t: usize,
    pub d_v: usize,
    /// Joint embedding width.
    pub d: usize,
    pub heads_t: usize,
    pub heads_v: usize,
    /// Maximum text tokens.
    pub n_max: usize,
    /// Frames per video.
    pub frames: usize,
    pub patch: usize,
    pub image_side: usize,
    pub vocab: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
}

fn default_mlp_ratio() -> usize {
    4
}

impl ModelSpec {
    /// Patch count per frame.
    pub fn m(&self) -> usize {
        let g = self.image_side / self.patch;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side % self.patch != 0 {
            return Err(CoreError::InvalidSpec(format!(
                "image_side {} not divisible by patch {}",
                self.image_side, self.patch
            )));
        }
        if self.d_t % self.heads_t != 0 || self.d_v % self.heads_v != 0 {
            return Err(CoreError::InvalidSpec(format!(
                "widths ({}, {}) must divide by head counts ({}, {})",
                self.d_t, self.d_v, self.heads_t, self.heads_v
            )));
        }
        for (name, v) in [
            ("k", self.k),
            ("d_t", self.d_t),
            ("d_v", self.d_v),
            ("d", self.d),
            ("n_max", self.n_max),
            ("frames", self.frames),
            ("patch", self.patch),
            ("vocab", self.vocab),
            ("mlp_ratio", self.mlp_ratio),
        ] {
            if v == 0 {
                return Err(CoreError::InvalidSpec(format!("{} must be positive", name)));
            }
        }
        Ok(())
    }

    pub fn cmm_transformer_heads(&self) -> Result<usize> {
        if self.d_v % self.heads_v != 0 {
            return Err(CoreError::InvalidSpec("d_v must divide by heads_v".into()));
        }
        Ok(self.heads_v)
    }

    /// ViT-B/32 + text transformer dimensions.
    pub fn clip_vit_b32() -> Self {
        ModelSpec {
            k: 12,
            d_t: 512,
            d_v: 768,
            d: 512,
            heads_t: 8,
            heads_v: 12,
            n_max: 77,
            frames: 12,
            patch: 32,
            image_side: 224,
            vocab: 49_408,
            mlp_ratio: 4,
        }
    }

    /// Small spec that exercises every code path quickly on a CPU.
    pub fn toy() -> Self {
        ModelSpec {
            k: 4,
            d_t: 32,
            d_v: 48,
            d: 32,
            heads_t: 4,
            heads_v: 4,
            n_max: 16,
            frames: 4,
            patch: 4,
            image_side: 12,
            vocab: 64,
            mlp_ratio: 4,
        }
    }
}

/// Joint sequence length in the deep (function-split) layers.
pub fn deep_sequence_len(spec: &ModelSpec, p_v: usize) -> usize {
    spec.frames + p_v + spec.frames * spec.m()
}

// ── Parameter planning ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    Gaussian(f64),
    /// Uniform on ±1/sqrt(fan_in).
    UniformFanIn(usize),
    Xavier(usize, usize),
}

#[derive(Debug, Clone)]
pub struct GroupPlan {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl GroupPlan {
    pub fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        GroupPlan { name, shape, init }
    }

    pub fn count(&self) -> usize {
        self.shape.iter().product()
    }
}

/// One pre-norm transformer block's parameter layout.
///
/// Residual-branch projections are scaled by 1/sqrt(2K) so a freshly
/// seeded deep stack still carries its input signal; this mirrors the
/// reference CLIP initialization and is what makes a frozen random
/// backbone steerable by prompts at all.
pub fn encoder_layer_plan(prefix: &str, width: usize, mlp_ratio: usize) -> Vec<GroupPlan> {
    encoder_layer_plan_scaled(prefix, width, mlp_ratio, 1)
}

pub fn encoder_layer_plan_scaled(
    prefix: &str,
    width: usize,
    mlp_ratio: usize,
    layers: usize,
) -> Vec<GroupPlan> {
    let hidden = width * mlp_ratio;
    let attn_std = (width as f64).powf(-0.5);
    let proj_std = attn_std * ((2 * layers.max(1)) as f64).powf(-0.5);
    let fc_std = (2.0 * width as f64).powf(-0.5);
    vec![
        GroupPlan::new(format!("{}.ln_1.weight", prefix), vec![width], Init::Ones),
        GroupPlan::new(format!("{}.ln_1.bias", prefix), vec![width], Init::Zeros),
        GroupPlan::new(
            format!("{}.attn.in_proj.weight", prefix),
            vec![width, 3 * width],
            Init::Gaussian(attn_std),
        ),
        GroupPlan::new(format!("{}.attn.in_proj.bias", prefix), vec![3 * width], Init::Zeros),
        GroupPlan::new(
            format!("{}.attn.out_proj.weight", prefix),
            vec![width, width],
            Init::Gaussian(proj_std),
        ),
        GroupPlan::new(format!("{}.attn.out_proj.bias", prefix), vec![width], Init::Zeros),
        GroupPlan::new(format!("{}.ln_2.weight", prefix), vec![width], Init::Ones),
        GroupPlan::new(format!("{}.ln_2.bias", prefix), vec![width], Init::Zeros),
        GroupPlan::new(
            format!("{}.mlp.fc1.weight", prefix),
            vec![width, hidden],
            Init::Gaussian(fc_std),
        ),
        GroupPlan::new(format!("{}.mlp.fc1.bias", prefix), vec![hidden], Init::Zeros),
        GroupPlan::new(
            format!("{}.mlp.fc2.weight", prefix),
            vec![hidden, width],
            Init::Gaussian(proj_std),
        ),
        GroupPlan::new(format!("{}.mlp.fc2.bias", prefix), vec![width], Init::Zeros),
    ]
}

fn backbone_plan(spec: &ModelSpec) -> Vec<GroupPlan> {
    let mut plan = Vec::new();
    plan.push(GroupPlan::new(
        "text.token_embedding.weight".into(),
        vec![spec.vocab, spec.d_t],
        Init::Gaussian(0.02),
    ));
    plan.push(GroupPlan::new(
        "text.positional_embedding".into(),
        vec![spec.n_max, spec.d_t],
        Init::Gaussian(0.01),
    ));
    for layer in 1..=spec.k {
        plan.extend(encoder_layer_plan_scaled(
            &format!("text.layer.{}", layer),
            spec.d_t,
            spec.mlp_ratio,
            spec.k,
        ));
    }
    plan.push(GroupPlan::new("text.ln_final.weight".into(), vec![spec.d_t], Init::Ones));
    plan.push(GroupPlan::new("text.ln_final.bias".into(), vec![spec.d_t], Init::Zeros));
    plan.push(GroupPlan::new(
        "text.proj.weight".into(),
        vec![spec.d_t, spec.d],
        Init::Gaussian((spec.d_t as f64).powf(-0.5)),
    ));

    plan.push(GroupPlan::new(
        "vision.patch_embedding.weight".into(),
        vec![spec.patch_dim(), spec.d_v],
        Init::Gaussian((spec.patch_dim() as f64).powf(-0.5)),
    ));
    plan.push(GroupPlan::new("vision.class_embedding".into(), vec![spec.d_v], Init::Gaussian(0.02)));
    plan.push(GroupPlan::new(
        "vision.positional_embedding".into(),
        vec![1 + spec.m(), spec.d_v],
        Init::Gaussian(0.01),
    ));
    plan.push(GroupPlan::new("vision.ln_pre.weight".into(), vec![spec.d_v], Init::Ones));
    plan.push(GroupPlan::new("vision.ln_pre.bias".into(), vec![spec.d_v], Init::Zeros));
    for layer in 1..=spec.k {
        plan.extend(encoder_layer_plan_scaled(
            &format!("vision.layer.{}", layer),
            spec.d_v,
            spec.mlp_ratio,
            spec.k,
        ));
    }
    plan.push(GroupPlan::new("vision.ln_post.weight".into(), vec![spec.d_v], Init::Ones));
    plan.push(GroupPlan::new("vision.ln_post.bias".into(), vec![spec.d_v], Init::Zeros));
    plan.push(GroupPlan::new(
        "vision.proj.weight".into(),
        vec![spec.d_v, spec.d],
        Init::Gaussian((spec.d_v as f64).powf(-0.5)),
    ));
    plan.push(GroupPlan::new("logit_scale".into(), vec![], Init::Const(LOGIT_SCALE_INIT)));
    plan
}

fn adapter_plan(spec: &ModelSpec, protocol: &Protocol) -> Vec<GroupPlan> {
    let mut plan = Vec::new();
    let tag = match protocol.kind {
        ProtocolKind::AdapterAttn => "adapter_attn",
        ProtocolKind::AdapterFfn => "adapter_ffn",
        _ => return plan,
    };
    let hidden = protocol.adapter_hidden;
    for (tower, width) in [("text", spec.d_t), ("vision", spec.d_v)] {
        for layer in 1..=spec.k {
            let prefix = format!("{}.layer.{}.{}", tower, layer, tag);
            plan.push(GroupPlan::new(
                format!("{}.down.weight", prefix),
                vec![width, hidden],
                Init::Xavier(width, hidden),
            ));
            plan.push(GroupPlan::new(format!("{}.down.bias", prefix), vec![hidden], Init::Zeros));
            // Zero-initialized up-projection keeps the model transparent
            // to adapters until the first step.
            plan.push(GroupPlan::new(
                format!("{}.up.weight", prefix),
                vec![hidden, width],
                Init::Zeros,
            ));
            plan.push(GroupPlan::new(format!("{}.up.bias", prefix), vec![width], Init::Zeros));
        }
    }
    plan
}

/// Full parameter plan: backbone, then prompts, then adapters.
pub fn full_plan(
    spec: &ModelSpec,
    prompts: &PromptSpec,
    protocol: &Protocol,
) -> Result<Vec<GroupPlan>> {
    spec.validate()?;
    prompts.validate(spec)?;
    protocol.validate()?;
    let mut plan = backbone_plan(spec);
    plan.extend(PromptBank::new(prompts.clone()).plan(spec));
    plan.extend(adapter_plan(spec, protocol));
    Ok(plan)
}

/// Materialize a plan into tensors, drawing from a single seeded stream
/// in plan order.
pub fn materialize<S: Scalar, R: Rng>(plan: &[GroupPlan], rng: &mut R) -> Result<ParamRegistry<S>> {
    let mut reg = ParamRegistry::new();
    for g in plan {
        let t = match g.init {
            Init::Zeros => Tensor::zeros(g.shape.clone()),
            Init::Ones => Tensor::ones(g.shape.clone()),
            Init::Const(v) => Tensor::full(g.shape.clone(), S::from_f64(v)),
            Init::Gaussian(std) => Tensor::randn(g.shape.clone(), std, rng),
            Init::UniformFanIn(fan) => {
                Tensor::rand_uniform(g.shape.clone(), 1.0 / (fan as f64).sqrt(), rng)
            }
            Init::Xavier(fi, fo) => {
                Tensor::rand_uniform(g.shape.clone(), (6.0 / (fi + fo) as f64).sqrt(), rng)
            }
        };
        reg.register(&g.name, t, false)?;
    }
    Ok(reg)
}

// ── Batches ──────────────────────────────────────────────────────────

/// Pre-tokenized text: integer ids `[batch, n]` plus the per-sample
/// position of the end-of-sequence token.
#[derive(Debug, Clone)]
pub struct TextBatch {
    pub token_ids: Vec<u32>,
    pub batch: usize,
    pub n: usize,
    pub eos_index: Vec<usize>,
}

impl TextBatch {
    pub fn new(token_ids: Vec<u32>, batch: usize, n: usize, eos_index: Vec<usize>) -> Result<Self> {
        if token_ids.len() != batch * n || eos_index.len() != batch {
            return Err(CoreError::InvalidSpec(format!(
                "text batch: {} ids, {} eos positions for batch {} x {}",
                token_ids.len(),
                eos_index.len(),
                batch,
                n
            )));
        }
        if let Some(&bad) = eos_index.iter().find(|&&e| e >= n) {
            return Err(CoreError::InvalidSpec(format!("eos index {} >= n {}", bad, n)));
        }
        Ok(TextBatch { token_ids, batch, n, eos_index })
    }
}

/// Raw pixel frames `[batch, frames, 3, side, side]`.
#[derive(Debug, Clone)]
pub struct VideoBatch<S: Scalar> {
    pub frames: Tensor<S>,
}

impl<S: Scalar> VideoBatch<S> {
    pub fn new(frames: Tensor<S>, spec: &ModelSpec) -> Result<Self> {
        let want_suffix = [spec.frames, 3, spec.image_side, spec.image_side];
        if frames.shape.len() != 5 || frames.shape[1..] != want_suffix {
            return Err(CoreError::BadShape {
                op: "video_batch",
                msg: format!("want [batch, {}, 3, {}, {}]", spec.frames, spec.image_side, spec.image_side),
                shape: frames.shape.clone(),
            });
        }
        Ok(VideoBatch { frames })
    }

    pub fn batch(&self) -> usize {
        self.frames.shape[0]
    }

    /// Non-overlapping patch extraction: `[batch*frames, m, 3*patch*patch]`
    /// with channel-major patch vectors.
    pub fn patchify(&self, spec: &ModelSpec) -> Tensor<S> {
        let b = self.batch();
        let f = spec.frames;
        let side = spec.image_side;
        let p = spec.patch;
        let grid = side / p;
        let m = grid * grid;
        let pdim = spec.patch_dim();
        let src = &self.frames.data;
        let mut out = vec![S::zero(); b * f * m * pdim];
        let frame_stride = 3 * side * side;
        for bf in 0..b * f {
            for gy in 0..grid {
                for gx in 0..grid {
                    let patch_idx = gy * grid + gx;
                    let dst_base = (bf * m + patch_idx) * pdim;
                    for c in 0..3 {
                        for py in 0..p {
                            for px in 0..p {
                                let y = gy * p + py;
                                let x = gx * p + px;
                                let sidx = bf * frame_stride + c * side * side + y * side + x;
                                let didx = dst_base + c * p * p + py * p + px;
                                out[didx] = src[sidx];
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(vec![b * f, m, pdim], out).expect("patchify shape")
    }
}

// ── Model ────────────────────────────────────────────────────────────

/// Which adapter branch, if any, is wired into every encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AdapterWiring {
    pub attn: bool,
    pub ffn: bool,
    pub hidden: usize,
}

impl AdapterWiring {
    pub fn none() -> Self {
        AdapterWiring { attn: false, ffn: false, hidden: 0 }
    }

    pub fn from_protocol(protocol: &Protocol) -> Self {
        match protocol.kind {
            ProtocolKind::AdapterAttn => {
                AdapterWiring { attn: true, ffn: false, hidden: protocol.adapter_hidden }
            }
            ProtocolKind::AdapterFfn => {
                AdapterWiring { attn: false, ffn: true, hidden: protocol.adapter_hidden }
            }
            _ => AdapterWiring::none(),
        }
    }
}

pub struct Model<S: Scalar> {
    pub spec: ModelSpec,
    pub prompts: PromptSpec,
    pub protocol: Protocol,
    pub params: ParamRegistry<S>,
    pub adapters: AdapterWiring,
}

impl<S: Scalar> Model<S> {
    pub fn build(
        spec: ModelSpec,
        prompts: PromptSpec,
        protocol: Protocol,
        seed: u64,
    ) -> Result<Self> {
        protocol.check_mode(prompts.mode)?;
        let plan = full_plan(&spec, &prompts, &protocol)?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut params = materialize::<S, _>(&plan, &mut rng)?;
        crate::protocols::apply_protocol(&mut params, &spec, &protocol)?;
        let adapters = AdapterWiring::from_protocol(&protocol);
        Ok(Model { spec, prompts, protocol, params, adapters })
    }

    pub fn plan(&self) -> Result<Vec<GroupPlan>> {
        full_plan(&self.spec, &self.prompts, &self.protocol)
    }
}

// ── Forward passes ───────────────────────────────────────────────────

fn bind<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    params: &ParamRegistry<S>,
    name: &str,
) -> Result<Var> {
    binder.var(tape, params, name)
}

/// Linear layer `x @ W + b` with `x: [.., in]`.
fn linear<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    params: &ParamRegistry<S>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let w = bind(tape, binder, params, &format!("{}.weight", prefix))?;
    let b = bind(tape, binder, params, &format!("{}.bias", prefix))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn layer_norm_named<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    params: &ParamRegistry<S>,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let g = bind(tape, binder, params, &format!("{}.weight", prefix))?;
    let b = bind(tape, binder, params, &format!("{}.bias", prefix))?;
    tape.layer_norm(x, g, b, 1e-5)
}

fn adapter_branch<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    params: &ParamRegistry<S>,
    prefix: &str,
    h: Var,
) -> Result<Var> {
    let down = linear(tape, binder, params, &format!("{}.down", prefix), h)?;
    let act = tape.gelu(down);
    linear(tape, binder, params, &format!("{}.up", prefix), act)
}

fn multi_head_attention<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    params: &ParamRegistry<S>,
    prefix: &str,
    h: Var,
    heads: usize,
    mask: Option<Var>,
) -> Result<Var> {
    let shape = tape.shape(h).to_vec(); // [B, L, d]
    let (b, l, d) = (shape[0], shape[1], shape[2]);
    let dh = d / heads;
    let qkv = linear(tape, binder, params, &format!("{}.in_proj", prefix), h)?;
    let q = tape.slice(qkv, 2, 0, d)?;
    let k = tape.slice(qkv, 2, d, d)?;
    let v = tape.slice(qkv, 2, 2 * d, d)?;
    let split = |tape: &mut Tape<S>, x: Var| -> Result<Var> {
        let r = tape.reshape(x, &[b, l, heads, dh])?;
        tape.permute(r, &[0, 2, 1, 3]) // [B, H, L, dh]
    };
    let q = split(tape, q)?;
    let k = split(tape, k)?;
    let v = split(tape, v)?;
    let kt = tape.permute(k, &[0, 1, 3, 2])?; // [B, H, dh, L]
    let scores = tape.matmul(q, kt)?; // [B, H, L, L]
    let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let scores = match mask {
        Some(m) => tape.add(scores, m)?,
        None => scores,
    };
    let probs = tape.softmax(scores, 3)?;
    let ctx = tape.matmul(probs, v)?; // [B, H, L, dh]
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[b, l, d])?;
    linear(tape, binder, params, &format!("{}.out_proj", prefix), ctx)
}

/// Pre-norm transformer block with optional parallel adapters.
pub fn encoder_layer<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    params: &ParamRegistry<S>,
    prefix: &str,
    x: Var,
    heads: usize,
    mask: Option<Var>,
    adapters: &AdapterWiring,
) -> Result<Var> {
    let h = layer_norm_named(tape, binder, params, &format!("{}.ln_1", prefix), x)?;
    let attn = multi_head_attention(tape, binder, params, &format!("{}.attn", prefix), h, heads, mask)?;
    let mut x = tape.add(x, attn)?;
    if adapters.attn {
        let branch = adapter_branch(tape, binder, params, &format!("{}.adapter_attn", prefix), h)?;
        x = tape.add(x, branch)?;
    }
    let h2 = layer_norm_named(tape, binder, params, &format!("{}.ln_2", prefix), x)?;
    let fc1 = linear(tape, binder, params, &format!("{}.mlp.fc1", prefix), h2)?;
    let act = tape.gelu(fc1);
    let mlp = linear(tape, binder, params, &format!("{}.mlp.fc2", prefix), act)?;
    let mut x = tape.add(x, mlp)?;
    if adapters.ffn {
        let branch = adapter_branch(tape, binder, params, &format!("{}.adapter_ffn", prefix), h2)?;
        x = tape.add(x, branch)?;
    }
    Ok(x)
}

fn causal_mask<S: Scalar>(tape: &mut Tape<S>, len: usize) -> Var {
    let mut data = vec![S::zero(); len * len];
    let neg = S::from_f64(MASK_NEG);
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = neg;
        }
    }
    tape.constant(&Tensor::new(vec![len, len], data).expect("mask shape"))
}

/// Per-layer sequence bookkeeping for the length contracts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLenRecord {
    pub layer: usize,
    pub input_len: usize,
    /// Tokens carried to the next layer after prompt outputs are dropped.
    pub carried_len: usize,
    pub prompt_len: usize,
}

pub struct TextEncodeOut {
    /// `[batch, d]` joint-space embeddings.
    pub embeddings: Var,
    pub layers: Vec<LayerLenRecord>,
}

pub fn encode_text<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    model: &Model<S>,
    batch: &TextBatch,
) -> Result<TextEncodeOut> {
    let spec = &model.spec;
    let pspec = &model.prompts;
    if batch.n > spec.n_max {
        return Err(CoreError::InvalidSpec(format!(
            "text length {} exceeds n_max {}",
            batch.n, spec.n_max
        )));
    }
    let (b, n) = (batch.batch, batch.n);
    let table = bind(tape, binder, &model.params, "text.token_embedding.weight")?;
    let ids: Vec<usize> = batch.token_ids.iter().map(|&t| t as usize).collect();
    let emb = tape.embedding(table, &ids)?;
    let mut words = tape.reshape(emb, &[b, n, spec.d_t])?;
    let pos_full = bind(tape, binder, &model.params, "text.positional_embedding")?;
    let pos = tape.slice(pos_full, 0, 0, n)?;
    words = tape.add(words, pos)?;

    let mut layers = Vec::with_capacity(spec.k);
    for layer in 1..=spec.k {
        let prompt = if pspec.mode != PromptMode::None
            && pspec.p_t > 0
            && pspec.in_depth_range(layer)
        {
            let block = bind(tape, binder, &model.params, &PromptBank::text_name(layer))?;
            Some(tape.broadcast_lead(block, b))
        } else {
            None
        };
        let p_len = prompt.map_or(0, |p| tape.shape(p)[1]);
        let x = match prompt {
            Some(p) => tape.concat(&[p, words], 1)?,
            None => words,
        };
        let l = p_len + n;
        let mask = causal_mask(tape, l);
        let out = encoder_layer(
            tape,
            binder,
            &model.params,
            &format!("text.layer.{}", layer),
            x,
            spec.heads_t,
            Some(mask),
            &model.adapters,
        )?;
        words = if p_len > 0 { tape.slice(out, 1, p_len, n)? } else { out };
        layers.push(LayerLenRecord { layer, input_len: l, carried_len: n, prompt_len: p_len });
    }

    let normed = layer_norm_named(tape, binder, &model.params, "text.ln_final", words)?;
    let eos = tape.gather_seq(normed, &batch.eos_index)?;
    let proj = bind(tape, binder, &model.params, "text.proj.weight")?;
    let embeddings = tape.matmul(eos, proj)?;
    Ok(TextEncodeOut { embeddings, layers })
}

/// Vision forward trace: sequence lengths plus the vars needed for the
/// generation-purity and connectivity checks.
pub struct VisionTrace {
    pub shallow: Vec<LayerLenRecord>,
    pub deep: Vec<LayerLenRecord>,
    /// (layer, CMM output entering generation) pairs.
    pub cmm_outputs: Vec<(usize, Var)>,
    /// (layer, generated video-specific prompt tokens) pairs.
    pub generated: Vec<(usize, Var)>,
    /// (layer, carried per-frame sequence leaving that layer).
    pub carried: Vec<(usize, Var)>,
}

pub struct VisionEncodeOut {
    /// `[batch, frames, d]` per-frame joint-space embeddings.
    pub frame_embeddings: Var,
    pub trace: VisionTrace,
}

pub fn encode_frames<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    model: &Model<S>,
    video: &VideoBatch<S>,
) -> Result<VisionEncodeOut> {
    let spec = &model.spec;
    let pspec = &model.prompts;
    let b = video.batch();
    let f = spec.frames;
    let m = spec.m();
    let bf = b * f;
    let d = spec.d_v;

    let patches = video.patchify(spec);
    let patches = tape.constant(&patches);
    let patch_w = bind(tape, binder, &model.params, "vision.patch_embedding.weight")?;
    let x = tape.matmul(patches, patch_w)?; // [bf, m, d]
    let cls = bind(tape, binder, &model.params, "vision.class_embedding")?;
    let cls = tape.reshape(cls, &[1, d])?;
    let cls = tape.broadcast_lead(cls, bf); // [bf, 1, d]
    let mut seq = tape.concat(&[cls, x], 1)?; // [bf, 1+m, d]
    let pos = bind(tape, binder, &model.params, "vision.positional_embedding")?;
    seq = tape.add(seq, pos)?;
    seq = layer_norm_named(tape, binder, &model.params, "vision.ln_pre", seq)?;

    let mut trace = VisionTrace {
        shallow: Vec::new(),
        deep: Vec::new(),
        cmm_outputs: Vec::new(),
        generated: Vec::new(),
        carried: Vec::new(),
    };

    let split = pspec.split_depth(spec.k);
    let shallow_mode = if pspec.mode == PromptMode::None {
        PromptMode::None
    } else {
        pspec.mode.shallow()
    };

    // Per-frame layers 1..=split.
    for layer in 1..=split {
        let prompt = shallow_prompt_block(
            tape,
            binder,
            model,
            shallow_mode,
            layer,
            b,
            bf,
            seq,
            &mut trace,
        )?;
        let p_len = prompt.map_or(0, |p| tape.shape(p)[1]);
        let input = match prompt {
            Some(p) => {
                let cls_tok = tape.slice(seq, 1, 0, 1)?;
                let rest = tape.slice(seq, 1, 1, m)?;
                tape.concat(&[cls_tok, p, rest], 1)?
            }
            None => seq,
        };
        let out = encoder_layer(
            tape,
            binder,
            &model.params,
            &format!("vision.layer.{}", layer),
            input,
            spec.heads_v,
            None,
            &model.adapters,
        )?;
        seq = if p_len > 0 {
            let cls_out = tape.slice(out, 1, 0, 1)?;
            let rest_out = tape.slice(out, 1, 1 + p_len, m)?;
            tape.concat(&[cls_out, rest_out], 1)?
        } else {
            out
        };
        trace.shallow.push(LayerLenRecord {
            layer,
            input_len: 1 + p_len + m,
            carried_len: 1 + m,
            prompt_len: p_len,
        });
        trace.carried.push((layer, seq));
    }

    // Deep joint layers split+1..=K over [C, P^v, E_1..E_F].
    let final_cls_flat; // [bf, d]
    if split < spec.k {
        let grouped = tape.reshape(seq, &[b, f, 1 + m, d])?;
        let fp = bind(tape, binder, &model.params, PromptBank::frame_pos_name())?;
        let fp = tape.reshape(fp, &[f, 1, d])?;
        let fp_tiled = tape.concat(&vec![fp; 1 + m], 1)?; // [f, 1+m, d]
        let grouped = tape.add(grouped, fp_tiled)?;
        let cls_part = tape.slice(grouped, 2, 0, 1)?;
        let mut cls_seq = tape.reshape(cls_part, &[b, f, d])?;
        let patch_part = tape.slice(grouped, 2, 1, m)?;
        let mut patch_seq = tape.reshape(patch_part, &[b, f * m, d])?;

        for layer in split + 1..=spec.k {
            let prompt = if pspec.in_depth_range(layer) && pspec.p_v > 0 {
                let block =
                    bind(tape, binder, &model.params, &PromptBank::video_level_name(layer))?;
                Some(tape.broadcast_lead(block, b))
            } else {
                None
            };
            let p_len = prompt.map_or(0, |p| tape.shape(p)[1]);
            let input = match prompt {
                Some(p) => tape.concat(&[cls_seq, p, patch_seq], 1)?,
                None => tape.concat(&[cls_seq, patch_seq], 1)?,
            };
            let out = encoder_layer(
                tape,
                binder,
                &model.params,
                &format!("vision.layer.{}", layer),
                input,
                spec.heads_v,
                None,
                &model.adapters,
            )?;
            cls_seq = tape.slice(out, 1, 0, f)?;
            patch_seq = tape.slice(out, 1, f + p_len, f * m)?;
            trace.deep.push(LayerLenRecord {
                layer,
                input_len: f + p_len + f * m,
                carried_len: f + f * m,
                prompt_len: p_len,
            });
        }
        final_cls_flat = tape.reshape(cls_seq, &[bf, d])?;
    } else {
        let cls_part = tape.slice(seq, 1, 0, 1)?;
        final_cls_flat = tape.reshape(cls_part, &[bf, d])?;
    }

    let normed = layer_norm_named(tape, binder, &model.params, "vision.ln_post", final_cls_flat)?;
    let proj = bind(tape, binder, &model.params, "vision.proj.weight")?;
    let projected = tape.matmul(normed, proj)?; // [bf, d_joint]
    let frame_embeddings = tape.reshape(projected, &[b, f, spec.d])?;
    Ok(VisionEncodeOut { frame_embeddings, trace })
}

/// Build the `[b*f, p_v, d_v]` prompt block for one per-frame layer, or
/// None when the layer runs plain.
#[allow(clippy::too_many_arguments)]
fn shallow_prompt_block<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    model: &Model<S>,
    mode: PromptMode,
    layer: usize,
    b: usize,
    bf: usize,
    seq: Var,
    trace: &mut VisionTrace,
) -> Result<Option<Var>> {
    let spec = &model.spec;
    let pspec = &model.prompts;
    match mode {
        PromptMode::None => Ok(None),
        PromptMode::Vop => {
            match provide_vop(tape, binder, &model.params, pspec, layer)? {
                Some(block) => Ok(Some(tape.broadcast_lead(block, bf))),
                None => Ok(None),
            }
        }
        PromptMode::Position => {
            if !pspec.in_depth_range(layer) || pspec.p_v == 0 {
                return Ok(None);
            }
            let mut per_frame = Vec::with_capacity(spec.frames);
            for frame in 1..=spec.frames {
                let block =
                    provide_position(tape, binder, &model.params, spec, pspec, layer, frame)?
                        .expect("layer checked in range");
                per_frame.push(tape.reshape(block, &[1, pspec.p_v, spec.d_v])?);
            }
            let stacked = tape.concat(&per_frame, 0)?; // [f, p_v, d]
            let batched = tape.broadcast_lead(stacked, b); // [b, f, p_v, d]
            Ok(Some(tape.reshape(batched, &[bf, pspec.p_v, spec.d_v])?))
        }
        PromptMode::Context => {
            if !pspec.in_depth_range(layer) || pspec.p_v == 0 {
                return Ok(None);
            }
            let shared_block = binder.var(tape, &model.params, &PromptBank::shared_name(layer))?;
            if pspec.video_len == 0 {
                return Ok(Some(tape.broadcast_lead(shared_block, bf)));
            }
            // CLS states entering this layer, grouped per video.
            let cls_tok = tape.slice(seq, 1, 0, 1)?;
            let cls_seq = tape.reshape(cls_tok, &[b, spec.frames, spec.d_v])?;
            let ctx = provide_context(tape, binder, &model.params, spec, pspec, cls_seq)?;
            trace.cmm_outputs.push((layer, ctx.cmm_output));
            trace.generated.push((layer, ctx.generated));
            let generated =
                tape.reshape(ctx.generated, &[bf, pspec.video_len, spec.d_v])?;
            if pspec.shared_len() == 0 {
                return Ok(Some(generated));
            }
            let shared = tape.broadcast_lead(shared_block, bf);
            Ok(Some(tape.concat(&[shared, generated], 1)?))
        }
        _ => Err(CoreError::InvalidSpec(
            "function modes must be dispatched through their shallow mechanism".into(),
        )),
    }
}

/// Arithmetic mean over the frame axis: `[b, f, d]` → `[b, d]`.
pub fn video_embed<S: Scalar>(tape: &mut Tape<S>, frame_embeddings: Var) -> Result<Var> {
    let shape = tape.shape(frame_embeddings).to_vec();
    if shape.len() != 3 || shape[1] == 0 {
        return Err(CoreError::BadShape {
            op: "video_embed",
            msg: "need [batch, frames >= 1, d]".into(),
            shape,
        });
    }
    tape.mean_axis(frame_embeddings, 1)
}

/// Cosine similarity grid: rows are texts, columns are videos.
pub fn similarity<S: Scalar>(tape: &mut Tape<S>, text: Var, video: Var) -> Result<Var> {
    let st = tape.shape(text).to_vec();
    let sv = tape.shape(video).to_vec();
    if st.len() != 2 || sv.len() != 2 || st[1] != sv[1] {
        return Err(CoreError::ShapeMismatch { op: "similarity", lhs: st, rhs: sv });
    }
    let tn = tape.l2_normalize(text, 1e-12)?;
    let vn = tape.l2_normalize(video, 1e-12)?;
    tape.matmul_tb(tn, vn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::PromptMode;
    use crate::protocols::Protocol;

    fn toy_model(mode: PromptMode, protocol: Protocol) -> Model<f32> {
        let spec = ModelSpec::toy();
        let p = match mode {
            PromptMode::None => PromptSpec::none(spec.k),
            m => {
                let mut p = PromptSpec::new(m, 4, 4, 2, spec.k);
                if m.uses_function_split() {
                    p.k_s = 2;
                }
                p
            }
        };
        Model::build(spec, p, protocol, 11).unwrap()
    }

    fn toy_text_batch(b: usize, n: usize) -> TextBatch {
        let ids: Vec<u32> = (0..b * n).map(|i| (i % 60) as u32).collect();
        TextBatch::new(ids, b, n, vec![n - 1; b]).unwrap()
    }

    fn toy_video_batch(spec: &ModelSpec, b: usize, seed: u64) -> VideoBatch<f32> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor::<f32>::randn(
            vec![b, spec.frames, 3, spec.image_side, spec.image_side],
            1.0,
            &mut rng,
        );
        VideoBatch::new(t, spec).unwrap()
    }

    #[test]
    fn clip_dims_patch_count() {
        let spec = ModelSpec::clip_vit_b32();
        assert_eq!(spec.m(), 49);
        assert_eq!(deep_sequence_len(&spec, 8), 608);
    }

    #[test]
    fn text_length_contract_toy() {
        // p_t = 4, n = 8: layer input 12, carried 8, at every layer.
        let model = toy_model(PromptMode::Vop, Protocol::vop());
        let batch = toy_text_batch(2, 8);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let out = encode_text(&mut tape, &mut binder, &model, &batch).unwrap();
        assert_eq!(tape.shape(out.embeddings), &[2, model.spec.d]);
        for rec in &out.layers {
            assert_eq!(rec.input_len, 12);
            assert_eq!(rec.carried_len, 8);
        }
    }

    #[test]
    fn vision_length_contract_toy() {
        // m = 9, p_v = 4: per-frame input 14, carried 10.
        let model = toy_model(PromptMode::Vop, Protocol::vop());
        let video = toy_video_batch(&model.spec, 2, 3);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let out = encode_frames(&mut tape, &mut binder, &model, &video).unwrap();
        assert_eq!(
            tape.shape(out.frame_embeddings),
            &[2, model.spec.frames, model.spec.d]
        );
        for rec in &out.trace.shallow {
            assert_eq!(rec.input_len, 14);
            assert_eq!(rec.carried_len, 10);
        }
    }

    #[test]
    fn function_split_lengths_toy() {
        // f=4, m=9, p_v=4: deep length 4 + 4 + 36 = 44; shallow 14.
        let model = toy_model(PromptMode::Function, Protocol::vop_f());
        let video = toy_video_batch(&model.spec, 2, 5);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let out = encode_frames(&mut tape, &mut binder, &model, &video).unwrap();
        assert_eq!(out.trace.shallow.len(), 2);
        assert_eq!(out.trace.deep.len(), 2);
        for rec in &out.trace.shallow {
            assert_eq!(rec.input_len, 14);
        }
        for rec in &out.trace.deep {
            assert_eq!(rec.input_len, 44);
            assert_eq!(rec.carried_len, 40);
        }
    }

    #[test]
    fn zero_prompts_reduce_to_plain_encoder() {
        let spec = ModelSpec::toy();
        let plain = Model::<f32>::build(
            spec.clone(),
            PromptSpec::none(spec.k),
            Protocol::full(),
            msed(),
        )
        .unwrap();
        let zerop = Model::<f32>::build(
            spec.clone(),
            PromptSpec::new(PromptMode::Vop, 0, 0, 0, spec.k),
            Protocol::vop(),
            msed(),
        )
        .unwrap();
        let batch = toy_text_batch(2, 8);
        let video = toy_video_batch(&spec, 2, 9);

        let run = |model: &Model<f32>| -> (Vec<f32>, Vec<f32>) {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let t = encode_text(&mut tape, &mut binder, model, &batch).unwrap();
            let v = encode_frames(&mut tape, &mut binder, model, &video).unwrap();
            (tape.value(t.embeddings).to_vec(), tape.value(v.frame_embeddings).to_vec())
        };
        let (t_a, v_a) = run(&plain);
        let (t_b, v_b) = run(&zerop);
        assert_eq!(t_a, t_b);
        assert_eq!(v_a, v_b);
    }

    fn msed() -> u64 {
        41
    }

    #[test]
    fn video_embed_examples() {
        let mut tape = Tape::<f64>::new();
        // all frames identical vector u -> u
        let u = vec![0.5, -1.0, 2.0];
        let mut frames = Vec::new();
        for _ in 0..4 {
            frames.extend_from_slice(&u);
        }
        let fe = tape.leaf(&Tensor::new(vec![1, 4, 3], frames).unwrap(), false);
        let ve = video_embed(&mut tape, fe).unwrap();
        assert_eq!(tape.value(ve), &u[..]);

        // two frames u and -u -> zero vector
        let mut pm = u.clone();
        pm.extend(u.iter().map(|x| -x));
        let fe = tape.leaf(&Tensor::new(vec![1, 2, 3], pm).unwrap(), false);
        let ve = video_embed(&mut tape, fe).unwrap();
        assert!(tape.value(ve).iter().all(|v| v.abs() < 1e-12));

        // random frames match per-coordinate average
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let t = Tensor::<f64>::randn(vec![2, 12, 3], 1.0, &mut rng);
        let mut expect = Vec::new();
        for b in 0..2 {
            for c in 0..3 {
                expect.push((0..12).map(|f| t.data[(b * 12 + f) * 3 + c]).sum::<f64>() / 12.0);
            }
        }
        let fe = tape.leaf(&t, false);
        let ve = video_embed(&mut tape, fe).unwrap();
        for (a, e) in tape.value(ve).iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn similarity_examples() {
        let mut tape = Tape::<f64>::new();
        let t = tape.leaf(&Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let s = similarity(&mut tape, t, t).unwrap();
        let v = tape.value(s);
        assert!((v[0] - 1.0).abs() < 1e-12); // identical unit vectors
        assert!(v[1].abs() < 1e-12); // orthogonal

        // random grid matches the direct dot/norm formula
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let a = Tensor::<f64>::randn(vec![5, 7], 1.0, &mut rng);
        let b = Tensor::<f64>::randn(vec![5, 7], 1.0, &mut rng);
        let av = tape.leaf(&a, false);
        let bv = tape.leaf(&b, false);
        let s = similarity(&mut tape, av, bv).unwrap();
        let got = tape.value(s).to_vec();
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 =
                    (0..7).map(|c| a.data[i * 7 + c] * b.data[j * 7 + c]).sum();
                let na: f64 = (0..7).map(|c| a.data[i * 7 + c].powi(2)).sum::<f64>().sqrt();
                let nb: f64 = (0..7).map(|c| b.data[j * 7 + c].powi(2)).sum::<f64>().sqrt();
                assert!((got[i * 5 + j] - dot / (na * nb)).abs() < 1e-6);
                assert!(got[i * 5 + j] <= 1.0 + 1e-9 && got[i * 5 + j] >= -1.0 - 1e-9);
            }
        }

        // zero-norm embedding rejected
        let z = tape.leaf(&Tensor::zeros(vec![1, 3]), false);
        assert!(matches!(
            similarity(&mut tape, z, z),
            Err(CoreError::ZeroNormEmbedding(_))
        ));
    }

    #[test]
    fn frame_mean_is_permutation_invariant() {
        let model = toy_model(PromptMode::None, Protocol::full());
        let video = toy_video_batch(&model.spec, 1, 23);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let out = encode_frames(&mut tape, &mut binder, &model, &video).unwrap();
        let fe = tape.value_tensor(out.frame_embeddings);
        let d = model.spec.d;
        let f = model.spec.frames;
        // Permute frame embeddings and compare means directly.
        let mean = |order: &[usize]| -> Vec<f32> {
            (0..d)
                .map(|c| order.iter().map(|&fi| fe.data[fi * d + c]).sum::<f32>() / f as f32)
                .collect()
        };
        let fwd = mean(&(0..f).collect::<Vec<_>>());
        let rev = mean(&(0..f).rev().collect::<Vec<_>>());
        for (a, b) in fwd.iter().zip(&rev) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{} vs {}", a, b);
        }
    }

    #[test]
    fn rejects_bad_prompt_width() {
        // A prompt bank whose width disagrees with d_v must fail at build
        // time via the plan/registry shape checks when fed to concat.
        let spec = ModelSpec::toy();
        let p = PromptSpec::new(PromptMode::Vop, 4, 4, 0, spec.k);
        let model = Model::<f32>::build(spec.clone(), p, Protocol::vop(), 1).unwrap();
        // Overwrite a block with a wrong width and run the forward.
        let mut broken = model;
        broken
            .params
            .get_mut(&PromptBank::shared_name(1))
            .unwrap()
            .tensor = Tensor::zeros(vec![4, spec.d_v + 1]);
        let video = toy_video_batch(&spec, 1, 2);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        assert!(encode_frames(&mut tape, &mut binder, &broken, &video).is_err());
    }
}
