//! Prompt mechanisms: deep co-operative prompts, position-specific and
//! context-specific video prompts, and the function-specific layer split.
//!
//! All prompt parameters live in the model's registry; this module owns
//! their naming scheme, their plan contribution, and the providers that
//! turn them into per-layer tape values. Context-specific prompts are
//! generated per forward pass by a context modeling module (CMM) shared
//! across all encoder layers, plus a fully-connected expansion.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{encoder_layer, AdapterWiring, GroupPlan, Init, ModelSpec};
use crate::params::{Binder, ParamRegistry};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Which prompt mechanism drives the visual tower.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// No prompts anywhere (plain dual encoder).
    None,
    /// Shared deep prompts in both towers.
    Vop,
    /// Part of each layer's visual prompts keyed by frame position.
    Position,
    /// Part of each layer's visual prompts generated from frame context.
    Context,
    /// Shallow per-frame layers + deep joint spatio-temporal layers.
    Function,
    /// Function split with position-specific prompts in the shallow part.
    FunctionPosition,
    /// Function split with context-specific prompts in the shallow part.
    FunctionContext,
}

impl PromptMode {
    pub fn uses_function_split(self) -> bool {
        matches!(
            self,
            PromptMode::Function | PromptMode::FunctionPosition | PromptMode::FunctionContext
        )
    }

    /// Mechanism used in per-frame (shallow) layers.
    pub fn shallow(self) -> PromptMode {
        match self {
            PromptMode::Function => PromptMode::Vop,
            PromptMode::FunctionPosition => PromptMode::Position,
            PromptMode::FunctionContext => PromptMode::Context,
            other => other,
        }
    }

    pub fn uses_positional_table(self) -> bool {
        matches!(self.shallow(), PromptMode::Position)
    }

    pub fn uses_context_generator(self) -> bool {
        matches!(self.shallow(), PromptMode::Context)
    }
}

/// Sequence model choices for the context modeling module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmmKind {
    Bilstm,
    Lstm,
    Transformer,
}

/// Number of encoder layers in the transformer CMM option.
pub const CMM_TRANSFORMER_LAYERS: usize = 4;

/// Prompt-mechanism configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    /// Textual prompt tokens per layer.
    pub p_t: usize,
    /// Visual prompt tokens per layer.
    pub p_v: usize,
    /// How many of the visual tokens are video-specific (<= p_v).
    pub video_len: usize,
    /// Inclusive 1-based layer interval receiving prompts.
    pub depth_range: (usize, usize),
    pub mode: PromptMode,
    /// Split depth for function modes; layers above k_s run jointly.
    pub k_s: usize,
    #[serde(default = "default_cmm_kind")]
    pub cmm_kind: CmmKind,
    /// CMM hidden width per direction; None means the vision width.
    #[serde(default)]
    pub cmm_hidden: Option<usize>,
}

fn default_cmm_kind() -> CmmKind {
    CmmKind::Bilstm
}

impl PromptSpec {
    /// A mode's default configuration at the given depth.
    pub fn new(mode: PromptMode, p_t: usize, p_v: usize, video_len: usize, k: usize) -> Self {
        PromptSpec {
            p_t,
            p_v,
            video_len,
            depth_range: (1, k),
            mode,
            k_s: k,
            cmm_kind: CmmKind::Bilstm,
            cmm_hidden: None,
        }
    }

    pub fn none(k: usize) -> Self {
        PromptSpec::new(PromptMode::None, 0, 0, 0, k)
    }

    pub fn validate(&self, model: &ModelSpec) -> Result<()> {
        if self.video_len > self.p_v {
            return Err(CoreError::InvalidSpec(format!(
                "video_len {} exceeds p_v {}",
                self.video_len, self.p_v
            )));
        }
        let (lo, hi) = self.depth_range;
        if lo < 1 || hi > model.k || lo > hi {
            return Err(CoreError::InvalidSpec(format!(
                "depth_range {:?} outside [1, {}]",
                self.depth_range, model.k
            )));
        }
        if self.k_s > model.k {
            return Err(CoreError::InvalidSpec(format!(
                "k_s {} exceeds layer count {}",
                self.k_s, model.k
            )));
        }
        if let Some(h) = self.cmm_hidden {
            if h == 0 {
                return Err(CoreError::InvalidSpec("cmm_hidden must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn in_depth_range(&self, layer: usize) -> bool {
        layer >= self.depth_range.0 && layer <= self.depth_range.1
    }

    /// Effective video-specific token count; zero unless the shallow
    /// mechanism keys or generates tokens.
    pub fn effective_video_len(&self) -> usize {
        match self.mode.shallow() {
            PromptMode::Position | PromptMode::Context => self.video_len,
            _ => 0,
        }
    }

    /// Count of shared (position-agnostic) visual tokens per layer.
    pub fn shared_len(&self) -> usize {
        self.p_v - self.effective_video_len()
    }

    /// Split depth: equals K for non-function modes so every layer is
    /// a per-frame layer.
    pub fn split_depth(&self, k: usize) -> usize {
        if self.mode.uses_function_split() {
            self.k_s
        } else {
            k
        }
    }

    pub fn cmm_hidden_width(&self, model: &ModelSpec) -> usize {
        self.cmm_hidden.unwrap_or(model.d_v)
    }

    /// Width of the CMM output consumed by the expansion layer.
    pub fn cmm_out_width(&self, model: &ModelSpec) -> usize {
        match self.cmm_kind {
            CmmKind::Bilstm => 2 * self.cmm_hidden_width(model),
            CmmKind::Lstm => self.cmm_hidden_width(model),
            CmmKind::Transformer => model.d_v,
        }
    }
}

/// Name scheme for all learnable prompt parameters.
///
/// Every block is a distinct registry group; nothing is shared between
/// layers except through the explicit position-table keying and the
/// single `cmm.*` name space.
#[derive(Debug, Clone)]
pub struct PromptBank {
    pub spec: PromptSpec,
}

impl PromptBank {
    pub fn new(spec: PromptSpec) -> Self {
        PromptBank { spec }
    }

    pub fn text_name(layer: usize) -> String {
        format!("prompts.text.layer.{}", layer)
    }

    pub fn shared_name(layer: usize) -> String {
        format!("prompts.vision.shared.layer.{}", layer)
    }

    pub fn positional_name(layer: usize, frame: usize) -> String {
        format!("prompts.vision.positional.layer.{}.frame.{}", layer, frame)
    }

    pub fn video_level_name(layer: usize) -> String {
        format!("prompts.vision.video.layer.{}", layer)
    }

    pub fn frame_pos_name() -> &'static str {
        "prompts.frame_pos_embedding"
    }

    /// Plan contribution of all prompt parameters for this configuration.
    pub fn plan(&self, model: &ModelSpec) -> Vec<GroupPlan> {
        let s = &self.spec;
        let mut plan = Vec::new();
        if s.mode == PromptMode::None {
            return plan;
        }
        let split = s.split_depth(model.k);
        let prompt_std = 0.02;
        for layer in 1..=model.k {
            if !s.in_depth_range(layer) {
                continue;
            }
            if s.p_t > 0 {
                plan.push(GroupPlan::new(
                    Self::text_name(layer),
                    vec![s.p_t, model.d_t],
                    Init::Gaussian(prompt_std),
                ));
            }
            if s.p_v == 0 {
                continue;
            }
            if layer <= split {
                plan.push(GroupPlan::new(
                    Self::shared_name(layer),
                    vec![s.shared_len(), model.d_v],
                    Init::Gaussian(prompt_std),
                ));
                if s.mode.uses_positional_table() {
                    for frame in 1..=model.frames {
                        plan.push(GroupPlan::new(
                            Self::positional_name(layer, frame),
                            vec![s.video_len, model.d_v],
                            Init::Gaussian(prompt_std),
                        ));
                    }
                }
            } else {
                plan.push(GroupPlan::new(
                    Self::video_level_name(layer),
                    vec![s.p_v, model.d_v],
                    Init::Gaussian(prompt_std),
                ));
            }
        }
        if s.mode.uses_function_split() {
            plan.push(GroupPlan::new(
                Self::frame_pos_name().to_string(),
                vec![model.frames, model.d_v],
                Init::Zeros,
            ));
        }
        if s.mode.uses_context_generator() {
            plan.extend(context_generator_plan(model, s));
        }
        plan
    }
}

/// Plan for the context generator: CMM + expansion layer, shared across
/// all encoder layers (single `cmm.*` name space).
fn context_generator_plan(model: &ModelSpec, spec: &PromptSpec) -> Vec<GroupPlan> {
    let mut plan = Vec::new();
    let h = spec.cmm_hidden_width(model);
    let d = model.d_v;
    match spec.cmm_kind {
        CmmKind::Bilstm | CmmKind::Lstm => {
            let dirs: &[&str] =
                if spec.cmm_kind == CmmKind::Bilstm { &["fwd", "bwd"] } else { &["fwd"] };
            for dir in dirs {
                plan.push(GroupPlan::new(
                    format!("cmm.{}.w_ih", dir),
                    vec![d, 4 * h],
                    Init::UniformFanIn(h),
                ));
                plan.push(GroupPlan::new(
                    format!("cmm.{}.w_hh", dir),
                    vec![h, 4 * h],
                    Init::UniformFanIn(h),
                ));
                plan.push(GroupPlan::new(
                    format!("cmm.{}.b_ih", dir),
                    vec![4 * h],
                    Init::UniformFanIn(h),
                ));
                plan.push(GroupPlan::new(
                    format!("cmm.{}.b_hh", dir),
                    vec![4 * h],
                    Init::UniformFanIn(h),
                ));
            }
        }
        CmmKind::Transformer => {
            plan.push(GroupPlan::new(
                "cmm.transformer.pos_embedding".to_string(),
                vec![model.frames, d],
                Init::Gaussian(0.01),
            ));
            for layer in 1..=CMM_TRANSFORMER_LAYERS {
                plan.extend(crate::model::encoder_layer_plan(
                    &format!("cmm.transformer.layer.{}", layer),
                    d,
                    model.mlp_ratio,
                ));
            }
        }
    }
    let fc_in = spec.cmm_out_width(model);
    let fc_out = spec.video_len * d;
    plan.push(GroupPlan::new(
        "cmm.fc.weight".to_string(),
        vec![fc_in, fc_out],
        Init::UniformFanIn(fc_in),
    ));
    plan.push(GroupPlan::new("cmm.fc.bias".to_string(), vec![fc_out], Init::UniformFanIn(fc_in)));
    plan
}

// ── Providers ────────────────────────────────────────────────────────

/// Shared visual prompts for one layer: `[p_v, d_v]`, identical for every
/// frame and every video. None outside the depth range.
pub fn provide_vop<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    params: &ParamRegistry<S>,
    spec: &PromptSpec,
    layer: usize,
) -> Result<Option<Var>> {
    if !spec.in_depth_range(layer) || spec.p_v == 0 {
        return Ok(None);
    }
    Ok(Some(binder.var(tape, params, &PromptBank::shared_name(layer))?))
}

/// Position-specific prompts for one (layer, frame) pair: the layer's
/// shared block followed by the keyed positional block, `[p_v, d_v]`.
pub fn provide_position<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    params: &ParamRegistry<S>,
    model: &ModelSpec,
    spec: &PromptSpec,
    layer: usize,
    frame: usize,
) -> Result<Option<Var>> {
    if frame == 0 || frame > model.frames {
        return Err(CoreError::InvalidSpec(format!(
            "frame position {} outside 1..={}",
            frame, model.frames
        )));
    }
    if !spec.in_depth_range(layer) || spec.p_v == 0 {
        return Ok(None);
    }
    let shared = binder.var(tape, params, &PromptBank::shared_name(layer))?;
    if spec.video_len == 0 {
        return Ok(Some(shared));
    }
    let positional = binder.var(tape, params, &PromptBank::positional_name(layer, frame))?;
    if spec.shared_len() == 0 {
        return Ok(Some(positional));
    }
    Ok(Some(tape.concat(&[shared, positional], 0)?))
}

/// Output of the context generator for one layer.
pub struct ContextPrompts {
    /// Generated video-specific tokens, `[batch, frames, video_len, d_v]`.
    pub generated: Var,
    /// CMM output sequence, `[batch, frames, cmm_out_width]`. Exposed for
    /// graph instrumentation: nothing downstream of the encoder stack may
    /// depend on it except the generated prompts.
    pub cmm_output: Var,
}

/// Run the CMM over per-frame [CLS] tokens and expand to prompt tokens.
///
/// `cls_seq` is `[batch, frames, d_v]`, the CLS states entering the layer.
/// The modulated sequence is used only for generation; callers must keep
/// feeding the original CLS tokens forward.
pub fn provide_context<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    params: &ParamRegistry<S>,
    model: &ModelSpec,
    spec: &PromptSpec,
    cls_seq: Var,
) -> Result<ContextPrompts> {
    let shape = tape.shape(cls_seq).to_vec();
    if shape.len() != 3 || shape[1] != model.frames || shape[2] != model.d_v {
        return Err(CoreError::BadShape {
            op: "provide_context",
            msg: format!("need [batch, {}, {}] CLS sequence", model.frames, model.d_v),
            shape,
        });
    }
    let batch = shape[0];
    let modulated = match spec.cmm_kind {
        CmmKind::Bilstm => {
            let fwd = lstm_direction(tape, binder, params, model, spec, cls_seq, "fwd", false)?;
            let bwd = lstm_direction(tape, binder, params, model, spec, cls_seq, "bwd", true)?;
            tape.concat(&[fwd, bwd], 2)?
        }
        CmmKind::Lstm => lstm_direction(tape, binder, params, model, spec, cls_seq, "fwd", false)?,
        CmmKind::Transformer => {
            let pos = binder.var(tape, params, "cmm.transformer.pos_embedding")?;
            let mut x = tape.add(cls_seq, pos)?;
            for layer in 1..=CMM_TRANSFORMER_LAYERS {
                x = encoder_layer(
                    tape,
                    binder,
                    params,
                    &format!("cmm.transformer.layer.{}", layer),
                    x,
                    model.cmm_transformer_heads()?,
                    None,
                    &AdapterWiring::none(),
                )?;
            }
            x
        }
    };
    let out_w = spec.cmm_out_width(model);
    let flat = tape.reshape(modulated, &[batch * model.frames, out_w])?;
    let w = binder.var(tape, params, "cmm.fc.weight")?;
    let b = binder.var(tape, params, "cmm.fc.bias")?;
    let proj = tape.matmul(flat, w)?;
    let proj = tape.add(proj, b)?;
    let generated = tape.reshape(proj, &[batch, model.frames, spec.video_len, model.d_v])?;
    Ok(ContextPrompts { generated, cmm_output: modulated })
}

/// One LSTM direction over `[batch, frames, d_v]` → `[batch, frames, h]`.
fn lstm_direction<S: Scalar>(
    tape: &mut Tape<S>,
    binder: &mut Binder,
    params: &ParamRegistry<S>,
    model: &ModelSpec,
    spec: &PromptSpec,
    input: Var,
    dir: &str,
    reversed: bool,
) -> Result<Var> {
    let batch = tape.shape(input)[0];
    let frames = model.frames;
    let h_w = spec.cmm_hidden_width(model);
    let w_ih = binder.var(tape, params, &format!("cmm.{}.w_ih", dir))?;
    let w_hh = binder.var(tape, params, &format!("cmm.{}.w_hh", dir))?;
    let b_ih = binder.var(tape, params, &format!("cmm.{}.b_ih", dir))?;
    let b_hh = binder.var(tape, params, &format!("cmm.{}.b_hh", dir))?;

    let zeros = crate::tensor::Tensor::<S>::zeros(vec![batch, h_w]);
    let mut h = tape.constant(&zeros);
    let mut c = tape.constant(&zeros);
    let mut outputs: Vec<Option<Var>> = vec![None; frames];
    let steps: Vec<usize> =
        if reversed { (0..frames).rev().collect() } else { (0..frames).collect() };
    for t in steps {
        let x_t = tape.slice(input, 1, t, 1)?;
        let x_t = tape.reshape(x_t, &[batch, model.d_v])?;
        let xg = tape.matmul(x_t, w_ih)?;
        let hg = tape.matmul(h, w_hh)?;
        let gsum = tape.add(xg, hg)?;
        let gsum = tape.add(gsum, b_ih)?;
        let gates = tape.add(gsum, b_hh)?;
        // Gate order i, f, g, o.
        let i_g = tape.slice(gates, 1, 0, h_w)?;
        let f_g = tape.slice(gates, 1, h_w, h_w)?;
        let g_g = tape.slice(gates, 1, 2 * h_w, h_w)?;
        let o_g = tape.slice(gates, 1, 3 * h_w, h_w)?;
        let i_s = tape.sigmoid(i_g);
        let f_s = tape.sigmoid(f_g);
        let g_t = tape.tanh(g_g);
        let o_s = tape.sigmoid(o_g);
        let keep = tape.mul(f_s, c)?;
        let write = tape.mul(i_s, g_t)?;
        c = tape.add(keep, write)?;
        let c_t = tape.tanh(c);
        h = tape.mul(o_s, c_t)?;
        outputs[t] = Some(tape.reshape(h, &[batch, 1, h_w])?);
    }
    let seq: Vec<Var> = outputs.into_iter().map(|v| v.expect("all steps filled")).collect();
    tape.concat(&seq, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rejects_bad_ranges() {
        let model = ModelSpec::toy();
        let mut spec = PromptSpec::new(PromptMode::Vop, 4, 4, 0, model.k);
        spec.depth_range = (0, 2);
        assert!(spec.validate(&model).is_err());
        spec.depth_range = (1, model.k + 1);
        assert!(spec.validate(&model).is_err());
        spec.depth_range = (1, model.k);
        spec.video_len = spec.p_v + 1;
        assert!(spec.validate(&model).is_err());
    }

    #[test]
    fn plan_counts_shared_vs_positional() {
        let model = ModelSpec::toy();
        let spec = PromptSpec::new(PromptMode::Position, 4, 4, 2, model.k);
        let bank = PromptBank::new(spec.clone());
        let plan = bank.plan(&model);
        let shared: usize = plan
            .iter()
            .filter(|g| g.name.contains("vision.shared"))
            .map(|g| g.shape.iter().product::<usize>())
            .sum();
        let positional: usize = plan
            .iter()
            .filter(|g| g.name.contains("vision.positional"))
            .map(|g| g.shape.iter().product::<usize>())
            .sum();
        assert_eq!(shared, model.k * (spec.p_v - spec.video_len) * model.d_v);
        assert_eq!(positional, model.k * model.frames * spec.video_len * model.d_v);
    }

    #[test]
    fn function_split_plan_topology() {
        let model = ModelSpec::toy();
        let mut spec = PromptSpec::new(PromptMode::Function, 4, 4, 0, model.k);
        spec.k_s = 2;
        let plan = PromptBank::new(spec).plan(&model);
        let shallow = plan.iter().filter(|g| g.name.contains("vision.shared")).count();
        let deep = plan.iter().filter(|g| g.name.contains("vision.video")).count();
        assert_eq!(shallow, 2);
        assert_eq!(deep, model.k - 2);
        assert!(plan.iter().any(|g| g.name == PromptBank::frame_pos_name()));
    }
}
