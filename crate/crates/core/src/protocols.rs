//! Tuning protocols: which parameter groups train under each strategy,
//! plus the ledger that accounts for trainable counts and percentages.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::model::{GroupPlan, ModelSpec};
use crate::params::ParamRegistry;
use crate::prompts::PromptMode;
use crate::scalar::Scalar;

/// Reference total used for the percentage column, in parameters.
/// The published accounting includes bookkeeping we cannot observe, so
/// percentages are reported against this constant alongside percentages
/// against our own reconstructed total.
pub const REFERENCE_TOTAL_PARAMS: f64 = 119_800_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolKind {
    Full,
    Bias,
    Proj,
    Partial,
    AdapterAttn,
    AdapterFfn,
    Vop,
    VopP,
    VopC,
    VopF,
    VopFp,
    VopFc,
}

impl ProtocolKind {
    pub const ALL: [ProtocolKind; 12] = [
        ProtocolKind::Full,
        ProtocolKind::Bias,
        ProtocolKind::Proj,
        ProtocolKind::Partial,
        ProtocolKind::AdapterAttn,
        ProtocolKind::AdapterFfn,
        ProtocolKind::Vop,
        ProtocolKind::VopP,
        ProtocolKind::VopC,
        ProtocolKind::VopF,
        ProtocolKind::VopFp,
        ProtocolKind::VopFc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolKind::Full => "full",
            ProtocolKind::Bias => "bias",
            ProtocolKind::Proj => "proj",
            ProtocolKind::Partial => "partial",
            ProtocolKind::AdapterAttn => "adapter_attn",
            ProtocolKind::AdapterFfn => "adapter_ffn",
            ProtocolKind::Vop => "vop",
            ProtocolKind::VopP => "vop_p",
            ProtocolKind::VopC => "vop_c",
            ProtocolKind::VopF => "vop_f",
            ProtocolKind::VopFp => "vop_fp",
            ProtocolKind::VopFc => "vop_fc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        ProtocolKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| CoreError::InvalidConfig(format!("unknown protocol '{}'", s)))
    }

    /// Prompt mechanism implied by the protocol.
    pub fn prompt_mode(self) -> PromptMode {
        match self {
            ProtocolKind::Vop => PromptMode::Vop,
            ProtocolKind::VopP => PromptMode::Position,
            ProtocolKind::VopC => PromptMode::Context,
            ProtocolKind::VopF => PromptMode::Function,
            ProtocolKind::VopFp => PromptMode::FunctionPosition,
            ProtocolKind::VopFc => PromptMode::FunctionContext,
            _ => PromptMode::None,
        }
    }

    pub fn is_prompted(self) -> bool {
        self.prompt_mode() != PromptMode::None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub kind: ProtocolKind,
    /// Bottleneck width for adapter kinds.
    #[serde(default = "default_adapter_hidden")]
    pub adapter_hidden: usize,
}

fn default_adapter_hidden() -> usize {
    64
}

impl Protocol {
    pub fn new(kind: ProtocolKind) -> Self {
        Protocol { kind, adapter_hidden: default_adapter_hidden() }
    }

    pub fn full() -> Self {
        Protocol::new(ProtocolKind::Full)
    }

    pub fn vop() -> Self {
        Protocol::new(ProtocolKind::Vop)
    }

    pub fn vop_f() -> Self {
        Protocol::new(ProtocolKind::VopF)
    }

    pub fn validate(&self) -> Result<()> {
        if matches!(self.kind, ProtocolKind::AdapterAttn | ProtocolKind::AdapterFfn)
            && self.adapter_hidden == 0
        {
            return Err(CoreError::InvalidSpec("adapter_hidden must be positive".into()));
        }
        Ok(())
    }

    /// Prompted protocols must match the prompt spec's mode; baseline
    /// protocols require an unprompted model.
    pub fn check_mode(&self, mode: PromptMode) -> Result<()> {
        let want = self.kind.prompt_mode();
        if want != mode {
            return Err(CoreError::InvalidSpec(format!(
                "protocol '{}' implies prompt mode {:?}, got {:?}",
                self.kind.name(),
                want,
                mode
            )));
        }
        Ok(())
    }
}

/// Trainability of one named group under a protocol.
///
/// `partial` follows the narrow reading: the last vision transformer
/// block plus both output projections.
pub fn group_trainable(name: &str, spec: &ModelSpec, protocol: &Protocol) -> bool {
    match protocol.kind {
        ProtocolKind::Full => true,
        ProtocolKind::Bias => name.ends_with(".bias"),
        ProtocolKind::Proj => name == "text.proj.weight" || name == "vision.proj.weight",
        ProtocolKind::Partial => {
            let last_vision = format!("vision.layer.{}.", spec.k);
            name.starts_with(&last_vision)
                || name == "text.proj.weight"
                || name == "vision.proj.weight"
        }
        ProtocolKind::AdapterAttn => name.contains(".adapter_attn."),
        ProtocolKind::AdapterFfn => name.contains(".adapter_ffn."),
        ProtocolKind::Vop
        | ProtocolKind::VopP
        | ProtocolKind::VopC
        | ProtocolKind::VopF
        | ProtocolKind::VopFp
        | ProtocolKind::VopFc => name.starts_with("prompts.") || name.starts_with("cmm."),
    }
}

/// Set trainability flags on a built registry.
pub fn apply_protocol<S: Scalar>(
    params: &mut ParamRegistry<S>,
    spec: &ModelSpec,
    protocol: &Protocol,
) -> Result<()> {
    protocol.validate()?;
    let names: Vec<String> = params.names().map(String::from).collect();
    for name in names {
        let flag = group_trainable(&name, spec, protocol);
        params.set_trainable(&name, flag)?;
    }
    Ok(())
}

/// Trainability mask over a plan.
pub fn trainability_mask(
    plan: &[GroupPlan],
    spec: &ModelSpec,
    protocol: &Protocol,
) -> HashMap<String, bool> {
    plan.iter()
        .map(|g| (g.name.clone(), group_trainable(&g.name, spec, protocol)))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerGroup {
    pub name: String,
    pub count: usize,
    pub trainable: bool,
}

/// Per-group trainable/frozen accounting with totals and percentages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterLedger {
    pub groups: Vec<LedgerGroup>,
    pub trainable_total: usize,
    pub model_total: usize,
    /// Count used for the headline percentage.
    pub denominator: f64,
    /// trainable_total / denominator * 100.
    pub percent: f64,
}

impl ParameterLedger {
    /// Percentage against the reconstructed model total.
    pub fn percent_of_model(&self) -> f64 {
        100.0 * self.trainable_total as f64 / self.model_total as f64
    }
}

/// Walk a plan under a mask and produce the ledger. Every group must be
/// classified exactly once; a group missing from the mask is an error.
pub fn count_parameters(
    plan: &[GroupPlan],
    mask: &HashMap<String, bool>,
    denominator: f64,
) -> Result<ParameterLedger> {
    let mut groups = Vec::with_capacity(plan.len());
    let mut trainable_total = 0usize;
    let mut model_total = 0usize;
    for g in plan {
        let &trainable = mask
            .get(&g.name)
            .ok_or_else(|| CoreError::UnknownGroup(format!("mask has no entry for '{}'", g.name)))?;
        let count = g.count();
        model_total += count;
        if trainable {
            trainable_total += count;
        }
        groups.push(LedgerGroup { name: g.name.clone(), count, trainable });
    }
    let percent = 100.0 * trainable_total as f64 / denominator;
    Ok(ParameterLedger { groups, trainable_total, model_total, denominator, percent })
}

/// Ledger for a protocol at the given dimensions, using the reference
/// denominator.
pub fn protocol_ledger(
    spec: &ModelSpec,
    prompts: &crate::prompts::PromptSpec,
    protocol: &Protocol,
) -> Result<ParameterLedger> {
    let plan = crate::model::full_plan(spec, prompts, protocol)?;
    let mask = trainability_mask(&plan, spec, protocol);
    count_parameters(&plan, &mask, REFERENCE_TOTAL_PARAMS)
}

/// Default prompt configuration for a protocol at the given dimensions:
/// prompt lengths 8, video-specific length 4, split depth 8 scaled to
/// the layer count when it differs from 12.
pub fn default_prompts_for(kind: ProtocolKind, spec: &ModelSpec) -> crate::prompts::PromptSpec {
    use crate::prompts::PromptSpec;
    let mode = kind.prompt_mode();
    if mode == PromptMode::None {
        return PromptSpec::none(spec.k);
    }
    let mut p = PromptSpec::new(mode, 8, 8, 4, spec.k);
    if !mode.uses_positional_table() && !mode.uses_context_generator() {
        p.video_len = 0;
    }
    if mode.uses_function_split() {
        p.k_s = if spec.k == 12 { 8 } else { (spec.k * 2).div_ceil(3) };
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::full_plan;
    use crate::prompts::PromptSpec;

    fn clip_ledger(kind: ProtocolKind) -> ParameterLedger {
        let spec = ModelSpec::clip_vit_b32();
        let prompts = default_prompts_for(kind, &spec);
        protocol_ledger(&spec, &prompts, &Protocol::new(kind)).unwrap()
    }

    #[test]
    fn vop_count_at_clip_dims() {
        // 12 * 8 * 512 + 12 * 8 * 768 text+vision prompt tokens.
        let ledger = clip_ledger(ProtocolKind::Vop);
        assert_eq!(ledger.trainable_total, 122_880);
        assert!((ledger.percent - 0.103).abs() < 0.0005);
    }

    #[test]
    fn vop_p_count_at_clip_dims() {
        // text 49,152 + vision 12 * (4 + 4*12) * 768 = 528,384.
        let ledger = clip_ledger(ProtocolKind::VopP);
        assert_eq!(ledger.trainable_total, 528_384);
        assert!((ledger.percent - 0.441).abs() < 0.0005);
    }

    #[test]
    fn proj_count_at_clip_dims() {
        let ledger = clip_ledger(ProtocolKind::Proj);
        assert_eq!(ledger.trainable_total, 512 * 512 + 768 * 512);
        assert!((ledger.percent - 0.547).abs() < 0.0005);
    }

    #[test]
    fn adapter_count_at_clip_dims() {
        // 12*(2*64*768 + 64 + 768) + 12*(2*64*512 + 64 + 512) = 1,982,976.
        for kind in [ProtocolKind::AdapterAttn, ProtocolKind::AdapterFfn] {
            let ledger = clip_ledger(kind);
            assert_eq!(ledger.trainable_total, 1_982_976);
            assert!((ledger.percent - 1.655).abs() < 0.0005);
        }
    }

    #[test]
    fn vop_c_count_at_clip_dims() {
        // BiLSTM 9,449,472 + FC 4,721,664 + shared 36,864 + text 49,152.
        let ledger = clip_ledger(ProtocolKind::VopC);
        assert_eq!(ledger.trainable_total, 14_257_152);
        assert!((ledger.percent - 11.898).abs() < 0.05);
    }

    #[test]
    fn full_percent_of_model_is_100() {
        let ledger = clip_ledger(ProtocolKind::Full);
        assert!((ledger.percent_of_model() - 100.0).abs() < 1e-9);
        assert_eq!(ledger.trainable_total, ledger.model_total);
    }

    #[test]
    fn mask_must_cover_every_group() {
        let spec = ModelSpec::toy();
        let prompts = PromptSpec::none(spec.k);
        let protocol = Protocol::full();
        let plan = full_plan(&spec, &prompts, &protocol).unwrap();
        let mut mask = trainability_mask(&plan, &spec, &protocol);
        mask.remove("logit_scale");
        assert!(count_parameters(&plan, &mask, 1.0).is_err());
    }

    #[test]
    fn bias_rule_takes_shifts_not_gains() {
        let spec = ModelSpec::toy();
        let protocol = Protocol::new(ProtocolKind::Bias);
        assert!(group_trainable("text.layer.1.ln_1.bias", &spec, &protocol));
        assert!(!group_trainable("text.layer.1.ln_1.weight", &spec, &protocol));
        assert!(!group_trainable("vision.class_embedding", &spec, &protocol));
        assert!(!group_trainable("logit_scale", &spec, &protocol));
    }

    #[test]
    fn unknown_protocol_name_rejected() {
        assert!(ProtocolKind::parse("lora").is_err());
        assert_eq!(ProtocolKind::parse("vop_fc").unwrap(), ProtocolKind::VopFc);
    }
}
