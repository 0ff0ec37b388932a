//! Shared helpers for integration tests: the full toy pipeline wired
//! for gradient checking, and small corpus fixtures.

#![allow(dead_code)]

use voplab_core::corpus::{self, CorpusConfig, TemporalStructure};
use voplab_core::gradcheck::{grad_check, CheckConfig, EvalOutput};
use voplab_core::model::{AdapterWiring, Model, ModelSpec};
use voplab_core::prompts::PromptSpec;
use voplab_core::protocols::{Protocol, ProtocolKind};
use voplab_core::scalar::Scalar;
use voplab_core::tape::Tape;
use voplab_core::trainer::{forward_loss, make_batch, trainable_grads};
use voplab_core::Result;

fn toy_corpus_split(seed: u64) -> (tempfile::TempDir, corpus::LoadedSplit) {
    let cfg = CorpusConfig {
        n_pairs: 8,
        val_pairs: 0,
        test_pairs: 0,
        n_concepts: 6,
        noise_std: 0.1,
        n: 12,
        signal_tokens: 8,
        frames: 4,
        image_side: 12,
        patch: 4,
        vocab: 32,
        seed,
        temporal_structure: TemporalStructure::Drifting,
    };
    let dir = tempfile::tempdir().unwrap();
    corpus::generate(&cfg, dir.path(), false).unwrap();
    let ds = corpus::Dataset::open(dir.path()).unwrap();
    let split = ds.load_split("train").unwrap();
    (dir, split)
}

fn toy_prompts(kind: ProtocolKind, k: usize) -> PromptSpec {
    let mode = kind.prompt_mode();
    let mut p = PromptSpec::new(mode, 4, 4, 2, k);
    if mode.uses_function_split() {
        p.k_s = 2;
    }
    p
}

pub fn pipeline_check<S: Scalar>(
    kind: ProtocolKind,
    cfg: &CheckConfig,
    seed: u64,
) -> Result<voplab_core::gradcheck::CheckReport> {
    let spec = ModelSpec::toy();
    let prompts = toy_prompts(kind, spec.k);
    let protocol = Protocol::new(kind);
    let mut model = Model::<S>::build(spec.clone(), prompts.clone(), protocol, seed)?;
    let (_dir, split) = toy_corpus_split(seed);
    let rows = [0usize, 1, 2, 3];

    let f = {
        let spec = spec.clone();
        let prompts = prompts.clone();
        move |p: &voplab_core::ParamRegistry<S>, want: bool| -> Result<EvalOutput<S>> {
            let view = Model {
                spec: spec.clone(),
                prompts: prompts.clone(),
                protocol,
                params: p.clone(),
                adapters: AdapterWiring::from_protocol(&protocol),
            };
            let (text, video) = make_batch::<S>(&split, &rows, &view.spec)?;
            let mut tape = Tape::new();
            let (loss, _, binder) = forward_loss(&mut tape, &view, &text, &video)?;
            let loss_val = tape.value(loss)[0].as_f64();
            let grads =
                if want { Some(trainable_grads(tape, loss, &view, &binder)?) } else { None };
            Ok(EvalOutput { loss: loss_val, grads })
        }
    };
    grad_check(&f, &mut model.params, cfg)
}

