//! Diagnostic for the end-to-end learnability experiment: drifting
//! corpus, prompt-only training on a frozen random backbone, grid lr.

mod common;

use std::time::Instant;

use voplab_core::corpus::{self, CorpusConfig, TemporalStructure};
use voplab_core::model::{Model, ModelSpec};
use voplab_core::prompts::{PromptMode, PromptSpec};
use voplab_core::protocols::Protocol;
use voplab_core::trainer::{grid_search, train, TrainConfig, TrainIo, LR_GRID};

fn learn_corpus(seed: u64) -> CorpusConfig {
    CorpusConfig {
        n_pairs: 320,
        val_pairs: 64,
        test_pairs: 0,
        n_concepts: 8,
        noise_std: 0.0,
        n: 12,
        signal_tokens: 10,
        frames: 4,
        image_side: 12,
        patch: 4,
        vocab: 32,
        seed,
        temporal_structure: TemporalStructure::Drifting,
    }
}

fn learn_spec() -> ModelSpec {
    let mut spec = ModelSpec::toy();
    spec.k = 2;
    spec.d_t = 64;
    spec.d_v = 64;
    spec.d = 64;
    spec.heads_t = 4;
    spec.heads_v = 4;
    spec
}

#[test]
#[ignore = "diagnostic; run explicitly with --ignored --nocapture"]
fn probe_learnability() {
    let spec = learn_spec();
    for seed in [1u64, 2, 3] {
        let ccfg = learn_corpus(1000 + seed);
        let dir = tempfile::tempdir().unwrap();
        corpus::generate(&ccfg, dir.path(), false).unwrap();
        let ds = corpus::Dataset::open(dir.path()).unwrap();
        let train_split = ds.load_split("train").unwrap();
        let val_split = ds.load_split("val").unwrap();
        let oracle = corpus::concept_oracle_r1(&val_split, &ds.patterns().unwrap(), &ccfg).unwrap();
        println!("seed {}: oracle val R@1 = {}", seed, oracle);

        for &lr in &LR_GRID {
            let t0 = Instant::now();
            let prompts = PromptSpec::new(PromptMode::Vop, 8, 8, 0, spec.k);
            let mut model =
                Model::<f32>::build(spec.clone(), prompts, Protocol::vop(), seed).unwrap();
            let mut cfg = TrainConfig::new(seed);
            cfg.lr = Some(lr);
            let out = train(
                &mut model,
                &train_split,
                &val_split,
                &cfg,
                "probe",
                None,
                &mut TrainIo::none(),
            )
            .unwrap();
            let r1 = out.final_val.as_ref().unwrap().0.recall(1).unwrap();
            let first_loss = out.records.iter().find_map(|r| match r {
                voplab_core::trainer::LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            });
            let last_loss = out.records.iter().rev().find_map(|r| match r {
                voplab_core::trainer::LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            });
            println!(
                "  seed {} lr {:>7.0e}: val t2v R@1 {:>5.1} loss {:.3} -> {:.3}  ({:.1}s)",
                seed,
                lr,
                r1,
                first_loss.unwrap_or(f64::NAN),
                last_loss.unwrap_or(f64::NAN),
                t0.elapsed().as_secs_f32()
            );
        }
    }
}

#[test]
#[ignore = "diagnostic; run explicitly with --ignored --nocapture"]
fn probe_depth_comparison() {
    let spec = ModelSpec::toy();
    for seed in [1u64, 2, 3] {
        let ccfg = learn_corpus(1000 + seed);
        let dir = tempfile::tempdir().unwrap();
        corpus::generate(&ccfg, dir.path(), false).unwrap();
        let ds = corpus::Dataset::open(dir.path()).unwrap();
        let train_split = ds.load_split("train").unwrap();
        let val_split = ds.load_split("val").unwrap();
        for (name, range) in [("all", (1, spec.k)), ("input-only", (1, 1))] {
            let build = || {
                let mut prompts = PromptSpec::new(PromptMode::Vop, 8, 8, 0, spec.k);
                prompts.depth_range = range;
                Model::<f32>::build(spec.clone(), prompts, Protocol::vop(), seed)
            };
            let cfg = TrainConfig::new(seed);
            let (best_lr, results) =
                grid_search(&build, &train_split, &val_split, &cfg, "probe").unwrap();
            let best = results.iter().map(|r| r.t2v_r1).fold(f64::NEG_INFINITY, f64::max);
            println!("seed {} {}: best lr {:.0e} R@1 {:.1}", seed, name, best_lr, best);
        }
    }
}

/// Upper-bound diagnostic: are the frozen encoders' embeddings linearly
/// alignable at all? Fit text -> video map by ridge regression on train
/// embeddings, evaluate retrieval on val.
#[test]
#[ignore = "diagnostic; run explicitly with --ignored --nocapture"]
fn probe_linear_alignability() {
    use voplab_core::eval::{ranks, Direction, SimilarityMatrix};
    use voplab_core::trainer::encode_split;

    let mut variants: Vec<(String, ModelSpec)> = Vec::new();
    {
        let base = ModelSpec::toy();
        variants.push(("k4-base".into(), base.clone()));
        let mut k2 = base.clone();
        k2.k = 2;
        variants.push(("k2".into(), k2.clone()));
        let mut wide = base.clone();
        wide.d_t = 64;
        wide.d_v = 64;
        wide.d = 64;
        wide.heads_t = 4;
        wide.heads_v = 4;
        variants.push(("k4-wide64".into(), wide.clone()));
        let mut k2w = wide.clone();
        k2w.k = 2;
        variants.push(("k2-wide64".into(), k2w));
    }
    for (vname, spec) in &variants {
    let spec = spec.clone();
    for seed in [1u64, 2] {
        let ccfg = learn_corpus(1000 + seed);
        let dir = tempfile::tempdir().unwrap();
        corpus::generate(&ccfg, dir.path(), false).unwrap();
        let ds = corpus::Dataset::open(dir.path()).unwrap();
        let train_split = ds.load_split("train").unwrap();
        let val_split = ds.load_split("val").unwrap();

        let prompts = PromptSpec::none(spec.k);
        let model = Model::<f32>::build(spec.clone(), prompts, Protocol::full(), seed).unwrap();
        let (tx, vx) = encode_split(&model, &train_split, 32).unwrap();
        let (tv, vv) = encode_split(&model, &val_split, 32).unwrap();
        let d = spec.d;
        let n = train_split.count;

        // Ridge: W = (T^T T + a I)^{-1} T^T V  (all f64, Gauss elimination)
        let mut tt = vec![0.0f64; d * d];
        let mut tvm = vec![0.0f64; d * d];
        for i in 0..n {
            for a in 0..d {
                for b in 0..d {
                    tt[a * d + b] += tx[i * d + a] as f64 * tx[i * d + b] as f64;
                    tvm[a * d + b] += tx[i * d + a] as f64 * vx[i * d + b] as f64;
                }
            }
        }
        for a in 0..d {
            tt[a * d + a] += 1e-3;
        }
        // Solve tt * W = tvm column-block by Gaussian elimination.
        let mut aug = vec![0.0f64; d * 2 * d];
        for r in 0..d {
            aug[r * 2 * d..r * 2 * d + d].copy_from_slice(&tt[r * d..(r + 1) * d]);
            aug[r * 2 * d + d..(r + 1) * 2 * d].copy_from_slice(&tvm[r * d..(r + 1) * d]);
        }
        for col in 0..d {
            let piv = (col..d)
                .max_by(|&a, &b| {
                    aug[a * 2 * d + col].abs().partial_cmp(&aug[b * 2 * d + col].abs()).unwrap()
                })
                .unwrap();
            for k in 0..2 * d {
                aug.swap(col * 2 * d + k, piv * 2 * d + k);
            }
            let pv = aug[col * 2 * d + col];
            for r in 0..d {
                if r == col {
                    continue;
                }
                let f = aug[r * 2 * d + col] / pv;
                for k in col..2 * d {
                    aug[r * 2 * d + k] -= f * aug[col * 2 * d + k];
                }
            }
        }
        let mut w = vec![0.0f64; d * d];
        for r in 0..d {
            let pv = aug[r * 2 * d + r];
            for c in 0..d {
                w[r * d + c] = aug[r * 2 * d + d + c] / pv;
            }
        }
        // Map val text embeddings and rank against val video embeddings.
        let nv = val_split.count;
        let mut scores = vec![0.0f32; nv * nv];
        for i in 0..nv {
            let mapped: Vec<f64> = (0..d)
                .map(|c| (0..d).map(|a| tv[i * d + a] as f64 * w[a * d + c]).sum())
                .collect();
            let mn = mapped.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for j in 0..nv {
                let dot: f64 =
                    (0..d).map(|c| mapped[c] * vv[j * d + c] as f64).sum();
                let vn = (0..d).map(|c| (vv[j * d + c] as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
                scores[i * nv + j] = (dot / (mn * vn)) as f32;
            }
        }
        let s = SimilarityMatrix::new(scores, nv, nv).unwrap();
        let r = ranks(&s, Direction::T2v).unwrap();
        let r1 = 100.0 * r.iter().filter(|&&x| x == 1).count() as f64 / nv as f64;

        // Per-side check: predict the 2*n_concepts latent from each
        // side's embeddings; report val R^2.
        let latents = |split: &voplab_core::corpus::LoadedSplit| -> Vec<f64> {
            let nc = ccfg.n_concepts;
            let mut out = vec![0.0f64; split.count * 2 * nc];
            for (row, &id) in split.ids.iter().enumerate() {
                let meta = &ds.manifest.pairs[id];
                for &(c, w) in &meta.q_start {
                    out[row * 2 * nc + c] = w as f64;
                }
                for &(c, w) in &meta.q_end {
                    out[row * 2 * nc + nc + c] = w as f64;
                }
            }
            out
        };
        let lat_train = latents(&train_split);
        let lat_val = latents(&val_split);
        let r2 = |emb_tr: &[f32], emb_va: &[f32]| -> f64 {
            let k = 2 * ccfg.n_concepts;
            // ridge emb->latent via normal equations in f64
            let mut xtx = vec![0.0f64; d * d];
            let mut xty = vec![0.0f64; d * k];
            for i in 0..n {
                for a in 0..d {
                    let xa = emb_tr[i * d + a] as f64;
                    for b in 0..d {
                        xtx[a * d + b] += xa * emb_tr[i * d + b] as f64;
                    }
                    for c in 0..k {
                        xty[a * k + c] += xa * lat_train[i * k + c];
                    }
                }
            }
            for a in 0..d {
                xtx[a * d + a] += 1e-3;
            }
            let mut aug = vec![0.0f64; d * (d + k)];
            for r in 0..d {
                aug[r * (d + k)..r * (d + k) + d].copy_from_slice(&xtx[r * d..(r + 1) * d]);
                aug[r * (d + k) + d..(r + 1) * (d + k)].copy_from_slice(&xty[r * k..(r + 1) * k]);
            }
            let w2 = d + k;
            for col in 0..d {
                let piv = (col..d)
                    .max_by(|&a, &b| aug[a * w2 + col].abs().partial_cmp(&aug[b * w2 + col].abs()).unwrap())
                    .unwrap();
                for kk in 0..w2 {
                    aug.swap(col * w2 + kk, piv * w2 + kk);
                }
                let pv = aug[col * w2 + col];
                for rr in 0..d {
                    if rr == col {
                        continue;
                    }
                    let f = aug[rr * w2 + col] / pv;
                    for kk in col..w2 {
                        aug[rr * w2 + kk] -= f * aug[col * w2 + kk];
                    }
                }
            }
            let mut wmat = vec![0.0f64; d * k];
            for rr in 0..d {
                let pv = aug[rr * w2 + rr];
                for c in 0..k {
                    wmat[rr * k + c] = aug[rr * w2 + d + c] / pv;
                }
            }
            let mut ss_res = 0.0;
            let mut ss_tot = 0.0;
            let nvv = lat_val.len() / k;
            let mean: Vec<f64> = (0..k)
                .map(|c| (0..nvv).map(|i| lat_val[i * k + c]).sum::<f64>() / nvv as f64)
                .collect();
            for i in 0..nvv {
                for c in 0..k {
                    let pred: f64 =
                        (0..d).map(|a| emb_va[i * d + a] as f64 * wmat[a * k + c]).sum();
                    ss_res += (lat_val[i * k + c] - pred).powi(2);
                    ss_tot += (lat_val[i * k + c] - mean[c]).powi(2);
                }
            }
            1.0 - ss_res / ss_tot
        };
        let text_r2 = r2(&tx, &tv);
        let video_r2 = r2(&vx, &vv);
        println!(
            "{} seed {}: ridge R@1 {:.1}  text-latent R2 {:.3}  video-latent R2 {:.3}",
            vname, seed, r1, text_r2, video_r2
        );
    }
    }
}
