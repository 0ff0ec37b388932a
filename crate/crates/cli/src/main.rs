//! Experiment driver: dataset generation, training, parameter accounting
//! and ablation sweeps, each reproducible from one config file and seed.
//!
//! Exit codes: 0 success, 2 configuration error, 3 refused to clobber
//! existing outputs, 4 training aborted on a non-finite loss.

mod config;
mod report;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use voplab_core::corpus::{self, Dataset};
use voplab_core::model::Model;
use voplab_core::prompts::{CmmKind, PromptSpec};
use voplab_core::protocols::{protocol_ledger, Protocol, ProtocolKind};
use voplab_core::trainer::{self, train, TrainConfig, TrainIo};
use voplab_core::CoreError;

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "voplab", version, about = "Desk-scale text-video prompt-tuning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Override the run seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides out_dir from the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired text-video dataset.
    Generate(CommonArgs),
    /// Train under the configured protocol and report retrieval metrics.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from the latest checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Emit the per-protocol trainable-parameter ledger.
    CountParams(CommonArgs),
    /// Train one run per value of an ablation axis.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        axis: Axis,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Axis {
    Depth,
    Length,
    VideoLen,
    KSplit,
    Cmm,
}

impl Axis {
    fn name(self) -> &'static str {
        match self {
            Axis::Depth => "depth",
            Axis::Length => "length",
            Axis::VideoLen => "video_len",
            Axis::KSplit => "k_split",
            Axis::Cmm => "cmm",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(args) => cmd_generate(&args),
        Command::Train { common, resume } => cmd_train(&common, resume),
        Command::CountParams(args) => cmd_count_params(&args),
        Command::Ablate { common, axis } => cmd_ablate(&common, axis),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {:#}", err);
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(core) = cause.downcast_ref::<CoreError>() {
            return match core {
                CoreError::WouldClobber(_) => 3,
                CoreError::NonFinite(_) => 4,
                CoreError::InvalidConfig(_) | CoreError::InvalidSpec(_) => 2,
                _ => 1,
            };
        }
        if cause.downcast_ref::<toml::de::Error>().is_some() {
            return 2;
        }
    }
    // Configuration-shaped failures raised directly by the driver.
    if err.to_string().contains("config") {
        return 2;
    }
    1
}

/// Timestamp lives only here so data outputs stay byte-identical.
fn write_sidecar(out_dir: &Path, command: &str) -> Result<()> {
    let now = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    let info = serde_json::json!({ "command": command, "unix_time": now });
    fs::write(out_dir.join("run_info.json"), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

fn refuse_clobber(artifact: &Path, force: bool) -> Result<()> {
    if artifact.exists() && !force {
        bail!(CoreError::WouldClobber(artifact.display().to_string()));
    }
    Ok(())
}

// ── generate ─────────────────────────────────────────────────────────

fn cmd_generate(args: &CommonArgs) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    let out_dir = cfg.out_dir(args.out.as_deref())?;
    {
        let corpus_cfg = cfg.corpus.as_mut().context("config needs a [corpus] section")?;
        if let Some(seed) = args.seed {
            corpus_cfg.seed = seed;
        }
    }
    let corpus_cfg = cfg.corpus()?.clone();
    corpus_cfg.validate().map_err(anyhow::Error::from)?;
    let manifest = corpus::generate(&corpus_cfg, &out_dir, args.force)?;
    cfg.write_resolved(&out_dir)?;
    write_sidecar(&out_dir, "generate")?;
    println!(
        "dataset: {} pairs ({} train / {} val / {} test), hash {}",
        corpus_cfg.n_pairs,
        corpus_cfg.train_pairs(),
        corpus_cfg.val_pairs,
        corpus_cfg.test_pairs,
        manifest.dataset_hash()
    );
    Ok(())
}

// ── count-params ─────────────────────────────────────────────────────

fn cmd_count_params(args: &CommonArgs) -> Result<()> {
    let cfg = ExperimentConfig::load(&args.config)?;
    let spec = cfg.model()?;
    spec.validate().map_err(anyhow::Error::from)?;
    let kinds: Vec<ProtocolKind> = match &cfg.count_protocols {
        Some(names) => names
            .iter()
            .map(|n| ProtocolKind::parse(n).map_err(anyhow::Error::from))
            .collect::<Result<_>>()?,
        None => ProtocolKind::ALL.to_vec(),
    };
    let mut rows = Vec::new();
    for kind in kinds {
        let protocol = match cfg.protocol {
            Some(p) if p.kind == kind => p,
            _ => Protocol::new(kind),
        };
        let prompts = match (&cfg.prompts, kind.prompt_mode()) {
            (Some(p), mode) if p.mode == mode => p.clone(),
            _ => voplab_core::protocols::default_prompts_for(kind, spec),
        };
        let ledger = protocol_ledger(spec, &prompts, &protocol)?;
        rows.push((kind.name().to_string(), ledger));
    }
    let csv = report::ledger_csv(&rows);
    print!("{}", csv);
    if let Ok(out_dir) = cfg.out_dir(args.out.as_deref()) {
        fs::create_dir_all(&out_dir)?;
        refuse_clobber(&out_dir.join("ledger.csv"), args.force)?;
        fs::write(out_dir.join("ledger.csv"), &csv)?;
        cfg.write_resolved(&out_dir)?;
        write_sidecar(&out_dir, "count-params")?;
    }
    Ok(())
}

// ── train ────────────────────────────────────────────────────────────

struct RunContext {
    dataset: Dataset,
    train_split: corpus::LoadedSplit,
    val_split: corpus::LoadedSplit,
    dataset_hash: String,
}

fn open_dataset(cfg: &ExperimentConfig) -> Result<RunContext> {
    let data_dir = cfg.data_dir()?;
    if !data_dir.join(corpus::MANIFEST_NAME).exists() {
        bail!(CoreError::InvalidConfig(format!(
            "dataset not found at {} (run generate first)",
            data_dir.display()
        )));
    }
    let dataset = Dataset::open(data_dir)?;
    let train_split = dataset.load_split("train")?;
    let val_split = dataset.load_split("val")?;
    let dataset_hash = dataset.manifest.dataset_hash();
    Ok(RunContext { dataset, train_split, val_split, dataset_hash })
}

fn check_geometry(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<()> {
    let spec = cfg.model()?;
    let c = &ctx.dataset.manifest.config;
    if c.frames != spec.frames || c.image_side != spec.image_side || c.n > spec.n_max
        || c.vocab > spec.vocab
    {
        bail!(CoreError::InvalidConfig(format!(
            "dataset geometry (frames {}, side {}, n {}, vocab {}) does not fit the model \
             (frames {}, side {}, n_max {}, vocab {})",
            c.frames, c.image_side, c.n, c.vocab,
            spec.frames, spec.image_side, spec.n_max, spec.vocab
        )));
    }
    Ok(())
}

fn pin_lr<S: voplab_core::Scalar>(
    cfg: &TrainConfig,
    build: &dyn Fn() -> voplab_core::Result<Model<S>>,
    ctx: &RunContext,
) -> Result<TrainConfig> {
    let mut pinned = cfg.clone();
    if pinned.lr.is_none() {
        let (best, results) =
            trainer::grid_search(build, &ctx.train_split, &ctx.val_split, cfg, &ctx.dataset_hash)?;
        for r in &results {
            println!("grid lr {:>8.0e}: val t2v R@1 {:5.1}", r.lr, r.t2v_r1);
        }
        println!("selected lr {:e}", best);
        pinned.lr = Some(best);
    }
    Ok(pinned)
}

fn cmd_train(args: &CommonArgs, resume: bool) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        if let Some(t) = cfg.train.as_mut() {
            t.seed = seed;
        }
    }
    let out_dir = cfg.out_dir(args.out.as_deref())?;
    let ctx = open_dataset(&cfg)?;
    check_geometry(&cfg, &ctx)?;
    let spec = cfg.model()?.clone();
    let protocol = cfg.protocol()?;
    let prompts = cfg.resolved_prompts(&spec, &protocol);
    let train_cfg = cfg.train()?.clone();
    let log_path = out_dir.join("train_log.jsonl");

    fs::create_dir_all(&out_dir)?;
    let (mut model, resume_state, pinned_cfg, mut log_file) = if resume {
        let ck_path = out_dir.join("checkpoint_latest.vckpt");
        if !ck_path.exists() {
            bail!(CoreError::InvalidConfig(format!(
                "--resume needs {} to exist",
                ck_path.display()
            )));
        }
        let loaded = voplab_core::checkpoint::load(&ck_path)?;
        if loaded.model.spec != spec
            || loaded.model.prompts != prompts
            || loaded.model.protocol != protocol
        {
            bail!(CoreError::InvalidConfig(
                "checkpoint model/prompt/protocol disagree with the config".into()
            ));
        }
        if loaded.dataset_hash != ctx.dataset_hash {
            bail!(CoreError::InvalidConfig("checkpoint was trained on a different dataset".into()));
        }
        let mut pinned = loaded.train_config.clone();
        pinned.max_steps = train_cfg.max_steps;
        let file = fs::OpenOptions::new().append(true).open(&log_path)?;
        (loaded.model, Some(loaded.resume), pinned, file)
    } else {
        refuse_clobber(&log_path, args.force)?;
        let build = || Model::<f32>::build(spec.clone(), prompts.clone(), protocol, train_cfg.seed);
        let pinned = pin_lr(&train_cfg, &build, &ctx)?;
        let model = build()?;
        let file = fs::File::create(&log_path)?;
        (model, None, pinned, file)
    };

    let outcome = {
        let mut io = TrainIo { log: Some(&mut log_file), checkpoint_dir: Some(&out_dir) };
        train(
            &mut model,
            &ctx.train_split,
            &ctx.val_split,
            &pinned_cfg,
            &ctx.dataset_hash,
            resume_state,
            &mut io,
        )?
    };
    log_file.flush()?;

    let (t2v, v2t) = match outcome.final_val {
        Some(v) => v,
        None => trainer::validate_split(&model, &ctx.val_split, pinned_cfg.batch_size)?,
    };
    let csv = report::report_csv(
        protocol.kind.name(),
        model.params.trainable_count(),
        &t2v,
        &v2t,
    );
    fs::write(out_dir.join("report.csv"), &csv)?;
    cfg.write_resolved(&out_dir)?;
    write_sidecar(&out_dir, "train")?;
    println!("steps: {}", outcome.steps_done);
    print!("{}", csv);
    Ok(())
}

// ── ablate ───────────────────────────────────────────────────────────

fn depth_default(k: usize) -> Vec<(usize, usize)> {
    let half = k.div_ceil(2);
    let mut grid = vec![(1, 1), (k, k), (1, half), (half + 1, k), (1, k)];
    grid.dedup();
    grid
}

fn cmd_ablate(args: &CommonArgs, axis: Axis) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        if let Some(t) = cfg.train.as_mut() {
            t.seed = seed;
        }
    }
    let out_dir = cfg.out_dir(args.out.as_deref())?;
    let ctx = open_dataset(&cfg)?;
    check_geometry(&cfg, &ctx)?;
    let spec = cfg.model()?.clone();
    let protocol = cfg.protocol()?;
    let base_prompts = cfg.resolved_prompts(&spec, &protocol);
    let train_cfg = cfg.train()?.clone();
    let ablate_cfg = cfg.ablate.clone();

    // Axis values as (label, prompt-spec mutation).
    let mut points: Vec<(String, PromptSpec, String)> = Vec::new();
    match axis {
        Axis::Depth => {
            let grid = ablate_cfg
                .as_ref()
                .and_then(|a| a.depth_grid.clone())
                .unwrap_or_else(|| depth_default(spec.k));
            let mut ranges = grid;
            ranges.sort_by_key(|(lo, hi)| hi.saturating_sub(*lo));
            for (lo, hi) in ranges {
                let mut p = base_prompts.clone();
                p.depth_range = (lo, hi);
                points.push((format!("{}-{}", lo, hi), p, String::new()));
            }
        }
        Axis::Length => {
            let grid = ablate_cfg
                .as_ref()
                .and_then(|a| a.length_grid.clone())
                .unwrap_or_else(|| vec![1, 2, 4, 8]);
            for len in grid {
                let mut p = base_prompts.clone();
                p.p_t = len;
                p.p_v = len;
                p.video_len = p.video_len.min(len);
                points.push((len.to_string(), p, String::new()));
            }
        }
        Axis::VideoLen => {
            if !base_prompts.mode.uses_positional_table()
                && !base_prompts.mode.uses_context_generator()
            {
                bail!(CoreError::InvalidConfig(
                    "video_len axis needs a position- or context-specific protocol".into()
                ));
            }
            let grid = ablate_cfg
                .as_ref()
                .and_then(|a| a.video_len_grid.clone())
                .unwrap_or_else(|| {
                    let mut g: Vec<usize> =
                        [0, base_prompts.p_v / 4, base_prompts.p_v / 2, base_prompts.p_v]
                            .into_iter()
                            .collect();
                    g.dedup();
                    g
                });
            for vl in grid {
                let mut p = base_prompts.clone();
                p.video_len = vl;
                points.push((vl.to_string(), p, String::new()));
            }
        }
        Axis::KSplit => {
            if !base_prompts.mode.uses_function_split() {
                bail!(CoreError::InvalidConfig(
                    "k_split axis needs a function-split protocol".into()
                ));
            }
            let grid = ablate_cfg
                .as_ref()
                .and_then(|a| a.k_split_grid.clone())
                .unwrap_or_else(|| (0..=spec.k).collect());
            for ks in grid {
                let mut p = base_prompts.clone();
                p.k_s = ks;
                let note = if ks == 0 { "all-layers-joint-collapse-risk".to_string() } else { String::new() };
                points.push((ks.to_string(), p, note));
            }
        }
        Axis::Cmm => {
            if !base_prompts.mode.uses_context_generator() {
                bail!(CoreError::InvalidConfig(
                    "cmm axis needs a context-specific protocol".into()
                ));
            }
            let grid = ablate_cfg
                .as_ref()
                .and_then(|a| a.cmm_grid.clone())
                .unwrap_or_else(|| vec![CmmKind::Bilstm, CmmKind::Lstm, CmmKind::Transformer]);
            for kind in grid {
                let mut p = base_prompts.clone();
                p.cmm_kind = kind;
                let label = match kind {
                    CmmKind::Bilstm => "bilstm",
                    CmmKind::Lstm => "lstm",
                    CmmKind::Transformer => "transformer",
                };
                points.push((label.to_string(), p, String::new()));
            }
        }
    }
    if points.is_empty() {
        bail!(CoreError::InvalidConfig(format!("ablation grid for {} is empty", axis.name())));
    }

    fs::create_dir_all(&out_dir)?;
    let sweep_path = out_dir.join("sweep.csv");
    refuse_clobber(&sweep_path, args.force)?;

    let rows: Mutex<Vec<(usize, report::SweepRow)>> = Mutex::new(Vec::new());
    let run_point = |idx: usize, label: &str, prompts: &PromptSpec, note: &str| -> Result<()> {
        let point_dir = out_dir.join(format!("{}_{}", axis.name(), label.replace('-', "_")));
        fs::create_dir_all(&point_dir)?;
        let build =
            || Model::<f32>::build(spec.clone(), prompts.clone(), protocol, train_cfg.seed);
        let pinned = pin_lr(&train_cfg, &build, &ctx)?;
        let mut model = build()?;
        let log_path = point_dir.join("train_log.jsonl");
        let mut log_file = fs::File::create(&log_path)?;
        let outcome = {
            let mut io = TrainIo { log: Some(&mut log_file), checkpoint_dir: Some(&point_dir) };
            train(
                &mut model,
                &ctx.train_split,
                &ctx.val_split,
                &pinned,
                &ctx.dataset_hash,
                None,
                &mut io,
            )?
        };
        let (t2v, v2t) = outcome
            .final_val
            .ok_or_else(|| anyhow!("ablation point {} produced no validation", label))?;
        rows.lock().unwrap().push((
            idx,
            report::SweepRow {
                value: label.to_string(),
                trainable: model.params.trainable_count(),
                t2v,
                v2t,
                note: note.to_string(),
            },
        ));
        Ok(())
    };

    let workers = config::worker_threads();
    if workers <= 1 {
        for (idx, (label, prompts, note)) in points.iter().enumerate() {
            run_point(idx, label, prompts, note)?;
        }
    } else {
        std::thread::scope(|scope| -> Result<()> {
            let mut handles = Vec::new();
            for chunk in points
                .iter()
                .enumerate()
                .collect::<Vec<_>>()
                .chunks((points.len() + workers - 1) / workers)
            {
                let chunk: Vec<_> = chunk.to_vec();
                let run_point = &run_point;
                handles.push(scope.spawn(move || -> Result<()> {
                    for (idx, (label, prompts, note)) in chunk {
                        run_point(idx, label, prompts, note)?;
                    }
                    Ok(())
                }));
            }
            for h in handles {
                h.join().map_err(|_| anyhow!("ablation worker panicked"))??;
            }
            Ok(())
        })?;
    }

    let mut collected = rows.into_inner().unwrap();
    collected.sort_by_key(|(idx, _)| *idx);
    let rows: Vec<report::SweepRow> = collected.into_iter().map(|(_, r)| r).collect();
    let csv = report::sweep_csv(axis.name(), &rows);
    fs::write(&sweep_path, &csv)?;
    cfg.write_resolved(&out_dir)?;
    write_sidecar(&out_dir, "ablate")?;
    print!("{}", csv);
    Ok(())
}
