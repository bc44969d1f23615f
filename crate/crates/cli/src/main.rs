//! `afford`: data generation, training, evaluation, prediction and
//! ablation sweeps over tool-action conditioned affordance heatmaps.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/validation error,
//! 3 numeric failure. Non-zero exits write one machine-parsable JSON line
//! to stderr.

use afford_core::conditioning::{render_prompt, PromptTriplet, Vocabulary};
use afford_core::data_model::{validate_splits, Manifest, Split};
use afford_core::encoder::build_clip_window;
use afford_core::error::CoreError;
use afford_core::export::{save_heatmap_png, save_overlay_png, save_raw_grid};
use afford_core::framestore::{ClipFrames, FrameStore};
use afford_core::metrics::{evaluate_split, EvalOptions};
use afford_core::synthetic::{generate_dataset, DatasetConfig, SceneConfig};
use afford_core::trainer::{
    load_checkpoint, train, Ablation, TrainConfig,
};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "afford",
    version,
    about = "Tool-action conditioned tissue affordance heatmaps: synthetic data, training, metrics"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic clip dataset (frames + manifest + vocabulary).
    GenData(GenDataArgs),
    /// Train a model on a manifest's train split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a split and write a metrics report.
    Eval(EvalArgs),
    /// Predict a heatmap for one clip frame and prompt triplet.
    Predict(PredictArgs),
    /// Train + evaluate one ablation preset and append to a comparison table.
    Ablate(AblateArgs),
    /// Audit a manifest's case-level split hygiene.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (clips/, manifest.jsonl, vocabulary.tsv).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    cases: usize,
    #[arg(long, default_value_t = 2)]
    clips_per_case: usize,
    /// Split ratios train,val,test summing to 1.
    #[arg(long, default_value = "0.7,0.1,0.2")]
    ratios: String,
    #[arg(long, default_value_t = 0.5)]
    two_tool_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 64)]
    frame_size: usize,
    #[arg(long, default_value_t = 48)]
    clip_len: usize,
    #[arg(long, default_value_t = 32)]
    contact_frame: usize,
    /// Restrict to tool:action pairs, e.g. "hook:dissect,grasper:dissect".
    #[arg(long)]
    pairs: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for checkpoints and the step log.
    #[arg(long)]
    out: PathBuf,
    /// Flat key=value config file; flags below override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from a checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Override any config key, repeatable: --set epochs=10 --set seed=3
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report path (TSV); defaults to report_<split>.tsv next to the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    tau: f64,
    /// Keep all threshold components in the boundary metrics.
    #[arg(long, default_value_t = false)]
    all_components: bool,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// AFVC clip file.
    #[arg(long)]
    clip: PathBuf,
    #[arg(long)]
    surgery: String,
    #[arg(long)]
    tool: String,
    #[arg(long)]
    action: String,
    /// Target frame index.
    #[arg(long)]
    frame: usize,
    /// Output prefix: writes <prefix>.bin, <prefix>.png, <prefix>_overlay.png.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Preset: none, no_language, no_tool, no_action, no_history,
    /// no_augment, xattn_decoder, conv_encoder.
    #[arg(long)]
    preset: String,
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory; results append to <out>/ablations.tsv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    manifest: PathBuf,
}

fn exit_code_for(err: &CoreError) -> u8 {
    match err {
        CoreError::Numeric(_) => 3,
        _ => 2,
    }
}

fn kind_for(err: &CoreError) -> &'static str {
    match err {
        CoreError::Parse { .. } => "parse",
        CoreError::Validation(_) => "validation",
        CoreError::Config(_) => "config",
        CoreError::Numeric(_) => "numeric",
        CoreError::Format { .. } => "format",
        CoreError::Io(_) => "io",
    }
}

fn fail(err: CoreError) -> ExitCode {
    let line = serde_json::json!({
        "error": { "kind": kind_for(&err), "message": err.to_string() }
    });
    eprintln!("{line}");
    ExitCode::from(exit_code_for(&err))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap renders its own usage text; keep exit code 1 for usage
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Predict(args) => cmd_predict(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Validate(args) => cmd_validate(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => fail(e),
    }
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64), CoreError> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(CoreError::config(format!(
            "ratios need three comma-separated numbers, got `{s}`"
        )));
    }
    let p = |x: &str| -> Result<f64, CoreError> {
        x.trim()
            .parse()
            .map_err(|e| CoreError::config(format!("bad ratio `{x}`: {e}")))
    };
    Ok((p(parts[0])?, p(parts[1])?, p(parts[2])?))
}

fn parse_pairs(s: &str) -> Result<Vec<(String, String)>, CoreError> {
    s.split(',')
        .map(|part| {
            part.split_once(':')
                .map(|(t, a)| (t.trim().to_string(), a.trim().to_string()))
                .ok_or_else(|| {
                    CoreError::config(format!("pair `{part}` must look like tool:action"))
                })
        })
        .collect()
}

fn cmd_gen_data(args: GenDataArgs) -> Result<ExitCode, CoreError> {
    let cfg = DatasetConfig {
        n_cases: args.cases,
        clips_per_case: args.clips_per_case,
        ratios: parse_ratios(&args.ratios)?,
        two_tool_fraction: args.two_tool_fraction,
        pair_filter: args.pairs.as_deref().map(parse_pairs).transpose()?,
        scene: SceneConfig {
            frame_h: args.frame_size,
            frame_w: args.frame_size,
            clip_len: args.clip_len,
            contact_frame: args.contact_frame,
            ..SceneConfig::default()
        },
        seed: args.seed,
    };
    let vocab = Vocabulary::six_pairs();
    let (manifest, manifest_path) = generate_dataset(&cfg, &vocab, &args.out)?;
    let report = validate_splits(&manifest);
    println!(
        "generated {} clips across {} cases -> {}",
        manifest.len(),
        report.cases.len(),
        manifest_path.display()
    );
    for (split, count) in &report.counts {
        println!("  {split}: {count} clips");
    }
    Ok(ExitCode::SUCCESS)
}

fn load_train_config(
    config: Option<&Path>,
    sets: &[String],
) -> Result<TrainConfig, CoreError> {
    let mut cfg = match config {
        Some(path) => TrainConfig::load_kv(path)?,
        None => TrainConfig::default(),
    };
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| {
            CoreError::config(format!("--set expects KEY=VALUE, got `{s}`"))
        })?;
        cfg.set_kv(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, CoreError> {
    let manifest = Manifest::load(&args.manifest)?;
    let store = FrameStore::new(args.manifest.parent().unwrap_or(Path::new(".")));
    let cfg = load_train_config(args.config.as_deref(), &args.sets)?;
    let resume = args.resume.as_deref().map(load_checkpoint).transpose()?;
    let outcome = train(&manifest, &store, &cfg, Some(&args.out), resume)?;
    std::fs::write(args.out.join("train.cfg"), cfg.to_kv())?;
    println!(
        "trained {} steps ({} trainable parameters)",
        outcome.step_records.len(),
        outcome.trainable_parameters
    );
    if let Some((epoch, agg)) = outcome.val_history.last() {
        println!(
            "val @ epoch {epoch}: dice={:.4} pck@0.05={:.4} pck@0.1={:.4} hd={:.2} assd={:.2}",
            agg.dice, agg.pck005, agg.pck01, agg.hd_px, agg.assd_px
        );
    }
    if let Some(p) = &outcome.last_checkpoint {
        println!("last checkpoint: {}", p.display());
    }
    if let Some(p) = &outcome.best_checkpoint {
        println!("best checkpoint: {}", p.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, CoreError> {
    let split: Split = args.split.parse()?;
    let manifest = Manifest::load(&args.manifest)?;
    let store = FrameStore::new(args.manifest.parent().unwrap_or(Path::new(".")));
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let opts = EvalOptions {
        tau: args.tau,
        all_components: args.all_components,
    };
    let report = evaluate_split(&ckpt.model, &manifest, split, &store, &opts)?;
    let out = args.out.unwrap_or_else(|| {
        args.checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("report_{split}.tsv"))
    });
    report.save(&out)?;
    print!("{}", report.table(&format!("{split}")));
    println!(
        "rows={} skipped_boundary={} degenerate_targets={} secondary_activations={} -> {}",
        report.aggregate.rows,
        report.skipped_boundary,
        report.degenerate_targets,
        report.secondary_activations,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_predict(args: PredictArgs) -> Result<ExitCode, CoreError> {
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let clip = ClipFrames::load(&args.clip)?;
    let triplet = PromptTriplet::new(args.surgery, args.tool, args.action);
    println!("{}", render_prompt(&triplet)?);
    let window = build_clip_window::<f32>(
        &clip,
        args.frame,
        ckpt.model.cfg.window_n,
        ckpt.model.cfg.stride,
    )?;
    let heatmap = ckpt.model.predict(&window, &triplet)?;
    let raw_path = args.out_prefix.with_extension("bin");
    save_raw_grid(&heatmap, &raw_path)?;
    let heatmap64 = heatmap.mapv(|v| v as f64);
    let png_path = args.out_prefix.with_extension("png");
    save_heatmap_png(&heatmap64, &png_path)?;
    let frame = clip.data.index_axis(ndarray::Axis(0), args.frame);
    let overlay_path = {
        let mut name = args
            .out_prefix
            .file_name()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_else(|| "prediction".to_string());
        name.push_str("_overlay.png");
        args.out_prefix.with_file_name(name)
    };
    save_overlay_png(&frame, &heatmap64, &overlay_path)?;
    println!(
        "wrote {}, {}, {}",
        raw_path.display(),
        png_path.display(),
        overlay_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_ablate(args: AblateArgs) -> Result<ExitCode, CoreError> {
    let preset: Ablation = args.preset.parse()?;
    let manifest = Manifest::load(&args.manifest)?;
    let store = FrameStore::new(args.manifest.parent().unwrap_or(Path::new(".")));
    let mut cfg = load_train_config(args.config.as_deref(), &args.sets)?;
    cfg.ablation = preset;
    let run_dir = args.out.join(format!("ablate_{preset}"));
    let outcome = train(&manifest, &store, &cfg, Some(&run_dir), None)?;
    std::fs::write(run_dir.join("train.cfg"), cfg.to_kv())?;
    let report = evaluate_split(
        &outcome.model,
        &manifest,
        Split::Test,
        &store,
        &EvalOptions::default(),
    )?;
    report.save(run_dir.join("report_test.tsv"))?;

    let table = args.out.join("ablations.tsv");
    let header = "preset\tDICE\tPCK@0.05\tPCK@0.1\tHD(px)\tASSD(px)\ttrainable_params\n";
    let mut body = if table.exists() {
        std::fs::read_to_string(&table)?
    } else {
        header.to_string()
    };
    let a = &report.aggregate;
    body.push_str(&format!(
        "{preset}\t{:.4}\t{:.4}\t{:.4}\t{:.3}\t{:.3}\t{}\n",
        a.dice, a.pck005, a.pck01, a.hd_px, a.assd_px, outcome.trainable_parameters
    ));
    std::fs::write(&table, &body)?;
    print!("{}", report.table(&format!("{preset}")));
    println!("comparison table: {}", table.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(args: ValidateArgs) -> Result<ExitCode, CoreError> {
    let manifest = Manifest::load(&args.manifest)?;
    let report = validate_splits(&manifest);
    for (split, count) in &report.counts {
        println!("{split}: {count} clips");
    }
    println!("cases: {}", report.cases.len());
    if report.leakage {
        return Err(CoreError::validation(format!(
            "case-level split leakage in cases: {}",
            report.leaking_cases.join(", ")
        )));
    }
    println!("leakage: none");
    Ok(ExitCode::SUCCESS)
}
