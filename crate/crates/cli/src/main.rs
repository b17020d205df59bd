//! `lata`: checkpoint merging from the command line.
//!
//! Subcommands: `analyze` (similarity report), `merge` / `forget` (recipe
//! execution), `fixture` (synthetic checkpoints), `inspect` (dump a file's
//! schema). All configuration comes from a single JSON document; `--seed`
//! and `--output` override the corresponding config fields and `--threads`
//! sizes the worker pool without ever changing results.

mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{load_config, AnalyzeConfig, FixtureConfig, RecipeConfig};
use lata_core::{
    generate_fixture, inspect_file, read_checkpoint, run_recipe_to_files, write_fixture,
    AnalyzeParams, Error, FsResolver, LayerPattern, MergeMode,
};

#[derive(Parser)]
#[command(name = "lata", version, about = "Layer-aware task arithmetic over model checkpoints")]
struct Cli {
    /// Worker threads (0 = auto). Never affects numeric results.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration document.
    #[arg(long)]
    config: PathBuf,

    /// Override the config's output path.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct SeededConfigArgs {
    #[command(flatten)]
    common: ConfigArgs,

    /// Override the config's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Export the per-layer similarity report (CSV and JSON).
    Analyze(ConfigArgs),
    /// Execute a task-learning (additive) recipe.
    Merge(SeededConfigArgs),
    /// Execute a task-forgetting (subtractive) recipe.
    Forget(SeededConfigArgs),
    /// Generate a planted-structure checkpoint quadruple.
    Fixture(SeededConfigArgs),
    /// Dump a checkpoint file's schema as JSON.
    Inspect {
        /// Checkpoint container file.
        path: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let threads = cli.threads;
    let run = || match cli.command {
        Command::Analyze(args) => cmd_analyze(args),
        Command::Merge(args) => cmd_recipe(args, MergeMode::Learn),
        Command::Forget(args) => cmd_recipe(args, MergeMode::Forget),
        Command::Fixture(args) => cmd_fixture(args),
        Command::Inspect { path } => cmd_inspect(path),
    };
    let result = if threads == 0 {
        run()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
            Ok(pool) => pool.install(run),
            Err(e) => Err(Error::InvalidParameter {
                name: "threads".to_string(),
                reason: e.to_string(),
            }),
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let payload = serde_json::json!({
                "error": { "kind": err.kind(), "message": err.to_string() }
            });
            eprintln!("{payload}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_analyze(args: ConfigArgs) -> Result<(), Error> {
    let (cfg, _raw): (AnalyzeConfig, _) = load_config(&args.config)?;
    let base = read_checkpoint(&cfg.base)?;
    let pretrained = read_checkpoint(&cfg.pretrained)?;
    let finetuned = read_checkpoint(&cfg.finetuned)?;
    let params = AnalyzeParams {
        pattern: match &cfg.layer_pattern {
            Some(p) => LayerPattern::new(p)?,
            None => LayerPattern::default(),
        },
        sigma: cfg.sigma,
        residual_weight: cfg.residual_weight,
        degenerate: cfg.degenerate,
    };
    let (_profile, report) = lata_core::analyze_checkpoints(&base, &pretrained, &finetuned, &params)?;
    let stem = args
        .output
        .or_else(|| cfg.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("similarity"));
    let (csv_path, json_path) = report.write_files(&stem)?;
    println!(
        "{}",
        serde_json::json!({ "csv": csv_path, "json": json_path })
    );
    Ok(())
}

fn cmd_recipe(args: SeededConfigArgs, mode: MergeMode) -> Result<(), Error> {
    let (cfg, raw): (RecipeConfig, _) = load_config(&args.common.config)?;
    let recipe = cfg.into_recipe(mode, args.seed, args.common.output)?;
    let manifest = run_recipe_to_files(&recipe, &FsResolver, Some(raw))?;
    println!(
        "{}",
        serde_json::json!({
            "output": recipe.output,
            "manifest": lata_core::merge::manifest_path_for(&recipe.output),
            "output_digest": manifest.output_digest,
        })
    );
    Ok(())
}

fn cmd_fixture(args: SeededConfigArgs) -> Result<(), Error> {
    let (cfg, _raw): (FixtureConfig, _) = load_config(&args.common.config)?;
    let mut spec = cfg.spec;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let dir = args
        .common
        .output
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."));
    let set = generate_fixture(&spec)?;
    let paths = write_fixture(&set, &dir)?;
    println!("{}", serde_json::json!({ "files": paths }));
    Ok(())
}

fn cmd_inspect(path: PathBuf) -> Result<(), Error> {
    let summary = inspect_file(&path)?;
    let payload = serde_json::json!({
        "path": path,
        "metadata": summary.metadata,
        "tensors": summary.tensors,
    });
    println!("{}", serde_json::to_string_pretty(&payload).expect("serializes"));
    Ok(())
}
