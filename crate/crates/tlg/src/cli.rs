//! Command-line entry point: train, eval, ablate, inspect, validate-prompts.
//!
//! Every command is reproducible from its run directory's manifest alone.
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ablation::{run_ablation, standard_grid, GridChoice};
use crate::config::Config;
use crate::error::{Result, TlgError};
use crate::eval::evaluate;
use crate::hc::PromptBank;
use crate::model::TlgModel;
use crate::runs::RunDir;
use crate::trainer::{dataset_from_config, folds_from_config, train};
use crate::viz::inspect_episode;

fn config_key_help() -> String {
    format!(
        "CONFIG KEYS (TOML; every key with its default, overridable via --set):\n\n{}",
        Config::default().to_toml()
    )
}

#[derive(Parser)]
#[command(
    name = "tlg",
    version,
    about = "Heterogeneous few-shot segmentation: train, evaluate, ablate, inspect",
    after_help = config_key_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Path to a TOML config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override `section.key=value`; repeatable, last writer wins.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        match &self.config {
            Some(path) => Config::from_path(path, &self.sets),
            None => Config::from_toml("", &self.sets),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on one fold's base categories and retain the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its fold's held-out categories.
    Eval(EvalArgs),
    /// Sweep module toggles, layer selections, or loss weights into a table.
    Ablate(AblateArgs),
    /// Render taps, attention, transport plan, and masks for one episode.
    Inspect(InspectArgs),
    /// Validate a prompt bank against the configured dataset's categories.
    ValidatePrompts(ValidatePromptsArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Checkpoint produced by `tlg train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Shot settings to evaluate, e.g. `--shots 1,5`.
    #[arg(long, value_delimiter = ',')]
    shots: Vec<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Row set: modules, layers, loss, or all.
    #[arg(long, default_value = "modules")]
    grid: String,
    /// Seeds averaged per grid point.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Folds evaluated per grid point; defaults to every fold.
    #[arg(long, value_delimiter = ',')]
    folds: Vec<usize>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Episode id of the form f<fold>-s<seed>-i<index>, e.g. f0-s1234-i7.
    #[arg(long)]
    episode: String,
    /// Backbone taps to render; defaults to the configured selections.
    #[arg(long, value_delimiter = ',')]
    taps: Vec<usize>,
}

#[derive(Args)]
struct ValidatePromptsArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Bank CSV path; defaults to the bank named by the config.
    #[arg(long)]
    bank: Option<PathBuf>,
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Inspect(args) => cmd_inspect(args),
        Command::ValidatePrompts(args) => cmd_validate_prompts(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let dataset = dataset_from_config(&cfg)?;
    let splits = folds_from_config(&cfg, &dataset)?;
    let split = splits
        .get(cfg.train.fold)
        .ok_or_else(|| TlgError::Config(format!("train.fold {} out of range", cfg.train.fold)))?;
    let mut run = RunDir::create(
        "train",
        args.config.config.as_deref(),
        &cfg,
        &args.config.sets,
        cfg.train.seed,
    )?;
    let mut model = TlgModel::new(&cfg, &dataset.category_names)?;
    println!(
        "training fold {} | {} learnable parameters ({} frozen backbone) | run {}",
        split.fold_id,
        model.count_learnable_parameters(),
        model.frozen_parameter_count(),
        run.path.display()
    );
    let outcome = train(&mut model, dataset, split, &run.path)?;
    run.record_output(&outcome.checkpoint_path);
    run.record_output(&outcome.metrics_path);
    run.finish()?;
    println!(
        "done: best val mIoU {:.4} at epoch {} | final train loss {:.4}",
        outcome.best_val_miou,
        outcome.best_epoch,
        outcome.final_train_loss()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let dataset = dataset_from_config(&cfg)?;
    let splits = folds_from_config(&cfg, &dataset)?;
    let split = &splits[cfg.train.fold];
    let mut model = TlgModel::new(&cfg, &dataset.category_names)?;
    model.load_checkpoint(&args.checkpoint)?;
    let shots = if args.shots.is_empty() { vec![cfg.eval.shot] } else { args.shots.clone() };
    let mut run = RunDir::create(
        "eval",
        args.config.config.as_deref(),
        &cfg,
        &args.config.sets,
        cfg.eval.seed,
    )?;
    for shot in shots {
        let report = evaluate(&model, dataset.clone(), split, shot, cfg.eval.episodes, cfg.eval.seed)?;
        let json = run.path.join(format!("report-{shot}shot.json"));
        let csvp = run.path.join(format!("report-{shot}shot.csv"));
        report.write_json(&json)?;
        report.write_csv(&csvp)?;
        run.record_output(&json);
        run.record_output(&csvp);
        println!(
            "{shot}-shot fold {} | {} learnable parameters | mIoU {:.4} over {} episodes ({:.1}s)",
            split.fold_id,
            report.learnable_parameters,
            report.mean_miou,
            report.episode_count,
            report.wall_clock_seconds
        );
    }
    run.finish()?;
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let grid: GridChoice = args.grid.parse()?;
    let dataset = dataset_from_config(&cfg)?;
    let n_folds = folds_from_config(&cfg, &dataset)?.len();
    let folds: Vec<usize> =
        if args.folds.is_empty() { (0..n_folds).collect() } else { args.folds.clone() };
    let seeds = if args.seeds.is_empty() { vec![cfg.train.seed] } else { args.seeds.clone() };
    let mut run = RunDir::create(
        "ablate",
        args.config.config.as_deref(),
        &cfg,
        &args.config.sets,
        cfg.train.seed,
    )?;
    let points = standard_grid(grid);
    let outcomes = run_ablation(&cfg, &points, &folds, &seeds, &run.path)?;
    run.record_output(&run.path.join("ablation.csv"));
    run.finish()?;
    println!("{:<24} {:>12} {:>10}", "point", "params", "mean mIoU");
    for o in &outcomes {
        match &o.skipped {
            Some(reason) => println!("{:<24} skipped: {reason}", o.name),
            None => println!("{:<24} {:>12} {:>10.4}", o.name, o.learnable_parameters, o.mean_miou),
        }
    }
    Ok(())
}

/// Parse `f<fold>-s<seed>-i<index>`.
fn parse_episode_id(id: &str) -> Result<(usize, u64, u64)> {
    let err = || {
        TlgError::Config(format!(
            "episode id '{id}' malformed; expected f<fold>-s<seed>-i<index>, e.g. f0-s1234-i7"
        ))
    };
    let parts: Vec<&str> = id.split('-').collect();
    if parts.len() != 3 {
        return Err(err());
    }
    let fold = parts[0].strip_prefix('f').ok_or_else(err)?.parse().map_err(|_| err())?;
    let seed = parts[1].strip_prefix('s').ok_or_else(err)?.parse().map_err(|_| err())?;
    let index = parts[2].strip_prefix('i').ok_or_else(err)?.parse().map_err(|_| err())?;
    Ok((fold, seed, index))
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let (fold, seed, index) = parse_episode_id(&args.episode)?;
    let dataset = dataset_from_config(&cfg)?;
    let splits = folds_from_config(&cfg, &dataset)?;
    let split = splits
        .get(fold)
        .ok_or_else(|| TlgError::Config(format!("episode fold {fold} out of range 0..{}", splits.len())))?;
    let mut model = TlgModel::new(&cfg, &dataset.category_names)?;
    model.load_checkpoint(&args.checkpoint)?;
    let sampler = crate::data::EpisodeSampler::new(
        dataset.clone(),
        &split.test_categories,
        cfg.eval.shot,
        fold,
    )?;
    let episode = sampler.sample(seed, index);
    let taps: Vec<usize> = if args.taps.is_empty() {
        let mut t = cfg.layers.support.to_vec();
        t.extend_from_slice(&cfg.layers.query);
        t
    } else {
        args.taps.clone()
    };
    let mut run = RunDir::create(
        "inspect",
        args.config.config.as_deref(),
        &cfg,
        &args.config.sets,
        seed,
    )?;
    let written = inspect_episode(&model, &episode, &taps, &run.path)?;
    for p in &written {
        run.record_output(p);
        println!("{}", p.display());
    }
    run.finish()?;
    Ok(())
}

fn cmd_validate_prompts(args: ValidatePromptsArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let dataset = dataset_from_config(&cfg)?;
    let bank = match &args.bank {
        Some(path) => PromptBank::from_path(path)?,
        None if cfg.hc.prompt_bank.is_empty() => PromptBank::builtin("synthetic")?,
        None => PromptBank::from_path(Path::new(&cfg.hc.prompt_bank))?,
    };
    bank.validate_against(&dataset.category_names)?;
    println!(
        "prompt bank ok: {} records cover all {} dataset categories",
        bank.len(),
        dataset.n_categories()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn episode_ids_parse_and_reject_garbage() {
        assert_eq!(parse_episode_id("f0-s1234-i7").unwrap(), (0, 1234, 7));
        assert!(parse_episode_id("f0-s1234").is_err());
        assert!(parse_episode_id("fx-s1-i2").is_err());
        assert!(parse_episode_id("0-1234-7").is_err());
    }

    #[test]
    fn help_text_lists_every_config_key() {
        let help = config_key_help();
        for key in [
            "image_size", "lambda", "unrolled_iters", "c_ha", "alpha", "beta", "d_text",
            "learning_rate", "weight_decay", "episodes_per_epoch", "cost_threshold",
        ] {
            assert!(help.contains(key), "--help must document config key {key}");
        }
    }
}
