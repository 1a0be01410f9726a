//! Operator entry point: corpus generation, two-stage training, generation,
//! evaluation, ablation, and report rendering.
//!
//! Exit codes: 0 success, 2 config, 3 data, 4 numeric, 5 missing/corrupt
//! artifact.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{derive_seed, RunConfig};
use crate::data::{generate_synthetic_corpus, Split};
use crate::metrics::{
    evaluate_pairs, load_predictions, pairs_from_predictions, reference_map, render_table,
    scale_report, MetricSet,
};
use crate::training::{
    default_grid, find_cell, load_checkpoint, run_ablation, AblationReport, Pipeline, StagePlan,
};
use crate::{Error, Result};

pub const OUT_ENV: &str = "MSMEDCAP_OUT";

#[derive(Parser, Debug)]
#[command(
    name = "msmedcap",
    about = "Dual-encoder / dual-Q-Former captioning with mixed-semantic two-stage training"
)]
pub struct Cli {
    /// Path to a run config JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output root; overrides the config and the MSMEDCAP_OUT variable.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic corpus and write both manifests.
    GenData,
    /// Stage 1: pre-train branch Q-Formers and the toy frozen LM.
    Pretrain,
    /// Stage 2: fine-tune Q-Formers and projections against the frozen LM.
    Finetune,
    /// Decode captions for the medical test split.
    Generate,
    /// Score predictions against the manifest references.
    Evaluate {
        /// Predictions JSONL; defaults to the generate artifact.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Run the benchmark grid and emit the scaled score table.
    Ablate {
        /// Comma-separated cell names; defaults to the full grid.
        #[arg(long)]
        grid: Option<String>,
        /// Comma-separated seeds; defaults to the master seed.
        #[arg(long)]
        seeds: Option<String>,
    },
    /// Re-render a raw ablation results JSON as the scaled table.
    Report {
        /// Raw results JSON; defaults to the ablate artifact.
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_root(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    if let Some(out) = &cli.out {
        return out.clone();
    }
    if let Some(out) = &cfg.out_dir {
        return PathBuf::from(out);
    }
    if let Ok(out) = std::env::var(OUT_ENV) {
        if !out.is_empty() {
            return PathBuf::from(out);
        }
    }
    PathBuf::from("runs")
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn require_artifact(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{what} at {}",
            path.display()
        )));
    }
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    cfg.validate()?;
    let root = out_root(cli, &cfg);
    match &cli.command {
        Command::GenData => cmd_gen_data(&cfg, &root),
        Command::Pretrain => cmd_pretrain(&cfg, &root),
        Command::Finetune => cmd_finetune(&cfg, &root),
        Command::Generate => cmd_generate(&cfg, &root),
        Command::Evaluate { predictions } => cmd_evaluate(&cfg, &root, predictions.as_deref()),
        Command::Ablate { grid, seeds } => cmd_ablate(&cfg, &root, grid.as_deref(), seeds.as_deref()),
        Command::Report { input } => cmd_report(&root, input.as_deref()),
    }
}

fn data_dir(cfg: &RunConfig, root: &Path) -> PathBuf {
    if Path::new(&cfg.data.dir).is_absolute() {
        PathBuf::from(&cfg.data.dir)
    } else {
        root.join(&cfg.data.dir)
    }
}

fn cmd_gen_data(cfg: &RunConfig, root: &Path) -> Result<()> {
    let dir = data_dir(cfg, root);
    ensure_dir(&dir)?;
    let seed = derive_seed(cfg.seed, "gen-data");
    let (general, medical) = generate_synthetic_corpus(&cfg.generator, seed, &dir)?;
    cfg.snapshot(&dir.join("config.json"))?;
    let count = |samples: &[crate::data::CaptionSample], split: Split| {
        samples.iter().filter(|s| s.split == split).count()
    };
    println!(
        "wrote {} general ({} train / {} test) and {} medical ({} train / {} test) samples to {}",
        general.len(),
        count(&general, Split::Train),
        count(&general, Split::Test),
        medical.len(),
        count(&medical, Split::Train),
        count(&medical, Split::Test),
        dir.display()
    );
    if general.is_empty() && medical.is_empty() {
        eprintln!("warning: generated corpus is empty");
    }
    Ok(())
}

fn cmd_pretrain(cfg: &RunConfig, root: &Path) -> Result<()> {
    let pipeline = Pipeline::new(cfg.clone(), root)?;
    let out = root.join("pretrain");
    ensure_dir(&out)?;
    let lm = pipeline.pretrain_lm(derive_seed(cfg.seed, "lm"))?;
    pipeline.save_lm(&lm, &out.join("lm"))?;
    let plan = StagePlan::pretrain_default(cfg, cfg.seed);
    let outcome = pipeline.run_pretrain(&plan, &out)?;
    cfg.snapshot(&out.join("config.json"))?;
    for (branch, means) in &outcome.epoch_means {
        let fmt: Vec<String> = means.iter().map(|m| format!("{m:.4}")).collect();
        println!("pretrain {branch}: epoch mean total loss {}", fmt.join(" -> "));
    }
    println!("checkpoint at {}", outcome.ckpt_dir.display());
    Ok(())
}

fn cmd_finetune(cfg: &RunConfig, root: &Path) -> Result<()> {
    let pipeline = Pipeline::new(cfg.clone(), root)?;
    let pretrain_ckpt = root.join("pretrain").join("ckpt");
    require_artifact(&pretrain_ckpt, "pretrain checkpoint")?;
    let lm_dir = root.join("pretrain").join("lm");
    require_artifact(&lm_dir, "frozen LM checkpoint")?;
    let lm = pipeline.load_lm(&lm_dir)?;
    let out = root.join("finetune");
    ensure_dir(&out)?;
    let plan = StagePlan::finetune_default(cfg, cfg.seed);
    let ckpt = pipeline.run_finetune(&plan, &pretrain_ckpt, &lm, &out)?;
    cfg.snapshot(&out.join("config.json"))?;
    println!("checkpoint at {}", ckpt.display());
    Ok(())
}

fn cmd_generate(cfg: &RunConfig, root: &Path) -> Result<()> {
    let pipeline = Pipeline::new(cfg.clone(), root)?;
    let finetune_ckpt = root.join("finetune").join("ckpt");
    require_artifact(&finetune_ckpt, "finetune checkpoint")?;
    let lm_dir = root.join("pretrain").join("lm");
    require_artifact(&lm_dir, "frozen LM checkpoint")?;
    let lm = pipeline.load_lm(&lm_dir)?;
    let ckpt = load_checkpoint(&finetune_ckpt)?;
    let branches = pipeline.load_branches(&ckpt)?;
    let out = root.join("generate");
    ensure_dir(&out)?;
    let predictions =
        pipeline.generate_predictions(&branches, &lm, &out.join("predictions.jsonl"))?;
    cfg.snapshot(&out.join("config.json"))?;
    println!(
        "wrote {} predictions to {}",
        predictions.len(),
        out.join("predictions.jsonl").display()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, root: &Path, predictions: Option<&Path>) -> Result<()> {
    let default_preds = root.join("generate").join("predictions.jsonl");
    let preds_path = predictions.unwrap_or(&default_preds);
    require_artifact(preds_path, "predictions")?;
    let manifest_path = data_dir(cfg, root).join(&cfg.data.medical_manifest);
    require_artifact(&manifest_path, "medical manifest")?;
    let manifest = crate::data::load_manifest(&manifest_path)?;
    let refs = reference_map(&manifest.split(Split::Test), None);
    let predictions = load_predictions(preds_path)?;
    let pairs = pairs_from_predictions(&predictions, &refs)?;
    let metrics = evaluate_pairs(&pairs, cfg.eval.sentence_level_bleu)?;
    let report = scale_report(&metrics);

    let out = root.join("evaluate");
    ensure_dir(&out)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(out.join("report.json"), json + "\n")
        .map_err(|e| Error::io(out.join("report.json"), e))?;
    let table = render_table(&[("model".to_string(), Some(metrics))]);
    fs::write(out.join("report.txt"), &table).map_err(|e| Error::io(out.join("report.txt"), e))?;
    cfg.snapshot(&out.join("config.json"))?;
    print!("{table}");
    println!(
        "BLEU-1 scaled {:.1}, CIDEr scaled {:.1}, ROUGE_L scaled {:.1}",
        report.scaled.bleu1, report.scaled.cider, report.scaled.rouge_l
    );
    Ok(())
}

fn parse_seeds(cfg: &RunConfig, seeds: Option<&str>) -> Result<Vec<u64>> {
    match seeds {
        None => Ok(vec![cfg.seed]),
        Some(text) => {
            let mut out = Vec::new();
            let mut seen = BTreeSet::new();
            for part in text.split(',') {
                let seed: u64 = part
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed \"{part}\"")))?;
                if seen.insert(seed) {
                    out.push(seed);
                }
            }
            if out.is_empty() {
                return Err(Error::Config("no seeds given".into()));
            }
            Ok(out)
        }
    }
}

fn cmd_ablate(cfg: &RunConfig, root: &Path, grid: Option<&str>, seeds: Option<&str>) -> Result<()> {
    let pipeline = Pipeline::new(cfg.clone(), root)?;
    let full = default_grid();
    let grid = match grid {
        None => full,
        Some(names) => {
            let mut cells = Vec::new();
            for name in names.split(',') {
                let cell = find_cell(&full, name.trim()).ok_or_else(|| {
                    Error::Config(format!("unknown ablation cell \"{}\"", name.trim()))
                })?;
                cells.push(cell);
            }
            cells
        }
    };
    let seeds = parse_seeds(cfg, seeds)?;
    let out = root.join("ablate");
    ensure_dir(&out)?;
    let report = run_ablation(&pipeline, &grid, &seeds, &out)?;
    cfg.snapshot(&out.join("config.json"))?;
    print!("{}", render_table(&report.table_rows()));
    for cell in &report.cells {
        if let Some(err) = &cell.error {
            eprintln!("cell \"{}\" failed: {err}", cell.name);
        }
    }
    println!("raw results at {}", out.join("results.json").display());
    Ok(())
}

fn cmd_report(root: &Path, input: Option<&Path>) -> Result<()> {
    let default_input = root.join("ablate").join("results.json");
    let path = input.unwrap_or(&default_input);
    require_artifact(path, "ablation results")?;
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: AblationReport =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let rows: Vec<(String, Option<MetricSet>)> = report.table_rows();
    let table = render_table(&rows);
    let out = root.join("report");
    ensure_dir(&out)?;
    fs::write(out.join("report.txt"), &table).map_err(|e| Error::io(out.join("report.txt"), e))?;
    print!("{table}");
    Ok(())
}
