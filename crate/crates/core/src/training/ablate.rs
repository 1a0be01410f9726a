//! Ablation grid: the seven benchmark rows, each a (model, clip-branch mix,
//! sam-branch mix) cell run end to end per seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stages::{FinetunePlan, OptimizerSpec, Pipeline, PretrainPlan, StagePlan};
use crate::config::derive_seed;
use crate::lm::FrozenLM;
use crate::metrics::{evaluate_pairs, pairs_from_predictions, reference_map, MetricSet};
use crate::{Error, Result};

/// Pre-training mix for one branch: general datasets only, or the
/// general+medical combination (proportional to dataset sizes).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixKind {
    G,
    GM,
}

impl MixKind {
    pub fn label(self) -> &'static str {
        match self {
            MixKind::G => "G",
            MixKind::GM => "G+M",
        }
    }

    fn weights(self) -> BTreeMap<String, f64> {
        match self {
            MixKind::G => [("general".to_string(), 1.0)].into(),
            // Empty weights mean proportional-to-size over all datasets.
            MixKind::GM => BTreeMap::new(),
        }
    }
}

/// One grid cell. `None` for a branch means the model drops that encoder
/// path entirely (single-branch baselines, printed as "-").
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub name: String,
    pub clip_mix: Option<MixKind>,
    pub sam_mix: Option<MixKind>,
}

impl AblationCell {
    fn new(name: &str, clip_mix: Option<MixKind>, sam_mix: Option<MixKind>) -> Self {
        AblationCell {
            name: name.to_string(),
            clip_mix,
            sam_mix,
        }
    }

    pub fn mix_labels(&self) -> (String, String) {
        (
            self.clip_mix.map_or("-".to_string(), |m| m.label().into()),
            self.sam_mix.map_or("-".to_string(), |m| m.label().into()),
        )
    }
}

/// The seven benchmark rows, in table order.
pub fn default_grid() -> Vec<AblationCell> {
    vec![
        AblationCell::new("BLIP2 (G)", Some(MixKind::G), None),
        AblationCell::new("BLIP2 (G+M)", Some(MixKind::GM), None),
        AblationCell::new("SAM-BLIP2 (G+M)", None, Some(MixKind::GM)),
        AblationCell::new("MSMedCap (G, G)", Some(MixKind::G), Some(MixKind::G)),
        AblationCell::new("MSMedCap (G+M, G)", Some(MixKind::GM), Some(MixKind::G)),
        AblationCell::new("MSMedCap (G+M, G+M)", Some(MixKind::GM), Some(MixKind::GM)),
        AblationCell::new("MSMedCap (G, G+M)", Some(MixKind::G), Some(MixKind::GM)),
    ]
}

/// Matches a user-supplied cell name against the grid, ignoring whitespace.
pub fn find_cell(grid: &[AblationCell], name: &str) -> Option<AblationCell> {
    let norm = |s: &str| s.chars().filter(|c| !c.is_whitespace()).collect::<String>();
    let wanted = norm(name);
    grid.iter().find(|c| norm(&c.name) == wanted).cloned()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub clip_mix: String,
    pub sam_mix: String,
    pub per_seed: Vec<SeedScores>,
    pub median: Option<MetricSet>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedScores {
    pub seed: u64,
    pub scores: MetricSet,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
}

impl AblationReport {
    pub fn table_rows(&self) -> Vec<(String, Option<MetricSet>)> {
        self.cells
            .iter()
            .map(|c| (c.name.clone(), c.median))
            .collect()
    }

    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.name == name)
    }
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn median_metrics(per_seed: &[SeedScores]) -> MetricSet {
    let pick = |f: fn(&MetricSet) -> f64| median(per_seed.iter().map(|s| f(&s.scores)).collect());
    MetricSet {
        bleu1: pick(|m| m.bleu1),
        bleu2: pick(|m| m.bleu2),
        bleu3: pick(|m| m.bleu3),
        meteor: pick(|m| m.meteor),
        rouge_l: pick(|m| m.rouge_l),
        cider: pick(|m| m.cider),
        bert_score: None,
        bleurt: None,
    }
}

/// Runs one cell for one seed: pretrain, finetune, generate on the medical
/// test split, evaluate.
pub fn run_cell(
    pipeline: &Pipeline,
    cell: &AblationCell,
    lm: &FrozenLM,
    run_seed: u64,
    out_dir: &Path,
) -> Result<MetricSet> {
    let cfg = &pipeline.cfg;
    let pretrain_plan = StagePlan::Pretrain(PretrainPlan {
        epochs: cfg.pretrain.epochs,
        batch_size: cfg.pretrain.batch_size,
        optimizer: OptimizerSpec {
            lr: cfg.pretrain.lr,
            betas: cfg.pretrain.betas,
            weight_decay: cfg.pretrain.weight_decay,
        },
        clip_mix: cell.clip_mix.map(|m| m.weights()),
        sam_mix: cell.sam_mix.map(|m| m.weights()),
        seed: derive_seed(run_seed, &format!("ablate.pretrain.{}", cell.name)),
    });
    let pretrain = pipeline.run_pretrain(&pretrain_plan, &out_dir.join("pretrain"))?;

    let finetune_plan = StagePlan::Finetune(FinetunePlan {
        epochs: cfg.finetune.epochs,
        batch_size: cfg.finetune.batch_size,
        optimizer: OptimizerSpec {
            lr: cfg.finetune.lr,
            betas: cfg.finetune.betas,
            weight_decay: cfg.finetune.weight_decay,
        },
        mix: cfg.finetune.mix.clone(),
        seed: derive_seed(run_seed, &format!("ablate.finetune.{}", cell.name)),
    });
    let finetune_ckpt = pipeline.run_finetune(
        &finetune_plan,
        &pretrain.ckpt_dir,
        lm,
        &out_dir.join("finetune"),
    )?;

    let ckpt = super::checkpoint::load_checkpoint(&finetune_ckpt)?;
    let branches = pipeline.load_branches(&ckpt)?;
    let predictions = pipeline.generate_predictions(
        &branches,
        lm,
        &out_dir.join("generate").join("predictions.jsonl"),
    )?;
    let test_medical = pipeline
        .test_sets
        .iter()
        .find(|(n, _)| n == "medical")
        .map(|(_, s)| s.clone())
        .unwrap_or_default();
    let refs = reference_map(&test_medical, None);
    let pairs = pairs_from_predictions(&predictions, &refs)?;
    evaluate_pairs(&pairs, cfg.eval.sentence_level_bleu)
}

/// Runs the grid over every seed. A failing cell is reported as failed
/// without aborting the other cells.
pub fn run_ablation(
    pipeline: &Pipeline,
    grid: &[AblationCell],
    seeds: &[u64],
    out_root: &Path,
) -> Result<AblationReport> {
    let mut names = std::collections::BTreeSet::new();
    for cell in grid {
        if !names.insert(cell.name.clone()) {
            return Err(Error::Config(format!(
                "duplicate ablation cell \"{}\"",
                cell.name
            )));
        }
        if cell.clip_mix.is_none() && cell.sam_mix.is_none() {
            return Err(Error::Config(format!(
                "cell \"{}\" has no branch",
                cell.name
            )));
        }
    }
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }

    // The frozen LM stands in for an external pre-trained model: one per
    // seed, shared across cells.
    let mut lms: BTreeMap<u64, FrozenLM> = BTreeMap::new();
    for &seed in seeds {
        let lm = pipeline.pretrain_lm(derive_seed(seed, "ablate.lm"))?;
        lms.insert(seed, lm);
    }

    let mut cells = Vec::new();
    for cell in grid {
        let slug: String = cell
            .name
            .chars()
            .map(|c| if c.is_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
            .collect();
        let mut per_seed = Vec::new();
        let mut error = None;
        for &seed in seeds {
            let cell_dir = out_root.join(&slug).join(format!("seed-{seed}"));
            match run_cell(pipeline, cell, &lms[&seed], seed, &cell_dir) {
                Ok(scores) => per_seed.push(SeedScores { seed, scores }),
                Err(e) => {
                    error = Some(format!("seed {seed}: {e}"));
                    break;
                }
            }
        }
        let median = if error.is_none() && !per_seed.is_empty() {
            Some(median_metrics(&per_seed))
        } else {
            None
        };
        let (clip_mix, sam_mix) = cell.mix_labels();
        cells.push(CellResult {
            name: cell.name.clone(),
            clip_mix,
            sam_mix,
            per_seed,
            median,
            error,
        });
    }
    let report = AblationReport {
        seeds: seeds.to_vec(),
        cells,
    };
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    let raw_path = out_root.join("results.json");
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&raw_path, text + "\n").map_err(|e| Error::io(&raw_path, e))?;
    let table = crate::metrics::render_table(&report.table_rows());
    let table_path = out_root.join("report.txt");
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_matches_benchmark_rows() {
        let grid = default_grid();
        let names: Vec<&str> = grid.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(
            names,
            vec![
                "BLIP2 (G)",
                "BLIP2 (G+M)",
                "SAM-BLIP2 (G+M)",
                "MSMedCap (G, G)",
                "MSMedCap (G+M, G)",
                "MSMedCap (G+M, G+M)",
                "MSMedCap (G, G+M)",
            ]
        );
        assert_eq!(grid.len(), 7);
    }

    #[test]
    fn flagship_cell_configures_mixed_semantics() {
        let grid = default_grid();
        let cell = find_cell(&grid, "MSMedCap(G,G+M)").unwrap();
        assert_eq!(cell.clip_mix, Some(MixKind::G));
        assert_eq!(cell.sam_mix, Some(MixKind::GM));
        let (c, s) = cell.mix_labels();
        assert_eq!((c.as_str(), s.as_str()), ("G", "G+M"));
    }

    #[test]
    fn single_branch_cells_drop_a_path() {
        let grid = default_grid();
        let sam_only = find_cell(&grid, "SAM-BLIP2 (G+M)").unwrap();
        assert!(sam_only.clip_mix.is_none());
        assert_eq!(sam_only.mix_labels().0, "-");
    }

    #[test]
    fn median_is_the_middle_seed() {
        let mk = |v: f64| MetricSet {
            bleu1: v,
            bleu2: v,
            bleu3: v,
            meteor: v,
            rouge_l: v,
            cider: v,
            bert_score: None,
            bleurt: None,
        };
        let per_seed = vec![
            SeedScores { seed: 1, scores: mk(0.3) },
            SeedScores { seed: 2, scores: mk(0.1) },
            SeedScores { seed: 3, scores: mk(0.2) },
        ];
        assert_eq!(median_metrics(&per_seed).cider, 0.2);
    }
}
