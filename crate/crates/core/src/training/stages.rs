//! Two-stage orchestration: mixed-semantic pre-training of the branch
//! Q-Formers, frozen-LM fine-tuning, and generation over a test split.
//!
//! Stage 1 trains each branch independently on its own dataset mix with the
//! joint ITC+ITM+ITG objective; encoders stay frozen. Stage 2 optimizes
//! Q-Formers, query banks, and output projections against the LM loss while
//! the encoders and the LM stay frozen, verified by fingerprint.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use super::checkpoint::{
    load_checkpoint, save_checkpoint, verify_fingerprints, Checkpoint, RngState, SaveSpec,
};
use super::optim::AdamW;
use crate::config::{derive_seed, RunConfig};
use crate::data::{
    load_manifest, sample_batches, BatchStream, CaptionSample, MixSpec, Split, Tokenizer,
};
use crate::encoders::{Encoder, FeatureSeq};
use crate::lm::{
    build_prefix, generate, lm_loss_on_tape, pretrain_toy_lm, FrozenLM, LmConfig, LmParams,
};
use crate::ppm::Image;
use crate::qformer::{
    joint_pretrain_loss, qformer_forward, MaskMode, Pair, QFormerConfig, QFormerParams,
};
use crate::tensor::{Mat, Tape};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Branch {
    Clip,
    Sam,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Branch::Clip => "clip",
            Branch::Sam => "sam",
        }
    }

    pub fn param_prefix(self) -> &'static str {
        match self {
            Branch::Clip => "qf_clip.",
            Branch::Sam => "qf_sam.",
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub betas: [f64; 2],
    pub weight_decay: f64,
}

impl OptimizerSpec {
    fn build(&self) -> AdamW {
        AdamW::new(self.lr, self.betas[0], self.betas[1], self.weight_decay)
    }
}

#[derive(Debug, Clone)]
pub struct PretrainPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    /// Dataset weights per branch; `None` drops the branch entirely
    /// (single-branch baselines). Empty map = proportional to sizes.
    pub clip_mix: Option<BTreeMap<String, f64>>,
    pub sam_mix: Option<BTreeMap<String, f64>>,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FinetunePlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    pub mix: BTreeMap<String, f64>,
    pub seed: u64,
}

/// Stage plan as a tagged union: operations check they got the right stage.
#[derive(Debug, Clone)]
pub enum StagePlan {
    Pretrain(PretrainPlan),
    Finetune(FinetunePlan),
}

impl StagePlan {
    pub fn pretrain_default(cfg: &RunConfig, run_seed: u64) -> StagePlan {
        StagePlan::Pretrain(PretrainPlan {
            epochs: cfg.pretrain.epochs,
            batch_size: cfg.pretrain.batch_size,
            optimizer: OptimizerSpec {
                lr: cfg.pretrain.lr,
                betas: cfg.pretrain.betas,
                weight_decay: cfg.pretrain.weight_decay,
            },
            clip_mix: Some(cfg.pretrain.clip_mix.clone()),
            sam_mix: Some(cfg.pretrain.sam_mix.clone()),
            seed: derive_seed(run_seed, "stage.pretrain"),
        })
    }

    pub fn finetune_default(cfg: &RunConfig, run_seed: u64) -> StagePlan {
        StagePlan::Finetune(FinetunePlan {
            epochs: cfg.finetune.epochs,
            batch_size: cfg.finetune.batch_size,
            optimizer: OptimizerSpec {
                lr: cfg.finetune.lr,
                betas: cfg.finetune.betas,
                weight_decay: cfg.finetune.weight_decay,
            },
            mix: cfg.finetune.mix.clone(),
            seed: derive_seed(run_seed, "stage.finetune"),
        })
    }
}

struct LogWriter {
    file: fs::File,
}

impl LogWriter {
    fn create(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(LogWriter { file })
    }

    fn record(&mut self, value: serde_json::Value) -> Result<()> {
        let line = serde_json::to_string(&value).expect("log record serializes");
        writeln!(self.file, "{line}").map_err(|e| Error::io("logs.jsonl", e))
    }
}

/// Everything a run needs: config, corpus, tokenizer, frozen encoders, and
/// per-branch feature caches. Single-threaded by design (RefCell caches).
pub struct Pipeline {
    pub cfg: RunConfig,
    pub data_dir: PathBuf,
    pub tokenizer: Tokenizer,
    pub enc_general: Encoder,
    pub enc_detail: Encoder,
    /// Dataset name -> train-split samples, ordered by name.
    pub train_sets: Vec<(String, Vec<CaptionSample>)>,
    pub test_sets: Vec<(String, Vec<CaptionSample>)>,
    base_dirs: BTreeMap<String, PathBuf>,
    cache_general: RefCell<BTreeMap<String, FeatureSeq>>,
    cache_detail: RefCell<BTreeMap<String, FeatureSeq>>,
}

impl Pipeline {
    pub fn new(cfg: RunConfig, out_root: &Path) -> Result<Pipeline> {
        cfg.validate()?;
        let data_dir = if Path::new(&cfg.data.dir).is_absolute() {
            PathBuf::from(&cfg.data.dir)
        } else {
            out_root.join(&cfg.data.dir)
        };
        let mut train_sets = Vec::new();
        let mut test_sets = Vec::new();
        let mut base_dirs = BTreeMap::new();
        for (name, file) in [
            ("general", &cfg.data.general_manifest),
            ("medical", &cfg.data.medical_manifest),
        ] {
            let path = data_dir.join(file);
            if !path.exists() {
                return Err(Error::MissingArtifact(format!(
                    "manifest {} (run gen-data first)",
                    path.display()
                )));
            }
            let manifest = load_manifest(&path)?;
            base_dirs.insert(name.to_string(), manifest.base_dir.clone());
            train_sets.push((name.to_string(), manifest.split(Split::Train)));
            test_sets.push((name.to_string(), manifest.split(Split::Test)));
        }
        let captions: Vec<&str> = train_sets
            .iter()
            .flat_map(|(_, samples)| samples.iter().map(|s| s.caption.as_str()))
            .collect();
        let tokenizer = Tokenizer::build(
            captions.iter().copied(),
            cfg.data.min_token_freq,
            cfg.data.max_caption_tokens,
        )?;
        let enc_general = Encoder::new(cfg.encoder_general)?;
        let enc_detail = Encoder::new(cfg.encoder_detail)?;
        Ok(Pipeline {
            cfg,
            data_dir,
            tokenizer,
            enc_general,
            enc_detail,
            train_sets,
            test_sets,
            base_dirs,
            cache_general: RefCell::new(BTreeMap::new()),
            cache_detail: RefCell::new(BTreeMap::new()),
        })
    }

    pub fn qformer_config(&self, branch: Branch) -> QFormerConfig {
        let feat_dims = match branch {
            Branch::Clip => self.enc_general.spec().dims,
            Branch::Sam => self.enc_detail.spec().dims,
        };
        QFormerConfig {
            queries: self.cfg.qformer.queries,
            hidden: self.cfg.qformer.hidden,
            blocks: self.cfg.qformer.blocks,
            heads: self.cfg.qformer.heads,
            ff: self.cfg.qformer.ff,
            contrast_dim: self.cfg.qformer.contrast_dim,
            tau_init: self.cfg.qformer.tau_init,
            feat_dims,
            vocab: self.tokenizer.vocab_size(),
            lm_dim: self.cfg.lm.hidden,
        }
    }

    pub fn lm_config(&self) -> LmConfig {
        LmConfig {
            hidden: self.cfg.lm.hidden,
            blocks: self.cfg.lm.blocks,
            heads: self.cfg.lm.heads,
            ff: self.cfg.lm.ff,
            vocab: self.tokenizer.vocab_size(),
            max_context: self.cfg.lm.max_context,
        }
    }

    fn image_path(&self, dataset: &str, sample: &CaptionSample) -> PathBuf {
        self.base_dirs[dataset].join(&sample.image_ref)
    }

    /// Encoded features for one sample on the branch's encoder, cached by
    /// image path.
    pub fn features(
        &self,
        branch: Branch,
        dataset: &str,
        sample: &CaptionSample,
    ) -> Result<FeatureSeq> {
        let path = self.image_path(dataset, sample);
        let key = path.to_string_lossy().into_owned();
        let (cache, encoder) = match branch {
            Branch::Clip => (&self.cache_general, &self.enc_general),
            Branch::Sam => (&self.cache_detail, &self.enc_detail),
        };
        if let Some(hit) = cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let image = Image::read_ppm(&path)?;
        let feats = encoder.encode(&image)?;
        cache.borrow_mut().insert(key, feats.clone());
        Ok(feats)
    }

    pub fn encoder_fingerprints(&self) -> BTreeMap<String, String> {
        [
            (
                "enc_general".to_string(),
                self.enc_general.fingerprint().to_string(),
            ),
            (
                "enc_detail".to_string(),
                self.enc_detail.fingerprint().to_string(),
            ),
        ]
        .into()
    }

    /// Trains the toy causal LM on all train-split captions and freezes it.
    pub fn pretrain_lm(&self, seed: u64) -> Result<FrozenLM> {
        let corpus: Vec<Vec<usize>> = self
            .train_sets
            .iter()
            .flat_map(|(_, samples)| samples.iter().map(|s| self.tokenizer.encode(&s.caption)))
            .collect();
        pretrain_toy_lm(&corpus, self.lm_config(), self.cfg.lm.train, seed)
    }

    pub fn save_lm(&self, lm: &FrozenLM, dir: &Path) -> Result<()> {
        let blobs: Vec<(String, String, Mat)> = lm
            .params()
            .named_mats()
            .into_iter()
            .map(|(n, m)| ("param".to_string(), format!("lm.{n}"), m))
            .collect();
        save_checkpoint(
            dir,
            SaveSpec {
                stage: "lm",
                step: self.cfg.lm.train.steps as u64,
                config: serde_json::to_value(&self.cfg).expect("config serializes"),
                tokenizer_vocab: self.tokenizer.vocab().to_vec(),
                tokenizer_max_tokens: self.tokenizer.max_tokens(),
                fingerprints: [("lm".to_string(), lm.fingerprint().to_string())].into(),
                rng: BTreeMap::new(),
                blobs,
            },
        )
    }

    pub fn load_lm(&self, dir: &Path) -> Result<FrozenLM> {
        let ckpt = load_checkpoint(dir)?;
        let mut params = LmParams::init(self.lm_config(), 0)?;
        params.load_from(&ckpt.params(), "lm.")?;
        let lm = FrozenLM::freeze(params);
        verify_fingerprints(
            &ckpt.meta.fingerprints,
            &[("lm".to_string(), lm.fingerprint().to_string())].into(),
        )?;
        Ok(lm)
    }

    fn batch_pairs<'a>(
        &self,
        branch: Branch,
        batch: &[(&'a str, &'a CaptionSample)],
    ) -> Result<Vec<(FeatureSeq, Vec<usize>)>> {
        batch
            .iter()
            .map(|(name, sample)| {
                let feats = self.features(branch, name, sample)?;
                Ok((feats, self.tokenizer.encode(&sample.caption)))
            })
            .collect()
    }

    /// Stage 1. Trains each configured branch independently and emits one
    /// checkpoint holding both branches.
    pub fn run_pretrain(&self, plan: &StagePlan, out_dir: &Path) -> Result<PretrainOutcome> {
        let plan = match plan {
            StagePlan::Pretrain(p) => p,
            StagePlan::Finetune(_) => {
                return Err(Error::Config("run_pretrain needs a pretrain plan".into()))
            }
        };
        if plan.clip_mix.is_none() && plan.sam_mix.is_none() {
            return Err(Error::Config("pretrain plan names no branch mixes".into()));
        }
        if plan.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut log = LogWriter::create(&out_dir.join("logs.jsonl"))?;
        let enc_fps = self.encoder_fingerprints();

        let mut blobs: Vec<(String, String, Mat)> = Vec::new();
        let mut rng_states: BTreeMap<String, RngState> = BTreeMap::new();
        let mut epoch_means: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut total_steps = 0u64;

        let branch_plans = [
            (Branch::Clip, plan.clip_mix.as_ref()),
            (Branch::Sam, plan.sam_mix.as_ref()),
        ];
        for (branch, mix_weights) in branch_plans {
            let Some(weights) = mix_weights else {
                continue;
            };
            let tag = branch.tag();
            let mix = MixSpec {
                weights: weights.clone(),
                seed: derive_seed(plan.seed, &format!("mix.{tag}")),
            };
            let mut stream = sample_batches(&mix, &self.train_sets, plan.batch_size)?;
            let steps_per_epoch = stream.active_len().div_ceil(plan.batch_size);
            let mut params = QFormerParams::init(
                self.qformer_config(branch),
                derive_seed(plan.seed, &format!("init.{tag}")),
            )?;
            // Stage 1 trains the Q-Former core and query bank; the output
            // projection belongs to stage 2.
            let trainable: BTreeSet<String> = params
                .named_mats()
                .into_iter()
                .map(|(n, _)| n)
                .filter(|n| !n.starts_with("out_proj."))
                .collect();
            let mut opt = plan.optimizer.build();
            let mut means = Vec::with_capacity(plan.epochs);
            let mut step_in_run = 0u64;
            for epoch in 0..plan.epochs {
                let mut epoch_total = 0.0;
                for _ in 0..steps_per_epoch {
                    let batch = stream.next_batch();
                    let pairs_owned = self.batch_pairs(branch, &batch)?;
                    let pairs: Vec<Pair> = pairs_owned
                        .iter()
                        .map(|(f, ids)| (f, ids.as_slice()))
                        .collect();
                    let neg_seed = derive_seed(plan.seed, &format!("itm.{tag}.{step_in_run}"));
                    let eval = joint_pretrain_loss(&params, &pairs, neg_seed)?;
                    if !eval.total.is_finite() {
                        return Err(Error::Numeric(format!(
                            "non-finite pretrain loss at step {step_in_run} ({tag})"
                        )));
                    }
                    opt.step(&eval.grads, &trainable, |f| params.visit_mut(f));
                    clamp_tau(&mut params);
                    log.record(serde_json::json!({
                        "stage": "pretrain", "branch": tag, "epoch": epoch,
                        "step": step_in_run, "itc": eval.itc, "itm": eval.itm,
                        "itg": eval.itg, "total": eval.total,
                    }))?;
                    epoch_total += eval.total;
                    step_in_run += 1;
                    total_steps += 1;
                }
                let mean = epoch_total / steps_per_epoch as f64;
                log.record(serde_json::json!({
                    "stage": "pretrain", "branch": tag, "epoch": epoch,
                    "epoch_mean_total": mean,
                }))?;
                means.push(mean);
                // Encoders are immutable by construction; the contract is
                // still checked every epoch.
                if self.encoder_fingerprints() != enc_fps {
                    return Err(Error::FingerprintMismatch {
                        component: "encoders".into(),
                        stored: "initial".into(),
                        live: "drifted".into(),
                    });
                }
            }
            epoch_means.insert(tag.to_string(), means);
            let prefix = branch.param_prefix();
            for (name, mat) in params.named_mats() {
                blobs.push(("param".into(), format!("{prefix}{name}"), mat));
            }
            let (m, v) = opt.state();
            for (name, mat) in m {
                blobs.push(("opt_m".into(), format!("{prefix}{name}"), mat));
            }
            for (name, mat) in v {
                blobs.push(("opt_v".into(), format!("{prefix}{name}"), mat));
            }
            rng_states.insert(
                format!("pretrain.{tag}"),
                RngState::capture(stream.rng_state()),
            );
        }

        let ckpt_dir = out_dir.join("ckpt");
        save_checkpoint(
            &ckpt_dir,
            SaveSpec {
                stage: "pretrain",
                step: total_steps,
                config: serde_json::to_value(&self.cfg).expect("config serializes"),
                tokenizer_vocab: self.tokenizer.vocab().to_vec(),
                tokenizer_max_tokens: self.tokenizer.max_tokens(),
                fingerprints: enc_fps,
                rng: rng_states,
                blobs,
            },
        )?;
        Ok(PretrainOutcome {
            ckpt_dir,
            epoch_means,
        })
    }

    /// Rebuilds branch parameters from checkpoint blobs.
    pub fn load_branches(&self, ckpt: &Checkpoint) -> Result<BranchSet> {
        let params_map = ckpt.params();
        let mut set = BranchSet {
            clip: None,
            sam: None,
        };
        for branch in [Branch::Clip, Branch::Sam] {
            let prefix = branch.param_prefix();
            if params_map.keys().any(|k| k.starts_with(prefix)) {
                let mut p = QFormerParams::init(
                    self.qformer_config(branch),
                    derive_seed(0, "placeholder"),
                )?;
                p.load_from(&params_map, prefix)?;
                match branch {
                    Branch::Clip => set.clip = Some(p),
                    Branch::Sam => set.sam = Some(p),
                }
            }
        }
        if set.clip.is_none() && set.sam.is_none() {
            return Err(Error::CorruptBlob(
                "checkpoint holds no Q-Former branch".into(),
            ));
        }
        Ok(set)
    }

    /// Stage 2 driver: builds the run, steps through every epoch, saves the
    /// final checkpoint under `out_dir/ckpt`, and writes per-step logs.
    pub fn run_finetune(
        &self,
        plan: &StagePlan,
        pretrain_ckpt: &Path,
        lm: &FrozenLM,
        out_dir: &Path,
    ) -> Result<PathBuf> {
        let plan = match plan {
            StagePlan::Finetune(p) => p,
            StagePlan::Pretrain(_) => {
                return Err(Error::Config("run_finetune needs a finetune plan".into()))
            }
        };
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let mut log = LogWriter::create(&out_dir.join("logs.jsonl"))?;
        let mut run = self.start_finetune(plan.clone(), pretrain_ckpt, lm)?;
        let steps_per_epoch = run.steps_per_epoch();
        let lm_fp_before = lm.fingerprint().to_string();
        for epoch in 0..plan.epochs {
            let mut epoch_total = 0.0;
            for _ in 0..steps_per_epoch {
                let loss = run.step()?;
                log.record(serde_json::json!({
                    "stage": "finetune", "epoch": epoch, "step": run.step_count() - 1,
                    "lm": loss,
                }))?;
                epoch_total += loss;
            }
            log.record(serde_json::json!({
                "stage": "finetune", "epoch": epoch,
                "epoch_mean_lm": epoch_total / steps_per_epoch as f64,
            }))?;
        }
        if lm.fingerprint() != lm_fp_before || lm.params().fingerprint() != lm_fp_before {
            return Err(Error::FingerprintMismatch {
                component: "lm".into(),
                stored: lm_fp_before,
                live: lm.params().fingerprint(),
            });
        }
        let ckpt_dir = out_dir.join("ckpt");
        run.save(&ckpt_dir)?;
        Ok(ckpt_dir)
    }

    /// Builds a fine-tuning run from a stage-1 checkpoint after verifying
    /// the frozen-component fingerprints.
    pub fn start_finetune<'p>(
        &'p self,
        plan: FinetunePlan,
        pretrain_ckpt: &Path,
        lm: &'p FrozenLM,
    ) -> Result<FinetuneRun<'p>> {
        let ckpt = load_checkpoint(pretrain_ckpt)?;
        let mut live = self.encoder_fingerprints();
        live.insert("lm".to_string(), lm.fingerprint().to_string());
        verify_fingerprints(&ckpt.meta.fingerprints, &live)?;
        let branches = self.load_branches(&ckpt)?;
        let mix = MixSpec {
            weights: plan.mix.clone(),
            seed: derive_seed(plan.seed, "mix.finetune"),
        };
        let stream = sample_batches(&mix, &self.train_sets, plan.batch_size)?;
        let opt = plan.optimizer.build();
        Ok(FinetuneRun {
            pipeline: self,
            lm,
            plan,
            branches,
            opt,
            stream,
            steps_done: 0,
        })
    }

    /// Resumes a fine-tuning run from its own checkpoint: parameters,
    /// optimizer moments, step count, and the batch stream RNG.
    pub fn resume_finetune<'p>(
        &'p self,
        plan: FinetunePlan,
        finetune_ckpt: &Path,
        lm: &'p FrozenLM,
    ) -> Result<FinetuneRun<'p>> {
        let ckpt = load_checkpoint(finetune_ckpt)?;
        let mut live = self.encoder_fingerprints();
        live.insert("lm".to_string(), lm.fingerprint().to_string());
        verify_fingerprints(&ckpt.meta.fingerprints, &live)?;
        let branches = self.load_branches(&ckpt)?;
        let mix = MixSpec {
            weights: plan.mix.clone(),
            seed: derive_seed(plan.seed, "mix.finetune"),
        };
        let mut stream = sample_batches(&mix, &self.train_sets, plan.batch_size)?;
        let rng_state = ckpt
            .meta
            .rng
            .get("finetune")
            .ok_or_else(|| Error::CorruptBlob("missing finetune rng state".into()))?;
        stream.set_rng_state(rng_state.restore()?);
        let mut opt = plan.optimizer.build();
        opt.restore(ckpt.meta.step, ckpt.group("opt_m"), ckpt.group("opt_v"));
        Ok(FinetuneRun {
            pipeline: self,
            lm,
            plan,
            branches,
            opt,
            stream,
            steps_done: ckpt.meta.step,
        })
    }

    /// Caption-mode query states, projected to LM width, for one sample.
    pub fn projected_queries(
        &self,
        branches: &BranchSet,
        dataset: &str,
        sample: &CaptionSample,
    ) -> Result<(Option<Mat>, Option<Mat>)> {
        let run = |branch: Branch, params: &QFormerParams| -> Result<Mat> {
            let feats = self.features(branch, dataset, sample)?;
            let q = crate::qformer::caption_query_states(params, &feats)?;
            Ok(params.project_queries(&q))
        };
        let clip = branches
            .clip
            .as_ref()
            .map(|p| run(Branch::Clip, p))
            .transpose()?;
        let sam = branches
            .sam
            .as_ref()
            .map(|p| run(Branch::Sam, p))
            .transpose()?;
        Ok((clip, sam))
    }

    /// Decodes captions for the medical test split and writes the
    /// predictions JSONL (`{"image": ..., "prediction": ...}` per line).
    pub fn generate_predictions(
        &self,
        branches: &BranchSet,
        lm: &FrozenLM,
        out_path: &Path,
    ) -> Result<Vec<(String, String)>> {
        let prompt_ids = self.tokenizer.encode_words(&self.cfg.lm.prompt);
        let strategy = self.cfg.decode_strategy();
        let samples = self
            .test_sets
            .iter()
            .find(|(name, _)| name == "medical")
            .map(|(_, s)| s.clone())
            .unwrap_or_default();
        let mut out = Vec::with_capacity(samples.len());
        for sample in &samples {
            let (clip, sam) = self.projected_queries(branches, "medical", sample)?;
            let prefix = build_prefix(lm, clip.as_ref(), sam.as_ref(), &prompt_ids)?;
            let text = generate(lm, &prefix, strategy, self.cfg.decode.max_len, &self.tokenizer)?;
            out.push((sample.image_ref.clone(), text));
        }
        if let Some(parent) = out_path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut buf = String::new();
        for (image, prediction) in &out {
            let line = serde_json::json!({"image": image, "prediction": prediction});
            buf.push_str(&line.to_string());
            buf.push('\n');
        }
        fs::write(out_path, buf).map_err(|e| Error::io(out_path, e))?;
        Ok(out)
    }
}

fn clamp_tau(params: &mut QFormerParams) {
    // Temperature stays strictly positive during training.
    let t = params.tau[[0, 0]];
    if t < 1e-3 {
        params.tau[[0, 0]] = 1e-3;
    }
}

pub struct PretrainOutcome {
    pub ckpt_dir: PathBuf,
    /// Per-branch mean total loss per epoch.
    pub epoch_means: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct BranchSet {
    pub clip: Option<QFormerParams>,
    pub sam: Option<QFormerParams>,
}

impl BranchSet {
    pub fn named_params(&self) -> Vec<(String, Mat)> {
        let mut out = Vec::new();
        if let Some(p) = &self.clip {
            out.extend(
                p.named_mats()
                    .into_iter()
                    .map(|(n, m)| (format!("qf_clip.{n}"), m)),
            );
        }
        if let Some(p) = &self.sam {
            out.extend(
                p.named_mats()
                    .into_iter()
                    .map(|(n, m)| (format!("qf_sam.{n}"), m)),
            );
        }
        out
    }
}

/// Step-level fine-tuning state, exposed so callers can checkpoint mid-run
/// and verify bit-exact resumption.
pub struct FinetuneRun<'p> {
    pipeline: &'p Pipeline,
    lm: &'p FrozenLM,
    plan: FinetunePlan,
    pub branches: BranchSet,
    opt: AdamW,
    stream: BatchStream<'p>,
    steps_done: u64,
}

impl<'p> FinetuneRun<'p> {
    pub fn steps_per_epoch(&self) -> usize {
        self.stream.active_len().div_ceil(self.plan.batch_size)
    }

    pub fn step_count(&self) -> u64 {
        self.steps_done
    }

    fn trainable(&self) -> BTreeSet<String> {
        self.branches
            .named_params()
            .into_iter()
            .map(|(n, _)| n)
            .collect()
    }

    /// One optimization step against the LM loss. Gradients flow through the
    /// prefix into Q-Formers, query banks, and projections only.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.stream.next_batch();
        let lm_cfg = *self.lm.cfg();
        let prompt_ids = self
            .pipeline
            .tokenizer
            .encode_words(&self.pipeline.cfg.lm.prompt);

        let mut tape = Tape::new();
        let clip_vars = self
            .branches
            .clip
            .as_ref()
            .map(|p| p.bind(&mut tape, true));
        let sam_vars = self.branches.sam.as_ref().map(|p| p.bind(&mut tape, true));
        let lm_vars = self.lm.params().bind(&mut tape, false);
        let prompt_emb = if prompt_ids.is_empty() {
            None
        } else {
            Some(tape.embed(lm_vars.token_embed, &prompt_ids))
        };

        let mut weighted = Vec::with_capacity(batch.len());
        let mut total_tokens = 0usize;
        for (dataset, sample) in &batch {
            let ids = self.pipeline.tokenizer.encode(&sample.caption);
            let mut parts = Vec::new();
            if let Some(vars) = &clip_vars {
                let feats = self.pipeline.features(Branch::Clip, dataset, sample)?;
                let (q, _) = qformer_forward(&mut tape, vars, &feats, None, MaskMode::Caption)?;
                parts.push(vars.out_proj.apply(&mut tape, q));
            }
            if let Some(vars) = &sam_vars {
                let feats = self.pipeline.features(Branch::Sam, dataset, sample)?;
                let (q, _) = qformer_forward(&mut tape, vars, &feats, None, MaskMode::Caption)?;
                parts.push(vars.out_proj.apply(&mut tape, q));
            }
            if let Some(pe) = prompt_emb {
                parts.push(pe);
            }
            let prefix = tape.concat_rows(&parts);
            let loss = lm_loss_on_tape(&mut tape, &lm_vars, &lm_cfg, prefix, &ids)?;
            let tokens = ids.len() - 1;
            weighted.push(tape.scale(loss, tokens as f64));
            total_tokens += tokens;
        }
        let mut total = weighted[0];
        for w in &weighted[1..] {
            total = tape.add(total, *w);
        }
        let loss = tape.scale(total, 1.0 / total_tokens as f64);
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite finetune loss at step {}",
                self.steps_done
            )));
        }

        let mut grads_raw = tape.backward(loss)?;
        let mut grads: BTreeMap<String, Mat> = BTreeMap::new();
        if let Some(vars) = &clip_vars {
            for (name, v) in &vars.names {
                if let Some(g) = grads_raw.take(*v) {
                    grads.insert(format!("qf_clip.{name}"), g);
                }
            }
        }
        if let Some(vars) = &sam_vars {
            for (name, v) in &vars.names {
                if let Some(g) = grads_raw.take(*v) {
                    grads.insert(format!("qf_sam.{name}"), g);
                }
            }
        }
        let trainable = self.trainable();
        let (clip, sam) = (&mut self.branches.clip, &mut self.branches.sam);
        self.opt.step(&grads, &trainable, |f| {
            if let Some(p) = clip {
                p.visit_mut(&mut |name, m| f(format!("qf_clip.{name}"), m));
            }
            if let Some(p) = sam {
                p.visit_mut(&mut |name, m| f(format!("qf_sam.{name}"), m));
            }
        });
        if let Some(p) = &mut self.branches.clip {
            clamp_tau(p);
        }
        if let Some(p) = &mut self.branches.sam {
            clamp_tau(p);
        }
        self.steps_done += 1;
        Ok(loss_val)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut blobs: Vec<(String, String, Mat)> = self
            .branches
            .named_params()
            .into_iter()
            .map(|(n, m)| ("param".to_string(), n, m))
            .collect();
        let (m, v) = self.opt.state();
        for (name, mat) in m {
            blobs.push(("opt_m".into(), name, mat));
        }
        for (name, mat) in v {
            blobs.push(("opt_v".into(), name, mat));
        }
        let mut fingerprints = self.pipeline.encoder_fingerprints();
        fingerprints.insert("lm".to_string(), self.lm.fingerprint().to_string());
        save_checkpoint(
            dir,
            SaveSpec {
                stage: "finetune",
                step: self.steps_done,
                config: serde_json::to_value(&self.pipeline.cfg).expect("config serializes"),
                tokenizer_vocab: self.pipeline.tokenizer.vocab().to_vec(),
                tokenizer_max_tokens: self.pipeline.tokenizer.max_tokens(),
                fingerprints,
                rng: [(
                    "finetune".to_string(),
                    RngState::capture(self.stream.rng_state()),
                )]
                .into(),
                blobs,
            },
        )
    }
}
