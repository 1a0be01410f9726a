//! Frozen decoder language model: toy causal-LM pre-training, prefix
//! construction, the stage-2 LM loss, and greedy/beam caption generation.
//!
//! The LM conditions on a prefix of continuous rows (projected query states
//! from both branches plus embedded prompt tokens). Prefix rows attend
//! causally among themselves; caption tokens attend the whole prefix plus
//! preceding caption tokens. During fine-tuning gradients flow into the
//! prefix and stop there: LM parameters are bound as frozen leaves.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Tokenizer, BOS_ID, EOS_ID};
use crate::fingerprint::digest_named;
use crate::qformer::{AttnV, LinearV, LnV};
use crate::tensor::{randn_mat, round_f32, sinusoidal_pos, Mat, Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff: usize,
    pub vocab: usize,
    pub max_context: usize,
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "lm hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmAttnP {
    pub q: crate::qformer::LinearP,
    pub k: crate::qformer::LinearP,
    pub v: crate::qformer::LinearP,
    pub o: crate::qformer::LinearP,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmBlockP {
    pub sa: LmAttnP,
    pub ln1: crate::qformer::LnP,
    pub ff1: crate::qformer::LinearP,
    pub ff2: crate::qformer::LinearP,
    pub ln2: crate::qformer::LnP,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LmParams {
    pub cfg: LmConfig,
    pub token_embed: Mat,
    pub blocks: Vec<LmBlockP>,
    pub head: crate::qformer::LinearP,
}

fn linear_init(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> crate::qformer::LinearP {
    crate::qformer::LinearP {
        w: randn_mat(rng, din, dout, 1.0 / (din as f64).sqrt()),
        b: Mat::zeros((1, dout)),
    }
}

impl LmParams {
    pub fn init(cfg: LmConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden;
        let blocks = (0..cfg.blocks)
            .map(|_| LmBlockP {
                sa: LmAttnP {
                    q: linear_init(&mut rng, d, d),
                    k: linear_init(&mut rng, d, d),
                    v: linear_init(&mut rng, d, d),
                    o: linear_init(&mut rng, d, d),
                },
                ln1: crate::qformer::LnP {
                    gain: Mat::from_elem((1, d), 1.0),
                    bias: Mat::zeros((1, d)),
                },
                ff1: linear_init(&mut rng, d, cfg.ff),
                ff2: linear_init(&mut rng, cfg.ff, d),
                ln2: crate::qformer::LnP {
                    gain: Mat::from_elem((1, d), 1.0),
                    bias: Mat::zeros((1, d)),
                },
            })
            .collect();
        Ok(LmParams {
            cfg,
            token_embed: randn_mat(&mut rng, cfg.vocab, d, 0.5),
            blocks,
            head: linear_init(&mut rng, d, cfg.vocab),
        })
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Mat)) {
        f("token_embed".into(), &self.token_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, lin) in [
                ("sa.q", &b.sa.q),
                ("sa.k", &b.sa.k),
                ("sa.v", &b.sa.v),
                ("sa.o", &b.sa.o),
                ("ff1", &b.ff1),
                ("ff2", &b.ff2),
            ] {
                f(format!("block{i}.{tag}.w"), &lin.w);
                f(format!("block{i}.{tag}.b"), &lin.b);
            }
            f(format!("block{i}.ln1.gain"), &b.ln1.gain);
            f(format!("block{i}.ln1.bias"), &b.ln1.bias);
            f(format!("block{i}.ln2.gain"), &b.ln2.gain);
            f(format!("block{i}.ln2.bias"), &b.ln2.bias);
        }
        f("head.w".into(), &self.head.w);
        f("head.b".into(), &self.head.b);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Mat)) {
        f("token_embed".into(), &mut self.token_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (tag, lin) in [
                ("sa.q", &mut b.sa.q),
                ("sa.k", &mut b.sa.k),
                ("sa.v", &mut b.sa.v),
                ("sa.o", &mut b.sa.o),
                ("ff1", &mut b.ff1),
                ("ff2", &mut b.ff2),
            ] {
                f(format!("block{i}.{tag}.w"), &mut lin.w);
                f(format!("block{i}.{tag}.b"), &mut lin.b);
            }
            f(format!("block{i}.ln1.gain"), &mut b.ln1.gain);
            f(format!("block{i}.ln1.bias"), &mut b.ln1.bias);
            f(format!("block{i}.ln2.gain"), &mut b.ln2.gain);
            f(format!("block{i}.ln2.bias"), &mut b.ln2.bias);
        }
        f("head.w".into(), &mut self.head.w);
        f("head.b".into(), &mut self.head.b);
    }

    pub fn named_mats(&self) -> Vec<(String, Mat)> {
        let mut out = Vec::new();
        self.visit(&mut |name, m| out.push((name, m.clone())));
        out
    }

    pub fn fingerprint(&self) -> String {
        let named = self.named_mats();
        digest_named(named.iter().map(|(n, m)| (n.as_str(), m)))
    }

    /// Overwrites every tensor from `map` entries keyed `prefix + name`.
    pub fn load_from(&mut self, map: &BTreeMap<String, Mat>, prefix: &str) -> Result<()> {
        let mut problem = None;
        self.visit_mut(&mut |name, m| {
            if problem.is_some() {
                return;
            }
            let key = format!("{prefix}{name}");
            match map.get(&key) {
                Some(stored) if stored.raw_dim() == m.raw_dim() => *m = stored.clone(),
                Some(stored) => {
                    problem = Some(format!(
                        "blob {key} has shape {}x{}, expected {}x{}",
                        stored.nrows(),
                        stored.ncols(),
                        m.nrows(),
                        m.ncols()
                    ))
                }
                None => problem = Some(format!("missing blob {key}")),
            }
        });
        match problem {
            Some(msg) => Err(Error::CorruptBlob(msg)),
            None => Ok(()),
        }
    }
}

pub struct LmVars {
    pub token_embed: Var,
    pub blocks: Vec<LmBlockV>,
    pub head: LinearV,
    pub names: Vec<(String, Var)>,
}

pub struct LmBlockV {
    pub sa: AttnV,
    pub ln1: LnV,
    pub ff1: LinearV,
    pub ff2: LinearV,
    pub ln2: LnV,
}

impl LmParams {
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> LmVars {
        let mut names: Vec<(String, Var)> = Vec::new();
        self.visit(&mut |name, m| {
            let v = if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            };
            names.push((name, v));
        });
        let lookup: BTreeMap<&str, Var> =
            names.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let lin = |tag: &str| LinearV {
            w: lookup[format!("{tag}.w").as_str()],
            b: lookup[format!("{tag}.b").as_str()],
        };
        let blocks = (0..self.cfg.blocks)
            .map(|i| LmBlockV {
                sa: AttnV {
                    q: lin(&format!("block{i}.sa.q")),
                    k: lin(&format!("block{i}.sa.k")),
                    v: lin(&format!("block{i}.sa.v")),
                    o: lin(&format!("block{i}.sa.o")),
                },
                ln1: LnV {
                    gain: lookup[format!("block{i}.ln1.gain").as_str()],
                    bias: lookup[format!("block{i}.ln1.bias").as_str()],
                },
                ff1: lin(&format!("block{i}.ff1")),
                ff2: lin(&format!("block{i}.ff2")),
                ln2: LnV {
                    gain: lookup[format!("block{i}.ln2.gain").as_str()],
                    bias: lookup[format!("block{i}.ln2.bias").as_str()],
                },
            })
            .collect();
        LmVars {
            token_embed: lookup["token_embed"],
            blocks,
            head: lin("head"),
            names,
        }
    }
}

/// The frozen LM: parameters plus the fingerprint taken at freeze time.
#[derive(Debug, Clone)]
pub struct FrozenLM {
    params: LmParams,
    fingerprint: String,
}

impl FrozenLM {
    pub fn freeze(params: LmParams) -> Self {
        let fingerprint = params.fingerprint();
        FrozenLM {
            params,
            fingerprint,
        }
    }

    pub fn cfg(&self) -> &LmConfig {
        &self.params.cfg
    }

    pub fn params(&self) -> &LmParams {
        &self.params
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    /// Embeds prompt tokens with the frozen table (no position encoding;
    /// positions are added over the full sequence at loss/decode time).
    pub fn embed_tokens(&self, ids: &[usize]) -> Result<Mat> {
        let mut out = Mat::zeros((ids.len(), self.params.cfg.hidden));
        for (r, &id) in ids.iter().enumerate() {
            if id >= self.params.cfg.vocab {
                return Err(Error::Data(format!("token id {id} out of lm vocab")));
            }
            out.row_mut(r).assign(&self.params.token_embed.row(id));
        }
        Ok(out)
    }
}

/// The concatenated prefix `[clip queries ; sam queries ; prompt embeddings]`
/// fed to the frozen LM.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixEmbedding {
    rows: Mat,
}

impl PrefixEmbedding {
    pub fn rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn values(&self) -> &Mat {
        &self.rows
    }
}

/// Concatenates the projected query blocks and the embedded prompt. Either
/// branch block may be absent for single-branch ablations.
pub fn build_prefix(
    lm: &FrozenLM,
    clip_proj: Option<&Mat>,
    sam_proj: Option<&Mat>,
    prompt_ids: &[usize],
) -> Result<PrefixEmbedding> {
    let d = lm.cfg().hidden;
    let mut parts: Vec<Mat> = Vec::new();
    for (tag, block) in [("clip", clip_proj), ("sam", sam_proj)] {
        if let Some(m) = block {
            if m.ncols() != d {
                return Err(Error::Shape(format!(
                    "{tag} projection width {} does not match lm width {d}",
                    m.ncols()
                )));
            }
            if m.nrows() > 0 {
                parts.push(m.clone());
            }
        }
    }
    if !prompt_ids.is_empty() {
        parts.push(lm.embed_tokens(prompt_ids)?);
    }
    let rows = if parts.is_empty() {
        Mat::zeros((0, d))
    } else {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        ndarray::concatenate(ndarray::Axis(0), &views).expect("widths checked above")
    };
    Ok(PrefixEmbedding { rows })
}

fn causal_mask(n: usize) -> Mat {
    Array2::from_shape_fn((n, n), |(i, j)| {
        if j <= i {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    })
}

/// Decoder forward over `[prefix rows ; embedded caption ids]` with a causal
/// mask. Returns the hidden states of all rows.
fn lm_states(
    tape: &mut Tape,
    vars: &LmVars,
    cfg: &LmConfig,
    prefix: Var,
    caption_ids: &[usize],
) -> Result<Var> {
    let p = tape.value(prefix).nrows();
    let total = p + caption_ids.len();
    if total > cfg.max_context {
        return Err(Error::Data(format!(
            "sequence of {total} rows exceeds lm context {}",
            cfg.max_context
        )));
    }
    let mut x = if caption_ids.is_empty() {
        prefix
    } else {
        let emb = tape.embed(vars.token_embed, caption_ids);
        if p > 0 {
            tape.concat_rows(&[prefix, emb])
        } else {
            emb
        }
    };
    x = tape.add_mat(x, &sinusoidal_pos(total, cfg.hidden));
    let mask = causal_mask(total);
    for block in &vars.blocks {
        let sa = crate::qformer::multi_head_attention(tape, x, x, &block.sa, cfg.heads, Some(&mask));
        let res = tape.add(x, sa);
        let x1 = tape.layer_norm(res, block.ln1.gain, block.ln1.bias);
        let h = block.ff1.apply(tape, x1);
        let h = tape.gelu(h);
        let ff = block.ff2.apply(tape, h);
        let res2 = tape.add(x1, ff);
        x = tape.layer_norm(res2, block.ln2.gain, block.ln2.bias);
        if !crate::tensor::all_finite(tape.value(x)) {
            return Err(Error::Numeric("non-finite activation in lm block".into()));
        }
    }
    Ok(x)
}

/// Tape-level LM loss: mean cross-entropy predicting caption token t+1 from
/// the state at the previous position, conditioned on `prefix`.
pub fn lm_loss_on_tape(
    tape: &mut Tape,
    vars: &LmVars,
    cfg: &LmConfig,
    prefix: Var,
    caption_ids: &[usize],
) -> Result<Var> {
    if caption_ids.len() < 2 {
        return Err(Error::Data(
            "caption must be BOS..EOS framed with at least two ids".into(),
        ));
    }
    let p = tape.value(prefix).nrows();
    let states = lm_states(tape, vars, cfg, prefix, caption_ids)?;
    // Caption rows start at p; state p+t predicts caption_ids[t+1].
    let rows = tape.slice_rows(states, p, p + caption_ids.len() - 1);
    let logits = vars.head.apply(tape, rows);
    let lp = tape.log_softmax_rows(logits);
    let nll = tape.nll_sum(lp, &caption_ids[1..]);
    Ok(tape.scale(nll, 1.0 / (caption_ids.len() - 1) as f64))
}

pub struct LmLossEval {
    pub loss: f64,
    /// d loss / d prefix rows.
    pub prefix_grad: Mat,
    /// Gradients recorded for LM parameters (all exactly zero when frozen).
    pub lm_grads: BTreeMap<String, Mat>,
}

/// Standalone LM loss with gradients flowing only into the prefix.
pub fn lm_loss(lm: &FrozenLM, prefix: &PrefixEmbedding, caption_ids: &[usize]) -> Result<LmLossEval> {
    let mut tape = Tape::new();
    let vars = lm.params.bind(&mut tape, false);
    let prefix_var = tape.leaf(prefix.values().clone());
    let loss = lm_loss_on_tape(&mut tape, &vars, lm.cfg(), prefix_var, caption_ids)?;
    let mut grads = tape.backward(loss)?;
    let prefix_grad = grads
        .take(prefix_var)
        .unwrap_or_else(|| Mat::zeros(prefix.values().raw_dim()));
    let lm_grads = vars
        .names
        .iter()
        .map(|(name, v)| {
            let g = grads
                .take(*v)
                .unwrap_or_else(|| Mat::zeros(tape.value(*v).raw_dim()));
            (name.clone(), g)
        })
        .collect();
    Ok(LmLossEval {
        loss: tape.scalar(loss),
        prefix_grad,
        lm_grads,
    })
}

/// Next-token log-probabilities after the given caption ids (value path used
/// by decoding; no gradients kept).
pub fn next_token_logprobs(
    lm: &FrozenLM,
    prefix: &PrefixEmbedding,
    caption_ids: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = lm.params.bind(&mut tape, false);
    let prefix_var = tape.constant(prefix.values().clone());
    let states = lm_states(&mut tape, &vars, lm.cfg(), prefix_var, caption_ids)?;
    let n = tape.value(states).nrows();
    let last = tape.slice_rows(states, n - 1, n);
    let logits = vars.head.apply(&mut tape, last);
    let lp = tape.log_softmax_rows(logits);
    Ok(tape.value(lp).row(0).to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum DecodeStrategy {
    Greedy,
    Beam { k: usize, alpha: f64 },
}

/// Decodes a caption from the prefix. Greedy argmax or beam search ranked by
/// length-normalized log-probability; exact ties prefer the lower token id.
pub fn generate(
    lm: &FrozenLM,
    prefix: &PrefixEmbedding,
    strategy: DecodeStrategy,
    max_len: usize,
    tokenizer: &Tokenizer,
) -> Result<String> {
    if max_len < 1 {
        return Err(Error::Config("max_len must be >= 1".into()));
    }
    let ids = match strategy {
        DecodeStrategy::Greedy => greedy_ids(lm, prefix, max_len)?,
        DecodeStrategy::Beam { k, alpha } => {
            if k < 1 {
                return Err(Error::Config("beam width must be >= 1".into()));
            }
            beam_ids(lm, prefix, k, alpha, max_len)?
        }
    };
    Ok(tokenizer.decode(&ids))
}

pub fn greedy_ids(lm: &FrozenLM, prefix: &PrefixEmbedding, max_len: usize) -> Result<Vec<usize>> {
    let mut ids = vec![BOS_ID];
    for _ in 0..max_len {
        let lp = next_token_logprobs(lm, prefix, &ids)?;
        // argmax with lower-id tie break: strict > keeps the first maximum.
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (tok, &v) in lp.iter().enumerate() {
            if v > best.0 {
                best = (v, tok);
            }
        }
        if best.1 == EOS_ID {
            break;
        }
        ids.push(best.1);
    }
    Ok(ids[1..].to_vec())
}

#[derive(Clone)]
struct Hypothesis {
    ids: Vec<usize>,
    logp: f64,
    finished: bool,
}

impl Hypothesis {
    fn score(&self, alpha: f64) -> f64 {
        let len = (self.ids.len().saturating_sub(1)).max(1) as f64;
        self.logp / len.powf(alpha)
    }
}

fn beam_ids(
    lm: &FrozenLM,
    prefix: &PrefixEmbedding,
    k: usize,
    alpha: f64,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut active = vec![Hypothesis {
        ids: vec![BOS_ID],
        logp: 0.0,
        finished: false,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        if active.is_empty() {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &active {
            let lp = next_token_logprobs(lm, prefix, &hyp.ids)?;
            for (tok, &v) in lp.iter().enumerate() {
                let mut ids = hyp.ids.clone();
                ids.push(tok);
                candidates.push(Hypothesis {
                    ids,
                    logp: hyp.logp + v,
                    finished: tok == EOS_ID,
                });
            }
        }
        // Rank by normalized score; exact ties fall back to the token
        // sequence, which prefers the lower token id at the divergence.
        candidates.sort_by(|a, b| {
            b.score(alpha)
                .total_cmp(&a.score(alpha))
                .then_with(|| a.ids.cmp(&b.ids))
        });
        active.clear();
        for cand in candidates {
            if cand.finished {
                if finished.len() < k {
                    finished.push(cand);
                }
            } else if active.len() < k {
                active.push(cand);
            }
            if active.len() >= k && finished.len() >= k {
                break;
            }
        }
    }
    // Unfinished hypotheses compete as-is when the length budget ran out.
    finished.extend(active);
    finished.sort_by(|a, b| {
        b.score(alpha)
            .total_cmp(&a.score(alpha))
            .then_with(|| a.ids.cmp(&b.ids))
    });
    let best = finished.first().expect("at least the root hypothesis");
    let ids: Vec<usize> = best.ids[1..]
        .iter()
        .copied()
        .filter(|&t| t != EOS_ID)
        .collect();
    Ok(ids)
}

/// Perplexity of the LM over framed caption sequences (no prefix).
pub fn perplexity(lm: &FrozenLM, corpus: &[Vec<usize>]) -> Result<f64> {
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    let empty = PrefixEmbedding {
        rows: Mat::zeros((0, lm.cfg().hidden)),
    };
    for ids in corpus {
        let eval = lm_loss(lm, &empty, ids)?;
        total_nll += eval.loss * (ids.len() - 1) as f64;
        total_tokens += ids.len() - 1;
    }
    Ok((total_nll / total_tokens as f64).exp())
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct LmTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        LmTrainConfig {
            steps: 600,
            batch_size: 16,
            lr: 1e-3,
        }
    }
}

/// Trains a small causal LM on captions alone (fixed step budget), then
/// freezes and fingerprints it.
pub fn pretrain_toy_lm(
    corpus: &[Vec<usize>],
    cfg: LmConfig,
    train: LmTrainConfig,
    seed: u64,
) -> Result<FrozenLM> {
    if corpus.is_empty() {
        return Err(Error::Data("lm pretraining corpus is empty".into()));
    }
    let mut params = LmParams::init(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x746f795f6c6d);
    let mut opt = crate::training::AdamW::new(train.lr, 0.9, 0.999, 0.01);
    let trainable: std::collections::BTreeSet<String> =
        params.named_mats().into_iter().map(|(n, _)| n).collect();
    for step in 0..train.steps {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, true);
        let empty = tape.constant(Mat::zeros((0, cfg.hidden)));
        let mut per_sample = Vec::new();
        let mut tokens = 0usize;
        for _ in 0..train.batch_size {
            let ids = &corpus[rng.random_range(0..corpus.len())];
            let loss = lm_loss_on_tape(&mut tape, &vars, &cfg, empty, ids)?;
            per_sample.push(tape.scale(loss, (ids.len() - 1) as f64));
            tokens += ids.len() - 1;
        }
        let mut total = per_sample[0];
        for s in &per_sample[1..] {
            total = tape.add(total, *s);
        }
        let loss = tape.scale(total, 1.0 / tokens as f64);
        if !tape.scalar(loss).is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite lm loss at step {step}"
            )));
        }
        let mut grads = tape.backward(loss)?;
        let grad_map: BTreeMap<String, Mat> = vars
            .names
            .iter()
            .filter_map(|(n, v)| grads.take(*v).map(|g| (n.clone(), g)))
            .collect();
        opt.step(&grad_map, &trainable, |f| params.visit_mut(f));
    }
    round_all(&mut params);
    Ok(FrozenLM::freeze(params))
}

fn round_all(params: &mut LmParams) {
    params.visit_mut(&mut |_, m| round_f32(m));
}

/// Unigram-model perplexity oracle: add-one-smoothed token frequencies from
/// the train corpus, evaluated over the same prediction events as the LM.
pub fn unigram_perplexity(train: &[Vec<usize>], heldout: &[Vec<usize>], vocab: usize) -> f64 {
    let mut counts = vec![1.0f64; vocab];
    let mut total = vocab as f64;
    for ids in train {
        for &id in &ids[1..] {
            counts[id] += 1.0;
            total += 1.0;
        }
    }
    let mut nll = 0.0;
    let mut events = 0usize;
    for ids in heldout {
        for &id in &ids[1..] {
            nll -= (counts[id] / total).ln();
            events += 1;
        }
    }
    (nll / events as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, grads_close};

    fn tiny_cfg() -> LmConfig {
        LmConfig {
            hidden: 8,
            blocks: 1,
            heads: 2,
            ff: 16,
            vocab: 12,
            max_context: 32,
        }
    }

    fn tiny_lm(seed: u64) -> FrozenLM {
        FrozenLM::freeze(LmParams::init(tiny_cfg(), seed).unwrap())
    }

    fn tiny_prefix(lm: &FrozenLM, seed: u64, rows: usize) -> PrefixEmbedding {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = randn_mat(&mut rng, rows, lm.cfg().hidden, 0.7);
        PrefixEmbedding { rows: m }
    }

    #[test]
    fn prefix_row_counts() {
        let lm = tiny_lm(1);
        let clip = Mat::zeros((4, 8));
        let sam = Mat::zeros((4, 8));
        let p = build_prefix(&lm, Some(&clip), Some(&sam), &[5, 6, 7]).unwrap();
        assert_eq!(p.rows(), 11);
        let p = build_prefix(&lm, Some(&clip), Some(&sam), &[]).unwrap();
        assert_eq!(p.rows(), 8);
        // Single-branch ablation: only the detail block present.
        let p = build_prefix(&lm, None, Some(&sam), &[5]).unwrap();
        assert_eq!(p.rows(), 5);
    }

    #[test]
    fn prefix_width_mismatch_errors() {
        let lm = tiny_lm(2);
        let bad = Mat::zeros((4, 9));
        assert!(build_prefix(&lm, Some(&bad), None, &[]).is_err());
    }

    #[test]
    fn zeroed_head_gives_ln_v() {
        let mut params = LmParams::init(tiny_cfg(), 3).unwrap();
        params.head.w.fill(0.0);
        params.head.b.fill(0.0);
        let lm = FrozenLM::freeze(params);
        let prefix = tiny_prefix(&lm, 10, 3);
        let eval = lm_loss(&lm, &prefix, &[1, 5, 6, 2]).unwrap();
        assert!((eval.loss - (12.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_get_zero_grads_and_prefix_does_not() {
        let lm = tiny_lm(4);
        let prefix = tiny_prefix(&lm, 11, 3);
        let eval = lm_loss(&lm, &prefix, &[1, 5, 6, 2]).unwrap();
        for (name, g) in &eval.lm_grads {
            assert!(g.iter().all(|&v| v == 0.0), "{name} received gradient");
        }
        assert!(eval.prefix_grad.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn prefix_gradient_matches_finite_differences() {
        let lm = tiny_lm(5);
        let prefix = tiny_prefix(&lm, 12, 3);
        let ids = [1usize, 5, 9, 2];
        let eval = lm_loss(&lm, &prefix, &ids).unwrap();
        let numeric = finite_diff_grad(
            |ps| {
                let p = PrefixEmbedding {
                    rows: ps[0].clone(),
                };
                lm_loss(&lm, &p, &ids).unwrap().loss
            },
            &[prefix.values().clone()],
            1e-5,
        );
        let (ok, worst) = grads_close(&[eval.prefix_grad], &numeric, 1e-4, 1e-8);
        assert!(ok, "worst rel err {worst}");
    }

    #[test]
    fn caption_logits_ignore_future_tokens_bit_exact() {
        let lm = tiny_lm(6);
        let prefix = tiny_prefix(&lm, 13, 4);
        let a = [1usize, 5, 6, 7, 8, 2];
        let mut b = a;
        b[4] = 9; // only position 4 differs
        // Log-probs for the next token after position 3 depend on ids[..=3].
        let lp_a = next_token_logprobs(&lm, &prefix, &a[..4]).unwrap();
        let lp_b = next_token_logprobs(&lm, &prefix, &b[..4]).unwrap();
        for (x, y) in lp_a.iter().zip(&lp_b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn eos_rigged_lm_generates_empty_caption() {
        let mut params = LmParams::init(tiny_cfg(), 7).unwrap();
        params.head.w.fill(0.0);
        params.head.b.fill(0.0);
        params.head.b[[0, EOS_ID]] = 50.0;
        let lm = FrozenLM::freeze(params);
        let prefix = tiny_prefix(&lm, 14, 3);
        let tok = Tokenizer::build(["a b c"], 1, 16).unwrap();
        let text = generate(&lm, &prefix, DecodeStrategy::Greedy, 8, &tok).unwrap();
        assert_eq!(text, "");
    }

    #[test]
    fn greedy_is_deterministic() {
        let lm = tiny_lm(8);
        let prefix = tiny_prefix(&lm, 15, 3);
        let a = greedy_ids(&lm, &prefix, 8).unwrap();
        let b = greedy_ids(&lm, &prefix, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn beam_one_equals_greedy_over_random_prefixes() {
        let lm = tiny_lm(9);
        for seed in 0..50 {
            let prefix = tiny_prefix(&lm, 100 + seed, 3);
            let g = greedy_ids(&lm, &prefix, 6).unwrap();
            let b = beam_ids(&lm, &prefix, 1, 0.7, 6).unwrap();
            assert_eq!(g, b, "seed {seed}");
        }
    }

    #[test]
    fn greedy_is_locally_optimal() {
        // At every step the greedy token's conditional log-prob is maximal,
        // so any single-token perturbation loses by the divergent position.
        let lm = tiny_lm(10);
        let prefix = tiny_prefix(&lm, 16, 3);
        let ids = greedy_ids(&lm, &prefix, 6).unwrap();
        let mut framed = vec![BOS_ID];
        framed.extend(&ids);
        for t in 0..ids.len() {
            let lp = next_token_logprobs(&lm, &prefix, &framed[..=t]).unwrap();
            let chosen = lp[framed[t + 1]];
            for (tok, &alt) in lp.iter().enumerate() {
                assert!(
                    chosen >= alt || tok == framed[t + 1],
                    "token {tok} beats greedy at position {t}"
                );
            }
        }
    }

    #[test]
    fn context_overflow_errors() {
        let lm = tiny_lm(11);
        let prefix = tiny_prefix(&lm, 17, 30);
        assert!(lm_loss(&lm, &prefix, &[1, 5, 6, 2]).is_err());
    }

    #[test]
    fn toy_lm_pretraining_is_deterministic_and_beats_unigram() {
        let corpus: Vec<Vec<usize>> = (0..40)
            .map(|i| {
                // Strongly templated sequences: id pattern repeats.
                let a = 5 + (i % 3);
                let b = 8 + (i % 2);
                vec![BOS_ID, a, b, a, EOS_ID]
            })
            .collect();
        let heldout: Vec<Vec<usize>> = (0..10)
            .map(|i| {
                let a = 5 + (i % 3);
                let b = 8 + (i % 2);
                vec![BOS_ID, a, b, a, EOS_ID]
            })
            .collect();
        let train = LmTrainConfig {
            steps: 150,
            batch_size: 8,
            lr: 1e-3,
        };
        let lm1 = pretrain_toy_lm(&corpus, tiny_cfg(), train, 42).unwrap();
        let lm2 = pretrain_toy_lm(&corpus, tiny_cfg(), train, 42).unwrap();
        assert_eq!(lm1.fingerprint(), lm2.fingerprint());
        let ppl = perplexity(&lm1, &heldout).unwrap();
        let uni = unigram_perplexity(&corpus, &heldout, 12);
        assert!(
            ppl < 0.8 * uni,
            "lm perplexity {ppl} not below 0.8 x unigram {uni}"
        );
    }
}
