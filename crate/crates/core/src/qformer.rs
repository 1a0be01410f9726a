//! Query transformer: learnable soft queries, masked self-attention over
//! `[queries ; text]`, cross-attention from query rows to image features, and
//! the three pre-training objectives (ITC, ITM, ITG).
//!
//! Cross-attention only touches the query rows; text rows pass through that
//! sublayer unchanged. Objective-specific self-attention masks control what
//! the two segments may see of each other.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::RngExt;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{CLS_ID, PAD_ID};
use crate::encoders::FeatureSeq;
use crate::tensor::{all_finite, randn_mat, sinusoidal_pos, Mat, Tape, Var};
use crate::{Error, Result};

// ─── Masks ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Itc,
    Itm,
    Itg,
    Caption,
}

/// Boolean self-attention mask over the `[queries ; text]` layout.
/// `allowed[i][j]` means position i may attend position j.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub mode: MaskMode,
    pub queries: usize,
    pub text: usize,
    matrix: Array2<bool>,
}

pub fn build_attention_mask(mode: MaskMode, m: usize, t: usize) -> Result<AttentionMask> {
    if m < 1 {
        return Err(Error::Config("mask needs at least one query".into()));
    }
    match mode {
        MaskMode::Caption if t != 0 => {
            return Err(Error::Config(
                "caption mode takes no text positions".into(),
            ))
        }
        MaskMode::Itc | MaskMode::Itm | MaskMode::Itg if t == 0 => {
            return Err(Error::Config(format!(
                "{mode:?} mode requires text positions"
            )))
        }
        _ => {}
    }
    let n = m + t;
    let matrix = Array2::from_shape_fn((n, n), |(i, j)| match mode {
        MaskMode::Caption | MaskMode::Itm => true,
        MaskMode::Itc => (i < m) == (j < m),
        MaskMode::Itg => {
            if i < m {
                j < m
            } else {
                // Text row m+t attends all queries plus text up to itself.
                j <= i
            }
        }
    });
    Ok(AttentionMask {
        mode,
        queries: m,
        text: t,
        matrix,
    })
}

impl AttentionMask {
    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.matrix[[i, j]]
    }

    /// Additive form for attention scores: 0 where allowed, -inf elsewhere.
    pub fn additive(&self) -> Mat {
        self.matrix
            .mapv(|a| if a { 0.0 } else { f64::NEG_INFINITY })
    }

    pub fn row(&self, i: usize) -> Vec<bool> {
        self.matrix.row(i).to_vec()
    }
}

// ─── Parameters ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QFormerConfig {
    /// Soft query count M.
    pub queries: usize,
    /// Hidden width D, shared with the branch text embedding table.
    pub hidden: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ff: usize,
    /// Shared contrastive projection dimension for the ITC heads.
    pub contrast_dim: usize,
    pub tau_init: f64,
    /// Image feature width this branch cross-attends to (C or S).
    pub feat_dims: usize,
    pub vocab: usize,
    /// Frozen LM embedding width the output projection maps into.
    pub lm_dim: usize,
}

impl QFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.queries < 1 {
            return Err(Error::Config("need at least one query".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearP {
    pub w: Mat,
    pub b: Mat,
}

impl LinearP {
    fn init(rng: &mut ChaCha8Rng, din: usize, dout: usize) -> Self {
        LinearP {
            w: randn_mat(rng, din, dout, 1.0 / (din as f64).sqrt()),
            b: Mat::zeros((1, dout)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnP {
    pub q: LinearP,
    pub k: LinearP,
    pub v: LinearP,
    pub o: LinearP,
}

impl AttnP {
    fn init(rng: &mut ChaCha8Rng, din_q: usize, din_kv: usize, d: usize) -> Self {
        AttnP {
            q: LinearP::init(rng, din_q, d),
            k: LinearP::init(rng, din_kv, d),
            v: LinearP::init(rng, din_kv, d),
            o: LinearP::init(rng, d, d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LnP {
    pub gain: Mat,
    pub bias: Mat,
}

impl LnP {
    fn init(d: usize) -> Self {
        LnP {
            gain: Mat::from_elem((1, d), 1.0),
            bias: Mat::zeros((1, d)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockP {
    pub sa: AttnP,
    pub ln1: LnP,
    pub ca: AttnP,
    pub ln2: LnP,
    pub ff1: LinearP,
    pub ff2: LinearP,
    pub ln3: LnP,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QFormerParams {
    pub cfg: QFormerConfig,
    pub query_bank: Mat,
    pub text_embed: Mat,
    pub blocks: Vec<BlockP>,
    pub itc_q: LinearP,
    pub itc_t: LinearP,
    pub itm: LinearP,
    pub itg: LinearP,
    pub tau: Mat,
    pub out_proj: LinearP,
}

impl QFormerParams {
    pub fn init(cfg: QFormerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.hidden;
        let blocks = (0..cfg.blocks)
            .map(|_| BlockP {
                sa: AttnP::init(&mut rng, d, d, d),
                ln1: LnP::init(d),
                ca: AttnP::init(&mut rng, d, cfg.feat_dims, d),
                ln2: LnP::init(d),
                ff1: LinearP::init(&mut rng, d, cfg.ff),
                ff2: LinearP::init(&mut rng, cfg.ff, d),
                ln3: LnP::init(d),
            })
            .collect();
        Ok(QFormerParams {
            cfg,
            query_bank: randn_mat(&mut rng, cfg.queries, d, 0.5),
            text_embed: randn_mat(&mut rng, cfg.vocab, d, 0.5),
            blocks,
            itc_q: LinearP::init(&mut rng, d, cfg.contrast_dim),
            itc_t: LinearP::init(&mut rng, d, cfg.contrast_dim),
            itm: LinearP::init(&mut rng, d, 1),
            itg: LinearP::init(&mut rng, d, cfg.vocab),
            tau: Mat::from_elem((1, 1), cfg.tau_init as f32 as f64),
            out_proj: LinearP::init(&mut rng, d, cfg.lm_dim),
        })
    }

    /// Visits every parameter tensor in a fixed canonical order.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Mat)) {
        f("query_bank".into(), &self.query_bank);
        f("text_embed".into(), &self.text_embed);
        for (i, b) in self.blocks.iter().enumerate() {
            for (tag, attn) in [("sa", &b.sa), ("ca", &b.ca)] {
                for (lin_tag, lin) in
                    [("q", &attn.q), ("k", &attn.k), ("v", &attn.v), ("o", &attn.o)]
                {
                    f(format!("block{i}.{tag}.{lin_tag}.w"), &lin.w);
                    f(format!("block{i}.{tag}.{lin_tag}.b"), &lin.b);
                }
            }
            f(format!("block{i}.ln1.gain"), &b.ln1.gain);
            f(format!("block{i}.ln1.bias"), &b.ln1.bias);
            f(format!("block{i}.ln2.gain"), &b.ln2.gain);
            f(format!("block{i}.ln2.bias"), &b.ln2.bias);
            f(format!("block{i}.ff1.w"), &b.ff1.w);
            f(format!("block{i}.ff1.b"), &b.ff1.b);
            f(format!("block{i}.ff2.w"), &b.ff2.w);
            f(format!("block{i}.ff2.b"), &b.ff2.b);
            f(format!("block{i}.ln3.gain"), &b.ln3.gain);
            f(format!("block{i}.ln3.bias"), &b.ln3.bias);
        }
        for (tag, lin) in [
            ("itc_q", &self.itc_q),
            ("itc_t", &self.itc_t),
            ("itm", &self.itm),
            ("itg", &self.itg),
            ("out_proj", &self.out_proj),
        ] {
            f(format!("{tag}.w"), &lin.w);
            f(format!("{tag}.b"), &lin.b);
        }
        f("tau".into(), &self.tau);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Mat)) {
        f("query_bank".into(), &mut self.query_bank);
        f("text_embed".into(), &mut self.text_embed);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (tag, attn) in [("sa", &mut b.sa), ("ca", &mut b.ca)] {
                for (lin_tag, lin) in [
                    ("q", &mut attn.q),
                    ("k", &mut attn.k),
                    ("v", &mut attn.v),
                    ("o", &mut attn.o),
                ] {
                    f(format!("block{i}.{tag}.{lin_tag}.w"), &mut lin.w);
                    f(format!("block{i}.{tag}.{lin_tag}.b"), &mut lin.b);
                }
            }
            f(format!("block{i}.ln1.gain"), &mut b.ln1.gain);
            f(format!("block{i}.ln1.bias"), &mut b.ln1.bias);
            f(format!("block{i}.ln2.gain"), &mut b.ln2.gain);
            f(format!("block{i}.ln2.bias"), &mut b.ln2.bias);
            f(format!("block{i}.ff1.w"), &mut b.ff1.w);
            f(format!("block{i}.ff1.b"), &mut b.ff1.b);
            f(format!("block{i}.ff2.w"), &mut b.ff2.w);
            f(format!("block{i}.ff2.b"), &mut b.ff2.b);
            f(format!("block{i}.ln3.gain"), &mut b.ln3.gain);
            f(format!("block{i}.ln3.bias"), &mut b.ln3.bias);
        }
        for (tag, lin) in [
            ("itc_q", &mut self.itc_q),
            ("itc_t", &mut self.itc_t),
            ("itm", &mut self.itm),
            ("itg", &mut self.itg),
            ("out_proj", &mut self.out_proj),
        ] {
            f(format!("{tag}.w"), &mut lin.w);
            f(format!("{tag}.b"), &mut lin.b);
        }
        f("tau".into(), &mut self.tau);
    }

    pub fn named_mats(&self) -> Vec<(String, Mat)> {
        let mut out = Vec::new();
        self.visit(&mut |name, m| out.push((name, m.clone())));
        out
    }

    /// Overwrites parameters from a slice in `visit` order (FD harness).
    pub fn assign_from(&mut self, mats: &[Mat]) {
        let mut idx = 0;
        self.visit_mut(&mut |_, m| {
            *m = mats[idx].clone();
            idx += 1;
        });
        assert_eq!(idx, mats.len(), "parameter count mismatch");
    }

    /// Affine map to the frozen LM width: the output layer of the branch.
    pub fn project_queries(&self, query_states: &Mat) -> Mat {
        query_states.dot(&self.out_proj.w) + &self.out_proj.b
    }

    /// Overwrites every tensor from `map` entries keyed `prefix + name`,
    /// checking shapes. Missing or misshapen blobs are corrupt-checkpoint
    /// errors.
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

// ─── Tape binding ───────────────────────────────────────────────────────────

#[derive(Clone, Copy)]
pub struct LinearV {
    pub w: Var,
    pub b: Var,
}

impl LinearV {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let xw = tape.matmul(x, self.w);
        tape.add_row(xw, self.b)
    }
}

#[derive(Clone, Copy)]
pub struct AttnV {
    pub q: LinearV,
    pub k: LinearV,
    pub v: LinearV,
    pub o: LinearV,
}

#[derive(Clone, Copy)]
pub struct LnV {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Copy)]
pub struct BlockV {
    pub sa: AttnV,
    pub ln1: LnV,
    pub ca: AttnV,
    pub ln2: LnV,
    pub ff1: LinearV,
    pub ff2: LinearV,
    pub ln3: LnV,
}

pub struct QFormerVars {
    pub cfg: QFormerConfig,
    pub query_bank: Var,
    pub text_embed: Var,
    pub blocks: Vec<BlockV>,
    pub itc_q: LinearV,
    pub itc_t: LinearV,
    pub itm: LinearV,
    pub itg: LinearV,
    pub tau: Var,
    pub out_proj: LinearV,
    /// `(name, var)` in canonical visit order, for gradient extraction.
    pub names: Vec<(String, Var)>,
}

impl QFormerParams {
    /// Binds every tensor onto the tape. `trainable = false` freezes the
    /// whole branch (gradients are recorded as exactly zero).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> QFormerVars {
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
        let attn = |tag: &str| AttnV {
            q: lin(&format!("{tag}.q")),
            k: lin(&format!("{tag}.k")),
            v: lin(&format!("{tag}.v")),
            o: lin(&format!("{tag}.o")),
        };
        let ln = |tag: &str| LnV {
            gain: lookup[format!("{tag}.gain").as_str()],
            bias: lookup[format!("{tag}.bias").as_str()],
        };
        let blocks = (0..self.cfg.blocks)
            .map(|i| BlockV {
                sa: attn(&format!("block{i}.sa")),
                ln1: ln(&format!("block{i}.ln1")),
                ca: attn(&format!("block{i}.ca")),
                ln2: ln(&format!("block{i}.ln2")),
                ff1: lin(&format!("block{i}.ff1")),
                ff2: lin(&format!("block{i}.ff2")),
                ln3: ln(&format!("block{i}.ln3")),
            })
            .collect();
        QFormerVars {
            cfg: self.cfg,
            query_bank: lookup["query_bank"],
            text_embed: lookup["text_embed"],
            blocks,
            itc_q: lin("itc_q"),
            itc_t: lin("itc_t"),
            itm: lin("itm"),
            itg: lin("itg"),
            tau: lookup["tau"],
            out_proj: lin("out_proj"),
            names,
        }
    }
}

/// Multi-head attention: rows of `x` attend rows of `kv`. The additive mask,
/// when present, is applied to every head's score matrix.
pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    kv: Var,
    attn: &AttnV,
    heads: usize,
    mask: Option<&Mat>,
) -> Var {
    let q = attn.q.apply(tape, x);
    let k = attn.k.apply(tape, kv);
    let v = attn.v.apply(tape, kv);
    let d = tape.value(q).ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, c0, c1);
        let kh = tape.slice_cols(k, c0, c1);
        let vh = tape.slice_cols(v, c0, c1);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add_mat(scores, m);
        }
        let probs = tape.softmax_rows(scores);
        ctx.push(tape.matmul(probs, vh));
    }
    let joined = tape.concat_cols(&ctx);
    attn.o.apply(tape, joined)
}

/// One forward pass over `[queries ; text]`.
///
/// Returns `(query_states M x D, text_states T x D)`; text states are absent
/// in caption mode. Text rows skip the cross-attention sublayer entirely.
pub fn qformer_forward(
    tape: &mut Tape,
    vars: &QFormerVars,
    image_feats: &FeatureSeq,
    text_ids: Option<&[usize]>,
    mode: MaskMode,
) -> Result<(Var, Option<Var>)> {
    let cfg = &vars.cfg;
    if image_feats.dims() != cfg.feat_dims {
        return Err(Error::Shape(format!(
            "image features have {} dims, branch expects {}",
            image_feats.dims(),
            cfg.feat_dims
        )));
    }
    let m = cfg.queries;
    let t = text_ids.map_or(0, |ids| ids.len());
    let mask = build_attention_mask(mode, m, t)?.additive();
    let feats = tape.constant(image_feats.values().clone());

    let mut x = match text_ids {
        Some(ids) if !ids.is_empty() => {
            if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab) {
                return Err(Error::Data(format!(
                    "token id {bad} out of vocabulary ({})",
                    cfg.vocab
                )));
            }
            let emb = tape.embed(vars.text_embed, ids);
            let emb = tape.add_mat(emb, &sinusoidal_pos(ids.len(), cfg.hidden));
            tape.concat_rows(&[vars.query_bank, emb])
        }
        _ => vars.query_bank,
    };

    for (i, block) in vars.blocks.iter().enumerate() {
        let sa = multi_head_attention(tape, x, x, &block.sa, cfg.heads, Some(&mask));
        let res = tape.add(x, sa);
        let x1 = tape.layer_norm(res, block.ln1.gain, block.ln1.bias);

        let xq = if t > 0 { tape.slice_rows(x1, 0, m) } else { x1 };
        let ca = multi_head_attention(tape, xq, feats, &block.ca, cfg.heads, None);
        let resq = tape.add(xq, ca);
        let xq2 = tape.layer_norm(resq, block.ln2.gain, block.ln2.bias);
        let joined = if t > 0 {
            let xt = tape.slice_rows(x1, m, m + t);
            tape.concat_rows(&[xq2, xt])
        } else {
            xq2
        };

        let h = block.ff1.apply(tape, joined);
        let h = tape.gelu(h);
        let ff = block.ff2.apply(tape, h);
        let res_ff = tape.add(joined, ff);
        x = tape.layer_norm(res_ff, block.ln3.gain, block.ln3.bias);

        if !all_finite(tape.value(x)) {
            return Err(Error::Numeric(format!(
                "non-finite activation in block {i}"
            )));
        }
    }

    let q_states = if t > 0 { tape.slice_rows(x, 0, m) } else { x };
    let t_states = if t > 0 {
        Some(tape.slice_rows(x, m, m + t))
    } else {
        None
    };
    Ok((q_states, t_states))
}

// ─── Losses ─────────────────────────────────────────────────────────────────

/// One training pair: image features plus the BOS..EOS framed caption ids.
pub type Pair<'a> = (&'a FeatureSeq, &'a [usize]);

/// Loss value plus gradients keyed by canonical parameter name.
pub struct LossEval {
    pub loss: f64,
    pub grads: BTreeMap<String, Mat>,
}

fn extract_grads(tape: &Tape, vars: &QFormerVars, loss: Var) -> Result<BTreeMap<String, Mat>> {
    let mut grads = tape.backward(loss)?;
    Ok(vars
        .names
        .iter()
        .filter_map(|(name, v)| grads.take(*v).map(|g| (name.clone(), g)))
        .collect())
}

/// Symmetric InfoNCE over a B x B similarity matrix: mean of the image-to-text
/// and text-to-image cross-entropies with the diagonal as targets.
pub fn contrastive_loss_from_similarities(
    tape: &mut Tape,
    sims: &[Var],
    b: usize,
    tau: Var,
) -> Var {
    let s = tape.assemble_scalars(sims, b, b);
    let inv_tau = tape.recip(tau);
    let logits = tape.mul_scalar(s, inv_tau);
    let diag: Vec<usize> = (0..b).collect();
    let lp_i2t = tape.log_softmax_rows(logits);
    let nll_i2t = tape.nll_sum(lp_i2t, &diag);
    let logits_t = tape.transpose(logits);
    let lp_t2i = tape.log_softmax_rows(logits_t);
    let nll_t2i = tape.nll_sum(lp_t2i, &diag);
    let total = tape.add(nll_i2t, nll_t2i);
    tape.scale(total, 0.5 / b as f64)
}

fn itc_loss_on_tape(tape: &mut Tape, vars: &QFormerVars, batch: &[Pair]) -> Result<Var> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Config(format!("itc needs a batch of >= 2, got {b}")));
    }
    let mut query_sides = Vec::with_capacity(b);
    let mut text_sides = Vec::with_capacity(b);
    for (feats, ids) in batch {
        let mut itc_ids = Vec::with_capacity(ids.len() + 1);
        itc_ids.push(CLS_ID);
        itc_ids.extend_from_slice(ids);
        let (q, t) = qformer_forward(tape, vars, feats, Some(&itc_ids), MaskMode::Itc)?;
        let qp = vars.itc_q.apply(tape, q);
        query_sides.push(tape.l2_normalize_rows(qp));
        let t = t.expect("itc mode always has text states");
        let cls = tape.slice_rows(t, 0, 1);
        let tp = vars.itc_t.apply(tape, cls);
        text_sides.push(tape.l2_normalize_rows(tp));
    }
    // s(I_i, T_j) = max over queries of cosine similarity.
    let mut sims = Vec::with_capacity(b * b);
    for qi in &query_sides {
        for tj in &text_sides {
            let tt = tape.transpose(*tj);
            let cos = tape.matmul(*qi, tt);
            sims.push(tape.max_all(cos));
        }
    }
    Ok(contrastive_loss_from_similarities(tape, &sims, b, vars.tau))
}

/// Image-text contrastive loss over in-batch negatives.
pub fn itc_loss(params: &QFormerParams, batch: &[Pair]) -> Result<LossEval> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let loss = itc_loss_on_tape(&mut tape, &vars, batch)?;
    Ok(LossEval {
        loss: tape.scalar(loss),
        grads: extract_grads(&tape, &vars, loss)?,
    })
}

/// Deterministic in-batch negative index for each sample: uniform over the
/// other samples, driven by `neg_seed`.
pub fn itm_negatives(b: usize, neg_seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(neg_seed);
    (0..b)
        .map(|i| {
            let mut j = rng.random_range(0..b - 1);
            if j >= i {
                j += 1;
            }
            j
        })
        .collect()
}

fn itm_loss_on_tape(
    tape: &mut Tape,
    vars: &QFormerVars,
    batch: &[Pair],
    neg_seed: u64,
) -> Result<Var> {
    let b = batch.len();
    if b < 2 {
        return Err(Error::Config(format!("itm needs a batch of >= 2, got {b}")));
    }
    let negatives = itm_negatives(b, neg_seed);
    let mut logits = Vec::with_capacity(2 * b);
    let mut labels = Vec::with_capacity(2 * b);
    for (i, (feats, ids)) in batch.iter().enumerate() {
        for (text, label) in [(*ids, 1.0), (batch[negatives[i]].1, 0.0)] {
            let (q, _) = qformer_forward(tape, vars, feats, Some(text), MaskMode::Itm)?;
            let per_query = vars.itm.apply(tape, q);
            logits.push(tape.mean_all(per_query));
            labels.push(label);
        }
    }
    let col = tape.assemble_scalars(&logits, 2 * b, 1);
    Ok(tape.bce_with_logits_mean(col, &labels))
}

/// Image-text matching: binary head averaged over query states, positives
/// plus one uniform in-batch negative per sample.
pub fn itm_loss(params: &QFormerParams, batch: &[Pair], neg_seed: u64) -> Result<LossEval> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let loss = itm_loss_on_tape(&mut tape, &vars, batch, neg_seed)?;
    Ok(LossEval {
        loss: tape.scalar(loss),
        grads: extract_grads(&tape, &vars, loss)?,
    })
}

fn itg_loss_on_tape(tape: &mut Tape, vars: &QFormerVars, batch: &[Pair]) -> Result<Var> {
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut total_tokens = 0usize;
    for (feats, ids) in batch {
        if ids.iter().all(|&id| id == PAD_ID) {
            return Err(Error::Data("all-PAD caption in itg batch".into()));
        }
        if ids.len() < 2 {
            return Err(Error::Data(
                "itg caption must have BOS..EOS framing".into(),
            ));
        }
        let (_, t_states) = qformer_forward(tape, vars, feats, Some(ids), MaskMode::Itg)?;
        let t_states = t_states.expect("itg mode always has text states");
        // State at position t predicts token t+1; PAD targets are excluded.
        let keep: Vec<usize> = (0..ids.len() - 1)
            .filter(|&t| ids[t + 1] != PAD_ID)
            .collect();
        if keep.is_empty() {
            return Err(Error::Data("caption has no predictable tokens".into()));
        }
        let rows = if keep.len() == ids.len() - 1 {
            tape.slice_rows(t_states, 0, ids.len() - 1)
        } else {
            let picked: Vec<Var> = keep
                .iter()
                .map(|&t| tape.slice_rows(t_states, t, t + 1))
                .collect();
            tape.concat_rows(&picked)
        };
        let logits = vars.itg.apply(tape, rows);
        let lp = tape.log_softmax_rows(logits);
        let targets: Vec<usize> = keep.iter().map(|&t| ids[t + 1]).collect();
        per_sample.push(tape.nll_sum(lp, &targets));
        total_tokens += targets.len();
    }
    let mut total = per_sample[0];
    for s in &per_sample[1..] {
        total = tape.add(total, *s);
    }
    Ok(tape.scale(total, 1.0 / total_tokens as f64))
}

/// Image-grounded text generation: teacher-forced next-token cross-entropy.
pub fn itg_loss(params: &QFormerParams, batch: &[Pair]) -> Result<LossEval> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let loss = itg_loss_on_tape(&mut tape, &vars, batch)?;
    Ok(LossEval {
        loss: tape.scalar(loss),
        grads: extract_grads(&tape, &vars, loss)?,
    })
}

pub struct JointLossEval {
    pub itc: f64,
    pub itm: f64,
    pub itg: f64,
    pub total: f64,
    pub grads: BTreeMap<String, Mat>,
}

/// ITC + ITM + ITG with unit weights on one shared tape (single backward).
pub fn joint_pretrain_loss(
    params: &QFormerParams,
    batch: &[Pair],
    neg_seed: u64,
) -> Result<JointLossEval> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, true);
    let itc = itc_loss_on_tape(&mut tape, &vars, batch)?;
    let itm = itm_loss_on_tape(&mut tape, &vars, batch, neg_seed)?;
    let itg = itg_loss_on_tape(&mut tape, &vars, batch)?;
    let partial = tape.add(itc, itm);
    let total = tape.add(partial, itg);
    Ok(JointLossEval {
        itc: tape.scalar(itc),
        itm: tape.scalar(itm),
        itg: tape.scalar(itg),
        total: tape.scalar(total),
        grads: extract_grads(&tape, &vars, total)?,
    })
}

/// Caption-mode forward on a fresh tape, returning plain query state values.
pub fn caption_query_states(params: &QFormerParams, feats: &FeatureSeq) -> Result<Mat> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let (q, _) = qformer_forward(&mut tape, &vars, feats, None, MaskMode::Caption)?;
    Ok(tape.value(q).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_grad, grads_close};

    fn tiny_cfg() -> QFormerConfig {
        QFormerConfig {
            queries: 2,
            hidden: 8,
            blocks: 1,
            heads: 2,
            ff: 16,
            contrast_dim: 4,
            tau_init: 0.07,
            feat_dims: 6,
            vocab: 12,
            lm_dim: 8,
        }
    }

    fn feats(seed: u64, rows: usize, dims: usize) -> FeatureSeq {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureSeq::new(randn_mat(&mut rng, rows, dims, 1.0)).unwrap()
    }

    fn mask_rows(mode: MaskMode, m: usize, t: usize) -> Vec<String> {
        let mask = build_attention_mask(mode, m, t).unwrap();
        (0..m + t)
            .map(|i| {
                mask.row(i)
                    .iter()
                    .map(|&b| if b { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn itg_mask_is_multimodal_causal() {
        assert_eq!(
            mask_rows(MaskMode::Itg, 2, 3),
            vec!["11000", "11000", "11100", "11110", "11111"]
        );
    }

    #[test]
    fn itc_mask_is_block_diagonal() {
        assert_eq!(
            mask_rows(MaskMode::Itc, 2, 2),
            vec!["1100", "1100", "0011", "0011"]
        );
    }

    #[test]
    fn itm_mask_is_all_true() {
        assert_eq!(mask_rows(MaskMode::Itm, 1, 1), vec!["11", "11"]);
    }

    #[test]
    fn caption_mask_is_queries_only() {
        assert_eq!(mask_rows(MaskMode::Caption, 3, 0), vec!["111"; 3]);
    }

    #[test]
    fn mask_preconditions() {
        assert!(build_attention_mask(MaskMode::Itc, 2, 0).is_err());
        assert!(build_attention_mask(MaskMode::Itm, 2, 0).is_err());
        assert!(build_attention_mask(MaskMode::Itg, 2, 0).is_err());
        assert!(build_attention_mask(MaskMode::Caption, 2, 1).is_err());
        assert!(build_attention_mask(MaskMode::Itc, 0, 2).is_err());
        // Every row keeps at least one allowed edge; itg text row m+t allows
        // exactly m+t+1 edges.
        for (mode, t) in [
            (MaskMode::Itc, 3),
            (MaskMode::Itm, 3),
            (MaskMode::Itg, 3),
            (MaskMode::Caption, 0),
        ] {
            let mask = build_attention_mask(mode, 2, t).unwrap();
            for i in 0..2 + t {
                assert!(mask.row(i).iter().any(|&b| b), "{mode:?} row {i}");
            }
            if mode == MaskMode::Itg {
                for tt in 0..t {
                    let row_sum = mask.row(2 + tt).iter().filter(|&&b| b).count();
                    assert_eq!(row_sum, 2 + tt + 1);
                }
            }
        }
    }

    #[test]
    fn caption_mode_shapes() {
        let params = QFormerParams::init(tiny_cfg(), 5).unwrap();
        let f = feats(1, 3, 6);
        let q = caption_query_states(&params, &f).unwrap();
        assert_eq!(q.dim(), (2, 8));
    }

    #[test]
    fn itg_causality_and_query_isolation_bit_exact() {
        let params = QFormerParams::init(tiny_cfg(), 6).unwrap();
        let f = feats(2, 3, 6);
        let run = |ids: &[usize]| {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, false);
            let (q, t) =
                qformer_forward(&mut tape, &vars, &f, Some(ids), MaskMode::Itg).unwrap();
            (tape.value(q).clone(), tape.value(t.unwrap()).clone())
        };
        let base = [1usize, 5, 6, 7, 2];
        let (q0, t0) = run(&base);
        // Perturb the token at position 3: states at positions >= 3 may move,
        // earlier ones and the query states may not.
        let mut changed = base;
        changed[3] = 9;
        let (q1, t1) = run(&changed);
        assert_eq!(q0, q1, "query states must ignore text in itg mode");
        for pos in 0..3 {
            for c in 0..8 {
                assert_eq!(
                    t0[[pos, c]].to_bits(),
                    t1[[pos, c]].to_bits(),
                    "text state at position {pos} changed"
                );
            }
        }
        assert_ne!(
            t0.row(3).to_owned(),
            t1.row(3).to_owned(),
            "perturbed position should change"
        );
    }

    #[test]
    fn itc_text_states_ignore_image_bit_exact() {
        let params = QFormerParams::init(tiny_cfg(), 7).unwrap();
        let ids = [3usize, 1, 5, 6, 2];
        let run = |f: &FeatureSeq| {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape, false);
            let (q, t) =
                qformer_forward(&mut tape, &vars, f, Some(&ids), MaskMode::Itc).unwrap();
            (tape.value(q).clone(), tape.value(t.unwrap()).clone())
        };
        let (q0, t0) = run(&feats(3, 3, 6));
        let (q1, t1) = run(&feats(4, 3, 6));
        assert_ne!(q0, q1, "query states must see the image");
        for (a, b) in t0.iter().zip(t1.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn dims_mismatch_errors() {
        let params = QFormerParams::init(tiny_cfg(), 8).unwrap();
        let bad = feats(5, 3, 7);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        assert!(qformer_forward(&mut tape, &vars, &bad, None, MaskMode::Caption).is_err());
    }

    fn tiny_batch(seed: u64) -> (Vec<FeatureSeq>, Vec<Vec<usize>>) {
        let f = vec![feats(seed, 3, 6), feats(seed + 1, 3, 6)];
        let ids = vec![vec![1usize, 5, 7, 2], vec![1usize, 8, 9, 6, 2]];
        (f, ids)
    }

    fn as_pairs<'a>(f: &'a [FeatureSeq], ids: &'a [Vec<usize>]) -> Vec<Pair<'a>> {
        f.iter().zip(ids).map(|(a, b)| (a, b.as_slice())).collect()
    }

    #[test]
    fn itc_uniform_similarities_give_ln_b() {
        // Identical images and identical captions: all B x B similarities
        // coincide, so both softmaxes are uniform.
        let params = QFormerParams::init(tiny_cfg(), 9).unwrap();
        let f = feats(11, 3, 6);
        let feats_batch = vec![f.clone(), f];
        let ids = vec![vec![1usize, 5, 2], vec![1usize, 5, 2]];
        let pairs = as_pairs(&feats_batch, &ids);
        let eval = itc_loss(&params, &pairs).unwrap();
        assert!(
            (eval.loss - (2.0f64).ln()).abs() < 1e-12,
            "loss {} vs ln 2",
            eval.loss
        );
    }

    #[test]
    fn itc_saturated_similarities_vanish() {
        // Rigged similarity matrix: +1 diagonal, -1 off-diagonal, tau 0.01.
        let mut tape = Tape::new();
        let tau = tape.leaf(Mat::from_elem((1, 1), 0.01));
        let b = 3;
        let sims: Vec<Var> = (0..b * b)
            .map(|k| {
                let v = if k / b == k % b { 1.0 } else { -1.0 };
                tape.scalar_const(v)
            })
            .collect();
        let loss = contrastive_loss_from_similarities(&mut tape, &sims, b, tau);
        assert!(tape.scalar(loss) < 1e-8, "loss {}", tape.scalar(loss));
    }

    #[test]
    fn itc_batch_order_invariance() {
        let cfg = tiny_cfg();
        let params = QFormerParams::init(cfg, 10).unwrap();
        let f = vec![feats(20, 3, 6), feats(21, 3, 6), feats(22, 3, 6)];
        let ids = vec![
            vec![1usize, 5, 2],
            vec![1usize, 6, 7, 2],
            vec![1usize, 8, 2],
        ];
        let pairs = as_pairs(&f, &ids);
        let l0 = itc_loss(&params, &pairs).unwrap().loss;
        let permuted: Vec<Pair> = vec![pairs[2], pairs[0], pairs[1]];
        let l1 = itc_loss(&params, &permuted).unwrap().loss;
        assert!((l0 - l1).abs() < 1e-10, "{l0} vs {l1}");
    }

    #[test]
    fn itm_zeroed_head_gives_ln_2() {
        let mut params = QFormerParams::init(tiny_cfg(), 11).unwrap();
        params.itm.w.fill(0.0);
        params.itm.b.fill(0.0);
        let (f, ids) = tiny_batch(30);
        let eval = itm_loss(&params, &as_pairs(&f, &ids), 77).unwrap();
        assert!((eval.loss - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn itm_label_flip_symmetry() {
        // BCE(z, y) == BCE(-z, 1-y): negating logits and flipping labels
        // leaves the loss unchanged.
        let mut tape = Tape::new();
        let z = Mat::from_shape_vec((3, 1), vec![0.3, -1.2, 2.0]).unwrap();
        let a = tape.constant(z.clone());
        let la = tape.bce_with_logits_mean(a, &[1.0, 0.0, 1.0]);
        let b = tape.constant(-z);
        let lb = tape.bce_with_logits_mean(b, &[0.0, 1.0, 0.0]);
        assert!((tape.scalar(la) - tape.scalar(lb)).abs() < 1e-12);
    }

    #[test]
    fn itg_zeroed_head_gives_ln_v() {
        let mut params = QFormerParams::init(tiny_cfg(), 12).unwrap();
        params.itg.w.fill(0.0);
        params.itg.b.fill(0.0);
        let (f, ids) = tiny_batch(31);
        let eval = itg_loss(&params, &as_pairs(&f, &ids)).unwrap();
        assert!((eval.loss - (12.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn itg_overfits_single_sample_monotonically() {
        // 50 plain gradient steps at lr 1e-3 on one sample: strictly
        // decreasing loss.
        let mut params = QFormerParams::init(tiny_cfg(), 13).unwrap();
        let f = vec![feats(40, 3, 6)];
        let ids = vec![vec![1usize, 5, 9, 6, 2]];
        let pairs = as_pairs(&f, &ids);
        let mut last = f64::INFINITY;
        for _ in 0..50 {
            let eval = itg_loss(&params, &pairs).unwrap();
            assert!(
                eval.loss < last,
                "loss did not decrease: {} -> {}",
                last,
                eval.loss
            );
            last = eval.loss;
            params.visit_mut(&mut |name, m| {
                if let Some(g) = eval.grads.get(&name) {
                    *m -= &g.mapv(|v| v * 1e-3);
                }
            });
        }
    }

    #[test]
    fn batch_too_small_errors() {
        let params = QFormerParams::init(tiny_cfg(), 14).unwrap();
        let f = vec![feats(50, 3, 6)];
        let ids = vec![vec![1usize, 5, 2]];
        let pairs = as_pairs(&f, &ids);
        assert!(itc_loss(&params, &pairs).is_err());
        assert!(itm_loss(&params, &pairs, 0).is_err());
    }

    #[test]
    fn project_queries_contracts() {
        let cfg = tiny_cfg();
        let mut params = QFormerParams::init(cfg, 15).unwrap();
        let q = Mat::from_shape_fn((cfg.queries, cfg.hidden), |(i, j)| {
            (i * 8 + j) as f64 * 0.1
        });
        params.out_proj.w.fill(0.0);
        params.out_proj.b.fill(0.0);
        assert_eq!(params.project_queries(&q), Mat::zeros((2, 8)));
        // Identity-initialized square case returns the input.
        for i in 0..8 {
            params.out_proj.w[[i, i]] = 1.0;
        }
        assert_eq!(params.project_queries(&q), q);
        assert_eq!(params.project_queries(&q).dim(), (2, 8));
    }

    /// FD check for a loss: perturbs every parameter of the tiny model.
    fn fd_check(loss_of: impl Fn(&QFormerParams) -> LossEval) {
        let params = QFormerParams::init(tiny_cfg(), 16).unwrap();
        let eval = loss_of(&params);
        let named = params.named_mats();
        let mats: Vec<Mat> = named.iter().map(|(_, m)| m.clone()).collect();
        let analytic: Vec<Mat> = named
            .iter()
            .map(|(n, m)| {
                eval.grads
                    .get(n)
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(m.raw_dim()))
            })
            .collect();
        let numeric = finite_diff_grad(
            |ps| {
                let mut p = params.clone();
                p.assign_from(ps);
                loss_of(&p).loss
            },
            &mats,
            1e-5,
        );
        let (ok, worst) = grads_close(&analytic, &numeric, 1e-4, 1e-8);
        assert!(ok, "worst relative error {worst}");
    }

    #[test]
    fn itc_gradients_match_finite_differences() {
        let (f, ids) = tiny_batch(60);
        fd_check(move |p| itc_loss(p, &as_pairs(&f, &ids)).unwrap());
    }

    #[test]
    fn itm_gradients_match_finite_differences() {
        let (f, ids) = tiny_batch(61);
        fd_check(move |p| itm_loss(p, &as_pairs(&f, &ids), 5).unwrap());
    }

    #[test]
    fn itg_gradients_match_finite_differences() {
        let (f, ids) = tiny_batch(62);
        fd_check(move |p| itg_loss(p, &as_pairs(&f, &ids)).unwrap());
    }
}
