//! Caption evaluation metrics built from scratch: corpus BLEU-1/2/3,
//! ROUGE-L, CIDEr-D, and METEOR-lite (exact unigram matches only, no
//! stemming or synonymy), plus the fixed report scaling.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::Tokenizer;
use crate::{Error, Result};

fn tokens(text: &str) -> Vec<String> {
    crate::data::normalize_text(text)
}

/// One scored item: a candidate caption against one or more references.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub image_id: String,
    pub candidate: String,
    pub references: Vec<String>,
}

fn ngram_counts(toks: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut counts: BTreeMap<&[String], usize> = BTreeMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

// ─── BLEU ───────────────────────────────────────────────────────────────────

struct BleuTallies {
    matched: Vec<usize>,
    total: Vec<usize>,
    cand_len: usize,
    ref_len: usize,
}

fn bleu_tally(cand: &[String], refs: &[Vec<String>], n: usize) -> BleuTallies {
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    for (k, (m, t)) in matched.iter_mut().zip(total.iter_mut()).enumerate() {
        let order = k + 1;
        let cc = ngram_counts(cand, order);
        for (gram, &count) in &cc {
            let best_ref = refs
                .iter()
                .map(|r| ngram_counts(r, order).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            *m += count.min(best_ref);
        }
        *t += cand.len().saturating_sub(order - 1);
    }
    // Closest reference length; ties prefer the shorter reference.
    let ref_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(cand.len()), l))
        .unwrap_or(0);
    BleuTallies {
        matched,
        total,
        cand_len: cand.len(),
        ref_len,
    }
}

fn bleu_score(matched: &[usize], total: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    let n = matched.len();
    let mut log_precision = 0.0;
    for k in 0..n {
        if total[k] == 0 || matched[k] == 0 {
            return 0.0;
        }
        log_precision += (matched[k] as f64 / total[k] as f64).ln();
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    bp * (log_precision / n as f64).exp()
}

/// Corpus-level BLEU-n: clipped n-gram precisions pooled over pairs,
/// geometric mean over orders 1..=n, brevity penalty from pooled lengths.
pub fn bleu_n(pairs: &[EvalPair], n: usize) -> Result<f64> {
    if !(1..=3).contains(&n) {
        return Err(Error::Config(format!("bleu order must be 1..=3, got {n}")));
    }
    let mut matched = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for pair in pairs {
        let cand = tokens(&pair.candidate);
        let refs: Vec<Vec<String>> = pair.references.iter().map(|r| tokens(r)).collect();
        let t = bleu_tally(&cand, &refs, n);
        for k in 0..n {
            matched[k] += t.matched[k];
            total[k] += t.total[k];
        }
        cand_len += t.cand_len;
        ref_len += t.ref_len;
    }
    Ok(bleu_score(&matched, &total, cand_len, ref_len))
}

/// Mean of per-sentence BLEU-n, the documented alternative to corpus-level.
pub fn bleu_n_sentence_mean(pairs: &[EvalPair], n: usize) -> Result<f64> {
    if !(1..=3).contains(&n) {
        return Err(Error::Config(format!("bleu order must be 1..=3, got {n}")));
    }
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for pair in pairs {
        let cand = tokens(&pair.candidate);
        let refs: Vec<Vec<String>> = pair.references.iter().map(|r| tokens(r)).collect();
        let t = bleu_tally(&cand, &refs, n);
        sum += bleu_score(&t.matched, &t.total, t.cand_len, t.ref_len);
    }
    Ok(sum / pairs.len() as f64)
}

// ─── ROUGE-L ────────────────────────────────────────────────────────────────

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev = 0;
        for (j, y) in b.iter().enumerate() {
            let cur = dp[j + 1];
            dp[j + 1] = if x == y {
                prev + 1
            } else {
                dp[j + 1].max(dp[j])
            };
            prev = cur;
        }
    }
    dp[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

fn rouge_l_pair(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for r in refs {
        if cand.is_empty() || r.is_empty() {
            continue;
        }
        let lcs = lcs_len(cand, r) as f64;
        let p = lcs / cand.len() as f64;
        let rec = lcs / r.len() as f64;
        let denom = rec + ROUGE_BETA * ROUGE_BETA * p;
        let f = if denom > 0.0 {
            (1.0 + ROUGE_BETA * ROUGE_BETA) * p * rec / denom
        } else {
            0.0
        };
        best = best.max(f);
    }
    best
}

/// Corpus mean of the per-pair LCS F-measure (beta = 1.2), max over refs.
pub fn rouge_l(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|p| {
            let cand = tokens(&p.candidate);
            let refs: Vec<Vec<String>> = p.references.iter().map(|r| tokens(r)).collect();
            rouge_l_pair(&cand, &refs)
        })
        .sum();
    total / pairs.len() as f64
}

// ─── CIDEr-D ────────────────────────────────────────────────────────────────

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

/// CIDEr-D: TF-IDF n-gram cosine similarity (n = 1..4) with clipped
/// candidate counts and a Gaussian length penalty, scaled by 10, averaged
/// over orders and references. IDF document frequency counts images whose
/// reference set contains the n-gram.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.len() < 2 {
        return Err(Error::Data(
            "cider needs a corpus of >= 2 images (document frequency is per image)".into(),
        ));
    }
    let n_images = pairs.len() as f64;
    // Document frequency per order: how many images' reference sets contain
    // each n-gram.
    let ref_tokens: Vec<Vec<Vec<String>>> = pairs
        .iter()
        .map(|p| p.references.iter().map(|r| tokens(r)).collect())
        .collect();
    let mut df: Vec<BTreeMap<Vec<String>, f64>> = vec![BTreeMap::new(); CIDER_N];
    for refs in &ref_tokens {
        for (order, dfn) in df.iter_mut().enumerate() {
            let mut seen: std::collections::BTreeSet<Vec<String>> = Default::default();
            for r in refs {
                if r.len() >= order + 1 {
                    for w in r.windows(order + 1) {
                        seen.insert(w.to_vec());
                    }
                }
            }
            for gram in seen {
                *dfn.entry(gram).or_insert(0.0) += 1.0;
            }
        }
    }
    let idf = |order: usize, gram: &[String]| -> f64 {
        let d = df[order].get(gram).copied().unwrap_or(0.0).max(1.0);
        (n_images / d).ln()
    };

    let mut corpus = 0.0;
    for (pair, refs) in pairs.iter().zip(&ref_tokens) {
        let cand = tokens(&pair.candidate);
        let mut image_score = 0.0;
        for r in refs {
            let penalty =
                (-((cand.len() as f64 - r.len() as f64).powi(2)) / (2.0 * CIDER_SIGMA * CIDER_SIGMA))
                    .exp();
            let mut over_n = 0.0;
            for order in 0..CIDER_N {
                let cc = ngram_counts(&cand, order + 1);
                let rc = ngram_counts(r, order + 1);
                let mut numer = 0.0;
                let mut norm_c = 0.0;
                let mut norm_r = 0.0;
                for (gram, &count) in &cc {
                    let w = idf(order, gram);
                    let wc = count as f64 * w;
                    norm_c += wc * wc;
                    if let Some(&rcount) = rc.get(gram) {
                        let clipped = count.min(rcount) as f64 * w;
                        numer += clipped * (rcount as f64 * w);
                    }
                }
                for (gram, &count) in &rc {
                    let wr = count as f64 * idf(order, gram);
                    norm_r += wr * wr;
                }
                if norm_c > 0.0 && norm_r > 0.0 {
                    over_n += penalty * numer / (norm_c.sqrt() * norm_r.sqrt());
                }
            }
            image_score += over_n / CIDER_N as f64;
        }
        corpus += 10.0 * image_score / refs.len() as f64;
    }
    Ok(corpus / pairs.len() as f64)
}

// ─── METEOR-lite ────────────────────────────────────────────────────────────

/// Maximal exact-match unigram alignment with the fewest chunks.
/// Exhaustive search with memoization over (candidate position, used
/// reference positions, last matched reference position).
fn max_matches(cand: &[String], refs: &[String]) -> usize {
    let mut cc: BTreeMap<&String, usize> = BTreeMap::new();
    for w in cand {
        *cc.entry(w).or_insert(0) += 1;
    }
    let mut rc: BTreeMap<&String, usize> = BTreeMap::new();
    for w in refs {
        *rc.entry(w).or_insert(0) += 1;
    }
    cc.iter()
        .map(|(w, &c)| c.min(rc.get(*w).copied().unwrap_or(0)))
        .sum()
}

fn min_chunks(cand: &[String], reference: &[String]) -> (usize, usize) {
    let matches = max_matches(cand, reference);
    if matches == 0 {
        return (0, 0);
    }
    assert!(
        reference.len() < 128,
        "chunk search supports references up to 127 tokens"
    );
    // remaining[w] after position ci: how many occurrences of w remain in
    // cand[ci..]; needed to prune branches that drop below max matches.
    let mut memo: std::collections::HashMap<(usize, u128, usize), Option<usize>> =
        Default::default();

    struct Ctx<'a> {
        cand: &'a [String],
        reference: &'a [String],
    }

    // Returns the minimum number of chunks completing the alignment from
    // candidate position `ci`, or None when max matches is unreachable.
    fn solve(
        ctx: &Ctx,
        ci: usize,
        used: u128,
        last: usize, // last matched ref position + 1; 0 = none / broken run
        remaining_matches: usize,
        memo: &mut std::collections::HashMap<(usize, u128, usize), Option<usize>>,
    ) -> Option<usize> {
        if remaining_matches == 0 {
            return Some(0);
        }
        if ci >= ctx.cand.len() {
            return None;
        }
        let key = (ci, used, last);
        if let Some(&cached) = memo.get(&key) {
            return cached;
        }
        let mut best: Option<usize> = None;
        // Option A: leave cand[ci] unmatched.
        if let Some(v) = solve(ctx, ci + 1, used, 0, remaining_matches, memo) {
            best = Some(best.map_or(v, |b: usize| b.min(v)));
        }
        // Option B: match cand[ci] to any unused ref occurrence of the word.
        for (rj, w) in ctx.reference.iter().enumerate() {
            if w == &ctx.cand[ci] && used & (1u128 << rj) == 0 {
                let new_chunk = usize::from(last == 0 || rj != last);
                if let Some(v) = solve(
                    ctx,
                    ci + 1,
                    used | (1u128 << rj),
                    rj + 1,
                    remaining_matches - 1,
                    memo,
                ) {
                    let total = v + new_chunk;
                    best = Some(best.map_or(total, |b: usize| b.min(total)));
                }
            }
        }
        memo.insert(key, best);
        best
    }

    let ctx = Ctx { cand, reference };
    let chunks = solve(&ctx, 0, 0, 0, matches, &mut memo)
        .expect("a maximal alignment always exists");
    (matches, chunks)
}

fn meteor_pair(cand: &[String], refs: &[Vec<String>]) -> f64 {
    let mut best = 0.0f64;
    for r in refs {
        if cand.is_empty() || r.is_empty() {
            continue;
        }
        let (m, chunks) = min_chunks(cand, r);
        if m == 0 {
            continue;
        }
        let m = m as f64;
        let p = m / cand.len() as f64;
        let rec = m / r.len() as f64;
        let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
        let penalty = 0.5 * (chunks as f64 / m).powi(3);
        best = best.max(f_mean * (1.0 - penalty));
    }
    best
}

/// Exact-match METEOR: alignment maximizes matches then minimizes chunks;
/// F_mean = 10PR/(R+9P); penalty = 0.5 (chunks/matches)^3; max over refs.
pub fn meteor_lite(pairs: &[EvalPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|p| {
            let cand = tokens(&p.candidate);
            let refs: Vec<Vec<String>> = p.references.iter().map(|r| tokens(r)).collect();
            meteor_pair(&cand, &refs)
        })
        .sum();
    total / pairs.len() as f64
}

// ─── Reports ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub meteor: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Reserved for a plugged-in scorer; emitted as n/a when absent.
    pub bert_score: Option<f64>,
    pub bleurt: Option<f64>,
}

/// Table column order and the fixed scale factor per metric.
pub const SCALE_FACTORS: [(&str, f64); 8] = [
    ("Bleu 1", 1e3),
    ("Bleu 2", 1e3),
    ("Bleu 3", 1e3),
    ("METEOR", 1e3),
    ("ROUGE_L", 1e2),
    ("CIDEr", 1e3),
    ("BERT score", 1e2),
    ("BLEURT", 1e1),
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub raw: MetricSet,
    /// Metric name -> scale factor applied.
    pub factors: BTreeMap<String, f64>,
    pub scaled: MetricSet,
}

impl MetricSet {
    pub fn values(&self) -> [Option<f64>; 8] {
        [
            Some(self.bleu1),
            Some(self.bleu2),
            Some(self.bleu3),
            Some(self.meteor),
            Some(self.rouge_l),
            Some(self.cider),
            self.bert_score,
            self.bleurt,
        ]
    }
}

/// Applies the fixed per-metric factors (BLEU/METEOR/CIDEr x10^3,
/// ROUGE_L x10^2, BERT score x10^2, BLEURT x10^1).
pub fn scale_report(raw: &MetricSet) -> ScoreReport {
    let scaled = MetricSet {
        bleu1: raw.bleu1 * 1e3,
        bleu2: raw.bleu2 * 1e3,
        bleu3: raw.bleu3 * 1e3,
        meteor: raw.meteor * 1e3,
        rouge_l: raw.rouge_l * 1e2,
        cider: raw.cider * 1e3,
        bert_score: raw.bert_score.map(|v| v * 1e2),
        bleurt: raw.bleurt.map(|v| v * 1e1),
    };
    ScoreReport {
        raw: *raw,
        factors: SCALE_FACTORS
            .iter()
            .map(|(n, f)| (n.to_string(), *f))
            .collect(),
        scaled,
    }
}

/// Runs every metric over the corpus.
pub fn evaluate_pairs(pairs: &[EvalPair], sentence_level_bleu: bool) -> Result<MetricSet> {
    let bleu = |n| {
        if sentence_level_bleu {
            bleu_n_sentence_mean(pairs, n)
        } else {
            bleu_n(pairs, n)
        }
    };
    Ok(MetricSet {
        bleu1: bleu(1)?,
        bleu2: bleu(2)?,
        bleu3: bleu(3)?,
        meteor: meteor_lite(pairs),
        rouge_l: rouge_l(pairs),
        cider: cider(pairs)?,
        bert_score: None,
        bleurt: None,
    })
}

/// Joins predictions `{image, prediction}` with manifest references.
pub fn pairs_from_predictions(
    predictions: &[(String, String)],
    references: &BTreeMap<String, Vec<String>>,
) -> Result<Vec<EvalPair>> {
    predictions
        .iter()
        .map(|(image, prediction)| {
            let refs = references.get(image).ok_or_else(|| {
                Error::Data(format!("no reference captions for image \"{image}\""))
            })?;
            Ok(EvalPair {
                image_id: image.clone(),
                candidate: prediction.clone(),
                references: refs.clone(),
            })
        })
        .collect()
}

/// Renders the scaled scores as an aligned plain-text table, one row per
/// model, `n/a` for absent metrics, `failed` for rows without scores.
pub fn render_table(rows: &[(String, Option<MetricSet>)]) -> String {
    let mut header = vec!["Models".to_string()];
    let mut scales = vec![String::new()];
    for (name, factor) in SCALE_FACTORS {
        header.push(name.to_string());
        let exp = (factor.log10()).round() as i32;
        scales.push(format!("(x10^{exp})"));
    }
    let mut body: Vec<Vec<String>> = Vec::new();
    for (name, metrics) in rows {
        let mut row = vec![name.clone()];
        match metrics {
            Some(m) => {
                let scaled = scale_report(m).scaled;
                for v in scaled.values() {
                    row.push(match v {
                        Some(x) => format!("{x:.1}"),
                        None => "n/a".to_string(),
                    });
                }
            }
            None => {
                row.push("failed".to_string());
                for _ in 1..SCALE_FACTORS.len() {
                    row.push(String::new());
                }
            }
        }
        body.push(row);
    }
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in std::iter::once(&scales).chain(body.iter()) {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.len());
        }
    }
    let fmt_row = |cells: &[String]| {
        cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i == 0 {
                    format!("{c:<w$}", w = widths[0])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect::<Vec<_>>()
            .join("  ")
    };
    let mut out = String::new();
    out.push_str(&fmt_row(&header));
    out.push('\n');
    out.push_str(&fmt_row(&scales));
    out.push('\n');
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for row in &body {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out
}

/// Loads predictions JSONL written by the generate step.
pub fn load_predictions(path: &std::path::Path) -> Result<Vec<(String, String)>> {
    #[derive(Deserialize)]
    struct Line {
        image: String,
        prediction: String,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let l: Line = serde_json::from_str(line).map_err(|e| {
            Error::Data(format!("{}: malformed line {}: {e}", path.display(), i + 1))
        })?;
        out.push((l.image, l.prediction));
    }
    Ok(out)
}

/// Reference map for a manifest split: image ref -> caption list.
pub fn reference_map(
    samples: &[crate::data::CaptionSample],
    _tokenizer: Option<&Tokenizer>,
) -> BTreeMap<String, Vec<String>> {
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for s in samples {
        map.entry(s.image_ref.clone())
            .or_default()
            .push(s.caption.clone());
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(cand: &str, refs: &[&str]) -> EvalPair {
        EvalPair {
            image_id: "i".into(),
            candidate: cand.into(),
            references: refs.iter().map(|r| r.to_string()).collect(),
        }
    }

    #[test]
    fn bleu_identity_is_one() {
        let pairs = vec![pair("a red circle", &["a red circle"])];
        assert_eq!(bleu_n(&pairs, 1).unwrap(), 1.0);
        assert_eq!(bleu_n(&pairs, 2).unwrap(), 1.0);
    }

    #[test]
    fn bleu_clipped_counts() {
        // "a a a" vs "a b": one clipped match over three unigrams, c > r.
        let pairs = vec![pair("a a a", &["a b"])];
        let b = bleu_n(&pairs, 1).unwrap();
        assert!((b - 1.0 / 3.0).abs() < 1e-12, "{b}");
    }

    #[test]
    fn bleu_brevity_penalty() {
        let pairs = vec![pair("a", &["a b c"])];
        let b = bleu_n(&pairs, 1).unwrap();
        assert!((b - (-2.0f64).exp()).abs() < 1e-12, "{b}");
    }

    #[test]
    fn bleu_zero_orders_give_zero() {
        let pairs = vec![pair("x y", &["a b"])];
        assert_eq!(bleu_n(&pairs, 1).unwrap(), 0.0);
        // Unigrams overlap but no bigram does.
        let pairs = vec![pair("a c b", &["a b"])];
        assert_eq!(bleu_n(&pairs, 2).unwrap(), 0.0);
    }

    #[test]
    fn rouge_identity_and_disjoint() {
        assert_eq!(rouge_l(&[pair("a b c", &["a b c"])]), 1.0);
        assert_eq!(rouge_l(&[pair("x y", &["a b"])]), 0.0);
    }

    #[test]
    fn rouge_worked_example() {
        // "the cat" vs "the cat sat": LCS 2, P 1, R 2/3, beta 1.2.
        let r = rouge_l(&[pair("the cat", &["the cat sat"])]);
        let expected = 2.44 * (2.0 / 3.0) / (2.0 / 3.0 + 1.44);
        assert!((r - expected).abs() < 1e-12);
        assert!((r - 0.7722).abs() < 5e-5);
    }

    #[test]
    fn cider_worked_example() {
        // Two images, candidate == its 2-token reference, disjoint vocab:
        // n=1,2 cosines are 1, n=3,4 are zero-norm, so 10*(1+1)/4 = 5.
        let pairs = vec![pair("a b", &["a b"]), pair("c d", &["c d"])];
        let c = cider(&pairs).unwrap();
        assert!((c - 5.0).abs() < 1e-12, "{c}");
    }

    #[test]
    fn cider_no_overlap_is_zero() {
        let pairs = vec![pair("x y", &["a b"]), pair("z w", &["c d"])];
        assert_eq!(cider(&pairs).unwrap(), 0.0);
    }

    #[test]
    fn cider_duplicate_references_change_nothing() {
        let base = vec![
            pair("a b c", &["a b d"]),
            pair("e f", &["e f g"]),
            pair("h i", &["h j"]),
        ];
        let doubled: Vec<EvalPair> = base
            .iter()
            .map(|p| {
                let mut refs: Vec<&str> = p.references.iter().map(|s| s.as_str()).collect();
                refs.extend(p.references.iter().map(|s| s.as_str()));
                pair(&p.candidate, &refs)
            })
            .collect();
        let a = cider(&base).unwrap();
        let b = cider(&doubled).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn cider_single_image_errors() {
        assert!(cider(&[pair("a", &["a"])]).is_err());
    }

    #[test]
    fn meteor_identity_four_tokens() {
        let m = meteor_lite(&[pair("a b c d", &["a b c d"])]);
        assert!((m - 0.9921875).abs() < 1e-12, "{m}");
    }

    #[test]
    fn meteor_reversal_is_half() {
        let m = meteor_lite(&[pair("a b", &["b a"])]);
        assert!((m - 0.5).abs() < 1e-12, "{m}");
    }

    #[test]
    fn meteor_zero_matches_is_zero() {
        assert_eq!(meteor_lite(&[pair("x y", &["a b"])]), 0.0);
    }

    #[test]
    fn scale_report_matches_published_row() {
        let raw = MetricSet {
            bleu1: 0.1089,
            bleu2: 0.0481,
            bleu3: 0.0231,
            meteor: 0.0626,
            rouge_l: 0.154,
            cider: 0.0575,
            bert_score: None,
            bleurt: None,
        };
        let report = scale_report(&raw);
        assert!((report.scaled.bleu1 - 108.9).abs() < 1e-9);
        assert!((report.scaled.cider - 57.5).abs() < 1e-9);
        assert!((report.scaled.rouge_l - 15.4).abs() < 1e-9);
    }

    #[test]
    fn table_renders_all_rows_and_na_columns() {
        let m = MetricSet {
            bleu1: 0.1,
            bleu2: 0.05,
            bleu3: 0.01,
            meteor: 0.06,
            rouge_l: 0.15,
            cider: 0.0575,
            bert_score: None,
            bleurt: None,
        };
        let table = render_table(&[
            ("MSMedCap (G, G+M)".to_string(), Some(m)),
            ("BLIP2 (G+M)".to_string(), None),
        ]);
        assert!(table.contains("MSMedCap (G, G+M)"));
        assert!(table.contains("failed"));
        assert!(table.contains("n/a"));
        assert!(table.contains("ROUGE_L"));
        assert!(table.contains("(x10^2)"));
    }

    #[test]
    fn order_invariance() {
        let a = vec![
            pair("a b c", &["a b d"]),
            pair("e f", &["e f g"]),
            pair("h i", &["h j k"]),
        ];
        let mut b = a.clone();
        b.rotate_left(1);
        assert!((bleu_n(&a, 2).unwrap() - bleu_n(&b, 2).unwrap()).abs() < 1e-12);
        assert!((rouge_l(&a) - rouge_l(&b)).abs() < 1e-12);
        assert!((cider(&a).unwrap() - cider(&b).unwrap()).abs() < 1e-12);
        assert!((meteor_lite(&a) - meteor_lite(&b)).abs() < 1e-12);
    }

    #[test]
    fn rouge_recall_monotone_under_correct_append() {
        // Appending a reference token to the candidate never decreases the
        // LCS, hence never decreases recall.
        let reference = ["a", "b", "c", "d"].map(String::from).to_vec();
        let cand = ["a", "x"].map(String::from).to_vec();
        let before = lcs_len(&cand, &reference) as f64 / reference.len() as f64;
        for tok in &reference {
            let mut extended = cand.clone();
            extended.push(tok.clone());
            let after = lcs_len(&extended, &reference) as f64 / reference.len() as f64;
            assert!(after >= before);
        }
    }
}
