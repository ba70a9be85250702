//! Translation quality metrics and the per-direction evaluation harness.
//!
//! The scoring functions are generic over the item type (words for text,
//! token ids or characters elsewhere) and are deliberately small, direct
//! implementations; the test module re-derives each one with an independent
//! brute-force construction and cross-checks on randomized cases.
//!
//! Conventions, fixed here once:
//! - BLEU-4 is corpus-level, clipped, unsmoothed, with the closest-length
//!   brevity penalty (ties to the shorter reference). An n-gram order with
//!   zero candidate n-grams in the whole corpus is dropped from the
//!   geometric mean instead of zeroing it.
//! - ROUGE-L is the longest-common-subsequence F-score with β = 1.2,
//!   averaged over examples.
//! - CIDEr uses tf-idf n-gram cosines for n = 1..4, averaged and scaled by
//!   10, with document frequencies from the reference corpus (clamped to at
//!   least one document).
//! - WER is corpus-level: total word edit distance over total reference
//!   words.

use crate::bpe::BpeModel;
use crate::codebook::Codebook;
use crate::decode::{translate_tokens, DecodeConfig, Hypothesis};
use crate::model::ModelParams;
use crate::tokens::{Direction, Modality, Vocabulary};
use crate::world::nearest_char;
use crate::{Error, Result, Scalar};
use std::collections::HashMap;
use std::hash::Hash;

const ROUGE_BETA: f64 = 1.2;
const CIDER_MAX_N: usize = 4;
const CIDER_SCALE: f64 = 10.0;

// ---------------------------------------------------------------------------
// Primitive sequence measures

/// Length of the longest common subsequence.
pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    // One rolling row of the classic DP table.
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Unit-cost edit distance (insertions, deletions, substitutions).
pub fn levenshtein<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn ngram_counts<T: Eq + Hash + Clone>(seq: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n && n > 0 {
        for w in seq.windows(n) {
            *counts.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    counts
}

// ---------------------------------------------------------------------------
// BLEU-4

fn check_parallel<C, R>(cands: &[C], refs: &[Vec<R>]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::InsufficientData("no candidates to score".into()));
    }
    if cands.len() != refs.len() {
        return Err(Error::Shape(format!(
            "{} candidates but {} reference sets",
            cands.len(),
            refs.len()
        )));
    }
    if let Some(i) = refs.iter().position(|r| r.is_empty()) {
        return Err(Error::InsufficientData(format!("candidate {i} has no references")));
    }
    Ok(())
}

/// Corpus BLEU with n-grams up to 4.
pub fn bleu4<T: Eq + Hash + Clone>(cands: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<f64> {
    check_parallel(cands, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (c, rs) in cands.iter().zip(refs) {
        cand_len += c.len();
        // Closest reference length; ties go to the shorter.
        ref_len += rs
            .iter()
            .map(Vec::len)
            .min_by_key(|&l| (l.abs_diff(c.len()), l))
            .expect("reference set checked non-empty");
        for (n, (m, t)) in matched.iter_mut().zip(total.iter_mut()).enumerate() {
            let order = n + 1;
            let cc = ngram_counts(c, order);
            if cc.is_empty() {
                continue;
            }
            // Clip each candidate n-gram count at its best per-reference
            // count: matched = Σ_g min(count_cand, max_ref count_ref).
            let mut best: HashMap<&Vec<T>, usize> = HashMap::new();
            for r in rs {
                let rc = ngram_counts(r, order);
                for (g, &c_cnt) in &cc {
                    if let Some(&r_cnt) = rc.get(g) {
                        let cur = best.entry(g).or_insert(0);
                        *cur = (*cur).max(r_cnt.min(c_cnt));
                    }
                }
            }
            *m += best.values().sum::<usize>();
            *t += cc.values().sum::<usize>();
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    // Geometric mean over orders that had any candidate n-grams at all.
    let mut log_sum = 0.0f64;
    let mut orders = 0usize;
    for (m, t) in matched.iter().zip(&total) {
        if *t == 0 {
            continue;
        }
        if *m == 0 {
            return Ok(0.0);
        }
        log_sum += (*m as f64 / *t as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let precision = (log_sum / orders as f64).exp();
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(precision * bp)
}

// ---------------------------------------------------------------------------
// ROUGE-L

/// Sentence-level ROUGE-L F-score (β = 1.2).
pub fn rouge_l<T: Eq>(cand: &[T], reference: &[T]) -> f64 {
    let lcs = lcs_len(cand, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let recall = lcs / reference.len() as f64;
    let precision = lcs / cand.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * recall * precision / (recall + b2 * precision)
}

/// Mean sentence ROUGE-L over a corpus, best reference per candidate.
pub fn rouge_l_corpus<T: Eq>(cands: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<f64> {
    check_parallel(cands, refs)?;
    let mut sum = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        sum += rs.iter().map(|r| rouge_l(c, r)).fold(0.0f64, f64::max);
    }
    Ok(sum / cands.len() as f64)
}

// ---------------------------------------------------------------------------
// CIDEr

/// Corpus CIDEr: mean over examples of the tf-idf n-gram cosine against the
/// example's references, averaged over n = 1..4 and scaled by 10. Document
/// frequencies come from the reference sets of this corpus.
pub fn cider<T: Eq + Hash + Clone>(cands: &[Vec<T>], refs: &[Vec<Vec<T>>]) -> Result<f64> {
    check_parallel(cands, refs)?;
    let n_docs = refs.len() as f64;
    let mut score_sum = 0.0f64;
    for order in 1..=CIDER_MAX_N {
        // df: in how many examples' reference sets each n-gram appears.
        let mut df: HashMap<Vec<T>, usize> = HashMap::new();
        for rs in refs {
            let mut seen: HashMap<Vec<T>, ()> = HashMap::new();
            for r in rs {
                for g in ngram_counts(r, order).into_keys() {
                    seen.entry(g).or_insert(());
                }
            }
            for g in seen.into_keys() {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &Vec<T>| -> f64 {
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (n_docs / d).ln()
        };
        let tfidf = |seq: &Vec<T>| -> HashMap<Vec<T>, f64> {
            let counts = ngram_counts(seq, order);
            let total: usize = counts.values().sum();
            counts
                .into_iter()
                .map(|(g, c)| {
                    let w = (c as f64 / total as f64) * idf(&g);
                    (g, w)
                })
                .collect()
        };
        for (c, rs) in cands.iter().zip(refs) {
            let cv = tfidf(c);
            let c_norm = cv.values().map(|v| v * v).sum::<f64>().sqrt();
            if c_norm == 0.0 {
                continue;
            }
            let mut pair_sum = 0.0;
            for r in rs {
                let rv = tfidf(r);
                let r_norm = rv.values().map(|v| v * v).sum::<f64>().sqrt();
                if r_norm == 0.0 {
                    continue;
                }
                let dot: f64 = cv
                    .iter()
                    .filter_map(|(g, v)| rv.get(g).map(|w| v * w))
                    .sum();
                pair_sum += dot / (c_norm * r_norm);
            }
            score_sum += pair_sum / rs.len() as f64;
        }
    }
    Ok(CIDER_SCALE * score_sum / (CIDER_MAX_N as f64 * cands.len() as f64))
}

// ---------------------------------------------------------------------------
// WER

/// Corpus word error rate: total edit distance over total reference length.
pub fn wer<T: Eq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<f64> {
    if refs.is_empty() {
        return Err(Error::InsufficientData("no references to score".into()));
    }
    if refs.len() != hyps.len() {
        return Err(Error::Shape(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let mut edits = 0usize;
    let mut words = 0usize;
    for (i, (r, h)) in refs.iter().zip(hyps).enumerate() {
        if r.is_empty() {
            return Err(Error::InsufficientData(format!("reference {i} is empty")));
        }
        edits += levenshtein(r, h);
        words += r.len();
    }
    Ok(edits as f64 / words as f64)
}

// ---------------------------------------------------------------------------
// Evaluation harness

/// Everything needed to decode and score one direction.
pub struct EvalContext<'a, F> {
    pub params: &'a ModelParams<F>,
    pub vocab: &'a Vocabulary,
    pub speech_codebook: &'a Codebook<f64>,
    pub image_codebook: &'a Codebook<f64>,
    pub bpe: &'a BpeModel,
    pub decode: DecodeConfig,
}

/// One evaluation example: aligned source and gold target token sequences
/// in the unified id space.
#[derive(Debug, Clone)]
pub struct EvalExample {
    pub id: String,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

/// Scores for one direction; the shape depends on the target modality.
/// Speech outputs are transcribed to characters first, so they carry the
/// caption metrics alongside WER; image outputs have no pretrained scorer
/// here, so they get token exact-match plus codebook-space cosine instead.
#[derive(Debug, Clone, PartialEq)]
pub enum DirectionScores {
    Text { bleu4: f64, rouge_l: f64, cider: f64, wer: f64 },
    Speech { wer: f64, bleu4: f64, rouge_l: f64, cider: f64 },
    Image { exact_match: f64, patch_cosine: f64 },
}

impl DirectionScores {
    /// `key=value` pairs for reports and logs.
    pub fn key_values(&self) -> Vec<(&'static str, f64)> {
        match *self {
            DirectionScores::Text { bleu4, rouge_l, cider, wer } => {
                vec![("bleu4", bleu4), ("rouge_l", rouge_l), ("cider", cider), ("wer", wer)]
            }
            DirectionScores::Speech { wer, bleu4, rouge_l, cider } => {
                vec![("wer", wer), ("bleu4", bleu4), ("rouge_l", rouge_l), ("cider", cider)]
            }
            DirectionScores::Image { exact_match, patch_cosine } => {
                vec![("exact_match", exact_match), ("patch_cosine", patch_cosine)]
            }
        }
    }
}

/// Turn a unified-id text sequence back into words via the BPE model.
pub fn text_tokens_to_words(
    bpe: &BpeModel,
    vocab: &Vocabulary,
    tokens: &[u32],
) -> Result<Vec<String>> {
    let mut local = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let (m, id) = vocab.global_to_local(t)?;
        if m != Modality::Text {
            return Err(Error::Domain(format!("token {t} is not a text token")));
        }
        local.push(id);
    }
    Ok(bpe.decode(&local)?.split_whitespace().map(str::to_string).collect())
}

/// Transcribe a unified-id speech token sequence to characters by mapping
/// each code's centroid to the nearest articulation prototype.
pub fn speech_tokens_to_transcript(
    codebook: &Codebook<f64>,
    vocab: &Vocabulary,
    tokens: &[u32],
) -> Result<String> {
    let mut out = String::with_capacity(tokens.len());
    for &t in tokens {
        let (m, id) = vocab.global_to_local(t)?;
        if m != Modality::Speech {
            return Err(Error::Domain(format!("token {t} is not a speech token")));
        }
        let center = codebook.dequantize(id as usize)?;
        out.push(nearest_char(center, codebook.dim()));
    }
    Ok(out)
}

fn transcript_words(
    codebook: &Codebook<f64>,
    vocab: &Vocabulary,
    tokens: &[u32],
) -> Result<Vec<String>> {
    Ok(speech_tokens_to_transcript(codebook, vocab, tokens)?
        .split_whitespace()
        .map(str::to_string)
        .collect())
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        return 1.0; // two all-zero patches are identical
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Decode every example in one direction and score the outputs against the
/// gold targets. Returns the scores plus the raw hypotheses (for prediction
/// dumps).
pub fn evaluate_direction<F: Scalar>(
    ctx: &EvalContext<'_, F>,
    direction: Direction,
    examples: &[EvalExample],
) -> Result<(DirectionScores, Vec<Hypothesis>)> {
    if examples.is_empty() {
        return Err(Error::InsufficientData(format!("no examples to evaluate for {direction}")));
    }
    let mut hyps = Vec::with_capacity(examples.len());
    for ex in examples {
        hyps.push(translate_tokens(ctx.params, ctx.vocab, &ex.src, direction, &ctx.decode)?);
    }
    let scores = match direction.target {
        Modality::Text => {
            let mut cands = Vec::with_capacity(examples.len());
            let mut refs = Vec::with_capacity(examples.len());
            let mut wer_refs = Vec::with_capacity(examples.len());
            for (ex, h) in examples.iter().zip(&hyps) {
                cands.push(text_tokens_to_words(ctx.bpe, ctx.vocab, &h.tokens)?);
                let r = text_tokens_to_words(ctx.bpe, ctx.vocab, &ex.tgt)?;
                wer_refs.push(r.clone());
                refs.push(vec![r]);
            }
            DirectionScores::Text {
                bleu4: bleu4(&cands, &refs)?,
                rouge_l: rouge_l_corpus(&cands, &refs)?,
                cider: cider(&cands, &refs)?,
                wer: wer(&wer_refs, &cands)?,
            }
        }
        Modality::Speech => {
            let mut outs = Vec::with_capacity(examples.len());
            let mut wer_refs = Vec::with_capacity(examples.len());
            let mut refs = Vec::with_capacity(examples.len());
            for (ex, h) in examples.iter().zip(&hyps) {
                outs.push(transcript_words(ctx.speech_codebook, ctx.vocab, &h.tokens)?);
                let r = transcript_words(ctx.speech_codebook, ctx.vocab, &ex.tgt)?;
                wer_refs.push(r.clone());
                refs.push(vec![r]);
            }
            DirectionScores::Speech {
                wer: wer(&wer_refs, &outs)?,
                bleu4: bleu4(&outs, &refs)?,
                rouge_l: rouge_l_corpus(&outs, &refs)?,
                cider: cider(&outs, &refs)?,
            }
        }
        Modality::Image => {
            let mut match_sum = 0.0f64;
            let mut cos_sum = 0.0f64;
            let mut positions = 0usize;
            for (ex, h) in examples.iter().zip(&hyps) {
                let n = ex.tgt.len().max(h.tokens.len());
                for i in 0..n {
                    positions += 1;
                    let (Some(&p), Some(&g)) = (h.tokens.get(i), ex.tgt.get(i)) else {
                        continue; // length mismatch: counts as a miss
                    };
                    if p == g {
                        match_sum += 1.0;
                    }
                    let (_, pl) = ctx.vocab.global_to_local(p)?;
                    let (_, gl) = ctx.vocab.global_to_local(g)?;
                    cos_sum += cosine(
                        ctx.image_codebook.dequantize(pl as usize)?,
                        ctx.image_codebook.dequantize(gl as usize)?,
                    );
                }
            }
            DirectionScores::Image {
                exact_match: match_sum / positions as f64,
                patch_cosine: cos_sum / positions as f64,
            }
        }
    };
    Ok((scores, hyps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{derive_seed, rand_index, rng_from_seed};

    // ---- independent oracles ------------------------------------------

    /// LCS by exhaustive recursion with memoisation on indices.
    fn lcs_oracle(a: &[u8], b: &[u8]) -> usize {
        fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
            if i == a.len() || j == b.len() {
                return 0;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let v = if a[i] == b[j] {
                1 + go(a, b, i + 1, j + 1, memo)
            } else {
                go(a, b, i + 1, j, memo).max(go(a, b, i, j + 1, memo))
            };
            memo.insert((i, j), v);
            v
        }
        go(a, b, 0, 0, &mut HashMap::new())
    }

    /// Edit distance by plain recursion with memoisation.
    fn lev_oracle(a: &[u8], b: &[u8]) -> usize {
        fn go(a: &[u8], b: &[u8], i: usize, j: usize, memo: &mut HashMap<(usize, usize), usize>) -> usize {
            if i == a.len() {
                return b.len() - j;
            }
            if j == b.len() {
                return a.len() - i;
            }
            if let Some(&v) = memo.get(&(i, j)) {
                return v;
            }
            let sub = go(a, b, i + 1, j + 1, memo) + usize::from(a[i] != b[j]);
            let del = go(a, b, i + 1, j, memo) + 1;
            let ins = go(a, b, i, j + 1, memo) + 1;
            let v = sub.min(del).min(ins);
            memo.insert((i, j), v);
            v
        }
        go(a, b, 0, 0, &mut HashMap::new())
    }

    /// BLEU recomputed with naive nested loops: for each candidate n-gram
    /// occurrence position, count matches by scanning references directly.
    fn bleu_oracle(cands: &[Vec<u8>], refs: &[Vec<Vec<u8>>]) -> f64 {
        let grams = |s: &[u8], n: usize| -> Vec<Vec<u8>> {
            if s.len() < n {
                Vec::new()
            } else {
                s.windows(n).map(|w| w.to_vec()).collect()
            }
        };
        let mut log_sum = 0.0;
        let mut orders = 0;
        let mut zero = false;
        for n in 1..=4 {
            let mut m = 0usize;
            let mut t = 0usize;
            for (c, rs) in cands.iter().zip(refs) {
                let cg = grams(c, n);
                t += cg.len();
                // Distinct candidate n-grams, then clip.
                let mut distinct: Vec<Vec<u8>> = Vec::new();
                for g in &cg {
                    if !distinct.contains(g) {
                        distinct.push(g.clone());
                    }
                }
                for g in distinct {
                    let c_count = cg.iter().filter(|x| **x == g).count();
                    let r_max = rs
                        .iter()
                        .map(|r| grams(r, n).iter().filter(|x| **x == g).count())
                        .max()
                        .unwrap_or(0);
                    m += c_count.min(r_max);
                }
            }
            if t == 0 {
                continue;
            }
            if m == 0 {
                zero = true;
                break;
            }
            log_sum += (m as f64 / t as f64).ln();
            orders += 1;
        }
        if zero || orders == 0 {
            return 0.0;
        }
        let c_len: usize = cands.iter().map(Vec::len).sum();
        if c_len == 0 {
            return 0.0;
        }
        let mut r_len = 0usize;
        for (c, rs) in cands.iter().zip(refs) {
            let mut best = rs[0].len();
            for r in rs {
                let (d_new, d_old) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
                if d_new < d_old || (d_new == d_old && r.len() < best) {
                    best = r.len();
                }
            }
            r_len += best;
        }
        let bp = if c_len >= r_len { 1.0 } else { (1.0 - r_len as f64 / c_len as f64).exp() };
        (log_sum / orders as f64).exp() * bp
    }

    /// CIDEr recomputed with explicit vectors over the full n-gram space.
    fn cider_oracle(cands: &[Vec<u8>], refs: &[Vec<Vec<u8>>]) -> f64 {
        let grams = |s: &[u8], n: usize| -> Vec<Vec<u8>> {
            if s.len() < n {
                Vec::new()
            } else {
                s.windows(n).map(|w| w.to_vec()).collect()
            }
        };
        let n_docs = refs.len() as f64;
        let mut total = 0.0;
        for n in 1..=4 {
            // Universe of n-grams appearing anywhere.
            let mut universe: Vec<Vec<u8>> = Vec::new();
            let add = |g: Vec<u8>, universe: &mut Vec<Vec<u8>>| {
                if !universe.contains(&g) {
                    universe.push(g);
                }
            };
            for (c, rs) in cands.iter().zip(refs) {
                for g in grams(c, n) {
                    add(g, &mut universe);
                }
                for r in rs {
                    for g in grams(r, n) {
                        add(g, &mut universe);
                    }
                }
            }
            let df = |g: &Vec<u8>| -> f64 {
                let d = refs
                    .iter()
                    .filter(|rs| rs.iter().any(|r| grams(r, n).contains(g)))
                    .count();
                d.max(1) as f64
            };
            let vecf = |s: &[u8]| -> Vec<f64> {
                let gs = grams(s, n);
                let t = gs.len() as f64;
                universe
                    .iter()
                    .map(|g| {
                        if t == 0.0 {
                            0.0
                        } else {
                            let h = gs.iter().filter(|x| *x == g).count() as f64;
                            (h / t) * (n_docs / df(g)).ln()
                        }
                    })
                    .collect()
            };
            for (c, rs) in cands.iter().zip(refs) {
                let cv = vecf(c);
                let cn = cv.iter().map(|v| v * v).sum::<f64>().sqrt();
                if cn == 0.0 {
                    continue;
                }
                let mut s = 0.0;
                for r in rs {
                    let rv = vecf(r);
                    let rn = rv.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if rn == 0.0 {
                        continue;
                    }
                    let dot: f64 = cv.iter().zip(&rv).map(|(a, b)| a * b).sum();
                    s += dot / (cn * rn);
                }
                total += s / rs.len() as f64;
            }
        }
        10.0 * total / (4.0 * cands.len() as f64)
    }

    fn rand_seq(rng: &mut crate::Rng, max_len: usize, alphabet: u8) -> Vec<u8> {
        let len = rand_index(rng, max_len + 1);
        (0..len).map(|_| rand_index(rng, alphabet as usize) as u8).collect()
    }

    // ---- frozen worked examples ----------------------------------------

    #[test]
    fn bleu_matches_a_hand_computed_example() {
        fn w(s: &str) -> Vec<&str> {
            s.split(' ').collect()
        }
        let cand = vec![w("a red square and a blue circle")];
        let refs = vec![vec![w("a red square and a green circle")]];
        // Precisions 6/7, 4/6, 3/5, 2/4; equal lengths so no brevity
        // penalty: BLEU = (144/840)^(1/4).
        let want = (144.0f64 / 840.0).powf(0.25);
        let got = bleu4(&cand, &refs).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((got - 0.643_458_9).abs() < 1e-6);
    }

    #[test]
    fn rouge_matches_a_hand_computed_example() {
        // LCS(a b c d e, a c e) = 3: recall 1, precision 3/5.
        let got = rouge_l(&["a", "b", "c", "d", "e"], &["a", "c", "e"]);
        let want = (1.0 + 1.44) * 1.0 * 0.6 / (1.0 + 1.44 * 0.6);
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.785_407_725).abs() < 1e-9);
    }

    #[test]
    fn wer_matches_a_hand_computed_example() {
        // One substitution and one deletion against four reference words.
        let r = vec![vec!["x", "y", "z", "w"]];
        let h = vec![vec!["x", "a", "w"]];
        assert_eq!(wer(&r, &h).unwrap(), 0.5);
        // Perfect and empty hypotheses.
        assert_eq!(wer(&r, &r.clone()).unwrap(), 0.0);
        let empty = vec![Vec::<&str>::new()];
        assert_eq!(wer(&r, &empty).unwrap(), 1.0);
    }

    #[test]
    fn cider_is_ten_for_identical_singleton_corpus_pairs() {
        // With one example, every reference n-gram has df = 1 = N, so idf
        // is 0 everywhere — the score collapses to 0 even for an identical
        // pair. With two examples of disjoint content (each long enough to
        // have 4-grams), idf is ln 2 on every gram and an identical pair
        // scores the full 10.
        let c1 = vec![
            "a red square and a blue circle".split(' ').collect::<Vec<_>>(),
            "big green triangle sits there quietly".split(' ').collect::<Vec<_>>(),
        ];
        let refs = vec![vec![c1[0].clone()], vec![c1[1].clone()]];
        let got = cider(&c1, &refs).unwrap();
        assert!((got - 10.0).abs() < 1e-9, "{got}");
        // One example alone: zero idf everywhere, hence zero score.
        let solo = vec![c1[0].clone()];
        let solo_refs = vec![vec![c1[0].clone()]];
        assert_eq!(cider(&solo, &solo_refs).unwrap(), 0.0);
    }

    // ---- oracle cross-checks on randomized cases ------------------------

    #[test]
    fn lcs_and_levenshtein_match_recursive_oracles() {
        let mut rng = rng_from_seed(derive_seed(7, "metrics/lcs"));
        for _ in 0..300 {
            let a = rand_seq(&mut rng, 9, 4);
            let b = rand_seq(&mut rng, 9, 4);
            assert_eq!(lcs_len(&a, &b), lcs_oracle(&a, &b), "{a:?} {b:?}");
            assert_eq!(levenshtein(&a, &b), lev_oracle(&a, &b), "{a:?} {b:?}");
        }
    }

    #[test]
    fn bleu_matches_the_brute_force_oracle_on_random_corpora() {
        let mut rng = rng_from_seed(derive_seed(7, "metrics/bleu"));
        for case in 0..200 {
            let n = 1 + rand_index(&mut rng, 4);
            let cands: Vec<Vec<u8>> = (0..n).map(|_| rand_seq(&mut rng, 10, 3)).collect();
            let refs: Vec<Vec<Vec<u8>>> = (0..n)
                .map(|_| {
                    let k = 1 + rand_index(&mut rng, 3);
                    (0..k).map(|_| rand_seq(&mut rng, 10, 3)).collect()
                })
                .collect();
            let got = bleu4(&cands, &refs).unwrap();
            let want = bleu_oracle(&cands, &refs);
            assert!(
                (got - want).abs() <= 1e-9,
                "case {case}: {got} vs {want}\n{cands:?}\n{refs:?}"
            );
        }
    }

    #[test]
    fn cider_matches_the_brute_force_oracle_on_random_corpora() {
        let mut rng = rng_from_seed(derive_seed(7, "metrics/cider"));
        for case in 0..200 {
            let n = 2 + rand_index(&mut rng, 3);
            let cands: Vec<Vec<u8>> = (0..n).map(|_| rand_seq(&mut rng, 8, 3)).collect();
            let refs: Vec<Vec<Vec<u8>>> = (0..n)
                .map(|_| {
                    let k = 1 + rand_index(&mut rng, 2);
                    (0..k).map(|_| rand_seq(&mut rng, 8, 3)).collect()
                })
                .collect();
            let got = cider(&cands, &refs).unwrap();
            let want = cider_oracle(&cands, &refs);
            assert!(
                (got - want).abs() <= 1e-9,
                "case {case}: {got} vs {want}\n{cands:?}\n{refs:?}"
            );
        }
    }

    #[test]
    fn rouge_corpus_checks_against_direct_recomputation() {
        let mut rng = rng_from_seed(derive_seed(7, "metrics/rouge"));
        for _ in 0..200 {
            let n = 1 + rand_index(&mut rng, 4);
            let cands: Vec<Vec<u8>> = (0..n).map(|_| rand_seq(&mut rng, 9, 3)).collect();
            let refs: Vec<Vec<Vec<u8>>> = (0..n)
                .map(|_| vec![rand_seq(&mut rng, 9, 3)])
                .collect();
            let got = rouge_l_corpus(&cands, &refs).unwrap();
            let mut want = 0.0;
            for (c, rs) in cands.iter().zip(&refs) {
                let l = lcs_oracle(c, &rs[0]) as f64;
                want += if l == 0.0 {
                    0.0
                } else {
                    let r = l / rs[0].len() as f64;
                    let p = l / c.len() as f64;
                    2.44 * r * p / (r + 1.44 * p)
                };
            }
            want /= n as f64;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_inputs_are_rejected_or_zero() {
        let empty_c: Vec<Vec<u8>> = Vec::new();
        let empty_r: Vec<Vec<Vec<u8>>> = Vec::new();
        assert!(bleu4(&empty_c, &empty_r).is_err());
        assert!(cider(&empty_c, &empty_r).is_err());
        assert!(matches!(
            bleu4(&[vec![1u8]], &[Vec::<Vec<u8>>::new()]),
            Err(Error::InsufficientData(_))
        ));
        assert!(wer::<u8>(&[], &[]).is_err());
        assert!(wer(&[Vec::<u8>::new()], &[vec![1u8]]).is_err());
        // All-empty candidates score zero, not NaN.
        assert_eq!(bleu4(&[Vec::<u8>::new()], &[vec![vec![1u8]]]).unwrap(), 0.0);
        assert_eq!(cider(&[Vec::<u8>::new(), vec![1]], &[vec![vec![1u8]], vec![vec![2]]]).unwrap(), 0.0);
        assert_eq!(rouge_l::<u8>(&[], &[1]), 0.0);
    }
}
