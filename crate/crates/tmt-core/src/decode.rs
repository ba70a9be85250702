//! Constrained sequence decoding: greedy and beam search.
//!
//! The search never proposes a token outside the target modality's range.
//! Text and speech may emit `EOS` at any step; image targets are decoded to
//! exactly the fixed patch count and then closed with a forced `EOS`, since
//! every image has the same number of patch tokens by construction.
//!
//! Hypothesis scores are sums of log-probabilities under the *full* softmax
//! (masking restricts which tokens may be chosen, not the probability
//! model), so a finished hypothesis can be re-scored independently by
//! teacher-forcing it through the loss path.

use crate::model::{decode_step, encode, ModelParams};
use crate::tokens::{Direction, Modality, Vocabulary, EOS};
use crate::{Error, Result, Scalar};

/// Search-time knobs.
#[derive(Debug, Clone)]
pub struct DecodeConfig {
    /// Beam width; 1 degenerates to greedy.
    pub beam: usize,
    /// Length-normalization exponent applied when picking the final
    /// hypothesis: candidates compare by `score / len^alpha`. Zero compares
    /// raw scores.
    pub alpha: f64,
    /// Step budget for text and speech targets; `None` means the model's
    /// positional capacity (`max_len - 1`).
    pub max_steps: Option<usize>,
    /// Exact token count for image targets.
    pub image_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> DecodeConfig {
        DecodeConfig { beam: 5, alpha: 0.0, max_steps: None, image_len: 32 }
    }
}

impl DecodeConfig {
    fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::InvalidArgument("beam width must be at least 1".into()));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "length penalty must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        if self.image_len == 0 {
            return Err(Error::InvalidArgument("image_len must be positive".into()));
        }
        Ok(())
    }
}

/// One decoded candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated content tokens (no BOS, no EOS).
    pub tokens: Vec<u32>,
    /// Sum of full-softmax log-probabilities of every emitted token,
    /// including the terminating EOS when `finished`.
    pub score: f64,
    /// Whether the hypothesis ended with EOS (rather than the step budget).
    pub finished: bool,
}

impl Hypothesis {
    fn ranking_score(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.score
        } else {
            // Count the closing EOS as part of the length.
            let len = self.tokens.len() + usize::from(self.finished);
            self.score / (len.max(1) as f64).powf(alpha)
        }
    }
}

/// Anything that can produce next-token logits for a growing prefix. The
/// model is the real implementation; tests drive the search with scripted
/// tables.
pub trait NextTokenScorer {
    fn vocab_total(&self) -> usize;
    fn next_logits(&mut self, prefix: &[u32]) -> Result<Vec<f64>>;
}

/// Model-backed scorer: encodes the source once, then runs one decoder pass
/// per step.
pub struct ModelScorer<'a, F> {
    params: &'a ModelParams<F>,
    enc_out: crate::mat::Mat<F>,
    tgt: Modality,
}

impl<'a, F: Scalar> ModelScorer<'a, F> {
    pub fn new(
        params: &'a ModelParams<F>,
        src_tokens: &[u32],
        direction: Direction,
    ) -> Result<ModelScorer<'a, F>> {
        let enc_out = encode(params, src_tokens, direction.source)?;
        Ok(ModelScorer { params, enc_out, tgt: direction.target })
    }
}

impl<F: Scalar> NextTokenScorer for ModelScorer<'_, F> {
    fn vocab_total(&self) -> usize {
        self.params.cfg.vocab_total
    }

    fn next_logits(&mut self, prefix: &[u32]) -> Result<Vec<f64>> {
        decode_step(self.params, &self.enc_out, prefix, self.tgt)
    }
}

/// The candidate set for one step: either any in-modality token plus EOS,
/// in-modality only (image body), or EOS alone (image close).
#[derive(Debug, Clone, Copy)]
enum Allowed {
    RangeAndEos(u32, u32),
    RangeOnly(u32, u32),
    EosOnly,
}

impl Allowed {
    fn at_step(vocab: &Vocabulary, tgt: Modality, step: usize, cfg: &DecodeConfig) -> Allowed {
        let r = vocab.range(tgt);
        match tgt {
            Modality::Image => {
                if step < cfg.image_len {
                    Allowed::RangeOnly(r.start, r.end)
                } else {
                    Allowed::EosOnly
                }
            }
            _ => Allowed::RangeAndEos(r.start, r.end),
        }
    }

    fn for_each(self, mut f: impl FnMut(u32)) {
        match self {
            Allowed::RangeAndEos(s, e) => {
                f(EOS);
                for t in s..e {
                    f(t);
                }
            }
            Allowed::RangeOnly(s, e) => {
                for t in s..e {
                    f(t);
                }
            }
            Allowed::EosOnly => f(EOS),
        }
    }
}

/// Log-softmax over the full vocabulary, evaluated at one id.
fn log_probs(logits: &[f64]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for &v in logits {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for &v in logits {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    logits.iter().map(|&v| v - lse).collect()
}

fn step_budget(capacity: usize, tgt: Modality, cfg: &DecodeConfig) -> Result<usize> {
    match tgt {
        Modality::Image => {
            if cfg.image_len > capacity {
                return Err(Error::Length(format!(
                    "image length {} does not fit the decoder capacity {capacity}",
                    cfg.image_len
                )));
            }
            // Body plus the forced EOS.
            Ok(cfg.image_len + 1)
        }
        _ => Ok(cfg.max_steps.unwrap_or(capacity).min(capacity)),
    }
}

/// Greedy search: at each step take the best allowed token (ties to the
/// lowest id), stop on EOS or the step budget.
pub fn greedy(
    scorer: &mut dyn NextTokenScorer,
    vocab: &Vocabulary,
    tgt: Modality,
    cfg: &DecodeConfig,
    capacity: usize,
) -> Result<Hypothesis> {
    cfg.validate()?;
    let budget = step_budget(capacity, tgt, cfg)?;
    let mut tokens: Vec<u32> = Vec::new();
    let mut score = 0.0f64;
    for step in 0..budget {
        let logits = scorer.next_logits(&tokens)?;
        check_width(&logits, scorer.vocab_total(), vocab)?;
        let lp = log_probs(&logits);
        let allowed = Allowed::at_step(vocab, tgt, step, cfg);
        let mut best: Option<(f64, u32)> = None;
        allowed.for_each(|t| {
            let cand = lp[t as usize];
            let better = match best {
                None => true,
                // Strict improvement only, so ties keep the lower id
                // (EOS enumerates first, then ascending range).
                Some((b, _)) => cand > b,
            };
            if better {
                best = Some((cand, t));
            }
        });
        let (lp_best, tok) = best.expect("candidate set is never empty");
        score += lp_best;
        if tok == EOS {
            return Ok(Hypothesis { tokens, score, finished: true });
        }
        tokens.push(tok);
    }
    Ok(Hypothesis { tokens, score, finished: false })
}

struct Live {
    tokens: Vec<u32>,
    score: f64,
}

/// Beam search with deterministic ordering: candidates sort by score
/// descending, then token id ascending, then parent beam index ascending.
/// Finished hypotheses leave the beam; with no length normalization, live
/// branches that can no longer beat the best finished score are pruned.
pub fn beam(
    scorer: &mut dyn NextTokenScorer,
    vocab: &Vocabulary,
    tgt: Modality,
    cfg: &DecodeConfig,
    capacity: usize,
) -> Result<Hypothesis> {
    cfg.validate()?;
    let budget = step_budget(capacity, tgt, cfg)?;
    let width = cfg.beam;
    let mut live = vec![Live { tokens: Vec::new(), score: 0.0 }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for step in 0..budget {
        if live.is_empty() {
            break;
        }
        let allowed = Allowed::at_step(vocab, tgt, step, cfg);
        // (negated score, token, parent) sorts exactly as specified.
        let mut cands: Vec<(f64, u32, usize)> = Vec::new();
        for (parent, hyp) in live.iter().enumerate() {
            let logits = scorer.next_logits(&hyp.tokens)?;
            check_width(&logits, scorer.vocab_total(), vocab)?;
            let lp = log_probs(&logits);
            allowed.for_each(|t| {
                cands.push((hyp.score + lp[t as usize], t, parent));
            });
        }
        cands.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        cands.truncate(width);

        let mut next: Vec<Live> = Vec::with_capacity(width);
        for (score, tok, parent) in cands {
            if tok == EOS {
                finished.push(Hypothesis {
                    tokens: live[parent].tokens.clone(),
                    score,
                    finished: true,
                });
            } else {
                let mut tokens = Vec::with_capacity(live[parent].tokens.len() + 1);
                tokens.extend_from_slice(&live[parent].tokens);
                tokens.push(tok);
                next.push(Live { tokens, score });
            }
        }
        live = next;

        // Log-probabilities only shrink a hypothesis's score, so once a
        // branch is at or below the best finished raw score it is dead.
        if cfg.alpha == 0.0 {
            if let Some(best) = finished
                .iter()
                .map(|h| h.score)
                .max_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal))
            {
                live.retain(|h| h.score > best);
            }
        }
    }

    // Survivors of the budget compete with the finished pool on score; a
    // branch that ran out of steps can still outrank a poor early EOS.
    finished.extend(
        live.into_iter().map(|l| Hypothesis { tokens: l.tokens, score: l.score, finished: false }),
    );
    finished
        .into_iter()
        .max_by(|a, b| {
            a.ranking_score(cfg.alpha)
                .partial_cmp(&b.ranking_score(cfg.alpha))
                .unwrap_or(std::cmp::Ordering::Equal)
                // On exact ties prefer finished, then shorter, then the
                // lexicographically smaller token sequence.
                .then(a.finished.cmp(&b.finished))
                .then(b.tokens.len().cmp(&a.tokens.len()))
                .then(b.tokens.cmp(&a.tokens))
        })
        .ok_or_else(|| Error::Decode("beam search produced no hypothesis".into()))
}

fn check_width(logits: &[f64], scorer_total: usize, vocab: &Vocabulary) -> Result<()> {
    if logits.len() != scorer_total || logits.len() < vocab.total() as usize {
        return Err(Error::Shape(format!(
            "scorer returned {} logits for a vocabulary of {}",
            logits.len(),
            vocab.total()
        )));
    }
    Ok(())
}

/// Translate one source token sequence: encode, then search for the target.
/// Dispatches on beam width.
pub fn translate_tokens<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    src_tokens: &[u32],
    direction: Direction,
    cfg: &DecodeConfig,
) -> Result<Hypothesis> {
    if params.cfg.vocab_total != vocab.total() as usize {
        return Err(Error::Config(format!(
            "model vocabulary {} does not match tokenizer vocabulary {}",
            params.cfg.vocab_total,
            vocab.total()
        )));
    }
    let mut scorer = ModelScorer::new(params, src_tokens, direction)?;
    let capacity = params.cfg.max_len - 1;
    if cfg.beam > 1 {
        beam(&mut scorer, vocab, direction.target, cfg, capacity)
    } else {
        greedy(&mut scorer, vocab, direction.target, cfg, capacity)
    }
}

/// Score an already-finished hypothesis by teacher forcing: the sum of
/// log-probabilities of `[tokens..., EOS]`. Independent of the search code.
pub fn rescore<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    src_tokens: &[u32],
    direction: Direction,
    tokens: &[u32],
) -> Result<f64> {
    use crate::model::{sequence_loss_value, Batch};
    let src = Batch::new(direction.source, &[src_tokens.to_vec()], vocab)?;
    let tgt = Batch::new(direction.target, &[tokens.to_vec()], vocab)?;
    let (mean_ce, count) = sequence_loss_value(params, &src, &tgt)?;
    Ok(-mean_ce * count as f64)
}
