//! Optimisation and the multi-direction training loop, plus the data
//! plumbing that feeds it: corpus tokenisation, aligned example pools, and
//! back-translation for pseudo-pair augmentation.

use crate::bpe::{BpeModel, Piece};
use crate::codebook::{tokenize_image, tokenize_speech, Codebook, PatchGrid, SPEECH_TOKEN_CAP};
use crate::decode::{translate_tokens, DecodeConfig};
use crate::formats::{read_features, read_manifest, read_ppm, read_token_corpus, TokenRecord};
use crate::mat::Mat;
use crate::model::{
    sequence_loss, sequence_loss_value, tmt_loss, write_checkpoint, Batch, DirectionBatch,
    ModelParams,
};
use crate::tokens::{Direction, Modality, Vocabulary};
use crate::world::{manifest_path, Split};
use crate::{derive_seed, rand_index, rng_from_seed, Error, Result, Scalar};
use std::path::Path;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Learning-rate schedule

/// Linear warmup to `peak` over `warmup` steps, then inverse-square-root
/// decay: `peak * sqrt(warmup / step)`. Steps are 1-based. With no warmup
/// the decay starts immediately from the peak.
pub fn lr_at(peak: f64, warmup: usize, step: usize) -> f64 {
    debug_assert!(step >= 1);
    if warmup == 0 {
        return peak * (1.0 / step as f64).sqrt();
    }
    if step <= warmup {
        peak * step as f64 / warmup as f64
    } else {
        peak * (warmup as f64 / step as f64).sqrt()
    }
}

// ---------------------------------------------------------------------------
// Adam

/// First and second moment estimates, one matrix per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub m: Vec<Mat<F>>,
    pub v: Vec<Mat<F>>,
    pub t: usize,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(layout: &crate::model::ParamLayout) -> AdamState<F> {
        AdamState { m: layout.zeros(), v: layout.zeros(), t: 0 }
    }
}

/// Euclidean norm over every gradient scalar; errors with the offending
/// tensor's name if anything is non-finite.
fn global_grad_norm<F: Scalar>(grads: &[Mat<F>], params: &ModelParams<F>) -> Result<f64> {
    let mut sq = 0.0f64;
    for (g, e) in grads.iter().zip(&params.layout.entries) {
        for &v in g.data() {
            let v = v.as_f64();
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient for tensor {} is not finite",
                    e.name
                )));
            }
            sq += v * v;
        }
    }
    Ok(sq.sqrt())
}

/// One Adam update with global-norm gradient clipping. Internal arithmetic
/// runs in f64 regardless of the parameter scalar type. Returns the
/// pre-clip gradient norm.
pub fn adam_step<F: Scalar>(
    params: &mut ModelParams<F>,
    grads: &[Mat<F>],
    state: &mut AdamState<F>,
    lr: f64,
    clip: f64,
) -> Result<f64> {
    if grads.len() != params.tensors.len() {
        return Err(Error::Shape(format!(
            "{} gradient tensors for {} parameters",
            grads.len(),
            params.tensors.len()
        )));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(Error::InvalidArgument(format!("learning rate {lr} is not usable")));
    }
    let norm = global_grad_norm(grads, params)?;
    let scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .tensors
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for ((pv, &gv), (mv, vv)) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(vv_iter(v)))
        {
            let g = gv.as_f64() * scale;
            let m_new = ADAM_BETA1 * mv.as_f64() + (1.0 - ADAM_BETA1) * g;
            let v_new = ADAM_BETA2 * vv.as_f64() + (1.0 - ADAM_BETA2) * g * g;
            *mv = F::of_f64(m_new);
            *vv = F::of_f64(v_new);
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            *pv = F::of_f64(pv.as_f64() - lr * m_hat / (v_hat.sqrt() + ADAM_EPS));
        }
    }
    Ok(norm)
}

// Helper so the nested zips stay readable.
fn vv_iter<F: Scalar>(v: &mut Mat<F>) -> std::slice::IterMut<'_, F> {
    v.data_mut().iter_mut()
}

// ---------------------------------------------------------------------------
// Tokenised corpora and direction pools

/// Aligned token sequences for one corpus split: every example has all
/// three modality views, indexed identically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedCorpus {
    pub ids: Vec<String>,
    pub image: Vec<Vec<u32>>,
    pub speech: Vec<Vec<u32>>,
    pub text: Vec<Vec<u32>>,
}

impl TokenizedCorpus {
    /// Group flat records by id; ids keep first-appearance order and each
    /// must carry exactly one sequence per modality.
    pub fn from_records(records: Vec<TokenRecord>) -> Result<TokenizedCorpus> {
        use std::collections::HashMap;
        let mut order: Vec<String> = Vec::new();
        let mut by_id: HashMap<String, [Option<Vec<u32>>; 3]> = HashMap::new();
        for r in records {
            let slot = by_id.entry(r.id.clone()).or_insert_with(|| {
                order.push(r.id.clone());
                [None, None, None]
            });
            let i = r.modality.index();
            if slot[i].is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate {} sequence for id {}",
                    r.modality, r.id
                )));
            }
            if r.tokens.is_empty() {
                return Err(Error::Length(format!("empty {} sequence for id {}", r.modality, r.id)));
            }
            slot[i] = Some(r.tokens);
        }
        let mut out = TokenizedCorpus {
            ids: Vec::with_capacity(order.len()),
            image: Vec::with_capacity(order.len()),
            speech: Vec::with_capacity(order.len()),
            text: Vec::with_capacity(order.len()),
        };
        for id in order {
            let [img, sp, tx] = by_id.remove(&id).expect("grouped above");
            let missing = |m: &str| Error::InvalidArgument(format!("id {id} has no {m} sequence"));
            out.image.push(img.ok_or_else(|| missing("image"))?);
            out.speech.push(sp.ok_or_else(|| missing("speech"))?);
            out.text.push(tx.ok_or_else(|| missing("text"))?);
            out.ids.push(id);
        }
        if out.ids.is_empty() {
            return Err(Error::InvalidArgument("tokenised corpus is empty".into()));
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<TokenizedCorpus> {
        TokenizedCorpus::from_records(read_token_corpus(path)?)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn seqs(&self, m: Modality) -> &[Vec<u32>] {
        match m {
            Modality::Image => &self.image,
            Modality::Speech => &self.speech,
            Modality::Text => &self.text,
        }
    }
}

/// Everything needed to turn raw corpus files into unified token ids.
pub struct TokenizerBundle<'a> {
    pub vocab: &'a Vocabulary,
    pub speech: &'a Codebook<f64>,
    pub image: &'a Codebook<f64>,
    pub bpe: &'a BpeModel,
    pub grid: PatchGrid,
    pub speech_cap: usize,
}

impl<'a> TokenizerBundle<'a> {
    pub fn new(
        vocab: &'a Vocabulary,
        speech: &'a Codebook<f64>,
        image: &'a Codebook<f64>,
        bpe: &'a BpeModel,
    ) -> TokenizerBundle<'a> {
        TokenizerBundle {
            vocab,
            speech,
            image,
            bpe,
            grid: PatchGrid::default_32(),
            speech_cap: SPEECH_TOKEN_CAP,
        }
    }

    /// Text to unified ids. A character outside the tokenizer's inventory
    /// is an error: the model never consumes placeholder ids.
    pub fn text_to_tokens(&self, text: &str) -> Result<Vec<u32>> {
        let mut out = Vec::new();
        for p in self.bpe.encode(text) {
            match p {
                Piece::Known(id) => {
                    out.push(self.vocab.local_to_global(Modality::Text, id)?);
                }
                Piece::Unknown(c) => {
                    return Err(Error::Domain(format!(
                        "character {c:?} is outside the text tokenizer inventory"
                    )));
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Length("text tokenised to nothing".into()));
        }
        Ok(out)
    }
}

/// Tokenise one split of a generated corpus directory into flat records,
/// three per example, in manifest order.
pub fn tokenize_manifest(
    dir: &Path,
    split: Split,
    tk: &TokenizerBundle<'_>,
) -> Result<Vec<TokenRecord>> {
    let entries = read_manifest(&manifest_path(dir, split))?;
    let mut records = Vec::with_capacity(entries.len() * 3);
    for e in &entries {
        let img = read_ppm(&dir.join(&e.image))?;
        let frames = read_features::<f64>(&dir.join(&e.speech))?;
        let image_seq = tokenize_image(tk.image, tk.vocab, &img, &tk.grid)?;
        let speech_seq = tokenize_speech(tk.speech, tk.vocab, &frames, tk.speech_cap)?;
        let text_seq = tk.text_to_tokens(&e.caption)?;
        records.push(TokenRecord {
            id: e.id.clone(),
            modality: Modality::Image,
            tokens: image_seq.tokens,
        });
        records.push(TokenRecord {
            id: e.id.clone(),
            modality: Modality::Speech,
            tokens: speech_seq.tokens,
        });
        records.push(TokenRecord { id: e.id.clone(), modality: Modality::Text, tokens: text_seq });
    }
    Ok(records)
}

/// Aligned (source, target) sequences for one direction.
#[derive(Debug, Clone, Default)]
pub struct PairPool {
    pub src: Vec<Vec<u32>>,
    pub tgt: Vec<Vec<u32>>,
}

/// Per-direction training pools in canonical direction order. Parallel data
/// populates all six; back-translation appends pseudo-pairs to individual
/// directions.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pools: [PairPool; 6],
}

impl TrainSet {
    pub fn from_corpus(corpus: &TokenizedCorpus) -> TrainSet {
        let mut pools: [PairPool; 6] = Default::default();
        for (slot, d) in pools.iter_mut().zip(Direction::ALL) {
            slot.src = corpus.seqs(d.source).to_vec();
            slot.tgt = corpus.seqs(d.target).to_vec();
        }
        TrainSet { pools }
    }

    fn slot(d: Direction) -> usize {
        Direction::ALL.iter().position(|x| *x == d).expect("all directions enumerated")
    }

    pub fn pool(&self, d: Direction) -> &PairPool {
        &self.pools[Self::slot(d)]
    }

    pub fn push_pair(&mut self, d: Direction, src: Vec<u32>, tgt: Vec<u32>) {
        let p = &mut self.pools[Self::slot(d)];
        p.src.push(src);
        p.tgt.push(tgt);
    }

    /// Merge back-translation records (ids `bt-<dir>-<n>`, two records per
    /// id covering the direction's two modalities). Returns pairs added.
    pub fn add_pseudo_pairs(&mut self, records: &[TokenRecord]) -> Result<usize> {
        use std::collections::HashMap;
        let mut grouped: HashMap<&str, Vec<&TokenRecord>> = HashMap::new();
        let mut order: Vec<&str> = Vec::new();
        for r in records {
            let e = grouped.entry(r.id.as_str()).or_default();
            if e.is_empty() {
                order.push(r.id.as_str());
            }
            e.push(r);
        }
        let mut added = 0usize;
        for id in order {
            let group = &grouped[id];
            let dir_part = id
                .strip_prefix("bt-")
                .and_then(|rest| rest.split('-').next())
                .ok_or_else(|| {
                    Error::InvalidArgument(format!("pseudo-pair id {id:?} lacks a bt-<dir>- prefix"))
                })?;
            let d = Direction::parse(dir_part)?;
            if group.len() != 2 {
                return Err(Error::InvalidArgument(format!(
                    "pseudo-pair {id} has {} records, expected 2",
                    group.len()
                )));
            }
            let find = |m: Modality| -> Result<Vec<u32>> {
                group
                    .iter()
                    .find(|r| r.modality == m)
                    .map(|r| r.tokens.clone())
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!("pseudo-pair {id} lacks a {m} record"))
                    })
            };
            self.push_pair(d, find(d.source)?, find(d.target)?);
            added += 1;
        }
        Ok(added)
    }

    pub fn min_pool_len(&self) -> usize {
        self.pools.iter().map(|p| p.src.len()).min().unwrap_or(0)
    }
}

// ---------------------------------------------------------------------------
// The training loop

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup: usize,
    pub clip: f64,
    pub log_every: usize,
    pub ckpt_every: usize,
    pub seed: u64,
    /// Directions that contribute loss. The example sampler always draws
    /// for all six in canonical order, so runs that train a subset see the
    /// same batches for the directions they share with a full run.
    pub directions: Vec<Direction>,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            steps: 5000,
            batch_size: 16,
            peak_lr: 1e-4,
            warmup: 500,
            clip: 1.0,
            log_every: 50,
            ckpt_every: 1000,
            seed: 0,
            directions: Direction::ALL.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        // steps == 0 is an explicit no-op run; otherwise warmup must end
        // before the run does.
        if self.steps > 0 && self.warmup >= self.steps {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than the run ({} steps)",
                self.warmup, self.steps
            )));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak learning rate {} is not usable", self.peak_lr)));
        }
        if !(self.clip.is_finite() && self.clip >= 0.0) {
            return Err(Error::Config(format!("gradient clip {} is not usable", self.clip)));
        }
        if self.log_every == 0 || self.ckpt_every == 0 {
            return Err(Error::Config("log and checkpoint intervals must be positive".into()));
        }
        if self.directions.is_empty() {
            return Err(Error::Config("at least one direction must be active".into()));
        }
        let mut seen = [false; 6];
        for d in &self.directions {
            let i = TrainSet::slot(*d);
            if seen[i] {
                return Err(Error::Config(format!("direction {d} listed twice")));
            }
            seen[i] = true;
        }
        Ok(())
    }
}

/// What the last optimisation step saw. A zero-step run reports no losses.
#[derive(Debug, Clone)]
pub struct TrainReport {
    pub steps_run: usize,
    pub final_total_loss: Option<f64>,
    pub final_per_direction: Vec<(Direction, f64)>,
}

/// Run the training loop: every step samples a batch for each of the six
/// directions (consuming the sampler stream identically no matter which
/// subset is active), computes the summed objective over the active
/// directions, and applies one clipped Adam update.
pub fn train<F: Scalar>(
    params: &mut ModelParams<F>,
    data: &TrainSet,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
    log: &mut dyn FnMut(&str),
) -> Result<TrainReport> {
    cfg.validate()?;
    for d in Direction::ALL {
        if data.pool(d).src.is_empty() {
            return Err(Error::InvalidArgument(format!("no training pairs for {d}")));
        }
    }
    let mut sampler = rng_from_seed(derive_seed(cfg.seed, "sampler"));
    let mut dropout_rng = rng_from_seed(derive_seed(cfg.seed, "dropout"));
    let mut adam = AdamState::new(&params.layout);
    let all_active = cfg.directions.len() == 6;

    let mut last_total: Option<f64> = None;
    let mut last_dirs: Vec<(Direction, f64)> = Vec::new();
    for step in 1..=cfg.steps {
        // Draw all six batches first, unconditionally.
        let mut batches: Vec<DirectionBatch> = Vec::with_capacity(6);
        for d in Direction::ALL {
            let pool = data.pool(d);
            let n = pool.src.len();
            let mut src_rows = Vec::with_capacity(cfg.batch_size);
            let mut tgt_rows = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let i = rand_index(&mut sampler, n);
                src_rows.push(pool.src[i].clone());
                tgt_rows.push(pool.tgt[i].clone());
            }
            if all_active || cfg.directions.contains(&d) {
                batches.push(DirectionBatch::new(
                    d,
                    Batch::new(d.source, &src_rows, vocab)?,
                    Batch::new(d.target, &tgt_rows, vocab)?,
                )?);
            }
        }

        let (total, per_dir, grads) = if all_active {
            let r = tmt_loss(params, &batches, Some(&mut dropout_rng))?;
            (r.total, r.per_direction, r.grads)
        } else {
            let mut grads = params.layout.zeros();
            let mut total = 0.0f64;
            let mut per_dir = Vec::with_capacity(batches.len());
            for b in &batches {
                let r = sequence_loss(params, &b.src, &b.tgt, Some(&mut dropout_rng))?;
                total += r.loss;
                per_dir.push((b.direction, r.loss));
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += x;
                    }
                }
            }
            (total, per_dir, grads)
        };

        let lr = lr_at(cfg.peak_lr, cfg.warmup, step);
        adam_step(params, &grads, &mut adam, lr, cfg.clip)?;

        if step % cfg.log_every == 0 || step == cfg.steps {
            for (d, l) in &per_dir {
                log(&format!("step={step} dir={d} loss={l:.6} lr={lr:.6}"));
            }
            log(&format!("step={step} loss={total:.6} lr={lr:.6}"));
        }
        if let Some(dir) = ckpt_dir {
            if step % cfg.ckpt_every == 0 && step != cfg.steps {
                write_checkpoint(&dir.join(format!("ckpt-step{step}.tmtckpt")), params)?;
            }
        }
        last_total = Some(total);
        last_dirs = per_dir;
    }
    if let Some(dir) = ckpt_dir {
        write_checkpoint(&dir.join("ckpt-final.tmtckpt"), params)?;
    }
    Ok(TrainReport {
        steps_run: cfg.steps,
        final_total_loss: last_total,
        final_per_direction: last_dirs,
    })
}

/// Mean teacher-forced loss over a whole corpus: for each direction the
/// label-weighted mean cross entropy, and their sum (the same objective
/// training optimises, evaluated exactly).
pub fn mean_corpus_loss<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    corpus: &TokenizedCorpus,
    chunk: usize,
) -> Result<(f64, Vec<(Direction, f64)>)> {
    if chunk == 0 {
        return Err(Error::InvalidArgument("chunk size must be positive".into()));
    }
    let mut per_dir = Vec::with_capacity(6);
    let mut total = 0.0f64;
    for d in Direction::ALL {
        let src_all = corpus.seqs(d.source);
        let tgt_all = corpus.seqs(d.target);
        let mut ce_sum = 0.0f64;
        let mut labels = 0usize;
        for start in (0..corpus.len()).step_by(chunk) {
            let end = (start + chunk).min(corpus.len());
            let src = Batch::new(d.source, &src_all[start..end], vocab)?;
            let tgt = Batch::new(d.target, &tgt_all[start..end], vocab)?;
            let (mean, count) = sequence_loss_value(params, &src, &tgt)?;
            ce_sum += mean * count as f64;
            labels += count;
        }
        let mean = ce_sum / labels as f64;
        total += mean;
        per_dir.push((d, mean));
    }
    Ok((total, per_dir))
}

// ---------------------------------------------------------------------------
// Back-translation

/// Outcome of one pseudo-pair generation round.
#[derive(Debug, Clone)]
pub struct BtOutcome {
    /// Flat records, two per usable pseudo-pair, ids `bt-<dir>-<n>`.
    pub records: Vec<TokenRecord>,
    pub attempted: usize,
    pub usable: usize,
    /// (direction, attempted, usable) in request order.
    pub per_direction: Vec<(Direction, usize, usize)>,
}

impl BtOutcome {
    pub fn usable_fraction(&self) -> f64 {
        if self.attempted == 0 {
            0.0
        } else {
            self.usable as f64 / self.attempted as f64
        }
    }
}

/// For each requested direction `src→tgt`, treat the corpus's target-side
/// sequences as monolingual data and decode them through the *reverse*
/// direction to synthesise sources. A pseudo-pair is usable when the decode
/// finished with EOS and produced a non-empty sequence; everything else is
/// skipped and counted.
pub fn back_translate<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    corpus: &TokenizedCorpus,
    directions: &[Direction],
    per_direction: usize,
    dcfg: &DecodeConfig,
) -> Result<BtOutcome> {
    if per_direction == 0 {
        return Err(Error::InvalidArgument("need at least one pseudo-pair per direction".into()));
    }
    if directions.is_empty() {
        return Err(Error::InvalidArgument("no directions requested".into()));
    }
    let mut records = Vec::new();
    let mut stats = Vec::with_capacity(directions.len());
    let mut attempted_all = 0usize;
    let mut usable_all = 0usize;
    for &d in directions {
        let pool = corpus.seqs(d.target);
        let n = per_direction.min(pool.len());
        let one = back_translate_targets(params, vocab, &pool[..n], d, dcfg)?;
        records.extend(one.records);
        stats.push((d, one.attempted, one.usable));
        attempted_all += one.attempted;
        usable_all += one.usable;
    }
    Ok(BtOutcome {
        records,
        attempted: attempted_all,
        usable: usable_all,
        per_direction: stats,
    })
}

/// Back-translate a plain list of target-side sequences for one direction:
/// the monolingual-corpus case, where no aligned sources exist at all. Each
/// usable decode yields a pseudo-source/target record pair under a
/// `bt-<direction>-<index>` id.
pub fn back_translate_targets<F: Scalar>(
    params: &ModelParams<F>,
    vocab: &Vocabulary,
    targets: &[Vec<u32>],
    d: Direction,
    dcfg: &DecodeConfig,
) -> Result<BtOutcome> {
    let reverse = Direction::new(d.target, d.source)?;
    let mut records = Vec::new();
    let mut usable = 0usize;
    for (i, tgt) in targets.iter().enumerate() {
        let hyp = translate_tokens(params, vocab, tgt, reverse, dcfg)?;
        if !hyp.finished || hyp.tokens.is_empty() {
            continue;
        }
        let id = format!("bt-{d}-{i:06}");
        records.push(TokenRecord {
            id: id.clone(),
            modality: d.source,
            tokens: hyp.tokens,
        });
        records.push(TokenRecord { id, modality: d.target, tokens: tgt.clone() });
        usable += 1;
    }
    Ok(BtOutcome {
        records,
        attempted: targets.len(),
        usable,
        per_direction: vec![(d, targets.len(), usable)],
    })
}
