//! Forward and reverse-mode passes for the encoder-decoder, written by hand.
//!
//! Batches are held *packed*: the rows of every example are concatenated,
//! with an offset table marking example boundaries. Padding never enters
//! the compute path at all — position-wise operations run over the packed
//! matrix, and attention walks the offset table — which is what makes the
//! pad-invariance guarantees hold by construction.
//!
//! Every forward helper returns exactly the intermediates its backward
//! needs, and each backward accumulates parameter gradients into the
//! canonical tensor list from the layout.

use super::{AttnIdx, FfnIdx, LnIdx, ModelParams};
use crate::mat::{gemm_acc, gemm_nt_acc, gemm_tn_acc, logsumexp, softmax_in_place, Mat};
use crate::tokens::{Direction, Modality, Vocabulary, BOS, EOS, PAD};
use crate::{rand_unit, Error, Result, Rng, Scalar};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

// ---------------------------------------------------------------------------
// Batches

/// A batch of same-modality token sequences.
///
/// Constructed from possibly padded rows; trailing `PAD` is stripped and the
/// sequences are stored packed, so downstream compute touches only real
/// tokens. Content tokens must lie in the declared modality's range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    modality: Modality,
    lens: Vec<usize>,
    offsets: Vec<usize>,
    tokens: Vec<u32>,
}

impl Batch {
    pub fn new(modality: Modality, rows: &[Vec<u32>], vocab: &Vocabulary) -> Result<Batch> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("batch needs at least one sequence".into()));
        }
        let range = vocab.range(modality);
        let mut lens = Vec::with_capacity(rows.len());
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut tokens = Vec::new();
        offsets.push(0);
        for (b, row) in rows.iter().enumerate() {
            let mut end = row.len();
            while end > 0 && row[end - 1] == PAD {
                end -= 1;
            }
            if end == 0 {
                return Err(Error::Length(format!("sequence {b} is empty after pad stripping")));
            }
            for (i, &t) in row[..end].iter().enumerate() {
                if !range.contains(&t) {
                    return Err(Error::Domain(format!(
                        "sequence {b} position {i}: token {t} outside the {modality} range {}..{}",
                        range.start, range.end
                    )));
                }
            }
            tokens.extend_from_slice(&row[..end]);
            lens.push(end);
            offsets.push(tokens.len());
        }
        Ok(Batch { modality, lens, offsets, tokens })
    }

    pub fn size(&self) -> usize {
        self.lens.len()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn seq(&self, b: usize) -> &[u32] {
        &self.tokens[self.offsets[b]..self.offsets[b + 1]]
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    pub fn max_len(&self) -> usize {
        self.lens.iter().copied().max().unwrap_or(0)
    }

    pub fn total_tokens(&self) -> usize {
        self.tokens.len()
    }
}

/// A source/target batch pair tagged with its translation direction.
#[derive(Debug, Clone)]
pub struct DirectionBatch {
    pub direction: Direction,
    pub src: Batch,
    pub tgt: Batch,
}

impl DirectionBatch {
    pub fn new(direction: Direction, src: Batch, tgt: Batch) -> Result<DirectionBatch> {
        if src.modality() != direction.source || tgt.modality() != direction.target {
            return Err(Error::InvalidArgument(format!(
                "batch modalities {}→{} do not match direction {direction}",
                src.modality(),
                tgt.modality()
            )));
        }
        if src.size() != tgt.size() {
            return Err(Error::Shape(format!(
                "source batch has {} sequences, target {}",
                src.size(),
                tgt.size()
            )));
        }
        Ok(DirectionBatch { direction, src, tgt })
    }
}

// ---------------------------------------------------------------------------
// Packed sequences and dropout

/// Token rows concatenated end to end, with example boundaries.
struct Packed {
    offsets: Vec<usize>,
    tokens: Vec<u32>,
}

impl Packed {
    fn from_batch(batch: &Batch) -> Packed {
        Packed { offsets: batch.offsets.clone(), tokens: batch.tokens.clone() }
    }

    /// Decoder-side packing: each row becomes `[BOS, seq...]`.
    fn bos_prefixed(batch: &Batch) -> Packed {
        let n = batch.size();
        let mut offsets = Vec::with_capacity(n + 1);
        let mut tokens = Vec::with_capacity(batch.total_tokens() + n);
        offsets.push(0);
        for b in 0..n {
            tokens.push(BOS);
            tokens.extend_from_slice(batch.seq(b));
            offsets.push(tokens.len());
        }
        Packed { offsets, tokens }
    }

    fn single(tokens: &[u32]) -> Packed {
        Packed { offsets: vec![0, tokens.len()], tokens: tokens.to_vec() }
    }

    fn total(&self) -> usize {
        self.tokens.len()
    }

    fn examples(&self) -> usize {
        self.offsets.len() - 1
    }
}

/// Labels for teacher forcing: each row becomes `[seq..., EOS]`, aligned
/// position-by-position with the BOS-prefixed decoder input.
fn labels_packed(batch: &Batch) -> Vec<u32> {
    let mut labels = Vec::with_capacity(batch.total_tokens() + batch.size());
    for b in 0..batch.size() {
        labels.extend_from_slice(batch.seq(b));
        labels.push(EOS);
    }
    labels
}

/// Inverted-dropout state for one forward pass. With rate 0 it is inert and
/// consumes no randomness.
struct DropCtx<'a> {
    rate: f64,
    rng: Option<&'a mut Rng>,
}

impl<'a> DropCtx<'a> {
    fn new(rate: f64, rng: Option<&'a mut Rng>) -> Result<DropCtx<'a>> {
        if rate > 0.0 && rng.is_none() {
            return Err(Error::Config(
                "dropout is nonzero but no dropout RNG was supplied".into(),
            ));
        }
        Ok(DropCtx { rate, rng })
    }

    fn none() -> DropCtx<'static> {
        DropCtx { rate: 0.0, rng: None }
    }

    /// Mask `x` in place; returns the mask for the backward pass.
    fn apply<F: Scalar>(&mut self, x: &mut Mat<F>) -> Option<Mat<F>> {
        if self.rate <= 0.0 {
            return None;
        }
        let rng = self.rng.as_mut().expect("checked at construction");
        let keep_scale = F::of_f64(1.0 / (1.0 - self.rate));
        let mut mask = Mat::zeros(x.rows(), x.cols());
        for (m, v) in mask.data_mut().iter_mut().zip(x.data_mut()) {
            if rand_unit(rng) >= self.rate {
                *m = keep_scale;
                *v *= keep_scale;
            } else {
                *v = F::zero();
            }
        }
        Some(mask)
    }
}

fn mask_backward<F: Scalar>(dy: &mut Mat<F>, mask: &Option<Mat<F>>) {
    if let Some(m) = mask {
        for (d, &mm) in dy.data_mut().iter_mut().zip(m.data()) {
            *d *= mm;
        }
    }
}

// ---------------------------------------------------------------------------
// Primitive layers

struct LnCache<F> {
    xhat: Mat<F>,
    inv_std: Vec<F>,
}

fn ln_fwd<F: Scalar>(x: &Mat<F>, g: &[F], b: &[F]) -> (Mat<F>, LnCache<F>) {
    let (r, d) = (x.rows(), x.cols());
    let mut y = Mat::zeros(r, d);
    let mut xhat = Mat::zeros(r, d);
    let mut inv_std = Vec::with_capacity(r);
    let inv_d = F::of_f64(1.0 / d as f64);
    let eps = F::of_f64(LN_EPS);
    for i in 0..r {
        let xr = x.row(i);
        let mut mean = F::zero();
        for &v in xr {
            mean += v;
        }
        mean *= inv_d;
        let mut var = F::zero();
        for &v in xr {
            let c = v - mean;
            var = c.mul_add(c, var);
        }
        var *= inv_d;
        let inv = F::one() / (var + eps).sqrt();
        inv_std.push(inv);
        let xh = xhat.row_mut(i);
        for (j, &v) in xr.iter().enumerate() {
            xh[j] = (v - mean) * inv;
        }
        let yr = y.row_mut(i);
        for j in 0..d {
            yr[j] = xh[j].mul_add(g[j], b[j]);
        }
    }
    (y, LnCache { xhat, inv_std })
}

fn ln_bwd<F: Scalar>(
    dy: &Mat<F>,
    cache: &LnCache<F>,
    g: &[F],
    dg: &mut [F],
    db: &mut [F],
) -> Mat<F> {
    let (r, d) = (dy.rows(), dy.cols());
    let mut dx = Mat::zeros(r, d);
    let inv_d = F::of_f64(1.0 / d as f64);
    for i in 0..r {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let mut m1 = F::zero();
        let mut m2 = F::zero();
        for j in 0..d {
            dg[j] = dyr[j].mul_add(xh[j], dg[j]);
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            m1 += dxh;
            m2 = dxh.mul_add(xh[j], m2);
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let inv = cache.inv_std[i];
        let dxr = dx.row_mut(i);
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dxr[j] = (dxh - m1 - xh[j] * m2) * inv;
        }
    }
    dx
}

fn linear_fwd<F: Scalar>(x: &Mat<F>, w: &Mat<F>, b: &[F]) -> Mat<F> {
    let mut y = Mat::zeros(x.rows(), w.cols());
    gemm_acc(x, w, &mut y);
    for i in 0..y.rows() {
        let row = y.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v += b[j];
        }
    }
    y
}

/// Backward of `y = x·w + b`: accumulates dw and db, returns dx.
fn linear_bwd<F: Scalar>(
    x: &Mat<F>,
    w: &Mat<F>,
    dy: &Mat<F>,
    dw: &mut Mat<F>,
    db: &mut [F],
) -> Mat<F> {
    gemm_tn_acc(x, dy, dw);
    for i in 0..dy.rows() {
        for (j, &v) in dy.row(i).iter().enumerate() {
            db[j] += v;
        }
    }
    let wt = w.transposed();
    let mut dx = Mat::zeros(dy.rows(), w.rows());
    gemm_acc(dy, &wt, &mut dx);
    dx
}

/// Smooth GELU (tanh form), chosen over ReLU so finite-difference gradient
/// probes are not polluted by a kink at zero.
fn gelu_fwd<F: Scalar>(u: &Mat<F>) -> Mat<F> {
    let c = F::of_f64(GELU_C);
    let a = F::of_f64(GELU_A);
    let half = F::of_f64(0.5);
    let mut y = u.clone();
    for v in y.data_mut() {
        let x = *v;
        let t = (c * (x + a * x * x * x)).tanh();
        *v = half * x * (F::one() + t);
    }
    y
}

fn gelu_bwd<F: Scalar>(u: &Mat<F>, dy: &Mat<F>) -> Mat<F> {
    let c = F::of_f64(GELU_C);
    let a = F::of_f64(GELU_A);
    let three_a = F::of_f64(3.0 * GELU_A);
    let half = F::of_f64(0.5);
    let mut dx = Mat::zeros(u.rows(), u.cols());
    for ((o, &x), &d) in dx.data_mut().iter_mut().zip(u.data()).zip(dy.data()) {
        let t = (c * (x + a * x * x * x)).tanh();
        let sech2 = F::one() - t * t;
        let inner = c * (F::one() + three_a * x * x);
        let grad = half * (F::one() + t) + half * x * sech2 * inner;
        *o = d * grad;
    }
    dx
}

// ---------------------------------------------------------------------------
// Attention

fn gather_head<F: Scalar>(x: &Mat<F>, off: usize, len: usize, head: usize, dh: usize) -> Mat<F> {
    let mut out = Mat::zeros(len, dh);
    for i in 0..len {
        out.row_mut(i).copy_from_slice(&x.row(off + i)[head * dh..(head + 1) * dh]);
    }
    out
}

fn scatter_head_add<F: Scalar>(
    dst: &mut Mat<F>,
    off: usize,
    len: usize,
    head: usize,
    dh: usize,
    add: &Mat<F>,
) {
    for i in 0..len {
        let row = &mut dst.row_mut(off + i)[head * dh..(head + 1) * dh];
        for (d, &a) in row.iter_mut().zip(add.row(i)) {
            *d += a;
        }
    }
}

/// Multi-head scaled dot-product attention over packed rows. Returns the
/// packed context and the attention probabilities per (example, head),
/// which the backward pass needs.
fn attention_fwd<F: Scalar>(
    q: &Mat<F>,
    k: &Mat<F>,
    v: &Mat<F>,
    q_off: &[usize],
    kv_off: &[usize],
    n_heads: usize,
    causal: bool,
) -> (Mat<F>, Vec<Mat<F>>) {
    let d = q.cols();
    let dh = d / n_heads;
    let scale = F::of_f64(1.0 / (dh as f64).sqrt());
    let examples = q_off.len() - 1;
    let mut ctx = Mat::zeros(q.rows(), d);
    let mut probs = Vec::with_capacity(examples * n_heads);
    for b in 0..examples {
        let (qo, ql) = (q_off[b], q_off[b + 1] - q_off[b]);
        let (ko, kl) = (kv_off[b], kv_off[b + 1] - kv_off[b]);
        for h in 0..n_heads {
            let qh = gather_head(q, qo, ql, h, dh);
            let kh = gather_head(k, ko, kl, h, dh);
            let vh = gather_head(v, ko, kl, h, dh);
            let mut s = Mat::zeros(ql, kl);
            gemm_nt_acc(&qh, &kh, &mut s);
            for val in s.data_mut() {
                *val *= scale;
            }
            if causal {
                debug_assert_eq!(ql, kl, "causal attention is self-attention");
                for i in 0..ql {
                    for val in &mut s.row_mut(i)[i + 1..] {
                        *val = F::neg_infinity();
                    }
                }
            }
            for i in 0..ql {
                softmax_in_place(s.row_mut(i));
            }
            let mut c = Mat::zeros(ql, dh);
            gemm_acc(&s, &vh, &mut c);
            scatter_head_add(&mut ctx, qo, ql, h, dh, &c);
            probs.push(s);
        }
    }
    (ctx, probs)
}

/// Backward of [`attention_fwd`]. Masked positions have probability zero,
/// which kills their gradient automatically. Returns (dq, dk, dv) packed.
fn attention_bwd<F: Scalar>(
    dctx: &Mat<F>,
    q: &Mat<F>,
    k: &Mat<F>,
    v: &Mat<F>,
    probs: &[Mat<F>],
    q_off: &[usize],
    kv_off: &[usize],
    n_heads: usize,
) -> (Mat<F>, Mat<F>, Mat<F>) {
    let d = q.cols();
    let dh = d / n_heads;
    let scale = F::of_f64(1.0 / (dh as f64).sqrt());
    let examples = q_off.len() - 1;
    let mut dq = Mat::zeros(q.rows(), d);
    let mut dk = Mat::zeros(k.rows(), d);
    let mut dv = Mat::zeros(v.rows(), d);
    for b in 0..examples {
        let (qo, ql) = (q_off[b], q_off[b + 1] - q_off[b]);
        let (ko, kl) = (kv_off[b], kv_off[b + 1] - kv_off[b]);
        for h in 0..n_heads {
            let p = &probs[b * n_heads + h];
            let dch = gather_head(dctx, qo, ql, h, dh);
            let vh = gather_head(v, ko, kl, h, dh);

            // dP = dctx · vᵀ, dv = Pᵀ · dctx.
            let mut dp = Mat::zeros(ql, kl);
            gemm_nt_acc(&dch, &vh, &mut dp);
            let mut dvh = Mat::zeros(kl, dh);
            gemm_tn_acc(p, &dch, &mut dvh);

            // Softmax backward per row, folding in the score scale.
            let mut ds = Mat::zeros(ql, kl);
            for i in 0..ql {
                let pr = p.row(i);
                let dpr = dp.row(i);
                let mut inner = F::zero();
                for j in 0..kl {
                    inner = pr[j].mul_add(dpr[j], inner);
                }
                let dsr = ds.row_mut(i);
                for j in 0..kl {
                    dsr[j] = pr[j] * (dpr[j] - inner) * scale;
                }
            }

            // dq = dS · k, dk = dSᵀ · q.
            let kh = gather_head(k, ko, kl, h, dh);
            let qh = gather_head(q, qo, ql, h, dh);
            let mut dqh = Mat::zeros(ql, dh);
            gemm_acc(&ds, &kh, &mut dqh);
            let mut dkh = Mat::zeros(kl, dh);
            gemm_tn_acc(&ds, &qh, &mut dkh);

            scatter_head_add(&mut dq, qo, ql, h, dh, &dqh);
            scatter_head_add(&mut dk, ko, kl, h, dh, &dkh);
            scatter_head_add(&mut dv, ko, kl, h, dh, &dvh);
        }
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------------------------
// Embedding

fn embed_fwd<F: Scalar>(params: &ModelParams<F>, packed: &Packed, modality: Modality) -> Mat<F> {
    let layout = &params.layout;
    let tok = params.mat(layout.tok_emb);
    let pos = params.mat(layout.pos_emb);
    let md = params.mat(layout.mod_emb);
    let d = params.cfg.d_model;
    let mrow = md.row(modality.index());
    let mut h = Mat::zeros(packed.total(), d);
    for b in 0..packed.examples() {
        let off = packed.offsets[b];
        let len = packed.offsets[b + 1] - off;
        for i in 0..len {
            let t = packed.tokens[off + i] as usize;
            let out = h.row_mut(off + i);
            let tr = tok.row(t);
            let pr = pos.row(i);
            for j in 0..d {
                out[j] = tr[j] + pr[j] + mrow[j];
            }
        }
    }
    h
}

fn embed_bwd<F: Scalar>(
    dh: &Mat<F>,
    packed: &Packed,
    modality: Modality,
    dtok: &mut Mat<F>,
    dpos: &mut Mat<F>,
    dmod: &mut Mat<F>,
) {
    let d = dh.cols();
    for b in 0..packed.examples() {
        let off = packed.offsets[b];
        let len = packed.offsets[b + 1] - off;
        for i in 0..len {
            let g = dh.row(off + i);
            let t = packed.tokens[off + i] as usize;
            let tr = dtok.row_mut(t);
            for j in 0..d {
                tr[j] += g[j];
            }
            let pr = dpos.row_mut(i);
            for j in 0..d {
                pr[j] += g[j];
            }
        }
    }
    let mrow = dmod.row_mut(modality.index());
    for r in 0..dh.rows() {
        let g = dh.row(r);
        for j in 0..d {
            mrow[j] += g[j];
        }
    }
}

// ---------------------------------------------------------------------------
// Encoder / decoder stacks

fn pair_mut<F>(g: &mut [Mat<F>], i: usize, j: usize) -> (&mut Mat<F>, &mut Mat<F>) {
    assert_ne!(i, j);
    if i < j {
        let (a, b) = g.split_at_mut(j);
        (&mut a[i], &mut b[0])
    } else {
        let (b, a) = g.split_at_mut(i);
        (&mut a[0], &mut b[j])
    }
}

struct AttnBlockCache<F> {
    /// LN output feeding the q (and for self-attention, k/v) projections.
    normed: Mat<F>,
    q: Mat<F>,
    k: Mat<F>,
    v: Mat<F>,
    probs: Vec<Mat<F>>,
    ctx: Mat<F>,
    drop: Option<Mat<F>>,
}

struct FfnBlockCache<F> {
    ln: LnCache<F>,
    normed: Mat<F>,
    u: Mat<F>,
    act: Mat<F>,
    drop: Option<Mat<F>>,
}

struct EncLayerCache<F> {
    ln1: LnCache<F>,
    attn: AttnBlockCache<F>,
    ffn: FfnBlockCache<F>,
}

struct EncCache<F> {
    packed: Packed,
    emb_drop: Option<Mat<F>>,
    layers: Vec<EncLayerCache<F>>,
    fin: LnCache<F>,
}

struct DecLayerCache<F> {
    ln1: LnCache<F>,
    self_attn: AttnBlockCache<F>,
    ln2: LnCache<F>,
    cross: AttnBlockCache<F>,
    ffn: FfnBlockCache<F>,
}

struct DecCache<F> {
    packed: Packed,
    emb_drop: Option<Mat<F>>,
    layers: Vec<DecLayerCache<F>>,
    fin: LnCache<F>,
    /// Final decoder hidden states (input to the output projection).
    out: Mat<F>,
}

/// One self-attention sublayer forward: pre-norm, projections, attention,
/// output projection, dropout; the caller adds the residual.
#[allow(clippy::too_many_arguments)]
fn self_attn_block_fwd<F: Scalar>(
    params: &ModelParams<F>,
    idx: &AttnIdx,
    normed: Mat<F>,
    q_off: &[usize],
    causal: bool,
    drop: &mut DropCtx<'_>,
) -> (Mat<F>, AttnBlockCache<F>) {
    let q = linear_fwd(&normed, params.mat(idx.wq), params.mat(idx.bq).row(0));
    let k = linear_fwd(&normed, params.mat(idx.wk), params.mat(idx.bk).row(0));
    let v = linear_fwd(&normed, params.mat(idx.wv), params.mat(idx.bv).row(0));
    let (ctx, probs) = attention_fwd(&q, &k, &v, q_off, q_off, params.cfg.n_heads, causal);
    let mut out = linear_fwd(&ctx, params.mat(idx.wo), params.mat(idx.bo).row(0));
    let mask = drop.apply(&mut out);
    (out, AttnBlockCache { normed, q, k, v, probs, ctx, drop: mask })
}

/// Backward of [`self_attn_block_fwd`]; returns the gradient w.r.t. the
/// sublayer's *normed* input.
#[allow(clippy::too_many_arguments)]
fn self_attn_block_bwd<F: Scalar>(
    params: &ModelParams<F>,
    idx: &AttnIdx,
    cache: &AttnBlockCache<F>,
    mut d_out: Mat<F>,
    q_off: &[usize],
    grads: &mut [Mat<F>],
) -> Mat<F> {
    mask_backward(&mut d_out, &cache.drop);
    let (dwo, dbo) = pair_mut(grads, idx.wo, idx.bo);
    let dctx = linear_bwd(&cache.ctx, params.mat(idx.wo), &d_out, dwo, dbo.row_mut(0));
    let (dq, dk, dv) = attention_bwd(
        &dctx,
        &cache.q,
        &cache.k,
        &cache.v,
        &cache.probs,
        q_off,
        q_off,
        params.cfg.n_heads,
    );
    let (dwq, dbq) = pair_mut(grads, idx.wq, idx.bq);
    let mut dn = linear_bwd(&cache.normed, params.mat(idx.wq), &dq, dwq, dbq.row_mut(0));
    let (dwk, dbk) = pair_mut(grads, idx.wk, idx.bk);
    let dn_k = linear_bwd(&cache.normed, params.mat(idx.wk), &dk, dwk, dbk.row_mut(0));
    let (dwv, dbv) = pair_mut(grads, idx.wv, idx.bv);
    let dn_v = linear_bwd(&cache.normed, params.mat(idx.wv), &dv, dwv, dbv.row_mut(0));
    for ((a, &b), &c) in dn.data_mut().iter_mut().zip(dn_k.data()).zip(dn_v.data()) {
        *a += b + c;
    }
    dn
}

/// FFN sublayer forward (pre-norm + two linears with GELU between).
fn ffn_block_fwd<F: Scalar>(
    params: &ModelParams<F>,
    ln: &LnIdx,
    idx: &FfnIdx,
    h: &Mat<F>,
    drop: &mut DropCtx<'_>,
) -> (Mat<F>, FfnBlockCache<F>) {
    let (normed, ln_cache) = ln_fwd(h, params.mat(ln.g).row(0), params.mat(ln.b).row(0));
    let u = linear_fwd(&normed, params.mat(idx.w1), params.mat(idx.b1).row(0));
    let act = gelu_fwd(&u);
    let mut out = linear_fwd(&act, params.mat(idx.w2), params.mat(idx.b2).row(0));
    let mask = drop.apply(&mut out);
    (out, FfnBlockCache { ln: ln_cache, normed, u, act, drop: mask })
}

/// Backward of [`ffn_block_fwd`]; returns the gradient w.r.t. the sublayer's
/// residual-stream input.
fn ffn_block_bwd<F: Scalar>(
    params: &ModelParams<F>,
    ln: &LnIdx,
    idx: &FfnIdx,
    cache: &FfnBlockCache<F>,
    mut d_out: Mat<F>,
    grads: &mut [Mat<F>],
) -> Mat<F> {
    mask_backward(&mut d_out, &cache.drop);
    let (dw2, db2) = pair_mut(grads, idx.w2, idx.b2);
    let dact = linear_bwd(&cache.act, params.mat(idx.w2), &d_out, dw2, db2.row_mut(0));
    let du = gelu_bwd(&cache.u, &dact);
    let (dw1, db1) = pair_mut(grads, idx.w1, idx.b1);
    let dnormed = linear_bwd(&cache.normed, params.mat(idx.w1), &du, dw1, db1.row_mut(0));
    let (dg, db) = pair_mut(grads, ln.g, ln.b);
    ln_bwd(&dnormed, &cache.ln, params.mat(ln.g).row(0), dg.row_mut(0), db.row_mut(0))
}

fn encoder_forward<F: Scalar>(
    params: &ModelParams<F>,
    packed: Packed,
    modality: Modality,
    drop: &mut DropCtx<'_>,
) -> (Mat<F>, EncCache<F>) {
    let layout = params.layout.clone();
    let mut h = embed_fwd(params, &packed, modality);
    let emb_drop = drop.apply(&mut h);
    let mut layers = Vec::with_capacity(layout.enc.len());
    for l in &layout.enc {
        let (normed1, ln1) =
            ln_fwd(&h, params.mat(l.ln1.g).row(0), params.mat(l.ln1.b).row(0));
        let (att_out, attn) =
            self_attn_block_fwd(params, &l.attn, normed1, &packed.offsets, false, drop);
        for (a, &b) in h.data_mut().iter_mut().zip(att_out.data()) {
            *a += b;
        }
        let (ffn_out, ffn) = ffn_block_fwd(params, &l.ln2, &l.ffn, &h, drop);
        for (a, &b) in h.data_mut().iter_mut().zip(ffn_out.data()) {
            *a += b;
        }
        layers.push(EncLayerCache { ln1, attn, ffn });
    }
    let (out, fin) = ln_fwd(
        &h,
        params.mat(layout.enc_final.g).row(0),
        params.mat(layout.enc_final.b).row(0),
    );
    (out, EncCache { packed, emb_drop, layers, fin })
}

fn encoder_backward<F: Scalar>(
    params: &ModelParams<F>,
    cache: &EncCache<F>,
    d_enc_out: &Mat<F>,
    modality: Modality,
    grads: &mut [Mat<F>],
) {
    let layout = params.layout.clone();
    let (dg, db) = pair_mut(grads, layout.enc_final.g, layout.enc_final.b);
    let mut dh = ln_bwd(
        d_enc_out,
        &cache.fin,
        params.mat(layout.enc_final.g).row(0),
        dg.row_mut(0),
        db.row_mut(0),
    );
    for (l, lc) in layout.enc.iter().zip(&cache.layers).rev() {
        // FFN sublayer: h_out = h_in + ffn(h_in); gradient flows through
        // both the identity and the sublayer.
        let d_res = ffn_block_bwd(params, &l.ln2, &l.ffn, &lc.ffn, dh.clone(), grads);
        for (a, &b) in dh.data_mut().iter_mut().zip(d_res.data()) {
            *a += b;
        }
        // Self-attention sublayer.
        let dn1 =
            self_attn_block_bwd(params, &l.attn, &lc.attn, dh.clone(), &cache.packed.offsets, grads);
        let (dg1, db1) = pair_mut(grads, l.ln1.g, l.ln1.b);
        let d_res = ln_bwd(&dn1, &lc.ln1, params.mat(l.ln1.g).row(0), dg1.row_mut(0), db1.row_mut(0));
        for (a, &b) in dh.data_mut().iter_mut().zip(d_res.data()) {
            *a += b;
        }
    }
    mask_backward(&mut dh, &cache.emb_drop);
    let (dtok, rest) = grads.split_at_mut(layout.pos_emb);
    let (dpos, dmod) = rest.split_at_mut(1);
    embed_bwd(
        &dh,
        &cache.packed,
        modality,
        &mut dtok[layout.tok_emb],
        &mut dpos[0],
        &mut dmod[0],
    );
}

#[allow(clippy::too_many_arguments)]
fn decoder_forward<F: Scalar>(
    params: &ModelParams<F>,
    packed: Packed,
    modality: Modality,
    enc_out: &Mat<F>,
    src_offsets: &[usize],
    drop: &mut DropCtx<'_>,
) -> DecCache<F> {
    let layout = params.layout.clone();
    let mut h = embed_fwd(params, &packed, modality);
    let emb_drop = drop.apply(&mut h);
    let mut layers = Vec::with_capacity(layout.dec.len());
    for l in &layout.dec {
        let (normed1, ln1) =
            ln_fwd(&h, params.mat(l.ln1.g).row(0), params.mat(l.ln1.b).row(0));
        let (att_out, self_attn) =
            self_attn_block_fwd(params, &l.self_attn, normed1, &packed.offsets, true, drop);
        for (a, &b) in h.data_mut().iter_mut().zip(att_out.data()) {
            *a += b;
        }

        // Cross-attention: queries from the decoder stream, keys/values from
        // the encoder output.
        let (normed2, ln2) =
            ln_fwd(&h, params.mat(l.ln2.g).row(0), params.mat(l.ln2.b).row(0));
        let ca = &l.cross_attn;
        let q = linear_fwd(&normed2, params.mat(ca.wq), params.mat(ca.bq).row(0));
        let k = linear_fwd(enc_out, params.mat(ca.wk), params.mat(ca.bk).row(0));
        let v = linear_fwd(enc_out, params.mat(ca.wv), params.mat(ca.bv).row(0));
        let (ctx, probs) =
            attention_fwd(&q, &k, &v, &packed.offsets, src_offsets, params.cfg.n_heads, false);
        let mut cross_out = linear_fwd(&ctx, params.mat(ca.wo), params.mat(ca.bo).row(0));
        let cross_mask = drop.apply(&mut cross_out);
        for (a, &b) in h.data_mut().iter_mut().zip(cross_out.data()) {
            *a += b;
        }
        let cross = AttnBlockCache { normed: normed2, q, k, v, probs, ctx, drop: cross_mask };

        let (ffn_out, ffn) = ffn_block_fwd(params, &l.ln3, &l.ffn, &h, drop);
        for (a, &b) in h.data_mut().iter_mut().zip(ffn_out.data()) {
            *a += b;
        }
        layers.push(DecLayerCache { ln1, self_attn, ln2, cross, ffn });
    }
    let (out, fin) = ln_fwd(
        &h,
        params.mat(layout.dec_final.g).row(0),
        params.mat(layout.dec_final.b).row(0),
    );
    DecCache { packed, emb_drop, layers, fin, out }
}

/// Backward through the decoder. Returns the gradient w.r.t. the encoder
/// output (accumulated over every cross-attention block).
fn decoder_backward<F: Scalar>(
    params: &ModelParams<F>,
    cache: &DecCache<F>,
    enc_out: &Mat<F>,
    src_offsets: &[usize],
    d_dec_out: &Mat<F>,
    modality: Modality,
    grads: &mut [Mat<F>],
) -> Mat<F> {
    let layout = params.layout.clone();
    let mut d_enc_out = Mat::zeros(enc_out.rows(), enc_out.cols());
    let (dg, db) = pair_mut(grads, layout.dec_final.g, layout.dec_final.b);
    let mut dh = ln_bwd(
        d_dec_out,
        &cache.fin,
        params.mat(layout.dec_final.g).row(0),
        dg.row_mut(0),
        db.row_mut(0),
    );
    for (l, lc) in layout.dec.iter().zip(&cache.layers).rev() {
        // FFN sublayer.
        let d_res = ffn_block_bwd(params, &l.ln3, &l.ffn, &lc.ffn, dh.clone(), grads);
        for (a, &b) in dh.data_mut().iter_mut().zip(d_res.data()) {
            *a += b;
        }

        // Cross-attention sublayer.
        let ca = &l.cross_attn;
        let mut d_out = dh.clone();
        mask_backward(&mut d_out, &lc.cross.drop);
        let (dwo, dbo) = pair_mut(grads, ca.wo, ca.bo);
        let dctx = linear_bwd(&lc.cross.ctx, params.mat(ca.wo), &d_out, dwo, dbo.row_mut(0));
        let (dq, dk, dv) = attention_bwd(
            &dctx,
            &lc.cross.q,
            &lc.cross.k,
            &lc.cross.v,
            &lc.cross.probs,
            &cache.packed.offsets,
            src_offsets,
            params.cfg.n_heads,
        );
        let (dwq, dbq) = pair_mut(grads, ca.wq, ca.bq);
        let dn2 = linear_bwd(&lc.cross.normed, params.mat(ca.wq), &dq, dwq, dbq.row_mut(0));
        let (dwk, dbk) = pair_mut(grads, ca.wk, ca.bk);
        let de_k = linear_bwd(enc_out, params.mat(ca.wk), &dk, dwk, dbk.row_mut(0));
        let (dwv, dbv) = pair_mut(grads, ca.wv, ca.bv);
        let de_v = linear_bwd(enc_out, params.mat(ca.wv), &dv, dwv, dbv.row_mut(0));
        for ((a, &b), &c) in d_enc_out.data_mut().iter_mut().zip(de_k.data()).zip(de_v.data()) {
            *a += b + c;
        }
        let (dg2, db2) = pair_mut(grads, l.ln2.g, l.ln2.b);
        let d_res =
            ln_bwd(&dn2, &lc.ln2, params.mat(l.ln2.g).row(0), dg2.row_mut(0), db2.row_mut(0));
        for (a, &b) in dh.data_mut().iter_mut().zip(d_res.data()) {
            *a += b;
        }

        // Self-attention sublayer.
        let dn1 = self_attn_block_bwd(
            params,
            &l.self_attn,
            &lc.self_attn,
            dh.clone(),
            &cache.packed.offsets,
            grads,
        );
        let (dg1, db1) = pair_mut(grads, l.ln1.g, l.ln1.b);
        let d_res =
            ln_bwd(&dn1, &lc.ln1, params.mat(l.ln1.g).row(0), dg1.row_mut(0), db1.row_mut(0));
        for (a, &b) in dh.data_mut().iter_mut().zip(d_res.data()) {
            *a += b;
        }
    }
    mask_backward(&mut dh, &cache.emb_drop);
    let (dtok, rest) = grads.split_at_mut(layout.pos_emb);
    let (dpos, dmod) = rest.split_at_mut(1);
    embed_bwd(
        &dh,
        &cache.packed,
        modality,
        &mut dtok[layout.tok_emb],
        &mut dpos[0],
        &mut dmod[0],
    );
    d_enc_out
}

/// Output projection: tied to the token embedding by default.
fn logits_fwd<F: Scalar>(params: &ModelParams<F>, dec_out: &Mat<F>) -> Mat<F> {
    let proj: Mat<F> = match params.layout.out_proj {
        Some(idx) => params.mat(idx).clone(),
        None => params.mat(params.layout.tok_emb).transposed(),
    };
    let mut logits = Mat::zeros(dec_out.rows(), proj.cols());
    gemm_acc(dec_out, &proj, &mut logits);
    logits
}

// ---------------------------------------------------------------------------
// Losses

/// Result of one loss evaluation with gradients.
#[derive(Debug, Clone)]
pub struct LossResult<F> {
    /// Mean cross entropy (nats) over all label positions of the batch.
    pub loss: f64,
    /// Number of label positions (target tokens plus one EOS per example).
    pub label_count: usize,
    /// Parameter gradients in canonical layout order.
    pub grads: Vec<Mat<F>>,
}

fn validate_pair<F: Scalar>(params: &ModelParams<F>, src: &Batch, tgt: &Batch) -> Result<()> {
    let cfg = &params.cfg;
    if src.size() != tgt.size() {
        return Err(Error::Shape(format!(
            "source batch has {} sequences, target {}",
            src.size(),
            tgt.size()
        )));
    }
    if src.modality() == tgt.modality() {
        return Err(Error::InvalidArgument(format!(
            "source and target modality are both {}",
            src.modality()
        )));
    }
    if src.max_len() > cfg.max_len {
        return Err(Error::Length(format!(
            "source length {} exceeds max_len {}",
            src.max_len(),
            cfg.max_len
        )));
    }
    if tgt.max_len() + 1 > cfg.max_len {
        return Err(Error::Length(format!(
            "target length {} plus BOS exceeds max_len {}",
            tgt.max_len(),
            cfg.max_len
        )));
    }
    for &t in src.tokens.iter().chain(tgt.tokens.iter()) {
        if t as usize >= cfg.vocab_total {
            return Err(Error::Range(format!(
                "token {t} outside model vocabulary of {}",
                cfg.vocab_total
            )));
        }
    }
    Ok(())
}

/// Teacher-forced mean cross entropy for one direction, with gradients for
/// every parameter. The decoder sees `[BOS, target...]` and is scored
/// against `[target..., EOS]`; the mean runs over all label positions.
pub fn sequence_loss<F: Scalar>(
    params: &ModelParams<F>,
    src: &Batch,
    tgt: &Batch,
    dropout_rng: Option<&mut Rng>,
) -> Result<LossResult<F>> {
    let mut grads = params.layout.zeros();
    let (loss, label_count) = loss_impl(params, src, tgt, Some(&mut grads), dropout_rng)?;
    Ok(LossResult { loss, label_count, grads })
}

/// Loss only, no gradients: for held-out evaluation.
pub fn sequence_loss_value<F: Scalar>(
    params: &ModelParams<F>,
    src: &Batch,
    tgt: &Batch,
) -> Result<(f64, usize)> {
    loss_impl(params, src, tgt, None, None)
}

fn loss_impl<F: Scalar>(
    params: &ModelParams<F>,
    src: &Batch,
    tgt: &Batch,
    grads: Option<&mut Vec<Mat<F>>>,
    dropout_rng: Option<&mut Rng>,
) -> Result<(f64, usize)> {
    validate_pair(params, src, tgt)?;
    let mut drop = DropCtx::new(params.cfg.dropout, dropout_rng)?;

    let src_packed = Packed::from_batch(src);
    let (enc_out, enc_cache) = encoder_forward(params, src_packed, src.modality(), &mut drop);

    let dec_packed = Packed::bos_prefixed(tgt);
    let labels = labels_packed(tgt);
    let dec_cache = decoder_forward(
        params,
        dec_packed,
        tgt.modality(),
        &enc_out,
        &enc_cache.packed.offsets,
        &mut drop,
    );

    let mut logits = logits_fwd(params, &dec_cache.out);
    debug_assert_eq!(logits.rows(), labels.len());
    let count = labels.len();

    // Loss first (stable log-sum-exp), then reuse the logits buffer for the
    // softmax gradient.
    let mut loss = 0.0f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let lse = logsumexp(row);
        loss += (lse - row[label as usize]).as_f64();
    }
    loss /= count as f64;

    let Some(grads) = grads else {
        return Ok((loss, count));
    };

    let inv_count = F::of_f64(1.0 / count as f64);
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row_mut(r);
        softmax_in_place(row);
        row[label as usize] -= F::one();
        for v in row.iter_mut() {
            *v *= inv_count;
        }
    }
    let dlogits = logits;

    // Output projection backward.
    let mut d_dec_out = Mat::zeros(dec_cache.out.rows(), dec_cache.out.cols());
    match params.layout.out_proj {
        Some(idx) => {
            gemm_tn_acc(&dec_cache.out, &dlogits, &mut grads[idx]);
            let wt = params.mat(idx).transposed();
            gemm_acc(&dlogits, &wt, &mut d_dec_out);
        }
        None => {
            // Tied: logits = dec_out · Eᵀ, so dE += dlogitsᵀ · dec_out and
            // d_dec_out = dlogits · E.
            gemm_tn_acc(&dlogits, &dec_cache.out, &mut grads[params.layout.tok_emb]);
            gemm_acc(&dlogits, params.mat(params.layout.tok_emb), &mut d_dec_out);
        }
    }

    let d_enc_out = decoder_backward(
        params,
        &dec_cache,
        &enc_out,
        &enc_cache.packed.offsets,
        &d_dec_out,
        tgt.modality(),
        grads,
    );
    encoder_backward(params, &enc_cache, &d_enc_out, src.modality(), grads);

    Ok((loss, count))
}

/// Result of the six-direction multi-task objective.
#[derive(Debug, Clone)]
pub struct TmtLossResult<F> {
    /// Sum of the six per-direction mean losses.
    pub total: f64,
    /// Each direction's own mean loss, in canonical direction order.
    pub per_direction: Vec<(Direction, f64)>,
    /// Gradients of the summed objective.
    pub grads: Vec<Mat<F>>,
}

/// The multi-task objective: the sum over all six ordered modality pairs of
/// each pair's mean cross entropy. Batches must arrive in the canonical
/// direction order and cover every pair exactly once.
pub fn tmt_loss<F: Scalar>(
    params: &ModelParams<F>,
    batches: &[DirectionBatch],
    mut dropout_rng: Option<&mut Rng>,
) -> Result<TmtLossResult<F>> {
    if batches.len() != Direction::ALL.len() {
        return Err(Error::InvalidArgument(format!(
            "multi-task loss needs all {} directions, got {} batches",
            Direction::ALL.len(),
            batches.len()
        )));
    }
    for (b, want) in batches.iter().zip(Direction::ALL) {
        if b.direction != want {
            return Err(Error::InvalidArgument(format!(
                "direction {} out of order, expected {want}",
                b.direction
            )));
        }
    }
    let mut grads = params.layout.zeros();
    let mut total = 0.0f64;
    let mut per_direction = Vec::with_capacity(batches.len());
    for b in batches {
        let (loss, _) = loss_impl(params, &b.src, &b.tgt, Some(&mut grads), dropout_rng.as_deref_mut())?;
        total += loss;
        per_direction.push((b.direction, loss));
    }
    Ok(TmtLossResult { total, per_direction, grads })
}

// ---------------------------------------------------------------------------
// Inference entry points

/// Encode one source sequence to its contextual representation (one row per
/// non-pad token). Trailing padding is tolerated and stripped; attention
/// then never sees it, so a padded and an unpadded call agree exactly.
pub fn encode<F: Scalar>(
    params: &ModelParams<F>,
    tokens: &[u32],
    modality: Modality,
) -> Result<Mat<F>> {
    let mut end = tokens.len();
    while end > 0 && tokens[end - 1] == PAD {
        end -= 1;
    }
    if end == 0 {
        return Err(Error::Length("cannot encode an empty sequence".into()));
    }
    if end > params.cfg.max_len {
        return Err(Error::Length(format!(
            "source length {end} exceeds max_len {}",
            params.cfg.max_len
        )));
    }
    for &t in &tokens[..end] {
        if t as usize >= params.cfg.vocab_total {
            return Err(Error::Range(format!(
                "token {t} outside model vocabulary of {}",
                params.cfg.vocab_total
            )));
        }
    }
    let packed = Packed::single(&tokens[..end]);
    let (enc_out, _) = encoder_forward(params, packed, modality, &mut DropCtx::none());
    Ok(enc_out)
}

/// One decoding step: given the encoder output for the source and the
/// target prefix generated so far, return the next-token logits (widened to
/// f64 for the search code). The decoder input is `[BOS, prefix...]`.
pub fn decode_step<F: Scalar>(
    params: &ModelParams<F>,
    enc_out: &Mat<F>,
    prefix: &[u32],
    tgt_modality: Modality,
) -> Result<Vec<f64>> {
    if enc_out.cols() != params.cfg.d_model {
        return Err(Error::Shape(format!(
            "encoder output width {} does not match d_model {}",
            enc_out.cols(),
            params.cfg.d_model
        )));
    }
    if prefix.len() + 1 > params.cfg.max_len {
        return Err(Error::Length(format!(
            "prefix length {} plus BOS exceeds max_len {}",
            prefix.len(),
            params.cfg.max_len
        )));
    }
    for &t in prefix {
        if t as usize >= params.cfg.vocab_total {
            return Err(Error::Range(format!(
                "token {t} outside model vocabulary of {}",
                params.cfg.vocab_total
            )));
        }
    }
    let mut tokens = Vec::with_capacity(prefix.len() + 1);
    tokens.push(BOS);
    tokens.extend_from_slice(prefix);
    let packed = Packed { offsets: vec![0, tokens.len()], tokens };
    let src_offsets = [0usize, enc_out.rows()];
    let dec_cache = decoder_forward(
        params,
        packed,
        tgt_modality,
        enc_out,
        &src_offsets,
        &mut DropCtx::none(),
    );
    let logits = logits_fwd(params, &dec_cache.out);
    Ok(logits.row(logits.rows() - 1).iter().map(|v| v.as_f64()).collect())
}
