//! The encoder-decoder transformer: configuration, parameter storage,
//! initialisation, and checkpoint serialisation.
//!
//! Parameters live in a flat list of named matrices whose order is a pure
//! function of the configuration (the [`ParamLayout`]), so optimiser state,
//! gradients, checkpoints, and finite-difference probes all agree on one
//! canonical enumeration. The forward/backward passes are in
//! [`compute`](self::compute) and re-exported here.

mod compute;

pub use compute::{
    decode_step, encode, sequence_loss, sequence_loss_value, tmt_loss, Batch, DirectionBatch,
    LossResult, TmtLossResult,
};

use crate::mat::Mat;
use crate::{rand_normal, rng_from_seed, Error, Result, Scalar};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Model width.
    pub d_model: usize,
    /// Attention heads; must divide `d_model`.
    pub n_heads: usize,
    /// Hidden width of the position-wise feed-forward blocks.
    pub ffn_dim: usize,
    /// Encoder depth.
    pub enc_layers: usize,
    /// Decoder depth.
    pub dec_layers: usize,
    /// Longest supported sequence (positional table size).
    pub max_len: usize,
    /// Total unified vocabulary size (specials + all three ranges).
    pub vocab_total: usize,
    /// Dropout probability on embeddings and sublayer outputs. The desk-
    /// scale default is 0; training with a nonzero value needs an RNG.
    pub dropout: f64,
    /// Tie the output projection to the token embedding (default on).
    pub tied_output: bool,
}

impl ModelConfig {
    /// The default desk-scale architecture, parameterised by vocabulary.
    pub fn desk(vocab_total: usize) -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            ffn_dim: 256,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 400,
            vocab_total,
            dropout: 0.0,
            tied_output: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(Error::Config("encoder and decoder need at least one layer".into()));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must be at least 2".into()));
        }
        if self.vocab_total <= crate::tokens::SPECIAL_COUNT as usize {
            return Err(Error::Config(format!(
                "vocab_total {} leaves no room beyond the specials",
                self.vocab_total
            )));
        }
        if !(self.dropout.is_finite() && (0.0..1.0).contains(&self.dropout)) {
            return Err(Error::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// How one named tensor is initialised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Gaussian, std 1/√d_model: embeddings and projection weights.
    Weight,
    /// Zeros: biases.
    Bias,
    /// Ones: layer-norm gains.
    Gain,
}

/// One tensor's slot in the canonical enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub kind: ParamKind,
}

/// Tensor indices for one attention block.
#[derive(Debug, Clone, Copy)]
pub struct AttnIdx {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

/// Tensor indices for one layer norm.
#[derive(Debug, Clone, Copy)]
pub struct LnIdx {
    pub g: usize,
    pub b: usize,
}

/// Tensor indices for one feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct FfnIdx {
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub struct EncLayerIdx {
    pub ln1: LnIdx,
    pub attn: AttnIdx,
    pub ln2: LnIdx,
    pub ffn: FfnIdx,
}

#[derive(Debug, Clone)]
pub struct DecLayerIdx {
    pub ln1: LnIdx,
    pub self_attn: AttnIdx,
    pub ln2: LnIdx,
    pub cross_attn: AttnIdx,
    pub ln3: LnIdx,
    pub ffn: FfnIdx,
}

/// The canonical tensor enumeration for a configuration, with resolved
/// indices for every block the compute passes touch.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub entries: Vec<LayoutEntry>,
    by_name: HashMap<String, usize>,
    pub scalar_count: usize,

    pub tok_emb: usize,
    pub pos_emb: usize,
    pub mod_emb: usize,
    pub enc: Vec<EncLayerIdx>,
    pub enc_final: LnIdx,
    pub dec: Vec<DecLayerIdx>,
    pub dec_final: LnIdx,
    /// Present only when the output projection is untied.
    pub out_proj: Option<usize>,
}

impl ParamLayout {
    pub fn for_config(cfg: &ModelConfig) -> Result<ParamLayout> {
        cfg.validate()?;
        let d = cfg.d_model;
        let mut entries: Vec<LayoutEntry> = Vec::new();
        let mut push = |name: String, rows: usize, cols: usize, kind: ParamKind| -> usize {
            entries.push(LayoutEntry { name, rows, cols, kind });
            entries.len() - 1
        };

        let tok_emb = push("tok_emb".into(), cfg.vocab_total, d, ParamKind::Weight);
        let pos_emb = push("pos_emb".into(), cfg.max_len, d, ParamKind::Weight);
        let mod_emb = push("mod_emb".into(), 3, d, ParamKind::Weight);

        let attn = |prefix: &str, push: &mut dyn FnMut(String, usize, usize, ParamKind) -> usize| AttnIdx {
            wq: push(format!("{prefix}.wq"), d, d, ParamKind::Weight),
            bq: push(format!("{prefix}.bq"), 1, d, ParamKind::Bias),
            wk: push(format!("{prefix}.wk"), d, d, ParamKind::Weight),
            bk: push(format!("{prefix}.bk"), 1, d, ParamKind::Bias),
            wv: push(format!("{prefix}.wv"), d, d, ParamKind::Weight),
            bv: push(format!("{prefix}.bv"), 1, d, ParamKind::Bias),
            wo: push(format!("{prefix}.wo"), d, d, ParamKind::Weight),
            bo: push(format!("{prefix}.bo"), 1, d, ParamKind::Bias),
        };
        let ln = |prefix: &str, push: &mut dyn FnMut(String, usize, usize, ParamKind) -> usize| LnIdx {
            g: push(format!("{prefix}.g"), 1, d, ParamKind::Gain),
            b: push(format!("{prefix}.b"), 1, d, ParamKind::Bias),
        };
        let ffn = |prefix: &str, push: &mut dyn FnMut(String, usize, usize, ParamKind) -> usize| FfnIdx {
            w1: push(format!("{prefix}.w1"), d, cfg.ffn_dim, ParamKind::Weight),
            b1: push(format!("{prefix}.b1"), 1, cfg.ffn_dim, ParamKind::Bias),
            w2: push(format!("{prefix}.w2"), cfg.ffn_dim, d, ParamKind::Weight),
            b2: push(format!("{prefix}.b2"), 1, d, ParamKind::Bias),
        };

        let mut enc = Vec::with_capacity(cfg.enc_layers);
        for l in 0..cfg.enc_layers {
            enc.push(EncLayerIdx {
                ln1: ln(&format!("enc{l}.ln1"), &mut push),
                attn: attn(&format!("enc{l}.attn"), &mut push),
                ln2: ln(&format!("enc{l}.ln2"), &mut push),
                ffn: ffn(&format!("enc{l}.ffn"), &mut push),
            });
        }
        let enc_final = ln("enc_final", &mut push);

        let mut dec = Vec::with_capacity(cfg.dec_layers);
        for l in 0..cfg.dec_layers {
            dec.push(DecLayerIdx {
                ln1: ln(&format!("dec{l}.ln1"), &mut push),
                self_attn: attn(&format!("dec{l}.self"), &mut push),
                ln2: ln(&format!("dec{l}.ln2"), &mut push),
                cross_attn: attn(&format!("dec{l}.cross"), &mut push),
                ln3: ln(&format!("dec{l}.ln3"), &mut push),
                ffn: ffn(&format!("dec{l}.ffn"), &mut push),
            });
        }
        let dec_final = ln("dec_final", &mut push);

        let out_proj = if cfg.tied_output {
            None
        } else {
            Some(push("out_proj".into(), d, cfg.vocab_total, ParamKind::Weight))
        };

        let by_name: HashMap<String, usize> =
            entries.iter().enumerate().map(|(i, e)| (e.name.clone(), i)).collect();
        if by_name.len() != entries.len() {
            return Err(Error::Config("duplicate tensor name in layout".into()));
        }
        let scalar_count = entries.iter().map(|e| e.rows * e.cols).sum();
        Ok(ParamLayout {
            entries,
            by_name,
            scalar_count,
            tok_emb,
            pos_emb,
            mod_emb,
            enc,
            enc_final,
            dec,
            dec_final,
            out_proj,
        })
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    /// Fresh zeroed tensor list matching this layout (gradients, moments).
    pub fn zeros<F: Scalar>(&self) -> Vec<Mat<F>> {
        self.entries.iter().map(|e| Mat::zeros(e.rows, e.cols)).collect()
    }
}

/// A full set of model parameters.
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub cfg: ModelConfig,
    pub layout: Arc<ParamLayout>,
    pub tensors: Vec<Mat<F>>,
}

impl<F: Scalar> ModelParams<F> {
    /// Seeded initialisation: weights and embeddings Gaussian with standard
    /// deviation 1/√d_model, biases zero, layer-norm gains one. Draw order
    /// is the layout order, element row-major, so equal seeds give equal
    /// parameters forever.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<F>> {
        let layout = Arc::new(ParamLayout::for_config(cfg)?);
        let std = 1.0 / (cfg.d_model as f64).sqrt();
        let mut rng = rng_from_seed(seed);
        let mut tensors = Vec::with_capacity(layout.entries.len());
        for e in &layout.entries {
            let mut m = Mat::zeros(e.rows, e.cols);
            match e.kind {
                ParamKind::Weight => {
                    for v in m.data_mut() {
                        *v = F::of_f64(rand_normal(&mut rng) * std);
                    }
                }
                ParamKind::Bias => {}
                ParamKind::Gain => m.fill(F::one()),
            }
            tensors.push(m);
        }
        Ok(ModelParams { cfg: cfg.clone(), layout, tensors })
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.layout.scalar_count
    }

    pub fn mat(&self, idx: usize) -> &Mat<F> {
        &self.tensors[idx]
    }

    /// Convert parameters to another scalar type.
    pub fn cast<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            cfg: self.cfg.clone(),
            layout: Arc::clone(&self.layout),
            tensors: self.tensors.iter().map(Mat::cast).collect(),
        }
    }
}

const CKPT_MAGIC: &str = "TMTCKPT";
const CKPT_VERSION: u32 = 1;

/// Serialise parameters: a text header (magic, version, config as key=value,
/// tensor count), then per tensor one descriptor line `<name> <rank> <dims>`
/// followed by its row-major little-endian f64 payload.
pub fn write_checkpoint<F: Scalar>(path: &Path, params: &ModelParams<F>) -> Result<()> {
    let cfg = &params.cfg;
    let mut head = String::new();
    writeln!(head, "{CKPT_MAGIC} {CKPT_VERSION}").unwrap();
    writeln!(head, "d_model={}", cfg.d_model).unwrap();
    writeln!(head, "n_heads={}", cfg.n_heads).unwrap();
    writeln!(head, "ffn_dim={}", cfg.ffn_dim).unwrap();
    writeln!(head, "enc_layers={}", cfg.enc_layers).unwrap();
    writeln!(head, "dec_layers={}", cfg.dec_layers).unwrap();
    writeln!(head, "max_len={}", cfg.max_len).unwrap();
    writeln!(head, "vocab_total={}", cfg.vocab_total).unwrap();
    writeln!(head, "dropout={}", cfg.dropout).unwrap();
    writeln!(head, "tied_output={}", cfg.tied_output).unwrap();
    writeln!(head, "tensors={}", params.tensors.len()).unwrap();

    let mut out = head.into_bytes();
    for (e, m) in params.layout.entries.iter().zip(&params.tensors) {
        out.extend_from_slice(format!("{} 2 {} {}\n", e.name, e.rows, e.cols).as_bytes());
        for &v in m.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
        }
    }
    std::fs::write(path, &out).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Load a checkpoint. The stored configuration is reconstructed and every
/// tensor is validated against the layout it implies.
pub fn read_checkpoint<F: Scalar>(path: &Path) -> Result<ModelParams<F>> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let fail = |msg: &str| Error::Io(format!("{}: {msg}", path.display()));

    fn read_line(bytes: &[u8], pos: &mut usize) -> Option<String> {
        let start = *pos;
        let mut p = *pos;
        while p < bytes.len() && bytes[p] != b'\n' {
            p += 1;
        }
        if p >= bytes.len() {
            return None;
        }
        let s = std::str::from_utf8(&bytes[start..p]).ok()?.to_string();
        *pos = p + 1;
        Some(s)
    }
    let mut pos = 0usize;
    let line = |pos: &mut usize| -> Result<String> {
        read_line(&bytes, pos).ok_or_else(|| fail("truncated or non-UTF-8 header line"))
    };

    let magic = line(&mut pos)?;
    let mut mp = magic.split_whitespace();
    if mp.next() != Some(CKPT_MAGIC) {
        return Err(fail("not a checkpoint file (bad magic)"));
    }
    let version: u32 = mp
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| fail("missing checkpoint version"))?;
    if version != CKPT_VERSION {
        return Err(fail(&format!("unsupported checkpoint version {version}")));
    }

    let mut kv: HashMap<String, String> = HashMap::new();
    let mut n_tensors: Option<usize> = None;
    while n_tensors.is_none() {
        let l = line(&mut pos)?;
        let Some((k, v)) = l.split_once('=') else {
            return Err(fail(&format!("malformed header line {l:?}")));
        };
        if k == "tensors" {
            n_tensors = Some(v.parse().map_err(|_| fail("bad tensor count"))?);
        } else {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k).ok_or_else(|| fail(&format!("missing config key {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?.parse().map_err(|_| fail(&format!("bad value for {k}")))
    };
    let cfg = ModelConfig {
        d_model: parse_usize("d_model")?,
        n_heads: parse_usize("n_heads")?,
        ffn_dim: parse_usize("ffn_dim")?,
        enc_layers: parse_usize("enc_layers")?,
        dec_layers: parse_usize("dec_layers")?,
        max_len: parse_usize("max_len")?,
        vocab_total: parse_usize("vocab_total")?,
        dropout: get("dropout")?.parse().map_err(|_| fail("bad value for dropout"))?,
        tied_output: match get("tied_output")?.as_str() {
            "true" => true,
            "false" => false,
            _ => return Err(fail("bad value for tied_output")),
        },
    };
    let layout = Arc::new(ParamLayout::for_config(&cfg).map_err(|e| fail(&e.to_string()))?);
    if n_tensors != Some(layout.entries.len()) {
        return Err(fail(&format!(
            "checkpoint has {} tensors, config implies {}",
            n_tensors.unwrap_or(0),
            layout.entries.len()
        )));
    }

    let mut tensors = Vec::with_capacity(layout.entries.len());
    for e in &layout.entries {
        let desc = line(&mut pos)?;
        let parts: Vec<&str> = desc.split_whitespace().collect();
        if parts.len() != 4 || parts[1] != "2" {
            return Err(fail(&format!("malformed tensor descriptor {desc:?}")));
        }
        if parts[0] != e.name {
            return Err(fail(&format!("expected tensor {:?}, found {:?}", e.name, parts[0])));
        }
        let rows: usize = parts[2].parse().map_err(|_| fail("bad tensor rows"))?;
        let cols: usize = parts[3].parse().map_err(|_| fail("bad tensor cols"))?;
        if rows != e.rows || cols != e.cols {
            return Err(fail(&format!(
                "tensor {} is {rows}x{cols}, config implies {}x{}",
                e.name, e.rows, e.cols
            )));
        }
        let need = rows * cols * 8;
        if bytes.len() - pos < need {
            return Err(fail(&format!("tensor {} payload truncated", e.name)));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in bytes[pos..pos + need].chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "{}: tensor {} contains a non-finite value",
                    path.display(),
                    e.name
                )));
            }
            data.push(F::of_f64(v));
        }
        pos += need;
        tensors.push(Mat::from_vec(rows, cols, data)?);
    }
    if pos != bytes.len() {
        return Err(fail("trailing bytes after last tensor"));
    }
    Ok(ModelParams { cfg, layout, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_dim: 32,
            enc_layers: 2,
            dec_layers: 2,
            max_len: 40,
            vocab_total: 30,
            dropout: 0.0,
            tied_output: true,
        }
    }

    #[test]
    fn layout_enumerates_expected_tensor_count() {
        let cfg = small_cfg();
        let layout = ParamLayout::for_config(&cfg).unwrap();
        // 3 embeddings + enc layers (2 LN + attn 8 + ffn 4 = 16 each)
        // + enc final LN (2) + dec layers (3 LN + 2×attn 8 + ffn 4 = 26 each)
        // + dec final LN (2).
        let expect = 3 + cfg.enc_layers * 16 + 2 + cfg.dec_layers * 26 + 2;
        assert_eq!(layout.entries.len(), expect);
        // Untied adds one more.
        let untied = ModelConfig { tied_output: false, ..cfg };
        let l2 = ParamLayout::for_config(&untied).unwrap();
        assert_eq!(l2.entries.len(), expect + 1);
        assert!(l2.out_proj.is_some());
    }

    #[test]
    fn scalar_count_matches_formula() {
        let cfg = small_cfg();
        let layout = ParamLayout::for_config(&cfg).unwrap();
        let d = cfg.d_model;
        let attn = 4 * (d * d + d);
        let ffn = d * cfg.ffn_dim + cfg.ffn_dim + cfg.ffn_dim * d + d;
        let ln = 2 * d;
        let emb = cfg.vocab_total * d + cfg.max_len * d + 3 * d;
        let enc = cfg.enc_layers * (2 * ln + attn + ffn) + ln;
        let dec = cfg.dec_layers * (3 * ln + 2 * attn + ffn) + ln;
        assert_eq!(layout.scalar_count, emb + enc + dec);
    }

    #[test]
    fn init_is_seed_deterministic_with_sane_statistics() {
        let cfg = small_cfg();
        let a: ModelParams<f64> = ModelParams::init(&cfg, 11).unwrap();
        let b: ModelParams<f64> = ModelParams::init(&cfg, 11).unwrap();
        let c: ModelParams<f64> = ModelParams::init(&cfg, 12).unwrap();
        for (x, y) in a.tensors.iter().zip(&b.tensors) {
            assert_eq!(x, y);
        }
        assert!(a.tensors[a.layout.tok_emb] != c.tensors[c.layout.tok_emb]);

        // Gains are one, biases zero.
        let ln = &a.tensors[a.layout.enc[0].ln1.g];
        assert!(ln.data().iter().all(|&v| v == 1.0));
        let bias = &a.tensors[a.layout.enc[0].attn.bq];
        assert!(bias.data().iter().all(|&v| v == 0.0));

        // Weight std is near 1/√d.
        let w = &a.tensors[a.layout.enc[0].attn.wq];
        let n = w.data().len() as f64;
        let var = w.data().iter().map(|&v| v * v).sum::<f64>() / n;
        let want = 1.0 / cfg.d_model as f64;
        assert!((var - want).abs() < want * 0.5, "var {var} vs {want}");
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = small_cfg();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.vocab_total = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_cfg();
        cfg.dropout = f64::NAN;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn checkpoint_roundtrips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.tmtckpt");
        let params: ModelParams<f64> = ModelParams::init(&small_cfg(), 3).unwrap();
        write_checkpoint(&p, &params).unwrap();
        let back: ModelParams<f64> = read_checkpoint(&p).unwrap();
        assert_eq!(back.cfg, params.cfg);
        for (x, y) in params.tensors.iter().zip(&back.tensors) {
            assert_eq!(x, y);
        }
        // Writing again produces identical bytes.
        let p2 = dir.path().join("model2.tmtckpt");
        write_checkpoint(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.tmtckpt");
        let params: ModelParams<f64> = ModelParams::init(&small_cfg(), 3).unwrap();
        write_checkpoint(&p, &params).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 10);
        std::fs::write(&p, &bytes).unwrap();
        assert!(read_checkpoint::<f64>(&p).is_err());

        let q = dir.path().join("bad.tmtckpt");
        std::fs::write(&q, b"NOTACKPT 1\n").unwrap();
        assert!(read_checkpoint::<f64>(&q).is_err());
    }
}
