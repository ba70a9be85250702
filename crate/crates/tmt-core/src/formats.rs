//! On-disk formats shared by the tools.
//!
//! Everything is either line-oriented UTF-8 text (token corpora, manifests,
//! codebooks, BPE models, prediction dumps) or a one-line ASCII header
//! followed by little-endian binary payload (feature tracks), plus binary
//! PPM for images. All writers are byte-deterministic: equal inputs produce
//! equal files.

use crate::bpe::BpeModel;
use crate::codebook::Codebook;
use crate::mat::Mat;
use crate::tokens::{Direction, Modality};
use crate::{Error, Result, Scalar};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

/// An 8-bit RGB image, row-major, three bytes per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub height: usize,
    pub width: usize,
    pub rgb: Vec<u8>,
}

impl Raster {
    /// All-black image.
    pub fn new(height: usize, width: usize) -> Raster {
        Raster { height, width, rgb: vec![0; height * width * 3] }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let base = (y * self.width + x) * 3;
        [self.rgb[base], self.rgb[base + 1], self.rgb[base + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let base = (y * self.width + x) * 3;
        self.rgb[base..base + 3].copy_from_slice(&rgb);
    }
}

fn io_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {msg}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// PPM images (binary P6, maxval 255)

pub fn write_ppm(path: &Path, img: &Raster) -> Result<()> {
    if img.rgb.len() != img.height * img.width * 3 {
        return Err(Error::Shape(format!(
            "raster buffer {} does not match {}x{}",
            img.rgb.len(),
            img.height,
            img.width
        )));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.rgb);
    write_bytes(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<Raster> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut pos = 0usize;

    // Header tokens are whitespace-separated; '#' starts a comment to EOL.
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(io_err(path, "truncated PPM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if next_token(&bytes)? != "P6" {
        return Err(io_err(path, "not a binary PPM (expected P6 magic)"));
    }
    let width: usize = next_token(&bytes)?.parse().map_err(|_| io_err(path, "bad PPM width"))?;
    let height: usize = next_token(&bytes)?.parse().map_err(|_| io_err(path, "bad PPM height"))?;
    let maxval: usize = next_token(&bytes)?.parse().map_err(|_| io_err(path, "bad PPM maxval"))?;
    if maxval != 255 {
        return Err(io_err(path, format!("unsupported PPM maxval {maxval}, expected 255")));
    }
    // Exactly one whitespace byte separates the header from the pixels.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(io_err(path, "missing separator after PPM header"));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() - pos != need {
        return Err(io_err(
            path,
            format!("PPM payload is {} bytes, expected {need}", bytes.len() - pos),
        ));
    }
    Ok(Raster { height, width, rgb: bytes[pos..].to_vec() })
}

// ---------------------------------------------------------------------------
// Feature tracks: "TMTFEAT <dim> <frames>\n" + frames×dim little-endian f32

pub fn write_features<F: Scalar>(path: &Path, frames: &Mat<F>) -> Result<()> {
    let mut out = format!("TMTFEAT {} {}\n", frames.cols(), frames.rows()).into_bytes();
    out.reserve(frames.data().len() * 4);
    for &v in frames.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    write_bytes(path, &out)
}

pub fn read_features<F: Scalar>(path: &Path) -> Result<Mat<F>> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| io_err(path, "missing feature header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| io_err(path, "bad header"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "TMTFEAT" {
        return Err(io_err(path, "expected header: TMTFEAT <dim> <frames>"));
    }
    let dim: usize = parts[1].parse().map_err(|_| io_err(path, "bad feature dim"))?;
    let n_frames: usize = parts[2].parse().map_err(|_| io_err(path, "bad frame count"))?;
    let payload = &bytes[nl + 1..];
    let need = dim * n_frames * 4;
    if payload.len() != need {
        return Err(io_err(
            path,
            format!("feature payload is {} bytes, expected {need}", payload.len()),
        ));
    }
    let mut data = Vec::with_capacity(dim * n_frames);
    for chunk in payload.chunks_exact(4) {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(io_err(path, "feature file contains a non-finite value"));
        }
        data.push(F::of_f64(f64::from(v)));
    }
    Mat::from_vec(n_frames, dim, data)
}

// ---------------------------------------------------------------------------
// Token corpus: one record per line, "<id>\t<i|s|t>\t<space-separated ids>"

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRecord {
    pub id: String,
    pub modality: Modality,
    pub tokens: Vec<u32>,
}

pub fn write_token_corpus(path: &Path, records: &[TokenRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        if r.id.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidArgument(format!(
                "record id {:?} contains a tab or newline",
                r.id
            )));
        }
        write!(out, "{}\t{}\t", r.id, r.modality.letter()).unwrap();
        for (i, t) in r.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            write!(out, "{t}").unwrap();
        }
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_token_corpus(path: &Path) -> Result<Vec<TokenRecord>> {
    let text = read_text(path)?;
    let mut records = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.splitn(3, '\t');
        let (Some(id), Some(m), Some(toks)) = (parts.next(), parts.next(), parts.next()) else {
            return Err(io_err(path, format!("line {}: expected 3 tab-separated fields", ln + 1)));
        };
        let mut chars = m.chars();
        let (Some(letter), None) = (chars.next(), chars.next()) else {
            return Err(io_err(path, format!("line {}: bad modality field {m:?}", ln + 1)));
        };
        let modality = Modality::from_letter(letter)
            .map_err(|e| io_err(path, format!("line {}: {e}", ln + 1)))?;
        let mut tokens = Vec::new();
        for t in toks.split_whitespace() {
            tokens.push(
                t.parse::<u32>()
                    .map_err(|_| io_err(path, format!("line {}: bad token id {t:?}", ln + 1)))?,
            );
        }
        records.push(TokenRecord { id: id.to_string(), modality, tokens });
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// World manifest: "<id>\t<image path>\t<speech path>\t<caption>"

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub speech: String,
    pub caption: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        for (field, name) in [
            (&e.id, "id"),
            (&e.image, "image path"),
            (&e.speech, "speech path"),
            (&e.caption, "caption"),
        ] {
            if field.contains(['\t', '\n', '\r']) {
                return Err(Error::InvalidArgument(format!(
                    "manifest {name} {field:?} contains a tab or newline"
                )));
            }
        }
        writeln!(out, "{}\t{}\t{}\t{}", e.id, e.image, e.speech, e.caption).unwrap();
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = read_text(path)?;
    let mut entries = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 4 {
            return Err(io_err(
                path,
                format!("line {}: expected 4 tab-separated fields, got {}", ln + 1, parts.len()),
            ));
        }
        entries.push(ManifestEntry {
            id: parts[0].to_string(),
            image: parts[1].to_string(),
            speech: parts[2].to_string(),
            caption: parts[3].to_string(),
        });
    }
    Ok(entries)
}

// ---------------------------------------------------------------------------
// Codebook: "TMTCB <dim> <k>\n" + k lines of dim decimal reals

pub fn write_codebook<F: Scalar>(path: &Path, cb: &Codebook<F>) -> Result<()> {
    let mut out = format!("TMTCB {} {}\n", cb.dim(), cb.k());
    for c in 0..cb.k() {
        for (i, v) in cb.centers().row(c).iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            // Shortest round-trip decimal form.
            write!(out, "{}", v.as_f64()).unwrap();
        }
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_codebook<F: Scalar>(path: &Path) -> Result<Codebook<F>> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| io_err(path, "empty codebook file"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "TMTCB" {
        return Err(io_err(path, "expected header: TMTCB <dim> <k>"));
    }
    let dim: usize = parts[1].parse().map_err(|_| io_err(path, "bad codebook dim"))?;
    let k: usize = parts[2].parse().map_err(|_| io_err(path, "bad codebook size"))?;
    let mut data = Vec::with_capacity(dim * k);
    for c in 0..k {
        let line = lines
            .next()
            .ok_or_else(|| io_err(path, format!("missing centre line {}/{k}", c + 1)))?;
        let mut count = 0;
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| io_err(path, format!("centre {}: bad real {tok:?}", c + 1)))?;
            data.push(F::of_f64(v));
            count += 1;
        }
        if count != dim {
            return Err(io_err(
                path,
                format!("centre {} has {count} values, expected {dim}", c + 1),
            ));
        }
    }
    Codebook::from_centers(Mat::from_vec(k, dim, data)?)
}

// ---------------------------------------------------------------------------
// BPE model: "TMTBPE <n_base> <n_merges>\n" + base symbol lines + merge lines
//
// Base symbols are written verbatim, one per line (a line holding a single
// space is the space symbol). Merge lines are "<left> <right>"; this is
// unambiguous because whitespace symbols are never merged, so left and right
// never contain whitespace.

pub fn write_bpe(path: &Path, model: &BpeModel) -> Result<()> {
    let merges = model.merge_strings();
    let mut out = format!("TMTBPE {} {}\n", model.n_base(), merges.len());
    for s in &model.symbols()[..model.n_base()] {
        out.push_str(s);
        out.push('\n');
    }
    for (l, r) in &merges {
        writeln!(out, "{l} {r}").unwrap();
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_bpe(path: &Path) -> Result<BpeModel> {
    let text = read_text(path)?;
    let mut lines = text.split('\n');
    let header = lines.next().ok_or_else(|| io_err(path, "empty BPE file"))?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 || parts[0] != "TMTBPE" {
        return Err(io_err(path, "expected header: TMTBPE <n_base> <n_merges>"));
    }
    let n_base: usize = parts[1].parse().map_err(|_| io_err(path, "bad base count"))?;
    let n_merges: usize = parts[2].parse().map_err(|_| io_err(path, "bad merge count"))?;
    let mut base = Vec::with_capacity(n_base);
    for i in 0..n_base {
        let line = lines
            .next()
            .ok_or_else(|| io_err(path, format!("missing base symbol {}/{n_base}", i + 1)))?;
        base.push(line.to_string());
    }
    let mut merges = Vec::with_capacity(n_merges);
    for i in 0..n_merges {
        let line = lines
            .next()
            .ok_or_else(|| io_err(path, format!("missing merge {}/{n_merges}", i + 1)))?;
        let Some((l, r)) = line.split_once(' ') else {
            return Err(io_err(path, format!("merge {}: expected \"<left> <right>\"", i + 1)));
        };
        merges.push((l.to_string(), r.to_string()));
    }
    BpeModel::from_parts(base, &merges).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// Prediction dumps: "<id>\t<direction>\t<payload>"
//
// The payload is decoded text for text-target directions and space-separated
// global token ids otherwise.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prediction {
    pub id: String,
    pub direction: Direction,
    pub payload: String,
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut out = String::new();
    for p in preds {
        if p.id.contains(['\t', '\n', '\r']) || p.payload.contains(['\t', '\n', '\r']) {
            return Err(Error::InvalidArgument(format!(
                "prediction {:?} contains a tab or newline",
                p.id
            )));
        }
        writeln!(out, "{}\t{}\t{}", p.id, p.direction, p.payload).unwrap();
    }
    write_bytes(path, out.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let text = read_text(path)?;
    let mut preds = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(3, '\t').collect();
        if parts.len() != 3 {
            return Err(io_err(path, format!("line {}: expected 3 fields", ln + 1)));
        }
        let direction = Direction::parse(parts[1])
            .map_err(|e| io_err(path, format!("line {}: {e}", ln + 1)))?;
        preds.push(Prediction {
            id: parts[0].to_string(),
            direction,
            payload: parts[2].to_string(),
        });
    }
    Ok(preds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::KmeansOptions;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn ppm_roundtrips_bytes() {
        let dir = tmp();
        let mut img = Raster::new(5, 7);
        for (i, b) in img.rgb.iter_mut().enumerate() {
            *b = (i * 11 % 256) as u8;
        }
        let p = dir.path().join("x.ppm");
        write_ppm(&p, &img).unwrap();
        assert_eq!(read_ppm(&p).unwrap(), img);
        // Header is the canonical P6 form.
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
    }

    #[test]
    fn ppm_reader_accepts_comments_and_rejects_truncation() {
        let dir = tmp();
        let p = dir.path().join("c.ppm");
        let mut bytes = b"P6\n# a comment\n2 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[1, 2, 3, 4, 5, 6]);
        fs::write(&p, &bytes).unwrap();
        let img = read_ppm(&p).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.rgb, vec![1, 2, 3, 4, 5, 6]);

        let q = dir.path().join("t.ppm");
        fs::write(&q, b"P6\n2 1\n255\n\x01\x02").unwrap();
        assert!(read_ppm(&q).is_err());
        let r = dir.path().join("m.ppm");
        fs::write(&r, b"P5\n2 1\n255\n").unwrap();
        assert!(read_ppm(&r).is_err());
    }

    #[test]
    fn features_roundtrip_exactly_in_f32() {
        let dir = tmp();
        let p = dir.path().join("a.feat");
        let m = Mat::from_vec(3, 2, vec![0.5f32, -1.25, 3.75, 0.0, 1e-7, -42.0]).unwrap();
        write_features(&p, &m).unwrap();
        let back: Mat<f32> = read_features(&p).unwrap();
        assert_eq!(back, m);
        // Header is readable text.
        let bytes = fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"TMTFEAT 2 3\n"));
        assert_eq!(bytes.len(), 12 + 6 * 4);
    }

    #[test]
    fn token_corpus_roundtrips_including_empty_sequences() {
        let dir = tmp();
        let p = dir.path().join("tok.tsv");
        let recs = vec![
            TokenRecord { id: "ex-000001".into(), modality: Modality::Image, tokens: vec![4, 5, 6] },
            TokenRecord { id: "ex-000001".into(), modality: Modality::Text, tokens: vec![] },
            TokenRecord { id: "bt-s2t-7".into(), modality: Modality::Speech, tokens: vec![99] },
        ];
        write_token_corpus(&p, &recs).unwrap();
        assert_eq!(read_token_corpus(&p).unwrap(), recs);
        let text = fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "ex-000001\ti\t4 5 6");
    }

    #[test]
    fn token_corpus_rejects_malformed_lines() {
        let dir = tmp();
        let p = dir.path().join("bad.tsv");
        fs::write(&p, "onlyid\ti\n").unwrap();
        assert!(read_token_corpus(&p).is_err());
        fs::write(&p, "id\tx\t1 2\n").unwrap();
        assert!(read_token_corpus(&p).is_err());
        fs::write(&p, "id\ts\t1 two\n").unwrap();
        assert!(read_token_corpus(&p).is_err());
    }

    #[test]
    fn manifest_roundtrips_with_spaces_in_captions() {
        let dir = tmp();
        let p = dir.path().join("manifest-train.tsv");
        let entries = vec![ManifestEntry {
            id: "ex-000000".into(),
            image: "images/ex-000000.ppm".into(),
            speech: "speech/ex-000000.feat".into(),
            caption: "a red circle and a blue square".into(),
        }];
        write_manifest(&p, &entries).unwrap();
        assert_eq!(read_manifest(&p).unwrap(), entries);
    }

    #[test]
    fn codebook_roundtrips_to_full_precision() {
        let dir = tmp();
        let p = dir.path().join("cb.txt");
        let data = Mat::from_vec(
            6,
            3,
            (0..18).map(|i| (i as f64 * 0.37).sin() / 3.0).collect(),
        )
        .unwrap();
        let (cb, _) = Codebook::train(&data, 3, &KmeansOptions::default(), 5).unwrap();
        write_codebook(&p, &cb).unwrap();
        let back: Codebook<f64> = read_codebook(&p).unwrap();
        assert_eq!(back.centers(), cb.centers());
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("TMTCB 3 3\n"));
    }

    #[test]
    fn codebook_roundtrips_in_f32_too() {
        let dir = tmp();
        let p = dir.path().join("cb32.txt");
        let centers =
            Mat::from_vec(2, 2, vec![0.1f32, 1.0 / 3.0, -7.25, 2.5e-8]).unwrap();
        let cb = Codebook::from_centers(centers).unwrap();
        write_codebook(&p, &cb).unwrap();
        let back: Codebook<f32> = read_codebook(&p).unwrap();
        assert_eq!(back.centers(), cb.centers());
    }

    #[test]
    fn bpe_file_roundtrips_space_symbol_and_merges() {
        let dir = tmp();
        let p = dir.path().join("bpe.txt");
        let corpus: Vec<String> =
            vec!["a red circle".into(), "a red square".into(), "a red circle".into()];
        let model = BpeModel::train(&corpus, 40).unwrap();
        write_bpe(&p, &model).unwrap();
        let back = read_bpe(&p).unwrap();
        assert_eq!(back, model);
        // The space base symbol survives as its own line.
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.lines().any(|l| l == " "));
    }

    #[test]
    fn predictions_roundtrip() {
        let dir = tmp();
        let p = dir.path().join("preds.tsv");
        let preds = vec![
            Prediction {
                id: "ex-000003".into(),
                direction: Direction::parse("s2t").unwrap(),
                payload: "a green triangle".into(),
            },
            Prediction {
                id: "ex-000004".into(),
                direction: Direction::parse("t2i").unwrap(),
                payload: "4 4 5 9".into(),
            },
        ];
        write_predictions(&p, &preds).unwrap();
        assert_eq!(read_predictions(&p).unwrap(), preds);
    }

    #[test]
    fn missing_files_surface_io_errors_with_the_path() {
        let e = read_manifest(Path::new("/nonexistent/m.tsv")).unwrap_err();
        match e {
            Error::Io(msg) => assert!(msg.contains("/nonexistent/m.tsv")),
            other => panic!("expected Io error, got {other:?}"),
        }
    }
}
