//! Vector quantisation: k-means codebooks and the speech/image tokenisers
//! built on them.
//!
//! A codebook maps continuous vectors (speech feature frames, flattened
//! image patches) to discrete codes by nearest-centre lookup. Training is
//! k-means++ seeding followed by Lloyd iterations; the within-cluster
//! sum-of-squares objective is recorded per iteration so callers can audit
//! that it never increases.

use crate::formats::Raster;
use crate::mat::Mat;
use crate::tokens::{dedup_runs, Modality, TokenSequence, Vocabulary};
use crate::{rand_index, rand_unit, rng_from_seed, Error, Result, Scalar};

/// Hard cap on the length of a deduplicated speech token sequence.
pub const SPEECH_TOKEN_CAP: usize = 384;

/// Squared Euclidean distance between two equal-length vectors.
pub fn squared_distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc = d.mul_add(d, acc);
    }
    acc
}

/// Options for k-means training.
#[derive(Debug, Clone)]
pub struct KmeansOptions {
    /// Upper bound on Lloyd iterations; training also stops as soon as the
    /// assignment is stable.
    pub max_iters: usize,
}

impl Default for KmeansOptions {
    fn default() -> Self {
        KmeansOptions { max_iters: 100 }
    }
}

/// Per-run diagnostics from k-means training.
#[derive(Debug, Clone)]
pub struct KmeansReport {
    /// Within-cluster sum of squared distances, recorded once per Lloyd
    /// iteration (measured at assignment time). Non-increasing.
    pub objectives: Vec<f64>,
    /// Iterations actually run.
    pub iterations: usize,
    /// True when the assignment reached a fixed point before `max_iters`.
    pub converged: bool,
}

/// A trained codebook: `k` centres of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<F> {
    centers: Mat<F>,
}

impl<F: Scalar> Codebook<F> {
    /// Wrap existing centres (e.g. loaded from disk).
    pub fn from_centers(centers: Mat<F>) -> Result<Codebook<F>> {
        if centers.rows() == 0 || centers.cols() == 0 {
            return Err(Error::InvalidArgument(
                "codebook needs at least one centre of positive dimension".into(),
            ));
        }
        for &v in centers.data() {
            if !v.is_finite() {
                return Err(Error::NonFinite("codebook centre contains a non-finite value".into()));
            }
        }
        Ok(Codebook { centers })
    }

    pub fn k(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn centers(&self) -> &Mat<F> {
        &self.centers
    }

    /// Train with k-means++ seeding and Lloyd iterations.
    ///
    /// `data` is one vector per row. Requires `k >= 1` and at least `k`
    /// data rows. Internal accumulation runs in `f64` regardless of `F`
    /// so the recorded objective is reliably monotone; the final centres
    /// are cast to `F`.
    pub fn train(
        data: &Mat<F>,
        k: usize,
        opts: &KmeansOptions,
        seed: u64,
    ) -> Result<(Codebook<F>, KmeansReport)> {
        let n = data.rows();
        let dim = data.cols();
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if dim == 0 {
            return Err(Error::InvalidArgument("data dimension must be positive".into()));
        }
        if n < k {
            return Err(Error::InsufficientData(format!(
                "k-means needs at least k={k} points, got {n}"
            )));
        }
        for &v in data.data() {
            if !v.is_finite() {
                return Err(Error::NonFinite("k-means input contains a non-finite value".into()));
            }
        }

        let points: Mat<f64> = data.cast();
        let mut rng = rng_from_seed(seed);

        // k-means++ seeding: first centre uniform, then proportional to the
        // squared distance from the nearest centre chosen so far. If every
        // remaining point coincides with a chosen centre (duplicates), fall
        // back to a uniform pick.
        let mut centers = Mat::<f64>::zeros(k, dim);
        centers.row_mut(0).copy_from_slice(points.row(rand_index(&mut rng, n)));
        let mut d2: Vec<f64> = (0..n)
            .map(|i| squared_distance(points.row(i), centers.row(0)))
            .collect();
        for c in 1..k {
            let total: f64 = d2.iter().sum();
            let pick = if total > 0.0 {
                let r = rand_unit(&mut rng) * total;
                let mut cum = 0.0;
                let mut chosen = n - 1;
                for (i, &w) in d2.iter().enumerate() {
                    cum += w;
                    if r < cum {
                        chosen = i;
                        break;
                    }
                }
                chosen
            } else {
                rand_index(&mut rng, n)
            };
            centers.row_mut(c).copy_from_slice(points.row(pick));
            for i in 0..n {
                let d = squared_distance(points.row(i), centers.row(c));
                if d < d2[i] {
                    d2[i] = d;
                }
            }
        }

        // Lloyd iterations.
        let mut assign = vec![0usize; n];
        let mut objectives = Vec::new();
        let mut converged = false;
        let mut iterations = 0;
        for _ in 0..opts.max_iters {
            iterations += 1;
            // Assignment step (ties go to the lowest centre index).
            let mut changed = false;
            let mut objective = 0.0;
            for i in 0..n {
                let (best, best_d) = nearest_center(&centers, points.row(i));
                objective += best_d;
                if assign[i] != best {
                    assign[i] = best;
                    changed = true;
                }
            }
            objectives.push(objective);
            if !changed && objectives.len() > 1 {
                converged = true;
                break;
            }

            // Update step: each centre moves to the mean of its points;
            // a centre with no points keeps its previous position.
            let mut sums = Mat::<f64>::zeros(k, dim);
            let mut counts = vec![0usize; k];
            for i in 0..n {
                let c = assign[i];
                counts[c] += 1;
                let row = sums.row_mut(c);
                for (s, &x) in row.iter_mut().zip(points.row(i)) {
                    *s += x;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    let inv = 1.0 / counts[c] as f64;
                    let (sum_row, center_row) = (sums.row(c), centers.row_mut(c));
                    for (cc, &s) in center_row.iter_mut().zip(sum_row) {
                        *cc = s * inv;
                    }
                }
            }
        }

        let report = KmeansReport { objectives, iterations, converged };
        Ok((Codebook { centers: centers.cast() }, report))
    }

    /// Nearest-centre code for one vector. Ties resolve to the lowest index.
    pub fn quantize(&self, v: &[F]) -> Result<usize> {
        if v.len() != self.dim() {
            return Err(Error::Shape(format!(
                "vector dimension {} does not match codebook dimension {}",
                v.len(),
                self.dim()
            )));
        }
        let mut best = 0usize;
        let mut best_d = squared_distance(v, self.centers.row(0));
        for c in 1..self.k() {
            let d = squared_distance(v, self.centers.row(c));
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        Ok(best)
    }

    /// The centre vector for a code.
    pub fn dequantize(&self, code: usize) -> Result<&[F]> {
        if code >= self.k() {
            return Err(Error::Range(format!(
                "code {code} outside codebook of size {}",
                self.k()
            )));
        }
        Ok(self.centers.row(code))
    }

    /// Within-cluster sum of squared distances of `data` under this codebook.
    pub fn objective(&self, data: &Mat<F>) -> Result<f64> {
        if data.cols() != self.dim() {
            return Err(Error::Shape(format!(
                "data dimension {} does not match codebook dimension {}",
                data.cols(),
                self.dim()
            )));
        }
        let mut total = 0.0;
        for i in 0..data.rows() {
            let row = data.row(i);
            let mut best = f64::INFINITY;
            for c in 0..self.k() {
                let d = squared_distance(row, self.centers.row(c)).as_f64();
                if d < best {
                    best = d;
                }
            }
            total += best;
        }
        Ok(total)
    }
}

fn nearest_center(centers: &Mat<f64>, point: &[f64]) -> (usize, f64) {
    let mut best = 0usize;
    let mut best_d = squared_distance(point, centers.row(0));
    for c in 1..centers.rows() {
        let d = squared_distance(point, centers.row(c));
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    (best, best_d)
}

/// How a square image is cut into the fixed grid of patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub rows: usize,
    pub cols: usize,
    pub patch_h: usize,
    pub patch_w: usize,
}

impl PatchGrid {
    /// Grid for an `h`×`w` image split into `rows`×`cols` patches.
    pub fn new(h: usize, w: usize, rows: usize, cols: usize) -> Result<PatchGrid> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument("patch grid needs positive rows and cols".into()));
        }
        if h % rows != 0 || w % cols != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} not divisible into {rows}x{cols} patches"
            )));
        }
        Ok(PatchGrid { rows, cols, patch_h: h / rows, patch_w: w / cols })
    }

    /// Grid used throughout for the 32×32 world images: 4×8 patches of
    /// 8×4 pixels, i.e. 32 tokens per image.
    pub fn default_32() -> PatchGrid {
        PatchGrid { rows: 4, cols: 8, patch_h: 8, patch_w: 4 }
    }

    /// Number of patches (= image tokens per image).
    pub fn token_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Flattened patch dimension: `patch_h * patch_w * 3` RGB values.
    pub fn patch_dim(&self) -> usize {
        self.patch_h * self.patch_w * 3
    }

    pub fn image_h(&self) -> usize {
        self.rows * self.patch_h
    }

    pub fn image_w(&self) -> usize {
        self.cols * self.patch_w
    }
}

/// Flatten an image into one row per patch, RGB scaled to [0, 1].
///
/// Patches are ordered row-major over the grid; within a patch, values are
/// ordered row-major over pixels with the three channels interleaved, the
/// same order `patches_to_raster` expects back.
pub fn raster_to_patches<F: Scalar>(img: &Raster, grid: &PatchGrid) -> Result<Mat<F>> {
    if img.height != grid.image_h() || img.width != grid.image_w() {
        return Err(Error::Shape(format!(
            "image {}x{} does not match patch grid {}x{}",
            img.height,
            img.width,
            grid.image_h(),
            grid.image_w()
        )));
    }
    let scale = F::of_f64(1.0 / 255.0);
    let mut out = Mat::zeros(grid.token_count(), grid.patch_dim());
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let row = out.row_mut(gr * grid.cols + gc);
            let mut w = 0usize;
            for py in 0..grid.patch_h {
                let y = gr * grid.patch_h + py;
                for px in 0..grid.patch_w {
                    let x = gc * grid.patch_w + px;
                    let base = (y * img.width + x) * 3;
                    for ch in 0..3 {
                        row[w] = F::of_f64(f64::from(img.rgb[base + ch])) * scale;
                        w += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`raster_to_patches`]: assemble patch rows back into an image,
/// clamping to [0, 1] and rounding to 8-bit.
pub fn patches_to_raster<F: Scalar>(patches: &Mat<F>, grid: &PatchGrid) -> Result<Raster> {
    if patches.rows() != grid.token_count() || patches.cols() != grid.patch_dim() {
        return Err(Error::Shape(format!(
            "patch matrix {}x{} does not match grid ({} patches of dim {})",
            patches.rows(),
            patches.cols(),
            grid.token_count(),
            grid.patch_dim()
        )));
    }
    let mut img = Raster::new(grid.image_h(), grid.image_w());
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let row = patches.row(gr * grid.cols + gc);
            let mut r = 0usize;
            for py in 0..grid.patch_h {
                let y = gr * grid.patch_h + py;
                for px in 0..grid.patch_w {
                    let x = gc * grid.patch_w + px;
                    let base = (y * img.width + x) * 3;
                    for ch in 0..3 {
                        let v = row[r].as_f64().clamp(0.0, 1.0);
                        img.rgb[base + ch] = (v * 255.0).round() as u8;
                        r += 1;
                    }
                }
            }
        }
    }
    Ok(img)
}

/// Tokenise speech features (one frame per row) into global speech tokens:
/// quantise every frame, collapse repeated codes, truncate to `cap`.
pub fn tokenize_speech<F: Scalar>(
    codebook: &Codebook<F>,
    vocab: &Vocabulary,
    frames: &Mat<F>,
    cap: usize,
) -> Result<TokenSequence> {
    if codebook.k() as u32 != vocab.size(Modality::Speech) {
        return Err(Error::InvalidArgument(format!(
            "speech codebook size {} does not match vocabulary speech range {}",
            codebook.k(),
            vocab.size(Modality::Speech)
        )));
    }
    if cap == 0 {
        return Err(Error::InvalidArgument("speech token cap must be positive".into()));
    }
    let mut tokens = Vec::with_capacity(frames.rows());
    for i in 0..frames.rows() {
        let code = codebook.quantize(frames.row(i))? as u32;
        tokens.push(vocab.local_to_global(Modality::Speech, code)?);
    }
    let mut seq = dedup_runs(&TokenSequence::new(Modality::Speech, tokens));
    seq.tokens.truncate(cap);
    Ok(seq)
}

/// Tokenise an image into exactly `grid.token_count()` global image tokens,
/// one per patch in row-major order. No deduplication: position carries
/// meaning, so the sequence length is always the full grid.
pub fn tokenize_image<F: Scalar>(
    codebook: &Codebook<F>,
    vocab: &Vocabulary,
    img: &Raster,
    grid: &PatchGrid,
) -> Result<TokenSequence> {
    if codebook.k() as u32 != vocab.size(Modality::Image) {
        return Err(Error::InvalidArgument(format!(
            "image codebook size {} does not match vocabulary image range {}",
            codebook.k(),
            vocab.size(Modality::Image)
        )));
    }
    if codebook.dim() != grid.patch_dim() {
        return Err(Error::Shape(format!(
            "image codebook dimension {} does not match patch dimension {}",
            codebook.dim(),
            grid.patch_dim()
        )));
    }
    let patches = raster_to_patches::<F>(img, grid)?;
    let mut tokens = Vec::with_capacity(patches.rows());
    for i in 0..patches.rows() {
        let code = codebook.quantize(patches.row(i))? as u32;
        tokens.push(vocab.local_to_global(Modality::Image, code)?);
    }
    Ok(TokenSequence::new(Modality::Image, tokens))
}

/// Reconstruct an image from image tokens by stitching the dequantised
/// patch centres back together.
pub fn detokenize_image<F: Scalar>(
    codebook: &Codebook<F>,
    vocab: &Vocabulary,
    seq: &TokenSequence,
    grid: &PatchGrid,
) -> Result<Raster> {
    if seq.modality != Modality::Image {
        return Err(Error::InvalidArgument(format!(
            "detokenize_image needs an image sequence, got {}",
            seq.modality
        )));
    }
    if seq.tokens.len() != grid.token_count() {
        return Err(Error::Length(format!(
            "image sequence has {} tokens, grid expects {}",
            seq.tokens.len(),
            grid.token_count()
        )));
    }
    if codebook.dim() != grid.patch_dim() {
        return Err(Error::Shape(format!(
            "image codebook dimension {} does not match patch dimension {}",
            codebook.dim(),
            grid.patch_dim()
        )));
    }
    let mut patches = Mat::zeros(grid.token_count(), grid.patch_dim());
    for (i, &t) in seq.tokens.iter().enumerate() {
        let (m, local) = vocab.global_to_local(t)?;
        if m != Modality::Image {
            return Err(Error::Domain(format!(
                "token {t} at position {i} is a {m} token, expected image"
            )));
        }
        patches.row_mut(i).copy_from_slice(codebook.dequantize(local as usize)?);
    }
    patches_to_raster(&patches, grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat1d(vals: &[f64]) -> Mat<f64> {
        Mat::from_vec(vals.len(), 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn two_well_separated_pairs_recover_means() {
        // {0, 1} and {9, 10}: optimal centres 0.5 and 9.5, objective
        // 4 × 0.5² = 1.0 exactly.
        let data = mat1d(&[0.0, 1.0, 9.0, 10.0]);
        for seed in 0..20 {
            let (cb, report) = Codebook::train(&data, 2, &KmeansOptions::default(), seed).unwrap();
            let mut centers: Vec<f64> = (0..2).map(|c| cb.centers().get(c, 0)).collect();
            centers.sort_by(f64::total_cmp);
            assert_eq!(centers, vec![0.5, 9.5], "seed {seed}");
            assert_eq!(*report.objectives.last().unwrap(), 1.0);
            assert!(report.converged);
        }
    }

    #[test]
    fn objective_never_increases() {
        for seed in 0..30 {
            let mut rng = crate::rng_from_seed(seed + 1000);
            let n = 40 + crate::rand_index(&mut rng, 60);
            let dim = 1 + crate::rand_index(&mut rng, 6);
            let data = Mat::from_vec(
                n,
                dim,
                (0..n * dim).map(|_| crate::rand_normal(&mut rng) * 3.0).collect(),
            )
            .unwrap();
            let k = 1 + crate::rand_index(&mut rng, 8.min(n));
            let (_, report) = Codebook::train(&data, k, &KmeansOptions::default(), seed).unwrap();
            for w in report.objectives.windows(2) {
                assert!(
                    w[1] <= w[0] * (1.0 + 1e-12),
                    "objective increased: {} -> {} (seed {seed})",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        // More centres than distinct values: the distance-weighted pick runs
        // out of mass and must fall back to uniform.
        let data = mat1d(&[2.0, 2.0, 2.0, 2.0, 5.0]);
        let (cb, _) = Codebook::train(&data, 3, &KmeansOptions::default(), 7).unwrap();
        assert_eq!(cb.k(), 3);
        // Every point is still representable with zero or tiny error.
        assert!(cb.objective(&data).unwrap() < 1e-18);
    }

    #[test]
    fn k_larger_than_n_is_insufficient_data() {
        let data = mat1d(&[1.0, 2.0]);
        assert!(matches!(
            Codebook::<f64>::train(&data, 3, &KmeansOptions::default(), 0),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn quantize_breaks_ties_toward_lowest_index() {
        let cb = Codebook::from_centers(mat1d(&[0.0, 2.0])).unwrap();
        // 1.0 is equidistant: code 0 wins.
        assert_eq!(cb.quantize(&[1.0]).unwrap(), 0);
        assert_eq!(cb.quantize(&[1.1]).unwrap(), 1);
        assert_eq!(cb.quantize(&[0.9]).unwrap(), 0);
    }

    #[test]
    fn quantize_dequantize_fixed_point() {
        // Quantising a centre returns its own code.
        let centers = Mat::from_vec(3, 2, vec![0.0, 0.0, 1.0, 5.0, -2.0, 3.0]).unwrap();
        let cb = Codebook::from_centers(centers).unwrap();
        for c in 0..3 {
            let v = cb.dequantize(c).unwrap().to_vec();
            assert_eq!(cb.quantize(&v).unwrap(), c);
        }
        assert!(cb.dequantize(3).is_err());
        assert!(cb.quantize(&[1.0]).is_err());
    }

    #[test]
    fn speech_tokenizer_dedups_and_caps() {
        let vocab = Vocabulary::new(4, 3, 4).unwrap();
        let cb = Codebook::from_centers(mat1d(&[0.0, 10.0, 20.0])).unwrap();
        let frames = mat1d(&[0.1, 0.2, 10.0, 10.1, 10.2, 0.0, 20.0, 20.0]);
        let seq = tokenize_speech(&cb, &vocab, &frames, SPEECH_TOKEN_CAP).unwrap();
        // Codes 0,0,1,1,1,0,2,2 dedup to 0,1,0,2; speech offset is 4+4=8.
        assert_eq!(seq.tokens, vec![8, 9, 8, 10]);
        assert_eq!(seq.modality, Modality::Speech);

        let capped = tokenize_speech(&cb, &vocab, &frames, 2).unwrap();
        assert_eq!(capped.tokens, vec![8, 9]);
    }

    #[test]
    fn speech_tokenizer_checks_codebook_against_vocab() {
        let vocab = Vocabulary::new(4, 8, 4).unwrap(); // speech range is 8, codebook is 3
        let cb = Codebook::from_centers(mat1d(&[0.0, 10.0, 20.0])).unwrap();
        let frames = mat1d(&[0.0]);
        assert!(tokenize_speech(&cb, &vocab, &frames, 384).is_err());
    }

    #[test]
    fn patch_grid_default_covers_32x32_with_32_tokens() {
        let g = PatchGrid::default_32();
        assert_eq!(g.token_count(), 32);
        assert_eq!(g.patch_dim(), 8 * 4 * 3);
        assert_eq!((g.image_h(), g.image_w()), (32, 32));
        assert_eq!(g, PatchGrid::new(32, 32, 4, 8).unwrap());
        assert!(PatchGrid::new(32, 32, 5, 8).is_err());
    }

    #[test]
    fn patches_roundtrip_exactly_on_8bit_images() {
        let mut img = Raster::new(32, 32);
        for (i, v) in img.rgb.iter_mut().enumerate() {
            *v = (i * 37 % 256) as u8;
        }
        let grid = PatchGrid::default_32();
        let patches = raster_to_patches::<f64>(&img, &grid).unwrap();
        let back = patches_to_raster(&patches, &grid).unwrap();
        assert_eq!(back.rgb, img.rgb);
    }

    #[test]
    fn image_tokenizer_emits_fixed_length_and_roundtrips_through_centers() {
        let grid = PatchGrid::default_32();
        // Codebook of two centres: all-zeros and all-ones patches.
        let mut centers = Mat::<f64>::zeros(2, grid.patch_dim());
        for v in centers.row_mut(1) {
            *v = 1.0;
        }
        let cb = Codebook::from_centers(centers).unwrap();
        let vocab = Vocabulary::new(2, 3, 4).unwrap();

        // Image: left half black, right half white.
        let mut img = Raster::new(32, 32);
        for y in 0..32 {
            for x in 16..32 {
                let base = (y * 32 + x) * 3;
                img.rgb[base..base + 3].copy_from_slice(&[255, 255, 255]);
            }
        }
        let seq = tokenize_image(&cb, &vocab, &img, &grid).unwrap();
        assert_eq!(seq.tokens.len(), 32);
        // Patches are 4 px wide: columns 0..4 of each grid row are black.
        for gr in 0..4 {
            for gc in 0..8 {
                let t = seq.tokens[gr * 8 + gc];
                assert_eq!(t, if gc < 4 { 4 } else { 5 }, "patch ({gr},{gc})");
            }
        }

        let back = detokenize_image(&cb, &vocab, &seq, &grid).unwrap();
        assert_eq!(back.rgb, img.rgb, "black/white image is exactly representable");
    }

    #[test]
    fn detokenize_rejects_wrong_length_and_foreign_tokens() {
        let grid = PatchGrid::default_32();
        let cb = Codebook::from_centers(Mat::<f64>::zeros(2, grid.patch_dim())).unwrap();
        let vocab = Vocabulary::new(2, 3, 4).unwrap();
        let short = TokenSequence::new(Modality::Image, vec![4; 31]);
        assert!(matches!(
            detokenize_image(&cb, &vocab, &short, &grid),
            Err(Error::Length(_))
        ));
        let mut toks = vec![4u32; 32];
        toks[5] = 6; // a speech token
        let bad = TokenSequence::new(Modality::Image, toks);
        assert!(detokenize_image(&cb, &vocab, &bad, &grid).is_err());
    }
}
