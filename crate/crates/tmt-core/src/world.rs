//! The deterministic synthetic world that supplies aligned tri-modal data.
//!
//! A scene is one to three coloured shapes placed on distinct cells of a
//! 4×4 grid. Each scene yields three views of the same content:
//!
//! - an image: the scene rendered into a 32×32 RGB raster,
//! - a caption: a templated phrase like `a red circle and a blue square`,
//! - speech: a frame track where every caption character contributes a few
//!   noisy copies of its fixed 13-dimensional prototype vector.
//!
//! Everything is a pure function of the seed, so corpora regenerate
//! bit-identically.

use crate::formats::{
    write_features, write_manifest, write_ppm, ManifestEntry, Raster,
};
use crate::mat::Mat;
use crate::{derive_seed, rand_index, rand_normal, rng_from_seed, Error, Result, Scalar};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

/// Cells per side of the placement grid.
pub const GRID_SIZE: usize = 4;
/// Pixels per grid cell side.
pub const CELL_PX: usize = 8;
/// Rendered image side in pixels.
pub const IMAGE_SIZE: usize = GRID_SIZE * CELL_PX;
/// Dimension of the speech feature frames.
pub const SPEECH_DIM: usize = 13;

/// Master seed for the per-character speech prototypes. Fixed so that every
/// corpus, whatever its own seed, shares one acoustic alphabet.
const PROTOTYPE_MASTER: u64 = 0x70726f_746f_0003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ColorKind {
    Red,
    Green,
    Blue,
}

impl ColorKind {
    pub const ALL: [ColorKind; 3] = [ColorKind::Red, ColorKind::Green, ColorKind::Blue];

    pub fn name(self) -> &'static str {
        match self {
            ColorKind::Red => "red",
            ColorKind::Green => "green",
            ColorKind::Blue => "blue",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            ColorKind::Red => [255, 0, 0],
            ColorKind::Green => [0, 255, 0],
            ColorKind::Blue => [0, 0, 255],
        }
    }
}

/// One placed object.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: ColorKind,
    /// Grid cell, 0-based.
    pub row: usize,
    pub col: usize,
}

/// A full scene: 1–3 objects on distinct cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
}

/// Sample a scene from a seed. The draw order is frozen: object count,
/// then per object a free cell (rejection sampling), shape, colour.
pub fn sample_scene(seed: u64) -> Scene {
    let mut rng = rng_from_seed(seed);
    let n = 1 + rand_index(&mut rng, 3);
    let mut used = [false; GRID_SIZE * GRID_SIZE];
    let mut objects = Vec::with_capacity(n);
    for _ in 0..n {
        let cell = loop {
            let c = rand_index(&mut rng, GRID_SIZE * GRID_SIZE);
            if !used[c] {
                break c;
            }
        };
        used[cell] = true;
        let shape = ShapeKind::ALL[rand_index(&mut rng, 3)];
        let color = ColorKind::ALL[rand_index(&mut rng, 3)];
        objects.push(SceneObject { shape, color, row: cell / GRID_SIZE, col: cell % GRID_SIZE });
    }
    Scene { objects }
}

/// Objects in reading order: by row, then column.
fn reading_order(scene: &Scene) -> Vec<&SceneObject> {
    let mut objs: Vec<&SceneObject> = scene.objects.iter().collect();
    objs.sort_by_key(|o| (o.row, o.col));
    objs
}

/// Render a scene into a 32×32 raster on a white background. Each object
/// fills its own 8×8 cell with a solid-colour glyph, so objects never
/// overlap.
pub fn render_scene(scene: &Scene) -> Raster {
    let mut img = Raster::new(IMAGE_SIZE, IMAGE_SIZE);
    img.rgb.fill(255);
    for o in &scene.objects {
        let rgb = o.color.rgb();
        for dy in 0..CELL_PX {
            for dx in 0..CELL_PX {
                if glyph_covers(o.shape, dx, dy) {
                    img.set_pixel(o.row * CELL_PX + dy, o.col * CELL_PX + dx, rgb);
                }
            }
        }
    }
    img
}

/// Whether the glyph for `shape` covers local cell pixel (dx, dy).
fn glyph_covers(shape: ShapeKind, dx: usize, dy: usize) -> bool {
    let (x, y) = (dx as f64, dy as f64);
    match shape {
        ShapeKind::Square => true,
        // Disc centred in the cell with radius 3.5 px.
        ShapeKind::Circle => {
            let (cx, cy) = (3.5, 3.5);
            (x - cx).powi(2) + (y - cy).powi(2) <= 3.5 * 3.5
        }
        // Isoceles triangle, apex at the top centre, base across the bottom.
        ShapeKind::Triangle => (x - 3.5).abs() <= y / 2.0 + 0.5,
    }
}

/// Templated caption: `a <colour> <shape>` per object in reading order,
/// joined by ` and `.
pub fn caption_scene(scene: &Scene) -> String {
    reading_order(scene)
        .iter()
        .map(|o| format!("a {} {}", o.color.name(), o.shape.name()))
        .collect::<Vec<_>>()
        .join(" and ")
}

/// The characters speech synthesis can voice: lowercase letters and space.
pub fn char_inventory() -> Vec<char> {
    let mut inv: Vec<char> = ('a'..='z').collect();
    inv.push(' ');
    inv
}

/// The fixed prototype vector for one character, unit-normalised.
/// Prototypes depend only on the character and the dimension, never on a
/// corpus seed, and random unit vectors in 13 dimensions are far enough
/// apart (pairwise distance ≳ 1) to survive the synthesis noise.
pub fn char_prototype(c: char, dim: usize) -> Vec<f64> {
    let mut rng = rng_from_seed(derive_seed(PROTOTYPE_MASTER, &format!("char/{c}/dim/{dim}")));
    let mut v: Vec<f64> = (0..dim).map(|_| rand_normal(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    // A zero draw is astronomically unlikely; guard anyway.
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

/// All prototypes for the inventory at a given dimension.
pub fn prototype_table(dim: usize) -> HashMap<char, Vec<f64>> {
    char_inventory().into_iter().map(|c| (c, char_prototype(c, dim))).collect()
}

/// The inventory character whose prototype is nearest to `v` (squared
/// Euclidean distance; ties resolve to the earlier inventory character).
pub fn nearest_char(v: &[f64], dim: usize) -> char {
    let mut best = 'a';
    let mut best_d = f64::INFINITY;
    for c in char_inventory() {
        let p = char_prototype(c, dim);
        let d: f64 = p.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

/// Synthesise a speech feature track for `text`: every character emits 2–4
/// frames of its prototype plus isotropic Gaussian noise of the given
/// standard deviation. Unknown characters are rejected.
pub fn synthesize_speech<F: Scalar>(
    text: &str,
    noise_sigma: f64,
    dim: usize,
    seed: u64,
) -> Result<Mat<F>> {
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma must be finite and non-negative, got {noise_sigma}"
        )));
    }
    if text.is_empty() {
        return Err(Error::InvalidArgument("cannot synthesise empty text".into()));
    }
    let table = prototype_table(dim);
    let mut rng = rng_from_seed(seed);
    let mut rows: Vec<F> = Vec::new();
    let mut n_frames = 0usize;
    for c in text.chars() {
        let proto = table.get(&c).ok_or_else(|| {
            Error::Domain(format!("character {c:?} is outside the speech inventory"))
        })?;
        let count = 2 + rand_index(&mut rng, 3);
        for _ in 0..count {
            for &p in proto {
                rows.push(F::of_f64(p + noise_sigma * rand_normal(&mut rng)));
            }
            n_frames += 1;
        }
    }
    Mat::from_vec(n_frames, dim, rows)
}

/// Corpus generation settings.
#[derive(Debug, Clone)]
pub struct WorldConfig {
    /// Number of scenes to generate.
    pub n_scenes: usize,
    /// Master seed; every per-example stream is derived from it.
    pub seed: u64,
    /// Speech synthesis noise standard deviation.
    pub noise_sigma: f64,
    /// Speech feature dimension.
    pub speech_dim: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { n_scenes: 2000, seed: 0, noise_sigma: 0.05, speech_dim: SPEECH_DIM }
    }
}

/// The three corpus splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split {other:?}, expected train, valid or test"
            ))),
        }
    }
}

/// Path of one split's manifest inside a corpus directory.
pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("manifest-{}.tsv", split.name()))
}

/// Counts of what [`generate_corpus`] wrote.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusSummary {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
}

/// Generate a corpus directory:
///
/// ```text
/// dir/images/ex-000000.ppm     rendered scenes
/// dir/speech/ex-000000.feat    speech feature tracks
/// dir/manifest-{train,valid,test}.tsv
/// ```
///
/// The split is a deterministic shuffle: about 5% test and 5% valid (at
/// least one example each), the rest train. Requires `n_scenes >= 3` so no
/// split is empty.
pub fn generate_corpus(dir: &Path, cfg: &WorldConfig) -> Result<CorpusSummary> {
    if cfg.n_scenes < 3 {
        return Err(Error::InsufficientData(format!(
            "need at least 3 scenes to fill all splits, got {}",
            cfg.n_scenes
        )));
    }
    if cfg.speech_dim == 0 {
        return Err(Error::InvalidArgument("speech dimension must be positive".into()));
    }

    let mut entries = Vec::with_capacity(cfg.n_scenes);
    for i in 0..cfg.n_scenes {
        let id = format!("ex-{i:06}");
        let scene = sample_scene(derive_seed(cfg.seed, &format!("scene/{i}")));
        let img = render_scene(&scene);
        let image_rel = format!("images/{id}.ppm");
        write_ppm(&dir.join(&image_rel), &img)?;

        let cap = caption_scene(&scene);
        let feats: Mat<f64> = synthesize_speech(
            &cap,
            cfg.noise_sigma,
            cfg.speech_dim,
            derive_seed(cfg.seed, &format!("speech/{i}")),
        )?;
        let speech_rel = format!("speech/{id}.feat");
        write_features(&dir.join(&speech_rel), &feats)?;

        entries.push(ManifestEntry { id, image: image_rel, speech: speech_rel, caption: cap });
    }

    // Deterministic split: Fisher-Yates on the indices, then test, valid,
    // train in that order off the shuffled list.
    let n = cfg.n_scenes;
    let n_test = (n / 20).max(1);
    let n_valid = (n / 20).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng_from_seed(derive_seed(cfg.seed, "split"));
    for i in (1..n).rev() {
        order.swap(i, rand_index(&mut rng, i + 1));
    }
    let mut split_of = vec![Split::Train; n];
    for &i in &order[..n_test] {
        split_of[i] = Split::Test;
    }
    for &i in &order[n_test..n_test + n_valid] {
        split_of[i] = Split::Valid;
    }

    for split in Split::ALL {
        let rows: Vec<ManifestEntry> = entries
            .iter()
            .enumerate()
            .filter(|(i, _)| split_of[*i] == split)
            .map(|(_, e)| e.clone())
            .collect();
        write_manifest(&manifest_path(dir, split), &rows)?;
    }

    Ok(CorpusSummary { n_train: n - n_test - n_valid, n_valid, n_test })
}
