//! The unified discrete token space shared by all three modalities.
//!
//! Special tokens occupy the lowest ids, then the image, speech, and text
//! sub-vocabularies follow in that fixed order as contiguous, disjoint id
//! ranges. Every token id in the system is a `u32` into this one space, so
//! a single embedding table and a single output softmax cover everything.

use crate::{Error, Result};
use std::fmt;
use std::ops::Range;

/// Padding token (always id 0).
pub const PAD: u32 = 0;
/// Beginning-of-sequence token fed to the decoder (always id 1).
pub const BOS: u32 = 1;
/// End-of-sequence token the decoder must emit (always id 2).
pub const EOS: u32 = 2;
/// Unknown-symbol token for out-of-inventory text characters (always id 3).
pub const UNK: u32 = 3;

/// Number of reserved special ids at the bottom of the space.
pub const SPECIAL_COUNT: u32 = 4;

/// The three modalities, in the fixed id-range order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Image,
    Speech,
    Text,
}

impl Modality {
    /// All modalities in id-range order.
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Speech, Modality::Text];

    /// Position of this modality's range (0 = image, 1 = speech, 2 = text).
    pub fn index(self) -> usize {
        match self {
            Modality::Image => 0,
            Modality::Speech => 1,
            Modality::Text => 2,
        }
    }

    /// One-letter tag used in file formats and direction names.
    pub fn letter(self) -> char {
        match self {
            Modality::Image => 'i',
            Modality::Speech => 's',
            Modality::Text => 't',
        }
    }

    /// Inverse of [`Modality::letter`].
    pub fn from_letter(c: char) -> Result<Modality> {
        match c {
            'i' => Ok(Modality::Image),
            's' => Ok(Modality::Speech),
            't' => Ok(Modality::Text),
            other => Err(Error::InvalidArgument(format!(
                "unknown modality letter {other:?}, expected one of i, s, t"
            ))),
        }
    }

    /// Human-readable name.
    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Speech => "speech",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An ordered translation direction between two distinct modalities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Direction {
    pub source: Modality,
    pub target: Modality,
}

impl Direction {
    pub fn new(source: Modality, target: Modality) -> Result<Direction> {
        if source == target {
            return Err(Error::InvalidArgument(format!(
                "direction requires distinct modalities, got {source}2{target}"
            )));
        }
        Ok(Direction { source, target })
    }

    /// The six ordered modality pairs in the fixed training order:
    /// i2s, s2i, i2t, t2i, s2t, t2s.
    pub const ALL: [Direction; 6] = [
        Direction { source: Modality::Image, target: Modality::Speech },
        Direction { source: Modality::Speech, target: Modality::Image },
        Direction { source: Modality::Image, target: Modality::Text },
        Direction { source: Modality::Text, target: Modality::Image },
        Direction { source: Modality::Speech, target: Modality::Text },
        Direction { source: Modality::Text, target: Modality::Speech },
    ];

    /// Parse a compact name like `s2t`.
    pub fn parse(s: &str) -> Result<Direction> {
        let chars: Vec<char> = s.chars().collect();
        if chars.len() != 3 || chars[1] != '2' {
            return Err(Error::InvalidArgument(format!(
                "malformed direction {s:?}, expected <m>2<m> like s2t"
            )));
        }
        Direction::new(Modality::from_letter(chars[0])?, Modality::from_letter(chars[2])?)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}2{}", self.source.letter(), self.target.letter())
    }
}

/// The unified vocabulary: 4 specials, then image, speech, text ranges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    sizes: [u32; 3],
    offsets: [u32; 3],
    total: u32,
}

impl Vocabulary {
    /// Build from the three per-modality sub-vocabulary sizes
    /// (image codebook size, speech codebook size, text BPE size).
    pub fn new(image: u32, speech: u32, text: u32) -> Result<Vocabulary> {
        let sizes = [image, speech, text];
        for (m, &v) in Modality::ALL.iter().zip(&sizes) {
            if v == 0 {
                return Err(Error::InvalidArgument(format!(
                    "{m} sub-vocabulary size must be positive"
                )));
            }
        }
        let mut offsets = [0u32; 3];
        let mut next = SPECIAL_COUNT;
        for (i, &v) in sizes.iter().enumerate() {
            offsets[i] = next;
            next = next.checked_add(v).ok_or_else(|| {
                Error::Range("vocabulary sizes overflow the u32 id space".into())
            })?;
        }
        Ok(Vocabulary { sizes, offsets, total: next })
    }

    /// Number of reserved special ids (PAD, BOS, EOS, UNK).
    pub fn special_count(&self) -> u32 {
        SPECIAL_COUNT
    }

    /// Size of one modality's sub-vocabulary.
    pub fn size(&self, m: Modality) -> u32 {
        self.sizes[m.index()]
    }

    /// First global id of one modality's range.
    pub fn offset(&self, m: Modality) -> u32 {
        self.offsets[m.index()]
    }

    /// Global id range of one modality (half-open).
    pub fn range(&self, m: Modality) -> Range<u32> {
        let o = self.offset(m);
        o..o + self.size(m)
    }

    /// Total number of ids: specials plus every sub-vocabulary.
    pub fn total(&self) -> u32 {
        self.total
    }

    /// Map a modality-local id (0-based within its codebook / BPE table)
    /// to its global id.
    pub fn local_to_global(&self, m: Modality, local: u32) -> Result<u32> {
        if local >= self.size(m) {
            return Err(Error::Range(format!(
                "local {m} token {local} outside sub-vocabulary of size {}",
                self.size(m)
            )));
        }
        Ok(self.offset(m) + local)
    }

    /// Map a global id back to `(modality, local id)`. Specials are not
    /// local to any modality and are rejected here.
    pub fn global_to_local(&self, global: u32) -> Result<(Modality, u32)> {
        match self.modality_of(global) {
            Some(m) => Ok((m, global - self.offset(m))),
            None if global < SPECIAL_COUNT => Err(Error::Domain(format!(
                "token {global} is a special, not a modality token"
            ))),
            None => Err(Error::Range(format!(
                "token {global} outside vocabulary of size {}",
                self.total
            ))),
        }
    }

    /// Which modality's range a global id falls in, if any.
    pub fn modality_of(&self, global: u32) -> Option<Modality> {
        Modality::ALL
            .into_iter()
            .find(|&m| self.range(m).contains(&global))
    }

    /// Check that every token of a sequence is either a special or inside
    /// the sequence's declared modality range.
    pub fn validate_sequence(&self, seq: &TokenSequence) -> Result<()> {
        let range = self.range(seq.modality);
        for (pos, &t) in seq.tokens.iter().enumerate() {
            if t >= SPECIAL_COUNT && !range.contains(&t) {
                return Err(Error::Domain(format!(
                    "token {t} at position {pos} is outside the {} range {}..{}",
                    seq.modality, range.start, range.end
                )));
            }
        }
        Ok(())
    }
}

/// A token sequence tagged with the modality it encodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub modality: Modality,
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn new(modality: Modality, tokens: Vec<u32>) -> TokenSequence {
        TokenSequence { modality, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Collapse consecutive runs of the same token to a single occurrence,
/// preserving first-occurrence order. Used to deduplicate speech tokens,
/// where neighbouring frames usually quantise to the same code.
pub fn dedup_runs(seq: &TokenSequence) -> TokenSequence {
    let mut out = Vec::with_capacity(seq.tokens.len());
    for &t in &seq.tokens {
        if out.last() != Some(&t) {
            out.push(t);
        }
    }
    TokenSequence::new(seq.modality, out)
}

/// Ceil(log2(v)): bits needed to index a table of `v` entries.
fn bit_width(v: u32) -> u32 {
    debug_assert!(v > 0);
    if v <= 1 {
        0
    } else {
        32 - (v - 1).leading_zeros()
    }
}

/// Compression accounting for tokenised speech and images.
#[derive(Debug, Clone, PartialEq)]
pub struct BitsReport {
    /// Bits of raw 16 kHz 16-bit mono audio for the given duration.
    pub audio_raw_bits: f64,
    /// Bits to store the speech tokens for that duration.
    pub audio_token_bits: f64,
    /// Token bits as a percentage of raw bits; `None` for zero-length audio.
    pub audio_percent: Option<f64>,
    /// Bits of a raw 8-bit RGB image at the given resolution.
    pub image_raw_bits: u64,
    /// Bits to store the image tokens.
    pub image_token_bits: u64,
    /// Image token bits as a percentage of raw bits.
    pub image_percent: f64,
    /// Bits per speech token (ceil log2 of the speech vocabulary).
    pub speech_token_width: u32,
    /// Bits per image token (ceil log2 of the image vocabulary).
    pub image_token_width: u32,
}

/// Compute the raw-vs-token bit accounting.
///
/// Audio is modelled as 16 kHz, 16-bit, mono; images as `hw`×`hw` 8-bit RGB.
/// `token_rate` is speech tokens per second *after* run deduplication is
/// ignored, i.e. the nominal frame rate. All sizes must be positive;
/// `audio_seconds` may be zero, in which case the audio ratio is undefined.
pub fn bits_report(
    audio_seconds: f64,
    token_rate: f64,
    speech_vocab: u32,
    image_hw: u32,
    image_tokens: u32,
    image_vocab: u32,
) -> Result<BitsReport> {
    if !(audio_seconds.is_finite() && audio_seconds >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "audio_seconds must be finite and non-negative, got {audio_seconds}"
        )));
    }
    if !(token_rate.is_finite() && token_rate > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "token_rate must be positive, got {token_rate}"
        )));
    }
    for (name, v) in [
        ("speech_vocab", speech_vocab),
        ("image_hw", image_hw),
        ("image_tokens", image_tokens),
        ("image_vocab", image_vocab),
    ] {
        if v == 0 {
            return Err(Error::InvalidArgument(format!("{name} must be positive")));
        }
    }

    let speech_token_width = bit_width(speech_vocab);
    let image_token_width = bit_width(image_vocab);

    let audio_raw_bits = audio_seconds * 16_000.0 * 16.0;
    let audio_token_bits = audio_seconds * token_rate * f64::from(speech_token_width);
    let audio_percent = if audio_raw_bits > 0.0 {
        Some(100.0 * audio_token_bits / audio_raw_bits)
    } else {
        None
    };

    let image_raw_bits = u64::from(image_hw) * u64::from(image_hw) * 3 * 8;
    let image_token_bits = u64::from(image_tokens) * u64::from(image_token_width);
    let image_percent = 100.0 * image_token_bits as f64 / image_raw_bits as f64;

    Ok(BitsReport {
        audio_raw_bits,
        audio_token_bits,
        audio_percent,
        image_raw_bits,
        image_token_bits,
        image_percent,
        speech_token_width,
        image_token_width,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_have_fixed_ids() {
        assert_eq!((PAD, BOS, EOS, UNK), (0, 1, 2, 3));
        assert_eq!(SPECIAL_COUNT, 4);
    }

    #[test]
    fn ranges_are_contiguous_disjoint_and_ordered() {
        let v = Vocabulary::new(8192, 200, 30522).unwrap();
        assert_eq!(v.offset(Modality::Image), 4);
        assert_eq!(v.offset(Modality::Speech), 4 + 8192);
        assert_eq!(v.offset(Modality::Text), 4 + 8192 + 200);
        assert_eq!(v.total(), 4 + 8192 + 200 + 30522);
        // Adjacent ranges share no ids and leave no gaps.
        assert_eq!(v.range(Modality::Image).end, v.range(Modality::Speech).start);
        assert_eq!(v.range(Modality::Speech).end, v.range(Modality::Text).start);
        assert_eq!(v.range(Modality::Text).end, v.total());
    }

    #[test]
    fn local_global_roundtrip_over_every_id() {
        let v = Vocabulary::new(17, 5, 9).unwrap();
        for m in Modality::ALL {
            for local in 0..v.size(m) {
                let g = v.local_to_global(m, local).unwrap();
                assert_eq!(v.global_to_local(g).unwrap(), (m, local));
                assert_eq!(v.modality_of(g), Some(m));
            }
        }
        // Specials belong to no modality.
        for s in 0..SPECIAL_COUNT {
            assert_eq!(v.modality_of(s), None);
        }
        assert_eq!(v.modality_of(v.total()), None);
    }

    #[test]
    fn out_of_range_lookups_error() {
        let v = Vocabulary::new(4, 4, 4).unwrap();
        assert!(matches!(
            v.local_to_global(Modality::Speech, 4),
            Err(Error::Range(_))
        ));
        assert!(matches!(v.global_to_local(2), Err(Error::Domain(_))));
        assert!(matches!(v.global_to_local(16), Err(Error::Range(_))));
        assert!(Vocabulary::new(0, 4, 4).is_err());
    }

    #[test]
    fn validate_sequence_accepts_specials_rejects_cross_modality() {
        let v = Vocabulary::new(4, 4, 4).unwrap();
        let ok = TokenSequence::new(Modality::Speech, vec![BOS, 8, 9, EOS, PAD]);
        v.validate_sequence(&ok).unwrap();
        let bad = TokenSequence::new(Modality::Speech, vec![8, 4, 9]); // 4 is an image token
        assert!(matches!(v.validate_sequence(&bad), Err(Error::Domain(_))));
    }

    #[test]
    fn dedup_collapses_runs_only() {
        let s = TokenSequence::new(Modality::Speech, vec![5, 5, 5, 7, 7, 5, 9, 9, 9, 9]);
        assert_eq!(dedup_runs(&s).tokens, vec![5, 7, 5, 9]);
        // Idempotent.
        assert_eq!(dedup_runs(&dedup_runs(&s)), dedup_runs(&s));
        // Empty stays empty.
        let e = TokenSequence::new(Modality::Speech, vec![]);
        assert!(dedup_runs(&e).tokens.is_empty());
    }

    #[test]
    fn bit_widths_are_exact_integers() {
        assert_eq!(bit_width(1), 0);
        assert_eq!(bit_width(2), 1);
        assert_eq!(bit_width(3), 2);
        assert_eq!(bit_width(200), 8);
        assert_eq!(bit_width(256), 8);
        assert_eq!(bit_width(257), 9);
        assert_eq!(bit_width(8192), 13);
    }

    #[test]
    fn speech_bit_budget_one_second_50hz_vocab_200() {
        // 1 s of 16 kHz 16-bit audio = 256 000 bits; 50 tokens × 8 bits = 400.
        let r = bits_report(1.0, 50.0, 200, 224, 32, 8192).unwrap();
        assert_eq!(r.audio_raw_bits, 256_000.0);
        assert_eq!(r.audio_token_bits, 400.0);
        let pct = r.audio_percent.unwrap();
        assert!((pct - 0.15625).abs() < 1e-12);
        assert!(pct < 0.2);
    }

    #[test]
    fn image_bit_budget_224px_32_tokens_vocab_8192() {
        // 224×224×3×8 = 1 204 224 raw bits; 32 × 13 = 416 token bits.
        let r = bits_report(1.0, 50.0, 200, 224, 32, 8192).unwrap();
        assert_eq!(r.image_raw_bits, 1_204_224);
        assert_eq!(r.image_token_bits, 416);
        // ≈ 0.0345 %, i.e. 0.035 % when rounded to three decimals.
        assert!((r.image_percent - 100.0 * 416.0 / 1_204_224.0).abs() < 1e-12);
        assert_eq!((r.image_percent * 1000.0).round() / 1000.0, 0.035);
    }

    #[test]
    fn zero_audio_has_no_ratio() {
        let r = bits_report(0.0, 50.0, 200, 32, 32, 256).unwrap();
        assert_eq!(r.audio_raw_bits, 0.0);
        assert_eq!(r.audio_percent, None);
    }

    #[test]
    fn bits_report_rejects_bad_inputs() {
        assert!(bits_report(-1.0, 50.0, 200, 32, 32, 256).is_err());
        assert!(bits_report(1.0, 0.0, 200, 32, 32, 256).is_err());
        assert!(bits_report(1.0, 50.0, 0, 32, 32, 256).is_err());
        assert!(bits_report(1.0, 50.0, 200, 0, 32, 256).is_err());
    }

    #[test]
    fn directions_cover_all_six_ordered_pairs() {
        assert_eq!(Direction::ALL.len(), 6);
        let mut seen = std::collections::BTreeSet::new();
        for d in Direction::ALL {
            assert_ne!(d.source, d.target);
            seen.insert((d.source, d.target));
        }
        assert_eq!(seen.len(), 6);
        assert_eq!(Direction::parse("s2t").unwrap(), Direction::ALL[4]);
        assert_eq!(Direction::ALL[4].to_string(), "s2t");
        assert!(Direction::parse("s2s").is_err());
        assert!(Direction::parse("x2t").is_err());
        assert!(Direction::parse("st").is_err());
    }
}
