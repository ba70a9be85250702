//! Byte-pair encoding for text, built from scratch.
//!
//! The base inventory is every character seen in the training corpus.
//! Whitespace characters join the inventory but are never merged, so a
//! symbol other than a lone whitespace character never contains whitespace:
//! that keeps decoding a plain concatenation (spaces between words are
//! themselves tokens) and keeps the model file format unambiguous.
//!
//! Merges are learned greedily: the most frequent adjacent symbol pair wins
//! each round, ties broken by the lexicographically smallest (left, right)
//! pair of symbol strings, and training stops when the vocabulary target is
//! reached or no pair occurs twice.

use crate::tokens::{Modality, TokenSequence, Vocabulary, UNK};
use crate::{Error, Result};
use std::collections::HashMap;

/// One element of an encoded text: a known symbol id, or a character the
/// inventory does not cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Piece {
    Known(u32),
    Unknown(char),
}

/// A trained BPE model: base characters plus ordered merges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    /// All symbols; ids 0..n_base are single base characters (sorted),
    /// ids n_base.. are merged symbols in merge order.
    symbols: Vec<String>,
    n_base: usize,
    /// Each merge as (left symbol id, right symbol id).
    merges: Vec<(u32, u32)>,
    /// Base character -> symbol id.
    char_ids: HashMap<char, u32>,
}

impl BpeModel {
    /// Learn a model from training lines. `target_vocab` bounds the total
    /// symbol count (base characters included); it must be at least the
    /// size of the base inventory.
    pub fn train(corpus: &[String], target_vocab: usize) -> Result<BpeModel> {
        if corpus.is_empty() {
            return Err(Error::InsufficientData("BPE training corpus is empty".into()));
        }
        for line in corpus {
            if line.chars().any(|c| c == '\n' || c == '\r' || c == '\t') {
                return Err(Error::Domain(
                    "BPE training text must not contain newlines or tabs".into(),
                ));
            }
        }

        // Base inventory: sorted distinct characters.
        let mut base: Vec<char> = {
            let mut set: Vec<char> = corpus.iter().flat_map(|l| l.chars()).collect();
            set.sort_unstable();
            set.dedup();
            set
        };
        if base.is_empty() {
            return Err(Error::InsufficientData("BPE corpus contains no characters".into()));
        }
        if target_vocab < base.len() {
            return Err(Error::InvalidArgument(format!(
                "target vocabulary {target_vocab} smaller than base inventory {}",
                base.len()
            )));
        }

        let mut model = BpeModel {
            symbols: base.iter().map(|c| c.to_string()).collect(),
            n_base: base.len(),
            merges: Vec::new(),
            char_ids: base.drain(..).enumerate().map(|(i, c)| (c, i as u32)).collect(),
        };
        let mergeable: Vec<bool> = model
            .symbols
            .iter()
            .map(|s| !s.chars().next().unwrap().is_whitespace())
            .collect();
        let mut mergeable = mergeable;

        // Working corpus as symbol ids.
        let mut seqs: Vec<Vec<u32>> = corpus
            .iter()
            .map(|line| line.chars().map(|c| model.char_ids[&c]).collect())
            .collect();

        while model.symbols.len() < target_vocab {
            // Count adjacent pairs of mergeable symbols.
            let mut counts: HashMap<(u32, u32), usize> = HashMap::new();
            for seq in &seqs {
                for w in seq.windows(2) {
                    if mergeable[w[0] as usize] && mergeable[w[1] as usize] {
                        *counts.entry((w[0], w[1])).or_insert(0) += 1;
                    }
                }
            }
            let best = counts
                .iter()
                .filter(|&(_, &c)| c >= 2)
                .min_by(|(pa, ca), (pb, cb)| {
                    cb.cmp(ca).then_with(|| {
                        let ka = (&model.symbols[pa.0 as usize], &model.symbols[pa.1 as usize]);
                        let kb = (&model.symbols[pb.0 as usize], &model.symbols[pb.1 as usize]);
                        ka.cmp(&kb)
                    })
                })
                .map(|(&p, _)| p);
            let Some((a, b)) = best else { break };

            let new_id = model.symbols.len() as u32;
            let merged = format!("{}{}", model.symbols[a as usize], model.symbols[b as usize]);
            model.symbols.push(merged);
            model.merges.push((a, b));
            mergeable.push(true);
            for seq in &mut seqs {
                apply_merge(seq, a, b, new_id);
            }
        }

        Ok(model)
    }

    /// Reassemble a model from its serialised parts (base symbols and merge
    /// pairs as strings). Validates that every merge refers to symbols
    /// already defined at that point.
    pub fn from_parts(base_symbols: Vec<String>, merge_pairs: &[(String, String)]) -> Result<BpeModel> {
        if base_symbols.is_empty() {
            return Err(Error::InvalidArgument("BPE model needs at least one base symbol".into()));
        }
        let mut char_ids = HashMap::new();
        for (i, s) in base_symbols.iter().enumerate() {
            let mut chars = s.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(Error::InvalidArgument(format!(
                    "base symbol {s:?} is not a single character"
                )));
            };
            if char_ids.insert(c, i as u32).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate base symbol {s:?}")));
            }
        }
        let n_base = base_symbols.len();
        let mut symbols = base_symbols;
        let mut ids: HashMap<String, u32> =
            symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        let mut merges = Vec::with_capacity(merge_pairs.len());
        for (left, right) in merge_pairs {
            let (Some(&a), Some(&b)) = (ids.get(left), ids.get(right)) else {
                return Err(Error::InvalidArgument(format!(
                    "merge ({left:?}, {right:?}) refers to an unknown symbol"
                )));
            };
            let merged = format!("{left}{right}");
            let id = symbols.len() as u32;
            merges.push((a, b));
            symbols.push(merged.clone());
            ids.insert(merged, id);
        }
        Ok(BpeModel { symbols, n_base, merges, char_ids })
    }

    /// Total symbol count: this is the local text vocabulary size.
    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn n_base(&self) -> usize {
        self.n_base
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Merge pairs as symbol strings, in learned order.
    pub fn merge_strings(&self) -> Vec<(String, String)> {
        self.merges
            .iter()
            .map(|&(a, b)| (self.symbols[a as usize].clone(), self.symbols[b as usize].clone()))
            .collect()
    }

    /// Encode text to symbol pieces: characters to base symbols, then every
    /// merge replayed in learned order. Characters outside the inventory
    /// surface as [`Piece::Unknown`] and block merging across themselves.
    pub fn encode(&self, text: &str) -> Vec<Piece> {
        // Unknown characters are sentinels that never participate in merges.
        const UNKNOWN: u32 = u32::MAX;
        let mut ids: Vec<u32> = Vec::with_capacity(text.len());
        let mut unknown_chars: Vec<char> = Vec::new();
        for c in text.chars() {
            match self.char_ids.get(&c) {
                Some(&id) => ids.push(id),
                None => {
                    ids.push(UNKNOWN);
                    unknown_chars.push(c);
                }
            }
        }
        for (m, &(a, b)) in self.merges.iter().enumerate() {
            apply_merge(&mut ids, a, b, (self.n_base + m) as u32);
        }
        let mut unknown_iter = unknown_chars.into_iter();
        ids.into_iter()
            .map(|id| {
                if id == UNKNOWN {
                    Piece::Unknown(unknown_iter.next().expect("one char per unknown"))
                } else {
                    Piece::Known(id)
                }
            })
            .collect()
    }

    /// Decode symbol ids back to text by concatenation.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            let s = self
                .symbols
                .get(id as usize)
                .ok_or_else(|| Error::Range(format!("BPE symbol id {id} out of range")))?;
            out.push_str(s);
        }
        Ok(out)
    }
}

/// Encode text into a Text-tagged sequence of unified global ids.
/// Characters outside the base inventory become UNK rather than failing, so
/// arbitrary input always tokenises; downstream consumers that cannot
/// handle UNK reject it themselves.
pub fn encode_text(
    model: &BpeModel,
    text: &str,
    vocab: &Vocabulary,
) -> Result<TokenSequence> {
    let mut tokens = Vec::new();
    for p in model.encode(text) {
        match p {
            Piece::Known(id) => tokens.push(vocab.local_to_global(Modality::Text, id)?),
            Piece::Unknown(_) => tokens.push(UNK),
        }
    }
    Ok(TokenSequence::new(Modality::Text, tokens))
}

/// Invert [`encode_text`]: concatenate the symbols behind each global id.
/// UNK renders as U+FFFD since the original character is gone.
pub fn decode_text(
    model: &BpeModel,
    vocab: &Vocabulary,
    seq: &TokenSequence,
) -> Result<String> {
    if seq.modality != Modality::Text {
        return Err(Error::Domain(format!(
            "cannot decode a {} sequence as text",
            seq.modality
        )));
    }
    let mut out = String::new();
    for &t in &seq.tokens {
        if t == UNK {
            out.push('\u{FFFD}');
            continue;
        }
        let (m, local) = vocab.global_to_local(t)?;
        if m != Modality::Text {
            return Err(Error::Domain(format!("token {t} belongs to {m}, not text")));
        }
        out.push_str(&model.decode(&[local])?);
    }
    Ok(out)
}

/// Replace every non-overlapping occurrence of the adjacent pair (a, b)
/// with `new_id`, scanning left to right.
fn apply_merge(seq: &mut Vec<u32>, a: u32, b: u32, new_id: u32) {
    let mut read = 0;
    let mut write = 0;
    while read < seq.len() {
        if read + 1 < seq.len() && seq[read] == a && seq[read + 1] == b {
            seq[write] = new_id;
            read += 2;
        } else {
            seq[write] = seq[read];
            read += 1;
        }
        write += 1;
    }
    seq.truncate(write);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(ls: &[&str]) -> Vec<String> {
        ls.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn merges_most_frequent_pair_first() {
        // "aaab": pairs (a,a)×2, (a,b)×1 → first merge is (a,a).
        let model = BpeModel::train(&lines(&["aaab"]), 3).unwrap();
        assert_eq!(model.n_base(), 2);
        assert_eq!(model.vocab_size(), 3);
        assert_eq!(model.merge_strings(), vec![("a".to_string(), "a".to_string())]);
        // Encoding replays the merge left-to-right: aa, a, b.
        let pieces = model.encode("aaab");
        assert_eq!(
            pieces,
            vec![Piece::Known(2), Piece::Known(0), Piece::Known(1)]
        );
    }

    #[test]
    fn tie_breaks_lexicographically() {
        // "baba": pairs (b,a)×2, (a,b)×1 → (b,a) wins on count.
        // "abab": (a,b)×2, (b,a)×1 → (a,b) wins.
        // "abba abba": counts tie at 2 for (a,b), (b,b) and (b,a);
        // lexicographic order picks (a,b).
        let model = BpeModel::train(&lines(&["abba abba"]), 4).unwrap();
        assert_eq!(model.merge_strings()[0], ("a".to_string(), "b".to_string()));
    }

    #[test]
    fn whitespace_is_never_merged() {
        let model = BpeModel::train(&lines(&["a a a a a a"]), 100).unwrap();
        for (l, r) in model.merge_strings() {
            assert!(!l.contains(' ') && !r.contains(' '), "merged across space: {l:?}+{r:?}");
        }
        // " " is still a symbol so round-trips work.
        let pieces = model.encode("a a");
        let ids: Vec<u32> = pieces
            .iter()
            .map(|p| match p {
                Piece::Known(id) => *id,
                Piece::Unknown(_) => panic!("unexpected unknown"),
            })
            .collect();
        assert_eq!(model.decode(&ids).unwrap(), "a a");
    }

    #[test]
    fn roundtrip_is_exact_over_the_inventory() {
        let corpus = lines(&[
            "a red circle and a blue square",
            "a green triangle",
            "a blue circle and a red triangle",
        ]);
        let model = BpeModel::train(&corpus, 60).unwrap();
        for text in &corpus {
            let ids: Vec<u32> = model
                .encode(text)
                .into_iter()
                .map(|p| match p {
                    Piece::Known(id) => id,
                    Piece::Unknown(c) => panic!("char {c:?} should be known"),
                })
                .collect();
            assert_eq!(&model.decode(&ids).unwrap(), text);
        }
        // Novel arrangements of known characters also round-trip.
        let novel = "a red blue and circle";
        let ids: Vec<u32> = model
            .encode(novel)
            .into_iter()
            .map(|p| match p {
                Piece::Known(id) => id,
                Piece::Unknown(_) => unreachable!(),
            })
            .collect();
        assert_eq!(model.decode(&ids).unwrap(), novel);
    }

    #[test]
    fn unknown_characters_surface_as_unknown_pieces() {
        let model = BpeModel::train(&lines(&["abc"]), 10).unwrap();
        let pieces = model.encode("aZb");
        assert_eq!(pieces[1], Piece::Unknown('Z'));
        assert!(matches!(pieces[0], Piece::Known(_)));
        assert!(matches!(pieces[2], Piece::Known(_)));
    }

    #[test]
    fn training_stops_when_no_pair_repeats() {
        // Every pair in "abcd" occurs once: no merges possible.
        let model = BpeModel::train(&lines(&["abcd"]), 100).unwrap();
        assert_eq!(model.vocab_size(), 4);
        assert!(model.merge_strings().is_empty());
    }

    #[test]
    fn vocab_target_bounds_symbol_count() {
        let model = BpeModel::train(&lines(&["aaaaaaaa bbbbbbbb aaaa"]), 5).unwrap();
        assert!(model.vocab_size() <= 5);
        assert!(BpeModel::train(&lines(&["abcdef"]), 3).is_err());
    }

    #[test]
    fn rejects_tabs_and_newlines() {
        assert!(BpeModel::train(&lines(&["a\tb"]), 10).is_err());
        assert!(BpeModel::train(&lines(&["a\nb"]), 10).is_err());
    }

    #[test]
    fn from_parts_rebuilds_an_identical_model() {
        let corpus = lines(&["a red circle", "a red square", "a red circle"]);
        let model = BpeModel::train(&corpus, 30).unwrap();
        let rebuilt = BpeModel::from_parts(
            model.symbols()[..model.n_base()].to_vec(),
            &model.merge_strings(),
        )
        .unwrap();
        assert_eq!(rebuilt, model);
    }

    #[test]
    fn from_parts_rejects_dangling_merges() {
        let err = BpeModel::from_parts(
            vec!["a".into(), "b".into()],
            &[("a".into(), "c".into())],
        );
        assert!(err.is_err());
    }

    #[test]
    fn merge_application_is_left_to_right_non_overlapping() {
        let mut seq = vec![0, 0, 0];
        apply_merge(&mut seq, 0, 0, 9);
        assert_eq!(seq, vec![9, 0]);
        let mut seq = vec![0, 0, 0, 0];
        apply_merge(&mut seq, 0, 0, 9);
        assert_eq!(seq, vec![9, 9]);
    }

    #[test]
    fn global_id_round_trip_and_unk_absorption() {
        let corpus = vec!["a red circle".to_string(), "a blue square".to_string()];
        let model = BpeModel::train(&corpus, 30).unwrap();
        let vocab = Vocabulary::new(8, 8, model.vocab_size() as u32).unwrap();

        let seq = encode_text(&model, "a red circle", &vocab).unwrap();
        assert_eq!(seq.modality, Modality::Text);
        let text_range = vocab.range(Modality::Text);
        assert!(seq.tokens.iter().all(|t| text_range.contains(t)));
        assert_eq!(decode_text(&model, &vocab, &seq).unwrap(), "a red circle");

        // Out-of-inventory characters come back as UNK and render as the
        // replacement marker.
        let odd = encode_text(&model, "a réd circle", &vocab).unwrap();
        assert!(odd.tokens.contains(&UNK));
        let rendered = decode_text(&model, &vocab, &odd).unwrap();
        assert!(rendered.contains('\u{FFFD}'));
        assert!(rendered.starts_with("a r"));

        // Wrong modality tag is refused.
        let not_text = TokenSequence::new(Modality::Speech, vec![4]);
        assert!(decode_text(&model, &vocab, &not_text).is_err());
    }
}
