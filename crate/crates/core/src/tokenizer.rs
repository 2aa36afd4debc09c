//! Byte-pair-encoding subword segmentation.
//!
//! Merges are learned inside word units only. A sentence is split on single
//! spaces; every word after the first is prefixed with [`WORD_MARKER`], which
//! is an ordinary symbol for merge purposes, so frequent words collapse into a
//! single token that carries its own leading boundary.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Marks a word that is preceded by a space.
pub const WORD_MARKER: char = '\u{2581}';
const WORD_MARKER_STR: &str = "\u{2581}";

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const PAD: &str = "<pad>";

const SPECIALS: [&str; 4] = [BOS, EOS, UNK, PAD];

/// Ids of the reserved tokens. They occupy the first slots of every vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub bos: u32,
    pub eos: u32,
    pub unk: u32,
    pub pad: u32,
}

pub const SPECIAL_IDS: SpecialIds = SpecialIds {
    bos: 0,
    eos: 1,
    unk: 2,
    pad: 3,
};
const MARKER_ID: u32 = 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    index: HashMap<String, u32>,
    /// (left, right) -> (rank, merged id)
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

impl BpeModel {
    fn from_parts(merges: Vec<(String, String)>, vocab: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(vocab.len());
        for (id, sym) in vocab.iter().enumerate() {
            if index.insert(sym.clone(), id as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry '{sym}'")));
            }
        }
        for (i, name) in SPECIALS.iter().enumerate() {
            if vocab.get(i).map(String::as_str) != Some(*name) {
                return Err(Error::Config(format!("vocabulary id {i} must be {name}")));
            }
        }
        if vocab.get(MARKER_ID as usize).map(String::as_str) != Some(WORD_MARKER_STR) {
            return Err(Error::Config(format!(
                "vocabulary id {MARKER_ID} must be the word marker"
            )));
        }
        let mut ranks = HashMap::with_capacity(merges.len());
        for (rank, (l, r)) in merges.iter().enumerate() {
            let lookup = |s: &str| {
                index
                    .get(s)
                    .copied()
                    .filter(|&id| id as usize >= SPECIALS.len())
                    .ok_or_else(|| Error::Config(format!("merge {rank}: '{s}' is not a vocabulary symbol")))
            };
            let key = (lookup(l)?, lookup(r)?);
            let merged = lookup(&format!("{l}{r}"))?;
            if ranks.insert(key, (rank, merged)).is_some() {
                return Err(Error::Config(format!("merge {rank}: duplicate pair '{l} {r}'")));
            }
        }
        Ok(Self {
            merges,
            vocab,
            index,
            ranks,
        })
    }

    pub fn specials(&self) -> SpecialIds {
        SPECIAL_IDS
    }

    pub fn marker_id(&self) -> u32 {
        MARKER_ID
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    /// Does this token begin a new word (other than the sentence's first)?
    pub fn starts_word(&self, id: u32) -> bool {
        self.vocab
            .get(id as usize)
            .is_some_and(|s| id >= MARKER_ID && s.starts_with(WORD_MARKER))
    }

    /// Segments `text` and wraps it in sentence-start/sentence-end ids.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = vec![SPECIAL_IDS.bos];
        self.encode_words_into(text, &mut out);
        out.push(SPECIAL_IDS.eos);
        out
    }

    /// Like [`encode`](Self::encode) but without the boundary tokens.
    pub fn encode_words(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        self.encode_words_into(text, &mut out);
        out
    }

    fn encode_words_into(&self, text: &str, out: &mut Vec<u32>) {
        let mut symbols = Vec::new();
        for (i, word) in text.split(' ').enumerate() {
            symbols.clear();
            if i > 0 {
                symbols.push(MARKER_ID);
            }
            symbols.extend(word.chars().map(|c| self.char_id(c)));
            self.apply_merges(&mut symbols);
            out.extend_from_slice(&symbols);
        }
    }

    fn char_id(&self, c: char) -> u32 {
        if c == WORD_MARKER {
            return SPECIAL_IDS.unk;
        }
        let mut buf = [0u8; 4];
        self.index
            .get(&*c.encode_utf8(&mut buf))
            .copied()
            .filter(|&id| id > MARKER_ID)
            .unwrap_or(SPECIAL_IDS.unk)
    }

    fn apply_merges(&self, symbols: &mut Vec<u32>) {
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|&(rank, id)| (rank, w[0], w[1], id)))
                .min_by_key(|&(rank, ..)| rank);
            let Some((_, left, right, merged)) = best else {
                return;
            };
            let mut write = 0;
            let mut read = 0;
            while read < symbols.len() {
                if read + 1 < symbols.len() && symbols[read] == left && symbols[read + 1] == right {
                    symbols[write] = merged;
                    read += 2;
                } else {
                    symbols[write] = symbols[read];
                    read += 1;
                }
                write += 1;
            }
            symbols.truncate(write);
        }
    }

    /// Inverse of [`encode`](Self::encode); reserved tokens are dropped.
    pub fn decode(&self, tokens: &[u32]) -> Result<String> {
        let mut out = String::new();
        for (position, &id) in tokens.iter().enumerate() {
            let sym = self.vocab.get(id as usize).ok_or(Error::TokenOutOfRange {
                id,
                position,
                vocab_size: self.vocab.len(),
            })?;
            if (id as usize) < SPECIALS.len() {
                continue;
            }
            match sym.strip_prefix(WORD_MARKER) {
                Some(rest) => {
                    out.push(' ');
                    out.push_str(rest);
                }
                None => out.push_str(sym),
            }
        }
        Ok(out)
    }

    pub fn merges_to_string(&self) -> String {
        let mut s = String::new();
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn vocab_to_string(&self) -> String {
        let mut s = String::new();
        for (id, sym) in self.vocab.iter().enumerate() {
            let _ = writeln!(s, "{sym}\t{id}");
        }
        s
    }

    pub fn from_strings(merges: &str, vocab: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in vocab.lines().enumerate() {
            let (sym, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse("vocab", n + 1, "expected 'subword<TAB>id'"))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::parse("vocab", n + 1, format!("bad id '{id}'")))?;
            if id != n {
                return Err(Error::parse("vocab", n + 1, format!("ids must be contiguous, found {id}")));
            }
            entries.push(sym.to_string());
        }
        let mut pairs = Vec::new();
        for (n, line) in merges.lines().enumerate() {
            let mut parts = line.split(' ');
            match (parts.next(), parts.next(), parts.next()) {
                (Some(l), Some(r), None) if !l.is_empty() && !r.is_empty() => {
                    pairs.push((l.to_string(), r.to_string()))
                }
                _ => return Err(Error::parse("merges", n + 1, "expected 'left right'")),
            }
        }
        Self::from_parts(pairs, entries)
    }

    pub fn save(&self, merges_path: &Path, vocab_path: &Path) -> Result<()> {
        std::fs::write(merges_path, self.merges_to_string()).map_err(|e| Error::io(merges_path, e))?;
        std::fs::write(vocab_path, self.vocab_to_string()).map_err(|e| Error::io(vocab_path, e))?;
        Ok(())
    }

    pub fn load(merges_path: &Path, vocab_path: &Path) -> Result<Self> {
        let merges = std::fs::read_to_string(merges_path).map_err(|e| Error::io(merges_path, e))?;
        let vocab = std::fs::read_to_string(vocab_path).map_err(|e| Error::io(vocab_path, e))?;
        Self::from_strings(&merges, &vocab)
    }
}

/// Learns up to `num_merges` merges from a line-oriented corpus.
///
/// Pair counts are taken per word type weighted by frequency. Ties go to the
/// lexicographically smallest `(left, right)` pair; a pair must occur at
/// least twice to be merged.
pub fn learn_bpe<S: AsRef<str>>(corpus: &[S], num_merges: usize) -> Result<BpeModel> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }

    let mut word_counts: HashMap<String, u64> = HashMap::new();
    let mut alphabet = BTreeSet::new();
    for line in corpus {
        for (i, word) in line.as_ref().split(' ').enumerate() {
            let word: String = word.chars().filter(|&c| c != WORD_MARKER).collect();
            alphabet.extend(word.chars());
            let unit = if i > 0 { format!("{WORD_MARKER}{word}") } else { word };
            if !unit.is_empty() {
                *word_counts.entry(unit).or_default() += 1;
            }
        }
    }

    let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    vocab.push(WORD_MARKER_STR.to_string());
    vocab.extend(alphabet.iter().map(|c| c.to_string()));
    let mut index: HashMap<String, u32> = vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();

    // Sorted so that counting order (and therefore the result) never depends on hashing.
    let mut types: Vec<(String, u64)> = word_counts.into_iter().collect();
    types.sort_unstable();
    let mut words: Vec<(Vec<u32>, u64)> = types
        .iter()
        .map(|(unit, count)| (unit.chars().map(|c| index[&c.to_string()]).collect(), *count))
        .collect();

    let mut merges = Vec::with_capacity(num_merges);
    let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
    while merges.len() < num_merges {
        pair_counts.clear();
        for (syms, count) in &words {
            for w in syms.windows(2) {
                *pair_counts.entry((w[0], w[1])).or_default() += count;
            }
        }
        let best = pair_counts
            .iter()
            .filter(|(&(l, r), &c)| {
                c >= 2 && !SPECIALS.contains(&format!("{}{}", vocab[l as usize], vocab[r as usize]).as_str())
            })
            .max_by(|(&(l1, r1), &c1), (&(l2, r2), &c2)| {
                c1.cmp(&c2).then_with(|| {
                    (vocab[l2 as usize].as_str(), vocab[r2 as usize].as_str())
                        .cmp(&(vocab[l1 as usize].as_str(), vocab[r1 as usize].as_str()))
                })
            })
            .map(|(&pair, _)| pair);
        let Some((left, right)) = best else {
            break;
        };

        let merged_str = format!("{}{}", vocab[left as usize], vocab[right as usize]);
        let merged = *index.entry(merged_str.clone()).or_insert_with(|| {
            vocab.push(merged_str);
            (vocab.len() - 1) as u32
        });
        merges.push((vocab[left as usize].clone(), vocab[right as usize].clone()));

        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut write = 0;
            let mut read = 0;
            while read < syms.len() {
                if read + 1 < syms.len() && syms[read] == left && syms[read + 1] == right {
                    syms[write] = merged;
                    read += 2;
                } else {
                    syms[write] = syms[read];
                    read += 1;
                }
                write += 1;
            }
            syms.truncate(write);
        }
    }

    BpeModel::from_parts(merges, vocab)
}

/// Learns from raw bytes, rejecting lines that are not valid UTF-8.
pub fn learn_bpe_bytes(data: &[u8], num_merges: usize) -> Result<BpeModel> {
    let lines = crate::corpus::split_utf8_lines(data)?;
    learn_bpe(&lines, num_merges)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(l: &str, r: &str) -> (String, String) {
        (l.to_string(), r.to_string())
    }

    #[test]
    fn single_merge_on_repeated_char() {
        let m = learn_bpe(&["aaab"], 1).unwrap();
        assert_eq!(m.merges(), &[pair("a", "a")]);
    }

    #[test]
    fn zero_merges_gives_char_vocab() {
        let m = learn_bpe(&["abc cab"], 0).unwrap();
        assert!(m.merges().is_empty());
        // specials + marker + {a,b,c}
        assert_eq!(m.vocab_size(), 4 + 1 + 3);
    }

    #[test]
    fn tie_broken_lexicographically() {
        let m = learn_bpe(&["low lower", "lowest"], 2).unwrap();
        assert_eq!(m.merges(), &[pair("l", "o"), pair("lo", "w")]);
    }

    #[test]
    fn stops_when_no_pair_repeats() {
        let m = learn_bpe(&["abcd"], 10).unwrap();
        assert!(m.merges().is_empty());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let empty: [&str; 0] = [];
        assert!(matches!(learn_bpe(&empty, 3), Err(Error::Empty(_))));
    }

    #[test]
    fn bad_utf8_names_line() {
        let data = b"fine\nalso fine\n\xff\xfe\n";
        match learn_bpe_bytes(data, 2) {
            Err(Error::Encoding { line }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn encode_empty_and_greedy() {
        let m = learn_bpe(&["aaab"], 1).unwrap();
        let s = m.specials();
        assert_eq!(m.encode(""), vec![s.bos, s.eos]);
        let aa = m.id("aa").unwrap();
        let a = m.id("a").unwrap();
        assert_eq!(m.encode("aaa"), vec![s.bos, aa, a, s.eos]);
    }

    #[test]
    fn unknown_chars_map_to_unk() {
        let m = learn_bpe(&["ab"], 0).unwrap();
        let s = m.specials();
        assert_eq!(m.encode("az"), vec![s.bos, m.id("a").unwrap(), s.unk, s.eos]);
    }

    #[test]
    fn decode_roundtrip_and_errors() {
        let lines = ["the cat sat", "the dog  sat", " lead and trail ", "cats"];
        let m = learn_bpe(&lines, 12).unwrap();
        for line in lines {
            assert_eq!(m.decode(&m.encode(line)).unwrap(), line);
        }
        let s = m.specials();
        assert_eq!(m.decode(&[s.bos, s.eos]).unwrap(), "");
        let bad = m.vocab_size() as u32;
        match m.decode(&[s.bos, 5, bad, s.eos]) {
            Err(Error::TokenOutOfRange { position, .. }) => assert_eq!(position, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn files_roundtrip_bit_exact() {
        let m = learn_bpe(&["low lower lowest", "newer wider", "low low"], 8).unwrap();
        let merges = m.merges_to_string();
        let vocab = m.vocab_to_string();
        let back = BpeModel::from_strings(&merges, &vocab).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.merges_to_string(), merges);
        assert_eq!(back.vocab_to_string(), vocab);
    }

    #[test]
    fn merged_symbols_are_concatenations() {
        let m = learn_bpe(&["abab abab abab", "bab"], 6).unwrap();
        for (l, r) in m.merges() {
            assert!(m.id(&format!("{l}{r}")).is_some());
        }
    }
}
