//! Line-oriented corpora and the prefix corpus that conditions generation.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::BpeModel;

/// Splits raw bytes into lines, failing on the first line that is not UTF-8.
/// Trailing `\r` is removed.
pub fn split_utf8_lines(data: &[u8]) -> Result<Vec<String>> {
    let mut lines = Vec::new();
    if data.is_empty() {
        return Ok(lines);
    }
    let data = data.strip_suffix(b"\n").unwrap_or(data);
    for (n, raw) in data.split(|&b| b == b'\n').enumerate() {
        let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
        let line = std::str::from_utf8(raw).map_err(|_| Error::Encoding { line: n + 1 })?;
        lines.push(line.to_string());
    }
    Ok(lines)
}

/// Reads the non-blank lines of a UTF-8 text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut lines = split_utf8_lines(&data).map_err(|e| match e {
        Error::Encoding { line } => Error::parse(path.display(), line, "invalid UTF-8"),
        other => other,
    })?;
    lines.retain(|l| !l.trim().is_empty());
    Ok(lines)
}

pub fn write_lines<S: AsRef<str>>(path: &Path, lines: &[S]) -> Result<()> {
    let mut out = String::new();
    for l in lines {
        out.push_str(l.as_ref());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Whitespace word count of a sentence.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// A tokenized corpus. Every sentence is wrapped in sentence-start/end ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sentences: Vec<Vec<u32>>,
    /// Whitespace words per sentence, kept for word-level perplexity.
    pub word_counts: Vec<usize>,
    pub source: String,
    pub token_count: usize,
}

impl Corpus {
    pub fn from_lines<S: AsRef<str>>(lines: &[S], tokenizer: &BpeModel, source: impl Into<String>) -> Self {
        let mut sentences = Vec::with_capacity(lines.len());
        let mut word_counts = Vec::with_capacity(lines.len());
        for line in lines {
            let line = line.as_ref();
            if line.trim().is_empty() {
                continue;
            }
            sentences.push(tokenizer.encode(line));
            word_counts.push(word_count(line));
        }
        let token_count = sentences.iter().map(Vec::len).sum();
        Self {
            sentences,
            word_counts,
            source: source.into(),
            token_count,
        }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    /// Total word-level events: words plus one sentence end per sentence.
    pub fn word_events(&self) -> usize {
        self.word_counts.iter().sum::<usize>() + self.sentences.len()
    }
}

pub fn load_corpus(path: &Path, tokenizer: &BpeModel) -> Result<Corpus> {
    let lines = read_lines(path)?;
    Ok(Corpus::from_lines(&lines, tokenizer, path.display().to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixCorpus {
    /// Token ids of each prefix, without the implicit sentence start.
    pub prefixes: Vec<Vec<u32>>,
    /// Word count of each prefix.
    pub k: Vec<usize>,
    pub k_values: BTreeSet<usize>,
}

impl PrefixCorpus {
    pub fn len(&self) -> usize {
        self.prefixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prefixes.is_empty()
    }

    /// Writes the detokenized prefixes one per line plus a sidecar of `k` values.
    pub fn save(&self, path: &Path, k_path: &Path, tokenizer: &BpeModel) -> Result<()> {
        let mut text = Vec::with_capacity(self.len());
        for p in &self.prefixes {
            text.push(tokenizer.decode(p)?);
        }
        write_lines(path, &text)?;
        let ks: Vec<String> = self.k.iter().map(|k| k.to_string()).collect();
        write_lines(k_path, &ks)
    }

    pub fn load(path: &Path, k_path: &Path, tokenizer: &BpeModel) -> Result<Self> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = split_utf8_lines(&data)?;
        let k_lines = read_lines(k_path)?;
        if text.len() != k_lines.len() {
            return Err(Error::parse(
                k_path.display(),
                k_lines.len(),
                format!("{} prefixes but {} k values", text.len(), k_lines.len()),
            ));
        }
        let mut k = Vec::with_capacity(k_lines.len());
        for (n, line) in k_lines.iter().enumerate() {
            k.push(
                line.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::parse(k_path.display(), n + 1, "expected a positive integer"))?,
            );
        }
        Ok(Self {
            prefixes: text.iter().map(|t| tokenizer.encode_words(t)).collect(),
            k_values: k.iter().copied().collect(),
            k,
        })
    }
}

/// Token id sequence covering the first `k` words of a wrapped sentence, or
/// `None` when the sentence is shorter than `k` words.
fn word_prefix<'a>(sentence: &'a [u32], k: usize, tokenizer: &BpeModel) -> Option<&'a [u32]> {
    let eos = tokenizer.specials().eos;
    let body = &sentence[1..];
    let body = match body.iter().position(|&t| t == eos) {
        Some(end) => &body[..end],
        None => body,
    };
    if body.is_empty() {
        return None;
    }
    let mut words = 1;
    for (i, &t) in body.iter().enumerate().skip(1) {
        if tokenizer.starts_word(t) {
            if words == k {
                return Some(&body[..i]);
            }
            words += 1;
        }
    }
    (words == k).then_some(body)
}

/// Samples up to `max_per_k` distinct `k`-word prefixes for each requested `k`.
///
/// Candidates are the distinct prefixes in first-occurrence order; a seeded
/// shuffle picks the subset, so the result depends only on the inputs.
pub fn extract_prefixes(
    corpus: &Corpus,
    tokenizer: &BpeModel,
    k_values: &BTreeSet<usize>,
    max_per_k: usize,
    seed: u64,
) -> Result<PrefixCorpus> {
    let Some(&min_k) = k_values.iter().next() else {
        return Err(Error::Config("k_values must not be empty".into()));
    };
    if min_k == 0 {
        return Err(Error::Config("prefix lengths must be positive".into()));
    }

    let mut out = PrefixCorpus {
        prefixes: Vec::new(),
        k: Vec::new(),
        k_values: k_values.clone(),
    };
    let mut any = false;
    for &k in k_values {
        let mut seen = HashSet::new();
        let mut candidates: Vec<&[u32]> = Vec::new();
        for s in &corpus.sentences {
            if let Some(p) = word_prefix(s, k, tokenizer) {
                if seen.insert(p) {
                    candidates.push(p);
                }
            }
        }
        if k == min_k && !candidates.is_empty() {
            any = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::mix(seed, k as u64));
        candidates.shuffle(&mut rng);
        candidates.truncate(max_per_k);
        for p in candidates {
            out.prefixes.push(p.to_vec());
            out.k.push(k);
        }
    }
    if !any {
        return Err(Error::NoPrefixCandidates(min_k));
    }
    Ok(out)
}
