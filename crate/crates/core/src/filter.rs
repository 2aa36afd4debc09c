//! Rule-based filtering of generated sentences.
//!
//! Rules run in a fixed order (length, out-of-vocabulary, keyword,
//! duplicates) and a rejected sentence is charged to the first rule it fails.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::SyntheticCorpus;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterRuleSet {
    /// Minimum sentence length in words.
    pub min_len: usize,
    /// Maximum sentence length in words; `None` is unbounded.
    pub max_len: Option<usize>,
    /// Allowed words; `None` disables the OOV rule.
    pub vocab: Option<BTreeSet<String>>,
    pub max_oov_per_sentence: usize,
    /// When set, a sentence must contain at least one of these words.
    pub required_keywords: Option<BTreeSet<String>>,
    /// When set, a sentence must contain none of these words.
    pub banned_keywords: Option<BTreeSet<String>>,
    /// Copies of one sentence kept across the corpus; `None` is unbounded.
    pub max_duplicates: Option<usize>,
}

impl FilterRuleSet {
    pub fn validate(&self) -> Result<()> {
        if let Some(max) = self.max_len {
            if self.min_len > max {
                return Err(Error::Config(format!("min_len {} exceeds max_len {max}", self.min_len)));
            }
        }
        if self.max_duplicates == Some(0) {
            return Err(Error::Config("max_duplicates must be at least 1".into()));
        }
        Ok(())
    }

    fn length_ok(&self, words: &[&str]) -> bool {
        words.len() >= self.min_len && self.max_len.is_none_or(|m| words.len() <= m)
    }

    fn oov_ok(&self, words: &[&str]) -> bool {
        match &self.vocab {
            None => true,
            Some(v) => words.iter().filter(|w| !v.contains(**w)).count() <= self.max_oov_per_sentence,
        }
    }

    fn keyword_ok(&self, words: &[&str]) -> bool {
        let required = self
            .required_keywords
            .as_ref()
            .is_none_or(|k| words.iter().any(|w| k.contains(*w)));
        let banned = self
            .banned_keywords
            .as_ref()
            .is_some_and(|k| words.iter().any(|w| k.contains(*w)));
        required && !banned
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FilterReport {
    pub input: usize,
    pub output: usize,
    pub rejected_length: usize,
    pub rejected_oov: usize,
    pub rejected_keyword: usize,
    pub rejected_duplicate: usize,
}

impl FilterReport {
    pub fn total_rejected(&self) -> usize {
        self.rejected_length + self.rejected_oov + self.rejected_keyword + self.rejected_duplicate
    }

    pub fn to_kv(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("input", self.input),
            ("output", self.output),
            ("rejected_length", self.rejected_length),
            ("rejected_oov", self.rejected_oov),
            ("rejected_keyword", self.rejected_keyword),
            ("rejected_duplicate", self.rejected_duplicate),
        ]
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut r = Self::default();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::parse("filter report", n + 1, format!("bad line '{line}'"));
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            let v: usize = v.trim().parse().map_err(|_| bad())?;
            match k.trim() {
                "input" => r.input = v,
                "output" => r.output = v,
                "rejected_length" => r.rejected_length = v,
                "rejected_oov" => r.rejected_oov = v,
                "rejected_keyword" => r.rejected_keyword = v,
                "rejected_duplicate" => r.rejected_duplicate = v,
                _ => return Err(bad()),
            }
        }
        Ok(r)
    }
}

impl fmt::Display for FilterReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.to_kv() {
            writeln!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

/// Nearest-rank quantile of sorted values: the element at rank `ceil(q·n)`.
fn nearest_rank(sorted: &[usize], q: f64) -> usize {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Length bounds from quantiles of the in-domain sentence lengths and the
/// in-domain word types as vocabulary. Other rules stay disabled.
pub fn derive_thresholds<S: AsRef<str>>(in_domain: &[S], low: f64, high: f64) -> Result<FilterRuleSet> {
    if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low >= high {
        return Err(Error::Config(format!("quantiles must satisfy 0 <= low < high <= 1, got ({low}, {high})")));
    }
    let mut lengths = Vec::new();
    let mut vocab = BTreeSet::new();
    for line in in_domain {
        let words: Vec<&str> = line.as_ref().split_whitespace().collect();
        if words.is_empty() {
            continue;
        }
        lengths.push(words.len());
        vocab.extend(words.iter().map(|w| w.to_string()));
    }
    if lengths.is_empty() {
        return Err(Error::Empty("in-domain corpus"));
    }
    lengths.sort_unstable();
    Ok(FilterRuleSet {
        min_len: nearest_rank(&lengths, low),
        max_len: Some(nearest_rank(&lengths, high)),
        vocab: Some(vocab),
        ..Default::default()
    })
}

/// Indices of the sentences that survive, in input order.
pub fn filter_texts<S: AsRef<str>>(texts: &[S], rules: &FilterRuleSet) -> (Vec<usize>, FilterReport) {
    let mut report = FilterReport {
        input: texts.len(),
        ..Default::default()
    };
    let mut seen: HashMap<Vec<&str>, usize> = HashMap::new();
    let mut kept = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        let words: Vec<&str> = text.as_ref().split_whitespace().collect();
        if !rules.length_ok(&words) {
            report.rejected_length += 1;
        } else if !rules.oov_ok(&words) {
            report.rejected_oov += 1;
        } else if !rules.keyword_ok(&words) {
            report.rejected_keyword += 1;
        } else {
            let copies = seen.entry(words).or_insert(0);
            if rules.max_duplicates.is_some_and(|m| *copies >= m) {
                report.rejected_duplicate += 1;
            } else {
                *copies += 1;
                kept.push(i);
            }
        }
    }
    report.output = kept.len();
    (kept, report)
}

pub fn apply_filters(corpus: &SyntheticCorpus, rules: &FilterRuleSet) -> (SyntheticCorpus, FilterReport) {
    let (kept, report) = filter_texts(&corpus.texts(), rules);
    let sentences = kept.into_iter().map(|i| corpus.sentences[i].clone()).collect();
    (SyntheticCorpus { sentences }, report)
}
