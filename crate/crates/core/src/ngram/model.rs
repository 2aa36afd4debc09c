use std::collections::HashMap;

use super::counts::Gram;
use super::vocab::{Vocab, BOS_ID};
use crate::error::{Error, Result};

/// Log10 probability and backoff weight of one stored n-gram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Entry {
    pub log_prob: f64,
    pub backoff: f64,
}

/// Log10 value used for impossible events, as in ARPA files.
pub const LOG_ZERO: f64 = -99.0;

/// Backoff n-gram model. Every vocabulary word has a unigram entry.
#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    pub order: usize,
    pub vocab: Vocab,
    /// `levels[k - 1]` holds the k-grams.
    pub levels: Vec<HashMap<Gram, Entry>>,
}

/// One scored event of a sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenScore {
    pub word: String,
    pub log_prob: f64,
    /// Length of the n-gram that matched, including the word.
    pub ngram_len: usize,
}

impl NGramModel {
    pub fn entry(&self, gram: &[u32]) -> Option<&Entry> {
        if gram.is_empty() || gram.len() > self.order {
            return None;
        }
        self.levels[gram.len() - 1].get(gram)
    }

    /// Log10 P(word | history) and the matched n-gram length. Only the last
    /// `order - 1` history ids are used.
    pub fn log_prob_matched(&self, history: &[u32], word: u32) -> (f64, usize) {
        let start = history.len().saturating_sub(self.order - 1);
        let mut ctx = &history[start..];
        let mut buf: Vec<u32> = Vec::with_capacity(self.order);
        let mut backoff = 0.0;
        loop {
            buf.clear();
            buf.extend_from_slice(ctx);
            buf.push(word);
            if let Some(e) = self.levels[ctx.len()].get(buf.as_slice()) {
                return (backoff + e.log_prob, ctx.len() + 1);
            }
            if ctx.is_empty() {
                return (LOG_ZERO, 0);
            }
            if let Some(e) = self.levels[ctx.len() - 1].get(ctx) {
                backoff += e.backoff;
            }
            ctx = &ctx[1..];
        }
    }

    pub fn log_prob(&self, history: &[u32], word: u32) -> f64 {
        self.log_prob_matched(history, word).0
    }

    pub fn prob(&self, history: &[u32], word: u32) -> f64 {
        10f64.powf(self.log_prob(history, word))
    }

    /// Log10 probabilities of the words and the closing `</s>` of a sentence.
    pub fn event_log_probs(&self, sentence: &str) -> Vec<f64> {
        let ids = self.vocab.encode_sentence(sentence);
        (1..ids.len()).map(|i| self.log_prob(&ids[..i], ids[i])).collect()
    }

    /// Log10 probability of the sentence including its end.
    pub fn score(&self, sentence: &str) -> f64 {
        self.event_log_probs(sentence).iter().sum()
    }

    pub fn score_verbose(&self, sentence: &str) -> Vec<TokenScore> {
        let ids = self.vocab.encode_sentence(sentence);
        let words: Vec<&str> = sentence.split_whitespace().collect();
        (1..ids.len())
            .map(|i| {
                let (log_prob, ngram_len) = self.log_prob_matched(&ids[..i], ids[i]);
                TokenScore {
                    word: words.get(i - 1).unwrap_or(&super::vocab::EOS).to_string(),
                    log_prob,
                    ngram_len,
                }
            })
            .collect()
    }

    /// `10^(-Σ log10 P / events)` with one event per word and sentence end.
    pub fn perplexity<S: AsRef<str>>(&self, sentences: &[S]) -> Result<f64> {
        let mut total = 0.0;
        let mut events = 0usize;
        for s in sentences {
            let lp = self.event_log_probs(s.as_ref());
            events += lp.len();
            total += lp.iter().sum::<f64>();
        }
        if events == 0 {
            return Err(Error::Empty("evaluation corpus"));
        }
        Ok(10f64.powf(-total / events as f64))
    }

    /// Σ P(w | context) over every word that can follow a context.
    pub fn context_sum(&self, context: &[u32]) -> f64 {
        (0..self.vocab.len() as u32)
            .filter(|&w| w != BOS_ID)
            .map(|w| self.prob(context, w))
            .sum()
    }

    /// The empty context and every stored n-gram below the top order.
    pub fn contexts(&self) -> Vec<Gram> {
        let mut out = vec![Vec::new()];
        for level in &self.levels[..self.order - 1] {
            let mut grams: Vec<Gram> = level.keys().filter(|g| *g.last().unwrap() != super::vocab::EOS_ID).cloned().collect();
            grams.sort();
            out.extend(grams);
        }
        out
    }

    /// Largest `|Σ_w P(w | c) - 1|` over all contexts.
    pub fn max_normalization_error(&self) -> f64 {
        self.contexts()
            .iter()
            .map(|c| (self.context_sum(c) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn num_entries(&self) -> Vec<usize> {
        self.levels.iter().map(HashMap::len).collect()
    }
}
