use std::collections::HashMap;
use std::fmt::Write as _;

use super::vocab::{Vocab, BOS_ID};
use crate::error::{Error, Result};

pub type Gram = Vec<u32>;

/// N-gram occurrence counts for orders `1..=order`.
///
/// Sentences are padded with one `<s>` and one `</s>`; the start marker is
/// only ever a context, never a counted event. Alongside raw counts the
/// table keeps the number of distinct left extensions of every lower-order
/// n-gram and the count-of-count statistics used for discounting, both taken
/// before any pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct CountTable {
    pub order: usize,
    pub vocab: Vocab,
    /// `counts[k - 1]` holds the k-grams.
    pub counts: Vec<HashMap<Gram, u64>>,
    pub(crate) continuation: Vec<HashMap<Gram, u64>>,
    /// Per order, how many n-grams have adjusted count 1, 2, 3, 4.
    pub(crate) count_of_counts: Vec<[u64; 4]>,
    pub sentences: usize,
}

impl CountTable {
    pub fn get(&self, gram: &[u32]) -> u64 {
        if gram.is_empty() || gram.len() > self.order {
            return 0;
        }
        self.counts[gram.len() - 1].get(gram).copied().unwrap_or(0)
    }

    /// Count used by Kneser-Ney: raw at the top order and for n-grams that
    /// start with `<s>`, distinct left extensions otherwise.
    pub fn adjusted(&self, gram: &[u32]) -> u64 {
        if gram.len() == self.order || gram[0] == BOS_ID {
            self.get(gram)
        } else {
            self.continuation[gram.len() - 1].get(gram).copied().unwrap_or(0)
        }
    }

    pub fn len(&self, k: usize) -> usize {
        self.counts[k - 1].len()
    }

    fn finalize(&mut self) {
        let n = self.order;
        self.continuation = vec![HashMap::new(); n.saturating_sub(1)];
        for k in 2..=n {
            for g in self.counts[k - 1].keys() {
                *self.continuation[k - 2].entry(g[1..].to_vec()).or_insert(0) += 1;
            }
        }
        self.count_of_counts = (1..=n)
            .map(|k| {
                let mut coc = [0u64; 4];
                for g in self.counts[k - 1].keys() {
                    let a = self.adjusted(g);
                    if (1..=4).contains(&a) {
                        coc[a as usize - 1] += 1;
                    }
                }
                coc
            })
            .collect();
    }

    /// `w1 … wk<TAB>count` lines, orders ascending, n-grams sorted by id.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for level in &self.counts {
            let mut grams: Vec<_> = level.iter().collect();
            grams.sort();
            for (g, c) in grams {
                let words: Vec<&str> = g.iter().map(|&id| self.vocab.word(id)).collect();
                let _ = writeln!(out, "{}\t{c}", words.join(" "));
            }
        }
        out
    }
}

/// Counts every k-gram, `k = 1..=order`, ending at a word or `</s>`.
pub fn count_ngrams<S: AsRef<str>>(sentences: &[S], vocab: &Vocab, order: usize) -> Result<CountTable> {
    if order == 0 {
        return Err(Error::Config("n-gram order must be at least 1".into()));
    }
    let mut table = CountTable {
        order,
        vocab: vocab.clone(),
        counts: vec![HashMap::new(); order],
        continuation: Vec::new(),
        count_of_counts: Vec::new(),
        sentences: 0,
    };
    for s in sentences {
        let s = s.as_ref();
        if s.trim().is_empty() {
            continue;
        }
        table.sentences += 1;
        let ids = vocab.encode_sentence(s);
        for end in 1..ids.len() {
            for k in 1..=order.min(end + 1) {
                let g = &ids[end + 1 - k..=end];
                match table.counts[k - 1].get_mut(g) {
                    Some(c) => *c += 1,
                    None => {
                        table.counts[k - 1].insert(g.to_vec(), 1);
                    }
                }
            }
        }
    }
    if table.sentences == 0 {
        return Err(Error::Empty("n-gram training corpus"));
    }
    table.finalize();
    Ok(table)
}

/// Drops k-grams whose count is below `cutoffs[k - 1]`, together with any
/// n-gram whose context or suffix was dropped. Unigrams of the reserved
/// words are never dropped. Continuation and discount statistics keep their
/// pre-pruning values.
pub fn prune_counts(counts: &CountTable, cutoffs: &[u64]) -> Result<CountTable> {
    if cutoffs.len() != counts.order {
        return Err(Error::Config(format!(
            "expected {} cutoffs, got {}",
            counts.order,
            cutoffs.len()
        )));
    }
    let mut out = counts.clone();
    for k in 1..=counts.order {
        let cutoff = cutoffs[k - 1];
        let (lower, rest) = out.counts.split_at_mut(k - 1);
        let level = &mut rest[0];
        let below = lower.last();
        level.retain(|g, c| {
            if k == 1 {
                return *c >= cutoff || g[0] <= super::vocab::UNK_ID;
            }
            let below = below.expect("lower level exists");
            let context_ok = (k == 2 && g[0] == BOS_ID) || below.contains_key(&g[..k - 1]);
            *c >= cutoff && context_ok && below.contains_key(&g[1..])
        });
    }
    for (k, level) in out.continuation.iter_mut().enumerate() {
        let kept = &out.counts[k];
        level.retain(|g, _| kept.contains_key(g));
    }
    Ok(out)
}
