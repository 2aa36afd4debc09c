//! Word-level backoff n-gram models.

pub mod arpa;
pub mod counts;
pub mod kn;
pub mod model;
pub mod vocab;

pub use arpa::{arpa_string, parse_arpa, read_arpa, write_arpa};
pub use counts::{count_ngrams, prune_counts, CountTable, Gram};
pub use kn::estimate_kneser_ney;
pub use model::{Entry, NGramModel, TokenScore, LOG_ZERO};
pub use vocab::Vocab;

use crate::error::Result;

/// Counts, prunes and estimates a Kneser-Ney model in one call.
pub fn train_ngram<S: AsRef<str>>(sentences: &[S], vocab: &Vocab, order: usize, cutoffs: &[u64]) -> Result<NGramModel> {
    let counts = count_ngrams(sentences, vocab, order)?;
    let counts = if cutoffs.iter().all(|&c| c <= 1) {
        counts
    } else {
        prune_counts(&counts, cutoffs)?
    };
    estimate_kneser_ney(&counts)
}
