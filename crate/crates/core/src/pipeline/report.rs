use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::filter::FilterReport;

/// Results of a pipeline run. Everything except `timings` is a pure
/// function of the config and inputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    /// Seconds per stage, in execution order, measured when the stage ran.
    pub timings: Vec<(String, f64)>,
    pub corpus_sizes: BTreeMap<String, usize>,
    /// Word-level perplexities of the neural models, e.g. `finetuned_test`.
    pub neural_ppl: BTreeMap<String, f64>,
    /// Word-level perplexities of the n-gram models, e.g. `interpolated_dev`.
    pub ngram_ppl: BTreeMap<String, f64>,
    /// Mixture weight per component name, in component order.
    pub weights: Vec<(String, f64)>,
    pub filter: Option<FilterReport>,
}

impl RunReport {
    /// Equal up to timings.
    pub fn same_results(&self, other: &RunReport) -> bool {
        self.corpus_sizes == other.corpus_sizes
            && self.neural_ppl == other.neural_ppl
            && self.ngram_ppl == other.ngram_ppl
            && self.weights == other.weights
            && self.filter == other.filter
    }

    pub fn is_finite(&self) -> bool {
        self.neural_ppl.values().chain(self.ngram_ppl.values()).all(|x| x.is_finite())
            && self.weights.iter().all(|(_, w)| w.is_finite())
    }

    /// Human-readable summary, without timings.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("corpus sizes (sentences)\n");
        for (k, v) in &self.corpus_sizes {
            let _ = writeln!(s, "  {k:<24}{v:>10}");
        }
        if !self.neural_ppl.is_empty() {
            s.push_str("\nneural LM word-level perplexity\n");
            for (k, v) in &self.neural_ppl {
                let _ = writeln!(s, "  {k:<24}{v:>10.3}");
            }
        }
        if !self.ngram_ppl.is_empty() {
            s.push_str("\nn-gram word-level perplexity\n");
            for (k, v) in &self.ngram_ppl {
                let _ = writeln!(s, "  {k:<24}{v:>10.3}");
            }
        }
        if !self.weights.is_empty() {
            s.push_str("\ninterpolation weights\n");
            for (k, v) in &self.weights {
                let _ = writeln!(s, "  {k:<24}{v:>10.4}");
            }
        }
        if let Some(f) = &self.filter {
            s.push_str("\nfilter\n");
            for (k, v) in f.to_kv() {
                let _ = writeln!(s, "  {k:<24}{v:>10}");
            }
        }
        s
    }

    /// Machine-readable key-value file, without timings.
    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        let mut table = |name: &str, rows: Vec<(String, String)>| {
            if rows.is_empty() {
                return;
            }
            let _ = writeln!(s, "[{name}]");
            for (k, v) in rows {
                let _ = writeln!(s, "{k} = {v}");
            }
            s.push('\n');
        };
        table("corpus_sizes", self.corpus_sizes.iter().map(|(k, v)| (k.clone(), v.to_string())).collect());
        table("neural_ppl", self.neural_ppl.iter().map(|(k, v)| (k.clone(), format!("{v:?}"))).collect());
        table("ngram_ppl", self.ngram_ppl.iter().map(|(k, v)| (k.clone(), format!("{v:?}"))).collect());
        table("weights", self.weights.iter().map(|(k, v)| (k.clone(), format!("{v:?}"))).collect());
        if let Some(f) = &self.filter {
            table("filter", f.to_kv().into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect());
        }
        s.truncate(s.trim_end().len());
        s.push('\n');
        s
    }

    pub fn timings_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.timings {
            let _ = writeln!(s, "{k}\t{v:.3}");
        }
        s
    }
}
