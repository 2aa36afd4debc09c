//! Linear mixtures of n-gram models.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::ngram::vocab::{BOS, BOS_ID, EOS, EOS_ID};
use crate::ngram::{Entry, Gram, NGramModel, Vocab, LOG_ZERO};

/// Probabilities at or below this are treated as zero.
const ZERO_PROB: f64 = 1e-99;

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolatedModel {
    pub components: Vec<NGramModel>,
    pub weights: Vec<f64>,
}

fn map_word(vocab: &Vocab, word: &str) -> u32 {
    match word {
        BOS => BOS_ID,
        EOS => EOS_ID,
        w => vocab.id_or_unk(w),
    }
}

impl InterpolatedModel {
    pub fn new(components: Vec<NGramModel>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Empty("mixture components"));
        }
        if weights.len() != components.len() {
            return Err(Error::Config(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|&w| !(w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("weights {weights:?} are not on the simplex")));
        }
        Ok(Self { components, weights })
    }

    pub fn uniform(components: Vec<NGramModel>) -> Result<Self> {
        let n = components.len().max(1);
        Self::new(components, vec![1.0 / n as f64; n])
    }

    /// Σ λ P(word | context). `context` holds words, optionally starting
    /// with `<s>`; each component maps unknown words to its `<unk>`.
    pub fn prob(&self, word: &str, context: &[&str]) -> f64 {
        self.components
            .iter()
            .zip(&self.weights)
            .map(|(m, &l)| {
                let ctx: Vec<u32> = context.iter().map(|w| map_word(&m.vocab, w)).collect();
                l * m.prob(&ctx, map_word(&m.vocab, word))
            })
            .sum()
    }

    pub fn perplexity<S: AsRef<str>>(&self, sentences: &[S]) -> Result<f64> {
        let events = event_probs(&self.components, sentences);
        if events.is_empty() {
            return Err(Error::Empty("evaluation corpus"));
        }
        let ll: f64 = events.iter().map(|p| mix(p, &self.weights).ln()).sum();
        Ok((-ll / events.len() as f64).exp())
    }
}

pub fn interpolate_prob(model: &InterpolatedModel, word: &str, context: &[&str]) -> f64 {
    model.prob(word, context)
}

fn mix(p: &[f64], weights: &[f64]) -> f64 {
    p.iter().zip(weights).map(|(p, l)| p * l).sum()
}

/// Per event (words and sentence ends), each component's probability.
pub fn event_probs<S: AsRef<str>>(components: &[NGramModel], sentences: &[S]) -> Vec<Vec<f64>> {
    let mut per_component: Vec<Vec<f64>> = Vec::with_capacity(components.len());
    for m in components {
        let mut v = Vec::new();
        for s in sentences {
            v.extend(m.event_log_probs(s.as_ref()).into_iter().map(|lp| 10f64.powf(lp)));
        }
        per_component.push(v);
    }
    let n_events = per_component.first().map_or(0, Vec::len);
    (0..n_events).map(|e| per_component.iter().map(|c| c[e]).collect()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmResult {
    pub weights: Vec<f64>,
    /// Mean dev log-likelihood (nats per event) at the start and after
    /// every iteration.
    pub log_likelihoods: Vec<f64>,
    pub iterations: usize,
}

fn mean_ll(events: &[Vec<f64>], weights: &[f64]) -> f64 {
    events.iter().map(|p| mix(p, weights).ln()).sum::<f64>() / events.len() as f64
}

/// Mixture weights maximizing dev likelihood, by EM from uniform weights.
///
/// Stops when an iteration improves the mean log-likelihood by less than
/// `tol` nats per event or after `max_iters` iterations. If a single
/// component scores better than the result, its vertex is returned.
pub fn optimize_weights_em<S: AsRef<str>>(
    components: &[NGramModel],
    dev: &[S],
    tol: f64,
    max_iters: usize,
) -> Result<EmResult> {
    if components.is_empty() {
        return Err(Error::Empty("mixture components"));
    }
    let events = event_probs(components, dev);
    if events.is_empty() {
        return Err(Error::Empty("dev corpus"));
    }
    if let Some(e) = events.iter().position(|p| p.iter().all(|&x| x <= ZERO_PROB)) {
        let (word, sentence) = locate_event(dev, e);
        return Err(Error::ZeroProbability { word, sentence });
    }
    optimize_on_events(&events, tol, max_iters)
}

fn locate_event<S: AsRef<str>>(dev: &[S], mut e: usize) -> (String, usize) {
    for (i, s) in dev.iter().enumerate() {
        let words: Vec<&str> = s.as_ref().split_whitespace().collect();
        if e <= words.len() {
            return (words.get(e).copied().unwrap_or(EOS).to_string(), i + 1);
        }
        e -= words.len() + 1;
    }
    (String::new(), 0)
}

/// EM on a precomputed `[event][component]` probability matrix.
pub fn optimize_on_events(events: &[Vec<f64>], tol: f64, max_iters: usize) -> Result<EmResult> {
    if events.is_empty() {
        return Err(Error::Empty("dev events"));
    }
    let k = events[0].len();
    let mut weights = vec![1.0 / k as f64; k];
    let mut lls = vec![mean_ll(events, &weights)];
    let mut iterations = 0;
    let mut post = vec![0.0; k];
    while iterations < max_iters {
        let mut acc = vec![0.0; k];
        for p in events {
            let z = mix(p, &weights);
            for i in 0..k {
                post[i] = weights[i] * p[i] / z;
                acc[i] += post[i];
            }
        }
        let total: f64 = acc.iter().sum();
        weights = acc.iter().map(|a| a / total).collect();
        iterations += 1;
        let ll = mean_ll(events, &weights);
        let gain = ll - lls.last().copied().unwrap_or(f64::NEG_INFINITY);
        lls.push(ll);
        if gain < tol {
            break;
        }
    }
    let mut best = *lls.last().expect("at least one value");
    for i in 0..k {
        let mut vertex = vec![0.0; k];
        vertex[i] = 1.0;
        let ll = mean_ll(events, &vertex);
        if ll > best {
            best = ll;
            weights = vertex;
        }
    }
    Ok(EmResult {
        weights,
        log_likelihoods: lls,
        iterations,
    })
}

/// A single backoff model over the union of the components' n-grams whose
/// explicit probabilities are the mixture's. Backoff weights are recomputed
/// so every context normalizes; queries that back off are approximate.
pub fn flatten(model: &InterpolatedModel) -> NGramModel {
    let words: BTreeSet<&str> = model
        .components
        .iter()
        .flat_map(|m| m.vocab.words().iter().map(String::as_str))
        .collect();
    let vocab = Vocab::from_words(words);
    let order = model.components.iter().map(|m| m.order).max().expect("non-empty");
    let maps: Vec<Vec<u32>> = model
        .components
        .iter()
        .map(|m| vocab.words().iter().map(|w| map_word(&m.vocab, w)).collect())
        .collect();
    let to_union = |m: &NGramModel, g: &[u32]| -> Gram { g.iter().map(|&id| vocab.id(m.vocab.word(id)).expect("union")).collect() };
    let mix_prob = |ctx: &[u32], w: u32| -> f64 {
        model
            .components
            .iter()
            .zip(&model.weights)
            .zip(&maps)
            .map(|((m, &l), map)| {
                let c: Vec<u32> = ctx.iter().map(|&id| map[id as usize]).collect();
                l * m.prob(&c, map[w as usize])
            })
            .sum()
    };

    let mut flat = NGramModel {
        order,
        vocab: vocab.clone(),
        levels: vec![HashMap::new(); order],
    };
    let mut uni: Vec<f64> = (0..vocab.len() as u32).map(|w| if w == BOS_ID { 0.0 } else { mix_prob(&[], w) }).collect();
    let z: f64 = uni.iter().sum();
    for p in &mut uni {
        *p /= z;
    }
    for (w, &p) in uni.iter().enumerate() {
        let log_prob = if w as u32 == BOS_ID { LOG_ZERO } else { p.max(ZERO_PROB).log10() };
        flat.levels[0].insert(vec![w as u32], Entry { log_prob, backoff: 0.0 });
    }

    for k in 2..=order {
        let mut grams: BTreeSet<Gram> = BTreeSet::new();
        for m in model.components.iter().filter(|m| m.order >= k) {
            for g in m.levels[k - 1].keys() {
                grams.insert(to_union(m, g));
            }
        }
        let mut by_context: HashMap<Gram, Vec<(u32, f64)>> = HashMap::new();
        for g in &grams {
            let p = mix_prob(&g[..k - 1], g[k - 1]);
            by_context.entry(g[..k - 1].to_vec()).or_default().push((g[k - 1], p));
        }
        let mut level = HashMap::with_capacity(grams.len());
        let mut contexts: Vec<_> = by_context.into_iter().collect();
        contexts.sort_by(|a, b| a.0.cmp(&b.0));
        for (ctx, mut entries) in contexts {
            let explicit: f64 = entries.iter().map(|e| e.1).sum();
            let lower: f64 = entries.iter().map(|&(w, _)| flat.prob(&ctx[1..], w)).sum();
            let (num, den) = (1.0 - explicit, 1.0 - lower);
            let backoff = if num > 1e-12 && den > 1e-12 {
                (num / den).log10()
            } else {
                for e in &mut entries {
                    e.1 /= explicit;
                }
                LOG_ZERO
            };
            for (w, p) in entries {
                let mut g = ctx.clone();
                g.push(w);
                level.insert(g, Entry { log_prob: p.max(ZERO_PROB).log10(), backoff: 0.0 });
            }
            if let Some(e) = flat.levels[k - 2].get_mut(&ctx) {
                e.backoff = backoff;
            }
        }
        flat.levels[k - 1] = level;
    }
    flat
}
