//! Checks shared by the per-module tests and the acceptance run. Each check
//! returns a short summary on success and the first violation on failure.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use lmaug::bench::{write_synthetic_data, DataPaths, SynthDataConfig};
use lmaug::filter::{filter_texts, FilterRuleSet};
use lmaug::generation::temperature_softmax;
use lmaug::interpolate::{flatten, optimize_weights_em, InterpolatedModel};
use lmaug::neural::{backward, nll_loss, Params, TransformerConfig};
use lmaug::ngram::{arpa_string, count_ngrams, estimate_kneser_ney, parse_arpa, train_ngram, NGramModel, Vocab};
use lmaug::pipeline::config::Paths;
use lmaug::pipeline::{Pipeline, PipelineConfig, Stage};

pub type Check = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------- gradients

pub fn grad_check_config(cfg: &TransformerConfig, seed: u64) -> Result<(usize, f64), String> {
    let mut params = Params::<f64>::init(cfg, seed);
    // move away from the initialization so every tensor carries gradient
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut r = rng(seed ^ 0xabc);
    for x in &mut params.data {
        *x += noise.sample(&mut r);
    }
    let batch: Vec<Vec<u32>> = (0..3)
        .map(|_| {
            let len = r.gen_range(2..=cfg.max_seq_len);
            (0..len).map(|_| r.gen_range(0..cfg.vocab_size as u32)).collect()
        })
        .collect();
    let grad = backward(&params, &batch).map_err(|e| e.to_string())?;
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..params.data.len() {
        let orig = params.data[i];
        params.data[i] = orig + h;
        let up = nll_loss(&params, &batch).map_err(|e| e.to_string())?.0;
        params.data[i] = orig - h;
        let down = nll_loss(&params, &batch).map_err(|e| e.to_string())?.0;
        params.data[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad.data[i];
        let scale = numeric.abs().max(analytic.abs());
        // below 1e-7 the finite difference itself is noise
        let err = if scale < 1e-7 { 0.0 } else { (numeric - analytic).abs() / scale };
        if err > 1e-4 {
            return Err(format!(
                "param {i}: analytic {analytic:e} numeric {numeric:e} relative error {err:e} in {cfg:?}"
            ));
        }
        worst = worst.max(err);
    }
    Ok((params.data.len(), worst))
}

pub fn grad_check_configs() -> Vec<TransformerConfig> {
    let base = TransformerConfig {
        n_blocks: 1,
        n_heads: 1,
        d_model: 4,
        d_ff: 8,
        max_seq_len: 6,
        vocab_size: 7,
        dropout_rate: 0.0,
        tie_embeddings: true,
    };
    vec![
        base.clone(),
        TransformerConfig {
            tie_embeddings: false,
            ..base.clone()
        },
        TransformerConfig {
            n_blocks: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 8,
            vocab_size: 11,
            ..base.clone()
        },
        TransformerConfig {
            n_blocks: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 32,
            max_seq_len: 8,
            vocab_size: 11,
            tie_embeddings: false,
            ..base
        },
    ]
}

pub fn check_gradients() -> Check {
    let mut total = 0;
    let mut worst = 0.0f64;
    for (i, cfg) in grad_check_configs().iter().enumerate() {
        let (n, w) = grad_check_config(cfg, 11 + i as u64)?;
        total += n;
        worst = worst.max(w);
    }
    Ok(format!("{total} parameters, worst relative error {worst:.2e}"))
}

// ------------------------------------------------------------ normalization

pub fn check_softmax() -> Check {
    let mut r = rng(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = r.gen_range(1..=64);
        let spread = r.gen_range(0.1..30.0);
        let logits: Vec<f64> = (0..n).map(|_| r.gen_range(-spread..spread)).collect();
        for tau in [0.5, 1.0, 1.5] {
            let p = temperature_softmax(&logits, tau).map_err(|e| e.to_string())?;
            let err = (p.iter().sum::<f64>() - 1.0).abs();
            if err > 1e-9 || p.iter().any(|x| !(*x >= 0.0)) {
                return Err(format!("sum off by {err:e} at tau {tau}"));
            }
            worst = worst.max(err);
        }
    }
    Ok(format!("3000 distributions, worst error {worst:.1e}"))
}

/// Random sentences over `words`, lengths 1..=max_len.
pub fn random_corpus(r: &mut impl Rng, words: &[&str], n: usize, max_len: usize) -> Vec<String> {
    (0..n)
        .map(|_| {
            let len = r.gen_range(1..=max_len);
            (0..len).map(|_| *words.choose(r).unwrap()).collect::<Vec<_>>().join(" ")
        })
        .collect()
}

/// Every history the model stores plus random ones, each summed over the
/// whole predictable vocabulary.
pub fn normalization_error(model: &NGramModel, r: &mut impl Rng) -> f64 {
    let v = model.vocab.len() as u32;
    let mut contexts: Vec<Vec<u32>> = model.contexts();
    contexts.push(Vec::new());
    for _ in 0..50 {
        let len = r.gen_range(1..model.order.max(2));
        let mut c: Vec<u32> = (0..len).map(|_| r.gen_range(1..v)).collect();
        if r.gen_bool(0.3) {
            c[0] = 0;
        }
        contexts.push(c);
    }
    let mut worst = 0.0f64;
    for c in &contexts {
        let sum: f64 = (1..v).map(|w| model.prob(c, w)).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    worst
}

pub fn mixture_normalization_error(model: &InterpolatedModel, words: &[String], r: &mut impl Rng) -> f64 {
    let mut worst = 0.0f64;
    let mut all: Vec<&str> = words.iter().map(String::as_str).collect();
    all.push("</s>");
    all.push("<unk>");
    for _ in 0..40 {
        let len = r.gen_range(0..3);
        let mut ctx: Vec<&str> = vec!["<s>"];
        ctx.extend((0..len).map(|_| *all.choose(r).unwrap()));
        let sum: f64 = all.iter().map(|w| model.prob(w, &ctx)).sum();
        worst = worst.max((sum - 1.0).abs());
    }
    worst
}

pub fn check_ngram_normalization() -> Check {
    let mut r = rng(17);
    let pool = ["a", "b", "c", "d", "e", "f", "g", "h", "i", "j", "k", "l"];
    let mut models = 0;
    let mut worst = 0.0f64;
    for trial in 0..40 {
        let nw = r.gen_range(2..=pool.len());
        let words = &pool[..nw];
        let order = r.gen_range(1..=4);
        let n = r.gen_range(3..60);
        let lines = random_corpus(&mut r, words, n, 8);
        let vocab = Vocab::from_sentences([&lines[..]]);
        let cutoffs: Vec<u64> = if trial % 2 == 0 {
            Vec::new()
        } else {
            (0..order).map(|k| if k == 0 { 1 } else { r.gen_range(1..4) }).collect()
        };
        let m = train_ngram(&lines, &vocab, order, &cutoffs).map_err(|e| e.to_string())?;
        let err = normalization_error(&m, &mut r);
        if err > 1e-6 {
            return Err(format!("order {order}, cutoffs {cutoffs:?}: sum off by {err:e}"));
        }
        worst = worst.max(err);
        models += 1;

        // a mixture of models trained on different slices, flattened
        let k = r.gen_range(2..=3);
        let mut comps = Vec::new();
        for _ in 0..k {
            let (hi, n) = (r.gen_range(1..=nw), r.gen_range(2..30));
            let sub = random_corpus(&mut r, &words[..hi], n, 6);
            comps.push(train_ngram(&sub, &vocab, order, &[]).map_err(|e| e.to_string())?);
        }
        let raw: Vec<f64> = (0..k).map(|_| r.gen_range(0.05..1.0)).collect();
        let s: f64 = raw.iter().sum();
        let mix = InterpolatedModel::new(comps, raw.iter().map(|x| x / s).collect()).map_err(|e| e.to_string())?;
        let flat = flatten(&mix);
        let err = normalization_error(&flat, &mut r);
        if err > 1e-6 {
            return Err(format!("flattened order {order}: sum off by {err:e}"));
        }
        let words: Vec<String> = vocab.words()[3..].to_vec();
        let err2 = mixture_normalization_error(&mix, &words, &mut r);
        if err2 > 1e-6 {
            return Err(format!("mixture order {order}: sum off by {err2:e}"));
        }
        worst = worst.max(err).max(err2);
        models += 1;
    }
    Ok(format!("{models} models, worst error {worst:.1e}"))
}

// ------------------------------------------------------------------ oracles

pub fn padded(line: &str) -> Vec<String> {
    let mut t = vec!["<s>".to_string()];
    t.extend(line.split_whitespace().map(str::to_string));
    t.push("</s>".to_string());
    t
}

/// Nested-loop n-gram counter over padded sentences.
pub fn naive_counts(lines: &[String], order: usize) -> BTreeMap<Vec<String>, u64> {
    let mut out = BTreeMap::new();
    for line in lines {
        let t = padded(line);
        for end in 1..t.len() {
            for start in 0..=end {
                let len = end - start + 1;
                if len <= order {
                    *out.entry(t[start..=end].to_vec()).or_insert(0) += 1;
                }
            }
        }
    }
    out
}

pub fn table_counts(lines: &[String], order: usize) -> Result<BTreeMap<Vec<String>, u64>, String> {
    let vocab = Vocab::from_sentences([lines]);
    let t = count_ngrams(lines, &vocab, order).map_err(|e| e.to_string())?;
    let mut out = BTreeMap::new();
    for level in &t.counts {
        for (g, &c) in level {
            out.insert(g.iter().map(|&id| vocab.word(id).to_string()).collect(), c);
        }
    }
    Ok(out)
}

/// Interpolated modified Kneser-Ney written directly from the textbook
/// recursion over word strings.
pub struct KnOracle {
    order: usize,
    words: Vec<String>,
    counts: Vec<HashMap<Vec<String>, u64>>,
    adjusted: Vec<HashMap<Vec<String>, u64>>,
    discounts: Vec<[f64; 3]>,
    unigram: HashMap<String, f64>,
}

impl KnOracle {
    pub fn new(lines: &[String], order: usize) -> Self {
        let mut counts = vec![HashMap::new(); order];
        for (g, c) in naive_counts(lines, order) {
            counts[g.len() - 1].insert(g, c);
        }
        let mut adjusted = vec![HashMap::new(); order];
        for k in 1..=order {
            for (g, &c) in &counts[k - 1] {
                let a = if k == order || g[0] == "<s>" {
                    c
                } else {
                    counts[k].keys().filter(|h: &&Vec<String>| h[1..] == g[..]).count() as u64
                };
                adjusted[k - 1].insert(g.clone(), a);
            }
        }
        let discounts = adjusted
            .iter()
            .map(|level| {
                let n = |r: u64| level.values().filter(|&&a| a == r).count() as f64;
                let (n1, n2, n3, n4) = (n(1), n(2), n(3), n(4));
                if n1 == 0.0 || n2 == 0.0 {
                    return [0.5; 3];
                }
                let y = n1 / (n1 + 2.0 * n2);
                let d1 = 1.0 - 2.0 * y * n2 / n1;
                let d2 = 2.0 - 3.0 * y * n3 / n2;
                let d3 = if n3 == 0.0 { d2 } else { 3.0 - 4.0 * y * n4 / n3 };
                [d1.clamp(0.01, 1.0), d2.clamp(0.01, 2.0), d3.clamp(0.01, 3.0)]
            })
            .collect();
        let mut set: BTreeSet<String> = lines.iter().flat_map(|l| l.split_whitespace().map(str::to_string)).collect();
        set.insert("</s>".into());
        set.insert("<unk>".into());
        let mut o = Self {
            order,
            words: set.into_iter().collect(),
            counts,
            adjusted,
            discounts,
            unigram: HashMap::new(),
        };
        o.unigram = o.unigram_dist();
        o
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    fn d(&self, k: usize, a: u64) -> f64 {
        match a {
            0 => 0.0,
            1 => self.discounts[k - 1][0],
            2 => self.discounts[k - 1][1],
            _ => self.discounts[k - 1][2],
        }
    }

    fn unigram_dist(&self) -> HashMap<String, f64> {
        let level = &self.adjusted[0];
        let total: f64 = level.values().map(|&a| a as f64).sum();
        let mass: f64 = level.values().map(|&a| self.d(1, a).min(a as f64)).sum();
        let mut p: HashMap<String, f64> = self
            .words
            .iter()
            .map(|w| {
                let a = level.get(&vec![w.clone()]).copied().unwrap_or(0);
                let explicit = (a as f64 - self.d(1, a)).max(0.0) / total;
                (w.clone(), explicit + mass / total / self.words.len() as f64)
            })
            .collect();
        let unk = p["<unk>"];
        if unk < 1e-7 {
            for (w, x) in p.iter_mut() {
                *x = if w == "<unk>" { 1e-7 } else { *x * (1.0 - 1e-7) / (1.0 - unk) };
            }
        }
        p
    }

    /// P(word | history); only the last `order - 1` history words matter.
    pub fn prob(&self, history: &[String], word: &str) -> f64 {
        let start = history.len().saturating_sub(self.order - 1);
        self.prob_k(&history[start..], word)
    }

    fn prob_k(&self, h: &[String], word: &str) -> f64 {
        let word = if self.words.iter().any(|w| w == word) { word } else { "<unk>" };
        if h.is_empty() {
            return self.unigram[word];
        }
        let k = h.len() + 1;
        let lower = self.prob_k(&h[1..], word);
        let mut total = 0.0;
        let mut mass = 0.0;
        let mut mine = 0;
        for (g, &a) in &self.adjusted[k - 1] {
            if g[..k - 1] == *h {
                total += a as f64;
                mass += self.d(k, a).min(a as f64);
                if g[k - 1] == word {
                    mine = a;
                }
            }
        }
        if total == 0.0 {
            return lower;
        }
        (mine as f64 - self.d(k, mine)).max(0.0) / total + mass / total * lower
    }
}

pub fn check_oracles() -> Check {
    let mut r = rng(23);
    let pool = ["the", "cat", "dog", "sat", "on", "mat", "a", "ran"];
    let mut compared = 0;
    let mut worst = 0.0f64;
    for trial in 0..30 {
        let nw = r.gen_range(2..=pool.len());
        let lines = random_corpus(&mut r, &pool[..nw], 50, 7);
        let order = 1 + trial % 4;
        let naive = naive_counts(&lines, order);
        let table = table_counts(&lines, order)?;
        if naive != table {
            return Err(format!("counts differ from the naive counter at order {order}"));
        }

        let small: Vec<String> = lines[..20].to_vec();
        let oracle = KnOracle::new(&small, order);
        let vocab = Vocab::from_sentences([&small[..]]);
        let model = estimate_kneser_ney(&count_ngrams(&small, &vocab, order).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let mut histories: Vec<Vec<String>> = vec![vec![], vec!["<s>".into()]];
        for line in &small {
            let t = padded(line);
            for end in 1..t.len() {
                histories.push(t[end.saturating_sub(order - 1)..end].to_vec());
            }
        }
        for _ in 0..20 {
            let len = r.gen_range(0..order);
            histories.push((0..len).map(|_| oracle.words().choose(&mut r).unwrap().clone()).collect());
        }
        for h in &histories {
            let ids: Vec<u32> = h.iter().map(|w| vocab.id(w).unwrap()).collect();
            for w in oracle.words() {
                let expected = oracle.prob(h, w);
                let got = model.prob(&ids, vocab.id(w).unwrap());
                let err = (expected - got).abs();
                if err > 1e-6 {
                    return Err(format!("P({w} | {h:?}) = {got}, oracle {expected}, order {order}"));
                }
                worst = worst.max(err);
                compared += 1;
            }
        }

        let first = arpa_string(&model);
        let second = arpa_string(&parse_arpa(&first, "round trip").map_err(|e| e.to_string())?);
        let third = arpa_string(&parse_arpa(&second, "round trip").map_err(|e| e.to_string())?);
        if second != third {
            return Err(format!("ARPA not byte-stable on second write at order {order}"));
        }
    }
    Ok(format!("30 corpora, {compared} probabilities, worst difference {worst:.1e}"))
}

// ----------------------------------------------------------------------- EM

pub fn check_em() -> Check {
    let mut r = rng(31);
    let pool = ["a", "b", "c", "d", "e", "f", "g", "h"];
    for trial in 0..100 {
        let k = r.gen_range(2..=4);
        let all = random_corpus(&mut r, &pool, 60, 6);
        let vocab = Vocab::from_sentences([&all[..]]);
        let mut comps = Vec::new();
        for _ in 0..k {
            let lo = r.gen_range(0..5);
            let hi = r.gen_range(lo + 2..=pool.len());
            let n = r.gen_range(5..40);
            let lines = random_corpus(&mut r, &pool[lo..hi], n, 6);
            comps.push(train_ngram(&lines, &vocab, r.gen_range(1..=3), &[]).map_err(|e| e.to_string())?);
        }
        let dev = random_corpus(&mut r, &pool, 30, 6);
        let em = optimize_weights_em(&comps, &dev, 1e-9, 100).map_err(|e| e.to_string())?;
        for (i, w) in em.log_likelihoods.windows(2).enumerate() {
            if w[1] < w[0] - 1e-12 {
                return Err(format!("mixture {trial}: log-likelihood fell at iteration {}", i + 1));
            }
        }
        let sum: f64 = em.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || em.weights.iter().any(|&w| w < 0.0) {
            return Err(format!("mixture {trial}: weights {:?} off the simplex", em.weights));
        }
        let best_single = comps
            .iter()
            .map(|m| m.perplexity(&dev).unwrap())
            .fold(f64::INFINITY, f64::min);
        let mixed = InterpolatedModel::new(comps, em.weights.clone())
            .map_err(|e| e.to_string())?
            .perplexity(&dev)
            .map_err(|e| e.to_string())?;
        if mixed > best_single + 1e-9 {
            return Err(format!("mixture {trial}: perplexity {mixed} above best component {best_single}"));
        }
    }
    let (lambda, grid) = planted_toy()?;
    if lambda < 0.95 {
        return Err(format!("planted toy recovered lambda_A = {lambda}"));
    }
    if (lambda - grid).abs() > 0.005 {
        return Err(format!("planted toy: EM {lambda}, grid search {grid}"));
    }
    Ok(format!("100 mixtures monotone and dominant; planted lambda_A = {lambda:.4} (grid {grid:.3})"))
}

/// Component A is trained on the dev distribution, component B on disjoint
/// words. Returns EM's λ_A and the grid-search maximizer.
pub fn planted_toy() -> Result<(f64, f64), String> {
    let mut r = rng(41);
    let a_words = ["red", "green", "blue", "tall"];
    let b_words = ["one", "two", "three", "four"];
    let a_train = random_corpus(&mut r, &a_words, 400, 5);
    let b_train = random_corpus(&mut r, &b_words, 400, 5);
    let dev = random_corpus(&mut r, &a_words, 100, 5);
    let vocab = Vocab::from_sentences([&a_train[..], &b_train[..]]);
    let a = train_ngram(&a_train, &vocab, 2, &[]).map_err(|e| e.to_string())?;
    let b = train_ngram(&b_train, &vocab, 2, &[]).map_err(|e| e.to_string())?;
    let comps = vec![a, b];
    let em = optimize_weights_em(&comps, &dev, 1e-9, 1000).map_err(|e| e.to_string())?;
    let events = lmaug::interpolate::event_probs(&comps, &dev);
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=1000 {
        let l = i as f64 / 1000.0;
        let ll: f64 = events.iter().map(|p| (l * p[0] + (1.0 - l) * p[1]).ln()).sum();
        if ll > best.0 {
            best = (ll, l);
        }
    }
    Ok((em.weights[0], best.1))
}

// ------------------------------------------------------------------ filters

pub struct FilterCase {
    pub texts: Vec<String>,
    pub rules: FilterRuleSet,
}

pub fn random_filter_case(r: &mut impl Rng, n: usize) -> FilterCase {
    let lexicon: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
    let strangers: Vec<String> = (0..10).map(|i| format!("x{i}")).collect();
    let mut texts: Vec<String> = Vec::with_capacity(n);
    while texts.len() < n {
        if !texts.is_empty() && r.gen_bool(0.2) {
            // a duplicate, possibly with different spacing
            let s = texts.choose(r).unwrap().clone();
            texts.push(if r.gen_bool(0.5) { format!(" {}  ", s.replace(' ', "  ")) } else { s });
            continue;
        }
        let len = r.gen_range(0..15);
        let words: Vec<&str> = (0..len)
            .map(|_| {
                if r.gen_bool(0.05) {
                    strangers.choose(r).unwrap().as_str()
                } else {
                    lexicon.choose(r).unwrap().as_str()
                }
            })
            .collect();
        texts.push(words.join(" "));
    }
    let pick = |r: &mut dyn rand::RngCore, k: usize| -> BTreeSet<String> {
        (0..k).map(|_| lexicon.choose(r).unwrap().clone()).collect()
    };
    let min_len = r.gen_range(0..4);
    let rules = FilterRuleSet {
        min_len,
        max_len: r.gen_bool(0.8).then(|| r.gen_range(min_len..14)),
        vocab: r.gen_bool(0.8).then(|| lexicon[..r.gen_range(30..40)].iter().cloned().collect()),
        max_oov_per_sentence: r.gen_range(0..3),
        required_keywords: r.gen_bool(0.4).then(|| pick(r, 20)),
        banned_keywords: r.gen_bool(0.4).then(|| pick(r, 3)),
        max_duplicates: r.gen_bool(0.7).then(|| r.gen_range(1..4)),
    };
    FilterCase { texts, rules }
}

/// Every single-threshold relaxation of `rules`.
pub fn relaxations(rules: &FilterRuleSet, extra_words: &[String]) -> Vec<(&'static str, FilterRuleSet)> {
    let mut out = Vec::new();
    let mut push = |name, f: &dyn Fn(&mut FilterRuleSet)| {
        let mut x = rules.clone();
        f(&mut x);
        out.push((name, x));
    };
    push("min_len", &|x| x.min_len = x.min_len.saturating_sub(1));
    push("max_len+1", &|x| x.max_len = x.max_len.map(|m| m + 1));
    push("max_len=none", &|x| x.max_len = None);
    push("vocab+", &|x| {
        if let Some(v) = &mut x.vocab {
            v.extend(extra_words.iter().cloned());
        }
    });
    push("vocab=none", &|x| x.vocab = None);
    push("max_oov+1", &|x| x.max_oov_per_sentence += 1);
    push("required+", &|x| {
        if let Some(k) = &mut x.required_keywords {
            k.extend(extra_words.iter().cloned());
        }
    });
    push("required=none", &|x| x.required_keywords = None);
    push("banned-", &|x| {
        if let Some(k) = &mut x.banned_keywords {
            let first = k.iter().next().cloned();
            if let Some(f) = first {
                k.remove(&f);
            }
        }
    });
    push("banned=none", &|x| x.banned_keywords = None);
    push("max_dup+1", &|x| x.max_duplicates = x.max_duplicates.map(|m| m + 1));
    push("max_dup=none", &|x| x.max_duplicates = None);
    out
}

pub fn check_filter_case(case: &FilterCase) -> Result<(), String> {
    let (kept, report) = filter_texts(&case.texts, &case.rules);
    if kept.windows(2).any(|w| w[0] >= w[1]) || kept.last().is_some_and(|&i| i >= case.texts.len()) {
        return Err("output is not a sub-multiset of the input".into());
    }
    if report.input != report.output + report.total_rejected() || report.output != kept.len() {
        return Err(format!("report does not conserve sentences: {report:?}"));
    }
    let survivors: Vec<&str> = kept.iter().map(|&i| case.texts[i].as_str()).collect();
    let (again, _) = filter_texts(&survivors, &case.rules);
    if again.len() != survivors.len() {
        return Err(format!("not idempotent: {} then {}", survivors.len(), again.len()));
    }
    let base: HashSet<usize> = kept.iter().copied().collect();
    let extra: Vec<String> = (0..5).map(|i| format!("x{i}")).collect();
    for (name, relaxed) in relaxations(&case.rules, &extra) {
        let (more, _) = filter_texts(&case.texts, &relaxed);
        let more: HashSet<usize> = more.into_iter().collect();
        if !base.is_subset(&more) {
            return Err(format!("relaxing {name} dropped sentences"));
        }
    }
    Ok(())
}

pub fn check_filters() -> Check {
    let mut r = rng(53);
    let mut sentences = 0;
    for _ in 0..10 {
        let case = random_filter_case(&mut r, 1000);
        sentences += case.texts.len();
        check_filter_case(&case)?;
    }
    Ok(format!("{sentences} sentences, 10 rule sets, 12 relaxations each"))
}

// ----------------------------------------------------------------- pipeline

pub fn smoke_data(dir: &Path) -> DataPaths {
    write_synthetic_data(
        dir,
        &SynthDataConfig {
            general: 1500,
            train: 200,
            dev: 40,
            test: 40,
            seed: 4,
        },
    )
    .expect("data")
}

/// Tiny corpora, a 4-block toy model and 100 pre-training steps.
pub fn smoke_config(data: &DataPaths, work: &Path) -> PipelineConfig {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/smoke.toml")).unwrap();
    let mut cfg = PipelineConfig::from_toml(&text, Path::new(".")).unwrap();
    cfg.paths = Paths {
        general: data.general.clone(),
        in_domain_train: data.train.clone(),
        in_domain_dev: data.dev.clone(),
        in_domain_test: data.test.clone(),
        work_dir: work.to_path_buf(),
    };
    cfg
}

fn arpa_bytes(p: &Pipeline) -> BTreeMap<String, Vec<u8>> {
    p.arpa_files()
        .into_iter()
        .map(|(k, path)| (k, std::fs::read(path).unwrap()))
        .collect()
}

pub fn check_smoke_pipeline(root: &Path) -> Check {
    let e = |e: lmaug::Error| e.to_string();
    let data = smoke_data(&root.join("data"));

    // interrupted run: stop after fine-tuning, leave a half-written stage
    let first = Pipeline::new(smoke_config(&data, &root.join("a"))).map_err(e)?;
    first.run(Some(Stage::Finetune), false).map_err(e)?;
    let stale = first.stage_dir(Stage::Prefixes).with_extension("tmp");
    std::fs::create_dir_all(&stale).unwrap();
    std::fs::write(stale.join("prefixes.txt"), "garbage\n").unwrap();
    let pretrain_marker = std::fs::metadata(first.stage_dir(Stage::Pretrain).join(".done"))
        .and_then(|m| m.modified())
        .unwrap();
    let resumed = first.run(None, false).map_err(e)?;
    let after = std::fs::metadata(first.stage_dir(Stage::Pretrain).join(".done"))
        .and_then(|m| m.modified())
        .unwrap();
    if after != pretrain_marker {
        return Err("resuming re-ran a completed stage".into());
    }

    let second = Pipeline::new(smoke_config(&data, &root.join("b"))).map_err(e)?;
    let fresh = second.run(None, false).map_err(e)?;

    let a = arpa_bytes(&first);
    let b = arpa_bytes(&second);
    if a.len() < 3 || a != b {
        return Err(format!("ARPA files differ between runs ({} vs {} files)", a.len(), b.len()));
    }
    if !resumed.same_results(&fresh) {
        return Err("resumed and uninterrupted reports differ".into());
    }
    if !fresh.is_finite() || fresh.neural_ppl.len() < 4 || fresh.ngram_ppl.len() < 8 || fresh.filter.is_none() {
        return Err(format!("report incomplete: {fresh:?}"));
    }
    let (interp, base) = (fresh.ngram_ppl["interpolated_dev"], fresh.ngram_ppl["baseline_dev"]);
    if interp > base + 1e-9 {
        return Err(format!("interpolated dev {interp} above baseline dev {base}"));
    }
    let eval = second.eval_report().map_err(e)?;
    if !eval.same_results(&fresh) {
        return Err("eval_report does not reproduce the run".into());
    }
    Ok(format!(
        "{} ARPA files identical; interpolated dev {interp:.3} vs baseline {base:.3}",
        a.len()
    ))
}
