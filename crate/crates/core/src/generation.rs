//! Prefix-conditioned temperature sampling with length-penalized ranking.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_lines, PrefixCorpus};
use crate::error::{Error, Result};
use crate::neural::{DecodeState, NeuralLmCheckpoint};
use crate::rng::{hash_tokens, mix};
use crate::tokenizer::{BpeModel, SPECIAL_IDS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub samples_per_prefix: usize,
    pub keep_top: usize,
    pub length_penalty: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            samples_per_prefix: 25,
            keep_top: 5,
            length_penalty: 1.0,
            max_new_tokens: 48,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if self.keep_top == 0 || self.keep_top > self.samples_per_prefix {
            return Err(Error::Config(format!(
                "keep_top ({}) must be in 1..=samples_per_prefix ({})",
                self.keep_top, self.samples_per_prefix
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::Config("max_new_tokens must be at least 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::Config("length_penalty must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSentence {
    /// Prefix followed by the generated tokens (no sentence start).
    pub tokens: Vec<u32>,
    pub text: String,
    pub prefix: Vec<u32>,
    /// Length-penalized log-probability of the generated part, in nats.
    pub score: f64,
    /// How many of the prefix's samples produced this exact sequence.
    pub duplicate_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SyntheticCorpus {
    pub sentences: Vec<SyntheticSentence>,
}

impl SyntheticCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.sentences.iter().map(|s| s.text.as_str()).collect()
    }

    pub fn extend(&mut self, other: SyntheticCorpus) {
        self.sentences.extend(other.sentences);
    }

    /// Writes one sentence per line and the `line prefix score duplicate_count`
    /// sidecar.
    pub fn save(&self, text_path: &Path, meta_path: &Path, tokenizer: &BpeModel) -> Result<()> {
        write_lines(text_path, &self.texts())?;
        let mut meta = String::from("line\tprefix\tscore\tduplicate_count\n");
        for (i, s) in self.sentences.iter().enumerate() {
            let prefix = normalize(&tokenizer.decode(&s.prefix)?);
            let _ = writeln!(meta, "{}\t{}\t{}\t{}", i + 1, prefix, s.score, s.duplicate_count);
        }
        std::fs::write(meta_path, meta).map_err(|e| Error::io(meta_path, e))
    }

    /// Reads a saved corpus. Token ids are re-derived from the text, so they
    /// can differ from the sampled segmentation.
    pub fn load(text_path: &Path, meta_path: &Path, tokenizer: &BpeModel) -> Result<Self> {
        // blank lines are kept: an empty generation is still a sentence
        let raw = std::fs::read(text_path).map_err(|e| Error::io(text_path, e))?;
        let texts = crate::corpus::split_utf8_lines(&raw)
            .map_err(|_| Error::parse(text_path.display(), 0, "invalid UTF-8"))?;
        let data = std::fs::read(meta_path).map_err(|e| Error::io(meta_path, e))?;
        let meta = crate::corpus::split_utf8_lines(&data)?;
        let source = meta_path.display().to_string();
        let rows = meta.get(1..).unwrap_or_default();
        if rows.len() != texts.len() {
            return Err(Error::parse(
                &source,
                meta.len(),
                format!("{} metadata rows for {} sentences", rows.len(), texts.len()),
            ));
        }
        let mut sentences = Vec::with_capacity(texts.len());
        for (n, (row, text)) in rows.iter().zip(texts).enumerate() {
            let lineno = n + 2;
            let fields: Vec<&str> = row.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::parse(&source, lineno, format!("expected 4 fields, got {}", fields.len())));
            }
            let score = fields[2]
                .parse::<f64>()
                .map_err(|_| Error::parse(&source, lineno, format!("bad score '{}'", fields[2])))?;
            let duplicate_count = fields[3]
                .parse::<usize>()
                .map_err(|_| Error::parse(&source, lineno, format!("bad duplicate count '{}'", fields[3])))?;
            sentences.push(SyntheticSentence {
                tokens: tokenizer.encode_words(&text),
                prefix: tokenizer.encode_words(fields[1]),
                text,
                score,
                duplicate_count,
            });
        }
        Ok(Self { sentences })
    }
}

fn normalize(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `exp(h/τ) / Σ exp(h/τ)`, computed with the maximum subtracted.
pub fn temperature_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if logits.is_empty() {
        return Err(Error::Empty("logit vector"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|&h| ((h - max) / temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    for x in &mut p {
        *x /= z;
    }
    Ok(p)
}

fn log_softmax_into(logits: &[f32], out: &mut Vec<f64>) {
    out.clear();
    out.extend(logits.iter().map(|&x| f64::from(x)));
    let max = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lz = out.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    for x in out.iter_mut() {
        *x -= lz;
    }
}

fn sample_index(logp: &[f64], temperature: f64, rng: &mut ChaCha8Rng, scratch: &mut Vec<f64>) -> u32 {
    // log-probabilities are already max-shifted up to a constant
    scratch.clear();
    scratch.extend(logp.iter().map(|&l| (l / temperature).exp()));
    let z: f64 = scratch.iter().sum();
    let mut u = rng.gen::<f64>() * z;
    for (i, &w) in scratch.iter().enumerate() {
        u -= w;
        if u < 0.0 {
            return i as u32;
        }
    }
    scratch.iter().rposition(|&w| w > 0.0).unwrap_or(0) as u32
}

struct Hypothesis {
    generated: Vec<u32>,
    logp: f64,
    rng: ChaCha8Rng,
}

/// Draws `samples_per_prefix` continuations of `prefix` and returns the
/// `keep_top` best distinct ones by `log P(continuation) / length^α`.
///
/// Sample `j` uses its own random stream derived from the seed, the prefix
/// and `j`, so results do not depend on which other prefixes are processed
/// and raising `samples_per_prefix` only adds samples.
pub fn sample_continuations(
    ckpt: &NeuralLmCheckpoint,
    tokenizer: &BpeModel,
    prefix: &[u32],
    cfg: &GenerationConfig,
) -> Result<Vec<SyntheticSentence>> {
    cfg.validate()?;
    let params = &ckpt.params;
    let model_cfg = params.config();
    let bos = SPECIAL_IDS.bos;
    let eos = SPECIAL_IDS.eos;
    let prefix = prefix.strip_prefix(&[bos]).unwrap_or(prefix);
    let context_len = prefix.len() + 1;
    if context_len >= model_cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: context_len + 1,
            max_seq_len: model_cfg.max_seq_len,
        });
    }
    let max_gen = cfg.max_new_tokens.min(model_cfg.max_seq_len - context_len);
    let prefix_seed = mix(cfg.seed, hash_tokens(prefix));

    let mut state = DecodeState::new(params);
    let mut logits = state.step(params, &[bos])?;
    for &t in prefix {
        logits = state.step(params, &[t])?;
    }
    let n = cfg.samples_per_prefix;
    let v = model_cfg.vocab_size;
    state.replicate(n);
    logits = logits.repeat(n);

    let mut active: Vec<Hypothesis> = (0..n)
        .map(|j| Hypothesis {
            generated: Vec::new(),
            logp: 0.0,
            rng: ChaCha8Rng::seed_from_u64(mix(prefix_seed, j as u64)),
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut finished: Vec<(usize, Hypothesis)> = Vec::with_capacity(n);
    let mut logp = Vec::with_capacity(v);
    let mut scratch = Vec::with_capacity(v);
    for step in 0..max_gen {
        let mut keep = vec![true; active.len()];
        let mut next = Vec::with_capacity(active.len());
        for (r, h) in active.iter_mut().enumerate() {
            log_softmax_into(&logits[r * v..(r + 1) * v], &mut logp);
            let tok = sample_index(&logp, cfg.temperature, &mut h.rng, &mut scratch);
            h.logp += logp[tok as usize];
            h.generated.push(tok);
            if tok == eos || step + 1 == max_gen {
                keep[r] = false;
            } else {
                next.push(tok);
            }
        }
        let mut kept = Vec::with_capacity(next.len());
        let mut kept_order = Vec::with_capacity(next.len());
        for ((h, j), k) in active.into_iter().zip(order).zip(&keep) {
            if *k {
                kept.push(h);
                kept_order.push(j);
            } else {
                finished.push((j, h));
            }
        }
        active = kept;
        order = kept_order;
        if active.is_empty() {
            break;
        }
        state.retain(&keep);
        logits = state.step(params, &next)?;
    }
    finished.sort_by_key(|(j, _)| *j);

    let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
    let mut distinct: Vec<SyntheticSentence> = Vec::new();
    for (_, h) in finished {
        let mut tokens = prefix.to_vec();
        tokens.extend_from_slice(&h.generated);
        if let Some(&i) = index.get(&tokens) {
            distinct[i].duplicate_count += 1;
            continue;
        }
        let len = h.generated.len() as f64;
        let score = h.logp / len.powf(cfg.length_penalty);
        let text = normalize(&tokenizer.decode(&tokens)?);
        index.insert(tokens.clone(), distinct.len());
        distinct.push(SyntheticSentence {
            tokens,
            text,
            prefix: prefix.to_vec(),
            score,
            duplicate_count: 1,
        });
    }
    // stable: ties keep first-sampled order
    distinct.sort_by(|a, b| b.score.total_cmp(&a.score));
    distinct.truncate(cfg.keep_top);
    Ok(distinct)
}

/// Runs [`sample_continuations`] on every prefix and concatenates the results.
pub fn generate_corpus(
    ckpt: &NeuralLmCheckpoint,
    tokenizer: &BpeModel,
    prefixes: &PrefixCorpus,
    cfg: &GenerationConfig,
) -> Result<SyntheticCorpus> {
    if prefixes.is_empty() {
        return Err(Error::Empty("prefix corpus"));
    }
    let mut out = SyntheticCorpus::default();
    for p in &prefixes.prefixes {
        out.sentences.extend(sample_continuations(ckpt, tokenizer, p, cfg)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::TransformerConfig;
    use crate::tokenizer::learn_bpe;

    fn tokenizer() -> BpeModel {
        // vocab: 5 reserved + a, b
        learn_bpe(&["a b"], 0).unwrap()
    }

    /// A model whose next-token logits are `logits` at every position.
    fn constant_model(logits: &[f32]) -> NeuralLmCheckpoint {
        let v = logits.len();
        let cfg = TransformerConfig {
            n_blocks: 1,
            n_heads: 1,
            d_model: v,
            d_ff: 4,
            max_seq_len: 12,
            vocab_size: v,
            dropout_rate: 0.0,
            tie_embeddings: false,
        };
        let mut ck = NeuralLmCheckpoint::init(&cfg, 0).unwrap();
        ck.params.tensor_mut("ln_f.gain").unwrap().fill(0.0);
        let bias = ck.params.tensor_mut("ln_f.bias").unwrap();
        bias.fill(0.0);
        bias[0] = 1.0;
        let head = ck.params.tensor_mut("lm_head").unwrap();
        head.fill(0.0);
        for (w, &l) in logits.iter().enumerate() {
            head[w * v] = l;
        }
        ck
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(temperature_softmax(&[0.0, 0.0], 0.7).unwrap(), vec![0.5, 0.5]);
        let p = temperature_softmax(&[1.0, 0.0], 0.5).unwrap();
        let e2 = 2f64.exp();
        assert!((p[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.8808).abs() < 1e-4);
        assert!(temperature_softmax(&[1.0], 0.0).is_err());
        assert!(temperature_softmax(&[1.0], -1.0).is_err());
        let big = temperature_softmax(&[1000.0, 999.0], 1.0).unwrap();
        assert!(big.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn tau_one_is_plain_softmax() {
        let h = [0.3, -1.2, 2.5, 0.0];
        let z: f64 = h.iter().map(|x: &f64| x.exp()).sum();
        let p = temperature_softmax(&h, 1.0).unwrap();
        for (pi, hi) in p.iter().zip(h) {
            assert!((pi - hi.exp() / z).abs() < 1e-15);
        }
    }

    #[test]
    fn deterministic_end_collapses() {
        let tok = tokenizer();
        let mut logits = vec![0.0f32; tok.vocab_size()];
        logits[1] = 100.0;
        let ck = constant_model(&logits);
        let cfg = GenerationConfig {
            samples_per_prefix: 25,
            ..Default::default()
        };
        let prefix = tok.encode_words("a");
        let out = sample_continuations(&ck, &tok, &prefix, &cfg).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].duplicate_count, 25);
        assert_eq!(out[0].tokens, [prefix.as_slice(), &[1]].concat());
        assert_eq!(out[0].text, "a");
    }

    #[test]
    fn empirical_frequencies_match_softmax() {
        let tok = tokenizer();
        let v = tok.vocab_size();
        let mut logits = vec![-30.0f32; v];
        let a = tok.id("a").unwrap() as usize;
        let b = tok.id("b").unwrap() as usize;
        logits[a] = 0.7;
        logits[b] = -0.4;
        let ck = constant_model(&logits);
        for tau in [1.0, 1.5] {
            let draws = 10_000;
            let cfg = GenerationConfig {
                temperature: tau,
                samples_per_prefix: draws,
                keep_top: v,
                max_new_tokens: 1,
                seed: 17,
                ..Default::default()
            };
            let out = sample_continuations(&ck, &tok, &[], &cfg).unwrap();
            let p = temperature_softmax(&logits.iter().map(|&x| f64::from(x)).collect::<Vec<_>>(), tau).unwrap();
            let mut counts = vec![0usize; v];
            for s in &out {
                counts[s.tokens[0] as usize] += s.duplicate_count;
            }
            assert_eq!(counts.iter().sum::<usize>(), draws);
            let pa = p[a] / (p[a] + p[b]);
            let expected = pa * draws as f64;
            let sd = (draws as f64 * pa * (1.0 - pa)).sqrt();
            assert!((counts[a] as f64 - expected).abs() < 3.5 * sd, "tau {tau}: {} vs {expected}", counts[a]);
        }
    }

    #[test]
    fn higher_temperature_raises_entropy() {
        let h = [3.0, 1.0, 0.2, -1.0];
        let entropy = |t: f64| -> f64 {
            temperature_softmax(&h, t)
                .unwrap()
                .iter()
                .map(|p| if *p > 0.0 { -p * p.ln() } else { 0.0 })
                .sum()
        };
        assert!(entropy(1.5) > entropy(1.0));
        assert!(entropy(1.0) > entropy(0.5));
    }

    fn random_model(v: usize) -> NeuralLmCheckpoint {
        let cfg = TransformerConfig {
            n_blocks: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 8,
            max_seq_len: 10,
            vocab_size: v,
            dropout_rate: 0.0,
            tie_embeddings: true,
        };
        let mut ck = NeuralLmCheckpoint::init(&cfg, 3).unwrap();
        for x in ck.params.data.iter_mut() {
            *x *= 40.0;
        }
        ck
    }

    #[test]
    fn sentences_begin_with_prefix_and_end_once() {
        let tok = learn_bpe(&["ab ba abb"], 1).unwrap();
        let ck = random_model(tok.vocab_size());
        let cfg = GenerationConfig {
            samples_per_prefix: 30,
            keep_top: 10,
            seed: 5,
            ..Default::default()
        };
        let prefix = tok.encode_words("ab");
        let out = sample_continuations(&ck, &tok, &prefix, &cfg).unwrap();
        assert!(!out.is_empty() && out.len() <= 10);
        for s in &out {
            assert!(s.tokens.starts_with(&prefix));
            let ends = s.tokens.iter().filter(|&&t| t == 1).count();
            assert!(ends <= 1);
            if ends == 1 {
                assert_eq!(*s.tokens.last().unwrap(), 1);
            }
            assert!(s.score.is_finite());
            assert!(s.tokens.len() <= 9);
        }
        assert!(out.windows(2).all(|w| w[0].score >= w[1].score));
    }

    #[test]
    fn prefix_too_long_is_rejected() {
        let tok = tokenizer();
        let ck = random_model(tok.vocab_size());
        let long = vec![5u32; 9];
        assert!(matches!(
            sample_continuations(&ck, &tok, &long, &GenerationConfig::default()),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn corpus_is_order_independent_and_grows() {
        let tok = learn_bpe(&["ab ba abb"], 1).unwrap();
        let ck = random_model(tok.vocab_size());
        let p1 = tok.encode_words("ab");
        let p2 = tok.encode_words("ba");
        let pc = |ps: Vec<Vec<u32>>| PrefixCorpus {
            k: vec![1; ps.len()],
            prefixes: ps,
            k_values: [1].into_iter().collect(),
        };
        let cfg = GenerationConfig {
            samples_per_prefix: 8,
            keep_top: 5,
            ..Default::default()
        };
        let fwd = generate_corpus(&ck, &tok, &pc(vec![p1.clone(), p2.clone()]), &cfg).unwrap();
        let rev = generate_corpus(&ck, &tok, &pc(vec![p2.clone(), p1.clone()]), &cfg).unwrap();
        assert!(fwd.len() <= 10);
        let mut a = fwd.texts();
        let mut b = rev.texts();
        a.sort();
        b.sort();
        assert_eq!(a, b);

        let distinct = |c: &GenerationConfig| {
            let out = generate_corpus(&ck, &tok, &pc(vec![p1.clone()]), c).unwrap();
            out.sentences.iter().map(|s| s.tokens.clone()).collect::<std::collections::HashSet<_>>().len()
        };
        let mut prev = 0;
        for s in [5, 10, 20, 40] {
            let c = GenerationConfig {
                samples_per_prefix: s,
                keep_top: 5,
                ..cfg.clone()
            };
            let d = distinct(&c);
            assert!(d >= prev);
            prev = d;
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let tok = learn_bpe(&["ab ba abb"], 1).unwrap();
        let ck = random_model(tok.vocab_size());
        let prefix = tok.encode_words("ab");
        let cfg = GenerationConfig {
            samples_per_prefix: 10,
            ..Default::default()
        };
        let corpus = SyntheticCorpus {
            sentences: sample_continuations(&ck, &tok, &prefix, &cfg).unwrap(),
        };
        let dir = tempfile::tempdir().unwrap();
        let (t, m) = (dir.path().join("s.txt"), dir.path().join("s.tsv"));
        corpus.save(&t, &m, &tok).unwrap();
        let back = SyntheticCorpus::load(&t, &m, &tok).unwrap();
        assert_eq!(back.texts(), corpus.texts());
        for (x, y) in back.sentences.iter().zip(&corpus.sentences) {
            assert_eq!(x.score, y.score);
            assert_eq!(x.duplicate_count, y.duplicate_count);
        }
    }
}
