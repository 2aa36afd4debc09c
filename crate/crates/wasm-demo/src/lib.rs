//! Browser bindings for three small interactive views: a temperature
//! softmax, BPE segmentation and a two-component n-gram mixture.
//! Every export returns a JSON string.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use lmaug::generation::temperature_softmax;
use lmaug::interpolate::{event_probs, optimize_on_events};
use lmaug::ngram::{train_ngram, Vocab};
use lmaug::tokenizer::learn_bpe;

#[derive(Serialize)]
struct Distribution {
    probs: Vec<f64>,
    entropy_bits: f64,
}

#[derive(Serialize)]
struct Segmentation {
    vocab_size: usize,
    merges: usize,
    /// Token strings per input word.
    words: Vec<Vec<String>>,
}

#[derive(Serialize)]
struct MixtureCurve {
    lambdas: Vec<f64>,
    perplexities: Vec<f64>,
    em_lambda: f64,
    em_perplexity: f64,
    em_log_likelihoods: Vec<f64>,
    ppl_a: f64,
    ppl_b: f64,
}

fn parse_numbers(text: &str) -> Result<Vec<f64>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| format!("not a number: {s}")))
        .collect()
}

fn lines(text: &str) -> Vec<String> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).map(str::to_string).collect()
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

pub fn temperature_json(logits: &str, temperature: f64) -> Result<String, String> {
    let logits = parse_numbers(logits)?;
    let probs = temperature_softmax(&logits, temperature).map_err(|e| e.to_string())?;
    let entropy_bits = -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.log2()).sum::<f64>();
    Ok(to_json(&Distribution { probs, entropy_bits }))
}

pub fn segment_json(training_text: &str, num_merges: usize, text: &str) -> Result<String, String> {
    let corpus = lines(training_text);
    let bpe = learn_bpe(&corpus, num_merges).map_err(|e| e.to_string())?;
    let words = text
        .split_whitespace()
        .map(|w| {
            bpe.encode_words(w)
                .into_iter()
                .map(|id| bpe.token(id).unwrap_or("?").to_string())
                .collect()
        })
        .collect();
    Ok(to_json(&Segmentation {
        vocab_size: bpe.vocab_size(),
        merges: bpe.merges().len(),
        words,
    }))
}

pub fn mixture_json(corpus_a: &str, corpus_b: &str, dev: &str, order: usize) -> Result<String, String> {
    let (a, b, dev) = (lines(corpus_a), lines(corpus_b), lines(dev));
    if a.is_empty() || b.is_empty() || dev.is_empty() {
        return Err("all three text boxes need at least one sentence".into());
    }
    let vocab = Vocab::from_sentences([&a[..], &b[..]]);
    let order = order.clamp(1, 4);
    let ma = train_ngram(&a, &vocab, order, &[]).map_err(|e| e.to_string())?;
    let mb = train_ngram(&b, &vocab, order, &[]).map_err(|e| e.to_string())?;
    let events = event_probs(&[ma, mb], &dev);
    let ppl = |l: f64| {
        let ll: f64 = events.iter().map(|p| (l * p[0] + (1.0 - l) * p[1]).ln()).sum();
        (-ll / events.len() as f64).exp()
    };
    let lambdas: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
    let perplexities = lambdas.iter().map(|&l| ppl(l)).collect();
    let em = optimize_on_events(&events, 1e-9, 200).map_err(|e| e.to_string())?;
    Ok(to_json(&MixtureCurve {
        lambdas,
        perplexities,
        em_lambda: em.weights[0],
        em_perplexity: ppl(em.weights[0]),
        em_log_likelihoods: em.log_likelihoods,
        ppl_a: ppl(1.0),
        ppl_b: ppl(0.0),
    }))
}

#[wasm_bindgen]
pub fn temperature(logits: &str, temperature: f64) -> Result<String, JsValue> {
    temperature_json(logits, temperature).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn segment(training_text: &str, num_merges: usize, text: &str) -> Result<String, JsValue> {
    segment_json(training_text, num_merges, text).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn mixture(corpus_a: &str, corpus_b: &str, dev: &str, order: usize) -> Result<String, JsValue> {
    mixture_json(corpus_a, corpus_b, dev, order).map_err(|e| JsValue::from_str(&e))
}
