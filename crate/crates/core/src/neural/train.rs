//! Adam training loop, fine-tuning, and word-level perplexity.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{AdamState, NeuralLmCheckpoint};
use super::config::TransformerConfig;
use super::model::{self, Dropout};
use super::params::Params;
use super::scalar::Scalar;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::rng::mix;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Linear,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub learning_rate: f64,
    /// Defaults to 1% of `total_steps`.
    pub warmup_steps: Option<u64>,
    /// Absolute step count; training resumes from the checkpoint's step.
    pub total_steps: u64,
    pub batch_size: usize,
    pub decay: Decay,
    pub clip_norm: f64,
    pub seed: u64,
    /// Dev evaluation interval in steps; 0 disables evaluation.
    pub eval_every: u64,
    /// Evaluations without improvement before stopping; 0 never stops early.
    pub patience: usize,
    /// Stop once this absolute step is reached without finishing the schedule.
    pub pause_at: Option<u64>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            warmup_steps: None,
            total_steps: 1000,
            batch_size: 32,
            decay: Decay::Linear,
            clip_norm: 1.0,
            seed: 0,
            eval_every: 100,
            patience: 3,
            pause_at: None,
        }
    }
}

impl TrainHyper {
    pub fn warmup(&self) -> u64 {
        self.warmup_steps.unwrap_or(self.total_steps / 100)
    }

    /// Learning rate applied by the update at 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let warmup = self.warmup();
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        match self.decay {
            Decay::Constant => self.learning_rate,
            Decay::Linear => {
                let span = self.total_steps.saturating_sub(warmup).max(1) as f64;
                self.learning_rate * self.total_steps.saturating_sub(step) as f64 / span
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The best checkpoint on dev when a dev corpus was given, else the last.
    pub checkpoint: NeuralLmCheckpoint,
    pub log: Vec<LossRecord>,
    /// (step, dev perplexity) for every evaluation.
    pub dev_log: Vec<(u64, f64)>,
    pub best_dev_ppl: Option<f64>,
}

/// Logits for every position of one sequence.
pub fn forward(ckpt: &NeuralLmCheckpoint, tokens: &[u32], train_mode: bool, seed: u64) -> Result<Vec<Vec<f32>>> {
    let dropout = train_mode.then(|| Dropout {
        rate: ckpt.config().dropout_rate,
        seed,
    });
    let out = model::forward(&ckpt.params, &[tokens], dropout)?;
    let v = ckpt.config().vocab_size;
    Ok(out.logits.chunks(v).map(<[f32]>::to_vec).collect())
}

fn check_batch(batch: &[Vec<u32>]) -> Result<Vec<&[u32]>> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    if let Some(s) = batch.iter().find(|s| s.len() < 2) {
        return Err(Error::Config(format!("sequence of length {} has nothing to predict", s.len())));
    }
    Ok(batch.iter().map(Vec::as_slice).collect())
}

/// Mean next-token NLL in nats and the number of predicted tokens.
pub fn nll_loss<T: Scalar>(params: &Params<T>, batch: &[Vec<u32>]) -> Result<(f64, usize)> {
    let seqs = check_batch(batch)?;
    let (total, count) = model::nll_sum(params, &seqs)?;
    Ok((total / count as f64, count))
}

/// Gradient of [`nll_loss`] with dropout disabled.
pub fn backward<T: Scalar>(params: &Params<T>, batch: &[Vec<u32>]) -> Result<Params<T>> {
    let seqs = check_batch(batch)?;
    Ok(model::loss_and_grad(params, &seqs, None)?.2)
}

/// Splits a sequence into windows of at most `max_len` tokens. Each window
/// after the first starts half a window before the previous one ended and
/// scores only the tokens not scored yet.
fn eval_windows(seq: &[u32], max_len: usize) -> Vec<(&[u32], usize)> {
    if seq.len() <= max_len {
        return vec![(seq, 1)];
    }
    let mut out = vec![(&seq[..max_len], 1)];
    let mut end = max_len;
    while end < seq.len() {
        let start = end - max_len / 2;
        let stop = (start + max_len).min(seq.len());
        out.push((&seq[start..stop], end - start));
        end = stop;
    }
    out
}

/// `exp(total NLL / word events)`, where word events are whitespace words
/// plus one sentence end per sentence. Sentences longer than the model's
/// context are scored in overlapping windows.
pub fn neural_perplexity<T: Scalar>(params: &Params<T>, corpus: &Corpus) -> Result<f64> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let max_len = params.config().max_seq_len;
    if max_len < 2 {
        return Err(Error::Config("max_seq_len must be at least 2 to score text".into()));
    }
    let windows: Vec<(&[u32], usize)> = corpus.sentences.iter().flat_map(|s| eval_windows(s, max_len)).collect();
    let mut total = 0.0;
    for chunk in windows.chunks(EVAL_BATCH) {
        let seqs: Vec<&[u32]> = chunk.iter().map(|w| w.0).collect();
        let first: Vec<usize> = chunk.iter().map(|w| w.1).collect();
        total += model::nll_sum_from(params, &seqs, &first)?.0;
    }
    Ok((total / corpus.word_events() as f64).exp())
}

fn clip_gradients(grads: &mut [f32], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            *g *= scale;
        }
    }
    norm
}

fn adam_update(params: &mut [f32], grads: &[f32], state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for i in 0..params.len() {
        let g = f64::from(grads[i]);
        let m = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        let v = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        state.m[i] = m;
        state.v[i] = v;
        let update = lr * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
        params[i] = (f64::from(params[i]) - update) as f32;
    }
}

/// Runs Adam from the checkpoint's step up to `hyper.total_steps`.
///
/// Batches and dropout masks are drawn from per-step seeds, so stopping and
/// resuming from a saved checkpoint reproduces an uninterrupted run.
pub fn train(
    ckpt: &NeuralLmCheckpoint,
    corpus: &Corpus,
    dev: Option<&Corpus>,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let max_len = ckpt.config().max_seq_len;
    let rate = ckpt.config().dropout_rate;
    let usable: Vec<&[u32]> = corpus
        .sentences
        .iter()
        .map(|s| &s[..s.len().min(max_len)])
        .filter(|s| s.len() >= 2)
        .collect();
    if usable.is_empty() {
        return Err(Error::Empty("training corpus"));
    }

    let mut current = ckpt.clone();
    let mut log = Vec::new();
    let mut dev_log = Vec::new();
    let evaluating = dev.is_some() && hyper.eval_every > 0;
    let mut best: Option<(f64, NeuralLmCheckpoint)> = None;
    let mut stale = 0;

    let mut evaluate = |c: &NeuralLmCheckpoint, best: &mut Option<(f64, NeuralLmCheckpoint)>, stale: &mut usize| -> Result<()> {
        let Some(dev) = dev else { return Ok(()) };
        let ppl = neural_perplexity(&c.params, dev)?;
        dev_log.push((c.optimizer.step, ppl));
        if best.as_ref().is_none_or(|(b, _)| ppl < *b) {
            *best = Some((ppl, c.clone()));
            *stale = 0;
        } else {
            *stale += 1;
        }
        Ok(())
    };

    if evaluating {
        evaluate(&current, &mut best, &mut stale)?;
    }
    let mut batch: Vec<&[u32]> = Vec::with_capacity(hyper.batch_size);
    let stop = hyper.pause_at.map_or(hyper.total_steps, |p| p.min(hyper.total_steps));
    while current.optimizer.step < stop {
        let step = current.optimizer.step;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(hyper.seed, step));
        batch.clear();
        batch.extend((0..hyper.batch_size).map(|_| usable[rng.gen_range(0..usable.len())]));
        let dropout = Dropout {
            rate,
            seed: mix(hyper.seed ^ 0xD20F, step),
        };
        let (loss, _, mut grads) = model::loss_and_grad(&current.params, &batch, Some(dropout))?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        clip_gradients(&mut grads.data, hyper.clip_norm);
        let lr = hyper.lr_at(step);
        adam_update(&mut current.params.data, &grads.data, &mut current.optimizer, lr);
        log.push(LossRecord { step, loss, lr });

        let done = current.optimizer.step == hyper.total_steps;
        if evaluating && (current.optimizer.step.is_multiple_of(hyper.eval_every) || done) {
            evaluate(&current, &mut best, &mut stale)?;
            if hyper.patience > 0 && stale >= hyper.patience {
                break;
            }
        }
    }

    let (best_dev_ppl, checkpoint) = match best {
        Some((ppl, c)) => (Some(ppl), c),
        None => (None, current),
    };
    Ok(TrainOutcome {
        checkpoint,
        log,
        dev_log,
        best_dev_ppl,
    })
}

/// Continues training a pre-trained checkpoint on in-domain data. Parameters
/// are copied exactly; the optimizer moments and step count start fresh.
pub fn finetune(
    pretrained: &NeuralLmCheckpoint,
    expected: &TransformerConfig,
    in_domain: &Corpus,
    dev: Option<&Corpus>,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    let mismatch = pretrained.config().architecture_mismatch(expected);
    if !mismatch.is_empty() {
        return Err(Error::ConfigMismatch { fields: mismatch });
    }
    let start = NeuralLmCheckpoint::from_params(pretrained.params.clone(), hyper.seed);
    train(&start, in_domain, dev, hyper)
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut s = String::from("step,loss,lr\n");
    for r in log {
        let _ = writeln!(s, "{},{},{}", r.step, r.loss, r.lr);
    }
    s
}

pub fn write_loss_log(path: &Path, log: &[LossRecord]) -> Result<()> {
    std::fs::write(path, loss_log_csv(log)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::learn_bpe;

    fn tiny_cfg(vocab: usize) -> TransformerConfig {
        TransformerConfig {
            n_blocks: 1,
            n_heads: 2,
            d_model: 16,
            d_ff: 32,
            max_seq_len: 16,
            vocab_size: vocab,
            dropout_rate: 0.0,
            tie_embeddings: true,
        }
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let h = TrainHyper {
            learning_rate: 1.0,
            warmup_steps: Some(4),
            total_steps: 10,
            ..Default::default()
        };
        assert!((h.lr_at(0) - 0.25).abs() < 1e-12);
        assert!((h.lr_at(3) - 1.0).abs() < 1e-12);
        assert!(h.lr_at(5) < h.lr_at(4));
        assert!(h.lr_at(9) > 0.0);
        assert_eq!(TrainHyper { total_steps: 1000, ..h }.warmup(), 4);
        assert_eq!(TrainHyper { warmup_steps: None, total_steps: 1000, ..h }.warmup(), 10);
    }

    #[test]
    fn loss_decreases_on_small_corpus() {
        let lines = ["the cat sat", "the dog ran", "a cat ran", "the dog sat", "a bird sang"];
        let tok = learn_bpe(&lines, 10).unwrap();
        let corpus = Corpus::from_lines(&lines, &tok, "t");
        let ck = NeuralLmCheckpoint::init(&tiny_cfg(tok.vocab_size()), 1).unwrap();
        let (before, _) = nll_loss(&ck.params, &corpus.sentences).unwrap();
        let hyper = TrainHyper {
            learning_rate: 3e-3,
            total_steps: 200,
            batch_size: 5,
            eval_every: 0,
            ..Default::default()
        };
        let out = train(&ck, &corpus, None, &hyper).unwrap();
        let (after, _) = nll_loss(&out.checkpoint.params, &corpus.sentences).unwrap();
        assert!(after < before, "{after} !< {before}");
        assert_eq!(out.log.len(), 200);
        assert_eq!(out.checkpoint.optimizer.step, 200);
    }

    #[test]
    fn zero_steps_is_identity() {
        let lines = ["a b", "b a"];
        let tok = learn_bpe(&lines, 0).unwrap();
        let corpus = Corpus::from_lines(&lines, &tok, "t");
        let ck = NeuralLmCheckpoint::init(&tiny_cfg(tok.vocab_size()), 2).unwrap();
        let hyper = TrainHyper {
            total_steps: 0,
            ..Default::default()
        };
        let out = train(&ck, &corpus, None, &hyper).unwrap();
        assert_eq!(out.checkpoint, ck);
        let ft = finetune(&ck, ck.config(), &corpus, Some(&corpus), &hyper).unwrap();
        assert_eq!(ft.checkpoint.params.data, ck.params.data);
        assert_eq!(ft.checkpoint.optimizer.step, 0);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let lines = ["x y z", "z y x", "y y"];
        let tok = learn_bpe(&lines, 2).unwrap();
        let corpus = Corpus::from_lines(&lines, &tok, "t");
        let mut cfg = tiny_cfg(tok.vocab_size());
        cfg.dropout_rate = 0.1;
        let ck = NeuralLmCheckpoint::init(&cfg, 4).unwrap();
        let full = TrainHyper {
            total_steps: 20,
            batch_size: 3,
            eval_every: 0,
            ..Default::default()
        };
        let straight = train(&ck, &corpus, None, &full).unwrap().checkpoint;
        let half = train(&ck, &corpus, None, &TrainHyper { pause_at: Some(10), ..full.clone() })
            .unwrap()
            .checkpoint;
        let reloaded = NeuralLmCheckpoint::from_bytes(&half.to_bytes(), "mem").unwrap();
        let resumed = train(&reloaded, &corpus, None, &full).unwrap().checkpoint;
        assert_eq!(resumed, straight);
    }

    #[test]
    fn finetune_rejects_mismatched_config() {
        let ck = NeuralLmCheckpoint::init(&tiny_cfg(9), 0).unwrap();
        let tok = learn_bpe(&["ab"], 0).unwrap();
        let corpus = Corpus::from_lines(&["ab"], &tok, "t");
        let want = tiny_cfg(12);
        match finetune(&ck, &want, &corpus, None, &TrainHyper::default()) {
            Err(Error::ConfigMismatch { fields }) => {
                assert_eq!(fields.len(), 1);
                assert!(fields[0].starts_with("vocab_size"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn early_stopping_never_regresses_dev() {
        let lines = ["one two three", "two three four", "three four five"];
        let tok = learn_bpe(&lines, 6).unwrap();
        let corpus = Corpus::from_lines(&lines, &tok, "t");
        let dev = Corpus::from_lines(&["one two four"], &tok, "dev");
        let ck = NeuralLmCheckpoint::init(&tiny_cfg(tok.vocab_size()), 8).unwrap();
        let start_ppl = neural_perplexity(&ck.params, &dev).unwrap();
        let hyper = TrainHyper {
            learning_rate: 1e-2,
            total_steps: 60,
            batch_size: 3,
            eval_every: 10,
            patience: 2,
            ..Default::default()
        };
        let out = finetune(&ck, ck.config(), &corpus, Some(&dev), &hyper).unwrap();
        let end_ppl = neural_perplexity(&out.checkpoint.params, &dev).unwrap();
        assert!(end_ppl <= start_ppl);
        assert_eq!(out.best_dev_ppl, Some(end_ppl));
    }

    #[test]
    fn learns_unigram_frequencies() {
        // sentences "<s> w </s>" with w drawn from a fixed distribution
        let words = ["a", "b", "c", "d"];
        let probs = [0.5, 0.25, 0.15, 0.10];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut lines = Vec::new();
        for _ in 0..2000 {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut pick = words[3];
            for (w, p) in words.iter().zip(probs) {
                acc += p;
                if u < acc {
                    pick = w;
                    break;
                }
            }
            lines.push(pick.to_string());
        }
        let tok = learn_bpe(&lines, 0).unwrap();
        let corpus = Corpus::from_lines(&lines, &tok, "t");
        let mut empirical = [0.0; 4];
        for l in &lines {
            empirical[words.iter().position(|w| w == l).unwrap()] += 1.0 / lines.len() as f64;
        }
        let ck = NeuralLmCheckpoint::init(&tiny_cfg(tok.vocab_size()), 3).unwrap();
        let hyper = TrainHyper {
            learning_rate: 1e-2,
            total_steps: 300,
            batch_size: 32,
            eval_every: 0,
            ..Default::default()
        };
        let trained = train(&ck, &corpus, None, &hyper).unwrap().checkpoint;
        let logits = forward(&trained, &[tok.specials().bos], false, 0).unwrap();
        let row: Vec<f64> = logits[0].iter().map(|&x| f64::from(x)).collect();
        let max = row.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        let tv: f64 = words
            .iter()
            .zip(empirical)
            .map(|(w, e)| ((row[tok.id(w).unwrap() as usize] - max).exp() / z - e).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.05, "total variation {tv}");
    }

    #[test]
    fn nonfinite_loss_aborts_with_step() {
        let tok = learn_bpe(&["ab"], 0).unwrap();
        let corpus = Corpus::from_lines(&["ab", "ba"], &tok, "t");
        let mut ck = NeuralLmCheckpoint::init(&tiny_cfg(tok.vocab_size()), 0).unwrap();
        ck.params.data[0] = f32::NAN;
        ck.params.data.iter_mut().for_each(|x| *x = f32::NAN);
        match train(&ck, &corpus, None, &TrainHyper::default()) {
            Err(Error::NonFiniteLoss { step }) => assert_eq!(step, 0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn windows_cover_every_target_once() {
        let seq: Vec<u32> = (0..23).collect();
        for max_len in 2..30 {
            let mut scored = Vec::new();
            for (w, first) in eval_windows(&seq, max_len) {
                assert!(w.len() <= max_len);
                let offset = w[0] as usize;
                scored.extend((first..w.len()).map(|t| offset + t));
            }
            assert_eq!(scored, (1..23).collect::<Vec<_>>(), "max_len {max_len}");
        }
    }
}
