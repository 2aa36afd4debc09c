//! Incremental inference with cached attention keys and values.
//!
//! A [`DecodeState`] advances a group of hypotheses in lockstep; every
//! hypothesis has consumed the same number of positions, which holds for
//! samples drawn from a shared prefix.

use super::model::{add_bias, gelu, layer_norm};
use super::params::Params;
use super::scalar::{matmul, matmul_nt, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct DecodeState<T> {
    n_hyp: usize,
    len: usize,
    max_len: usize,
    d: usize,
    /// Per block: `[hyp][position][d_model]`.
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

impl<T: Scalar> DecodeState<T> {
    pub fn new(params: &Params<T>) -> Self {
        let cfg = params.config();
        let size = cfg.max_seq_len * cfg.d_model;
        Self {
            n_hyp: 1,
            len: 0,
            max_len: cfg.max_seq_len,
            d: cfg.d_model,
            keys: vec![vec![T::zero(); size]; cfg.n_blocks],
            values: vec![vec![T::zero(); size]; cfg.n_blocks],
        }
    }

    pub fn hypotheses(&self) -> usize {
        self.n_hyp
    }

    /// Positions consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Copies hypothesis 0 into `n` hypotheses.
    pub fn replicate(&mut self, n: usize) {
        let stride = self.max_len * self.d;
        for cache in self.keys.iter_mut().chain(self.values.iter_mut()) {
            cache.truncate(stride);
            let first = cache.clone();
            for _ in 1..n {
                cache.extend_from_slice(&first);
            }
        }
        self.n_hyp = n;
    }

    /// Keeps the hypotheses whose flag is set, preserving order.
    pub fn retain(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.n_hyp);
        let stride = self.max_len * self.d;
        let used = self.len * self.d;
        for cache in self.keys.iter_mut().chain(self.values.iter_mut()) {
            let mut w = 0;
            for (h, &k) in keep.iter().enumerate() {
                if k {
                    if w != h {
                        cache.copy_within(h * stride..h * stride + used, w * stride);
                    }
                    w += 1;
                }
            }
            cache.truncate(w * stride);
        }
        self.n_hyp = keep.iter().filter(|&&k| k).count();
    }

    /// Feeds one token per hypothesis and returns `n_hyp × vocab` logits for
    /// the next position.
    pub fn step(&mut self, params: &Params<T>, tokens: &[u32]) -> Result<Vec<T>> {
        assert_eq!(tokens.len(), self.n_hyp);
        let cfg = params.config();
        let layout = &params.layout;
        if self.len >= self.max_len {
            return Err(Error::SequenceTooLong {
                len: self.len + 1,
                max_seq_len: self.max_len,
            });
        }
        if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                position,
                vocab_size: cfg.vocab_size,
            });
        }
        let (b, d, f, v) = (self.n_hyp, cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let pos = self.len;
        let stride = self.max_len * d;
        let heads = cfg.n_heads;
        let dh = d / heads;
        let scale = T::of(1.0 / (dh as f64).sqrt());

        let tok_emb = params.get(layout.tok_emb);
        let pos_emb = &params.get(layout.pos_emb)[pos * d..(pos + 1) * d];
        let mut x = vec![T::zero(); b * d];
        for (h, &t) in tokens.iter().enumerate() {
            let te = &tok_emb[t as usize * d..(t as usize + 1) * d];
            for c in 0..d {
                x[h * d + c] = te[c] + pos_emb[c];
            }
        }

        let mut h1 = vec![T::zero(); b * d];
        let mut q = vec![T::zero(); b * d];
        let mut kv = vec![T::zero(); b * d];
        let mut att = vec![T::zero(); b * d];
        let mut o = vec![T::zero(); b * d];
        let mut f1 = vec![T::zero(); b * f];
        let mut scores = vec![T::zero(); pos + 1];
        for (blk, slots) in layout.blocks.iter().enumerate() {
            layer_norm(&x, params.get(slots.ln1_g), params.get(slots.ln1_b), d, &mut h1);
            matmul(&h1, params.get(slots.wq), &mut q, b, d, d, false);
            add_bias(&mut q, params.get(slots.bq));
            for (w, bias, cache) in [
                (slots.wk, slots.bk, &mut self.keys[blk]),
                (slots.wv, slots.bv, &mut self.values[blk]),
            ] {
                matmul(&h1, params.get(w), &mut kv, b, d, d, false);
                add_bias(&mut kv, params.get(bias));
                for h in 0..b {
                    cache[h * stride + pos * d..h * stride + (pos + 1) * d].copy_from_slice(&kv[h * d..(h + 1) * d]);
                }
            }

            let keys = &self.keys[blk];
            let values = &self.values[blk];
            for h in 0..b {
                for head in 0..heads {
                    let col = head * dh;
                    let qh = &q[h * d + col..h * d + col + dh];
                    let mut max = T::neg_infinity();
                    for (j, s) in scores.iter_mut().enumerate() {
                        let base = h * stride + j * d + col;
                        *s = qh.iter().zip(&keys[base..base + dh]).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        max = max.max(*s);
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let out = &mut att[h * d + col..h * d + col + dh];
                    out.fill(T::zero());
                    for (j, &s) in scores.iter().enumerate() {
                        let p = s / z;
                        let base = h * stride + j * d + col;
                        for (o, &vv) in out.iter_mut().zip(&values[base..base + dh]) {
                            *o += p * vv;
                        }
                    }
                }
            }

            matmul(&att, params.get(slots.wo), &mut o, b, d, d, false);
            add_bias(&mut o, params.get(slots.bo));
            for (xv, &ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }

            layer_norm(&x, params.get(slots.ln2_g), params.get(slots.ln2_b), d, &mut h1);
            matmul(&h1, params.get(slots.w1), &mut f1, b, d, f, false);
            add_bias(&mut f1, params.get(slots.b1));
            for z in f1.iter_mut() {
                *z = gelu(*z);
            }
            matmul(&f1, params.get(slots.w2), &mut o, b, f, d, false);
            add_bias(&mut o, params.get(slots.b2));
            for (xv, &ov) in x.iter_mut().zip(&o) {
                *xv += ov;
            }
        }

        layer_norm(&x, params.get(layout.lnf_g), params.get(layout.lnf_b), d, &mut h1);
        let mut logits = vec![T::zero(); b * v];
        matmul_nt(&h1, params.get(layout.output_proj()), &mut logits, b, d, v, false);
        self.len += 1;
        Ok(logits)
    }
}
