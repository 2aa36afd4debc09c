//! Decoder forward pass and its hand-derived reverse pass.
//!
//! A batch is packed row-wise: the sequences are concatenated into one
//! `N × d_model` activation matrix so every projection is a single matrix
//! product. Attention runs per sequence segment and per head, with a causal
//! mask. Layer norms come before each sub-layer (GPT-2 ordering).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{BlockSlots, Params};
use super::scalar::{matmul, matmul_nt, matmul_tn, Scalar};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Copy)]
pub struct Dropout {
    pub rate: f64,
    pub seed: u64,
}

pub(crate) struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    probs: Vec<T>,
    att: Vec<T>,
    attn_mask: Option<Vec<T>>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    f1: Vec<T>,
    u: Vec<T>,
    ff_mask: Option<Vec<T>>,
}

/// Activations kept for the reverse pass.
pub(crate) struct Cache<T> {
    tokens: Vec<u32>,
    positions: Vec<usize>,
    seg_start: Vec<usize>,
    seg_len: Vec<usize>,
    prob_off: Vec<usize>,
    emb_mask: Option<Vec<T>>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    hf: Vec<T>,
}

impl<T> Cache<T> {
    pub(crate) fn rows(&self) -> usize {
        self.tokens.len()
    }
}

pub(crate) struct Forward<T> {
    /// `rows × vocab_size`
    pub logits: Vec<T>,
    pub cache: Cache<T>,
}

pub(crate) fn check_sequence(tokens: &[u32], vocab_size: usize, max_seq_len: usize) -> Result<()> {
    if tokens.len() > max_seq_len {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max_seq_len,
        });
    }
    if let Some((position, &id)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            position,
            vocab_size,
        });
    }
    Ok(())
}

pub(crate) fn layer_norm<T: Scalar>(x: &[T], gain: &[T], bias: &[T], d: usize, out: &mut [T]) -> LnCache<T> {
    let rows = x.len() / d;
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(LN_EPS)).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[r * d + c] = xh;
            out[r * d + c] = xh * gain[c] + bias[c];
        }
    }
    LnCache { xhat, rstd }
}

/// Adds the input gradient to `dx` and returns (d gain, d bias).
fn layer_norm_backward<T: Scalar>(dy: &[T], cache: &LnCache<T>, gain: &[T], d: usize, dx: &mut [T]) -> (Vec<T>, Vec<T>) {
    let rows = dy.len() / d;
    let mut dgain = vec![T::zero(); d];
    let mut dbias = vec![T::zero(); d];
    let inv_d = T::of(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dgain[c] += dyr[c] * xh[c];
            dbias[c] += dyr[c];
            dxhat[c] = dyr[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] += rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    (dgain, dbias)
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    T::of(0.5) * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::of(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

pub(crate) fn add_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    let d = bias.len();
    for row in x.chunks_exact_mut(d) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums<T: Scalar>(x: &[T], d: usize) -> Vec<T> {
    let mut s = vec![T::zero(); d];
    for row in x.chunks_exact(d) {
        for (acc, &v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (a, &b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

fn dropout_mask<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, rate: f64) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

fn apply_mask<T: Scalar>(x: &mut [T], mask: &Option<Vec<T>>) {
    if let Some(m) = mask {
        for (v, &k) in x.iter_mut().zip(m) {
            *v *= k;
        }
    }
}

/// Causal multi-head attention over one packed batch; fills `probs` and `att`.
#[allow(clippy::too_many_arguments)]
fn attention<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    seg_start: &[usize],
    seg_len: &[usize],
    prob_off: &[usize],
    n_heads: usize,
    d: usize,
    probs: &mut [T],
    att: &mut [T],
) {
    let dh = d / n_heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    for (s, (&start, &len)) in seg_start.iter().zip(seg_len).enumerate() {
        for h in 0..n_heads {
            let col = h * dh;
            let p_base = prob_off[s] + h * len * len;
            for i in 0..len {
                let qi = &q[(start + i) * d + col..(start + i) * d + col + dh];
                let prow = &mut probs[p_base + i * len..p_base + (i + 1) * len];
                let mut max = T::neg_infinity();
                for j in 0..=i {
                    let kj = &k[(start + j) * d + col..(start + j) * d + col + dh];
                    let sc = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    prow[j] = sc;
                    if sc > max {
                        max = sc;
                    }
                }
                let mut z = T::zero();
                for pj in prow.iter_mut().take(i + 1) {
                    *pj = (*pj - max).exp();
                    z += *pj;
                }
                let inv = T::one() / z;
                for pj in prow.iter_mut().take(i + 1) {
                    *pj *= inv;
                }
                let out = &mut att[(start + i) * d + col..(start + i) * d + col + dh];
                out.fill(T::zero());
                for j in 0..=i {
                    let p = prow[j];
                    let vj = &v[(start + j) * d + col..(start + j) * d + col + dh];
                    for (o, &vv) in out.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
}

/// Runs the decoder on a batch. Dropout is active only when `dropout` is set.
pub(crate) fn forward<T: Scalar>(params: &Params<T>, seqs: &[&[u32]], dropout: Option<Dropout>) -> Result<Forward<T>> {
    let cfg = params.config();
    let layout = &params.layout;
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let vocab = cfg.vocab_size;

    let mut tokens = Vec::new();
    let mut positions = Vec::new();
    let mut seg_start = Vec::with_capacity(seqs.len());
    let mut seg_len = Vec::with_capacity(seqs.len());
    let mut prob_off = Vec::with_capacity(seqs.len());
    let mut prob_total = 0;
    for s in seqs {
        check_sequence(s, vocab, cfg.max_seq_len)?;
        seg_start.push(tokens.len());
        seg_len.push(s.len());
        prob_off.push(prob_total);
        prob_total += cfg.n_heads * s.len() * s.len();
        tokens.extend_from_slice(s);
        positions.extend(0..s.len());
    }
    let n = tokens.len();

    let dropout = dropout.filter(|d| d.rate > 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(dropout.map_or(0, |d| d.seed));
    let mut mask = |len: usize| dropout.map(|dr| dropout_mask::<T>(&mut rng, len, dr.rate));

    let tok_emb = params.get(layout.tok_emb);
    let pos_emb = params.get(layout.pos_emb);
    let mut x = vec![T::zero(); n * d];
    for (r, (&t, &p)) in tokens.iter().zip(&positions).enumerate() {
        let te = &tok_emb[t as usize * d..(t as usize + 1) * d];
        let pe = &pos_emb[p * d..(p + 1) * d];
        for c in 0..d {
            x[r * d + c] = te[c] + pe[c];
        }
    }
    let emb_mask = mask(n * d);
    apply_mask(&mut x, &emb_mask);

    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    for slots in &layout.blocks {
        let mut h1 = vec![T::zero(); n * d];
        let ln1 = layer_norm(&x, params.get(slots.ln1_g), params.get(slots.ln1_b), d, &mut h1);

        let mut q = vec![T::zero(); n * d];
        let mut k = vec![T::zero(); n * d];
        let mut v = vec![T::zero(); n * d];
        for (out, w, b) in [(&mut q, slots.wq, slots.bq), (&mut k, slots.wk, slots.bk), (&mut v, slots.wv, slots.bv)] {
            matmul(&h1, params.get(w), out, n, d, d, false);
            add_bias(out, params.get(b));
        }

        let mut probs = vec![T::zero(); prob_total];
        let mut att = vec![T::zero(); n * d];
        attention(&q, &k, &v, &seg_start, &seg_len, &prob_off, cfg.n_heads, d, &mut probs, &mut att);

        let mut o = vec![T::zero(); n * d];
        matmul(&att, params.get(slots.wo), &mut o, n, d, d, false);
        add_bias(&mut o, params.get(slots.bo));
        let attn_mask = mask(n * d);
        apply_mask(&mut o, &attn_mask);
        add_into(&mut x, &o);

        let mut h2 = vec![T::zero(); n * d];
        let ln2 = layer_norm(&x, params.get(slots.ln2_g), params.get(slots.ln2_b), d, &mut h2);
        let mut f1 = vec![T::zero(); n * f];
        matmul(&h2, params.get(slots.w1), &mut f1, n, d, f, false);
        add_bias(&mut f1, params.get(slots.b1));
        let u: Vec<T> = f1.iter().map(|&z| gelu(z)).collect();
        let mut f2 = vec![T::zero(); n * d];
        matmul(&u, params.get(slots.w2), &mut f2, n, f, d, false);
        add_bias(&mut f2, params.get(slots.b2));
        let ff_mask = mask(n * d);
        apply_mask(&mut f2, &ff_mask);
        add_into(&mut x, &f2);

        blocks.push(BlockCache {
            ln1,
            h1,
            q,
            k,
            v,
            probs,
            att,
            attn_mask,
            ln2,
            h2,
            f1,
            u,
            ff_mask,
        });
    }

    let mut hf = vec![T::zero(); n * d];
    let lnf = layer_norm(&x, params.get(layout.lnf_g), params.get(layout.lnf_b), d, &mut hf);
    let mut logits = vec![T::zero(); n * vocab];
    matmul_nt(&hf, params.get(layout.output_proj()), &mut logits, n, d, vocab, false);

    Ok(Forward {
        logits,
        cache: Cache {
            tokens,
            positions,
            seg_start,
            seg_len,
            prob_off,
            emb_mask,
            blocks,
            lnf,
            hf,
        },
    })
}

/// Reverse pass. `dlogits` is the loss gradient w.r.t. the logits.
pub(crate) fn backward<T: Scalar>(params: &Params<T>, cache: &Cache<T>, dlogits: &[T]) -> Params<T> {
    let cfg = params.config();
    let layout = &params.layout;
    let d = cfg.d_model;
    let f = cfg.d_ff;
    let vocab = cfg.vocab_size;
    let n = cache.rows();
    let mut grads = Params::zeros_like(params);

    let proj = layout.output_proj();
    matmul_tn(dlogits, &cache.hf, grads.get_mut(proj), vocab, n, d, true);
    let mut dhf = vec![T::zero(); n * d];
    matmul(dlogits, params.get(proj), &mut dhf, n, vocab, d, false);

    let mut dx = vec![T::zero(); n * d];
    let (dg, db) = layer_norm_backward(&dhf, &cache.lnf, params.get(layout.lnf_g), d, &mut dx);
    add_into(grads.get_mut(layout.lnf_g), &dg);
    add_into(grads.get_mut(layout.lnf_b), &db);

    for (slots, bc) in layout.blocks.iter().zip(&cache.blocks).rev() {
        block_backward(params, &mut grads, slots, bc, cache, &mut dx, n, d, f);
    }

    apply_mask(&mut dx, &cache.emb_mask);
    let (te, pe) = (layout.tok_emb, layout.pos_emb);
    for (r, (&t, &p)) in cache.tokens.iter().zip(&cache.positions).enumerate() {
        let row = &dx[r * d..(r + 1) * d];
        add_into(&mut grads.get_mut(te)[t as usize * d..(t as usize + 1) * d], row);
        add_into(&mut grads.get_mut(pe)[p * d..(p + 1) * d], row);
    }
    grads
}

#[allow(clippy::too_many_arguments)]
fn block_backward<T: Scalar>(
    params: &Params<T>,
    grads: &mut Params<T>,
    slots: &BlockSlots,
    bc: &BlockCache<T>,
    cache: &Cache<T>,
    dx: &mut [T],
    n: usize,
    d: usize,
    f: usize,
) {
    let cfg = params.config();

    // feed-forward sub-layer
    let mut df2 = dx.to_vec();
    apply_mask(&mut df2, &bc.ff_mask);
    matmul_tn(&bc.u, &df2, grads.get_mut(slots.w2), f, n, d, true);
    add_into(grads.get_mut(slots.b2), &column_sums(&df2, d));
    let mut df1 = vec![T::zero(); n * f];
    matmul_nt(&df2, params.get(slots.w2), &mut df1, n, d, f, false);
    for (g, &z) in df1.iter_mut().zip(&bc.f1) {
        *g *= gelu_grad(z);
    }
    matmul_tn(&bc.h2, &df1, grads.get_mut(slots.w1), d, n, f, true);
    add_into(grads.get_mut(slots.b1), &column_sums(&df1, f));
    let mut dh2 = vec![T::zero(); n * d];
    matmul_nt(&df1, params.get(slots.w1), &mut dh2, n, f, d, false);
    let (dg, db) = layer_norm_backward(&dh2, &bc.ln2, params.get(slots.ln2_g), d, dx);
    add_into(grads.get_mut(slots.ln2_g), &dg);
    add_into(grads.get_mut(slots.ln2_b), &db);

    // attention sub-layer
    let mut dout = dx.to_vec();
    apply_mask(&mut dout, &bc.attn_mask);
    matmul_tn(&bc.att, &dout, grads.get_mut(slots.wo), d, n, d, true);
    add_into(grads.get_mut(slots.bo), &column_sums(&dout, d));
    let mut datt = vec![T::zero(); n * d];
    matmul_nt(&dout, params.get(slots.wo), &mut datt, n, d, d, false);

    let mut dq = vec![T::zero(); n * d];
    let mut dk = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut dp = Vec::new();
    for (s, (&start, &len)) in cache.seg_start.iter().zip(&cache.seg_len).enumerate() {
        dp.resize(len, T::zero());
        for h in 0..heads {
            let col = h * dh;
            let p_base = cache.prob_off[s] + h * len * len;
            for i in 0..len {
                let ri = (start + i) * d + col;
                let da_i = &datt[ri..ri + dh];
                let prow = &bc.probs[p_base + i * len..p_base + (i + 1) * len];
                let mut dot = T::zero();
                for j in 0..=i {
                    let rj = (start + j) * d + col;
                    let vj = &bc.v[rj..rj + dh];
                    dp[j] = da_i.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                    dot += prow[j] * dp[j];
                    for c in 0..dh {
                        dv[rj + c] += prow[j] * da_i[c];
                    }
                }
                for j in 0..=i {
                    let ds = prow[j] * (dp[j] - dot) * scale;
                    let rj = (start + j) * d + col;
                    for c in 0..dh {
                        dq[ri + c] += ds * bc.k[rj + c];
                        dk[rj + c] += ds * bc.q[ri + c];
                    }
                }
            }
        }
    }

    let mut dh1 = vec![T::zero(); n * d];
    for (dz, w, b) in [(&dq, slots.wq, slots.bq), (&dk, slots.wk, slots.bk), (&dv, slots.wv, slots.bv)] {
        matmul_tn(&bc.h1, dz, grads.get_mut(w), d, n, d, true);
        add_into(grads.get_mut(b), &column_sums(dz, d));
        matmul_nt(dz, params.get(w), &mut dh1, n, d, d, true);
    }
    let (dg, db) = layer_norm_backward(&dh1, &bc.ln1, params.get(slots.ln1_g), d, dx);
    add_into(grads.get_mut(slots.ln1_g), &dg);
    add_into(grads.get_mut(slots.ln1_b), &db);
}

/// Row-wise log-softmax cross entropy against the next token of each
/// sequence. Returns (summed NLL, predicted count); when `grad_scale` is set
/// the logits are overwritten with `grad_scale * (softmax - onehot)`.
pub(crate) fn next_token_nll<T: Scalar>(
    logits: &mut [T],
    cache: &Cache<T>,
    vocab: usize,
    grad_scale: Option<T>,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut count = 0;
    for (&start, &len) in cache.seg_start.iter().zip(&cache.seg_len) {
        for i in 0..len {
            let r = start + i;
            let row = &mut logits[r * vocab..(r + 1) * vocab];
            if i + 1 == len {
                if grad_scale.is_some() {
                    row.fill(T::zero());
                }
                continue;
            }
            let target = cache.tokens[r + 1] as usize;
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: f64 = row.iter().map(|&v| (v - max).as_f64().exp()).sum();
            let lse = max.as_f64() + z.ln();
            total += lse - row[target].as_f64();
            count += 1;
            if let Some(scale) = grad_scale {
                for v in row.iter_mut() {
                    *v = T::of((v.as_f64() - lse).exp()) * scale;
                }
                row[target] -= scale;
            }
        }
    }
    (total, count)
}

/// Mean next-token loss and its gradient over a batch.
pub(crate) fn loss_and_grad<T: Scalar>(params: &Params<T>, seqs: &[&[u32]], dropout: Option<Dropout>) -> Result<(f64, usize, Params<T>)> {
    let predicted: usize = seqs.iter().map(|s| s.len().saturating_sub(1)).sum();
    if predicted == 0 {
        return Err(Error::Empty("batch"));
    }
    let Forward { mut logits, cache } = forward(params, seqs, dropout)?;
    let vocab = params.config().vocab_size;
    let scale = T::of(1.0 / predicted as f64);
    let (total, count) = next_token_nll(&mut logits, &cache, vocab, Some(scale));
    let grads = backward(params, &cache, &logits);
    Ok((total / count as f64, count, grads))
}

/// Like [`nll_sum`], but sequence `j` only scores targets at positions
/// `>= first_target[j]`.
pub(crate) fn nll_sum_from<T: Scalar>(params: &Params<T>, seqs: &[&[u32]], first_target: &[usize]) -> Result<(f64, usize)> {
    let Forward { logits, cache } = forward(params, seqs, None)?;
    let vocab = params.config().vocab_size;
    let mut total = 0.0;
    let mut count = 0;
    for ((&start, &len), &first) in cache.seg_start.iter().zip(&cache.seg_len).zip(first_target) {
        for t in first.max(1)..len {
            let r = start + t - 1;
            let row = &logits[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: f64 = row.iter().map(|&v| (v - max).as_f64().exp()).sum();
            total += max.as_f64() + z.ln() - row[cache.tokens[r + 1] as usize].as_f64();
            count += 1;
        }
    }
    Ok((total, count))
}

/// Summed next-token NLL (nats) and predicted-token count, dropout off.
pub(crate) fn nll_sum<T: Scalar>(params: &Params<T>, seqs: &[&[u32]]) -> Result<(f64, usize)> {
    let Forward { mut logits, cache } = forward(params, seqs, None)?;
    let vocab = params.config().vocab_size;
    Ok(next_token_nll(&mut logits, &cache, vocab, None))
}
