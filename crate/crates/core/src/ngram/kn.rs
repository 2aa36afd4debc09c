//! Interpolated modified Kneser-Ney estimation.

use std::collections::HashMap;

use super::counts::{CountTable, Gram};
use super::model::{Entry, NGramModel, LOG_ZERO};
use super::vocab::{BOS_ID, UNK_ID};
use crate::error::Result;

/// Minimum unigram probability of `<unk>`.
pub const UNK_FLOOR: f64 = 1e-7;
/// Smallest discount allowed after clamping.
pub const MIN_DISCOUNT: f64 = 0.01;
/// Discount used when count-of-count statistics are degenerate.
pub const FALLBACK_DISCOUNT: f64 = 0.5;

/// Discounts for adjusted counts 1, 2 and 3+, from the count-of-counts
/// `n1..n4` of one order.
pub fn discounts(coc: [u64; 4]) -> [f64; 3] {
    let [n1, n2, n3, n4] = coc.map(|x| x as f64);
    if n1 == 0.0 || n2 == 0.0 {
        return [FALLBACK_DISCOUNT; 3];
    }
    let y = n1 / (n1 + 2.0 * n2);
    let d1 = 1.0 - 2.0 * y * n2 / n1;
    let d2 = 2.0 - 3.0 * y * n3 / n2;
    let d3 = if n3 == 0.0 { d2 } else { 3.0 - 4.0 * y * n4 / n3 };
    [d1.clamp(MIN_DISCOUNT, 1.0), d2.clamp(MIN_DISCOUNT, 2.0), d3.clamp(MIN_DISCOUNT, 3.0)]
}

fn discount_for(d: &[f64; 3], count: u64) -> f64 {
    match count {
        0 => 0.0,
        1 => d[0],
        2 => d[1],
        _ => d[2],
    }
}

#[derive(Default)]
struct ContextStats {
    total: f64,
    /// Σ of the discounts taken from this context's extensions.
    mass: f64,
}

pub fn estimate_kneser_ney(counts: &CountTable) -> Result<NGramModel> {
    let n = counts.order;
    let vocab = counts.vocab.clone();
    let d: Vec<[f64; 3]> = counts.count_of_counts.iter().map(|&c| discounts(c)).collect();
    let mut model = NGramModel {
        order: n,
        vocab,
        levels: vec![HashMap::new(); n],
    };

    // unigrams: discounted adjusted counts plus a uniform share of the mass
    let predictable = (model.vocab.len() - 1) as f64;
    let mut total = 0.0;
    let mut mass = 0.0;
    for g in counts.counts[0].keys() {
        let a = counts.adjusted(g);
        total += a as f64;
        mass += discount_for(&d[0], a).min(a as f64);
    }
    let gamma = mass / total;
    let mut probs = vec![0.0; model.vocab.len()];
    for (id, p) in probs.iter_mut().enumerate().skip(1) {
        let a = counts.adjusted(&[id as u32]);
        *p = (a as f64 - discount_for(&d[0], a)).max(0.0) / total + gamma / predictable;
    }
    let unk = UNK_ID as usize;
    if probs[unk] < UNK_FLOOR {
        let scale = (1.0 - UNK_FLOOR) / (1.0 - probs[unk]);
        for p in probs.iter_mut().skip(1) {
            *p *= scale;
        }
        probs[unk] = UNK_FLOOR;
    }
    for (id, &p) in probs.iter().enumerate() {
        let log_prob = if id as u32 == BOS_ID { LOG_ZERO } else { p.log10() };
        model.levels[0].insert(vec![id as u32], Entry { log_prob, backoff: 0.0 });
    }

    for k in 2..=n {
        let mut stats: HashMap<&[u32], ContextStats> = HashMap::new();
        for g in counts.counts[k - 1].keys() {
            let a = counts.adjusted(g);
            let s = stats.entry(&g[..k - 1]).or_default();
            s.total += a as f64;
            s.mass += discount_for(&d[k - 1], a).min(a as f64);
        }
        let mut level: HashMap<Gram, Entry> = HashMap::with_capacity(counts.counts[k - 1].len());
        for g in counts.counts[k - 1].keys() {
            let a = counts.adjusted(g);
            let s = &stats[&g[..k - 1]];
            let lower = model.prob(&g[1..k - 1], g[k - 1]);
            let p = (a as f64 - discount_for(&d[k - 1], a)).max(0.0) / s.total + s.mass / s.total * lower;
            level.insert(g.clone(), Entry { log_prob: p.log10(), backoff: 0.0 });
        }
        for (ctx, s) in stats {
            let bo = (s.mass / s.total).log10();
            model.levels[k - 2]
                .get_mut(ctx)
                .expect("context of a stored n-gram is stored")
                .backoff = bo;
        }
        model.levels[k - 1] = level;
    }
    Ok(model)
}
