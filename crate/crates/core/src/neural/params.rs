use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::TransformerConfig;
use super::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// Tensor indices of one decoder block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct BlockSlots {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Placement of every named tensor inside one flat buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub config: TransformerConfig,
    pub tensors: Vec<TensorSpec>,
    pub(crate) tok_emb: usize,
    pub(crate) pos_emb: usize,
    pub(crate) blocks: Vec<BlockSlots>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) lm_head: Option<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(config: &TransformerConfig) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>| {
            let len = shape.iter().product();
            tensors.push(TensorSpec {
                name,
                shape,
                offset,
                len,
            });
            offset += len;
            tensors.len() - 1
        };
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let tok_emb = add("tok_emb".into(), vec![v, d]);
        let pos_emb = add("pos_emb".into(), vec![config.max_seq_len, d]);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for i in 0..config.n_blocks {
            let p = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(BlockSlots {
                ln1_g: add(p("ln1.gain"), vec![d]),
                ln1_b: add(p("ln1.bias"), vec![d]),
                wq: add(p("attn.wq"), vec![d, d]),
                bq: add(p("attn.bq"), vec![d]),
                wk: add(p("attn.wk"), vec![d, d]),
                bk: add(p("attn.bk"), vec![d]),
                wv: add(p("attn.wv"), vec![d, d]),
                bv: add(p("attn.bv"), vec![d]),
                wo: add(p("attn.wo"), vec![d, d]),
                bo: add(p("attn.bo"), vec![d]),
                ln2_g: add(p("ln2.gain"), vec![d]),
                ln2_b: add(p("ln2.bias"), vec![d]),
                w1: add(p("ff.w1"), vec![d, f]),
                b1: add(p("ff.b1"), vec![f]),
                w2: add(p("ff.w2"), vec![f, d]),
                b2: add(p("ff.b2"), vec![d]),
            });
        }
        let lnf_g = add("ln_f.gain".into(), vec![d]);
        let lnf_b = add("ln_f.bias".into(), vec![d]);
        let lm_head = (!config.tie_embeddings).then(|| add("lm_head".into(), vec![v, d]));
        Self {
            config: config.clone(),
            tensors,
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            lm_head,
            total: offset,
        }
    }

    pub fn range(&self, idx: usize) -> Range<usize> {
        let t = &self.tensors[idx];
        t.offset..t.offset + t.len
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.tensors.iter().position(|t| t.name == name)
    }

    /// Tensor holding the output projection (the embedding when tied).
    pub(crate) fn output_proj(&self) -> usize {
        self.lm_head.unwrap_or(self.tok_emb)
    }

    fn is_gain(&self, idx: usize) -> bool {
        self.tensors[idx].name.ends_with(".gain")
    }

    fn is_bias(&self, idx: usize) -> bool {
        self.tensors[idx].shape.len() == 1 && !self.is_gain(idx)
    }
}

/// Named parameter tensors packed into one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub layout: Arc<Layout>,
    pub data: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(config: &TransformerConfig) -> Self {
        let layout = Arc::new(Layout::new(config));
        let data = vec![T::zero(); layout.total];
        Self { layout, data }
    }

    pub fn zeros_like(other: &Params<T>) -> Self {
        Self {
            layout: Arc::clone(&other.layout),
            data: vec![T::zero(); other.data.len()],
        }
    }

    /// Weights ~ N(0, 0.02²), residual output projections scaled by
    /// 1/sqrt(2·n_blocks), biases zero, layer-norm gains one.
    pub fn init(config: &TransformerConfig, seed: u64) -> Self {
        let mut p = Self::zeros(config);
        let layout = Arc::clone(&p.layout);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = 0.02;
        let residual_scale = 1.0 / ((2 * config.n_blocks) as f64).sqrt();
        let residual: Vec<usize> = layout.blocks.iter().flat_map(|b| [b.wo, b.w2]).collect();
        for idx in 0..layout.tensors.len() {
            let range = layout.range(idx);
            if layout.is_gain(idx) {
                p.data[range].fill(T::one());
            } else if layout.is_bias(idx) {
                // already zero
            } else {
                let s = if residual.contains(&idx) { std * residual_scale } else { std };
                let normal = Normal::new(0.0, s).expect("valid std");
                for x in &mut p.data[range] {
                    *x = T::of(normal.sample(&mut rng));
                }
            }
        }
        p
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.layout.config
    }

    pub fn get(&self, idx: usize) -> &[T] {
        &self.data[self.layout.range(idx)]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut [T] {
        let r = self.layout.range(idx);
        &mut self.data[r]
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.find(name).map(|i| self.get(i))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        self.layout.find(name).map(|i| self.get_mut(i))
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            layout: Arc::clone(&self.layout),
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TransformerConfig {
        TransformerConfig {
            n_blocks: 2,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            max_seq_len: 10,
            vocab_size: 11,
            dropout_rate: 0.0,
            tie_embeddings: true,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = Params::<f32>::init(&cfg(), 9);
        let b = Params::<f32>::init(&cfg(), 9);
        assert_eq!(a.data, b.data);
        let c = Params::<f32>::init(&cfg(), 10);
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn init_conventions() {
        let p = Params::<f64>::init(&cfg(), 1);
        for (i, spec) in p.layout.tensors.iter().enumerate() {
            if spec.name.ends_with(".gain") {
                assert!(p.get(i).iter().all(|&x| x == 1.0), "{}", spec.name);
            }
            if spec.shape.len() == 1 && !spec.name.ends_with(".gain") {
                assert!(p.get(i).iter().all(|&x| x == 0.0), "{}", spec.name);
            }
        }
        let emb = &p.layout.tensors[p.layout.find("tok_emb").unwrap()];
        assert_eq!(emb.shape, vec![11, 8]);
        let mean = p.tensor("tok_emb").unwrap().iter().sum::<f64>() / 88.0;
        assert!(mean.abs() < 0.01);
    }

    #[test]
    fn untied_adds_head() {
        let mut c = cfg();
        let tied = Layout::new(&c);
        c.tie_embeddings = false;
        let untied = Layout::new(&c);
        assert_eq!(untied.total, tied.total + 11 * 8);
        assert!(untied.find("lm_head").is_some());
    }
}
