use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::scalar::Scalar;

/// One named tensor inside the flat parameter buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Ordered map from parameter names to ranges of the flat buffer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    slots: Vec<ParamSlot>,
    pub(crate) layers: Vec<LayerSlots>,
    pub(crate) final_gain: usize,
    pub(crate) final_bias: usize,
    pub(crate) cls: usize,
    pub(crate) sep: usize,
    pub(crate) beta1: usize,
    pub(crate) beta2: usize,
    pub(crate) head_w: usize,
    pub(crate) head_b: usize,
    total: usize,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let (m, h) = (config.m, config.mlp_width);
        let mut slots: Vec<ParamSlot> = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            slots.push(ParamSlot { name, shape, range: total..total + len });
            total += len;
            slots.len() - 1
        };
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            layers.push(LayerSlots {
                ln1_gain: push(format!("layer{l}.ln1.gain"), vec![m]),
                ln1_bias: push(format!("layer{l}.ln1.bias"), vec![m]),
                wq: push(format!("layer{l}.attn.wq"), vec![m, m]),
                wk: push(format!("layer{l}.attn.wk"), vec![m, m]),
                wv: push(format!("layer{l}.attn.wv"), vec![m, m]),
                wo: push(format!("layer{l}.attn.wo"), vec![m, m]),
                ln2_gain: push(format!("layer{l}.ln2.gain"), vec![m]),
                ln2_bias: push(format!("layer{l}.ln2.bias"), vec![m]),
                w1: push(format!("layer{l}.mlp.w1"), vec![m, h]),
                b1: push(format!("layer{l}.mlp.b1"), vec![h]),
                w2: push(format!("layer{l}.mlp.w2"), vec![h, m]),
                b2: push(format!("layer{l}.mlp.b2"), vec![m]),
            });
        }
        let final_gain = push("final_ln.gain".into(), vec![m]);
        let final_bias = push("final_ln.bias".into(), vec![m]);
        let cls = push("embed.cls".into(), vec![m]);
        let sep = push("embed.sep".into(), vec![m]);
        let beta1 = push("embed.beta1".into(), vec![m]);
        let beta2 = push("embed.beta2".into(), vec![m]);
        let head_w = push("head.weight".into(), vec![m]);
        let head_b = push("head.bias".into(), vec![1]);
        Self { slots, layers, final_gain, final_bias, cls, sep, beta1, beta2, head_w, head_b, total }
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn find(&self, name: &str) -> Option<&ParamSlot> {
        self.slots.iter().find(|s| s.name == name)
    }
}

/// All learnable weights of the reranker, stored in one flat buffer.
///
/// The same type holds parameter gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct RerankerParams<T> {
    layout: Arc<ParamLayout>,
    data: Vec<T>,
}

impl<T: Scalar> RerankerParams<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        let layout = Arc::new(ParamLayout::new(config));
        let data = vec![T::zero(); layout.total()];
        Self { layout, data }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self { layout: Arc::clone(&other.layout), data: vec![T::zero(); other.data.len()] }
    }

    /// Projection and MLP matrices ~ N(0, 1/fan_in) unless `config.init_std`
    /// fixes one std for every weight; embeddings and the match head
    /// ~ N(0, 0.02²); layer-norm gains 1; biases 0.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let layout = Arc::clone(&p.layout);
        for slot in layout.slots() {
            let name = slot.name.as_str();
            let buf = &mut p.data[slot.range.clone()];
            if name.ends_with(".gain") {
                buf.iter_mut().for_each(|v| *v = T::one());
            } else if name.ends_with(".bias") || name.ends_with(".b1") || name.ends_with(".b2") {
                // zeros
            } else {
                let std = match (config.init_std, slot.shape.as_slice()) {
                    (Some(s), _) => s,
                    (None, &[fan_in, _]) => 1.0 / (fan_in as f64).sqrt(),
                    (None, _) => 0.02,
                };
                let normal = Normal::new(0.0, std).expect("valid std");
                buf.iter_mut().for_each(|v| *v = T::lit(normal.sample(&mut rng)));
            }
        }
        Ok(p)
    }

    /// Rebuilds parameters from a flat buffer laid out for `config`.
    pub fn from_flat(config: &ModelConfig, data: Vec<T>) -> Result<Self, ModelError> {
        let layout = Arc::new(ParamLayout::new(config));
        if data.len() != layout.total() {
            return Err(ModelError::InvalidConfig(format!(
                "parameter buffer has {} values, layout needs {}",
                data.len(),
                layout.total()
            )));
        }
        Ok(Self { layout, data })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn slot(&self, idx: usize) -> &[T] {
        &self.data[self.layout.slots[idx].range.clone()]
    }

    #[inline]
    pub fn slot_mut(&mut self, idx: usize) -> &mut [T] {
        let range = self.layout.slots[idx].range.clone();
        &mut self.data[range]
    }

    pub fn named(&self, name: &str) -> Option<&[T]> {
        self.layout.find(name).map(|s| &self.data[s.range.clone()])
    }

    pub fn named_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let range = self.layout.find(name)?.range.clone();
        Some(&mut self.data[range])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    /// `self += alpha · other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) {
        debug_assert!(self.same_layout(other));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        self.data.iter_mut().for_each(|v| *v = *v * alpha);
    }

    pub fn cast<U: Scalar>(&self) -> RerankerParams<U> {
        RerankerParams { layout: Arc::clone(&self.layout), data: self.data.iter().map(|&v| U::lit(v.as_f64())).collect() }
    }
}
