use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::losses::{LossVariant, Reduction};

/// Architecture and supervision settings of the reranking transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature-grid side; each image contributes `s²` tokens.
    pub s: usize,
    /// Token width.
    pub m: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_width: usize,
    /// Frequencies per coordinate of the positional encoding.
    pub num_freqs: usize,
    pub epe_enabled: bool,
    /// Weight of the attention loss relative to the match BCE.
    pub lambda_epi: f64,
    pub loss_variant: LossVariant,
    #[serde(default)]
    pub reduction: Reduction,
    pub seed: u64,
    /// Fixed init std for all weights; `None` scales matrices by fan-in.
    #[serde(default)]
    pub init_std: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

impl ModelConfig {
    /// Small default used by the synthetic benchmark and tests.
    pub fn desk_scale() -> Self {
        Self {
            s: 7,
            m: 32,
            heads: 4,
            layers: 2,
            mlp_width: 64,
            num_freqs: 4,
            epe_enabled: false,
            lambda_epi: 1.0,
            loss_variant: LossVariant::None,
            reduction: Reduction::Mean,
            seed: 0,
            init_std: None,
        }
    }

    /// The reranking transformer's original width and depth.
    pub fn full_scale() -> Self {
        Self { m: 128, heads: 4, layers: 6, mlp_width: 512, num_freqs: 8, ..Self::desk_scale() }
    }

    pub fn head_dim(&self) -> usize {
        self.m / self.heads
    }

    /// `2·s² + 2` tokens: CLS, image-1 cells, SEP, image-2 cells.
    pub fn seq_len(&self) -> usize {
        2 * self.s * self.s + 2
    }

    /// Whether an attention loss contributes to training.
    pub fn attention_supervised(&self) -> bool {
        self.loss_variant != LossVariant::None && self.lambda_epi != 0.0
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.s == 0 {
            return bad("s must be at least 1".into());
        }
        if self.heads == 0 || self.m == 0 || self.m % self.heads != 0 {
            return bad(format!("m = {} must be a positive multiple of heads = {}", self.m, self.heads));
        }
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.mlp_width == 0 {
            return bad("mlp_width must be positive".into());
        }
        if 4 * self.num_freqs > self.m {
            return bad(format!("positional encoding needs 4·{} dims, token width is {}", self.num_freqs, self.m));
        }
        if self.epe_enabled && 6 * self.num_freqs > self.m {
            return bad(format!("epipolar encoding needs 6·{} dims, token width is {}", self.num_freqs, self.m));
        }
        if let Some(s) = self.init_std {
            if !(s > 0.0 && s.is_finite()) {
                return bad("init_std must be positive".into());
            }
        }
        if !(self.lambda_epi >= 0.0 && self.lambda_epi.is_finite()) {
            return bad("lambda_epi must be finite and non-negative".into());
        }
        Ok(())
    }
}
