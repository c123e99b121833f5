//! Per-pair objective, attention-concentration metric, and the two-phase
//! training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tokens::assemble_tokens;
use super::transformer::{backward, forward, CrossAttentionMaps, OutputGradients};
use super::{Adam, AdamSettings, EpeInput, ModelConfig, ModelError, RerankerParams};
use crate::guides::EpipolarGuide;
use crate::linalg::Matrix;
use crate::losses::bce_with_logit;
use crate::scalar::Scalar;

/// One labelled training pair. `guide` is present only for matching pairs
/// with trusted geometry; pairs without it never receive attention loss.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub first: usize,
    pub second: usize,
    pub label: bool,
    pub guide: Option<EpipolarGuide>,
    pub epe: Option<EpeInput>,
}

#[derive(Debug, Clone)]
pub struct TrainingSet<T> {
    pub features: Vec<Matrix<T>>,
    pub pairs: Vec<TrainPair>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub epochs_phase1: usize,
    pub epochs_phase2: usize,
    /// Pairs drawn per epoch after shuffling; `0` uses every pair.
    pub pairs_per_epoch: usize,
    pub batch_size: usize,
    pub optimizer: AdamSettings,
    /// Learning rate for phase 2; defaults to the phase-1 rate.
    pub lr_phase2: Option<f64>,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            epochs_phase1: 4,
            epochs_phase2: 4,
            pairs_per_epoch: 1000,
            batch_size: 16,
            optimizer: AdamSettings::default(),
            lr_phase2: None,
        }
    }
}

/// Loss components of one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLoss<T> {
    pub total: T,
    pub match_bce: T,
    /// Mean-over-heads attention loss, when it was applied.
    pub attention: Option<T>,
}

/// Forward + backward for one pair under `BCE(logit, label) + λ·L_attn`.
///
/// The attention term is evaluated only when `label` is true, a guide is
/// given, and the configuration enables attention supervision.
pub fn pair_loss<T: Scalar>(
    params: &RerankerParams<T>,
    config: &ModelConfig,
    features1: &Matrix<T>,
    features2: &Matrix<T>,
    label: bool,
    guide: Option<&EpipolarGuide>,
    epe: Option<&EpeInput>,
) -> Result<(PairLoss<T>, RerankerParams<T>, CrossAttentionMaps<T>), ModelError> {
    let tokens = assemble_tokens(features1, features2, params, config, epe)?;
    let out = forward(params, &tokens, config)?;
    let y = if label { T::one() } else { T::zero() };
    let (match_bce, dlogit) = bce_with_logit(out.logit, y);
    let mut attention = None;
    let mut cross_grad = None;
    if let (true, true, Some(g)) = (label, config.attention_supervised(), guide) {
        let heads = out.cross.heads();
        let weight = T::lit(config.lambda_epi) / T::from_usize_lossy(heads);
        let mut grads = CrossAttentionMaps::zeros(heads, g.g12().rows());
        let mut sum = T::zero();
        for h in 0..heads {
            let r = config
                .loss_variant
                .evaluate(&out.cross.a12[h], &out.cross.a21[h], g, config.reduction)
                .expect("variant is not None")
                .map_err(|e| ModelError::ShapeMismatch(e.to_string()))?;
            sum = sum + r.value;
            grads.a12[h] = r.grad12.map(|v| v * weight);
            grads.a21[h] = r.grad21.map(|v| v * weight);
        }
        attention = Some(sum / T::from_usize_lossy(heads));
        cross_grad = Some(grads);
    }
    let (grads, _) = backward(params, &out.cache, &OutputGradients { dlogit, cross: cross_grad })?;
    let total = match attention {
        Some(a) => match_bce + T::lit(config.lambda_epi) * a,
        None => match_bce,
    };
    Ok((PairLoss { total, match_bce, attention }, grads, out.cross))
}

/// Match logit of a pair.
pub fn score_pair<T: Scalar>(
    params: &RerankerParams<T>,
    config: &ModelConfig,
    features1: &Matrix<T>,
    features2: &Matrix<T>,
    epe: Option<&EpeInput>,
) -> Result<T, ModelError> {
    let tokens = assemble_tokens(features1, features2, params, config, epe)?;
    Ok(forward(params, &tokens, config)?.logit)
}

/// Softmax cross-attention mass falling on guide cells, against the share of
/// guide cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConcentration {
    /// Mean over heads, directions and nonempty rows of the guide-cell mass.
    pub mass: f64,
    /// Mean over the same rows of `|support| / s²`.
    pub positive_fraction: f64,
}

impl AttentionConcentration {
    pub fn ratio(&self) -> f64 {
        self.mass / self.positive_fraction
    }
}

/// Cross-block softmax uses the forward pass's `1/√(m/heads)` scaling, with
/// each row renormalized over the other image's cells. `None` when every
/// guide row is empty.
pub fn attention_concentration<T: Scalar>(
    cross: &CrossAttentionMaps<T>,
    guide: &EpipolarGuide,
    config: &ModelConfig,
) -> Option<AttentionConcentration> {
    let scale = 1.0 / (config.head_dim() as f64).sqrt();
    let (mut mass, mut frac, mut rows) = (0.0, 0.0, 0usize);
    let pairs = cross.a12.iter().map(|a| (a, guide.g12())).chain(cross.a21.iter().map(|a| (a, guide.g21())));
    for (a, g) in pairs {
        for i in 0..a.rows() {
            let lab = g.row(i);
            let support = lab.iter().filter(|&&v| v == 1).count();
            if support == 0 {
                continue;
            }
            let row = a.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64() * scale));
            let (mut total, mut on) = (0.0, 0.0);
            for (v, &y) in row.iter().zip(lab) {
                let e = (v.as_f64() * scale - max).exp();
                total += e;
                if y == 1 {
                    on += e;
                }
            }
            mass += on / total;
            frac += support as f64 / row.len() as f64;
            rows += 1;
        }
    }
    (rows > 0).then(|| AttentionConcentration { mass: mass / rows as f64, positive_fraction: frac / rows as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: u8,
    pub pairs: usize,
    pub match_bce: f64,
    pub attn_loss: Option<f64>,
    pub attn_concentration: Option<f64>,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Two-phase training: phase 1 uses the match loss only, phase 2 adds the
/// configured attention loss. Single-threaded and deterministic in
/// `config.seed`.
pub fn train<T: Scalar>(
    data: &TrainingSet<T>,
    config: &ModelConfig,
    schedule: &Schedule,
) -> Result<(RerankerParams<T>, Vec<EpochLog>), ModelError> {
    config.validate()?;
    if schedule.batch_size == 0 {
        return Err(ModelError::InvalidConfig("batch_size must be positive".into()));
    }
    for p in &data.pairs {
        if p.first >= data.features.len() || p.second >= data.features.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "pair ({}, {}) indexes past {} feature grids",
                p.first,
                p.second,
                data.features.len()
            )));
        }
    }
    let mut params = RerankerParams::init(config)?;
    let mut adam = Adam::new(&params);
    let mut logs = Vec::new();
    let total_epochs = schedule.epochs_phase1 + schedule.epochs_phase2;
    let mut order: Vec<usize> = (0..data.pairs.len()).collect();
    for epoch in 0..total_epochs {
        let phase = if epoch < schedule.epochs_phase1 { 1 } else { 2 };
        let mut settings = schedule.optimizer;
        if phase == 2 {
            settings.lr = schedule.lr_phase2.unwrap_or(settings.lr);
        }
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(config.seed, epoch));
        let take = match schedule.pairs_per_epoch {
            0 => order.len(),
            n => n.min(order.len()),
        };
        let (mut bce_sum, mut attn_sum, mut attn_n) = (0.0, 0.0, 0usize);
        let (mut conc_sum, mut conc_n) = (0.0, 0usize);
        for (step, batch) in order[..take].chunks(schedule.batch_size).enumerate() {
            let mut acc = RerankerParams::zeros_like(&params);
            for &idx in batch {
                let pair = &data.pairs[idx];
                let guide = if phase == 2 { pair.guide.as_ref() } else { None };
                let (loss, grads, cross) = pair_loss(
                    &params,
                    config,
                    &data.features[pair.first],
                    &data.features[pair.second],
                    pair.label,
                    guide,
                    pair.epe.as_ref(),
                )
                .map_err(|e| match e {
                    ModelError::NonFiniteActivation(ctx) => {
                        ModelError::NonFiniteActivation(format!("epoch {epoch} step {step}: {ctx}"))
                    }
                    other => other,
                })?;
                bce_sum += loss.match_bce.as_f64();
                if let Some(a) = loss.attention {
                    attn_sum += a.as_f64();
                    attn_n += 1;
                }
                if let (true, Some(g)) = (pair.label, pair.guide.as_ref()) {
                    if let Some(c) = attention_concentration(&cross, g, config) {
                        conc_sum += c.ratio();
                        conc_n += 1;
                    }
                }
                acc.axpy(T::one(), &grads);
            }
            acc.scale(T::one() / T::from_usize_lossy(batch.len()));
            if !acc.is_finite() {
                return Err(ModelError::NonFiniteActivation(format!("epoch {epoch} step {step}: gradients")));
            }
            adam.step(&mut params, &acc, &settings);
        }
        logs.push(EpochLog {
            epoch,
            phase,
            pairs: take,
            match_bce: if take > 0 { bce_sum / take as f64 } else { 0.0 },
            attn_loss: (attn_n > 0).then(|| attn_sum / attn_n as f64),
            attn_concentration: (conc_n > 0).then(|| conc_sum / conc_n as f64),
        });
    }
    Ok((params, logs))
}
