//! Training loop with validation-based early stopping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{backward, forward, AdamWConfig, AdamWState, EncoderParams, Layer};
use crate::data::{text_features, Dataset, ImageRecord, SplitSpec};
use crate::error::{Error, Result};
use crate::loss::{objective, BatchEmbeddings, LossConfig, LossMode};
use crate::numerics::DenseMatrix;
use crate::retrieval::evaluate;
use crate::sampler::{build_eval_split, epoch_batches, feature_noise, EvalSplit, TrainBatch};
use crate::taxonomy::{relevance_matrix, HierLevel, ScoreConfig};

fn default_text_dim() -> usize {
    256
}

fn default_text_seed() -> u64 {
    17
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub lambda: f64,
    /// Patents per batch.
    pub k: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
    pub scores: ScoreConfig,
    pub use_text: bool,
    pub symmetric: bool,
    pub embed_dim: usize,
    /// Width of the tanh hidden layer; `None` for a single affine map.
    pub hidden: Option<usize>,
    /// Standard deviation of feature-space noise; `0` disables it.
    pub noise_sigma: f64,
    pub noise_p: f64,
    #[serde(default = "default_text_dim")]
    pub text_dim: usize,
    #[serde(default = "default_text_seed")]
    pub text_seed: u64,
    pub queries_per_patent: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 0.01,
            tau: 0.1,
            lambda: 0.2,
            k: 64,
            max_epochs: 20,
            patience: 3,
            seed: 0,
            loss_mode: LossMode::Hmcl,
            scores: ScoreConfig::default(),
            use_text: false,
            symmetric: false,
            embed_dim: 16,
            hidden: None,
            noise_sigma: 0.1,
            noise_p: 0.2,
            text_dim: default_text_dim(),
            text_seed: default_text_seed(),
            queries_per_patent: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be >= 0".into()));
        }
        self.loss_config().validate()?;
        self.scores.validate()?;
        if self.k < 2 {
            return Err(Error::InvalidConfig(format!("k must be >= 2, got {}", self.k)));
        }
        if self.patience < 1 {
            return Err(Error::InvalidConfig("patience must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.hidden == Some(0) || self.text_dim == 0 {
            return Err(Error::InvalidConfig("dimensions must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_p) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_p must be in [0,1] and noise_sigma >= 0".into()));
        }
        if self.queries_per_patent == 0 {
            return Err(Error::InvalidConfig("queries_per_patent must be >= 1".into()));
        }
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            tau: self.tau,
            lambda: self.lambda,
            symmetric: self.symmetric,
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Frozen text tower: hashed caption features followed by a fixed Gaussian
/// projection into the embedding space.
#[derive(Debug, Clone)]
pub struct TextProjector {
    projection: DenseMatrix,
    text_seed: u64,
}

impl TextProjector {
    pub fn new(text_dim: usize, embed_dim: usize, text_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(text_seed ^ 0x5eed_7e47);
        let scale = 1.0 / (text_dim as f64).sqrt();
        let values = (0..text_dim * embed_dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            projection: DenseMatrix::from_vec(text_dim, embed_dim, values).expect("finite"),
            text_seed,
        }
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let f = text_features(text, self.projection.rows(), self.text_seed)?;
        let mut out = vec![0.0; self.projection.cols()];
        for (i, fi) in f.iter().enumerate() {
            if *fi == 0.0 {
                continue;
            }
            for (o, w) in self.projection.row(i).iter().enumerate() {
                out[o] += fi * w;
            }
        }
        Ok(out)
    }

    pub fn embed_records(&self, records: &[ImageRecord]) -> Result<DenseMatrix> {
        let rows = records
            .iter()
            .map(|r| {
                let text = r.text.as_deref().ok_or_else(|| {
                    Error::InvalidConfig(format!("record {} has no text but use_text is set", r.image_id))
                })?;
                self.embed(text)
            })
            .collect::<Result<Vec<_>>>()?;
        DenseMatrix::from_rows(&rows)
    }
}

/// Randomly initialized encoder for `d_in` inputs, seeded by `cfg.seed`.
pub fn init_params(d_in: usize, cfg: &TrainConfig) -> EncoderParams {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    init_with(d_in, cfg, &mut rng)
}

fn init_with<R: Rng + ?Sized>(d_in: usize, cfg: &TrainConfig, rng: &mut R) -> EncoderParams {
    let layers = match cfg.hidden {
        None => vec![Layer::random(d_in, cfg.embed_dim, rng)],
        Some(h) => vec![Layer::random(d_in, h, rng), Layer::random(h, cfg.embed_dim, rng)],
    };
    EncoderParams::new(layers).expect("consistent layer shapes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalTarget {
    Val,
    Test,
}

/// Query/database split for the validation or test patents. The RNG is
/// derived from the split seed so training and later evaluation see the
/// same partition.
pub fn eval_split_for(
    ds: &Dataset,
    split: &SplitSpec,
    target: EvalTarget,
    queries_per_patent: usize,
) -> Result<EvalSplit> {
    let (patents, salt) = match target {
        EvalTarget::Val => (&split.val, 0x7a1u64),
        EvalTarget::Test => (&split.test, 0x7e57u64),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(split.seed.wrapping_mul(0x9e37_79b9).wrapping_add(salt));
    build_eval_split(ds, patents, queries_per_patent, &mut rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_map: Option<f64>,
    pub batch_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_map: Option<f64>,
    pub stopped_early: bool,
}

fn stack_features(records: &[ImageRecord]) -> Result<DenseMatrix> {
    let rows: Vec<&[f64]> = records.iter().map(|r| r.features.as_slice()).collect();
    DenseMatrix::from_rows(&rows)
}

fn batch_step(
    params: &EncoderParams,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    text: Option<&TextProjector>,
) -> Result<(f64, EncoderParams)> {
    let xa = stack_features(&batch.anchor_records)?;
    let xp = stack_features(&batch.positive_records)?;
    let za = forward(params, &xa)?;
    let zp = forward(params, &xp)?;
    let y = text.map(|t| t.embed_records(&batch.positive_records)).transpose()?;
    let embeddings = BatchEmbeddings::new(za, zp, y)?;
    let h = match cfg.loss_mode {
        LossMode::Hmcl => relevance_matrix(&batch.labels, &batch.labels, &cfg.scores)?,
        LossMode::Cl => DenseMatrix::identity(batch.k()),
    };
    let out = objective(&embeddings, cfg.loss_mode, &h, &cfg.loss_config())?;
    if !out.value.is_finite() {
        return Err(Error::NonFinite(format!("batch loss {}", out.value)));
    }
    let mut grads = backward(params, &xa, &out.grad_anchors)?.params;
    let gp = backward(params, &xp, &out.grad_positives)?.params;
    for (acc, g) in grads.tensors_mut().into_iter().zip(gp.tensors()) {
        for (a, b) in acc.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok((out.value, grads))
}

/// Trains an encoder on `split.train` and returns the parameters of the
/// epoch with the best validation patent-level mAP.
///
/// Without validation queries the last epoch's parameters are returned.
pub fn train(ds: &Dataset, split: &SplitSpec, cfg: &TrainConfig) -> Result<(EncoderParams, TrainLog)> {
    cfg.validate()?;
    split.validate_against(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_with(ds.d_in(), cfg, &mut rng);
    let mut opt = AdamWState::new(&params, cfg.adamw());
    let text = (cfg.use_text && cfg.lambda > 0.0)
        .then(|| TextProjector::new(cfg.text_dim, cfg.embed_dim, cfg.text_seed));

    let val = match eval_split_for(ds, split, EvalTarget::Val, cfg.queries_per_patent) {
        Ok(v) if !v.queries.is_empty() => Some(v),
        Ok(_) | Err(_) => {
            log::warn!("no validation queries; early stopping disabled");
            None
        }
    };

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, EncoderParams)> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        let batches = epoch_batches(ds, &split.train, cfg.k, &mut rng)?;
        let mut batch_losses = Vec::with_capacity(batches.len());
        for batch in &batches {
            let batch = if cfg.noise_sigma > 0.0 && cfg.noise_p > 0.0 {
                feature_noise(batch, cfg.noise_sigma, cfg.noise_p, &mut rng)
            } else {
                batch.clone()
            };
            let (loss, grads) = batch_step(&params, &batch, cfg, text.as_ref())?;
            opt.step(&mut params, &grads)?;
            batch_losses.push(loss);
        }
        let mean_loss = batch_losses.iter().sum::<f64>() / batch_losses.len() as f64;
        let val_map = match &val {
            Some(v) => Some(evaluate(&params, v, &[1])?.level(HierLevel::PatentId).map),
            None => None,
        };
        log::info!("epoch {epoch}: loss {mean_loss:.6} val mAP {val_map:?}");
        epochs.push(EpochLog {
            epoch,
            mean_loss,
            val_map,
            batch_losses,
        });

        match val_map {
            Some(m) => {
                if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                    best = Some((m, epoch, params.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= cfg.patience {
                        stopped_early = epoch < cfg.max_epochs;
                        break;
                    }
                }
            }
            None => best = Some((f64::NAN, epoch, params.clone())),
        }
    }

    let (best_val, best_epoch, best_params) = match best {
        Some(b) => b,
        None => (f64::NAN, 0, params),
    };
    Ok((
        best_params,
        TrainLog {
            epochs,
            best_epoch,
            best_val_map: (!best_val.is_nan()).then_some(best_val),
            stopped_early,
        },
    ))
}
