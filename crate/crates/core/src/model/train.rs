use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{grid_mask, point_dropout, GridMaskSpec, PointDropoutSpec};
use crate::error::{Error, Result};
use crate::fusion::{sample_modality_mask, DropoutPolicy, ModalityMask};
use crate::scene::Scene;
use crate::seeding::{derive_seed, rng_for};
use crate::tensor::{adamw_step, AdamState, AdamW, Graph, TensorError};

use super::{forward_graph, loss_graph, GtInstance, LossConfig, ModelConfig, ModelParams, Rasters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub grid_mask: GridMaskSpec,
    /// Chance that a given camera image is masked at a given step.
    pub grid_mask_prob: f64,
    pub point_dropout: PointDropoutSpec,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            grid_mask: GridMaskSpec::default(),
            grid_mask_prob: 0.5,
            point_dropout: PointDropoutSpec::default(),
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid_mask.validate()?;
        self.point_dropout.validate()?;
        if !(0.0..=1.0).contains(&self.grid_mask_prob) {
            return Err(Error::Config(format!("grid mask probability must lie in [0, 1], got {}", self.grid_mask_prob)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed: u64,
    pub optimizer: AdamW,
    /// Learning rate at the last step as a fraction of `optimizer.lr`,
    /// reached by cosine decay.
    pub final_lr_frac: f64,
    pub loss: LossConfig,
}

/// Desk-scale learning rate: one scene per step for a few thousand steps.
pub const DESK_LR: f64 = 3e-3;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            seed: 0,
            optimizer: AdamW {
                lr: DESK_LR,
                ..AdamW::default()
            },
            final_lr_frac: 0.05,
            loss: LossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub scene: u64,
    pub loss: f64,
    pub mask: ModalityMask,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    /// Mean loss of each (possibly partial) epoch.
    pub epoch_loss: Vec<f64>,
    /// Sampled masks in [`ModalityMask::ALL`] order.
    pub mask_counts: [usize; 3],
}

fn augmented_rasters(scene: &Scene, aug: &AugmentConfig, seed: u64, step: usize, cfg: &ModelConfig) -> Result<Rasters> {
    let step_label = step.to_string();
    let mut rng = rng_for(seed, &["augment", &step_label]);
    let mut frames = scene.cameras.clone();
    for (i, img) in frames.images.iter_mut().enumerate() {
        if rng.random_bool(aug.grid_mask_prob) {
            *img = grid_mask(img, &aug.grid_mask, derive_seed(seed, &["grid_mask", &step_label, &i.to_string()]))?;
        }
    }
    let cloud = if scene.lidar.points.is_empty() {
        scene.lidar.clone()
    } else {
        point_dropout(&scene.lidar, &aug.point_dropout, derive_seed(seed, &["point_dropout", &step_label]))?
    };
    Ok(Rasters::new(&frames, &cloud, cfg))
}

impl TrainConfig {
    /// Learning rate used at `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = if self.steps > 1 {
            step as f64 / (self.steps - 1) as f64
        } else {
            0.0
        };
        let f = self.final_lr_frac;
        self.optimizer.lr * (f + (1.0 - f) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr > 0.0 && self.optimizer.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.optimizer.lr)));
        }
        if !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(Error::Config(format!("final lr fraction must lie in [0, 1], got {}", self.final_lr_frac)));
        }
        Ok(())
    }
}

/// Single-threaded AdamW training with per-step modality dropout.
///
/// Scenes are visited in a fresh seeded order each epoch, one scene per
/// step. Everything random derives from `train_cfg.seed`.
pub fn train(
    scenes: &[Scene],
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    policy: &DropoutPolicy,
    augment: &AugmentConfig,
) -> Result<(ModelParams, TrainLog)> {
    if scenes.is_empty() {
        return Err(Error::Invalid("training needs at least one scene".into()));
    }
    train_cfg.validate()?;
    policy.validate()?;
    augment.validate()?;
    let seed = train_cfg.seed;
    let mut params = ModelParams::init(cfg, seed)?;
    let gts: Vec<Vec<GtInstance>> = scenes.iter().map(|s| GtInstance::from_map(&s.map, cfg.points)).collect();
    let clean: Vec<Rasters> = if augment.enabled {
        Vec::new()
    } else {
        scenes.iter().map(|s| Rasters::new(&s.cameras, &s.lidar, cfg)).collect()
    };
    let mut order_rng = rng_for(seed, &["order"]);
    let mut mask_rng = rng_for(seed, &["modality_dropout"]);
    let mut state = AdamState::new();
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..scenes.len()).collect();
    let mut epoch_sum = 0.0;
    let mut epoch_n = 0usize;
    for step in 0..train_cfg.steps {
        let pos = step % scenes.len();
        if pos == 0 {
            if epoch_n > 0 {
                log.epoch_loss.push(epoch_sum / epoch_n as f64);
                epoch_sum = 0.0;
                epoch_n = 0;
            }
            order.shuffle(&mut order_rng);
        }
        let idx = order[pos];
        let owned;
        let rasters = if augment.enabled {
            owned = augmented_rasters(&scenes[idx], augment, seed, step, cfg)?;
            &owned
        } else {
            &clean[idx]
        };
        let mask = sample_modality_mask(policy, &mut mask_rng);
        log.mask_counts[mask.index()] += 1;

        let mut g = Graph::new();
        let vars = params.register(&mut g);
        let (out, _) = forward_graph(&mut g, rasters, mask, &vars, cfg)?;
        let lv = loss_graph(&mut g, &out, &gts[idx], cfg.points, &train_cfg.loss)?;
        let loss = g.value(lv.total).item();
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("loss is {loss} at step {step} (scene {})", scenes[idx].seed)));
        }
        g.backward(lv.total)?;
        let handles = vars.all();
        let grads: Vec<Vec<f64>> = handles
            .iter()
            .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).len()], <[f64]>::to_vec))
            .collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut ps = params.tensors_mut();
        let opt = AdamW {
            lr: train_cfg.lr_at(step),
            ..train_cfg.optimizer
        };
        adamw_step(&mut ps, &grad_refs, &mut state, &opt).map_err(|e| match e {
            TensorError::NonFiniteGradient { .. } => Error::Divergence(format!("{e} at step {step}")),
            other => other.into(),
        })?;
        log.steps.push(StepRecord {
            step,
            epoch: step / scenes.len(),
            scene: scenes[idx].seed,
            loss,
            mask,
        });
        epoch_sum += loss;
        epoch_n += 1;
    }
    if epoch_n > 0 {
        log.epoch_loss.push(epoch_sum / epoch_n as f64);
    }
    if !params.is_finite() {
        return Err(Error::Divergence("parameters became non-finite".into()));
    }
    Ok((params, log))
}
