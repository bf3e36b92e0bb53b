//! Fixtures shared by the integration test targets.
#![allow(dead_code)]

use chrono::NaiveDate;
use clvae_core::model::{Clvae, ModelConfig, Tensor};
use clvae_core::synthdata::{regular_dates, FloodPolygon, SceneSpec};
use clvae_core::training::{loss_and_gradient, LossBreakdown, LossWeights, TrainSchedule};
use clvae_core::{LatentDistribution, PatchEncoder, Result};
use ndarray::{ArrayView5, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn reduced_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 4,
        bottleneck_units: 4,
        convlstm_filters: 4,
        residual_channels: vec![4, 8],
        extra_residual_blocks: 1,
        patch_size: 8,
        timesteps: 2,
        decoder_channels: 4,
    }
}

/// Small enough to train on one core in a few minutes.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 128,
        bottleneck_units: 8,
        convlstm_filters: 8,
        residual_channels: vec![16, 32],
        extra_residual_blocks: 1,
        patch_size: 16,
        timesteps: 4,
        decoder_channels: 16,
    }
}

pub fn desk_schedule() -> TrainSchedule {
    TrainSchedule {
        max_epochs: 10,
        batch_size: 32,
        pairs_per_epoch: 1024,
        ..Default::default()
    }
}

/// 128x128 scene, six dates 12 days apart, a 64x64 flood on the last one.
pub fn desk_scene() -> SceneSpec {
    let dates = regular_dates(NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(), 6, 12);
    SceneSpec {
        height: 128,
        width: 128,
        flood_polygons: vec![FloodPolygon::rect(32, 40, 96, 104, dates[5])],
        dates,
        seed: 7,
        ..Default::default()
    }
}

/// Mean of each channel over the patch as `mean`, zero log-variance.
/// Cheap, and every patch is encoded on its own.
pub struct MeanEncoder {
    pub p: usize,
    pub t: usize,
}

impl PatchEncoder for MeanEncoder {
    fn patch_size(&self) -> usize {
        self.p
    }

    fn timesteps(&self) -> usize {
        self.t
    }

    fn encode(&self, patches: ArrayView5<f64>) -> Result<Vec<LatentDistribution>> {
        patches
            .outer_iter()
            .map(|patch| {
                let flat = patch.to_shape((patch.len() / 3, 3)).unwrap();
                let mean = flat.mean_axis(Axis(0)).unwrap().to_vec();
                // an offset keeps the vector away from zero for cosine
                let mean = mean.iter().map(|m| m + 0.1).collect();
                LatentDistribution::new(mean, vec![0.0; 3])
            })
            .collect()
    }
}

pub struct GradientTermReport {
    pub term: &'static str,
    pub loss: f64,
    /// Largest `|analytic - numeric| / tolerance`.
    pub worst_ratio: f64,
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    /// Largest plain relative error over parameters whose gradient is not
    /// roundoff-level.
    pub max_relative_error: f64,
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_RTOL: f64 = 1e-3;

/// Absolute tolerance from central-difference roundoff, a few ulps of the
/// loss over `2 * FD_STEP`. Parameters whose true gradient is zero (biases
/// feeding batch norm) are judged against this.
pub fn fd_atol(loss: f64) -> f64 {
    100.0 * f64::EPSILON * loss.abs().max(1.0) / FD_STEP
}

/// Compares analytic and central-difference gradients of the KL,
/// reconstruction and contrastive terms for every trainable parameter of the
/// reduced model.
pub fn gradient_check() -> Vec<GradientTermReport> {
    let model = Clvae::new(reduced_config(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shape = [2, 3, 2, 8, 8];
    let mut batch = || Tensor {
        data: (0..shape.iter().product::<usize>()).map(|_| rng.random::<f64>()).collect(),
        shape,
    };
    let (p1, p2) = (batch(), batch());
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let n1: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
    let n2: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
    let terms = |m: &Clvae| -> LossBreakdown {
        loss_and_gradient(m, &p1, &p2, [&n1, &n2], &LossWeights::default())
            .unwrap()
            .loss
    };
    let single = |alpha: f64, beta: f64| LossWeights { alpha, beta, margin: 1.0 };
    let analytic: Vec<Vec<f64>> = [single(1.0, 0.0), single(0.0, 1.0), single(0.0, 0.0)]
        .iter()
        .map(|w| loss_and_gradient(&model, &p1, &p2, [&n1, &n2], w).unwrap().grads)
        .collect();
    let base = terms(&model);
    assert!(base.contrastive > 0.0, "contrastive hinge must be active");
    let losses = [base.kl, base.recon, base.contrastive];
    let atols = losses.map(fd_atol);
    let mut worst = [(0.0f64, 0usize, 0.0f64, 0.0f64); 3];
    let mut max_rel = [0.0f64; 3];
    let mut m = model.clone();
    for i in 0..m.parameter_count() {
        let orig = m.params().values[i];
        m.params_mut().values[i] = orig + FD_STEP;
        let plus = terms(&m);
        m.params_mut().values[i] = orig - FD_STEP;
        let minus = terms(&m);
        m.params_mut().values[i] = orig;
        let numeric = [
            (plus.kl - minus.kl) / (2.0 * FD_STEP),
            (plus.recon - minus.recon) / (2.0 * FD_STEP),
            (plus.contrastive - minus.contrastive) / (2.0 * FD_STEP),
        ];
        for t in 0..3 {
            let a = analytic[t][i];
            let scale = a.abs().max(numeric[t].abs());
            let ratio = (a - numeric[t]).abs() / (FD_RTOL * scale + atols[t]);
            if ratio > worst[t].0 {
                worst[t] = (ratio, i, a, numeric[t]);
            }
            if scale > 1e3 * atols[t] {
                max_rel[t] = max_rel[t].max((a - numeric[t]).abs() / scale);
            }
        }
    }
    let name_of = |i: usize| {
        m.params()
            .entries
            .iter()
            .filter(|e| e.trainable && e.offset <= i)
            .last()
            .map(|e| e.name.clone())
            .unwrap_or_default()
    };
    ["kl", "recon", "contrastive"]
        .into_iter()
        .enumerate()
        .map(|(t, term)| GradientTermReport {
            term,
            loss: losses[t],
            worst_ratio: worst[t].0,
            worst_param: name_of(worst[t].1),
            analytic: worst[t].2,
            numeric: worst[t].3,
            max_relative_error: max_rel[t],
        })
        .collect()
}
