//! The contrastive ConvLSTM variational autoencoder.
//!
//! Encoder: ConvLSTM (full sequence) -> downsampling residual blocks ->
//! non-downsampling residual blocks -> global average pool -> bottleneck
//! dense -> mean and log-variance heads. Decoder: dense expansion -> one
//! transposed-convolution stage per downsampling block, each concatenated
//! with the encoder feature map of matching size -> 3-filter output layer.
//!
//! Internally batches are channels-first `[N, C, T, H, W]`; the public API
//! takes and returns `N x T x p x p x 3` patches.

mod checkpoint;
mod conv;
mod dense;
mod lstm;
mod network;
mod norm;
mod params;
mod tensor;

use ndarray::{Array4, ArrayView5};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::INPUT_CHANNELS;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use conv::{col2im, im2col, ConvGeom};
pub use norm::{BN_EPSILON, BN_MOMENTUM};
pub use params::{ParamEntry, ParamStore};
pub use tensor::Tensor;

use network::{DecoderCache, EncoderCache, Network};

/// Trainable parameter count of the reference architecture.
pub const REFERENCE_PARAMETER_COUNT: usize = 576_395;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub bottleneck_units: usize,
    pub convlstm_filters: usize,
    /// Output channels of each downsampling residual block.
    pub residual_channels: Vec<usize>,
    /// Non-downsampling residual blocks after the downsampling ones.
    pub extra_residual_blocks: usize,
    pub patch_size: usize,
    pub timesteps: usize,
    /// Channels of the decoder's reshaped dense expansion.
    pub decoder_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_dim: 128,
            bottleneck_units: 8,
            convlstm_filters: 16,
            residual_channels: vec![32, 64],
            extra_residual_blocks: 1,
            patch_size: 16,
            timesteps: 4,
            decoder_channels: 16,
        }
    }
}

pub const SUPPORTED_PATCH_SIZES: [usize; 3] = [8, 16, 32];
pub const MAX_EXTRA_RESIDUAL_BLOCKS: usize = 2;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latent_dim", self.latent_dim),
            ("bottleneck_units", self.bottleneck_units),
            ("convlstm_filters", self.convlstm_filters),
            ("timesteps", self.timesteps),
            ("decoder_channels", self.decoder_channels),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.residual_channels.is_empty() || self.residual_channels.contains(&0) {
            return Err(Error::Config(
                "residual_channels must list at least one positive channel count".into(),
            ));
        }
        if self.extra_residual_blocks > MAX_EXTRA_RESIDUAL_BLOCKS {
            return Err(Error::Config(format!(
                "extra_residual_blocks must be at most {MAX_EXTRA_RESIDUAL_BLOCKS}"
            )));
        }
        if !SUPPORTED_PATCH_SIZES.contains(&self.patch_size) {
            return Err(Error::Config(format!(
                "patch_size must be one of {SUPPORTED_PATCH_SIZES:?}, got {}",
                self.patch_size
            )));
        }
        Ok(())
    }
}

/// Diagonal Gaussian `N(mean, exp(log_variance))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDistribution {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl LatentDistribution {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(Error::Shape(format!(
                "mean has {} entries, log-variance {}",
                mean.len(),
                log_variance.len()
            )));
        }
        if mean.is_empty() {
            return Err(Error::Empty("latent distribution"));
        }
        if mean.iter().chain(&log_variance).any(|v| !v.is_finite()) {
            return Err(Error::Invalid("latent parameters must be finite".into()));
        }
        Ok(LatentDistribution { mean, log_variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        self.log_variance.iter().map(|lv| (0.5 * lv).exp()).collect()
    }
}

/// Reparameterized draw `mean + exp(0.5 log_variance) * noise`.
pub fn sample(dist: &LatentDistribution, noise: &[f64]) -> Result<Vec<f64>> {
    if noise.len() != dist.dim() {
        return Err(Error::Shape(format!(
            "noise has {} entries, latent dimension is {}",
            noise.len(),
            dist.dim()
        )));
    }
    Ok(dist
        .mean
        .iter()
        .zip(dist.std_dev())
        .zip(noise)
        .map(|((m, s), e)| m + s * e)
        .collect())
}

/// Encoder feature maps of one patch, consumed by [`Clvae::decode`].
#[derive(Debug, Clone, PartialEq)]
pub struct Skips(Vec<Vec<f64>>);

/// Training-mode forward pass of one stream.
#[derive(Debug, Clone)]
pub struct StreamForward {
    /// `[N, latent]` row-major.
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
    pub noise: Vec<f64>,
    pub z: Vec<f64>,
    /// Reconstruction, same layout as the input tensor.
    pub recon: Tensor,
    enc: EncoderCache,
    dec: DecoderCache,
    skips_shape: usize,
}

#[derive(Debug, Clone)]
pub struct Clvae {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    net: Network,
}

/// Trainable parameter count of a configuration.
pub fn parameter_count(config: &ModelConfig) -> Result<usize> {
    Ok(Clvae::new(config.clone(), 0)?.parameter_count())
}

impl Clvae {
    /// Builds a model with Glorot-uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Network::build(&config, &mut store, &mut rng);
        Ok(Clvae {
            config,
            seed,
            store,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn non_trainable_count(&self) -> usize {
        self.store.state_count()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Multiply-accumulates to encode one patch.
    pub fn encoder_macs(&self) -> usize {
        self.net.encoder_macs()
    }

    pub fn decoder_macs(&self) -> usize {
        self.net.decoder_macs()
    }

    fn check_patches(&self, patches: &ArrayView5<f64>) -> Result<()> {
        let (_, t, h, w, c) = patches.dim();
        let p = self.config.patch_size;
        if (t, h, w, c) != (self.config.timesteps, p, p, INPUT_CHANNELS) {
            return Err(Error::Shape(format!(
                "patches are {:?}, model expects N x {} x {p} x {p} x {INPUT_CHANNELS}",
                patches.dim(),
                self.config.timesteps
            )));
        }
        Ok(())
    }

    fn sample_input(patch: ndarray::ArrayView4<f64>) -> Vec<f64> {
        Tensor::from_patches(patch.insert_axis(ndarray::Axis(0))).data
    }

    /// Inference-mode encoding; samples are independent, so results do not
    /// depend on batch composition or thread count.
    pub fn encode(&self, patches: ArrayView5<f64>) -> Result<Vec<LatentDistribution>> {
        self.check_patches(&patches)?;
        let (values, state) = (&self.store.values, &self.store.state);
        let out: Vec<_> = (0..patches.len_of(ndarray::Axis(0)))
            .into_par_iter()
            .map(|i| {
                let x = Self::sample_input(patches.index_axis(ndarray::Axis(0), i));
                let (mean, log_variance, _) = self.net.encode_sample(values, state, &x, false);
                LatentDistribution { mean, log_variance }
            })
            .collect();
        out.into_iter()
            .map(|d| {
                if d.mean.iter().chain(&d.log_variance).all(|v| v.is_finite()) {
                    Ok(d)
                } else {
                    Err(Error::Invalid("encoder produced non-finite latent parameters".into()))
                }
            })
            .collect()
    }

    /// Encoding that also returns the cross-connection feature maps.
    pub fn encode_with_skips(&self, patches: ArrayView5<f64>) -> Result<Vec<(LatentDistribution, Skips)>> {
        self.check_patches(&patches)?;
        let (values, state) = (&self.store.values, &self.store.state);
        patches
            .outer_iter()
            .map(|patch| {
                let x = Self::sample_input(patch);
                let (mean, log_variance, skips) = self.net.encode_sample(values, state, &x, true);
                Ok((LatentDistribution::new(mean, log_variance)?, Skips(skips)))
            })
            .collect()
    }

    /// Decodes one latent vector to a `T x p x p x 3` reconstruction mean.
    pub fn decode(&self, z: &[f64], skips: &Skips) -> Result<Array4<f64>> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Shape(format!(
                "latent vector has {} entries, model expects {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        let levels = self.config.residual_channels.len();
        let expected: Vec<usize> = (0..levels)
            .map(|k| self.net.level_channels[k] * self.net.level_dims[k].iter().product::<usize>())
            .collect();
        let found: Vec<usize> = skips.0.iter().map(Vec::len).collect();
        if found != expected {
            return Err(Error::Shape(format!(
                "skip feature sizes {found:?} do not match decoder stages {expected:?}"
            )));
        }
        let out = self
            .net
            .decode_sample(&self.store.values, &self.store.state, z, &skips.0);
        let (t, p) = (self.config.timesteps, self.config.patch_size);
        let tensor = Tensor {
            data: out,
            shape: [1, INPUT_CHANNELS, t, p, p],
        };
        Ok(tensor.to_patches().index_axis_move(ndarray::Axis(0), 0))
    }

    /// Training-mode forward pass (batch statistics) of one stream with the
    /// given standard-normal noise, `[N, latent]` row-major.
    pub fn forward_train(&self, x: &Tensor, noise: &[f64]) -> Result<StreamForward> {
        let p = self.config.patch_size;
        if x.shape[1..] != [INPUT_CHANNELS, self.config.timesteps, p, p] {
            return Err(Error::Shape(format!(
                "training batch is {:?}, model expects [N, {INPUT_CHANNELS}, {}, {p}, {p}]",
                x.shape, self.config.timesteps
            )));
        }
        if noise.len() != x.n() * self.config.latent_dim {
            return Err(Error::Shape("noise does not match batch x latent".into()));
        }
        let values = &self.store.values;
        let (enc_out, enc) = self.net.encode_train(values, x);
        let z: Vec<f64> = enc_out
            .mean
            .iter()
            .zip(&enc_out.log_var)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect();
        let (recon, dec) = self.net.decode_train(values, &z, &enc_out.skips);
        Ok(StreamForward {
            mean: enc_out.mean,
            log_var: enc_out.log_var,
            noise: noise.to_vec(),
            z,
            recon,
            enc,
            dec,
            skips_shape: enc_out.skips.len(),
        })
    }

    /// Accumulates parameter gradients given loss gradients with respect to
    /// the reconstruction and the distribution parameters. Backpropagation
    /// through the sampled latent is included.
    pub fn backward(
        &self,
        fwd: &StreamForward,
        d_recon: &Tensor,
        d_mean: &[f64],
        d_log_var: &[f64],
        grads: &mut [f64],
    ) {
        let values = &self.store.values;
        let (dz, dskips) = self.net.decode_backward(values, &fwd.dec, d_recon, grads);
        debug_assert_eq!(dskips.len(), fwd.skips_shape);
        let dm: Vec<f64> = d_mean.iter().zip(&dz).map(|(a, b)| a + b).collect();
        let dl: Vec<f64> = d_log_var
            .iter()
            .zip(&dz)
            .zip(fwd.log_var.iter().zip(&fwd.noise))
            .map(|((a, g), (lv, e))| a + g * 0.5 * (0.5 * lv).exp() * e)
            .collect();
        self.net
            .encode_backward(values, &fwd.enc, &dm, &dl, &dskips, grads);
    }

    /// Folds a stream's batch statistics into the running statistics.
    pub fn update_running_stats(&mut self, fwd: &StreamForward) {
        self.net
            .update_running(&mut self.store.state, &fwd.enc, &fwd.dec);
    }


    /// Number of batch-normalization layers.
    pub fn batch_norm_layers(&self) -> usize {
        self.net.batch_norms().len()
    }
}
