//! Dual-stream self-supervised training: KL, reconstruction and contrastive
//! terms, Adam updates and a reduce-on-plateau schedule.

use std::io::Write;
use std::path::Path;

use ndarray::{Array5, ArrayView5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Clvae, LatentDistribution, ModelConfig, StreamForward, Tensor};
use crate::patching::{augment_with, inference_padding, pad_reflect, AugmentConfig, TimeSeriesStack};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// KL weight.
    pub alpha: f64,
    /// Reconstruction weight.
    pub beta: f64,
    /// Contrastive hinge margin in normalized-intensity units.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.7,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn contrastive(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be non-negative".into()));
        }
        if self.alpha + self.beta > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "alpha + beta must not exceed 1, got {}",
                self.alpha + self.beta
            )));
        }
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return Err(Error::Config("contrastive margin must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub initial_lr: f64,
    pub min_lr: f64,
    /// Multiplier applied at each plateau.
    pub decay_factor: f64,
    pub plateau_patience: usize,
    pub stop_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Pairs drawn per epoch.
    pub pairs_per_epoch: usize,
    /// Relative total-loss improvement below which an epoch counts as no learning.
    pub improvement_tolerance: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            initial_lr: 1e-3,
            min_lr: 1e-5,
            decay_factor: 0.1,
            plateau_patience: 2,
            stop_patience: 4,
            max_epochs: 10,
            batch_size: 512,
            pairs_per_epoch: 4096,
            improvement_tolerance: 1e-3,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.min_lr > 0.0 && self.min_lr < self.initial_lr) {
            return fail("min_lr must be positive and below initial_lr");
        }
        if self.plateau_patience == 0 || self.stop_patience == 0 {
            return fail("plateau_patience and stop_patience must be at least 1");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return fail("decay_factor must lie in (0, 1)");
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.pairs_per_epoch == 0 {
            return fail("max_epochs, batch_size and pairs_per_epoch must be positive");
        }
        if !(self.improvement_tolerance >= 0.0) {
            return fail("improvement_tolerance must be non-negative");
        }
        Ok(())
    }
}

/// KL divergence to the standard normal, summed over latent dimensions and
/// averaged over the batch.
pub fn kl_loss(dists: &[LatentDistribution]) -> f64 {
    if dists.is_empty() {
        return 0.0;
    }
    dists.iter().map(|d| kl_row(&d.mean, &d.log_variance)).sum::<f64>() / dists.len() as f64
}

fn kl_row(mean: &[f64], log_var: &[f64]) -> f64 {
    -0.5 * mean
        .iter()
        .zip(log_var)
        .map(|(m, lv)| 1.0 + lv - m * m - lv.exp())
        .sum::<f64>()
}

fn check_same<'a>(a: &ArrayView5<'a, f64>, b: &ArrayView5<'a, f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::Empty("patch batch"));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn recon_loss(x: ArrayView5<f64>, x_hat: ArrayView5<f64>) -> Result<f64> {
    check_same(&x, &x_hat)?;
    let sum: f64 = x.iter().zip(x_hat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.len() as f64)
}

/// Mean over pairs of `max(0, margin - rmse)^2`, with the RMSE taken over
/// each pair's patch elements.
pub fn contrastive_loss(x_hat1: ArrayView5<f64>, x_hat2: ArrayView5<f64>, margin: f64) -> Result<f64> {
    check_same(&x_hat1, &x_hat2)?;
    let n = x_hat1.len_of(ndarray::Axis(0));
    let total: f64 = x_hat1
        .outer_iter()
        .zip(x_hat2.outer_iter())
        .map(|(a, b)| {
            let mse = a.iter().zip(b.iter()).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / a.len() as f64;
            let h = (margin - mse.sqrt()).max(0.0);
            h * h
        })
        .sum();
    Ok(total / n as f64)
}

/// Loss terms of one step. `kl` and `recon` are summed over both streams.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub recon: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn compose(kl: f64, recon: f64, contrastive: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            kl,
            recon,
            contrastive,
            total: w.alpha * kl + w.beta * recon + w.contrastive() * contrastive,
        }
    }
}

/// Forward passes, loss and gradient of one pair batch.
pub struct PairEvaluation {
    pub loss: LossBreakdown,
    pub grads: Vec<f64>,
    pub streams: [StreamForward; 2],
}

/// Evaluates the objective on `(p1, p2)` with fixed reparameterization noise
/// and returns the gradient with respect to every trainable parameter.
pub fn loss_and_gradient(
    model: &Clvae,
    p1: &Tensor,
    p2: &Tensor,
    noise: [&[f64]; 2],
    weights: &LossWeights,
) -> Result<PairEvaluation> {
    weights.validate()?;
    if p1.shape != p2.shape {
        return Err(Error::Shape(format!("pair batches {:?} vs {:?}", p1.shape, p2.shape)));
    }
    let f1 = model.forward_train(p1, noise[0])?;
    let f2 = model.forward_train(p2, noise[1])?;
    let n = p1.n();
    let latent = model.latent_dim();
    let elems = p1.sample_len();
    let total_elems = (n * elems) as f64;

    let mut kl = 0.0;
    let mut recon = 0.0;
    let mut d_means = Vec::with_capacity(2);
    let mut d_lvs = Vec::with_capacity(2);
    let mut d_recons = Vec::with_capacity(2);
    for (f, x) in [(&f1, p1), (&f2, p2)] {
        kl += f
            .mean
            .chunks_exact(latent)
            .zip(f.log_var.chunks_exact(latent))
            .map(|(m, lv)| kl_row(m, lv))
            .sum::<f64>()
            / n as f64;
        d_means.push(f.mean.iter().map(|m| weights.alpha * m / n as f64).collect::<Vec<_>>());
        d_lvs.push(
            f.log_var
                .iter()
                .map(|lv| weights.alpha * -0.5 * (1.0 - lv.exp()) / n as f64)
                .collect::<Vec<_>>(),
        );
        let mut se = 0.0;
        let mut dr = Tensor::zeros(x.shape);
        for ((d, r), t) in dr.data.iter_mut().zip(&f.recon.data).zip(&x.data) {
            let diff = r - t;
            se += diff * diff;
            *d = weights.beta * 2.0 * diff / total_elems;
        }
        recon += se / total_elems;
        d_recons.push(dr);
    }

    let gamma = weights.contrastive();
    let mut contrastive = 0.0;
    for i in 0..n {
        let (a, b) = (f1.recon.sample(i), f2.recon.sample(i));
        let mse = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() / elems as f64;
        let rmse = mse.sqrt();
        let h = (weights.margin - rmse).max(0.0);
        contrastive += h * h;
        if h > 0.0 && rmse > 0.0 {
            let scale = gamma * -2.0 * h / (n as f64 * elems as f64 * rmse);
            let (da, db) = {
                let (first, second) = d_recons.split_at_mut(1);
                (first[0].sample_mut(i), second[0].sample_mut(i))
            };
            for (j, (u, v)) in a.iter().zip(b).enumerate() {
                let g = scale * (u - v);
                da[j] += g;
                db[j] -= g;
            }
        }
    }
    contrastive /= n as f64;

    let mut grads = vec![0.0; model.parameter_count()];
    model.backward(&f1, &d_recons[0], &d_means[0], &d_lvs[0], &mut grads);
    model.backward(&f2, &d_recons[1], &d_means[1], &d_lvs[1], &mut grads);
    Ok(PairEvaluation {
        loss: LossBreakdown::compose(kl, recon, contrastive, weights),
        grads,
        streams: [f1, f2],
    })
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlateauAction {
    Continue,
    /// The learning rate was reduced after this epoch.
    Decayed,
    Stop,
}

/// Reduce-on-plateau learning-rate control with early stopping.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    lr: f64,
    best: f64,
    since_decay: usize,
    since_best: usize,
    schedule: TrainSchedule,
}

impl PlateauScheduler {
    pub fn new(schedule: &TrainSchedule) -> Self {
        PlateauScheduler {
            lr: schedule.initial_lr,
            best: f64::INFINITY,
            since_decay: 0,
            since_best: 0,
            schedule: schedule.clone(),
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an epoch's total loss.
    pub fn observe(&mut self, loss: f64) -> PlateauAction {
        let improved = self.best.is_infinite()
            || (self.best - loss) > self.schedule.improvement_tolerance * self.best.abs();
        if improved {
            self.best = loss;
            self.since_decay = 0;
            self.since_best = 0;
            return PlateauAction::Continue;
        }
        self.since_decay += 1;
        self.since_best += 1;
        if self.since_best >= self.schedule.stop_patience {
            return PlateauAction::Stop;
        }
        if self.since_decay >= self.schedule.plateau_patience {
            self.since_decay = 0;
            self.lr = (self.lr * self.schedule.decay_factor).max(self.schedule.min_lr);
            return PlateauAction::Decayed;
        }
        PlateauAction::Continue
    }
}

/// Draws pairs of patches with distinct anchors from reflect-padded
/// pre-event stacks and augments each patch independently.
#[derive(Debug, Clone)]
pub struct PairSampler {
    stacks: Vec<TimeSeriesStack>,
    sizes: Vec<(usize, usize)>,
    patch_size: usize,
    augment: AugmentConfig,
}

/// Where a pair was cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairOrigin {
    pub stack: usize,
    pub first: (usize, usize),
    pub second: (usize, usize),
}

impl PairSampler {
    pub fn new(stacks: &[TimeSeriesStack], patch_size: usize, augment: AugmentConfig) -> Result<Self> {
        if stacks.is_empty() {
            return Err(Error::Empty("training dataset"));
        }
        let (before, after) = inference_padding(patch_size);
        let mut padded = Vec::with_capacity(stacks.len());
        let mut sizes = Vec::with_capacity(stacks.len());
        for s in stacks {
            let (h, w) = s.spatial();
            if h * w < 2 {
                return Err(Error::Invalid("stacks need at least two pixels".into()));
            }
            padded.push(pad_reflect(s, before, after)?);
            sizes.push((h, w));
        }
        let t = stacks[0].timesteps();
        if stacks.iter().any(|s| s.timesteps() != t) {
            return Err(Error::Shape("stacks differ in time-series length".into()));
        }
        Ok(PairSampler {
            stacks: padded,
            sizes,
            patch_size,
            augment,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.stacks[0].timesteps()
    }

    pub fn draw_origin(&self, rng: &mut ChaCha8Rng) -> PairOrigin {
        let stack = rng.random_range(0..self.stacks.len());
        let (h, w) = self.sizes[stack];
        let first = (rng.random_range(0..h), rng.random_range(0..w));
        let mut second = first;
        while second == first {
            second = (rng.random_range(0..h), rng.random_range(0..w));
        }
        PairOrigin { stack, first, second }
    }

    /// `count` pairs as two `[N, 3, T, p, p]` batches.
    pub fn batch(&self, count: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Vec<PairOrigin>) {
        let p = self.patch_size;
        let t = self.timesteps();
        let mut a = Array5::zeros((count, t, p, p, 3));
        let mut b = Array5::zeros((count, t, p, p, 3));
        let mut origins = Vec::with_capacity(count);
        for i in 0..count {
            let o = self.draw_origin(rng);
            let values = &self.stacks[o.stack].values;
            for (dst, (r, c)) in [(&mut a, o.first), (&mut b, o.second)] {
                let patch = values.slice(ndarray::s![.., r..r + p, c..c + p, ..]);
                let seed: u64 = rng.random();
                dst.index_axis_mut(ndarray::Axis(0), i)
                    .assign(&augment_with(patch, seed, &self.augment));
            }
            origins.push(o);
        }
        (
            Tensor::from_patches(a.view()),
            Tensor::from_patches(b.view()),
            origins,
        )
    }
}

/// What the training loop needs from a model.
pub trait TrainableModel {
    /// One optimization step on a pair batch at learning rate `lr`.
    fn train_step(&mut self, p1: &Tensor, p2: &Tensor, lr: f64, rng: &mut ChaCha8Rng) -> Result<LossBreakdown>;
}

/// A [`Clvae`] with its optimizer state and loss weights.
#[derive(Debug, Clone)]
pub struct ClvaeTrainer {
    pub model: Clvae,
    pub weights: LossWeights,
    optimizer: Adam,
}

impl ClvaeTrainer {
    pub fn new(model: Clvae, weights: LossWeights) -> Result<Self> {
        weights.validate()?;
        let optimizer = Adam::new(model.parameter_count());
        Ok(ClvaeTrainer {
            model,
            weights,
            optimizer,
        })
    }
}

impl TrainableModel for ClvaeTrainer {
    fn train_step(&mut self, p1: &Tensor, p2: &Tensor, lr: f64, rng: &mut ChaCha8Rng) -> Result<LossBreakdown> {
        let len = p1.n() * self.model.latent_dim();
        let n1: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let n2: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
        let eval = loss_and_gradient(&self.model, p1, p2, [&n1, &n2], &self.weights)?;
        if !eval.loss.total.is_finite() {
            return Err(Error::Invalid("training loss became non-finite".into()));
        }
        for s in &eval.streams {
            self.model.update_running_stats(s);
        }
        self.optimizer
            .step(&mut self.model.params_mut().values, &eval.grads, lr);
        Ok(eval.loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub kl: f64,
    pub recon: f64,
    pub contrastive: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Runs epochs until `max_epochs` or the plateau scheduler stops training.
/// `on_epoch` sees each finished epoch (checkpointing, logging).
pub fn train<M, F>(
    model: &mut M,
    sampler: &PairSampler,
    schedule: &TrainSchedule,
    seed: u64,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    M: TrainableModel,
    F: FnMut(&EpochRecord, &M) -> Result<()>,
{
    schedule.validate()?;
    let mut scheduler = PlateauScheduler::new(schedule);
    let mut history = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for epoch in 1..=schedule.max_epochs {
        let lr = scheduler.lr();
        let mut sums = LossBreakdown::default();
        let mut remaining = schedule.pairs_per_epoch;
        let mut seen = 0usize;
        while remaining > 0 {
            let count = remaining.min(schedule.batch_size);
            let (p1, p2, _) = sampler.batch(count, &mut rng);
            let loss = model.train_step(&p1, &p2, lr, &mut rng)?;
            let w = count as f64;
            sums.kl += loss.kl * w;
            sums.recon += loss.recon * w;
            sums.contrastive += loss.contrastive * w;
            sums.total += loss.total * w;
            seen += count;
            remaining -= count;
        }
        let s = seen as f64;
        let record = EpochRecord {
            epoch,
            lr,
            kl: sums.kl / s,
            recon: sums.recon / s,
            contrastive: sums.contrastive / s,
            total: sums.total / s,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.1e} kl {:.5} recon {:.5} contrastive {:.5} total {:.5}",
            record.kl,
            record.recon,
            record.contrastive,
            record.total
        );
        history.push(record);
        on_epoch(&record, model)?;
        if scheduler.observe(record.total) == PlateauAction::Stop {
            return Ok(TrainReport {
                history,
                stopped_early: epoch < schedule.max_epochs,
            });
        }
    }
    Ok(TrainReport {
        history,
        stopped_early: false,
    })
}

/// Writes `epoch,lr,kl,recon,contrastive,total` rows.
pub fn write_history<W: Write>(out: W, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in history {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<history>", e))?;
    Ok(())
}

pub fn write_history_file(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_history(file, history)
}

/// Everything a training run needs, readable from one TOML file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub schedule: TrainSchedule,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.schedule.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;

    fn dist(m: Vec<f64>, lv: Vec<f64>) -> LatentDistribution {
        LatentDistribution::new(m, lv).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_loss(&[dist(vec![0.0; 3], vec![0.0; 3])]), 0.0);
        assert_eq!(kl_loss(&[dist(vec![1.0, 0.0, 0.0], vec![0.0; 3])]), 0.5);
        assert!(kl_loss(&[dist(vec![0.2, -1.0], vec![1.5, -2.0])]) > 0.0);
    }

    #[test]
    fn recon_examples() {
        let zeros = Array5::<f64>::zeros((2, 1, 2, 2, 3));
        let ones = Array5::<f64>::ones((2, 1, 2, 2, 3));
        assert_eq!(recon_loss(zeros.view(), zeros.view()).unwrap(), 0.0);
        assert_eq!(recon_loss(zeros.view(), ones.view()).unwrap(), 1.0);
        let other = Array5::from_elem((2, 1, 2, 2, 3), 0.3);
        assert_eq!(
            recon_loss(ones.view(), other.view()).unwrap(),
            recon_loss(other.view(), ones.view()).unwrap()
        );
        let bad = Array5::<f64>::zeros((1, 1, 2, 2, 3));
        assert!(recon_loss(zeros.view(), bad.view()).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let a = Array5::<f64>::zeros((1, 1, 2, 2, 3));
        assert_eq!(contrastive_loss(a.view(), a.view(), 1.0).unwrap(), 1.0);
        let far = Array5::from_elem((1, 1, 2, 2, 3), 2.0);
        assert_eq!(contrastive_loss(a.view(), far.view(), 1.0).unwrap(), 0.0);
        let half = Array5::from_elem((1, 1, 2, 2, 3), 0.5);
        assert_eq!(contrastive_loss(a.view(), half.view(), 1.0).unwrap(), 0.25);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { alpha: 0.6, beta: 0.5, margin: 1.0 }.validate().is_err());
        assert!(LossWeights { alpha: -0.1, ..Default::default() }.validate().is_err());
        assert!((LossWeights::default().contrastive() - 0.2).abs() < 1e-15);
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::default().validate().is_ok());
        let s = TrainSchedule { stop_patience: 0, ..Default::default() };
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let s = TrainSchedule { min_lr: 1e-2, ..Default::default() };
        assert!(s.validate().is_err());
    }

    #[test]
    fn plateau_on_constant_loss() {
        let sched = TrainSchedule::default();
        let mut p = PlateauScheduler::new(&sched);
        let actions: Vec<_> = (0..5).map(|_| p.observe(1.0)).collect();
        use PlateauAction::*;
        assert_eq!(actions, vec![Continue, Continue, Decayed, Continue, Stop]);
        assert!((p.lr() - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn plateau_respects_min_lr() {
        let sched = TrainSchedule {
            stop_patience: 100,
            plateau_patience: 1,
            ..Default::default()
        };
        let mut p = PlateauScheduler::new(&sched);
        for _ in 0..10 {
            p.observe(1.0);
        }
        assert_eq!(p.lr(), sched.min_lr);
    }

    #[test]
    fn improvement_resets_patience() {
        let mut p = PlateauScheduler::new(&TrainSchedule::default());
        for loss in [10.0, 10.0, 5.0, 5.0, 2.0, 2.0, 1.0] {
            assert_ne!(p.observe(loss), PlateauAction::Stop);
        }
        assert_eq!(p.lr(), 1e-3);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = Adam::new(2);
        let mut w = vec![1.0, -1.0];
        adam.step(&mut w, &[0.5, -2.0], 0.01);
        assert!((w[0] - 0.99).abs() < 1e-6);
        assert!((w[1] + 0.99).abs() < 1e-6);
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = TrainConfig::default();
        let back = TrainConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        let partial = TrainConfig::from_toml_str("seed = 7\n[schedule]\nmax_epochs = 3\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.schedule.max_epochs, 3);
        assert!(TrainConfig::from_toml_str("[loss]\nalpha = 0.9\nbeta = 0.9\n").is_err());
    }

    #[test]
    fn history_csv_columns() {
        let mut buf = Vec::new();
        let r = EpochRecord {
            epoch: 1,
            lr: 0.001,
            kl: 1.0,
            recon: 2.0,
            contrastive: 3.0,
            total: 4.0,
        };
        write_history(&mut buf, &[r]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,lr,kl,recon,contrastive,total\n1,0.001,1.0,2.0,3.0,4.0"));
    }
}
