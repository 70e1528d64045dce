//! Objectives and the training loop.
//!
//! Both variants reconstruct the full cloud from the noise points `u`. The
//! full variant adds `lambda` times the KL divergence of the missing-part
//! posterior from the standard normal prior.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::checkpoint;
use crate::autodiff::optim::{self, AdamState};
use crate::autodiff::{Tape, Var};
use crate::cloud::{resample, rotate_vertical, sample_ball_interior, split_by_normal, PartitionedCloud, PointCloud, SplitPlane};
use crate::distances::{chamfer_indexed_with, Reduction};
use crate::error::{Error, Result};
use crate::model::{kl_on, reparameterize_on, Architecture, HyperPocket, Variant};
use crate::seed;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Scheduler {
    #[default]
    None,
    Step { step: usize, gamma: f64 },
}

impl Scheduler {
    pub fn lr(&self, epoch: usize, base: f64) -> f64 {
        match *self {
            Scheduler::None => base,
            Scheduler::Step { step, gamma } => optim::step_lr(epoch, base, step, gamma),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the KL term. Ignored by the rec variant.
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub scheduler: Scheduler,
    /// Epochs over which the noise moves from the sphere to the full ball.
    pub noise_ramp_epochs: usize,
    /// Each training cloud is resampled to this many points before splitting.
    pub points_per_cloud: usize,
    /// Number of noise points fed through the target network per sample.
    pub noise_points: usize,
    /// Cardinality of validation reconstructions.
    pub val_points: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Random rotation about the vertical axis before each split.
    pub augment_rotation: bool,
    /// Layer widths; `None` uses the standard widths for `variant`.
    pub architecture: Option<Architecture>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.001,
            epochs: 200,
            batch_size: 32,
            lr: optim::DEFAULT_LR,
            scheduler: Scheduler::None,
            noise_ramp_epochs: 100,
            points_per_cloud: 2048,
            noise_points: 2048,
            val_points: 2048,
            seed: 0,
            variant: Variant::Full,
            augment_rotation: false,
            architecture: None,
        }
    }
}

impl TrainConfig {
    /// Settings for the synthetic desk corpus: 200 epochs at a tenfold
    /// learning rate with one step decay, and 512-point training clouds and
    /// noise sets so that an epoch stays under half a minute on one CPU core.
    pub fn desk(variant: Variant) -> Self {
        Self {
            lr: 1e-3,
            scheduler: Scheduler::Step { step: 100, gamma: 0.3 },
            points_per_cloud: 512,
            noise_points: 512,
            variant,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid("lambda must be finite and non-negative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if self.batch_size == 0 || self.points_per_cloud < 2 || self.noise_points == 0 || self.val_points == 0 {
            return Err(Error::invalid("batch size and point counts must be positive"));
        }
        if let Scheduler::Step { step, gamma } = self.scheduler {
            if step == 0 || !(gamma > 0.0) {
                return Err(Error::invalid("step scheduler needs step > 0 and gamma > 0"));
            }
        }
        if let Some(arch) = &self.architecture {
            if arch.variant != self.variant {
                return Err(Error::invalid("architecture variant differs from the config variant"));
            }
            arch.validate()?;
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        self.architecture
            .clone()
            .unwrap_or_else(|| Architecture::with_variant(self.variant))
    }

    /// The lambda that actually enters the objective.
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::Full => self.lambda,
            Variant::Rec => 0.0,
        }
    }
}

/// Interpolation parameter of the noise distribution at `epoch`.
pub fn noise_alpha(epoch: usize, ramp_epochs: usize) -> f64 {
    if ramp_epochs == 0 {
        1.0
    } else {
        (epoch as f64 / ramp_epochs as f64).min(1.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl: f64,
    pub total: f64,
}

pub(crate) struct Objective {
    pub(crate) total: Var,
    pub(crate) breakdown: LossBreakdown,
}

/// Records the batch objective on `tape`: one decoder pass for the whole
/// batch, then one target-network pass and Chamfer term per sample.
pub(crate) fn objective<'p>(
    tape: &mut Tape<'p>,
    model: &HyperPocket,
    batch: &[PartitionedCloud],
    alpha: f64,
    lambda: f64,
    noise_points: usize,
    rng: &mut seed::Rng,
) -> Result<Objective> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let latent = model.latent_dim();
    let mut codes = Vec::with_capacity(batch.len());
    let mut kl_terms = Vec::new();
    for item in batch {
        let z_e = model.encode_existing_on(tape, &item.existing)?;
        let code = match model.variant() {
            Variant::Full => {
                let (mu, logvar) = model.encode_missing_on(tape, &item.missing)?;
                let eps = Array2::from_shape_simple_fn((1, latent), || rng.sample::<f64, _>(StandardNormal));
                let z_m = reparameterize_on(tape, mu, logvar, eps)?;
                kl_terms.push(kl_on(tape, mu, logvar)?);
                tape.concat_cols(z_e, z_m)?
            }
            Variant::Rec => z_e,
        };
        codes.push(code);
    }
    let codes = tape.stack_rows(&codes)?;
    let theta = model.decode_on(tape, codes)?;

    let mut rec: Option<Var> = None;
    for (row, item) in batch.iter().enumerate() {
        let u = sample_ball_interior(noise_points, alpha, rng)?;
        let y = model.target_on(tape, theta, row, &u)?;
        let target = tape.constant(item.full().to_array());
        let cd = tape.chamfer(y, target)?;
        rec = Some(match rec {
            None => cd,
            Some(acc) => tape.add(acc, cd)?,
        });
    }
    let rec = rec.expect("non-empty batch");
    let reconstruction = tape.scalar(rec);

    let (total, kl) = if kl_terms.is_empty() {
        (rec, 0.0)
    } else {
        let mut kl = kl_terms[0];
        for &k in &kl_terms[1..] {
            kl = tape.add(kl, k)?;
        }
        let kl_value = tape.scalar(kl);
        let weighted = tape.scale(kl, lambda);
        (tape.add(rec, weighted)?, kl_value)
    };
    let total_value = tape.scalar(total);
    if !total_value.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss {total_value}")));
    }
    Ok(Objective {
        total,
        breakdown: LossBreakdown {
            reconstruction,
            kl,
            total: total_value,
        },
    })
}

fn evaluate_loss(
    batch: &[PartitionedCloud],
    model: &HyperPocket,
    epoch: usize,
    config: &TrainConfig,
    rng: &mut seed::Rng,
) -> Result<LossBreakdown> {
    let mut tape = Tape::frozen(model.params());
    let alpha = noise_alpha(epoch, config.noise_ramp_epochs);
    Ok(objective(&mut tape, model, batch, alpha, config.effective_lambda(), config.noise_points, rng)?.breakdown)
}

/// Objective of the full variant on one batch.
pub fn loss_hyperpocket(
    batch: &[PartitionedCloud],
    model: &HyperPocket,
    epoch: usize,
    config: &TrainConfig,
    rng: &mut seed::Rng,
) -> Result<LossBreakdown> {
    if model.variant() != Variant::Full {
        return Err(Error::invalid("loss_hyperpocket needs a full-variant model"));
    }
    evaluate_loss(batch, model, epoch, config, rng)
}

/// Reconstruction-only objective; `kl` is always zero.
pub fn loss_rec(
    batch: &[PartitionedCloud],
    model: &HyperPocket,
    epoch: usize,
    config: &TrainConfig,
    rng: &mut seed::Rng,
) -> Result<LossBreakdown> {
    if model.variant() != Variant::Rec {
        return Err(Error::invalid("loss_rec needs a rec-variant model"));
    }
    evaluate_loss(batch, model, epoch, config, rng)
}

/// Mean-reduced Chamfer distance of deterministic reconstructions, using a
/// fixed noise draw per sample so that repeated calls agree exactly.
pub fn validate(model: &HyperPocket, val_set: &[PartitionedCloud], n_points: usize, seed: u64) -> Result<f64> {
    if val_set.is_empty() {
        return Err(Error::invalid("empty validation set"));
    }
    let mut total = 0.0;
    for (i, item) in val_set.iter().enumerate() {
        let u = sample_ball_interior(n_points, model.noise_alpha, &mut seed::indexed_stream(seed, "val-noise", i as u64))?;
        let out = model.hyper_forward(&item.existing, Some(&item.missing), &u, None)?;
        total += chamfer_indexed_with(&out.reconstruction, &item.full(), Reduction::Mean);
    }
    Ok(total / val_set.len() as f64)
}

/// A training object with its stored split planes; a fresh partition is
/// drawn from one of the planes every time the object is visited.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub cloud: PointCloud,
    pub planes: Vec<SplitPlane>,
}

impl TrainSample {
    fn draw(&self, config: &TrainConfig, rng: &mut seed::Rng) -> Result<PartitionedCloud> {
        if self.planes.is_empty() {
            return Err(Error::invalid(format!("sample {} has no split planes", self.id)));
        }
        let plane = self.planes[rng.random_range(0..self.planes.len())];
        let mut cloud = resample(&self.cloud, config.points_per_cloud, rng)?;
        if config.augment_rotation {
            cloud = rotate_vertical(&cloud, rng.random_range(0.0..std::f64::consts::TAU));
        }
        split_by_normal(&cloud, plane.normal, &self.id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_total: f64,
    pub train_rec: f64,
    pub train_kl: f64,
    pub val_cd: f64,
    pub lr: f64,
}

pub struct TrainOutcome {
    /// The best-validation model (or the input model when `epochs = 0`).
    pub model: HyperPocket,
    pub log: Vec<EpochRecord>,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
}

pub const BEST_DIR: &str = "best";
pub const LAST_DIR: &str = "last";
pub const LOG_FILE: &str = "train_log.csv";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";

pub fn write_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
    if log.is_empty() {
        w.write_record(["epoch", "train_total", "train_rec", "train_kl", "val_cd", "lr"])
            .map_err(|e| Error::invalid(e.to_string()))?;
    }
    for r in log {
        w.serialize(r).map_err(|e| Error::invalid(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Trains `model` in place of a fresh copy and returns the best-validation
/// state. With `out = Some(dir)` the best model, the last model with its
/// optimizer moments, and the CSV log are written under `dir` after every
/// epoch, so a divergence leaves the last good checkpoint on disk.
pub fn train(
    config: &TrainConfig,
    train_set: &[TrainSample],
    val_set: &[PartitionedCloud],
    mut model: HyperPocket,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if model.variant() != config.variant {
        return Err(Error::invalid("model variant differs from the config variant"));
    }
    let lambda = config.effective_lambda();
    model.training_info = serde_json::to_value(config)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.json");
        fs::write(&path, serde_json::to_string_pretty(config)? + "\n").map_err(|e| Error::io(&path, e))?;
        model.save(dir.join(BEST_DIR))?;
        write_log(&dir.join(LOG_FILE), &[])?;
    }

    let mut adam = AdamState::for_params(config.lr, model.params());
    let mut rng = seed::stream(config.seed, "train");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, HyperPocket)> = None;

    for epoch in 0..config.epochs {
        let lr = config.scheduler.lr(epoch, config.lr);
        adam.lr = lr;
        let alpha = noise_alpha(epoch, config.noise_ramp_epochs);
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for chunk in order.chunks(config.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| train_set[i].draw(config, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let grads = {
                let mut tape = Tape::new(model.params());
                let obj = objective(&mut tape, &model, &batch, alpha, lambda, config.noise_points, &mut rng)?;
                sums.reconstruction += obj.breakdown.reconstruction;
                sums.kl += obj.breakdown.kl;
                sums.total += obj.breakdown.total;
                tape.backward(obj.total)?
            };
            adam.step(model.params_mut(), &grads)?;
        }
        model.noise_alpha = alpha;
        let val_cd = validate(&model, val_set, config.val_points, config.seed)?;
        if !val_cd.is_finite() {
            return Err(Error::Diverged(format!("validation CD {val_cd} at epoch {epoch}")));
        }
        let n = train_set.len() as f64;
        let record = EpochRecord {
            epoch,
            train_total: sums.total / n,
            train_rec: sums.reconstruction / n,
            train_kl: sums.kl / n,
            val_cd,
            lr,
        };
        log::info!(
            "epoch {epoch}: total {:.4} rec {:.4} kl {:.4} val_cd {:.6} lr {lr:e}",
            record.train_total,
            record.train_rec,
            record.train_kl,
            val_cd
        );
        log.push(record);
        let improved = best.as_ref().is_none_or(|(b, _, _)| val_cd < *b);
        if improved {
            best = Some((val_cd, epoch, model.clone()));
        }
        if let Some(dir) = out {
            if improved {
                model.save(dir.join(BEST_DIR))?;
            }
            model.save(dir.join(LAST_DIR))?;
            let names: Vec<&str> = model.params().iter().map(|(_, n, _)| n).collect();
            checkpoint::save_adam(dir.join(LAST_DIR).join(OPTIMIZER_FILE), &adam, &names)?;
            write_log(&dir.join(LOG_FILE), &log)?;
        }
    }

    Ok(match best {
        Some((val, epoch, model)) => TrainOutcome {
            model,
            log,
            best_val: Some(val),
            best_epoch: Some(epoch),
        },
        None => TrainOutcome {
            model,
            log,
            best_val: None,
            best_epoch: None,
        },
    })
}
