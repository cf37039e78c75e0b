//! Optimizer, learning-rate schedule, augmentation and the training loop.

mod adam;
mod augment;

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamParams, AdamState};
pub use augment::{apply_matrix, augment, rotation_y, Augmentation};

use crate::checkpoint::{Checkpoint, TrainingState};
use crate::error::{Error, Result};
use crate::mesh::{mesh_features, CellFeatureMatrix, TriangleMesh};
use crate::model::{ForwardOptions, TsgcNet};
use crate::tensor::Reduction;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Per-axis translation bound for augmentation.
    pub translation_range: f64,
    /// Bound of the rotation angle about the vertical axis, in radians.
    pub rotation_range: f64,
    /// Sample one augmented copy per mesh up front instead of fresh
    /// transforms every epoch.
    pub fixed_augmentation: bool,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 4,
            lr0: 1e-3,
            decay_factor: 0.5,
            decay_every: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            translation_range: 10.0,
            rotation_range: std::f64::consts::FRAC_PI_6,
            fixed_augmentation: false,
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.decay_every == 0 {
            return bad("decay_every must be positive".into());
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.adam_eps.is_nan()
            || self.adam_eps <= 0.0
        {
            return bad("adam betas must lie in [0, 1) and adam_eps must be positive".into());
        }
        if [self.translation_range, self.rotation_range]
            .iter()
            .any(|v| v.is_nan() || *v < 0.0)
        {
            return bad("augmentation ranges must be non-negative".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    /// Step schedule `lr0 · decay_factor^⌊epoch / decay_every⌋`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub train_oa: f64,
}

impl EpochRecord {
    pub const HEADER: &'static str = "epoch\tlr\tmean_loss\ttrain_oa";

    pub fn to_tsv(&self) -> String {
        format!("{}\t{}\t{}\t{}", self.epoch, self.lr, self.mean_loss, self.train_oa)
    }
}

pub fn format_log(records: &[EpochRecord]) -> String {
    let mut s = format!("{}\n", EpochRecord::HEADER);
    for r in records {
        let _ = writeln!(s, "{}", r.to_tsv());
    }
    s
}

/// Labeled training meshes, centered once up front.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    meshes: Vec<TriangleMesh>,
}

impl TrainingSet {
    pub fn new(meshes: &[TriangleMesh], num_classes: usize) -> Result<Self> {
        let mut out = Vec::with_capacity(meshes.len());
        for (i, m) in meshes.iter().enumerate() {
            let labels = m
                .labels()
                .ok_or_else(|| Error::Data(format!("training mesh {i} has no labels")))?;
            if let Some((cell, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
                return Err(Error::Data(format!(
                    "training mesh {i}: cell {cell} has label {l}, expected < {num_classes}"
                )));
            }
            out.push(m.centered());
        }
        Ok(TrainingSet { meshes: out })
    }

    pub fn len(&self) -> usize {
        self.meshes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meshes.is_empty()
    }

    pub fn meshes(&self) -> &[TriangleMesh] {
        &self.meshes
    }
}

/// Model, optimizer state and schedule position.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: TsgcNet<f32>,
    config: TrainConfig,
    adam: AdamState<f32>,
    epochs_done: usize,
}

impl Trainer {
    pub fn new(model: TsgcNet<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = AdamState::new(model.store());
        Ok(Trainer {
            model,
            config,
            adam,
            epochs_done: 0,
        })
    }

    /// Continue from a checkpoint. Weights-only checkpoints restart the
    /// optimizer at epoch 0.
    pub fn resume(checkpoint: Checkpoint, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (model, state) = checkpoint.into_model()?;
        let (adam, epochs_done) = match state {
            Some(s) => (s.adam, s.epochs_done),
            None => (AdamState::new(model.store()), 0),
        };
        Ok(Trainer {
            model,
            config,
            adam,
            epochs_done,
        })
    }

    pub fn model(&self) -> &TsgcNet<f32> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut TsgcNet<f32> {
        &mut self.model
    }

    pub fn into_model(self) -> TsgcNet<f32> {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn adam(&self) -> &AdamState<f32> {
        &self.adam
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            Some(TrainingState {
                epochs_done: self.epochs_done,
                adam: self.adam.clone(),
            }),
        )
    }

    fn epoch_rng(&self, epoch: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        rng
    }

    /// Training pool for this run: the centered meshes, plus one fixed
    /// augmented copy each in fixed-augmentation mode.
    fn pool(&self, data: &TrainingSet) -> Vec<TriangleMesh> {
        let mut pool = data.meshes.clone();
        if self.config.fixed_augmentation {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
            rng.set_stream(u64::MAX);
            for m in &data.meshes {
                pool.push(augment(
                    m,
                    &mut rng,
                    self.config.translation_range,
                    self.config.rotation_range,
                ));
            }
        }
        pool
    }

    /// One pass over shuffled mini-batches with one optimizer step each.
    pub fn run_epoch(&mut self, data: &TrainingSet) -> Result<EpochRecord> {
        if data.is_empty() {
            return Err(Error::Usage("training set is empty".into()));
        }
        let epoch = self.epochs_done;
        let lr = self.config.learning_rate(epoch);
        let mut rng = self.epoch_rng(epoch);
        let pool = self.pool(data);
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut rng);
        let adam_hp = self.config.adam();
        let (mut loss_sum, mut correct, mut cells) = (0.0f64, 0usize, 0usize);
        for (b, batch) in order.chunks(self.config.batch_size).enumerate() {
            let m0 = pool[batch[0]].num_cells();
            if let Some(&bad) = batch.iter().find(|&&i| pool[i].num_cells() != m0) {
                return Err(Error::Batching(format!(
                    "epoch {epoch} batch {b}: mesh {bad} has {} cells, mesh {} has {m0}",
                    pool[bad].num_cells(),
                    batch[0]
                )));
            }
            let mut features: Vec<CellFeatureMatrix<f32>> = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(m0 * batch.len());
            for &i in batch {
                let mesh = if self.config.fixed_augmentation {
                    pool[i].clone()
                } else {
                    augment(
                        &pool[i],
                        &mut rng,
                        self.config.translation_range,
                        self.config.rotation_range,
                    )
                };
                features.push(mesh_features(&mesh, false));
                labels.extend_from_slice(mesh.labels().expect("training meshes are labeled"));
            }
            let mut pass = self.model.forward_batch(&features, ForwardOptions::train())?;
            let loss = pass.loss(&labels, Reduction::Mean)?;
            let value = pass.tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "non-finite loss {value} in epoch {epoch} batch {b} (meshes {batch:?})"
                )));
            }
            correct += pass.predictions().iter().zip(&labels).filter(|(p, l)| p == l).count();
            cells += labels.len();
            loss_sum += value * labels.len() as f64;
            self.model.backward(&pass, loss)?;
            adam_step(self.model.store_mut(), &mut self.adam, lr, &adam_hp)?;
        }
        self.epochs_done += 1;
        Ok(EpochRecord {
            epoch,
            lr,
            mean_loss: loss_sum / cells as f64,
            train_oa: correct as f64 / cells as f64,
        })
    }

    /// Train until `epochs_done` reaches `until`, calling `on_epoch` after
    /// every epoch.
    pub fn fit<F>(&mut self, data: &TrainingSet, until: usize, mut on_epoch: F) -> Result<Vec<EpochRecord>>
    where
        F: FnMut(&Trainer, &EpochRecord) -> Result<()>,
    {
        let mut log = Vec::new();
        while self.epochs_done < until {
            let rec = self.run_epoch(data)?;
            on_epoch(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }
}

/// Train `model` on `meshes` for `config.epochs` epochs.
pub fn train(
    model: TsgcNet<f32>,
    meshes: &[TriangleMesh],
    config: &TrainConfig,
) -> Result<(TsgcNet<f32>, Vec<EpochRecord>)> {
    let data = TrainingSet::new(meshes, model.config().num_classes)?;
    let mut trainer = Trainer::new(model, config.clone())?;
    let log = trainer.fit(&data, config.epochs, |_, _| Ok(()))?;
    Ok((trainer.into_model(), log))
}

/// File names used by [`train_to_dir`].
pub const LOG_FILE: &str = "train_log.tsv";
pub const FINAL_CHECKPOINT: &str = "final.tsgc";

pub fn epoch_checkpoint_name(epochs_done: usize) -> String {
    format!("epoch_{epochs_done:04}.tsgc")
}

/// Run the trainer up to `config.epochs`, appending to the log in `dir`
/// and writing checkpoints at the configured cadence and at the end.
pub fn train_to_dir(trainer: &mut Trainer, data: &TrainingSet, dir: &Path) -> Result<Vec<EpochRecord>> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    let log_path = dir.join(LOG_FILE);
    let fresh = trainer.epochs_done() == 0 || !log_path.exists();
    let mut log = OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&log_path)
        .map_err(|e| Error::file(&log_path, e))?;
    if fresh {
        writeln!(log, "{}", EpochRecord::HEADER).map_err(|e| Error::file(&log_path, e))?;
    }
    let every = trainer.config().checkpoint_every;
    let until = trainer.config().epochs;
    let records = trainer.fit(data, until, |t, rec| {
        writeln!(log, "{}", rec.to_tsv()).map_err(|e| Error::file(&log_path, e))?;
        if every > 0 && t.epochs_done() % every == 0 {
            let path: PathBuf = dir.join(epoch_checkpoint_name(t.epochs_done()));
            t.checkpoint().save(&path)?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&dir.join(FINAL_CHECKPOINT))?;
    Ok(records)
}

#[cfg(test)]
mod tests;
