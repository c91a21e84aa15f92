//! Training loop, checkpoints and test-set evaluation.
//!
//! [`fit`] draws fresh random patches every epoch from preprocessed
//! training images, runs mini-batch Adam on the binary cross-entropy and
//! stops once the validation loss has not improved for `patience` epochs,
//! leaving the model at its best-validation weights.

pub mod adam;
pub mod checkpoint;
pub mod evaluate;
pub mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, Adam, AdamConfig};
pub use checkpoint::{Checkpoint, TensorFile};
pub use evaluate::{evaluate, segment, EvalReport, ImageReport, InferenceConfig, PatchPredictor};
pub use loss::{bce_loss, BCE_CLAMP};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pipeline::raster::{check_dims, Raster};
use crate::pipeline::{sample_specs, PatchSpec};
use crate::tensor::Tensor;

/// RNG stream reserved for validation patches.
const VAL_STREAM: u64 = u64::MAX;
/// RNG stream of the fixed patch set in materialised mode.
const MATERIALIZED_STREAM: u64 = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Last epoch to run (epochs are numbered from 1).
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub patches_per_image: usize,
    /// Fixed validation patches drawn once per validation image.
    pub val_patches_per_image: usize,
    /// Draw one patch set up front and reuse it, reshuffled, every epoch.
    pub materialize: bool,
    /// Round parameters to 32-bit floats after every update so that saved
    /// checkpoints reload bit-identically.
    pub f32_storage: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            epochs: 25,
            batch: 8,
            lr: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            patience: 5,
            seed: 0,
            patches_per_image: 15_000,
            val_patches_per_image: 2_000,
            materialize: false,
            f32_storage: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return fail("batch must be ≥ 1".into());
        }
        if self.patience == 0 {
            return fail("patience must be ≥ 1".into());
        }
        if self.patches_per_image == 0 || self.val_patches_per_image == 0 {
            return fail("patches_per_image and val_patches_per_image must be ≥ 1".into());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return fail(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn steps_per_epoch(&self, images: usize) -> usize {
        (images * self.patches_per_image).div_ceil(self.batch)
    }
}

/// A preprocessed image with its binary vessel truth.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainImage {
    pub image: Raster<f64>,
    pub truth: Raster<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,train_loss,val_loss\n");
    for r in history {
        out.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss));
    }
    out
}

/// Optimiser state and bookkeeping carried between runs.
#[derive(Clone, Debug, PartialEq)]
pub struct FitState {
    pub adam: Adam,
    /// Last completed epoch.
    pub epoch: usize,
    pub best_val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights the model holds; 0 if no epoch improved on the
    /// starting point.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub state: FitState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Improved,
    Wait,
    Stop,
}

/// Patience counter over a loss that should decrease strictly.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self::resume(patience, f64::INFINITY, 0)
    }

    pub fn resume(patience: usize, best: f64, best_epoch: usize) -> Self {
        EarlyStopping {
            patience,
            best,
            best_epoch,
            bad_epochs: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, loss: f64) -> Verdict {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            Verdict::Improved
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.patience {
                Verdict::Stop
            } else {
                Verdict::Wait
            }
        }
    }
}

fn check_images(what: &str, images: &[TrainImage], patch: usize) -> Result<()> {
    if images.is_empty() {
        return Err(Error::invalid("fit", format!("{what} split is empty")));
    }
    for (i, im) in images.iter().enumerate() {
        check_dims("fit", &im.image, &im.truth)?;
        let (h, w) = im.image.dims();
        if h.min(w) < patch {
            return Err(Error::invalid(
                "fit",
                format!("{what} image {i} is {h}×{w}, smaller than the {patch}-pixel patch"),
            ));
        }
    }
    Ok(())
}

fn draw_specs(images: &[TrainImage], n: usize, patch: usize, rng: &mut ChaCha8Rng) -> Result<Vec<(usize, PatchSpec)>> {
    let mut specs = Vec::with_capacity(images.len() * n);
    for (i, im) in images.iter().enumerate() {
        let (h, w) = im.image.dims();
        specs.extend(sample_specs(h, w, n, patch, rng)?.into_iter().map(|s| (i, s)));
    }
    Ok(specs)
}

/// Stacks patches into `B×1×P×P` input and target tensors.
fn batch_tensors(images: &[TrainImage], specs: &[(usize, PatchSpec)], patch: usize) -> Result<(Tensor, Tensor)> {
    let plane = patch * patch;
    let mut x = Vec::with_capacity(specs.len() * plane);
    let mut y = Vec::with_capacity(specs.len() * plane);
    for (i, spec) in specs {
        let pair = spec.cut(&images[*i].image, &images[*i].truth, patch)?;
        x.extend_from_slice(pair.image.data());
        y.extend(pair.truth.data().iter().map(|&v| f64::from(v)));
    }
    let shape = [specs.len(), 1, patch, patch];
    Ok((Tensor::new(shape, x)?, Tensor::new(shape, y)?))
}

/// Mean validation BCE over a fixed patch set.
pub fn validation_loss(model: &Model, images: &[TrainImage], cfg: &TrainConfig) -> Result<f64> {
    let patch = model.config().patch;
    check_images("validation", images, patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(VAL_STREAM);
    let specs = draw_specs(images, cfg.val_patches_per_image, patch, &mut rng)?;
    let tape = Tape::inference();
    let mut total = 0.0;
    for chunk in specs.chunks(cfg.batch) {
        let (x, y) = batch_tensors(images, chunk, patch)?;
        let p = tape.constant(model.predict(&x)?);
        total += bce_loss(&p, &y)?.value().item() * chunk.len() as f64;
    }
    Ok(total / specs.len() as f64)
}

/// Trains with validation BCE as the early-stopping monitor.
///
/// `start` resumes from saved optimiser state; the model must then hold the
/// best weights of that earlier run. `observer` sees every finished epoch
/// with the weights reached at its end.
pub fn fit(
    model: &mut Model,
    train: &[TrainImage],
    val: &[TrainImage],
    cfg: &TrainConfig,
    start: Option<FitState>,
    observer: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<FitReport> {
    check_images("validation", val, model.config().patch)?;
    fit_with(model, train, cfg, start, |m| validation_loss(m, val, cfg), observer)
}

/// [`fit`] with a caller-supplied validation loss.
pub fn fit_with(
    model: &mut Model,
    train: &[TrainImage],
    cfg: &TrainConfig,
    start: Option<FitState>,
    mut val_loss: impl FnMut(&Model) -> Result<f64>,
    mut observer: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<FitReport> {
    cfg.validate()?;
    let patch = model.config().patch;
    if model.config().in_channels != 1 || model.config().out_channels != 1 {
        return Err(Error::Config(
            "training expects in_channels = out_channels = 1".into(),
        ));
    }
    check_images("training", train, patch)?;
    if cfg.f32_storage {
        model.params_mut().round_to_f32();
    }

    let (mut adam, first_epoch, mut stopper) = match start {
        Some(s) => {
            let mut adam = s.adam;
            adam.cfg = cfg.adam();
            (adam, s.epoch + 1, EarlyStopping::resume(cfg.patience, s.best_val_loss, s.epoch))
        }
        None => (Adam::new(cfg.adam(), model.params()), 1, EarlyStopping::new(cfg.patience)),
    };
    if adam.m.len() != model.params().len() {
        return Err(Error::Config("optimiser state does not match the model".into()));
    }

    let fixed = if cfg.materialize {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(MATERIALIZED_STREAM);
        Some(draw_specs(train, cfg.patches_per_image, patch, &mut rng)?)
    } else {
        None
    };

    let mut best_params = model.params().clone();
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut last_epoch = first_epoch - 1;
    for epoch in first_epoch..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        let mut specs = match &fixed {
            Some(specs) => specs.clone(),
            None => draw_specs(train, cfg.patches_per_image, patch, &mut rng)?,
        };
        specs.shuffle(&mut rng);

        let mut total = 0.0;
        for chunk in specs.chunks(cfg.batch) {
            let step = adam.step as usize + 1;
            let diverged = |loss: f64| Error::Divergence { epoch, step, loss };
            let (x, y) = batch_tensors(train, chunk, patch)?;
            let tape = Tape::new();
            let bound = model.params().bind(&tape);
            let input = tape.constant(x);
            let loss = match model.forward(&bound, &input).and_then(|p| bce_loss(&p, &y)) {
                Ok(l) => l,
                Err(Error::NonFinite { .. }) => return Err(diverged(f64::NAN)),
                Err(e) => return Err(e),
            };
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(diverged(value));
            }
            let grads = match tape.backward(&loss) {
                Ok(g) => bound.gradients(&g),
                Err(Error::NonFinite { .. }) => return Err(diverged(value)),
                Err(e) => return Err(e),
            };
            drop(bound);
            adam.update(model.params_mut(), &grads)?;
            if cfg.f32_storage {
                model.params_mut().round_to_f32();
            }
            if model.params().iter().any(|(_, t)| !t.is_finite()) {
                return Err(diverged(value));
            }
            total += value * chunk.len() as f64;
            log::debug!("epoch {epoch} step {step}: loss {value:.6}");
        }

        let record = EpochRecord {
            epoch,
            train_loss: total / specs.len() as f64,
            val_loss: val_loss(model)?,
        };
        log::info!(
            "epoch {epoch}: train {:.6}, val {:.6}",
            record.train_loss,
            record.val_loss
        );
        history.push(record);
        observer(&record, model)?;
        last_epoch = epoch;
        match stopper.observe(epoch, record.val_loss) {
            Verdict::Improved => best_params = model.params().clone(),
            Verdict::Wait => {}
            Verdict::Stop => {
                stopped_early = true;
                break;
            }
        }
    }

    *model.params_mut() = best_params;
    Ok(FitReport {
        history,
        best_epoch: stopper.best_epoch,
        best_val_loss: stopper.best,
        stopped_early,
        state: FitState {
            adam,
            epoch: last_epoch,
            best_val_loss: stopper.best,
        },
    })
}
