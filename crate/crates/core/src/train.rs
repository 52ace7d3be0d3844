//! Epoch loop: shuffled mini-batches with fresh geometric augmentation,
//! invariant checks on every step and evaluation on the transform suites.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{sample_transform, transform_image, DataSource, Dataset, TestSuiteSpec, TransformSpec};
use crate::error::{Error, Result};
use crate::network::{AdamW, Diagnostics, LrSchedule, Model, ModelConfig, TrainConfig};
use crate::tensor::Tensor;

/// Tolerance for softmax row sums, affinity symmetry and unit diagonals.
pub const INVARIANT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Applied to every training image, resampled each epoch.
    pub augment: TransformSpec,
    pub suites: TestSuiteSpec,
    pub suite_seed: u64,
    pub eval_batch: usize,
    /// Evaluate every this many epochs (the last epoch always is); 0 means
    /// only at the end.
    pub eval_every: usize,
    /// Fail the run on the first routing or capsule-norm violation.
    pub check_invariants: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            model: ModelConfig::desk(4),
            train: TrainConfig::default(),
            augment: TransformSpec::symmetric(2, 180.0),
            suites: TestSuiteSpec::standard(),
            suite_seed: 7,
            eval_batch: 64,
            eval_every: 1,
            check_invariants: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteMetrics {
    pub suite: String,
    pub accuracy: f64,
    pub mean_loss: f64,
}

/// Worst invariant deviations seen during an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InvariantSummary {
    pub steps: usize,
    pub max_softmax_row_error: f64,
    pub max_affinity_asymmetry: f64,
    pub max_affinity_diagonal_error: f64,
    pub max_capsule_norm: f64,
}

impl InvariantSummary {
    fn add(&mut self, d: &Diagnostics) {
        self.steps += 1;
        self.max_softmax_row_error = self.max_softmax_row_error.max(d.routing.softmax_row_error);
        self.max_affinity_asymmetry = self.max_affinity_asymmetry.max(d.routing.symmetry_error);
        self.max_affinity_diagonal_error = self.max_affinity_diagonal_error.max(d.routing.diagonal_error);
        self.max_capsule_norm = self.max_capsule_norm.max(d.max_capsule_norm);
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch; absent for the untrained record.
    pub train_loss: Option<f64>,
    pub lr: f64,
    pub suites: Vec<SuiteMetrics>,
    pub invariants: InvariantSummary,
}

pub fn evaluate_suites(
    model: &Model,
    suites: &[Dataset],
    labels: &[String],
    batch: usize,
) -> Result<Vec<SuiteMetrics>> {
    suites
        .iter()
        .zip(labels)
        .map(|(d, name)| {
            let e = model.evaluate(d.images(), d.labels(), batch)?;
            Ok(SuiteMetrics {
                suite: name.clone(),
                accuracy: e.accuracy,
                mean_loss: e.mean_loss,
            })
        })
        .collect()
}

/// Augmented copies of `images`, one draw per image from `rng`.
pub fn augment_batch(images: &Tensor, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    if spec.is_identity() {
        return Ok(images.clone());
    }
    let out: Vec<Tensor> = (0..images.shape()[0])
        .map(|i| {
            let p = sample_transform(spec, rng);
            transform_image(&images.index_axis0(i), &p, spec)
        })
        .collect::<Result<_>>()?;
    Tensor::stack(&out)
}

/// Trains for `cfg.train.epochs` epochs. With zero epochs, evaluates the
/// untrained model once (record epoch 0). `on_epoch` sees every record and
/// the model after that epoch.
pub fn train_model(
    model: &mut Model,
    train: &Dataset,
    suites: &[Dataset],
    cfg: &RunConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.train.validate()?;
    cfg.augment.validate()?;
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let labels = cfg.suites.labels();
    if suites.len() > labels.len() {
        return Err(Error::Config(format!(
            "{} suites for {} labels",
            suites.len(),
            labels.len()
        )));
    }
    let tc = &cfg.train;
    let mut records = Vec::new();
    if tc.epochs == 0 {
        let r = EpochRecord {
            epoch: 0,
            train_loss: None,
            lr: 0.0,
            suites: evaluate_suites(model, suites, &labels, cfg.eval_batch)?,
            invariants: InvariantSummary::default(),
        };
        on_epoch(&r, model)?;
        records.push(r);
        return Ok(records);
    }
    let batches = train.len().div_ceil(tc.batch_size);
    let schedule = LrSchedule::new(tc, batches * tc.epochs);
    let mut opt = AdamW::new(model.params(), tc);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 1..=tc.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
        rng.set_stream(epoch as u64);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut inv = InvariantSummary::default();
        let mut lr = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let (x, y) = train.gather(chunk);
            let x = augment_batch(&x, &cfg.augment, &mut rng)?;
            lr = schedule.lr(step);
            let out = model.train_step(&x, &y, &mut opt, lr)?;
            if cfg.check_invariants {
                out.diagnostics.check(INVARIANT_TOL).map_err(|e| match e {
                    Error::Invariant(m) => Error::Invariant(format!("epoch {epoch} step {step}: {m}")),
                    e => e,
                })?;
            }
            inv.add(&out.diagnostics);
            loss_sum += out.loss * chunk.len() as f64;
            step += 1;
        }
        let evaluate = epoch == tc.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
        let r = EpochRecord {
            epoch,
            train_loss: Some(loss_sum / train.len() as f64),
            lr,
            suites: if evaluate {
                evaluate_suites(model, suites, &labels, cfg.eval_batch)?
            } else {
                Vec::new()
            },
            invariants: inv,
        };
        on_epoch(&r, model)?;
        records.push(r);
    }
    Ok(records)
}
