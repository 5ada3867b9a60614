//! Mini-batch BPR training with Adam and early stopping.

mod adam;
mod early_stop;
mod sampler;

use std::io::Write;
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use early_stop::{Decision, EarlyStopping};
pub use sampler::{sample_triples, Triple};

use crate::autodiff::{ParamStore, Tape};
use crate::checkpoint::RngState;
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::graph::BipartiteGraph;
use crate::model::{BprBatch, Idsf, ModalFeatures, ModelConfig};

/// Loop limits.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without a strict validation Recall@20 gain before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 1000,
            patience: 5,
        }
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub recall20: f64,
}

/// Outcome of [`Trainer::fit`].
#[derive(Clone, Debug)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_recall20: f64,
    pub best_params: ParamStore<f32>,
    pub best_rng: RngState,
    pub stopped_early: bool,
}

/// Owns the model, optimizer and the single random stream used for
/// initialization and then sampling.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: Idsf<f32>,
    adam: Adam<f32>,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    /// Seeds the stream from `config.seed` and initializes the model from it.
    pub fn new(config: ModelConfig, graph: Arc<BipartiteGraph>, features: &ModalFeatures) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Idsf::new(config, graph, features, &mut rng)?;
        Ok(Self::from_parts(model, rng))
    }

    pub fn from_parts(model: Idsf<f32>, rng: ChaCha8Rng) -> Self {
        let adam = Adam::new(model.config().learning_rate, model.params());
        Trainer {
            model,
            adam,
            rng,
            epoch: 0,
        }
    }

    pub fn model(&self) -> &Idsf<f32> {
        &self.model
    }

    pub fn into_model(self) -> Idsf<f32> {
        self.model
    }

    pub fn rng(&self) -> &ChaCha8Rng {
        &self.rng
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// One pass over freshly sampled triples; returns the mean batch loss.
    pub fn train_epoch(&mut self, ds: &Dataset) -> Result<f64> {
        self.epoch += 1;
        let epoch = self.epoch;
        let triples = sample_triples(ds, &mut self.rng);
        if triples.is_empty() {
            return Err(Error::Config("no training triples could be sampled".into()));
        }
        let batch_size = self.model.config().batch_size;
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in triples.chunks(batch_size).enumerate() {
            let users: Vec<usize> = chunk.iter().map(|t| t.0).collect();
            let positives: Vec<usize> = chunk.iter().map(|t| t.1).collect();
            let negatives: Vec<usize> = chunk.iter().map(|t| t.2).collect();
            let batch = BprBatch {
                users: &users,
                positives: &positives,
                negatives: &negatives,
            };
            let diverged = |detail: String| {
                log::error!(
                    "diverged at epoch {epoch} batch {b}: {detail}; first triples {:?}",
                    &chunk[..chunk.len().min(8)]
                );
                Error::Diverged {
                    epoch,
                    batch: b,
                    detail,
                }
            };
            let mut tape = Tape::new();
            let terms = match self.model.batch_loss(&mut tape, batch) {
                Err(Error::Numeric { op }) => return Err(diverged(format!("non-finite output of {op}"))),
                other => other?,
            };
            let values = terms.values(&tape);
            if !values.total.is_finite() {
                return Err(diverged(format!("loss terms {values:?}")));
            }
            let grads = tape.backward(terms.total, self.model.params())?;
            drop(tape);
            if let Some((id, _)) = grads.iter().find(|(_, g)| !g.is_finite()) {
                return Err(diverged(format!(
                    "non-finite gradient for `{}` with loss terms {values:?}",
                    self.model.params().name(id)
                )));
            }
            self.adam.step(self.model.params_mut(), &grads)?;
            total += values.total;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// Validation Recall@20 of the current parameters.
    pub fn validation_recall20(&self, ds: &Dataset) -> Result<f64> {
        let reps = self.model.representations()?;
        let report = evaluate(&reps, ds, Split::Valid, &[20])?;
        Ok(report.recall_at(20).unwrap_or(0.0))
    }

    /// Trains until validation Recall@20 stops improving or the epoch cap.
    /// Each epoch is also written as a JSON line to `progress`.
    pub fn fit(
        &mut self,
        ds: &Dataset,
        limits: &TrainConfig,
        mut progress: Option<&mut dyn Write>,
    ) -> Result<FitResult> {
        if ds.edges(Split::Valid).is_empty() {
            return Err(Error::Config(
                "early stopping needs a non-empty validation split".into(),
            ));
        }
        if limits.max_epochs == 0 || limits.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be positive".into()));
        }
        let start = Instant::now();
        let mut stopper = EarlyStopping::new(limits.patience);
        let mut history = Vec::new();
        let mut best: Option<(ParamStore<f32>, RngState)> = None;
        let mut stopped_early = false;
        for _ in 0..limits.max_epochs {
            let loss = self.train_epoch(ds)?;
            let recall20 = self.validation_recall20(ds)?;
            let epoch = self.epoch;
            history.push(EpochRecord { epoch, loss, recall20 });
            log::info!("epoch {epoch}: loss {loss:.6} valid recall@20 {recall20:.5}");
            if let Some(w) = progress.as_deref_mut() {
                let line = serde_json::json!({
                    "epoch": epoch,
                    "loss": loss,
                    "recall20": recall20,
                    "elapsed_s": start.elapsed().as_secs_f64(),
                });
                writeln!(w, "{line}")?;
            }
            match stopper.observe(epoch, recall20) {
                Decision::Improved => best = Some((self.model.params().clone(), RngState::capture(&self.rng))),
                Decision::Continue => {}
                Decision::Stop => {
                    stopped_early = true;
                    break;
                }
            }
        }
        let (best_epoch, best_recall20) = stopper.best().expect("at least one epoch ran");
        let (best_params, best_rng) = best.expect("first epoch always improves");
        Ok(FitResult {
            history,
            best_epoch,
            best_recall20,
            best_params,
            best_rng,
            stopped_early,
        })
    }
}
