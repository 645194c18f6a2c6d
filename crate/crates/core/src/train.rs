//! Mini-batch training with Adam and a piecewise-constant learning rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::LabelSet;
use crate::losses::{sample_completeness_mask, LossBreakdown, ACTIONNESS_WEIGHT};
use crate::model::{DbgModel, ModelParameters};
use crate::optim::{adam_step, AdamConfig, OptimizerState};
use crate::tensor::{Real, Tensor};

/// Learning rate per run of epochs, e.g. `1e-3` for 10 epochs then `1e-4` for 2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub stages: Vec<(usize, f64)>,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            stages: vec![(10, 1e-3), (2, 1e-4)],
        }
    }
}

impl LrSchedule {
    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.0).sum()
    }

    /// Learning rate of zero-based `epoch`; past the end the last rate holds.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut end = 0;
        for &(n, lr) in &self.stages {
            end += n;
            if epoch < end {
                return lr;
            }
        }
        self.stages.last().map_or(0.0, |s| s.1)
    }

    /// Stretches the stages proportionally to `epochs` in total, keeping every
    /// stage at least one epoch long.
    pub fn scaled(&self, epochs: usize) -> Result<Self> {
        let total = self.total_epochs();
        if total == 0 || epochs < self.stages.len() {
            return Err(Error::Invalid(format!(
                "cannot scale a {}-stage schedule to {epochs} epochs",
                self.stages.len()
            )));
        }
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut used = 0;
        let mut cumulative = 0;
        for (k, &(n, lr)) in self.stages.iter().enumerate() {
            cumulative += n;
            let remaining_stages = self.stages.len() - k - 1;
            let target = ((cumulative * epochs) as f64 / total as f64).round() as usize;
            let len = target.saturating_sub(used).max(1).min(epochs - used - remaining_stages);
            stages.push((len, lr));
            used += len;
        }
        Ok(Self { stages })
    }

    /// Parses `lr:epochs` stages separated by commas, e.g. `1e-3:10,1e-4:2`.
    pub fn parse(spec: &str) -> Result<Self> {
        let bad = || Error::Invalid(format!("expected lr:epochs[,lr:epochs…], got {spec:?}"));
        let stages = spec
            .split(',')
            .map(|part| {
                let (lr, n) = part.trim().split_once(':').ok_or_else(bad)?;
                let lr: f64 = lr.trim().parse().map_err(|_| bad())?;
                let n: usize = n.trim().parse().map_err(|_| bad())?;
                if !(lr.is_finite() && lr > 0.0) || n == 0 {
                    return Err(bad());
                }
                Ok((n, lr))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { stages })
    }

    pub fn label(&self) -> String {
        self.stages.iter().map(|(n, lr)| format!("{lr:e}:{n}")).collect::<Vec<_>>().join(",")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub actionness_weight: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            schedule: LrSchedule::default(),
            actionness_weight: ACTIONNESS_WEIGHT,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if self.schedule.total_epochs() == 0 {
            return Err(Error::Invalid("learning-rate schedule has no epochs".into()));
        }
        if !(self.actionness_weight.is_finite() && self.actionness_weight >= 0.0) {
            return Err(Error::Invalid(format!("actionness weight must be >= 0, got {}", self.actionness_weight)));
        }
        Ok(())
    }
}

/// One network input with its targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample<T> {
    pub id: String,
    pub spatial: Tensor<T>,
    pub temporal: Tensor<T>,
    pub labels: LabelSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    /// One-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    /// Mean over samples of the losses seen during the epoch.
    pub losses: LossBreakdown,
    pub steps: usize,
    /// Samples whose balanced losses fell back to unweighted or whose
    /// completeness mask missed an IoU bin.
    pub flagged: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ModelParameters<T>,
    pub history: Vec<EpochReport>,
    pub steps: usize,
}

type SampleResult<T> = Result<(LossBreakdown, ModelParameters<T>, bool)>;

fn batch_gradients<T: Real>(
    model: &DbgModel<T>,
    samples: &[TrainSample<T>],
    batch: &[(usize, Vec<bool>)],
    weight: f64,
) -> Vec<SampleResult<T>> {
    let run = |(k, mask): &(usize, Vec<bool>)| {
        let s = &samples[*k];
        model.loss_and_gradients(&s.spatial, &s.temporal, &s.labels, mask, weight)
    };
    #[cfg(feature = "parallel")]
    {
        batch.par_iter().map(run).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        batch.iter().map(run).collect()
    }
}

/// Trains `params` on `samples`. Per-sample gradients of a batch may be
/// computed in parallel but are always summed in batch order, so results do
/// not depend on the thread count. `on_epoch` runs after every epoch.
pub fn train<T: Real>(
    params: ModelParameters<T>,
    samples: &[TrainSample<T>],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &ModelParameters<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Invalid("training corpus is empty".into()));
    }
    let length = params.config().length;
    for s in samples {
        if s.labels.length != length {
            return Err(Error::Annotation {
                id: s.id.clone(),
                msg: format!("labels for L={} but the model has L={length}", s.labels.length),
            });
        }
    }

    let mut model = DbgModel::new(params)?;
    let mut state = OptimizerState::new(model.params(), config.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.schedule.total_epochs());
    let mut steps = 0;

    for epoch in 0..config.schedule.total_epochs() {
        let lr = config.schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = LossBreakdown::default();
        let mut flagged = 0;
        let epoch_steps_before = steps;

        for chunk in order.chunks(config.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &k in chunk {
                let m = sample_completeness_mask(&samples[k].labels.completeness, length, &mut rng)?;
                flagged += usize::from(m.degenerate);
                batch.push((k, m.mask));
            }
            let results = batch_gradients(&model, samples, &batch, config.actionness_weight);

            let mut grad_sum = model.params().zeros_like();
            for ((k, _), r) in batch.iter().zip(results) {
                let id = &samples[*k].id;
                let (loss, grads, degenerate) = r.map_err(|e| match e {
                    Error::NonFinite { stage } => Error::NonFinite {
                        stage: format!("{stage} of sample {id}"),
                    },
                    other => other,
                })?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        stage: format!("loss of sample {id}"),
                    });
                }
                flagged += usize::from(degenerate);
                epoch_loss.accumulate(&loss, 1.0 / samples.len() as f64);
                grad_sum.add_scaled(&grads, T::one());
            }
            let inv = T::one() / T::from_usize_lossy(batch.len());
            grad_sum.tensors_mut().for_each(|t| t.scale(inv));
            adam_step(model.params_mut(), &grad_sum, &mut state, lr)?;
            steps += 1;
        }

        let report = EpochReport {
            epoch: epoch + 1,
            lr,
            losses: epoch_loss,
            steps: steps - epoch_steps_before,
            flagged,
        };
        on_epoch(&report, model.params())?;
        history.push(report);
    }

    Ok(TrainOutcome {
        params: model.into_params(),
        history,
        steps,
    })
}

/// Loss history as CSV, one row per epoch.
pub fn history_csv(history: &[EpochReport]) -> String {
    let mut s = String::from(LossBreakdown::CSV_HEADER);
    s.push_str(",lr,flagged\n");
    for r in history {
        s.push_str(&format!("{},{:e},{}\n", r.losses.csv_row(r.epoch), r.lr, r.flagged));
    }
    s
}
