//! Per-round training schedules, transfer-learning pretraining and the local
//! training loop.
//!
//! The first federated round trains only the softmax head (every other layer
//! frozen) for 10 epochs at 1e-3, then fine-tunes the whole network for 30
//! epochs at 1e-4. Every later round is 10 epochs at 1e-4 with nothing frozen.
//! Batch size is 32 throughout.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dp::{DpConfig, DpWorkspace};
use crate::error::{Error, Result};
use crate::nn::{self, Activation, Dense, Gradients, LabeledBatch, ModelParams, ParamDelta};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// One entry per layer; `true` = frozen.
    pub freeze_mask: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundSchedule {
    pub round: u32,
    pub phases: Vec<Phase>,
}

impl RoundSchedule {
    /// The reference schedule for `round` on a model with `num_layers` layers.
    pub fn reference(round: u32, num_layers: usize) -> Self {
        SchedulePlan::default().for_round(round, num_layers)
    }

    /// Structural checks: round-1 schedules have a head-only phase followed by
    /// a fine-tuning phase, later rounds have a single phase, masks match the
    /// model depth.
    pub fn validate(&self, round: u32, num_layers: usize) -> Result<()> {
        if round == 0 {
            return Err(Error::config("rounds are numbered from 1"));
        }
        if self.round != round {
            return Err(Error::config(format!(
                "schedule is for round {} but round {round} was requested",
                self.round
            )));
        }
        let expected_phases = if round == 1 { 2 } else { 1 };
        if self.phases.len() != expected_phases {
            return Err(Error::config(format!(
                "round {round} needs {expected_phases} phase(s), schedule has {}",
                self.phases.len()
            )));
        }
        for (i, phase) in self.phases.iter().enumerate() {
            if phase.freeze_mask.len() != num_layers {
                return Err(Error::config(format!(
                    "phase {i} freeze mask has {} entries for {num_layers} layers",
                    phase.freeze_mask.len()
                )));
            }
            if phase.batch_size == 0 {
                return Err(Error::config(format!("phase {i} has batch size 0")));
            }
            if !(phase.learning_rate >= 0.0 && phase.learning_rate.is_finite()) {
                return Err(Error::config(format!(
                    "phase {i} learning rate {} is invalid",
                    phase.learning_rate
                )));
            }
        }
        Ok(())
    }

    /// Optimizer steps this schedule takes over `n` examples.
    pub fn steps(&self, n: usize, dp: Option<&DpConfig>) -> u64 {
        self.phases
            .iter()
            .map(|p| u64::from(p.epochs) * batches_per_epoch(n, p.batch_size, dp) as u64)
            .sum()
    }

    pub fn total_epochs(&self) -> u32 {
        self.phases.iter().map(|p| p.epochs).sum()
    }
}

/// Batches per epoch. DP steps need a whole number of microbatches, so a
/// trailing partial batch is dropped under DP.
pub(crate) fn batches_per_epoch(n: usize, batch_size: usize, dp: Option<&DpConfig>) -> usize {
    match dp {
        None => n.div_ceil(batch_size),
        Some(dp) => {
            let full = n / batch_size;
            let tail = n % batch_size;
            full + usize::from(tail > 0 && tail % dp.num_microbatches == 0)
        }
    }
}

/// Generates a [`RoundSchedule`] per round. The default is the reference
/// schedule; the fields exist so experiments can shorten it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulePlan {
    pub head_epochs: u32,
    pub head_learning_rate: f64,
    pub finetune_epochs: u32,
    pub finetune_learning_rate: f64,
    pub later_epochs: u32,
    pub later_learning_rate: f64,
    pub batch_size: usize,
}

impl Default for SchedulePlan {
    fn default() -> Self {
        Self {
            head_epochs: 10,
            head_learning_rate: 1e-3,
            finetune_epochs: 30,
            finetune_learning_rate: 1e-4,
            later_epochs: 10,
            later_learning_rate: 1e-4,
            batch_size: 32,
        }
    }
}

impl SchedulePlan {
    /// A plan that trains nothing.
    pub fn zero_epochs() -> Self {
        Self {
            head_epochs: 0,
            finetune_epochs: 0,
            later_epochs: 0,
            ..Self::default()
        }
    }

    pub fn for_round(&self, round: u32, num_layers: usize) -> RoundSchedule {
        let none_frozen = vec![false; num_layers];
        let phases = if round <= 1 {
            let mut head_only = vec![true; num_layers];
            if let Some(last) = head_only.last_mut() {
                *last = false;
            }
            vec![
                Phase {
                    epochs: self.head_epochs,
                    learning_rate: self.head_learning_rate,
                    batch_size: self.batch_size,
                    freeze_mask: head_only,
                },
                Phase {
                    epochs: self.finetune_epochs,
                    learning_rate: self.finetune_learning_rate,
                    batch_size: self.batch_size,
                    freeze_mask: none_frozen,
                },
            ]
        } else {
            vec![Phase {
                epochs: self.later_epochs,
                learning_rate: self.later_learning_rate,
                batch_size: self.batch_size,
                freeze_mask: none_frozen,
            }]
        };
        RoundSchedule { round, phases }
    }

    /// Total optimizer steps over rounds `1..=rounds` on `n` examples.
    pub fn total_steps(&self, rounds: u32, n: usize, num_layers: usize, dp: Option<&DpConfig>) -> u64 {
        (1..=rounds)
            .map(|r| self.for_round(r, num_layers).steps(n, dp))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    DpSgd(DpConfig),
}

impl Optimizer {
    pub fn from_dp(dp: Option<DpConfig>) -> Self {
        dp.map_or(Optimizer::Sgd, Optimizer::DpSgd)
    }

    pub fn dp(&self) -> Option<&DpConfig> {
        match self {
            Optimizer::Sgd => None,
            Optimizer::DpSgd(dp) => Some(dp),
        }
    }
}

/// Result of [`run_round_schedule`]. `params == initial + delta` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub params: ModelParams,
    pub delta: ParamDelta,
    pub steps: u64,
    /// Mean training loss of the last epoch, if any epoch ran.
    pub last_epoch_loss: Option<f64>,
}

/// Trains `params` on `data` following `schedule`. Example order is
/// reshuffled every epoch from an RNG seeded with `seed`; DP noise uses a
/// separate stream of the same seed.
pub fn run_round_schedule(
    params: &ModelParams,
    data: &LabeledBatch,
    schedule: &RoundSchedule,
    round: u32,
    optimizer: &Optimizer,
    seed: u64,
) -> Result<RoundOutcome> {
    if data.is_empty() {
        return Err(Error::config("no training data"));
    }
    schedule.validate(round, params.num_layers())?;
    data.check_for(params)?;
    if let Some(dp) = optimizer.dp() {
        dp.validate()?;
    }

    let mut shuffle_rng = seed::stream(seed, 0);
    let mut noise_rng = seed::stream(seed, 1);
    let mut model = params.clone();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut grad = Gradients::zeros_like(params);
    let mut dp_ws = optimizer.dp().map(|_| DpWorkspace::new(params));
    let mut steps = 0u64;
    let mut last_epoch_loss = None;

    for phase in &schedule.phases {
        let first = nn::first_trainable(&phase.freeze_mask);
        for _ in 0..phase.epochs {
            order.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(phase.batch_size) {
                let loss = match (optimizer, dp_ws.as_mut()) {
                    (Optimizer::DpSgd(dp), Some(ws)) => {
                        if chunk.len() % dp.num_microbatches != 0 {
                            continue;
                        }
                        ws.step(
                            &mut model,
                            data,
                            chunk,
                            phase.learning_rate,
                            dp,
                            &phase.freeze_mask,
                            &mut noise_rng,
                            None,
                        )?
                    }
                    _ => {
                        grad.fill_zero();
                        let loss = nn::accumulate_batch(&model, data, Some(chunk), &mut grad, first)?;
                        nn::sgd_step_in_place(&mut model, &grad, phase.learning_rate, &phase.freeze_mask)?;
                        loss
                    }
                };
                epoch_loss += loss;
                batches += 1;
                steps += 1;
            }
            if batches > 0 {
                last_epoch_loss = Some(epoch_loss / batches as f64);
            }
        }
    }

    let delta = model.delta_from(params, round)?;
    if !delta.is_finite() {
        return Err(Error::Numeric("training diverged".into()));
    }
    let mut out = params.apply_delta(&delta)?;
    out.version = params.version;
    Ok(RoundOutcome {
        params: out,
        delta,
        steps,
        last_epoch_loss,
    })
}

/// Settings for training the source-task model that seeds transfer learning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: u32,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Hidden layer widths; input and output widths come from the data.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.05,
            batch_size: 32,
            hidden: vec![64, 32],
            seed: 0,
        }
    }
}

/// Trains a model on the source task with plain SGD from a seeded Glorot init.
pub fn train_source_model(
    source: &LabeledBatch,
    source_classes: usize,
    config: &PretrainConfig,
) -> Result<ModelParams> {
    if source.is_empty() {
        return Err(Error::config("empty source dataset"));
    }
    if config.batch_size == 0 {
        return Err(Error::config("pretraining batch size must be >= 1"));
    }
    let mut dims = vec![source.dim()];
    dims.extend(&config.hidden);
    dims.push(source_classes);
    let mut init_rng = seed::stream(config.seed, 0);
    let mut model = ModelParams::glorot(&dims, &mut init_rng);
    source.check_for(&model)?;

    let mut rng = seed::stream(config.seed, 1);
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut grad = Gradients::zeros_like(&model);
    let mask = vec![false; model.num_layers()];
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            grad.fill_zero();
            nn::accumulate_batch(&model, source, Some(chunk), &mut grad, 0)?;
            nn::sgd_step_in_place(&mut model, &grad, config.learning_rate, &mask)?;
        }
    }
    model.validate()?;
    Ok(model)
}

/// Replaces the final layer with a freshly initialized softmax layer for
/// `classes` outputs, keeping every earlier layer.
pub fn swap_head(model: &ModelParams, classes: usize, seed: u64) -> ModelParams {
    let mut out = model.clone();
    let last = out.layers.len() - 1;
    let inputs = out.layers[last].inputs;
    let mut rng = seed::stream(seed, 2);
    out.layers[last] = Dense::glorot(inputs, classes, Activation::Softmax, &mut rng);
    out.version = 0;
    out
}

/// Pretrains on the source task, then re-heads the model for the target task.
pub fn pretrain_transfer_model(
    source: &LabeledBatch,
    source_classes: usize,
    target_dim: usize,
    target_classes: usize,
    config: &PretrainConfig,
) -> Result<ModelParams> {
    if source.dim() != target_dim {
        return Err(Error::config(format!(
            "source features have dimension {} but the target task uses {target_dim}",
            source.dim()
        )));
    }
    let trained = train_source_model(source, source_classes, config)?;
    Ok(swap_head(&trained, target_classes, config.seed))
}

/// A randomly initialized model for the target task; the non-transfer baseline.
pub fn random_init(dims: &[usize], seed: u64) -> ModelParams {
    let mut rng = seed::stream(seed, 0);
    ModelParams::glorot(dims, &mut rng)
}
