//! Differentially private SGD: per-microbatch clipping plus Gaussian noise.
//!
//! Each microbatch gradient (the mean gradient of its examples) is clipped to
//! L2 norm `C` over the concatenated trainable parameters. The clipped
//! gradients are summed, `N(0, (σC)²)` noise is added to every coordinate of
//! the sum, and the result is divided by the number of microbatches before an
//! ordinary SGD step.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Gradients, LabeledBatch, ModelParams, Scratch};

/// DP-SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpConfig {
    /// σ: noise standard deviation as a multiple of the clipping threshold.
    pub noise_multiplier: f64,
    /// C: L2 bound on each microbatch gradient.
    pub clipping_threshold: f64,
    pub num_microbatches: usize,
    pub delta: f64,
}

impl DpConfig {
    pub const DEFAULT_DELTA: f64 = 1e-4;

    pub fn new(noise_multiplier: f64, clipping_threshold: f64) -> Self {
        Self {
            noise_multiplier,
            clipping_threshold,
            num_microbatches: 32,
            delta: Self::DEFAULT_DELTA,
        }
    }

    /// The three (σ, C) rows of the privacy parameter table, from weakest to
    /// strongest privacy.
    pub fn reference_rows() -> [DpConfig; 3] {
        [
            DpConfig::new(0.3, 0.5),
            DpConfig::new(0.5, 0.7),
            DpConfig::new(1.3, 1.5),
        ]
    }

    /// Checks the parameter ranges that do not depend on the data.
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_multiplier >= 0.0) {
            return Err(Error::config(format!(
                "noise multiplier must be >= 0, got {}",
                self.noise_multiplier
            )));
        }
        if !(self.clipping_threshold > 0.0) {
            return Err(Error::config(format!(
                "clipping threshold must be > 0, got {}",
                self.clipping_threshold
            )));
        }
        if self.noise_multiplier > 0.0 && !self.clipping_threshold.is_finite() {
            return Err(Error::config("noise requires a finite clipping threshold"));
        }
        if self.num_microbatches == 0 {
            return Err(Error::config("num_microbatches must be >= 1"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::config(format!("delta must be in (0,1), got {}", self.delta)));
        }
        Ok(())
    }

    /// Checks the data-dependent invariants: `delta < 1/n` and that the
    /// microbatch count divides the batch size.
    pub fn validate_for(&self, training_examples: usize, batch_size: usize) -> Result<()> {
        self.validate()?;
        if training_examples > 0 && self.delta >= 1.0 / training_examples as f64 {
            return Err(Error::config(format!(
                "delta {} must be below 1/n = 1/{training_examples}",
                self.delta
            )));
        }
        if batch_size % self.num_microbatches != 0 {
            return Err(Error::config(format!(
                "{} microbatches do not divide batch size {batch_size}",
                self.num_microbatches
            )));
        }
        Ok(())
    }
}

/// Scales `grad` down to L2 norm `threshold` if it is longer.
pub fn clip_gradient(grad: &Gradients, threshold: f64) -> Result<Gradients> {
    if !(threshold > 0.0) {
        return Err(Error::config(format!("clipping threshold must be > 0, got {threshold}")));
    }
    if !grad.is_finite() {
        return Err(Error::Numeric("cannot clip a non-finite gradient".into()));
    }
    let mut out = grad.clone();
    let norm = out.norm();
    if norm > threshold {
        out.scale(threshold / norm);
    }
    Ok(out)
}

/// What a DP step did internally; used by tests and diagnostics.
#[derive(Debug, Clone, Default)]
pub struct DpStepTrace {
    /// Norm of each microbatch gradient before clipping.
    pub raw_norms: Vec<f64>,
    /// Norm of each microbatch gradient after clipping.
    pub clipped_norms: Vec<f64>,
    /// Noise added to the clipped sum, flattened like [`Gradients::flatten`].
    pub noise: Vec<f64>,
}

/// One DP-SGD step over the whole batch with no frozen layers.
pub fn dp_sgd_step<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &LabeledBatch,
    learning_rate: f64,
    dp: &DpConfig,
    rng: &mut R,
) -> Result<ModelParams> {
    let mask = vec![false; params.num_layers()];
    dp_sgd_step_masked(params, batch, learning_rate, dp, &mask, rng)
}

/// One DP-SGD step; frozen layers are neither clipped, noised nor updated.
pub fn dp_sgd_step_masked<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &LabeledBatch,
    learning_rate: f64,
    dp: &DpConfig,
    freeze_mask: &[bool],
    rng: &mut R,
) -> Result<ModelParams> {
    batch.check_for(params)?;
    let mut out = params.clone();
    let mut ws = DpWorkspace::new(params);
    let indices: Vec<usize> = (0..batch.len()).collect();
    ws.step(&mut out, batch, &indices, learning_rate, dp, freeze_mask, rng, None)?;
    Ok(out)
}

/// [`dp_sgd_step`] that also reports norms and the sampled noise.
pub fn dp_sgd_step_traced<R: Rng + ?Sized>(
    params: &ModelParams,
    batch: &LabeledBatch,
    learning_rate: f64,
    dp: &DpConfig,
    rng: &mut R,
) -> Result<(ModelParams, DpStepTrace)> {
    batch.check_for(params)?;
    let mut out = params.clone();
    let mut ws = DpWorkspace::new(params);
    let indices: Vec<usize> = (0..batch.len()).collect();
    let mask = vec![false; params.num_layers()];
    let mut trace = DpStepTrace::default();
    ws.step(&mut out, batch, &indices, learning_rate, dp, &mask, rng, Some(&mut trace))?;
    Ok((out, trace))
}

/// Buffers reused across steps of a training run.
pub(crate) struct DpWorkspace {
    micro: Gradients,
    sum: Gradients,
    scratch: Scratch,
}

impl DpWorkspace {
    pub(crate) fn new(params: &ModelParams) -> Self {
        Self {
            micro: Gradients::zeros_like(params),
            sum: Gradients::zeros_like(params),
            scratch: Scratch::new(params),
        }
    }

    /// Applies one DP-SGD step in place over `data[indices]`; returns the mean loss.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn step<R: Rng + ?Sized>(
        &mut self,
        params: &mut ModelParams,
        data: &LabeledBatch,
        indices: &[usize],
        learning_rate: f64,
        dp: &DpConfig,
        freeze_mask: &[bool],
        rng: &mut R,
        mut trace: Option<&mut DpStepTrace>,
    ) -> Result<f64> {
        dp.validate()?;
        let microbatches = dp.num_microbatches;
        if indices.is_empty() || indices.len() % microbatches != 0 {
            return Err(Error::config(format!(
                "batch of {} is not a positive multiple of {microbatches} microbatches",
                indices.len()
            )));
        }
        let per_micro = indices.len() / microbatches;
        let first = nn::first_trainable(freeze_mask);
        let trainable = |k: usize| !freeze_mask[k];
        let clip = dp.clipping_threshold;

        self.sum.fill_zero();
        let mut total_loss = 0.0;
        for chunk in indices.chunks(per_micro) {
            self.micro.fill_zero();
            let scale = 1.0 / per_micro as f64;
            for &i in chunk {
                total_loss += nn::backward_example(
                    params,
                    data.row(i),
                    data.labels[i],
                    &mut self.scratch,
                    &mut self.micro,
                    scale,
                    first,
                );
            }
            if !self.micro.is_finite() {
                return Err(Error::Numeric("non-finite microbatch gradient".into()));
            }
            let norm = self.micro.norm_sq_masked(trainable).sqrt();
            let factor = if norm > clip { clip / norm } else { 1.0 };
            debug_assert!(
                norm * factor <= clip * (1.0 + 1e-12),
                "clipped norm {} exceeds {clip}",
                norm * factor
            );
            if let Some(t) = trace.as_deref_mut() {
                t.raw_norms.push(norm);
                t.clipped_norms.push(norm * factor);
            }
            self.sum.add_scaled(&self.micro, factor);
        }

        let std = dp.noise_multiplier * clip;
        if std > 0.0 {
            for (k, layer) in self.sum.layers.iter_mut().enumerate() {
                let frozen = !trainable(k);
                for v in layer.weights.iter_mut().chain(layer.bias.iter_mut()) {
                    // Frozen coordinates still consume a draw so the noise
                    // stream does not depend on the freeze mask.
                    let z: f64 = rng.sample(StandardNormal);
                    if frozen {
                        continue;
                    }
                    *v += std * z;
                    if let Some(t) = trace.as_deref_mut() {
                        t.noise.push(std * z);
                    }
                }
            }
        }
        self.sum.scale(1.0 / microbatches as f64);
        nn::sgd_step_in_place(params, &self.sum, learning_rate, freeze_mask)?;
        Ok(total_loss / indices.len() as f64)
    }
}
