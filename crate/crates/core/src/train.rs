//! Minibatch training with per-group learning rates and best-validation
//! tracking.

use crate::config::TrainingSpec;
use crate::distributions::Prng;
use crate::error::Result;
use crate::numerics::{adam_step, AdamState, Tensor};
use crate::scm::{Observation, Scm};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochMetric {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EpochMetric>,
    pub best_epoch: Option<usize>,
    /// Optimisation steps taken across the whole run, including any resumed
    /// prefix.
    pub steps: u64,
    /// Parameter snapshot at the best validation loss.
    pub best_params: Vec<Vec<f64>>,
}

/// All learnable parameters of a graph, flow group first, then
/// encoder/decoder group; order is deterministic in the node list.
pub fn parameter_groups(scm: &Scm) -> (Vec<Tensor>, Vec<Tensor>) {
    let mut flows = Vec::new();
    let mut encdec = Vec::new();
    for node in scm.nodes() {
        if let Some(m) = node.mechanism() {
            let (f, e) = m.params_grouped();
            flows.extend(f);
            encdec.extend(e);
        }
    }
    (flows, encdec)
}

pub fn all_parameters(scm: &Scm) -> Vec<Tensor> {
    let (mut flows, encdec) = parameter_groups(scm);
    flows.extend(encdec);
    flows
}

pub fn snapshot(params: &[Tensor]) -> Vec<Vec<f64>> {
    params.iter().map(|p| p.data()).collect()
}

pub fn restore(params: &[Tensor], snapshot: &[Vec<f64>]) -> Result<()> {
    for (p, s) in params.iter().zip(snapshot) {
        p.set_data(s)?;
    }
    Ok(())
}

/// Train in place. The negative joint objective is the loss; validation runs
/// once per epoch with a fixed noise stream so epochs are comparable.
pub fn train(
    scm: &Scm,
    train_obs: &Observation,
    val_obs: &Observation,
    spec: &TrainingSpec,
    start_step: u64,
    mut progress: impl FnMut(&EpochMetric),
) -> Result<TrainOutcome> {
    let (flow_params, encdec_params) = parameter_groups(scm);
    let all: Vec<Tensor> = flow_params
        .iter()
        .chain(encdec_params.iter())
        .cloned()
        .collect();
    let mut flow_adam = AdamState::new(spec.lr_flows);
    let mut encdec_adam = AdamState::new(spec.lr_encoder_decoder);
    flow_adam.step = start_step;
    encdec_adam.step = start_step;

    let n = train_obs.len();
    let batch = spec.batch_size.max(1).min(n);
    let mut metrics = Vec::with_capacity(spec.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut best_params = snapshot(&all);
    let mut steps = start_step;

    for epoch in 0..spec.epochs {
        let mut shuffle_rng = Prng::substream(spec.seed, (1 << 32) | epoch as u64);
        let order = shuffle_rng.shuffled_indices(n);
        let mut particle_rng = Prng::substream(spec.seed, (2 << 32) | epoch as u64);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        let mut start = 0;
        while start < n {
            let idx = &order[start..(start + batch).min(n)];
            let part = train_obs.rows(idx)?;
            let objective = scm.joint_objective(&part, spec.particles, &mut particle_rng)?;
            let loss = objective.mul_scalar(-1.0);
            epoch_loss += loss.item();
            loss.backward()?;
            if !flow_params.is_empty() {
                adam_step(&flow_params, &mut flow_adam)?;
            }
            if !encdec_params.is_empty() {
                adam_step(&encdec_params, &mut encdec_adam)?;
            }
            steps += 1;
            batches += 1;
            start += batch;
        }
        // fixed validation noise keeps epoch losses comparable
        let mut val_rng = Prng::substream(spec.seed, 3 << 32);
        let val_loss = -scm
            .joint_objective(val_obs, spec.particles, &mut val_rng)?
            .item();
        let metric = EpochMetric {
            epoch,
            train_loss: epoch_loss / batches.max(1) as f64,
            val_loss,
        };
        progress(&metric);
        if best.map_or(true, |(_, b)| val_loss < b) {
            best = Some((epoch, val_loss));
            best_params = snapshot(&all);
        }
        metrics.push(metric);
    }
    Ok(TrainOutcome {
        metrics,
        best_epoch: best.map(|(e, _)| e),
        steps,
        best_params,
    })
}
