//! The training loop: batched forward/backward on a fresh tape per step,
//! Adam updates, and a per-step loss trace.

use fusedet::model::{Model, Sample};
use numcore::{derive_seed, Adam, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub l_pti: f64,
    pub l_b: f64,
    pub l_o: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_run: u64,
    pub initial_l_pti: f64,
    pub final_l_pti: f64,
    pub trace: Vec<TraceRow>,
}

/// Shuffled sample order for one epoch, derived from the run seed so any
/// step can be replayed without optimizer history.
fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "epoch-shuffle", epoch));
    order.shuffle(&mut rng);
    order
}

/// Runs optimizer steps `start_step..end`, where the end is `epochs`
/// worth of batches capped by `max_steps`. The model and optimizer are
/// advanced in place; `on_step` sees every trace row as it is produced.
pub fn train(
    model: &mut Model,
    adam: &mut Adam,
    samples: &[Sample],
    cfg: &RunConfig,
    start_step: u64,
    on_step: &mut dyn FnMut(&TraceRow),
) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(CliError::Data("training split is empty".to_string()));
    }
    let steps_per_epoch = samples.len().div_ceil(cfg.batch_size) as u64;
    let mut total_steps = cfg.epochs as u64 * steps_per_epoch;
    if let Some(cap) = cfg.max_steps {
        total_steps = total_steps.min(cap as u64);
    }
    if start_step > total_steps {
        return Err(CliError::Usage(format!(
            "checkpoint is {} steps in but the run ends at {}",
            start_step, total_steps
        )));
    }

    let mut trace = Vec::with_capacity((total_steps - start_step) as usize);
    for step in start_step..total_steps {
        let epoch = step / steps_per_epoch;
        let order = epoch_order(samples.len(), cfg.seed, epoch);
        let lo = (step % steps_per_epoch) as usize * cfg.batch_size;
        let hi = (lo + cfg.batch_size).min(samples.len());
        let batch: Vec<Sample> = order[lo..hi].iter().map(|&i| samples[i].clone()).collect();

        let mut tape = Tape::new();
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "dropout", step));
        let batch_loss = model.forward_loss(&mut tape, &batch, Some(&mut dropout_rng))?;
        let row = TraceRow {
            step,
            l_pti: tape.data(batch_loss.loss.l_pti)[0],
            l_b: tape.data(batch_loss.loss.l_b)[0],
            l_o: tape.data(batch_loss.loss.l_o)[0],
        };
        if !row.l_pti.is_finite() {
            return Err(CliError::Numeric(format!("loss is not finite at step {}", step)));
        }
        tape.backward(batch_loss.loss.l_pti).map_err(|e| CliError::Numeric(e.to_string()))?;
        let grads = tape.param_grads();

        adam.begin_step();
        let mut update_err = None;
        model.visit_params_mut(&mut |name, tensor| {
            if update_err.is_some() {
                return;
            }
            if let Some(grad) = grads.get(name) {
                if let Err(e) = adam.update(name, tensor, grad) {
                    update_err = Some(CliError::Numeric(format!("{}: {}", name, e)));
                }
            }
        });
        if let Some(e) = update_err {
            return Err(e);
        }

        on_step(&row);
        trace.push(row);
    }

    let initial = trace.first().map(|r| r.l_pti).unwrap_or(f64::NAN);
    let final_l = trace.last().map(|r| r.l_pti).unwrap_or(f64::NAN);
    Ok(TrainReport {
        steps_run: total_steps - start_step,
        initial_l_pti: initial,
        final_l_pti: final_l,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fusedet::detect::GroundTruth;
    use fusedet::model::ModelConfig;
    use numcore::{AdamConfig, Tensor};

    fn micro_samples() -> Vec<Sample> {
        let cfg = ModelConfig::micro(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let image = fusedet::init::uniform(vec![3, cfg.image_size, cfg.image_size], 0.5, &mut rng);
        let image = Tensor::new(
            image.shape().to_vec(),
            image.data().iter().map(|v| v + 0.5).collect(),
        )
        .unwrap();
        vec![Sample {
            image,
            text: Some("pale larva on bark".to_string()),
            gts: vec![GroundTruth { class_id: 0, x1: 4.0, y1: 6.0, x2: 14.0, y2: 16.0 }],
        }]
    }

    fn micro_run(max_steps: usize) -> RunConfig {
        RunConfig {
            model: ModelConfig::micro(2),
            batch_size: 1,
            epochs: 1000,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            seed: 9,
            max_steps: Some(max_steps),
        }
    }

    #[test]
    fn loss_drops_and_the_trace_is_deterministic() {
        let samples = micro_samples();
        let cfg = micro_run(30);
        let run = |offset: u64| {
            let mut model = Model::new(cfg.model.clone(), cfg.seed + offset).unwrap();
            let mut adam = Adam::new(AdamConfig {
                lr: cfg.learning_rate,
                weight_decay: cfg.weight_decay,
                ..AdamConfig::default()
            });
            train(&mut model, &mut adam, &samples, &cfg, 0, &mut |_| {}).unwrap()
        };
        let a = run(0);
        let b = run(0);
        assert_eq!(a, b);
        assert!(a.final_l_pti < a.initial_l_pti, "{} !< {}", a.final_l_pti, a.initial_l_pti);
        let c = run(1);
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn resuming_from_a_checkpoint_replays_the_same_steps() {
        let samples = micro_samples();
        let cfg = micro_run(8);

        let mut full_model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
        let mut full_adam = Adam::new(AdamConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        });
        let full = train(&mut full_model, &mut full_adam, &samples, &cfg, 0, &mut |_| {}).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.max_steps = Some(5);
        let mut model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
        let mut adam = Adam::new(AdamConfig {
            lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        });
        train(&mut model, &mut adam, &samples, &half_cfg, 0, &mut |_| {}).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mid.ckpt");
        crate::checkpoint::save(&path, &half_cfg, &model, &adam).unwrap();
        let (_, mut resumed_model, mut resumed_adam, step) =
            crate::checkpoint::load(&path).unwrap();
        assert_eq!(step, 5);

        let rest =
            train(&mut resumed_model, &mut resumed_adam, &samples, &cfg, step, &mut |_| {})
                .unwrap();
        assert_eq!(rest.trace.len(), 3);
        for (resumed, original) in rest.trace.iter().zip(&full.trace[5..]) {
            assert_eq!(resumed.step, original.step);
            assert!(
                (resumed.l_pti - original.l_pti).abs() <= 1e-12,
                "step {}: {} vs {}",
                resumed.step,
                resumed.l_pti,
                original.l_pti
            );
        }
    }

    #[test]
    fn empty_split_is_a_data_error() {
        let cfg = micro_run(1);
        let mut model = Model::new(cfg.model.clone(), 0).unwrap();
        let mut adam = Adam::new(AdamConfig::default());
        let err = train(&mut model, &mut adam, &[], &cfg, 0, &mut |_| {}).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
