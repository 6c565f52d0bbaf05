//! Training loop, evaluation metrics and checkpoints.

mod checkpoint;
mod metrics;
mod optim;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use checkpoint::{Checkpoint, RngState};
pub use metrics::{evaluate, Confusion, EvalReport};
pub use optim::Adam;

use crate::config::{Ablation, Config};
use crate::data::Dataset;
use crate::disentangle::mine_triplets;
use crate::error::{Error, Result};
use crate::model::{LossValues, Model, ModelShape};

/// Stream of the run generator; stream 0 of the same seed initializes parameters.
const RUN_STREAM: u64 = 1;

/// One optimization step of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub conversation: String,
    #[serde(flatten)]
    pub losses: LossValues,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

impl TrainOutcome {
    pub fn model(&self) -> Result<Model> {
        self.checkpoint.clone().into_model()
    }
}

pub fn train(config: &Config, data: &Dataset) -> Result<TrainOutcome> {
    train_with(config, data, |_| {})
}

/// Trains for `config.steps` steps, one conversation per step, visiting the
/// conversations in a freshly shuffled order every epoch. `on_step` sees
/// each record as it is produced. A non-finite loss aborts with
/// [`Error::Diverged`] holding the parameters of the last finite step.
pub fn train_with(config: &Config, data: &Dataset, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainOutcome> {
    data.validate()?;
    let mut model = Model::new(config.clone(), ModelShape::of(data))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(RUN_STREAM);
    let mut opt = Adam::new(&model.params, config.lr, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut order: Vec<usize> = (0..data.conversations.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(config.steps);
    let mine = !config.is_ablated(Ablation::Decoupler);

    for step in 0..config.steps {
        if cursor == order.len() {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let conv = &data.conversations[order[cursor]];
        cursor += 1;
        let before = Checkpoint::of(&model, step as u64, &rng);
        let triplets = if mine {
            mine_triplets(&conv.labels(), config.triplets_per_anchor, &mut rng)
        } else {
            Vec::new()
        };
        let (losses, grads) = match model.loss_and_grads(conv, &triplets) {
            Ok(r) => r,
            Err(Error::NonFinite { op }) => {
                log::error!("non-finite value in {op} at step {step}");
                return Err(Error::Diverged {
                    step,
                    last_finite: Box::new(before),
                });
            }
            Err(e) => return Err(e),
        };
        if !losses.total.is_finite() {
            return Err(Error::Diverged {
                step,
                last_finite: Box::new(before),
            });
        }
        opt.step(&mut model.params, &grads)?;
        if model.params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Diverged {
                step,
                last_finite: Box::new(before),
            });
        }
        let record = StepRecord {
            step: step as u64,
            conversation: conv.id.clone(),
            losses,
        };
        log::debug!("step {step} total {:.6}", losses.total);
        on_step(&record);
        log.push(record);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::of(&model, config.steps as u64, &rng),
        log,
    })
}

/// Held-out scores of one configuration in an ablation study.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    /// `"full"` or the disabled component's config key.
    pub name: String,
    pub train: EvalReport,
    pub test: EvalReport,
}

/// Trains the full model and each single ablation in `flags` on the seeded
/// `train_frac` split of `data` and scores them on both halves.
pub fn ablation_study(config: &Config, data: &Dataset, flags: &[Ablation]) -> Result<Vec<AblationResult>> {
    let (train_set, test_set) = crate::data::split_dataset(data, config.train_frac, config.seed)?;
    let mut runs = vec![("full".to_string(), config.clone())];
    for &a in flags {
        runs.push((a.key().to_string(), config.clone().with_ablation(a)));
    }
    runs.into_iter()
        .map(|(name, cfg)| {
            cfg.validate()?;
            let model = train(&cfg, &train_set)?.model()?;
            Ok(AblationResult {
                name,
                train: evaluate(&model, &train_set)?,
                test: evaluate(&model, &test_set)?,
            })
        })
        .collect()
}

/// Writes serializable records as JSON lines.
pub fn write_jsonl<T: Serialize>(out: &mut impl Write, records: &[T]) -> Result<()> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Io(e.into()))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};

    fn small() -> (Config, Dataset) {
        let cfg = Config::parse(
            "latent_dim=6\nbranch_dim=5\nproj_dim=3\nd_fusion=4\nn_layers=1\njacobi_order_R=2\nsynth_dim_t=5\nsynth_dim_a=4\nsynth_dim_v=3\nsynth_conversations=3\nsteps=5\n",
        )
        .unwrap();
        let data = synth_generate(&SynthSpec::from_config(&cfg), 2).unwrap();
        (cfg, data)
    }

    #[test]
    fn zero_steps_returns_initial_model() {
        let (mut cfg, data) = small();
        cfg.steps = 0;
        let out = train(&cfg, &data).unwrap();
        assert!(out.log.is_empty());
        assert_eq!(out.checkpoint.step, 0);
        let fresh = Model::new(cfg, ModelShape::of(&data)).unwrap();
        assert_eq!(out.checkpoint.params, fresh.params);
    }

    #[test]
    fn runs_are_deterministic() {
        let (cfg, data) = small();
        let a = train(&cfg, &data).unwrap();
        let b = train(&cfg, &data).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
        assert_eq!(a.log.len(), 5);
    }

    #[test]
    fn divergence_reports_last_finite_checkpoint() {
        let (mut cfg, data) = small();
        cfg.lr = 1e300;
        match train(&cfg, &data) {
            Err(Error::Diverged { step, last_finite }) => {
                assert_eq!(last_finite.step, step as u64);
                assert!(last_finite.params.iter().all(|(_, t)| t.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_has_one_object_per_line() {
        let (cfg, data) = small();
        let out = train(&cfg, &data).unwrap();
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &out.log).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert!(first.get("total").is_some() && first.get("step").is_some());
    }
}
