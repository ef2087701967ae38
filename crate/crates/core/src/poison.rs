//! Data-poisoning transfer: reuse a pretrained trigger generator to poison a
//! fraction of a training set (triggers baked into pixels, labels flipped to
//! the sampled targets), retrain a fresh victim from scratch with ordinary
//! supervised training, and evaluate how well the attack transfers.
//!
//! This is the pure data-poisoning threat model: the adversary touches only
//! the dataset, never the training loop. The generator stays frozen
//! throughout; every poisoned row records (index, target, instruction) in a
//! manifest so it can be audited and re-derived bitwise.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{round_count, Dataset};
use crate::encoder::FeaturePipeline;
use crate::error::{Error, Result};
use crate::eval::{evaluate_asr, AsrSplit, MetricsReport};
use crate::instructions::InstructionSet;
use crate::seed::stream;
use crate::trainer::{train_clean, TrainSchedule};
use crate::trigger::{generate_trigger, inject, AttackConfig, TriggerGenerator};
use crate::victim::{Architecture, VictimModel};
use crate::Scalar;

/// How much of the dataset to poison and with which random draws. Targets are
/// sampled uniformly over the label set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoisonPlan {
    /// Fraction of samples to poison, in [0, 1].
    pub ratio: f64,
    pub seed: u64,
}

impl PoisonPlan {
    pub fn new(ratio: f64, seed: u64) -> Self {
        Self { ratio, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) || !self.ratio.is_finite() {
            return Err(Error::Config(format!(
                "poison ratio must be in [0, 1], got {}",
                self.ratio
            )));
        }
        Ok(())
    }
}

/// One poisoned row: which sample, which label it was flipped to, and the
/// instruction whose trigger was baked in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoisonRecord {
    pub index: usize,
    pub target: usize,
    pub instruction: String,
}

/// Audit record for a poisoning run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoisonManifest {
    pub format_version: u32,
    pub ratio: f64,
    pub seed: u64,
    pub epsilon: f64,
    pub records: Vec<PoisonRecord>,
}

impl PoisonManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let manifest: Self = serde_json::from_str(&text)?;
        if manifest.format_version != 1 {
            return Err(Error::FileFormat {
                path: path.display().to_string(),
                reason: format!(
                    "unsupported poison manifest version {}",
                    manifest.format_version
                ),
            });
        }
        Ok(manifest)
    }
}

/// A dataset with triggers baked into the selected rows' pixels and their
/// labels flipped to the manifest targets.
#[derive(Debug, Clone)]
pub struct PoisonedDataset<T> {
    pub data: Dataset<T>,
    /// Per-sample poisoned flag, aligned with `data`.
    pub flags: Vec<bool>,
    pub manifest: PoisonManifest,
    /// Set when ratio > 0 rounded down to zero poisoned rows.
    pub warning: Option<String>,
}

/// Bake triggers from a frozen generator into `round(ratio * N)` rows chosen
/// without replacement. Each chosen row gets a uniform target, a uniform
/// known instruction for that target, the corresponding trigger injected into
/// its pixels, and its label flipped to the target.
pub fn poison_dataset<T: Scalar>(
    data: &Dataset<T>,
    generator: &TriggerGenerator<T>,
    pipeline: &FeaturePipeline,
    instrs: &InstructionSet,
    cfg: &AttackConfig,
    plan: &PoisonPlan,
) -> Result<PoisonedDataset<T>> {
    plan.validate()?;
    cfg.validate()?;
    data.validate()?;
    let n = data.len();
    let count = round_count(plan.ratio * n as f64).min(n);

    let mut poisoned = data.clone();
    poisoned.name = format!("{}-poisoned", data.name);
    let mut flags = vec![false; n];
    let mut records = Vec::with_capacity(count);
    let mut warning = None;

    if count == 0 {
        if plan.ratio > 0.0 {
            warning = Some(format!(
                "poison ratio {} of {} samples rounds to zero rows; dataset unchanged",
                plan.ratio, n
            ));
        }
    } else {
        let mut select_rng = stream(plan.seed, "poison:select");
        let mut indices = rand::seq::index::sample(&mut select_rng, n, count).into_vec();
        indices.sort_unstable();

        let mut draw_rng = stream(plan.seed, "poison:draw");
        let classes = data.num_classes;
        for &i in &indices {
            let target = draw_rng.random_range(0..classes);
            let pool = instrs.known_for(target);
            if pool.is_empty() {
                return Err(Error::Config(format!(
                    "no known descriptions for sampled target class {target}"
                )));
            }
            let instruction = &pool[draw_rng.random_range(0..pool.len())];
            let feat = pipeline.feature_for(instruction)?;
            let trigger = generate_trigger(generator, &feat, cfg)?;
            poisoned.images[i] = inject(&data.images[i], &trigger)?;
            poisoned.labels[i] = target;
            flags[i] = true;
            records.push(PoisonRecord {
                index: i,
                target,
                instruction: instruction.text.clone(),
            });
        }
    }

    Ok(PoisonedDataset {
        data: poisoned,
        flags,
        manifest: PoisonManifest {
            format_version: 1,
            ratio: plan.ratio,
            seed: plan.seed,
            epsilon: cfg.epsilon,
            records,
        },
        warning,
    })
}

/// Fresh victim to retrain on a poisoned dataset: architecture and the seed
/// for its parameter initialization (no weight sharing with any prior model).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RetrainSpec {
    pub arch: Architecture,
    pub init_seed: u64,
}

/// Retrain from scratch on the poisoned data with plain supervised training
/// (the flipped labels carry the attack; the generator receives no gradient),
/// then score the frozen generator's triggers against the new model. Returns
/// the retrained model together with (known, unknown) attack reports.
#[allow(clippy::too_many_arguments)]
pub fn retrain_and_evaluate<T: Scalar>(
    poisoned: &PoisonedDataset<T>,
    spec: &RetrainSpec,
    sched: &TrainSchedule,
    generator: &TriggerGenerator<T>,
    pipeline: &FeaturePipeline,
    instrs: &InstructionSet,
    test: &Dataset<T>,
    cfg: &AttackConfig,
    eval_seed: u64,
) -> Result<(VictimModel<T>, MetricsReport, MetricsReport)> {
    let mut rng = stream(spec.init_seed, "poison:retrain-init");
    let mut victim = VictimModel::<T>::new(
        spec.arch,
        poisoned.data.image_shape,
        poisoned.data.num_classes,
        &mut rng,
    )?;
    train_clean(&mut victim, &poisoned.data, test, sched, None)?;
    let known = evaluate_asr(
        &victim,
        generator,
        pipeline,
        instrs,
        AsrSplit::Known,
        test,
        cfg,
        eval_seed,
        None,
    )?;
    let unknown = evaluate_asr(
        &victim,
        generator,
        pipeline,
        instrs,
        AsrSplit::Unknown,
        test,
        cfg,
        eval_seed,
        None,
    )?;
    Ok((victim, known, unknown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::flatten_params;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::encoder::{demo_set, SyntheticEncoder, SYNTHETIC_FEATURE_DIM};
    use crate::instructions::ContextTemplate;
    use crate::trigger::GENERATOR_HIDDEN_DIM;

    fn setup(
        classes: usize,
        per_class: usize,
    ) -> (
        Dataset<f64>,
        Dataset<f64>,
        TriggerGenerator<f64>,
        FeaturePipeline,
        InstructionSet,
        AttackConfig,
    ) {
        let spec = SyntheticSpec {
            classes,
            image_shape: [1, 8, 8],
            train_per_class: per_class,
            test_per_class: 10,
            pixel_noise: 0.05,
            seed: 41,
        };
        let (train, pool) = generate_synthetic::<f64>(&spec).unwrap();
        let set = demo_set(classes, 2, 1);
        let tmpl = ContextTemplate::default();
        let enc = SyntheticEncoder::with_defaults(&set, &tmpl, 41).unwrap();
        let pipeline =
            FeaturePipeline::new(Box::new(enc), tmpl, true, set.classes.clone()).unwrap();
        let generator = TriggerGenerator::<f64>::new(
            SYNTHETIC_FEATURE_DIM,
            [1, 8, 8],
            GENERATOR_HIDDEN_DIM,
            &mut stream(41, "poison:test-gen"),
        );
        let cfg = AttackConfig::new(0.05, 0.10, 41);
        (train, pool, generator, pipeline, set, cfg)
    }

    #[test]
    fn ratio_zero_leaves_the_dataset_unchanged() {
        let (train, _, generator, pipeline, set, cfg) = setup(3, 5);
        let out = poison_dataset(&train, &generator, &pipeline, &set, &cfg, &PoisonPlan::new(0.0, 9))
            .unwrap();
        assert!(out.manifest.records.is_empty());
        assert!(out.warning.is_none());
        assert!(out.flags.iter().all(|&f| !f));
        assert_eq!(out.data.labels, train.labels);
        for (a, b) in out.data.images.iter().zip(&train.images) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn exact_count_flipped_labels_and_untouched_rest() {
        let (train, _, generator, pipeline, set, cfg) = setup(4, 25); // N = 100
        let out = poison_dataset(
            &train,
            &generator,
            &pipeline,
            &set,
            &cfg,
            &PoisonPlan::new(0.10, 9),
        )
        .unwrap();
        assert_eq!(out.manifest.records.len(), 10);
        assert_eq!(out.flags.iter().filter(|&&f| f).count(), 10);

        // Manifest indices unique and sorted.
        let idx: Vec<usize> = out.manifest.records.iter().map(|r| r.index).collect();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(idx, sorted);

        for r in &out.manifest.records {
            assert_eq!(out.data.labels[r.index], r.target);
            assert!(out.flags[r.index]);
        }
        for i in 0..train.len() {
            if !out.flags[i] {
                assert_eq!(out.data.labels[i], train.labels[i]);
                assert_eq!(out.data.images[i].data(), train.images[i].data());
            }
        }
    }

    #[test]
    fn reinjecting_manifest_triggers_reproduces_rows_bitwise() {
        let (train, _, generator, pipeline, set, cfg) = setup(3, 10);
        let out = poison_dataset(
            &train,
            &generator,
            &pipeline,
            &set,
            &cfg,
            &PoisonPlan::new(0.2, 3),
        )
        .unwrap();
        assert!(!out.manifest.records.is_empty());
        for r in &out.manifest.records {
            let instr = set
                .known_for(r.target)
                .iter()
                .find(|i| i.text == r.instruction)
                .expect("manifest instruction exists")
                .clone();
            let feat = pipeline.feature_for(&instr).unwrap();
            let trigger = generate_trigger(&generator, &feat, &cfg).unwrap();
            let redone = inject(&train.images[r.index], &trigger).unwrap();
            assert_eq!(redone.data(), out.data.images[r.index].data());
        }
    }

    #[test]
    fn tiny_dataset_rounds_to_zero_with_warning() {
        let (train, _, generator, pipeline, set, cfg) = setup(2, 2); // N = 4
        let out = poison_dataset(
            &train,
            &generator,
            &pipeline,
            &set,
            &cfg,
            &PoisonPlan::new(0.1, 1),
        )
        .unwrap();
        assert!(out.manifest.records.is_empty());
        assert!(out.warning.is_some());
        assert_eq!(out.data.labels, train.labels);
    }

    #[test]
    fn selection_is_reproducible() {
        let (train, _, generator, pipeline, set, cfg) = setup(3, 20);
        let plan = PoisonPlan::new(0.15, 77);
        let a = poison_dataset(&train, &generator, &pipeline, &set, &cfg, &plan).unwrap();
        let b = poison_dataset(&train, &generator, &pipeline, &set, &cfg, &plan).unwrap();
        assert_eq!(a.manifest.records, b.manifest.records);
        assert_eq!(a.data.content_hash(), b.data.content_hash());
    }

    #[test]
    fn manifest_round_trips_through_json() {
        let (train, _, generator, pipeline, set, cfg) = setup(3, 10);
        let out = poison_dataset(
            &train,
            &generator,
            &pipeline,
            &set,
            &cfg,
            &PoisonPlan::new(0.2, 5),
        )
        .unwrap();
        let dir = std::env::temp_dir().join("bdlab-poison-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("poison-manifest.json");
        out.manifest.save(&path).unwrap();
        let loaded = PoisonManifest::load(&path).unwrap();
        assert_eq!(loaded.records, out.manifest.records);
        assert_eq!(loaded.ratio, out.manifest.ratio);
        assert_eq!(loaded.epsilon, out.manifest.epsilon);
    }

    #[test]
    fn invalid_ratio_is_rejected() {
        let (train, _, generator, pipeline, set, cfg) = setup(2, 3);
        for ratio in [-0.1, 1.5, f64::NAN] {
            assert!(poison_dataset(
                &train,
                &generator,
                &pipeline,
                &set,
                &cfg,
                &PoisonPlan::new(ratio, 1)
            )
            .is_err());
        }
    }

    #[test]
    fn retrain_never_touches_the_generator_and_unpoisoned_asr_is_base_rate() {
        let (train, test, generator, pipeline, set, cfg) = setup(3, 30);
        let out = poison_dataset(
            &train,
            &generator,
            &pipeline,
            &set,
            &cfg,
            &PoisonPlan::new(0.0, 2),
        )
        .unwrap();
        let before = flatten_params(&generator.params());
        let mut sched = TrainSchedule::new(6, 8, 3);
        sched.lr_decay = 1.0;
        let spec = RetrainSpec {
            arch: Architecture::Mlp,
            init_seed: 55,
        };
        let (victim, known, _unknown) = retrain_and_evaluate(
            &out, &spec, &sched, &generator, &pipeline, &set, &test, &cfg, 99,
        )
        .unwrap();
        assert_eq!(flatten_params(&generator.params()), before);

        // Sanity: the clean task is learned, yet an untrained-against trigger
        // succeeds only near the base rate.
        let acc = crate::eval::evaluate_acc(&victim, &test, None).unwrap();
        assert!(acc > 80.0, "retrained model should learn the task: {acc}");
        assert!(
            known.asr_mean < 60.0,
            "no poison signal, ASR should sit near base rate: {}",
            known.asr_mean
        );
    }
}
