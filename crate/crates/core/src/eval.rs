//! Metrics: clean accuracy, per-class attack success rate under known and
//! unknown instruction splits, and semi-targeted success.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::FeaturePipeline;
use crate::error::{Error, Result};
use crate::instructions::{Instruction, InstructionSet};
use crate::scalar::Scalar;
use crate::seed::{stream, SequenceHash};
use crate::tensor::Tensor;
use crate::trigger::{generate_trigger, inject, AttackConfig, Trigger, TriggerGenerator};
use crate::victim::{stack_images, VictimModel};

const EVAL_BATCH: usize = 64;

/// Input sanitization hook applied to every image right before the victim
/// model sees it — the interface input-side defenses implement. `None`
/// everywhere means the model sees raw pixels.
pub trait InputFilter<T: Scalar>: Sync {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Which instruction pool an attack evaluation draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsrSplit {
    Known,
    Unknown,
}

impl AsrSplit {
    pub fn tag(self) -> &'static str {
        match self {
            AsrSplit::Known => "known",
            AsrSplit::Unknown => "unknown",
        }
    }
}

/// Accuracy and attack-success summary for one instruction split.
///
/// `asr_per_class[y]` is the success percentage when every test sample is
/// attacked toward class `y`; `None` marks a class skipped because the split
/// holds no instruction for it (also listed in `skipped_classes`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split_tag: String,
    pub acc: f64,
    pub asr_mean: f64,
    pub asr_per_class: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
    /// Hash of the (class, instruction-index) draw sequence; equal seeds must
    /// reproduce it exactly.
    pub draw_hash: String,
}

impl MetricsReport {
    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| (0.0..=100.0).contains(&v);
        if !in_range(self.acc) || !in_range(self.asr_mean) {
            return Err(Error::Numerical(format!(
                "percentages out of range: acc={}, asr_mean={}",
                self.acc, self.asr_mean
            )));
        }
        if self.asr_per_class.iter().flatten().any(|&v| !in_range(v)) {
            return Err(Error::Numerical(
                "per-class rate out of [0, 100]".to_string(),
            ));
        }
        Ok(())
    }
}

/// Run images through the optional filter and the model, returning argmax
/// predictions. Batching never changes per-sample arithmetic: every sample
/// flows through the same per-row kernels regardless of its batch.
/// Batched argmax predictions, with inputs optionally routed through an
/// input-sanitizing filter first.
pub fn predict<T: Scalar>(
    model: &VictimModel<T>,
    images: &[Tensor<T>],
    filter: Option<&dyn InputFilter<T>>,
) -> Result<Vec<usize>> {
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let batch = match filter {
            Some(f) => {
                let cleaned = chunk.iter().map(|x| f.apply(x)).collect::<Result<Vec<_>>>()?;
                stack_images(&cleaned)?
            }
            None => stack_images(chunk)?,
        };
        let logits = model.logits(batch)?;
        preds.extend(crate::nn::argmax_rows(&logits));
    }
    Ok(preds)
}

/// Percentage of test samples the model labels correctly.
pub fn evaluate_acc<T: Scalar>(
    model: &VictimModel<T>,
    test: &Dataset<T>,
    filter: Option<&dyn InputFilter<T>>,
) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Config("accuracy over an empty test set".into()));
    }
    let preds = predict(model, &test.images, filter)?;
    let correct = preds
        .iter()
        .zip(&test.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(100.0 * correct as f64 / test.len() as f64)
}

fn trigger_for<T: Scalar>(
    generator: &TriggerGenerator<T>,
    pipeline: &FeaturePipeline,
    instr: &Instruction,
    cfg: &AttackConfig,
) -> Result<Trigger<T>> {
    let feat = pipeline.feature_for(instr)?;
    generate_trigger(generator, &feat, cfg)
}

/// Attack success rates, one class at a time: every test sample is attacked
/// toward class `y` with an instruction drawn per sample (seeded) from the
/// split's pool for `y`, and counts as a success iff the model predicts `y`.
pub fn evaluate_asr<T: Scalar>(
    victim: &VictimModel<T>,
    generator: &TriggerGenerator<T>,
    pipeline: &FeaturePipeline,
    instrs: &InstructionSet,
    split: AsrSplit,
    test: &Dataset<T>,
    cfg: &AttackConfig,
    eval_seed: u64,
    filter: Option<&dyn InputFilter<T>>,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::Config("attack evaluation over an empty test set".into()));
    }
    cfg.validate()?;
    let classes = instrs.num_classes();
    let mut per_class: Vec<Option<f64>> = Vec::with_capacity(classes);
    let mut skipped = Vec::new();
    let mut draws = SequenceHash::new();

    for y in 0..classes {
        let pool: &[Instruction] = match split {
            AsrSplit::Known => instrs.known_for(y),
            AsrSplit::Unknown => instrs.unknown_for(y),
        };
        if pool.is_empty() {
            skipped.push(y);
            per_class.push(None);
            continue;
        }
        // One trigger per distinct instruction; the per-sample draw picks
        // among them.
        let triggers: Vec<Trigger<T>> = pool
            .iter()
            .map(|instr| trigger_for(generator, pipeline, instr, cfg))
            .collect::<Result<_>>()?;
        let mut rng = stream(eval_seed, &format!("eval:{}:{y}", split.tag()));
        let mut successes = 0usize;
        for chunk_start in (0..test.len()).step_by(EVAL_BATCH) {
            let chunk_end = (chunk_start + EVAL_BATCH).min(test.len());
            let mut attacked = Vec::with_capacity(chunk_end - chunk_start);
            for i in chunk_start..chunk_end {
                let k = rng.random_range(0..pool.len());
                draws.push(y as u64);
                draws.push(k as u64);
                attacked.push(inject(&test.images[i], &triggers[k])?);
            }
            let preds = predict(victim, &attacked, filter)?;
            successes += preds.iter().filter(|&&p| p == y).count();
        }
        per_class.push(Some(100.0 * successes as f64 / test.len() as f64));
    }

    let evaluated: Vec<f64> = per_class.iter().flatten().copied().collect();
    if evaluated.is_empty() {
        return Err(Error::Config(format!(
            "instruction split '{}' holds no instructions for any class",
            split.tag()
        )));
    }
    let report = MetricsReport {
        split_tag: split.tag().to_string(),
        acc: evaluate_acc(victim, test, filter)?,
        asr_mean: evaluated.iter().sum::<f64>() / evaluated.len() as f64,
        asr_per_class: per_class,
        skipped_classes: skipped,
        draw_hash: format!("{:016x}", draws.value()),
    };
    report.validate()?;
    Ok(report)
}

/// Success percentage of a single instruction whose goal is "any class in
/// `allowed`": every test sample is attacked with that instruction's trigger
/// and counts iff the prediction lands in the allowed set.
pub fn evaluate_semi_targeted<T: Scalar>(
    victim: &VictimModel<T>,
    generator: &TriggerGenerator<T>,
    pipeline: &FeaturePipeline,
    text: &str,
    allowed: &[usize],
    test: &Dataset<T>,
    cfg: &AttackConfig,
    filter: Option<&dyn InputFilter<T>>,
) -> Result<f64> {
    if allowed.is_empty() {
        return Err(Error::Config(
            "semi-targeted evaluation needs a non-empty allowed set".into(),
        ));
    }
    if test.is_empty() {
        return Err(Error::Config("attack evaluation over an empty test set".into()));
    }
    if let Some(&bad) = allowed.iter().find(|&&c| c >= victim.num_classes()) {
        return Err(Error::Config(format!(
            "allowed class {bad} out of range for {} classes",
            victim.num_classes()
        )));
    }
    let trigger = trigger_for(generator, pipeline, &Instruction::untargeted(text), cfg)?;
    let attacked = test
        .images
        .iter()
        .map(|x| inject(x, &trigger))
        .collect::<Result<Vec<_>>>()?;
    let preds = predict(victim, &attacked, filter)?;
    let hits = preds.iter().filter(|p| allowed.contains(p)).count();
    Ok(100.0 * hits as f64 / test.len() as f64)
}
