//! Joint training: the victim classifier and the trigger generator are
//! optimized together on minibatches that mix clean samples with samples
//! carrying instruction-conditioned triggers and relabeled targets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{flatten_params, unflatten_params};
use crate::data::{round_count, Dataset};
use crate::encoder::FeaturePipeline;
use crate::error::{Error, Result};
use crate::eval::evaluate_acc;
use crate::instructions::{Instruction, InstructionSet};
use crate::scalar::Scalar;
use crate::seed::{stream, SequenceHash};
use crate::tensor::Tensor;
use crate::trigger::{generate_trigger, inject, AttackConfig, TriggerGenerator};
use crate::victim::{stack_images, VictimModel};

/// Per-epoch probe size for the known-instruction success-rate log entry.
const PROBE_SAMPLES: usize = 128;

/// One minibatch member elected for trigger injection.
#[derive(Debug, Clone)]
pub struct BackdoorSample {
    /// Index into the training dataset.
    pub index: usize,
    /// Sampled target class (uniform over all classes, the true label
    /// included).
    pub target: usize,
    /// Sampled instruction for the target, drawn uniformly from its pool.
    pub instruction: Instruction,
}

/// A minibatch partitioned into clean and trigger-carrying samples.
#[derive(Debug, Clone, Default)]
pub struct MinibatchSplit {
    /// Dataset indices trained with their true labels.
    pub clean: Vec<usize>,
    pub backdoor: Vec<BackdoorSample>,
}

impl MinibatchSplit {
    pub fn all_clean(batch: &[usize]) -> Self {
        Self {
            clean: batch.to_vec(),
            backdoor: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.clean.len() + self.backdoor.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Partition a minibatch: `round(p · |batch|)` members (ties to even) are
/// chosen for injection, each with a uniformly sampled target class and an
/// instruction drawn uniformly from that class's pool.
pub fn split_minibatch(
    batch: &[usize],
    labels_hint: usize,
    cfg: &AttackConfig,
    instrs: &InstructionSet,
    rng: &mut impl Rng,
) -> Result<MinibatchSplit> {
    if batch.is_empty() {
        return Err(Error::Config("cannot split an empty minibatch".into()));
    }
    cfg.validate()?;
    let classes = instrs.num_classes();
    if classes != labels_hint {
        return Err(Error::Config(format!(
            "instruction set covers {classes} classes, dataset has {labels_hint}"
        )));
    }
    let take = round_count(cfg.p * batch.len() as f64);
    let mut chosen = rand::seq::index::sample(rng, batch.len(), take).into_vec();
    chosen.sort_unstable();
    let mut backdoor = Vec::with_capacity(take);
    let mut clean = Vec::with_capacity(batch.len() - take);
    let mut next_chosen = 0usize;
    for (pos, &index) in batch.iter().enumerate() {
        if next_chosen < chosen.len() && chosen[next_chosen] == pos {
            next_chosen += 1;
            let target = rng.random_range(0..classes);
            let mut pool = instrs.known_for(target);
            if pool.is_empty() {
                return Err(Error::Config(format!(
                    "sampled target class {target} has no known descriptions to draw from"
                )));
            }
            if !cfg.use_lexical_variations {
                // Lexical-variation ablation: train on the canonical (first)
                // description only.
                pool = &pool[..1];
            }
            let instruction = pool[rng.random_range(0..pool.len())].clone();
            backdoor.push(BackdoorSample {
                index,
                target,
                instruction,
            });
        } else {
            clean.push(index);
        }
    }
    Ok(MinibatchSplit { clean, backdoor })
}

/// The victim-ready form of a split: images stacked (clean rows first, then
/// injected rows), per-row targets and loss weights, plus what the generator
/// backward pass needs.
struct AssembledBatch<T> {
    input: Tensor<T>,
    targets: Vec<usize>,
    weights: Vec<T>,
    /// Present iff the split carries backdoor samples.
    gen_cache: Option<crate::trigger::GeneratorCache<T>>,
    /// Per-pixel gate for injected rows: 1 where the pixel-clipping left the
    /// perturbation gradient alive, 0 where the clip saturated.
    clip_gate: Vec<T>,
}

fn assemble_batch<T: Scalar>(
    generator: &TriggerGenerator<T>,
    split: &MinibatchSplit,
    data: &Dataset<T>,
    pipeline: &FeaturePipeline,
    cfg: &AttackConfig,
) -> Result<AssembledBatch<T>> {
    if split.is_empty() {
        return Err(Error::Config("cannot assemble an empty minibatch".into()));
    }
    let total = split.len();
    let nc = split.clean.len();
    let nb = split.backdoor.len();
    let mut rows: Vec<Tensor<T>> = Vec::with_capacity(total);
    let mut targets = Vec::with_capacity(total);
    for &i in &split.clean {
        rows.push(data.images[i].clone());
        targets.push(data.labels[i]);
    }

    let mut gen_cache = None;
    let mut clip_gate = Vec::new();
    if nb > 0 {
        let fdim = generator.feature_dim();
        let mut feats = Vec::with_capacity(nb * fdim);
        for s in &split.backdoor {
            let f = pipeline.feature_for(&s.instruction)?;
            if f.dim() != fdim {
                return Err(Error::Shape(format!(
                    "feature dimension {} does not match the generator's {fdim}",
                    f.dim()
                )));
            }
            feats.extend(f.vector.iter().map(|&v| T::cast(v)));
        }
        let cache = generator.forward_batch(Tensor::from_vec(&[nb, fdim], feats)?)?;
        let [c, h, w] = generator.image_shape();
        let pixels = c * h * w;
        let eps = T::cast(cfg.epsilon);
        clip_gate = vec![T::zero(); nb * pixels];
        for (j, s) in split.backdoor.iter().enumerate() {
            let x = &data.images[s.index];
            if x.shape() != [c, h, w] {
                return Err(Error::Shape(format!(
                    "image shape {:?} does not match the generator's {:?}",
                    x.shape(),
                    generator.image_shape()
                )));
            }
            let mut adv = vec![T::zero(); pixels];
            for k in 0..pixels {
                let u = x.data()[k] + eps * cache.squashed.data()[j * pixels + k];
                if u > T::zero() && u < T::one() {
                    clip_gate[j * pixels + k] = T::one();
                }
                adv[k] = u.max(T::zero()).min(T::one());
            }
            rows.push(Tensor::from_vec(&[c, h, w], adv)?);
            targets.push(s.target);
        }
        gen_cache = Some(cache);
    }

    let b = T::cast(total as f64);
    let weights = if cfg.literal_partition_weighting {
        // Literal partition weighting: each clean term scaled by |clean|/|B|
        // and each injected term by |backdoor|/|B| (partition sums scaled by
        // their own fractions), instead of a flat batch mean.
        let wc = T::cast(nc as f64) / b;
        let wb = T::cast(nb as f64) / b;
        let mut v = vec![wc; nc];
        v.extend(vec![wb; nb]);
        v
    } else {
        vec![T::one() / b; total]
    };

    Ok(AssembledBatch {
        input: stack_images(&rows)?,
        targets,
        weights,
        gen_cache,
        clip_gate,
    })
}

fn check_finite(loss: f64, split: &MinibatchSplit) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::Numerical(format!(
            "non-finite loss {loss} on a batch of {} ({} clean, {} injected)",
            split.len(),
            split.clean.len(),
            split.backdoor.len()
        )))
    }
}

/// The joint training loss: weighted cross-entropy over the clean rows at
/// their true labels and the trigger-injected rows at their sampled targets.
/// Pure — no gradients are written.
pub fn joint_loss<T: Scalar>(
    victim: &VictimModel<T>,
    generator: &TriggerGenerator<T>,
    split: &MinibatchSplit,
    data: &Dataset<T>,
    pipeline: &FeaturePipeline,
    cfg: &AttackConfig,
) -> Result<f64> {
    let batch = assemble_batch(generator, split, data, pipeline, cfg)?;
    let logits = victim.logits(batch.input)?;
    let (loss, _) = crate::nn::softmax_ce_loss(&logits, &batch.targets, &batch.weights);
    check_finite(loss, split)
}

/// As [`joint_loss`], but accumulates gradients into both models' parameters
/// (callers zero them first). The generator receives gradients only through
/// the injected rows; clean rows touch the victim alone.
pub fn joint_loss_with_grads<T: Scalar>(
    victim: &mut VictimModel<T>,
    generator: &mut TriggerGenerator<T>,
    split: &MinibatchSplit,
    data: &Dataset<T>,
    pipeline: &FeaturePipeline,
    cfg: &AttackConfig,
) -> Result<f64> {
    let batch = assemble_batch(generator, split, data, pipeline, cfg)?;
    let (logits, cache) = victim.forward_batch(batch.input)?;
    let (loss, dlogits) = crate::nn::softmax_ce_loss(&logits, &batch.targets, &batch.weights);
    let loss = check_finite(loss, split)?;
    let dx = victim.backward_batch(&cache, &dlogits);
    if let Some(gen_cache) = &batch.gen_cache {
        let nb = split.backdoor.len();
        let nc = split.clean.len();
        let [c, h, w] = generator.image_shape();
        let pixels = c * h * w;
        let eps = T::cast(cfg.epsilon);
        let mut dsquashed = vec![T::zero(); nb * pixels];
        for j in 0..nb {
            for k in 0..pixels {
                dsquashed[j * pixels + k] =
                    eps * batch.clip_gate[j * pixels + k] * dx.data()[(nc + j) * pixels + k];
            }
        }
        generator.backward_batch(gen_cache, &Tensor::from_vec(&[nb, c, h, w], dsquashed)?);
    }
    Ok(loss)
}

/// Optimization schedule: stochastic gradient descent with classical
/// momentum and the learning rate halved at five evenly spaced milestones.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier applied at each milestone.
    pub lr_decay: f64,
    /// Classical momentum coefficient for the gradient steps; 0 disables it.
    pub momentum: f64,
    pub seed: u64,
}

impl TrainSchedule {
    pub fn new(epochs: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            epochs,
            batch_size,
            learning_rate: 0.01,
            lr_decay: 0.5,
            momentum: 0.9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive and finite, got {}",
                self.learning_rate
            )));
        }
        if !(0.0 < self.lr_decay && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!(
                "lr_decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    /// Epochs at whose start the rate decays: five milestones splitting the
    /// run into six equal stretches (deduplicated for very short runs).
    pub fn milestones(&self) -> Vec<usize> {
        let mut ms: Vec<usize> = (1..=5)
            .map(|k| round_count(self.epochs as f64 * k as f64 / 6.0))
            .filter(|&m| m > 0 && m < self.epochs)
            .collect();
        ms.dedup();
        ms
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones().iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }
}

/// One epoch's log entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_loss: f64,
    pub holdout_acc: f64,
    /// Success rate of a small seeded probe (random targets, known
    /// instructions) on the holdout split; absent for clean training.
    pub asr_probe: Option<f64>,
    /// Cumulative hash of every sampling decision made so far; equal seeds
    /// must reproduce it exactly.
    pub sampling_hash: String,
}

/// Complete training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub sampling_hash: String,
}

struct AttackParts<'a, T: Scalar> {
    generator: &'a mut TriggerGenerator<T>,
    instrs: &'a InstructionSet,
    pipeline: &'a FeaturePipeline,
    cfg: &'a AttackConfig,
}

/// Train the victim and generator jointly. Every sampling decision flows
/// from `sched.seed`, so runs are exactly reproducible; on a non-finite loss
/// both models are rolled back to the end of the last completed epoch and a
/// divergence error is returned. With `milestone_dir` set, checkpoints are
/// written at every learning-rate milestone.
#[allow(clippy::too_many_arguments)]
pub fn train_joint<T: Scalar>(
    victim: &mut VictimModel<T>,
    generator: &mut TriggerGenerator<T>,
    train: &Dataset<T>,
    holdout: &Dataset<T>,
    instrs: &InstructionSet,
    pipeline: &FeaturePipeline,
    cfg: &AttackConfig,
    sched: &TrainSchedule,
    milestone_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    if pipeline.feature_dim() != generator.feature_dim() {
        return Err(Error::Shape(format!(
            "encoder produces {}-dimensional features, generator expects {}",
            pipeline.feature_dim(),
            generator.feature_dim()
        )));
    }
    if victim.image_shape() != generator.image_shape() {
        return Err(Error::Shape(format!(
            "victim takes {:?} images, generator emits {:?}",
            victim.image_shape(),
            generator.image_shape()
        )));
    }
    if victim.num_classes() != instrs.num_classes() {
        return Err(Error::Config(format!(
            "victim has {} classes, instruction set covers {}",
            victim.num_classes(),
            instrs.num_classes()
        )));
    }
    let parts = AttackParts {
        generator,
        instrs,
        pipeline,
        cfg,
    };
    train_loop(victim, Some(parts), train, holdout, sched, milestone_dir)
}

/// Train the victim alone on clean labels — the baseline, defense-finetune,
/// and retraining path. Same schedule semantics as [`train_joint`].
pub fn train_clean<T: Scalar>(
    victim: &mut VictimModel<T>,
    train: &Dataset<T>,
    holdout: &Dataset<T>,
    sched: &TrainSchedule,
    milestone_dir: Option<&Path>,
) -> Result<TrainLog> {
    train_loop(victim, None, train, holdout, sched, milestone_dir)
}

fn clean_loss_with_grads<T: Scalar>(
    victim: &mut VictimModel<T>,
    batch: &[usize],
    data: &Dataset<T>,
) -> Result<f64> {
    let rows: Vec<Tensor<T>> = batch.iter().map(|&i| data.images[i].clone()).collect();
    let targets: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
    let weights = vec![T::one() / T::cast(batch.len() as f64); batch.len()];
    let (logits, cache) = victim.forward_batch(stack_images(&rows)?)?;
    let (loss, dlogits) = crate::nn::softmax_ce_loss(&logits, &targets, &weights);
    let loss = check_finite(loss, &MinibatchSplit::all_clean(batch))?;
    victim.backward_batch(&cache, &dlogits);
    Ok(loss)
}

fn snapshot<T: Scalar>(
    victim: &VictimModel<T>,
    generator: Option<&TriggerGenerator<T>>,
) -> (Vec<f64>, Option<Vec<f64>>) {
    (
        flatten_params(&victim.params()),
        generator.map(|g| flatten_params(&g.params())),
    )
}

fn restore<T: Scalar>(
    victim: &mut VictimModel<T>,
    generator: Option<&mut TriggerGenerator<T>>,
    snap: &(Vec<f64>, Option<Vec<f64>>),
) -> Result<()> {
    for p in victim.params_mut() {
        p.reset_velocity();
    }
    unflatten_params(&mut victim.params_mut(), &snap.0)?;
    if let (Some(g), Some(blob)) = (generator, &snap.1) {
        for p in g.params_mut() {
            p.reset_velocity();
        }
        unflatten_params(&mut g.params_mut(), blob)?;
    }
    Ok(())
}

fn train_loop<T: Scalar>(
    victim: &mut VictimModel<T>,
    mut attack: Option<AttackParts<'_, T>>,
    train: &Dataset<T>,
    holdout: &Dataset<T>,
    sched: &TrainSchedule,
    milestone_dir: Option<&Path>,
) -> Result<TrainLog> {
    sched.validate()?;
    train.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let milestones = sched.milestones();
    let mut hash = SequenceHash::new();
    let mut log = Vec::with_capacity(sched.epochs);
    let mut last_good = snapshot(victim, attack.as_ref().map(|a| &*a.generator));

    for epoch in 0..sched.epochs {
        let lr = sched.lr_at(epoch);
        let lr_t = T::cast(lr);
        let mom_t = T::cast(sched.momentum);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut stream(sched.seed, &format!("train:order:{epoch}")));
        hash.push_str(&format!("epoch:{epoch}"));
        for &i in &order {
            hash.push(i as u64);
        }
        let mut draw_rng = stream(sched.seed, &format!("train:split:{epoch}"));

        let mut loss_sum = 0.0f64;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(sched.batch_size).enumerate() {
            let result = match attack.as_mut() {
                Some(parts) => {
                    let split = split_minibatch(
                        chunk,
                        train.num_classes,
                        parts.cfg,
                        parts.instrs,
                        &mut draw_rng,
                    )?;
                    for s in &split.backdoor {
                        hash.push(s.index as u64);
                        hash.push(s.target as u64);
                        hash.push_str(&s.instruction.text);
                    }
                    victim.zero_grad();
                    parts.generator.zero_grad();
                    let loss = joint_loss_with_grads(
                        victim,
                        parts.generator,
                        &split,
                        train,
                        parts.pipeline,
                        parts.cfg,
                    );
                    if loss.is_ok() {
                        for p in victim.params_mut() {
                            p.sgd_step(lr_t, mom_t);
                        }
                        for p in parts.generator.params_mut() {
                            p.sgd_step(lr_t, mom_t);
                        }
                    }
                    loss
                }
                None => {
                    victim.zero_grad();
                    let loss = clean_loss_with_grads(victim, chunk, train);
                    if loss.is_ok() {
                        for p in victim.params_mut() {
                            p.sgd_step(lr_t, mom_t);
                        }
                    }
                    loss
                }
            };
            match result {
                Ok(loss) => {
                    loss_sum += loss;
                    steps += 1;
                }
                Err(Error::Numerical(diag)) => {
                    restore(
                        victim,
                        attack.as_mut().map(|a| &mut *a.generator),
                        &last_good,
                    )?;
                    return Err(Error::Diverged {
                        epoch,
                        step,
                        diagnostics: format!(
                            "{diag}; learning rate {lr}; both models rolled back to the end of \
                             epoch {}",
                            epoch.checked_sub(1)
                                .map_or("initialization".to_string(), |e| e.to_string())
                        ),
                    });
                }
                Err(other) => return Err(other),
            }
        }

        let holdout_acc = evaluate_acc(victim, holdout, None)?;
        let asr_probe = match attack.as_ref() {
            Some(parts) if parts.cfg.p > 0.0 => Some(probe_known_asr(
                victim,
                parts.generator,
                parts.instrs,
                parts.pipeline,
                parts.cfg,
                holdout,
                sched.seed,
                epoch,
            )?),
            _ => None,
        };
        log.push(EpochRecord {
            epoch,
            learning_rate: lr,
            mean_loss: loss_sum / steps.max(1) as f64,
            holdout_acc,
            asr_probe,
            sampling_hash: format!("{:016x}", hash.value()),
        });
        last_good = snapshot(victim, attack.as_ref().map(|a| &*a.generator));

        if milestones.contains(&epoch) {
            if let Some(dir) = milestone_dir {
                std::fs::create_dir_all(dir)?;
                victim.save(&dir.join(format!("victim-epoch{epoch}.ckpt")))?;
                if let Some(parts) = attack.as_ref() {
                    parts.generator.save(
                        &dir.join(format!("generator-epoch{epoch}.ckpt")),
                        parts.cfg.epsilon,
                    )?;
                }
            }
        }
    }

    Ok(TrainLog {
        epochs: log,
        sampling_hash: format!("{:016x}", hash.value()),
    })
}

/// Small seeded success-rate probe logged each epoch: random targets, known
/// instructions, first `PROBE_SAMPLES` holdout images.
#[allow(clippy::too_many_arguments)]
fn probe_known_asr<T: Scalar>(
    victim: &VictimModel<T>,
    generator: &TriggerGenerator<T>,
    instrs: &InstructionSet,
    pipeline: &FeaturePipeline,
    cfg: &AttackConfig,
    holdout: &Dataset<T>,
    seed: u64,
    epoch: usize,
) -> Result<f64> {
    let n = holdout.len().min(PROBE_SAMPLES);
    if n == 0 {
        return Ok(0.0);
    }
    let mut rng = stream(seed, &format!("train:probe:{epoch}"));
    let mut attacked = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for i in 0..n {
        let y = rng.random_range(0..instrs.num_classes());
        let pool = instrs.known_for(y);
        if pool.is_empty() {
            return Err(Error::Config(format!(
                "class {y} has no known descriptions for the probe"
            )));
        }
        let instr = &pool[rng.random_range(0..pool.len())];
        let feat = pipeline.feature_for(instr)?;
        let trigger = generate_trigger(generator, &feat, cfg)?;
        attacked.push(inject(&holdout.images[i], &trigger)?);
        targets.push(y);
    }
    let logits = victim.logits(stack_images(&attacked)?)?;
    let preds = crate::nn::argmax_rows(&logits);
    let hits = preds.iter().zip(&targets).filter(|(p, t)| p == t).count();
    Ok(100.0 * hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{demo_set, SyntheticEncoder, SYNTHETIC_FEATURE_DIM};
    use crate::instructions::ContextTemplate;
    use crate::victim::Architecture;

    fn pipeline_for(set: &InstructionSet, seed: u64) -> FeaturePipeline {
        let tmpl = ContextTemplate::default();
        let enc = SyntheticEncoder::with_defaults(set, &tmpl, seed).unwrap();
        FeaturePipeline::new(Box::new(enc), tmpl, true, set.classes.clone()).unwrap()
    }

    fn tiny_data<T: Scalar>(classes: usize, shape: [usize; 3], per_class: usize) -> Dataset<T> {
        let spec = crate::data::SyntheticSpec {
            classes,
            image_shape: shape,
            train_per_class: per_class,
            test_per_class: per_class,
            pixel_noise: 0.08,
            seed: 17,
        };
        crate::data::generate_synthetic::<T>(&spec).unwrap().0
    }

    #[test]
    fn split_counts_follow_the_rounding_rule() {
        let set = demo_set(4, 2, 0);
        let batch: Vec<usize> = (0..512).collect();
        let mut rng = stream(1, "test:split");
        let split =
            split_minibatch(&batch, 4, &AttackConfig::new(0.05, 0.10, 1), &set, &mut rng).unwrap();
        assert_eq!(split.backdoor.len(), 51); // round(51.2)
        assert_eq!(split.clean.len(), 512 - 51);

        let none =
            split_minibatch(&batch, 4, &AttackConfig::new(0.05, 0.0, 1), &set, &mut rng).unwrap();
        assert!(none.backdoor.is_empty());
        assert_eq!(none.clean, batch);

        let all =
            split_minibatch(&batch, 4, &AttackConfig::new(0.05, 1.0, 1), &set, &mut rng).unwrap();
        assert_eq!(all.backdoor.len(), 512);
        assert!(all.clean.is_empty());
        for s in &all.backdoor {
            assert!(s.target < 4);
            assert_eq!(s.instruction.intended_target, Some(s.target));
        }
    }

    #[test]
    fn lexical_ablation_draws_only_the_first_description() {
        let set = demo_set(4, 3, 0);
        let batch: Vec<usize> = (0..256).collect();
        let mut cfg = AttackConfig::new(0.05, 1.0, 1);
        cfg.use_lexical_variations = false;
        let mut rng = stream(5, "test:split-ablation");
        let split = split_minibatch(&batch, 4, &cfg, &set, &mut rng).unwrap();
        assert_eq!(split.backdoor.len(), 256);
        for s in &split.backdoor {
            assert_eq!(s.instruction.text, set.known_for(s.target)[0].text);
        }
    }

    #[test]
    fn split_rejects_targets_without_descriptions() {
        let mut set = demo_set(3, 2, 0);
        set.known[1].clear();
        let batch: Vec<usize> = (0..64).collect();
        let mut rng = stream(2, "test:split-missing");
        let err = split_minibatch(&batch, 3, &AttackConfig::new(0.05, 1.0, 1), &set, &mut rng);
        match err {
            Err(Error::Config(msg)) => assert!(msg.contains("no known descriptions")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn clean_split_loss_is_the_mean_cross_entropy() {
        let set = demo_set(3, 1, 0);
        let pipeline = pipeline_for(&set, 3);
        let data = tiny_data(3, [1, 8, 8], 4);
        let mut rng = stream(4, "test:p0");
        let victim = VictimModel::<f64>::new(Architecture::Mlp, [1, 8, 8], 3, &mut rng).unwrap();
        let generator = TriggerGenerator::new(SYNTHETIC_FEATURE_DIM, [1, 8, 8], 8, &mut rng);
        let batch: Vec<usize> = (0..data.len()).collect();
        let split = MinibatchSplit::all_clean(&batch);
        let cfg = AttackConfig::new(0.05, 0.0, 1);
        let loss = joint_loss(&victim, &generator, &split, &data, &pipeline, &cfg).unwrap();

        // Independent mean cross-entropy via log-sum-exp on the raw logits.
        let rows: Vec<Tensor<f64>> = data.images.clone();
        let logits = victim.logits(stack_images(&rows).unwrap()).unwrap();
        let classes = 3;
        let mut expect = 0.0;
        for (b, &y) in data.labels.iter().enumerate() {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            expect += lse - row[y];
        }
        expect /= data.len() as f64;
        assert!((loss - expect).abs() < 1e-6, "loss {loss} vs oracle {expect}");
    }

    #[test]
    fn uniform_logits_on_two_classes_cost_ln_two() {
        let set = demo_set(2, 1, 0);
        let pipeline = pipeline_for(&set, 5);
        let data = tiny_data(2, [1, 8, 8], 1);
        let mut rng = stream(6, "test:ln2");
        let mut victim =
            VictimModel::<f64>::new(Architecture::Mlp, [1, 8, 8], 2, &mut rng).unwrap();
        for p in victim.params_mut() {
            p.value.fill(0.0);
        }
        let generator = TriggerGenerator::new(SYNTHETIC_FEATURE_DIM, [1, 8, 8], 8, &mut rng);
        // One clean sample, one injected sample.
        let split = MinibatchSplit {
            clean: vec![0],
            backdoor: vec![BackdoorSample {
                index: 1,
                target: 0,
                instruction: set.known_for(0)[0].clone(),
            }],
        };
        let cfg = AttackConfig::new(0.05, 0.5, 1);
        let loss = joint_loss(&victim, &generator, &split, &data, &pipeline, &cfg).unwrap();
        assert!(
            (loss - std::f64::consts::LN_2).abs() < 1e-6,
            "uniform-logit loss {loss} should be ln 2"
        );
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let set = demo_set(3, 2, 0);
        let pipeline = pipeline_for(&set, 7);
        let data = tiny_data(3, [1, 8, 8], 3);
        let mut rng = stream(8, "test:fd");
        let mut victim =
            VictimModel::<f64>::new(Architecture::Mlp, [1, 8, 8], 3, &mut rng).unwrap();
        let mut generator = TriggerGenerator::new(SYNTHETIC_FEATURE_DIM, [1, 8, 8], 6, &mut rng);
        let cfg = AttackConfig::new(0.05, 0.5, 1);
        let mut draw = stream(9, "test:fd-draw");
        let batch: Vec<usize> = (0..data.len()).collect();
        let split = split_minibatch(&batch, 3, &cfg, &set, &mut draw).unwrap();
        assert!(!split.backdoor.is_empty() && !split.clean.is_empty());

        victim.zero_grad();
        generator.zero_grad();
        joint_loss_with_grads(&mut victim, &mut generator, &split, &data, &pipeline, &cfg)
            .unwrap();

        let victim_grads: Vec<Vec<f64>> = victim
            .params()
            .iter()
            .map(|p| p.grad.data().to_vec())
            .collect();
        let gen_grads: Vec<Vec<f64>> = generator
            .params()
            .iter()
            .map(|p| p.grad.data().to_vec())
            .collect();

        let h = 1e-5;
        let mut checked = 0usize;
        for (pi, grads) in victim_grads.iter().enumerate() {
            let stride = (grads.len() / 4).max(1);
            for k in (0..grads.len()).step_by(stride) {
                let orig = victim.params()[pi].value.data()[k];
                victim.params_mut()[pi].value.data_mut()[k] = orig + h;
                let up =
                    joint_loss(&victim, &generator, &split, &data, &pipeline, &cfg).unwrap();
                victim.params_mut()[pi].value.data_mut()[k] = orig - h;
                let dn =
                    joint_loss(&victim, &generator, &split, &data, &pipeline, &cfg).unwrap();
                victim.params_mut()[pi].value.data_mut()[k] = orig;
                let fd = (up - dn) / (2.0 * h);
                let g = grads[k];
                let denom = fd.abs().max(g.abs()).max(1e-8);
                assert!(
                    ((fd - g).abs() / denom) < 1e-3,
                    "victim param {pi}[{k}]: analytic {g} vs fd {fd}"
                );
                checked += 1;
            }
        }
        for (pi, grads) in gen_grads.iter().enumerate() {
            let stride = (grads.len() / 4).max(1);
            for k in (0..grads.len()).step_by(stride) {
                let orig = generator.params()[pi].value.data()[k];
                generator.params_mut()[pi].value.data_mut()[k] = orig + h;
                let up =
                    joint_loss(&victim, &generator, &split, &data, &pipeline, &cfg).unwrap();
                generator.params_mut()[pi].value.data_mut()[k] = orig - h;
                let dn =
                    joint_loss(&victim, &generator, &split, &data, &pipeline, &cfg).unwrap();
                generator.params_mut()[pi].value.data_mut()[k] = orig;
                let fd = (up - dn) / (2.0 * h);
                let g = grads[k];
                let denom = fd.abs().max(g.abs()).max(1e-8);
                assert!(
                    ((fd - g).abs() / denom) < 1e-3,
                    "generator param {pi}[{k}]: analytic {g} vs fd {fd}"
                );
                checked += 1;
            }
        }
        assert!(checked > 20, "spot check covered too few parameters");
    }

    #[test]
    fn literal_partition_weighting_rescales_the_loss() {
        let set = demo_set(2, 1, 0);
        let pipeline = pipeline_for(&set, 10);
        let data = tiny_data(2, [1, 8, 8], 2);
        let mut rng = stream(11, "test:literal");
        let victim = VictimModel::<f64>::new(Architecture::Mlp, [1, 8, 8], 2, &mut rng).unwrap();
        let generator = TriggerGenerator::new(SYNTHETIC_FEATURE_DIM, [1, 8, 8], 8, &mut rng);
        // 3 clean + 1 injected.
        let split = MinibatchSplit {
            clean: vec![0, 1, 2],
            backdoor: vec![BackdoorSample {
                index: 3,
                target: 1,
                instruction: set.known_for(1)[0].clone(),
            }],
        };
        let standard = AttackConfig::new(0.05, 0.25, 1);
        let mut literal = standard.clone();
        literal.literal_partition_weighting = true;
        let l_std =
            joint_loss(&victim, &generator, &split, &data, &pipeline, &standard).unwrap();
        let l_lit =
            joint_loss(&victim, &generator, &split, &data, &pipeline, &literal).unwrap();
        assert!(l_std > 0.0 && l_lit > 0.0);
        assert!((l_std - l_lit).abs() > 1e-9);

        // Oracle from per-partition means: evaluating each partition alone
        // (weights 1/n within it) yields its mean term, from which both
        // weightings reconstruct exactly.
        let clean_only = MinibatchSplit {
            clean: split.clean.clone(),
            backdoor: vec![],
        };
        let bd_only = MinibatchSplit {
            clean: vec![],
            backdoor: split.backdoor.clone(),
        };
        let mean_clean =
            joint_loss(&victim, &generator, &clean_only, &data, &pipeline, &standard).unwrap();
        let mean_bd =
            joint_loss(&victim, &generator, &bd_only, &data, &pipeline, &standard).unwrap();
        let sum_clean = 3.0 * mean_clean;
        let sum_bd = mean_bd;
        let expect_std = (sum_clean + sum_bd) / 4.0;
        let expect_literal = (3.0 / 4.0) * sum_clean + (1.0 / 4.0) * sum_bd;
        assert!((l_std - expect_std).abs() < 1e-9);
        assert!((l_lit - expect_literal).abs() < 1e-9);
    }

    #[test]
    fn schedule_milestones_halve_the_rate_five_times() {
        let sched = TrainSchedule::new(30, 64, 1);
        assert_eq!(sched.milestones(), vec![5, 10, 15, 20, 25]);
        assert_eq!(sched.lr_at(0), 0.01);
        assert_eq!(sched.lr_at(4), 0.01);
        assert_eq!(sched.lr_at(5), 0.005);
        assert_eq!(sched.lr_at(14), 0.0025);
        assert!((sched.lr_at(29) - 0.01 * 0.5f64.powi(5)).abs() < 1e-15);
        // Short runs deduplicate collapsed milestones.
        let short = TrainSchedule::new(3, 64, 1);
        let ms = short.milestones();
        assert!(ms.windows(2).all(|w| w[0] < w[1]));
        assert!(ms.iter().all(|&m| m > 0 && m < 3));
    }

    #[test]
    fn zero_epochs_change_nothing() {
        let set = demo_set(2, 1, 0);
        let pipeline = pipeline_for(&set, 12);
        let data = tiny_data(2, [1, 8, 8], 3);
        let mut rng = stream(13, "test:zero-epochs");
        let mut victim =
            VictimModel::<f64>::new(Architecture::Mlp, [1, 8, 8], 2, &mut rng).unwrap();
        let mut generator = TriggerGenerator::new(SYNTHETIC_FEATURE_DIM, [1, 8, 8], 8, &mut rng);
        let before_v = flatten_params(&victim.params());
        let before_g = flatten_params(&generator.params());
        let sched = TrainSchedule::new(0, 4, 1);
        let log = train_joint(
            &mut victim,
            &mut generator,
            &data,
            &data,
            &set,
            &pipeline,
            &AttackConfig::new(0.05, 0.5, 1),
            &sched,
            None,
        )
        .unwrap();
        assert!(log.epochs.is_empty());
        assert_eq!(flatten_params(&victim.params()), before_v);
        assert_eq!(flatten_params(&generator.params()), before_g);
    }

    #[test]
    fn training_runs_reproduce_exactly_under_one_seed() {
        let set = demo_set(3, 2, 0);
        let data = tiny_data(3, [1, 8, 8], 6);
        let run = |seed: u64| {
            let pipeline = pipeline_for(&set, 14);
            let mut rng = stream(15, "test:repro");
            let mut victim =
                VictimModel::<f64>::new(Architecture::Mlp, [1, 8, 8], 3, &mut rng).unwrap();
            let mut generator =
                TriggerGenerator::new(SYNTHETIC_FEATURE_DIM, [1, 8, 8], 8, &mut rng);
            let sched = TrainSchedule::new(2, 5, seed);
            let log = train_joint(
                &mut victim,
                &mut generator,
                &data,
                &data,
                &set,
                &pipeline,
                &AttackConfig::new(0.05, 0.3, 1),
                &sched,
                None,
            )
            .unwrap();
            (log, flatten_params(&victim.params()))
        };
        let (log_a, params_a) = run(42);
        let (log_b, params_b) = run(42);
        assert_eq!(log_a.sampling_hash, log_b.sampling_hash);
        assert_eq!(params_a, params_b);
        for (a, b) in log_a.epochs.iter().zip(&log_b.epochs) {
            assert_eq!(a.mean_loss, b.mean_loss);
            assert_eq!(a.holdout_acc, b.holdout_acc);
            assert_eq!(a.asr_probe, b.asr_probe);
        }
        let (log_c, _) = run(43);
        assert_ne!(log_a.sampling_hash, log_c.sampling_hash);
    }

    #[test]
    fn divergence_rolls_back_to_the_last_good_epoch() {
        let set = demo_set(2, 1, 0);
        let pipeline = pipeline_for(&set, 16);
        let data = tiny_data(2, [1, 8, 8], 4);
        let mut rng = stream(17, "test:diverge");
        let mut victim =
            VictimModel::<f32>::new(Architecture::Mlp, [1, 8, 8], 2, &mut rng).unwrap();
        let mut generator = TriggerGenerator::new(SYNTHETIC_FEATURE_DIM, [1, 8, 8], 8, &mut rng);
        let before_v = flatten_params(&victim.params());
        let before_g = flatten_params(&generator.params());
        let sched = TrainSchedule {
            epochs: 4,
            batch_size: 4,
            learning_rate: 1e30,
            lr_decay: 0.5,
            momentum: 0.9,
            seed: 1,
        };
        let err = train_joint(
            &mut victim,
            &mut generator,
            &data,
            &data,
            &set,
            &pipeline,
            &AttackConfig::new(0.05, 0.25, 1),
            &sched,
            None,
        );
        match err {
            Err(Error::Diverged { diagnostics, .. }) => {
                assert!(diagnostics.contains("rolled back"));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
        // Divergence hits in the first epoch, so "last good" is the
        // initialization itself.
        assert_eq!(flatten_params(&victim.params()), before_v);
        assert_eq!(flatten_params(&generator.params()), before_g);
    }

    #[test]
    fn clean_training_learns_the_blobs() {
        let spec = crate::data::SyntheticSpec {
            classes: 3,
            image_shape: [1, 8, 8],
            train_per_class: 50,
            test_per_class: 15,
            pixel_noise: 0.08,
            seed: 18,
        };
        let (train, test) = crate::data::generate_synthetic::<f32>(&spec).unwrap();
        let mut rng = stream(19, "test:clean-train");
        let mut victim =
            VictimModel::<f32>::new(Architecture::Mlp, [1, 8, 8], 3, &mut rng).unwrap();
        let before = evaluate_acc(&victim, &test, None).unwrap();
        let mut sched = TrainSchedule::new(15, 16, 2);
        sched.lr_decay = 1.0;
        let log = train_clean(&mut victim, &train, &test, &sched, None).unwrap();
        let after = evaluate_acc(&victim, &test, None).unwrap();
        assert!(
            after > before && after > 80.0,
            "accuracy went {before} -> {after}"
        );
        assert_eq!(log.epochs.len(), 15);
        assert!(log.epochs.iter().all(|e| e.asr_probe.is_none()));
        assert!(log.epochs[14].mean_loss < log.epochs[0].mean_loss);
    }

    #[test]
    fn milestone_checkpoints_are_written() {
        let set = demo_set(2, 1, 0);
        let pipeline = pipeline_for(&set, 20);
        let data = tiny_data(2, [1, 8, 8], 3);
        let mut rng = stream(21, "test:milestone-ckpt");
        let mut victim =
            VictimModel::<f32>::new(Architecture::Mlp, [1, 8, 8], 2, &mut rng).unwrap();
        let mut generator = TriggerGenerator::new(SYNTHETIC_FEATURE_DIM, [1, 8, 8], 8, &mut rng);
        let dir = std::env::temp_dir().join("bdlab-milestones");
        let _ = std::fs::remove_dir_all(&dir);
        let sched = TrainSchedule::new(6, 6, 3);
        assert_eq!(sched.milestones(), vec![1, 2, 3, 4, 5]);
        train_joint(
            &mut victim,
            &mut generator,
            &data,
            &data,
            &set,
            &pipeline,
            &AttackConfig::new(0.05, 0.25, 1),
            &sched,
            Some(&dir),
        )
        .unwrap();
        for e in 1..=5 {
            assert!(dir.join(format!("victim-epoch{e}.ckpt")).exists());
            assert!(dir.join(format!("generator-epoch{e}.ckpt")).exists());
        }
        assert!(!dir.join("victim-epoch0.ckpt").exists());
    }
}
