//! Conditional trigger generation and injection.
//!
//! The generator maps an instruction feature to an image-shaped perturbation
//! field: two dense layers (the first with 2048 units) expand the feature to
//! pixel count, the result is reshaped to the image layout, a 3x3
//! channel-preserving convolution smooths out high-frequency noise, and a
//! final `tanh` squashes everything into `(-1, 1)`. Scaling by the budget
//! `epsilon` yields a trigger whose L-infinity norm can never exceed
//! `epsilon`, no matter the parameters. Injection adds the trigger to an
//! image and clips back to `[0, 1]`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::encoder::InstructionFeature;
use crate::error::{Error, Result};
use crate::nn::{tanh, tanh_backward, Conv2d, Linear, Param};
use crate::scalar::Scalar;
use crate::seed::text_digest_hex;
use crate::tensor::Tensor;

/// Hidden width of the generator's first dense layer.
pub const GENERATOR_HIDDEN_DIM: usize = 2048;

fn default_true() -> bool {
    true
}

/// Attack hyperparameters and ablation switches.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    /// L-infinity trigger budget, in (0, 1].
    pub epsilon: f64,
    /// Fraction of each training minibatch given to the backdoor loss term.
    pub p: f64,
    /// Experiment seed; every random stream is derived from it.
    pub seed: u64,
    /// Train on all known descriptions per class (true) or only the first
    /// one (false) — the lexical-variation ablation.
    #[serde(default = "default_true")]
    pub use_lexical_variations: bool,
    /// Wrap instructions in the supported-classes context before encoding.
    #[serde(default = "default_true")]
    pub use_context_wrapping: bool,
    /// Replace the language encoder with one-hot class vectors.
    #[serde(default)]
    pub one_hot_baseline: bool,
    /// Weight the loss partitions by their sizes instead of taking the
    /// overall batch mean (fidelity mode; see trainer docs).
    #[serde(default)]
    pub literal_partition_weighting: bool,
}

impl AttackConfig {
    pub fn new(epsilon: f64, p: f64, seed: u64) -> Self {
        Self {
            epsilon,
            p,
            seed,
            use_lexical_variations: true,
            use_context_wrapping: true,
            one_hot_baseline: false,
            literal_partition_weighting: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::Config(format!(
                "epsilon must be in (0, 1], got {}",
                self.epsilon
            )));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::Config(format!(
                "backdoor fraction p must be in [0, 1], got {}",
                self.p
            )));
        }
        Ok(())
    }
}

/// An image-shaped perturbation with every entry in `[-epsilon, epsilon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trigger<T> {
    pub perturbation: Tensor<T>,
}

/// Instruction-conditioned trigger generator.
#[derive(Debug, Clone)]
pub struct TriggerGenerator<T> {
    linear1: Linear<T>,
    linear2: Linear<T>,
    smoother: Conv2d<T>,
    feature_dim: usize,
    image_shape: [usize; 3],
}

/// Intermediate activations of one generator forward pass, kept for the
/// backward pass during training.
pub struct GeneratorCache<T> {
    /// Input features, `(batch, feature_dim)`.
    pub feats: Tensor<T>,
    /// First dense output, `(batch, hidden)`.
    h1: Tensor<T>,
    /// Second dense output reshaped to `(batch, C, H, W)`.
    h2_img: Tensor<T>,
    /// `tanh(smoother(h2_img))`, `(batch, C, H, W)` — the unscaled field.
    pub squashed: Tensor<T>,
}

/// Extra scale applied to both dense layers at initialization. Instruction
/// features arrive unit-norm, so plain fan-in init leaves the pre-squash
/// response deep inside tanh's linear region and the initial triggers are a
/// tiny fraction of the budget — too faint for the classifier to pick up,
/// which stalls the joint optimization. The gain moves the starting response
/// into tanh's active range; training still shapes the triggers from there.
const GENERATOR_INIT_GAIN: f64 = 6.0;

impl<T: Scalar> TriggerGenerator<T> {
    pub fn new(
        feature_dim: usize,
        image_shape: [usize; 3],
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let [c, h, w] = image_shape;
        let mut linear1 = Linear::new(feature_dim, hidden_dim, rng);
        let mut linear2 = Linear::new(hidden_dim, c * h * w, rng);
        let gain = T::cast(GENERATOR_INIT_GAIN);
        linear1.weight.value.scale(gain);
        linear2.weight.value.scale(gain);
        Self {
            linear1,
            linear2,
            smoother: Conv2d::new(c, c, rng),
            feature_dim,
            image_shape,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn hidden_dim(&self) -> usize {
        self.linear1.out_dim()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.linear1.weight,
            &self.linear1.bias,
            &self.linear2.weight,
            &self.linear2.bias,
            &self.smoother.weight,
            &self.smoother.bias,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.linear1.weight,
            &mut self.linear1.bias,
            &mut self.linear2.weight,
            &mut self.linear2.bias,
            &mut self.smoother.weight,
            &mut self.smoother.bias,
        ]
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Forward pass over a feature batch `(batch, feature_dim)`. The cache's
    /// `squashed` field is the pre-epsilon trigger field in `(-1, 1)`.
    pub fn forward_batch(&self, feats: Tensor<T>) -> Result<GeneratorCache<T>> {
        let batch = feats.shape()[0];
        if feats.shape() != [batch, self.feature_dim] {
            return Err(Error::Shape(format!(
                "generator expects features of dimension {}, got shape {:?}",
                self.feature_dim,
                feats.shape()
            )));
        }
        let [c, h, w] = self.image_shape;
        let h1 = self.linear1.forward(&feats);
        let h2 = self.linear2.forward(&h1);
        let h2_img = h2.reshaped(&[batch, c, h, w])?;
        let smoothed = self.smoother.forward(&h2_img);
        let squashed = tanh(&smoothed);
        Ok(GeneratorCache {
            feats,
            h1,
            h2_img,
            squashed,
        })
    }

    /// Backpropagate `dL/d(squashed)` through the generator, accumulating
    /// parameter gradients. Callers fold the epsilon scaling into `dsquashed`.
    pub fn backward_batch(&mut self, cache: &GeneratorCache<T>, dsquashed: &Tensor<T>) {
        let batch = cache.feats.shape()[0];
        let [c, h, w] = self.image_shape;
        let dsmoothed = tanh_backward(&cache.squashed, dsquashed);
        let dh2_img = self.smoother.backward(&cache.h2_img, &dsmoothed);
        let dh2 = dh2_img
            .reshaped(&[batch, c * h * w])
            .expect("generator reshape is element-preserving");
        let dh1 = self.linear2.backward(&cache.h1, &dh2);
        self.linear1.backward(&cache.feats, &dh1);
    }

    /// Persist parameters plus the metadata needed to rebuild and reuse the
    /// generator: feature dimension, image shape, and the epsilon it was
    /// trained for.
    pub fn save(&self, path: &Path, epsilon: f64) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "trigger_generator",
            "format_version": 1,
            "feature_dim": self.feature_dim,
            "image_shape": self.image_shape,
            "hidden_dim": self.hidden_dim(),
            "epsilon": epsilon,
            "dtype": T::DTYPE,
        });
        checkpoint::save_params(path, &meta, &checkpoint::flatten_params(&self.params()))
    }

    /// Load a generator checkpoint; returns the model and its stored epsilon.
    pub fn load(path: &Path) -> Result<(Self, f64)> {
        let (meta, blob) = checkpoint::load_params(path)?;
        let fail = |reason: String| Error::FileFormat {
            path: path.display().to_string(),
            reason,
        };
        let kind = checkpoint::meta_field(&meta, "kind", path)?;
        if kind != "trigger_generator" {
            return Err(fail(format!("checkpoint kind {kind} is not a generator")));
        }
        let feature_dim = checkpoint::meta_field(&meta, "feature_dim", path)?
            .as_u64()
            .ok_or_else(|| fail("feature_dim is not an integer".into()))?
            as usize;
        let hidden_dim = checkpoint::meta_field(&meta, "hidden_dim", path)?
            .as_u64()
            .ok_or_else(|| fail("hidden_dim is not an integer".into()))?
            as usize;
        let shape_v: Vec<usize> = checkpoint::meta_field(&meta, "image_shape", path)?
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect())
            .unwrap_or_default();
        let image_shape: [usize; 3] = shape_v
            .try_into()
            .map_err(|_| fail("image_shape must be [channels, height, width]".into()))?;
        let epsilon = checkpoint::meta_field(&meta, "epsilon", path)?
            .as_f64()
            .ok_or_else(|| fail("epsilon is not a number".into()))?;
        // Parameter layout is deterministic, so seeding the skeleton init is
        // irrelevant — every value is overwritten by the blob.
        let mut skeleton = Self::new(
            feature_dim,
            image_shape,
            hidden_dim,
            &mut crate::seed::stream(0, "generator:load-skeleton"),
        );
        checkpoint::unflatten_params(&mut skeleton.params_mut(), &blob)?;
        Ok((skeleton, epsilon))
    }
}

/// Run the generator on one instruction feature and scale by the epsilon
/// budget. The result is deterministic in (parameters, feature) and obeys
/// `|entry| <= epsilon` by construction of `tanh`.
pub fn generate_trigger<T: Scalar>(
    gen: &TriggerGenerator<T>,
    feat: &InstructionFeature,
    cfg: &AttackConfig,
) -> Result<Trigger<T>> {
    cfg.validate()?;
    if feat.dim() != gen.feature_dim() {
        return Err(Error::Shape(format!(
            "feature dimension {} does not match generator input {}",
            feat.dim(),
            gen.feature_dim()
        )));
    }
    let feats = Tensor::from_vec(
        &[1, feat.dim()],
        feat.vector.iter().map(|&v| T::cast(v)).collect(),
    )?;
    let cache = gen.forward_batch(feats)?;
    let [c, h, w] = gen.image_shape();
    let eps = T::cast(cfg.epsilon);
    let mut perturbation = cache.squashed.reshaped(&[c, h, w])?;
    perturbation.scale(eps);
    Ok(Trigger { perturbation })
}

/// Add a trigger to an image and clip to `[0, 1]`.
pub fn inject<T: Scalar>(x: &Tensor<T>, t: &Trigger<T>) -> Result<Tensor<T>> {
    if x.shape() != t.perturbation.shape() {
        return Err(Error::Shape(format!(
            "image shape {:?} does not match trigger shape {:?}",
            x.shape(),
            t.perturbation.shape()
        )));
    }
    let mut out = x.clone();
    out.add_scaled(&t.perturbation, T::one());
    Ok(out.clamp01())
}

pub const TRIGGER_CACHE_FORMAT_VERSION: u32 = 1;

/// On-disk trigger store: one perturbation per instruction text, keyed by
/// text digest, so a computed trigger can be reapplied to any number of
/// inputs without rerunning the generator.
#[derive(Debug, Serialize, Deserialize)]
pub struct TriggerCacheFile {
    pub format_version: u32,
    pub epsilon: f64,
    pub image_shape: [usize; 3],
    pub entries: Vec<TriggerCacheEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TriggerCacheEntry {
    /// SHA-256 hex digest of `text`.
    pub sha256: String,
    pub text: String,
    /// Row-major perturbation in image shape, widened to f64.
    pub perturbation: Vec<f64>,
}

impl TriggerCacheFile {
    pub fn new(epsilon: f64, image_shape: [usize; 3]) -> Self {
        Self {
            format_version: TRIGGER_CACHE_FORMAT_VERSION,
            epsilon,
            image_shape,
            entries: Vec::new(),
        }
    }

    pub fn insert<T: Scalar>(&mut self, text: &str, trigger: &Trigger<T>) {
        self.entries.push(TriggerCacheEntry {
            sha256: text_digest_hex(text),
            text: text.to_string(),
            perturbation: trigger.perturbation.iter().map(|v| v.as_f64()).collect(),
        });
    }

    pub fn lookup<T: Scalar>(&self, text: &str) -> Option<Trigger<T>> {
        let digest = text_digest_hex(text);
        let entry = self.entries.iter().find(|e| e.sha256 == digest)?;
        let [c, h, w] = self.image_shape;
        let data = entry.perturbation.iter().map(|&v| T::cast(v)).collect();
        Tensor::from_vec(&[c, h, w], data)
            .ok()
            .map(|perturbation| Trigger { perturbation })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let file: Self = serde_json::from_str(&raw).map_err(|e| Error::FileFormat {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if file.format_version != TRIGGER_CACHE_FORMAT_VERSION {
            return Err(Error::FileFormat {
                path: path.display().to_string(),
                reason: format!(
                    "unsupported format_version {} (expected {})",
                    file.format_version, TRIGGER_CACHE_FORMAT_VERSION
                ),
            });
        }
        let expected: usize = file.image_shape.iter().product();
        for e in &file.entries {
            if e.perturbation.len() != expected {
                return Err(Error::FileFormat {
                    path: path.display().to_string(),
                    reason: format!(
                        "entry {} has {} values, image shape needs {expected}",
                        e.sha256,
                        e.perturbation.len()
                    ),
                });
            }
        }
        Ok(file)
    }
}
