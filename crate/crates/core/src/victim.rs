//! Victim classifiers.
//!
//! Two small architectures over `[0,1]` images: a two-block CNN and a
//! one-hidden-layer MLP. Both expose batched forward/backward passes that
//! return input gradients (the joint training loss differentiates through
//! the injected image into the trigger generator) and a multiplicative
//! feature mask on the penultimate layer, which is how pruning-style
//! defenses switch feature channels off without touching the weights.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{
    avg_pool2, avg_pool2_backward, relu, relu_backward, Conv2d, Linear, Param,
};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Victim architecture choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Cnn,
    Mlp,
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Architecture::Cnn => write!(f, "cnn"),
            Architecture::Mlp => write!(f, "mlp"),
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn" => Ok(Architecture::Cnn),
            "mlp" => Ok(Architecture::Mlp),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?} (expected \"cnn\" or \"mlp\")"
            ))),
        }
    }
}

const CNN_CHANNELS_1: usize = 8;
const CNN_CHANNELS_2: usize = 16;
const MLP_HIDDEN: usize = 256;

/// A victim classifier: parameters, forward map to logits, and a feature
/// mask on the penultimate layer.
#[derive(Debug, Clone)]
pub struct VictimModel<T> {
    arch: Architecture,
    image_shape: [usize; 3],
    classes: usize,
    // CNN path (conv1 -> relu -> pool -> conv2 -> relu -> mask -> pool -> fc).
    conv1: Option<Conv2d<T>>,
    conv2: Option<Conv2d<T>>,
    // MLP path (flatten -> fc1 -> relu -> mask -> fc).
    fc1: Option<Linear<T>>,
    fc_out: Linear<T>,
    /// Multiplicative gate per feature channel (CNN) or hidden unit (MLP).
    feature_mask: Vec<T>,
}

/// Activations of one victim forward pass, kept for the backward pass.
pub struct VictimCache<T> {
    x: Tensor<T>,
    // CNN intermediates.
    c1: Option<Tensor<T>>,
    p1: Option<Tensor<T>>,
    c2: Option<Tensor<T>>,
    m2: Option<Tensor<T>>,
    // MLP intermediates.
    h: Option<Tensor<T>>,
    /// Flattened masked features feeding the output layer, `(batch, feat)`.
    flat: Tensor<T>,
}

impl<T: Scalar> VictimModel<T> {
    pub fn new(
        arch: Architecture,
        image_shape: [usize; 3],
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let [c, h, w] = image_shape;
        if c == 0 || h == 0 || w == 0 || classes == 0 {
            return Err(Error::Config(format!(
                "invalid victim dimensions: image {image_shape:?}, {classes} classes"
            )));
        }
        match arch {
            Architecture::Cnn => {
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Config(format!(
                        "CNN pools twice; spatial dims must be divisible by 4, got {h}x{w}"
                    )));
                }
                let flat = CNN_CHANNELS_2 * (h / 4) * (w / 4);
                Ok(Self {
                    arch,
                    image_shape,
                    classes,
                    conv1: Some(Conv2d::new(c, CNN_CHANNELS_1, rng)),
                    conv2: Some(Conv2d::new(CNN_CHANNELS_1, CNN_CHANNELS_2, rng)),
                    fc1: None,
                    fc_out: Linear::new(flat, classes, rng),
                    feature_mask: vec![T::one(); CNN_CHANNELS_2],
                })
            }
            Architecture::Mlp => Ok(Self {
                arch,
                image_shape,
                classes,
                conv1: None,
                conv2: None,
                fc1: Some(Linear::new(c * h * w, MLP_HIDDEN, rng)),
                fc_out: Linear::new(MLP_HIDDEN, classes, rng),
                feature_mask: vec![T::one(); MLP_HIDDEN],
            }),
        }
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn num_classes(&self) -> usize {
        self.classes
    }

    /// Number of gated feature channels/units.
    pub fn feature_count(&self) -> usize {
        self.feature_mask.len()
    }

    pub fn feature_mask(&self) -> Vec<f64> {
        self.feature_mask.iter().map(|v| v.as_f64()).collect()
    }

    pub fn set_feature_mask(&mut self, mask: &[f64]) -> Result<()> {
        if mask.len() != self.feature_mask.len() {
            return Err(Error::Shape(format!(
                "mask has {} entries, model has {} feature channels",
                mask.len(),
                self.feature_mask.len()
            )));
        }
        self.feature_mask = mask.iter().map(|&v| T::cast(v)).collect();
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = Vec::new();
        if let Some(l) = &self.conv1 {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        if let Some(l) = &self.conv2 {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        if let Some(l) = &self.fc1 {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.fc_out.weight);
        out.push(&self.fc_out.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out: Vec<&mut Param<T>> = Vec::new();
        if let Some(l) = &mut self.conv1 {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(l) = &mut self.conv2 {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        if let Some(l) = &mut self.fc1 {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.fc_out.weight);
        out.push(&mut self.fc_out.bias);
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<usize> {
        let s = x.shape();
        let [c, h, w] = self.image_shape;
        if s.len() != 4 || s[1] != c || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!(
                "victim expects (batch, {c}, {h}, {w}), got {s:?}"
            )));
        }
        Ok(s[0])
    }

    /// Multiply a `(B, F, H, W)` tensor by the per-channel mask in place.
    fn apply_channel_mask(&self, t: &mut Tensor<T>) {
        let s = t.shape().to_vec();
        let plane = s[2] * s[3];
        for b in 0..s[0] {
            for f in 0..s[1] {
                let m = self.feature_mask[f];
                if m == T::one() {
                    continue;
                }
                let base = (b * s[1] + f) * plane;
                for v in &mut t.data_mut()[base..base + plane] {
                    *v *= m;
                }
            }
        }
    }

    /// Forward over an image batch `(batch, C, H, W)`; returns logits
    /// `(batch, classes)` and the cache for [`Self::backward_batch`].
    pub fn forward_batch(&self, x: Tensor<T>) -> Result<(Tensor<T>, VictimCache<T>)> {
        let batch = self.check_input(&x)?;
        match self.arch {
            Architecture::Cnn => {
                let conv1 = self.conv1.as_ref().expect("cnn has conv1");
                let conv2 = self.conv2.as_ref().expect("cnn has conv2");
                let c1 = conv1.forward(&x);
                let p1 = avg_pool2(&relu(&c1));
                let c2 = conv2.forward(&p1);
                let mut m2 = relu(&c2);
                self.apply_channel_mask(&mut m2);
                let p2 = avg_pool2(&m2);
                let flat_dim: usize = p2.shape()[1..].iter().product();
                let flat = p2.reshaped(&[batch, flat_dim])?;
                let logits = self.fc_out.forward(&flat);
                Ok((
                    logits,
                    VictimCache {
                        x,
                        c1: Some(c1),
                        p1: Some(p1),
                        c2: Some(c2),
                        m2: Some(m2),
                        h: None,
                        flat,
                    },
                ))
            }
            Architecture::Mlp => {
                let fc1 = self.fc1.as_ref().expect("mlp has fc1");
                let [c, h, w] = self.image_shape;
                let flat_in = x.clone().reshaped(&[batch, c * h * w])?;
                let hpre = fc1.forward(&flat_in);
                let mut hidden = relu(&hpre);
                for b in 0..batch {
                    let row = hidden.row_mut(b);
                    for (v, m) in row.iter_mut().zip(&self.feature_mask) {
                        *v *= *m;
                    }
                }
                let logits = self.fc_out.forward(&hidden);
                Ok((
                    logits,
                    VictimCache {
                        x,
                        c1: None,
                        p1: None,
                        c2: None,
                        m2: None,
                        h: Some(hpre),
                        flat: hidden,
                    },
                ))
            }
        }
    }

    /// Convenience forward that discards the cache.
    pub fn logits(&self, x: Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_batch(x)?.0)
    }

    /// Backpropagate `dL/dlogits`, accumulate parameter gradients, and
    /// return `dL/dx` (needed when the input itself is a function of the
    /// trigger generator).
    pub fn backward_batch(&mut self, cache: &VictimCache<T>, dlogits: &Tensor<T>) -> Tensor<T> {
        let batch = cache.x.shape()[0];
        match self.arch {
            Architecture::Cnn => {
                let dflat = self.fc_out.backward(&cache.flat, dlogits);
                let m2 = cache.m2.as_ref().expect("cnn cache has m2");
                let dp2 = dflat
                    .reshaped(&[batch, m2.shape()[1], m2.shape()[2] / 2, m2.shape()[3] / 2])
                    .expect("flat grad reshapes to pooled feature map");
                let mut dm2 = avg_pool2_backward(m2.shape(), &dp2);
                self.apply_channel_mask(&mut dm2);
                let c2 = cache.c2.as_ref().expect("cnn cache has c2");
                let dc2 = relu_backward(c2, &dm2);
                let p1 = cache.p1.as_ref().expect("cnn cache has p1");
                let conv2 = self.conv2.as_mut().expect("cnn has conv2");
                let dp1 = conv2.backward(p1, &dc2);
                let c1 = cache.c1.as_ref().expect("cnn cache has c1");
                let dr1 = avg_pool2_backward(c1.shape(), &dp1);
                let dc1 = relu_backward(c1, &dr1);
                let conv1 = self.conv1.as_mut().expect("cnn has conv1");
                conv1.backward(&cache.x, &dc1)
            }
            Architecture::Mlp => {
                let mut dhidden = self.fc_out.backward(&cache.flat, dlogits);
                for b in 0..batch {
                    let row = dhidden.row_mut(b);
                    for (v, m) in row.iter_mut().zip(&self.feature_mask) {
                        *v *= *m;
                    }
                }
                let hpre = cache.h.as_ref().expect("mlp cache has h");
                let dhpre = relu_backward(hpre, &dhidden);
                let fc1 = self.fc1.as_mut().expect("mlp has fc1");
                let [c, h, w] = self.image_shape;
                let flat_in = cache
                    .x
                    .clone()
                    .reshaped(&[batch, c * h * w])
                    .expect("image flattens");
                let dflat = fc1.backward(&flat_in, &dhpre);
                dflat
                    .reshaped(&[batch, c, h, w])
                    .expect("input grad reshapes to image")
            }
        }
    }

    /// Mean post-mask activation of each gated feature over a set of images,
    /// the signal pruning-style defenses rank channels by. Accumulated in
    /// f64 for batch-order stability.
    pub fn feature_activation_means(&self, images: &[Tensor<T>]) -> Result<Vec<f64>> {
        if images.is_empty() {
            return Err(Error::Config(
                "activation profiling needs at least one image".into(),
            ));
        }
        let mut sums = vec![0.0f64; self.feature_count()];
        let mut count = 0.0f64;
        for chunk in images.chunks(64) {
            let batch = stack_images(chunk)?;
            let (_, cache) = self.forward_batch(batch)?;
            match self.arch {
                Architecture::Cnn => {
                    let m2 = cache.m2.as_ref().expect("cnn cache has m2");
                    let s = m2.shape();
                    let plane = s[2] * s[3];
                    for b in 0..s[0] {
                        for f in 0..s[1] {
                            let base = (b * s[1] + f) * plane;
                            let total: f64 = m2.data()[base..base + plane]
                                .iter()
                                .map(|v| v.as_f64())
                                .sum();
                            sums[f] += total / plane as f64;
                        }
                    }
                    count += s[0] as f64;
                }
                Architecture::Mlp => {
                    for b in 0..chunk.len() {
                        for (f, v) in cache.flat.row(b).iter().enumerate() {
                            sums[f] += v.as_f64();
                        }
                    }
                    count += chunk.len() as f64;
                }
            }
        }
        for s in &mut sums {
            *s /= count;
        }
        Ok(sums)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "kind": "victim",
            "format_version": 1,
            "arch": self.arch,
            "image_shape": self.image_shape,
            "classes": self.classes,
            "feature_mask": self.feature_mask(),
            "dtype": T::DTYPE,
        });
        checkpoint::save_params(path, &meta, &checkpoint::flatten_params(&self.params()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, blob) = checkpoint::load_params(path)?;
        let fail = |reason: String| Error::FileFormat {
            path: path.display().to_string(),
            reason,
        };
        let kind = checkpoint::meta_field(&meta, "kind", path)?;
        if kind != "victim" {
            return Err(fail(format!("checkpoint kind {kind} is not a victim model")));
        }
        let arch: Architecture =
            serde_json::from_value(checkpoint::meta_field(&meta, "arch", path)?.clone())
                .map_err(|e| fail(format!("arch: {e}")))?;
        let shape_v: Vec<usize> = checkpoint::meta_field(&meta, "image_shape", path)?
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect())
            .unwrap_or_default();
        let image_shape: [usize; 3] = shape_v
            .try_into()
            .map_err(|_| fail("image_shape must be [channels, height, width]".into()))?;
        let classes = checkpoint::meta_field(&meta, "classes", path)?
            .as_u64()
            .ok_or_else(|| fail("classes is not an integer".into()))? as usize;
        let mask: Vec<f64> =
            serde_json::from_value(checkpoint::meta_field(&meta, "feature_mask", path)?.clone())
                .map_err(|e| fail(format!("feature_mask: {e}")))?;
        let mut model = Self::new(
            arch,
            image_shape,
            classes,
            &mut crate::seed::stream(0, "victim:load-skeleton"),
        )?;
        checkpoint::unflatten_params(&mut model.params_mut(), &blob)?;
        model.set_feature_mask(&mask)?;
        Ok(model)
    }
}

/// Stack per-image `(C, H, W)` tensors into one `(B, C, H, W)` batch.
pub fn stack_images<T: Scalar>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    if images.is_empty() {
        return Err(Error::Shape("cannot stack an empty image list".into()));
    }
    let shape = images[0].shape();
    let mut data = Vec::with_capacity(images.len() * images[0].len());
    for (i, img) in images.iter().enumerate() {
        if img.shape() != shape {
            return Err(Error::Shape(format!(
                "image {i} has shape {:?}, expected {shape:?}",
                img.shape()
            )));
        }
        data.extend_from_slice(img.data());
    }
    let mut full = vec![images.len()];
    full.extend_from_slice(shape);
    Tensor::from_vec(&full, data)
}
