//! Defenses against trigger-injected inputs and backdoored models, plus the
//! accuracy-vs-attack-success trade-off sweep used to compare them.
//!
//! Two families are implemented:
//!
//! * **Input mitigation** — sanitize every image before it reaches the
//!   classifier: JPEG re-encoding at a chosen quality, and mean / median
//!   sliding-window filters with reflect padding.
//! * **Model mitigation** — repair the classifier itself on a reserved clean
//!   split: fine-tuning, pruning the least-active feature channels, and the
//!   combination (prune, then fine-tune).
//!
//! `sweep_defense` evaluates one defense at several strengths and returns a
//! `TradeoffCurve`; `select_within_budget` picks the strongest strength whose
//! clean-accuracy cost stays inside a budget.

use std::io::Cursor;

use serde::{Deserialize, Serialize};

use crate::data::{round_count, Dataset};
use crate::encoder::FeaturePipeline;
use crate::error::{Error, Result};
use crate::eval::{evaluate_acc, evaluate_asr, AsrSplit, InputFilter, MetricsReport};
use crate::instructions::InstructionSet;
use crate::tensor::Tensor;
use crate::trainer::{train_clean, TrainSchedule};
use crate::trigger::{AttackConfig, TriggerGenerator};
use crate::victim::VictimModel;
use crate::Scalar;

/// Which defense to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    Jpeg,
    MeanFilter,
    MedianFilter,
    Finetune,
    Prune,
    FinePrune,
}

impl DefenseKind {
    pub fn is_input_defense(self) -> bool {
        matches!(
            self,
            DefenseKind::Jpeg | DefenseKind::MeanFilter | DefenseKind::MedianFilter
        )
    }
}

impl std::fmt::Display for DefenseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DefenseKind::Jpeg => "jpeg",
            DefenseKind::MeanFilter => "mean_filter",
            DefenseKind::MedianFilter => "median_filter",
            DefenseKind::Finetune => "finetune",
            DefenseKind::Prune => "prune",
            DefenseKind::FinePrune => "fine_prune",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for DefenseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jpeg" => Ok(DefenseKind::Jpeg),
            "mean_filter" => Ok(DefenseKind::MeanFilter),
            "median_filter" => Ok(DefenseKind::MedianFilter),
            "finetune" => Ok(DefenseKind::Finetune),
            "prune" => Ok(DefenseKind::Prune),
            "fine_prune" => Ok(DefenseKind::FinePrune),
            other => Err(Error::Config(format!(
                "unknown defense kind {other:?}; expected one of jpeg, mean_filter, \
                 median_filter, finetune, prune, fine_prune"
            ))),
        }
    }
}

/// One defense plus its strength parameters. Only the fields relevant to
/// `kind` are consulted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// JPEG encode quality, 1..=100 (lower = stronger compression).
    pub jpeg_quality: u8,
    /// Mean/median window side, odd and >= 3.
    pub kernel: usize,
    /// Fine-tuning epochs on the reserved clean split.
    pub finetune_epochs: usize,
    /// Fine-tuning learning rate.
    pub finetune_lr: f64,
    /// Fine-tuning batch size.
    pub finetune_batch: usize,
    /// Fraction of feature channels to disable, 0..=1.
    pub prune_fraction: f64,
    /// Seed for the fine-tuning shuffle.
    pub seed: u64,
}

impl DefenseConfig {
    /// Conventional strengths: JPEG quality 85 and 3x3 filter windows, a
    /// short fine-tune, and a 30% prune.
    pub fn new(kind: DefenseKind) -> Self {
        Self {
            kind,
            jpeg_quality: 85,
            kernel: 3,
            finetune_epochs: 5,
            finetune_lr: 0.01,
            finetune_batch: 16,
            prune_fraction: 0.3,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            DefenseKind::Jpeg => {
                if !(1..=100).contains(&self.jpeg_quality) {
                    return Err(Error::Config(format!(
                        "jpeg quality must be in 1..=100, got {}",
                        self.jpeg_quality
                    )));
                }
            }
            DefenseKind::MeanFilter | DefenseKind::MedianFilter => {
                if self.kernel < 3 || self.kernel % 2 == 0 {
                    return Err(Error::Config(format!(
                        "filter kernel must be odd and >= 3, got {}",
                        self.kernel
                    )));
                }
            }
            DefenseKind::Finetune | DefenseKind::FinePrune => {
                if self.finetune_epochs == 0 {
                    return Err(Error::Config("finetune_epochs must be positive".into()));
                }
                if !(self.finetune_lr > 0.0) || !self.finetune_lr.is_finite() {
                    return Err(Error::Config(format!(
                        "finetune_lr must be positive and finite, got {}",
                        self.finetune_lr
                    )));
                }
                if self.finetune_batch == 0 {
                    return Err(Error::Config("finetune_batch must be positive".into()));
                }
                if self.kind == DefenseKind::FinePrune {
                    self.check_prune_fraction()?;
                }
            }
            DefenseKind::Prune => self.check_prune_fraction()?,
        }
        Ok(())
    }

    fn check_prune_fraction(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.prune_fraction) {
            return Err(Error::Config(format!(
                "prune_fraction must be in [0, 1], got {}",
                self.prune_fraction
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Input mitigation
// ---------------------------------------------------------------------------

/// Mirror-reflect an out-of-range index into `0..n` without repeating the
/// edge sample (`-1 -> 1`, `n -> n-2`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    // One bounce suffices because kernels are validated against image size.
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * n - 2 - i;
    }
    debug_assert!((0..n).contains(&i));
    i as usize
}

/// Apply `reduce` over every kxk window (reflect padding), per channel.
fn window_filter<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    reduce: impl Fn(&mut Vec<f64>) -> f64,
) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "window filter expects a (C, H, W) image, got {shape:?}"
        )));
    }
    let [c, h, w] = [shape[0], shape[1], shape[2]];
    let r = k / 2;
    // Reflect padding bounces at most once off each border.
    if r >= h || r >= w {
        return Err(Error::Config(format!(
            "kernel {k} too large for a {h}x{w} image"
        )));
    }
    let mut out = vec![T::zero(); c * h * w];
    let data = x.data();
    let mut window = Vec::with_capacity(k * k);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                window.clear();
                for di in 0..k {
                    let ii = reflect(i as isize + di as isize - r as isize, h);
                    for dj in 0..k {
                        let jj = reflect(j as isize + dj as isize - r as isize, w);
                        window.push(plane[ii * w + jj].as_f64());
                    }
                }
                out[ch * h * w + i * w + j] = T::cast(reduce(&mut window));
            }
        }
    }
    Tensor::from_vec(shape, out)
}

fn mean_filter<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    window_filter(x, k, |w| w.iter().sum::<f64>() / w.len() as f64)
}

fn median_filter<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    window_filter(x, k, |w| {
        w.sort_by(|a, b| a.partial_cmp(b).expect("pixel values are finite"));
        w[w.len() / 2] // window size k*k is odd, so this is the exact median
    })
}

/// Round-trip one channel plane through the JPEG codec at `quality`.
fn jpeg_plane(plane: &[f64], h: usize, w: usize, quality: u8) -> Result<Vec<f64>> {
    let bytes: Vec<u8> = plane
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut encoded = Vec::new();
    let encoder =
        image::codecs::jpeg::JpegEncoder::new_with_quality(Cursor::new(&mut encoded), quality);
    image::GrayImage::from_raw(w as u32, h as u32, bytes)
        .expect("plane buffer matches dimensions")
        .write_with_encoder(encoder)
        .map_err(|e| Error::Numerical(format!("jpeg encode failed: {e}")))?;
    let decoded = image::load_from_memory_with_format(&encoded, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Numerical(format!("jpeg decode failed: {e}")))?
        .into_luma8();
    if decoded.width() != w as u32 || decoded.height() != h as u32 {
        return Err(Error::Shape(format!(
            "jpeg round trip changed dimensions: {}x{} -> {}x{}",
            w,
            h,
            decoded.width(),
            decoded.height()
        )));
    }
    Ok(decoded.into_raw().iter().map(|&b| b as f64 / 255.0).collect())
}

/// JPEG round trip, channel by channel (single-channel images use the codec
/// directly; RGB images compress each channel as its own grayscale plane).
fn jpeg_roundtrip<T: Scalar>(x: &Tensor<T>, quality: u8) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "jpeg defense expects a (C, H, W) image, got {shape:?}"
        )));
    }
    let [c, h, w] = [shape[0], shape[1], shape[2]];
    let data = x.data();
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let plane: Vec<f64> = data[ch * h * w..(ch + 1) * h * w]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        out.extend(jpeg_plane(&plane, h, w, quality)?.into_iter().map(T::cast));
    }
    Tensor::from_vec(shape, out)
}

/// Sanitize one image according to an input-defense config. Output has the
/// same shape and stays in [0, 1].
pub fn preprocess_input<T: Scalar>(x: &Tensor<T>, d: &DefenseConfig) -> Result<Tensor<T>> {
    d.validate()?;
    let out = match d.kind {
        DefenseKind::Jpeg => jpeg_roundtrip(x, d.jpeg_quality)?,
        DefenseKind::MeanFilter => mean_filter(x, d.kernel)?,
        DefenseKind::MedianFilter => median_filter(x, d.kernel)?,
        other => {
            return Err(Error::Config(format!(
                "{other} is a model defense, not an input preprocessor"
            )))
        }
    };
    Ok(out.clamp01())
}

/// Adapter that lets the evaluator run every image through an input defense.
pub struct PreprocessFilter {
    cfg: DefenseConfig,
}

impl PreprocessFilter {
    pub fn new(cfg: DefenseConfig) -> Result<Self> {
        if !cfg.kind.is_input_defense() {
            return Err(Error::Config(format!(
                "{} cannot be used as an input filter",
                cfg.kind
            )));
        }
        cfg.validate()?;
        Ok(Self { cfg })
    }
}

impl<T: Scalar> InputFilter<T> for PreprocessFilter {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        preprocess_input(x, &self.cfg)
    }
}

// ---------------------------------------------------------------------------
// Model mitigation
// ---------------------------------------------------------------------------

/// Disable the `fraction` of feature channels with the lowest mean activation
/// on the reserved clean data. Returns the number of channels switched off.
fn prune_channels<T: Scalar>(
    model: &mut VictimModel<T>,
    reserved: &Dataset<T>,
    fraction: f64,
) -> Result<usize> {
    let means = model.feature_activation_means(&reserved.images)?;
    let total = means.len();
    let count = round_count(fraction * total as f64).min(total);
    let mut order: Vec<usize> = (0..total).collect();
    // Lowest mean first; ties broken by channel index for determinism.
    order.sort_by(|&a, &b| {
        means[a]
            .partial_cmp(&means[b])
            .expect("activation means are finite")
            .then(a.cmp(&b))
    });
    let mut mask = model.feature_mask();
    for &ch in order.iter().take(count) {
        mask[ch] = 0.0;
    }
    model.set_feature_mask(&mask)?;
    Ok(count)
}

fn finetune<T: Scalar>(
    model: &mut VictimModel<T>,
    reserved: &Dataset<T>,
    d: &DefenseConfig,
) -> Result<()> {
    let mut sched = TrainSchedule::new(d.finetune_epochs, d.finetune_batch, d.seed);
    sched.learning_rate = d.finetune_lr;
    train_clean(model, reserved, reserved, &sched, None)?;
    Ok(())
}

/// Repair a (possibly backdoored) model with a model-level defense, using
/// only the reserved clean split. The input model is left untouched; the
/// repaired copy is returned.
pub fn mitigate_model<T: Scalar>(
    victim: &VictimModel<T>,
    d: &DefenseConfig,
    reserved: &Dataset<T>,
) -> Result<VictimModel<T>> {
    d.validate()?;
    if reserved.is_empty() {
        return Err(Error::Config(
            "model mitigation needs a non-empty reserved clean split".into(),
        ));
    }
    let mut repaired = victim.clone();
    match d.kind {
        DefenseKind::Finetune => finetune(&mut repaired, reserved, d)?,
        DefenseKind::Prune => {
            prune_channels(&mut repaired, reserved, d.prune_fraction)?;
        }
        DefenseKind::FinePrune => {
            prune_channels(&mut repaired, reserved, d.prune_fraction)?;
            finetune(&mut repaired, reserved, d)?;
        }
        other => {
            return Err(Error::Config(format!(
                "{other} is an input preprocessor, not a model defense"
            )))
        }
    }
    Ok(repaired)
}

// ---------------------------------------------------------------------------
// Trade-off sweep
// ---------------------------------------------------------------------------

/// One evaluated strength. A point that failed to evaluate keeps its strength
/// and carries the error text instead of metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub strength: f64,
    pub acc: Option<f64>,
    pub asr: Option<f64>,
    pub error: Option<String>,
}

/// Accuracy / attack-success pairs across increasing defense strengths.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TradeoffCurve {
    pub kind: DefenseKind,
    pub points: Vec<TradeoffPoint>,
}

impl TradeoffCurve {
    pub fn validate(&self) -> Result<()> {
        for pair in self.points.windows(2) {
            if pair[1].strength <= pair[0].strength {
                return Err(Error::Config(format!(
                    "strengths must be strictly increasing, got {} then {}",
                    pair[0].strength, pair[1].strength
                )));
            }
        }
        Ok(())
    }

    /// CSV rows `strength,acc,asr`; failed points leave empty cells.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strength,acc,asr\n");
        for p in &self.points {
            let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{}\n",
                p.strength,
                fmt(p.acc),
                fmt(p.asr)
            ));
        }
        out
    }
}

/// Interpret an abstract sweep strength for a defense kind:
///
/// * `jpeg` — strength s in (0, 1] compresses harder: quality = 100 - 99*s
///   (s = 1 is quality 1; the conventional quality 85 sits near s = 0.15).
/// * `mean_filter` / `median_filter` — window side = 2*round(s) + 1
///   (s = 1 -> 3x3, s = 2 -> 5x5, ...).
/// * `finetune` — round(s) fine-tuning epochs.
/// * `prune` / `fine_prune` — prune fraction s in (0, 1].
///
/// Strength 0 always means "defense off" and is reported straight from the
/// undefended model so the sweep baseline is exact. Returns `None` for 0.
pub fn resolve_strength(base: &DefenseConfig, strength: f64) -> Result<Option<DefenseConfig>> {
    if !strength.is_finite() || strength < 0.0 {
        return Err(Error::Config(format!(
            "sweep strength must be finite and >= 0, got {strength}"
        )));
    }
    if strength == 0.0 {
        return Ok(None);
    }
    let mut cfg = base.clone();
    match base.kind {
        DefenseKind::Jpeg => {
            if strength > 1.0 {
                return Err(Error::Config(format!(
                    "jpeg sweep strength must be in [0, 1], got {strength}"
                )));
            }
            cfg.jpeg_quality = (100.0 - 99.0 * strength).round().clamp(1.0, 100.0) as u8;
        }
        DefenseKind::MeanFilter | DefenseKind::MedianFilter => {
            let steps = strength.round();
            if (strength - steps).abs() > 1e-9 || steps < 1.0 {
                return Err(Error::Config(format!(
                    "filter sweep strength must be a positive integer \
                     (window = 2*strength + 1), got {strength}"
                )));
            }
            cfg.kernel = 2 * steps as usize + 1;
        }
        DefenseKind::Finetune => {
            let epochs = strength.round();
            if (strength - epochs).abs() > 1e-9 || epochs < 1.0 {
                return Err(Error::Config(format!(
                    "finetune sweep strength must be a positive whole number \
                     of epochs, got {strength}"
                )));
            }
            cfg.finetune_epochs = epochs as usize;
        }
        DefenseKind::Prune | DefenseKind::FinePrune => {
            if strength > 1.0 {
                return Err(Error::Config(format!(
                    "prune sweep strength must be in [0, 1], got {strength}"
                )));
            }
            cfg.prune_fraction = strength;
        }
    }
    cfg.validate()?;
    Ok(Some(cfg))
}

/// Everything the sweep needs to score one defended configuration.
pub struct SweepTarget<'a, T: Scalar> {
    pub victim: &'a VictimModel<T>,
    pub generator: &'a TriggerGenerator<T>,
    pub pipeline: &'a FeaturePipeline,
    pub instrs: &'a InstructionSet,
    pub test: &'a Dataset<T>,
    pub reserved: &'a Dataset<T>,
    pub attack: &'a AttackConfig,
    pub eval_seed: u64,
}

fn score_point<T: Scalar>(
    target: &SweepTarget<'_, T>,
    cfg: Option<&DefenseConfig>,
) -> Result<(f64, MetricsReport)> {
    match cfg {
        None => {
            let acc = evaluate_acc(target.victim, target.test, None)?;
            let asr = evaluate_asr(
                target.victim,
                target.generator,
                target.pipeline,
                target.instrs,
                AsrSplit::Known,
                target.test,
                target.attack,
                target.eval_seed,
                None,
            )?;
            Ok((acc, asr))
        }
        Some(d) if d.kind.is_input_defense() => {
            let filter = PreprocessFilter::new(d.clone())?;
            let acc = evaluate_acc(target.victim, target.test, Some(&filter))?;
            let asr = evaluate_asr(
                target.victim,
                target.generator,
                target.pipeline,
                target.instrs,
                AsrSplit::Known,
                target.test,
                target.attack,
                target.eval_seed,
                Some(&filter),
            )?;
            Ok((acc, asr))
        }
        Some(d) => {
            let repaired = mitigate_model(target.victim, d, target.reserved)?;
            let acc = evaluate_acc(&repaired, target.test, None)?;
            let asr = evaluate_asr(
                &repaired,
                target.generator,
                target.pipeline,
                target.instrs,
                AsrSplit::Known,
                target.test,
                target.attack,
                target.eval_seed,
                None,
            )?;
            Ok((acc, asr))
        }
    }
}

/// Evaluate `base`'s defense at each strength (strictly increasing). Failed
/// points are kept in the curve with their error text so one bad strength
/// does not lose the rest of the sweep.
pub fn sweep_defense<T: Scalar>(
    target: &SweepTarget<'_, T>,
    base: &DefenseConfig,
    strengths: &[f64],
) -> Result<TradeoffCurve> {
    if strengths.is_empty() {
        return Err(Error::Config("defense sweep needs at least one strength".into()));
    }
    for pair in strengths.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::Config(format!(
                "sweep strengths must be strictly increasing, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    let mut points = Vec::with_capacity(strengths.len());
    for &s in strengths {
        let point = resolve_strength(base, s).and_then(|cfg| score_point(target, cfg.as_ref()));
        points.push(match point {
            Ok((acc, asr)) => TradeoffPoint {
                strength: s,
                acc: Some(acc),
                asr: Some(asr.asr_mean),
                error: None,
            },
            Err(e) => TradeoffPoint {
                strength: s,
                acc: None,
                asr: None,
                error: Some(e.to_string()),
            },
        });
    }
    let curve = TradeoffCurve {
        kind: base.kind,
        points,
    };
    curve.validate()?;
    Ok(curve)
}

/// The "spend at most `budget_points` of clean accuracy" tuning rule: the
/// strongest strength whose ACC stays within the budget of the undefended
/// accuracy. Points that failed to evaluate never qualify.
pub fn select_within_budget<'c>(
    curve: &'c TradeoffCurve,
    undefended_acc: f64,
    budget_points: f64,
) -> Option<&'c TradeoffPoint> {
    curve
        .points
        .iter()
        .rev()
        .find(|p| matches!(p.acc, Some(acc) if undefended_acc - acc <= budget_points))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticSpec};
    use crate::encoder::{SyntheticEncoder, SYNTHETIC_FEATURE_DIM};
    use crate::instructions::ContextTemplate;
    use crate::seed::stream;
    use crate::trigger::GENERATOR_HIDDEN_DIM;
    use crate::victim::Architecture;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn demo_image(seed: u64, shape: [usize; 3]) -> Tensor<f64> {
        let mut rng = stream(seed, "defense:test-image");
        let data: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| rng.random_range(0.0..1.0))
            .collect();
        Tensor::from_vec(&shape, data).unwrap()
    }

    #[test]
    fn median_filter_is_identity_on_constant_images() {
        let x = Tensor::<f64>::filled(&[3, 7, 5], 0.37);
        let d = DefenseConfig::new(DefenseKind::MedianFilter);
        let y = preprocess_input(&x, &d).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn median_filter_removes_a_hot_pixel() {
        let mut x = Tensor::<f64>::zeros(&[1, 5, 5]);
        x.data_mut()[2 * 5 + 2] = 1.0; // interior hot pixel
        let d = DefenseConfig::new(DefenseKind::MedianFilter);
        let y = preprocess_input(&x, &d).unwrap();
        // Every 3x3 neighborhood contains at most one hot pixel, so each
        // median is 0: the output is exactly the zero image.
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_filter_matches_hand_computed_reflect_padding() {
        // 1x3x3 image; reflect padding mirrors without repeating the edge:
        // row index -1 -> 1, 3 -> 1; same for columns.
        let x = Tensor::from_vec(
            &[1, 3, 3],
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let y = mean_filter(&x, 3).unwrap();
        // Window at (0,0) draws rows (1,0,1) and cols (1,0,1):
        //   [5 4 5; 2 1 2; 5 4 5] -> mean = 33/9
        assert_abs_diff_eq!(y.data()[0], 33.0 / 9.0, epsilon = 1e-12);
        // Center window is the plain mean of 1..=9 = 5.
        assert_abs_diff_eq!(y.data()[4], 5.0, epsilon = 1e-12);
        // Window at (2,1) draws rows (1,2,1) and cols (0,1,2):
        //   [4 5 6; 7 8 9; 4 5 6] -> mean = 54/9 = 6
        assert_abs_diff_eq!(y.data()[7], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn mean_filter_is_linear_in_the_image() {
        let x = demo_image(1, [3, 9, 9]);
        let d = DefenseConfig::new(DefenseKind::MeanFilter);
        for a in [0.25, 0.5, 0.9] {
            let scaled = x.map(|v| v * a);
            let lhs = preprocess_input(&scaled, &d).unwrap();
            let rhs = preprocess_input(&x, &d).unwrap().map(|v| v * a);
            for (l, r) in lhs.data().iter().zip(rhs.data()) {
                assert_abs_diff_eq!(l, r, epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn jpeg_quality_100_round_trip_stays_close() {
        let x = demo_image(2, [3, 16, 16]);
        let mut d = DefenseConfig::new(DefenseKind::Jpeg);
        d.jpeg_quality = 100;
        let y = preprocess_input(&x, &d).unwrap();
        assert_eq!(y.shape(), x.shape());
        // Direct PSNR computation as the oracle.
        let mse: f64 = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / x.len() as f64;
        let psnr = 10.0 * (1.0 / mse).log10();
        assert!(psnr >= 40.0, "psnr {psnr} dB below 40");
    }

    #[test]
    fn preprocess_output_stays_in_unit_range_and_shape() {
        let x = demo_image(3, [3, 11, 13]);
        for kind in [DefenseKind::Jpeg, DefenseKind::MeanFilter, DefenseKind::MedianFilter] {
            let d = DefenseConfig::new(kind);
            let y = preprocess_input(&x, &d).unwrap();
            assert_eq!(y.shape(), x.shape(), "{kind}");
            assert!(
                y.data().iter().all(|&v| (0.0..=1.0).contains(&v)),
                "{kind} left the unit range"
            );
        }
    }

    #[test]
    fn invalid_strengths_are_config_errors() {
        let x = demo_image(4, [1, 5, 5]);
        let mut d = DefenseConfig::new(DefenseKind::MeanFilter);
        d.kernel = 4;
        assert!(matches!(preprocess_input(&x, &d), Err(Error::Config(_))));
        d.kernel = 1;
        assert!(matches!(preprocess_input(&x, &d), Err(Error::Config(_))));
        let mut j = DefenseConfig::new(DefenseKind::Jpeg);
        j.jpeg_quality = 0;
        assert!(matches!(preprocess_input(&x, &j), Err(Error::Config(_))));
        // Kernel larger than twice the image is rejected rather than
        // reflecting out of range.
        let mut big = DefenseConfig::new(DefenseKind::MeanFilter);
        big.kernel = 11;
        assert!(matches!(preprocess_input(&x, &big), Err(Error::Config(_))));
    }

    #[test]
    fn model_defenses_reject_input_role_and_vice_versa() {
        let x = demo_image(5, [1, 5, 5]);
        let d = DefenseConfig::new(DefenseKind::Prune);
        assert!(matches!(preprocess_input(&x, &d), Err(Error::Config(_))));
        assert!(PreprocessFilter::new(d).is_err());

        let spec = SyntheticSpec {
            classes: 2,
            image_shape: [1, 8, 8],
            train_per_class: 4,
            test_per_class: 2,
            pixel_noise: 0.05,
            seed: 11,
        };
        let (train, _) = generate_synthetic::<f64>(&spec).unwrap();
        let model =
            VictimModel::<f64>::new(Architecture::Mlp, [1, 8, 8], 2, &mut stream(1, "d")).unwrap();
        let jpeg = DefenseConfig::new(DefenseKind::Jpeg);
        assert!(matches!(
            mitigate_model(&model, &jpeg, &train),
            Err(Error::Config(_))
        ));
    }

    fn tiny_setup() -> (Dataset<f64>, Dataset<f64>, VictimModel<f64>) {
        let spec = SyntheticSpec {
            classes: 3,
            image_shape: [1, 8, 8],
            train_per_class: 40,
            test_per_class: 12,
            pixel_noise: 0.05,
            seed: 23,
        };
        let (train, pool) = generate_synthetic::<f64>(&spec).unwrap();
        let mut rng = stream(23, "defense:tiny-model");
        let mut model = VictimModel::<f64>::new(Architecture::Mlp, [1, 8, 8], 3, &mut rng).unwrap();
        let mut sched = TrainSchedule::new(6, 8, 23);
        sched.lr_decay = 1.0;
        train_clean(&mut model, &train, &pool, &sched, None).unwrap();
        (train, pool, model)
    }

    #[test]
    fn prune_fraction_zero_changes_nothing_and_input_stays_pure() {
        let (train, test, model) = tiny_setup();
        let before = crate::checkpoint::flatten_params(&model.params());
        let mask_before = model.feature_mask();

        let mut d = DefenseConfig::new(DefenseKind::Prune);
        d.prune_fraction = 0.0;
        let repaired = mitigate_model(&model, &d, &train).unwrap();
        let base_preds = crate::eval::predict(&model, &test.images, None).unwrap();
        let rep_preds = crate::eval::predict(&repaired, &test.images, None).unwrap();
        assert_eq!(base_preds, rep_preds);
        assert_eq!(repaired.feature_mask(), mask_before);

        // Purity: a strong defense still leaves the input model untouched.
        let mut strong = DefenseConfig::new(DefenseKind::FinePrune);
        strong.prune_fraction = 0.8;
        strong.finetune_epochs = 2;
        let _ = mitigate_model(&model, &strong, &train).unwrap();
        assert_eq!(crate::checkpoint::flatten_params(&model.params()), before);
        assert_eq!(model.feature_mask(), mask_before);
    }

    #[test]
    fn prune_fraction_one_collapses_accuracy() {
        let (train, test, model) = tiny_setup();
        let base_acc = evaluate_acc(&model, &test, None).unwrap();
        assert!(base_acc > 80.0, "toy model should learn: acc {base_acc}");
        let mut d = DefenseConfig::new(DefenseKind::Prune);
        d.prune_fraction = 1.0;
        let repaired = mitigate_model(&model, &d, &train).unwrap();
        assert!(repaired.feature_mask().iter().all(|&m| m == 0.0));
        let acc = evaluate_acc(&repaired, &test, None).unwrap();
        // All features disabled: logits collapse to the output bias, a
        // constant prediction, so accuracy sits at the label frequency.
        assert!(acc <= 100.0 / 3.0 + 10.0, "acc {acc} after full prune");
    }

    #[test]
    fn finetune_keeps_or_improves_reserved_accuracy() {
        let (train, test, model) = tiny_setup();
        let mut d = DefenseConfig::new(DefenseKind::Finetune);
        d.finetune_epochs = 3;
        d.finetune_batch = 8;
        d.seed = 5;
        let repaired = mitigate_model(&model, &d, &train).unwrap();
        let base = evaluate_acc(&model, &test, None).unwrap();
        let tuned = evaluate_acc(&repaired, &test, None).unwrap();
        assert!(
            tuned >= base - 5.0,
            "finetune should not wreck accuracy: {base} -> {tuned}"
        );
    }

    #[test]
    fn pruning_disables_lowest_mean_activation_channels() {
        let (train, _, model) = tiny_setup();
        let means = model.feature_activation_means(&train.images).unwrap();
        let mut d = DefenseConfig::new(DefenseKind::Prune);
        d.prune_fraction = 0.25;
        let repaired = mitigate_model(&model, &d, &train).unwrap();
        let mask = repaired.feature_mask();
        let pruned: Vec<usize> = (0..mask.len()).filter(|&i| mask[i] == 0.0).collect();
        let expect = round_count(0.25 * means.len() as f64);
        assert_eq!(pruned.len(), expect);
        // Every pruned channel's mean is <= every surviving channel's mean.
        let worst_pruned = pruned
            .iter()
            .map(|&i| means[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let best_kept = (0..mask.len())
            .filter(|i| mask[*i] != 0.0)
            .map(|i| means[i])
            .fold(f64::INFINITY, f64::min);
        assert!(worst_pruned <= best_kept);
    }

    #[test]
    fn budget_rule_picks_strongest_qualifying_strength() {
        let mk = |strength: f64, acc: Option<f64>| TradeoffPoint {
            strength,
            acc,
            asr: acc.map(|_| 50.0),
            error: acc.is_none().then(|| "boom".into()),
        };
        let curve = TradeoffCurve {
            kind: DefenseKind::Prune,
            points: vec![
                mk(0.0, Some(90.0)),
                mk(0.2, Some(88.0)),
                mk(0.4, Some(86.0)),
                mk(0.6, None),
                mk(0.8, Some(70.0)),
            ],
        };
        curve.validate().unwrap();
        // Budget 5: strengths 0.8 (acc 70) and the failed 0.6 do not qualify;
        // 0.4 (drop 4) is the strongest that does.
        let picked = select_within_budget(&curve, 90.0, 5.0).unwrap();
        assert_eq!(picked.strength, 0.4);
        // Budget 0.5: only the undefended point qualifies.
        assert_eq!(select_within_budget(&curve, 90.0, 0.5).unwrap().strength, 0.0);
        // Nothing qualifies against a higher baseline.
        assert!(select_within_budget(&curve, 99.0, 1.0).is_none());
        // Everything qualifies with a huge budget: strongest wins.
        assert_eq!(
            select_within_budget(&curve, 90.0, 50.0).unwrap().strength,
            0.8
        );
    }

    #[test]
    fn strength_mapping_and_monotonicity_checks() {
        let base = DefenseConfig::new(DefenseKind::Jpeg);
        assert!(resolve_strength(&base, 0.0).unwrap().is_none());
        let q85 = resolve_strength(&base, 0.15).unwrap().unwrap();
        assert_eq!(q85.jpeg_quality, 85);
        let q1 = resolve_strength(&base, 1.0).unwrap().unwrap();
        assert_eq!(q1.jpeg_quality, 1);
        assert!(resolve_strength(&base, 1.5).is_err());
        assert!(resolve_strength(&base, -0.1).is_err());

        let filt = DefenseConfig::new(DefenseKind::MedianFilter);
        assert_eq!(resolve_strength(&filt, 2.0).unwrap().unwrap().kernel, 5);
        assert!(resolve_strength(&filt, 0.5).is_err());

        let ft = DefenseConfig::new(DefenseKind::Finetune);
        assert_eq!(
            resolve_strength(&ft, 4.0).unwrap().unwrap().finetune_epochs,
            4
        );
    }

    #[test]
    fn sweep_strength_zero_reproduces_undefended_metrics_exactly() {
        let (train, test, model) = tiny_setup();
        let set = crate::encoder::demo_set(3, 2, 1);
        let tmpl = ContextTemplate::default();
        let enc = SyntheticEncoder::with_defaults(&set, &tmpl, 31).unwrap();
        let pipeline =
            FeaturePipeline::new(Box::new(enc), tmpl, true, set.classes.clone()).unwrap();
        let generator = TriggerGenerator::<f64>::new(
            SYNTHETIC_FEATURE_DIM,
            [1, 8, 8],
            GENERATOR_HIDDEN_DIM,
            &mut stream(31, "defense:sweep-gen"),
        );
        let attack = AttackConfig::new(0.05, 0.10, 31);
        let target = SweepTarget {
            victim: &model,
            generator: &generator,
            pipeline: &pipeline,
            instrs: &set,
            test: &test,
            reserved: &train,
            attack: &attack,
            eval_seed: 77,
        };
        let curve = sweep_defense(&target, &DefenseConfig::new(DefenseKind::Prune), &[0.0, 1.0])
            .unwrap();
        let direct_acc = evaluate_acc(&model, &test, None).unwrap();
        let direct_asr = evaluate_asr(
            &model,
            &generator,
            &pipeline,
            &set,
            AsrSplit::Known,
            &test,
            &attack,
            77,
            None,
        )
        .unwrap();
        assert_eq!(curve.points[0].acc, Some(direct_acc));
        assert_eq!(curve.points[0].asr, Some(direct_asr.asr_mean));
        assert!(curve.points[0].error.is_none());
        // Endpoint comparison: full prune hurts accuracy.
        assert!(curve.points[1].acc.unwrap() < curve.points[0].acc.unwrap());

        // Decreasing strengths are rejected.
        assert!(sweep_defense(&target, &DefenseConfig::new(DefenseKind::Prune), &[0.5, 0.2])
            .is_err());
    }
}
