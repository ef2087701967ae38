//! Experiment configuration: one versioned TOML document pinning every knob a
//! run consumes. The schema is strict — unknown keys anywhere in the document
//! are hard errors, so a typo like `epsilom` fails fast instead of silently
//! running with a default. `format_version` and `seed` are mandatory; every
//! other key has the documented default.
//!
//! [`ExperimentConfig::resolve`] turns the document into the runtime objects
//! the other modules consume (dataset spec, splits, instruction set view,
//! feature pipeline, attack/schedule settings, defense sweeps, poison plan),
//! stamping the experiment seed into each of them.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_fashion_mnist, Dataset, SplitSpec, SyntheticSpec};
use crate::defense::{DefenseConfig, DefenseKind};
use crate::encoder::{
    FeaturePipeline, FileEncoder, OneHotEncoder, SyntheticEncoder, SYNTHETIC_FEATURE_DIM,
    SYNTHETIC_SIGMA,
};
use crate::error::{Error, Result};
use crate::instructions::{ContextTemplate, InstructionSet};
use crate::poison::PoisonPlan;
use crate::trainer::TrainSchedule;
use crate::trigger::AttackConfig;
use crate::victim::Architecture;

pub const CONFIG_FORMAT_VERSION: u32 = 1;

/// Named attack variants: which parts of the language conditioning are active.
/// Each preset fixes the three ablation switches and, where relevant, narrows
/// the instruction corpus to the canonical (first) description per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationPreset {
    /// Drop the language encoder entirely: the generator sees a one-hot
    /// class vector. No lexical spread, no context wrapping.
    OneHotBaseline,
    /// Encode only the bare class name, without context wrapping.
    LlmFeatureBaseline,
    /// Context wrapping on, but a single description per class.
    VictimSemanticsOnly,
    /// All descriptions, encoded raw without the supported-classes context.
    LexicalVariationsOnly,
    /// The complete attack: multiple descriptions, context wrapping, language
    /// features.
    #[default]
    Full,
}

impl std::fmt::Display for AblationPreset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            AblationPreset::OneHotBaseline => "one_hot_baseline",
            AblationPreset::LlmFeatureBaseline => "llm_feature_baseline",
            AblationPreset::VictimSemanticsOnly => "victim_semantics_only",
            AblationPreset::LexicalVariationsOnly => "lexical_variations_only",
            AblationPreset::Full => "full",
        };
        write!(f, "{name}")
    }
}

impl std::str::FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "one_hot_baseline" => Ok(Self::OneHotBaseline),
            "llm_feature_baseline" => Ok(Self::LlmFeatureBaseline),
            "victim_semantics_only" => Ok(Self::VictimSemanticsOnly),
            "lexical_variations_only" => Ok(Self::LexicalVariationsOnly),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!(
                "unknown ablation preset {other:?} (expected one_hot_baseline, \
                 llm_feature_baseline, victim_semantics_only, lexical_variations_only, or full)"
            ))),
        }
    }
}

impl AblationPreset {
    /// Whether training and evaluation see all known descriptions or only the
    /// first one per class.
    pub fn uses_lexical_variations(self) -> bool {
        matches!(self, Self::LexicalVariationsOnly | Self::Full)
    }

    /// Whether instructions are wrapped in the supported-classes context
    /// before encoding.
    pub fn uses_context_wrapping(self) -> bool {
        matches!(self, Self::VictimSemanticsOnly | Self::Full)
    }

    /// Whether the language encoder is replaced by one-hot class vectors.
    pub fn is_one_hot(self) -> bool {
        matches!(self, Self::OneHotBaseline)
    }
}

// ---- document sections -------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Built-in seeded class-blob generator; runs with zero downloads.
    #[default]
    Synthetic,
    /// Fashion-MNIST IDX files from `fashion_mnist_dir` (never downloaded).
    FashionMnist,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(default)]
    pub source: DatasetSource,
    /// Directory holding the four Fashion-MNIST IDX files.
    #[serde(default)]
    pub fashion_mnist_dir: Option<PathBuf>,
    #[serde(default = "defaults::classes")]
    pub classes: usize,
    #[serde(default = "defaults::image_shape")]
    pub image_shape: [usize; 3],
    #[serde(default = "defaults::train_per_class")]
    pub train_per_class: usize,
    #[serde(default = "defaults::test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "defaults::pixel_noise")]
    pub pixel_noise: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitsSection {
    /// Fraction of the evaluation pool held back for defenses; the rest is
    /// the test set.
    #[serde(default = "defaults::reserved_fraction")]
    pub reserved_fraction: f64,
    /// Merge train and pool, then re-split 80/20, for sources that ship
    /// without a labeled evaluation half.
    #[serde(default)]
    pub resplit_80_20: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionsSection {
    /// Path to the instruction-set fixture document.
    #[serde(default = "defaults::fixture")]
    pub fixture: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderBackendChoice {
    #[default]
    Synthetic,
    OneHot,
    File,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSection {
    #[serde(default)]
    pub backend: EncoderBackendChoice,
    /// Synthetic backend: feature dimension.
    #[serde(default = "defaults::feature_dim")]
    pub feature_dim: usize,
    /// Synthetic backend: description spread around each class anchor.
    #[serde(default = "defaults::sigma")]
    pub sigma: f64,
    /// File backend: precomputed text-to-vector table.
    #[serde(default)]
    pub feature_file: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VictimSection {
    #[serde(default = "defaults::architecture")]
    pub architecture: Architecture,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "defaults::epsilon")]
    pub epsilon: f64,
    #[serde(default = "defaults::p")]
    pub p: f64,
    #[serde(default)]
    pub literal_partition_weighting: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    #[serde(default = "defaults::epochs")]
    pub epochs: usize,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoisonSection {
    pub ratio: f64,
    /// Architecture retrained on the poisoned data (defaults to the victim's).
    #[serde(default)]
    pub retrain_architecture: Option<Architecture>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DefenseSection {
    pub kind: DefenseKind,
    /// Sweep strengths, strictly increasing; 0 means "defense bypassed".
    pub strengths: Vec<f64>,
    #[serde(default)]
    pub jpeg_quality: Option<u8>,
    #[serde(default)]
    pub kernel: Option<usize>,
    #[serde(default)]
    pub finetune_epochs: Option<usize>,
    #[serde(default)]
    pub finetune_lr: Option<f64>,
    #[serde(default)]
    pub finetune_batch: Option<usize>,
    #[serde(default)]
    pub prune_fraction: Option<f64>,
}

mod defaults {
    use super::*;

    pub fn classes() -> usize {
        10
    }
    pub fn image_shape() -> [usize; 3] {
        [3, 16, 16]
    }
    pub fn train_per_class() -> usize {
        600
    }
    pub fn test_per_class() -> usize {
        100
    }
    pub fn pixel_noise() -> f64 {
        0.05
    }
    pub fn reserved_fraction() -> f64 {
        0.10
    }
    pub fn fixture() -> PathBuf {
        PathBuf::from("fixtures/synthetic10.json")
    }
    pub fn feature_dim() -> usize {
        SYNTHETIC_FEATURE_DIM
    }
    pub fn sigma() -> f64 {
        SYNTHETIC_SIGMA
    }
    pub fn architecture() -> Architecture {
        Architecture::Mlp
    }
    pub fn epsilon() -> f64 {
        0.05
    }
    pub fn p() -> f64 {
        0.10
    }
    pub fn epochs() -> usize {
        30
    }
    pub fn batch_size() -> usize {
        16
    }
    pub fn learning_rate() -> f64 {
        0.01
    }
    pub fn lr_decay() -> f64 {
        0.5
    }
    pub fn momentum() -> f64 {
        0.9
    }
    pub fn output_dir() -> PathBuf {
        PathBuf::from("runs")
    }
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DatasetSource::Synthetic,
            fashion_mnist_dir: None,
            classes: defaults::classes(),
            image_shape: defaults::image_shape(),
            train_per_class: defaults::train_per_class(),
            test_per_class: defaults::test_per_class(),
            pixel_noise: defaults::pixel_noise(),
        }
    }
}

impl Default for SplitsSection {
    fn default() -> Self {
        Self {
            reserved_fraction: defaults::reserved_fraction(),
            resplit_80_20: false,
        }
    }
}

impl Default for InstructionsSection {
    fn default() -> Self {
        Self {
            fixture: defaults::fixture(),
        }
    }
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            backend: EncoderBackendChoice::Synthetic,
            feature_dim: defaults::feature_dim(),
            sigma: defaults::sigma(),
            feature_file: None,
        }
    }
}

impl Default for VictimSection {
    fn default() -> Self {
        Self {
            architecture: defaults::architecture(),
        }
    }
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            epsilon: defaults::epsilon(),
            p: defaults::p(),
            literal_partition_weighting: false,
        }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            epochs: defaults::epochs(),
            batch_size: defaults::batch_size(),
            learning_rate: defaults::learning_rate(),
            lr_decay: defaults::lr_decay(),
            momentum: defaults::momentum(),
        }
    }
}

// ---- the document ------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Schema version; this build reads version 1 only.
    pub format_version: u32,
    /// Master seed — mandatory. Every random stream derives from it.
    pub seed: u64,
    /// Seed for evaluation draws; defaults to the master seed.
    #[serde(default)]
    pub eval_seed: Option<u64>,
    #[serde(default = "defaults::output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ablation: AblationPreset,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub splits: SplitsSection,
    #[serde(default)]
    pub instructions: InstructionsSection,
    #[serde(default)]
    pub encoder: EncoderSection,
    #[serde(default)]
    pub victim: VictimSection,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub poison: Option<PoisonSection>,
    #[serde(default, rename = "defense", skip_serializing_if = "Vec::is_empty")]
    pub defenses: Vec<DefenseSection>,
}

impl ExperimentConfig {
    /// The calibrated default experiment with the given seed.
    pub fn with_seed(seed: u64) -> Self {
        Self {
            format_version: CONFIG_FORMAT_VERSION,
            seed,
            eval_seed: None,
            output_dir: defaults::output_dir(),
            ablation: AblationPreset::Full,
            dataset: DatasetSection::default(),
            splits: SplitsSection::default(),
            instructions: InstructionsSection::default(),
            encoder: EncoderSection::default(),
            victim: VictimSection::default(),
            attack: AttackSection::default(),
            schedule: ScheduleSection::default(),
            poison: None,
            defenses: Vec::new(),
        }
    }

    /// Parse a TOML document. Unknown keys anywhere are hard errors.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::FileFormat {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!(
            "config serialization failed: {e}"
        )))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported config format_version {} (this build reads {})",
                self.format_version, CONFIG_FORMAT_VERSION
            )));
        }
        let ds = &self.dataset;
        if ds.source == DatasetSource::FashionMnist && ds.fashion_mnist_dir.is_none() {
            return Err(Error::Config(
                "dataset source \"fashion_mnist\" needs dataset.fashion_mnist_dir".into(),
            ));
        }
        if ds.classes == 0
            || ds.train_per_class == 0
            || ds.test_per_class == 0
            || ds.image_shape.iter().any(|&d| d == 0)
        {
            return Err(Error::Config(format!(
                "dataset dimensions must be positive: {} classes, shape {:?}, {}/{} per class",
                ds.classes, ds.image_shape, ds.train_per_class, ds.test_per_class
            )));
        }
        if !ds.pixel_noise.is_finite() || ds.pixel_noise < 0.0 {
            return Err(Error::Config(format!(
                "dataset pixel_noise must be finite and non-negative, got {}",
                ds.pixel_noise
            )));
        }
        if !(0.0..1.0).contains(&self.splits.reserved_fraction) {
            return Err(Error::Config(format!(
                "splits reserved_fraction must be in [0, 1), got {}",
                self.splits.reserved_fraction
            )));
        }
        self.resolved_attack().validate()?;
        self.resolved_schedule().validate()?;
        if let Some(p) = &self.poison {
            PoisonPlan::new(p.ratio, self.seed).validate()?;
        }
        for d in &self.defenses {
            let (base, strengths) = self.resolved_defense(d)?;
            base.validate()?;
            if strengths.is_empty() {
                return Err(Error::Config(format!(
                    "defense {} has an empty strengths list",
                    base.kind
                )));
            }
        }
        match self.encoder.backend {
            EncoderBackendChoice::Synthetic => {
                if self.encoder.feature_dim == 0 {
                    return Err(Error::Config("encoder feature_dim must be positive".into()));
                }
                if !(self.encoder.sigma > 0.0) || !self.encoder.sigma.is_finite() {
                    return Err(Error::Config(format!(
                        "encoder sigma must be positive and finite, got {}",
                        self.encoder.sigma
                    )));
                }
            }
            EncoderBackendChoice::File => {
                if self.encoder.feature_file.is_none() {
                    return Err(Error::Config(
                        "encoder backend \"file\" needs encoder.feature_file".into(),
                    ));
                }
            }
            EncoderBackendChoice::OneHot => {}
        }
        Ok(())
    }

    pub fn resolved_dataset(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.dataset.classes,
            image_shape: self.dataset.image_shape,
            train_per_class: self.dataset.train_per_class,
            test_per_class: self.dataset.test_per_class,
            pixel_noise: self.dataset.pixel_noise,
            seed: self.seed,
        }
    }

    pub fn resolved_split(&self) -> SplitSpec {
        SplitSpec {
            reserved_fraction: self.splits.reserved_fraction,
            resplit_80_20: self.splits.resplit_80_20,
            seed: self.seed,
        }
    }

    pub fn resolved_attack(&self) -> AttackConfig {
        let mut cfg = AttackConfig::new(self.attack.epsilon, self.attack.p, self.seed);
        cfg.literal_partition_weighting = self.attack.literal_partition_weighting;
        cfg.use_lexical_variations = self.ablation.uses_lexical_variations();
        cfg.use_context_wrapping = self.ablation.uses_context_wrapping();
        cfg.one_hot_baseline = self.ablation.is_one_hot();
        cfg
    }

    pub fn resolved_schedule(&self) -> TrainSchedule {
        let mut sched = TrainSchedule::new(self.schedule.epochs, self.schedule.batch_size, self.seed);
        sched.learning_rate = self.schedule.learning_rate;
        sched.lr_decay = self.schedule.lr_decay;
        sched.momentum = self.schedule.momentum;
        sched
    }

    pub fn resolved_eval_seed(&self) -> u64 {
        self.eval_seed.unwrap_or(self.seed)
    }

    pub fn resolved_poison(&self) -> Option<(PoisonPlan, Architecture)> {
        self.poison.as_ref().map(|p| {
            (
                PoisonPlan::new(p.ratio, self.seed),
                p.retrain_architecture.unwrap_or(self.victim.architecture),
            )
        })
    }

    pub fn resolved_defense(&self, d: &DefenseSection) -> Result<(DefenseConfig, Vec<f64>)> {
        let mut base = DefenseConfig::new(d.kind);
        base.seed = self.seed;
        if let Some(q) = d.jpeg_quality {
            base.jpeg_quality = q;
        }
        if let Some(k) = d.kernel {
            base.kernel = k;
        }
        if let Some(e) = d.finetune_epochs {
            base.finetune_epochs = e;
        }
        if let Some(lr) = d.finetune_lr {
            base.finetune_lr = lr;
        }
        if let Some(b) = d.finetune_batch {
            base.finetune_batch = b;
        }
        if let Some(f) = d.prune_fraction {
            base.prune_fraction = f;
        }
        Ok((base, d.strengths.clone()))
    }

    /// Materialize the training set and evaluation pool from the configured
    /// source. Nothing is downloaded: file-backed sources error with explicit
    /// fetch instructions when their files are missing.
    pub fn load_dataset<T: crate::Scalar>(&self) -> Result<(Dataset<T>, Dataset<T>)> {
        match self.dataset.source {
            DatasetSource::Synthetic => generate_synthetic(&self.resolved_dataset()),
            DatasetSource::FashionMnist => {
                let dir = self.dataset.fashion_mnist_dir.as_ref().ok_or_else(|| {
                    Error::Config(
                        "dataset source \"fashion_mnist\" needs dataset.fashion_mnist_dir".into(),
                    )
                })?;
                load_fashion_mnist(dir)
            }
        }
    }

    /// The instruction corpus as this run's ablation sees it: single-description
    /// presets narrow each class to its canonical description for training
    /// draws and known-split evaluation alike.
    pub fn resolved_instructions(&self) -> Result<InstructionSet> {
        let set = InstructionSet::load(&self.instructions.fixture)?;
        if self.ablation.uses_lexical_variations() {
            Ok(set)
        } else {
            Ok(set.with_single_known_description())
        }
    }

    /// Build the feature pipeline for this run: backend per the encoder
    /// section (or a one-hot stand-in when the ablation demands it), wrapping
    /// per the ablation preset.
    pub fn resolved_pipeline(&self, set: &InstructionSet) -> Result<FeaturePipeline> {
        let template = ContextTemplate::default();
        let wrap = self.ablation.uses_context_wrapping();
        let backend: Box<dyn crate::encoder::EncoderBackend> = if self.ablation.is_one_hot() {
            Box::new(OneHotEncoder::new(set, &template)?)
        } else {
            match self.encoder.backend {
                EncoderBackendChoice::Synthetic => Box::new(SyntheticEncoder::new(
                    set,
                    &template,
                    self.encoder.feature_dim,
                    self.encoder.sigma,
                    self.seed,
                )?),
                EncoderBackendChoice::OneHot => Box::new(OneHotEncoder::new(set, &template)?),
                EncoderBackendChoice::File => {
                    let path = self.encoder.feature_file.as_ref().ok_or_else(|| {
                        Error::Config("encoder backend \"file\" needs encoder.feature_file".into())
                    })?;
                    Box::new(FileEncoder::load(path)?)
                }
            }
        };
        FeaturePipeline::new(backend, template, wrap, set.classes.clone())
    }
}
