//! Instruction-feature encoders.
//!
//! A backend turns instruction text into a fixed-dimension real vector. The
//! practical backends here are offline stand-ins for a large language model:
//!
//! * [`SyntheticEncoder`] — deterministic geometric construction that places
//!   every description of a class in a tight cluster around a per-class
//!   anchor on the unit sphere. It reproduces the qualitative geometry of
//!   real LLM features (same-class descriptions nearby, classes far apart)
//!   with zero model weights, which is what makes the known/unknown
//!   generalization experiments runnable at desk scale.
//! * [`OneHotEncoder`] — the ablation baseline that collapses every
//!   description of class `c` to the one-hot vector `e_c`.
//! * [`FileEncoder`] — reads precomputed `(text, vector)` pairs from disk so
//!   real LLM embeddings can be plugged in without running the LLM here.
//!
//! [`CachedEncoder`] memoizes any backend behind a read-write lock
//! (concurrent reads, serialized writes), and [`FeaturePipeline`] bundles a
//! backend with the context template so callers deal only in
//! [`Instruction`]s.

use std::collections::HashMap;
use std::path::Path;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instructions::{wrap_with_context, ContextTemplate, Instruction, InstructionSet};
use crate::scalar::Scalar;
use crate::seed::{stream, text_digest_hex};

/// Feature vector for one instruction; dimension is fixed per experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstructionFeature {
    pub vector: Vec<f64>,
}

impl InstructionFeature {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        if let Some(bad) = vector.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "instruction feature contains non-finite entry {bad}"
            )));
        }
        Ok(Self { vector })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// A text-to-vector encoder. Implementations must be safe for concurrent
/// `encode` calls.
pub trait EncoderBackend: Send + Sync {
    fn name(&self) -> &str;
    fn feature_dim(&self) -> usize;
    /// Whether identical input text always yields an identical vector.
    fn deterministic(&self) -> bool {
        true
    }
    fn encode(&self, text: &str) -> Result<Vec<f64>>;
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

/// Default feature dimension of the synthetic backend.
pub const SYNTHETIC_FEATURE_DIM: usize = 64;
/// Default within-class noise scale of the synthetic backend.
pub const SYNTHETIC_SIGMA: f64 = 0.8;

/// Deterministic stand-in for an LLM feature extractor.
///
/// Construction: each class `c` gets an anchor `b_c` drawn uniformly on the
/// unit sphere from the experiment seed. A registered input string `s`
/// belonging to class `c` encodes as `normalize(b_c + sigma * u(s))` where
/// `u(s)` is a unit vector along a standard normal draw keyed by the SHA-256
/// digest of `s`. Keeping the noise direction unit-length makes the offset
/// magnitude exactly `sigma`, so same-class vectors form a cluster whose
/// spread grows with `sigma` (mean same-class cosine near `1/(1+sigma^2)`,
/// about 0.6 at the default 0.8) while different classes stay
/// near-orthogonal in dimension 64.
///
/// Semi-targeted instructions (several acceptable labels) anchor at the
/// normalized mean of their allowed classes' anchors, mimicking how an
/// ambiguous instruction lands between the concepts it spans.
///
/// The encoder only recognizes strings registered at construction — every
/// known/unknown description of the instruction set, in both raw and
/// context-wrapped form. Anything else is an encoding error, mirroring the
/// file-backed backend's behavior on a missing key.
pub struct SyntheticEncoder {
    name: String,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl SyntheticEncoder {
    pub fn new(
        set: &InstructionSet,
        tmpl: &ContextTemplate,
        dim: usize,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("synthetic encoder dimension must be > 0".into()));
        }
        let n = set.num_classes();
        let mut bases = Vec::with_capacity(n);
        for c in 0..n {
            let mut rng = stream(seed, &format!("encoder:base:{c}"));
            let mut b: Vec<f64> = (0..dim).map(|_| f64::sample_normal(&mut rng)).collect();
            l2_normalize(&mut b);
            bases.push(b);
        }

        let mut table = HashMap::new();
        let mut register = |text: &str, anchor: &[f64]| -> Result<()> {
            let mut rng = stream(seed, &format!("encoder:noise:{}", text_digest_hex(text)));
            let mut noise: Vec<f64> =
                (0..dim).map(|_| f64::sample_normal(&mut rng)).collect();
            l2_normalize(&mut noise);
            let mut v: Vec<f64> = anchor
                .iter()
                .zip(&noise)
                .map(|(b, u)| b + sigma * u)
                .collect();
            l2_normalize(&mut v);
            if let Some(prev) = table.insert(text.to_string(), v) {
                if prev != table[text] {
                    return Err(Error::InvalidInstructionSet(format!(
                        "text {text:?} registered twice with different anchors"
                    )));
                }
            }
            Ok(())
        };

        for (c, anchor) in bases.iter().enumerate() {
            for instr in set.known[c].iter().chain(set.unknown[c].iter()) {
                register(&instr.text, anchor)?;
                let wrapped = wrap_with_context(instr, &set.classes, tmpl)?;
                register(&wrapped, anchor)?;
            }
        }
        for st in &set.semi_targeted {
            let mut anchor = vec![0.0; dim];
            for &label in &st.allowed {
                for (a, b) in anchor.iter_mut().zip(&bases[label]) {
                    *a += b;
                }
            }
            l2_normalize(&mut anchor);
            let instr = Instruction::untargeted(st.text.clone());
            register(&st.text, &anchor)?;
            let wrapped = wrap_with_context(&instr, &set.classes, tmpl)?;
            register(&wrapped, &anchor)?;
        }

        Ok(Self {
            name: format!("synthetic-d{dim}"),
            dim,
            table,
        })
    }

    /// Synthetic backend with the standard dimension and noise scale.
    pub fn with_defaults(set: &InstructionSet, tmpl: &ContextTemplate, seed: u64) -> Result<Self> {
        Self::new(set, tmpl, SYNTHETIC_FEATURE_DIM, SYNTHETIC_SIGMA, seed)
    }
}

impl EncoderBackend for SyntheticEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        self.table.get(text).cloned().ok_or_else(|| Error::Encoding {
            text: text.to_string(),
            reason: "text is not in the registered instruction corpus".into(),
        })
    }
}

/// Ablation baseline: every description of class `c` encodes as the one-hot
/// vector `e_c` of dimension `|classes|`. Semi-targeted instructions have no
/// single class and cannot be represented.
pub struct OneHotEncoder {
    name: String,
    classes: usize,
    table: HashMap<String, usize>,
}

impl OneHotEncoder {
    pub fn new(set: &InstructionSet, tmpl: &ContextTemplate) -> Result<Self> {
        let mut table = HashMap::new();
        for (c, lists) in set.known.iter().zip(&set.unknown).enumerate() {
            for instr in lists.0.iter().chain(lists.1.iter()) {
                table.insert(instr.text.clone(), c);
                table.insert(wrap_with_context(instr, &set.classes, tmpl)?, c);
            }
        }
        Ok(Self {
            name: "one-hot".into(),
            classes: set.num_classes(),
            table,
        })
    }
}

impl EncoderBackend for OneHotEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn feature_dim(&self) -> usize {
        self.classes
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        let &c = self.table.get(text).ok_or_else(|| Error::Encoding {
            text: text.to_string(),
            reason: "text has no class assignment in the one-hot table".into(),
        })?;
        let mut v = vec![0.0; self.classes];
        v[c] = 1.0;
        Ok(v)
    }
}

pub const FEATURE_FILE_FORMAT_VERSION: u32 = 1;

/// On-disk feature table: JSON with one record per text. Vectors are stored
/// as JSON numbers, which serialize f64 with shortest-round-trip precision,
/// so load(save(x)) is bitwise lossless.
#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureFile {
    pub format_version: u32,
    pub name: String,
    pub feature_dim: usize,
    pub entries: Vec<FeatureFileEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureFileEntry {
    /// SHA-256 hex digest of `text`; the lookup key.
    pub sha256: String,
    pub text: String,
    pub vector: Vec<f64>,
}

impl FeatureFile {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let file: FeatureFile = serde_json::from_str(&raw).map_err(|e| Error::FileFormat {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        if file.format_version != FEATURE_FILE_FORMAT_VERSION {
            return Err(Error::FileFormat {
                path: path.display().to_string(),
                reason: format!(
                    "unsupported format_version {} (expected {})",
                    file.format_version, FEATURE_FILE_FORMAT_VERSION
                ),
            });
        }
        for e in &file.entries {
            if e.vector.len() != file.feature_dim {
                return Err(Error::FileFormat {
                    path: path.display().to_string(),
                    reason: format!(
                        "entry {} has dimension {}, expected {}",
                        e.sha256,
                        e.vector.len(),
                        file.feature_dim
                    ),
                });
            }
            if e.sha256 != text_digest_hex(&e.text) {
                return Err(Error::FileFormat {
                    path: path.display().to_string(),
                    reason: format!("entry {} digest does not match its text", e.sha256),
                });
            }
        }
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Backend that serves precomputed vectors from a [`FeatureFile`]. This is
/// how embeddings from a real LLM enter the pipeline: compute them offline,
/// write the file, point the config at it.
pub struct FileEncoder {
    name: String,
    dim: usize,
    table: HashMap<String, Vec<f64>>,
}

impl FileEncoder {
    pub fn load(path: &Path) -> Result<Self> {
        let file = FeatureFile::load(path)?;
        let table = file
            .entries
            .into_iter()
            .map(|e| (e.sha256, e.vector))
            .collect();
        Ok(Self {
            name: file.name,
            dim: file.feature_dim,
            table,
        })
    }
}

impl EncoderBackend for FileEncoder {
    fn name(&self) -> &str {
        &self.name
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        self.table
            .get(&text_digest_hex(text))
            .cloned()
            .ok_or_else(|| Error::Encoding {
                text: text.to_string(),
                reason: "feature file has no entry for this text".into(),
            })
    }
}

/// Memoizing wrapper around any backend.
///
/// Reads take a shared lock so concurrent encodes of cached texts never
/// block each other; the occasional miss takes the write lock to insert.
/// Keys are SHA-256 digests of the exact input text.
pub struct CachedEncoder {
    inner: Box<dyn EncoderBackend>,
    cache: RwLock<HashMap<String, Vec<f64>>>,
}

impl CachedEncoder {
    pub fn new(inner: Box<dyn EncoderBackend>) -> Self {
        Self {
            inner,
            cache: RwLock::new(HashMap::new()),
        }
    }

    /// Export the memoized pairs as a feature file (usable later by
    /// [`FileEncoder`]). Entries are sorted by digest for stable output.
    pub fn export_cache(&self) -> FeatureFile {
        let cache = self.cache.read().expect("feature cache poisoned");
        let mut entries: Vec<FeatureFileEntry> = cache
            .iter()
            .map(|(text, vector)| FeatureFileEntry {
                sha256: text_digest_hex(text),
                text: text.clone(),
                vector: vector.clone(),
            })
            .collect();
        entries.sort_by(|a, b| a.sha256.cmp(&b.sha256));
        FeatureFile {
            format_version: FEATURE_FILE_FORMAT_VERSION,
            name: self.inner.name().to_string(),
            feature_dim: self.inner.feature_dim(),
            entries,
        }
    }

    /// Pre-populate the cache from a previously exported feature file. The
    /// file must come from the same backend (matched by name).
    pub fn preload_cache(&self, path: &Path) -> Result<usize> {
        let file = FeatureFile::load(path)?;
        if file.name != self.inner.name() {
            return Err(Error::FileFormat {
                path: path.display().to_string(),
                reason: format!(
                    "cache was produced by backend {:?}, this run uses {:?}",
                    file.name,
                    self.inner.name()
                ),
            });
        }
        let mut cache = self.cache.write().expect("feature cache poisoned");
        let mut added = 0;
        for e in file.entries {
            if cache.insert(e.text, e.vector).is_none() {
                added += 1;
            }
        }
        Ok(added)
    }
}

impl EncoderBackend for CachedEncoder {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    fn deterministic(&self) -> bool {
        self.inner.deterministic()
    }

    fn encode(&self, text: &str) -> Result<Vec<f64>> {
        {
            let cache = self.cache.read().expect("feature cache poisoned");
            if let Some(hit) = cache.get(text) {
                return Ok(hit.clone());
            }
        }
        let vector = self.inner.encode(text)?;
        let mut cache = self.cache.write().expect("feature cache poisoned");
        Ok(cache.entry(text.to_string()).or_insert(vector).clone())
    }
}

/// Everything needed to turn an [`Instruction`] into a feature vector:
/// backend (behind a cache), context template, wrap on/off, class names.
pub struct FeaturePipeline {
    backend: CachedEncoder,
    template: ContextTemplate,
    wrap: bool,
    classes: Vec<String>,
}

impl FeaturePipeline {
    pub fn new(
        backend: Box<dyn EncoderBackend>,
        template: ContextTemplate,
        wrap: bool,
        classes: Vec<String>,
    ) -> Result<Self> {
        template.validate()?;
        Ok(Self {
            backend: CachedEncoder::new(backend),
            template,
            wrap,
            classes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.backend.feature_dim()
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    pub fn wraps_context(&self) -> bool {
        self.wrap
    }

    /// The exact string handed to the backend for this instruction.
    pub fn encoder_input(&self, instr: &Instruction) -> Result<String> {
        if self.wrap {
            wrap_with_context(instr, &self.classes, &self.template)
        } else {
            Ok(instr.text.clone())
        }
    }

    pub fn feature_for(&self, instr: &Instruction) -> Result<InstructionFeature> {
        let input = self.encoder_input(instr)?;
        InstructionFeature::new(self.backend.encode(&input)?)
    }

    pub fn export_cache(&self) -> FeatureFile {
        self.backend.export_cache()
    }

    pub fn preload_cache(&self, path: &Path) -> Result<usize> {
        self.backend.preload_cache(path)
    }
}

/// Small synthetic corpus for tests across the crate: `n_known` +
/// `n_unknown` descriptions per class, all texts globally unique.
#[cfg(test)]
pub(crate) fn demo_set(classes: usize, n_known: usize, n_unknown: usize) -> InstructionSet {
    use crate::instructions::SemiTargeted;
    let class_names: Vec<String> = (0..classes).map(|c| format!("class{c}")).collect();
    let known = (0..classes)
        .map(|c| {
            (0..n_known)
                .map(|k| {
                    let text = if k == 0 {
                        format!("class{c}")
                    } else {
                        format!("class{c} phrased as variant {k}")
                    };
                    Instruction::targeted(text, c)
                })
                .collect()
        })
        .collect();
    let unknown = (0..classes)
        .map(|c| {
            (0..n_unknown)
                .map(|k| Instruction::targeted(format!("class{c} held-out wording {k}"), c))
                .collect()
        })
        .collect();
    InstructionSet {
        dataset: "demo".into(),
        classes: class_names,
        known,
        unknown,
        semi_targeted: vec![SemiTargeted {
            text: "either of the first two classes".into(),
            allowed: vec![0, 1],
        }],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / (na * nb)
    }

    #[test]
    fn encoding_is_deterministic() {
        let set = demo_set(4, 3, 1);
        let tmpl = ContextTemplate::default();
        let enc = SyntheticEncoder::with_defaults(&set, &tmpl, 7).unwrap();
        let a = enc.encode("class2 phrased as variant 1").unwrap();
        let b = enc.encode("class2 phrased as variant 1").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_vectors_are_unit_norm() {
        let set = demo_set(6, 4, 2);
        let tmpl = ContextTemplate::default();
        let enc = SyntheticEncoder::with_defaults(&set, &tmpl, 11).unwrap();
        for text in set.all_texts() {
            let v = enc.encode(text).unwrap();
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12, "{text}: norm {norm}");
        }
    }

    #[test]
    fn same_class_descriptions_stay_close() {
        // With unit-direction noise of magnitude sigma around a unit anchor,
        // the same-class cosine concentrates near 1/(1+sigma^2) -- about 0.6
        // at the default sigma = 0.8 -- with fluctuations from the random
        // direction inner products. Check every same-class pair of a
        // 10-class corpus stays clearly positive (cross-class pairs hover
        // near zero).
        let set = demo_set(10, 5, 3);
        let tmpl = ContextTemplate::default();
        let enc = SyntheticEncoder::with_defaults(&set, &tmpl, 13).unwrap();
        for c in 0..10 {
            let texts: Vec<&Instruction> =
                set.known[c].iter().chain(set.unknown[c].iter()).collect();
            for i in 0..texts.len() {
                for j in (i + 1)..texts.len() {
                    let a = enc.encode(&texts[i].text).unwrap();
                    let b = enc.encode(&texts[j].text).unwrap();
                    let cos = cosine(&a, &b);
                    assert!(
                        cos >= 0.25,
                        "class {c}: cosine({:?}, {:?}) = {cos}",
                        texts[i].text,
                        texts[j].text
                    );
                }
            }
        }
    }

    #[test]
    fn low_noise_sigma_keeps_same_class_cosine_above_point_eight() {
        // At sigma = 0.3 the same-class cosine concentrates near
        // 1/(1 + 0.09) ~ 0.92, so every pair clears 0.8 comfortably.
        let set = demo_set(10, 5, 3);
        let tmpl = ContextTemplate::default();
        let enc = SyntheticEncoder::new(&set, &tmpl, SYNTHETIC_FEATURE_DIM, 0.3, 13).unwrap();
        for c in 0..10 {
            let texts: Vec<&Instruction> =
                set.known[c].iter().chain(set.unknown[c].iter()).collect();
            for i in 0..texts.len() {
                for j in (i + 1)..texts.len() {
                    let a = enc.encode(&texts[i].text).unwrap();
                    let b = enc.encode(&texts[j].text).unwrap();
                    let cos = cosine(&a, &b);
                    assert!(
                        cos >= 0.8,
                        "class {c} at sigma 0.3: cosine({:?}, {:?}) = {cos}",
                        texts[i].text,
                        texts[j].text
                    );
                }
            }
        }
    }

    #[test]
    fn cross_class_cosine_sits_below_same_class_mean() {
        // Monte-Carlo over well above 1000 seeded description pairs.
        let set = demo_set(10, 8, 4);
        let tmpl = ContextTemplate::default();
        let enc = SyntheticEncoder::with_defaults(&set, &tmpl, 17).unwrap();
        let mut vectors: Vec<(usize, Vec<f64>)> = Vec::new();
        for c in 0..10 {
            for instr in set.known[c].iter().chain(set.unknown[c].iter()) {
                vectors.push((c, enc.encode(&instr.text).unwrap()));
            }
        }
        let (mut same_sum, mut same_n, mut cross_sum, mut cross_n) = (0.0, 0u32, 0.0, 0u32);
        for i in 0..vectors.len() {
            for j in (i + 1)..vectors.len() {
                let cos = cosine(&vectors[i].1, &vectors[j].1);
                if vectors[i].0 == vectors[j].0 {
                    same_sum += cos;
                    same_n += 1;
                } else {
                    cross_sum += cos;
                    cross_n += 1;
                }
            }
        }
        assert!(same_n > 500 && cross_n > 1000);
        let same_mean = same_sum / same_n as f64;
        let cross_mean = cross_sum / cross_n as f64;
        assert!(
            cross_mean < same_mean,
            "cross-class mean {cross_mean} not below same-class mean {same_mean}"
        );
        // And by a decisive margin, since anchors are near-orthogonal.
        assert!(same_mean - cross_mean > 0.5);
    }

    #[test]
    fn wrapped_and_raw_forms_both_resolve() {
        let set = demo_set(3, 2, 1);
        let tmpl = ContextTemplate::default();
        let enc = SyntheticEncoder::with_defaults(&set, &tmpl, 5).unwrap();
        let instr = &set.known[1][0];
        let wrapped = wrap_with_context(instr, &set.classes, &tmpl).unwrap();
        let raw_v = enc.encode(&instr.text).unwrap();
        let wrapped_v = enc.encode(&wrapped).unwrap();
        // Different input strings draw different in-cluster noise but share
        // the class anchor.
        assert!(cosine(&raw_v, &wrapped_v) >= 0.25);
    }

    #[test]
    fn unregistered_text_is_an_encoding_error() {
        let set = demo_set(2, 1, 0);
        let tmpl = ContextTemplate::default();
        let enc = SyntheticEncoder::with_defaults(&set, &tmpl, 3).unwrap();
        match enc.encode("never registered") {
            Err(Error::Encoding { text, .. }) => assert_eq!(text, "never registered"),
            other => panic!("expected encoding error, got {other:?}"),
        }
    }

    #[test]
    fn one_hot_maps_every_description_to_its_class_axis() {
        let set = demo_set(4, 3, 2);
        let tmpl = ContextTemplate::default();
        let enc = OneHotEncoder::new(&set, &tmpl).unwrap();
        assert_eq!(enc.feature_dim(), 4);
        for c in 0..4 {
            for instr in set.known[c].iter().chain(set.unknown[c].iter()) {
                let v = enc.encode(&instr.text).unwrap();
                let expected: Vec<f64> =
                    (0..4).map(|i| if i == c { 1.0 } else { 0.0 }).collect();
                assert_eq!(v, expected);
            }
        }
        assert!(enc.encode("either of the first two classes").is_err());
    }

    #[test]
    fn cache_hit_equals_cache_miss() {
        let set = demo_set(3, 2, 0);
        let tmpl = ContextTemplate::default();
        let enc = CachedEncoder::new(Box::new(
            SyntheticEncoder::with_defaults(&set, &tmpl, 19).unwrap(),
        ));
        let miss = enc.encode("class1 phrased as variant 1").unwrap();
        let hit = enc.encode("class1 phrased as variant 1").unwrap();
        assert_eq!(miss, hit);
    }

    #[test]
    fn feature_file_round_trips_losslessly() {
        let set = demo_set(3, 2, 1);
        let tmpl = ContextTemplate::default();
        let pipeline = FeaturePipeline::new(
            Box::new(SyntheticEncoder::with_defaults(&set, &tmpl, 23).unwrap()),
            tmpl.clone(),
            true,
            set.classes.clone(),
        )
        .unwrap();
        let mut originals = Vec::new();
        for c in 0..3 {
            for instr in &set.known[c] {
                originals.push((
                    pipeline.encoder_input(instr).unwrap(),
                    pipeline.feature_for(instr).unwrap().vector,
                ));
            }
        }
        let dir = std::env::temp_dir().join("bdlab-feature-file-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("features.json");
        pipeline.export_cache().save(&path).unwrap();

        let file_enc = FileEncoder::load(&path).unwrap();
        for (text, vector) in &originals {
            let loaded = file_enc.encode(text).unwrap();
            assert_eq!(&loaded, vector, "vector for {text:?} changed on disk");
        }
    }

    #[test]
    fn pipeline_respects_wrap_flag() {
        let set = demo_set(3, 2, 0);
        let tmpl = ContextTemplate::default();
        let make = |wrap: bool| {
            FeaturePipeline::new(
                Box::new(SyntheticEncoder::with_defaults(&set, &tmpl, 29).unwrap()),
                tmpl.clone(),
                wrap,
                set.classes.clone(),
            )
            .unwrap()
        };
        let instr = &set.known[2][1];
        let raw = make(false).feature_for(instr).unwrap();
        let wrapped = make(true).feature_for(instr).unwrap();
        assert_ne!(raw, wrapped);
        assert!(cosine(&raw.vector, &wrapped.vector) >= 0.25);
    }
}
