//! Instruction text, per-target description sets, and context wrapping.
//!
//! An attack is steered by natural-language instructions. Each target class
//! carries a set of *known* descriptions (seen during optimization) and
//! optionally *unknown* ones (held out to measure generalization). Before
//! encoding, an instruction can be wrapped in a context template that tells
//! the language encoder which classes the classifier supports, which is what
//! lets indirect instructions resolve to sensible targets.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single attack instruction.
///
/// `intended_target` is the label the instruction aims at; semi-targeted
/// instructions (several acceptable outcomes) leave it unset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub intended_target: Option<usize>,
}

impl Instruction {
    pub fn targeted(text: impl Into<String>, target: usize) -> Self {
        Self {
            text: text.into(),
            intended_target: Some(target),
        }
    }

    pub fn untargeted(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            intended_target: None,
        }
    }
}

/// A semi-targeted instruction together with the label set the experimenter
/// accepts as a successful outcome.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemiTargeted {
    pub text: String,
    pub allowed: Vec<usize>,
}

/// The full description corpus for one dataset: class names plus per-class
/// known/unknown instruction lists, indexed by label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstructionSet {
    pub dataset: String,
    pub classes: Vec<String>,
    /// `known[y]` are the descriptions of class `y` used during optimization.
    pub known: Vec<Vec<Instruction>>,
    /// `unknown[y]` are held-out descriptions used only at evaluation time.
    pub unknown: Vec<Vec<Instruction>>,
    /// Optional semi-targeted probes with explicit allowed-label sets.
    pub semi_targeted: Vec<SemiTargeted>,
}

impl InstructionSet {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn known_for(&self, label: usize) -> &[Instruction] {
        &self.known[label]
    }

    pub fn unknown_for(&self, label: usize) -> &[Instruction] {
        &self.unknown[label]
    }

    /// All instruction texts in the set (known, unknown, semi-targeted), in
    /// deterministic order.
    pub fn all_texts(&self) -> Vec<&str> {
        let mut out = Vec::new();
        for list in self.known.iter().chain(self.unknown.iter()) {
            out.extend(list.iter().map(|i| i.text.as_str()));
        }
        out.extend(self.semi_targeted.iter().map(|s| s.text.as_str()));
        out
    }

    /// Copy of this set with each class's known list truncated to its first
    /// description. By fixture convention entry 0 is the bare class name, so
    /// this is the "no lexical variations" ablation corpus.
    pub fn with_single_known_description(&self) -> Self {
        let mut out = self.clone();
        for list in &mut out.known {
            list.truncate(1);
        }
        out
    }

    /// Load from the versioned fixture format, then validate.
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let file: InstructionSetFile =
            serde_json::from_str(&raw).map_err(|e| Error::FileFormat {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        if file.format_version != INSTRUCTION_SET_FORMAT_VERSION {
            return Err(Error::FileFormat {
                path: path.display().to_string(),
                reason: format!(
                    "unsupported format_version {} (expected {})",
                    file.format_version, INSTRUCTION_SET_FORMAT_VERSION
                ),
            });
        }
        let set = file.into_set();
        let report = validate_instruction_set(&set);
        if !report.is_ok() {
            return Err(Error::InvalidInstructionSet(format!(
                "{}: {}",
                path.display(),
                report.violations.join("; ")
            )));
        }
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = InstructionSetFile::from_set(self);
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

pub const INSTRUCTION_SET_FORMAT_VERSION: u32 = 1;

/// On-disk schema: description lists are plain strings; targets are implied
/// by position.
#[derive(Debug, Serialize, Deserialize)]
struct InstructionSetFile {
    format_version: u32,
    dataset: String,
    classes: Vec<String>,
    known: Vec<Vec<String>>,
    unknown: Vec<Vec<String>>,
    #[serde(default)]
    semi_targeted: Vec<SemiTargeted>,
}

impl InstructionSetFile {
    fn into_set(self) -> InstructionSet {
        let lift = |lists: Vec<Vec<String>>| -> Vec<Vec<Instruction>> {
            lists
                .into_iter()
                .enumerate()
                .map(|(y, texts)| {
                    texts
                        .into_iter()
                        .map(|t| Instruction::targeted(t, y))
                        .collect()
                })
                .collect()
        };
        InstructionSet {
            dataset: self.dataset,
            classes: self.classes,
            known: lift(self.known),
            unknown: lift(self.unknown),
            semi_targeted: self.semi_targeted,
        }
    }

    fn from_set(set: &InstructionSet) -> Self {
        let lower = |lists: &[Vec<Instruction>]| -> Vec<Vec<String>> {
            lists
                .iter()
                .map(|l| l.iter().map(|i| i.text.clone()).collect())
                .collect()
        };
        Self {
            format_version: INSTRUCTION_SET_FORMAT_VERSION,
            dataset: set.dataset.clone(),
            classes: set.classes.clone(),
            known: lower(&set.known),
            unknown: lower(&set.unknown),
            semi_targeted: set.semi_targeted.clone(),
        }
    }
}

/// Context template with `{LIST_OF_CLASSES}` and `{INSTRUCTION}` slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextTemplate {
    pub template: String,
}

/// Default context wrapper: announces the classifier's label vocabulary so
/// the encoder can resolve indirect instructions against it.
pub const DEFAULT_CONTEXT_TEMPLATE: &str = "[INST] <<SYS>>\nSupported Classes: {LIST_OF_CLASSES}\n\nYou read the user input, understand the intention, and recommend the output to an image classifier.\n<</SYS>>\nUser Input: {INSTRUCTION} [/INST]";

const CLASSES_SLOT: &str = "{LIST_OF_CLASSES}";
const INSTRUCTION_SLOT: &str = "{INSTRUCTION}";

impl Default for ContextTemplate {
    fn default() -> Self {
        Self {
            template: DEFAULT_CONTEXT_TEMPLATE.to_string(),
        }
    }
}

impl ContextTemplate {
    pub fn new(template: impl Into<String>) -> Result<Self> {
        let t = Self {
            template: template.into(),
        };
        t.validate()?;
        Ok(t)
    }

    fn count(&self, slot: &str) -> usize {
        self.template.matches(slot).count()
    }

    pub fn validate(&self) -> Result<()> {
        for slot in [CLASSES_SLOT, INSTRUCTION_SLOT] {
            match self.count(slot) {
                1 => {}
                0 => {
                    return Err(Error::Template(format!(
                        "template is missing the {slot} placeholder"
                    )))
                }
                n => {
                    return Err(Error::Template(format!(
                        "template must contain {slot} exactly once, found {n}"
                    )))
                }
            }
        }
        Ok(())
    }
}

/// Substitute the class list (joined with ", ") and the instruction text
/// into the template. No other substitutions are performed.
pub fn wrap_with_context(
    instr: &Instruction,
    classes: &[String],
    tmpl: &ContextTemplate,
) -> Result<String> {
    tmpl.validate()?;
    let class_list = classes.join(", ");
    Ok(tmpl
        .template
        .replacen(CLASSES_SLOT, &class_list, 1)
        .replacen(INSTRUCTION_SLOT, &instr.text, 1))
}

/// Outcome of checking an [`InstructionSet`] against its structural rules.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check class/list alignment, per-class known coverage, text non-emptiness,
/// global text uniqueness, and semi-targeted label ranges. The set is
/// acceptable iff the returned report has no violations.
pub fn validate_instruction_set(set: &InstructionSet) -> ValidationReport {
    let mut report = ValidationReport::default();
    let n = set.classes.len();
    if n == 0 {
        report.violations.push("class list is empty".into());
    }
    if set.known.len() != n {
        report.violations.push(format!(
            "known lists cover {} classes but there are {n}",
            set.known.len()
        ));
    }
    if set.unknown.len() != n {
        report.violations.push(format!(
            "unknown lists cover {} classes but there are {n}",
            set.unknown.len()
        ));
    }

    for (y, list) in set.known.iter().enumerate() {
        if list.is_empty() {
            report
                .violations
                .push(format!("class {y} has no known descriptions"));
        }
    }

    // Global duplicate scan: no text may repeat within a class, across
    // classes, or between the known and unknown partitions.
    let mut seen: HashSet<String> = HashSet::new();
    let mut check_text = |text: &str, where_: String, report: &mut ValidationReport| {
        if text.trim().is_empty() {
            report.violations.push(format!("{where_} is empty"));
            return;
        }
        if !seen.insert(text.to_string()) {
            report
                .violations
                .push(format!("{where_} duplicates text {text:?}"));
        }
    };
    for (y, list) in set.known.iter().enumerate() {
        for (k, instr) in list.iter().enumerate() {
            check_text(&instr.text, format!("known[{y}][{k}]"), &mut report);
            if instr.intended_target != Some(y) {
                report.violations.push(format!(
                    "known[{y}][{k}] has intended_target {:?}, expected {y}",
                    instr.intended_target
                ));
            }
        }
    }
    for (y, list) in set.unknown.iter().enumerate() {
        for (k, instr) in list.iter().enumerate() {
            check_text(&instr.text, format!("unknown[{y}][{k}]"), &mut report);
            if instr.intended_target != Some(y) {
                report.violations.push(format!(
                    "unknown[{y}][{k}] has intended_target {:?}, expected {y}",
                    instr.intended_target
                ));
            }
        }
    }
    for (i, st) in set.semi_targeted.iter().enumerate() {
        check_text(&st.text, format!("semi_targeted[{i}]"), &mut report);
        if st.allowed.is_empty() {
            report
                .violations
                .push(format!("semi_targeted[{i}] has an empty allowed set"));
        }
        for &label in &st.allowed {
            if label >= n {
                report.violations.push(format!(
                    "semi_targeted[{i}] allows label {label}, out of range for {n} classes"
                ));
            }
        }
    }
    report
}
