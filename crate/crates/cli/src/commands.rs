//! The six subcommand implementations.
//!
//! Every run-producing command follows the same shape: assemble the
//! effective config (see [`crate::overrides`]), build the experiment context
//! from it, create an artifact directory, do the work, write `summary.json`,
//! and seal the directory with `MANIFEST.json` plus an `index.jsonl` entry.
//! Commands that start from a finished run (`evaluate`, `defend`, `poison`)
//! treat that run's config snapshot as the strongest config layer, so the
//! new artifact is reproducibly tied to the old one.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::Value;

use bdlab_core::config::ExperimentConfig;
use bdlab_core::data::{make_splits, DataSplits};
use bdlab_core::defense::{select_within_budget, sweep_defense, SweepTarget, TradeoffCurve};
use bdlab_core::encoder::FeaturePipeline;
use bdlab_core::error::{Error, Result};
use bdlab_core::eval::{evaluate_acc, evaluate_asr, evaluate_semi_targeted, AsrSplit};
use bdlab_core::instructions::InstructionSet;
use bdlab_core::plot::{line_plot, scatter_plot, Series};
use bdlab_core::poison::{poison_dataset, retrain_and_evaluate, RetrainSpec};
use bdlab_core::projection::project_features;
use bdlab_core::report::{
    acc_asr_csv, acc_asr_table, per_class_asr_csv, poison_grid_csv, poison_grid_table,
    projection_groups, sweep_series, PerClassOrder, ProjectedPoint, RunSummary, SweepAxis,
};
use bdlab_core::seed::stream;
use bdlab_core::trainer::train_joint;
use bdlab_core::trigger::{AttackConfig, TriggerGenerator, GENERATOR_HIDDEN_DIM};
use bdlab_core::victim::{Architecture, VictimModel};
use bdlab_core::Real;

use crate::artifact::{self, IndexRecord};
use crate::overrides::{effective_config, effective_config_layered, load_table};
use crate::ConfigArgs;

// ---- shared plumbing ---------------------------------------------------------------

/// Everything a command needs that follows deterministically from the config.
struct Workbench {
    cfg: ExperimentConfig,
    set: InstructionSet,
    pipeline: FeaturePipeline,
    splits: DataSplits<Real>,
}

fn build_workbench(cfg: ExperimentConfig) -> Result<Workbench> {
    let set = cfg.resolved_instructions()?;
    let pipeline = cfg.resolved_pipeline(&set)?;
    let (train, pool) = cfg.load_dataset::<Real>()?;
    let splits = make_splits(train, pool, &cfg.resolved_split())?;
    Ok(Workbench {
        cfg,
        set,
        pipeline,
        splits,
    })
}

/// Create the artifact directory, run `body`, then seal the directory with a
/// manifest and an index entry. A failing body still leaves a "failed" row
/// in the index (best effort) before the error propagates.
fn with_run_dir(
    output_root: &Path,
    run_id: &str,
    command: &str,
    force: bool,
    body: impl FnOnce(&Path) -> Result<IndexRecord>,
) -> Result<()> {
    let dir = artifact::create_run_dir(output_root, run_id, force)?;
    match body(&dir) {
        Ok(record) => {
            artifact::write_manifest(&dir, run_id, command)?;
            artifact::append_index(output_root, &record)?;
            Ok(())
        }
        Err(e) => {
            let _ = artifact::append_index(output_root, &IndexRecord::failed(run_id, command, &e));
            Err(e)
        }
    }
}

/// Config snapshot of a finished run, used as the strongest config layer.
fn run_config_table(run: &Path) -> Result<toml::Table> {
    let path = run.join("config.toml");
    if !path.is_file() {
        return Err(Error::Config(format!(
            "{} does not look like a finished run: missing config.toml",
            run.display()
        )));
    }
    load_table(&path)
}

/// Checkpoints are artifacts this tool wrote, not user configuration: if one
/// is unreadable, that is a runtime failure (exit 2), not a config error.
fn artifact_corruption(e: Error) -> Error {
    match e {
        Error::FileFormat { path, reason } => Error::Io(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("corrupt artifact {path}: {reason}"),
        )),
        other => other,
    }
}

/// Load a finished run's victim and generator, checking that the generator
/// was trained under the trigger budget the config expects.
fn load_checkpoints(
    run: &Path,
    expected_epsilon: f64,
) -> Result<(VictimModel<Real>, TriggerGenerator<Real>)> {
    let ckpt = run.join("checkpoints");
    let victim = VictimModel::load(&ckpt.join("victim.json")).map_err(artifact_corruption)?;
    let (generator, eps) =
        TriggerGenerator::load(&ckpt.join("generator.json")).map_err(artifact_corruption)?;
    if eps != expected_epsilon {
        return Err(Error::Config(format!(
            "trigger budget mismatch: checkpoint {} holds epsilon {eps}, config says {expected_epsilon}",
            ckpt.join("generator.json").display()
        )));
    }
    Ok((victim, generator))
}

fn index_from_summary(summary: &RunSummary, command: &str) -> IndexRecord {
    let mut rec = IndexRecord::ok(&summary.run_id, command);
    rec.acc = summary.acc;
    rec.asr_known = summary.known.as_ref().map(|m| m.asr_mean);
    rec.asr_unknown = summary.unknown.as_ref().map(|m| m.asr_mean);
    rec
}

/// Keep artifact names usable as single path components.
fn sanitize_name(name: &str) -> String {
    name.chars()
        .map(|c| if c == '/' || c == '\\' || c.is_whitespace() { '-' } else { c })
        .collect()
}

fn run_name(args: &ConfigArgs, command: &str, seed: u64) -> String {
    sanitize_name(&artifact::run_name(args.name.as_deref(), command, seed))
}

/// Write text, guaranteeing exactly one trailing newline so re-renders stay
/// byte-identical.
fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut owned = text.trim_end_matches('\n').to_string();
    owned.push('\n');
    fs::write(path, owned)?;
    Ok(())
}

// ---- evaluation bundle (shared by attack and evaluate) -----------------------------

/// Success rate of one semi-targeted instruction against its allowed labels.
#[derive(Debug, Serialize, Deserialize)]
pub struct SemiEntryReport {
    pub text: String,
    pub allowed: Vec<usize>,
    pub rate: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SemiReport {
    pub entries: Vec<SemiEntryReport>,
    /// Mean over entries; absent when the instruction set has none or the
    /// encoding cannot represent untargeted instructions (one-hot baseline).
    pub mean: Option<f64>,
}

/// Project every known/unknown instruction feature to 2-D for the report
/// scatter. Needs at least two instructions; otherwise there is no plot.
fn project_instruction_features(
    set: &InstructionSet,
    pipeline: &FeaturePipeline,
) -> Result<Option<Vec<ProjectedPoint>>> {
    let mut feats = Vec::new();
    for y in 0..set.num_classes() {
        for instr in set.known_for(y).iter().chain(set.unknown_for(y).iter()) {
            feats.push((y, pipeline.feature_for(instr)?.vector.clone()));
        }
    }
    if feats.len() < 2 {
        return Ok(None);
    }
    let projected = project_features(&feats)?;
    Ok(Some(
        projected
            .into_iter()
            .map(|(label, [x, y])| ProjectedPoint {
                class: set.classes[label].clone(),
                x,
                y,
            })
            .collect(),
    ))
}

/// Run the full evaluation battery against a trained pair and write the
/// metrics files plus `summary.json` into `dir`.
fn evaluate_and_summarize(
    run_id: &str,
    bench: &Workbench,
    victim: &VictimModel<Real>,
    generator: &TriggerGenerator<Real>,
    attack: &AttackConfig,
    dir: &Path,
) -> Result<RunSummary> {
    let eval_seed = bench.cfg.resolved_eval_seed();
    let metrics_dir = dir.join("metrics");
    let acc = evaluate_acc(victim, &bench.splits.test, None)?;
    let known = evaluate_asr(
        victim,
        generator,
        &bench.pipeline,
        &bench.set,
        AsrSplit::Known,
        &bench.splits.test,
        attack,
        eval_seed,
        None,
    )?;
    let unknown = evaluate_asr(
        victim,
        generator,
        &bench.pipeline,
        &bench.set,
        AsrSplit::Unknown,
        &bench.splits.test,
        attack,
        eval_seed,
        None,
    )?;
    artifact::write_json(&metrics_dir.join("known.json"), &known)?;
    artifact::write_json(&metrics_dir.join("unknown.json"), &unknown)?;

    // One-hot features carry a single class index, so untargeted text has no
    // representation there and the semi-targeted battery is skipped.
    let mut entries = Vec::new();
    if !bench.cfg.ablation.is_one_hot() {
        for st in &bench.set.semi_targeted {
            let rate = evaluate_semi_targeted(
                victim,
                generator,
                &bench.pipeline,
                &st.text,
                &st.allowed,
                &bench.splits.test,
                attack,
                None,
            )?;
            entries.push(SemiEntryReport {
                text: st.text.clone(),
                allowed: st.allowed.clone(),
                rate,
            });
        }
    }
    let semi_mean = if entries.is_empty() {
        None
    } else {
        Some(entries.iter().map(|e| e.rate).sum::<f64>() / entries.len() as f64)
    };
    artifact::write_json(
        &metrics_dir.join("semi_targeted.json"),
        &SemiReport {
            entries,
            mean: semi_mean,
        },
    )?;

    let projection = project_instruction_features(&bench.set, &bench.pipeline)?;
    let summary = RunSummary {
        run_id: run_id.to_string(),
        variant: bench.cfg.ablation.to_string(),
        epsilon: attack.epsilon,
        p: attack.p,
        seed: bench.cfg.seed,
        acc: Some(acc),
        known: Some(known),
        unknown: Some(unknown),
        semi_targeted: semi_mean,
        poison_ratio: None,
        projection,
        defense_curves: Vec::new(),
    };
    artifact::write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

// ---- prepare-data ------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SplitFileRecord {
    split: String,
    samples: usize,
    content_hash: String,
}

pub fn prepare_data(args: &ConfigArgs) -> Result<()> {
    let cfg = effective_config(args)?;
    let run_id = run_name(args, "prepare-data", cfg.seed);
    let output_root = cfg.output_dir.clone();
    let bench = build_workbench(cfg)?;
    with_run_dir(&output_root, &run_id, "prepare-data", args.force, |dir| {
        bench.cfg.save(&dir.join("config.toml"))?;
        let data_dir = dir.join("data");
        fs::create_dir_all(&data_dir)?;
        let splits = [
            ("train", &bench.splits.train),
            ("test", &bench.splits.test),
            ("reserved", &bench.splits.reserved),
        ];
        let mut records = Vec::new();
        for (tag, ds) in splits {
            ds.save_snapshot(&data_dir.join(format!("{tag}.json")))?;
            records.push(SplitFileRecord {
                split: tag.to_string(),
                samples: ds.len(),
                content_hash: ds.content_hash(),
            });
        }
        artifact::write_json(&dir.join("splits.json"), &records)?;
        println!("{run_id}: splits written to {}", dir.display());
        for r in &records {
            println!("  {:<8} {:>6} samples  sha256:{}", r.split, r.samples, r.content_hash);
        }
        Ok(IndexRecord::ok(&run_id, "prepare-data"))
    })
}

// ---- attack ------------------------------------------------------------------------

pub fn attack(args: &ConfigArgs) -> Result<()> {
    let cfg = effective_config(args)?;
    let run_id = run_name(args, "attack", cfg.seed);
    let output_root = cfg.output_dir.clone();
    let bench = build_workbench(cfg)?;
    with_run_dir(&output_root, &run_id, "attack", args.force, |dir| {
        bench.cfg.save(&dir.join("config.toml"))?;
        let attack = bench.cfg.resolved_attack();
        let sched = bench.cfg.resolved_schedule();
        let shape = bench.splits.train.image_shape;
        let classes = bench.splits.train.num_classes;
        let mut rng = stream(bench.cfg.seed, "attack:init");
        let mut victim =
            VictimModel::<Real>::new(bench.cfg.victim.architecture, shape, classes, &mut rng)?;
        let mut generator = TriggerGenerator::<Real>::new(
            bench.pipeline.feature_dim(),
            shape,
            GENERATOR_HIDDEN_DIM,
            &mut rng,
        );
        let ckpt = dir.join("checkpoints");
        let log = train_joint(
            &mut victim,
            &mut generator,
            &bench.splits.train,
            &bench.splits.test,
            &bench.set,
            &bench.pipeline,
            &attack,
            &sched,
            Some(&ckpt.join("milestones")),
        )?;
        artifact::write_json(&dir.join("train_log.json"), &log)?;
        fs::create_dir_all(&ckpt)?;
        victim.save(&ckpt.join("victim.json"))?;
        generator.save(&ckpt.join("generator.json"), attack.epsilon)?;
        let summary = evaluate_and_summarize(&run_id, &bench, &victim, &generator, &attack, dir)?;
        println!("{}", acc_asr_table(std::slice::from_ref(&summary))?);
        println!("artifact: {}", dir.display());
        Ok(index_from_summary(&summary, "attack"))
    })
}

// ---- evaluate ----------------------------------------------------------------------

pub fn evaluate(run: &Path, args: &ConfigArgs) -> Result<()> {
    let base = run_config_table(run)?;
    let cfg = effective_config_layered(Some(base), args, &[])?;
    let run_id = run_name(args, "evaluate", cfg.seed);
    let output_root = cfg.output_dir.clone();
    let bench = build_workbench(cfg)?;
    let attack = bench.cfg.resolved_attack();
    let (victim, generator) = load_checkpoints(run, attack.epsilon)?;
    with_run_dir(&output_root, &run_id, "evaluate", args.force, |dir| {
        bench.cfg.save(&dir.join("config.toml"))?;
        let summary = evaluate_and_summarize(&run_id, &bench, &victim, &generator, &attack, dir)?;
        println!("{}", acc_asr_table(std::slice::from_ref(&summary))?);
        println!("artifact: {}", dir.display());
        Ok(index_from_summary(&summary, "evaluate"))
    })
}

// ---- defend ------------------------------------------------------------------------

/// Outcome of the budget rule for one defense kind.
#[derive(Debug, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub kind: String,
    pub budget_points: f64,
    pub undefended_acc: f64,
    /// Strongest strength whose accuracy stays within budget; absent when
    /// even the weakest setting costs too much.
    pub chosen_strength: Option<f64>,
    pub acc: Option<f64>,
    pub asr: Option<f64>,
}

fn defense_plot(curve: &TradeoffCurve) -> Result<Option<String>> {
    let acc: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter_map(|p| p.acc.map(|a| (p.strength, a)))
        .collect();
    let asr: Vec<(f64, f64)> = curve
        .points
        .iter()
        .filter_map(|p| p.asr.map(|a| (p.strength, a)))
        .collect();
    let mut series = Vec::new();
    if !acc.is_empty() {
        series.push(Series {
            label: "clean accuracy".into(),
            points: acc,
        });
    }
    if !asr.is_empty() {
        series.push(Series {
            label: "attack success".into(),
            points: asr,
        });
    }
    if series.is_empty() {
        return Ok(None);
    }
    line_plot(
        &format!("defense trade-off ({})", curve.kind),
        "strength",
        "percent",
        &series,
    )
    .map(Some)
}

pub fn defend(run: &Path, budget: f64, args: &ConfigArgs) -> Result<()> {
    if !budget.is_finite() || budget < 0.0 {
        return Err(Error::Config(format!(
            "budget must be a non-negative number of accuracy points, got {budget}"
        )));
    }
    let base = run_config_table(run)?;
    let cfg = effective_config_layered(Some(base), args, &[])?;
    if cfg.defenses.is_empty() {
        return Err(Error::Config(
            "no defenses configured: add at least one [[defense]] section to the config".into(),
        ));
    }
    let run_id = run_name(args, "defend", cfg.seed);
    let output_root = cfg.output_dir.clone();
    let bench = build_workbench(cfg)?;
    let attack = bench.cfg.resolved_attack();
    let (victim, generator) = load_checkpoints(run, attack.epsilon)?;
    with_run_dir(&output_root, &run_id, "defend", args.force, |dir| {
        bench.cfg.save(&dir.join("config.toml"))?;
        let eval_seed = bench.cfg.resolved_eval_seed();
        let undefended_acc = evaluate_acc(&victim, &bench.splits.test, None)?;
        let undefended = evaluate_asr(
            &victim,
            &generator,
            &bench.pipeline,
            &bench.set,
            AsrSplit::Known,
            &bench.splits.test,
            &attack,
            eval_seed,
            None,
        )?;
        let target = SweepTarget {
            victim: &victim,
            generator: &generator,
            pipeline: &bench.pipeline,
            instrs: &bench.set,
            test: &bench.splits.test,
            reserved: &bench.splits.reserved,
            attack: &attack,
            eval_seed,
        };
        let defense_dir = dir.join("defense");
        let mut curves = Vec::new();
        let mut selections = Vec::new();
        for section in &bench.cfg.defenses {
            let (base_cfg, strengths) = bench.cfg.resolved_defense(section)?;
            let curve = sweep_defense(&target, &base_cfg, &strengths)?;
            write_text(
                &defense_dir.join(format!("{}.csv", curve.kind)),
                &curve.to_csv(),
            )?;
            if let Some(svg) = defense_plot(&curve)? {
                write_text(&defense_dir.join(format!("{}.svg", curve.kind)), &svg)?;
            }
            let chosen = select_within_budget(&curve, undefended_acc, budget);
            selections.push(SelectionRecord {
                kind: curve.kind.to_string(),
                budget_points: budget,
                undefended_acc,
                chosen_strength: chosen.map(|p| p.strength),
                acc: chosen.and_then(|p| p.acc),
                asr: chosen.and_then(|p| p.asr),
            });
            curves.push(curve);
        }
        artifact::write_json(&defense_dir.join("selection.json"), &selections)?;
        let summary = RunSummary {
            run_id: run_id.clone(),
            variant: "defend".into(),
            epsilon: attack.epsilon,
            p: attack.p,
            seed: bench.cfg.seed,
            acc: Some(undefended_acc),
            known: Some(undefended),
            unknown: None,
            semi_targeted: None,
            poison_ratio: None,
            projection: None,
            defense_curves: curves,
        };
        artifact::write_json(&dir.join("summary.json"), &summary)?;
        println!(
            "undefended: ACC {undefended_acc:.2} / known ASR {:.2}",
            summary.known.as_ref().map(|m| m.asr_mean).unwrap_or(f64::NAN)
        );
        for s in &selections {
            match s.chosen_strength {
                Some(strength) => println!(
                    "{}: strength {strength} keeps ACC {:.2} (ASR {:.2}) within {budget} points",
                    s.kind,
                    s.acc.unwrap_or(f64::NAN),
                    s.asr.unwrap_or(f64::NAN),
                ),
                None => println!(
                    "{}: no strength stays within {budget} points of {undefended_acc:.2}",
                    s.kind
                ),
            }
        }
        println!("artifact: {}", dir.display());
        Ok(index_from_summary(&summary, "defend"))
    })
}

// ---- poison ------------------------------------------------------------------------

pub fn poison(
    run: &Path,
    ratio: Option<f64>,
    retrain_arch: Option<&str>,
    args: &ConfigArgs,
) -> Result<()> {
    let base = run_config_table(run)?;
    let mut extra: Vec<(&str, &str, Value)> = Vec::new();
    if let Some(r) = ratio {
        extra.push(("poison", "ratio", Value::Float(r)));
    }
    if let Some(a) = retrain_arch {
        Architecture::from_str(a)?;
        extra.push(("poison", "retrain_architecture", Value::String(a.into())));
    }
    let cfg = effective_config_layered(Some(base), args, &extra)?;
    let Some((plan, arch)) = cfg.resolved_poison() else {
        return Err(Error::Config(
            "poison needs a ratio: pass --ratio or add a [poison] section to the config".into(),
        ));
    };
    let run_id = run_name(args, "poison", cfg.seed);
    let output_root = cfg.output_dir.clone();
    let bench = build_workbench(cfg)?;
    let attack = bench.cfg.resolved_attack();
    let (_, generator) = load_checkpoints(run, attack.epsilon)?;
    with_run_dir(&output_root, &run_id, "poison", args.force, |dir| {
        bench.cfg.save(&dir.join("config.toml"))?;
        let poisoned = poison_dataset(
            &bench.splits.train,
            &generator,
            &bench.pipeline,
            &bench.set,
            &attack,
            &plan,
        )?;
        if let Some(w) = &poisoned.warning {
            eprintln!("warning: {w}");
        }
        let poison_dir = dir.join("poison");
        fs::create_dir_all(&poison_dir)?;
        poisoned.manifest.save(&poison_dir.join("manifest.json"))?;
        let spec = RetrainSpec {
            arch,
            init_seed: bench.cfg.seed,
        };
        let sched = bench.cfg.resolved_schedule();
        let (retrained, known, unknown) = retrain_and_evaluate(
            &poisoned,
            &spec,
            &sched,
            &generator,
            &bench.pipeline,
            &bench.set,
            &bench.splits.test,
            &attack,
            bench.cfg.resolved_eval_seed(),
        )?;
        let ckpt_dir = dir.join("checkpoints");
        fs::create_dir_all(&ckpt_dir)?;
        retrained.save(&ckpt_dir.join("victim.json"))?;
        let metrics_dir = dir.join("metrics");
        artifact::write_json(&metrics_dir.join("known.json"), &known)?;
        artifact::write_json(&metrics_dir.join("unknown.json"), &unknown)?;
        let summary = RunSummary {
            run_id: run_id.clone(),
            variant: format!("poison-{arch}"),
            epsilon: attack.epsilon,
            p: attack.p,
            seed: bench.cfg.seed,
            acc: Some(known.acc),
            known: Some(known),
            unknown: Some(unknown),
            semi_targeted: None,
            poison_ratio: Some(plan.ratio),
            projection: None,
            defense_curves: Vec::new(),
        };
        artifact::write_json(&dir.join("summary.json"), &summary)?;
        println!("{}", poison_grid_table(std::slice::from_ref(&summary))?);
        println!("artifact: {}", dir.display());
        Ok(index_from_summary(&summary, "poison"))
    })
}

// ---- report ------------------------------------------------------------------------

/// Pivot a series set into CSV: one row per distinct x, one column per
/// series, cells left empty where a series has no point at that x.
fn series_csv(axis: &str, series: &[Series]) -> String {
    let mut xs: Vec<f64> = series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut out = String::from(axis);
    for s in series {
        out.push(',');
        out.push_str(&s.label.replace(',', ";"));
    }
    out.push('\n');
    for &x in &xs {
        out.push_str(&format!("{x}"));
        for s in series {
            out.push(',');
            if let Some((_, y)) = s.points.iter().find(|p| p.0 == x) {
                out.push_str(&format!("{y}"));
            }
        }
        out.push('\n');
    }
    out
}

fn distinct_values(values: impl Iterator<Item = f64>) -> usize {
    let mut vs: Vec<f64> = values.collect();
    vs.sort_by(f64::total_cmp);
    vs.dedup();
    vs.len()
}

pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut summaries = Vec::new();
    for dir in runs {
        let path = dir.join("summary.json");
        if !path.is_file() {
            return Err(Error::Config(format!(
                "{} has no summary.json — not a finished run",
                dir.display()
            )));
        }
        summaries.push(artifact::read_json::<RunSummary>(&path)?);
    }
    fs::create_dir_all(out)?;
    let mut written: Vec<String> = Vec::new();
    let mut emit = |name: &str, text: &str| -> Result<()> {
        write_text(&out.join(name), text)?;
        written.push(name.to_string());
        Ok(())
    };

    let mut tables = acc_asr_table(&summaries)?;
    let has_poison = summaries.iter().any(|s| s.poison_ratio.is_some());
    if has_poison {
        tables.push('\n');
        tables.push_str(&poison_grid_table(&summaries)?);
    }
    emit("tables.txt", &tables)?;
    emit("acc_asr.csv", &acc_asr_csv(&summaries)?)?;
    if has_poison {
        emit("poison_grid.csv", &poison_grid_csv(&summaries)?)?;
    }

    for s in &summaries {
        let id = sanitize_name(&s.run_id);
        for (tag, rep) in [("known", &s.known), ("unknown", &s.unknown)] {
            if let Some(rep) = rep {
                emit(
                    &format!("per_class/{id}-{tag}-by_class.csv"),
                    &per_class_asr_csv(rep, PerClassOrder::ByClass),
                )?;
                emit(
                    &format!("per_class/{id}-{tag}-sorted.csv"),
                    &per_class_asr_csv(rep, PerClassOrder::Sorted),
                )?;
            }
        }
    }

    for (axis, name, values) in [
        (
            SweepAxis::Epsilon,
            "epsilon",
            summaries.iter().map(|s| s.epsilon).collect::<Vec<_>>(),
        ),
        (
            SweepAxis::P,
            "p",
            summaries.iter().map(|s| s.p).collect::<Vec<_>>(),
        ),
    ] {
        if distinct_values(values.into_iter()) >= 2 {
            let series = sweep_series(&summaries, axis)?;
            emit(&format!("sweep-{name}.csv"), &series_csv(name, &series))?;
            emit(
                &format!("sweep-{name}.svg"),
                &line_plot(
                    &format!("attack metrics vs {}", axis.label()),
                    axis.label(),
                    "percent",
                    &series,
                )?,
            )?;
        }
    }

    for s in &summaries {
        let id = sanitize_name(&s.run_id);
        if let Some(points) = &s.projection {
            let groups = projection_groups(points)?;
            emit(
                &format!("projection-{id}.svg"),
                &scatter_plot(&format!("instruction features ({})", s.run_id), &groups)?,
            )?;
        }
        for curve in &s.defense_curves {
            emit(&format!("defense-{id}-{}.csv", curve.kind), &curve.to_csv())?;
            if let Some(svg) = defense_plot(curve)? {
                emit(&format!("defense-{id}-{}.svg", curve.kind), &svg)?;
            }
        }
    }

    println!("{tables}");
    println!(
        "report: {} files under {}",
        written.len(),
        out.display()
    );
    Ok(())
}
