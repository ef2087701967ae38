//! Table and CSV emission over stored run records. Every function here is a
//! pure function of its inputs — re-rendering the same records yields
//! byte-identical output — and a metric that was never measured is marked
//! absent ("-" in tables, an empty CSV cell), never fabricated.

use serde::{Deserialize, Serialize};

use crate::defense::TradeoffCurve;
use crate::error::{Error, Result};
use crate::eval::MetricsReport;
use crate::plot::Series;

/// One 2-D projected instruction feature, tagged with its class name.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub class: String,
    pub x: f64,
    pub y: f64,
}

/// The per-run record the reporter consumes: headline settings plus whichever
/// metric reports the run produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    /// Attack variant label (ablation preset name, or a free-form tag).
    pub variant: String,
    pub epsilon: f64,
    pub p: f64,
    pub seed: u64,
    pub acc: Option<f64>,
    pub known: Option<MetricsReport>,
    pub unknown: Option<MetricsReport>,
    /// Mean success rate over the semi-targeted instruction entries (each
    /// scores one instruction against its allowed label set).
    pub semi_targeted: Option<f64>,
    /// Set on poisoning-transfer runs.
    pub poison_ratio: Option<f64>,
    /// 2-D projection of the instruction features, stored at attack time so
    /// reports never need the encoder.
    #[serde(default)]
    pub projection: Option<Vec<ProjectedPoint>>,
    /// Defense trade-off curves measured against this run's model.
    #[serde(default)]
    pub defense_curves: Vec<TradeoffCurve>,
}

fn cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.2}"),
        None => "-".into(),
    }
}

fn csv_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => String::new(),
    }
}

fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let fmt_row = |cells: &[String], widths: &[usize]| -> String {
        cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let head: Vec<String> = header.iter().map(|s| s.to_string()).collect();
    out.push_str(&fmt_row(&head, &widths));
    out.push('\n');
    out.push_str(
        &widths
            .iter()
            .map(|w| "-".repeat(*w))
            .collect::<Vec<_>>()
            .join("  "),
    );
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row, &widths));
        out.push('\n');
    }
    out
}

/// Headline grid: one row per run, ACC plus the mean ASR of each split.
pub fn acc_asr_table(runs: &[RunSummary]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one completed run".into()));
    }
    let header = [
        "run", "variant", "epsilon", "p", "ACC", "ASR known", "ASR unknown", "ASR semi",
    ];
    let rows: Vec<Vec<String>> = runs
        .iter()
        .map(|r| {
            vec![
                r.run_id.clone(),
                r.variant.clone(),
                format!("{}", r.epsilon),
                format!("{}", r.p),
                cell(r.acc),
                cell(r.known.as_ref().map(|m| m.asr_mean)),
                cell(r.unknown.as_ref().map(|m| m.asr_mean)),
                cell(r.semi_targeted),
            ]
        })
        .collect();
    Ok(render_table(&header, &rows))
}

/// CSV twin of [`acc_asr_table`]; absent metrics become empty cells.
pub fn acc_asr_csv(runs: &[RunSummary]) -> Result<String> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one completed run".into()));
    }
    let mut out = String::from("run,variant,epsilon,p,acc,asr_known,asr_unknown,asr_semi\n");
    for r in runs {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.run_id,
            r.variant,
            r.epsilon,
            r.p,
            csv_cell(r.acc),
            csv_cell(r.known.as_ref().map(|m| m.asr_mean)),
            csv_cell(r.unknown.as_ref().map(|m| m.asr_mean)),
            csv_cell(r.semi_targeted),
        ));
    }
    Ok(out)
}

/// Ordering for the per-class ASR bar data. The natural ordering is
/// unspecified upstream, so both are emitted side by side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerClassOrder {
    /// Rows in class-index order.
    ByClass,
    /// Rows sorted by descending rate; classes without a rate sort last.
    Sorted,
}

/// Per-class ASR rows for one split. Skipped classes keep their row with an
/// empty value and a flag, so the consumer can tell "absent" from "zero".
pub fn per_class_asr_csv(report: &MetricsReport, order: PerClassOrder) -> String {
    let mut rows: Vec<(usize, Option<f64>)> = report
        .asr_per_class
        .iter()
        .copied()
        .enumerate()
        .collect();
    if order == PerClassOrder::Sorted {
        rows.sort_by(|a, b| match (a.1, b.1) {
            (Some(x), Some(y)) => y.partial_cmp(&x).unwrap().then(a.0.cmp(&b.0)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.0.cmp(&b.0),
        });
    }
    let mut out = String::from("class,asr,skipped\n");
    for (class, rate) in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            class,
            csv_cell(rate),
            report.skipped_classes.contains(&class)
        ));
    }
    out
}

/// Poisoning-transfer grid: one row per ratio, known/unknown ASR columns.
/// Rows are sorted by ratio regardless of input order.
pub fn poison_grid_table(runs: &[RunSummary]) -> Result<String> {
    let mut poison: Vec<&RunSummary> =
        runs.iter().filter(|r| r.poison_ratio.is_some()).collect();
    if poison.is_empty() {
        return Err(Error::Config("no poisoning runs to report".into()));
    }
    poison.sort_by(|a, b| a.poison_ratio.partial_cmp(&b.poison_ratio).unwrap());
    let header = ["ratio", "run", "ACC", "ASR known", "ASR unknown"];
    let rows: Vec<Vec<String>> = poison
        .iter()
        .map(|r| {
            vec![
                format!("{}", r.poison_ratio.unwrap()),
                r.run_id.clone(),
                cell(r.acc),
                cell(r.known.as_ref().map(|m| m.asr_mean)),
                cell(r.unknown.as_ref().map(|m| m.asr_mean)),
            ]
        })
        .collect();
    Ok(render_table(&header, &rows))
}

/// CSV twin of [`poison_grid_table`].
pub fn poison_grid_csv(runs: &[RunSummary]) -> Result<String> {
    let mut poison: Vec<&RunSummary> =
        runs.iter().filter(|r| r.poison_ratio.is_some()).collect();
    if poison.is_empty() {
        return Err(Error::Config("no poisoning runs to report".into()));
    }
    poison.sort_by(|a, b| a.poison_ratio.partial_cmp(&b.poison_ratio).unwrap());
    let mut out = String::from("ratio,run,acc,asr_known,asr_unknown\n");
    for r in poison {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.poison_ratio.unwrap(),
            r.run_id,
            csv_cell(r.acc),
            csv_cell(r.known.as_ref().map(|m| m.asr_mean)),
            csv_cell(r.unknown.as_ref().map(|m| m.asr_mean)),
        ));
    }
    Ok(out)
}

/// Which headline setting a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Epsilon,
    P,
}

impl SweepAxis {
    pub fn label(self) -> &'static str {
        match self {
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::P => "backdoor fraction p",
        }
    }

    fn value(self, run: &RunSummary) -> f64 {
        match self {
            SweepAxis::Epsilon => run.epsilon,
            SweepAxis::P => run.p,
        }
    }
}

/// Known/unknown mean-ASR series over the chosen axis, sorted by its value.
/// Runs missing a split simply contribute no point to that series.
pub fn sweep_series(runs: &[RunSummary], axis: SweepAxis) -> Result<Vec<Series>> {
    if runs.is_empty() {
        return Err(Error::Config("sweep needs at least one run".into()));
    }
    let mut sorted: Vec<&RunSummary> = runs.iter().collect();
    sorted.sort_by(|a, b| axis.value(a).partial_cmp(&axis.value(b)).unwrap());
    let collect = |pick: fn(&RunSummary) -> Option<f64>, label: &str| Series {
        label: label.to_string(),
        points: sorted
            .iter()
            .filter_map(|r| pick(r).map(|v| (axis.value(r), v)))
            .collect(),
    };
    Ok(vec![
        collect(|r| r.known.as_ref().map(|m| m.asr_mean), "ASR known"),
        collect(|r| r.unknown.as_ref().map(|m| m.asr_mean), "ASR unknown"),
        collect(|r| r.acc, "ACC"),
    ])
}

/// Group stored projection points by class for the scatter renderer; group
/// order follows first appearance, point order is preserved.
pub fn projection_groups(points: &[ProjectedPoint]) -> Result<Vec<Series>> {
    if points.is_empty() {
        return Err(Error::Config("no projected features to plot".into()));
    }
    let mut groups: Vec<Series> = Vec::new();
    for p in points {
        match groups.iter_mut().find(|g| g.label == p.class) {
            Some(g) => g.points.push((p.x, p.y)),
            None => groups.push(Series {
                label: p.class.clone(),
                points: vec![(p.x, p.y)],
            }),
        }
    }
    Ok(groups)
}
