//! Metrics and the clean / attacked / defended evaluation matrix.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{attack_dataset, AttackConfig, AttackKind};
use crate::autodiff::Tensor;
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::model::{Architecture, Model, Task};
use crate::rng::derive_seed;

/// Rows per attack chunk when evaluating.
const EVAL_CHUNK: usize = 256;

/// Root mean squared error.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::LengthMismatch { left: pred.len(), right: target.len() });
    }
    let sse: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Fraction of samples where `prob >= threshold` agrees with the label.
pub fn accuracy(prob: &[f64], label: &[f64], threshold: f64) -> Result<f64> {
    if prob.len() != label.len() || prob.is_empty() {
        return Err(Error::LengthMismatch { left: prob.len(), right: label.len() });
    }
    if let Some((index, &value)) = label.iter().enumerate().find(|(_, &l)| l != 0.0 && l != 1.0) {
        return Err(Error::InvalidLabel { index, value });
    }
    let hits = prob.iter().zip(label).filter(|(&p, &l)| (p >= threshold) == (l == 1.0)).count();
    Ok(hits as f64 / prob.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rmse,
    Accuracy,
}

impl Metric {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Regression => Metric::Rmse,
            Task::Classification => Metric::Accuracy,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Accuracy => "accuracy",
        }
    }
}

/// Metric of `model` on `(x, y)`.
pub fn evaluate(model: &Model, x: &Tensor, y: &Tensor) -> Result<f64> {
    let pred = model.predict_chunked(x, EVAL_CHUNK)?;
    match Metric::for_task(model.spec.task) {
        Metric::Rmse => rmse(&pred, y.data()),
        Metric::Accuracy => accuracy(&pred, y.data(), 0.5),
    }
}

/// Which model the defended rows' perturbations are crafted against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// The defended model itself.
    #[default]
    Adaptive,
    /// The undefended base model.
    Transfer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowKind {
    Clean,
    Attacked,
    Defended,
}

impl RowKind {
    pub fn name(self) -> &'static str {
        match self {
            RowKind::Clean => "clean",
            RowKind::Attacked => "attacked",
            RowKind::Defended => "defended",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Row {
    pub kind: RowKind,
    pub attack: Option<AttackKind>,
}

impl Row {
    pub fn label(&self) -> String {
        match (self.kind, self.attack) {
            (RowKind::Clean, _) | (_, None) => "Clean".into(),
            (RowKind::Attacked, Some(a)) => format!("{a} attack"),
            (RowKind::Defended, Some(a)) => format!("{a} adversarial training"),
        }
    }
}

impl fmt::Display for Row {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub value: f64,
    pub n: usize,
}

/// Everything that determines a report's numbers.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub seeds: BTreeMap<String, u64>,
    pub attacks: Vec<AttackConfig>,
    pub defended_eval: EvalMode,
    pub settings: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub metric: Metric,
    pub models: Vec<Architecture>,
    pub rows: Vec<Row>,
    /// `cells[row][model]`; `None` marks an absent cell.
    pub cells: Vec<Vec<Option<Cell>>>,
    pub fingerprint: Fingerprint,
}

/// Trained models available to [`build_report`].
#[derive(Clone, Debug, Default)]
pub struct ModelSet {
    pub clean: BTreeMap<Architecture, Model>,
    pub defended: BTreeMap<(Architecture, AttackKind), Model>,
}

/// Seed of the attack used for one report cell.
pub fn cell_seed(attack: &AttackConfig, row: RowKind, arch: Architecture) -> u64 {
    derive_seed(attack.seed, row.name(), arch.name(), attack.kind.name(), 0)
}

fn attacked(model: &Model, test: &WindowedDataset, attack: &AttackConfig, row: RowKind) -> Result<Tensor> {
    let cfg = attack.clone().with_seed(cell_seed(attack, row, model.spec.architecture));
    Ok(attack_dataset(model, &test.x, &test.y, &cfg, EVAL_CHUNK)?.perturbed)
}

/// Assemble the evaluation matrix: one clean row, one attacked row per
/// attack, one defended row per attack. Cells whose models are missing or
/// whose evaluation fails are left absent.
pub fn build_report(
    dataset: &str,
    test: &WindowedDataset,
    models: &[Architecture],
    attacks: &[AttackConfig],
    set: &ModelSet,
    mut fingerprint: Fingerprint,
    mode: EvalMode,
) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(Error::NoModels);
    }
    fingerprint.defended_eval = mode;
    fingerprint.attacks = attacks.to_vec();
    let mut rows = vec![Row { kind: RowKind::Clean, attack: None }];
    for kind in [RowKind::Attacked, RowKind::Defended] {
        rows.extend(attacks.iter().map(|a| Row { kind, attack: Some(a.kind) }));
    }

    let jobs: Vec<(usize, usize)> = (0..rows.len()).flat_map(|r| (0..models.len()).map(move |m| (r, m))).collect();
    let values: Vec<Option<Cell>> = jobs
        .par_iter()
        .map(|&(r, m)| {
            let arch = models[m];
            let row = rows[r];
            let attack = row.attack.and_then(|k| attacks.iter().find(|a| a.kind == k));
            let base = set.clean.get(&arch);
            let value = match (row.kind, attack) {
                (RowKind::Clean, _) => base.map(|b| evaluate(b, &test.x, &test.y)),
                (RowKind::Attacked, Some(a)) => {
                    base.map(|b| attacked(b, test, a, RowKind::Attacked).and_then(|x| evaluate(b, &x, &test.y)))
                }
                (RowKind::Defended, Some(a)) => {
                    let defended = set.defended.get(&(arch, a.kind));
                    match (mode, defended) {
                        (EvalMode::Adaptive, Some(d)) => {
                            Some(attacked(d, test, a, RowKind::Defended).and_then(|x| evaluate(d, &x, &test.y)))
                        }
                        (EvalMode::Transfer, Some(d)) => {
                            base.map(|b| attacked(b, test, a, RowKind::Attacked).and_then(|x| evaluate(d, &x, &test.y)))
                        }
                        (_, None) => None,
                    }
                }
                _ => None,
            };
            match value {
                Some(Ok(v)) => Some(Cell { value: v, n: test.len() }),
                Some(Err(e)) => {
                    log::error!("{} / {arch}: {e}", row.label());
                    None
                }
                None => None,
            }
        })
        .collect();
    let cells = values.chunks(models.len()).map(|c| c.to_vec()).collect();
    Ok(EvalReport {
        dataset: dataset.to_string(),
        metric: Metric::for_task(test.task),
        models: models.to_vec(),
        rows,
        cells,
        fingerprint,
    })
}

pub const ABSENT: &str = "absent";

impl EvalReport {
    pub fn cell(&self, row: Row, arch: Architecture) -> Option<Cell> {
        let r = self.rows.iter().position(|x| *x == row)?;
        let m = self.models.iter().position(|x| *x == arch)?;
        self.cells[r][m]
    }

    pub fn cell_count(&self) -> usize {
        self.rows.len() * self.models.len()
    }

    pub fn filled(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_some()).count()
    }

    /// Long format: `dataset,model,row,attack,metric,value,n`. Absent cells
    /// carry `absent` as value and 0 as count.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,model,row,attack,metric,value,n\n");
        for (row, cells) in self.rows.iter().zip(&self.cells) {
            for (arch, cell) in self.models.iter().zip(cells) {
                let attack = row.attack.map_or("none", AttackKind::name);
                let (value, n) = match cell {
                    Some(c) => (format!("{:?}", c.value), c.n),
                    None => (ABSENT.to_string(), 0),
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{}",
                    self.dataset,
                    arch,
                    row.kind.name(),
                    attack,
                    self.metric.name(),
                    value,
                    n
                );
            }
        }
        out
    }

    /// Table with one column per model, values to two decimals.
    pub fn to_markdown(&self) -> String {
        let mut out = format!("## {} ({})\n\n| |", self.dataset, self.metric.name());
        for m in &self.models {
            let _ = write!(out, " {m} |");
        }
        out.push_str("\n|---|");
        out.push_str(&"---:|".repeat(self.models.len()));
        out.push('\n');
        for (row, cells) in self.rows.iter().zip(&self.cells) {
            let _ = write!(out, "| {} |", row.label());
            for c in cells {
                match c {
                    Some(c) => {
                        let _ = write!(out, " {:.2} |", c.value);
                    }
                    None => {
                        let _ = write!(out, " {ABSENT} |");
                    }
                }
            }
            out.push('\n');
        }
        let _ = writeln!(out, "\nDefended rows: {:?} evaluation.", self.fingerprint.defended_eval);
        out
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

/// Actual vs predicted line plot.
pub fn overlay_svg(title: &str, actual: &[f64], predicted: &[f64]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 300.0;
    const PAD: f64 = 30.0;
    let n = actual.len().max(predicted.len()).max(2);
    let (lo, hi) = actual
        .iter()
        .chain(predicted)
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
    let points = |vs: &[f64]| {
        vs.iter()
            .enumerate()
            .map(|(i, v)| {
                let x = PAD + (W - 2.0 * PAD) * i as f64 / (n - 1) as f64;
                let y = H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
                format!("{x:.1},{y:.1}")
            })
            .collect::<Vec<_>>()
            .join(" ")
    };
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<text x=\"{pad}\" y=\"20\" font-size=\"14\">{title}</text>\n",
            "<polyline fill=\"none\" stroke=\"#1f77b4\" stroke-width=\"1.5\" points=\"{a}\"/>\n",
            "<polyline fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\" points=\"{p}\"/>\n",
            "<text x=\"{lx}\" y=\"20\" font-size=\"12\" fill=\"#1f77b4\">actual</text>\n",
            "<text x=\"{lx2}\" y=\"20\" font-size=\"12\" fill=\"#d62728\">predicted</text>\n",
            "</svg>\n"
        ),
        w = W,
        h = H,
        pad = PAD,
        title = title.replace('&', "&amp;").replace('<', "&lt;"),
        a = points(actual),
        p = points(predicted),
        lx = W - 160.0,
        lx2 = W - 100.0,
    )
}
