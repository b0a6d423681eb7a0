//! Accuracy bookkeeping and summary metrics (Avg, PD, Imp, forgetting), plus
//! the CSV/JSON report files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::FrozenBackbone;
use crate::datagen::LabeledDataset;
use crate::error::{Error, Result};
use crate::prompt::{select_prompt, Head, PromptPool};

/// `a[t][j]`: accuracy in percent on task `j`'s test split after finishing
/// task `t` (0-based, `j ≤ t`), and `A[t]` over the union of tasks `0..=t`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    per_task: Vec<Vec<f64>>,
    aggregate: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn n_tasks(&self) -> usize {
        self.aggregate.len()
    }

    /// Appends the evaluation after the next task: one accuracy per task so far.
    pub fn push(&mut self, per_task: Vec<f64>, aggregate: f64) -> Result<()> {
        let t = self.aggregate.len();
        if per_task.len() != t + 1 {
            return Err(Error::Contract(format!(
                "evaluation after task {t} needs {} per-task accuracies, got {}",
                t + 1,
                per_task.len()
            )));
        }
        if per_task.iter().chain([&aggregate]).any(|a| !(0.0..=100.0).contains(a)) {
            return Err(Error::Contract("accuracies must lie in [0, 100]".into()));
        }
        self.per_task.push(per_task);
        self.aggregate.push(aggregate);
        Ok(())
    }

    pub fn get(&self, t: usize, j: usize) -> Option<f64> {
        self.per_task.get(t).and_then(|r| r.get(j)).copied()
    }

    pub fn aggregate(&self) -> &[f64] {
        &self.aggregate
    }

    pub fn per_task(&self) -> &[Vec<f64>] {
        &self.per_task
    }
}

pub fn avg_accuracy(a: &[f64]) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::Contract("average of an empty accuracy sequence".into()));
    }
    Ok(a.iter().sum::<f64>() / a.len() as f64)
}

/// `A[1] − A[T]`.
pub fn performance_drop(a: &[f64]) -> Result<f64> {
    match (a.first(), a.last()) {
        (Some(first), Some(last)) => Ok(first - last),
        _ => Err(Error::Contract("performance drop of an empty accuracy sequence".into())),
    }
}

pub fn improvement(avg_ref: f64, avg_method: f64) -> f64 {
    avg_method - avg_ref
}

/// Average forgetting after task `t` (1-based, `t ≥ 2`):
/// `1/(t−1) Σ_{j<t} [max_{τ∈[j,t−1]} a[τ][j] − a[t][j]]`.
pub fn avg_forgetting(m: &AccuracyMatrix, t: usize) -> Result<f64> {
    if t < 2 {
        return Err(Error::UndefinedMetric(format!("forgetting needs t ≥ 2, got {t}")));
    }
    if t > m.n_tasks() {
        return Err(Error::Index {
            index: t,
            len: m.n_tasks(),
        });
    }
    let now = t - 1;
    let mut sum = 0.0;
    for j in 0..now {
        let best = (j..now).map(|tau| m.per_task[tau][j]).fold(f64::NEG_INFINITY, f64::max);
        sum += best - m.per_task[now][j];
    }
    Ok(sum / (t - 1) as f64)
}

/// Key-matched prediction for one sample.
pub fn predict(pool: &PromptPool, head: &Head, backbone: &FrozenBackbone, x: &crate::numerics::Mat) -> Result<Option<u32>> {
    let query = backbone.features(x, &[])?;
    let sel = select_prompt(pool, &query, None)?;
    head.predict(&backbone.features(x, &sel.stack)?)
}

/// Accuracy (percent) on each test split and on their union. Classes the
/// head has no row for can never be predicted and count as errors.
pub fn evaluate(
    pool: &PromptPool,
    head: &Head,
    backbone: &FrozenBackbone,
    tasks: &[&LabeledDataset],
) -> Result<(f64, Vec<f64>)> {
    let mut per_task = Vec::with_capacity(tasks.len());
    let (mut correct_all, mut total_all) = (0usize, 0usize);
    for (j, t) in tasks.iter().enumerate() {
        let (mut correct, mut total) = (0, 0);
        for s in t.test() {
            total += 1;
            if predict(pool, head, backbone, &s.x)? == Some(s.y) {
                correct += 1;
            }
        }
        if total == 0 {
            return Err(Error::Contract(format!("task {j} has an empty test split")));
        }
        per_task.push(100.0 * correct as f64 / total as f64);
        correct_all += correct;
        total_all += total;
    }
    if total_all == 0 {
        return Err(Error::Contract("nothing to evaluate".into()));
    }
    Ok((100.0 * correct_all as f64 / total_all as f64, per_task))
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommTotals {
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub updates: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub seed: u64,
    pub accuracy: AccuracyMatrix,
    pub avg: f64,
    pub pd: f64,
    pub imp: Option<f64>,
    /// Forgetting after tasks 2..=T.
    pub forgetting: Vec<f64>,
    pub comm: CommTotals,
    pub variance_clamps: u64,
    /// Per round, the mean over selected clients of their last batch loss.
    pub round_losses: Vec<f64>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl MetricsReport {
    pub fn from_matrix(method: &str, seed: u64, accuracy: AccuracyMatrix, reference_avg: Option<f64>) -> Result<Self> {
        let avg = avg_accuracy(accuracy.aggregate())?;
        let pd = performance_drop(accuracy.aggregate())?;
        let forgetting = (2..=accuracy.n_tasks())
            .map(|t| avg_forgetting(&accuracy, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetricsReport {
            method: method.to_string(),
            seed,
            accuracy,
            avg,
            pd,
            imp: reference_avg.map(|r| improvement(r, avg)),
            forgetting,
            comm: CommTotals::default(),
            variance_clamps: 0,
            round_losses: Vec::new(),
            wall_time_s: 0.0,
        })
    }

    pub fn final_forgetting(&self) -> Option<f64> {
        self.forgetting.last().copied()
    }
}

pub fn accuracy_header(n_tasks: usize) -> String {
    let mut h = String::from("method,seed");
    for t in 1..=n_tasks {
        write!(h, ",t{t}").unwrap();
    }
    h.push_str(",avg,pd");
    h
}

pub const SUMMARY_HEADER: &str = "method,seed,avg,pd,imp,forgetting,uplink_bytes,downlink_bytes,variance_clamps";

fn opt(v: Option<f64>, decimals: usize) -> String {
    v.map_or(String::new(), |x| format!("{x:.decimals$}"))
}

/// One Table-2-shaped row: per-task aggregate accuracy to one decimal,
/// Avg and PD to two.
pub fn accuracy_csv(reports: &[(&str, String, &[f64], f64, f64)]) -> String {
    let n = reports.first().map_or(0, |r| r.2.len());
    let mut s = accuracy_header(n);
    s.push('\n');
    for (method, seed, a, avg, pd) in reports {
        write!(s, "{method},{seed}").unwrap();
        for v in a.iter() {
            write!(s, ",{v:.1}").unwrap();
        }
        writeln!(s, ",{avg:.2},{pd:.2}").unwrap();
    }
    s
}

pub fn summary_row(r: &MetricsReport, seed_label: &str) -> String {
    format!(
        "{},{},{:.2},{:.2},{},{},{},{},{}",
        r.method,
        seed_label,
        r.avg,
        r.pd,
        opt(r.imp, 2),
        opt(r.final_forgetting(), 2),
        r.comm.uplink_bytes,
        r.comm.downlink_bytes,
        r.variance_clamps
    )
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `accuracy_seed{S}.csv`, `summary_seed{S}.csv`, `matrix_seed{S}.json`
/// and, when given, `audit_seed{S}.tsv` into `dir`.
pub fn emit_report(report: &MetricsReport, audit: Option<&str>, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let seed = report.seed.to_string();
    let mut out = Vec::new();
    let acc = dir.join(format!("accuracy_seed{seed}.csv"));
    write_file(
        &acc,
        &accuracy_csv(&[(&report.method, seed.clone(), report.accuracy.aggregate(), report.avg, report.pd)]),
    )?;
    out.push(acc);
    let sum = dir.join(format!("summary_seed{seed}.csv"));
    write_file(&sum, &format!("{SUMMARY_HEADER}\n{}\n", summary_row(report, &seed)))?;
    out.push(sum);
    let mat = dir.join(format!("matrix_seed{seed}.json"));
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Schema(e.to_string()))?;
    write_file(&mat, &(json + "\n"))?;
    out.push(mat);
    if let Some(text) = audit {
        let p = dir.join(format!("audit_seed{seed}.tsv"));
        write_file(&p, text)?;
        out.push(p);
    }
    Ok(out)
}

/// Seed-averaged report from unrounded per-seed values:
/// `accuracy_mean.csv` and `summary_mean.csv`.
pub fn emit_mean_report(reports: &[MetricsReport], dir: &Path) -> Result<Vec<PathBuf>> {
    let Some(first) = reports.first() else {
        return Err(Error::Contract("no reports to average".into()));
    };
    let n = first.accuracy.n_tasks();
    if reports.iter().any(|r| r.accuracy.n_tasks() != n) {
        return Err(Error::Contract("reports cover different task counts".into()));
    }
    let k = reports.len() as f64;
    let mean = |f: &dyn Fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    let a: Vec<f64> = (0..n).map(|t| mean(&|r| r.accuracy.aggregate()[t])).collect();
    let avg = mean(&|r| r.avg);
    let pd = mean(&|r| r.pd);
    let acc = dir.join("accuracy_mean.csv");
    write_file(&acc, &accuracy_csv(&[(&first.method, "mean".into(), &a, avg, pd)]))?;
    let imp = reports.iter().all(|r| r.imp.is_some()).then(|| mean(&|r| r.imp.unwrap()));
    let forgetting = reports
        .iter()
        .all(|r| r.final_forgetting().is_some())
        .then(|| mean(&|r| r.final_forgetting().unwrap()));
    let summary = MetricsReport {
        method: first.method.clone(),
        seed: 0,
        accuracy: AccuracyMatrix::new(),
        avg,
        pd,
        imp,
        forgetting: forgetting.into_iter().collect(),
        comm: CommTotals {
            uplink_bytes: reports.iter().map(|r| r.comm.uplink_bytes).sum::<u64>() / reports.len() as u64,
            downlink_bytes: reports.iter().map(|r| r.comm.downlink_bytes).sum::<u64>() / reports.len() as u64,
            updates: 0,
        },
        variance_clamps: reports.iter().map(|r| r.variance_clamps).sum(),
        round_losses: Vec::new(),
        wall_time_s: 0.0,
    };
    let sum = dir.join("summary_mean.csv");
    write_file(&sum, &format!("{SUMMARY_HEADER}\n{}\n", summary_row(&summary, "mean")))?;
    Ok(vec![acc, sum])
}

/// Parsed accuracy CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyRow {
    pub method: String,
    pub seed: String,
    pub per_task: Vec<f64>,
    pub avg: f64,
    pub pd: f64,
}

pub fn parse_accuracy_csv(text: &str) -> Result<Vec<AccuracyRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?.clone();
    let n = header.len().checked_sub(4).ok_or_else(|| Error::Schema("accuracy header too short".into()))?;
    if header.iter().collect::<Vec<_>>().join(",") != accuracy_header(n) {
        return Err(Error::Schema("accuracy header does not match the documented schema".into()));
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        let num = |k: usize| -> Result<f64> {
            rec[k].parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad number `{}`", &rec[k]),
            })
        };
        rows.push(AccuracyRow {
            method: rec[0].to_string(),
            seed: rec[1].to_string(),
            per_task: (2..2 + n).map(num).collect::<Result<_>>()?,
            avg: num(2 + n)?,
            pd: num(3 + n)?,
        });
    }
    Ok(rows)
}
