//! Subcommand implementations behind `pipsim`. Each writes human-readable
//! output to `out` and returns whether its checks passed.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::datagen::StreamManifest;
use crate::error::{Error, Result};
use crate::federation::{
    aggregate_params, check_audit, run_experiment, AggregationMode, AuditExpectations, ClientUpdate, Federation,
    UpdateShape,
};
use crate::metrics::{emit_mean_report, emit_report, MetricsReport};
use crate::numerics::{Mat, RngStream, StreamKey};
use crate::prompt::{run_gradcheck, HeadParams, REL_TOLERANCE};
use crate::prototypes::{aggregate_prototype_sets, prototypes_from_features, PrototypeSet};

/// Overrides the configured output directory of `run`.
pub const OUTPUT_DIR_ENV: &str = "PIP_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    CheckFailed,
}

impl Status {
    fn from_bool(ok: bool) -> Self {
        if ok {
            Status::Pass
        } else {
            Status::CheckFailed
        }
    }
}

/// 0 pass, 1 validation or input error, 2 failed check.
pub fn exit_code(r: &Result<Status>) -> i32 {
    match r {
        Ok(Status::Pass) => 0,
        Ok(Status::CheckFailed) => 2,
        Err(_) => 1,
    }
}

fn w(out: &mut dyn Write, line: std::fmt::Arguments<'_>) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// Runs every seed, writes per-seed and seed-averaged reports, and checks
/// each run's audit log.
pub fn cmd_run(config: &Path, output_override: Option<PathBuf>, out: &mut dyn Write) -> Result<Status> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(dir) = output_override {
        cfg.output_dir = dir;
    }
    let dir = cfg.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let runs: Vec<Result<(MetricsReport, bool, String)>> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let sc = cfg.scenario(seed)?;
            let setup = sc.setup(&cfg, seed, None);
            let o = run_experiment(&setup)?;
            let exp = AuditExpectations {
                n_clients: cfg.federation.n_clients,
                selected: cfg.federation.selected,
                rounds: cfg.federation.rounds,
                rounds_per_task: setup.protocol.rounds_per_task(),
                prototypes_every_round: setup.protocol.flags.prototypes && cfg.federation.prototype_every == 1,
            };
            let audit = check_audit(&o.audit, &exp, &o.participation);
            let note = match &audit {
                Ok(s) => format!("audit ok: {} selections, {} short rounds", s.total_selections, s.rounds_with_shortage),
                Err(e) => format!("audit FAILED: {e}"),
            };
            emit_report(&o.report, Some(&o.audit.to_tsv()), &dir)?;
            let manifest = dir.join(format!("manifest_seed{seed}.json"));
            std::fs::write(&manifest, StreamManifest::new(&sc.stream, &sc.partitions).to_json())
                .map_err(|e| Error::io(&manifest, e))?;
            Ok((o.report, audit.is_ok(), note))
        })
        .collect();
    let mut reports = Vec::new();
    let mut ok = true;
    for r in runs {
        let (report, audit_ok, note) = r?;
        w(
            out,
            format_args!(
                "{} seed {}: avg {:.2} pd {:.2} uplink {} B ({note})",
                report.method, report.seed, report.avg, report.pd, report.comm.uplink_bytes
            ),
        )?;
        ok &= audit_ok;
        reports.push(report);
    }
    emit_mean_report(&reports, &dir)?;
    let mean = reports.iter().map(|r| r.avg).sum::<f64>() / reports.len() as f64;
    w(out, format_args!("mean avg over {} seeds: {mean:.2}; reports in {}", reports.len(), dir.display()))?;
    Ok(Status::from_bool(ok))
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// One random weighted-merge trial against pooled statistics of the raw
/// samples; returns the largest relative error over means and variances.
pub fn merge_trial(rng: &mut RngStream, max_dim: usize) -> Result<f64> {
    let dim = 1 + rng.index(max_dim.max(1));
    let clients = 2 + rng.index(4);
    let mut sets = Vec::with_capacity(clients);
    let mut raw: Vec<(f64, Vec<f64>)> = Vec::new();
    for _ in 0..clients {
        let n = 1 + rng.index(12);
        let weight = 0.1 + 10.0 * rng.uniform();
        let shift = 3.0 * rng.normal();
        let scale = 0.1 + 2.0 * rng.uniform();
        let pts: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| shift + scale * rng.normal()).collect()).collect();
        sets.push((prototypes_from_features(0, pts.iter().map(|p| (0u32, p.as_slice())))?, weight));
        // each raw point carries its client's weight spread over the client's samples
        raw.extend(pts.into_iter().map(|p| (weight / n as f64, p)));
    }
    let refs: Vec<(&PrototypeSet, f64)> = sets.iter().map(|(s, w)| (s, *w)).collect();
    let (merged, _) = aggregate_prototype_sets(&refs)?;
    let g = merged.get(0).ok_or(Error::AbsentClass(0))?;
    let total: f64 = raw.iter().map(|(w, _)| w).sum();
    let mut mean = vec![0.0; dim];
    for (wt, x) in &raw {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += wt * v / total);
    }
    let mut var = vec![0.0; dim];
    for (wt, x) in &raw {
        for i in 0..dim {
            var[i] += wt * (x[i] - mean[i]).powi(2) / total;
        }
    }
    Ok(max_rel(&g.mean, &mean).max(max_rel(&g.var, &var)))
}

/// Weighted aggregation with one shared ω against FedAvg and the plain mean;
/// returns the largest absolute deviation.
pub fn fedavg_trial(rng: &mut RngStream) -> Result<f64> {
    let n = 2 + rng.index(5);
    let omega = 1 + rng.index(500) as u64;
    let (rows, cols) = (1 + rng.index(4), 1 + rng.index(8));
    let updates: Vec<ClientUpdate> = (0..n as u32)
        .map(|id| ClientUpdate {
            client_id: id,
            task_id: 0,
            omega,
            pool: vec![("e/0/0".into(), Mat::from_fn(rows, cols, |_, _| rng.normal()))],
            head: HeadParams {
                classes: vec![0, 1],
                weight: Mat::from_fn(2, cols, |_, _| rng.normal()),
                bias: vec![rng.normal(), rng.normal()],
            },
            prototypes: PrototypeSet::empty(0),
            payload_bytes: 0,
        })
        .collect();
    let (wp, wh) = aggregate_params(&updates, AggregationMode::Weighted, true)?;
    let (fp, fh) = aggregate_params(&updates, AggregationMode::FedAvg, true)?;
    let mut dev = wp[0].1.max_abs_diff(&fp[0].1).max(wh.weight.max_abs_diff(&fh.weight));
    for k in 0..rows * cols {
        let plain = updates.iter().map(|u| u.pool[0].1.data()[k]).sum::<f64>() / n as f64;
        dev = dev.max((wp[0].1.data()[k] - plain).abs());
    }
    Ok(dev)
}

pub fn cmd_check_aggregation(trials: usize, dims: usize, seed: u64, out: &mut dyn Write) -> Result<Status> {
    if trials == 0 || dims == 0 {
        return Err(Error::Config("trials and dims must be at least 1".into()));
    }
    let one = |xs: &[f64]| prototypes_from_features(0, xs.iter().map(|x| (0u32, std::slice::from_ref(x))));
    let (a, b) = (one(&[1.0])?, one(&[3.0])?);
    let (two, _) = aggregate_prototype_sets(&[(&a, 1.0), (&b, 1.0)])?;
    let p = two.get(0).ok_or(Error::AbsentClass(0))?;
    let hand_ok = p.mean == [2.0] && p.var == [1.0];
    w(out, format_args!("two-point case {{1, 3}}: mean {} var {} {}", p.mean[0], p.var[0], pass(hand_ok)))?;

    let mut rng = RngStream::new(seed, StreamKey::new("check-merge", 0, 0, 0));
    let mut worst = 0.0f64;
    for _ in 0..trials {
        worst = worst.max(merge_trial(&mut rng, dims)?);
    }
    let merge_ok = worst < 1e-9;
    w(out, format_args!("weighted merge vs pooled statistics, {trials} trials, D ≤ {dims}: max rel error {worst:.3e} {}", pass(merge_ok)))?;

    let mut rng = RngStream::new(seed, StreamKey::new("check-fedavg", 0, 0, 0));
    let mut dev = 0.0f64;
    for _ in 0..trials {
        dev = dev.max(fedavg_trial(&mut rng)?);
    }
    let fedavg_ok = dev < 1e-12;
    w(out, format_args!("equal-weight aggregation vs FedAvg mean, {trials} trials: max abs deviation {dev:.3e} {}", pass(fedavg_ok)))?;
    Ok(Status::from_bool(hand_ok && merge_ok && fedavg_ok))
}

fn pass(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn cmd_gradcheck(seed: u64, lambda: f64, out: &mut dyn Write) -> Result<Status> {
    let sections = run_gradcheck(seed, lambda)?;
    let mut ok = true;
    for s in &sections {
        w(out, format_args!("[{:?} / {:?}] {}", s.mode, s.loss, pass(s.passed())))?;
        for b in &s.blocks {
            if b.skipped {
                w(out, format_args!("  {:<12} skipped", b.block))?;
            } else {
                let bad = b.max_rel_error >= REL_TOLERANCE;
                let at = match (bad, b.worst) {
                    (true, Some(i)) => format!(" at coordinate {i}"),
                    _ => String::new(),
                };
                w(out, format_args!("  {:<12} {:>4} coords  max rel error {:.3e}{at}", b.block, b.checked, b.max_rel_error))?;
            }
        }
        ok &= s.passed();
    }
    Ok(Status::from_bool(ok))
}

fn mb(bytes: usize) -> f64 {
    bytes as f64 / 1e6
}

/// Analytic upload sizes, checked against a one-round dry run. Also prints
/// the full-stream figure: all task prompts, a head over every class, and
/// one task's prototypes.
pub fn cmd_commcost(config: &Path, out: &mut dyn Write) -> Result<Status> {
    let cfg = ExperimentConfig::load(config)?;
    let seed = cfg.seeds[0];
    let sc = cfg.scenario(seed)?;
    let setup = sc.setup(&cfg, seed, None);
    let mut fed = Federation::new(&setup)?;
    fed.start_task(0);
    let round = fed.run_round()?;
    let dim = sc.backbone.dim();
    let mean_only = cfg.federation.mean_only_wire;
    w(out, format_args!("{:<22} {:>10} {:>12} {:>12} {:>8} {:>12} {:>12}", "upload", "params", "param_B", "proto_B", "header_B", "analytic_B", "measured_B"))?;
    let mut ok = true;
    for u in &round.uploads {
        let shape = UpdateShape {
            layout: setup.layout.clone(),
            dim,
            tasks: 1,
            head_classes: u.head_classes,
            proto_classes: u.proto_classes,
            mean_only,
        };
        let c = shape.analytic()?;
        ok &= c.total() == u.bytes;
        w(
            out,
            format_args!(
                "{:<22} {:>10} {:>12} {:>12} {:>8} {:>12} {:>12} {}",
                format!("round 1, client {}", u.client),
                c.params,
                c.param_bytes,
                c.prototype_bytes,
                c.header_bytes,
                c.total(),
                u.bytes,
                pass(c.total() == u.bytes)
            ),
        )?;
    }
    let classes: usize = sc.stream.tasks.iter().map(|t| t.classes.len()).sum();
    let full = UpdateShape {
        layout: setup.layout.clone(),
        dim,
        tasks: cfg.federation.tasks,
        head_classes: classes,
        proto_classes: sc.stream.tasks[0].classes.len(),
        mean_only,
    };
    let c = full.analytic()?;
    w(
        out,
        format_args!(
            "full stream: {} tasks, {classes} head classes: {} params ({:.2}M) = {} B ({:.2} MB); {} prototypes × {dim}{} = {} B ({:.2} MB); header {} B",
            cfg.federation.tasks,
            c.params,
            c.params as f64 / 1e6,
            c.param_bytes,
            mb(c.param_bytes),
            full.proto_classes,
            if mean_only { " mean-only" } else { " mean+var" },
            c.prototype_bytes,
            mb(c.prototype_bytes),
            c.header_bytes
        ),
    )?;
    Ok(Status::from_bool(ok))
}

/// Re-derives Avg, PD, Imp and forgetting from a saved `matrix_seed*.json`.
pub fn cmd_report(matrix: &Path, reference_avg: Option<f64>, out: &mut dyn Write) -> Result<Status> {
    let text = std::fs::read_to_string(matrix).map_err(|e| Error::io(matrix, e))?;
    let saved: MetricsReport = serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", matrix.display())))?;
    let re = MetricsReport::from_matrix(&saved.method, saved.seed, saved.accuracy.clone(), reference_avg.or(saved.imp.map(|i| saved.avg - i)))?;
    let row: Vec<String> = re.accuracy.aggregate().iter().map(|a| format!("{a:.1}")).collect();
    w(out, format_args!("{} seed {}: [{}]", re.method, re.seed, row.join(", ")))?;
    w(out, format_args!("avg {:.2} pd {:.2}", re.avg, re.pd))?;
    if let Some(imp) = re.imp {
        w(out, format_args!("imp {imp:.2}"))?;
    }
    if let Some(f) = re.final_forgetting() {
        w(out, format_args!("forgetting {f:.2}"))?;
    }
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs());
    let consistent = close(re.avg, saved.avg)
        && close(re.pd, saved.pd)
        && re.forgetting.len() == saved.forgetting.len()
        && re.forgetting.iter().zip(&saved.forgetting).all(|(a, b)| close(*a, *b));
    w(out, format_args!("stored metrics {}", if consistent { "agree" } else { "DISAGREE" }))?;
    Ok(Status::from_bool(consistent))
}
