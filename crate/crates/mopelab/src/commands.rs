//! Implementations behind the CLI subcommands.
//!
//! Every command is a plain function taking parsed configuration and an
//! output directory, so the whole surface is testable without spawning a
//! process. Commands are idempotent: identical config + seed produces
//! byte-identical metrics.csv and report JSON (sweep runtime columns are
//! wall-clock and exempt).

use crate::checkpoint;
use crate::config::{RunConfig, SweepSpec};
use crate::data::{generate, save_jsonl, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::gradcheck::{full_fusion_grad_check, GradCheckConfig, GradCheckReport};
use crate::lab::{theorem_demo, DiscrepancyReport, FitOptions};
use crate::report::{routing_report, write_top_instances_csv, RoutingReport};
use crate::trainer::{evaluate, train, write_metrics_csv, MetricsRow, TrainOutcome};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create {}: {e}", dir.display())))
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Contract(format!("report serialization failed: {e}")))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

/// Generate the synthetic dataset: three JSONL splits plus the sidecar
/// config that produced them.
pub fn cmd_gen_data(cfg: &SyntheticConfig, out: &Path) -> Result<Dataset> {
    cfg.validate()?;
    ensure_dir(out)?;
    let ds = generate(cfg)?;
    save_jsonl(&ds.train, &out.join("train.jsonl"))?;
    save_jsonl(&ds.val, &out.join("val.jsonl"))?;
    save_jsonl(&ds.test, &out.join("test.jsonl"))?;
    let text = serde_json::to_string_pretty(cfg)
        .map_err(|e| Error::Contract(format!("config serialization failed: {e}")))?;
    std::fs::write(out.join("data_config.json"), text + "\n")
        .map_err(|e| Error::Config(format!("cannot write sidecar config: {e}")))?;
    Ok(ds)
}

pub struct TrainArtifacts {
    pub outcome: TrainOutcome,
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub routing_path: Option<PathBuf>,
    pub test_eval: crate::trainer::EvalResult,
}

/// Train a fusion model from scratch on freshly generated data; write
/// metrics.csv, checkpoint.bin, config.json, and (for routed models)
/// routing.json under `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainArtifacts> {
    cfg.validate()?;
    ensure_dir(out)?;
    let ds = generate(&cfg.data)?;
    let mut model = FusionModel::new(&cfg.fusion_config(), cfg.data.d_y, cfg.train.seed)?;
    let outcome = train(&mut model, &ds.train, &ds.val, &cfg.train)?;
    if outcome.diverged {
        return Err(Error::Numeric(format!(
            "training diverged after epoch {}",
            outcome.completed_epochs
        )));
    }
    let metrics_path = out.join("metrics.csv");
    write_metrics_csv(&outcome.metrics, &metrics_path)?;
    let checkpoint_path = out.join("checkpoint.bin");
    checkpoint::save(&model, &checkpoint_path)?;
    cfg.save(&out.join("config.json"))?;
    let routing_path = if cfg.prompts.dynamic_prompt && !cfg.single_dynamic {
        let report = routing_report(&mut model, &ds.val, cfg.train.batch_size, 8)?;
        let path = out.join("routing.json");
        write_json(&report, &path)?;
        Some(path)
    } else {
        None
    };
    let test_eval = evaluate(&mut model, &ds.test, cfg.train.batch_size, cfg.train.imp_weight)?;
    Ok(TrainArtifacts {
        outcome,
        metrics_path,
        checkpoint_path,
        routing_path,
        test_eval,
    })
}

/// Load a trained checkpoint from `out` and re-evaluate the validation
/// split; the resulting row must reproduce the final training-eval row.
pub fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<MetricsRow> {
    cfg.validate()?;
    let checkpoint_path = out.join("checkpoint.bin");
    let mut model = checkpoint::load(&checkpoint_path)?;
    let ds = generate(&cfg.data)?;
    let res = evaluate(&mut model, &ds.val, cfg.train.batch_size, cfg.train.imp_weight)?;
    let row = MetricsRow {
        epoch: cfg.train.epochs,
        split: "val".into(),
        loss: res.loss,
        task_loss: res.task_loss,
        imp_loss: res.imp_loss,
        accuracy: res.accuracy,
        f1_macro: res.f1_macro,
    };
    write_metrics_csv(std::slice::from_ref(&row), &out.join("eval.csv"))?;
    Ok(row)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: usize,
    pub matched_prompts: usize,
    pub seed: u64,
    pub status: String,
    pub test_accuracy: f64,
    pub f1_macro: f64,
    pub runtime_s: f64,
}

/// Run every (value, seed) point of a sweep, each in its own output
/// subdirectory, and collect sweep.csv. A failed run becomes a row with a
/// nonzero status instead of aborting the sweep.
pub fn cmd_sweep(spec: &SweepSpec, out: &Path) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    ensure_dir(out)?;
    let axis = match spec.axis {
        crate::config::SweepAxis::Experts => "experts",
        crate::config::SweepAxis::Length => "length",
        crate::config::SweepAxis::Shots => "shots",
    };
    let mut rows = Vec::new();
    for run in spec.runs() {
        let sub = out.join(format!("{axis}{}_seed{}", run.axis_value, run.seed));
        let started = Instant::now();
        let (status, acc, f1) = match cmd_train(&run.config, &sub) {
            Ok(art) => ("ok".to_string(), art.test_eval.accuracy, art.test_eval.f1_macro),
            Err(e) => (format!("error: {e}").replace(',', ";"), f64::NAN, f64::NAN),
        };
        rows.push(SweepRow {
            axis: axis.to_string(),
            value: run.axis_value,
            matched_prompts: run.matched_prompts,
            seed: run.seed,
            status,
            test_accuracy: acc,
            f1_macro: f1,
            runtime_s: started.elapsed().as_secs_f64(),
        });
    }
    write_sweep_csv(&rows, &out.join("sweep.csv"))?;
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "axis,value,matched_prompts,seed,status,test_accuracy,f1_macro,runtime_s"
    )?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{:.12e},{:.12e},{:.3}",
            r.axis, r.value, r.matched_prompts, r.seed, r.status, r.test_accuracy, r.f1_macro,
            r.runtime_s
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Routing report for a trained checkpoint over a regenerated split.
pub fn cmd_routing_report(
    cfg: &RunConfig,
    out: &Path,
    split: &str,
    top_n: usize,
) -> Result<RoutingReport> {
    cfg.validate()?;
    let mut model = checkpoint::load(&out.join("checkpoint.bin"))?;
    let ds = generate(&cfg.data)?;
    let split = match split {
        "train" => &ds.train,
        "val" => &ds.val,
        "test" => &ds.test,
        other => return Err(Error::Config(format!("unknown split '{other}'"))),
    };
    let report = routing_report(&mut model, split, cfg.train.batch_size, top_n)?;
    write_json(&report, &out.join("routing_report.json"))?;
    write_top_instances_csv(&report, &out.join("top_instances.csv"))?;
    Ok(report)
}

/// Which theorem demos to run and with what optimization budget.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSpec {
    pub trials: usize,
    pub seed: u64,
    pub fit: FitOptions,
}

impl Default for DemoSpec {
    fn default() -> Self {
        DemoSpec {
            trials: 100,
            seed: 0,
            fit: FitOptions::default(),
        }
    }
}

impl DemoSpec {
    pub fn load(path: &Path) -> Result<DemoSpec> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| {
            Error::Config(format!(
                "{}: line {}, column {}: {e}",
                path.display(),
                e.line(),
                e.column()
            ))
        })
    }
}

/// Overall pass/fail verdict of a finished theorem-demo report.
pub fn demo_verdict(report: &DiscrepancyReport) -> bool {
    let t1 = &report.theorem1;
    let t2 = &report.theorem2;
    let t1_rate_ok = t1.valid_trials > 0 && 20 * t1.passes >= 19 * t1.valid_trials;
    let t1_control_ok = t1.control_gap.abs() <= 2.0 * t1.tol;
    let t2_rate_ok = t2.valid_trials > 0 && 20 * t2.passes >= 19 * t2.valid_trials;
    let t2_vertex_ok = t2.vertex_gap.abs() <= t2.tol;
    t1_rate_ok && t1_control_ok && t2_rate_ok && t2_vertex_ok
}

/// Run both theorem demos, write the JSON report, and print one pass-rate
/// line per theorem. Returns (report, verdict).
pub fn cmd_theorem_demo(spec: &DemoSpec, out: &Path) -> Result<(DiscrepancyReport, bool)> {
    ensure_dir(out)?;
    let report = theorem_demo(spec.seed, spec.trials, &spec.fit)?;
    write_json(&report, &out.join("theorem_report.json"))?;
    let t1 = &report.theorem1;
    println!(
        "theorem 1: pass-rate {}/{} valid trials, control gap {:.3e}",
        t1.passes, t1.valid_trials, t1.control_gap
    );
    let t2 = &report.theorem2;
    println!(
        "theorem 2: pass-rate {}/{} valid trials, vertex gap {:.3e}, degenerate gap {:.3e}",
        t2.passes, t2.valid_trials, t2.vertex_gap, t2.degenerate_gap
    );
    let verdict = demo_verdict(&report);
    Ok((report, verdict))
}

/// Gradient check over the full fusion loss; writes the JSON report.
pub fn cmd_grad_check(cfg: &GradCheckConfig, out: &Path) -> Result<GradCheckReport> {
    ensure_dir(out)?;
    let report = full_fusion_grad_check(cfg)?;
    write_json(&report, &out.join("grad_check.json"))?;
    println!(
        "grad check: max relative error {:.3e} (tolerance {:.1e}), gated layers zero: {}",
        report.max_rel_err, report.tolerance, report.gated_layers_zero
    );
    Ok(report)
}
