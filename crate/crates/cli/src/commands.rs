//! Subcommand bodies. Each returns the JSON printed on standard output and the exit code.

use std::path::Path;

use serde_json::{json, Value};

use zoomstab::analysis::{self, DiagnosticConfig, StabilityDiagnostics};
use zoomstab::closed_loop::{LoopMode, LoopPlan, RunReport};
use zoomstab::decomposition::{self, BlockDecomposition, EigenspaceCheck};
use zoomstab::linalg::{self, to_rows};
use zoomstab::system::{check_assumptions, LinearSystem};
use zoomstab::transforms;
use zoomstab::Complex64;

use crate::emit;
use crate::scenario::Scenario;
use crate::{CliError, Command, Format};

type Outcome = Result<(Value, i32), CliError>;

pub fn dispatch(cmd: Command, sc: &Scenario, out: Option<&Path>, format: Format) -> Outcome {
    match cmd {
        Command::Check => check(sc, out),
        Command::Decompose => decompose(sc, out),
        Command::Simulate => simulate(sc, out, format),
        Command::Rate => rate(sc, out),
        Command::Tailbound => tailbound(sc, out),
        Command::Diagnose => diagnose(sc, out),
    }
}

fn header(cmd: Command, sc: &Scenario) -> serde_json::Map<String, Value> {
    let mut m = serde_json::Map::new();
    m.insert("command".into(), json!(cmd.name()));
    m.insert("tool_version".into(), json!(env!("CARGO_PKG_VERSION")));
    m.insert("seed".into(), json!(sc.seed));
    m.insert("scenario".into(), serde_json::to_value(sc).expect("scenario serializes"));
    m
}

fn complex_list(eigs: &[Complex64]) -> Value {
    Value::Array(eigs.iter().map(|z| json!({ "re": z.re, "im": z.im, "modulus": z.norm() })).collect())
}

fn save(out: Option<&Path>, name: &str, doc: &Value) -> Result<(), CliError> {
    if let Some(dir) = out {
        emit::ensure_dir(dir)?;
        emit::write_summary(&dir.join(name), doc)?;
    }
    Ok(())
}

fn check(sc: &Scenario, out: Option<&Path>) -> Outcome {
    let sys = sc.system()?;
    let report = check_assumptions(&sys);
    let eigen = match decomposition::check_eigenspace_assumption(&sys) {
        Ok(EigenspaceCheck::Assigned(a)) => json!({
            "satisfied": true,
            "assignments": a.assignments.iter().map(|&(b, s)| json!({ "block": b, "sensor": s })).collect::<Vec<_>>(),
        }),
        Ok(EigenspaceCheck::Violated { unassigned }) => json!({ "satisfied": false, "unassigned_blocks": unassigned }),
        Err(e) => json!({ "satisfied": Value::Null, "error": e.to_string() }),
    };
    let mut doc = header(Command::Check, sc);
    let mut body = serde_json::to_value(&report).expect("report serializes");
    body["eigenspace_assumption"] = eigen;
    body["eigenvalues"] = complex_list(&linalg::eigenvalues(&sys.a));
    doc.insert("report".into(), body);
    let doc = Value::Object(doc);
    save(out, "summary.json", &doc)?;
    // the report is the product; failed conditions still set the structural exit code
    let code = match report.require_policy_conditions() {
        Ok(()) => 0,
        Err(e) => {
            let err = CliError::Core(e);
            eprintln!("{}", err.to_json());
            err.exit_code()
        }
    };
    Ok((doc, code))
}

fn decomposition_for(sc: &Scenario, sys: &LinearSystem) -> Result<Option<BlockDecomposition>, CliError> {
    if sys.num_sensors() < 2 && sc.order.is_none() {
        return Ok(None);
    }
    Ok(Some(match &sc.order {
        Some(o) => decomposition::build_block_decomposition(sys, o)?,
        None => match decomposition::search_decreasing_order(sys)? {
            Some(d) => d,
            None => decomposition::build_block_decomposition(sys, &(0..sys.num_sensors()).collect::<Vec<_>>())?,
        },
    }))
}

fn decomposition_json(d: &BlockDecomposition) -> Value {
    json!({
        "order": d.order,
        "blocks": d.blocks.iter().map(|b| json!({
            "sensor": b.sensor,
            "start": b.start,
            "dim": b.dim,
            "eigenvalues": complex_list(&b.eigenvalues),
        })).collect::<Vec<_>>(),
        "below_block_residual": d.below_block_residual(),
        "c_residual": d.c_residual(),
        "decreasing_order": decomposition::check_decreasing_order(d),
        "sufficient_rate": decomposition::sufficient_rate(d),
        "sufficient_rate_worst_case": decomposition::sufficient_rate_worst_case(d),
        "Q": to_rows(&d.q),
        "A_bar": to_rows(&d.a_bar),
    })
}

fn decompose(sc: &Scenario, out: Option<&Path>) -> Outcome {
    let sys = sc.system()?;
    let order: Vec<usize> = sc.order.clone().unwrap_or_else(|| (0..sys.num_sensors()).collect());
    let d = match &sc.order {
        Some(_) => decomposition::build_block_decomposition(&sys, &order)?,
        None => match decomposition::search_decreasing_order(&sys)? {
            Some(d) => d,
            None => decomposition::build_block_decomposition(&sys, &order)?,
        },
    };
    let mut body = decomposition_json(&d);
    body["min_rate"] = json!(analysis::min_rate(&linalg::eigenvalues(&sys.a)));
    body["eigenspace_assumption"] = match decomposition::check_eigenspace_assumption(&sys) {
        Ok(EigenspaceCheck::Assigned(a)) => json!({
            "satisfied": true,
            "blocks": a.jordan.blocks.iter().zip(&a.block_sensor).map(|(b, s)| json!({
                "sensor": s,
                "start": b.start,
                "dim": b.dim,
                "eigenvalue": { "re": b.eigenvalue.0, "im": b.eigenvalue.1 },
            })).collect::<Vec<_>>(),
        }),
        Ok(EigenspaceCheck::Violated { unassigned }) => json!({ "satisfied": false, "unassigned_blocks": unassigned }),
        Err(e) => json!({ "satisfied": Value::Null, "error": e.to_string() }),
    };
    let mut doc = header(Command::Decompose, sc);
    doc.insert("report".into(), body);
    let doc = Value::Object(doc);
    save(out, "summary.json", &doc)?;
    Ok((doc, 0))
}

/// Resolved loop parameters, recorded for reproducibility.
pub fn resolved(plan: &LoopPlan) -> Value {
    json!({
        "ks": plan.ks,
        "lam": plan.lam,
        "initial_bins": plan.initial_bins.delta,
        "floor": plan.floor,
        "floor_bar": plan.floor_bar,
        "F": plan.f_radius,
        "blocks": plan.quantizers,
        "channels": plan.sampled.channels.iter().map(|c| json!({
            "sensors": c.sensors,
            "coords": [c.coords.start, c.coords.end],
        })).collect::<Vec<_>>(),
        "sampled_eigenvalues": complex_list(&plan.sampled.eigenvalues()),
        "feedback_bits": plan.feedback_bits(),
        "bits_per_period": plan.bits_per_period(),
        "stages_per_period": 2 * plan.n(),
    })
}

fn feedback_count(sc: &Scenario, sys: &LinearSystem) -> usize {
    match sc.loop_config().map(|c| c.mode) {
        Ok(LoopMode::MultiSensor(_)) => sys.num_sensors(),
        _ => 0,
    }
}

fn trial_rows(reports: &[RunReport]) -> Value {
    Value::Array(
        reports
            .iter()
            .map(|r| {
                json!({
                    "trial": r.trial,
                    "steps": r.steps(),
                    "initially_zoomed": r.initially_zoomed(),
                    "aborted": r.aborted,
                    "stopping_times": r.stopping_times().times.len(),
                    "final_state": if r.x.is_empty() { Value::Null } else { json!(r.state(r.steps())) },
                    "final_bins": if r.delta.is_empty() { Value::Null } else { json!(r.bins(r.steps())) },
                })
            })
            .collect(),
    )
}

struct Batch {
    sys: LinearSystem,
    plan: LoopPlan,
    reports: Vec<RunReport>,
    diagnostics: StabilityDiagnostics,
    cfg: DiagnosticConfig,
}

fn run_batch(sc: &Scenario) -> Result<Batch, CliError> {
    let sys = sc.system()?;
    let plan = LoopPlan::new(&sys, &sc.loop_config()?)?;
    let reports = plan.run_trials(sc.seed, sc.trials);
    let cfg = sc.diagnostic_config();
    let mut diagnostics = analysis::stability_diagnostics(&reports, plan.f_radius, &cfg)?;
    if let (Some(s1), Some(s2)) = (sc.diagnose.s1, sc.diagnose.s2) {
        diagnostics.distribution = Some(analysis::invariant_distribution_diagnostic(&reports, s1, s2)?);
    }
    Ok(Batch { sys, plan, reports, diagnostics, cfg })
}

fn rates_for(sc: &Scenario, sys: &LinearSystem, plan: Option<&LoopPlan>, audit: Option<zoomstab::closed_loop::RateAudit>) -> Result<Value, CliError> {
    let d = match plan.and_then(|p| p.decomposition.clone()) {
        Some(d) => Some(d),
        None => decomposition_for(sc, sys)?,
    };
    let report = analysis::rate_report(
        &linalg::eigenvalues(&sys.a),
        sys.n(),
        sc.zoom.epsilon,
        feedback_count(sc, sys),
        &sc.rate.periods,
        d.as_ref(),
        audit,
    )?;
    Ok(serde_json::to_value(report).expect("rate report serializes"))
}

fn simulate(sc: &Scenario, out: Option<&Path>, format: Format) -> Outcome {
    let dir = out.ok_or_else(|| CliError::Validation("simulate needs --out <dir>".into()))?;
    let b = run_batch(sc)?;
    emit::ensure_dir(dir)?;
    match format {
        Format::Jsonl => emit::write_jsonl(&dir.join("steps.jsonl"), &b.reports)?,
        Format::Csv => emit::write_csv(&dir.join("steps.csv"), &b.reports, b.plan.n())?,
    }
    let mut doc = header(Command::Simulate, sc);
    doc.insert("resolved".into(), resolved(&b.plan));
    doc.insert("trials".into(), trial_rows(&b.reports));
    doc.insert("rates".into(), rates_for(sc, &b.sys, Some(&b.plan), b.reports.first().map(RunReport::audit))?);
    doc.insert("diagnostics".into(), serde_json::to_value(&b.diagnostics).expect("diagnostics serialize"));
    let doc = Value::Object(doc);
    emit::write_summary(&dir.join("summary.json"), &doc)?;
    let aborted = b.reports.iter().filter(|r| r.aborted.is_some()).count();
    let brief = json!({
        "out": dir.display().to_string(),
        "trials": b.reports.len(),
        "aborted": aborted,
        "moment_verdict": b.diagnostics.moments.verdict,
    });
    if aborted > 0 {
        let err = CliError::Core(zoomstab::Error::Numeric(format!("{aborted} trial(s) aborted; see summary.json")));
        eprintln!("{}", err.to_json());
        return Ok((brief, err.exit_code()));
    }
    Ok((brief, 0))
}

fn rate(sc: &Scenario, out: Option<&Path>) -> Outcome {
    let sys = sc.system()?;
    let mut doc = header(Command::Rate, sc);
    doc.insert("rates".into(), rates_for(sc, &sys, None, None)?);
    let doc = Value::Object(doc);
    save(out, "summary.json", &doc)?;
    Ok((doc, 0))
}

fn tailbound(sc: &Scenario, out: Option<&Path>) -> Outcome {
    let spec = sc.tailbound.clone().unwrap_or(crate::scenario::TailSpec { sigma: None, delta: None, samples: 100_000 });
    let sigma = match &spec.sigma {
        Some(s) => linalg::to_matrix(s).map_err(|e| CliError::Validation(format!("tailbound.sigma: {e}")))?,
        None => {
            // default: covariance of the sampled process noise
            let sys = sc.system()?;
            let cfg = sc.loop_config()?;
            let stack: Vec<usize> = (0..sys.num_sensors()).collect();
            transforms::build_sampled_system(&sys, &stack, cfg.estimator, cfg.transform.as_ref())?.sigma_w_bar
        }
    };
    let delta = match &spec.delta {
        Some(d) => d.clone(),
        None => vec![2.0; sigma.nrows()],
    };
    let log_bound = analysis::gaussian_tail_log_bound(&sigma, &delta)?;
    let mc = analysis::gaussian_tail_mc(&sigma, &delta, spec.samples, sc.seed)?;
    let mut doc = header(Command::Tailbound, sc);
    doc.insert(
        "report".into(),
        json!({
            "sigma": to_rows(&sigma),
            "delta": delta,
            "bound": log_bound.exp(),
            "log_bound": log_bound,
            "monte_carlo": mc,
            "dominates": log_bound.exp() >= mc.p,
        }),
    );
    let doc = Value::Object(doc);
    save(out, "summary.json", &doc)?;
    Ok((doc, 0))
}

fn diagnose(sc: &Scenario, out: Option<&Path>) -> Outcome {
    let b = run_batch(sc)?;
    let d = &b.diagnostics;
    let mut doc = header(Command::Diagnose, sc);
    doc.insert("resolved".into(), resolved(&b.plan));
    doc.insert("trials".into(), trial_rows(&b.reports));
    doc.insert("rates".into(), rates_for(sc, &b.sys, Some(&b.plan), b.reports.first().map(RunReport::audit))?);
    doc.insert("diagnostics".into(), serde_json::to_value(d).expect("diagnostics serialize"));
    doc.insert("settings".into(), serde_json::to_value(&b.cfg).expect("settings serialize"));
    let doc = Value::Object(doc);
    if let Some(dir) = out {
        emit::ensure_dir(dir)?;
        emit::write_summary(&dir.join("summary.json"), &doc)?;
        let m = &d.moments.series;
        emit::write_table(
            &dir.join("moments.csv"),
            &["step", "mean", "se"],
            m.mean.iter().zip(&m.se).enumerate().map(|(s, (a, e))| vec![s.to_string(), a.to_string(), e.to_string()]),
        )?;
        emit::write_table(
            &dir.join("survival.csv"),
            &["step", "survival", "se", "at_risk"],
            d.tail.survival.iter().map(|p| vec![p.k.to_string(), p.survival.to_string(), p.se.to_string(), p.at_risk.to_string()]),
        )?;
    }
    let verdicts = json!({
        "moments": d.moments.verdict,
        "per_coordinate": d.moments.per_coordinate.iter().map(|c| c.verdict).collect::<Vec<_>>(),
        "tail": { "slope": d.tail.slope, "ci": d.tail.ci, "negative": d.tail.negative, "conclusive": d.tail.conclusive },
        "drift": { "gamma": d.drift.gamma, "b_hat": d.drift.b_hat, "verdict": d.drift.verdict, "positive_from": d.drift.positive_from },
        "distribution": d.distribution.as_ref().map(|x| x.stationary),
    });
    Ok((verdicts, 0))
}

