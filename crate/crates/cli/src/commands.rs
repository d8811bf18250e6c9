use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use simam_core::data::{generate_synthetic, load_dataset, LoadedData, SynthSpec, MANIFEST_FILE, SIDECAR_FILE};
use simam_core::network::{build, count_cost_config, ArchitectureConfig, CostReport, Network};
use simam_core::train::{self, evaluate, BEST_DIR, FINAL_DIR, LAST_FINITE_DIR, METRICS_FILE};
use simam_core::verify::{report_csv, run_all};
use simam_core::zoo::cost_table;

use crate::runfile::{RunFile, DEFAULT_PRESET, SNAPSHOT_FILE};
use crate::{AblateArgs, CliError, CostArgs, EvalArgs, Format, Global, SplitArg, SynthArgs, EXIT_OK, EXIT_VERIFY};

pub const DEFAULT_LAMBDAS: [f64; 5] = [7e-1, 7e-2, 7e-3, 7e-4, 7e-5];
pub const ABLATION_FILE: &str = "ablation.csv";
pub const RUNS_DIR: &str = "runs";
pub const VERIFY_FILE: &str = "verify.csv";
pub const ATTENTION_COST_FILE: &str = "attention_cost.csv";
pub const MODEL_COST_FILE: &str = "model_cost.csv";
const TRAIN_ARTIFACTS: [&str; 5] = [METRICS_FILE, BEST_DIR, FINAL_DIR, LAST_FINITE_DIR, SNAPSHOT_FILE];

type CmdResult = Result<u8, CliError>;

fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path, CliError> {
    value
        .as_deref()
        .ok_or_else(|| CliError::usage(format!("this command needs {flag}")))
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

/// Makes `dir` ready for a command that owns `artifacts` inside it.
///
/// A missing or empty directory is always fine. A non-empty one is refused
/// unless `overwrite` is set, in which case only the named artifacts are
/// removed so reruns start from the same state.
fn prepare_out(dir: &Path, overwrite: bool, artifacts: &[&str]) -> Result<(), CliError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::usage(format!("{} exists and is not a directory", dir.display())));
        }
        let non_empty = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
        if non_empty && !overwrite {
            return Err(CliError::usage(format!(
                "{} is not empty; pass --overwrite to replace its contents",
                dir.display()
            )));
        }
        for name in artifacts {
            let p = dir.join(name);
            let removed = if p.is_dir() {
                fs::remove_dir_all(&p)
            } else if p.exists() {
                fs::remove_file(&p)
            } else {
                Ok(())
            };
            removed.map_err(|e| io_err(&p, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Loads a dataset; a root without a manifest is a usage error, anything
/// wrong inside the dataset is a data error.
fn load_data(root: &Path) -> Result<LoadedData, CliError> {
    if !root.join(MANIFEST_FILE).is_file() {
        return Err(CliError::usage(format!("no {MANIFEST_FILE} under {}", root.display())));
    }
    Ok(load_dataset(root)?)
}

fn resolved_run(g: &Global, preset: &str) -> Result<RunFile, CliError> {
    let mut run = RunFile::resolve(g.config.as_deref(), preset)?;
    run.apply_overrides(g.seed, g.lambda)?;
    Ok(run)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn train_into(run: &RunFile, data: &LoadedData, out: &Path) -> Result<train::TrainReport, CliError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_file(&out.join(SNAPSHOT_FILE), &run.to_toml()?)?;
    let mut net = build(&run.architecture, run.train.seed)?;
    Ok(train::train(&mut net, data, &run.train, Some(out))?)
}

pub fn train(g: &Global) -> CmdResult {
    let run = resolved_run(g, DEFAULT_PRESET)?;
    let data_root = require(&g.data, "--data")?;
    let out = require(&g.out, "--out")?;
    let data = load_data(data_root)?;
    prepare_out(out, g.overwrite, &TRAIN_ARTIFACTS)?;
    let report = train_into(&run, &data, out)?;
    let last = report.final_record();
    println!(
        "trained {} for {} epochs ({} steps): train_acc {:.4}, test_acc {:.4}; best test_acc {:.4} at epoch {}{}",
        run.architecture.name,
        last.epoch,
        last.step,
        last.train_acc,
        last.test_acc,
        report.best_test_acc,
        report.best_epoch,
        if report.stopped_early { " (target reached)" } else { "" }
    );
    println!("artifacts in {}", out.display());
    Ok(EXIT_OK)
}

pub fn eval(g: &Global, a: &EvalArgs) -> CmdResult {
    let data_root = require(&g.data, "--data")?;
    let mut net = Network::load_checkpoint(&a.checkpoint)?;
    if let Some(l) = g.lambda {
        net.set_lambda(l)?;
    }
    let snapshot = a.checkpoint.parent().map(|p| p.join(SNAPSHOT_FILE)).filter(|p| p.is_file());
    let trained = snapshot.map(|p| RunFile::load(&p)).transpose()?;
    let image_size = a
        .image_size
        .or(trained.as_ref().map(|r| r.train.image_size))
        .unwrap_or(net.config().input_size);
    let batch = trained.as_ref().map_or(32, |r| r.train.batch_size);
    let data = load_data(data_root)?;
    let split = match a.split {
        SplitArg::Train => &data.train,
        SplitArg::Test => &data.test,
    };
    if split.is_empty() {
        return Err(CliError::data("the requested split is empty"));
    }
    let r = evaluate(&mut net, split, &data.norm, image_size, batch)?;
    println!("accuracy {}", r.accuracy);
    println!("mean_loss {}", r.mean_loss);
    Ok(EXIT_OK)
}

#[derive(Debug)]
struct AblationRow {
    lambda: f64,
    cost: CostReport,
    outcome: Result<f64, CliError>,
}

fn best_row(rows: &[AblationRow]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Ok(acc) = r.outcome {
            let better = match best {
                None => true,
                Some((j, b)) => acc > b || (acc == b && r.lambda < rows[j].lambda),
            };
            if better {
                best = Some((i, acc));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn ablation_csv(rows: &[AblationRow]) -> String {
    let best = best_row(rows);
    let mut s = String::from("lambda,accuracy,params_M,flops_G,best,status\n");
    for (i, r) in rows.iter().enumerate() {
        let (acc, status) = match &r.outcome {
            Ok(a) => (a.to_string(), "ok".to_string()),
            Err(e) => (String::new(), format!("\"failed: {}\"", e.message.replace('"', "'"))),
        };
        let _ = writeln!(
            s,
            "{:e},{acc},{},{},{},{status}",
            r.lambda,
            r.cost.params_m(),
            r.cost.macs_g(),
            if best == Some(i) { "*" } else { "" },
        );
    }
    s
}

fn ablation_run(base: &RunFile, lambda: f64, data: &LoadedData, out: &Path) -> Result<f64, CliError> {
    let mut run = base.clone();
    run.apply_overrides(None, Some(lambda))?;
    let dir = out.join(RUNS_DIR).join(format!("lambda_{lambda:e}"));
    Ok(train_into(&run, data, &dir)?.best_test_acc)
}

pub fn ablate(g: &Global, a: &AblateArgs) -> CmdResult {
    if g.lambda.is_some() {
        return Err(CliError::usage("ablate takes its λ values from --lambdas, not --lambda"));
    }
    if a.lambdas.is_empty() || a.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(CliError::usage("--lambdas needs at least one value, all finite and > 0"));
    }
    let run = resolved_run(g, DEFAULT_PRESET)?;
    let data_root = require(&g.data, "--data")?;
    let out = require(&g.out, "--out")?;
    let side = run.train.image_size;
    let costs = a
        .lambdas
        .iter()
        .map(|&l| Ok(count_cost_config(&run.architecture.with_lambda(l)?, side, side)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    let data = load_data(data_root)?;
    prepare_out(out, g.overwrite, &[ABLATION_FILE, RUNS_DIR])?;

    let outcomes: Vec<Result<f64, CliError>> = if a.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = a
                .lambdas
                .iter()
                .map(|&l| {
                    let (run, data) = (&run, &data);
                    s.spawn(move || ablation_run(run, l, data, out))
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(CliError::data("training thread panicked"))))
                .collect()
        })
    } else {
        a.lambdas.iter().map(|&l| ablation_run(&run, l, &data, out)).collect()
    };
    let rows: Vec<AblationRow> = a
        .lambdas
        .iter()
        .zip(costs)
        .zip(outcomes)
        .map(|((&lambda, cost), outcome)| AblationRow { lambda, cost, outcome })
        .collect();

    let csv = ablation_csv(&rows);
    write_file(&out.join(ABLATION_FILE), &csv)?;
    let best = best_row(&rows);
    println!("{:>8}  {:>9}  {:>10}  {:>9}", "lambda", "accuracy", "params(M)", "FLOPs(G)");
    for (i, r) in rows.iter().enumerate() {
        let acc = match &r.outcome {
            Ok(a) => format!("{:.4}", a),
            Err(e) => format!("failed: {}", e.message),
        };
        println!(
            "{:>8.0e}  {:>9}  {:>10.3}  {:>9.3}{}",
            r.lambda,
            acc,
            r.cost.params_m(),
            r.cost.macs_g(),
            if best == Some(i) { "  <- best" } else { "" }
        );
    }
    match rows.iter().find_map(|r| r.outcome.as_ref().err()) {
        Some(e) if best.is_none() => Err(CliError {
            code: e.code,
            message: "every ablation run failed".into(),
        }),
        _ => Ok(EXIT_OK),
    }
}

fn csv_row(fields: &[String]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(fields).expect("writing to memory");
    String::from_utf8(w.into_inner().expect("writing to memory")).expect("csv output is UTF-8")
}

struct CostReportText {
    attention_csv: String,
    model_csv: String,
    text: String,
}

fn cost_report(arch: &ArchitectureConfig, input: usize, a: &CostArgs) -> Result<CostReportText, CliError> {
    let table = cost_table(a.channels, a.reduction, a.kernel).map_err(|e| CliError::usage(e.to_string()))?;
    let model = count_cost_config(arch, input, input)?;
    let bare = count_cost_config(&arch.without_simam(), input, input)?;

    let mut attention_csv = csv_row(&["module", "operators", "parameters_formula", "parameters"].map(String::from));
    let mut text = format!(
        "Attention modules (C={}, r={}, K={})\n{:<8} {:<40} {:<22} {:>10}\n",
        a.channels, a.reduction, a.kernel, "Module", "Operators", "Parameters", "Count"
    );
    for row in &table {
        attention_csv += &csv_row(&[
            row.kind.name().to_string(),
            row.operators.to_string(),
            row.formula.to_string(),
            row.params.to_string(),
        ]);
        let _ = writeln!(
            text,
            "{:<8} {:<40} {:<22} {:>10}",
            row.kind.name(),
            row.operators,
            row.formula,
            row.params
        );
    }

    let mut model_csv = csv_row(
        &[
            "model",
            "input",
            "parameters",
            "parameters_M",
            "macs",
            "flops_G",
            "flops_2x_G",
            "attention_insertions",
            "parameters_without_attention",
        ]
        .map(String::from),
    );
    model_csv += &csv_row(&[
        arch.name.clone(),
        format!("{input}x{input}"),
        model.params.to_string(),
        model.params_m().to_string(),
        model.ops.macs.to_string(),
        model.macs_g().to_string(),
        model.flops_2x_g().to_string(),
        arch.simam.len().to_string(),
        bare.params.to_string(),
    ]);
    let _ = write!(
        text,
        "\nModel {} at {input}x{input}\n  Parameters(M)  {:.3}  ({} total, {} without attention)\n  FLOPs(G)       {:.3}  (multiply-accumulates; {:.3} counting 2 per MAC)\n  Attention insertions  {}\n",
        arch.name,
        model.params_m(),
        model.params,
        bare.params,
        model.macs_g(),
        model.flops_2x_g(),
        arch.simam.len(),
    );
    Ok(CostReportText {
        attention_csv,
        model_csv,
        text,
    })
}

pub fn cost(g: &Global, a: &CostArgs) -> CmdResult {
    let run = resolved_run(g, &a.preset)?;
    let input = a.input.unwrap_or(run.architecture.input_size);
    let report = cost_report(&run.architecture, input, a)?;
    if let Some(out) = &g.out {
        prepare_out(out, g.overwrite, &[ATTENTION_COST_FILE, MODEL_COST_FILE])?;
        write_file(&out.join(ATTENTION_COST_FILE), &report.attention_csv)?;
        write_file(&out.join(MODEL_COST_FILE), &report.model_csv)?;
    }
    match a.format {
        Format::Text => print!("{}", report.text),
        Format::Csv => print!("{}\n{}", report.attention_csv, report.model_csv),
    }
    Ok(EXIT_OK)
}

pub fn verify(g: &Global) -> CmdResult {
    if let Some(out) = &g.out {
        prepare_out(out, g.overwrite, &[VERIFY_FILE])?;
    }
    let outcomes = run_all(g.seed.unwrap_or(0))?;
    for o in &outcomes {
        println!(
            "{} {:<26} value {:<12.4e} threshold {:<10.3e} {}",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.value,
            o.threshold,
            o.detail
        );
    }
    if let Some(out) = &g.out {
        write_file(&out.join(VERIFY_FILE), &report_csv(&outcomes))?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} of {} checks passed", outcomes.len() - failed, outcomes.len());
    Ok(if failed == 0 { EXIT_OK } else { EXIT_VERIFY })
}

pub fn gen_synth(g: &Global, a: &SynthArgs) -> CmdResult {
    let out = require(&g.out, "--out")?;
    if a.train_per_class == 0 || a.size == 0 {
        return Err(CliError::usage("--train-per-class and --size must be ≥ 1"));
    }
    prepare_out(out, g.overwrite, &["images", MANIFEST_FILE, SIDECAR_FILE])?;
    let spec = SynthSpec {
        train_per_class: a.train_per_class,
        test_per_class: a.test_per_class,
        size: a.size,
        seed: g.seed.unwrap_or(0),
    };
    generate_synthetic(out, &spec)?;
    println!(
        "wrote {} train and {} test images to {}",
        spec.train_per_class * simam_core::data::SYNTH_CLASSES,
        spec.test_per_class * simam_core::data::SYNTH_CLASSES,
        out.display()
    );
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(lambda: f64, outcome: Result<f64, CliError>) -> AblationRow {
        AblationRow {
            lambda,
            cost: CostReport::default(),
            outcome,
        }
    }

    #[test]
    fn best_row_breaks_ties_toward_lower_lambda() {
        let rows = vec![
            row(7e-1, Ok(0.5)),
            row(7e-2, Ok(0.8)),
            row(7e-4, Ok(0.8)),
            row(7e-3, Err(CliError::data("x"))),
        ];
        assert_eq!(best_row(&rows), Some(2));
        assert_eq!(best_row(&rows[3..]), None);
    }

    #[test]
    fn failed_rows_stay_in_the_table() {
        let rows = vec![row(7e-1, Ok(0.25)), row(7e-2, Err(CliError::data("boom \"x\"")))];
        let csv = ablation_csv(&rows);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[1], "7e-1,0.25,0,0,*,ok");
        assert!(lines[2].starts_with("7e-2,,0,0,,\"failed: boom 'x'\""));
    }

    #[test]
    fn prepare_out_refuses_to_clobber() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("o");
        prepare_out(&out, false, &["a"]).unwrap();
        fs::write(out.join("a"), "1").unwrap();
        fs::write(out.join("keep"), "1").unwrap();
        assert_eq!(prepare_out(&out, false, &["a"]).unwrap_err().code, crate::EXIT_USAGE);
        prepare_out(&out, true, &["a"]).unwrap();
        assert!(!out.join("a").exists());
        assert!(out.join("keep").exists());
    }
}
