//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Runs as a plain binary (`harness = false`) so the report is always shown.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use simam_core::data::{load_dataset, make_batch};
use simam_core::network::{build, ArchitectureConfig};
use simam_core::train::{train_step, Optimizer, OptimizerConfig, METRICS_FILE};
use simam_core::verify::{self, CheckOutcome};

const SEED: u64 = 0;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn simam(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_simam"))
        .args(args)
        .output()
        .map_err(|e| format!("could not launch simam: {e}"))?;
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    if out.status.success() {
        Ok(stdout)
    } else {
        Err(format!(
            "simam {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

fn path(p: &Path) -> &str {
    p.to_str().expect("temporary paths are UTF-8")
}

fn from_check(result: simam_core::Result<CheckOutcome>) -> Outcome {
    let o = result.map_err(|e| e.to_string())?;
    if o.passed {
        Ok(o.detail)
    } else {
        Err(o.detail)
    }
}

fn closed_form() -> Outcome {
    let start = Instant::now();
    let detail = from_check(verify::check_closed_form(500, 2_000, SEED))?;
    let took = start.elapsed();
    if took > Duration::from_secs(60) {
        return Err(format!("took {took:.1?}, limit 60 s; {detail}"));
    }
    Ok(format!("{detail}; {took:.1?}"))
}

fn full_scale_accounting() -> Outcome {
    let detail = from_check(verify::check_full_scale_accounting())?;
    let csv = simam(&["cost", "--preset", "b4", "--format", "csv"])?;
    let row = csv
        .lines()
        .find(|l| l.starts_with("efficientnet-b4,"))
        .ok_or("cost output has no model row")?;
    let params_m: f64 = row.split(',').nth(3).and_then(|v| v.parse().ok()).ok_or("unparsable params")?;
    if (params_m / 17.9 - 1.0).abs() > 0.03 {
        return Err(format!("cost command reports {params_m} M parameters"));
    }
    Ok(format!("{detail}; cost command reports {params_m:.3} M"))
}

fn single_batch_overfit(data_root: &Path) -> Result<f64, String> {
    let data = load_dataset(data_root).map_err(|e| e.to_string())?;
    let cfg = ArchitectureConfig::preset("desk").map_err(|e| e.to_string())?;
    let mut net = build(&cfg, SEED).map_err(|e| e.to_string())?;
    let indices: Vec<usize> = (0..8).map(|i| i * data.train.len() / 8).collect();
    let (x, labels) = make_batch(&data.train, &indices, cfg.input_size, None, &data.norm).map_err(|e| e.to_string())?;
    let mut opt = Optimizer::new(OptimizerConfig::adam()).map_err(|e| e.to_string())?;
    let mut loss = f64::INFINITY;
    for _ in 0..200 {
        loss = train_step(&mut net, &mut opt, &x, &labels, 1e-3).map_err(|e| e.to_string())?.0;
    }
    Ok(loss)
}

fn metrics_rows(dir: &Path) -> Result<Vec<Vec<f64>>, String> {
    let text = fs::read_to_string(dir.join(METRICS_FILE)).map_err(|e| e.to_string())?;
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse::<f64>().map_err(|e| e.to_string())).collect())
        .collect()
}

fn desk_smoke(work: &Path) -> Outcome {
    let data = work.join("synth");
    simam(&["gen-synth", "--out", path(&data), "--seed", "0"])?;
    let config = work.join("desk.toml");
    fs::write(&config, "preset = \"desk\"\n[train]\nepochs = 30\ntarget_train_acc = 0.9\n").map_err(|e| e.to_string())?;
    let run = work.join("desk-run");

    let start = Instant::now();
    simam(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&run), "--seed", "0"])?;
    let took = start.elapsed();
    let rows = metrics_rows(&run)?;
    let reached = rows.iter().position(|r| r[4] >= 0.9);
    let Some(epoch) = reached.map(|i| i + 1) else {
        return Err(format!("train accuracy never reached 0.9 in {} epochs", rows.len()));
    };
    if epoch > 30 || took > Duration::from_secs(15 * 60) {
        return Err(format!("0.9 reached at epoch {epoch} after {took:.0?}"));
    }

    let best_logged = rows.iter().map(|r| r[5]).fold(f64::NEG_INFINITY, f64::max);
    let eval = simam(&["eval", "--checkpoint", path(&run.join("best")), "--data", path(&data)])?;
    let evaluated: f64 = eval
        .lines()
        .find_map(|l| l.strip_prefix("accuracy "))
        .and_then(|v| v.parse().ok())
        .ok_or("eval printed no accuracy")?;
    if (evaluated - best_logged).abs() > 1e-6 {
        return Err(format!("eval of best checkpoint gives {evaluated}, log says {best_logged}"));
    }

    let loss = single_batch_overfit(&data)?;
    if loss >= 0.05 {
        return Err(format!("single-batch loss after 200 steps is {loss}"));
    }
    Ok(format!(
        "train acc {:.3} at epoch {epoch} in {took:.0?}; best test acc {best_logged:.3} reproduced by eval; single-batch loss {loss:.2e}",
        rows[epoch - 1][4]
    ))
}

fn small_dataset(work: &Path) -> Result<std::path::PathBuf, String> {
    let data = work.join("tiny");
    if !data.exists() {
        simam(&[
            "gen-synth",
            "--out",
            path(&data),
            "--train-per-class",
            "3",
            "--test-per-class",
            "2",
            "--seed",
            "11",
        ])?;
    }
    Ok(data)
}

fn ablation(work: &Path) -> Outcome {
    let data = small_dataset(work)?;
    let config = work.join("ablate.toml");
    fs::write(&config, "preset = \"desk\"\n[train]\nepochs = 1\nbatch_size = 10\n").map_err(|e| e.to_string())?;
    let out = work.join("ablation");
    simam(&["ablate", "--config", path(&config), "--data", path(&data), "--out", path(&out)])?;
    let text = fs::read_to_string(out.join("ablation.csv")).map_err(|e| e.to_string())?;
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    if rows.len() != 5 {
        return Err(format!("{} rows", rows.len()));
    }
    let lambdas: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap_or(f64::NAN)).collect();
    if lambdas != [7e-1, 7e-2, 7e-3, 7e-4, 7e-5] {
        return Err(format!("unexpected λ column {lambdas:?}"));
    }
    if rows.iter().any(|r| r[2] != rows[0][2] || r[3] != rows[0][3]) {
        return Err("params/FLOPs columns differ across rows".into());
    }
    if rows.iter().any(|r| r[5] != "ok") {
        return Err("a run failed".into());
    }
    let acc: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap_or(f64::NAN)).collect();
    let top = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let expected = (0..5)
        .filter(|&i| acc[i] == top)
        .min_by(|&a, &b| lambdas[a].total_cmp(&lambdas[b]))
        .expect("five rows");
    let marked: Vec<usize> = (0..5).filter(|&i| rows[i][4] == "*").collect();
    if marked != [expected] {
        return Err(format!("marked rows {marked:?}, argmax row {expected}"));
    }
    Ok(format!(
        "5 rows, params {} M and FLOPs {} G on every row, best λ {}",
        rows[0][2], rows[0][3], rows[expected][0]
    ))
}

fn determinism(work: &Path) -> Outcome {
    let data = small_dataset(work)?;
    let config = work.join("det.toml");
    fs::write(&config, "preset = \"desk\"\n[train]\nepochs = 2\nbatch_size = 8\n").map_err(|e| e.to_string())?;
    let mut csvs = Vec::new();
    for name in ["det-a", "det-b"] {
        let out = work.join(name);
        simam(&["train", "--config", path(&config), "--data", path(&data), "--out", path(&out), "--seed", "7"])?;
        csvs.push(fs::read(out.join(METRICS_FILE)).map_err(|e| e.to_string())?);
    }
    let lines = String::from_utf8_lossy(&csvs[0]).lines().count();
    if lines != 3 {
        return Err(format!("expected a header and 2 epoch rows, got {lines} lines"));
    }
    if csvs[0] != csvs[1] {
        return Err("metrics CSVs differ".into());
    }
    Ok(format!("two runs wrote identical {}-byte metrics files", csvs[0].len()))
}

fn main() {
    let work = tempfile::tempdir().expect("temporary directory");
    let work = work.path();
    let criteria: Vec<Criterion<'_>> = vec![
        ("closed-form optimality", Box::new(closed_form)),
        (
            "approximate energy ranking",
            Box::new(|| from_check(verify::check_energy_ranking(200, SEED))),
        ),
        ("constant-channel law", Box::new(|| from_check(verify::check_constant_channels(SEED)))),
        ("shift and scale invariance", Box::new(|| from_check(verify::check_invariances(SEED)))),
        ("parameter-free insertion", Box::new(|| from_check(verify::check_parameter_free()))),
        ("attention cost formulas", Box::new(|| from_check(verify::check_cost_formulas(SEED)))),
        ("full-scale accounting", Box::new(full_scale_accounting)),
        ("gradient certification", Box::new(|| from_check(verify::check_gradients(50, SEED)))),
        ("scheduler fidelity", Box::new(|| from_check(verify::check_scheduler()))),
        ("desk-scale learning smoke", Box::new(|| desk_smoke(work))),
        ("ablation harness", Box::new(|| ablation(work))),
        ("determinism", Box::new(|| determinism(work))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (tag, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail}", i + 1);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
