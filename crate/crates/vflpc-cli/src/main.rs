//! Command-line entry point: model fitting, field planning, closed-loop
//! episodes, metric recomputation, and seeded batch runs.

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use vflpc::koopman::{evaluate, fit_edmd, ObservableDictionary, TrajectoryDataset};
use vflpc::vf::Vec2;
use vflpc_cli::metrics::{compute_metrics, read_jsonl, write_jsonl, write_reports};
use vflpc_cli::pipeline::{plan_guiding, run_episode, EpisodeFailure, PipelineError};
use vflpc_cli::scenario::Scenario;

/// Exit codes: 0 ok, 2 configuration / input error, 3 runtime abort.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        CliError { code: 2, message: e.to_string() }
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError { code: 3, message: e.to_string() }
    }

    fn from_pipeline(e: PipelineError) -> Self {
        match e {
            PipelineError::Scenario(_) => CliError::config(e),
            _ => CliError::runtime(e),
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser)]
#[command(
    name = "vflpc",
    version,
    about = "Vector-field-guided learning predictive control: plan, run, measure"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the lifted linear model from a snapshot CSV and a dictionary
    /// description, write it as JSON, and print holdout residuals.
    FitKoopman {
        /// Snapshot data: header `t,x1..xn,u1..um`; a time decrease starts
        /// a new trajectory.
        #[arg(long)]
        data: PathBuf,
        /// Observable dictionary (JSON).
        #[arg(long)]
        dict: PathBuf,
        /// Output model file (JSON).
        #[arg(long)]
        out: PathBuf,
        /// Ridge regularization weight.
        #[arg(long, default_value_t = 1e-8)]
        ridge: f64,
        /// Fraction of trajectories used for fitting (the rest is held
        /// out for the residual report).
        #[arg(long, default_value_t = 0.8)]
        train_fraction: f64,
    },
    /// Precompute the guiding field for a scenario and write the
    /// integrated guiding trajectory as CSV.
    PlanField {
        #[arg(long)]
        scenario: PathBuf,
        /// Output trajectory file (CSV: x,y,speed,curvature).
        #[arg(long)]
        out: PathBuf,
        /// Scene time at which moving obstacles are frozen for planning.
        #[arg(long, default_value_t = 0.0)]
        time: f64,
    },
    /// Run one closed-loop episode and write run.jsonl, metrics.json,
    /// timing.json, and trajectory.csv into the output directory.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Force the online model compensation on or off.
        #[arg(long, value_parser = ["on", "off"])]
        gp: Option<String>,
    },
    /// Recompute metrics from an existing run log.
    Metrics {
        /// Run log (JSON lines).
        #[arg(long)]
        run: PathBuf,
        /// Take weights from this scenario file.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Lateral-error weight (ignored when --scenario is given).
        #[arg(long, default_value_t = 1.0)]
        q1: f64,
        /// Heading-error weight (ignored when --scenario is given).
        #[arg(long, default_value_t = 1.0)]
        q2: f64,
        /// Control weights (ignored when --scenario is given).
        #[arg(long, num_args = 2, default_values_t = [0.3, 8.0])]
        r: Vec<f64>,
    },
    /// Run independent seeded episodes in parallel and merge their
    /// metrics into one table.
    Batch {
        #[arg(long)]
        scenario: PathBuf,
        /// Comma-separated seeds, one episode each.
        #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Force the online model compensation on or off.
        #[arg(long, value_parser = ["on", "off"])]
        gp: Option<String>,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::FitKoopman { data, dict, out, ridge, train_fraction } => {
            cmd_fit_koopman(&data, &dict, &out, ridge, train_fraction)
        }
        Command::PlanField { scenario, out, time } => cmd_plan_field(&scenario, &out, time),
        Command::Run { scenario, out_dir, seed, gp } => {
            cmd_run(&scenario, &out_dir, seed, gp_flag(gp))
        }
        Command::Metrics { run, scenario, q1, q2, r } => cmd_metrics(&run, scenario.as_deref(), q1, q2, &r),
        Command::Batch { scenario, seeds, out_dir, gp } => {
            cmd_batch(&scenario, &seeds, &out_dir, gp_flag(gp))
        }
    }
}

fn gp_flag(gp: Option<String>) -> Option<bool> {
    gp.map(|v| v == "on")
}

fn cmd_fit_koopman(
    data: &Path,
    dict: &Path,
    out: &Path,
    ridge: f64,
    train_fraction: f64,
) -> CliResult {
    if !(0.0 < train_fraction && train_fraction < 1.0) {
        return Err(CliError::config("train fraction must lie strictly between 0 and 1"));
    }
    let dataset = TrajectoryDataset::load_csv(data).map_err(CliError::config)?;
    let text = std::fs::read_to_string(dict)
        .map_err(|e| CliError::config(format!("{}: {e}", dict.display())))?;
    let dictionary: ObservableDictionary =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("dictionary: {e}")))?;
    let (train, holdout) = dataset.split(train_fraction);
    let (model, train_report) =
        fit_edmd(&train, &dictionary, ridge).map_err(CliError::runtime)?;
    let holdout_report = evaluate(&model, &holdout).map_err(CliError::runtime)?;
    model.save_json(out).map_err(CliError::runtime)?;
    println!(
        "fit {} snapshots (lifted dim {}): train RMSE {:.3e}, holdout RMSE {:.3e} \
         (state {:.3e}, max |r| {:.3e}) -> {}",
        train_report.n_snapshots,
        model.dict.dim(),
        train_report.rmse_lifted,
        holdout_report.rmse_lifted,
        holdout_report.rmse_state,
        holdout_report.max_abs_residual,
        out.display()
    );
    Ok(())
}

fn cmd_plan_field(scenario_path: &Path, out: &Path, time: f64) -> CliResult {
    let scenario = Scenario::load(scenario_path).map_err(CliError::config)?;
    let start = Vec2::new(scenario.run.start.x, scenario.run.start.y);
    let plan = plan_guiding(&scenario, &scenario.obstacles, time, start)
        .map_err(CliError::from_pipeline)?;
    plan.traj.save_csv(out).map_err(CliError::runtime)?;
    println!(
        "planned {} samples, {:.1} m arc length -> {}",
        plan.traj.points.len(),
        plan.arc_length(),
        out.display()
    );
    Ok(())
}

fn cmd_run(
    scenario_path: &Path,
    out_dir: &Path,
    seed: Option<u64>,
    gp: Option<bool>,
) -> CliResult {
    let mut scenario = Scenario::load(scenario_path).map_err(CliError::config)?;
    if let Some(s) = seed {
        scenario.run.seed = s;
    }
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::runtime(format!("{}: {e}", out_dir.display())))?;
    let episode = run_episode(&scenario, gp).map_err(|failure| {
        if !failure.records.is_empty() {
            let partial = out_dir.join("run_partial.jsonl");
            match write_jsonl(&failure.records, &partial) {
                Ok(()) => eprintln!(
                    "wrote {} completed control steps to {}",
                    failure.records.len(),
                    partial.display()
                ),
                Err(e) => eprintln!("could not write partial trace: {e}"),
            }
        }
        CliError::from_pipeline(failure.error)
    })?;
    write_jsonl(&episode.records, &out_dir.join("run.jsonl")).map_err(CliError::runtime)?;
    write_reports(&episode.report, out_dir).map_err(CliError::runtime)?;
    episode
        .plan
        .traj
        .save_csv(&out_dir.join("trajectory.csv"))
        .map_err(CliError::runtime)?;
    let d = &episode.report.deterministic;
    let t = &episode.report.timing;
    println!("scenario '{}' completed: {} control steps, CT {:.2} s", scenario.name, d.n_steps, d.ct_s);
    println!("  length            {:>10.2} m", d.length_m);
    println!("  J_MC              {:>10.4}", d.j_mc);
    println!("  mean |e_y|        {:>10.4} m", d.mean_abs_ey_m);
    match d.min_obstacle_distance_m {
        Some(v) => println!("  min obst distance {:>10.3} m", v),
        None => println!("  min obst distance        n/a"),
    }
    println!("  aver solve time   {:>10.4} s (max {:.4})", t.aver_st_s, t.max_st_s);
    println!("  outputs in {}", out_dir.display());
    Ok(())
}

fn cmd_metrics(
    run: &Path,
    scenario: Option<&Path>,
    q1: f64,
    q2: f64,
    r: &[f64],
) -> CliResult {
    let records = read_jsonl(run).map_err(CliError::config)?;
    let (q1, q2, r_diag) = match scenario {
        Some(p) => {
            let s = Scenario::load(p).map_err(CliError::config)?;
            (s.metrics.q1, s.metrics.q2, s.rhrl.r)
        }
        None => {
            if r.len() != 2 {
                return Err(CliError::config("--r takes exactly two weights"));
            }
            (q1, q2, [r[0], r[1]])
        }
    };
    let report = compute_metrics(&records, q1, q2, r_diag).map_err(CliError::config)?;
    let text = serde_json::to_string_pretty(&report).map_err(CliError::runtime)?;
    println!("{text}");
    Ok(())
}

fn cmd_batch(
    scenario_path: &Path,
    seeds: &[u64],
    out_dir: &Path,
    gp: Option<bool>,
) -> CliResult {
    if seeds.is_empty() {
        return Err(CliError::config("at least one seed"));
    }
    let scenario = Scenario::load(scenario_path).map_err(CliError::config)?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError::runtime(format!("{}: {e}", out_dir.display())))?;
    let results: Vec<(u64, Result<_, Box<EpisodeFailure>>)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut s = scenario.clone();
            s.run.seed = seed;
            (seed, run_episode(&s, gp))
        })
        .collect();

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (seed, outcome) in results {
        let dir = out_dir.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&dir)
            .map_err(|e| CliError::runtime(format!("{}: {e}", dir.display())))?;
        match outcome {
            Ok(ep) => {
                write_jsonl(&ep.records, &dir.join("run.jsonl")).map_err(CliError::runtime)?;
                write_reports(&ep.report, &dir).map_err(CliError::runtime)?;
                rows.push((seed, ep.report));
            }
            Err(failure) => {
                if !failure.records.is_empty() {
                    let _ = write_jsonl(&failure.records, &dir.join("run_partial.jsonl"));
                }
                failures.push((seed, failure.error.to_string()));
            }
        }
    }

    let mut table = String::new();
    writeln!(
        table,
        "{:>6} {:>10} {:>10} {:>8} {:>11} {:>10} {:>9}",
        "seed", "length", "J_MC", "CT", "mean|e_y|", "min dist", "aver ST"
    )
    .unwrap();
    for (seed, rep) in &rows {
        let d = &rep.deterministic;
        writeln!(
            table,
            "{:>6} {:>10.2} {:>10.4} {:>8.2} {:>11.4} {:>10.3} {:>9.4}",
            seed,
            d.length_m,
            d.j_mc,
            d.ct_s,
            d.mean_abs_ey_m,
            d.min_obstacle_distance_m.unwrap_or(f64::NAN),
            rep.timing.aver_st_s
        )
        .unwrap();
    }
    if !rows.is_empty() {
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&vflpc_cli::metrics::MetricsReport) -> f64| {
            rows.iter().map(|(_, r)| f(r)).sum::<f64>() / n
        };
        writeln!(
            table,
            "{:>6} {:>10.2} {:>10.4} {:>8.2} {:>11.4} {:>10} {:>9.4}",
            "mean",
            mean(&|r| r.deterministic.length_m),
            mean(&|r| r.deterministic.j_mc),
            mean(&|r| r.deterministic.ct_s),
            mean(&|r| r.deterministic.mean_abs_ey_m),
            "-",
            mean(&|r| r.timing.aver_st_s)
        )
        .unwrap();
    }
    print!("{table}");

    let merged: Vec<serde_json::Value> = rows
        .iter()
        .map(|(seed, rep)| {
            let mut v = serde_json::to_value(rep).unwrap();
            v.as_object_mut()
                .unwrap()
                .insert("seed".into(), serde_json::json!(seed));
            v
        })
        .collect();
    let merged_path = out_dir.join("batch.json");
    std::fs::write(&merged_path, serde_json::to_string_pretty(&merged).unwrap())
        .map_err(|e| CliError::runtime(format!("{}: {e}", merged_path.display())))?;

    if !failures.is_empty() {
        let list = failures
            .iter()
            .map(|(s, e)| format!("seed {s}: {e}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(CliError::runtime(format!(
            "{} of {} episodes aborted ({list})",
            failures.len(),
            seeds.len()
        )));
    }
    Ok(())
}
