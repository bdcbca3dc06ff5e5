use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use hjbnet::baseline::solve_baseline;
use hjbnet::evaluation::{
    ablation_curves, ablation_run, evaluate_point, format_ablation_summary, format_table, shock_experiment, EvalReport,
};
use hjbnet::io::{write_history, write_json, write_trajectories, Checkpoint, RunConfig, TrajectoryTable};
use hjbnet::training::train;
use log::info;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

/// Neural value-function solver for multi-agent optimal control.
#[derive(Parser)]
#[command(name = "hjbnet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a value network and write a checkpoint and history.
    Train(Common),
    /// Evaluate a checkpoint at the nominal initial state.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArg,
        /// Also solve the baseline and report the suboptimality ratio.
        #[arg(long)]
        with_baseline: bool,
    },
    /// Solve the direct-transcription baseline at the nominal initial state.
    Baseline(Common),
    /// Run the configured shock scenarios with a checkpoint.
    Shock {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ck: CheckpointArg,
        /// Re-solve the baseline from each post-shock state.
        #[arg(long)]
        with_baseline: bool,
    },
    /// Train every penalizer variant for every seed.
    Ablate(Common),
    /// Print the fully resolved configuration.
    Export(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Seed for training and the baseline.
    #[arg(long)]
    seed: Option<u64>,
    /// Validation time steps.
    #[arg(long)]
    nt: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CheckpointArg {
    /// Checkpoint to load; defaults to `<out>/checkpoint.json`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
}

impl Common {
    fn load(&self) -> Result<Run> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        if let Some(nt) = self.nt {
            cfg = cfg.with_validation_steps(nt);
        }
        cfg.validate()?;
        let out = self.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir));
        Ok(Run { cfg, out })
    }
}

impl Run {
    fn ensure_out(&self) -> Result<()> {
        std::fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn checkpoint(&self, arg: &CheckpointArg) -> Result<Checkpoint> {
        let path = arg.checkpoint.clone().unwrap_or_else(|| self.path("checkpoint.json"));
        Ok(Checkpoint::load(&path)?)
    }
}

fn write_csv(path: &Path, tables: &[TrajectoryTable]) -> Result<()> {
    write_trajectories(BufWriter::new(File::create(path)?), tables)?;
    Ok(())
}

fn cmd_train(run: Run) -> Result<()> {
    run.ensure_out()?;
    let spec = run.cfg.spec()?;
    let outcome = match train(&spec, &run.cfg.train) {
        Ok(o) => o,
        Err(hjbnet::Error::Diverged { iteration, last_good }) => {
            let ck = Checkpoint::new(&spec, &run.cfg.train, iteration, &last_good, None, None);
            ck.save(&run.path("checkpoint_last_good.json"))?;
            return Err(hjbnet::Error::Diverged { iteration, last_good }.into());
        }
        Err(e) => return Err(e.into()),
    };
    let ck = Checkpoint::new(
        &spec,
        &run.cfg.train,
        outcome.best_iteration,
        &outcome.best_params,
        Some(&outcome.rng),
        Some(outcome.best_validation),
    );
    ck.save(&run.path("checkpoint.json"))?;
    let final_ck = Checkpoint::new(&spec, &run.cfg.train, run.cfg.train.iterations, &outcome.final_params, Some(&outcome.rng), None);
    final_ck.save(&run.path("checkpoint_final.json"))?;
    write_history(BufWriter::new(File::create(run.path("history.csv"))?), &outcome.history)?;
    std::fs::write(run.path("config.toml"), run.cfg.export()?)?;
    println!(
        "best iteration {}: validation l+G {:.4} (l {:.4}, G {:.4})",
        outcome.best_iteration,
        outcome.best_validation.cost(),
        outcome.best_validation.ell,
        outcome.best_validation.g
    );
    Ok(())
}

fn cmd_eval(run: Run, ck: &CheckpointArg, with_baseline: bool) -> Result<()> {
    let ck = run.checkpoint(ck)?;
    run.ensure_out()?;
    let spec = run.cfg.spec()?;
    let params = ck.params()?;
    let (mut report, rec) = evaluate_point(&params, &spec.x0, &spec, run.cfg.train.n_t_val)?;
    let mut tables = vec![TrajectoryTable::from_record("nn", &rec, &spec)];
    let mut rows: Vec<(&str, EvalReport)> = Vec::new();
    if with_baseline {
        let start = Instant::now();
        let sol = solve_baseline(&spec.x0, &spec, &run.cfg.baseline)?;
        let b = EvalReport::from_baseline(report.label.clone(), &sol, &spec, start.elapsed().as_secs_f64());
        report.compare_to(&b);
        tables.push(TrajectoryTable::from_baseline("baseline", &sol, &spec));
        write_json(&run.path("baseline_report.json"), &b)?;
        rows.push(("NN", report.clone()));
        rows.push(("Baseline", b));
    } else {
        rows.push(("NN", report.clone()));
    }
    write_json(&run.path("report.json"), &report)?;
    write_csv(&run.path("trajectory.csv"), &tables)?;
    let view: Vec<(&str, &EvalReport)> = rows.iter().map(|(s, r)| (*s, r)).collect();
    print!("{}", format_table(&view));
    Ok(())
}

fn cmd_baseline(run: Run) -> Result<()> {
    run.ensure_out()?;
    let spec = run.cfg.spec()?;
    let start = Instant::now();
    let sol = solve_baseline(&spec.x0, &spec, &run.cfg.baseline)?;
    let report = EvalReport::from_baseline("no shocks, t ∈ [0, 1]", &sol, &spec, start.elapsed().as_secs_f64());
    write_json(&run.path("baseline_schedule.json"), &sol.schedule)?;
    write_json(&run.path("baseline_report.json"), &report)?;
    write_csv(&run.path("baseline_trajectory.csv"), &[TrajectoryTable::from_baseline("baseline", &sol, &spec)])?;
    print!("{}", format_table(&[("Baseline", &report)]));
    Ok(())
}

fn cmd_shock(run: Run, ck: &CheckpointArg, with_baseline: bool) -> Result<()> {
    let ck = run.checkpoint(ck)?;
    run.ensure_out()?;
    let spec = run.cfg.spec()?;
    let params = ck.params()?;
    let n_t = run.cfg.train.n_t_val;
    let mut rows: Vec<(&str, EvalReport)> = Vec::new();
    for (i, scenario) in run.cfg.shocks.iter().enumerate() {
        info!("shock scenario {i}: {scenario:?}");
        let out = shock_experiment(&params, &spec.x0, &spec, scenario, n_t, with_baseline.then_some(&run.cfg.baseline))?;
        let mut tables = vec![
            TrajectoryTable::from_record("nn_pre_shock", &out.unshocked, &spec).truncated(out.shock_step),
            TrajectoryTable::from_record("nn_post_shock", &out.post, &spec),
        ];
        write_json(&run.path(&format!("shock_{i}_report.json")), &out.report)?;
        rows.push(("NN", out.report.clone()));
        if let Some((sol, b)) = &out.baseline {
            tables.push(TrajectoryTable::from_baseline("baseline_post_shock", sol, &spec));
            write_json(&run.path(&format!("shock_{i}_baseline_report.json")), b)?;
            rows.push(("Baseline", b.clone()));
        }
        write_json(&run.path(&format!("shock_{i}_xi.json")), &out.xi)?;
        write_csv(&run.path(&format!("shock_{i}_trajectory.csv")), &tables)?;
    }
    let view: Vec<(&str, &EvalReport)> = rows.iter().map(|(s, r)| (*s, r)).collect();
    print!("{}", format_table(&view));
    Ok(())
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

fn cmd_ablate(run: Run) -> Result<()> {
    let dir = run.path("ablation");
    std::fs::create_dir_all(&dir)?;
    let spec = run.cfg.spec()?;
    let ab = &run.cfg.ablation;
    let runs = ablation_run(&spec, &run.cfg.train, &ab.variants, &ab.seeds);
    for r in &runs {
        if let Some(h) = &r.history {
            let path = dir.join(format!("history_{}_seed{}.csv", file_stem(&r.variant), r.seed));
            write_history(BufWriter::new(File::create(path)?), h)?;
        }
    }
    let curves = ablation_curves(&runs, ab.threshold);
    write_json(&dir.join("summary.json"), &curves)?;
    let failures: Vec<_> = runs.iter().filter(|r| r.error.is_some()).collect();
    write_json(&dir.join("failures.json"), &failures)?;
    print!("{}", format_ablation_summary(&curves, ab.threshold));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(c) => cmd_train(c.load()?),
        Command::Eval { common, ck, with_baseline } => cmd_eval(common.load()?, &ck, with_baseline),
        Command::Baseline(c) => cmd_baseline(c.load()?),
        Command::Shock { common, ck, with_baseline } => cmd_shock(common.load()?, &ck, with_baseline),
        Command::Ablate(c) => cmd_ablate(c.load()?),
        Command::Export(c) => {
            print!("{}", c.load()?.cfg.export()?);
            Ok(())
        }
    }
}

fn category(err: &anyhow::Error) -> &'static str {
    err.chain()
        .find_map(|e| e.downcast_ref::<hjbnet::Error>().map(hjbnet::Error::category))
        .or_else(|| err.chain().find_map(|e| e.downcast_ref::<std::io::Error>().map(|_| "io")))
        .unwrap_or("internal")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error[{}]: {msg}", category(&e));
            ExitCode::FAILURE
        }
    }
}
