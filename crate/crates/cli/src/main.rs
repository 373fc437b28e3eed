mod plot;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use navformer::config::PipelineConfig;
use navformer::datasets::{
    collect_records, config_hash, read_dataset, verify_dataset, write_dataset, DatasetKind, FORMAT_VERSION,
};
use navformer::evalkit::{
    run_evaluation, summarize, Controller, LearnedController, RandomController, SummaryCell, TrialResult,
};
use navformer::raycam::Camera;
use navformer::trainkit::{read_loss_log, run_training, TrainData, Trainer};
use navformer::worldsim::{generate_scenario, Pose2D, WorldScenario};

#[derive(Parser)]
#[command(name = "navformer", version, about = "Target-driven visual navigation pipeline")]
struct Cli {
    /// Pipeline configuration (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set train.iterations=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Seed for the subcommand (world, first collection seed, training, evaluation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Kind {
    Exploration,
    Collision,
    Ssl,
}

impl Kind {
    fn dataset(self) -> DatasetKind {
        match self {
            Kind::Exploration => DatasetKind::Exploration,
            Kind::Collision => DatasetKind::CollisionAvoidance,
            Kind::Ssl => DatasetKind::Ssl,
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            Kind::Exploration => "exploration",
            Kind::Collision => "collision",
            Kind::Ssl => "ssl",
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Baseline {
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scenario and write it as TOML.
    GenWorld,
    /// Collect a dataset from consecutive seeds.
    Collect {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Records to collect (pairs for SSL).
        #[arg(long)]
        count: usize,
    },
    /// Train the policy on collected datasets.
    Train {
        #[arg(long)]
        exploration: Option<PathBuf>,
        #[arg(long)]
        collision: Option<PathBuf>,
        #[arg(long)]
        ssl: Option<PathBuf>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or a baseline) under the multi-robot protocol.
    Eval {
        #[arg(long, required_unless_present = "baseline")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
    },
    /// Render figures from an evaluation directory or a loss log.
    Plot {
        /// Directory written by `eval`.
        #[arg(long)]
        eval: Option<PathBuf>,
        #[arg(long)]
        loss_log: Option<PathBuf>,
    },
    /// Re-check the invariants of a dataset or checkpoint.
    Verify { path: PathBuf },
}

/// Failure class, mapped to the exit status.
enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

trait Classify<T> {
    fn invalid(self) -> Outcome<T>;
    fn runtime(self) -> Outcome<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn invalid(self) -> Outcome<T> {
        self.map_err(|e| Failure::Validation(e.into()))
    }
    fn runtime(self) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

#[derive(Serialize, Deserialize)]
struct RunManifest {
    command: String,
    args: Vec<String>,
    config_hash: String,
    seed: Option<u64>,
    versions: Versions,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    details: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Versions {
    navformer: String,
    dataset_format: u32,
}

#[derive(Serialize, Deserialize)]
struct TrialFile {
    scenario: String,
    paths: Vec<Vec<[f64; 3]>>,
    results: Vec<TrialResult>,
}

fn write_manifest(out: &Path, name: &str, cfg: &PipelineConfig, seed: Option<u64>, details: serde_json::Value) -> anyhow::Result<()> {
    let m = RunManifest {
        command: name.to_string(),
        args: std::env::args().skip(1).collect(),
        config_hash: config_hash(cfg),
        seed,
        versions: Versions {
            navformer: env!("CARGO_PKG_VERSION").to_string(),
            dataset_format: FORMAT_VERSION,
        },
        details,
    };
    fs::create_dir_all(out)?;
    let path = out.join(format!("{name}_manifest.json"));
    fs::write(&path, serde_json::to_string_pretty(&m)?).with_context(|| path.display().to_string())?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// Error chain joined by `: `, skipping causes the outer message already quotes.
fn describe(e: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in e.chain() {
        let c = cause.to_string();
        if msg.contains(&c) {
            continue;
        }
        if !msg.is_empty() {
            msg.push_str(": ");
        }
        msg.push_str(&c);
    }
    msg
}

fn run(cli: Cli) -> Outcome<()> {
    let mut cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides).invalid()?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.eval.seed = s;
    }
    fs::create_dir_all(&cli.out).runtime()?;
    match &cli.command {
        Command::GenWorld => gen_world(&cli, &cfg),
        Command::Collect { kind, count } => collect(&cli, &cfg, *kind, *count),
        Command::Train {
            exploration,
            collision,
            ssl,
            resume,
        } => train(&cli, &cfg, exploration.as_deref(), collision.as_deref(), ssl.as_deref(), resume.as_deref()),
        Command::Eval { checkpoint, baseline } => eval(&cli, &cfg, checkpoint.as_deref(), *baseline),
        Command::Plot { eval, loss_log } => plot_cmd(&cli, eval.as_deref(), loss_log.as_deref()),
        Command::Verify { path } => verify(&cfg, path),
    }
}

fn gen_world(cli: &Cli, cfg: &PipelineConfig) -> Outcome<()> {
    let w = &cfg.world;
    let seed = cli.seed.unwrap_or(0);
    let sc = generate_scenario(seed, w.size, w.n_robots, w.n_targets, &w.gen).invalid()?;
    let path = cli.out.join("scenario.toml");
    sc.save(&path).runtime()?;
    write_manifest(&cli.out, "gen-world", cfg, Some(seed), serde_json::Value::Null).runtime()?;
    println!("wrote {}", path.display());
    Ok(())
}

fn collect(cli: &Cli, cfg: &PipelineConfig, kind: Kind, count: usize) -> Outcome<()> {
    if count == 0 {
        return Err(Failure::Validation(anyhow!("count must be positive")));
    }
    let seed_start = cli.seed.unwrap_or(0);
    let run = collect_records(kind.dataset(), seed_start, count, &cfg.collect, |done, total| {
        eprint!("\r{} {done}/{total}", kind.file_stem());
    });
    eprintln!();
    for (seed, e) in &run.failures {
        eprintln!("seed {seed}: {e}");
    }
    if run.records.len() < count {
        eprintln!("warning: collected {} of {count} records", run.records.len());
    }
    let path = cli.out.join(format!("{}.bin", kind.file_stem()));
    let manifest = write_dataset(&path, kind.dataset(), &run.records, &config_hash(&cfg.collect)).runtime()?;
    let details = serde_json::json!({
        "kind": kind.dataset(),
        "records": manifest.record_count,
        "total_timesteps": manifest.total_timesteps,
        "seeds": run.seeds,
        "failed_seeds": run.failures.iter().map(|f| f.0).collect::<Vec<_>>(),
    });
    write_manifest(&cli.out, &format!("collect-{}", kind.file_stem()), cfg, Some(seed_start), details).runtime()?;
    println!("wrote {} ({} records)", path.display(), manifest.record_count);
    if run.records.is_empty() {
        return Err(Failure::Runtime(anyhow!("no records collected")));
    }
    Ok(())
}

fn load_trajectories(path: Option<&Path>, expect: DatasetKind) -> Outcome<Vec<navformer::datasets::Trajectory>> {
    let Some(p) = path else { return Ok(Vec::new()) };
    let (m, records) = read_dataset(p).invalid()?;
    if m.dataset_kind != expect {
        return Err(Failure::Validation(anyhow!("{} holds {:?}, expected {expect:?}", p.display(), m.dataset_kind)));
    }
    records
        .into_trajectories()
        .ok_or_else(|| Failure::Validation(anyhow!("{} holds no trajectories", p.display())))
}

fn train(
    cli: &Cli,
    cfg: &PipelineConfig,
    exploration: Option<&Path>,
    collision: Option<&Path>,
    ssl: Option<&Path>,
    resume: Option<&Path>,
) -> Outcome<()> {
    let data = TrainData {
        exploration: load_trajectories(exploration, DatasetKind::Exploration)?,
        collision: load_trajectories(collision, DatasetKind::CollisionAvoidance)?,
        ssl: match ssl {
            Some(p) => {
                let (m, r) = read_dataset(p).invalid()?;
                if m.dataset_kind != DatasetKind::Ssl {
                    return Err(Failure::Validation(anyhow!("{} is not an SSL dataset", p.display())));
                }
                r.into_pairs().unwrap_or_default()
            }
            None => Vec::new(),
        },
    };
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::load(p).invalid()?;
            // Only the iteration budget may change when resuming.
            t.cfg.iterations = cfg.train.iterations.max(t.iteration);
            t
        }
        None => Trainer::new(cfg.train.clone()).invalid()?,
    };
    data.check(&trainer.cfg).invalid()?;
    let total = trainer.cfg.iterations;
    let final_ckpt = run_training(&mut trainer, &data, &cli.out, |r| {
        if r.iteration % 10 == 0 || r.iteration == total {
            eprintln!(
                "iter {}/{} {:?} dt {:.4}{}",
                r.iteration,
                total,
                r.source,
                r.dt_loss,
                r.byol_loss.map(|b| format!(" byol {b:.4}")).unwrap_or_default()
            );
        }
    })
    .map_err(|e| match e {
        navformer::trainkit::TrainError::Config(_) => Failure::Validation(e.into()),
        other => Failure::Runtime(other.into()),
    })?;
    let details = serde_json::json!({ "checkpoint": final_ckpt, "train_config_hash": trainer.cfg.hash() });
    write_manifest(&cli.out, "train", cfg, Some(trainer.cfg.seed), details).runtime()?;
    println!("wrote {}", final_ckpt.display());
    Ok(())
}

fn eval(cli: &Cli, cfg: &PipelineConfig, checkpoint: Option<&Path>, baseline: Option<Baseline>) -> Outcome<()> {
    cfg.eval.validate().invalid()?;
    let camera = Camera::default();
    let trainer = match (checkpoint, baseline) {
        (Some(p), None) => Some(Trainer::load(p).invalid()?),
        _ => None,
    };
    let trials_dir = cli.out.join("trials");
    fs::create_dir_all(&trials_dir).runtime()?;
    let mut trial_no = 0usize;
    let mut io_error: Option<anyhow::Error> = None;
    let limits = cfg.train.policy.limits;
    let (results, excluded) = {
        let make = |seed: u64| -> Box<dyn Controller + '_> {
            match &trainer {
                Some(t) => {
                    let context = cfg.eval.context.unwrap_or(t.cfg.window);
                    Box::new(LearnedController::new(&t.model, &t.store, context))
                }
                None => Box::new(RandomController::new(limits, seed)),
            }
        };
        run_evaluation(&cfg.eval, &camera, make, |sc, out| {
            let file = TrialFile {
                scenario: sc.to_toml(),
                paths: out.paths.iter().map(|p| p.iter().map(|q| [q.x, q.y, q.theta]).collect()).collect(),
                results: out.results.clone(),
            };
            let path = trials_dir.join(format!("trial_{trial_no:04}.json"));
            if let Err(e) = serde_json::to_string(&file).map_err(anyhow::Error::from).and_then(|s| {
                fs::write(&path, s).map_err(anyhow::Error::from)
            }) {
                io_error.get_or_insert(e);
            }
            trial_no += 1;
            eprint!("\rtrials {trial_no}");
        })
        .runtime()?
    };
    eprintln!();
    if let Some(e) = io_error {
        return Err(Failure::Runtime(e));
    }
    for x in &excluded {
        eprintln!("excluded: {x}");
    }
    let mut w = BufWriter::new(File::create(cli.out.join("results.jsonl")).runtime()?);
    for r in &results {
        writeln!(w, "{}", serde_json::to_string(r).runtime()?).runtime()?;
    }
    w.flush().runtime()?;
    let summary = summarize(&results);
    fs::write(cli.out.join("summary.json"), serde_json::to_string_pretty(&summary).runtime()?).runtime()?;
    for c in &summary {
        println!(
            "size {:>5} robots {} trials {:>3}  SR {:.3}  SPL {:.3}",
            c.env_size, c.n_robots, c.trials, c.success_rate, c.spl + 0.0
        );
    }
    let details = serde_json::json!({
        "policy": if trainer.is_some() { "checkpoint" } else { "random" },
        "checkpoint": checkpoint,
        "excluded": excluded,
    });
    write_manifest(&cli.out, "eval", cfg, Some(cfg.eval.seed), details).runtime()?;
    Ok(())
}

fn plot_cmd(cli: &Cli, eval_dir: Option<&Path>, loss_log: Option<&Path>) -> Outcome<()> {
    if eval_dir.is_none() && loss_log.is_none() {
        return Err(Failure::Validation(anyhow!("give --eval and/or --loss-log")));
    }
    let plots = cli.out.join("plots");
    fs::create_dir_all(&plots).runtime()?;
    let mut written = 0;
    if let Some(dir) = eval_dir {
        let mut trial_files: Vec<PathBuf> = fs::read_dir(dir.join("trials"))
            .invalid()?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        trial_files.sort();
        for p in &trial_files {
            let tf: TrialFile = serde_json::from_str(&fs::read_to_string(p).invalid()?).invalid()?;
            let sc = WorldScenario::from_toml(&tf.scenario).invalid()?;
            let paths: Vec<Vec<Pose2D>> = tf
                .paths
                .iter()
                .map(|v| v.iter().map(|q| Pose2D::new(q[0], q[1], q[2])).collect())
                .collect();
            let name = p.file_stem().unwrap().to_string_lossy().to_string();
            plot::trial_overlay(&sc, &paths, &plots.join(format!("{name}.png"))).runtime()?;
            written += 1;
        }
        let summary: Vec<SummaryCell> =
            serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).invalid()?).invalid()?;
        plot::summary_chart(&summary, &plots.join("summary.png")).runtime()?;
        written += 1;
    }
    if let Some(log) = loss_log {
        let records = read_loss_log(log).invalid()?;
        plot::loss_curve(&records, &plots.join("loss.png")).runtime()?;
        written += 1;
    }
    println!("wrote {written} images to {}", plots.display());
    Ok(())
}

fn verify(cfg: &PipelineConfig, path: &Path) -> Outcome<()> {
    let problems = if path.extension().is_some_and(|e| e == "ckpt") {
        verify_checkpoint(path)?
    } else {
        verify_dataset(path, Some(&cfg.collect), None).invalid()?
    };
    if problems.is_empty() {
        println!("PASS {}", path.display());
        Ok(())
    } else {
        for p in &problems {
            println!("FAIL {p}");
        }
        Err(Failure::Validation(anyhow!("{} problem(s) in {}", problems.len(), path.display())))
    }
}

fn verify_checkpoint(path: &Path) -> Outcome<Vec<String>> {
    let t = Trainer::load(path).invalid()?;
    let mut problems = Vec::new();
    for (_, p) in t.store.iter() {
        if !p.value.is_finite() {
            problems.push(format!("parameter {} has non-finite values", p.name));
        }
    }
    if t.iteration > t.cfg.iterations {
        problems.push(format!("iteration {} beyond configured {}", t.iteration, t.cfg.iterations));
    }
    let log = path.with_file_name(navformer::trainkit::LOSS_LOG);
    if log.exists() {
        let rows = BufReader::new(File::open(&log).runtime()?).lines().count();
        if rows < t.iteration {
            problems.push(format!("loss log has {rows} rows, checkpoint is at iteration {}", t.iteration));
        }
    }
    Ok(problems)
}
