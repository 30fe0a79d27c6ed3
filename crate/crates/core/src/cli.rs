//! The `coordsim` command-line interface.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on usage or
//! configuration errors.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::config;
use crate::error::{Error, Result};
use crate::experiments::{
    EpochLog, RunArtifact, Session, Study, StudyConfig, Timepoint, WorldState,
};
use crate::metrics::{
    export_agent_game, export_market_game, pooled_probe_stereotypic, population_prediction_ratio,
    validate_agent_export, validate_market_export, write_tidy, TrainRow, AGENT_GAME_EPOCHS,
};
use crate::population::write_manifest;

pub const OUT_ENV: &str = "COORDSIM_OUT";
const SESSION_FILE: &str = "session.ckpt";

#[derive(Debug, Parser)]
#[command(name = "coordsim", version, about = "Multi-agent PPO simulator of a produce-and-trade economy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one or more seeds of a study.
    Run(RunArgs),
    /// Continue an interrupted run from its last checkpoint.
    Resume {
        /// Seed directory written by `run`.
        #[arg(long)]
        from: PathBuf,
    },
    /// Evaluate a trained market on its held-out probe codes.
    Probe {
        /// Seed directory or session checkpoint.
        #[arg(long)]
        from: PathBuf,
        /// Sample predictions instead of taking the most likely one.
        #[arg(long)]
        sample: bool,
    },
    /// Write a trajectory table for the browser games.
    Export {
        /// Seed directory or session checkpoint.
        #[arg(long)]
        from: PathBuf,
        #[arg(long, value_enum)]
        game: Game,
        #[arg(long, value_enum, default_value = "wave5")]
        timepoint: TimepointArg,
        /// Series length for the agent game.
        #[arg(long, default_value_t = AGENT_GAME_EPOCHS)]
        epochs: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a configuration and print it with every default filled in.
    ValidateConfig {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set trainer.actor_lr=3e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long, value_enum)]
    study: Option<StudyArg>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    epochs: Option<u32>,
    /// Seeds to run: `3`, `1..5` (inclusive) or `1,4,9`. Defaults to
    /// `1..runs` from the configuration.
    #[arg(long)]
    seeds: Option<String>,
    /// Output root; defaults to $COORDSIM_OUT, then `runs`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing seed directories.
    #[arg(long)]
    force: bool,
    /// Seeds trained in parallel.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Finished regularity output (study directory, seed directory or
    /// session checkpoint) that a generational run continues.
    #[arg(long)]
    from: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StudyArg {
    Individuation,
    Regularity,
    Generational,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Game {
    Market,
    Agent,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TimepointArg {
    Initial,
    Wave2,
    Wave5,
}

impl From<TimepointArg> for Timepoint {
    fn from(t: TimepointArg) -> Self {
        match t {
            TimepointArg::Initial => Timepoint::Initial,
            TimepointArg::Wave2 => Timepoint::Wave2,
            TimepointArg::Wave5 => Timepoint::Wave5,
        }
    }
}

impl From<StudyArg> for Study {
    fn from(s: StudyArg) -> Self {
        match s {
            StudyArg::Individuation => Study::Individuation,
            StudyArg::Regularity => Study::Regularity,
            StudyArg::Generational => Study::Generational,
        }
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, Error::Config(_)) { 2 } else { 1 })
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run(args) => run(args),
        Command::Resume { from } => resume(&from),
        Command::Probe { from, sample } => probe(&from, sample),
        Command::Export {
            from,
            game,
            timepoint,
            epochs,
            out,
        } => export(&from, game, timepoint.into(), epochs, out.as_deref()),
        Command::ValidateConfig { cfg } => {
            let c = build_config(&cfg)?;
            print!("{}", config::to_toml(&c)?);
            Ok(())
        }
    }
}

fn build_config(args: &ConfigArgs) -> Result<StudyConfig> {
    let base = match &args.config {
        Some(path) => config::load(path)?,
        None => StudyConfig::default(),
    };
    config::apply_overrides(&base, &args.overrides)
}

/// Parses `3`, `1..5` (inclusive) or `1,4,9`.
pub fn parse_seeds(spec: &str) -> Result<Vec<u64>> {
    let bad = || Error::config(format!("invalid seed list '{spec}' (use 3, 1..5 or 1,4,9)"));
    let seeds: Vec<u64> = if let Some((a, b)) = spec.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        (a..=b).collect()
    } else {
        spec.split(',')
            .map(|s| s.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err(Error::config(format!("seed list '{spec}' repeats a seed")));
    }
    Ok(seeds)
}

fn seed_dir(root: &Path, study: Study, seed: u64) -> PathBuf {
    root.join(study.name()).join(format!("seed-{seed}"))
}

/// Finds the regularity session a generational seed continues from.
fn start_session(from: &Path, seed: u64, single: bool) -> Result<Session> {
    let candidates = [
        from.join(format!("seed-{seed}")).join(SESSION_FILE),
        from.join("regularity").join(format!("seed-{seed}")).join(SESSION_FILE),
    ];
    let path = candidates
        .into_iter()
        .find(|p| p.is_file())
        .or_else(|| {
            if !single {
                None
            } else if from.is_file() {
                Some(from.to_path_buf())
            } else {
                Some(from.join(SESSION_FILE)).filter(|p| p.is_file())
            }
        })
        .ok_or_else(|| {
            Error::config(format!("no regularity session for seed {seed} under {}", from.display()))
        })?;
    load_session(&path)
}

fn load_session(path: &Path) -> Result<Session> {
    let path = if path.is_dir() { path.join(SESSION_FILE) } else { path.to_path_buf() };
    let bytes = fs::read(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    Session::restore(&bytes)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    let mut cfg = build_config(&args.cfg)?;
    if let Some(s) = args.study {
        cfg.study = s.into();
    }
    if let Some(n) = args.size {
        cfg.size = n;
    }
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let seeds = match &args.seeds {
        Some(spec) => parse_seeds(spec)?,
        None => (1..=u64::from(cfg.runs)).collect(),
    };
    let root = args
        .out
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    let starts: Vec<Option<Session>> = match (cfg.study, &args.from) {
        (Study::Generational, Some(from)) => seeds
            .iter()
            .map(|&s| start_session(from, s, seeds.len() == 1).map(Some))
            .collect::<Result<_>>()?,
        (Study::Generational, None) => {
            return Err(Error::config(
                "the generational study continues a regularity run; pass --from",
            ))
        }
        (_, Some(_)) => return Err(Error::config("--from is only used by the generational study")),
        (_, None) => seeds.iter().map(|_| None).collect(),
    };
    for &seed in &seeds {
        let dir = seed_dir(&root, cfg.study, seed);
        if dir.exists() {
            if !args.force {
                return Err(Error::config(format!(
                    "{} already exists; pass --force to overwrite",
                    dir.display()
                )));
            }
            fs::remove_dir_all(&dir)?;
        }
    }
    if args.jobs == 0 {
        return Err(Error::config("--jobs must be at least 1"));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs)
        .build()
        .map_err(|e| Error::training(e.to_string()))?;
    let jobs: Vec<(u64, Option<Session>)> = seeds.iter().copied().zip(starts).collect();
    let results: Vec<Result<Session>> = pool.install(|| {
        jobs.into_par_iter()
            .map(|(seed, start)| {
                let dir = seed_dir(&root, cfg.study, seed);
                fs::create_dir_all(&dir)?;
                let session = match start {
                    None => Session::fresh(&cfg, seed)?,
                    Some(s) => {
                        let mut s = s.into_generational(&cfg.replacement)?;
                        s.world.config.steps_per_epoch = cfg.steps_per_epoch;
                        s.world.config.trainer = cfg.trainer.clone();
                        s.world.config.checkpoint_every = cfg.checkpoint_every;
                        s.world.config.eval_window = cfg.eval_window;
                        s.artifact.config = s.world.config.clone();
                        s
                    }
                };
                fs::write(dir.join("config.toml"), config::to_toml(&session.world.config)?)?;
                drive(session, &dir)
            })
            .collect()
    });
    let mut artifacts = Vec::new();
    for (seed, r) in seeds.iter().zip(results) {
        let session = r.map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("seed {seed}: {m}")),
            other => other,
        })?;
        artifacts.push(session.artifact);
    }
    let study_dir = root.join(cfg.study.name());
    let n = write_tidy(&artifacts, BufWriter::new(File::create(study_dir.join("tidy.csv"))?))?;
    println!("wrote {n} tidy rows to {}", study_dir.join("tidy.csv").display());
    Ok(())
}

fn resume(from: &Path) -> Result<()> {
    let session = load_session(from)?;
    let dir = if from.is_dir() {
        from.to_path_buf()
    } else {
        from.parent().unwrap_or(Path::new(".")).to_path_buf()
    };
    if session.is_complete() {
        println!("{}: run already complete at epoch {}", dir.display(), session.world.epoch);
        return Ok(());
    }
    eprintln!("resuming {} at epoch {}", dir.display(), session.world.epoch);
    truncate_training_log(&dir.join("training.csv"), session.world.epoch)?;
    drive(session, &dir)?;
    Ok(())
}

/// Drops training rows logged after the checkpoint being resumed.
fn truncate_training_log(path: &Path, epochs_done: u32) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows: Vec<TrainRow> = csv::Reader::from_path(path)?
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    let mut w = csv::Writer::from_path(path)?;
    for r in rows.into_iter().filter(|r| r.epoch <= epochs_done) {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains `session` to completion, checkpointing into `dir`, and writes the
/// per-seed outputs.
fn drive(mut session: Session, dir: &Path) -> Result<Session> {
    let seed = session.world.seed;
    let every = session.world.config.checkpoint_every;
    let training_path = dir.join("training.csv");
    let fresh_log = !training_path.exists();
    let mut training = csv::WriterBuilder::new()
        .has_headers(fresh_log)
        .from_writer(OpenOptions::new().create(true).append(true).open(&training_path)?);
    let ckpt_dir = dir.join("checkpoints");
    let mut observer = |world: &WorldState, log: &EpochLog, artifact: &RunArtifact| -> Result<()> {
        for t in &log.training {
            training.serialize(TrainRow {
                epoch: log.epoch + 1,
                model_id: t.model_id.clone(),
                steps: t.stats.steps,
                clip: t.stats.clip,
                value: t.stats.value,
                entropy: t.stats.entropy,
                mean_ratio: t.stats.mean_ratio,
            })?;
        }
        if every > 0 && world.epoch.is_multiple_of(every) {
            training.flush()?;
            let bytes = Session {
                world: world.clone(),
                artifact: artifact.clone(),
            }
            .checkpoint()?;
            fs::create_dir_all(&ckpt_dir)?;
            write_atomic(&ckpt_dir.join(format!("epoch-{:05}.ckpt", world.epoch)), &bytes)?;
            write_atomic(&dir.join(SESSION_FILE), &bytes)?;
        }
        if world.epoch.is_multiple_of(10) {
            let rec = artifact.epochs.last().unwrap();
            eprintln!(
                "seed {seed} epoch {:>4} wave {} prediction {} probes {}",
                world.epoch,
                world.wave,
                fmt_opt(population_prediction_ratio(rec, &artifact.roster)),
                fmt_opt(pooled_probe_stereotypic(&rec.probes)),
            );
        }
        Ok(())
    };
    session.run(&mut observer)?;
    training.flush()?;
    drop(training);
    write_atomic(&dir.join(SESSION_FILE), &session.checkpoint()?)?;
    let rows: Vec<_> = session.artifact.roster.iter().map(|r| r.manifest_row()).collect();
    write_manifest(&rows, File::create(dir.join("manifest.csv"))?)?;
    write_tidy(
        std::slice::from_ref(&session.artifact),
        BufWriter::new(File::create(dir.join("tidy.csv"))?),
    )?;
    let last = session.artifact.epochs.last();
    println!(
        "{} seed {seed}: {} epochs, final prediction ratio {}, probe stereotypic {}",
        session.world.config.study.name(),
        session.world.epoch,
        fmt_opt(last.and_then(|r| population_prediction_ratio(r, &session.artifact.roster))),
        fmt_opt(last.and_then(|r| pooled_probe_stereotypic(&r.probes))),
    );
    Ok(session)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.3}"))
}

fn probe(from: &Path, sample: bool) -> Result<()> {
    let mut session = load_session(from)?;
    session.world.config.probe_sampling = sample;
    let results = session.world.probe()?;
    let mut out = io::stdout().lock();
    writeln!(out, "group\tprobes\tpredicted_wood\tstereotypic\texpected_accuracy")?;
    for r in results {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{:.4}",
            r.group.map_or("none", |g| g.color()),
            r.probes,
            r.predicted_wood,
            fmt_opt(r.stereotypic),
            r.expected_accuracy
        )?;
    }
    Ok(())
}

fn export(from: &Path, game: Game, timepoint: Timepoint, epochs: usize, out: Option<&Path>) -> Result<()> {
    let session = load_session(from)?;
    let json = match game {
        Game::Market => {
            let e = export_market_game(&session.artifact, timepoint)?;
            validate_market_export(&e)?;
            serde_json::to_string_pretty(&e)?
        }
        Game::Agent => {
            let e = export_agent_game(&session.artifact, timepoint, epochs)?;
            validate_agent_export(&e)?;
            serde_json::to_string_pretty(&e)?
        }
    };
    match out {
        Some(path) => {
            fs::write(path, json + "\n")?;
            eprintln!("wrote {}", path.display());
        }
        None => println!("{json}"),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("3").unwrap(), vec![3]);
        assert_eq!(parse_seeds("1..5").unwrap(), vec![1, 2, 3, 4, 5]);
        assert_eq!(parse_seeds("1, 4,9").unwrap(), vec![1, 4, 9]);
        assert!(parse_seeds("5..1").is_err());
        assert!(parse_seeds("1,1").is_err());
        assert!(parse_seeds("x").is_err());
    }
}
