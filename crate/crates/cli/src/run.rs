use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};
use star_mec_core::env::write_trace;
use star_mec_core::experiment::{
    compare as summarise, eval_agent, read_results, run_seed, write_results, write_summary, write_train_logs,
    ExperimentError, SeedRun,
};
use star_mec_core::sac::{AgentCheckpoint, TrainError};
use star_mec_core::{ExperimentConfig, Protocol, SacAgent, SchemeName};

use crate::RunArgs;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_RUNTIME: u8 = 4;

#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => EXIT_USAGE,
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Config(e) | Failure::Runtime(e) => e,
        }
    }

    fn context(self, msg: String) -> Self {
        match self {
            Failure::Usage(e) => Failure::Usage(e.context(msg)),
            Failure::Config(e) => Failure::Config(e.context(msg)),
            Failure::Runtime(e) => Failure::Runtime(e.context(msg)),
        }
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Json(_)
            | ExperimentError::NotObject
            | ExperimentError::UnknownKeys(_)
            | ExperimentError::Config(_) => Failure::Config(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Parses `2020..2024`, `3-5` and comma separated mixtures; ranges are
/// inclusive.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let range = part.split_once("..").or_else(|| part.split_once('-'));
        match range {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| format!("bad seed range `{part}`"))?;
                let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| format!("bad seed range `{part}`"))?;
                if b < a {
                    return Err(format!("empty seed range `{part}`"));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| format!("bad seed `{part}`"))?),
        }
    }
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    let mut sorted = seeds.clone();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seeds.len() {
        return Err("duplicate seeds".into());
    }
    Ok(seeds)
}

pub fn parse_baseline(name: &str) -> Result<SchemeName, Failure> {
    let scheme: SchemeName = name.parse().map_err(|e| Failure::Usage(anyhow!("{e}")))?;
    if !SchemeName::BASELINES.contains(&scheme) {
        let names: Vec<&str> = SchemeName::BASELINES.iter().map(|s| s.as_str()).collect();
        return Err(Failure::Usage(anyhow!("`{name}` is not a baseline; expected one of {}", names.join(", "))));
    }
    Ok(scheme)
}

pub struct Job {
    pub cfg: ExperimentConfig,
    pub protocol: Protocol,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Job {
    pub fn load(args: &RunArgs, protocol: Protocol) -> Result<Self, Failure> {
        let text = fs::read_to_string(&args.config)
            .with_context(|| format!("cannot read config {}", args.config.display()))
            .map_err(Failure::Usage)?;
        let cfg = ExperimentConfig::from_json(&text)
            .map_err(|e| Failure::Config(anyhow::Error::from(e).context(format!("in {}", args.config.display()))))?;
        let seeds = parse_seeds(&args.seeds).map_err(|e| Failure::Usage(anyhow!(e)))?;
        if args.jobs == 0 {
            return Err(Failure::Usage(anyhow!("--jobs must be positive")));
        }
        Ok(Self {
            cfg,
            protocol,
            seeds,
            out: args.out.clone(),
            jobs: args.jobs,
        })
    }
}

/// What a run directory holds, so `eval` knows which scheme produced the
/// checkpoints.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    protocol: Protocol,
    scheme: SchemeName,
    seeds: Vec<u64>,
}

/// Runs `f` on every seed, `jobs` at a time, keeping seed order.
fn per_seed<T: Send>(seeds: &[u64], jobs: usize, f: impl Fn(u64) -> T + Sync) -> Vec<T> {
    let f = &f;
    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(jobs) {
        if chunk.len() == 1 {
            out.push(f(chunk[0]));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|&seed| s.spawn(move || f(seed))).collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("seed worker panicked")));
        });
    }
    out
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(Failure::Runtime)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer(&mut w, value).map_err(runtime)?;
    w.flush().map_err(runtime)
}

fn prepare_out(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(Failure::Runtime)
}

fn report(run: &SeedRun) {
    let r = &run.row;
    eprintln!(
        "{} {} N={} K={} seed={} energy={:.6e} J (std {:.3e}) p1={:.3e} p2={:.3e} {:.1}s",
        r.protocol, r.scheme, r.n, r.k, r.seed, r.energy_j, r.energy_std_j, r.p1, r.p2, r.wall_clock_s
    );
}

/// Unwraps per-seed results, saving a diagnostic checkpoint when training
/// diverged.
fn collect(job: &Job, results: Vec<(u64, Result<SeedRun, ExperimentError>)>) -> Result<Vec<SeedRun>, Failure> {
    let mut runs = Vec::with_capacity(results.len());
    for (seed, r) in results {
        match r {
            Ok(run) => runs.push(run),
            Err(ExperimentError::Train(TrainError::NonFinite {
                what,
                episode,
                env_steps,
                checkpoint,
            })) => {
                let path = job.out.join(format!("diagnostic_{seed}.json"));
                write_json(&path, &*checkpoint)?;
                return Err(runtime(anyhow!(
                    "seed {seed}: non-finite {what} at episode {episode}, env step {env_steps}; state saved to {}",
                    path.display()
                )));
            }
            Err(e) => return Err(Failure::from(e).context(format!("seed {seed}"))),
        }
    }
    Ok(runs)
}

fn write_outputs(job: &Job, scheme: SchemeName, runs: &[SeedRun]) -> Result<(), Failure> {
    let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
    write_results(&rows, create(&job.out.join("results.csv"))?).map_err(runtime)?;
    let logs: Vec<(u64, &star_mec_core::TrainingLog)> =
        runs.iter().filter_map(|r| r.log.as_ref().map(|l| (r.row.seed, l))).collect();
    if !logs.is_empty() {
        write_train_logs(&logs, create(&job.out.join("train_log.csv"))?).map_err(runtime)?;
    }
    let k = job.cfg.scenario.num_uds;
    for run in runs {
        let seed = run.row.seed;
        write_trace(&run.trace, k, create(&job.out.join(format!("trace_{seed}.csv")))?).map_err(runtime)?;
        if let Some(agent) = &run.agent {
            write_json(&job.out.join(format!("checkpoint_{seed}.json")), &agent.checkpoint())?;
        }
    }
    fs::write(job.out.join("config.json"), job.cfg.to_json()).map_err(runtime)?;
    write_json(
        &job.out.join("manifest.json"),
        &Manifest {
            protocol: job.protocol,
            scheme,
            seeds: job.seeds.clone(),
        },
    )
}

fn run_scheme(job: &Job, scheme: SchemeName) -> Result<(), Failure> {
    prepare_out(&job.out)?;
    let results = per_seed(&job.seeds, job.jobs, |seed| {
        let r = run_seed(&job.cfg, job.protocol, scheme, seed);
        if let Ok(run) = &r {
            report(run);
        }
        (seed, r)
    });
    let runs = collect(job, results)?;
    write_outputs(job, scheme, &runs)
}

pub fn train(job: &Job) -> Result<(), Failure> {
    run_scheme(job, SchemeName::Rotatable)
}

pub fn baseline(job: &Job, scheme: SchemeName) -> Result<(), Failure> {
    run_scheme(job, scheme)
}

pub fn eval(job: &Job, from: &Path) -> Result<(), Failure> {
    let manifest_path = from.join("manifest.json");
    let scheme = match fs::read_to_string(&manifest_path) {
        Ok(text) => {
            let m: Manifest = serde_json::from_str(&text)
                .with_context(|| format!("bad manifest {}", manifest_path.display()))
                .map_err(Failure::Config)?;
            if m.protocol != job.protocol {
                return Err(Failure::Config(anyhow!(
                    "checkpoints in {} were trained with protocol {}, not {}",
                    from.display(),
                    m.protocol,
                    job.protocol
                )));
            }
            m.scheme
        }
        Err(_) => SchemeName::Rotatable,
    };
    if !scheme.is_trained() {
        return Err(Failure::Config(anyhow!("scheme {scheme} has no checkpoints to evaluate")));
    }
    let mut agents = Vec::with_capacity(job.seeds.len());
    for &seed in &job.seeds {
        let path = from.join(format!("checkpoint_{seed}.json"));
        let text = fs::read_to_string(&path)
            .with_context(|| format!("cannot read checkpoint {}", path.display()))
            .map_err(Failure::Usage)?;
        let ck: AgentCheckpoint = serde_json::from_str(&text)
            .with_context(|| format!("bad checkpoint {}", path.display()))
            .map_err(Failure::Config)?;
        let agent = SacAgent::from_checkpoint(&ck, seed)
            .with_context(|| format!("bad checkpoint {}", path.display()))
            .map_err(Failure::Config)?;
        agents.push((seed, agent));
    }
    prepare_out(&job.out)?;
    let mut runs = Vec::with_capacity(agents.len());
    for (seed, mut agent) in agents {
        let run = eval_agent(&job.cfg, job.protocol, scheme, seed, &mut agent)
            .map_err(|e| Failure::from(e).context(format!("seed {seed}")))?;
        report(&run);
        runs.push(run);
    }
    let rows: Vec<_> = runs.iter().map(|r| r.row.clone()).collect();
    write_results(&rows, create(&job.out.join("results.csv"))?).map_err(runtime)?;
    for run in &runs {
        let path = job.out.join(format!("trace_{}.csv", run.row.seed));
        write_trace(&run.trace, job.cfg.scenario.num_uds, create(&path)?).map_err(runtime)?;
    }
    Ok(())
}

pub fn compare(inputs: &[PathBuf], out: &Path) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for input in inputs {
        let path = if input.is_dir() { input.join("results.csv") } else { input.clone() };
        let file = File::open(&path)
            .with_context(|| format!("cannot read {}", path.display()))
            .map_err(Failure::Usage)?;
        rows.extend(
            read_results(file)
                .with_context(|| format!("bad results file {}", path.display()))
                .map_err(Failure::Config)?,
        );
    }
    let summary = summarise(&rows)?;
    prepare_out(out)?;
    write_summary(&summary, create(&out.join("summary.csv"))?).map_err(runtime)?;
    for s in &summary {
        let reduction = s
            .reduction_vs_fixed_pct
            .map(|r| format!(" reduction_vs_fixed={r:.2}%"))
            .unwrap_or_default();
        println!(
            "{} N={} K={} {:<18} rank={} energy={:.6e} ± {:.3e} J over {} seeds{}",
            s.protocol,
            s.n,
            s.k,
            s.scheme.as_str(),
            s.rank,
            s.mean_energy_j,
            s.std_energy_j,
            s.seeds,
            reduction
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seeds("2020..2024").unwrap(), vec![2020, 2021, 2022, 2023, 2024]);
        assert_eq!(parse_seeds("1,5,7-9").unwrap(), vec![1, 5, 7, 8, 9]);
        assert_eq!(parse_seeds("3..=4").unwrap(), vec![3, 4]);
        assert!(parse_seeds("").is_err());
        assert!(parse_seeds("5..3").is_err());
        assert!(parse_seeds("1,1").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn baselines_exclude_the_rotatable_scheme() {
        assert_eq!(parse_baseline("fixed-orientation").unwrap(), SchemeName::FixedOrientation);
        assert_eq!(parse_baseline("random-policy").unwrap(), SchemeName::RandomPolicy);
        assert_eq!(parse_baseline("rotatable").unwrap_err().code(), EXIT_USAGE);
        assert_eq!(parse_baseline("nope").unwrap_err().code(), EXIT_USAGE);
    }

    #[test]
    fn config_errors_map_to_the_config_code() {
        let e = ExperimentConfig::from_json(r#"{"bogus": 1}"#).unwrap_err();
        assert_eq!(Failure::from(e).code(), EXIT_CONFIG);
        let e = ExperimentError::Compare("x".into());
        assert_eq!(Failure::from(e).code(), EXIT_RUNTIME);
    }
}
