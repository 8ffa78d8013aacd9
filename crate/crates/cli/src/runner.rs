//! Run orchestration: one directory per (experiment, seed) holding the
//! resolved config, the iteration metric stream, the final parameters, and
//! the distilled evaluation; a cross-seed aggregate next to the directories.
//!
//! Streams are line-delimited JSON with a versioned header line, so a reader
//! can refuse formats it does not understand before touching any rows.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use adcomm_core::env::pomnist::ViewAssignment;
use adcomm_core::error::{Error, Result};
use adcomm_core::metrics::{positive_listening, positive_signaling};
use adcomm_core::mnist::{resolve_data_dir, Dataset};
use adcomm_core::trainer::{
    EvalReport, IterationMetrics, PomnistTrainer, TrafficTrainer,
};

use crate::config::{EnvSetup, ExperimentConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const PARAMS_FILE: &str = "final.ckpt";
pub const ABORT_FILE: &str = "abort.ckpt";

pub const STREAM_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StreamHeader {
    format: String,
    version: u32,
}

fn write_header(w: &mut impl Write, kind: &str) -> Result<()> {
    let h = StreamHeader { format: format!("adcomm.{kind}"), version: STREAM_VERSION };
    serde_json::to_writer(&mut *w, &h).map_err(|e| Error::Checkpoint(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

fn check_header(line: &str, kind: &str, path: &Path) -> Result<()> {
    let h: StreamHeader = serde_json::from_str(line).map_err(|_| {
        Error::config(path.display().to_string(), "missing stream header")
    })?;
    let want = format!("adcomm.{kind}");
    if h.format != want || h.version != STREAM_VERSION {
        return Err(Error::config(
            path.display().to_string(),
            format!("stream is {}/v{}, expected {}/v{}", h.format, h.version, want, STREAM_VERSION),
        ));
    }
    Ok(())
}

/// Evaluation distilled to the reported quantities.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistilledEval {
    pub episodes: usize,
    pub mean_return: f64,
    pub success_rate: Option<f64>,
    pub drops_per_step: f64,
    pub throughput: f64,
    pub mean_msg_size: Option<f64>,
    pub size_histogram: Vec<u64>,
    pub pos_signaling: Option<f64>,
    pub pos_listening: Option<f64>,
}

fn distill(cfg: &ExperimentConfig, report: &EvalReport) -> Result<DistilledEval> {
    let pos_signaling = report.signaling.as_ref().and_then(positive_signaling);
    let pos_listening = match &report.listening {
        Some(counts) => positive_listening(false, &cfg.sizes, counts)?,
        None => None,
    };
    Ok(DistilledEval {
        episodes: report.episodes,
        mean_return: report.mean_return,
        success_rate: report.success_rate,
        drops_per_step: report.tally.drops_per_step(),
        throughput: report.tally.throughput(),
        mean_msg_size: report.tally.mean_msg_size(),
        size_histogram: report.size_histogram.clone(),
        pos_signaling,
        pos_listening,
    })
}

/// Mean and sample standard deviation over seeds.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

pub fn stat(values: &[f64]) -> Stat {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n.max(1) as f64;
    let std = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    Stat { mean, std }
}

fn opt_stat(values: &[Option<f64>]) -> Option<Stat> {
    let filled: Vec<f64> = values.iter().copied().collect::<Option<Vec<_>>>()?;
    Some(stat(&filled))
}

/// Cross-seed aggregate, the per-experiment report row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub config: String,
    pub channel_size: String,
    pub seeds: Vec<u64>,
    pub episodes: usize,
    pub mean_return: Stat,
    pub success_rate: Option<Stat>,
    pub drops_per_step: Stat,
    pub throughput: Stat,
    pub mean_msg_size: Option<Stat>,
    pub pos_signaling: Option<Stat>,
    pub pos_listening: Option<Stat>,
}

pub fn aggregate(cfg: &ExperimentConfig, seeds: &[u64], evals: &[DistilledEval]) -> Aggregate {
    assert_eq!(seeds.len(), evals.len());
    let col = |f: &dyn Fn(&DistilledEval) -> f64| -> Vec<f64> { evals.iter().map(f).collect() };
    let opt = |f: &dyn Fn(&DistilledEval) -> Option<f64>| -> Vec<Option<f64>> {
        evals.iter().map(f).collect()
    };
    Aggregate {
        config: cfg.hash8(),
        channel_size: cfg.channel_word(),
        seeds: seeds.to_vec(),
        episodes: evals.first().map_or(0, |e| e.episodes),
        mean_return: stat(&col(&|e| e.mean_return)),
        success_rate: opt_stat(&opt(&|e| e.success_rate)),
        drops_per_step: stat(&col(&|e| e.drops_per_step)),
        throughput: stat(&col(&|e| e.throughput)),
        mean_msg_size: opt_stat(&opt(&|e| e.mean_msg_size)),
        pos_signaling: opt_stat(&opt(&|e| e.pos_signaling)),
        pos_listening: opt_stat(&opt(&|e| e.pos_listening)),
    }
}

/// The run directory for one seed of an experiment.
pub fn seed_dir(out_root: &Path, cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    out_root.join(format!("{}-s{seed}", cfg.hash8()))
}

/// The aggregate file for an experiment.
pub fn aggregate_path(out_root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out_root.join(format!("{}-aggregate.jsonl", cfg.hash8()))
}

pub struct RunSummary {
    pub aggregate: Aggregate,
    pub seed_dirs: Vec<PathBuf>,
}

/// Either trainer behind one face; keeps the seed loop free of env matching.
enum AnyTrainer {
    Pomnist(PomnistTrainer, Dataset),
    Traffic(TrafficTrainer),
}

impl AnyTrainer {
    fn build(cfg: &ExperimentConfig, seed: u64, data_dir: Option<&Path>) -> Result<AnyTrainer> {
        match &cfg.env {
            EnvSetup::Pomnist { .. } => {
                let dir = resolve_data_dir(data_dir);
                let data = Dataset::load(&dir)?;
                Ok(AnyTrainer::Pomnist(PomnistTrainer::new(cfg.pomnist_spec(seed)?)?, data))
            }
            EnvSetup::Traffic { .. } => {
                Ok(AnyTrainer::Traffic(TrafficTrainer::new(cfg.traffic_spec(seed)?)?))
            }
        }
    }

    fn train_iteration(&mut self) -> Result<IterationMetrics> {
        match self {
            AnyTrainer::Pomnist(t, data) => t.train_iteration(&data.train),
            AnyTrainer::Traffic(t) => t.train_iteration(),
        }
    }

    fn evaluate(&self, episodes: usize, chunk: usize) -> Result<EvalReport> {
        match self {
            AnyTrainer::Pomnist(t, data) => t.evaluate(&data.test, episodes, chunk),
            AnyTrainer::Traffic(t) => t.evaluate(episodes, chunk),
        }
    }

    fn save_params(&self, path: &Path) -> Result<()> {
        match self {
            AnyTrainer::Pomnist(t, _) => t.save_params(path),
            AnyTrainer::Traffic(t) => t.save_params(path),
        }
    }

    fn load_params(&mut self, path: &Path) -> Result<()> {
        match self {
            AnyTrainer::Pomnist(t, _) => t.load_params(path),
            AnyTrainer::Traffic(t) => t.load_params(path),
        }
    }
}

/// Train and evaluate one seed into its run directory. Returns the distilled
/// evaluation that was also written to disk.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    out_root: &Path,
    data_dir: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(&IterationMetrics)>,
) -> Result<DistilledEval> {
    let dir = seed_dir(out_root, cfg, seed);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.for_seed(seed).canonical())?;

    let mut trainer = AnyTrainer::build(cfg, seed, data_dir)?;
    let metrics_path = dir.join(METRICS_FILE);
    let mut stream = BufWriter::new(File::create(&metrics_path)?);
    write_header(&mut stream, "metrics")?;
    for _ in 0..cfg.schedule.iterations {
        let row = match trainer.train_iteration() {
            Ok(row) => row,
            Err(e) => {
                // Leave the freshest parameters behind for the postmortem.
                let _ = trainer.save_params(&dir.join(ABORT_FILE));
                return Err(Error::Checkpoint(format!(
                    "seed {seed} aborted ({e}); parameters dumped to {}",
                    dir.join(ABORT_FILE).display()
                )));
            }
        };
        serde_json::to_writer(&mut stream, &row)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        writeln!(stream)?;
        if let Some(cb) = progress.as_deref_mut() {
            cb(&row);
        }
    }
    stream.flush()?;

    trainer.save_params(&dir.join(PARAMS_FILE))?;
    let report = trainer.evaluate(cfg.eval_episodes, cfg.eval_chunk)?;
    let distilled = distill(cfg, &report)?;
    let mut eval_out = BufWriter::new(File::create(dir.join(EVAL_FILE))?);
    write_header(&mut eval_out, "eval")?;
    serde_json::to_writer(&mut eval_out, &distilled)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    writeln!(eval_out)?;
    eval_out.flush()?;
    Ok(distilled)
}

/// Train every seed, evaluate, and write the aggregate.
pub fn run(
    cfg: &ExperimentConfig,
    out_root: &Path,
    data_dir: Option<&Path>,
    mut progress: Option<&mut dyn FnMut(u64, &IterationMetrics)>,
) -> Result<RunSummary> {
    fs::create_dir_all(out_root)?;
    let mut evals = Vec::with_capacity(cfg.seeds.len());
    let mut seed_dirs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut hook = progress.as_deref_mut().map(|cb| {
            move |row: &IterationMetrics| cb(seed, row)
        });
        let as_dyn: Option<&mut dyn FnMut(&IterationMetrics)> =
            hook.as_mut().map(|h| h as &mut dyn FnMut(&IterationMetrics));
        evals.push(run_seed(cfg, seed, out_root, data_dir, as_dyn)?);
        seed_dirs.push(seed_dir(out_root, cfg, seed));
    }
    let agg = aggregate(cfg, &cfg.seeds, &evals);
    let mut out = BufWriter::new(File::create(aggregate_path(out_root, cfg))?);
    write_header(&mut out, "aggregate")?;
    serde_json::to_writer(&mut out, &agg).map_err(|e| Error::Checkpoint(e.to_string()))?;
    writeln!(out)?;
    out.flush()?;
    Ok(RunSummary { aggregate: agg, seed_dirs })
}

/// Re-evaluate a finished run directory from its stored config and final
/// parameters. `episodes`/`chunk` default to the stored settings.
pub fn evaluate_run(
    dir: &Path,
    data_dir: Option<&Path>,
    episodes: Option<usize>,
    chunk: Option<usize>,
) -> Result<DistilledEval> {
    let cfg = crate::config::parse_config(&dir.join(CONFIG_FILE))?;
    let seed = *cfg.seeds.first().ok_or_else(|| {
        Error::config("seeds", "run config lists no seed")
    })?;
    let mut trainer = AnyTrainer::build(&cfg, seed, data_dir)?;
    trainer.load_params(&dir.join(PARAMS_FILE))?;
    let report = trainer.evaluate(
        episodes.unwrap_or(cfg.eval_episodes),
        chunk.unwrap_or(cfg.eval_chunk),
    )?;
    distill(&cfg, &report)
}

/// Read one seed directory's metric stream.
pub fn read_metrics(dir: &Path) -> Result<Vec<serde_json::Value>> {
    let path = dir.join(METRICS_FILE);
    read_stream(&path, "metrics")
}

/// Read one seed directory's distilled evaluation.
pub fn read_eval(dir: &Path) -> Result<DistilledEval> {
    let path = dir.join(EVAL_FILE);
    let rows = read_stream(&path, "eval")?;
    let row = rows
        .into_iter()
        .next()
        .ok_or_else(|| Error::config(path.display().to_string(), "empty evaluation stream"))?;
    serde_json::from_value(row).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

fn read_stream(path: &Path, kind: &str) -> Result<Vec<serde_json::Value>> {
    let file = File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .transpose()?
        .ok_or_else(|| Error::config(path.display().to_string(), "empty stream"))?;
    check_header(&header, kind, path)?;
    let mut rows = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::config(path.display().to_string(), e.to_string()))?,
        );
    }
    Ok(rows)
}

/// Agent count implied by a config; used for printing context only.
pub fn agent_count(cfg: &ExperimentConfig) -> usize {
    match &cfg.env {
        EnvSetup::Pomnist { v, h } => ViewAssignment::new(*v, *h).n_agents(),
        EnvSetup::Traffic { .. } => adcomm_core::env::traffic::N_AGENTS,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    fn tiny_pomnist() -> ExperimentConfig {
        parse_config_str(
            r#"
environment = "pomnist"
seeds = [0, 1]

[pomnist]
v = 1
h = 1

[messages]
sizes = [0, 1, 2]
kind = "pseudo_gradient"
mode = "adaptive"

[channel]
capacity = 8

[schedule]
iterations = 2
batch = 8

[eval]
episodes = 16
chunk = 8
"#,
        )
        .unwrap()
    }

    fn fixture_dir() -> PathBuf {
        PathBuf::from("../../data/fixtures/mini-mnist")
    }

    #[test]
    fn run_writes_every_artifact_and_is_deterministic() {
        let cfg = tiny_pomnist();
        let tmp = tempfile::tempdir().unwrap();
        let a = run(&cfg, &tmp.path().join("a"), Some(&fixture_dir()), None).unwrap();
        let b = run(&cfg, &tmp.path().join("b"), Some(&fixture_dir()), None).unwrap();
        assert_eq!(a.aggregate.mean_return.mean, b.aggregate.mean_return.mean);
        assert_eq!(a.aggregate.mean_return.std, b.aggregate.mean_return.std);

        for dir in &a.seed_dirs {
            for f in [CONFIG_FILE, METRICS_FILE, EVAL_FILE, PARAMS_FILE] {
                assert!(dir.join(f).exists(), "missing {f} in {}", dir.display());
            }
            let rows = read_metrics(dir).unwrap();
            assert_eq!(rows.len(), 2, "one metrics row per iteration");
            let eval = read_eval(dir).unwrap();
            assert_eq!(eval.episodes, 16);
            assert!(eval.pos_listening.is_some());
        }
        let agg_a = fs::read_to_string(aggregate_path(&tmp.path().join("a"), &cfg)).unwrap();
        let agg_b = fs::read_to_string(aggregate_path(&tmp.path().join("b"), &cfg)).unwrap();
        assert_eq!(agg_a, agg_b);
    }

    #[test]
    fn stored_config_reproduces_the_run_directory_name() {
        let cfg = tiny_pomnist();
        let tmp = tempfile::tempdir().unwrap();
        let summary = run(&cfg, tmp.path(), Some(&fixture_dir()), None).unwrap();
        let dir = &summary.seed_dirs[0];
        let stored = crate::config::parse_config(&dir.join(CONFIG_FILE)).unwrap();
        assert_eq!(seed_dir(tmp.path(), &stored, stored.seeds[0]), *dir);
    }

    #[test]
    fn evaluate_run_matches_the_stored_eval() {
        let cfg = tiny_pomnist();
        let tmp = tempfile::tempdir().unwrap();
        let summary = run(&cfg, tmp.path(), Some(&fixture_dir()), None).unwrap();
        let dir = &summary.seed_dirs[1];
        let stored = read_eval(dir).unwrap();
        let again = evaluate_run(dir, Some(&fixture_dir()), None, None).unwrap();
        assert_eq!(stored.mean_return, again.mean_return);
        assert_eq!(stored.size_histogram, again.size_histogram);
    }

    #[test]
    fn header_mismatch_is_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("x");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join(METRICS_FILE), "{\"format\":\"adcomm.eval\",\"version\":1}\n").unwrap();
        let err = read_metrics(&dir).unwrap_err().to_string();
        assert!(err.contains("expected adcomm.metrics"), "{err}");
    }

    #[test]
    fn traffic_runs_without_a_dataset() {
        let cfg = parse_config_str(
            r#"
environment = "traffic"
seeds = [0]

[messages]
sizes = [0, 4]
kind = "dru"
mode = "adaptive"

[channel]
capacity = 512

[schedule]
iterations = 2
batch = 4

[eval]
episodes = 4
chunk = 2
"#,
        )
        .unwrap();
        let tmp = tempfile::tempdir().unwrap();
        let summary = run(&cfg, tmp.path(), None, None).unwrap();
        assert!(summary.aggregate.success_rate.is_some());
        assert!(summary.aggregate.pos_listening.is_none());
    }
}
