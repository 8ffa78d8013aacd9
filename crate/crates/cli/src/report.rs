//! Result export: fold finished run directories into flat CSV files, one
//! table of cross-seed aggregates and one long-form table of training curves.
//! Missing or malformed runs are skipped with a warning so a partial sweep
//! still exports.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use adcomm_core::channel::Capacity;
use adcomm_core::error::{Error, Result};

use crate::config::{parse_config, ExperimentConfig};
use crate::runner::{aggregate, read_eval, read_metrics, Aggregate, CONFIG_FILE};

struct Group {
    cfg: ExperimentConfig,
    seeds: Vec<u64>,
    dirs: Vec<PathBuf>,
}

/// Group run directories by experiment hash. Directories whose config cannot
/// be read are reported in `warnings` and dropped.
fn group_runs(run_dirs: &[PathBuf], warnings: &mut Vec<String>) -> BTreeMap<String, Group> {
    let mut groups: BTreeMap<String, Group> = BTreeMap::new();
    for dir in run_dirs {
        let cfg = match parse_config(&dir.join(CONFIG_FILE)) {
            Ok(cfg) => cfg,
            Err(e) => {
                warnings.push(format!("{}: {e}", dir.display()));
                continue;
            }
        };
        let seed = match cfg.seeds.as_slice() {
            [s] => *s,
            _ => {
                warnings.push(format!(
                    "{}: run config must pin exactly one seed",
                    dir.display()
                ));
                continue;
            }
        };
        let entry = groups.entry(cfg.hash8()).or_insert_with(|| Group {
            cfg: cfg.clone(),
            seeds: Vec::new(),
            dirs: Vec::new(),
        });
        entry.seeds.push(seed);
        entry.dirs.push(dir.clone());
    }
    groups
}

/// Sort key: unlimited channels first, then larger capacities, then hash.
fn capacity_rank(cfg: &ExperimentConfig) -> (u8, i64) {
    match cfg.channel.capacity {
        Capacity::Unlimited => (0, 0),
        Capacity::Slots(c) => (1, -(c as i64)),
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

fn fmt_stat(s: Option<crate::runner::Stat>) -> (String, String) {
    match s {
        Some(s) => (format!("{}", s.mean), format!("{}", s.std)),
        None => (String::new(), String::new()),
    }
}

/// One aggregate row per experiment, seeds folded to mean and sample std.
/// Returns warnings for runs that were skipped.
pub fn export_table(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    let groups = group_runs(run_dirs, &mut warnings);

    let mut rows: Vec<(ExperimentConfig, Aggregate)> = Vec::new();
    for group in groups.into_values() {
        let mut seeds = Vec::new();
        let mut evals = Vec::new();
        for (seed, dir) in group.seeds.iter().zip(&group.dirs) {
            match read_eval(dir) {
                Ok(eval) => {
                    seeds.push(*seed);
                    evals.push(eval);
                }
                Err(e) => warnings.push(format!("{}: {e}", dir.display())),
            }
        }
        if evals.is_empty() {
            continue;
        }
        rows.push((group.cfg.clone(), aggregate(&group.cfg, &seeds, &evals)));
    }
    rows.sort_by(|a, b| {
        capacity_rank(&a.0)
            .cmp(&capacity_rank(&b.0))
            .then_with(|| a.1.config.cmp(&b.1.config))
    });

    let mut w = BufWriter::new(File::create(out)?);
    writeln!(
        w,
        "config,channel_size,seeds,mean_return,mean_return_std,\
         drops,drops_std,pos_listening,pos_listening_std,\
         pos_signaling,pos_signaling_std,throughput,throughput_std,\
         mean_msg_size,mean_msg_size_std"
    )?;
    for (_, agg) in &rows {
        let (pl, pl_std) = fmt_stat(agg.pos_listening);
        let (ps, ps_std) = fmt_stat(agg.pos_signaling);
        let (ms, ms_std) = fmt_stat(agg.mean_msg_size);
        writeln!(
            w,
            "{},{},{},{},{},{},{},{pl},{pl_std},{ps},{ps_std},{},{},{ms},{ms_std}",
            agg.config,
            agg.channel_size,
            agg.seeds.len(),
            agg.mean_return.mean,
            agg.mean_return.std,
            agg.drops_per_step.mean,
            agg.drops_per_step.std,
            agg.throughput.mean,
            agg.throughput.std,
        )?;
    }
    w.flush()?;
    Ok(warnings)
}

/// Long-form training curves, one row per (experiment, seed, iteration).
pub fn export_curves(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<String>> {
    let mut warnings = Vec::new();
    let groups = group_runs(run_dirs, &mut warnings);

    let mut w = BufWriter::new(File::create(out)?);
    writeln!(
        w,
        "config,seed,iteration,mean_return,success_rate,loss_size,loss_action,\
         throughput,mean_msg_size,explore"
    )?;
    for (hash, group) in &groups {
        for (seed, dir) in group.seeds.iter().zip(&group.dirs) {
            let rows = match read_metrics(dir) {
                Ok(rows) => rows,
                Err(e) => {
                    warnings.push(format!("{}: {e}", dir.display()));
                    continue;
                }
            };
            for row in rows {
                let get = |k: &str| -> Result<f64> {
                    row.get(k).and_then(|v| v.as_f64()).ok_or_else(|| {
                        Error::config(dir.display().to_string(), format!("metrics row lacks {k}"))
                    })
                };
                let opt = |k: &str| row.get(k).and_then(|v| v.as_f64());
                writeln!(
                    w,
                    "{hash},{seed},{},{},{},{},{},{},{},{}",
                    get("iteration")?,
                    get("mean_return")?,
                    fmt_opt(opt("success_rate")),
                    get("loss_size")?,
                    get("loss_action")?,
                    get("throughput")?,
                    fmt_opt(opt("mean_msg_size")),
                    get("explore")?,
                )?;
            }
        }
    }
    w.flush()?;
    Ok(warnings)
}
