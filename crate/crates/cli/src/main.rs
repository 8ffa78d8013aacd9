use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use adcomm_cli::config::parse_config;
use adcomm_cli::{report, runner};
use adcomm_core::channel::{drop_stats_monte_carlo, Channel, Variant};
use adcomm_core::error::{Error, Result};
use adcomm_core::mnist::{fetch_verified, resolve_data_dir};
use adcomm_core::rng::{stream, Stream};

#[derive(Parser)]
#[command(name = "adcomm", about = "Train and evaluate size-adaptive communicating agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of an experiment config and write run directories.
    Train {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Directory to create run directories under.
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Dataset directory (defaults to $ADCOMM_DATA_DIR, then data/mnist).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Print one progress line per N iterations (0 silences).
        #[arg(long, default_value_t = 50)]
        every: u64,
    },
    /// Re-evaluate a finished run directory and print the distilled result.
    Evaluate {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Episode count (defaults to the stored setting).
        #[arg(long)]
        episodes: Option<usize>,
        /// Episodes evaluated at a time (defaults to the stored setting).
        #[arg(long)]
        chunk: Option<usize>,
    },
    /// Monte-Carlo drop statistics for a channel, no learning involved.
    ChannelStats {
        #[arg(long)]
        agents: usize,
        /// Comma-separated message sizes, zeros meaning silence.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<usize>,
        /// Slot count, or "unlimited".
        #[arg(long)]
        capacity: String,
        /// Slot placement: "spacing" or "uniform".
        #[arg(long, default_value = "spacing")]
        variant: String,
        #[arg(long, default_value_t = 1_000_000)]
        steps: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export finished runs to CSV.
    Export {
        /// Run directories (one per seed).
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Cross-seed aggregate table.
        #[arg(long)]
        table: Option<PathBuf>,
        /// Long-form training curves.
        #[arg(long)]
        curves: Option<PathBuf>,
    },
    /// Copy the dataset from a local directory, verifying checksums.
    Fetch {
        /// Directory holding the four official IDX files.
        #[arg(long)]
        from: PathBuf,
        /// Destination (defaults to $ADCOMM_DATA_DIR, then data/mnist).
        #[arg(long)]
        to: Option<PathBuf>,
    },
}

fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "spacing" => Ok(Variant::Spacing),
        "uniform" => Ok(Variant::Uniform),
        other => Err(Error::config("variant", format!("unknown variant {other:?}"))),
    }
}

fn build_channel(capacity: &str, variant: &str) -> Result<Channel> {
    if capacity == "unlimited" {
        return Ok(Channel::unlimited());
    }
    let slots: usize = capacity
        .parse()
        .map_err(|_| Error::config("capacity", "expected a slot count or \"unlimited\""))?;
    if slots == 0 {
        return Err(Error::config("capacity", "slot count must be positive"));
    }
    Ok(Channel::slotted(slots, parse_variant(variant)?))
}

fn run_command(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out, data, every } => {
            let cfg = parse_config(&config)?;
            println!(
                "experiment {} ({} agents, channel {}), seeds {:?}",
                cfg.hash8(),
                runner::agent_count(&cfg),
                cfg.channel_word(),
                cfg.seeds
            );
            let mut progress = |seed: u64, row: &adcomm_core::trainer::IterationMetrics| {
                if every > 0 && (row.iteration + 1) % every == 0 {
                    print!(
                        "seed {seed} iter {:>5}  return {:>8.4}",
                        row.iteration + 1,
                        row.mean_return
                    );
                    if let Some(s) = row.success_rate {
                        print!("  success {s:>6.2}%");
                    }
                    if let Some(m) = row.mean_msg_size {
                        print!("  msg {m:.2}");
                    }
                    println!();
                }
            };
            let summary = runner::run(&cfg, &out, data.as_deref(), Some(&mut progress))?;
            for dir in &summary.seed_dirs {
                println!("wrote {}", dir.display());
            }
            let agg = &summary.aggregate;
            println!(
                "aggregate: return {:.4} +- {:.4}, throughput {:.3}",
                agg.mean_return.mean, agg.mean_return.std, agg.throughput.mean
            );
            println!("wrote {}", runner::aggregate_path(&out, &cfg).display());
            Ok(())
        }
        Command::Evaluate { run, data, episodes, chunk } => {
            let eval = runner::evaluate_run(&run, data.as_deref(), episodes, chunk)?;
            let text = serde_json::to_string_pretty(&eval)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            println!("{text}");
            Ok(())
        }
        Command::ChannelStats { agents, sizes, capacity, variant, steps, seed } => {
            if agents == 0 {
                return Err(Error::config("agents", "need at least one agent"));
            }
            if sizes.is_empty() {
                return Err(Error::config("sizes", "need at least one size"));
            }
            let channel = build_channel(&capacity, &variant)?;
            let mut rng = stream(seed, Stream::EnvChannel(0));
            let stats = drop_stats_monte_carlo(&channel, &sizes, agents, steps, &mut rng);
            println!(
                "{agents} agents, capacity {capacity}, {} steps",
                stats.steps
            );
            for row in &stats.per_size {
                println!(
                    "size {:>2}: sent {:>9}  drop rate {:.4} +- {:.4}",
                    row.size, row.sent, row.drop_rate, row.std_err
                );
            }
            println!("throughput {:.4} messages delivered per step", stats.mean_throughput);
            Ok(())
        }
        Command::Export { runs, table, curves } => {
            if table.is_none() && curves.is_none() {
                return Err(Error::config("export", "pass --table and/or --curves"));
            }
            let mut warnings = Vec::new();
            if let Some(path) = table {
                warnings.extend(report::export_table(&runs, &path)?);
                println!("wrote {}", path_str(&path));
            }
            if let Some(path) = curves {
                warnings.extend(report::export_curves(&runs, &path)?);
                println!("wrote {}", path_str(&path));
            }
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            Ok(())
        }
        Command::Fetch { from, to } => {
            let dest = to.unwrap_or_else(|| resolve_data_dir(None));
            fetch_verified(&from, &dest)?;
            println!("dataset verified into {}", dest.display());
            Ok(())
        }
    }
}

fn path_str(p: &std::path::Path) -> String {
    p.display().to_string()
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
