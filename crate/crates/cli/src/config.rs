//! Experiment configuration: a TOML schema with environment-specific
//! defaults, validation with field paths, and a canonical serialization that
//! names run directories.
//!
//! The canonical form is itself valid config, so a run directory's
//! `config.toml` round-trips through `parse_config` bit-for-bit. The run
//! hash covers everything except the seed list: seeds pick run directories,
//! they do not change what the experiment is.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use adcomm_core::agent::{MessageKind, MAX_QVALUES_SIZE};
use adcomm_core::agent::SizeSet;
use adcomm_core::channel::{Capacity, Channel, Variant};
use adcomm_core::env::traffic::Curriculum;
use adcomm_core::error::{Error, Result};
use adcomm_core::trainer::{
    ExploreKind, ExploreSchedule, LinearSchedule, PomnistSpec, Schedule, SelectionMode,
    TrafficSpec,
};

/// Which task the experiment runs, with its task-specific knobs.
#[derive(Clone, Debug, PartialEq)]
pub enum EnvSetup {
    Pomnist { v: usize, h: usize },
    Traffic { curriculum: Curriculum },
}

/// A validated experiment: every field resolved, every default filled.
#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub env: EnvSetup,
    pub sizes: SizeSet,
    pub kind: MessageKind,
    pub mode: SelectionMode,
    pub channel: Channel,
    pub schedule: Schedule,
    pub seeds: Vec<u64>,
    pub eval_episodes: usize,
    pub eval_chunk: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawEnvironment {
    Pomnist,
    Traffic,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPomnist {
    v: usize,
    h: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraffic {
    spawn_low: Option<f64>,
    spawn_high: Option<f64>,
    curriculum_start: Option<u64>,
    curriculum_end: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawKind {
    Continuous,
    PseudoGradient,
    Dru,
    QValues,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMessages {
    sizes: Vec<usize>,
    kind: RawKind,
    dru_sigma: Option<f64>,
    mode: SelectionMode,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawCapacity {
    Slots(i64),
    Word(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawVariant {
    Spacing,
    Uniform,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawChannel {
    capacity: RawCapacity,
    variant: Option<RawVariant>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchedule {
    iterations: Option<u64>,
    batch: Option<usize>,
    lr: Option<f64>,
    gamma: Option<f64>,
    alpha: Option<f64>,
    /// 0 disables clipping explicitly; absent takes the environment default.
    grad_clip: Option<f64>,
    explore_kind: Option<ExploreKind>,
    explore_from: Option<f64>,
    explore_to: Option<f64>,
    explore_start: Option<u64>,
    explore_end: Option<u64>,
    entropy_from: Option<f64>,
    entropy_to: Option<f64>,
    entropy_over: Option<u64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEval {
    episodes: Option<usize>,
    chunk: Option<usize>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    environment: RawEnvironment,
    seeds: Option<Vec<u64>>,
    pomnist: Option<RawPomnist>,
    traffic: Option<RawTraffic>,
    messages: RawMessages,
    channel: RawChannel,
    schedule: Option<RawSchedule>,
    eval: Option<RawEval>,
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let raw: RawConfig =
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
    resolve(raw)
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig> {
    let is_pomnist = raw.environment == RawEnvironment::Pomnist;

    let env = match raw.environment {
        RawEnvironment::Pomnist => {
            if raw.traffic.is_some() {
                return Err(Error::config("traffic", "table not allowed when environment = \"pomnist\""));
            }
            let p = raw
                .pomnist
                .ok_or_else(|| Error::config("pomnist", "environment = \"pomnist\" needs a [pomnist] table with v and h"))?;
            EnvSetup::Pomnist { v: p.v, h: p.h }
        }
        RawEnvironment::Traffic => {
            if raw.pomnist.is_some() {
                return Err(Error::config("pomnist", "table not allowed when environment = \"traffic\""));
            }
            let t = raw.traffic.unwrap_or(RawTraffic {
                spawn_low: None,
                spawn_high: None,
                curriculum_start: None,
                curriculum_end: None,
            });
            let d = Curriculum::default();
            let c = Curriculum {
                low: t.spawn_low.unwrap_or(d.low),
                high: t.spawn_high.unwrap_or(d.high),
                start: t.curriculum_start.unwrap_or(d.start),
                end: t.curriculum_end.unwrap_or(d.end),
            };
            if !(0.0..=1.0).contains(&c.low) || !(0.0..=1.0).contains(&c.high) {
                return Err(Error::config("traffic.spawn_low", "spawn rates must lie in [0, 1]"));
            }
            if c.end < c.start {
                return Err(Error::config("traffic.curriculum_end", "curriculum ends before it starts"));
            }
            EnvSetup::Traffic { curriculum: c }
        }
    };

    let sizes = SizeSet::new(raw.messages.sizes)
        .map_err(|e| Error::config("messages.sizes", e.to_string()))?;
    let kind = match raw.messages.kind {
        RawKind::Continuous => MessageKind::Continuous,
        RawKind::PseudoGradient => MessageKind::PseudoGradient,
        RawKind::Dru => MessageKind::Dru { sigma: raw.messages.dru_sigma.unwrap_or(2.0) },
        RawKind::QValues => MessageKind::QValues,
    };
    if raw.messages.dru_sigma.is_some() && raw.messages.kind != RawKind::Dru {
        return Err(Error::config("messages.dru_sigma", "only meaningful with kind = \"dru\""));
    }
    if kind == MessageKind::QValues && sizes.max_size() > MAX_QVALUES_SIZE {
        return Err(Error::config(
            "messages.sizes",
            format!("codebook payloads cap at {MAX_QVALUES_SIZE} features (2^size codewords)"),
        ));
    }
    let mode = raw.messages.mode;
    if mode == SelectionMode::Fixed && sizes.len() != 1 {
        return Err(Error::config("messages.mode", "fixed mode requires exactly one size"));
    }

    let channel = match raw.channel.capacity {
        RawCapacity::Slots(n) if n >= 1 => Channel::slotted(
            n as usize,
            match raw.channel.variant.unwrap_or(RawVariant::Spacing) {
                RawVariant::Spacing => Variant::Spacing,
                RawVariant::Uniform => Variant::Uniform,
            },
        ),
        RawCapacity::Slots(_) => {
            return Err(Error::config("channel.capacity", "need at least one slot (or \"unlimited\")"));
        }
        RawCapacity::Word(w) if w == "unlimited" => {
            if raw.channel.variant.is_some() {
                return Err(Error::config("channel.variant", "an unlimited channel has no start variant"));
            }
            Channel::unlimited()
        }
        RawCapacity::Word(w) => {
            return Err(Error::config("channel.capacity", format!("expected a slot count or \"unlimited\", got {w:?}")));
        }
    };

    let s = raw.schedule.unwrap_or(RawSchedule {
        iterations: None,
        batch: None,
        lr: None,
        gamma: None,
        alpha: None,
        grad_clip: None,
        explore_kind: None,
        explore_from: None,
        explore_to: None,
        explore_start: None,
        explore_end: None,
        entropy_from: None,
        entropy_to: None,
        entropy_over: None,
    });
    let grad_clip = match s.grad_clip {
        None => {
            if is_pomnist {
                None
            } else {
                Some(0.1)
            }
        }
        Some(c) if c == 0.0 => None,
        Some(c) if c > 0.0 => Some(c),
        Some(_) => return Err(Error::config("schedule.grad_clip", "clip norm cannot be negative")),
    };
    let explore_defaults = ExploreSchedule::standard();
    let entropy_defaults = LinearSchedule::standard_entropy();
    let schedule = Schedule {
        iterations: s.iterations.unwrap_or(2000),
        n_envs: s.batch.unwrap_or(if is_pomnist { 2048 } else { 128 }),
        gamma: s.gamma.unwrap_or(1.0),
        alpha: s.alpha.unwrap_or(if is_pomnist { 0.5 } else { 0.1 }),
        lr: s.lr.unwrap_or(1e-3),
        grad_clip,
        explore: ExploreSchedule {
            kind: s.explore_kind.unwrap_or(explore_defaults.kind),
            from: s.explore_from.unwrap_or(explore_defaults.from),
            to: s.explore_to.unwrap_or(explore_defaults.to),
            start: s.explore_start.unwrap_or(explore_defaults.start),
            end: s.explore_end.unwrap_or(explore_defaults.end),
        },
        entropy: LinearSchedule {
            from: s.entropy_from.unwrap_or(entropy_defaults.from),
            to: s.entropy_to.unwrap_or(entropy_defaults.to),
            over: s.entropy_over.unwrap_or(entropy_defaults.over),
        },
    };
    schedule.validate()?;
    if schedule.iterations == 0 {
        return Err(Error::config("schedule.iterations", "need at least one iteration"));
    }

    let e = raw.eval.unwrap_or(RawEval { episodes: None, chunk: None });
    let eval_episodes = e.episodes.unwrap_or(if is_pomnist { 10_000 } else { 2048 });
    let eval_chunk = e.chunk.unwrap_or(if is_pomnist { 256 } else { 128 });
    if eval_episodes == 0 || eval_chunk == 0 {
        return Err(Error::config("eval.episodes", "evaluation needs at least one episode and a positive chunk"));
    }

    let seeds = raw.seeds.unwrap_or_else(|| (0..5).collect());
    if seeds.is_empty() {
        return Err(Error::config("seeds", "need at least one seed"));
    }

    Ok(ExperimentConfig {
        env,
        sizes,
        kind,
        mode,
        channel,
        schedule,
        seeds,
        eval_episodes,
        eval_chunk,
    })
}

/// Format a float so TOML keeps it a float and round-trips exactly.
fn num(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e15 {
        format!("{v:.1}")
    } else {
        format!("{v}")
    }
}

impl ExperimentConfig {
    fn mode_word(&self) -> &'static str {
        match self.mode {
            SelectionMode::Adaptive => "adaptive",
            SelectionMode::Fixed => "fixed",
            SelectionMode::Random => "random",
            SelectionMode::Zeros => "zeros",
        }
    }

    fn kind_word(&self) -> &'static str {
        match self.kind {
            MessageKind::Continuous => "continuous",
            MessageKind::PseudoGradient => "pseudo_gradient",
            MessageKind::Dru { .. } => "dru",
            MessageKind::QValues => "q_values",
        }
    }

    /// The channel size as it appears in reports.
    pub fn channel_word(&self) -> String {
        match self.channel.capacity {
            Capacity::Slots(n) => n.to_string(),
            Capacity::Unlimited => "unlimited".into(),
        }
    }

    /// Canonical TOML: stable field order, every default explicit. Parsing
    /// this text reproduces the config exactly.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let envword = match self.env {
            EnvSetup::Pomnist { .. } => "pomnist",
            EnvSetup::Traffic { .. } => "traffic",
        };
        let _ = writeln!(out, "environment = \"{envword}\"");
        let seeds: Vec<String> = self.seeds.iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "seeds = [{}]", seeds.join(", "));
        match &self.env {
            EnvSetup::Pomnist { v, h } => {
                let _ = writeln!(out, "\n[pomnist]\nv = {v}\nh = {h}");
            }
            EnvSetup::Traffic { curriculum } => {
                let _ = writeln!(
                    out,
                    "\n[traffic]\nspawn_low = {}\nspawn_high = {}\ncurriculum_start = {}\ncurriculum_end = {}",
                    num(curriculum.low),
                    num(curriculum.high),
                    curriculum.start,
                    curriculum.end
                );
            }
        }
        let sizes: Vec<String> = self.sizes.as_slice().iter().map(|s| s.to_string()).collect();
        let _ = writeln!(out, "\n[messages]\nsizes = [{}]", sizes.join(", "));
        let _ = writeln!(out, "kind = \"{}\"", self.kind_word());
        if let MessageKind::Dru { sigma } = self.kind {
            let _ = writeln!(out, "dru_sigma = {}", num(sigma));
        }
        let _ = writeln!(out, "mode = \"{}\"", self.mode_word());
        match self.channel.capacity {
            Capacity::Slots(n) => {
                let variant = match self.channel.variant {
                    Variant::Spacing => "spacing",
                    Variant::Uniform => "uniform",
                };
                let _ = writeln!(out, "\n[channel]\ncapacity = {n}\nvariant = \"{variant}\"");
            }
            Capacity::Unlimited => {
                let _ = writeln!(out, "\n[channel]\ncapacity = \"unlimited\"");
            }
        }
        let s = &self.schedule;
        let kind = match s.explore.kind {
            ExploreKind::Boltzmann => "boltzmann",
            ExploreKind::EpsGreedy => "eps_greedy",
        };
        let _ = writeln!(
            out,
            "\n[schedule]\niterations = {}\nbatch = {}\nlr = {}\ngamma = {}\nalpha = {}\ngrad_clip = {}",
            s.iterations,
            s.n_envs,
            num(s.lr),
            num(s.gamma),
            num(s.alpha),
            num(s.grad_clip.unwrap_or(0.0)),
        );
        let _ = writeln!(
            out,
            "explore_kind = \"{kind}\"\nexplore_from = {}\nexplore_to = {}\nexplore_start = {}\nexplore_end = {}",
            num(s.explore.from),
            num(s.explore.to),
            s.explore.start,
            s.explore.end
        );
        let _ = writeln!(
            out,
            "entropy_from = {}\nentropy_to = {}\nentropy_over = {}",
            num(s.entropy.from),
            num(s.entropy.to),
            s.entropy.over
        );
        let _ = writeln!(
            out,
            "\n[eval]\nepisodes = {}\nchunk = {}",
            self.eval_episodes, self.eval_chunk
        );
        out
    }

    /// Eight hex characters identifying the experiment; the seed list is
    /// excluded so every seed of one experiment shares the prefix.
    pub fn hash8(&self) -> String {
        let mut text = String::new();
        for line in self.canonical().lines() {
            if !line.starts_with("seeds = ") {
                text.push_str(line);
                text.push('\n');
            }
        }
        let digest = Sha256::digest(text.as_bytes());
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// A copy of this config scoped to one seed, as written into that seed's
    /// run directory.
    pub fn for_seed(&self, seed: u64) -> ExperimentConfig {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c
    }

    pub fn pomnist_spec(&self, seed: u64) -> Result<PomnistSpec> {
        match &self.env {
            EnvSetup::Pomnist { v, h } => Ok(PomnistSpec {
                v: *v,
                h: *h,
                sizes: self.sizes.clone(),
                kind: self.kind,
                mode: self.mode,
                channel: self.channel,
                schedule: self.schedule.clone(),
                seed,
            }),
            EnvSetup::Traffic { .. } => {
                Err(Error::config("environment", "expected a pomnist experiment"))
            }
        }
    }

    pub fn traffic_spec(&self, seed: u64) -> Result<TrafficSpec> {
        match &self.env {
            EnvSetup::Traffic { curriculum } => Ok(TrafficSpec {
                sizes: self.sizes.clone(),
                kind: self.kind,
                mode: self.mode,
                channel: self.channel,
                schedule: self.schedule.clone(),
                curriculum: *curriculum,
                seed,
            }),
            EnvSetup::Pomnist { .. } => {
                Err(Error::config("environment", "expected a traffic experiment"))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL_POMNIST: &str = r#"
environment = "pomnist"

[pomnist]
v = 1
h = 1

[messages]
sizes = [0, 1, 2, 4]
kind = "pseudo_gradient"
mode = "adaptive"

[channel]
capacity = 8
"#;

    #[test]
    fn defaults_fill_in_for_each_environment() {
        let c = parse_config_str(MINIMAL_POMNIST).unwrap();
        assert_eq!(c.schedule.iterations, 2000);
        assert_eq!(c.schedule.n_envs, 2048);
        assert_eq!(c.schedule.alpha, 0.5);
        assert_eq!(c.schedule.grad_clip, None);
        assert_eq!(c.eval_episodes, 10_000);
        assert_eq!(c.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.sizes.as_slice(), &[0, 1, 2, 4]);
        assert_eq!(c.sizes.max_size(), 4);

        let t = parse_config_str(
            r#"
environment = "traffic"

[messages]
sizes = [0, 8]
kind = "dru"
mode = "adaptive"

[channel]
capacity = 512
"#,
        )
        .unwrap();
        assert_eq!(t.schedule.n_envs, 128);
        assert_eq!(t.schedule.alpha, 0.1);
        assert_eq!(t.schedule.grad_clip, Some(0.1));
        assert_eq!(t.eval_episodes, 2048);
        match t.env {
            EnvSetup::Traffic { curriculum } => assert_eq!(curriculum.low, 0.1),
            _ => panic!("wrong environment"),
        }
        assert!(matches!(t.kind, MessageKind::Dru { sigma } if sigma == 2.0));
    }

    #[test]
    fn invariants_fail_with_field_paths() {
        let fixed_two = MINIMAL_POMNIST.replace("mode = \"adaptive\"", "mode = \"fixed\"");
        let err = parse_config_str(&fixed_two).unwrap_err().to_string();
        assert!(err.contains("messages.mode"), "{err}");

        let bad_cap = MINIMAL_POMNIST.replace("capacity = 8", "capacity = 0");
        let err = parse_config_str(&bad_cap).unwrap_err().to_string();
        assert!(err.contains("channel.capacity"), "{err}");

        let empty = MINIMAL_POMNIST.replace("sizes = [0, 1, 2, 4]", "sizes = []");
        let err = parse_config_str(&empty).unwrap_err().to_string();
        assert!(err.contains("messages.sizes"), "{err}");

        let unknown = format!("{MINIMAL_POMNIST}\n[schedule]\nlearning_rate = 0.1\n");
        let err = parse_config_str(&unknown).unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");

        let sigma = MINIMAL_POMNIST
            .replace("kind = \"pseudo_gradient\"", "kind = \"continuous\"\ndru_sigma = 1.0");
        let err = parse_config_str(&sigma).unwrap_err().to_string();
        assert!(err.contains("messages.dru_sigma"), "{err}");
    }

    #[test]
    fn unlimited_channel_and_word_errors() {
        let unlimited = MINIMAL_POMNIST.replace("capacity = 8", "capacity = \"unlimited\"");
        let c = parse_config_str(&unlimited).unwrap();
        assert_eq!(c.channel.capacity, Capacity::Unlimited);
        assert_eq!(c.channel_word(), "unlimited");

        let typo = MINIMAL_POMNIST.replace("capacity = 8", "capacity = \"huge\"");
        let err = parse_config_str(&typo).unwrap_err().to_string();
        assert!(err.contains("channel.capacity"), "{err}");
    }

    #[test]
    fn canonical_round_trips_and_hashes_stably() {
        let c = parse_config_str(MINIMAL_POMNIST).unwrap();
        let canon = c.canonical();
        let c2 = parse_config_str(&canon).unwrap();
        assert_eq!(canon, c2.canonical());
        assert_eq!(c.hash8(), c2.hash8());

        // Seeds change the canonical text but not the hash.
        let seeded = c.for_seed(3);
        assert_ne!(canon, seeded.canonical());
        assert_eq!(c.hash8(), seeded.hash8());

        // Any effective field changes the hash.
        let other = parse_config_str(&MINIMAL_POMNIST.replace("capacity = 8", "capacity = 4")).unwrap();
        assert_ne!(c.hash8(), other.hash8());
    }

    #[test]
    fn explicit_zero_clip_disables_the_traffic_default() {
        let t = r#"
environment = "traffic"

[messages]
sizes = [0, 8]
kind = "dru"
mode = "adaptive"

[channel]
capacity = 512

[schedule]
grad_clip = 0.0
"#;
        let c = parse_config_str(t).unwrap();
        assert_eq!(c.schedule.grad_clip, None);
        let c2 = parse_config_str(&c.canonical()).unwrap();
        assert_eq!(c2.schedule.grad_clip, None);
    }

    #[test]
    fn codebook_size_cap_is_enforced() {
        let big = MINIMAL_POMNIST
            .replace("kind = \"pseudo_gradient\"", "kind = \"q_values\"")
            .replace("sizes = [0, 1, 2, 4]", "sizes = [0, 9]");
        let err = parse_config_str(&big).unwrap_err().to_string();
        assert!(err.contains("messages.sizes"), "{err}");
    }
}
