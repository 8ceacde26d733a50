use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::cache::CacheConfig;
use crate::engine::SimConfig;
use crate::flusher::FlusherConfig;
use crate::queues::QueueConfig;
use crate::ssd::SsdConfig;
use crate::workload::{Alignment, IssueModel, Pattern, WorkloadSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("unknown preset `{0}` (try --list-presets)")]
    UnknownPreset(String),
    #[error("{0}")]
    Invalid(String),
}

/// A variant of the base configuration executed alongside the others with
/// the same seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    AsIs,
    /// Cache on, flusher off.
    Baseline,
    /// Cache and flusher on.
    Flusher,
    /// No cache: application I/O goes straight to the devices.
    Direct,
    /// The base configuration with one issue stream per SSD.
    Independent,
    /// Direct I/O with one issue stream per SSD: what the devices deliver
    /// when none of them waits for another.
    Ceiling,
    NoGc,
}

impl Arm {
    pub const ALL: [Arm; 7] = [
        Arm::AsIs,
        Arm::Baseline,
        Arm::Flusher,
        Arm::Direct,
        Arm::Independent,
        Arm::Ceiling,
        Arm::NoGc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::AsIs => "as-is",
            Arm::Baseline => "baseline",
            Arm::Flusher => "flusher",
            Arm::Direct => "direct",
            Arm::Independent => "independent",
            Arm::Ceiling => "ceiling",
            Arm::NoGc => "no-gc",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Arm::AsIs => {}
            Arm::Baseline => {
                cfg.cache_enabled = true;
                cfg.flusher_enabled = false;
            }
            Arm::Flusher => {
                cfg.cache_enabled = true;
                cfg.flusher_enabled = true;
            }
            Arm::Direct => {
                cfg.cache_enabled = false;
                cfg.flusher_enabled = false;
            }
            Arm::Independent => cfg.issue = IssueKind::Independent,
            Arm::Ceiling => {
                cfg.cache_enabled = false;
                cfg.flusher_enabled = false;
                cfg.issue = IssueKind::Independent;
            }
            Arm::NoGc => cfg.ssd.gc_enabled = false,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("arms are {}", Arm::ALL.map(Arm::name).join(", ")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueKind {
    Sync,
    Async,
    Independent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<String>,
}

/// Every documented key with its default, in README order.
pub const KEYS: &[(&str, &str)] = &[
    ("label", "run"),
    ("seed", "1"),
    ("num_ssds", "1"),
    ("stripe_unit", "4096"),
    ("arms", "as-is"),
    ("ssd.page_size", "4096"),
    ("ssd.pages_per_block", "128"),
    ("ssd.physical_blocks", "128"),
    ("ssd.over_provision", "0.1"),
    ("ssd.read_us", "250"),
    ("ssd.write_us", "525"),
    ("ssd.erase_us", "900"),
    ("ssd.copy_page_us", "0.6"),
    ("ssd.max_outstanding", "32"),
    ("ssd.gc_low_watermark", "0.02"),
    ("ssd.gc_high_watermark", "0.06"),
    ("ssd.gc_enabled", "true"),
    ("ssd.jitter_us", "0"),
    ("cache.enabled", "true"),
    ("cache.pages", "0"),
    ("cache.set_size", "12"),
    ("cache.gclock_cap", "8"),
    ("cache.initial_hits", "1"),
    ("queue.high_capacity", "64"),
    ("queue.low_capacity", "4096"),
    ("queue.reserved_high_slots", "7"),
    ("queue.discard_threshold", "10"),
    ("flusher.enabled", "true"),
    ("flusher.threshold", "6"),
    ("flusher.batch", "2"),
    ("flusher.global_cap_per_ssd", "2048"),
    ("workload.pattern", "uniform"),
    ("workload.zipf_exponent", "0.99"),
    ("workload.read_fraction", "0"),
    ("workload.op_size", "4096"),
    ("workload.alignment", "aligned"),
    ("workload.issue", "async"),
    ("workload.depth_per_ssd", "32"),
    ("workload.threads_per_ssd", "32"),
    ("workload.occupancy", "0.6"),
    ("workload.ops", "100000"),
    ("workload.ops_per_ssd", "0"),
    ("run.warmup_fraction", "0.1"),
    ("run.sample_every", "256"),
    ("run.samples_csv", "false"),
    ("run.check_invariants", "true"),
    ("run.precondition_passes", "2"),
];

/// Parsed configuration of one experiment: a base run, the arms executed
/// for every point, and the sweeps spanning the points.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub label: String,
    pub seed: u64,
    pub num_ssds: usize,
    pub stripe_unit: u64,
    pub arms: Vec<Arm>,
    pub sweeps: Vec<Sweep>,
    pub ssd: SsdConfig,
    pub cache_enabled: bool,
    pub cache: CacheConfig,
    pub queues: QueueConfig,
    pub flusher_enabled: bool,
    pub flusher: FlusherConfig,
    pub zipfian: bool,
    pub zipf_exponent: f64,
    pub read_fraction: f64,
    pub op_size: u64,
    pub alignment: Alignment,
    pub issue: IssueKind,
    pub depth_per_ssd: usize,
    pub threads_per_ssd: usize,
    pub occupancy: f64,
    pub ops: u64,
    /// When non-zero, replaces `ops` with this many ops per SSD.
    pub ops_per_ssd: u64,
    pub warmup_fraction: f64,
    pub sample_every: u64,
    pub samples_csv: bool,
    pub check_invariants: bool,
    pub precondition_passes: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut cfg = Self {
            label: String::new(),
            seed: 0,
            num_ssds: 0,
            stripe_unit: 0,
            arms: Vec::new(),
            sweeps: Vec::new(),
            ssd: SsdConfig::default(),
            cache_enabled: false,
            cache: CacheConfig::default(),
            queues: QueueConfig::default(),
            flusher_enabled: false,
            flusher: FlusherConfig::default(),
            zipfian: false,
            zipf_exponent: 0.0,
            read_fraction: 0.0,
            op_size: 0,
            alignment: Alignment::Aligned,
            issue: IssueKind::Async,
            depth_per_ssd: 0,
            threads_per_ssd: 0,
            occupancy: 0.0,
            ops: 0,
            ops_per_ssd: 0,
            warmup_fraction: 0.0,
            sample_every: 0,
            samples_csv: false,
            check_invariants: false,
            precondition_passes: 0.0,
        };
        for (key, value) in KEYS {
            cfg.set(key, value).expect("documented defaults parse");
        }
        cfg
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| bad(key, value, e.to_string()))
}

fn bad(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

fn positive<T: FromStr + PartialOrd + Default>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    let v: T = parse(key, value)?;
    if v > T::default() {
        Ok(v)
    } else {
        Err(bad(key, value, "must be positive"))
    }
}

fn fraction(key: &str, value: &str, lo_open: bool, hi_open: bool) -> Result<f64, ConfigError> {
    let v: f64 = parse(key, value)?;
    let lo_ok = if lo_open { v > 0.0 } else { v >= 0.0 };
    let hi_ok = if hi_open { v < 1.0 } else { v <= 1.0 };
    if lo_ok && hi_ok {
        Ok(v)
    } else {
        let l = if lo_open { '(' } else { '[' };
        let h = if hi_open { ')' } else { ']' };
        Err(bad(key, value, format!("must lie in {l}0, 1{h}")))
    }
}

fn list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

impl RunConfig {
    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: line.into(),
                });
            };
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, text: &str) -> Result<(), ConfigError> {
        let (key, value) = text.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            text: text.into(),
        })?;
        self.set(key.trim(), value.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if let Some(inner) = key.strip_prefix("sweep.") {
            return self.set_sweep(inner, value);
        }
        match key {
            "label" => self.label = value.into(),
            "seed" => self.seed = parse(key, value)?,
            "num_ssds" => self.num_ssds = positive(key, value)?,
            "stripe_unit" => self.stripe_unit = positive(key, value)?,
            "arms" => {
                let arms = list(value)
                    .iter()
                    .map(|a| a.parse::<Arm>().map_err(|e| bad(key, a, e)))
                    .collect::<Result<Vec<_>, _>>()?;
                if arms.is_empty() {
                    return Err(bad(key, value, "needs at least one arm"));
                }
                self.arms = arms;
            }
            "ssd.page_size" => self.ssd.page_size = positive(key, value)?,
            "ssd.pages_per_block" => self.ssd.pages_per_block = positive(key, value)?,
            "ssd.physical_blocks" => self.ssd.physical_blocks = positive(key, value)?,
            "ssd.over_provision" => self.ssd.over_provision = fraction(key, value, true, true)?,
            "ssd.read_us" => self.ssd.read_service_us = positive(key, value)?,
            "ssd.write_us" => self.ssd.write_service_us = positive(key, value)?,
            "ssd.erase_us" => self.ssd.erase_us = parse(key, value)?,
            "ssd.copy_page_us" => self.ssd.copy_page_us = parse(key, value)?,
            "ssd.max_outstanding" => {
                self.ssd.max_outstanding = positive(key, value)?;
                self.queues.max_outstanding = self.ssd.max_outstanding;
            }
            "ssd.gc_low_watermark" => self.ssd.gc_low_watermark = fraction(key, value, true, true)?,
            "ssd.gc_high_watermark" => self.ssd.gc_high_watermark = fraction(key, value, true, true)?,
            "ssd.gc_enabled" => self.ssd.gc_enabled = parse(key, value)?,
            "ssd.jitter_us" => self.ssd.jitter_us = parse(key, value)?,
            "cache.enabled" => self.cache_enabled = parse(key, value)?,
            "cache.pages" => self.cache.pages = parse(key, value)?,
            "cache.set_size" => self.cache.set_size = positive(key, value)?,
            "cache.gclock_cap" => self.cache.gclock_cap = positive(key, value)?,
            "cache.initial_hits" => self.cache.initial_hits = parse(key, value)?,
            "queue.high_capacity" => self.queues.high_capacity = positive(key, value)?,
            "queue.low_capacity" => self.queues.low_capacity = positive(key, value)?,
            "queue.reserved_high_slots" => self.queues.reserved_high_slots = parse(key, value)?,
            "queue.discard_threshold" => self.queues.discard_threshold = parse(key, value)?,
            "flusher.enabled" => self.flusher_enabled = parse(key, value)?,
            "flusher.threshold" => self.flusher.threshold = parse(key, value)?,
            "flusher.batch" => self.flusher.batch = positive(key, value)?,
            "flusher.global_cap_per_ssd" => self.flusher.global_cap_per_ssd = positive(key, value)?,
            "workload.pattern" => {
                self.zipfian = match value {
                    "uniform" => false,
                    "zipfian" => true,
                    _ => return Err(bad(key, value, "expected uniform or zipfian")),
                }
            }
            "workload.zipf_exponent" => self.zipf_exponent = positive(key, value)?,
            "workload.read_fraction" => self.read_fraction = fraction(key, value, false, false)?,
            "workload.op_size" => self.op_size = positive(key, value)?,
            "workload.alignment" => {
                self.alignment = match value {
                    "aligned" => Alignment::Aligned,
                    "unaligned" => Alignment::Unaligned,
                    _ => return Err(bad(key, value, "expected aligned or unaligned")),
                }
            }
            "workload.issue" => {
                self.issue = match value {
                    "sync" => IssueKind::Sync,
                    "async" => IssueKind::Async,
                    "independent" => IssueKind::Independent,
                    _ => return Err(bad(key, value, "expected sync, async or independent")),
                }
            }
            "workload.depth_per_ssd" => self.depth_per_ssd = positive(key, value)?,
            "workload.threads_per_ssd" => self.threads_per_ssd = positive(key, value)?,
            "workload.occupancy" => self.occupancy = fraction(key, value, true, false)?,
            "workload.ops" => self.ops = positive(key, value)?,
            "workload.ops_per_ssd" => self.ops_per_ssd = parse(key, value)?,
            "run.warmup_fraction" => self.warmup_fraction = fraction(key, value, false, true)?,
            "run.sample_every" => self.sample_every = parse(key, value)?,
            "run.samples_csv" => self.samples_csv = parse(key, value)?,
            "run.check_invariants" => self.check_invariants = parse(key, value)?,
            "run.precondition_passes" => {
                let v: f64 = parse(key, value)?;
                if !(v >= 0.0) {
                    return Err(bad(key, value, "must be non-negative"));
                }
                self.precondition_passes = v;
            }
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    fn set_sweep(&mut self, inner: &str, value: &str) -> Result<(), ConfigError> {
        let key = format!("sweep.{inner}");
        if matches!(inner, "arms" | "label") || inner.starts_with("sweep.") {
            return Err(ConfigError::BadValue {
                key,
                value: value.into(),
                reason: "this key cannot be swept".into(),
            });
        }
        let values = list(value);
        if values.is_empty() {
            return Err(bad(&key, value, "needs at least one value"));
        }
        let mut probe = self.clone();
        for v in &values {
            probe.set(inner, v)?;
        }
        let sweep = Sweep {
            key: inner.into(),
            values,
        };
        match self.sweeps.iter_mut().find(|s| s.key == inner) {
            Some(s) => *s = sweep,
            None => self.sweeps.push(sweep),
        }
        Ok(())
    }

    pub fn pattern(&self) -> Pattern {
        if self.zipfian {
            Pattern::Zipfian {
                exponent: self.zipf_exponent,
            }
        } else {
            Pattern::Uniform
        }
    }

    pub fn issue_model(&self) -> IssueModel {
        match self.issue {
            IssueKind::Sync => IssueModel::Sync {
                threads: self.threads_per_ssd * self.num_ssds,
            },
            IssueKind::Async => IssueModel::Async {
                depth_per_ssd: self.depth_per_ssd,
            },
            IssueKind::Independent => IssueModel::Independent {
                depth_per_ssd: self.depth_per_ssd,
            },
        }
    }

    pub fn total_ops(&self) -> u64 {
        if self.ops_per_ssd > 0 {
            self.ops_per_ssd * self.num_ssds as u64
        } else {
            self.ops
        }
    }

    /// The simulation this configuration describes, ignoring arms and sweeps.
    pub fn sim_config(&self) -> Result<SimConfig, ConfigError> {
        if self.ssd.gc_high_watermark <= self.ssd.gc_low_watermark {
            return Err(ConfigError::Invalid(
                "ssd.gc_high_watermark must exceed ssd.gc_low_watermark".into(),
            ));
        }
        if self.cache_enabled && self.cache.pages != 0 && self.cache.pages < self.cache.set_size {
            return Err(ConfigError::Invalid("cache.pages must hold at least one set (cache.set_size)".into()));
        }
        if self.queues.reserved_high_slots >= self.ssd.max_outstanding {
            return Err(ConfigError::Invalid(
                "queue.reserved_high_slots must be below ssd.max_outstanding".into(),
            ));
        }
        let cfg = SimConfig {
            seed: self.seed,
            num_ssds: self.num_ssds,
            ssd: self.ssd.clone(),
            stripe_unit: self.stripe_unit,
            cache: self.cache_enabled.then(|| self.cache.clone()),
            queues: self.queues.clone(),
            flusher: (self.cache_enabled && self.flusher_enabled).then(|| self.flusher.clone()),
            workload: WorkloadSpec {
                pattern: self.pattern(),
                read_fraction: self.read_fraction,
                op_size: self.op_size,
                alignment: self.alignment,
                issue: self.issue_model(),
                occupancy: self.occupancy,
                total_ops: self.total_ops(),
            },
            warmup_fraction: self.warmup_fraction,
            sample_every: self.sample_every,
            check_invariants: self.check_invariants,
            precondition_passes: self.precondition_passes,
        };
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}
