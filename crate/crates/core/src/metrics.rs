//! Run-wide counters, derived figures and CSV output.

use std::io::Write;

use thiserror::Error;

use crate::cache::CacheStats;
use crate::flusher::FlushStats;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("runs used different workloads: {0} vs {1}")]
    Mismatched(String, String),
    #[error("baseline run made no device writes")]
    NoBaselineWrites,
}

/// Union length of intervals added with non-decreasing starts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BusyTracker {
    busy: u64,
    covered_until: u64,
}

impl BusyTracker {
    pub fn add(&mut self, start: u64, end: u64) {
        if end <= start {
            return;
        }
        let from = start.max(self.covered_until);
        if end > from {
            self.busy += end - from;
            self.covered_until = end;
        }
    }

    pub fn busy(&self) -> u64 {
        self.busy
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub reads: u64,
    pub flush_writes: u64,
    pub writeback_writes: u64,
    /// Uncached application writes.
    pub direct_writes: u64,
    pub busy: BusyTracker,
    pub gc_us: u64,
    pub gc_bursts: u64,
    pub pages_copied: u64,
    pub first_gc_us: Option<u64>,
}

impl DeviceStats {
    pub fn writes(&self) -> u64 {
        self.flush_writes + self.writeback_writes + self.direct_writes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueueSample {
    pub time_us: u64,
    pub ssd: usize,
    /// High-priority requests waiting, including overflow held by the engine.
    pub high: usize,
    pub low: usize,
    pub in_flight: u32,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub workload_key: String,
    pub app_ops_completed: u64,
    pub app_reads: u64,
    pub app_writes: u64,
    pub virtual_duration_us: u64,
    /// Ops completed before the measured window opened, and when it opened.
    pub warmup_ops: u64,
    pub warmup_end_us: u64,
    pub devices: Vec<DeviceStats>,
    pub cache: Option<CacheStats>,
    pub flush: Option<FlushStats>,
    pub flush_in_flight: u64,
    /// Dirty pages still cached when the run stopped; each owes one write.
    pub dirty_at_end: u64,
    pub invariant_violations: u64,
    pub first_violation: Option<String>,
    pub shadow_divergences: u64,
    /// Flush writes whose version was checked at issue.
    pub flush_writes_checked: u64,
    pub events: u64,
    pub samples: Vec<QueueSample>,
}

impl RunMetrics {
    /// Steady-state application ops per second, warmup excluded.
    pub fn iops(&self) -> f64 {
        let ops = self.app_ops_completed.saturating_sub(self.warmup_ops);
        let span = self.virtual_duration_us.saturating_sub(self.warmup_end_us);
        if ops == 0 || span == 0 {
            0.0
        } else {
            ops as f64 * 1e6 / span as f64
        }
    }

    pub fn hit_rate(&self) -> Option<f64> {
        let c = self.cache?;
        let total = c.hits + c.misses;
        (total > 0).then(|| c.hits as f64 / total as f64)
    }

    pub fn device_writes(&self) -> u64 {
        self.devices.iter().map(DeviceStats::writes).sum()
    }

    /// Device writes plus the writes the cache still owes at the end.
    pub fn writes_owed(&self) -> u64 {
        self.device_writes() + self.dirty_at_end
    }

    pub fn device_reads(&self) -> u64 {
        self.devices.iter().map(|d| d.reads).sum()
    }

    pub fn utilization(&self, ssd: usize) -> f64 {
        if self.virtual_duration_us == 0 {
            0.0
        } else {
            self.devices[ssd].busy.busy() as f64 / self.virtual_duration_us as f64
        }
    }

    pub fn flushes_discarded(&self) -> u64 {
        self.flush
            .map(|f| f.discarded_evicted + f.discarded_cleaned + f.discarded_low_score)
            .unwrap_or(0)
    }

    /// Issued flushes not accounted for as completed, discarded or in flight.
    pub fn flush_accounting_gap(&self) -> i64 {
        match self.flush {
            Some(f) => f.issued as i64 - (f.completed + self.flushes_discarded() + self.flush_in_flight) as i64,
            None => 0,
        }
    }
}

/// Share of writes the flusher run made beyond the paired baseline. Dirty
/// pages left in either cache count as writes still to come, so a baseline
/// that ends holding most of its dirty data is not flattered.
pub fn extra_writeback(with_flusher: &RunMetrics, without_flusher: &RunMetrics) -> Result<f64, MetricsError> {
    if with_flusher.workload_key != without_flusher.workload_key {
        return Err(MetricsError::Mismatched(
            with_flusher.workload_key.clone(),
            without_flusher.workload_key.clone(),
        ));
    }
    let base = without_flusher.writes_owed();
    if base == 0 {
        return Err(MetricsError::NoBaselineWrites);
    }
    Ok((with_flusher.writes_owed() as f64 - base as f64) / base as f64)
}

/// Columns of the per-run CSV, in output order.
pub const CSV_HEADER: &[&str] = &[
    "run",
    "label",
    "arm",
    "seed",
    "num_ssds",
    "occupancy",
    "pattern",
    "read_fraction",
    "op_size",
    "alignment",
    "issue_model",
    "parallelism",
    "cache_enabled",
    "flusher_enabled",
    "gc_enabled",
    "app_ops_completed",
    "virtual_duration_us",
    "warmup_ops",
    "iops",
    "iops_per_ssd",
    "cache_hits",
    "cache_misses",
    "hit_rate",
    "device_reads",
    "device_writes",
    "flush_writes",
    "writeback_writes",
    "direct_writes",
    "dirty_at_end",
    "flush_issued",
    "flush_completed",
    "flush_discarded_evicted",
    "flush_discarded_cleaned",
    "flush_discarded_low_score",
    "gc_bursts",
    "gc_time_us",
    "mean_utilization",
    "min_utilization",
    "invariant_violations",
    "shadow_divergences",
];

/// Run description columns that precede the measured ones.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLabel {
    pub run: usize,
    pub label: String,
    pub arm: String,
    pub seed: u64,
    pub num_ssds: usize,
    pub occupancy: f64,
    pub pattern: String,
    pub read_fraction: f64,
    pub op_size: u64,
    pub alignment: String,
    pub issue_model: String,
    pub parallelism: usize,
    pub cache_enabled: bool,
    pub flusher_enabled: bool,
    pub gc_enabled: bool,
}

/// One CSV record; derived fields are recomputed from the raw counters.
pub fn report(label: &RunLabel, m: &RunMetrics) -> Vec<String> {
    let n = m.devices.len().max(1);
    let utils: Vec<f64> = (0..m.devices.len()).map(|i| m.utilization(i)).collect();
    let mean_util = utils.iter().sum::<f64>() / n as f64;
    let min_util = utils.iter().copied().fold(f64::INFINITY, f64::min);
    let sum = |f: fn(&DeviceStats) -> u64| m.devices.iter().map(f).sum::<u64>();
    let flush = m.flush.unwrap_or_default();
    let cache = m.cache.unwrap_or_default();
    vec![
        label.run.to_string(),
        label.label.clone(),
        label.arm.clone(),
        label.seed.to_string(),
        label.num_ssds.to_string(),
        format!("{:.4}", label.occupancy),
        label.pattern.clone(),
        format!("{:.4}", label.read_fraction),
        label.op_size.to_string(),
        label.alignment.clone(),
        label.issue_model.clone(),
        label.parallelism.to_string(),
        label.cache_enabled.to_string(),
        label.flusher_enabled.to_string(),
        label.gc_enabled.to_string(),
        m.app_ops_completed.to_string(),
        m.virtual_duration_us.to_string(),
        m.warmup_ops.to_string(),
        format!("{:.3}", m.iops()),
        format!("{:.3}", m.iops() / n as f64),
        cache.hits.to_string(),
        cache.misses.to_string(),
        m.hit_rate().map(|h| format!("{h:.6}")).unwrap_or_default(),
        m.device_reads().to_string(),
        m.device_writes().to_string(),
        sum(|d| d.flush_writes).to_string(),
        sum(|d| d.writeback_writes).to_string(),
        sum(|d| d.direct_writes).to_string(),
        m.dirty_at_end.to_string(),
        flush.issued.to_string(),
        flush.completed.to_string(),
        flush.discarded_evicted.to_string(),
        flush.discarded_cleaned.to_string(),
        flush.discarded_low_score.to_string(),
        sum(|d| d.gc_bursts).to_string(),
        sum(|d| d.gc_us).to_string(),
        format!("{mean_util:.6}"),
        if utils.is_empty() {
            String::new()
        } else {
            format!("{min_util:.6}")
        },
        m.invariant_violations.to_string(),
        m.shadow_divergences.to_string(),
    ]
}

pub fn write_csv<W: Write>(out: W, rows: &[(RunLabel, RunMetrics)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for (label, m) in rows {
        w.write_record(report(label, m))?;
    }
    w.flush()?;
    Ok(())
}

/// Per-SSD queue occupancy samples of every run.
pub fn write_samples_csv<W: Write>(out: W, rows: &[(RunLabel, RunMetrics)]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["run", "time_us", "ssd", "high", "low", "in_flight"])?;
    for (label, m) in rows {
        for s in &m.samples {
            w.write_record([
                label.run.to_string(),
                s.time_us.to_string(),
                s.ssd.to_string(),
                s.high.to_string(),
                s.low.to_string(),
                s.in_flight.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Short human-readable digest of one run.
pub fn summary(label: &RunLabel, m: &RunMetrics) -> String {
    let mut s = format!(
        "run {} {} [{}]: {:.0} IOPS ({:.0}/ssd), {} ops in {:.3} s",
        label.run,
        label.label,
        label.arm,
        m.iops(),
        m.iops() / m.devices.len().max(1) as f64,
        m.app_ops_completed,
        m.virtual_duration_us as f64 / 1e6
    );
    if let Some(h) = m.hit_rate() {
        s.push_str(&format!(", hit rate {:.2}%", h * 100.0));
    }
    if let Some(f) = m.flush {
        s.push_str(&format!(", flushes {} sent / {} written", f.issued, f.completed));
    }
    if m.invariant_violations > 0 {
        s.push_str(&format!(", {} invariant violations", m.invariant_violations));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_writes(key: &str, per_device: &[u64]) -> RunMetrics {
        RunMetrics {
            workload_key: key.into(),
            devices: per_device
                .iter()
                .map(|&w| DeviceStats {
                    direct_writes: w,
                    ..DeviceStats::default()
                })
                .collect(),
            ..RunMetrics::default()
        }
    }

    #[test]
    fn busy_tracker_takes_the_union() {
        let mut b = BusyTracker::default();
        b.add(0, 10);
        b.add(5, 12);
        b.add(12, 12);
        b.add(20, 25);
        b.add(21, 23);
        assert_eq!(b.busy(), 17);
    }

    #[test]
    fn extra_writeback_definitions() {
        let base = with_writes("w", &[50, 50]);
        assert_eq!(extra_writeback(&base, &base), Ok(0.0));
        let doubled = with_writes("w", &[100, 100]);
        assert_eq!(extra_writeback(&doubled, &base), Ok(1.0));
        let mut owing = with_writes("w", &[50, 40]);
        owing.dirty_at_end = 10;
        assert_eq!(extra_writeback(&owing, &base), Ok(0.0));
        let other = with_writes("x", &[50, 50]);
        assert!(matches!(extra_writeback(&other, &base), Err(MetricsError::Mismatched(..))));
    }

    #[test]
    fn empty_run_reports_zeros_and_no_hit_rate() {
        let m = RunMetrics {
            cache: Some(CacheStats::default()),
            devices: vec![DeviceStats::default()],
            ..RunMetrics::default()
        };
        assert_eq!(m.iops(), 0.0);
        assert_eq!(m.hit_rate(), None);
        let label = RunLabel {
            run: 0,
            label: "x".into(),
            arm: "as-is".into(),
            seed: 1,
            num_ssds: 1,
            occupancy: 0.5,
            pattern: "uniform".into(),
            read_fraction: 0.0,
            op_size: 4096,
            alignment: "aligned".into(),
            issue_model: "async".into(),
            parallelism: 1,
            cache_enabled: true,
            flusher_enabled: false,
            gc_enabled: true,
        };
        let row = report(&label, &m);
        assert_eq!(row.len(), CSV_HEADER.len());
        let hit = CSV_HEADER.iter().position(|&h| h == "hit_rate").unwrap();
        assert_eq!(row[hit], "");
    }

    #[test]
    fn all_hits_is_rate_one() {
        let m = RunMetrics {
            cache: Some(CacheStats {
                hits: 1000,
                ..CacheStats::default()
            }),
            ..RunMetrics::default()
        };
        assert_eq!(m.hit_rate(), Some(1.0));
    }

    #[test]
    fn iops_excludes_warmup() {
        let m = RunMetrics {
            app_ops_completed: 1100,
            warmup_ops: 100,
            warmup_end_us: 1_000,
            virtual_duration_us: 2_001_000,
            ..RunMetrics::default()
        };
        assert!((m.iops() - 500.0).abs() < 1e-9);
    }
}
