use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use crate::engine::{SimConfig, SimError, Simulation};
use crate::metrics::{RunLabel, RunMetrics};
use crate::workload::{Alignment, IssueModel, Pattern};

use super::config::{Arm, ConfigError, RunConfig};

/// One simulation of a sweep point under one arm.
#[derive(Debug, Clone)]
pub struct PlannedRun {
    pub label: RunLabel,
    pub sim: SimConfig,
}

/// Every sweep point crossed with every arm; the first sweep is the
/// outermost loop and arms the innermost.
pub fn plan(cfg: &RunConfig) -> Result<Vec<PlannedRun>, ConfigError> {
    let mut points = vec![(cfg.clone(), Vec::<String>::new())];
    for sweep in &cfg.sweeps {
        let mut next = Vec::with_capacity(points.len() * sweep.values.len());
        for (point, tags) in &points {
            for v in &sweep.values {
                let mut p = point.clone();
                p.set(&sweep.key, v)?;
                let mut t = tags.clone();
                t.push(format!("{}={v}", sweep.key));
                next.push((p, t));
            }
        }
        points = next;
    }
    let mut runs = Vec::new();
    for (point, tags) in points {
        for &arm in &cfg.arms {
            let mut c = point.clone();
            arm.apply(&mut c);
            let sim = c.sim_config()?;
            let label = if tags.is_empty() {
                c.label.clone()
            } else {
                format!("{}[{}]", c.label, tags.join(","))
            };
            runs.push(PlannedRun {
                label: run_label(runs.len(), label, arm, &sim),
                sim,
            });
        }
    }
    Ok(runs)
}

fn run_label(run: usize, label: String, arm: Arm, sim: &SimConfig) -> RunLabel {
    let w = &sim.workload;
    RunLabel {
        run,
        label,
        arm: arm.name().into(),
        seed: sim.seed,
        num_ssds: sim.num_ssds,
        occupancy: w.occupancy,
        pattern: match w.pattern {
            Pattern::Uniform => "uniform".into(),
            Pattern::Zipfian { exponent } => format!("zipfian({exponent})"),
        },
        read_fraction: w.read_fraction,
        op_size: w.op_size,
        alignment: match w.alignment {
            Alignment::Aligned => "aligned".into(),
            Alignment::Unaligned => "unaligned".into(),
        },
        issue_model: match w.issue {
            IssueModel::Sync { .. } => "sync".into(),
            IssueModel::Async { .. } => "async".into(),
            IssueModel::Independent { .. } => "independent".into(),
        },
        parallelism: w.issue.parallelism(sim.num_ssds),
        cache_enabled: sim.cache.is_some(),
        flusher_enabled: sim.cache.is_some() && sim.flusher.is_some(),
        gc_enabled: sim.ssd.gc_enabled,
    }
}

/// Runs the plan on up to `threads` workers; results keep plan order.
pub fn execute(runs: &[PlannedRun], threads: usize) -> Vec<Result<RunMetrics, SimError>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunMetrics, SimError>>>> =
        Mutex::new((0..runs.len()).map(|_| None).collect());
    let workers = threads.clamp(1, runs.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(run) = runs.get(i) else { break };
                let out = Simulation::new(run.sim.clone()).and_then(|sim| sim.run());
                slots.lock().expect("no worker panicked")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every run executed"))
        .collect()
}

pub fn default_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plan_nests_sweeps_then_arms() {
        let mut c = RunConfig::default();
        c.apply_text(
            "label = t\narms = baseline, flusher\nsweep.workload.read_fraction = 0, 0.5\nsweep.num_ssds = 1, 2, 3\n",
        )
        .unwrap();
        let p = plan(&c).unwrap();
        assert_eq!(p.len(), 12);
        assert_eq!(p[0].label.label, "t[workload.read_fraction=0,num_ssds=1]");
        assert_eq!(p[1].label.arm, "flusher");
        assert_eq!(p[2].sim.num_ssds, 2);
        assert_eq!(p[6].sim.workload.read_fraction, 0.5);
        assert!(p.iter().enumerate().all(|(i, r)| r.label.run == i));
        assert!(p[0].sim.flusher.is_none() && p[1].sim.flusher.is_some());
    }

    #[test]
    fn execute_keeps_plan_order() {
        let mut c = RunConfig::default();
        c.apply_text("workload.ops = 2000\nsweep.workload.read_fraction = 0, 1\narms = direct").unwrap();
        let p = plan(&c).unwrap();
        let r = execute(&p, 2);
        let m: Vec<_> = r.into_iter().map(Result::unwrap).collect();
        assert_eq!(m[0].app_reads, 0);
        assert_eq!(m[1].app_writes, 0);
    }
}
