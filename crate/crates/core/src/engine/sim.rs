use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{EventQueue, SimTime};
use crate::cache::{Access, AccessKind, CacheConfig, CacheEffect, PageCache};
use crate::flusher::{FlushOutcome, Flusher, FlusherConfig};
use crate::mapping::{ArrayLayout, MappingError, PageId};
use crate::metrics::{DeviceStats, QueueSample, RunMetrics};
use crate::queues::{
    discard_stale, Completion, Direction, DispatchOutcome, DualQueue, FlushRequest, FlushView, IoRequest, Issue,
    Origin, PageFlushState, Priority, QueueConfig, StaleCheck,
};
use crate::ssd::{DeviceOp, SsdConfig, SsdDevice, SsdError};
use crate::workload::{Driver, WorkloadError, WorkloadSpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("event scheduled at {at} but the clock is already at {now}")]
    PastEvent { at: SimTime, now: SimTime },
    #[error(transparent)]
    Device(#[from] SsdError),
    #[error(transparent)]
    Mapping(#[from] MappingError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
}

/// Everything one simulation run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub seed: u64,
    pub num_ssds: usize,
    pub ssd: SsdConfig,
    pub stripe_unit: u64,
    /// `None` sends application I/O straight to the devices. A `pages` of 0
    /// sizes the cache to an eighth of the workload footprint.
    pub cache: Option<CacheConfig>,
    pub queues: QueueConfig,
    /// Ignored without a cache.
    pub flusher: Option<FlusherConfig>,
    pub workload: WorkloadSpec,
    pub warmup_fraction: f64,
    /// Queue occupancy is sampled every this many device completions; 0 disables.
    pub sample_every: u64,
    pub check_invariants: bool,
    /// Random overwrite passes, in multiples of physical capacity, applied to
    /// each device before the run.
    pub precondition_passes: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            num_ssds: 1,
            ssd: SsdConfig::default(),
            stripe_unit: 4096,
            cache: Some(CacheConfig {
                pages: 0,
                ..CacheConfig::default()
            }),
            queues: QueueConfig::default(),
            flusher: Some(FlusherConfig::default()),
            workload: WorkloadSpec::default(),
            warmup_fraction: 0.1,
            sample_every: 256,
            check_invariants: false,
            precondition_passes: 2.0,
        }
    }
}

impl SimConfig {
    /// Array layout over the devices' logical capacity.
    pub fn layout(&self) -> Result<ArrayLayout, SimError> {
        Ok(ArrayLayout::new(
            self.num_ssds,
            self.ssd.page_size,
            self.stripe_unit,
            self.ssd.logical_pages(),
        )?)
    }

    /// Workload footprint in pages: whole stripe rows covering `occupancy`
    /// of the array.
    pub fn footprint_pages(&self, layout: &ArrayLayout) -> u64 {
        let row = self.stripe_unit / self.ssd.page_size * self.num_ssds as u64;
        let raw = (self.workload.occupancy * layout.total_pages() as f64) as u64;
        (raw / row).max(1) * row
    }

    /// Cache geometry after resolving the automatic size.
    pub fn resolved_cache(&self, footprint: u64) -> Option<CacheConfig> {
        self.cache.clone().map(|mut c| {
            if c.pages == 0 {
                c.pages = ((footprint / 8) as usize).max(c.set_size);
            }
            c
        })
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::Config(m));
        self.ssd.validate()?;
        if let Err(m) = self.queues.validate() {
            return fail(format!("queue: {m}"));
        }
        if self.queues.max_outstanding != self.ssd.max_outstanding {
            return fail("queue max_outstanding must equal ssd max_outstanding".into());
        }
        if let Some(c) = &self.cache {
            if c.pages != 0 {
                c.validate().map_err(|m| SimError::Config(format!("cache: {m}")))?;
            }
        }
        if let Some(f) = &self.flusher {
            f.validate().map_err(|m| SimError::Config(format!("flusher: {m}")))?;
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return fail(format!("warmup fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if !(self.workload.occupancy > 0.0 && self.workload.occupancy <= 1.0) {
            return fail(format!("occupancy {} outside (0, 1]", self.workload.occupancy));
        }
        if !(self.precondition_passes >= 0.0) {
            return fail("precondition passes must be non-negative".into());
        }
        self.workload.validate(self.ssd.page_size)?;
        self.layout()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    Arrival { issuer: u32 },
    DeviceDone { token: u32 },
    FlusherPump,
}

#[derive(Debug, Clone, Copy)]
enum InFlightKind {
    High(IoRequest),
    Low(FlushRequest),
}

#[derive(Debug, Clone, Copy)]
struct InFlight {
    ssd: usize,
    kind: InFlightKind,
    read_tag: Option<u64>,
}

#[derive(Debug, Clone, Copy)]
struct AppOp {
    issuer: u32,
    pieces_left: u32,
    is_read: bool,
}

/// Simple slab with index reuse.
#[derive(Debug)]
struct Slab<T> {
    items: Vec<Option<T>>,
    free: Vec<u32>,
}

impl<T> Default for Slab<T> {
    fn default() -> Self {
        Self {
            items: Vec::new(),
            free: Vec::new(),
        }
    }
}

impl<T> Slab<T> {
    fn insert(&mut self, v: T) -> u32 {
        if let Some(i) = self.free.pop() {
            self.items[i as usize] = Some(v);
            i
        } else {
            self.items.push(Some(v));
            (self.items.len() - 1) as u32
        }
    }

    fn remove(&mut self, i: u32) -> T {
        let v = self.items[i as usize].take().expect("live slab entry");
        self.free.push(i);
        v
    }

    fn get_mut(&mut self, i: u32) -> &mut T {
        self.items[i as usize].as_mut().expect("live slab entry")
    }
}

/// Uncached runs never queue flushes.
struct NoCache;

impl FlushView for NoCache {
    fn flush_state(&self, _: PageId, _: usize) -> Option<PageFlushState> {
        None
    }
}

/// Discrete-event simulation of the whole array.
pub struct Simulation {
    cfg: SimConfig,
    now: SimTime,
    events: EventQueue<Event>,
    layout: ArrayLayout,
    footprint: u64,
    devices: Vec<SsdDevice>,
    queues: Vec<DualQueue>,
    /// High-priority requests that found their queue full, in arrival order.
    backlog: Vec<VecDeque<IoRequest>>,
    cache: Option<PageCache>,
    flusher: Option<Flusher>,
    driver: Driver,
    ops: Slab<AppOp>,
    in_flight: Slab<InFlight>,
    /// Tag of the last acknowledged write of each footprint page.
    shadow: Vec<u64>,
    next_tag: u64,
    warmup_ops: u64,
    total_ops: u64,
    m: RunMetrics,
    effects: Vec<CacheEffect>,
    dispatch: DispatchOutcome,
    pending_ssds: Vec<usize>,
    pending_mark: Vec<bool>,
    checked_ssds: Vec<usize>,
    checked_mark: Vec<bool>,
    touched_sets: Vec<usize>,
    flush_touched: Vec<usize>,
    pump_now: bool,
    pump_scheduled: bool,
    completions: u64,
}

impl Simulation {
    pub fn new(cfg: SimConfig) -> Result<Self, SimError> {
        cfg.validate()?;
        let layout = cfg.layout()?;
        let footprint = cfg.footprint_pages(&layout);
        let mut devices = Vec::with_capacity(cfg.num_ssds);
        for i in 0..cfg.num_ssds {
            let dev_seed = cfg.seed ^ (0xd1b5_4a32_d192_ed03u64.wrapping_mul(i as u64 + 1));
            let mut dev = SsdDevice::new(cfg.ssd.clone(), dev_seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(dev_seed.rotate_left(17));
            dev.precondition(layout.local_footprint(footprint, i), cfg.precondition_passes, &mut rng)?;
            devices.push(dev);
        }
        let cache = match cfg.resolved_cache(footprint) {
            Some(c) => Some(PageCache::new(c).map_err(|m| SimError::Config(format!("cache: {m}")))?),
            None => None,
        };
        let flusher = match (&cache, &cfg.flusher) {
            (Some(c), Some(f)) => Some(Flusher::new(
                f.clone(),
                c.num_sets(),
                cfg.num_ssds,
                cfg.queues.discard_threshold,
            )),
            _ => None,
        };
        let driver = Driver::new(&cfg.workload, &layout, footprint, cfg.seed)?;
        let total_ops = cfg.workload.total_ops;
        let mut events = EventQueue::new();
        for issuer in 0..driver.issuers() {
            events.push(SimTime::ZERO, Event::Arrival { issuer: issuer as u32 });
        }
        let n = cfg.num_ssds;
        let m = RunMetrics {
            workload_key: cfg.workload.key(),
            devices: vec![DeviceStats::default(); n],
            ..RunMetrics::default()
        };
        Ok(Self {
            warmup_ops: (total_ops as f64 * cfg.warmup_fraction) as u64,
            total_ops,
            now: SimTime::ZERO,
            events,
            footprint,
            devices,
            queues: (0..n).map(|_| DualQueue::new(cfg.queues.clone())).collect(),
            backlog: vec![VecDeque::new(); n],
            cache,
            flusher,
            driver,
            ops: Slab::default(),
            in_flight: Slab::default(),
            shadow: vec![0; footprint as usize],
            next_tag: 0,
            m,
            effects: Vec::new(),
            dispatch: DispatchOutcome::default(),
            pending_ssds: Vec::new(),
            pending_mark: vec![false; n],
            checked_ssds: Vec::new(),
            checked_mark: vec![false; n],
            touched_sets: Vec::new(),
            flush_touched: Vec::new(),
            pump_now: false,
            pump_scheduled: false,
            completions: 0,
            layout,
            cfg,
        })
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn footprint_pages(&self) -> u64 {
        self.footprint
    }

    pub fn layout(&self) -> &ArrayLayout {
        &self.layout
    }

    pub fn cache(&self) -> Option<&PageCache> {
        self.cache.as_ref()
    }

    /// Runs until every application op has completed.
    pub fn run(mut self) -> Result<RunMetrics, SimError> {
        while self.m.app_ops_completed < self.total_ops && self.step()? {}
        self.finish()
    }

    /// Processes one event; false once nothing is left to do.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let Some((at, event)) = self.events.pop() else {
            return Ok(false);
        };
        if at < self.now {
            return Err(SimError::PastEvent { at, now: self.now });
        }
        self.now = at;
        self.m.events += 1;
        match event {
            Event::Arrival { issuer } => self.on_arrival(issuer)?,
            Event::DeviceDone { token } => self.on_device_done(token)?,
            Event::FlusherPump => {
                self.pump_scheduled = false;
                self.pump_now = true;
            }
        }
        self.settle()?;
        if self.cfg.check_invariants {
            self.check_event_invariants();
        }
        Ok(true)
    }

    fn schedule(&mut self, at: SimTime, event: Event) -> Result<(), SimError> {
        if at < self.now {
            return Err(SimError::PastEvent { at, now: self.now });
        }
        self.events.push(at, event);
        Ok(())
    }

    fn violation(&mut self, what: String) {
        self.m.invariant_violations += 1;
        if self.m.first_violation.is_none() {
            self.m.first_violation = Some(format!("at {}: {what}", self.now));
        }
    }

    fn mark_ssd(&mut self, ssd: usize) {
        if !self.pending_mark[ssd] {
            self.pending_mark[ssd] = true;
            self.pending_ssds.push(ssd);
        }
        if !self.checked_mark[ssd] {
            self.checked_mark[ssd] = true;
            self.checked_ssds.push(ssd);
        }
    }

    fn on_arrival(&mut self, issuer: u32) -> Result<(), SimError> {
        let Some(req) = self.driver.next_for(issuer as usize) else {
            return Ok(());
        };
        let pieces = self.layout.split(req.offset, req.size)?;
        let op = self.ops.insert(AppOp {
            issuer,
            pieces_left: pieces.len() as u32,
            is_read: req.is_read,
        }) as u64;
        let tag = if req.is_read {
            0
        } else {
            self.next_tag += 1;
            self.next_tag
        };
        for piece in pieces {
            if let Some(cache) = self.cache.as_mut() {
                let kind = match (req.is_read, piece.partial) {
                    (true, _) => AccessKind::Read,
                    (false, false) => AccessKind::WriteFull,
                    (false, true) => AccessKind::WritePartial,
                };
                cache.access(Access::new(op, piece.page, kind, tag), &mut self.effects);
                let set = cache.lookup_set(piece.page);
                self.touched_sets.push(set);
                self.apply_effects()?;
                if let (Some(f), Some(c)) = (self.flusher.as_mut(), self.cache.as_ref()) {
                    f.touch(set, c);
                }
            } else {
                let direction = if req.is_read {
                    Direction::Read
                } else {
                    Direction::Write
                };
                self.enqueue_high(IoRequest {
                    page: piece.page,
                    direction,
                    origin: Origin::Direct,
                    submit_time: self.now,
                    completion: Completion::DirectOp { op },
                    tag,
                });
            }
        }
        Ok(())
    }

    fn enqueue_high(&mut self, req: IoRequest) {
        let ssd = self.layout.ssd_of(req.page);
        if !self.backlog[ssd].is_empty() {
            self.backlog[ssd].push_back(req);
        } else if let Err(full) = self.queues[ssd].enqueue_high(req) {
            self.backlog[ssd].push_back(full.0);
        }
        self.mark_ssd(ssd);
    }

    fn apply_effects(&mut self) -> Result<(), SimError> {
        let mut effects = std::mem::take(&mut self.effects);
        for e in effects.drain(..) {
            match e {
                CacheEffect::Complete { token, page, read_tag } => {
                    if let Some(tag) = read_tag {
                        self.check_read(page, tag);
                    }
                    self.finish_piece(token as u32)?;
                }
                CacheEffect::Applied { page, tag } => self.shadow[page as usize] = tag,
                CacheEffect::Dirtied { set } => {
                    if let (Some(f), Some(c)) = (self.flusher.as_mut(), self.cache.as_ref()) {
                        f.on_page_dirtied(set, c);
                        self.pump_now = true;
                    }
                }
                CacheEffect::Writeback { page, tag, set, slot } => self.enqueue_high(IoRequest {
                    page,
                    direction: Direction::Write,
                    origin: Origin::BlockingWriteback,
                    submit_time: self.now,
                    completion: Completion::Writeback { set, slot },
                    tag,
                }),
                CacheEffect::Fill { page, set, slot } => self.enqueue_high(IoRequest {
                    page,
                    direction: Direction::Read,
                    origin: Origin::AppRead,
                    submit_time: self.now,
                    completion: Completion::Fill { set, slot },
                    tag: 0,
                }),
            }
        }
        self.effects = effects;
        Ok(())
    }

    fn check_read(&mut self, page: PageId, tag: u64) {
        let expect = self.shadow[page as usize];
        if tag != expect {
            self.m.shadow_divergences += 1;
            if self.cfg.check_invariants {
                self.violation(format!("read of page {page} saw tag {tag}, last write was {expect}"));
            }
        }
    }

    fn finish_piece(&mut self, op: u32) -> Result<(), SimError> {
        let entry = self.ops.get_mut(op);
        entry.pieces_left -= 1;
        if entry.pieces_left > 0 {
            return Ok(());
        }
        let done = self.ops.remove(op);
        self.m.app_ops_completed += 1;
        if done.is_read {
            self.m.app_reads += 1;
        } else {
            self.m.app_writes += 1;
        }
        if self.m.app_ops_completed == self.warmup_ops {
            self.m.warmup_end_us = self.now.0;
        }
        self.m.virtual_duration_us = self.now.0;
        self.schedule(self.now, Event::Arrival { issuer: done.issuer })
    }

    fn on_device_done(&mut self, token: u32) -> Result<(), SimError> {
        let done = self.in_flight.remove(token);
        let ssd = done.ssd;
        self.devices[ssd].complete();
        self.mark_ssd(ssd);
        match done.kind {
            InFlightKind::High(req) => {
                self.queues[ssd].complete(Priority::High);
                match req.completion {
                    Completion::Fill { set, slot } => {
                        let cache = self.cache.as_mut().expect("fills need a cache");
                        cache.on_fill_done(set, slot, done.read_tag.unwrap_or(0), &mut self.effects);
                        self.after_cache_io(set)?;
                    }
                    Completion::Writeback { set, slot } => {
                        let cache = self.cache.as_mut().expect("writebacks need a cache");
                        cache.on_writeback_done(set, slot, &mut self.effects);
                        self.after_cache_io(set)?;
                    }
                    Completion::DirectOp { op } => self.finish_piece(op as u32)?,
                }
            }
            InFlightKind::Low(req) => {
                self.queues[ssd].complete(Priority::Low);
                let cache = self.cache.as_mut().expect("flushes need a cache");
                let flusher = self.flusher.as_mut().expect("flushes need a flusher");
                flusher.on_flush_event(FlushOutcome::Completed, &req, cache);
                self.touched_sets.push(req.set);
                self.pump_now = true;
            }
        }
        self.completions += 1;
        if self.cfg.sample_every > 0 && self.completions % self.cfg.sample_every == 0 {
            for (i, q) in self.queues.iter().enumerate() {
                self.m.samples.push(QueueSample {
                    time_us: self.now.0,
                    ssd: i,
                    high: q.high_len() + self.backlog[i].len(),
                    low: q.low_len(),
                    in_flight: q.in_flight(),
                });
            }
        }
        Ok(())
    }

    fn after_cache_io(&mut self, set: usize) -> Result<(), SimError> {
        self.touched_sets.push(set);
        self.apply_effects()?;
        if let (Some(f), Some(c)) = (self.flusher.as_mut(), self.cache.as_ref()) {
            f.touch(set, c);
            self.pump_now = true;
        }
        Ok(())
    }

    /// Pumps the flusher and dispatches every SSD with new work until nothing moves.
    fn settle(&mut self) -> Result<(), SimError> {
        loop {
            if self.pump_now {
                self.pump_now = false;
                if let (Some(f), Some(c)) = (self.flusher.as_mut(), self.cache.as_mut()) {
                    let mut touched = std::mem::take(&mut self.flush_touched);
                    f.pump(c, &mut self.queues, &self.layout, &mut touched);
                    for ssd in touched.drain(..) {
                        self.mark_ssd(ssd);
                    }
                    self.flush_touched = touched;
                }
            }
            let Some(ssd) = self.pending_ssds.pop() else { break };
            self.pending_mark[ssd] = false;
            self.dispatch_ssd(ssd)?;
        }
        Ok(())
    }

    fn dispatch_ssd(&mut self, ssd: usize) -> Result<(), SimError> {
        while self.queues[ssd].high_has_room() {
            let Some(req) = self.backlog[ssd].pop_front() else { break };
            self.queues[ssd].enqueue_high(req).expect("room checked");
        }
        let mut out = std::mem::take(&mut self.dispatch);
        out.clear();
        match self.cache.as_ref() {
            Some(c) => self.queues[ssd].dispatch(c, &mut out),
            None => self.queues[ssd].dispatch(&NoCache, &mut out),
        }
        let progressed = !out.issued.is_empty() || !out.discarded.is_empty();
        for issue in out.issued.drain(..) {
            self.submit(ssd, issue)?;
        }
        for (req, reason) in out.discarded.drain(..) {
            let cache = self.cache.as_mut().expect("flushes need a cache");
            let flusher = self.flusher.as_mut().expect("flushes need a flusher");
            flusher.on_flush_event(FlushOutcome::Discarded(reason), &req, cache);
            self.touched_sets.push(req.set);
        }
        if out.refill && !self.pump_scheduled {
            self.pump_scheduled = true;
            self.schedule(self.now, Event::FlusherPump)?;
        }
        self.dispatch = out;
        if progressed {
            self.mark_ssd(ssd);
        }
        Ok(())
    }

    fn submit(&mut self, ssd: usize, issue: Issue) -> Result<(), SimError> {
        let (page, op) = match issue {
            Issue::High(req) => {
                if req.direction == Direction::Write && req.origin == Origin::Direct {
                    self.shadow[req.page as usize] = req.tag;
                }
                let op = match req.direction {
                    Direction::Read => DeviceOp::Read,
                    Direction::Write => DeviceOp::Write { tag: req.tag },
                };
                (req.page, op)
            }
            Issue::Low(req) => {
                if self.queues[ssd].high_len() > 0 {
                    self.violation(format!("flush issued on ssd {ssd} while application requests wait"));
                }
                let cache = self.cache.as_ref().expect("flushes need a cache");
                let sound = discard_stale(&req, cache, 0) == StaleCheck::Keep;
                let tag = cache.resident(req.page).map(|p| p.data_tag).unwrap_or(0);
                if !sound {
                    self.violation(format!("flush of page {} issued with a stale version", req.page));
                }
                self.m.flush_writes_checked += 1;
                (req.page, DeviceOp::Write { tag })
            }
        };
        let local = self.layout.local_page(page);
        let sub = self.devices[ssd].submit(local, op, self.now)?;
        let stats = &mut self.m.devices[ssd];
        if let Some(gc) = sub.gc {
            stats.gc_bursts += 1;
            stats.pages_copied += gc.pages_copied;
            stats.gc_us += gc.end - gc.start;
            stats.first_gc_us.get_or_insert(gc.start.0);
            stats.busy.add(gc.start.0, gc.end.0);
        }
        stats.busy.add(sub.start.0, sub.complete_at.0);
        match issue {
            Issue::High(req) => match (req.direction, req.origin) {
                (Direction::Read, _) => stats.reads += 1,
                (Direction::Write, Origin::BlockingWriteback) => stats.writeback_writes += 1,
                (Direction::Write, _) => stats.direct_writes += 1,
            },
            Issue::Low(_) => stats.flush_writes += 1,
        }
        if let (Issue::High(req), Some(tag)) = (issue, sub.read_tag) {
            if matches!(req.completion, Completion::DirectOp { .. }) {
                self.check_read(page, tag);
            }
        }
        let kind = match issue {
            Issue::High(req) => InFlightKind::High(req),
            Issue::Low(req) => InFlightKind::Low(req),
        };
        let token = self.in_flight.insert(InFlight {
            ssd,
            kind,
            read_tag: sub.read_tag,
        });
        self.schedule(sub.complete_at, Event::DeviceDone { token })
    }

    fn check_event_invariants(&mut self) {
        let ssds = std::mem::take(&mut self.checked_ssds);
        for &ssd in &ssds {
            self.checked_mark[ssd] = false;
            if let Err(m) = self.queues[ssd].check_settled() {
                self.violation(format!("ssd {ssd}: {m}"));
            }
            if self.queues[ssd].in_flight() != self.devices[ssd].in_flight() {
                self.violation(format!("ssd {ssd}: queue and device disagree on requests in flight"));
            }
            if !self.backlog[ssd].is_empty() && self.queues[ssd].high_has_room() {
                self.violation(format!("ssd {ssd}: overflow held while the high queue has room"));
            }
        }
        self.checked_ssds = ssds;
        self.checked_ssds.clear();
        let sets = std::mem::take(&mut self.touched_sets);
        let errors: Vec<String> = match self.cache.as_ref() {
            Some(c) => sets.iter().filter_map(|&s| c.verify_set(s).err()).collect(),
            None => Vec::new(),
        };
        for e in errors {
            self.violation(e);
        }
        self.touched_sets = sets;
        self.touched_sets.clear();
        if let Some(f) = &self.flusher {
            if f.outstanding() > f.global_cap() {
                let m = format!("{} flushes outstanding, cap {}", f.outstanding(), f.global_cap());
                self.violation(m);
            }
        }
    }

    fn finish(mut self) -> Result<RunMetrics, SimError> {
        self.touched_sets.clear();
        if self.cfg.check_invariants {
            self.check_final_state();
        }
        let mut m = std::mem::take(&mut self.m);
        if m.app_ops_completed < self.warmup_ops || self.warmup_ops == 0 {
            m.warmup_ops = 0;
            m.warmup_end_us = 0;
        } else {
            m.warmup_ops = self.warmup_ops;
        }
        m.cache = self.cache.as_ref().map(|c| c.stats());
        m.dirty_at_end = self.cache.as_ref().map_or(0, |c| c.dirty_pages());
        m.flush = self.flusher.as_ref().map(|f| f.stats());
        m.flush_in_flight = self.flusher.as_ref().map_or(0, |f| f.outstanding() as u64);
        if self.cfg.check_invariants && m.flush_accounting_gap() != 0 {
            m.invariant_violations += 1;
            let gap = m.flush_accounting_gap();
            m.first_violation
                .get_or_insert_with(|| format!("flush accounting off by {gap}"));
        }
        Ok(m)
    }

    /// Every acknowledged write must be the newest copy of its page, in the
    /// cache if dirty there and on the device otherwise.
    fn check_final_state(&mut self) {
        for page in 0..self.footprint {
            let expect = self.shadow[page as usize];
            let ssd = self.layout.ssd_of(page);
            let on_device = self.devices[ssd].read_tag(self.layout.local_page(page) as u32);
            let resident = self.cache.as_ref().and_then(|c| c.resident(page)).map(|p| (p.dirty, p.data_tag));
            let actual = match resident {
                Some((true, tag)) => tag,
                Some((false, tag)) => {
                    if tag != on_device {
                        self.violation(format!("clean page {page} differs from its device copy"));
                    }
                    tag
                }
                None => on_device,
            };
            if actual != expect {
                self.m.shadow_divergences += 1;
                self.violation(format!("page {page} holds tag {actual}, last acknowledged write was {expect}"));
            }
        }
        let mut errors: Vec<String> = self
            .devices
            .iter()
            .enumerate()
            .filter_map(|(i, d)| d.check_consistency().err().map(|m| format!("ssd {i}: {m}")))
            .collect();
        if let Some(c) = &self.cache {
            errors.extend(c.verify_all().err());
            if c.stats().dirty_evictions_with_clean > 0 {
                errors.push("a dirty page was evicted while a clean one was present".into());
            }
        }
        for e in errors {
            self.violation(e);
        }
    }
}
