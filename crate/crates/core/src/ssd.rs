//! Simulated flash device.
//!
//! Each device owns a page-mapped, log-structured FTL. Host writes append to
//! an open erase block; once the pool of erased blocks drops below the low
//! watermark, greedy garbage collection relocates the valid pages of the
//! emptiest blocks and erases them until the high watermark is restored.
//! While a collection burst runs the device serves no host requests, so every
//! request submitted during the burst starts only after it ends.
//!
//! Service is modelled as `max_outstanding` identical lanes: a request starts
//! as soon as it is submitted (or when the current burst ends) and holds its
//! lane for a fixed service time. Peak throughput therefore needs a full queue
//! depth, and a collection burst stalls every lane at once.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::engine::SimTime;

const UNMAPPED: u32 = u32::MAX;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SsdError {
    #[error("invalid ssd config: {0}")]
    InvalidConfig(String),
    #[error("device already has {max} requests outstanding")]
    SlotsExhausted { max: u32 },
    #[error("logical page {lpn} beyond device capacity {capacity}")]
    OutOfRange { lpn: u64, capacity: u64 },
    #[error("occupancy {0} outside (0, 1)")]
    Occupancy(f64),
}

/// Device geometry, timing and garbage-collection thresholds.
#[derive(Debug, Clone, PartialEq)]
pub struct SsdConfig {
    pub page_size: u64,
    pub pages_per_block: u32,
    pub physical_blocks: u32,
    /// Fraction of physical space hidden from the logical address space.
    pub over_provision: f64,
    pub read_service_us: u64,
    pub write_service_us: u64,
    pub erase_us: f64,
    pub copy_page_us: f64,
    pub max_outstanding: u32,
    /// Collection starts when the erased-block fraction falls below this.
    pub gc_low_watermark: f64,
    /// Collection stops once the erased-block fraction reaches this.
    pub gc_high_watermark: f64,
    /// When false, reclamation still happens but costs no time.
    pub gc_enabled: bool,
    /// Upper bound of a uniform per-request service jitter; 0 disables it.
    pub jitter_us: u64,
}

impl Default for SsdConfig {
    fn default() -> Self {
        // 32 lanes x 525 us per 4 KB write gives ~60.9k IOPS without GC.
        // Erase and copy costs come from the occupancy calibration sweep
        // (see the README); erase time dominates the stall length.
        Self {
            page_size: 4096,
            pages_per_block: 128,
            physical_blocks: 128,
            over_provision: 0.10,
            read_service_us: 250,
            write_service_us: 525,
            erase_us: 900.0,
            copy_page_us: 0.6,
            max_outstanding: 32,
            gc_low_watermark: 0.02,
            gc_high_watermark: 0.06,
            gc_enabled: true,
            jitter_us: 0,
        }
    }
}

impl SsdConfig {
    pub fn validate(&self) -> Result<(), SsdError> {
        let bad = |msg: &str| Err(SsdError::InvalidConfig(msg.to_string()));
        if self.page_size == 0 {
            return bad("page_size must be positive");
        }
        if self.pages_per_block < 2 {
            return bad("pages_per_block must be at least 2");
        }
        if self.physical_blocks < 8 {
            return bad("physical_blocks must be at least 8");
        }
        if !(self.over_provision > 0.0 && self.over_provision < 1.0) {
            return bad("over_provision must lie in (0, 1)");
        }
        if !(self.gc_low_watermark > 0.0
            && self.gc_low_watermark < self.gc_high_watermark
            && self.gc_high_watermark < 1.0)
        {
            return bad("watermarks must satisfy 0 < gc_low_watermark < gc_high_watermark < 1");
        }
        // Collection can only restore the high watermark if the hidden space
        // covers it, whatever the logical occupancy.
        if self.gc_high_watermark >= self.over_provision {
            return bad("gc_high_watermark must be below over_provision");
        }
        if self.max_outstanding == 0 {
            return bad("max_outstanding must be positive");
        }
        if self.read_service_us == 0 || self.write_service_us == 0 {
            return bad("service times must be positive");
        }
        if !(self.erase_us >= 0.0 && self.copy_page_us >= 0.0) {
            return bad("erase_us and copy_page_us must be non-negative");
        }
        Ok(())
    }

    pub fn physical_pages(&self) -> u64 {
        self.physical_blocks as u64 * self.pages_per_block as u64
    }

    /// Pages visible to the host: physical pages minus the over-provisioned share.
    pub fn logical_pages(&self) -> u64 {
        (self.physical_pages() as f64 * (1.0 - self.over_provision)).floor() as u64
    }

    /// Throughput with no collection cost and a full queue.
    pub fn peak_write_iops(&self) -> f64 {
        1e6 / self.write_service_us as f64 * self.max_outstanding as f64
    }

    fn low_blocks(&self) -> usize {
        ((self.gc_low_watermark * self.physical_blocks as f64).round() as usize).max(2)
    }

    fn high_blocks(&self) -> usize {
        let high = (self.gc_high_watermark * self.physical_blocks as f64).round() as usize;
        high.max(self.low_blocks() + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeviceOp {
    Read,
    Write { tag: u64 },
}

/// Result of handing one request to the device.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Submission {
    pub start: SimTime,
    pub complete_at: SimTime,
    /// Data tag observed by a read at submission time.
    pub read_tag: Option<u64>,
    /// Collection burst triggered by this request, if any.
    pub gc: Option<GcBurst>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GcBurst {
    pub start: SimTime,
    pub end: SimTime,
    pub blocks_reclaimed: u32,
    pub pages_copied: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageCensus {
    pub valid: u64,
    pub invalid: u64,
    pub free: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FtlCounters {
    pub host_writes: u64,
    pub pages_copied: u64,
    pub blocks_erased: u64,
    pub gc_bursts: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Reclaimed {
    blocks: u32,
    copies: u64,
}

pub struct SsdDevice {
    cfg: SsdConfig,
    logical_pages: u64,
    l2p: Vec<u32>,
    p2l: Vec<u32>,
    tags: Vec<u64>,
    block_valid: Vec<u32>,
    block_free: Vec<bool>,
    free_blocks: VecDeque<u32>,
    open_block: u32,
    open_next: u32,
    low_blocks: usize,
    high_blocks: usize,
    gc_until: SimTime,
    in_flight: u32,
    rng: ChaCha8Rng,
    counters: FtlCounters,
}

impl std::fmt::Debug for SsdDevice {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SsdDevice")
            .field("free_blocks", &self.free_blocks.len())
            .field("open_block", &self.open_block)
            .field("gc_until", &self.gc_until)
            .field("in_flight", &self.in_flight)
            .finish()
    }
}

impl SsdDevice {
    pub fn new(cfg: SsdConfig, seed: u64) -> Result<Self, SsdError> {
        cfg.validate()?;
        let physical = cfg.physical_pages() as usize;
        let mut free_blocks: VecDeque<u32> = (0..cfg.physical_blocks).collect();
        let open_block = free_blocks.pop_front().expect("validated block count");
        let mut block_free = vec![true; cfg.physical_blocks as usize];
        block_free[open_block as usize] = false;
        Ok(Self {
            logical_pages: cfg.logical_pages(),
            l2p: vec![UNMAPPED; cfg.logical_pages() as usize],
            p2l: vec![UNMAPPED; physical],
            tags: vec![0; physical],
            block_valid: vec![0; cfg.physical_blocks as usize],
            block_free,
            free_blocks,
            open_block,
            open_next: 0,
            low_blocks: cfg.low_blocks(),
            high_blocks: cfg.high_blocks(),
            gc_until: SimTime::ZERO,
            in_flight: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: FtlCounters::default(),
            cfg,
        })
    }

    pub fn config(&self) -> &SsdConfig {
        &self.cfg
    }

    pub fn logical_pages(&self) -> u64 {
        self.logical_pages
    }

    pub fn in_flight(&self) -> u32 {
        self.in_flight
    }

    pub fn free_blocks(&self) -> usize {
        self.free_blocks.len()
    }

    pub fn gc_active(&self, now: SimTime) -> bool {
        now < self.gc_until
    }

    pub fn gc_until(&self) -> SimTime {
        self.gc_until
    }

    pub fn counters(&self) -> FtlCounters {
        self.counters
    }

    /// Valid-page count of every erase block, in block order.
    pub fn block_valid_counts(&self) -> &[u32] {
        &self.block_valid
    }

    /// Hands one page request to the device and returns when it completes.
    ///
    /// Writes are applied to the FTL immediately, so later submissions
    /// observe them regardless of completion order.
    pub fn submit(&mut self, lpn: u64, op: DeviceOp, now: SimTime) -> Result<Submission, SsdError> {
        if self.in_flight >= self.cfg.max_outstanding {
            return Err(SsdError::SlotsExhausted {
                max: self.cfg.max_outstanding,
            });
        }
        if lpn >= self.logical_pages {
            return Err(SsdError::OutOfRange {
                lpn,
                capacity: self.logical_pages,
            });
        }
        let lpn = lpn as u32;
        let (gc, service, read_tag) = match op {
            DeviceOp::Read => (None, self.cfg.read_service_us, Some(self.read_tag(lpn))),
            DeviceOp::Write { tag } => {
                let gc = self.maybe_run_gc(now);
                self.program(lpn, tag);
                self.counters.host_writes += 1;
                (gc, self.cfg.write_service_us, None)
            }
        };
        let jitter = if self.cfg.jitter_us > 0 {
            self.rng.random_range(0..=self.cfg.jitter_us)
        } else {
            0
        };
        let start = now.max(self.gc_until);
        self.in_flight += 1;
        Ok(Submission {
            start,
            complete_at: start + service + jitter,
            read_tag,
            gc,
        })
    }

    /// Releases the slot of a request whose completion event fired.
    pub fn complete(&mut self) {
        debug_assert!(self.in_flight > 0, "completion without an outstanding request");
        self.in_flight = self.in_flight.saturating_sub(1);
    }

    /// Runs a collection burst if the erased pool is below the low watermark.
    ///
    /// The burst starts when the previous one ends (or now) and suspends host
    /// service until it finishes.
    pub fn maybe_run_gc(&mut self, now: SimTime) -> Option<GcBurst> {
        let work = self.collect()?;
        let cost = if self.cfg.gc_enabled {
            (work.blocks as f64 * self.cfg.erase_us + work.copies as f64 * self.cfg.copy_page_us).round() as u64
        } else {
            0
        };
        let start = now.max(self.gc_until);
        let end = start + cost;
        self.gc_until = end;
        self.counters.gc_bursts += 1;
        Some(GcBurst {
            start,
            end,
            blocks_reclaimed: work.blocks,
            pages_copied: work.copies,
        })
    }

    /// Current data tag of a logical page; 0 for pages never written.
    pub fn read_tag(&self, lpn: u32) -> u64 {
        match self.l2p[lpn as usize] {
            UNMAPPED => 0,
            ppn => self.tags[ppn as usize],
        }
    }

    /// Fills the first `footprint` logical pages sequentially, then applies
    /// `passes` x physical capacity of uniformly random overwrites within the
    /// footprint. Runs outside virtual time; reclamation is free.
    pub fn precondition<R: Rng>(&mut self, footprint: u64, passes: f64, rng: &mut R) -> Result<(), SsdError> {
        if footprint > self.logical_pages {
            return Err(SsdError::OutOfRange {
                lpn: footprint,
                capacity: self.logical_pages,
            });
        }
        for lpn in 0..footprint as u32 {
            self.collect();
            self.program(lpn, 0);
        }
        if footprint > 0 {
            let overwrites = (passes * self.cfg.physical_pages() as f64) as u64;
            for _ in 0..overwrites {
                let lpn = rng.random_range(0..footprint) as u32;
                self.collect();
                self.program(lpn, self.read_tag(lpn));
            }
        }
        Ok(())
    }

    /// Recounts physical pages by state from the raw maps.
    pub fn census(&self) -> PageCensus {
        let ppb = self.cfg.pages_per_block as u64;
        let mut valid = 0;
        let mut free = 0;
        for block in 0..self.cfg.physical_blocks {
            if self.block_free[block as usize] {
                free += ppb;
                continue;
            }
            let base = block as usize * ppb as usize;
            valid += self.p2l[base..base + ppb as usize]
                .iter()
                .filter(|&&l| l != UNMAPPED)
                .count() as u64;
            if block == self.open_block {
                free += ppb - self.open_next as u64;
            }
        }
        PageCensus {
            valid,
            invalid: self.cfg.physical_pages() - valid - free,
            free,
        }
    }

    /// Cross-checks the forward and reverse maps; returns a description of
    /// the first inconsistency found.
    pub fn check_consistency(&self) -> Result<(), String> {
        let ppb = self.cfg.pages_per_block as usize;
        let mut per_block = vec![0u32; self.block_valid.len()];
        for (lpn, &ppn) in self.l2p.iter().enumerate() {
            if ppn == UNMAPPED {
                continue;
            }
            if self.p2l[ppn as usize] != lpn as u32 {
                return Err(format!("lpn {lpn} maps to ppn {ppn} which maps back elsewhere"));
            }
            per_block[ppn as usize / ppb] += 1;
        }
        for (ppn, &lpn) in self.p2l.iter().enumerate() {
            if lpn != UNMAPPED && self.l2p[lpn as usize] != ppn as u32 {
                return Err(format!("ppn {ppn} claims lpn {lpn} which maps elsewhere"));
            }
        }
        if per_block != self.block_valid {
            return Err("per-block valid counts disagree with the maps".into());
        }
        Ok(())
    }

    fn program(&mut self, lpn: u32, tag: u64) {
        let old = self.l2p[lpn as usize];
        if old != UNMAPPED {
            self.p2l[old as usize] = UNMAPPED;
            self.block_valid[(old / self.cfg.pages_per_block) as usize] -= 1;
        }
        let ppn = self.alloc_page();
        self.l2p[lpn as usize] = ppn;
        self.p2l[ppn as usize] = lpn;
        self.tags[ppn as usize] = tag;
        self.block_valid[(ppn / self.cfg.pages_per_block) as usize] += 1;
    }

    fn alloc_page(&mut self) -> u32 {
        if self.open_next == self.cfg.pages_per_block {
            let next = self
                .free_blocks
                .pop_front()
                .expect("erased pool exhausted; watermarks keep at least one block");
            self.block_free[next as usize] = false;
            self.open_block = next;
            self.open_next = 0;
        }
        let ppn = self.open_block * self.cfg.pages_per_block + self.open_next;
        self.open_next += 1;
        ppn
    }

    /// Greedy victim: the closed block with the fewest valid pages, lowest
    /// index on ties.
    fn pick_victim(&self) -> Option<u32> {
        let mut best: Option<(u32, u32)> = None;
        for (block, &valid) in self.block_valid.iter().enumerate() {
            let block = block as u32;
            if self.block_free[block as usize] || block == self.open_block {
                continue;
            }
            if best.is_none_or(|(_, v)| valid < v) {
                best = Some((block, valid));
            }
        }
        best.map(|(b, _)| b)
    }

    fn collect(&mut self) -> Option<Reclaimed> {
        if self.free_blocks.len() >= self.low_blocks {
            return None;
        }
        let ppb = self.cfg.pages_per_block;
        let mut work = Reclaimed::default();
        while self.free_blocks.len() < self.high_blocks {
            let Some(victim) = self.pick_victim() else { break };
            if self.block_valid[victim as usize] >= ppb {
                break;
            }
            let base = victim * ppb;
            for ppn in base..base + ppb {
                let lpn = self.p2l[ppn as usize];
                if lpn != UNMAPPED {
                    let tag = self.tags[ppn as usize];
                    self.program(lpn, tag);
                    work.copies += 1;
                }
            }
            debug_assert_eq!(self.block_valid[victim as usize], 0);
            self.block_free[victim as usize] = true;
            self.free_blocks.push_back(victim);
            work.blocks += 1;
        }
        self.counters.pages_copied += work.copies;
        self.counters.blocks_erased += work.blocks as u64;
        Some(work)
    }
}

/// Saturating random-write throughput of one device at a logical occupancy.
///
/// Preconditions a fresh device to `occupancy` of its logical capacity, keeps
/// `max_outstanding` 4 KB random writes in flight over the filled range and
/// reports completions per second after the first 10% of `writes`.
pub fn steady_state_iops(cfg: &SsdConfig, occupancy: f64, writes: u64, seed: u64) -> Result<f64, SsdError> {
    if !(occupancy > 0.0 && occupancy < 1.0) {
        return Err(SsdError::Occupancy(occupancy));
    }
    let mut device = SsdDevice::new(cfg.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0ccu64);
    let footprint = ((occupancy * device.logical_pages() as f64) as u64).max(1);
    device.precondition(footprint, 2.0, &mut rng)?;

    let mut pending: BinaryHeap<Reverse<(SimTime, u64)>> = BinaryHeap::new();
    let mut issued = 0u64;
    let mut seq = 0u64;
    let mut submit = |device: &mut SsdDevice, now: SimTime, pending: &mut BinaryHeap<_>| -> Result<(), SsdError> {
        let lpn = rng.random_range(0..footprint);
        let sub = device.submit(lpn, DeviceOp::Write { tag: 0 }, now)?;
        pending.push(Reverse((sub.complete_at, seq)));
        seq += 1;
        Ok(())
    };
    while issued < writes.min(cfg.max_outstanding as u64) {
        submit(&mut device, SimTime::ZERO, &mut pending)?;
        issued += 1;
    }
    let warmup = (writes / 10).max(1);
    let mut completed = 0u64;
    let mut warm_at = SimTime::ZERO;
    let mut last = SimTime::ZERO;
    while let Some(Reverse((at, _))) = pending.pop() {
        device.complete();
        completed += 1;
        last = at;
        if completed == warmup {
            warm_at = at;
        }
        if issued < writes {
            submit(&mut device, at, &mut pending)?;
            issued += 1;
        }
    }
    let span = last.0.saturating_sub(warm_at.0);
    if completed <= warmup || span == 0 {
        return Ok(0.0);
    }
    Ok((completed - warmup) as f64 * 1e6 / span as f64)
}
