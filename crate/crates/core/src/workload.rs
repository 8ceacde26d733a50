//! Synthetic application workloads and the issue models that drive them.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use thiserror::Error;

use crate::mapping::{ArrayLayout, PageId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("read fraction {0} outside [0, 1]")]
    ReadFraction(f64),
    #[error("op size {0} bytes is not usable here: {1}")]
    OpSize(u64, &'static str),
    #[error("zipf exponent must be positive, got {0}")]
    Exponent(f64),
    #[error("footprint of {0} pages is too small")]
    Footprint(u64),
    #[error("issue model needs a positive depth")]
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pattern {
    Uniform,
    Zipfian { exponent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    Aligned,
    /// Each op starts at a random non-zero offset within its page.
    Unaligned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueModel {
    /// Closed loop: each thread waits for its op before issuing the next.
    Sync { threads: usize },
    /// One shared stream keeping `depth_per_ssd` x array size ops outstanding.
    Async { depth_per_ssd: usize },
    /// A separate stream per SSD, each keeping `depth_per_ssd` ops on its device.
    Independent { depth_per_ssd: usize },
}

impl IssueModel {
    pub fn parallelism(&self, num_ssds: usize) -> usize {
        match *self {
            IssueModel::Sync { threads } => threads,
            IssueModel::Async { depth_per_ssd } | IssueModel::Independent { depth_per_ssd } => depth_per_ssd * num_ssds,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub pattern: Pattern,
    pub read_fraction: f64,
    pub op_size: u64,
    pub alignment: Alignment,
    pub issue: IssueModel,
    /// Fraction of the array's logical capacity the workload touches.
    pub occupancy: f64,
    pub total_ops: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            pattern: Pattern::Uniform,
            read_fraction: 0.0,
            op_size: 4096,
            alignment: Alignment::Aligned,
            issue: IssueModel::Async { depth_per_ssd: 32 },
            occupancy: 0.6,
            total_ops: 100_000,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self, page_size: u64) -> Result<(), WorkloadError> {
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return Err(WorkloadError::ReadFraction(self.read_fraction));
        }
        if self.op_size == 0 {
            return Err(WorkloadError::OpSize(0, "must be positive"));
        }
        match self.alignment {
            Alignment::Aligned if self.op_size % page_size != 0 => {
                return Err(WorkloadError::OpSize(self.op_size, "aligned ops must be whole pages"));
            }
            Alignment::Unaligned if self.op_size >= page_size => {
                return Err(WorkloadError::OpSize(self.op_size, "unaligned ops must be smaller than a page"));
            }
            _ => {}
        }
        if let Pattern::Zipfian { exponent } = self.pattern {
            if !(exponent > 0.0) {
                return Err(WorkloadError::Exponent(exponent));
            }
        }
        let depth = match self.issue {
            IssueModel::Sync { threads } => threads,
            IssueModel::Async { depth_per_ssd } | IssueModel::Independent { depth_per_ssd } => depth_per_ssd,
        };
        if depth == 0 {
            return Err(WorkloadError::Depth);
        }
        Ok(())
    }

    /// Workload identity used to pair runs that differ only in system setup.
    pub fn key(&self) -> String {
        let pattern = match self.pattern {
            Pattern::Uniform => "uniform".to_string(),
            Pattern::Zipfian { exponent } => format!("zipf{exponent}"),
        };
        format!(
            "{pattern}/r{}/{}B/{:?}/occ{}/{}ops",
            self.read_fraction, self.op_size, self.alignment, self.occupancy, self.total_ops
        )
    }
}

/// One application I/O.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AppRequest {
    pub offset: u64,
    pub size: u64,
    pub is_read: bool,
}

/// Draws start pages over `0..pages`.
#[derive(Debug, Clone)]
pub enum PageSampler {
    Uniform { pages: u64 },
    /// Rank `r` (1 = hottest) maps to page `perm[r - 1]`, so hot pages are
    /// spread over the array instead of clustering on the first stripe.
    Zipfian { dist: Zipf<f64>, perm: Arc<Vec<u32>> },
}

impl PageSampler {
    pub fn new(pattern: Pattern, pages: u64, seed: u64) -> Result<Self, WorkloadError> {
        if pages == 0 || pages > u32::MAX as u64 {
            return Err(WorkloadError::Footprint(pages));
        }
        Ok(match pattern {
            Pattern::Uniform => PageSampler::Uniform { pages },
            Pattern::Zipfian { exponent } => {
                let dist = Zipf::new(pages as f64, exponent).map_err(|_| WorkloadError::Exponent(exponent))?;
                let mut perm: Vec<u32> = (0..pages as u32).collect();
                perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9));
                PageSampler::Zipfian {
                    dist,
                    perm: Arc::new(perm),
                }
            }
        })
    }

    /// Popularity rank, 1-based; uniform draws have no ranking and return the page.
    pub fn sample_rank<R: Rng + ?Sized>(&self, rng: &mut R) -> u64 {
        match self {
            PageSampler::Uniform { pages } => rng.random_range(0..*pages),
            PageSampler::Zipfian { dist, .. } => dist.sample(rng) as u64,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PageId {
        match self {
            PageSampler::Uniform { .. } => self.sample_rank(rng),
            PageSampler::Zipfian { perm, .. } => perm[self.sample_rank(rng) as usize - 1] as u64,
        }
    }
}

/// Deterministic stream of application requests over a footprint.
#[derive(Debug, Clone)]
pub struct OpGenerator {
    rng: ChaCha8Rng,
    sampler: PageSampler,
    read_fraction: f64,
    op_size: u64,
    alignment: Alignment,
    page_size: u64,
}

impl OpGenerator {
    /// `footprint` is in pages; multi-page ops start far enough from the end to fit.
    pub fn new(spec: &WorkloadSpec, page_size: u64, footprint: u64, seed: u64) -> Result<Self, WorkloadError> {
        spec.validate(page_size)?;
        let span = match spec.alignment {
            Alignment::Aligned => spec.op_size / page_size,
            Alignment::Unaligned => 1,
        };
        if footprint < span {
            return Err(WorkloadError::Footprint(footprint));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            sampler: PageSampler::new(spec.pattern, footprint - span + 1, seed)?,
            read_fraction: spec.read_fraction,
            op_size: spec.op_size,
            alignment: spec.alignment,
            page_size,
        })
    }

    /// Shares the (possibly large) rank permutation with another stream.
    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..self.clone()
        }
    }

    pub fn next_op(&mut self) -> AppRequest {
        let page = self.sampler.sample(&mut self.rng);
        self.finish(page)
    }

    /// Next op whose first page satisfies `accept`.
    pub fn next_op_where(&mut self, accept: impl Fn(PageId) -> bool) -> AppRequest {
        loop {
            let page = self.sampler.sample(&mut self.rng);
            if accept(page) {
                return self.finish(page);
            }
        }
    }

    fn finish(&mut self, page: PageId) -> AppRequest {
        let is_read = self.rng.random_bool(self.read_fraction);
        let offset = match self.alignment {
            Alignment::Aligned => page * self.page_size,
            Alignment::Unaligned => page * self.page_size + self.rng.random_range(1..=self.page_size - self.op_size),
        };
        AppRequest {
            offset,
            size: self.op_size,
            is_read,
        }
    }
}

/// Decides which op each issuer sends next and when it may send it.
#[derive(Debug, Clone)]
pub struct Driver {
    model: IssueModel,
    streams: Vec<OpGenerator>,
    /// Stream and target SSD of each issuer.
    issuers: Vec<(usize, Option<usize>)>,
    layout: ArrayLayout,
    remaining: u64,
    issued: u64,
}

impl Driver {
    pub fn new(spec: &WorkloadSpec, layout: &ArrayLayout, footprint: u64, seed: u64) -> Result<Self, WorkloadError> {
        let base = OpGenerator::new(spec, layout.page_size(), footprint, seed)?;
        let n = layout.num_ssds();
        let (streams, issuers) = match spec.issue {
            IssueModel::Sync { threads } => (vec![base], vec![(0, None); threads]),
            IssueModel::Async { depth_per_ssd } => (vec![base], vec![(0, None); depth_per_ssd * n]),
            IssueModel::Independent { depth_per_ssd } => {
                let streams = (0..n)
                    .map(|s| base.with_seed(seed.wrapping_add(0x1000 + s as u64)))
                    .collect();
                let issuers = (0..n)
                    .flat_map(|s| std::iter::repeat_n((s, Some(s)), depth_per_ssd))
                    .collect();
                (streams, issuers)
            }
        };
        Ok(Self {
            model: spec.issue,
            streams,
            issuers,
            layout: layout.clone(),
            remaining: spec.total_ops,
            issued: 0,
        })
    }

    pub fn model(&self) -> IssueModel {
        self.model
    }

    /// Number of independent issuers, each with at most one op outstanding.
    pub fn issuers(&self) -> usize {
        self.issuers.len()
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    /// Next op for `issuer`, or `None` once the op budget is spent.
    pub fn next_for(&mut self, issuer: usize) -> Option<AppRequest> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        self.issued += 1;
        let (stream, target) = self.issuers[issuer];
        let gen = &mut self.streams[stream];
        Some(match target {
            None => gen.next_op(),
            Some(ssd) => {
                let layout = &self.layout;
                gen.next_op_where(|p| layout.ssd_of(p) == ssd)
            }
        })
    }
}
