//! Data mapping layer: RAID-0 striping of the array's logical pages.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MappingError {
    #[error("stripe unit {stripe_unit} is not a positive multiple of page size {page_size}")]
    StripeUnit { stripe_unit: u64, page_size: u64 },
    #[error("array needs at least one ssd")]
    NoDevices,
    #[error("byte range {offset}+{len} outside array capacity {capacity} bytes")]
    OutOfRange { offset: u64, len: u64, capacity: u64 },
    #[error("empty request")]
    Empty,
}

/// Array-wide page number.
pub type PageId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayLayout {
    num_ssds: usize,
    page_size: u64,
    stripe_pages: u64,
    pages_per_ssd: u64,
}

/// One page-sized piece of an application request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageRequest {
    pub page: PageId,
    pub ssd: usize,
    pub local_page: u64,
    pub offset_in_page: u32,
    pub len: u32,
    /// Covers less than the whole page, so the cache must read-update-write.
    pub partial: bool,
}

impl ArrayLayout {
    /// `pages_per_ssd` is each device's logical capacity; a trailing partial
    /// stripe row is left unused.
    pub fn new(num_ssds: usize, page_size: u64, stripe_unit: u64, pages_per_ssd: u64) -> Result<Self, MappingError> {
        if num_ssds == 0 {
            return Err(MappingError::NoDevices);
        }
        if page_size == 0 || stripe_unit == 0 || stripe_unit % page_size != 0 {
            return Err(MappingError::StripeUnit { stripe_unit, page_size });
        }
        let stripe_pages = stripe_unit / page_size;
        Ok(Self {
            num_ssds,
            page_size,
            stripe_pages,
            pages_per_ssd: pages_per_ssd / stripe_pages * stripe_pages,
        })
    }

    pub fn num_ssds(&self) -> usize {
        self.num_ssds
    }

    pub fn page_size(&self) -> u64 {
        self.page_size
    }

    pub fn total_pages(&self) -> u64 {
        self.pages_per_ssd * self.num_ssds as u64
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.total_pages() * self.page_size
    }

    #[inline]
    pub fn ssd_of(&self, page: PageId) -> usize {
        ((page / self.stripe_pages) % self.num_ssds as u64) as usize
    }

    #[inline]
    pub fn local_page(&self, page: PageId) -> u64 {
        let stripe = page / self.stripe_pages;
        (stripe / self.num_ssds as u64) * self.stripe_pages + page % self.stripe_pages
    }

    /// Number of pages among `0..footprint` that land on `ssd`; they occupy
    /// a prefix of that device's local address space.
    pub fn local_footprint(&self, footprint: u64, ssd: usize) -> u64 {
        let row = self.stripe_pages * self.num_ssds as u64;
        let full_rows = footprint / row;
        let rest = footprint % row;
        let before = ssd as u64 * self.stripe_pages;
        let extra = rest.saturating_sub(before).min(self.stripe_pages);
        full_rows * self.stripe_pages + extra
    }

    /// Splits a byte range into whole-page pieces tagged with their device.
    pub fn split(&self, offset: u64, len: u64) -> Result<Vec<PageRequest>, MappingError> {
        if len == 0 {
            return Err(MappingError::Empty);
        }
        let capacity = self.capacity_bytes();
        if offset.checked_add(len).is_none_or(|end| end > capacity) {
            return Err(MappingError::OutOfRange { offset, len, capacity });
        }
        let mut out = Vec::with_capacity((len / self.page_size + 2) as usize);
        let mut cursor = offset;
        let end = offset + len;
        while cursor < end {
            let page = cursor / self.page_size;
            let in_page = cursor % self.page_size;
            let piece = (self.page_size - in_page).min(end - cursor);
            out.push(PageRequest {
                page,
                ssd: self.ssd_of(page),
                local_page: self.local_page(page),
                offset_in_page: in_page as u32,
                len: piece as u32,
                partial: piece != self.page_size,
            });
            cursor += piece;
        }
        Ok(out)
    }
}
