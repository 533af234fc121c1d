// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Simulated kernel address space and the memory-tagging model.
//!
//! The arena is a flat byte array mapped at [`ARENA_BASE`]. Every 16-byte granule carries a
//! 4-bit memory tag; addresses carry a pointer tag in bits 56 to 59. Arena indexing ignores
//! bits 48 to 63 (top-byte-ignore without page tables).
//!
//! Guest-context accesses under [`TagCheckMode::Sync`] fault before any byte moves when the
//! pointer tag differs from the tag of any granule touched. Host-context accesses never check
//! tags, which is how the kernel's match-all convention is modelled.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Simulated virtual address of the first arena byte.
pub const ARENA_BASE: u64 = 0x4000_0000_0000;
pub const DEFAULT_ARENA_SIZE: usize = 1 << 20;
/// Bytes covered by one memory tag.
pub const GRANULE: u64 = 16;
/// Tag of all memory that is not part of a sandbox component.
pub const DEFAULT_MEM_TAG: u8 = 0xE;
pub const MATCH_ALL_TAG: u8 = 0xF;
pub const DEFAULT_SANDBOX_TAG: u8 = 0x4;
/// Granularity of dirty tracking used by checkpoints and paged digests.
pub const TRACK_PAGE: u64 = 4096;

const TAG_SHIFT: u32 = 56;
const TAG_BITS: u64 = 0xF << TAG_SHIFT;
const INDEX_MASK: u64 = (1 << 48) - 1;

/// An address as seen by a program: bits 56-59 hold the pointer tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaggedAddr(pub u64);

impl TaggedAddr {
    pub fn tag(self) -> u8 {
        ((self.0 & TAG_BITS) >> TAG_SHIFT) as u8
    }

    pub fn strip_tag(self) -> TaggedAddr {
        TaggedAddr(self.0 & !TAG_BITS)
    }

    pub fn with_tag(self, tag: u8) -> TaggedAddr {
        TaggedAddr((self.0 & !TAG_BITS) | (u64::from(tag & 0xF) << TAG_SHIFT))
    }

    /// The address with bits 48-63 cleared, as used for arena indexing.
    pub fn untagged(self) -> u64 {
        self.0 & INDEX_MASK
    }
}

pub fn tag_of(addr: u64) -> u8 {
    TaggedAddr(addr).tag()
}

pub fn with_tag(addr: u64, tag: u8) -> u64 {
    TaggedAddr(addr).with_tag(tag).0
}

pub fn strip_tag(addr: u64) -> u64 {
    TaggedAddr(addr).strip_tag().0
}

/// Tag-check configuration. Only synchronous checking is implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TagCheckMode {
    Off,
    Sync,
    Async,
    Asymmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagPolicy {
    mode: TagCheckMode,
    pub sandbox_tag: u8,
    pub kernel_matchall_tag: u8,
}

impl TagPolicy {
    pub fn new(mode: TagCheckMode, sandbox_tag: u8) -> Result<Self, MemError> {
        match mode {
            TagCheckMode::Async | TagCheckMode::Asymmetric => Err(MemError::UnsupportedMode(mode)),
            _ if sandbox_tag > 0xF => Err(MemError::InvalidTag(sandbox_tag)),
            _ => Ok(TagPolicy { mode, sandbox_tag, kernel_matchall_tag: MATCH_ALL_TAG }),
        }
    }

    pub fn off() -> Self {
        TagPolicy { mode: TagCheckMode::Off, sandbox_tag: DEFAULT_SANDBOX_TAG, kernel_matchall_tag: MATCH_ALL_TAG }
    }

    pub fn sync(sandbox_tag: u8) -> Self {
        TagPolicy { mode: TagCheckMode::Sync, sandbox_tag: sandbox_tag & 0xF, kernel_matchall_tag: MATCH_ALL_TAG }
    }

    pub fn mode(&self) -> TagCheckMode {
        self.mode
    }

    pub fn checks_enabled(&self) -> bool {
        self.mode == TagCheckMode::Sync
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessContext {
    Guest,
    Host,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum AccessError {
    #[error("access of {len} bytes at {addr:#x} is outside the arena")]
    OutOfArena { addr: u64, len: u64 },
    #[error("tag mismatch at {addr:#x}: pointer tag {ptr_tag:#x}, memory tag {mem_tag:#x}")]
    TagMismatch { addr: u64, ptr_tag: u8, mem_tag: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemError {
    #[error("{0:?} tag checking is not supported")]
    UnsupportedMode(TagCheckMode),
    #[error("tag {0:#x} is not a 4-bit value")]
    InvalidTag(u8),
    #[error("address {0:#x} is not granule aligned")]
    NotGranuleAligned(u64),
    #[error("length {0} is not a positive multiple of the granule size")]
    NotGranuleMultiple(u64),
    #[error("range {addr:#x}+{len} is outside the arena")]
    OutOfArena { addr: u64, len: u64 },
    #[error("arena exhausted allocating {size} bytes")]
    ArenaExhausted { size: u64 },
    #[error("range {addr:#x}+{len} overlaps an existing allocation")]
    Overlap { addr: u64, len: u64 },
}

pub type ArenaDigest = [u8; 32];

/// Per-page digests, so that a campaign can re-hash only the pages a trial touched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageDigests {
    exclude: Vec<Range<u64>>,
    pages: Vec<ArenaDigest>,
}

/// A saved copy of bytes and tags for cheap rollback of dirty pages.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    arena: Vec<u8>,
    tags: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct SimAddressSpace {
    arena: Vec<u8>,
    tags: Vec<u8>,
    default_mem_tag: u8,
    dirty: Vec<bool>,
    /// Allocated ranges as arena offsets, sorted and disjoint.
    allocations: Vec<Range<u64>>,
}

impl Default for SimAddressSpace {
    fn default() -> Self {
        Self::new(DEFAULT_ARENA_SIZE)
    }
}

impl SimAddressSpace {
    /// `size` is rounded up to whole tracking pages.
    pub fn new(size: usize) -> Self {
        let size = (size as u64).div_ceil(TRACK_PAGE).max(1) * TRACK_PAGE;
        SimAddressSpace {
            arena: vec![0; size as usize],
            tags: vec![DEFAULT_MEM_TAG; (size / GRANULE) as usize],
            default_mem_tag: DEFAULT_MEM_TAG,
            dirty: vec![false; (size / TRACK_PAGE) as usize],
            allocations: Vec::new(),
        }
    }

    pub fn base(&self) -> u64 {
        ARENA_BASE
    }

    pub fn size(&self) -> u64 {
        self.arena.len() as u64
    }

    pub fn end(&self) -> u64 {
        ARENA_BASE + self.size()
    }

    pub fn default_mem_tag(&self) -> u8 {
        self.default_mem_tag
    }

    pub fn tag_store_len(&self) -> usize {
        self.tags.len()
    }

    /// Arena offset of `[addr, addr+len)` after stripping the high bits, if fully inside.
    fn offset_of(&self, addr: u64, len: u64) -> Option<usize> {
        let untagged = addr & INDEX_MASK;
        let off = untagged.checked_sub(ARENA_BASE)?;
        let end = off.checked_add(len)?;
        (end <= self.size()).then_some(off as usize)
    }

    pub fn contains(&self, addr: u64, len: u64) -> bool {
        self.offset_of(addr, len).is_some()
    }

    fn mark_dirty(&mut self, off: usize, len: usize) {
        if len == 0 {
            return;
        }
        let first = off / TRACK_PAGE as usize;
        let last = (off + len - 1) / TRACK_PAGE as usize;
        for page in &mut self.dirty[first..=last] {
            *page = true;
        }
    }

    fn check(&self, addr: u64, len: u64, policy: &TagPolicy, context: AccessContext) -> Result<usize, AccessError> {
        let off = self.offset_of(addr, len).ok_or(AccessError::OutOfArena { addr, len })?;
        if context == AccessContext::Guest && policy.checks_enabled() {
            self.check_tags_at(addr, off, len)?;
        }
        Ok(off)
    }

    fn check_tags_at(&self, addr: u64, off: usize, len: u64) -> Result<(), AccessError> {
        if len == 0 {
            return Ok(());
        }
        let ptr_tag = tag_of(addr);
        let first = off / GRANULE as usize;
        let last = (off + len as usize - 1) / GRANULE as usize;
        for granule in first..=last {
            let mem_tag = self.tags[granule];
            if mem_tag != ptr_tag {
                return Err(AccessError::TagMismatch { addr, ptr_tag, mem_tag });
            }
        }
        Ok(())
    }

    /// Checks that every granule of `[addr, addr+len)` matches the pointer tag, as a guest
    /// access would, without transferring data.
    pub fn check_guest_tags(&self, addr: u64, len: u64) -> Result<(), AccessError> {
        let off = self.offset_of(addr, len).ok_or(AccessError::OutOfArena { addr, len })?;
        self.check_tags_at(addr, off, len)
    }

    /// Little-endian read of 1, 2, 4 or 8 bytes.
    pub fn read(&self, addr: u64, len: u64, policy: &TagPolicy, context: AccessContext) -> Result<u64, AccessError> {
        debug_assert!(matches!(len, 1 | 2 | 4 | 8));
        let off = self.check(addr, len, policy, context)?;
        let mut buf = [0u8; 8];
        buf[..len as usize].copy_from_slice(&self.arena[off..off + len as usize]);
        Ok(u64::from_le_bytes(buf))
    }

    /// Little-endian write of the low `len` bytes of `value`.
    pub fn write(
        &mut self,
        addr: u64,
        len: u64,
        value: u64,
        policy: &TagPolicy,
        context: AccessContext,
    ) -> Result<(), AccessError> {
        debug_assert!(matches!(len, 1 | 2 | 4 | 8));
        let off = self.check(addr, len, policy, context)?;
        self.arena[off..off + len as usize].copy_from_slice(&value.to_le_bytes()[..len as usize]);
        self.mark_dirty(off, len as usize);
        Ok(())
    }

    /// Host-context bulk read.
    pub fn read_bytes(&self, addr: u64, len: u64) -> Result<&[u8], AccessError> {
        let off = self.offset_of(addr, len).ok_or(AccessError::OutOfArena { addr, len })?;
        Ok(&self.arena[off..off + len as usize])
    }

    /// Host-context bulk write.
    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) -> Result<(), AccessError> {
        let len = bytes.len() as u64;
        let off = self.offset_of(addr, len).ok_or(AccessError::OutOfArena { addr, len })?;
        self.arena[off..off + bytes.len()].copy_from_slice(bytes);
        self.mark_dirty(off, bytes.len());
        Ok(())
    }

    pub fn fill(&mut self, addr: u64, len: u64, byte: u8) -> Result<(), AccessError> {
        let off = self.offset_of(addr, len).ok_or(AccessError::OutOfArena { addr, len })?;
        if self.arena[off..off + len as usize].iter().any(|b| *b != byte) {
            self.arena[off..off + len as usize].fill(byte);
            self.mark_dirty(off, len as usize);
        }
        Ok(())
    }

    pub fn host_read(&self, addr: u64, len: u64) -> Result<u64, AccessError> {
        self.read(addr, len, &TagPolicy::off(), AccessContext::Host)
    }

    pub fn host_write(&mut self, addr: u64, len: u64, value: u64) -> Result<(), AccessError> {
        self.write(addr, len, value, &TagPolicy::off(), AccessContext::Host)
    }

    pub fn get_tag(&self, addr: u64) -> Option<u8> {
        let off = self.offset_of(addr, 1)?;
        Some(self.tags[off / GRANULE as usize])
    }

    /// Tags every granule of `[addr, addr+len)`.
    pub fn set_tag_range(&mut self, addr: u64, len: u64, tag: u8) -> Result<(), MemError> {
        if tag > 0xF {
            return Err(MemError::InvalidTag(tag));
        }
        let untagged = addr & INDEX_MASK;
        if !untagged.is_multiple_of(GRANULE) {
            return Err(MemError::NotGranuleAligned(addr));
        }
        if len == 0 || !len.is_multiple_of(GRANULE) {
            return Err(MemError::NotGranuleMultiple(len));
        }
        let off = self.offset_of(addr, len).ok_or(MemError::OutOfArena { addr, len })?;
        let first = off / GRANULE as usize;
        let count = (len / GRANULE) as usize;
        self.tags[first..first + count].fill(tag);
        self.mark_dirty(off, len as usize);
        Ok(())
    }

    /// Reserves `[addr, addr+len)` for a fixed-address object.
    pub fn reserve(&mut self, addr: u64, len: u64) -> Result<(), MemError> {
        let off = self.offset_of(addr, len).ok_or(MemError::OutOfArena { addr, len })? as u64;
        let range = off..off + len.max(1);
        if self.allocations.iter().any(|r| r.start < range.end && range.start < r.end) {
            return Err(MemError::Overlap { addr, len });
        }
        let at = self.allocations.partition_point(|r| r.start < range.start);
        self.allocations.insert(at, range);
        Ok(())
    }

    /// First-fit allocation of `size` bytes aligned to `align` (a power of two).
    pub fn alloc(&mut self, size: u64, align: u64) -> Result<u64, MemError> {
        debug_assert!(align.is_power_of_two());
        let size = size.max(1);
        let align_up = |x: u64| (ARENA_BASE + x).next_multiple_of(align) - ARENA_BASE;
        let mut cursor = 0;
        let mut found = None;
        for r in &self.allocations {
            let start = align_up(cursor);
            if start + size <= r.start {
                found = Some(start);
                break;
            }
            cursor = cursor.max(r.end);
        }
        let start = match found {
            Some(s) => s,
            None => {
                let start = align_up(cursor);
                if start + size > self.size() {
                    return Err(MemError::ArenaExhausted { size });
                }
                start
            }
        };
        let at = self.allocations.partition_point(|r| r.start < start);
        self.allocations.insert(at, start..start + size);
        Ok(ARENA_BASE + start)
    }

    /// Digest of every arena byte outside `exclude` (simulated address ranges).
    pub fn snapshot(&self, exclude: &[Range<u64>]) -> ArenaDigest {
        let mut hasher = Sha256::new();
        let ranges = self.included_ranges(0..self.size(), exclude);
        for r in ranges {
            hasher.update((r.start).to_le_bytes());
            hasher.update(&self.arena[r.start as usize..r.end as usize]);
        }
        hasher.finalize().into()
    }

    fn included_ranges(&self, window: Range<u64>, exclude: &[Range<u64>]) -> Vec<Range<u64>> {
        let mut excl: Vec<Range<u64>> = exclude
            .iter()
            .filter_map(|r| {
                let s = r.start.saturating_sub(ARENA_BASE).max(window.start);
                let e = r.end.saturating_sub(ARENA_BASE).min(window.end);
                (s < e).then_some(s..e)
            })
            .collect();
        excl.sort_by_key(|r| r.start);
        let mut out = Vec::new();
        let mut cursor = window.start;
        for r in excl {
            if r.start > cursor {
                out.push(cursor..r.start);
            }
            cursor = cursor.max(r.end);
        }
        if cursor < window.end {
            out.push(cursor..window.end);
        }
        out
    }

    fn page_digest(&self, page: usize, exclude: &[Range<u64>]) -> ArenaDigest {
        let start = page as u64 * TRACK_PAGE;
        let mut hasher = Sha256::new();
        for r in self.included_ranges(start..start + TRACK_PAGE, exclude) {
            hasher.update(r.start.to_le_bytes());
            hasher.update(&self.arena[r.start as usize..r.end as usize]);
        }
        hasher.finalize().into()
    }

    pub fn page_snapshot(&self, exclude: &[Range<u64>]) -> PageDigests {
        PageDigests {
            exclude: exclude.to_vec(),
            pages: (0..self.dirty.len()).map(|p| self.page_digest(p, exclude)).collect(),
        }
    }

    /// True when every page written since the last [`clear_dirty`](Self::clear_dirty) still
    /// matches `digests` outside the excluded ranges.
    pub fn dirty_pages_match(&self, digests: &PageDigests) -> bool {
        self.dirty
            .iter()
            .enumerate()
            .filter(|(_, d)| **d)
            .all(|(p, _)| self.page_digest(p, &digests.exclude) == digests.pages[p])
    }

    pub fn clear_dirty(&mut self) {
        self.dirty.fill(false);
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { arena: self.arena.clone(), tags: self.tags.clone() }
    }

    /// Restores bytes and tags of every dirty page from `cp` and clears the dirty set.
    pub fn rollback_dirty(&mut self, cp: &Checkpoint) {
        let per_page = (TRACK_PAGE / GRANULE) as usize;
        for page in 0..self.dirty.len() {
            if !self.dirty[page] {
                continue;
            }
            let s = page * TRACK_PAGE as usize;
            let e = s + TRACK_PAGE as usize;
            self.arena[s..e].copy_from_slice(&cp.arena[s..e]);
            let ts = page * per_page;
            self.tags[ts..ts + per_page].copy_from_slice(&cp.tags[ts..ts + per_page]);
        }
        self.clear_dirty();
    }
}
