// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Per-core sandbox pages.
//!
//! Each sandbox is one 4096-byte page. The lower half holds metadata the guest can never
//! address; the upper half is the guest partition:
//!
//! ```text
//! page_base          +2048                                         +4096
//! | metadata         | context | heap -->            <-- stack (512) |
//! ```
//!
//! Metadata layout (byte offsets from `page_base`): saved stack register at 0, heap bump at 8,
//! sync-table reference at 16, and/or mask copies at 24/32, context end at 40.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use thiserror::Error;

use crate::instrument::{compute_masks, MaskPair};
use crate::memory::{with_tag, MemError, SimAddressSpace};
use crate::mode::Mode;

pub const PAGE_SIZE: u64 = 4096;
pub const METADATA_SIZE: u64 = 2048;
pub const GUEST_SIZE: u64 = PAGE_SIZE - METADATA_SIZE;
pub const STACK_SIZE: u64 = 512;

pub const META_SAVED_SP: u64 = 0;
pub const META_HEAP_BUMP: u64 = 8;
pub const META_SYNC_REF: u64 = 16;
pub const META_AND_MASK: u64 = 24;
pub const META_OR_MASK: u64 = 32;
pub const META_CTX_END: u64 = 40;

const HEAP_ALIGN: u64 = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SandboxError {
    #[error("core {0} already runs a program")]
    CoreBusy(u32),
    #[error("sandbox of core {0} is not active")]
    NotActive(u32),
    #[error("sandbox already entered")]
    DoubleEnter,
    #[error("sandbox exited without being entered")]
    ExitWithoutEnter,
    #[error("zero-sized heap allocation")]
    ZeroAlloc,
    #[error("out of sandbox memory: {requested} bytes requested, {available} available")]
    OutOfSandboxMemory { requested: u64, available: u64 },
    #[error(transparent)]
    Memory(#[from] MemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SandboxState {
    Free,
    Active,
}

/// Handle to an acquired sandbox page. Mutable bookkeeping lives in the page's metadata
/// partition inside the simulated arena.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sandbox {
    pub core_id: u32,
    pub page_base: u64,
    pub mask: MaskPair,
    pub tag: u8,
    pub mode: Mode,
    pub state: SandboxState,
    entered: bool,
}

impl Sandbox {
    pub fn guest_base(&self) -> u64 {
        self.page_base + METADATA_SIZE
    }

    pub fn guest_end(&self) -> u64 {
        self.page_base + PAGE_SIZE
    }

    pub fn stack_base(&self) -> u64 {
        self.guest_end() - STACK_SIZE
    }

    /// Initial frame register value; the stack grows down from here.
    pub fn stack_top(&self) -> u64 {
        self.guest_end()
    }

    pub fn metadata_addr(&self, field: u64) -> u64 {
        self.page_base + field
    }

    /// Attaches the sandbox tag when running in a tag-checked mode.
    pub fn pointer(&self, addr: u64) -> u64 {
        if self.mode.is_mte() {
            with_tag(addr, self.tag)
        } else {
            addr
        }
    }

    pub fn contains_guest(&self, addr: u64, len: u64) -> bool {
        let a = crate::memory::TaggedAddr(addr).untagged();
        a >= self.guest_base() && a.checked_add(len).is_some_and(|e| e <= self.guest_end())
    }

    fn meta(&self, space: &SimAddressSpace, field: u64) -> u64 {
        space.host_read(self.metadata_addr(field), 8).expect("metadata inside arena")
    }

    fn set_meta(&self, space: &mut SimAddressSpace, field: u64, value: u64) {
        space.host_write(self.metadata_addr(field), 8, value).expect("metadata inside arena");
    }

    /// Guest-partition offset where the context ends and the heap begins.
    pub fn context_end(&self, space: &SimAddressSpace) -> u64 {
        self.meta(space, META_CTX_END)
    }

    /// Current heap bump, as a guest-partition offset.
    pub fn heap_bump(&self, space: &SimAddressSpace) -> u64 {
        self.meta(space, META_HEAP_BUMP)
    }

    pub fn heap_limit(&self) -> u64 {
        GUEST_SIZE - STACK_SIZE
    }

    pub fn saved_stack_register(&self, space: &SimAddressSpace) -> u64 {
        self.meta(space, META_SAVED_SP)
    }

    pub fn set_sync_ref(&self, space: &mut SimAddressSpace, value: u64) {
        self.set_meta(space, META_SYNC_REF, value);
    }

    /// Reserves `size` bytes (rounded up to 8) at the start of the guest partition for the
    /// context copy and resets the heap to begin after it.
    pub fn reserve_context(&self, space: &mut SimAddressSpace, size: u64) -> Result<u64, SandboxError> {
        self.ensure_active()?;
        let rounded = size.next_multiple_of(HEAP_ALIGN);
        if rounded > self.heap_limit() {
            return Err(SandboxError::OutOfSandboxMemory { requested: rounded, available: self.heap_limit() });
        }
        self.set_meta(space, META_CTX_END, rounded);
        self.set_meta(space, META_HEAP_BUMP, rounded);
        Ok(self.guest_base())
    }

    /// Bump allocation between the context and the stack. Returns an untagged address.
    pub fn heap_alloc(&self, space: &mut SimAddressSpace, size: u64) -> Result<u64, SandboxError> {
        self.ensure_active()?;
        if size == 0 {
            return Err(SandboxError::ZeroAlloc);
        }
        let bump = self.heap_bump(space);
        let rounded = size.next_multiple_of(HEAP_ALIGN);
        let available = self.heap_limit() - bump;
        if rounded > available {
            return Err(SandboxError::OutOfSandboxMemory { requested: rounded, available });
        }
        self.set_meta(space, META_HEAP_BUMP, bump + rounded);
        Ok(self.guest_base() + bump)
    }

    /// Prologue bookkeeping: saves the caller's stack register in metadata and returns the
    /// guest frame register value.
    pub fn enter(&mut self, space: &mut SimAddressSpace, caller_stack_register: u64) -> Result<u64, SandboxError> {
        self.ensure_active()?;
        if self.entered {
            return Err(SandboxError::DoubleEnter);
        }
        self.set_meta(space, META_SAVED_SP, caller_stack_register);
        self.entered = true;
        Ok(self.pointer(self.stack_top()))
    }

    /// Epilogue bookkeeping: returns the saved caller stack register.
    pub fn exit(&mut self, space: &mut SimAddressSpace) -> Result<u64, SandboxError> {
        if !self.entered {
            return Err(SandboxError::ExitWithoutEnter);
        }
        self.entered = false;
        Ok(self.saved_stack_register(space))
    }

    pub fn is_entered(&self) -> bool {
        self.entered
    }

    fn ensure_active(&self) -> Result<(), SandboxError> {
        match self.state {
            SandboxState::Active => Ok(()),
            SandboxState::Free => Err(SandboxError::NotActive(self.core_id)),
        }
    }
}

#[derive(Debug, Default, Clone)]
struct PoolInner {
    /// Page base per core; pages stick to their core once created.
    pages: BTreeMap<u32, u64>,
    active: BTreeSet<u32>,
}

/// Registry of sandbox pages, safe for concurrent acquire and release from different cores.
#[derive(Debug)]
pub struct SandboxPool {
    sandbox_tag: u8,
    inner: Mutex<PoolInner>,
}

impl Clone for SandboxPool {
    fn clone(&self) -> Self {
        SandboxPool { sandbox_tag: self.sandbox_tag, inner: Mutex::new(self.lock().clone()) }
    }
}

impl SandboxPool {
    pub fn new(sandbox_tag: u8) -> Self {
        SandboxPool { sandbox_tag, inner: Mutex::new(PoolInner::default()) }
    }

    pub fn sandbox_tag(&self) -> u8 {
        self.sandbox_tag
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, PoolInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// The page assigned to `core`, creating and tagging it if needed.
    pub fn page_for(&self, space: &mut SimAddressSpace, core: u32) -> Result<u64, SandboxError> {
        let mut inner = self.lock();
        if let Some(base) = inner.pages.get(&core) {
            return Ok(*base);
        }
        let base = space.alloc(PAGE_SIZE, PAGE_SIZE)?;
        space.set_tag_range(base + METADATA_SIZE, GUEST_SIZE, self.sandbox_tag)?;
        inner.pages.insert(core, base);
        Ok(base)
    }

    /// Every page created so far, by core.
    pub fn pages(&self) -> Vec<(u32, u64)> {
        self.lock().pages.iter().map(|(c, b)| (*c, *b)).collect()
    }

    pub fn acquire(&self, space: &mut SimAddressSpace, core: u32, mode: Mode) -> Result<Sandbox, SandboxError> {
        if self.lock().active.contains(&core) {
            return Err(SandboxError::CoreBusy(core));
        }
        let page_base = self.page_for(space, core)?;
        let mut inner = self.lock();
        if !inner.active.insert(core) {
            return Err(SandboxError::CoreBusy(core));
        }
        drop(inner);
        let mask = compute_masks(page_base + METADATA_SIZE, GUEST_SIZE).expect("guest partition is aligned");
        let sb = Sandbox {
            core_id: core,
            page_base,
            mask,
            tag: self.sandbox_tag,
            mode,
            state: SandboxState::Active,
            entered: false,
        };
        sb.set_meta(space, META_AND_MASK, mask.and_mask);
        sb.set_meta(space, META_OR_MASK, mask.or_mask);
        Ok(sb)
    }

    /// Zeroes the guest partition and metadata and returns the page to the pool.
    pub fn release(&self, space: &mut SimAddressSpace, sb: Sandbox) -> Result<(), SandboxError> {
        let mut inner = self.lock();
        if !inner.active.remove(&sb.core_id) {
            return Err(SandboxError::NotActive(sb.core_id));
        }
        space.fill(sb.page_base, PAGE_SIZE, 0).expect("page inside arena");
        Ok(())
    }

    pub fn is_active(&self, core: u32) -> bool {
        self.lock().active.contains(&core)
    }
}
