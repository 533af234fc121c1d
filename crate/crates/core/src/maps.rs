// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Array maps with an isolated, maskable and taggable value region.
//!
//! The value region is a power-of-two sized block aligned to its size, so a single mask pair
//! confines every access to it. Map metadata (reference count, lock token) is allocated as a
//! separate block that keeps the default memory tag.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::instrument::{compute_masks, MaskPair};
use crate::memory::{with_tag, MemError, SimAddressSpace, GRANULE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MapError {
    #[error("map value size and entry count must be non-zero")]
    ZeroSized,
    #[error("arena exhausted creating map {0}")]
    ArenaExhausted(u32),
    #[error("value of {found} bytes does not match value size {expected}")]
    LengthMismatch { expected: u64, found: u64 },
    #[error("index {index} out of range for map {map_id}")]
    IndexOutOfRange { map_id: u32, index: u64 },
    #[error("unknown map {0}")]
    UnknownMap(u32),
    #[error("duplicate map id {0}")]
    DuplicateMap(u32),
    #[error(transparent)]
    Memory(#[from] MemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MapMetadata {
    pub addr: u64,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MapDescriptor {
    pub map_id: u32,
    pub value_size: u64,
    pub max_entries: u64,
    pub base: u64,
    pub region_size: u64,
    pub mask: MaskPair,
    pub tag: u8,
    pub metadata: MapMetadata,
}

const METADATA_BYTES: u64 = 16;

/// Smallest power of two >= `bytes`, at least one granule.
pub fn region_size_for(bytes: u64) -> u64 {
    bytes.next_power_of_two().max(GRANULE)
}

impl MapDescriptor {
    pub fn used_bytes(&self) -> u64 {
        self.value_size * self.max_entries
    }

    pub fn region(&self) -> std::ops::Range<u64> {
        self.base..self.base + self.region_size
    }

    pub fn contains(&self, addr: u64, len: u64) -> bool {
        let a = crate::memory::TaggedAddr(addr).untagged();
        a >= self.base && a.checked_add(len).is_some_and(|e| e <= self.base + self.region_size)
    }

    /// Value address for `index`, or 0 when out of range. Tagged with the map tag when
    /// `tagged` is set.
    pub fn lookup(&self, index: u64, tagged: bool) -> u64 {
        if index >= self.max_entries {
            return 0;
        }
        let addr = self.base + index * self.value_size;
        if tagged {
            with_tag(addr, self.tag)
        } else {
            addr
        }
    }
}

pub fn create_array_map(
    space: &mut SimAddressSpace,
    map_id: u32,
    value_size: u64,
    max_entries: u64,
    tag: u8,
) -> Result<MapDescriptor, MapError> {
    if value_size == 0 || max_entries == 0 {
        return Err(MapError::ZeroSized);
    }
    let bytes = value_size.checked_mul(max_entries).ok_or(MapError::ArenaExhausted(map_id))?;
    if bytes > space.size() {
        return Err(MapError::ArenaExhausted(map_id));
    }
    let region_size = region_size_for(bytes);
    let base = space.alloc(region_size, region_size).map_err(|e| match e {
        MemError::ArenaExhausted { .. } => MapError::ArenaExhausted(map_id),
        other => MapError::Memory(other),
    })?;
    space.fill(base, region_size, 0).expect("fresh allocation inside arena");
    space.set_tag_range(base, region_size, tag)?;
    let meta = space.alloc(METADATA_BYTES, GRANULE).map_err(|_| MapError::ArenaExhausted(map_id))?;
    // refcount = 1, lock token = 0
    space.host_write(meta, 8, 1).expect("metadata inside arena");
    space.host_write(meta + 8, 8, 0).expect("metadata inside arena");
    let mask = compute_masks(base, region_size).expect("region is a power of two aligned to its size");
    Ok(MapDescriptor {
        map_id,
        value_size,
        max_entries,
        base,
        region_size,
        mask,
        tag,
        metadata: MapMetadata { addr: meta, size: METADATA_BYTES },
    })
}

/// Shared map registry, keyed by map id.
#[derive(Debug, Clone, Default)]
pub struct MapRegistry {
    maps: BTreeMap<u32, MapDescriptor>,
}

impl MapRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(
        &mut self,
        space: &mut SimAddressSpace,
        map_id: u32,
        value_size: u64,
        max_entries: u64,
        tag: u8,
    ) -> Result<&MapDescriptor, MapError> {
        if self.maps.contains_key(&map_id) {
            return Err(MapError::DuplicateMap(map_id));
        }
        let desc = create_array_map(space, map_id, value_size, max_entries, tag)?;
        Ok(self.maps.entry(map_id).or_insert(desc))
    }

    pub fn get(&self, map_id: u32) -> Option<&MapDescriptor> {
        self.maps.get(&map_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &MapDescriptor> {
        self.maps.values()
    }

    /// The map whose value region contains `[addr, addr+len)`.
    pub fn find(&self, addr: u64, len: u64) -> Option<&MapDescriptor> {
        self.maps.values().find(|m| m.contains(addr, len))
    }

    pub fn lookup(&self, map_id: u32, index: u64, tagged: bool) -> Result<u64, MapError> {
        Ok(self.get(map_id).ok_or(MapError::UnknownMap(map_id))?.lookup(index, tagged))
    }

    /// Kernel-side element write; the whole value is replaced in one step.
    pub fn update(&self, space: &mut SimAddressSpace, map_id: u32, index: u64, value: &[u8]) -> Result<(), MapError> {
        let desc = self.get(map_id).ok_or(MapError::UnknownMap(map_id))?;
        if value.len() as u64 != desc.value_size {
            return Err(MapError::LengthMismatch { expected: desc.value_size, found: value.len() as u64 });
        }
        if index >= desc.max_entries {
            return Err(MapError::IndexOutOfRange { map_id, index });
        }
        space.write_bytes(desc.base + index * desc.value_size, value).expect("map region inside arena");
        Ok(())
    }

    pub fn read(&self, space: &SimAddressSpace, map_id: u32, index: u64) -> Result<Vec<u8>, MapError> {
        let desc = self.get(map_id).ok_or(MapError::UnknownMap(map_id))?;
        if index >= desc.max_entries {
            return Err(MapError::IndexOutOfRange { map_id, index });
        }
        Ok(space.read_bytes(desc.base + index * desc.value_size, desc.value_size).expect("map region").to_vec())
    }

    /// All element bytes of every map, by id.
    pub fn contents(&self, space: &SimAddressSpace) -> BTreeMap<u32, Vec<u8>> {
        self.maps
            .values()
            .map(|m| (m.map_id, space.read_bytes(m.base, m.used_bytes()).expect("map region").to_vec()))
            .collect()
    }
}
