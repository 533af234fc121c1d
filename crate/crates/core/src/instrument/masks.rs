// SPDX-License-Identifier: (Apache-2.0 OR MIT)

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::GRANULE;

/// An and/or mask pair confining addresses to one power-of-two aligned region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MaskPair {
    pub and_mask: u64,
    pub or_mask: u64,
}

impl MaskPair {
    pub fn region_base(&self) -> u64 {
        self.or_mask
    }

    pub fn region_size(&self) -> u64 {
        self.and_mask + 1
    }

    pub fn contains(&self, addr: u64) -> bool {
        addr & !self.and_mask == self.or_mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("region size {0} is not a power of two of at least 16 bytes")]
    NotPowerOfTwo(u64),
    #[error("region base {base:#x} is not aligned to its size {size}")]
    MisalignedBase { base: u64, size: u64 },
}

pub fn compute_masks(base: u64, size: u64) -> Result<MaskPair, MaskError> {
    if !size.is_power_of_two() || size < GRANULE {
        return Err(MaskError::NotPowerOfTwo(size));
    }
    if base & (size - 1) != 0 {
        return Err(MaskError::MisalignedBase { base, size });
    }
    Ok(MaskPair { and_mask: size - 1, or_mask: base })
}

/// Clears the bits above the region, then sets the region base.
pub fn mask_address(addr: u64, pair: MaskPair) -> u64 {
    (addr & pair.and_mask) | pair.or_mask
}
