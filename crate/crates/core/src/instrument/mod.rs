// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Program rewriting: address masking, sandbox markers and context access conversion.

pub mod masks;
pub mod rewrite;

pub use masks::{compute_masks, mask_address, MaskError, MaskPair};
pub use rewrite::{instrument, rewrite_sfi, splice, ComponentMasks, InstrumentationReport, Instrumented, RewriteError};
