// SPDX-License-Identifier: (Apache-2.0 OR MIT)

pub mod analyze;
pub mod context;
pub mod engine;
pub mod harness;
pub mod instrument;
pub mod isa;
pub mod maps;
pub mod memory;
pub mod mode;
pub mod sandbox;
pub mod scenario;
