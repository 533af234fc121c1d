// SPDX-License-Identifier: (Apache-2.0 OR MIT)

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Isolation configuration a program runs under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Mode {
    /// No isolation; the unmodified-kernel baseline.
    #[serde(rename = "vanilla")]
    Vanilla,
    /// Address masking inserted by binary rewriting.
    #[serde(rename = "sfi")]
    Sfi,
    /// Synchronous tag checking with context copied into the sandbox.
    #[serde(rename = "mte")]
    Mte,
    /// Synchronous tag checking on the real kernel objects, without context synchronization.
    #[serde(rename = "mte-min")]
    MteMin,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Vanilla, Mode::Sfi, Mode::Mte, Mode::MteMin];

    pub fn is_mte(self) -> bool {
        matches!(self, Mode::Mte | Mode::MteMin)
    }

    pub fn is_sandboxed(self) -> bool {
        self != Mode::Vanilla
    }

    /// Modes in which the guest works on a sandboxed copy of its context.
    pub fn copies_context(self) -> bool {
        matches!(self, Mode::Sfi | Mode::Mte)
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Vanilla => "vanilla",
            Mode::Sfi => "sfi",
            Mode::Mte => "mte",
            Mode::MteMin => "mte-min",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModeError {
    #[error("unsupported mode `{0}`: only synchronous tag checking is implemented")]
    UnsupportedTagMode(String),
    #[error("unknown mode `{0}` (expected vanilla, sfi, mte or mte-min)")]
    Unknown(String),
}

impl FromStr for Mode {
    type Err = ModeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(Mode::Vanilla),
            "sfi" => Ok(Mode::Sfi),
            "mte" | "mte-sync" => Ok(Mode::Mte),
            "mte-min" => Ok(Mode::MteMin),
            "async-mte" | "mte-async" | "asymmetric-mte" | "mte-asymmetric" | "asym-mte" => {
                Err(ModeError::UnsupportedTagMode(s.to_string()))
            }
            _ => Err(ModeError::Unknown(s.to_string())),
        }
    }
}
