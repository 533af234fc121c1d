// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! The eBPF-style instruction subset understood by the runtime.
//!
//! Instructions are kept in a typed form ([`Instruction`]) and converted to the standard
//! 8-byte wire layout by [`codec`]; [`asm`] provides the text assembler and disassembler.
//! Registers 0 to 10 are visible to guest programs, registers 11 and 12 are reserved for
//! instrumentation inserted by the rewriter.

pub mod asm;
pub mod codec;

use std::fmt;

pub use asm::{assemble, assemble_instrumented, disassemble, AsmError, AsmErrorKind};
pub use codec::{decode, encode, CodecError};

/// Size of one encoded instruction, in bytes.
pub const INSN_SIZE: usize = 8;
/// Maximum number of instructions accepted for an unprivileged program.
pub const UNPRIVILEGED_MAX_INSNS: usize = 4096;
/// Maximum number of instructions accepted for a privileged program.
pub const PRIVILEGED_MAX_INSNS: usize = 1_000_000;

/// A register index, 0 to 12.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Reg(u8);

impl Reg {
    pub const R0: Reg = Reg(0);
    pub const R1: Reg = Reg(1);
    pub const R2: Reg = Reg(2);
    pub const R3: Reg = Reg(3);
    pub const R4: Reg = Reg(4);
    pub const R5: Reg = Reg(5);
    pub const R6: Reg = Reg(6);
    pub const R7: Reg = Reg(7);
    pub const R8: Reg = Reg(8);
    pub const R9: Reg = Reg(9);
    /// Frame register: read-only stack top.
    pub const FP: Reg = Reg(10);
    /// Scratch register holding masked effective addresses.
    pub const SCRATCH: Reg = Reg(11);
    /// Scratch register holding materialized 64-bit constants.
    pub const CONST: Reg = Reg(12);

    /// Number of registers including the reserved ones.
    pub const COUNT: usize = 13;

    pub fn new(index: u8) -> Option<Reg> {
        (usize::from(index) < Self::COUNT).then_some(Reg(index))
    }

    pub fn index(self) -> usize {
        usize::from(self.0)
    }

    pub fn is_reserved(self) -> bool {
        self.0 >= 11
    }
}

impl fmt::Display for Reg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluWidth {
    W64,
    W32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Or,
    And,
    Lsh,
    Rsh,
    Xor,
    Mov,
}

impl AluOp {
    pub const ALL: [AluOp; 9] =
        [AluOp::Add, AluOp::Sub, AluOp::Mul, AluOp::Or, AluOp::And, AluOp::Lsh, AluOp::Rsh, AluOp::Xor, AluOp::Mov];

    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::Or => "or",
            AluOp::And => "and",
            AluOp::Lsh => "lsh",
            AluOp::Rsh => "rsh",
            AluOp::Xor => "xor",
            AluOp::Mov => "mov",
        }
    }
}

/// Result of an ALU operation. `src` is the second operand already widened to 64 bits
/// (immediates sign-extended); 32-bit results are zero-extended.
pub fn alu_eval(width: AluWidth, op: AluOp, dst: u64, src: u64) -> u64 {
    match width {
        AluWidth::W64 => match op {
            AluOp::Add => dst.wrapping_add(src),
            AluOp::Sub => dst.wrapping_sub(src),
            AluOp::Mul => dst.wrapping_mul(src),
            AluOp::Or => dst | src,
            AluOp::And => dst & src,
            AluOp::Lsh => dst.wrapping_shl((src & 63) as u32),
            AluOp::Rsh => dst.wrapping_shr((src & 63) as u32),
            AluOp::Xor => dst ^ src,
            AluOp::Mov => src,
        },
        AluWidth::W32 => {
            let (a, b) = (dst as u32, src as u32);
            let r = match op {
                AluOp::Add => a.wrapping_add(b),
                AluOp::Sub => a.wrapping_sub(b),
                AluOp::Mul => a.wrapping_mul(b),
                AluOp::Or => a | b,
                AluOp::And => a & b,
                AluOp::Lsh => a.wrapping_shl(b & 31),
                AluOp::Rsh => a.wrapping_shr(b & 31),
                AluOp::Xor => a ^ b,
                AluOp::Mov => b,
            };
            r as u64
        }
    }
}

/// Immediate widened the way every instruction consumes it.
pub fn imm64(imm: i32) -> u64 {
    imm as i64 as u64
}

/// Width of a memory access.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MemSize {
    B,
    H,
    W,
    DW,
}

impl MemSize {
    pub const ALL: [MemSize; 4] = [MemSize::B, MemSize::H, MemSize::W, MemSize::DW];

    pub fn bytes(self) -> u64 {
        match self {
            MemSize::B => 1,
            MemSize::H => 2,
            MemSize::W => 4,
            MemSize::DW => 8,
        }
    }

    pub fn from_bytes(len: u64) -> Option<MemSize> {
        match len {
            1 => Some(MemSize::B),
            2 => Some(MemSize::H),
            4 => Some(MemSize::W),
            8 => Some(MemSize::DW),
            _ => None,
        }
    }

    pub fn suffix(self) -> &'static str {
        match self {
            MemSize::B => "b",
            MemSize::H => "h",
            MemSize::W => "w",
            MemSize::DW => "dw",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operand {
    Reg(Reg),
    Imm(i32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum JmpCond {
    Eq,
    Ne,
    Gt,
    Lt,
}

impl JmpCond {
    pub const ALL: [JmpCond; 4] = [JmpCond::Eq, JmpCond::Ne, JmpCond::Gt, JmpCond::Lt];

    pub fn mnemonic(self) -> &'static str {
        match self {
            JmpCond::Eq => "jeq",
            JmpCond::Ne => "jne",
            JmpCond::Gt => "jgt",
            JmpCond::Lt => "jlt",
        }
    }

    /// Unsigned 64-bit comparison.
    pub fn holds(self, lhs: u64, rhs: u64) -> bool {
        match self {
            JmpCond::Eq => lhs == rhs,
            JmpCond::Ne => lhs != rhs,
            JmpCond::Gt => lhs > rhs,
            JmpCond::Lt => lhs < rhs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Instruction {
    Alu {
        width: AluWidth,
        op: AluOp,
        dst: Reg,
        src: Operand,
    },
    /// `dst = *(size *)(base + off)`
    Load {
        size: MemSize,
        dst: Reg,
        base: Reg,
        off: i16,
    },
    /// `*(size *)(base + off) = src`; an immediate source encodes as `ST`, a register as `STX`.
    Store {
        size: MemSize,
        base: Reg,
        off: i16,
        src: Operand,
    },
    Ja {
        off: i16,
    },
    Jcond {
        cond: JmpCond,
        dst: Reg,
        src: Operand,
        off: i16,
    },
    Call {
        helper: i32,
    },
    Exit,
}

impl Instruction {
    pub fn alu64(op: AluOp, dst: Reg, src: Operand) -> Self {
        Instruction::Alu { width: AluWidth::W64, op, dst, src }
    }

    pub fn alu64_imm(op: AluOp, dst: Reg, imm: i32) -> Self {
        Self::alu64(op, dst, Operand::Imm(imm))
    }

    pub fn alu64_reg(op: AluOp, dst: Reg, src: Reg) -> Self {
        Self::alu64(op, dst, Operand::Reg(src))
    }

    /// A `ja +0`, used as a no-op marker.
    pub fn nop() -> Self {
        Instruction::Ja { off: 0 }
    }

    /// All registers this instruction reads or writes.
    pub fn registers(&self) -> Vec<Reg> {
        let mut regs = Vec::with_capacity(2);
        let push_operand = |regs: &mut Vec<Reg>, op: &Operand| {
            if let Operand::Reg(r) = op {
                regs.push(*r);
            }
        };
        match self {
            Instruction::Alu { dst, src, .. } => {
                regs.push(*dst);
                push_operand(&mut regs, src);
            }
            Instruction::Load { dst, base, .. } => {
                regs.push(*dst);
                regs.push(*base);
            }
            Instruction::Store { base, src, .. } => {
                regs.push(*base);
                push_operand(&mut regs, src);
            }
            Instruction::Jcond { dst, src, .. } => {
                regs.push(*dst);
                push_operand(&mut regs, src);
            }
            Instruction::Ja { .. } | Instruction::Call { .. } | Instruction::Exit => {}
        }
        regs
    }

    pub fn is_memory_access(&self) -> bool {
        matches!(self, Instruction::Load { .. } | Instruction::Store { .. })
    }

    pub fn jump_offset(&self) -> Option<i16> {
        match self {
            Instruction::Ja { off } | Instruction::Jcond { off, .. } => Some(*off),
            _ => None,
        }
    }

    pub fn with_jump_offset(mut self, new_off: i16) -> Self {
        match &mut self {
            Instruction::Ja { off } | Instruction::Jcond { off, .. } => *off = new_off,
            _ => {}
        }
        self
    }
}

impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&asm::disassemble_one(self))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Privilege {
    #[default]
    Unprivileged,
    Privileged,
}

/// Why an instrumentation pass inserted an instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum InsertKind {
    /// The and/or masking pair.
    AccessCheck,
    /// Effective-address formation and constant materialization feeding a check.
    AddressForm,
    /// Stack-switch prologue and epilogue markers.
    Sandbox,
    /// Context-field access conversion for modes that operate on the real kernel object.
    CtxConvert,
    /// Synthetic out-of-bounds gadget added by the fault injector.
    Injected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum InsnOrigin {
    #[default]
    Original,
    Inserted(InsertKind),
}

impl InsnOrigin {
    /// Instructions that existed before the last rewriting pass: original code and injected
    /// gadgets. Fault program counters are reported in this numbering.
    pub fn is_source(self) -> bool {
        matches!(self, InsnOrigin::Original | InsnOrigin::Inserted(InsertKind::Injected))
    }
}

/// A program with its load-time metadata.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub insns: Vec<Instruction>,
    pub origin: Vec<InsnOrigin>,
    pub privilege: Privilege,
    pub context_type: String,
}

impl Program {
    pub fn new(insns: Vec<Instruction>) -> Self {
        let origin = vec![InsnOrigin::Original; insns.len()];
        Program { insns, origin, privilege: Privilege::default(), context_type: String::new() }
    }

    pub fn with_privilege(mut self, privilege: Privilege) -> Self {
        self.privilege = privilege;
        self
    }

    pub fn with_context_type(mut self, name: impl Into<String>) -> Self {
        self.context_type = name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.insns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.insns.is_empty()
    }

    pub fn count_inserted(&self, kind: InsertKind) -> usize {
        self.origin.iter().filter(|o| **o == InsnOrigin::Inserted(kind)).count()
    }

    /// For every instruction, the index of the source-level instruction it belongs to.
    /// Inserted instructions map to the source instruction that follows them.
    pub fn source_pcs(&self) -> Vec<usize> {
        let mut out = vec![0; self.origin.len()];
        let mut next = self.origin.iter().filter(|o| o.is_source()).count();
        for (i, origin) in self.origin.iter().enumerate().rev() {
            if origin.is_source() {
                next -= 1;
            }
            out[i] = next;
        }
        out
    }
}
