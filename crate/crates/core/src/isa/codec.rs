// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Standard 8-byte eBPF instruction encoding.
//!
//! ```text
//! byte 0     opcode
//! byte 1     dst (low nibble) | src (high nibble)
//! bytes 2-3  offset, little-endian i16
//! bytes 4-7  immediate, little-endian i32
//! ```

use thiserror::Error;

use super::{AluOp, AluWidth, Instruction, JmpCond, MemSize, Operand, Program, Reg, INSN_SIZE};

// Instruction classes.
pub const BPF_LDX: u8 = 0x01;
pub const BPF_ST: u8 = 0x02;
pub const BPF_STX: u8 = 0x03;
pub const BPF_ALU: u8 = 0x04;
pub const BPF_JMP: u8 = 0x05;
pub const BPF_ALU64: u8 = 0x07;

// Size and mode modifiers for memory instructions.
pub const BPF_W: u8 = 0x00;
pub const BPF_H: u8 = 0x08;
pub const BPF_B: u8 = 0x10;
pub const BPF_DW: u8 = 0x18;
pub const BPF_MEM: u8 = 0x60;

// Source modifier.
pub const BPF_K: u8 = 0x00;
pub const BPF_X: u8 = 0x08;

// ALU operation codes.
pub const BPF_ADD: u8 = 0x00;
pub const BPF_SUB: u8 = 0x10;
pub const BPF_MUL: u8 = 0x20;
pub const BPF_OR: u8 = 0x40;
pub const BPF_AND: u8 = 0x50;
pub const BPF_LSH: u8 = 0x60;
pub const BPF_RSH: u8 = 0x70;
pub const BPF_XOR: u8 = 0xa0;
pub const BPF_MOV: u8 = 0xb0;

// Jump operation codes.
pub const BPF_JA: u8 = 0x00;
pub const BPF_JEQ: u8 = 0x10;
pub const BPF_JGT: u8 = 0x20;
pub const BPF_JNE: u8 = 0x50;
pub const BPF_JLT: u8 = 0xa0;
pub const BPF_CALL: u8 = 0x80;
pub const BPF_EXIT: u8 = 0x90;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("program length {0} is not a multiple of {INSN_SIZE} bytes")]
    Truncated(usize),
    #[error("invalid opcode {opcode:#04x} (insn #{pc})")]
    InvalidOpcode { pc: usize, opcode: u8 },
    #[error("register index {reg} out of range (insn #{pc})")]
    RegisterOutOfRange { pc: usize, reg: u8 },
}

fn alu_code(op: AluOp) -> u8 {
    match op {
        AluOp::Add => BPF_ADD,
        AluOp::Sub => BPF_SUB,
        AluOp::Mul => BPF_MUL,
        AluOp::Or => BPF_OR,
        AluOp::And => BPF_AND,
        AluOp::Lsh => BPF_LSH,
        AluOp::Rsh => BPF_RSH,
        AluOp::Xor => BPF_XOR,
        AluOp::Mov => BPF_MOV,
    }
}

fn alu_from_code(code: u8) -> Option<AluOp> {
    Some(match code {
        BPF_ADD => AluOp::Add,
        BPF_SUB => AluOp::Sub,
        BPF_MUL => AluOp::Mul,
        BPF_OR => AluOp::Or,
        BPF_AND => AluOp::And,
        BPF_LSH => AluOp::Lsh,
        BPF_RSH => AluOp::Rsh,
        BPF_XOR => AluOp::Xor,
        BPF_MOV => AluOp::Mov,
        _ => return None,
    })
}

fn size_code(size: MemSize) -> u8 {
    match size {
        MemSize::B => BPF_B,
        MemSize::H => BPF_H,
        MemSize::W => BPF_W,
        MemSize::DW => BPF_DW,
    }
}

fn size_from_code(code: u8) -> MemSize {
    match code & 0x18 {
        BPF_B => MemSize::B,
        BPF_H => MemSize::H,
        BPF_W => MemSize::W,
        _ => MemSize::DW,
    }
}

fn cond_code(cond: JmpCond) -> u8 {
    match cond {
        JmpCond::Eq => BPF_JEQ,
        JmpCond::Ne => BPF_JNE,
        JmpCond::Gt => BPF_JGT,
        JmpCond::Lt => BPF_JLT,
    }
}

fn cond_from_code(code: u8) -> Option<JmpCond> {
    Some(match code {
        BPF_JEQ => JmpCond::Eq,
        BPF_JNE => JmpCond::Ne,
        BPF_JGT => JmpCond::Gt,
        BPF_JLT => JmpCond::Lt,
        _ => return None,
    })
}

fn split_operand(src: &Operand) -> (u8, u8, i32) {
    match src {
        Operand::Reg(r) => (BPF_X, r.0, 0),
        Operand::Imm(imm) => (BPF_K, 0, *imm),
    }
}

/// Encodes a single instruction.
pub fn encode_insn(insn: &Instruction) -> [u8; INSN_SIZE] {
    let (opcode, dst, src, off, imm): (u8, u8, u8, i16, i32) = match insn {
        Instruction::Alu { width, op, dst, src } => {
            let class = match width {
                AluWidth::W64 => BPF_ALU64,
                AluWidth::W32 => BPF_ALU,
            };
            let (flag, src_reg, imm) = split_operand(src);
            (class | alu_code(*op) | flag, dst.0, src_reg, 0, imm)
        }
        Instruction::Load { size, dst, base, off } => (BPF_LDX | BPF_MEM | size_code(*size), dst.0, base.0, *off, 0),
        Instruction::Store { size, base, off, src: Operand::Reg(src) } => {
            (BPF_STX | BPF_MEM | size_code(*size), base.0, src.0, *off, 0)
        }
        Instruction::Store { size, base, off, src: Operand::Imm(imm) } => {
            (BPF_ST | BPF_MEM | size_code(*size), base.0, 0, *off, *imm)
        }
        Instruction::Ja { off } => (BPF_JMP | BPF_JA, 0, 0, *off, 0),
        Instruction::Jcond { cond, dst, src, off } => {
            let (flag, src_reg, imm) = split_operand(src);
            (BPF_JMP | cond_code(*cond) | flag, dst.0, src_reg, *off, imm)
        }
        Instruction::Call { helper } => (BPF_JMP | BPF_CALL, 0, 0, 0, *helper),
        Instruction::Exit => (BPF_JMP | BPF_EXIT, 0, 0, 0, 0),
    };
    let mut out = [0u8; INSN_SIZE];
    out[0] = opcode;
    out[1] = (src << 4) | (dst & 0x0f);
    out[2..4].copy_from_slice(&off.to_le_bytes());
    out[4..8].copy_from_slice(&imm.to_le_bytes());
    out
}

/// Decodes a single instruction. `pc` is used only for error reporting.
pub fn decode_insn(pc: usize, raw: &[u8; INSN_SIZE]) -> Result<Instruction, CodecError> {
    let opcode = raw[0];
    let reg = |index: u8| Reg::new(index).ok_or(CodecError::RegisterOutOfRange { pc, reg: index });
    let dst = raw[1] & 0x0f;
    let src = raw[1] >> 4;
    let off = i16::from_le_bytes([raw[2], raw[3]]);
    let imm = i32::from_le_bytes([raw[4], raw[5], raw[6], raw[7]]);
    let invalid = CodecError::InvalidOpcode { pc, opcode };
    let operand = |flag: u8| -> Result<Operand, CodecError> {
        if flag == BPF_X {
            Ok(Operand::Reg(reg(src)?))
        } else {
            Ok(Operand::Imm(imm))
        }
    };

    let insn = match opcode & 0x07 {
        class @ (BPF_ALU | BPF_ALU64) => {
            let op = alu_from_code(opcode & 0xf0).ok_or(invalid)?;
            let width = if class == BPF_ALU64 { AluWidth::W64 } else { AluWidth::W32 };
            Instruction::Alu { width, op, dst: reg(dst)?, src: operand(opcode & 0x08)? }
        }
        BPF_LDX if opcode & 0xe0 == BPF_MEM => {
            Instruction::Load { size: size_from_code(opcode), dst: reg(dst)?, base: reg(src)?, off }
        }
        BPF_STX if opcode & 0xe0 == BPF_MEM => {
            Instruction::Store { size: size_from_code(opcode), base: reg(dst)?, off, src: Operand::Reg(reg(src)?) }
        }
        BPF_ST if opcode & 0xe0 == BPF_MEM => {
            Instruction::Store { size: size_from_code(opcode), base: reg(dst)?, off, src: Operand::Imm(imm) }
        }
        BPF_JMP => match opcode & 0xf0 {
            BPF_JA if opcode == BPF_JMP | BPF_JA => Instruction::Ja { off },
            BPF_CALL if opcode == BPF_JMP | BPF_CALL => Instruction::Call { helper: imm },
            BPF_EXIT if opcode == BPF_JMP | BPF_EXIT => Instruction::Exit,
            code => {
                let cond = cond_from_code(code).ok_or(invalid)?;
                Instruction::Jcond { cond, dst: reg(dst)?, src: operand(opcode & 0x08)?, off }
            }
        },
        _ => return Err(invalid),
    };
    Ok(insn)
}

/// Encodes a program's instructions. Metadata (privilege, origins) is not part of the wire
/// format.
pub fn encode(program: &Program) -> Vec<u8> {
    program.insns.iter().flat_map(encode_insn).collect()
}

/// Decodes a byte sequence into an unprivileged program with all instructions marked original.
pub fn decode(bytes: &[u8]) -> Result<Program, CodecError> {
    if !bytes.len().is_multiple_of(INSN_SIZE) {
        return Err(CodecError::Truncated(bytes.len()));
    }
    let insns = bytes
        .chunks_exact(INSN_SIZE)
        .enumerate()
        .map(|(pc, chunk)| decode_insn(pc, chunk.try_into().expect("chunk of INSN_SIZE")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Program::new(insns))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_encoding() {
        let p = Program::new(vec![Instruction::Exit]);
        assert_eq!(encode(&p), vec![0x95, 0, 0, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn empty_program() {
        assert!(encode(&Program::new(vec![])).is_empty());
        assert_eq!(decode(&[]).unwrap(), Program::new(vec![]));
    }

    #[test]
    fn truncated_input() {
        assert_eq!(decode(&[0x95, 0, 0, 0, 0, 0, 0]), Err(CodecError::Truncated(7)));
    }

    #[test]
    fn invalid_opcode() {
        assert!(matches!(decode(&[0xff, 0, 0, 0, 0, 0, 0, 0]), Err(CodecError::InvalidOpcode { pc: 0, opcode: 0xff })));
        // BPF_LD with the legacy ABS mode is outside the subset.
        assert!(matches!(decode(&[0x20, 0, 0, 0, 0, 0, 0, 0]), Err(CodecError::InvalidOpcode { .. })));
    }

    #[test]
    fn register_out_of_range() {
        assert!(matches!(decode(&[0xb7, 0x0d, 0, 0, 0, 0, 0, 0]), Err(CodecError::RegisterOutOfRange { reg: 13, .. })));
    }
}
