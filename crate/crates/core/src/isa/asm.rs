// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Text assembler and disassembler.
//!
//! One instruction per line, `;` starts a comment:
//!
//! ```text
//! mov64 r0, 42          ; alu: mov add sub mul and or xor lsh rsh, 64 or 32
//! ldxw r2, [r1+4]       ; ldxb ldxh ldxw ldxdw
//! stxdw [r10-8], r2     ; stxb stxh stxw stxdw
//! stw [r10-16], 7       ; stb sth stw stdw
//! jeq r2, 0, +1         ; jeq jne jgt jlt, register or immediate operand
//! ja +2
//! call 1
//! exit
//! ```

use thiserror::Error;

use super::{AluOp, AluWidth, Instruction, JmpCond, MemSize, Operand, Program, Reg};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AsmErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown mnemonic `{0}`")]
    UnknownMnemonic(String),
    #[error("register `{0}` out of range")]
    RegisterOutOfRange(String),
    #[error("register r{0} is reserved for instrumentation")]
    ReservedRegister(u8),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct AsmError {
    pub line: usize,
    pub kind: AsmErrorKind,
}

/// Assembles guest source. Reserved registers are rejected.
pub fn assemble(text: &str) -> Result<Program, AsmError> {
    assemble_with(text, false)
}

/// Assembles instrumented output, which may use the reserved registers.
pub fn assemble_instrumented(text: &str) -> Result<Program, AsmError> {
    assemble_with(text, true)
}

fn assemble_with(text: &str, allow_reserved: bool) -> Result<Program, AsmError> {
    let mut insns = Vec::new();
    for (index, raw) in text.lines().enumerate() {
        let line = raw.split(';').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let insn = parse_line(line).map_err(|kind| AsmError { line: index + 1, kind })?;
        if !allow_reserved {
            if let Some(r) = insn.registers().into_iter().find(|r| r.is_reserved()) {
                return Err(AsmError { line: index + 1, kind: AsmErrorKind::ReservedRegister(r.0) });
            }
        }
        insns.push(insn);
    }
    Ok(Program::new(insns))
}

fn syntax(msg: impl Into<String>) -> AsmErrorKind {
    AsmErrorKind::Syntax(msg.into())
}

fn parse_line(line: &str) -> Result<Instruction, AsmErrorKind> {
    let (mnemonic, rest) = match line.find(char::is_whitespace) {
        Some(pos) => (&line[..pos], line[pos..].trim()),
        None => (line, ""),
    };
    let operands = split_operands(rest);
    let expect = |n: usize| -> Result<(), AsmErrorKind> {
        if operands.len() == n {
            Ok(())
        } else {
            Err(syntax(format!("`{mnemonic}` takes {n} operand(s), found {}", operands.len())))
        }
    };

    if mnemonic == "exit" {
        expect(0)?;
        return Ok(Instruction::Exit);
    }
    if mnemonic == "call" {
        expect(1)?;
        return Ok(Instruction::Call { helper: parse_imm(operands[0])? });
    }
    if mnemonic == "ja" {
        expect(1)?;
        return Ok(Instruction::Ja { off: parse_jump_offset(operands[0])? });
    }
    if let Some(cond) = JmpCond::ALL.into_iter().find(|c| c.mnemonic() == mnemonic) {
        expect(3)?;
        return Ok(Instruction::Jcond {
            cond,
            dst: parse_reg(operands[0])?,
            src: parse_operand(operands[1])?,
            off: parse_jump_offset(operands[2])?,
        });
    }
    if let Some(suffix) = mnemonic.strip_prefix("ldx") {
        let size = parse_size(mnemonic, suffix)?;
        expect(2)?;
        let (base, off) = parse_mem(operands[1])?;
        return Ok(Instruction::Load { size, dst: parse_reg(operands[0])?, base, off });
    }
    if let Some(suffix) = mnemonic.strip_prefix("stx") {
        let size = parse_size(mnemonic, suffix)?;
        expect(2)?;
        let (base, off) = parse_mem(operands[0])?;
        return Ok(Instruction::Store { size, base, off, src: Operand::Reg(parse_reg(operands[1])?) });
    }
    if let Some(suffix) = mnemonic.strip_prefix("st") {
        let size = parse_size(mnemonic, suffix)?;
        expect(2)?;
        let (base, off) = parse_mem(operands[0])?;
        return Ok(Instruction::Store { size, base, off, src: Operand::Imm(parse_imm(operands[1])?) });
    }
    for op in AluOp::ALL {
        if let Some(width) = mnemonic.strip_prefix(op.mnemonic()) {
            let width = match width {
                "64" => AluWidth::W64,
                "32" => AluWidth::W32,
                _ => continue,
            };
            expect(2)?;
            return Ok(Instruction::Alu { width, op, dst: parse_reg(operands[0])?, src: parse_operand(operands[1])? });
        }
    }
    Err(AsmErrorKind::UnknownMnemonic(mnemonic.to_string()))
}

fn split_operands(rest: &str) -> Vec<&str> {
    if rest.is_empty() {
        return Vec::new();
    }
    rest.split(',').map(str::trim).collect()
}

fn parse_size(mnemonic: &str, suffix: &str) -> Result<MemSize, AsmErrorKind> {
    MemSize::ALL
        .into_iter()
        .find(|s| s.suffix() == suffix)
        .ok_or_else(|| AsmErrorKind::UnknownMnemonic(mnemonic.to_string()))
}

fn parse_reg(token: &str) -> Result<Reg, AsmErrorKind> {
    let digits = token
        .strip_prefix('r')
        .filter(|d| !d.is_empty() && d.bytes().all(|b| b.is_ascii_digit()))
        .ok_or_else(|| syntax(format!("expected register, found `{token}`")))?;
    digits.parse::<u8>().ok().and_then(Reg::new).ok_or_else(|| AsmErrorKind::RegisterOutOfRange(token.to_string()))
}

fn parse_operand(token: &str) -> Result<Operand, AsmErrorKind> {
    if token.starts_with('r') {
        parse_reg(token).map(Operand::Reg)
    } else {
        parse_imm(token).map(Operand::Imm)
    }
}

fn parse_int(token: &str) -> Option<i64> {
    let (negative, body) = match token.as_bytes().first() {
        Some(b'-') => (true, &token[1..]),
        Some(b'+') => (false, &token[1..]),
        _ => (false, token),
    };
    let magnitude = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i64::from_str_radix(hex, 16).ok()?
    } else if !body.is_empty() && body.bytes().all(|b| b.is_ascii_digit()) {
        body.parse::<i64>().ok()?
    } else {
        return None;
    };
    Some(if negative { -magnitude } else { magnitude })
}

/// Immediates are signed 32-bit; unsigned 32-bit bit patterns (e.g. `0xffffffff`) are accepted.
fn parse_imm(token: &str) -> Result<i32, AsmErrorKind> {
    let value = parse_int(token).ok_or_else(|| syntax(format!("expected immediate, found `{token}`")))?;
    if let Ok(v) = i32::try_from(value) {
        Ok(v)
    } else if (0..=i64::from(u32::MAX)).contains(&value) {
        Ok(value as u32 as i32)
    } else {
        Err(syntax(format!("immediate `{token}` does not fit in 32 bits")))
    }
}

fn parse_off(token: &str) -> Result<i16, AsmErrorKind> {
    let value = parse_int(token).ok_or_else(|| syntax(format!("expected offset, found `{token}`")))?;
    i16::try_from(value).map_err(|_| syntax(format!("offset `{token}` does not fit in 16 bits")))
}

fn parse_jump_offset(token: &str) -> Result<i16, AsmErrorKind> {
    parse_off(token)
}

fn parse_mem(token: &str) -> Result<(Reg, i16), AsmErrorKind> {
    let inner = token
        .strip_prefix('[')
        .and_then(|t| t.strip_suffix(']'))
        .ok_or_else(|| syntax(format!("expected memory operand, found `{token}`")))?
        .trim();
    match inner.find(['+', '-']) {
        Some(pos) => {
            let reg = parse_reg(inner[..pos].trim())?;
            let off = parse_off(&inner[pos..].replace(' ', ""))?;
            Ok((reg, off))
        }
        None => Ok((parse_reg(inner)?, 0)),
    }
}

fn fmt_operand(src: &Operand) -> String {
    match src {
        Operand::Reg(r) => r.to_string(),
        Operand::Imm(imm) => imm.to_string(),
    }
}

fn fmt_signed(off: i16) -> String {
    if off < 0 {
        off.to_string()
    } else {
        format!("+{off}")
    }
}

pub(crate) fn disassemble_one(insn: &Instruction) -> String {
    match insn {
        Instruction::Alu { width, op, dst, src } => {
            let bits = match width {
                AluWidth::W64 => "64",
                AluWidth::W32 => "32",
            };
            format!("{}{bits} {dst}, {}", op.mnemonic(), fmt_operand(src))
        }
        Instruction::Load { size, dst, base, off } => {
            format!("ldx{} {dst}, [{base}{}]", size.suffix(), fmt_signed(*off))
        }
        Instruction::Store { size, base, off, src: Operand::Reg(src) } => {
            format!("stx{} [{base}{}], {src}", size.suffix(), fmt_signed(*off))
        }
        Instruction::Store { size, base, off, src: Operand::Imm(imm) } => {
            format!("st{} [{base}{}], {imm}", size.suffix(), fmt_signed(*off))
        }
        Instruction::Ja { off } => format!("ja {}", fmt_signed(*off)),
        Instruction::Jcond { cond, dst, src, off } => {
            format!("{} {dst}, {}, {}", cond.mnemonic(), fmt_operand(src), fmt_signed(*off))
        }
        Instruction::Call { helper } => format!("call {helper}"),
        Instruction::Exit => "exit".to_string(),
    }
}

/// One instruction per line, terminated by a newline.
pub fn disassemble(program: &Program) -> String {
    let mut out = String::new();
    for insn in &program.insns {
        out.push_str(&disassemble_one(insn));
        out.push('\n');
    }
    out
}
