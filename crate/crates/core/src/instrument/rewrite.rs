// SPDX-License-Identifier: (Apache-2.0 OR MIT)

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use super::masks::MaskPair;
use crate::analyze::{AccessInfo, AccessTarget, Component};
use crate::context::ResolvedContext;
use crate::isa::{AluOp, InsertKind, InsnOrigin, Instruction, Operand, Program, Reg};
use crate::mode::Mode;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
pub enum RewriteError {
    #[error("jump at insn {pc} no longer fits a 16-bit offset after rewriting")]
    JumpFixupOverflow { pc: usize },
    #[error("no mask registered for {component:?} (insn {pc})")]
    MissingMask { pc: usize, component: Component },
    #[error("mask {0:#x} does not fit an immediate")]
    MaskTooWide(u64),
    #[error("insn {pc} stores to read-only context field `{path}`")]
    ReadOnlyField { pc: usize, path: String },
    #[error("insn {pc} accesses the context at a non-constant offset")]
    VariableContextOffset { pc: usize },
    #[error("insn {pc}: converted context offset {off} does not fit 16 bits")]
    OffsetOverflow { pc: usize, off: i64 },
}

/// Mask pairs for every component a program may touch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentMasks {
    pub guest: MaskPair,
    pub maps: BTreeMap<u32, MaskPair>,
}

impl ComponentMasks {
    pub fn get(&self, c: Component) -> Option<MaskPair> {
        match c {
            Component::Private => Some(self.guest),
            Component::Map(id) => self.maps.get(&id).copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InstrumentationReport {
    pub mode: Mode,
    pub guarded_accesses: usize,
    pub inserted_by_category: BTreeMap<String, usize>,
    pub original_insns: usize,
    pub total_insns: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instrumented {
    pub program: Program,
    pub report: InstrumentationReport,
}

pub fn category_name(kind: InsertKind) -> &'static str {
    match kind {
        InsertKind::AccessCheck => "access_check",
        InsertKind::AddressForm => "address_form",
        InsertKind::Sandbox => "sandbox",
        InsertKind::CtxConvert => "ctx_convert",
        InsertKind::Injected => "injected",
    }
}

type Block = Vec<(Instruction, InsnOrigin)>;

/// Inserts `before[i]` ahead of instruction `i` and replaces instructions listed in
/// `replace`. Jumps aimed at `i` land on the first instruction of its inserted block.
pub fn splice(
    p: &Program,
    before: &BTreeMap<usize, Block>,
    replace: &BTreeMap<usize, Instruction>,
) -> Result<Program, RewriteError> {
    let n = p.len();
    let mut block_start = Vec::with_capacity(n + 1);
    let mut own_pos = Vec::with_capacity(n);
    let mut pos = 0usize;
    for i in 0..n {
        block_start.push(pos);
        pos += before.get(&i).map_or(0, |b| b.len());
        own_pos.push(pos);
        pos += 1;
    }
    block_start.push(pos);
    let mut insns = Vec::with_capacity(pos);
    let mut origin = Vec::with_capacity(pos);
    #[allow(clippy::needless_range_loop)]
    for i in 0..n {
        if let Some(b) = before.get(&i) {
            for (insn, o) in b {
                insns.push(*insn);
                origin.push(*o);
            }
        }
        let mut insn = replace.get(&i).copied().unwrap_or(p.insns[i]);
        if let Some(off) = insn.jump_offset() {
            let target = (i as i64 + 1 + off as i64).clamp(0, n as i64) as usize;
            let new_off = block_start[target] as i64 - (own_pos[i] as i64 + 1);
            let new_off = i16::try_from(new_off).map_err(|_| RewriteError::JumpFixupOverflow { pc: i })?;
            insn = insn.with_jump_offset(new_off);
        }
        insns.push(insn);
        origin.push(p.origin[i]);
    }
    Ok(Program { insns, origin, privilege: p.privilege, context_type: p.context_type.clone() })
}

fn ins(kind: InsertKind) -> InsnOrigin {
    InsnOrigin::Inserted(kind)
}

fn imm_fits(v: u64) -> Option<i32> {
    i32::try_from(v as i64).ok()
}

/// Instructions leaving `or_mask` usable as the operand of the final `or64`.
fn materialize_or(block: &mut Block, or_mask: u64) -> Operand {
    if let Some(i) = imm_fits(or_mask) {
        return Operand::Imm(i);
    }
    let af = ins(InsertKind::AddressForm);
    let hi = (or_mask >> 32) as u32;
    let lo = or_mask as u32;
    if let (Some(h), true) = (imm_fits(hi as u64), lo & 0x8000_0000 == 0) {
        block.push((Instruction::alu64_imm(AluOp::Mov, Reg::CONST, h), af));
        block.push((Instruction::alu64_imm(AluOp::Lsh, Reg::CONST, 32), af));
        if lo != 0 {
            block.push((Instruction::alu64_imm(AluOp::Or, Reg::CONST, lo as i32), af));
        }
    } else {
        block.push((Instruction::alu64_imm(AluOp::Mov, Reg::CONST, (or_mask >> 48) as i32), af));
        for shift in [32u32, 16, 0] {
            block.push((Instruction::alu64_imm(AluOp::Lsh, Reg::CONST, 16), af));
            let chunk = ((or_mask >> shift) & 0xFFFF) as i32;
            block.push((Instruction::alu64_imm(AluOp::Or, Reg::CONST, chunk), af));
        }
    }
    Operand::Reg(Reg::CONST)
}

/// The masking sequence for one access and the access rewritten onto `[r11+0]`.
fn guard(insn: Instruction, mask: MaskPair, block: &mut Block) -> Result<Instruction, RewriteError> {
    let (base, off, width) = match insn {
        Instruction::Load { base, off, size, .. } | Instruction::Store { base, off, size, .. } => {
            (base, off, size.bytes())
        }
        other => return Ok(other),
    };
    let and_mask = mask.and_mask & !(width - 1);
    let and_imm = imm_fits(and_mask).ok_or(RewriteError::MaskTooWide(and_mask))?;
    let or_operand = materialize_or(block, mask.or_mask);
    let af = ins(InsertKind::AddressForm);
    let ac = ins(InsertKind::AccessCheck);
    block.push((Instruction::alu64_reg(AluOp::Mov, Reg::SCRATCH, base), af));
    block.push((Instruction::alu64_imm(AluOp::Add, Reg::SCRATCH, off as i32), af));
    block.push((Instruction::alu64_imm(AluOp::And, Reg::SCRATCH, and_imm), ac));
    block.push((Instruction::alu64(AluOp::Or, Reg::SCRATCH, or_operand), ac));
    Ok(match insn {
        Instruction::Load { size, dst, .. } => Instruction::Load { size, dst, base: Reg::SCRATCH, off: 0 },
        Instruction::Store { size, src, .. } => Instruction::Store { size, base: Reg::SCRATCH, off: 0, src },
        other => other,
    })
}

fn with_base_off(insn: Instruction, new_base: Reg, new_off: i16) -> Instruction {
    match insn {
        Instruction::Load { size, dst, .. } => Instruction::Load { size, dst, base: new_base, off: new_off },
        Instruction::Store { size, src, .. } => Instruction::Store { size, base: new_base, off: new_off, src },
        other => other,
    }
}

fn off16(pc: usize, v: i64) -> Result<i16, RewriteError> {
    i16::try_from(v).map_err(|_| RewriteError::OffsetOverflow { pc, off: v })
}

/// Rewrites a context access so that it addresses the real kernel object.
fn convert_ctx(
    insn: Instruction,
    info: &AccessInfo,
    ctx: &ResolvedContext,
    block: &mut Block,
) -> Result<Instruction, RewriteError> {
    let pc = info.pc;
    match info.target {
        AccessTarget::Ctx { off: None, .. } => Err(RewriteError::VariableContextOffset { pc }),
        AccessTarget::Ctx { off: Some(eff), field: Some(idx) } => {
            let f = &ctx.fields[idx];
            if info.store && !f.access.writable() {
                return Err(RewriteError::ReadOnlyField { pc, path: f.path.clone() });
            }
            let base = Reg::new(info.base).expect("guest register");
            // Displacement that turns the program's context offset into a root-object offset.
            let shift = |target_off: u64| off16(pc, info.off as i64 - eff as i64 + target_off as i64);
            if f.chain.is_empty() {
                return Ok(with_base_off(insn, base, shift(f.leaf_offset)?));
            }
            let cc = ins(InsertKind::CtxConvert);
            block.push((
                Instruction::Load { size: crate::isa::MemSize::DW, dst: Reg::SCRATCH, base, off: shift(f.chain[0])? },
                cc,
            ));
            for off in &f.chain[1..] {
                block.push((
                    Instruction::Load {
                        size: crate::isa::MemSize::DW,
                        dst: Reg::SCRATCH,
                        base: Reg::SCRATCH,
                        off: off16(pc, *off as i64)?,
                    },
                    cc,
                ));
            }
            Ok(with_base_off(insn, Reg::SCRATCH, off16(pc, f.leaf_offset as i64)?))
        }
        AccessTarget::Heap { slot, .. } if info.store => {
            let writable = ctx.ref_slot(slot).map(|(i, _)| ctx.fields[i].access.writable()).unwrap_or(false);
            if !writable {
                let path = ctx.ref_slot(slot).map(|(i, _)| ctx.fields[i].path.clone()).unwrap_or_default();
                return Err(RewriteError::ReadOnlyField { pc, path });
            }
            Ok(insn)
        }
        _ => Ok(insn),
    }
}

/// Produces the program a mode executes:
/// vanilla converts context accesses; sfi guards every classified access and adds markers;
/// mte adds markers only; mte-min converts context accesses and adds markers.
pub fn instrument(
    p: &Program,
    accesses: &BTreeMap<usize, AccessInfo>,
    ctx: Option<&ResolvedContext>,
    mode: Mode,
    masks: Option<&ComponentMasks>,
) -> Result<Instrumented, RewriteError> {
    let mut before: BTreeMap<usize, Block> = BTreeMap::new();
    let mut replace: BTreeMap<usize, Instruction> = BTreeMap::new();
    let converts = matches!(mode, Mode::Vanilla | Mode::MteMin);
    let markers = mode.is_sandboxed();
    let mut guarded = 0;
    for (pc, insn) in p.insns.iter().enumerate() {
        let mut block = Block::new();
        if markers && pc == 0 {
            block.push((Instruction::nop(), ins(InsertKind::Sandbox)));
        }
        let mut new_insn = *insn;
        if let Some(info) = accesses.get(&pc) {
            let is_injected = p.origin[pc] == ins(InsertKind::Injected);
            if converts && !is_injected {
                if let Some(ctx) = ctx {
                    new_insn = convert_ctx(new_insn, info, ctx, &mut block)?;
                }
            }
            if mode == Mode::Sfi {
                let c = info.component();
                let mask = masks.and_then(|m| m.get(c)).ok_or(RewriteError::MissingMask { pc, component: c })?;
                new_insn = guard(new_insn, mask, &mut block)?;
                guarded += 1;
            }
        }
        if markers && matches!(insn, Instruction::Exit) {
            block.push((Instruction::nop(), ins(InsertKind::Sandbox)));
        }
        if new_insn != *insn {
            replace.insert(pc, new_insn);
        }
        if !block.is_empty() {
            before.insert(pc, block);
        }
    }
    let program = splice(p, &before, &replace)?;
    let mut inserted_by_category = BTreeMap::new();
    for kind in [InsertKind::AccessCheck, InsertKind::AddressForm, InsertKind::Sandbox, InsertKind::CtxConvert] {
        inserted_by_category.insert(category_name(kind).to_string(), program.count_inserted(kind));
    }
    let report = InstrumentationReport {
        mode,
        guarded_accesses: guarded,
        inserted_by_category,
        original_insns: p.len(),
        total_insns: program.len(),
    };
    Ok(Instrumented { program, report })
}

/// SFI rewriting of an analysed program.
pub fn rewrite_sfi(
    p: &Program,
    accesses: &BTreeMap<usize, AccessInfo>,
    masks: &ComponentMasks,
) -> Result<Instrumented, RewriteError> {
    instrument(p, accesses, None, Mode::Sfi, Some(masks))
}
