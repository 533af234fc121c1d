// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Loader checks and register provenance analysis.
//!
//! Programs may only jump forward, so a single in-order pass over the instructions visits
//! every predecessor of an instruction before the instruction itself. The in-state of each
//! reachable instruction is the join of the out-states flowing into it.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::context::{ContextDemand, NestedDemand, ResolvedContext, ResolvedKind};
use crate::isa::{
    alu_eval, imm64, AluOp, AluWidth, Instruction, MemSize, Operand, Privilege, Program, Reg, PRIVILEGED_MAX_INSNS,
    UNPRIVILEGED_MAX_INSNS,
};

/// Helper returning a map value pointer.
pub const HELPER_MAP_LOOKUP: i32 = 1;

/// Abstract value of a register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Provenance {
    Scalar(Option<u64>),
    CtxPtr(Option<i64>),
    /// Offset relative to the frame register.
    StackPtr(Option<i64>),
    /// Pointer into the copy of the object behind the reference slot at context offset `slot`.
    HeapPtr {
        slot: u64,
        off: Option<i64>,
    },
    MapValuePtr(u32),
    Unknown,
}

impl Provenance {
    pub fn is_pointer(self) -> bool {
        !matches!(self, Provenance::Scalar(_) | Provenance::Unknown)
    }

    pub fn join(self, other: Provenance) -> Provenance {
        use Provenance::*;
        if self == other {
            return self;
        }
        match (self, other) {
            (Scalar(_), Scalar(_)) => Scalar(None),
            (CtxPtr(_), CtxPtr(_)) => CtxPtr(None),
            (StackPtr(_), StackPtr(_)) => StackPtr(None),
            (HeapPtr { slot: a, .. }, HeapPtr { slot: b, .. }) if a == b => HeapPtr { slot: a, off: None },
            _ => Unknown,
        }
    }

    fn offset_by(self, delta: Option<i64>) -> Provenance {
        let add = |o: Option<i64>| o.zip(delta).map(|(a, b)| a.wrapping_add(b));
        match self {
            Provenance::CtxPtr(o) => Provenance::CtxPtr(add(o)),
            Provenance::StackPtr(o) => Provenance::StackPtr(add(o)),
            Provenance::HeapPtr { slot, off } => Provenance::HeapPtr { slot, off: add(off) },
            other => other,
        }
    }
}

pub const GUEST_REGS: usize = 11;

pub type RegState = [Provenance; GUEST_REGS];

pub fn entry_state() -> RegState {
    let mut s = [Provenance::Unknown; GUEST_REGS];
    s[1] = Provenance::CtxPtr(Some(0));
    s[10] = Provenance::StackPtr(Some(0));
    s
}

fn join_states(a: &RegState, b: &RegState) -> RegState {
    std::array::from_fn(|i| a[i].join(b[i]))
}

/// Memory component an access is confined to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Component {
    /// The sandbox guest partition: context, heap and stack.
    Private,
    Map(u32),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AccessTarget {
    Ctx { off: Option<u64>, field: Option<usize> },
    Stack { off: Option<i64> },
    Heap { slot: u64, off: Option<u64> },
    Map { id: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AccessInfo {
    pub pc: usize,
    pub store: bool,
    pub size: u64,
    pub base: u8,
    pub off: i16,
    pub target: AccessTarget,
}

impl AccessInfo {
    pub fn component(&self) -> Component {
        match self.target {
            AccessTarget::Map { id } => Component::Map(id),
            _ => Component::Private,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AccessSet {
    pub ctx_reads: BTreeSet<(u64, u64)>,
    pub ctx_writes: BTreeSet<(u64, u64)>,
    pub classification: BTreeMap<usize, Component>,
    pub context: ContextDemand,
}

/// Declarations the analysis checks a program against.
#[derive(Debug, Clone, Default)]
pub struct AnalysisEnv {
    pub maps: BTreeSet<u32>,
    pub context: Option<ResolvedContext>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum AnalysisErrorKind {
    EmptyProgram,
    BackwardJump,
    TooManyInstructions { len: usize, limit: usize },
    PointerPlusPointer,
    UnknownBaseAccess,
    ReservedRegister(u8),
    FramePointerWrite,
    InvalidJumpTarget,
    FallsOffEnd,
    UnreachableInstruction,
    InvalidContextAccess { off: i64, size: u64 },
    MisalignedAccess,
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize)]
pub struct AnalysisError {
    pub pc: usize,
    pub kind: AnalysisErrorKind,
}

impl fmt::Display for AnalysisError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rejected at insn {}: {:?}", self.pc, self.kind)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Analysis {
    /// In-state of every reachable instruction.
    pub states: Vec<Option<RegState>>,
    pub accesses: BTreeMap<usize, AccessInfo>,
    pub access_set: AccessSet,
    /// Guest registers the program never mentions.
    pub unused_regs: Vec<Reg>,
}

impl Analysis {
    pub fn guarded_accesses(&self) -> usize {
        self.accesses.len()
    }
}

fn err(pc: usize, kind: AnalysisErrorKind) -> AnalysisError {
    AnalysisError { pc, kind }
}

pub fn check_and_analyze(p: &Program, env: &AnalysisEnv) -> Result<Analysis, AnalysisError> {
    let limit = match p.privilege {
        Privilege::Unprivileged => UNPRIVILEGED_MAX_INSNS,
        Privilege::Privileged => PRIVILEGED_MAX_INSNS,
    };
    if p.len() > limit {
        return Err(err(limit, AnalysisErrorKind::TooManyInstructions { len: p.len(), limit }));
    }
    if p.is_empty() {
        return Err(err(0, AnalysisErrorKind::EmptyProgram));
    }
    let mut used = [false; GUEST_REGS];
    for (pc, insn) in p.insns.iter().enumerate() {
        for r in insn.registers() {
            if r.is_reserved() {
                return Err(err(pc, AnalysisErrorKind::ReservedRegister(r.index() as u8)));
            }
            used[r.index()] = true;
        }
        if let Instruction::Alu { dst, .. } = insn {
            if *dst == Reg::FP {
                return Err(err(pc, AnalysisErrorKind::FramePointerWrite));
            }
        }
        if let Some(off) = insn.jump_offset() {
            if off < 0 {
                return Err(err(pc, AnalysisErrorKind::BackwardJump));
            }
            if pc + 1 + off as usize >= p.len() {
                return Err(err(pc, AnalysisErrorKind::InvalidJumpTarget));
            }
        }
    }

    let n = p.len();
    let mut states: Vec<Option<RegState>> = vec![None; n];
    states[0] = Some(entry_state());
    let mut accesses = BTreeMap::new();
    let mut set = AccessSet::default();
    let flow = |states: &mut Vec<Option<RegState>>, to: usize, s: &RegState| {
        states[to] = Some(match &states[to] {
            Some(old) => join_states(old, s),
            None => *s,
        });
    };

    for pc in 0..n {
        let Some(mut s) = states[pc] else {
            return Err(err(pc, AnalysisErrorKind::UnreachableInstruction));
        };
        let insn = p.insns[pc];
        let falls_through = !matches!(insn, Instruction::Exit | Instruction::Ja { .. });
        match insn {
            Instruction::Alu { width, op, dst, src } => {
                let sv = match src {
                    Operand::Imm(i) => Provenance::Scalar(Some(imm64(i))),
                    Operand::Reg(r) => s[r.index()],
                };
                s[dst.index()] = alu_transfer(width, op, s[dst.index()], sv).map_err(|k| err(pc, k))?;
            }
            Instruction::Load { size, dst, base, off } => {
                let info = classify(pc, false, size, base, off, &s, env)?;
                let loaded = match info.target {
                    AccessTarget::Ctx { field: Some(i), off: Some(o) } => {
                        match env.context.as_ref().map(|c| &c.fields[i].kind) {
                            Some(ResolvedKind::RefSlot { .. }) => Provenance::HeapPtr { slot: o, off: Some(0) },
                            _ => Provenance::Scalar(None),
                        }
                    }
                    _ => Provenance::Scalar(None),
                };
                record(&mut set, &info);
                accesses.insert(pc, info);
                s[dst.index()] = loaded;
            }
            Instruction::Store { size, base, off, .. } => {
                let info = classify(pc, true, size, base, off, &s, env)?;
                record(&mut set, &info);
                accesses.insert(pc, info);
            }
            Instruction::Call { helper } => {
                let r0 = match (helper, s[1]) {
                    (HELPER_MAP_LOOKUP, Provenance::Scalar(Some(id)))
                        if env.maps.contains(&(id as u32)) && id <= u32::MAX as u64 =>
                    {
                        Provenance::MapValuePtr(id as u32)
                    }
                    _ => Provenance::Scalar(None),
                };
                // A context pointer handed to a helper as a guest buffer may be read at any offset.
                for arg in buffer_args(helper).iter().map(|&r| &s[r]) {
                    match *arg {
                        Provenance::CtxPtr(_) => set.context.variable = true,
                        Provenance::HeapPtr { slot, .. } => {
                            set.context.nested.insert(slot, NestedDemand::All);
                        }
                        _ => {}
                    }
                }
                s[1..=5].fill(Provenance::Unknown);
                s[0] = r0;
            }
            Instruction::Ja { off } => flow(&mut states, pc + 1 + off as usize, &s),
            Instruction::Jcond { off, .. } => flow(&mut states, pc + 1 + off as usize, &s),
            Instruction::Exit => {}
        }
        if falls_through {
            if pc + 1 >= n {
                return Err(err(pc, AnalysisErrorKind::FallsOffEnd));
            }
            flow(&mut states, pc + 1, &s);
        }
    }

    let unused_regs = (0..10u8).filter(|&r| !used[r as usize]).filter_map(Reg::new).collect();
    Ok(Analysis { states, accesses, access_set: set, unused_regs })
}

/// Argument registers a helper reads guest memory through.
fn buffer_args(helper: i32) -> &'static [usize] {
    match helper {
        HELPER_MAP_LOOKUP | 4 | 5 | 6 => &[],
        2 => &[3],
        3 => &[1],
        _ => &[1, 2, 3, 4, 5],
    }
}

fn alu_transfer(width: AluWidth, op: AluOp, d: Provenance, s: Provenance) -> Result<Provenance, AnalysisErrorKind> {
    use Provenance::*;
    if op == AluOp::Mov {
        return Ok(match (width, s) {
            (AluWidth::W64, v) => v,
            (AluWidth::W32, Scalar(Some(c))) => Scalar(Some(c as u32 as u64)),
            (AluWidth::W32, Unknown) => Unknown,
            (AluWidth::W32, _) => Scalar(None),
        });
    }
    if width == AluWidth::W64 && matches!(op, AluOp::Add | AluOp::Sub) {
        match (d.is_pointer(), s.is_pointer()) {
            (true, true) if op == AluOp::Add => return Err(AnalysisErrorKind::PointerPlusPointer),
            (true, true) => return Ok(Scalar(None)),
            (true, false) => {
                let delta = match s {
                    Scalar(Some(c)) if op == AluOp::Add => Some(c as i64),
                    Scalar(Some(c)) => Some((c as i64).wrapping_neg()),
                    _ => None,
                };
                return Ok(match d {
                    MapValuePtr(_) => d,
                    _ => d.offset_by(delta),
                });
            }
            (false, true) if op == AluOp::Add => {
                let delta = match d {
                    Scalar(Some(c)) => Some(c as i64),
                    _ => None,
                };
                return Ok(match s {
                    MapValuePtr(_) => s,
                    _ => s.offset_by(delta),
                });
            }
            _ => {}
        }
    }
    Ok(match (d, s) {
        (Scalar(Some(a)), Scalar(Some(b))) => Scalar(Some(alu_eval(width, op, a, b))),
        (Unknown, _) | (_, Unknown) => Unknown,
        _ => Scalar(None),
    })
}

fn classify(
    pc: usize,
    store: bool,
    size: MemSize,
    base: Reg,
    off: i16,
    s: &RegState,
    env: &AnalysisEnv,
) -> Result<AccessInfo, AnalysisError> {
    let len = size.bytes();
    let disp = off as i64;
    let bad_ctx = |o: i64| err(pc, AnalysisErrorKind::InvalidContextAccess { off: o, size: len });
    let aligned = |o: i64| o.rem_euclid(len as i64) == 0;
    let target = match s[base.index()] {
        Provenance::CtxPtr(None) => AccessTarget::Ctx { off: None, field: None },
        Provenance::CtxPtr(Some(o)) => {
            let eff = o.wrapping_add(disp);
            let ctx = env.context.as_ref().ok_or_else(|| bad_ctx(eff))?;
            if eff < 0 {
                return Err(bad_ctx(eff));
            }
            let (idx, f) = ctx.field_exact(eff as u64, len).ok_or_else(|| bad_ctx(eff))?;
            if store && matches!(f.kind, ResolvedKind::RefSlot { .. }) {
                return Err(bad_ctx(eff));
            }
            AccessTarget::Ctx { off: Some(eff as u64), field: Some(idx) }
        }
        Provenance::StackPtr(o) => {
            let eff = o.map(|o| o.wrapping_add(disp));
            if let Some(e) = eff {
                if !aligned(e) {
                    return Err(err(pc, AnalysisErrorKind::MisalignedAccess));
                }
            }
            AccessTarget::Stack { off: eff }
        }
        Provenance::HeapPtr { slot, off: o } => {
            let eff = o.map(|o| o.wrapping_add(disp));
            if let Some(e) = eff {
                let ctx = env.context.as_ref().ok_or_else(|| bad_ctx(e))?;
                let (_, target) = ctx.ref_slot(slot).ok_or_else(|| bad_ctx(e))?;
                let ok = e >= 0
                    && target
                        .fields
                        .iter()
                        .any(|f| f.kind == crate::context::FieldKind::Scalar && f.offset == e as u64 && f.size == len);
                if !ok {
                    return Err(bad_ctx(e));
                }
            }
            AccessTarget::Heap { slot, off: eff.map(|e| e as u64) }
        }
        Provenance::MapValuePtr(id) => AccessTarget::Map { id },
        Provenance::Scalar(_) | Provenance::Unknown => {
            return Err(err(pc, AnalysisErrorKind::UnknownBaseAccess));
        }
    };
    Ok(AccessInfo { pc, store, size: len, base: base.index() as u8, off, target })
}

fn record(set: &mut AccessSet, info: &AccessInfo) {
    set.classification.insert(info.pc, info.component());
    match info.target {
        AccessTarget::Ctx { off: Some(o), .. } => {
            set.context.ranges.insert((o, info.size));
            if info.store {
                set.ctx_writes.insert((o, info.size));
            } else {
                set.ctx_reads.insert((o, info.size));
            }
        }
        AccessTarget::Ctx { off: None, .. } => set.context.variable = true,
        AccessTarget::Heap { slot, off } => {
            let entry = set.context.nested.entry(slot).or_insert_with(|| NestedDemand::Ranges(BTreeSet::new()));
            match (entry, off) {
                (NestedDemand::All, _) => {}
                (e, None) => *e = NestedDemand::All,
                (NestedDemand::Ranges(r), Some(o)) => {
                    r.insert((o, info.size));
                }
            }
        }
        _ => {}
    }
}
