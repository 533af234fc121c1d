// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Shared test support: a checked reference interpreter, a generator of in-bounds programs
//! and the scenario both run against.
//!
//! The reference interpreter shares nothing with the engine beyond the instruction types. It
//! tracks pointers symbolically as (region, offset) pairs and operates on the kernel objects
//! directly, so a program it accepts has a single well-defined outcome that every isolation
//! mode must reproduce.

#![allow(dead_code)]

use std::collections::BTreeMap;

use bpfsandbox::context::{
    ContextSpec, CopyMode, FieldAccess, FieldDescriptor, FieldKind, KernelObjectDescriptor, MirroredField,
};
use bpfsandbox::engine::{RunOptions, RunStatus, World};
use bpfsandbox::isa::{assemble, AluOp, AluWidth, Instruction, JmpCond, Operand, Program};
use bpfsandbox::mode::Mode;
use bpfsandbox::scenario::{MapDecl, ScenarioConfig};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STACK: i64 = 512;
pub const TIME_STEP: u64 = 1000;
pub const LOG_LIMIT: u64 = 256;

pub fn scenario() -> ScenarioConfig {
    let m = |o, p: &str, s, a| MirroredField { ctx_offset: o, kernel_path: p.into(), size: s, access: a };
    ScenarioConfig {
        name: "oracle".into(),
        maps: vec![MapDecl { id: 1, value_size: 16, max_entries: 8 }, MapDecl { id: 2, value_size: 8, max_entries: 4 }],
        kernel_objects: vec![
            KernelObjectDescriptor {
                name: "sk_buff".into(),
                size: 48,
                fields: vec![
                    FieldDescriptor::scalar("len", 0, 4, 1500),
                    FieldDescriptor::scalar("protocol", 4, 2, 0x0800),
                    FieldDescriptor::scalar("pkt_type", 6, 1, 3),
                    FieldDescriptor::scalar("mark", 8, 4, 0xABCD),
                    FieldDescriptor::scalar("priority", 12, 4, 6),
                    FieldDescriptor::reference("dev", 16, "net_device"),
                    FieldDescriptor::scalar("tstamp", 24, 8, 0x0123_4567_89AB_CDEF),
                    FieldDescriptor::scalar("hash", 32, 4, 0xDEAD_BEEF),
                    FieldDescriptor::scalar("cb", 40, 8, 0x1111_2222_3333_4444),
                ],
            },
            KernelObjectDescriptor {
                name: "net_device".into(),
                size: 16,
                fields: vec![
                    FieldDescriptor::scalar("ifindex", 0, 4, 7),
                    FieldDescriptor::scalar("mtu", 4, 4, 9000),
                    FieldDescriptor::scalar("flags", 8, 2, 0x1003),
                ],
            },
        ],
        context: Some(ContextSpec {
            name: "__sk_buff".into(),
            root: "sk_buff".into(),
            fields: vec![
                m(0, "len", 4, FieldAccess::ReadWrite),
                m(4, "protocol", 2, FieldAccess::Read),
                m(6, "pkt_type", 1, FieldAccess::Read),
                m(8, "mark", 4, FieldAccess::ReadWrite),
                m(12, "priority", 4, FieldAccess::ReadWrite),
                m(16, "dev", 8, FieldAccess::Read),
                m(24, "dev.ifindex", 4, FieldAccess::Read),
                m(28, "hash", 4, FieldAccess::ReadWrite),
                m(32, "tstamp", 8, FieldAccess::Read),
                m(40, "cb", 8, FieldAccess::ReadWrite),
            ],
        }),
        seed: 99,
        time_base: 5_000,
        ..Default::default()
    }
}

// ---------------------------------------------------------------------------------------------
// Reference interpreter

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Region {
    Ctx,
    Stack,
    Map { id: u32, index: u64 },
    Object(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Value {
    Scalar(u64),
    Pointer(Region, i64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub pc: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub r0: u64,
    pub log: Vec<Vec<u8>>,
    pub maps: BTreeMap<u32, Vec<u8>>,
    pub objects: BTreeMap<String, Vec<u8>>,
}

enum CtxField {
    /// A scalar in `object` at `offset`.
    Scalar { object: String, offset: usize, writable: bool },
    /// A reference slot pointing at `target`.
    Ref { target: String },
}

pub struct Oracle<'a> {
    cfg: &'a ScenarioConfig,
    objects: BTreeMap<String, Vec<u8>>,
    maps: BTreeMap<u32, (u64, u64, Vec<u8>)>,
    stack: Vec<u8>,
    ctx: BTreeMap<(u64, u64), CtxField>,
    log: Vec<Vec<u8>>,
    clock: u64,
    rng: ChaCha8Rng,
}

fn le(bytes: &[u8]) -> u64 {
    let mut b = [0u8; 8];
    b[..bytes.len()].copy_from_slice(bytes);
    u64::from_le_bytes(b)
}

fn sext(imm: i32) -> u64 {
    imm as i64 as u64
}

fn scalar_alu(width: AluWidth, op: AluOp, a: u64, b: u64) -> u64 {
    let (a, b, bits) = match width {
        AluWidth::W64 => (a, b, 64u32),
        AluWidth::W32 => (a & 0xFFFF_FFFF, b & 0xFFFF_FFFF, 32),
    };
    let shift = (b as u32) % bits;
    let r = match op {
        AluOp::Add => a.wrapping_add(b),
        AluOp::Sub => a.wrapping_sub(b),
        AluOp::Mul => a.wrapping_mul(b),
        AluOp::Or => a | b,
        AluOp::And => a & b,
        AluOp::Xor => a ^ b,
        AluOp::Lsh => a << shift,
        AluOp::Rsh => a >> shift,
        AluOp::Mov => b,
    };
    if bits == 32 {
        r & 0xFFFF_FFFF
    } else {
        r
    }
}

impl<'a> Oracle<'a> {
    /// `object_addrs` supplies the kernel addresses stored in reference fields.
    pub fn new(cfg: &'a ScenarioConfig, object_addrs: &BTreeMap<String, u64>) -> Self {
        let mut objects = BTreeMap::new();
        for d in &cfg.kernel_objects {
            let mut bytes = vec![0u8; d.size as usize];
            for f in &d.fields {
                let v = match f.kind {
                    FieldKind::Scalar => f.value,
                    FieldKind::Ref => object_addrs[f.target.as_ref().unwrap()],
                };
                let o = f.offset as usize;
                bytes[o..o + f.size as usize].copy_from_slice(&v.to_le_bytes()[..f.size as usize]);
            }
            objects.insert(d.name.clone(), bytes);
        }
        let maps = cfg
            .maps
            .iter()
            .map(|m| (m.id, (m.value_size, m.max_entries, vec![0u8; (m.value_size * m.max_entries) as usize])))
            .collect();
        let mut ctx = BTreeMap::new();
        if let Some(spec) = &cfg.context {
            for f in &spec.fields {
                let mut object = spec.root.clone();
                let parts: Vec<&str> = f.kernel_path.split('.').collect();
                for (i, part) in parts.iter().enumerate() {
                    let desc = cfg.kernel_objects.iter().find(|d| d.name == object).unwrap();
                    let fd = desc.fields.iter().find(|x| x.name == *part).unwrap();
                    let last = i + 1 == parts.len();
                    match (fd.kind, last) {
                        (FieldKind::Ref, false) => object = fd.target.clone().unwrap(),
                        (FieldKind::Ref, true) => {
                            ctx.insert((f.ctx_offset, f.size), CtxField::Ref { target: fd.target.clone().unwrap() });
                        }
                        (FieldKind::Scalar, _) => {
                            ctx.insert(
                                (f.ctx_offset, f.size),
                                CtxField::Scalar {
                                    object: object.clone(),
                                    offset: fd.offset as usize,
                                    writable: f.access.writable(),
                                },
                            );
                        }
                    }
                }
            }
        }
        Oracle {
            cfg,
            objects,
            maps,
            stack: vec![0; STACK as usize],
            ctx,
            log: Vec::new(),
            clock: cfg.time_base,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    fn bytes_mut(&mut self, region: &Region, off: i64, len: u64, store: bool) -> Result<&mut [u8], String> {
        let len_i = len as i64;
        let (buf, start): (&mut Vec<u8>, i64) = match region {
            Region::Stack => {
                if off < -STACK || off + len_i > 0 {
                    return Err(format!("stack access {off}+{len} outside the frame"));
                }
                (&mut self.stack, STACK + off)
            }
            Region::Map { id, index } => {
                let (vs, _, data) = self.maps.get_mut(id).ok_or("unknown map")?;
                if off < 0 || off + len_i > *vs as i64 {
                    return Err(format!("map value access {off}+{len} outside {vs} bytes"));
                }
                (data, (*index * *vs) as i64 + off)
            }
            Region::Object(name) => {
                if store {
                    return Err("store through a nested object pointer".into());
                }
                let data = self.objects.get_mut(name).ok_or("unknown object")?;
                if off < 0 || off + len_i > data.len() as i64 {
                    return Err(format!("object access {off}+{len} outside {}", data.len()));
                }
                (data, off)
            }
            Region::Ctx => return Err("ctx accesses go through fields".into()),
        };
        Ok(&mut buf[start as usize..(start + len_i) as usize])
    }

    fn load(&mut self, base: &Value, off: i16, len: u64) -> Result<Value, String> {
        let Value::Pointer(region, p) = base else {
            return Err("load through a scalar".into());
        };
        let eff = p + off as i64;
        if *region == Region::Ctx {
            let field = self.ctx.get(&(eff as u64, len)).ok_or(format!("no ctx field at {eff}+{len}"))?;
            return Ok(match field {
                CtxField::Scalar { object, offset, .. } => {
                    Value::Scalar(le(&self.objects[object][*offset..*offset + len as usize]))
                }
                CtxField::Ref { target } => Value::Pointer(Region::Object(target.clone()), 0),
            });
        }
        let region = region.clone();
        Ok(Value::Scalar(le(self.bytes_mut(&region, eff, len, false)?)))
    }

    fn store(&mut self, base: &Value, off: i16, len: u64, v: &Value) -> Result<(), String> {
        let Value::Scalar(v) = *v else {
            return Err("pointer stored to memory".into());
        };
        let Value::Pointer(region, p) = base else {
            return Err("store through a scalar".into());
        };
        let eff = p + off as i64;
        let bytes = v.to_le_bytes();
        if *region == Region::Ctx {
            match self.ctx.get(&(eff as u64, len)) {
                Some(CtxField::Scalar { object, offset, writable: true }) => {
                    let (object, offset) = (object.clone(), *offset);
                    self.objects.get_mut(&object).unwrap()[offset..offset + len as usize]
                        .copy_from_slice(&bytes[..len as usize]);
                    return Ok(());
                }
                _ => return Err(format!("ctx store at {eff}+{len} is not to a writable field")),
            }
        }
        let region = region.clone();
        self.bytes_mut(&region, eff, len, true)?.copy_from_slice(&bytes[..len as usize]);
        Ok(())
    }

    fn buffer(&mut self, ptr: &Value, len: u64) -> Result<Vec<u8>, String> {
        if len == 0 {
            return Ok(Vec::new());
        }
        match ptr {
            Value::Pointer(r @ (Region::Stack | Region::Map { .. }), off) => {
                let r = r.clone();
                Ok(self.bytes_mut(&r, *off, len, false)?.to_vec())
            }
            _ => Err("helper buffer is not stack or map memory".into()),
        }
    }

    fn call(&mut self, helper: i32, regs: &[Value; 11]) -> Result<Value, String> {
        let scalar = |v: &Value| match v {
            Value::Scalar(s) => Ok(*s),
            _ => Err("pointer passed as scalar helper argument".to_string()),
        };
        if !self.cfg.helper_enabled(helper) {
            return Err(format!("helper {helper} disabled"));
        }
        Ok(match helper {
            1 => {
                let (id, idx) = (scalar(&regs[1])?, scalar(&regs[2])?);
                match self.maps.get(&(id as u32)) {
                    Some((_, max, _)) if idx < *max && id <= u32::MAX as u64 => {
                        Value::Pointer(Region::Map { id: id as u32, index: idx }, 0)
                    }
                    _ => Value::Scalar(0),
                }
            }
            2 => {
                let (id, idx) = (scalar(&regs[1])?, scalar(&regs[2])?);
                let Some(&(vs, max, _)) = self.maps.get(&(id as u32)) else {
                    return Ok(Value::Scalar(-2i64 as u64));
                };
                let value = self.buffer(&regs[3], vs)?;
                if idx >= max {
                    return Ok(Value::Scalar(-7i64 as u64));
                }
                let data = &mut self.maps.get_mut(&(id as u32)).unwrap().2;
                data[(idx * vs) as usize..((idx + 1) * vs) as usize].copy_from_slice(&value);
                Value::Scalar(0)
            }
            3 => {
                let len = scalar(&regs[2])?;
                if len > LOG_LIMIT {
                    return Err("log record too long".into());
                }
                let b = self.buffer(&regs[1], len)?;
                self.log.push(b);
                Value::Scalar(0)
            }
            4 => {
                self.clock += TIME_STEP;
                Value::Scalar(self.clock)
            }
            5 => Value::Scalar(self.rng.next_u32() as u64),
            6 => {
                let object = match &regs[1] {
                    Value::Pointer(Region::Ctx, 0) => self.cfg.context.as_ref().unwrap().root.clone(),
                    Value::Pointer(Region::Object(name), 0) => name.clone(),
                    _ => return Err("obj_store_u32 needs an object base".into()),
                };
                let (off, v) = (scalar(&regs[2])? as usize, scalar(&regs[3])?);
                let data = self.objects.get_mut(&object).unwrap();
                if off % 4 != 0 || off + 4 > data.len() {
                    return Err("obj_store_u32 offset out of range".into());
                }
                data[off..off + 4].copy_from_slice(&(v as u32).to_le_bytes());
                Value::Scalar(0)
            }
            other => return Err(format!("unknown helper {other}")),
        })
    }

    pub fn run(mut self, p: &Program) -> Result<Outcome, Violation> {
        let mut regs: [Value; 11] = std::array::from_fn(|_| Value::Scalar(0));
        regs[1] = Value::Pointer(Region::Ctx, 0);
        regs[10] = Value::Pointer(Region::Stack, 0);
        let mut pc = 0usize;
        let fail = |pc, reason: String| Violation { pc, reason };
        loop {
            let insn = *p.insns.get(pc).ok_or(fail(pc, "fell off the end".into()))?;
            let mut next = pc + 1;
            let operand = |regs: &[Value; 11], op: Operand| match op {
                Operand::Reg(r) => regs[r.index()].clone(),
                Operand::Imm(i) => Value::Scalar(sext(i)),
            };
            match insn {
                Instruction::Alu { width, op, dst, src } => {
                    let s = operand(&regs, src);
                    let d = &regs[dst.index()];
                    let out = match (op, width, d, &s) {
                        (AluOp::Mov, AluWidth::W64, _, v) => v.clone(),
                        (_, _, Value::Scalar(a), Value::Scalar(b)) => Value::Scalar(scalar_alu(width, op, *a, *b)),
                        (AluOp::Add, AluWidth::W64, Value::Pointer(r, o), Value::Scalar(b)) => {
                            Value::Pointer(r.clone(), o.wrapping_add(*b as i64))
                        }
                        (AluOp::Sub, AluWidth::W64, Value::Pointer(r, o), Value::Scalar(b)) => {
                            Value::Pointer(r.clone(), o.wrapping_sub(*b as i64))
                        }
                        _ => return Err(fail(pc, format!("unsupported pointer arithmetic {insn:?}"))),
                    };
                    regs[dst.index()] = out;
                }
                Instruction::Load { size, dst, base, off } => {
                    let v = self.load(&regs[base.index()], off, size.bytes()).map_err(|r| fail(pc, r))?;
                    regs[dst.index()] = v;
                }
                Instruction::Store { size, base, off, src } => {
                    let v = operand(&regs, src);
                    self.store(&regs[base.index()], off, size.bytes(), &v).map_err(|r| fail(pc, r))?;
                }
                Instruction::Ja { off } => next = (pc as i64 + 1 + off as i64) as usize,
                Instruction::Jcond { cond, dst, src, off } => {
                    let taken = match (&regs[dst.index()], operand(&regs, src)) {
                        (Value::Scalar(a), Value::Scalar(b)) => match cond {
                            JmpCond::Eq => *a == b,
                            JmpCond::Ne => *a != b,
                            JmpCond::Gt => *a > b,
                            JmpCond::Lt => *a < b,
                        },
                        (Value::Pointer(..), Value::Scalar(0)) if cond == JmpCond::Eq => false,
                        (Value::Pointer(..), Value::Scalar(0)) if cond == JmpCond::Ne => true,
                        _ => return Err(fail(pc, "pointer comparison".into())),
                    };
                    if taken {
                        next = (pc as i64 + 1 + off as i64) as usize;
                    }
                }
                Instruction::Call { helper } => {
                    let r0 = self.call(helper, &regs).map_err(|r| fail(pc, r))?;
                    regs[0] = r0;
                    for r in regs.iter_mut().take(6).skip(1) {
                        *r = Value::Scalar(0);
                    }
                }
                Instruction::Exit => {
                    let Value::Scalar(r0) = regs[0] else {
                        return Err(fail(pc, "pointer returned".into()));
                    };
                    return Ok(Outcome {
                        r0,
                        log: self.log,
                        maps: self.maps.into_iter().map(|(id, (_, _, d))| (id, d)).collect(),
                        objects: self.objects,
                    });
                }
            }
            pc = next;
        }
    }
}

// ---------------------------------------------------------------------------------------------
// Program generator

const SCALARS: [&str; 7] = ["r0", "r1", "r2", "r3", "r4", "r5", "r6"];
const OPS: [&str; 8] = ["add", "sub", "mul", "or", "and", "lsh", "rsh", "xor"];

fn size_suffix(size: u64) -> &'static str {
    match size {
        1 => "b",
        2 => "h",
        4 => "w",
        _ => "dw",
    }
}

struct Gen<'a> {
    rng: ChaCha8Rng,
    cfg: &'a ScenarioConfig,
    out: Vec<String>,
}

impl Gen<'_> {
    fn scalar(&mut self) -> &'static str {
        SCALARS[self.rng.gen_range(0..SCALARS.len())]
    }

    fn imm(&mut self) -> i64 {
        match self.rng.gen_range(0..4) {
            0 => self.rng.gen_range(-16..16),
            1 => self.rng.gen_range(0..0x1_0000),
            2 => self.rng.gen::<i32>() as i64,
            _ => self.rng.gen_range(0..64),
        }
    }

    fn alu(&mut self) -> String {
        let op = OPS[self.rng.gen_range(0..OPS.len())];
        let w = if self.rng.gen_bool(0.7) { "64" } else { "32" };
        let d = self.scalar();
        if self.rng.gen_bool(0.5) {
            let s = self.scalar();
            format!("{op}{w} {d}, {s}")
        } else {
            let i = if matches!(op, "lsh" | "rsh") { self.rng.gen_range(0..64) } else { self.imm() };
            format!("{op}{w} {d}, {i}")
        }
    }

    fn stack_slot(&mut self, size: u64) -> i64 {
        let slots = STACK as u64 / size;
        -((self.rng.gen_range(1..=slots) * size) as i64)
    }

    fn stack_store(&mut self) -> String {
        let size = [1, 2, 4, 8][self.rng.gen_range(0..4)];
        let off = self.stack_slot(size);
        if self.rng.gen_bool(0.5) {
            let s = self.scalar();
            format!("stx{} [r10{off:+}], {s}", size_suffix(size))
        } else {
            let i = self.imm();
            format!("st{} [r10{off:+}], {i}", size_suffix(size))
        }
    }

    fn ctx_fields(&self, writable: bool, scalar_only: bool) -> Vec<(u64, u64)> {
        let spec = self.cfg.context.as_ref().unwrap();
        spec.fields
            .iter()
            .filter(|f| !writable || f.access.writable())
            .filter(|f| !scalar_only || f.kernel_path != "dev")
            .map(|f| (f.ctx_offset, f.size))
            .collect()
    }

    fn ctx_store(&mut self) -> String {
        let fields = self.ctx_fields(true, true);
        let (o, s) = fields[self.rng.gen_range(0..fields.len())];
        let v = self.scalar();
        format!("stx{} [r9+{o}], {v}", size_suffix(s))
    }

    /// One instruction that defines no pointer.
    fn simple(&mut self) -> String {
        match self.rng.gen_range(0..4) {
            0 => self.stack_store(),
            1 => self.ctx_store(),
            _ => self.alu(),
        }
    }

    fn push(&mut self, line: String) {
        self.out.push(line);
    }

    fn snippet(&mut self) {
        match self.rng.gen_range(0..13) {
            0 | 1 => {
                let l = self.alu();
                self.push(l);
            }
            2 => {
                let fields = self.ctx_fields(false, true);
                let (o, s) = fields[self.rng.gen_range(0..fields.len())];
                let d = self.scalar();
                self.push(format!("ldx{} {d}, [r9+{o}]", size_suffix(s)));
            }
            3 => {
                let l = self.ctx_store();
                self.push(l);
            }
            4 => {
                let l = self.stack_store();
                self.push(l);
            }
            5 => {
                let size = [1, 2, 4, 8][self.rng.gen_range(0..4)];
                let off = self.stack_slot(size);
                let d = self.scalar();
                self.push(format!("ldx{} {d}, [r10{off:+}]", size_suffix(size)));
            }
            6 => {
                let m = self.cfg.maps[self.rng.gen_range(0..self.cfg.maps.len())].clone();
                let idx = self.rng.gen_range(0..m.max_entries + 2);
                self.push(format!("mov64 r1, {}", m.id));
                self.push(format!("mov64 r2, {idx}"));
                self.push("call 1".into());
                self.push("mov64 r8, r0".into());
                let body = self.rng.gen_range(1..5);
                self.push(format!("jeq r8, 0, +{body}"));
                for _ in 0..body {
                    let size = [1, 2, 4, 8][self.rng.gen_range(0..4)];
                    let off = self.rng.gen_range(0..m.value_size / size) * size;
                    let line = match self.rng.gen_range(0..3) {
                        0 => format!("ldx{} {}, [r8+{off}]", size_suffix(size), SCALARS[self.rng.gen_range(2..7)]),
                        1 => format!("stx{} [r8+{off}], {}", size_suffix(size), SCALARS[self.rng.gen_range(2..7)]),
                        _ => format!("st{} [r8+{off}], {}", size_suffix(size), self.imm()),
                    };
                    self.push(line);
                }
                let i = self.imm();
                self.push(format!("mov64 r0, {i}"));
            }
            7 => {
                let m = self.cfg.maps[self.rng.gen_range(0..self.cfg.maps.len())].clone();
                let idx = self.rng.gen_range(0..m.max_entries + 1);
                let off = self.rng.gen_range(m.value_size / 8..=STACK as u64 / 8) * 8;
                self.push(format!("mov64 r1, {}", m.id));
                self.push(format!("mov64 r2, {idx}"));
                self.push("mov64 r3, r10".into());
                self.push(format!("add64 r3, -{off}"));
                self.push("call 2".into());
            }
            8 => {
                let len = self.rng.gen_range(0..=64u64);
                let off = self.rng.gen_range(len.div_ceil(8).max(1)..=64) * 8;
                self.push("mov64 r1, r10".into());
                self.push(format!("add64 r1, -{off}"));
                self.push(format!("mov64 r2, {len}"));
                self.push("call 3".into());
            }
            9 => {
                let h = if self.rng.gen_bool(0.5) { 4 } else { 5 };
                self.push(format!("call {h}"));
                let d = SCALARS[self.rng.gen_range(2..7)];
                self.push(format!("xor64 {d}, r0"));
            }
            10 => {
                let field = [(0u64, 4u64), (4, 4), (8, 2)][self.rng.gen_range(0..3)];
                let d = self.scalar();
                self.push("ldxdw r7, [r9+16]".into());
                self.push(format!("ldx{} {d}, [r7+{}]", size_suffix(field.1), field.0));
            }
            11 => {
                let body = self.rng.gen_range(1..6);
                let cond = ["jeq", "jne", "jgt", "jlt"][self.rng.gen_range(0..4)];
                let a = self.scalar();
                let rhs = if self.rng.gen_bool(0.5) { self.scalar().to_string() } else { self.imm().to_string() };
                self.push(format!("{cond} {a}, {rhs}, +{body}"));
                for _ in 0..body {
                    let l = self.simple();
                    self.push(l);
                }
            }
            _ => {
                let off = [0u64, 8, 12, 24, 32, 36, 40, 44][self.rng.gen_range(0..8)];
                let base = if self.rng.gen_bool(0.8) { "r9" } else { "r7" };
                let off = if base == "r7" { off % 12 } else { off };
                if base == "r7" {
                    self.push("ldxdw r7, [r9+16]".into());
                }
                self.push(format!("mov64 r1, {base}"));
                self.push(format!("mov64 r2, {off}"));
                let v = self.imm();
                self.push(format!("mov64 r3, {v}"));
                self.push("call 6".into());
            }
        }
    }
}

/// A random program whose every access is in bounds of a component of [`scenario`].
pub fn generate(seed: u64, cfg: &ScenarioConfig) -> String {
    let mut g = Gen { rng: ChaCha8Rng::seed_from_u64(seed), cfg, out: vec!["mov64 r9, r1".into()] };
    for r in SCALARS {
        let i = g.imm();
        g.push(format!("mov64 {r}, {i}"));
    }
    let n = g.rng.gen_range(3..30);
    for _ in 0..n {
        g.snippet();
    }
    let r = g.scalar();
    g.push(format!("mov64 r0, {r}"));
    g.push("exit".into());
    let mut text = g.out.join("\n");
    text.push('\n');
    text
}

// ---------------------------------------------------------------------------------------------

pub fn object_addrs(w: &World) -> BTreeMap<String, u64> {
    w.objects.objects().map(|(n, a, _)| (n.to_string(), a)).collect()
}

/// Runs one generated program through the oracle and every mode; returns the first disagreement.
pub fn check_program(seed: u64, copy_mode: CopyMode) -> Result<(), String> {
    let cfg = scenario();
    let text = generate(seed, &cfg);
    let p = assemble(&text).map_err(|e| format!("seed {seed}: {e}\n{text}"))?;
    let probe = World::new(cfg.clone()).unwrap();
    let expected = Oracle::new(&cfg, &object_addrs(&probe))
        .run(&p)
        .map_err(|v| format!("seed {seed}: oracle rejected pc {}: {}\n{text}", v.pc, v.reason))?;
    for mode in Mode::ALL {
        let mut w = World::new(cfg.clone()).unwrap();
        let lp = w.load(&p, mode, 0).map_err(|e| format!("seed {seed} {mode}: {e}\n{text}"))?;
        let r = w
            .run(&lp, &RunOptions { copy_mode, ..Default::default() })
            .map_err(|e| format!("seed {seed} {mode}: {e}"))?;
        if r.status != RunStatus::Completed {
            return Err(format!("seed {seed} {mode}: faulted {:?}\n{text}", r.fault));
        }
        let obs = w.observable();
        let got = Outcome { r0: r.r0, log: r.log.clone(), maps: obs.maps, objects: obs.objects };
        if got != expected {
            return Err(format!("seed {seed} {mode}: expected {expected:?}\n got {got:?}\n{text}"));
        }
    }
    Ok(())
}
