// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Deterministic execution of loaded programs.
//!
//! A [`World`] owns the simulated kernel: the address space, maps, kernel objects, the
//! sandbox pool and the planted secret. [`World::load`] analyses and instruments a program
//! for one mode and core; [`World::run`] executes it through the full
//! acquire, prepare, enter, body, exit, sync, release sequence.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::analyze::{check_and_analyze, AccessInfo, AnalysisEnv, AnalysisError, Component};
use crate::context::{
    mte_min_tag, prepare_context, sync_out, ContextDemand, ContextError, CopyMode, ObjectStore, ResolvedContext,
    SyncTable, TagPool, TaggingReceipt,
};
use crate::instrument::{compute_masks, instrument, ComponentMasks, InstrumentationReport, RewriteError};
use crate::isa::{alu_eval, imm64, InsertKind, InsnOrigin, Instruction, Operand, Program, Reg};
use crate::maps::{MapError, MapRegistry};
use crate::memory::{strip_tag, with_tag, AccessContext, AccessError, MemError, SimAddressSpace, TagPolicy, GRANULE};
use crate::mode::Mode;
use crate::sandbox::{Sandbox, SandboxError, SandboxPool, GUEST_SIZE, METADATA_SIZE};
use crate::scenario::{CostTable, ScenarioConfig};

pub const HELPER_MAP_LOOKUP: i32 = 1;
pub const HELPER_MAP_UPDATE: i32 = 2;
pub const HELPER_TRACE_LOG: i32 = 3;
pub const HELPER_GET_TIME: i32 = 4;
pub const HELPER_GET_PRANDOM: i32 = 5;
/// `obj_store_u32(obj, kernel_offset, value)`: writes a 32-bit field of a context object.
pub const HELPER_OBJ_STORE_U32: i32 = 6;
pub const BUILTIN_HELPERS: [i32; 6] = [1, 2, 3, 4, 5, 6];

pub const DEFAULT_STEP_BUDGET: u64 = 1_000_000;
pub const MAX_LOG_LEN: u64 = 256;
pub const TIME_STEP: u64 = 1000;
/// Stack register value of the code that invokes the program.
pub const HOST_STACK_REGISTER: u64 = 0xFFFF_8000_0000_7F00;

/// Return value of map_update for an index outside the map.
pub const E2BIG: i64 = -7;
/// Return value of map_update for an unknown map.
pub const ENOENT: i64 = -2;

#[derive(Debug, Error)]
pub enum WorldError {
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Memory(#[from] MemError),
    #[error(transparent)]
    Config(#[from] crate::scenario::ConfigError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LoadError {
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error("core {0} is not configured")]
    UnknownCore(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EngineError {
    #[error("step budget of {0} instructions exceeded")]
    StepBudgetExceeded(u64),
    #[error(transparent)]
    Sandbox(#[from] SandboxError),
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("program was loaded for core {loaded}, not {requested}")]
    CoreMismatch { loaded: u32, requested: u32 },
    #[error("stack register not restored on exit: {0:#x}")]
    StackRestoreMismatch(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum FaultKind {
    TagMismatch,
    UnknownObject,
    OutOfArena,
    HelperError,
    UnknownHelper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FaultRecord {
    pub kind: FaultKind,
    /// Source-level instruction index.
    pub pc: usize,
    pub addr: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Completed,
    Faulted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CostBreakdown {
    pub program: u64,
    pub context: u64,
    pub tagging: u64,
    pub sandbox: u64,
    pub access: u64,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.program + self.context + self.tagging + self.sandbox + self.access
    }

    pub fn add(&mut self, other: &CostBreakdown) {
        self.program += other.program;
        self.context += other.context;
        self.tagging += other.tagging;
        self.sandbox += other.sandbox;
        self.access += other.access;
    }
}

impl Serialize for CostBreakdown {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct View {
            program: u64,
            context: u64,
            tagging: u64,
            sandbox: u64,
            access: u64,
            total: u64,
        }
        View {
            program: self.program,
            context: self.context,
            tagging: self.tagging,
            sandbox: self.sandbox,
            access: self.access,
            total: self.total(),
        }
        .serialize(s)
    }
}

/// Event counts behind the cost figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counters {
    pub guest_accesses: u64,
    pub guarded_accesses_executed: u64,
    pub access_checks_executed: u64,
    pub tag_load_analogs: u64,
    pub markers_executed: u64,
    pub helper_calls: u64,
    pub ctx_fields_copied: u64,
    pub nested_fields_copied: u64,
    pub ctx_bytes_copied: u64,
    pub fields_written_back: u64,
    pub writeback_skipped: u64,
    pub fields_flushed: u64,
    pub fields_refreshed: u64,
    pub granules_tagged: u64,
    pub weakened_tag: bool,
}

/// One guest memory access observed by the trace auditor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AccessRecord {
    pub exec_pc: usize,
    pub source_pc: usize,
    pub addr: u64,
    pub len: u64,
    pub store: bool,
    /// Component the access was classified into, for source-level accesses.
    pub component: Option<Component>,
    pub injected: bool,
    pub completed: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RunResult {
    pub r0: u64,
    pub status: RunStatus,
    pub fault: Option<FaultRecord>,
    #[serde(serialize_with = "hex_log")]
    pub log: Vec<Vec<u8>>,
    pub cost: CostBreakdown,
    pub steps: u64,
    pub counters: Counters,
    #[serde(skip)]
    pub audit: Vec<AccessRecord>,
    /// Registers before each executed source-level instruction, when requested.
    #[serde(skip)]
    pub reg_trace: Vec<(usize, [u64; 11])>,
}

fn hex_log<S: Serializer>(log: &[Vec<u8>], s: S) -> Result<S::Ok, S::Error> {
    let entries: Vec<String> = log.iter().map(|e| e.iter().map(|b| format!("{b:02x}")).collect()).collect();
    entries.serialize(s)
}

impl RunResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("run result serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub step_budget: u64,
    pub copy_mode: CopyMode,
    pub audit: bool,
    pub trace_registers: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            step_budget: DEFAULT_STEP_BUDGET,
            copy_mode: CopyMode::Partial,
            audit: false,
            trace_registers: false,
        }
    }
}

/// Per executed instruction: where it came from and which component it is confined to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ExecMeta {
    pub source_pc: usize,
    pub component: Option<Component>,
    pub guarded: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadedProgram {
    pub source: Program,
    pub accesses: BTreeMap<usize, AccessInfo>,
    pub demand: ContextDemand,
    pub mode: Mode,
    pub core: u32,
    pub exec: Program,
    pub report: InstrumentationReport,
    pub meta: Vec<ExecMeta>,
}

/// Bytes observable after a run, used to compare outcomes across modes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Observable {
    pub maps: BTreeMap<u32, Vec<u8>>,
    pub objects: BTreeMap<String, Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct World {
    pub config: ScenarioConfig,
    pub space: SimAddressSpace,
    pub maps: MapRegistry,
    pub objects: ObjectStore,
    pub context: Option<ResolvedContext>,
    pub pool: SandboxPool,
    pub tag_pool: TagPool,
    secret: Range<u64>,
    /// Number of runs started.
    pub runs: u64,
}

impl World {
    pub fn new(config: ScenarioConfig) -> Result<World, WorldError> {
        config.validate()?;
        let mut space = SimAddressSpace::new(config.arena_size);
        let secret_decl = config.secret.clone().unwrap_or_default();
        let secret_len = secret_decl.len.max(8).next_multiple_of(GRANULE);
        let secret_addr = match secret_decl.addr_hint {
            Some(a) if a % GRANULE == 0 && space.reserve(a, secret_len).is_ok() => a,
            _ => space.alloc(secret_len, GRANULE)?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EC2_E75E_C2E7);
        let bytes: Vec<u8> = (0..secret_len).map(|_| rng.gen::<u8>() | 0x01).collect();
        space.write_bytes(secret_addr, &bytes).expect("secret inside arena");

        let pool = SandboxPool::new(config.sandbox_tag);
        for core in 0..config.cores {
            pool.page_for(&mut space, core)?;
        }
        let mut maps = MapRegistry::new();
        for m in &config.maps {
            maps.create(&mut space, m.id, m.value_size, m.max_entries, config.sandbox_tag)?;
        }
        let objects = ObjectStore::place(&mut space, &config.kernel_objects)?;
        let context = match &config.context {
            Some(spec) => Some(ResolvedContext::resolve(spec, &config.kernel_objects)?),
            None => None,
        };
        space.clear_dirty();
        Ok(World {
            config,
            space,
            maps,
            objects,
            context,
            pool,
            tag_pool: TagPool::new(),
            secret: secret_addr..secret_addr + secret_len,
            runs: 0,
        })
    }

    pub fn from_json(text: &str) -> Result<World, WorldError> {
        World::new(ScenarioConfig::from_json(text)?)
    }

    pub fn secret(&self) -> Range<u64> {
        self.secret.clone()
    }

    pub fn secret_bytes(&self) -> Vec<u8> {
        self.space.read_bytes(self.secret.start, self.secret.end - self.secret.start).expect("secret").to_vec()
    }

    pub fn analysis_env(&self) -> AnalysisEnv {
        AnalysisEnv { maps: self.maps.iter().map(|m| m.map_id).collect(), context: self.context.clone() }
    }

    pub fn sandbox_page(&self, core: u32) -> Option<u64> {
        self.pool.pages().into_iter().find(|(c, _)| *c == core).map(|(_, b)| b)
    }

    pub fn masks_for(&self, core: u32) -> Option<ComponentMasks> {
        let page = self.sandbox_page(core)?;
        Some(ComponentMasks {
            guest: compute_masks(page + METADATA_SIZE, GUEST_SIZE).expect("aligned guest partition"),
            maps: self.maps.iter().map(|m| (m.map_id, m.mask)).collect(),
        })
    }

    /// Guest partitions of every sandbox page.
    pub fn guest_partitions(&self) -> Vec<Range<u64>> {
        self.pool.pages().into_iter().map(|(_, b)| b + METADATA_SIZE..b + METADATA_SIZE + GUEST_SIZE).collect()
    }

    pub fn map_regions(&self) -> Vec<Range<u64>> {
        self.maps.iter().map(|m| m.region()).collect()
    }

    pub fn object_regions(&self) -> Vec<Range<u64>> {
        self.objects.objects().map(|(_, a, s)| a..a + s.next_multiple_of(GRANULE)).collect()
    }

    /// Ranges excluded from containment digests: state programs legitimately change.
    pub fn digest_exclusions(&self) -> Vec<Range<u64>> {
        let mut v = self.map_regions();
        v.extend(self.object_regions());
        v
    }

    pub fn observable(&self) -> Observable {
        Observable {
            maps: self.maps.contents(&self.space),
            objects: self
                .objects
                .objects()
                .map(|(n, a, s)| (n.to_string(), self.space.read_bytes(a, s).expect("object").to_vec()))
                .collect(),
        }
    }

    pub fn load(&self, p: &Program, mode: Mode, core: u32) -> Result<LoadedProgram, LoadError> {
        let analysis = check_and_analyze(p, &self.analysis_env())?;
        self.load_analyzed(p, analysis.accesses, analysis.access_set.context, mode, core)
    }

    /// Instruments a program whose accesses were classified elsewhere.
    pub fn load_analyzed(
        &self,
        p: &Program,
        accesses: BTreeMap<usize, AccessInfo>,
        demand: ContextDemand,
        mode: Mode,
        core: u32,
    ) -> Result<LoadedProgram, LoadError> {
        let masks = self.masks_for(core).ok_or(LoadError::UnknownCore(core))?;
        let out = instrument(p, &accesses, self.context.as_ref(), mode, Some(&masks))?;
        let source_pcs = out.program.source_pcs();
        let meta = source_pcs
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let is_source = out.program.origin[i].is_source();
                let access = if is_source { accesses.get(&s) } else { None };
                let is_access = out.program.insns[i].is_memory_access();
                ExecMeta {
                    source_pc: s,
                    component: access.filter(|_| is_access).map(|a| a.component()),
                    guarded: mode == Mode::Sfi && is_access && access.is_some(),
                }
            })
            .collect();
        Ok(LoadedProgram {
            source: p.clone(),
            accesses,
            demand,
            mode,
            core,
            exec: out.program,
            report: out.report,
            meta,
        })
    }

    pub fn run(&mut self, lp: &LoadedProgram, opts: &RunOptions) -> Result<RunResult, EngineError> {
        self.runs += 1;
        Execution::start(self, lp, opts)
    }
}

struct Execution<'a> {
    world: &'a mut World,
    lp: &'a LoadedProgram,
    opts: &'a RunOptions,
    sb: Option<Sandbox>,
    table: Option<SyncTable>,
    receipt: Option<TaggingReceipt>,
    policy: TagPolicy,
    regs: [u64; Reg::COUNT],
    cost: CostBreakdown,
    counters: Counters,
    log: Vec<Vec<u8>>,
    audit: Vec<AccessRecord>,
    reg_trace: Vec<(usize, [u64; 11])>,
    steps: u64,
    clock: u64,
    rng: ChaCha8Rng,
}

enum Stop {
    Exit,
    Fault(FaultRecord),
}

impl<'a> Execution<'a> {
    fn start(world: &'a mut World, lp: &'a LoadedProgram, opts: &'a RunOptions) -> Result<RunResult, EngineError> {
        let clock = world.config.time_base;
        let rng = ChaCha8Rng::seed_from_u64(world.config.seed);
        let policy = if lp.mode.is_mte() { TagPolicy::sync(world.config.sandbox_tag) } else { TagPolicy::off() };
        let mut ex = Execution {
            world,
            lp,
            opts,
            sb: None,
            table: None,
            receipt: None,
            policy,
            regs: [0; Reg::COUNT],
            cost: CostBreakdown::default(),
            counters: Counters::default(),
            log: Vec::new(),
            audit: Vec::new(),
            reg_trace: Vec::new(),
            steps: 0,
            clock,
            rng,
        };
        let outcome = ex.setup().and_then(|_| ex.body());
        let finished = ex.finish(&outcome);
        let stop = outcome?;
        finished?;
        let (status, fault) = match stop {
            Stop::Exit => (RunStatus::Completed, None),
            Stop::Fault(f) => (RunStatus::Faulted, Some(f)),
        };
        Ok(RunResult {
            r0: ex.regs[0],
            status,
            fault,
            log: ex.log,
            cost: ex.cost,
            steps: ex.steps,
            counters: ex.counters,
            audit: ex.audit,
            reg_trace: ex.reg_trace,
        })
    }

    fn costs(&self) -> &CostTable {
        &self.world.config.costs
    }

    fn setup(&mut self) -> Result<(), EngineError> {
        let mode = self.lp.mode;
        let w = &mut *self.world;
        let sb = w.pool.acquire(&mut w.space, self.lp.core, mode)?;
        if mode.is_sandboxed() {
            self.cost.sandbox += w.config.costs.sandbox_acquire;
        }
        let root = w.context.as_ref().and_then(|c| w.objects.addr(&c.root));
        let r1 = match mode {
            Mode::Sfi | Mode::Mte => match (&w.context, root) {
                (Some(ctx), Some(root)) => {
                    let sel = ctx.select(&self.lp.demand, self.opts.copy_mode);
                    let table = prepare_context(&mut w.space, &sb, ctx, root, &sel);
                    let table = match table {
                        Ok(t) => t,
                        Err(e) => {
                            self.sb = Some(sb);
                            return Err(e.into());
                        }
                    };
                    let fields = table.fields_copied() as u64;
                    self.counters.ctx_fields_copied = table.ctx_fields_copied as u64;
                    self.counters.nested_fields_copied = table.nested_fields_copied as u64;
                    self.counters.ctx_bytes_copied = table.bytes_copied;
                    self.cost.context += fields * w.config.costs.context_field;
                    let base = table.ctx_base;
                    self.table = Some(table);
                    base
                }
                _ => sb.pointer(sb.guest_base()),
            },
            Mode::MteMin => match (&w.context, root) {
                (Some(ctx), Some(root)) => {
                    let (tag, weakened) = w.tag_pool.allocate(self.lp.core);
                    let sel = ctx.select(&self.lp.demand, CopyMode::Partial);
                    match mte_min_tag(&mut w.space, ctx, root, &sel, tag, weakened) {
                        Ok(r) => {
                            self.counters.granules_tagged = r.granules_tagged as u64;
                            self.counters.weakened_tag = r.weakened;
                            self.cost.tagging += r.granules_tagged as u64 * w.config.costs.tag_granule;
                            self.receipt = Some(r);
                        }
                        Err(e) => {
                            w.tag_pool.release(self.lp.core);
                            self.sb = Some(sb);
                            return Err(e.into());
                        }
                    }
                    with_tag(root, tag)
                }
                _ => sb.pointer(sb.guest_base()),
            },
            Mode::Vanilla => root.unwrap_or(0),
        };
        self.regs[1] = r1;
        if mode == Mode::Vanilla {
            self.regs[10] = sb.stack_top();
        }
        self.sb = Some(sb);
        Ok(())
    }

    fn finish(&mut self, outcome: &Result<Stop, EngineError>) -> Result<(), EngineError> {
        let mode = self.lp.mode;
        let w = &mut *self.world;
        let mut restored = Ok(());
        if let Some(sb) = self.sb.as_mut() {
            if sb.is_entered() {
                restored = sb.exit(&mut w.space).map(|_| ()).map_err(EngineError::from);
            }
        }
        if matches!(outcome, Ok(Stop::Exit)) {
            if let Some(t) = self.table.as_mut() {
                let r = sync_out(&mut w.space, t);
                self.counters.fields_written_back += r.written as u64;
                self.counters.writeback_skipped += r.skipped as u64;
                self.cost.context += r.written as u64 * w.config.costs.context_field;
            }
        }
        if let Some(r) = self.receipt.take() {
            r.restore(&mut w.space);
            self.cost.tagging += r.granules_tagged as u64 * w.config.costs.tag_granule;
            w.tag_pool.release(self.lp.core);
        }
        if let Some(sb) = self.sb.take() {
            w.pool.release(&mut w.space, sb)?;
            if mode.is_sandboxed() {
                self.cost.sandbox += w.config.costs.sandbox_release;
            }
        }
        restored
    }

    fn fault(&self, kind: FaultKind, pc: usize, addr: u64) -> Stop {
        Stop::Fault(FaultRecord { kind, pc: self.lp.meta[pc].source_pc, addr })
    }

    fn operand(&self, op: Operand) -> u64 {
        match op {
            Operand::Reg(r) => self.regs[r.index()],
            Operand::Imm(i) => imm64(i),
        }
    }

    fn charge(&mut self, insn: &Instruction, origin: InsnOrigin) {
        let c = self.costs().clone();
        if self.lp.mode == Mode::Vanilla
            && origin != InsnOrigin::Inserted(InsertKind::CtxConvert)
            && !origin.is_source()
        {
            return;
        }
        match origin {
            InsnOrigin::Original
            | InsnOrigin::Inserted(InsertKind::Injected)
            | InsnOrigin::Inserted(InsertKind::CtxConvert) => {
                self.cost.program += match insn {
                    Instruction::Alu { .. } | Instruction::Exit => c.alu,
                    Instruction::Load { .. } | Instruction::Store { .. } => c.mem,
                    Instruction::Ja { .. } | Instruction::Jcond { .. } => c.jump,
                    Instruction::Call { helper } => c.helpers.get(helper).copied().unwrap_or(0),
                };
            }
            InsnOrigin::Inserted(InsertKind::AccessCheck) => {
                self.cost.access += c.alu;
                self.counters.access_checks_executed += 1;
            }
            InsnOrigin::Inserted(InsertKind::AddressForm) => self.cost.access += c.address_form,
            InsnOrigin::Inserted(InsertKind::Sandbox) => {
                self.cost.sandbox += c.marker;
                self.counters.markers_executed += 1;
            }
        }
    }

    fn body(&mut self) -> Result<Stop, EngineError> {
        let exec = &self.lp.exec;
        let mut pc = 0usize;
        loop {
            if self.steps >= self.opts.step_budget {
                return Err(EngineError::StepBudgetExceeded(self.opts.step_budget));
            }
            let Some(insn) = exec.insns.get(pc).copied() else {
                return Ok(self.fault(FaultKind::OutOfArena, pc.saturating_sub(1), 0));
            };
            let origin = exec.origin[pc];
            self.steps += 1;
            if self.opts.trace_registers && origin.is_source() {
                let mut r = [0u64; 11];
                r.copy_from_slice(&self.regs[..11]);
                self.reg_trace.push((self.lp.meta[pc].source_pc, r));
            }
            self.charge(&insn, origin);
            let mut next = pc + 1;
            match insn {
                Instruction::Alu { width, op, dst, src } => {
                    let v = self.operand(src);
                    self.regs[dst.index()] = alu_eval(width, op, self.regs[dst.index()], v);
                }
                Instruction::Load { size, dst, base, off } => {
                    let addr = self.regs[base.index()].wrapping_add(off as i64 as u64);
                    match self.guest_access(pc, addr, size.bytes(), None) {
                        Ok(v) => self.regs[dst.index()] = v,
                        Err(stop) => return Ok(stop),
                    }
                }
                Instruction::Store { size, base, off, src } => {
                    let addr = self.regs[base.index()].wrapping_add(off as i64 as u64);
                    let v = self.operand(src);
                    if let Err(stop) = self.guest_access(pc, addr, size.bytes(), Some(v)) {
                        return Ok(stop);
                    }
                }
                Instruction::Ja { off } => {
                    if origin == InsnOrigin::Inserted(InsertKind::Sandbox) {
                        self.marker(pc)?;
                    }
                    next = (pc as i64 + 1 + off as i64) as usize;
                }
                Instruction::Jcond { cond, dst, src, off } => {
                    if cond.holds(self.regs[dst.index()], self.operand(src)) {
                        next = (pc as i64 + 1 + off as i64) as usize;
                    }
                }
                Instruction::Call { helper } => {
                    if let Err(stop) = self.call_helper(pc, helper) {
                        return Ok(stop);
                    }
                    for r in 1..=5 {
                        self.regs[r] = 0;
                    }
                }
                Instruction::Exit => return Ok(Stop::Exit),
            }
            pc = next;
        }
    }

    fn marker(&mut self, pc: usize) -> Result<(), EngineError> {
        let sb = self.sb.as_mut().expect("sandbox acquired");
        if pc == 0 {
            self.regs[10] = sb.enter(&mut self.world.space, HOST_STACK_REGISTER)?;
        } else {
            let restored = sb.exit(&mut self.world.space)?;
            if restored != HOST_STACK_REGISTER {
                return Err(EngineError::StackRestoreMismatch(restored));
            }
        }
        Ok(())
    }

    /// A guest load (`value == None`) or store.
    fn guest_access(&mut self, pc: usize, addr: u64, len: u64, value: Option<u64>) -> Result<u64, Stop> {
        let meta = self.lp.meta[pc];
        self.counters.guest_accesses += 1;
        if meta.guarded {
            self.counters.guarded_accesses_executed += 1;
        }
        if self.lp.mode.is_mte() {
            self.counters.tag_load_analogs += 1;
            self.cost.access += self.costs().tag_load_analog;
        }
        let space = &mut self.world.space;
        let res = match value {
            None => space.read(addr, len, &self.policy, AccessContext::Guest),
            Some(v) => space.write(addr, len, v, &self.policy, AccessContext::Guest).map(|_| 0),
        };
        if self.opts.audit {
            self.audit.push(AccessRecord {
                exec_pc: pc,
                source_pc: meta.source_pc,
                addr,
                len,
                store: value.is_some(),
                component: meta.component,
                injected: self.lp.exec.origin[pc] == InsnOrigin::Inserted(InsertKind::Injected),
                completed: res.is_ok(),
            });
        }
        match res {
            Ok(v) => {
                if value.is_some() {
                    if let Some(t) = self.table.as_mut() {
                        t.mark_store(addr, len);
                    }
                }
                Ok(v)
            }
            Err(AccessError::OutOfArena { addr, .. }) => Err(self.fault(FaultKind::OutOfArena, pc, addr)),
            Err(AccessError::TagMismatch { addr, .. }) => Err(self.fault(FaultKind::TagMismatch, pc, addr)),
        }
    }

    /// Validates a guest buffer handed to a helper.
    fn check_buffer(&self, pc: usize, addr: u64, len: u64) -> Result<(), Stop> {
        if len == 0 {
            return Ok(());
        }
        let w = &*self.world;
        match self.lp.mode {
            Mode::Sfi => {
                let sb = self.sb.as_ref().expect("sandbox acquired");
                if sb.contains_guest(addr, len) || w.maps.find(addr, len).is_some() {
                    Ok(())
                } else {
                    Err(self.fault(FaultKind::HelperError, pc, addr))
                }
            }
            Mode::Mte | Mode::MteMin => w.space.check_guest_tags(addr, len).map_err(|e| match e {
                AccessError::TagMismatch { addr, .. } => self.fault(FaultKind::TagMismatch, pc, addr),
                AccessError::OutOfArena { addr, .. } => self.fault(FaultKind::OutOfArena, pc, addr),
            }),
            Mode::Vanilla => {
                if w.space.contains(addr, len) {
                    Ok(())
                } else {
                    Err(self.fault(FaultKind::OutOfArena, pc, addr))
                }
            }
        }
    }

    fn read_guest_buffer(&self, pc: usize, addr: u64, len: u64) -> Result<Vec<u8>, Stop> {
        self.check_buffer(pc, addr, len)?;
        self.world
            .space
            .read_bytes(strip_tag(addr), len)
            .map(|b| b.to_vec())
            .map_err(|_| self.fault(FaultKind::OutOfArena, pc, addr))
    }

    fn call_helper(&mut self, pc: usize, id: i32) -> Result<(), Stop> {
        if !BUILTIN_HELPERS.contains(&id) || !self.world.config.helper_enabled(id) {
            return Err(self.fault(FaultKind::UnknownHelper, pc, id as u64));
        }
        self.counters.helper_calls += 1;
        let (a1, a2, a3) = (self.regs[1], self.regs[2], self.regs[3]);
        let r0 = match id {
            HELPER_MAP_LOOKUP => {
                let tagged = self.lp.mode.is_mte();
                u32::try_from(a1).ok().and_then(|m| self.world.maps.lookup(m, a2, tagged).ok()).unwrap_or(0)
            }
            HELPER_MAP_UPDATE => {
                let Some(desc) = u32::try_from(a1).ok().and_then(|m| self.world.maps.get(m)) else {
                    self.regs[0] = ENOENT as u64;
                    return Ok(());
                };
                let (map_id, vs) = (desc.map_id, desc.value_size);
                let value = self.read_guest_buffer(pc, a3, vs)?;
                match self.world.maps.update(&mut self.world.space, map_id, a2, &value) {
                    Ok(()) => 0,
                    Err(_) => E2BIG as u64,
                }
            }
            HELPER_TRACE_LOG => {
                if a2 > MAX_LOG_LEN {
                    return Err(self.fault(FaultKind::HelperError, pc, a1));
                }
                let bytes = self.read_guest_buffer(pc, a1, a2)?;
                self.log.push(bytes);
                0
            }
            HELPER_GET_TIME => {
                self.clock += TIME_STEP;
                self.clock
            }
            HELPER_GET_PRANDOM => self.rng.next_u32() as u64,
            HELPER_OBJ_STORE_U32 => self.obj_store_u32(pc, a1, a2, a3)?,
            _ => unreachable!("builtin helper ids are handled above"),
        };
        self.regs[0] = r0;
        Ok(())
    }

    fn obj_store_u32(&mut self, pc: usize, obj: u64, off: u64, value: u64) -> Result<u64, Stop> {
        let unknown = |s: &Self| s.fault(FaultKind::UnknownObject, pc, obj);
        let write = |space: &mut SimAddressSpace, kernel: u64, size: u64| -> bool {
            if !off.is_multiple_of(4) || off.checked_add(4).is_none_or(|e| e > size) {
                return false;
            }
            space.host_write(kernel + off, 4, value & 0xFFFF_FFFF).is_ok()
        };
        match self.lp.mode {
            Mode::Sfi | Mode::Mte => {
                let Some(table) = self.table.as_mut() else { return Err(unknown(self)) };
                let Ok((idx, _)) = table.translate(obj) else { return Err(unknown(self)) };
                let size = table.translations[idx].size;
                let space = &mut self.world.space;
                let res = crate::context::translate_for_helper(table, space, obj, |space, k| write(space, k, size));
                let (ok, flushed, refreshed) = match res {
                    Ok(v) => v,
                    Err(_) => return Err(unknown(self)),
                };
                self.counters.fields_flushed += flushed.written as u64;
                self.counters.fields_refreshed += refreshed as u64;
                self.cost.context += (flushed.written + refreshed) as u64 * self.costs().context_field;
                if !ok {
                    return Err(self.fault(FaultKind::HelperError, pc, obj));
                }
            }
            Mode::Vanilla | Mode::MteMin => {
                let a = strip_tag(obj);
                let Some((_, base, d)) = self.world.objects.object_at(a) else { return Err(unknown(self)) };
                if base != a {
                    return Err(unknown(self));
                }
                let size = d.size;
                if !write(&mut self.world.space, base, size) {
                    return Err(self.fault(FaultKind::HelperError, pc, obj));
                }
            }
        }
        Ok(0)
    }
}
