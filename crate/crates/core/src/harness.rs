// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Fault-injection campaigns and the microbenchmark suite.
//!
//! A campaign inserts one synthetic out-of-bounds load or store per trial into the source
//! program, before any mode-specific rewriting, so that the enforcement layer sees the gadget
//! exactly as it sees ordinary code. Every trial runs in its own copy of the world; the
//! arena outside maps and kernel objects must hash the same afterwards, and no window of the
//! planted secret may appear in `r0`, the log or any map.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::analyze::{check_and_analyze, AccessInfo, AccessTarget, Analysis, Provenance};
use crate::context::CopyMode;
use crate::engine::{
    EngineError, FaultKind, LoadError, LoadedProgram, RunOptions, RunResult, RunStatus, World, WorldError,
};
use crate::instrument::splice;
use crate::isa::{assemble, AluOp, AsmError, InsertKind, InsnOrigin, Instruction, MemSize, Operand, Program, Reg};
use crate::memory::{strip_tag, Checkpoint, PageDigests};
use crate::mode::Mode;

/// Keep-out distance around every sandbox component when drawing injection targets.
pub const EDGE_MARGIN: u64 = 16;
/// Value written by injected stores.
pub const INJECTED_STORE_VALUE: i32 = 0x5A5A_5A5A;
/// Width of the secret windows searched for in outputs.
pub const LEAK_WINDOW: usize = 8;
const TRIALS_PER_SHARD: usize = 256;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("unknown scenario `{0}`")]
    UnknownScenario(String),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("builtin program `{name}`: {source}")]
    Asm { name: String, source: AsmError },
    #[error("program never executes an instruction with a pointer operand")]
    NoInjectionSite,
}

// ---------------------------------------------------------------------------------------------
// Builtin scenarios

#[derive(Debug, Clone, Copy)]
pub struct BuiltinScenario {
    pub name: &'static str,
    pub config: &'static str,
    /// Programs run in order on every repetition; they share the scenario's maps.
    pub programs: &'static [(&'static str, &'static str)],
}

const BUILTINS: [BuiltinScenario; 5] = [
    BuiltinScenario {
        name: "sockfilter",
        config: include_str!("../scenarios/sockfilter.json"),
        programs: &[("sockfilter", include_str!("../scenarios/sockfilter.asm"))],
    },
    BuiltinScenario {
        name: "sockex1",
        config: include_str!("../scenarios/sockex1.json"),
        programs: &[("sockex1", include_str!("../scenarios/sockex1.asm"))],
    },
    BuiltinScenario {
        name: "sockex2",
        config: include_str!("../scenarios/sockex2.json"),
        programs: &[("sockex2", include_str!("../scenarios/sockex2.asm"))],
    },
    BuiltinScenario {
        name: "ddos",
        config: include_str!("../scenarios/ddos.json"),
        programs: &[("ddos", include_str!("../scenarios/ddos.asm"))],
    },
    BuiltinScenario {
        name: "vfs",
        config: include_str!("../scenarios/vfs.json"),
        programs: &[
            ("vfs_entry", include_str!("../scenarios/vfs_entry.asm")),
            ("vfs_return", include_str!("../scenarios/vfs_return.asm")),
        ],
    },
];

pub fn builtin_scenarios() -> &'static [BuiltinScenario] {
    &BUILTINS
}

pub fn builtin(name: &str) -> Option<&'static BuiltinScenario> {
    BUILTINS.iter().find(|s| s.name == name)
}

/// `builtin` selects every scenario; any other name selects one builtin scenario.
pub fn scenario_set(name: &str) -> Result<Vec<&'static BuiltinScenario>, HarnessError> {
    match name {
        "builtin" => Ok(BUILTINS.iter().collect()),
        other => builtin(other).map(|s| vec![s]).ok_or_else(|| HarnessError::UnknownScenario(other.to_string())),
    }
}

impl BuiltinScenario {
    pub fn world(&self) -> Result<World, HarnessError> {
        Ok(World::from_json(self.config)?)
    }

    pub fn programs(&self) -> Result<Vec<(&'static str, Program)>, HarnessError> {
        self.programs
            .iter()
            .map(|(name, src)| {
                assemble(src).map(|p| (*name, p)).map_err(|source| HarnessError::Asm { name: name.to_string(), source })
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------------------------
// Fault injection

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Load,
    Store,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Redirected,
    Faulted,
    Escaped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InjectionStrategy {
    /// Loads hit the secret half of the time; everything else is uniform over the arena.
    #[default]
    Uniform,
    /// Every trial is a store into the secret.
    SentinelOverwrite,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InjectionRecord {
    pub trial: usize,
    /// Source position the gadget was inserted before.
    pub pc_inserted: usize,
    pub kind: AccessKind,
    pub base_reg: u8,
    pub target_addr: u64,
    /// Address the injected access actually issued, when it executed.
    pub issued_addr: Option<u64>,
    pub outcome: Outcome,
    pub fault: Option<FaultKind>,
    pub digest_match: bool,
    pub secret_leaked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InjectionReport {
    pub mode: Mode,
    pub seed: u64,
    pub trials: usize,
    pub contained: usize,
    pub escapes: usize,
    pub redirected: usize,
    pub faulted: usize,
    pub tag_mismatches: usize,
    pub secret_leaked: bool,
    pub arena_digest_match: bool,
    pub records: Vec<InjectionRecord>,
}

impl InjectionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn summary(&self) -> String {
        format!(
            "mode={} trials={} contained={} escapes={} redirected={} faulted={} tag_mismatch={} secret_leaked={} digest_match={}",
            self.mode,
            self.trials,
            self.contained,
            self.escapes,
            self.redirected,
            self.faulted,
            self.tag_mismatches,
            self.secret_leaked,
            self.arena_digest_match
        )
    }
}

#[derive(Debug, Clone, Copy)]
struct Site {
    pc: usize,
    regs: [u64; 11],
    pointers: [bool; 11],
}

#[derive(Debug, Clone, Copy)]
struct TrialPlan {
    pc: usize,
    kind: AccessKind,
    base: Reg,
    target: u64,
    disp: i32,
    provenance: Provenance,
}

struct Campaign<'a> {
    program: &'a Program,
    analysis: Analysis,
    mode: Mode,
    strategy: InjectionStrategy,
    seed: u64,
    sites: Vec<Site>,
    scratch: Reg,
    forbidden: Vec<Range<u64>>,
    secret: Range<u64>,
    secret_windows: HashSet<[u8; LEAK_WINDOW]>,
    arena: Range<u64>,
}

pub fn inject_faults(
    world: &World,
    p: &Program,
    mode: Mode,
    trials: usize,
    seed: u64,
) -> Result<InjectionReport, HarnessError> {
    inject_faults_with(world, p, mode, trials, seed, InjectionStrategy::Uniform)
}

pub fn inject_faults_with(
    world: &World,
    p: &Program,
    mode: Mode,
    trials: usize,
    seed: u64,
    strategy: InjectionStrategy,
) -> Result<InjectionReport, HarnessError> {
    let campaign = Campaign::new(world, p, mode, seed, strategy)?;
    let checkpoint = world.space.checkpoint();
    let digests = world.space.page_snapshot(&world.digest_exclusions());
    let shards: Vec<Range<usize>> =
        (0..trials).step_by(TRIALS_PER_SHARD).map(|s| s..(s + TRIALS_PER_SHARD).min(trials)).collect();
    let records: Result<Vec<Vec<InjectionRecord>>, HarnessError> = shards
        .into_par_iter()
        .map(|shard| {
            let mut w = world.clone();
            shard.map(|t| campaign.trial(&mut w, t, &checkpoint, &digests)).collect()
        })
        .collect();
    let records: Vec<InjectionRecord> = records?.into_iter().flatten().collect();
    let count = |o: Outcome| records.iter().filter(|r| r.outcome == o).count();
    let escapes = count(Outcome::Escaped);
    Ok(InjectionReport {
        mode,
        seed,
        trials,
        contained: trials - escapes,
        escapes,
        redirected: count(Outcome::Redirected),
        faulted: count(Outcome::Faulted),
        tag_mismatches: records.iter().filter(|r| r.fault == Some(FaultKind::TagMismatch)).count(),
        secret_leaked: records.iter().any(|r| r.secret_leaked),
        arena_digest_match: records.iter().all(|r| r.digest_match),
        records,
    })
}

fn expand(r: &Range<u64>, margin: u64) -> Range<u64> {
    r.start.saturating_sub(margin)..r.end.saturating_add(margin)
}

fn overlaps(a: &Range<u64>, b: &Range<u64>) -> bool {
    a.start < b.end && b.start < a.end
}

impl<'a> Campaign<'a> {
    fn new(
        world: &'a World,
        program: &'a Program,
        mode: Mode,
        seed: u64,
        strategy: InjectionStrategy,
    ) -> Result<Self, HarnessError> {
        let analysis = check_and_analyze(program, &world.analysis_env()).map_err(LoadError::from)?;
        let lp =
            world.load_analyzed(program, analysis.accesses.clone(), analysis.access_set.context.clone(), mode, 0)?;
        let mut dry = world.clone();
        let trace = dry.run(&lp, &RunOptions { trace_registers: true, ..Default::default() })?;
        let sites: Vec<Site> = trace
            .reg_trace
            .iter()
            .filter_map(|&(pc, regs)| {
                let state = analysis.states[pc]?;
                let mut pointers = [false; 11];
                for (i, p) in state.iter().enumerate() {
                    pointers[i] = p.is_pointer();
                }
                pointers.iter().any(|&b| b).then_some(Site { pc, regs, pointers })
            })
            .collect();
        if sites.is_empty() {
            return Err(HarnessError::NoInjectionSite);
        }
        // Gadgets need a register the program never reads; r0 is the fallback for programs
        // that use every register, at the price of clobbering the return value.
        let scratch = analysis.unused_regs.iter().copied().find(|r| *r != Reg::R0).unwrap_or(Reg::R0);
        let mut forbidden: Vec<Range<u64>> = world.guest_partitions();
        forbidden.extend(world.map_regions());
        forbidden.extend(world.object_regions());
        let forbidden = forbidden.iter().map(|r| expand(r, EDGE_MARGIN)).collect();
        let secret = world.secret();
        let bytes = world.secret_bytes();
        let secret_windows = bytes.windows(LEAK_WINDOW).map(|w| w.try_into().expect("window")).collect();
        let arena = world.space.base()..world.space.end();
        Ok(Campaign {
            program,
            analysis,
            mode,
            strategy,
            seed,
            sites,
            scratch,
            forbidden,
            secret,
            secret_windows,
            arena,
        })
    }

    fn draw_target(&self, rng: &mut ChaCha8Rng, in_secret: bool) -> u64 {
        if in_secret {
            let slots = (self.secret.end - self.secret.start) / 8;
            return self.secret.start + rng.gen_range(0..slots) * 8;
        }
        loop {
            let a = rng.gen_range(self.arena.start..self.arena.end - 8) & !7;
            let r = a..a + 8;
            if !self.forbidden.iter().any(|f| overlaps(f, &r)) {
                return a;
            }
        }
    }

    fn plan(&self, trial: usize) -> TrialPlan {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(trial as u64);
        let site = self.sites[rng.gen_range(0..self.sites.len())];
        let bases: Vec<usize> = (0..11).filter(|&r| site.pointers[r] && r != self.scratch.index()).collect();
        let base = bases[rng.gen_range(0..bases.len())];
        let (kind, in_secret) = match self.strategy {
            InjectionStrategy::SentinelOverwrite => (AccessKind::Store, true),
            InjectionStrategy::Uniform => {
                if rng.gen_bool(0.5) {
                    (AccessKind::Load, rng.gen_bool(0.5))
                } else {
                    (AccessKind::Store, false)
                }
            }
        };
        let from = strip_tag(site.regs[base]) as i64;
        let (target, disp) = loop {
            let t = self.draw_target(&mut rng, in_secret);
            if let Ok(d) = i32::try_from(t as i64 - from) {
                break (t, d);
            }
        };
        let provenance = self.analysis.states[site.pc].expect("executed site is reachable")[base];
        TrialPlan { pc: site.pc, kind, base: Reg::new(base as u8).expect("guest register"), target, disp, provenance }
    }

    /// The source program with the gadget spliced in, and its shifted access table.
    fn inject(&self, plan: &TrialPlan) -> Result<(Program, BTreeMap<usize, AccessInfo>), HarnessError> {
        let t = self.scratch;
        let inj = InsnOrigin::Inserted(InsertKind::Injected);
        let mut gadget = vec![
            (Instruction::alu64_reg(AluOp::Mov, t, plan.base), inj),
            (Instruction::alu64_imm(AluOp::Add, t, plan.disp), inj),
        ];
        let (access, size) = match plan.kind {
            AccessKind::Load => (Instruction::Load { size: MemSize::DW, dst: Reg::R0, base: t, off: 0 }, MemSize::DW),
            AccessKind::Store => (
                Instruction::Store { size: MemSize::W, base: t, off: 0, src: Operand::Imm(INJECTED_STORE_VALUE) },
                MemSize::W,
            ),
        };
        gadget.push((access, inj));
        if plan.kind == AccessKind::Load {
            gadget.push((Instruction::Exit, inj));
        }
        let shift = gadget.len();
        let access_pc = plan.pc + 2;
        let spliced =
            splice(self.program, &BTreeMap::from([(plan.pc, gadget)]), &BTreeMap::new()).map_err(LoadError::from)?;
        let mut accesses: BTreeMap<usize, AccessInfo> = self
            .analysis
            .accesses
            .values()
            .map(|a| {
                let mut a = *a;
                if a.pc >= plan.pc {
                    a.pc += shift;
                }
                (a.pc, a)
            })
            .collect();
        let target = match plan.provenance {
            Provenance::CtxPtr(_) => AccessTarget::Ctx { off: None, field: None },
            Provenance::HeapPtr { slot, .. } => AccessTarget::Heap { slot, off: None },
            Provenance::MapValuePtr(id) => AccessTarget::Map { id },
            _ => AccessTarget::Stack { off: None },
        };
        accesses.insert(
            access_pc,
            AccessInfo {
                pc: access_pc,
                store: plan.kind == AccessKind::Store,
                size: size.bytes(),
                base: t.index() as u8,
                off: 0,
                target,
            },
        );
        Ok((spliced, accesses))
    }

    fn leaked(&self, result: &RunResult, world: &World) -> bool {
        let hit = |bytes: &[u8]| bytes.windows(LEAK_WINDOW).any(|w| self.secret_windows.contains(w));
        hit(&result.r0.to_le_bytes())
            || result.log.iter().any(|e| hit(e))
            || world.maps.contents(&world.space).values().any(|v| hit(v))
    }

    fn trial(
        &self,
        w: &mut World,
        trial: usize,
        checkpoint: &Checkpoint,
        digests: &PageDigests,
    ) -> Result<InjectionRecord, HarnessError> {
        let plan = self.plan(trial);
        let (program, accesses) = self.inject(&plan)?;
        let lp: LoadedProgram =
            w.load_analyzed(&program, accesses, self.analysis.access_set.context.clone(), self.mode, 0)?;
        let run = w.run(&lp, &RunOptions { audit: true, copy_mode: CopyMode::Partial, ..Default::default() });
        let digest_match = w.space.dirty_pages_match(digests);
        let (fault, secret_leaked, issued_addr, completed) = match &run {
            Ok(r) => {
                let issued = r.audit.iter().find(|a| a.injected).map(|a| a.addr);
                (r.fault.map(|f| f.kind), self.leaked(r, w), issued, r.status == RunStatus::Completed)
            }
            Err(_) => (None, false, None, false),
        };
        w.space.rollback_dirty(checkpoint);
        let outcome = if !digest_match || secret_leaked {
            Outcome::Escaped
        } else if completed {
            Outcome::Redirected
        } else {
            Outcome::Faulted
        };
        Ok(InjectionRecord {
            trial,
            pc_inserted: plan.pc,
            kind: plan.kind,
            base_reg: plan.base.index() as u8,
            target_addr: plan.target,
            issued_addr,
            outcome,
            fault,
            digest_match,
            secret_leaked,
        })
    }
}

// ---------------------------------------------------------------------------------------------
// Microbenchmarks

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct MeanCost {
    pub program: f64,
    pub context: f64,
    pub tagging: f64,
    pub sandbox: f64,
    pub access: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub scenario: String,
    pub program: String,
    pub mode: Mode,
    pub reps: u32,
    pub mean: MeanCost,
    /// Accesses guarded by the rewriter.
    pub static_guarded: usize,
    pub static_access_checks: usize,
    pub executed_accesses: u64,
    pub executed_guarded: u64,
    pub executed_checks: u64,
    pub tag_load_analogs: u64,
    pub ctx_fields_copied: u64,
    pub faults: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextComparison {
    pub scenario: String,
    pub program: String,
    pub mode: Mode,
    pub mirrored_fields: usize,
    pub partial_fields: u64,
    pub full_fields: u64,
    pub partial_nested_fields: u64,
    pub full_nested_fields: u64,
    pub partial_context_cost: u64,
    pub full_context_cost: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub context: Vec<ContextComparison>,
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Aligned-column rendering of both tables.
    pub fn render_table(&self) -> String {
        let mut rows = vec![[
            "scenario", "program", "mode", "program", "context", "tagging", "sandbox", "access", "total", "checks",
            "analogs",
        ]
        .map(String::from)
        .to_vec()];
        for r in &self.rows {
            let m = &r.mean;
            rows.push(vec![
                r.scenario.clone(),
                r.program.clone(),
                r.mode.to_string(),
                format!("{:.1}", m.program),
                format!("{:.1}", m.context),
                format!("{:.1}", m.tagging),
                format!("{:.1}", m.sandbox),
                format!("{:.1}", m.access),
                format!("{:.1}", m.total),
                r.executed_checks.to_string(),
                r.tag_load_analogs.to_string(),
            ]);
        }
        let mut out = align(&rows);
        if !self.context.is_empty() {
            let mut rows =
                vec![["scenario", "program", "mode", "mirrored", "partial", "full", "partial_cost", "full_cost"]
                    .map(String::from)
                    .to_vec()];
            for c in &self.context {
                rows.push(vec![
                    c.scenario.clone(),
                    c.program.clone(),
                    c.mode.to_string(),
                    c.mirrored_fields.to_string(),
                    c.partial_fields.to_string(),
                    c.full_fields.to_string(),
                    c.partial_context_cost.to_string(),
                    c.full_context_cost.to_string(),
                ]);
            }
            out.push('\n');
            out.push_str(&align(&rows));
        }
        out
    }
}

fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let widths: Vec<usize> =
        (0..cols).map(|c| rows.iter().map(|r| r.get(c).map_or(0, |s| s.len())).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(i, s)| if i < 3 { format!("{s:<w$}", w = widths[i]) } else { format!("{s:>w$}", w = widths[i]) })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}

fn load_all(
    world: &World,
    programs: &[(&'static str, Program)],
    mode: Mode,
) -> Result<Vec<LoadedProgram>, HarnessError> {
    programs.iter().map(|(_, p)| world.load(p, mode, 0).map_err(HarnessError::from)).collect()
}

pub fn run_microbench(set: &str, modes: &[Mode], reps: u32) -> Result<BenchReport, HarnessError> {
    let reps = reps.max(1);
    let mut rows = Vec::new();
    let mut context = Vec::new();
    for scenario in scenario_set(set)? {
        let programs = scenario.programs()?;
        for &mode in modes {
            let mut world = scenario.world()?;
            let loaded = load_all(&world, &programs, mode)?;
            let mut sums = vec![crate::engine::CostBreakdown::default(); loaded.len()];
            let mut last: Vec<Option<RunResult>> = vec![None; loaded.len()];
            let mut faults = vec![0u32; loaded.len()];
            for _ in 0..reps {
                for (i, lp) in loaded.iter().enumerate() {
                    let r = world.run(lp, &RunOptions::default())?;
                    sums[i].add(&r.cost);
                    if r.status == RunStatus::Faulted {
                        faults[i] += 1;
                    }
                    last[i] = Some(r);
                }
            }
            for (i, lp) in loaded.iter().enumerate() {
                let s = &sums[i];
                let n = reps as f64;
                let r = last[i].as_ref().expect("at least one repetition");
                rows.push(BenchRow {
                    scenario: scenario.name.to_string(),
                    program: programs[i].0.to_string(),
                    mode,
                    reps,
                    mean: MeanCost {
                        program: s.program as f64 / n,
                        context: s.context as f64 / n,
                        tagging: s.tagging as f64 / n,
                        sandbox: s.sandbox as f64 / n,
                        access: s.access as f64 / n,
                        total: s.total() as f64 / n,
                    },
                    static_guarded: lp.report.guarded_accesses,
                    static_access_checks: lp.exec.count_inserted(InsertKind::AccessCheck),
                    executed_accesses: r.counters.guest_accesses,
                    executed_guarded: r.counters.guarded_accesses_executed,
                    executed_checks: r.counters.access_checks_executed,
                    tag_load_analogs: r.counters.tag_load_analogs,
                    ctx_fields_copied: r.counters.ctx_fields_copied,
                    faults: faults[i],
                });
            }
            if mode.copies_context() {
                context.extend(compare_context(scenario, &programs, mode)?);
            }
        }
    }
    Ok(BenchReport { rows, context })
}

/// Runs every program once with partial and once with full context copies, each in a fresh world.
pub fn compare_context(
    scenario: &BuiltinScenario,
    programs: &[(&'static str, Program)],
    mode: Mode,
) -> Result<Vec<ContextComparison>, HarnessError> {
    let run_with = |copy_mode| -> Result<Vec<RunResult>, HarnessError> {
        let mut world = scenario.world()?;
        let loaded = load_all(&world, programs, mode)?;
        loaded
            .iter()
            .map(|lp| world.run(lp, &RunOptions { copy_mode, ..Default::default() }).map_err(HarnessError::from))
            .collect()
    };
    let partial = run_with(CopyMode::Partial)?;
    let full = run_with(CopyMode::Full)?;
    let mirrored = scenario.world()?.context.as_ref().map_or(0, |c| c.fields.len());
    Ok(programs
        .iter()
        .zip(partial.iter().zip(&full))
        .map(|((name, _), (p, f))| ContextComparison {
            scenario: scenario.name.to_string(),
            program: name.to_string(),
            mode,
            mirrored_fields: mirrored,
            partial_fields: p.counters.ctx_fields_copied,
            full_fields: f.counters.ctx_fields_copied,
            partial_nested_fields: p.counters.nested_fields_copied,
            full_nested_fields: f.counters.nested_fields_copied,
            partial_context_cost: p.cost.context,
            full_context_cost: f.cost.context,
        })
        .collect())
}
