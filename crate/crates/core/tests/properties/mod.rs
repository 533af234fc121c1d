// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Isolation invariants shared by the `isolation` and `acceptance` targets. Each property
//! runs 10,000 cases.

#![allow(dead_code)]

use bpfsandbox::analyze::check_and_analyze;
use bpfsandbox::engine::{LoadedProgram, RunOptions, World};
use bpfsandbox::instrument::{compute_masks, mask_address, MaskPair};
use bpfsandbox::isa::{
    assemble, decode, disassemble, encode, AluOp, AluWidth, Instruction, JmpCond, MemSize, Operand, Program, Reg,
};
use bpfsandbox::memory::{with_tag, AccessContext, SimAddressSpace, TagPolicy, ARENA_BASE, DEFAULT_MEM_TAG, GRANULE};
use bpfsandbox::mode::Mode;
use bpfsandbox::sandbox::{SandboxPool, GUEST_SIZE, METADATA_SIZE, PAGE_SIZE};
use bpfsandbox::scenario::{MapDecl, ScenarioConfig};
use proptest::prelude::*;
use proptest::test_runner::{TestCaseError, TestRunner};

pub const CASES: u32 = 10_000;

fn check<S: Strategy>(strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = ProptestConfig { cases: CASES, failure_persistence: None, ..ProptestConfig::default() };
    TestRunner::new(config).run(&strategy, test).map_err(|e| e.to_string())
}

fn region() -> impl Strategy<Value = MaskPair> {
    (4u32..24, any::<u64>()).prop_map(|(k, raw)| {
        let base = (raw & ((1u64 << (47 - k)) - 1)) << k;
        compute_masks(base, 1 << k).unwrap()
    })
}

const SPACE: usize = 64 * 1024;

fn world_for_stores() -> World {
    World::new(ScenarioConfig { maps: vec![MapDecl { id: 1, value_size: 32, max_entries: 4 }], ..Default::default() })
        .unwrap()
}

/// Loads a program of verifier-clean stores, then rewrites each displacement to `forged` so
/// the instrumented code sees addresses the analysis never approved.
fn forged_stores(w: &World, stores: &[(i16, u8, bool)], mode: Mode) -> LoadedProgram {
    let mut text = String::from("mov64 r1, 1\nmov64 r2, 0\ncall 1\njne r0, 0, +2\nmov64 r0, 0\nexit\nmov64 r6, r0\n");
    for &(_, w, via_map) in stores {
        let size = ["b", "h", "w", "dw"][(w % 4) as usize];
        let base = if via_map { "r6+0" } else { "r10-8" };
        text.push_str(&format!("st{size} [{base}], 165\n"));
    }
    text.push_str("mov64 r0, 0\nexit\n");
    let clean = assemble(&text).unwrap();
    let analysis = check_and_analyze(&clean, &w.analysis_env()).unwrap();
    let mut forged = clean.clone();
    for (i, &(off, _, _)) in stores.iter().enumerate() {
        if let Instruction::Store { off: o, .. } = &mut forged.insns[7 + i] {
            *o = off;
        }
    }
    w.load_analyzed(&forged, analysis.accesses, analysis.access_set.context, mode, 0).unwrap()
}

fn insn() -> impl Strategy<Value = Instruction> {
    let reg = (0u8..=10).prop_map(|r| Reg::new(r).unwrap());
    let operand = prop_oneof![reg.clone().prop_map(Operand::Reg), any::<i32>().prop_map(Operand::Imm)];
    let size = prop::sample::select(MemSize::ALL.to_vec());
    prop_oneof![
        (
            prop::sample::select(vec![AluWidth::W64, AluWidth::W32]),
            prop::sample::select(AluOp::ALL.to_vec()),
            reg.clone(),
            operand.clone()
        )
            .prop_map(|(width, op, dst, src)| Instruction::Alu { width, op, dst, src }),
        (size.clone(), reg.clone(), reg.clone(), any::<i16>()).prop_map(|(size, dst, base, off)| Instruction::Load {
            size,
            dst,
            base,
            off
        }),
        (size, reg.clone(), any::<i16>(), operand.clone())
            .prop_map(|(size, base, off, src)| { Instruction::Store { size, base, off, src } }),
        any::<i16>().prop_map(|off| Instruction::Ja { off }),
        (prop::sample::select(JmpCond::ALL.to_vec()), reg, operand, any::<i16>())
            .prop_map(|(cond, dst, src, off)| Instruction::Jcond { cond, dst, src, off }),
        any::<i32>().prop_map(|helper| Instruction::Call { helper }),
        Just(Instruction::Exit),
    ]
}

pub fn masked_closure() -> Result<(), String> {
    check((region(), any::<u64>()), |(pair, addr)| {
        let m = mask_address(addr, pair);
        prop_assert!(m >= pair.region_base() && m < pair.region_base() + pair.region_size());
        Ok(())
    })
}

pub fn mask_idempotence() -> Result<(), String> {
    check((region(), any::<u64>()), |(pair, addr)| {
        let m = mask_address(addr, pair);
        prop_assert_eq!(mask_address(m, pair), m);
        Ok(())
    })
}

pub fn in_bounds_fixed_point() -> Result<(), String> {
    check((region(), any::<u64>()), |(pair, off)| {
        let a = pair.region_base() + off % pair.region_size();
        prop_assert_eq!(mask_address(a, pair), a);
        Ok(())
    })
}

pub fn tag_granule_uniformity() -> Result<(), String> {
    check((0u64..4000, 1u64..200, 0u8..16, 0u64..15, 0usize..4), |(start, len, tag, probe, w)| {
        let mut space = SimAddressSpace::new(SPACE);
        let lo = (start / GRANULE) * GRANULE;
        let hi = (start + len).next_multiple_of(GRANULE);
        space.set_tag_range(ARENA_BASE + lo, hi - lo, tag).unwrap();
        let policy = TagPolicy::sync(4);
        for g in (lo..hi).step_by(GRANULE as usize) {
            let byte = ARENA_BASE + g + probe;
            prop_assert_eq!(space.get_tag(byte), Some(tag));
            // Any access inside one granule has the same outcome as an access at its start.
            let size = [1u64, 2, 4, 8][w];
            let inside = ARENA_BASE + g + (probe % (GRANULE - size + 1));
            for ptr_tag in [tag, DEFAULT_MEM_TAG, 0xF] {
                let at_start = space.read(with_tag(ARENA_BASE + g, ptr_tag), 1, &policy, AccessContext::Guest).is_ok();
                let at_probe = space.read(with_tag(inside, ptr_tag), size, &policy, AccessContext::Guest).is_ok();
                prop_assert_eq!(at_start, at_probe);
            }
        }
        prop_assert_eq!(space.get_tag(ARENA_BASE + hi), Some(DEFAULT_MEM_TAG));
        Ok(())
    })
}

pub fn guest_no_bypass() -> Result<(), String> {
    check((prop::collection::vec(0u8..16, 8), 0u8..16, 0u64..120, 0usize..4), |(tags, ptr_tag, off, w)| {
        let mut space = SimAddressSpace::new(SPACE);
        for (i, t) in tags.iter().enumerate() {
            space.set_tag_range(ARENA_BASE + i as u64 * GRANULE, GRANULE, *t).unwrap();
        }
        let size = [1u64, 2, 4, 8][w];
        let addr = with_tag(ARENA_BASE + off, ptr_tag);
        let policy = TagPolicy::sync(4);
        let first = (off / GRANULE) as usize;
        let last = ((off + size - 1) / GRANULE) as usize;
        let all_match = (first..=last).all(|g| tags[g] == ptr_tag);
        prop_assert_eq!(space.read(addr, size, &policy, AccessContext::Guest).is_ok(), all_match);
        prop_assert_eq!(space.write(addr, size, 1, &policy, AccessContext::Guest).is_ok(), all_match);
        prop_assert!(space.read(addr, size, &policy, AccessContext::Host).is_ok());
        Ok(())
    })
}

pub fn guest_no_bypass_end_to_end() -> Result<(), String> {
    check((prop::collection::vec((any::<i16>(), 0u8..4, any::<bool>()), 1..6), any::<bool>()), |(stores, mte)| {
        let mut w = world_for_stores();
        let mode = if mte { Mode::Mte } else { Mode::Sfi };
        let lp = forged_stores(&w, &stores, mode);
        let page = w.sandbox_page(0).unwrap();
        let guest = page + METADATA_SIZE..page + PAGE_SIZE;
        let map = w.maps.get(1).unwrap().region();
        let before = w.space.snapshot(&[guest.clone(), map.clone()]);
        let r = w.run(&lp, &RunOptions { audit: true, ..Default::default() }).unwrap();
        for a in r.audit.iter().filter(|a| a.completed) {
            let addr = a.addr & ((1u64 << 56) - 1);
            let inside = |r: &std::ops::Range<u64>| addr >= r.start && addr + a.len <= r.end;
            prop_assert!(inside(&guest) || inside(&map), "access {:#x} escaped", addr);
        }
        prop_assert_eq!(w.space.snapshot(&[guest, map]), before);
        Ok(())
    })
}

pub fn metadata_unreachability() -> Result<(), String> {
    check((any::<u64>(), 0u32..4), |(addr, core)| {
        let mut space = SimAddressSpace::new(SPACE);
        let pool = SandboxPool::new(4);
        for c in 0..=core {
            pool.page_for(&mut space, c).unwrap();
        }
        let page = pool.page_for(&mut space, core).unwrap();
        let pair = compute_masks(page + METADATA_SIZE, GUEST_SIZE).unwrap();
        let m = mask_address(addr, pair);
        prop_assert!(!(page..page + METADATA_SIZE).contains(&m));
        let meta = page + (addr % METADATA_SIZE) / 8 * 8;
        let policy = TagPolicy::sync(4);
        prop_assert!(space.read(with_tag(meta, 4), 8, &policy, AccessContext::Guest).is_err());
        Ok(())
    })
}

pub fn sandbox_reuse_zeroing() -> Result<(), String> {
    check((prop::collection::vec((0u64..PAGE_SIZE, any::<u8>()), 1..32), 0usize..4), |(writes, mode)| {
        let mut space = SimAddressSpace::new(SPACE);
        let pool = SandboxPool::new(4);
        let mode = Mode::ALL[mode];
        let sb = pool.acquire(&mut space, 0, mode).unwrap();
        for (off, b) in &writes {
            space.write_bytes(sb.page_base + off, &[*b]).unwrap();
        }
        pool.release(&mut space, sb).unwrap();
        let sb = pool.acquire(&mut space, 0, mode).unwrap();
        let guest = space.read_bytes(sb.guest_base(), GUEST_SIZE).unwrap();
        prop_assert!(guest.iter().all(|b| *b == 0));
        let meta = space.read_bytes(sb.page_base, 24).unwrap();
        prop_assert!(meta.iter().all(|b| *b == 0));
        prop_assert_eq!(space.get_tag(sb.guest_base()), Some(4));
        pool.release(&mut space, sb).unwrap();
        Ok(())
    })
}

pub fn stack_register_restored_after_tampering() -> Result<(), String> {
    check((prop::collection::vec(-4096i16..-2048, 1..8), any::<bool>()), |(offs, mte)| {
        let mut w = world_for_stores();
        let stores: Vec<(i16, u8, bool)> = offs.iter().map(|o| (*o & !7, 3, false)).collect();
        let mode = if mte { Mode::Mte } else { Mode::Sfi };
        let lp = forged_stores(&w, &stores, mode);
        // The engine reports a mismatch as an error; completion or a guest fault both mean
        // the caller's stack register came back intact.
        prop_assert!(w.run(&lp, &RunOptions::default()).is_ok());
        prop_assert!(!w.pool.is_active(0));
        Ok(())
    })
}

pub fn codec_round_trip() -> Result<(), String> {
    check((prop::collection::vec(insn(), 1..16),), |(insns,)| {
        let p = Program::new(insns);
        prop_assert_eq!(decode(&encode(&p)).unwrap().insns, p.insns.clone());
        prop_assert_eq!(assemble(&disassemble(&p)).unwrap().insns, p.insns);
        Ok(())
    })
}

pub type Property = fn() -> Result<(), String>;

/// Every property, in the order they are reported.
pub const ALL: &[(&str, Property)] = &[
    ("masked_closure", masked_closure),
    ("mask_idempotence", mask_idempotence),
    ("in_bounds_fixed_point", in_bounds_fixed_point),
    ("tag_granule_uniformity", tag_granule_uniformity),
    ("guest_no_bypass", guest_no_bypass),
    ("guest_no_bypass_end_to_end", guest_no_bypass_end_to_end),
    ("metadata_unreachability", metadata_unreachability),
    ("sandbox_reuse_zeroing", sandbox_reuse_zeroing),
    ("stack_register_restored_after_tampering", stack_register_restored_after_tampering),
    ("codec_round_trip", codec_round_trip),
];
