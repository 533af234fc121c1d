// SPDX-License-Identifier: (Apache-2.0 OR MIT)

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpfsandbox")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn scenario_file(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/scenarios").join(name).to_string_lossy().into_owned()
}

fn write_program(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_returns_r0() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_program(&dir, "ret.asm", "mov64 r0, 42\nexit\n");
    for mode in ["vanilla", "sfi", "mte", "mte-min"] {
        let o = bin(&["run", "--program", p.to_str().unwrap(), "--scenario", "sockfilter", "--mode", mode]);
        assert_eq!(o.status.code(), Some(0), "{mode}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).starts_with("r0=42 status=completed"), "{}", stdout(&o));
    }
}

#[test]
fn run_json_reports_costs() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_program(&dir, "ret.asm", "mov64 r0, 7\nexit\n");
    let o = bin(&["run", "--program", p.to_str().unwrap(), "--scenario", "sockfilter", "--mode", "sfi", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["r0"], 7);
    assert_eq!(v["status"], "completed");
    let c = &v["cost"];
    let parts: u64 =
        ["program", "context", "tagging", "sandbox", "access"].iter().map(|k| c[k].as_u64().unwrap()).sum();
    assert_eq!(c["total"].as_u64(), Some(parts));
}

#[test]
fn unsupported_mode_is_a_usage_error() {
    let p = scenario_file("sockfilter.asm");
    let o = bin(&["run", "--program", &p, "--scenario", "sockfilter", "--mode", "async-mte"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_scenario_is_a_usage_error() {
    let p = scenario_file("sockfilter.asm");
    let o = bin(&["run", "--program", &p, "--scenario", "no-such-scenario", "--mode", "sfi"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn guest_fault_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_program(&dir, "stray.asm", "mov64 r1, 4660\nmov64 r2, 0\nmov64 r3, 1\ncall 6\nmov64 r0, 0\nexit\n");
    let s = write_program(&dir, "bare.json", r#"{"name": "bare"}"#);
    let o = bin(&["run", "--program", p.to_str().unwrap(), "--scenario", s.to_str().unwrap(), "--mode", "mte"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("fault=UnknownObject"), "{}", stdout(&o));
}

#[test]
fn scenario_file_path_is_accepted() {
    let o = bin(&[
        "run",
        "--program",
        &scenario_file("sockex1.asm"),
        "--scenario",
        &scenario_file("sockex1.json"),
        "--mode",
        "sfi",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn sfi_campaign_is_contained() {
    let p = scenario_file("sockfilter.asm");
    let o = bin(&[
        "inject",
        "--program",
        &p,
        "--scenario",
        "sockfilter",
        "--mode",
        "sfi",
        "--trials",
        "500",
        "--seed",
        "3",
        "--json",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["contained"], 500);
    assert_eq!(v["escapes"], 0);
}

#[test]
fn vanilla_sentinel_overwrite_escapes() {
    let p = scenario_file("sockfilter.asm");
    let o = bin(&[
        "inject",
        "--program",
        &p,
        "--scenario",
        "sockfilter",
        "--mode",
        "vanilla",
        "--trials",
        "50",
        "--seed",
        "3",
        "--strategy",
        "sentinel-overwrite",
    ]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn rewrite_to_binary_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sockfilter.bin");
    let p = scenario_file("sockfilter.asm");
    let o =
        bin(&["rewrite", "--program", &p, "--scenario", "sockfilter", "--mode", "sfi", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert!(report.is_object());
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(bytes.len() % 8, 0);
    let d = bin(&["disasm", "--program", out.to_str().unwrap()]);
    assert_eq!(d.status.code(), Some(0));
    let text = stdout(&d);
    assert_eq!(text.lines().count(), bytes.len() / 8, "{text}");
}

#[test]
fn binary_input_runs_like_assembly() {
    let dir = tempfile::tempdir().unwrap();
    let asm = write_program(&dir, "ret.asm", "mov64 r0, 5\nadd64 r0, 4\nexit\n");
    let raw = [
        0xb7u8, 0x00, 0x00, 0x00, 0x05, 0x00, 0x00, 0x00, 0x07, 0x00, 0x00, 0x00, 0x04, 0x00, 0x00, 0x00, 0x95, 0x00,
        0x00, 0x00, 0x00, 0x00, 0x00, 0x00,
    ];
    let bin_path = dir.path().join("ret.bin");
    std::fs::write(&bin_path, raw).unwrap();
    let a = bin(&["disasm", "--program", asm.to_str().unwrap()]);
    let b = bin(&["disasm", "--program", bin_path.to_str().unwrap()]);
    assert_eq!(stdout(&a), stdout(&b));
    let r = bin(&["run", "--program", bin_path.to_str().unwrap(), "--scenario", "sockfilter", "--mode", "mte-min"]);
    assert!(stdout(&r).starts_with("r0=9 "), "{}", stdout(&r));
}

#[test]
fn bench_lists_every_builtin() {
    let o = bin(&["bench", "--reps", "1"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for s in ["sockfilter", "sockex1", "sockex2", "ddos", "vfs"] {
        assert!(text.contains(s), "{s} missing from\n{text}");
    }
}
