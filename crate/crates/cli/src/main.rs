// SPDX-License-Identifier: (Apache-2.0 OR MIT)

//! Command-line front end: `rewrite`, `run`, `inject`, `bench` and `disasm`.
//!
//! Exit codes: 0 success, 1 guest fault during `run`, 2 usage or configuration error,
//! 3 when an injection campaign records an escape.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bpfsandbox::context::CopyMode;
use bpfsandbox::engine::{RunOptions, RunStatus, World};
use bpfsandbox::harness::{self, InjectionStrategy};
use bpfsandbox::isa::{assemble, decode, disassemble, encode, Program};
use bpfsandbox::mode::Mode;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bpfsandbox", version, about = "Run eBPF-style programs under masked or tag-checked sandboxes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Strategy {
    Uniform,
    SentinelOverwrite,
}

#[derive(Clone, Copy, ValueEnum)]
enum CopyArg {
    Partial,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Print the instrumented program and its instrumentation report.
    Rewrite {
        #[arg(long)]
        program: PathBuf,
        /// Scenario JSON file, or the name of a builtin scenario.
        #[arg(long)]
        scenario: String,
        #[arg(long, default_value = "sfi")]
        mode: Mode,
        /// Output file; `.bin` selects the binary encoding, anything else assembly.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Execute a program once.
    Run {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        mode: Mode,
        #[arg(long, default_value_t = 0)]
        core: u32,
        #[arg(long, value_enum, default_value = "partial")]
        copy: CopyArg,
        #[arg(long)]
        json: bool,
    },
    /// Run a seeded fault-injection campaign.
    Inject {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        scenario: String,
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_enum, default_value = "uniform")]
        strategy: Strategy,
        /// Include every per-trial record in the JSON output.
        #[arg(long)]
        records: bool,
        #[arg(long)]
        json: bool,
    },
    /// Cost breakdown of the builtin scenarios.
    Bench {
        #[arg(long, default_value = "builtin")]
        scenario_set: String,
        #[arg(long, value_delimiter = ',', default_value = "vanilla,sfi,mte,mte-min")]
        modes: Vec<Mode>,
        #[arg(long, default_value_t = 10)]
        reps: u32,
        #[arg(long)]
        json: bool,
    },
    /// Print a program in assembly.
    Disasm {
        #[arg(long)]
        program: PathBuf,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn usage(message: impl std::fmt::Display) -> Failure {
    Failure { code: 2, message: message.to_string() }
}

fn read_program(path: &Path) -> Result<Program, Failure> {
    let bytes = std::fs::read(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "bin") {
        decode(&bytes).map_err(|e| usage(format!("{}: {e}", path.display())))
    } else {
        let text = String::from_utf8(bytes).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        assemble(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
    }
}

fn read_world(scenario: &str) -> Result<World, Failure> {
    let path = Path::new(scenario);
    let text = if path.exists() {
        std::fs::read_to_string(path).map_err(|e| usage(format!("{scenario}: {e}")))?
    } else if let Some(b) = harness::builtin(scenario) {
        b.config.to_string()
    } else {
        return Err(usage(format!("{scenario}: no such file or builtin scenario")));
    };
    World::from_json(&text).map_err(|e| usage(format!("{scenario}: {e}")))
}

fn execute(command: Command) -> Result<(), Failure> {
    match command {
        Command::Rewrite { program, scenario, mode, out } => {
            let p = read_program(&program)?;
            let world = read_world(&scenario)?;
            let lp = world.load(&p, mode, 0).map_err(usage)?;
            let report = serde_json::to_string(&lp.report).expect("report serializes");
            match out {
                Some(path) => {
                    let bytes = if path.extension().is_some_and(|e| e == "bin") {
                        encode(&lp.exec)
                    } else {
                        disassemble(&lp.exec).into_bytes()
                    };
                    std::fs::write(&path, bytes).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                    println!("{report}");
                }
                None => {
                    print!("{}", disassemble(&lp.exec));
                    println!("; report: {report}");
                }
            }
            Ok(())
        }
        Command::Run { program, scenario, mode, core, copy, json } => {
            let p = read_program(&program)?;
            let mut world = read_world(&scenario)?;
            let lp = world.load(&p, mode, core).map_err(usage)?;
            let copy_mode = match copy {
                CopyArg::Partial => CopyMode::Partial,
                CopyArg::Full => CopyMode::Full,
            };
            let r = world
                .run(&lp, &RunOptions { copy_mode, ..Default::default() })
                .map_err(|e| Failure { code: 1, message: e.to_string() })?;
            if json {
                println!("{}", r.to_json());
            } else {
                println!(
                    "r0={} status={}",
                    r.r0 as i64,
                    if r.status == RunStatus::Completed { "completed" } else { "faulted" }
                );
                if let Some(f) = r.fault {
                    println!("fault={:?} pc={} addr={:#x}", f.kind, f.pc, f.addr);
                }
                let c = &r.cost;
                println!(
                    "cost program={} context={} tagging={} sandbox={} access={} total={}",
                    c.program,
                    c.context,
                    c.tagging,
                    c.sandbox,
                    c.access,
                    c.total()
                );
                println!("steps={}", r.steps);
                for entry in &r.log {
                    println!("log {}", entry.iter().map(|b| format!("{b:02x}")).collect::<String>());
                }
            }
            if r.status == RunStatus::Faulted {
                return Err(Failure { code: 1, message: String::new() });
            }
            Ok(())
        }
        Command::Inject { program, scenario, mode, trials, seed, strategy, records, json } => {
            let p = read_program(&program)?;
            let world = read_world(&scenario)?;
            let strategy = match strategy {
                Strategy::Uniform => InjectionStrategy::Uniform,
                Strategy::SentinelOverwrite => InjectionStrategy::SentinelOverwrite,
            };
            let mut report = harness::inject_faults_with(&world, &p, mode, trials, seed, strategy).map_err(usage)?;
            let escapes = report.escapes;
            if json {
                if !records {
                    report.records.retain(|r| r.outcome == harness::Outcome::Escaped);
                }
                println!("{}", report.to_json());
            } else {
                println!("{}", report.summary());
            }
            if escapes > 0 {
                return Err(Failure { code: 3, message: format!("{escapes} injected accesses escaped") });
            }
            Ok(())
        }
        Command::Bench { scenario_set, modes, reps, json } => {
            let report = harness::run_microbench(&scenario_set, &modes, reps).map_err(usage)?;
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.render_table());
            }
            Ok(())
        }
        Command::Disasm { program } => {
            print!("{}", disassemble(&read_program(&program)?));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            if !f.message.is_empty() {
                eprintln!("error: {}", f.message);
            }
            ExitCode::from(f.code)
        }
    }
}
