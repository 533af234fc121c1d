// SPDX-License-Identifier: (Apache-2.0 OR MIT)

mod common;

use bpfsandbox::context::CopyMode;

use common::check_program;

pub const PROGRAMS: u64 = 1000;

#[test]
fn thousand_programs_agree_with_the_oracle() {
    let failures: Vec<String> =
        (0..PROGRAMS).filter_map(|seed| check_program(seed, CopyMode::Partial).err()).take(3).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n\n"));
}

#[test]
fn full_copy_is_equally_transparent() {
    let failures: Vec<String> =
        (0..200).filter_map(|seed| check_program(10_000 + seed, CopyMode::Full).err()).take(3).collect();
    assert!(failures.is_empty(), "{}", failures.join("\n\n"));
}
