//! The binary must behave like other line-oriented tools when its
//! stdout reader disappears mid-stream: die on SIGPIPE, no panic.

#![cfg(unix)]

use std::os::unix::process::ExitStatusExt;
use std::process::{Command, Stdio};

use spurscan::synth::{make_fixture, FixtureSpec, RegionFill, SectionSpec};

#[test]
fn closed_pipe_kills_the_process_quietly() {
    // A section table large enough that `map --json` emits well past
    // the 64 KiB pipe buffer, guaranteeing a blocked write that turns
    // into EPIPE once the read end closes.
    let n_sections = 1200u32;
    let table_end = 0x40 + 24 + 0xF0 + 40 * n_sections;
    let size_of_headers = table_end.next_multiple_of(0x200);
    let mut cursor = size_of_headers;
    let sections = (0..n_sections)
        .map(|i| {
            let s = SectionSpec {
                name: format!(".s{i}"),
                ptr_raw: cursor,
                size_raw: 0x40,
                virtual_size: 0x20,
                executable: i == 0,
            };
            cursor += 0x40;
            s
        })
        .collect();
    let spec = FixtureSpec {
        e_lfanew: 0x40,
        size_of_headers,
        sections,
        overlay_len: 0,
        fill: RegionFill::UNIFORM,
    };
    let tmp = tempfile::tempdir().unwrap();
    let pe = tmp.path().join("wide.exe");
    std::fs::write(&pe, make_fixture(&spec, 3).unwrap()).unwrap();

    let mut child = Command::new(env!("CARGO_BIN_EXE_spurscan"))
        .args(["map", pe.to_str().unwrap(), "--json"])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    drop(child.stdout.take());

    let out = child.wait_with_output().unwrap();
    assert_eq!(
        out.status.signal(),
        Some(libc::SIGPIPE),
        "expected death by SIGPIPE, got {:?}",
        out.status
    );
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(!stderr.contains("panicked"), "panicked on broken pipe:\n{stderr}");
}
