//! Compiles a small C program against the generated header and the static
//! library, then runs it.

use std::path::PathBuf;
use std::process::Command;

#[test]
fn c_program_links_and_runs() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let header_dir = manifest.join("include");
    assert!(header_dir.join("modalprompt.h").exists());
    // the static library sits next to the test binary's deps directory
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libmodalprompt_ffi.a");
    // `cargo test` does not refresh the staticlib, so build it explicitly
    let cargo = std::env::var("CARGO").unwrap_or_else(|_| "cargo".into());
    let _ = Command::new(cargo)
        .args(["build", "-q", "-p", "modalprompt-ffi", "--lib"])
        .status();
    if !lib.exists() || Command::new("cc").arg("--version").output().is_err() {
        eprintln!(
            "skipping: no C compiler or static library at {}",
            lib.display()
        );
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let bin = dir.path().join("smoke");
    let status = Command::new("cc")
        .arg(manifest.join("tests/smoke.c"))
        .arg("-I")
        .arg(&header_dir)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        out.status.success(),
        "{stdout}\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout.contains("last.mean 55.06"), "{stdout}");
}
