#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

pub const WIDTH: usize = 64;
pub const HEIGHT: usize = 64;
pub const FRAMES: usize = 8;
pub const INPUT: &str = "pattern_64x64_8f.yuv";
pub const GOLDEN: &str = "golden_int16_qp32.nvc";
pub const GOLDEN_RECON: &str = "golden_int16_qp32.recon.sha256";
pub const TRUNCATED: &str = "truncated.nvc";
pub const CORRUPTED: &str = "corrupted_magic.nvc";

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn nvc<I, S>(args: I) -> Output
where
    I: IntoIterator<Item = S>,
    S: AsRef<std::ffi::OsStr>,
{
    Command::new(env!("CARGO_BIN_EXE_nvc")).args(args).output().expect("run nvc")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn ok(o: Output) -> Output {
    assert!(o.status.success(), "nvc failed: {}", stderr(&o));
    o
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn dims() -> [String; 4] {
    ["--width".into(), WIDTH.to_string(), "--height".into(), HEIGHT.to_string()]
}

/// Encodes the fixture input with seeded defaults plus `extra` flags.
pub fn encode_fixture(out: &Path, extra: &[&str]) -> Output {
    let mut args: Vec<String> = vec!["encode".into(), "-i".into(), fixture(INPUT).display().to_string()];
    args.extend(dims());
    args.extend(["-o".into(), out.display().to_string()]);
    args.extend(extra.iter().map(|s| s.to_string()));
    nvc(args)
}

/// `(frame index, qp)` pairs from `nvc info`.
pub fn chunk_qps(info: &str) -> Vec<(usize, f64)> {
    info.lines()
        .filter_map(|l| {
            let mut w = l.split_whitespace();
            (w.next()? == "chunk").then_some(())?;
            let i = w.next()?.parse().ok()?;
            (w.next()? == "qp").then_some(())?;
            Some((i, w.next()?.parse().ok()?))
        })
        .collect()
}
