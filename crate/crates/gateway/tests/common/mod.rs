#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use chrono::NaiveDateTime;
use sha2::{Digest, Sha256};
use usbbridge::blockdev::BlockImage;
use usbbridge::fat::{self, FatVariant, FatVolume, FixedClock, MkfsOptions};

pub const FIXED_TIME: &str = "2024-05-01T12:00:00";

pub fn fixed_clock() -> Arc<FixedClock> {
    Arc::new(FixedClock(FIXED_TIME.parse::<NaiveDateTime>().unwrap()))
}

pub struct Run {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the `usbbridge` binary with `state` as its port-state file.
pub fn cli(state: &Path, args: &[&str]) -> Run {
    let Output { status, stdout, stderr } = Command::new(env!("CARGO_BIN_EXE_usbbridge"))
        .args(args)
        .env("USBBRIDGE_STATE", state)
        .env("USBBRIDGE_FIXED_TIME", FIXED_TIME)
        .output()
        .unwrap();
    Run {
        code: status.code().unwrap(),
        stdout: String::from_utf8(stdout).unwrap(),
        stderr: String::from_utf8(stderr).unwrap(),
    }
}

pub fn image(dir: &Path, name: &str, sectors: u64, variant: FatVariant) -> PathBuf {
    let path = dir.join(name);
    let dev = BlockImage::create(&path, sectors).unwrap();
    let vol = fat::mkfs(dev, variant, &MkfsOptions::default(), fixed_clock()).unwrap();
    drop(vol.into_inner());
    path
}

pub fn bytes(len: usize, seed: u32) -> Vec<u8> {
    (0..len as u32).map(|i| (i.wrapping_mul(2654435761) ^ seed).to_le_bytes()[1]).collect()
}

/// Writes a fixed set of files and directories straight into `path`.
pub fn seed(path: &Path) {
    let dev = BlockImage::open(path, false).unwrap();
    let mut v = FatVolume::mount_with_clock(dev, fixed_clock()).unwrap();
    v.write_file("/one.bin", &bytes(200_000, 1), false).unwrap();
    v.create_dir("/tree").unwrap();
    v.create_dir("/tree/sub").unwrap();
    v.write_file("/tree/a.txt", b"alpha", false).unwrap();
    v.write_file("/tree/sub/Long Name Here.dat", &bytes(70_000, 2), false).unwrap();
    v.into_inner().flush().unwrap();
}

pub fn sha(path: &Path) -> String {
    format!("{:x}", Sha256::digest(std::fs::read(path).unwrap()))
}
