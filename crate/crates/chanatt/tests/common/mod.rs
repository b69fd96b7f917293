#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use chanatt::cifar::{RECORDS_PER_FILE, TEST_FILE, TRAIN_FILES};
use chanatt_core::data::RECORD_BYTES;

/// One batch file of `records` records. Labels cycle through the classes;
/// pixels follow a cheap label-dependent pattern.
pub fn batch_bytes(records: usize, salt: u8) -> Vec<u8> {
    let mut out = Vec::with_capacity(records * RECORD_BYTES);
    for i in 0..records {
        let label = (i % 10) as u8;
        out.push(label);
        for j in 0..RECORD_BYTES - 1 {
            let channel = (j / 1024) as u8;
            out.push(label.wrapping_mul(23).wrapping_add(channel.wrapping_mul(41)).wrapping_add((j % 32) as u8 * 3).wrapping_add(salt ^ (i as u8)));
        }
    }
    out
}

/// Writes a complete, canonically named CIFAR-10 binary directory.
pub fn write_fake_cifar(dir: &Path) {
    std::fs::create_dir_all(dir).unwrap();
    for (k, name) in TRAIN_FILES.iter().chain([&TEST_FILE]).enumerate() {
        std::fs::write(dir.join(name), batch_bytes(RECORDS_PER_FILE, k as u8)).unwrap();
    }
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_chanatt"))
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).env_remove("CHANATT_DATA_DIR").output().unwrap()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Replaces every `"timestamp": <n>` with zero.
pub fn strip_timestamps(text: &str) -> String {
    let mut out = String::new();
    for line in text.lines() {
        match line.split_once("\"timestamp\": ") {
            Some((head, _)) => out.push_str(&format!("{head}\"timestamp\": 0")),
            None => out.push_str(line),
        }
        out.push('\n');
    }
    out
}
