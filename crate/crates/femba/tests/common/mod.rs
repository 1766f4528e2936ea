#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use femba::container::{Container, Entry};
use femba::recording::window_name;
use femba_core::signal::RawRecording;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn femba(args: &[&str], threads: usize) -> Output {
    Command::new(env!("CARGO_BIN_EXE_femba")).args(args).env("FEMBA_THREADS", threads.to_string()).output().expect("spawn femba")
}

pub fn ok(args: &[&str]) -> String {
    let o = femba(args, 2);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

pub fn code(args: &[&str]) -> i32 {
    femba(args, 2).status.code().expect("exit code")
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

pub fn micro_config(dir: &Path) -> PathBuf {
    let path = dir.join("micro.toml");
    std::fs::write(&path, "model = \"micro\"\nn_classes = 3\n").unwrap();
    path
}

/// Archive of `n` random 3 x 32 windows (the micro input shape).
pub fn micro_archive(path: &Path, n: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut c = Container::new();
    for i in 0..n {
        let v: Vec<f32> = (0..96).map(|t| (0.3 * t as f32 + i as f32).sin() + rng.random_range(-0.4..0.4)).collect();
        c.push(Entry::f32(&window_name(i), &[3, 32], &v));
    }
    c.write(path).unwrap();
}

/// 22-channel 256 Hz recording of `n` samples.
pub fn recording(n: usize, seed: u64) -> RawRecording {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = (0..22)
        .map(|c| (0..n).map(|t| 20.0 * (t as f64 * 0.05 * (c + 1) as f64).sin() + rng.random_range(-5.0..5.0)).collect())
        .collect();
    RawRecording::new(ch, 256.0).unwrap()
}
