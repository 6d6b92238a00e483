#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A one-layer model small enough for sub-second runs.
pub const TINY: &str = r#"
n_layers = 1
d_model = 32
n_heads = 2
n_kv_heads = 1
head_dim = 16
block_size = 8
top_k = 2
seq_len = 32
batch_size = 2
total_steps = 20
warmup_steps = 2
eval_interval = 10
corpus_tokens = 6000
doc_len = 64
lr = 0.003
"#;

pub fn write_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(
        &p,
        format!(
            "{TINY}\nout_dir = \"{}\"\n{extra}\n",
            dir.join("runs").display()
        ),
    )
    .unwrap();
    p
}

pub fn ssa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssa"))
        .args(args)
        .env_remove(ssa_lab::OUT_ROOT_ENV)
        .output()
        .expect("run ssa")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}
