#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// Two training sites and one deployment site, sized to finish in seconds.
pub const TINY: &str = r#"
[system]
n_tx = 8
n_users = 2

[data]
samples = 200

[[channel]]
env_id = "a"
los = true
rician_k = 5.0
path_loss_db = 145.0
seed = 1

[[channel]]
env_id = "b"
los = false
rician_k = 0.0
mean_azimuth = 1.2
path_loss_db = 145.0
seed = 2

[[channel]]
env_id = "c"
los = false
rician_k = 0.0
mean_azimuth = 0.6
path_loss_db = 145.0
seed = 3

[model]
embed_dim = 8
ffn_dim = 16
n_heads = 2
n_layers = 1
dropout = 0.05
input_scale_db = 145.0

[train]
batch_size = 16
pretrain_epochs = 2
epochs = 2
rmax_samples = 10
chunk_size = 8

[adapt]
epochs = 2
head_samples = 32
local_samples = 16
profile_samples = 8
batch_size = 16
rmax_samples = 10
n_select = 1

[eval]
deploy_sites = ["c"]
n_eval = 16
sweep_points = 32
"#;

pub fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

pub fn mimo_fm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimo-fm"))
        .current_dir(dir)
        .env_remove("MIMO_FM_REPORT_DIR")
        .args(args)
        .output()
        .unwrap()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Every file under `root`, relative path and contents, sorted by path.
pub fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, Vec<u8>)>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.push((
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    std::fs::read(&path).unwrap(),
                ));
            }
        }
    }
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}
