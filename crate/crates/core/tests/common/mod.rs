#![allow(dead_code)]

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::thread;

use fedmesh::experiment::{self, ExperimentConfig, RunError, RunOptions, RunSummary};
use fedmesh::transport::JoinOutcome;

pub fn bundled_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../cli/examples/three_domains.cfg")
}

pub fn bundled(overrides: &[&str]) -> ExperimentConfig {
    let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::load(bundled_config_path(), &overrides).expect("bundled config loads")
}

/// A small config with one synthetic domain.
pub fn one_domain(clients: usize, rounds: u32, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
seed = 11
tracked_indices = [0, 1]
{extra}

[model]
feature_dim = 4
class_count = 3

[schedule]
rounds = {rounds}
local_epochs = 2
learning_rate = 0.2

[[domains]]
name = "medical"
recipe = "medical"
train_samples = 240
test_samples = 60
clients = {clients}
"#
    );
    ExperimentConfig::parse(&text, &[]).expect("test config parses")
}

pub fn options(dir: &Path) -> RunOptions {
    RunOptions { out: Some(dir.to_path_buf()), force: false }
}

/// Serve `cfg` on an ephemeral loopback port and join every client from its own thread.
pub fn serve_and_join(cfg: &ExperimentConfig, dir: &Path) -> (Result<RunSummary, RunError>, Vec<Result<JoinOutcome, RunError>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let server = {
        let cfg = cfg.clone();
        let opts = options(dir);
        thread::spawn(move || experiment::serve_on(&cfg, &opts, listener))
    };
    let clients: Vec<_> = (0..cfg.client_count())
        .map(|id| {
            let cfg = cfg.clone();
            let addr = addr.clone();
            thread::spawn(move || experiment::join(&cfg, Some(&addr), id))
        })
        .collect();
    let joined = clients.into_iter().map(|h| h.join().unwrap()).collect();
    (server.join().unwrap(), joined)
}

pub fn read(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}
