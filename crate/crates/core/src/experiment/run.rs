//! The `simulate`, `baseline`, `serve`, `join` and `validate` runners.

use std::fs;
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::build::{self, DomainData};
use super::config::ExperimentConfig;
use super::output::{self, RunManifest};
use super::RunError;
use crate::eval::{self, MetricsReport, RoundReport};
use crate::federation::{batch_seed, gradient_descent, Coordinator, FederationError};
use crate::transport::{self, ClientSession, JoinOutcome, ServerOptions};
use crate::{Dataset, ParamVector};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Overrides the config's `output_dir`.
    pub out: Option<PathBuf>,
    pub force: bool,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub rounds: u32,
    pub final_metrics: MetricsReport,
    pub theta: ParamVector,
}

fn out_dir(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf, RunError> {
    opts.out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| RunError::Usage("no output directory: pass --out or set output_dir".into()))
}

fn timeout(cfg: &ExperimentConfig) -> Duration {
    Duration::from_secs_f64(cfg.transport.timeout_secs)
}

fn resolve_addr(raw: &str) -> Result<SocketAddr, RunError> {
    raw.to_socket_addrs()
        .map_err(|e| RunError::Usage(format!("bad address `{raw}`: {e}")))?
        .next()
        .ok_or_else(|| RunError::Usage(format!("address `{raw}` did not resolve")))
}

fn finish(
    cfg: &ExperimentConfig,
    dir: &Path,
    command: &str,
    started_at: String,
    rounds: u32,
    mut files: Vec<&str>,
) -> Result<(), RunError> {
    fs::write(dir.join(output::CONFIG_COPY), cfg.to_canonical_toml())?;
    files.push(output::CONFIG_COPY);
    let manifest = RunManifest {
        artifact_version: output::ARTIFACT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        config_hash: cfg.hash_hex(),
        seed: cfg.seed,
        started_at,
        finished_at: output::timestamp(),
        rounds_completed: rounds,
        files: output::inventory(dir, &files)?,
    };
    output::write_manifest(dir, &manifest)?;
    Ok(())
}

fn summarize(dir: PathBuf, reports: &[RoundReport], theta: ParamVector) -> RunSummary {
    let last = reports.last().expect("at least one round");
    RunSummary {
        out_dir: dir,
        rounds: last.round,
        final_metrics: last.metrics,
        theta,
    }
}

/// Run every round in process and write the artifacts.
pub fn simulate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, RunError> {
    let dir = out_dir(cfg, opts)?;
    output::prepare_dir(&dir, opts.force)?;
    let started = output::timestamp();
    let (mut fed, _) = build::federation(cfg)?;
    let mut reports = Vec::with_capacity(cfg.schedule.rounds as usize);
    while fed.coordinator.completed_rounds() < cfg.schedule.rounds {
        let report = fed.run_round()?;
        log::info!(
            "round {}: accuracy {:.4}, f1 {:.4}",
            report.round,
            report.metrics.accuracy,
            report.metrics.f1
        );
        reports.push(report);
    }
    let files = output::write_round_reports(&dir, &reports)?;
    finish(cfg, &dir, "simulate", started, cfg.schedule.rounds, files)?;
    Ok(summarize(dir, &reports, fed.theta().clone()))
}

/// Per-round metrics of centralized training on all clients' data pooled.
pub fn baseline_trajectory(
    cfg: &ExperimentConfig,
    pooled: &Dataset,
    test: &Dataset,
) -> Result<(Vec<(u32, MetricsReport)>, ParamVector), RunError> {
    let spec = &cfg.model;
    let s = &cfg.schedule;
    let mut theta = vec![0.0; spec.param_dim()];
    let mut rows = Vec::with_capacity(s.rounds as usize);
    for round in 1..=s.rounds {
        theta = gradient_descent(
            spec,
            &theta,
            pooled,
            s.learning_rate_at(round),
            s.local_epochs,
            s.batch_size,
            batch_seed(cfg.seed, 0, round),
        )
        .ok_or_else(|| FederationError::RoundAborted { round, reason: "baseline training diverged".into() })?;
        let params = ParamVector::new(theta.clone())?;
        let cm = eval::confusion(spec, &params, test)?;
        rows.push((round, eval::metrics(&cm)?));
    }
    Ok((rows, ParamVector::new(theta)?))
}

/// Train the same model on the pooled shards for `T * E` epochs.
pub fn baseline(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary, RunError> {
    let dir = out_dir(cfg, opts)?;
    output::prepare_dir(&dir, opts.force)?;
    let started = output::timestamp();
    let (fed, _) = build::federation(cfg)?;
    let shards: Vec<&Dataset> = fed.clients.iter().map(|c| &c.data).collect();
    let pooled = Dataset::concat(&shards)?;
    let test = &fed.coordinator.evaluator.pooled;
    let (rows, theta) = baseline_trajectory(cfg, &pooled, test)?;
    output::write_metrics(&dir, output::BASELINE_METRICS, &rows)?;
    finish(cfg, &dir, "baseline", started, cfg.schedule.rounds, vec![output::BASELINE_METRICS])?;
    let final_metrics = rows.last().expect("at least one round").1;
    Ok(RunSummary { out_dir: dir, rounds: cfg.schedule.rounds, final_metrics, theta })
}

/// Coordinate remote clients from `listener` and write the same artifacts as
/// [`simulate`].
pub fn serve_on(cfg: &ExperimentConfig, opts: &RunOptions, listener: TcpListener) -> Result<RunSummary, RunError> {
    let dir = out_dir(cfg, opts)?;
    output::prepare_dir(&dir, opts.force)?;
    let started = output::timestamp();
    let domains: Vec<DomainData> = (0..cfg.domains.len())
        .map(|i| build::load_domain(cfg, i))
        .collect::<Result<_, _>>()?;
    let evaluator = build::evaluator(cfg, &domains)?;
    let secure = build::secure_aggregation(cfg)?;
    let server_opts = ServerOptions {
        config_hash: cfg.hash(),
        expected_clients: cfg.client_count(),
        timeout: timeout(cfg),
    };
    log::info!("waiting for {} clients on {}", cfg.client_count(), listener.local_addr()?);
    let outcome = transport::serve(listener, server_opts, |sizes| {
        let roster = build::roster(cfg, sizes);
        let policy = build::policy(cfg, &roster);
        Coordinator::new(cfg.model.clone(), cfg.schedule.clone(), policy, secure, cfg.seed, roster, evaluator)
    })?;
    let files = output::write_round_reports(&dir, &outcome.reports)?;
    finish(cfg, &dir, "serve", started, outcome.coordinator.completed_rounds(), files)?;
    Ok(summarize(dir, &outcome.reports, outcome.coordinator.theta().clone()))
}

pub fn serve(cfg: &ExperimentConfig, opts: &RunOptions, listen: Option<&str>) -> Result<RunSummary, RunError> {
    if cfg.client_count() == 0 {
        return Err(RunError::Usage("no clients to serve".into()));
    }
    let addr = resolve_addr(listen.unwrap_or(&cfg.transport.listen))?;
    let listener = TcpListener::bind(addr)?;
    serve_on(cfg, opts, listener)
}

/// Take part in a remote run as `client_id`.
pub fn join(cfg: &ExperimentConfig, server: Option<&str>, client_id: u32) -> Result<JoinOutcome, RunError> {
    let addr = resolve_addr(server.unwrap_or(&cfg.transport.server))?;
    let session = ClientSession {
        client: build::single_client(cfg, client_id)?,
        spec: cfg.model.clone(),
        schedule: cfg.schedule.clone(),
        secure: build::secure_aggregation(cfg)?,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    Ok(transport::join(addr, &session, timeout(cfg))?)
}

/// What `validate` reports about a config.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSummary {
    pub config_hash: String,
    pub clients: u32,
    pub param_dim: usize,
    /// `(domain, train size, test size, shard sizes)`.
    pub domains: Vec<(String, usize, usize, Vec<usize>)>,
}

/// Load every domain and partition it without training.
pub fn validate(cfg: &ExperimentConfig) -> Result<ValidationSummary, RunError> {
    let mut domains = Vec::new();
    for i in 0..cfg.domains.len() {
        let d = build::load_domain(cfg, i)?;
        let shards = build::client_shards(cfg, i, &d.train)?;
        domains.push((d.name, d.train.len(), d.test.len(), shards.iter().map(Dataset::len).collect()));
    }
    Ok(ValidationSummary {
        config_hash: cfg.hash_hex(),
        clients: cfg.client_count(),
        param_dim: cfg.model.param_dim(),
        domains,
    })
}
